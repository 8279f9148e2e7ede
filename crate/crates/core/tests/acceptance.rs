#![allow(clippy::needless_range_loop, clippy::field_reassign_with_default)]

//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion that ran failed.
//!
//! Criteria 5 to 7 train six full-size models (three seeds, with and
//! without the fine-annotation term). They only run when
//! `PROTO_MARGIN_FULL=1` is set; build with `--release` for that.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use protomargin::autodiff::{grad_check, GradCheckOptions, Graph, Tensor};
use protomargin::config::RunConfig;
use protomargin::losses::{build_objective, total_objective, FineNormalization, LossConfig, LossItem};
use protomargin::metrics::{activation_precision_of_maps, auroc, cohens_kappa, EvalReport};
use protomargin::pipeline::{checkpoint_path, eval_run, generate, train_run};
use protomargin::protonet::{load_checkpoint, ArchConfig, ModelParams, ParamVars, Provenance};
use protomargin::synthgen::{generate_corpus, manifest_sha256, CorpusConfig, Split};
use protomargin::trainer::{
    param_hashes, project_prototypes, prune_duplicates, train, training_latents, TrainConfig, TrainData, TrainItem,
};
use protomargin::MarginClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- toys

fn tiny_model(size: usize, k: usize, seed: u64) -> ModelParams {
    let arch = ArchConfig {
        image_size: size,
        block_channels: [2, 2, 3],
        latent_channels: 3,
        prototypes_per_class: 1 + seed as usize % 2,
        k,
        epsilon: 1e-4,
    };
    ModelParams::init(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

struct Toy {
    image: Vec<f64>,
    label: MarginClass,
    mask: Vec<u8>,
}

fn noise_toys(size: usize, n: usize, seed: u64) -> Vec<Toy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Toy {
            image: (0..size * size).map(|_| rng.gen()).collect(),
            label: MarginClass::ALL[(i + seed as usize) % 3],
            mask: (0..size * size).map(|_| rng.gen_range(0..2)).collect(),
        })
        .collect()
}

fn items(toys: &[Toy]) -> Vec<LossItem<'_>> {
    toys.iter()
        .map(|t| LossItem {
            image: &t.image,
            label: t.label,
            mask: Some(&t.mask),
        })
        .collect()
}

fn corpus_data(size: usize, per_class: usize, fine: usize, seed: u64) -> TrainData {
    let corpus = CorpusConfig {
        samples_per_class: [per_class; 3],
        image_size: size,
        confounder_strength: 0.5,
        ..Default::default()
    };
    let mut seen = HashMap::new();
    let items = generate_corpus(&corpus, seed)
        .unwrap()
        .into_iter()
        .map(|g| {
            let n = seen.entry(g.sample.margin_class).or_insert(0);
            *n += 1;
            TrainItem {
                id: g.id,
                image: g.sample.image,
                label: g.sample.margin_class,
                malignant: g.sample.malignant,
                lesion_mask: g.sample.lesion_mask,
                fine_mask: (*n <= fine).then_some(g.sample.fine_mask),
            }
        })
        .collect();
    TrainData::new(size, items).unwrap()
}

// ---------------------------------------------------------------- 1

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let names = ["CrsEnt", "Clst", "Sep", "Fine", "total"];
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..20u64 {
        let k = 1 + seed as usize % 3;
        let params = tiny_model(16, k, 500 + seed);
        let toys = noise_toys(16, 2, seed);
        let cfg = LossConfig {
            lambda_f: [0.001, 0.1, 1.0][seed as usize % 3],
            fine_normalization: [FineNormalization::None, FineNormalization::SqrtPixels][seed as usize % 2],
            ..Default::default()
        };
        let mut inputs: Vec<Tensor> = Vec::new();
        for l in &params.backbone {
            inputs.push(l.weight.clone());
            inputs.push(l.bias.clone());
        }
        inputs.extend(params.prototypes.iter().cloned());
        inputs.push(params.w1.clone());
        let layers = params.backbone.len();
        let m = params.num_prototypes();
        for (term, name) in names.iter().enumerate() {
            let report = grad_check(
                &inputs,
                |g: &mut Graph, v| {
                    let pv = ParamVars {
                        backbone: (0..layers).map(|i| (v[2 * i], v[2 * i + 1])).collect(),
                        prototypes: v[2 * layers..2 * layers + m].to_vec(),
                        w1: v[2 * layers + m],
                    };
                    let o = build_objective(g, &params, &pv, &items(&toys), &cfg, toys.len())?;
                    Ok([o.cross_entropy, o.cluster, o.separation, o.fine, o.total][term])
                },
                &GradCheckOptions {
                    max_coords_per_param: Some(5),
                    tie_tolerance: 0.0,
                    seed,
                    ..Default::default()
                },
            )
            .map_err(|e| e.to_string())?;
            check(
                report.passes(1e-3),
                format!("config {seed}, {name}: relative error {:.2e}", report.max_rel_err),
            )?;
            worst = worst.max(report.max_rel_err);
            checked += report.checked;
        }
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!(
        "20 configs x 5 terms, {checked} coordinates, worst relative error {worst:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut good, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                good += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    good / pairs
}

fn criterion_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let n = rng.gen_range(1..60);
        // coarse values make ties common
        let v: Vec<f64> = (0..n).map(|_| (rng.gen_range(-20..20) as f64) * 0.25).collect();
        let k = rng.gen_range(1..=n);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(v.clone()));
        let (t, b) = (g.topk_mean(x, k).unwrap(), g.bottomk_mean(x, k).unwrap());
        let (top, bottom) = (g.value(t).item(), g.value(b).item());
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[..k].iter().sum::<f64>() / k as f64;
        let hi = sorted[n - k..].iter().sum::<f64>() / k as f64;
        check((top - hi).abs() <= 1e-12 && (bottom - lo).abs() <= 1e-12, format!("top-k case {case}"))?;
    }
    for case in 0..1000 {
        let n = rng.gen_range(2..80);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..12) as f64) / 11.0).collect();
        let a = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        check((a - pairwise_auroc(&scores, &labels)).abs() <= 1e-12, format!("AUROC case {case}"))?;
    }

    // projection on a 10-image toy against an exhaustive scan
    let data = corpus_data(48, 4, 0, 11);
    let data = TrainData::new(48, data.items.into_iter().take(10).collect()).unwrap();
    let arch = ArchConfig {
        image_size: 48,
        block_channels: [4, 6, 8],
        latent_channels: 8,
        prototypes_per_class: 2,
        k: 3,
        epsilon: 1e-4,
    };
    let mut params = ModelParams::init(arch.clone(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let before = params.prototypes.clone();
    let latents = training_latents(&params, &data).map_err(|e| e.to_string())?;
    project_prototypes(&mut params, &data).map_err(|e| e.to_string())?;
    let (c, cells) = (arch.latent_channels, arch.grid_cells());
    for j in 0..params.num_prototypes() {
        let mut best = (f64::INFINITY, Vec::new());
        for (i, it) in data.items.iter().enumerate() {
            if it.label != params.prototype_class[j] {
                continue;
            }
            for cell in 0..cells {
                let patch: Vec<f64> = (0..c).map(|ch| latents[i].data()[ch * cells + cell]).collect();
                let d: f64 = patch.iter().zip(before[j].data()).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, patch);
                }
            }
        }
        check(params.prototypes[j].data() == best.1.as_slice(), format!("projection of prototype {j}"))?;
    }

    // hand-computed kappa and activation precision
    let k1 = cohens_kappa(&[0, 0, 1, 1, 0, 1], &[0, 0, 0, 1, 1, 1], 2).unwrap();
    check((k1 - 1.0 / 3.0).abs() < 1e-12, format!("kappa {k1}"))?;
    check(cohens_kappa(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap() == 1.0, "perfect kappa")?;
    let map: Vec<f64> = (0..400).map(|v| v as f64).collect();
    let mut mask = vec![1u8; 400];
    for m in &mut mask[380..390] {
        *m = 0;
    }
    check(activation_precision_of_maps(&[&map], &mask, 0.95).unwrap() == 0.5, "AP one half")?;
    check(activation_precision_of_maps(&[&map], &vec![0; 400], 0.95).unwrap() == 1.0, "AP all inside")?;
    check(activation_precision_of_maps(&[&map], &vec![1; 400], 0.95).unwrap() == 0.0, "AP all outside")?;
    Ok("top-k 1000/1000, AUROC 1000/1000, projection 10-image toy, kappa and AP examples".into())
}

// ---------------------------------------------------------------- 3

fn criterion_reduction() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let params = tiny_model(16, 1, 900 + seed);
        let toys = noise_toys(16, 4, 40 + seed);
        let cfg = LossConfig {
            lambda_f: 0.0,
            ..Default::default()
        };
        let b = total_objective(&params, &items(&toys), &cfg).map_err(|e| e.to_string())?;
        let (mut ce, mut clst, mut sep) = (0.0, 0.0, 0.0);
        let n = toys.len() as f64;
        for t in &toys {
            let z = params.latent(&t.image).unwrap();
            let cells = z.shape()[1] * z.shape()[2];
            let c = z.shape()[0];
            // brute-force min distance per prototype over every patch
            let dmin: Vec<f64> = params
                .prototypes
                .iter()
                .map(|p| {
                    (0..cells)
                        .map(|cell| (0..c).map(|ch| (z.data()[ch * cells + cell] - p.data()[ch]).powi(2)).sum::<f64>())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let eps = params.arch.epsilon;
            let s: Vec<f64> = dmin.iter().map(|d| ((d + 1.0) / (d + eps)).ln()).collect();
            let out = params.forward(&t.image).unwrap();
            for (j, sj) in s.iter().enumerate() {
                worst = worst.max((out.maps.pooled[j] - sj).abs());
            }
            let m = params.num_prototypes();
            let logits: Vec<f64> = (0..3)
                .map(|r| (0..m).map(|j| params.w1.data()[r * m + j] * s[j]).sum())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            ce += (lse - logits[t.label.index()]) / n;
            let own = |same: bool| {
                (0..m)
                    .filter(|&j| (params.prototype_class[j] == t.label) == same)
                    .map(|j| dmin[j])
                    .fold(f64::INFINITY, f64::min)
            };
            clst += own(true) / n;
            sep -= own(false) / n;
        }
        worst = worst.max((b.cross_entropy - ce).abs()).max((b.cluster - clst).abs()).max((b.separation - sep).abs());
        let total = ce + 0.8 * clst + 0.08 * sep;
        worst = worst.max((b.total - total).abs());
    }
    check(worst < 1e-9, format!("max deviation {worst:.2e}"))?;
    Ok(format!("10 random toys, max deviation from brute force {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn criterion_isolation() -> Outcome {
    let data = corpus_data(48, 4, 2, 7);
    let arch = ArchConfig {
        image_size: 48,
        block_channels: [4, 6, 8],
        latent_channels: 8,
        prototypes_per_class: 2,
        k: 3,
        epsilon: 1e-4,
    };
    let cfg = TrainConfig {
        epochs_per_cycle: 1,
        max_cycles: 2,
        convergence_tol: 0.0,
        coarse_per_batch: 6,
        fine_per_batch: 2,
        a3_steps: 20,
        b_steps: 200,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let init = ModelParams::init(arch, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let out = train(init.clone(), &data, &cfg, Some(dir.path()), &|_| {}).map_err(|e| e.to_string())?;
    let ck = |name: &str| {
        let p = load_checkpoint(&dir.path().join("checkpoints").join(name)).unwrap();
        (param_hashes(&p), p)
    };
    let mut prev = param_hashes(&init);
    let cycles = out.cycles.len();
    for c in 1..=cycles {
        let (a1, _) = ck(&format!("cycle{c}_a1.ckpt"));
        check(a1.backbone != prev.backbone && a1.prototypes != prev.prototypes, format!("A1 cycle {c} idle"))?;
        check(a1.w1 == prev.w1 && a1.h2 == prev.h2, format!("A1 cycle {c} touched W1 or h2"))?;
        let a1_count = load_checkpoint(&dir.path().join("checkpoints").join(format!("cycle{c}_a1.ckpt")))
            .unwrap()
            .num_prototypes();
        let (a2, a2p) = ck(&format!("cycle{c}_a2.ckpt"));
        check(
            a2.backbone == a1.backbone && a2.h2 == a1.h2,
            format!("A2 cycle {c} touched the backbone or h2"),
        )?;
        // A2 may only drop the W1 columns of pruned prototypes
        check(
            a2.w1 == a1.w1 || a2p.num_prototypes() < a1_count,
            format!("A2 cycle {c} changed W1 without pruning"),
        )?;
        let (a3, _) = ck(&format!("cycle{c}_a3.ckpt"));
        check(
            a3.backbone == a2.backbone && a3.prototypes == a2.prototypes && a3.h2 == a2.h2,
            format!("A3 cycle {c} touched more than W1"),
        )?;
        prev = a3;
    }
    let (b, _) = ck("stage_b.ckpt");
    check(
        b.backbone == prev.backbone && b.prototypes == prev.prototypes && b.w1 == prev.w1 && b.h2 != prev.h2,
        "stage B touched more than h2",
    )?;

    // every final prototype is bit-identical to the latent patch it names
    let p = &out.params;
    let grid = p.arch.grid_size();
    let c = p.arch.latent_channels;
    let mut provs = Vec::new();
    for j in 0..p.num_prototypes() {
        let prov = p.provenance[j].clone().ok_or("prototype without provenance")?;
        let item = data.items.iter().find(|it| it.id == prov.image_id).ok_or("unknown source")?;
        let z = p.latent(&item.image).unwrap();
        let cell = prov.row * grid + prov.col;
        let patch: Vec<f64> = (0..c).map(|ch| z.data()[ch * grid * grid + cell]).collect();
        check(p.prototypes[j].data() == patch.as_slice(), format!("prototype {j} is not its patch"))?;
        provs.push((p.prototype_class[j], prov.image_id, prov.row, prov.col));
    }
    let mut unique = provs.clone();
    unique.sort();
    unique.dedup();
    check(unique.len() == provs.len(), "duplicate provenance survived pruning")?;

    // pruning removes exactly the later members of each duplicate group
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..50 {
        let mut q = init.clone();
        let m = q.num_prototypes();
        q.provenance = (0..m)
            .map(|_| {
                Some(Provenance {
                    image_id: format!("img{}", rng.gen_range(0..3)),
                    row: rng.gen_range(0..2),
                    col: 0,
                })
            })
            .collect();
        let mut seen = std::collections::HashSet::new();
        let expected: Vec<usize> = (0..m)
            .filter(|&j| {
                let pr = q.provenance[j].as_ref().unwrap();
                !seen.insert((q.prototype_class[j], pr.image_id.clone(), pr.row, pr.col))
            })
            .collect();
        let removed = prune_duplicates(&mut q);
        check(removed == expected, format!("pruning trial {trial}: {removed:?} vs {expected:?}"))?;
        check(q.num_prototypes() == m - expected.len(), "pruned count")?;
    }
    Ok(format!(
        "{cycles} cycles: A1/A2/A3/B hashes isolated, {} prototypes bit-equal their patches, pruning exact on 50 trials",
        p.num_prototypes()
    ))
}

// ---------------------------------------------------------------- 5-7

struct FullRun {
    report: EvalReport,
    h2: [f64; 3],
    elapsed: Duration,
}

fn full_run(seed: u64, lambda_f: f64, root: &std::path::Path) -> FullRun {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.train.lambda_f = lambda_f;
    cfg.dataset.dir = root.join(format!("data{seed}"));
    cfg.out = root.join(format!("run{seed}_{lambda_f}"));
    cfg.sync_derived();
    cfg.validate().unwrap();
    if !cfg.dataset.dir.join("manifest.json").exists() {
        generate(&cfg).unwrap();
    }
    let start = Instant::now();
    let out = train_run(&cfg, &|line| eprintln!("  seed {seed} lambda_f {lambda_f}: {line}")).unwrap();
    let report = eval_run(&cfg, &checkpoint_path(&cfg, None), Split::Test, &cfg.out).unwrap();
    FullRun {
        report,
        h2: out.params.h2.weights,
        elapsed: start.elapsed(),
    }
}

fn value(m: &Option<protomargin::metrics::Metric>) -> f64 {
    m.as_ref().map_or(f64::NAN, |m| m.value)
}

fn full_criteria(results: &mut Vec<(usize, &'static str, Outcome)>) {
    let root = std::env::var("PROTO_MARGIN_ACCEPTANCE_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|_| std::env::temp_dir().join("proto-margin-acceptance"));
    std::fs::create_dir_all(&root).unwrap();
    let mut runs = Vec::new();
    for seed in [1u64, 2, 3] {
        let fine = full_run(seed, 0.001, &root);
        let plain = full_run(seed, 0.0, &root);
        eprintln!(
            "seed {seed}: auroc {:.3} mal {:.3} APl {:.3} APf {:.3} | no fine: APl {:.3} APf {:.3} | h2 {:?} | {:.0}s",
            value(&fine.report.margin_auroc_avg),
            value(&fine.report.malignancy_auroc),
            value(&fine.report.activation_precision_lesion),
            value(&fine.report.activation_precision_fine),
            value(&plain.report.activation_precision_lesion),
            value(&plain.report.activation_precision_fine),
            fine.h2,
            fine.elapsed.as_secs_f64()
        );
        runs.push((seed, fine, plain));
    }

    let (_, first, _) = &runs[0];
    let auc = value(&first.report.margin_auroc_avg);
    let mal = value(&first.report.malignancy_auroc);
    let mins = first.elapsed.as_secs_f64() / 60.0;
    let threads = rayon::current_num_threads();
    let detail = format!("seed 1: margin AUROC {auc:.3}, malignancy AUROC {mal:.3}, {mins:.1} min on {threads} threads");
    results.push((
        5,
        "end-to-end synthetic run",
        if auc >= 0.90 && mal >= 0.75 && (threads < 4 || mins <= 30.0) {
            Ok(detail)
        } else {
            Err(detail)
        },
    ));

    let per_seed: Vec<String> = runs
        .iter()
        .map(|(s, f, p)| {
            let gain = value(&f.report.activation_precision_fine) - value(&p.report.activation_precision_fine);
            let lesion = value(&f.report.activation_precision_lesion);
            format!("seed {s}: fine gain {gain:+.3}, lesion AP {lesion:.3}")
        })
        .collect();
    let good = runs
        .iter()
        .filter(|(_, f, p)| {
            value(&f.report.activation_precision_fine) - value(&p.report.activation_precision_fine) >= 0.10
                && value(&f.report.activation_precision_lesion) >= 0.80
        })
        .count();
    let detail = format!("{good}/3 seeds hold ({})", per_seed.join("; "));
    results.push((6, "fine-annotation ablation", if good >= 2 { Ok(detail) } else { Err(detail) }));

    let w = first.h2;
    let detail = format!("h2 weights ({:+.3}, {:+.3}, {:+.3})", w[0], w[1], w[2]);
    results.push((
        7,
        "stage-B sign pattern",
        if w[0] < 0.0 && w[1] < 0.0 && w[2] > 0.0 {
            Ok(detail)
        } else {
            Err(detail)
        },
    ));
}

// ---------------------------------------------------------------- 8

fn criterion_determinism() -> Outcome {
    let run = |root: &std::path::Path| {
        let mut cfg = RunConfig::from_json_str(
            r#"{
                "seed": 4,
                "dataset.samples_per_class": [10, 10, 10],
                "dataset.image_size": 48,
                "dataset.split": [18, 4, 8],
                "dataset.fine_annotated": 4,
                "model.block_channels": [4, 6, 8],
                "model.latent_channels": 8,
                "model.prototypes_per_class": 2,
                "model.k": 3,
                "train.epochs_per_cycle": 2,
                "train.max_cycles": 2,
                "train.a3_steps": 20,
                "train.b_steps": 200,
                "eval.resamples": 200
            }"#,
        )
        .unwrap();
        cfg.dataset.dir = root.join("data");
        cfg.out = root.join("run");
        generate(&cfg).unwrap();
        train_run(&cfg, &|_| {}).unwrap();
        eval_run(&cfg, &checkpoint_path(&cfg, None), Split::Test, &cfg.out).unwrap();
        (
            std::fs::read(cfg.dataset.dir.join("manifest.json")).unwrap(),
            manifest_sha256(&cfg.dataset.dir).unwrap(),
            std::fs::read(cfg.out.join("final.ckpt")).unwrap(),
            std::fs::read(cfg.out.join("eval_test.json")).unwrap(),
        )
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rb) = (run(a.path()), run(b.path()));
    check(ra.0 == rb.0, "dataset manifests differ")?;
    check(ra.2 == rb.2, "final checkpoints differ")?;
    check(ra.3 == rb.3, "evaluation reports differ")?;
    Ok(format!(
        "manifest {}..., checkpoint {} bytes, report {} bytes identical",
        &ra.1[..12],
        ra.2.len(),
        ra.3.len()
    ))
}

fn guarded(f: fn() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // honour `cargo test -- --list` and similar harness probes
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let full = std::env::var("PROTO_MARGIN_FULL").is_ok_and(|v| v == "1");
    let mut results: Vec<(usize, &'static str, Option<Outcome>)> = vec![
        (1, "gradient correctness", Some(guarded(criterion_gradients))),
        (2, "oracle equivalence", Some(guarded(criterion_oracles))),
        (3, "prototype-part reduction at k = 1", Some(guarded(criterion_reduction))),
        (4, "stage isolation and projection", Some(guarded(criterion_isolation))),
    ];
    let heavy_names = [(5, "end-to-end synthetic run"), (6, "fine-annotation ablation"), (7, "stage-B sign pattern")];
    if full {
        let mut heavy = Vec::new();
        if let Err(p) = catch_unwind(AssertUnwindSafe(|| full_criteria(&mut heavy))) {
            let msg = p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into());
            heavy = heavy_names.iter().map(|&(n, name)| (n, name, Err(msg.clone()))).collect();
        }
        results.extend(heavy.into_iter().map(|(n, name, r)| (n, name, Some(r))));
    } else {
        results.extend(heavy_names.iter().map(|&(n, name)| (n, name, None)));
    }
    results.push((8, "determinism", Some(guarded(criterion_determinism))));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Some(Ok(d)) => println!("criterion {n} PASS {name}: {d}"),
            Some(Err(d)) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {d}");
            }
            None => println!("criterion {n} SKIP {name}: set PROTO_MARGIN_FULL=1 to train the six full-size models"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
