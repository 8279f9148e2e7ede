use std::collections::HashMap;

use protomargin::autodiff::Tensor;
use protomargin::losses::{total_objective, LossItem};
use protomargin::protonet::{load_checkpoint, ArchConfig, ModelParams, Provenance};
use protomargin::synthgen::{generate_corpus, CorpusConfig};
use protomargin::trainer::{
    fit_logistic, format_log, margin_ce_and_grad, param_hashes, pooled_scores, project_prototypes, prune_duplicates,
    stage_a3, train, training_latents, BatchSampler, TrainConfig, TrainData, TrainItem, LOG_HEADER,
};
use protomargin::{rng, MarginClass};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 48;

fn arch() -> ArchConfig {
    ArchConfig {
        image_size: SIZE,
        block_channels: [4, 6, 8],
        latent_channels: 8,
        prototypes_per_class: 2,
        k: 3,
        epsilon: 1e-4,
    }
}

fn model(seed: u64) -> ModelParams {
    ModelParams::init(arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// `per_class` samples of each class; the first `fine` of each class keep
/// their fine masks.
fn toy_data(per_class: usize, fine: usize, seed: u64) -> TrainData {
    let corpus = CorpusConfig {
        samples_per_class: [per_class; 3],
        image_size: SIZE,
        ..Default::default()
    };
    let mut seen = HashMap::new();
    let items = generate_corpus(&corpus, seed)
        .unwrap()
        .into_iter()
        .map(|g| {
            let count = seen.entry(g.sample.margin_class).or_insert(0);
            *count += 1;
            TrainItem {
                id: g.id,
                image: g.sample.image,
                label: g.sample.margin_class,
                malignant: g.sample.malignant,
                lesion_mask: g.sample.lesion_mask,
                fine_mask: (*count <= fine).then_some(g.sample.fine_mask),
            }
        })
        .collect();
    TrainData::new(SIZE, items).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs_per_cycle: 1,
        max_cycles: 1,
        coarse_per_batch: 6,
        fine_per_batch: 2,
        a3_steps: 20,
        b_steps: 200,
        ..Default::default()
    }
}

#[test]
fn batches_cover_d_once_per_epoch_and_cycle_through_d_prime() {
    let data = toy_data(34, 10, 1);
    assert_eq!(data.items.len(), 102);
    let fine = data.fine_indices();
    assert_eq!(fine.len(), 30);
    let mut sampler = BatchSampler::new(&data, &TrainConfig::default(), rng::stream(5, rng::BATCHING));
    assert_eq!((sampler.coarse_per_batch, sampler.fine_per_batch), (75, 10));
    let batches = sampler.epoch();
    assert_eq!(batches.len(), 2);
    let mut coarse: Vec<usize> = batches
        .iter()
        .flat_map(|b| b.items.iter().filter(|(_, f)| !f).map(|(i, _)| *i))
        .collect();
    coarse.sort();
    assert_eq!(coarse, (0..102).collect::<Vec<_>>());
    for b in &batches {
        assert_eq!(b.fine_count(), 10);
        assert!(b.items.iter().filter(|(_, f)| *f).all(|(i, _)| fine.contains(i)));
    }
    // three batches draw 30 fine items: one full pass over D′
    let third = sampler.epoch().remove(0);
    let mut drawn: Vec<usize> = batches
        .iter()
        .chain(std::iter::once(&third))
        .flat_map(|b| b.items.iter().filter(|(_, f)| *f).map(|(i, _)| *i))
        .collect();
    drawn.sort();
    assert_eq!(drawn, fine);
}

#[test]
fn small_training_sets_keep_the_batch_ratio() {
    let data = toy_data(7, 2, 2);
    let s = BatchSampler::new(&data, &TrainConfig::default(), rng::stream(0, rng::BATCHING));
    // 21 items: round(75·21/85) = 19 coarse, round(10·21/85) = 2 fine
    assert_eq!((s.coarse_per_batch, s.fine_per_batch), (19, 2));
    let none = toy_data(3, 0, 2);
    let s = BatchSampler::new(&none, &TrainConfig::default(), rng::stream(0, rng::BATCHING));
    assert_eq!(s.fine_per_batch, 0);
}

#[test]
fn projection_picks_the_nearest_same_class_patch() {
    let data = toy_data(4, 0, 3);
    let mut params = model(3);
    let before = params.prototypes.clone();
    let latents = training_latents(&params, &data).unwrap();
    let records = project_prototypes(&mut params, &data).unwrap();
    assert_eq!(records.len(), params.num_prototypes());
    let c = arch().latent_channels;
    let grid = arch().grid_size();
    for r in &records {
        let j = r.prototype;
        let mut best = (f64::INFINITY, String::new(), 0);
        for (i, it) in data.items.iter().enumerate() {
            if it.label != params.prototype_class[j] {
                continue;
            }
            for cell in 0..grid * grid {
                let d: f64 = (0..c)
                    .map(|ch| (latents[i].data()[ch * grid * grid + cell] - before[j].data()[ch]).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, it.id.clone(), cell);
                }
            }
        }
        assert!((r.distance - best.0).abs() < 1e-12);
        assert_eq!(r.provenance.image_id, best.1);
        assert_eq!(r.provenance.row * grid + r.provenance.col, best.2);
        let src = data.items.iter().position(|it| it.id == best.1).unwrap();
        let patch: Vec<f64> = (0..c).map(|ch| latents[src].data()[ch * grid * grid + best.2]).collect();
        assert_eq!(params.prototypes[j].data(), patch.as_slice());
    }
}

#[test]
fn pruning_removes_later_duplicates_and_their_columns() {
    let mut params = model(4);
    let m = params.num_prototypes();
    let w1: Vec<f64> = (0..3 * m).map(|v| v as f64).collect();
    params.w1 = Tensor::new(vec![3, m], w1).unwrap();
    let prov = |id: &str| {
        Some(Provenance {
            image_id: id.into(),
            row: 1,
            col: 2,
        })
    };
    // prototypes 0,1 are class 0; 2,3 class 1; 4,5 class 2
    params.provenance = vec![prov("a"), prov("a"), prov("b"), prov("c"), prov("b"), None];
    let removed = prune_duplicates(&mut params);
    // 4 shares provenance with 2 but belongs to another class
    assert_eq!(removed, vec![1]);
    assert_eq!(params.num_prototypes(), 5);
    assert_eq!(params.w1.shape(), [3, 5]);
    assert_eq!(params.w1.data()[..5], [0.0, 2.0, 3.0, 4.0, 5.0]);
    assert_eq!(params.prototype_class[1], MarginClass::Indistinct);
    assert!(prune_duplicates(&mut params).is_empty());
}

#[test]
fn a3_never_raises_training_cross_entropy() {
    let data = toy_data(5, 0, 5);
    let mut params = model(5);
    let mut log = Vec::new();
    let cfg = TrainConfig {
        a3_steps: 100,
        lr_a3: 1e-2,
        ..Default::default()
    };
    let hashes = param_hashes(&params);
    let (before, after) = stage_a3(&mut params, &data, &cfg, &mut log).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert_eq!(log.len(), 100);
    let after_hashes = param_hashes(&params);
    assert_eq!(after_hashes.backbone, hashes.backbone);
    assert_eq!(after_hashes.prototypes, hashes.prototypes);
    assert_ne!(after_hashes.w1, hashes.w1);
    // the reported value is the CE of the stored weights
    let pooled = pooled_scores(&params, &data).unwrap();
    let labels: Vec<_> = data.items.iter().map(|i| i.label).collect();
    let (ce, _) = margin_ce_and_grad(params.w1.data(), params.num_prototypes(), &pooled, &labels);
    assert!((ce - after).abs() < 1e-12);
}

#[test]
fn w1_gradient_matches_finite_differences() {
    let pooled = vec![vec![0.3, 1.2, 2.0, 0.1], vec![1.5, 0.2, 0.4, 3.0], vec![0.0, 0.9, 0.8, 0.7]];
    let labels = [MarginClass::Circumscribed, MarginClass::Spiculated, MarginClass::Indistinct];
    let w: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
    let (_, grad) = margin_ce_and_grad(&w, 4, &pooled, &labels);
    for i in 0..12 {
        let mut p = w.clone();
        p[i] += 1e-6;
        let mut q = w.clone();
        q[i] -= 1e-6;
        let fd = (margin_ce_and_grad(&p, 4, &pooled, &labels).0 - margin_ce_and_grad(&q, 4, &pooled, &labels).0) / 2e-6;
        assert!((fd - grad[i]).abs() < 1e-7, "{i}: {fd} vs {}", grad[i]);
    }
}

#[test]
fn logistic_fit_separable_data() {
    let feats: Vec<[f64; 3]> = (0..40).map(|i| [i as f64 / 10.0 - 2.0, 0.5, -1.0]).collect();
    let labels: Vec<bool> = (0..40).map(|i| i >= 20).collect();
    let (head, loss) = fit_logistic(&feats, &labels, 0.05, 3000, |_| {}).unwrap();
    assert!(head.weights[0] > 0.0);
    assert!(loss < 0.1);
    for (x, &y) in feats.iter().zip(&labels) {
        assert_eq!(head.probability(x) > 0.5, y);
    }
}

#[test]
fn logistic_fit_without_signal_recovers_the_base_rate() {
    // constant features: only the intercept carries information
    let feats = vec![[0.0, 0.0, 0.0]; 50];
    let labels: Vec<bool> = (0..50).map(|i| i < 15).collect();
    let (head, _) = fit_logistic(&feats, &labels, 0.01, 3000, |_| {}).unwrap();
    let want = (0.3f64 / 0.7).ln();
    assert!((head.bias - want).abs() < 0.05, "{} vs {want}", head.bias);
}

#[test]
fn logistic_fit_rejects_single_class_labels() {
    assert!(fit_logistic(&[[1.0, 2.0, 3.0]; 4], &[true; 4], 0.01, 10, |_| {}).is_err());
}

#[test]
fn training_is_deterministic() {
    let data = toy_data(4, 2, 6);
    let cfg = quick_config();
    let a = train(model(6), &data, &cfg, None, &|_| {}).unwrap();
    let b = train(model(6), &data, &cfg, None, &|_| {}).unwrap();
    assert_eq!(param_hashes(&a.params), param_hashes(&b.params));
    assert_eq!(format_log(&a.log), format_log(&b.log));
}

#[test]
fn each_stage_touches_only_its_parameters() {
    let data = toy_data(4, 2, 7);
    let cfg = TrainConfig {
        prune: false,
        ..quick_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let init = model(7);
    let out = train(init.clone(), &data, &cfg, Some(dir.path()), &|_| {}).unwrap();
    let ck = |name: &str| param_hashes(&load_checkpoint(&dir.path().join("checkpoints").join(name)).unwrap());
    let (h0, a1, a2, a3, b) = (
        param_hashes(&init),
        ck("cycle1_a1.ckpt"),
        ck("cycle1_a2.ckpt"),
        ck("cycle1_a3.ckpt"),
        ck("stage_b.ckpt"),
    );
    assert_ne!(a1.backbone, h0.backbone);
    assert_ne!(a1.prototypes, h0.prototypes);
    assert_eq!((&a1.w1, &a1.h2), (&h0.w1, &h0.h2));

    assert_eq!(a2.backbone, a1.backbone);
    assert_ne!(a2.prototypes, a1.prototypes);
    assert_eq!((&a2.w1, &a2.h2), (&a1.w1, &a1.h2));

    assert_eq!((&a3.backbone, &a3.prototypes, &a3.h2), (&a2.backbone, &a2.prototypes, &a2.h2));
    assert_ne!(a3.w1, a2.w1);

    assert_eq!((&b.backbone, &b.prototypes, &b.w1), (&a3.backbone, &a3.prototypes, &a3.w1));
    assert_ne!(b.h2, a3.h2);
    assert_eq!(param_hashes(&out.params), b);
    assert_eq!(param_hashes(&load_checkpoint(&dir.path().join("final.ckpt")).unwrap()), b);

    let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(csv.lines().count(), out.log.len() + 1);
    for stage in ["A1", "A3", "B"] {
        assert!(csv.lines().any(|l| l.split(',').nth(1) == Some(stage)));
    }
}

#[test]
fn a1_lowers_the_objective_on_a_toy_set() {
    let data = toy_data(4, 2, 8);
    let cfg = TrainConfig {
        epochs_per_cycle: 12,
        augment: false,
        lr_a1: 3e-3,
        ..quick_config()
    };
    let items: Vec<LossItem<'_>> = data
        .items
        .iter()
        .map(|it| LossItem {
            image: &it.image,
            label: it.label,
            mask: Some(&it.lesion_mask),
        })
        .collect();
    let init = model(8);
    let before = total_objective(&init, &items, &cfg.loss()).unwrap();
    let out = train(init, &data, &cfg, None, &|_| {}).unwrap();
    let first: f64 = out.log.iter().filter(|r| r.stage == "A1").take(2).map(|r| r.loss.total).sum();
    let a1: Vec<_> = out.log.iter().filter(|r| r.stage == "A1").collect();
    let last: f64 = a1[a1.len() - 2..].iter().map(|r| r.loss.total).sum();
    assert!(last < first, "A1 objective {first} -> {last}");
    assert!(before.total.is_finite());
}

#[test]
fn invalid_config_is_rejected() {
    let data = toy_data(2, 0, 9);
    for cfg in [
        TrainConfig {
            lambda_f: f64::NAN,
            ..quick_config()
        },
        TrainConfig {
            lr_a1: 0.0,
            ..quick_config()
        },
        TrainConfig {
            max_cycles: 0,
            ..quick_config()
        },
    ] {
        assert!(train(model(9), &data, &cfg, None, &|_| {}).is_err());
    }
}
