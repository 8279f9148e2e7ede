//! Staged training.
//!
//! One A-cycle is
//!
//! 1. **A1**: backbone and prototypes follow the full objective with `w1`
//!    and the malignancy head frozen;
//! 2. **A2**: every prototype is replaced by its nearest same-class training
//!    patch, then provenance duplicates are pruned;
//! 3. **A3**: `w1` alone is tuned on margin cross entropy.
//!
//! Cycles repeat until the training cross entropy after A3 improves by
//! less than `convergence_tol` (relative) or `max_cycles` is reached. Stage
//! **B** then fits the logistic malignancy head once on the margin logits of
//! the original training images; nothing returns to A afterwards.

mod optim;
mod projection;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::Adam;
pub use projection::{project_prototypes, project_with_latents, prune_duplicates, training_latents, ProjectionRecord};

use crate::autodiff::{kernels, Graph};
use crate::classes::{MarginClass, NUM_CLASSES};
use crate::error::{Error, IoContext, Result};
use crate::losses::{build_objective, FineNormalization, LossBreakdown, LossConfig, LossItem};
use crate::protonet::{hex, save_checkpoint, signed_class_connections, MalignancyHead, ModelParams, ParamVars, Trainable};
use crate::rng;
use crate::synthgen::{augment, Dataset, DatasetSample, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_f: f64,
    pub fine_normalization: FineNormalization,
    pub epochs_per_cycle: usize,
    pub max_cycles: usize,
    /// Relative improvement of the post-A3 training cross entropy below
    /// which the A-cycles stop.
    pub convergence_tol: f64,
    pub coarse_per_batch: usize,
    pub fine_per_batch: usize,
    pub lr_a1: f64,
    pub lr_a3: f64,
    pub lr_b: f64,
    /// Full-batch steps per A3 stage.
    pub a3_steps: usize,
    /// Full-batch steps of stage B.
    pub b_steps: usize,
    /// Random flip/rotate/crop of every A1 batch item.
    pub augment: bool,
    pub prune: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            lambda_c: loss.lambda_c,
            lambda_s: loss.lambda_s,
            lambda_f: loss.lambda_f,
            fine_normalization: loss.fine_normalization,
            epochs_per_cycle: 20,
            max_cycles: 3,
            convergence_tol: 1e-3,
            coarse_per_batch: 75,
            fine_per_batch: 10,
            lr_a1: 1e-3,
            lr_a3: 1e-3,
            lr_b: 1e-2,
            a3_steps: 300,
            b_steps: 3000,
            augment: true,
            prune: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_c: self.lambda_c,
            lambda_s: self.lambda_s,
            lambda_f: self.lambda_f,
            fine_normalization: self.fine_normalization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_s", self.lambda_s),
            ("lambda_f", self.lambda_f),
            ("convergence_tol", self.convergence_tol),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        for (name, v) in [("lr_a1", self.lr_a1), ("lr_a3", self.lr_a3), ("lr_b", self.lr_b)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.coarse_per_batch == 0 {
            return bad("coarse_per_batch must be at least 1".into());
        }
        if self.max_cycles == 0 {
            return bad("max_cycles must be at least 1".into());
        }
        Ok(())
    }
}

/// A training example held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub image: Vec<f64>,
    pub label: MarginClass,
    pub malignant: bool,
    pub lesion_mask: Vec<u8>,
    /// Present for members of D′.
    pub fine_mask: Option<Vec<u8>>,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub size: usize,
    pub items: Vec<TrainItem>,
}

impl TrainData {
    pub fn new(size: usize, items: Vec<TrainItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        for it in &items {
            let n = size * size;
            if it.image.len() != n || it.lesion_mask.len() != n || it.fine_mask.as_ref().is_some_and(|m| m.len() != n) {
                return Err(Error::Shape(format!("training item {} does not match size {size}", it.id)));
            }
        }
        Ok(Self { size, items })
    }

    /// The training split of a dataset.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let items = ds.split(Split::Train).into_iter().map(TrainItem::from).collect();
        Self::new(ds.image_size(), items)
    }

    pub fn fine_indices(&self) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].fine_mask.is_some())
            .collect()
    }
}

impl From<&DatasetSample> for TrainItem {
    fn from(s: &DatasetSample) -> Self {
        Self {
            id: s.id.clone(),
            image: s.image.clone(),
            label: s.margin_class,
            malignant: s.malignant,
            lesion_mask: s.lesion_mask.clone(),
            fine_mask: s.fine_mask.clone(),
        }
    }
}

/// Indices into [`TrainData::items`]; `true` marks a D′ draw, which is
/// scored against its fine mask instead of its lesion mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<(usize, bool)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn fine_count(&self) -> usize {
        self.items.iter().filter(|(_, f)| *f).count()
    }
}

/// Draws A1 batches: each epoch walks a fresh permutation of D in chunks of
/// `coarse_per_batch` and adds `fine_per_batch` draws from D′, cycling
/// through shuffled passes of D′.
pub struct BatchSampler {
    coarse: Vec<usize>,
    fine_pool: Vec<usize>,
    fine_queue: Vec<usize>,
    pub coarse_per_batch: usize,
    pub fine_per_batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(data: &TrainData, cfg: &TrainConfig, rng: ChaCha8Rng) -> Self {
        let n = data.items.len();
        let fine_pool = data.fine_indices();
        let (mut coarse, mut fine) = (cfg.coarse_per_batch, cfg.fine_per_batch);
        let full = coarse + fine;
        if n < full {
            // keep the coarse:fine ratio on small training sets
            coarse = ((coarse * n) as f64 / full as f64).round().max(1.0) as usize;
            fine = ((fine * n) as f64 / full as f64).round() as usize;
        }
        fine = fine.min(fine_pool.len());
        Self {
            coarse: (0..n).collect(),
            fine_pool,
            fine_queue: Vec::new(),
            coarse_per_batch: coarse,
            fine_per_batch: fine,
            rng,
        }
    }

    fn next_fine(&mut self) -> usize {
        if self.fine_queue.is_empty() {
            self.fine_queue = self.fine_pool.clone();
            self.fine_queue.shuffle(&mut self.rng);
            self.fine_queue.reverse();
        }
        self.fine_queue.pop().expect("nonempty fine pool")
    }

    /// All batches of one epoch.
    pub fn epoch(&mut self) -> Vec<Batch> {
        self.coarse.shuffle(&mut self.rng);
        let order = self.coarse.clone();
        let mut out = Vec::new();
        for chunk in order.chunks(self.coarse_per_batch) {
            let mut items: Vec<(usize, bool)> = chunk.iter().map(|&i| (i, false)).collect();
            for _ in 0..self.fine_per_batch {
                let i = self.next_fine();
                items.push((i, true));
            }
            items.shuffle(&mut self.rng);
            out.push(Batch { items });
        }
        out
    }
}

/// One CSV row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: String,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,stage,CrsEnt,Clst,Sep,Fine,total";

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.loss;
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.stage, l.cross_entropy, l.cluster, l.separation, l.fine, l.total
        ));
    }
    s
}

/// SHA-256 of each parameter group, for checking which stage touched what.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamHashes {
    pub backbone: String,
    pub prototypes: String,
    pub w1: String,
    pub h2: String,
}

fn hash_values<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

pub fn param_hashes(params: &ModelParams) -> ParamHashes {
    ParamHashes {
        backbone: hash_values(
            params
                .backbone
                .iter()
                .flat_map(|l| l.weight.data().iter().chain(l.bias.data())),
        ),
        prototypes: hash_values(params.prototypes.iter().flat_map(|p| p.data())),
        w1: hash_values(params.w1.data().iter()),
        h2: hash_values(params.h2.weights.iter().chain(std::iter::once(&params.h2.bias))),
    }
}

fn feature_values(params: &ModelParams) -> Vec<f64> {
    let mut v = Vec::new();
    for l in &params.backbone {
        v.extend_from_slice(l.weight.data());
        v.extend_from_slice(l.bias.data());
    }
    for p in &params.prototypes {
        v.extend_from_slice(p.data());
    }
    v
}

fn set_feature_values(params: &mut ModelParams, values: &[f64]) {
    let mut pos = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&values[pos..pos + dst.len()]);
        pos += dst.len();
    };
    for l in &mut params.backbone {
        take(l.weight.data_mut());
        take(l.bias.data_mut());
    }
    for p in &mut params.prototypes {
        take(p.data_mut());
        // latents live in the unit cube, so keep prototypes there too
        for x in p.data_mut() {
            *x = x.clamp(0.0, 1.0);
        }
    }
}

/// Loss and gradient (flattened backbone then prototypes) of one A1 batch.
pub fn a1_batch_gradient(
    params: &ModelParams,
    data: &TrainData,
    batch: &Batch,
    cfg: &TrainConfig,
    augment_base: u64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let loss_cfg = cfg.loss();
    let n = batch.len();
    let per_item: Vec<(LossBreakdown, Vec<f64>)> = batch
        .items
        .par_iter()
        .enumerate()
        .map(|(pos, &(i, is_fine))| {
            let item = &data.items[i];
            let (image, mask) = if cfg.augment {
                let seed = rng::derive_seed(cfg.seed, rng::AUGMENT, augment_base + pos as u64);
                let synth = crate::synthgen::SynthSample {
                    size: data.size,
                    image: item.image.clone(),
                    margin_class: item.label,
                    malignant: item.malignant,
                    lesion_mask: item.lesion_mask.clone(),
                    fine_mask: item.fine_mask.clone().unwrap_or_else(|| vec![1; data.size * data.size]),
                    confounder: false,
                };
                let a = augment(&synth, seed);
                (a.image, if is_fine { a.fine_mask } else { a.lesion_mask })
            } else {
                let mask = if is_fine {
                    item.fine_mask.clone().expect("fine draw without fine mask")
                } else {
                    item.lesion_mask.clone()
                };
                (item.image.clone(), mask)
            };
            let mut g = Graph::new();
            let vars = ParamVars::register(&mut g, params, Trainable::FEATURES);
            let li = LossItem {
                image: &image,
                label: item.label,
                mask: Some(&mask),
            };
            let obj = build_objective(&mut g, params, &vars, &[li], &loss_cfg, n)?;
            let grads = g.backward(obj.total)?;
            let mut flat = Vec::new();
            for &(w, b) in &vars.backbone {
                flat.extend_from_slice(&grads.get_or_zeros(w).into_data());
                flat.extend_from_slice(&grads.get_or_zeros(b).into_data());
            }
            for &p in &vars.prototypes {
                flat.extend_from_slice(&grads.get_or_zeros(p).into_data());
            }
            Ok((obj.breakdown(&g, &loss_cfg), flat))
        })
        .collect::<Result<_>>()?;
    let mut total = LossBreakdown::default();
    let mut grad = vec![0.0; per_item[0].1.len()];
    for (b, gi) in &per_item {
        total.accumulate(b);
        for (a, x) in grad.iter_mut().zip(gi) {
            *a += x;
        }
    }
    Ok((total, grad))
}

/// Pooled similarity scores of every (original) training image.
pub fn pooled_scores(params: &ModelParams, data: &TrainData) -> Result<Vec<Vec<f64>>> {
    data.items
        .par_iter()
        .map(|it| {
            let latent = params.latent(&it.image)?;
            Ok(params.similarity_maps(&latent)?.pooled)
        })
        .collect()
}

fn logits_of(w1: &[f64], m: usize, s: &[f64]) -> [f64; NUM_CLASSES] {
    let mut out = [0.0; NUM_CLASSES];
    for (r, o) in out.iter_mut().enumerate() {
        *o = (0..m).map(|j| w1[r * m + j] * s[j]).sum();
    }
    out
}

/// Mean margin cross entropy and its gradient with respect to `w1`.
pub fn margin_ce_and_grad(w1: &[f64], m: usize, pooled: &[Vec<f64>], labels: &[MarginClass]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; w1.len()];
    let mut loss = 0.0;
    let inv = 1.0 / pooled.len() as f64;
    for (s, &y) in pooled.iter().zip(labels) {
        let z = logits_of(w1, m, s);
        let lse = kernels::log_sum_exp(&z);
        loss += (lse - z[y.index()]) * inv;
        for r in 0..NUM_CLASSES {
            let coef = ((z[r] - lse).exp() - if r == y.index() { 1.0 } else { 0.0 }) * inv;
            for j in 0..m {
                grad[r * m + j] += coef * s[j];
            }
        }
    }
    (loss, grad)
}

/// Stage A3: `w1` only, cross entropy only. Returns the training cross
/// entropy before and after.
pub fn stage_a3(params: &mut ModelParams, data: &TrainData, cfg: &TrainConfig, log: &mut Vec<LogRow>) -> Result<(f64, f64)> {
    if !params.w1_initialized {
        params.w1 = signed_class_connections(&params.prototype_class);
        params.w1_initialized = true;
    }
    let pooled = pooled_scores(params, data)?;
    let labels: Vec<MarginClass> = data.items.iter().map(|i| i.label).collect();
    let m = params.num_prototypes();
    let mut w = params.w1.data().to_vec();
    let (before, _) = margin_ce_and_grad(&w, m, &pooled, &labels);
    let mut opt = Adam::new(w.len(), cfg.lr_a3);
    let mut best = (before, w.clone());
    for _ in 0..cfg.a3_steps {
        let (loss, grad) = margin_ce_and_grad(&w, m, &pooled, &labels);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: log.len(),
                stage: "A3".into(),
            });
        }
        if loss < best.0 {
            best = (loss, w.clone());
        }
        log.push(LogRow {
            step: log.len(),
            stage: "A3".into(),
            loss: LossBreakdown {
                cross_entropy: loss,
                total: loss,
                ..Default::default()
            },
        });
        opt.step(&mut w, &grad);
    }
    let (last, _) = margin_ce_and_grad(&w, m, &pooled, &labels);
    if last < best.0 {
        best = (last, w);
    }
    // keep the best iterate so the stage never raises training CE
    params.w1.data_mut().copy_from_slice(&best.1);
    Ok((before, best.0))
}

/// Logistic regression of `labels` on `features` by full-batch Adam from
/// zero. Returns the head and its final mean log-loss.
pub fn fit_logistic(
    features: &[[f64; NUM_CLASSES]],
    labels: &[bool],
    lr: f64,
    steps: usize,
    mut on_step: impl FnMut(f64),
) -> Result<(MalignancyHead, f64)> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArgument("logistic fit needs matching nonempty inputs".into()));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::InvalidArgument(
            "malignancy labels are all one class; the logistic fit is degenerate".into(),
        ));
    }
    let inv = 1.0 / features.len() as f64;
    let eval = |p: &[f64]| -> (f64, Vec<f64>) {
        let mut loss = 0.0;
        let mut g = vec![0.0; 4];
        for (x, &y) in features.iter().zip(labels) {
            let z = p[0] * x[0] + p[1] * x[1] + p[2] * x[2] + p[3];
            let t = if y { 1.0 } else { 0.0 };
            // log(1 + e^z) - t z, stable in both tails
            loss += (z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z) * inv;
            let r = (kernels::sigmoid(z) - t) * inv;
            for c in 0..3 {
                g[c] += r * x[c];
            }
            g[3] += r;
        }
        (loss, g)
    };
    let mut p = vec![0.0; 4];
    let mut opt = Adam::new(4, lr);
    for _ in 0..steps {
        let (loss, g) = eval(&p);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: 0,
                stage: "B".into(),
            });
        }
        on_step(loss);
        opt.step(&mut p, &g);
    }
    let (loss, _) = eval(&p);
    Ok((
        MalignancyHead {
            weights: [p[0], p[1], p[2]],
            bias: p[3],
        },
        loss,
    ))
}

/// Stage B on the margin logits of the original training images.
pub fn stage_b(params: &mut ModelParams, data: &TrainData, cfg: &TrainConfig, log: &mut Vec<LogRow>) -> Result<f64> {
    let pooled = pooled_scores(params, data)?;
    let feats: Vec<[f64; NUM_CLASSES]> = pooled.iter().map(|s| params.margin_logits(s)).collect();
    let labels: Vec<bool> = data.items.iter().map(|i| i.malignant).collect();
    let (head, loss) = fit_logistic(&feats, &labels, cfg.lr_b, cfg.b_steps, |l| {
        log.push(LogRow {
            step: log.len(),
            stage: "B".into(),
            loss: LossBreakdown {
                cross_entropy: l,
                total: l,
                ..Default::default()
            },
        })
    })?;
    params.h2 = head;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub cycle: usize,
    /// Mean total objective over the last A1 epoch.
    pub a1_final_loss: f64,
    pub projected: usize,
    pub pruned: Vec<usize>,
    pub a3_ce_before: f64,
    pub a3_ce_after: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub cycles: Vec<CycleSummary>,
    pub log: Vec<LogRow>,
    pub stage_b_loss: f64,
    pub converged: bool,
}

/// Where `train` writes artifacts: `checkpoints/cycle{c}_{a1,a2,a3}.ckpt`,
/// `checkpoints/stage_b.ckpt`, `final.ckpt` and `train_log.csv`.
fn stage_checkpoint(out: Option<&Path>, name: &str, params: &ModelParams) -> Result<()> {
    match out {
        Some(dir) => save_checkpoint(params, &dir.join("checkpoints").join(name)),
        None => Ok(()),
    }
}

fn write_log(out: Option<&Path>, log: &[LogRow]) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join("train_log.csv");
        fs::write(&path, format_log(log)).at(path)?;
    }
    Ok(())
}

/// Runs the whole protocol. `progress` receives one line per epoch and stage.
pub fn train(
    mut params: ModelParams,
    data: &TrainData,
    cfg: &TrainConfig,
    out: Option<&Path>,
    progress: &dyn Fn(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.size != params.arch.image_size {
        return Err(Error::Shape(format!(
            "training images are {0}x{0}, model expects {1}x{1}",
            data.size, params.arch.image_size
        )));
    }
    let mut log = Vec::new();
    let mut sampler = BatchSampler::new(data, cfg, rng::stream(cfg.seed, rng::BATCHING));
    let mut augment_counter = 0u64;
    let mut cycles = Vec::new();
    let mut prev_ce: Option<f64> = None;
    let mut converged = false;

    for cycle in 0..cfg.max_cycles {
        let mut values = feature_values(&params);
        let mut opt = Adam::new(values.len(), cfg.lr_a1);
        let mut last_epoch = f64::NAN;
        for epoch in 0..cfg.epochs_per_cycle {
            let mut sum = 0.0;
            let batches = sampler.epoch();
            for batch in &batches {
                let (loss, grad) = a1_batch_gradient(&params, data, batch, cfg, augment_counter)?;
                augment_counter += batch.len() as u64;
                if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    let step = log.len();
                    write_log(out, &log)?;
                    stage_checkpoint(out, "last_good.ckpt", &params)?;
                    return Err(Error::Diverged {
                        step,
                        stage: "A1".into(),
                    });
                }
                sum += loss.total;
                log.push(LogRow {
                    step: log.len(),
                    stage: "A1".into(),
                    loss,
                });
                opt.step(&mut values, &grad);
                set_feature_values(&mut params, &values);
                // clamping may have moved prototypes; keep optimizer view in sync
                values = feature_values(&params);
            }
            last_epoch = sum / batches.len() as f64;
            progress(&format!(
                "cycle {} A1 epoch {}/{}: mean loss {:.5}",
                cycle + 1,
                epoch + 1,
                cfg.epochs_per_cycle,
                last_epoch
            ));
        }
        stage_checkpoint(out, &format!("cycle{}_a1.ckpt", cycle + 1), &params)?;

        let projected = project_prototypes(&mut params, data)?;
        let pruned = if cfg.prune {
            prune_duplicates(&mut params)
        } else {
            Vec::new()
        };
        stage_checkpoint(out, &format!("cycle{}_a2.ckpt", cycle + 1), &params)?;
        progress(&format!(
            "cycle {} A2: projected {} prototypes, pruned {}",
            cycle + 1,
            projected.len(),
            pruned.len()
        ));

        let (before, after) = stage_a3(&mut params, data, cfg, &mut log)?;
        stage_checkpoint(out, &format!("cycle{}_a3.ckpt", cycle + 1), &params)?;
        progress(&format!(
            "cycle {} A3: cross entropy {before:.5} -> {after:.5}",
            cycle + 1
        ));
        cycles.push(CycleSummary {
            cycle: cycle + 1,
            a1_final_loss: last_epoch,
            projected: projected.len(),
            pruned,
            a3_ce_before: before,
            a3_ce_after: after,
        });
        if let Some(prev) = prev_ce {
            let rel = (prev - after) / prev.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.convergence_tol {
                converged = true;
                break;
            }
        }
        prev_ce = Some(after);
    }

    let stage_b_loss = stage_b(&mut params, data, cfg, &mut log)?;
    stage_checkpoint(out, "stage_b.ckpt", &params)?;
    progress(&format!(
        "B: log-loss {stage_b_loss:.5}, weights {:?}, bias {:.4}",
        params.h2.weights, params.h2.bias
    ));
    if let Some(dir) = out {
        save_checkpoint(&params, &dir.join("final.ckpt"))?;
    }
    write_log(out, &log)?;
    Ok(TrainOutcome {
        params,
        cycles,
        log,
        stage_b_loss,
        converged,
    })
}
