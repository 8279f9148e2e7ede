//! Evaluation metrics and the evaluation report.
//!
//! Activation precision asks how much of a prototype's strongest activation
//! lands on relevant pixels:
//!
//! ```
//! use protomargin::metrics::activation_precision_of_maps;
//! // one 4x5 map; its top 5% (one pixel) is the last cell
//! let map: Vec<f64> = (0..20).map(|v| v as f64).collect();
//! let mut mask = vec![1u8; 20];
//! mask[19] = 0; // relevant
//! assert_eq!(activation_precision_of_maps(&[&map], &mask, 0.95).unwrap(), 1.0);
//! mask[19] = 1;
//! assert_eq!(activation_precision_of_maps(&[&map], &mask, 0.95).unwrap(), 0.0);
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::{MarginClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::protonet::{ForwardOutput, ModelParams};
use crate::rng;
use crate::synthgen::DatasetSample;

/// Default τ: the top 5% of a map counts as highly activated.
pub const DEFAULT_TAU: f64 = 0.95;
pub const DEFAULT_RESAMPLES: usize = 5000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Marks the `ceil((1 − τ)·N)` largest cells. Ties go to the earlier cell in
/// row-major order.
pub fn threshold_top(map: &[f64], tau: f64) -> Result<Vec<bool>> {
    if map.is_empty() {
        return Err(Error::InvalidArgument("cannot threshold an empty map".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let n = map.len();
    // the small slack keeps e.g. 0.05·400 from rounding up to 21
    let count = (((1.0 - tau) * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
    let mut out = vec![false; n];
    for &i in &order[..count.min(n)] {
        out[i] = true;
    }
    Ok(out)
}

/// Mean over `maps` of the fraction of thresholded pixels that are relevant
/// (`mask == 0`).
pub fn activation_precision_of_maps(maps: &[&[f64]], mask: &[u8], tau: f64) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("activation precision needs at least one map".into()));
    }
    let mut sum = 0.0;
    for map in maps {
        if map.len() != mask.len() {
            return Err(Error::Shape(format!(
                "map has {} pixels, mask has {}",
                map.len(),
                mask.len()
            )));
        }
        let top = threshold_top(map, tau)?;
        let (mut hits, mut total) = (0usize, 0usize);
        for (t, &m) in top.iter().zip(mask) {
            if *t {
                total += 1;
                if m == 0 {
                    hits += 1;
                }
            }
        }
        sum += hits as f64 / total as f64;
    }
    Ok(sum / maps.len() as f64)
}

/// Activation precision of the prototypes of `class` on one forward pass.
pub fn activation_precision(
    params: &ModelParams,
    out: &ForwardOutput,
    class: MarginClass,
    mask: &[u8],
    tau: f64,
) -> Result<f64> {
    let pams = params
        .prototypes_of(class)
        .map(|j| params.compute_pam(&out.maps, j).map(|p| p.values))
        .collect::<Result<Vec<_>>>()?;
    if pams.is_empty() {
        return Err(Error::NoPrototypes(class.index()));
    }
    let refs: Vec<&[f64]> = pams.iter().map(|p| p.as_slice()).collect();
    activation_precision_of_maps(&refs, mask, tau)
}

/// Area under the ROC curve as the Mann–Whitney statistic, ties counted ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Cohen's κ between two label streams over `0..classes`.
pub fn cohens_kappa(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.len() < 2 {
        return Err(Error::Undefined("kappa needs at least two samples".into()));
    }
    let n = pred.len() as f64;
    let mut rows = vec![0.0; classes];
    let mut cols = vec![0.0; classes];
    let mut agree = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::InvalidArgument(format!("label outside 0..{classes}")));
        }
        rows[p] += 1.0;
        cols[t] += 1.0;
        if p == t {
            agree += 1.0;
        }
    }
    let po = agree / n;
    let pe: f64 = rows.iter().zip(&cols).map(|(r, c)| r * c).sum::<f64>() / (n * n);
    if (1.0 - pe).abs() < 1e-15 {
        return Err(Error::Undefined("kappa is undefined when expected agreement is 1".into()));
    }
    Ok((po - pe) / (1.0 - pe))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// Resamples drawn again because the metric was undefined on them.
    pub redrawn: usize,
}

/// Percentile interval of `metric` over `resamples` bootstrap resamples of
/// `n` records. `metric` sees resampled record indices and returns `None`
/// where undefined; such resamples are redrawn.
pub fn bootstrap_ci<F>(n: usize, metric: F, resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    use rand::Rng;
    if resamples < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 resamples, got {resamples}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must lie in (0, 1), got {level}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cannot resample zero records".into()));
    }
    const MAX_ATTEMPTS: u64 = 1000;
    let draws: Vec<(f64, usize)> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            for attempt in 0..MAX_ATTEMPTS {
                let mut rng = rng::stream(rng::derive_seed(seed, rng::BOOTSTRAP, r as u64), &attempt.to_string());
                let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                if let Some(v) = metric(&idx) {
                    return Ok((v, attempt as usize));
                }
            }
            Err(Error::Undefined(format!(
                "metric undefined on {MAX_ATTEMPTS} consecutive resamples"
            )))
        })
        .collect::<Result<_>>()?;
    let mut values: Vec<f64> = draws.iter().map(|d| d.0).collect();
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        lo: quantile(&values, alpha),
        hi: quantile(&values, 1.0 - alpha),
        redrawn: draws.iter().map(|d| d.1).sum(),
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Everything the report needs from one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub margin_probs: [f64; NUM_CLASSES],
    pub predicted: MarginClass,
    pub truth: MarginClass,
    pub malignancy_prob: f64,
    pub malignant: bool,
    /// Activation precision of the true class's prototypes against the
    /// lesion mask.
    pub ap_lesion: f64,
    /// Same against the fine mask, when the sample has one.
    pub ap_fine: Option<f64>,
}

pub fn evaluate_sample(params: &ModelParams, sample: &DatasetSample, tau: f64) -> Result<EvalRecord> {
    let out = params.forward(&sample.image)?;
    let truth = sample.margin_class;
    let ap_lesion = activation_precision(params, &out, truth, &sample.lesion_mask, tau)?;
    let ap_fine = match &sample.fine_mask {
        Some(m) => Some(activation_precision(params, &out, truth, m, tau)?),
        None => None,
    };
    Ok(EvalRecord {
        id: sample.id.clone(),
        margin_probs: out.margin_probs,
        predicted: out.predicted_class(),
        truth,
        malignancy_prob: out.malignancy,
        malignant: sample.malignant,
        ap_lesion,
        ap_fine,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub tau: f64,
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            seed: 1,
        }
    }
}

/// A point estimate with its bootstrap interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub redrawn: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub circumscribed: Option<Metric>,
    pub indistinct: Option<Metric>,
    pub spiculated: Option<Metric>,
}

/// The evaluation report. Undefined metrics (e.g. AUROC on a split with a
/// single class) are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub options: EvalOptions,
    pub margin_auroc_avg: Option<Metric>,
    pub margin_auroc: PerClass,
    pub malignancy_auroc: Option<Metric>,
    pub cohens_kappa: Option<Metric>,
    pub accuracy: Option<Metric>,
    pub activation_precision_lesion: Option<Metric>,
    pub activation_precision_fine: Option<Metric>,
}

fn margin_auroc_one(records: &[&EvalRecord], class: MarginClass) -> Option<f64> {
    let scores: Vec<f64> = records.iter().map(|r| r.margin_probs[class.index()]).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.truth == class).collect();
    auroc(&scores, &labels).ok()
}

fn margin_auroc_avg(records: &[&EvalRecord]) -> Option<f64> {
    let mut sum = 0.0;
    for class in MarginClass::ALL {
        sum += margin_auroc_one(records, class)?;
    }
    Some(sum / NUM_CLASSES as f64)
}

fn malignancy_auroc(records: &[&EvalRecord]) -> Option<f64> {
    let scores: Vec<f64> = records.iter().map(|r| r.malignancy_prob).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.malignant).collect();
    auroc(&scores, &labels).ok()
}

fn kappa(records: &[&EvalRecord]) -> Option<f64> {
    let pred: Vec<usize> = records.iter().map(|r| r.predicted.index()).collect();
    let truth: Vec<usize> = records.iter().map(|r| r.truth.index()).collect();
    cohens_kappa(&pred, &truth, NUM_CLASSES).ok()
}

fn accuracy(records: &[&EvalRecord]) -> Option<f64> {
    let hits = records.iter().filter(|r| r.predicted == r.truth).count();
    (!records.is_empty()).then(|| hits as f64 / records.len() as f64)
}

fn mean_of(records: &[&EvalRecord], f: impl Fn(&EvalRecord) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = records.iter().filter_map(|r| f(r)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds the report from per-sample records. Each metric gets its own
/// bootstrap stream so adding a metric never shifts another's interval.
pub fn summarize(records: &[EvalRecord], split: &str, opts: &EvalOptions) -> Result<EvalReport> {
    let all: Vec<&EvalRecord> = records.iter().collect();
    let metric = |salt: u64, f: &(dyn Fn(&[&EvalRecord]) -> Option<f64> + Sync)| -> Result<Option<Metric>> {
        let Some(value) = f(&all) else { return Ok(None) };
        let ci = bootstrap_ci(
            records.len(),
            |idx| {
                let picked: Vec<&EvalRecord> = idx.iter().map(|&i| &records[i]).collect();
                f(&picked)
            },
            opts.resamples,
            opts.level,
            rng::derive_seed(opts.seed, "metric", salt),
        )?;
        Ok(Some(Metric {
            value,
            ci_low: ci.lo,
            ci_high: ci.hi,
            redrawn: ci.redrawn,
        }))
    };
    let per_class = |c: MarginClass| move |r: &[&EvalRecord]| margin_auroc_one(r, c);
    Ok(EvalReport {
        split: split.to_string(),
        samples: records.len(),
        options: opts.clone(),
        margin_auroc_avg: metric(0, &margin_auroc_avg)?,
        margin_auroc: PerClass {
            circumscribed: metric(1, &per_class(MarginClass::Circumscribed))?,
            indistinct: metric(2, &per_class(MarginClass::Indistinct))?,
            spiculated: metric(3, &per_class(MarginClass::Spiculated))?,
        },
        malignancy_auroc: metric(4, &malignancy_auroc)?,
        cohens_kappa: metric(5, &kappa)?,
        accuracy: metric(6, &accuracy)?,
        activation_precision_lesion: metric(7, &|r: &[&EvalRecord]| mean_of(r, |x| Some(x.ap_lesion)))?,
        activation_precision_fine: metric(8, &|r: &[&EvalRecord]| mean_of(r, |x| x.ap_fine))?,
    })
}

/// Evaluates every sample (in parallel) and summarizes.
pub fn evaluate(
    params: &ModelParams,
    samples: &[&DatasetSample],
    split: &str,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<EvalRecord>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split} has no samples")));
    }
    let records: Vec<EvalRecord> = samples
        .par_iter()
        .map(|s| evaluate_sample(params, s, opts.tau))
        .collect::<Result<_>>()?;
    let report = summarize(&records, split, opts)?;
    Ok((report, records))
}

pub const RECORDS_HEADER: &str =
    "id,truth,predicted,p_circumscribed,p_indistinct,p_spiculated,malignant,p_malignant,ap_lesion,ap_fine";

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from(RECORDS_HEADER);
    s.push('\n');
    for r in records {
        let [a, b, c] = r.margin_probs;
        s.push_str(&format!(
            "{},{},{},{a},{b},{c},{},{},{},{}\n",
            r.id,
            r.truth.name(),
            r.predicted.name(),
            u8::from(r.malignant),
            r.malignancy_prob,
            r.ap_lesion,
            r.ap_fine.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    s
}
