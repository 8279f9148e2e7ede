//! Training objective: cross entropy plus cluster, separation and
//! fine-annotation terms.
//!
//! For a batch of `B` items,
//!
//! ```text
//! total = CrsEnt + λc·Clst + λs·Sep + λf·Fine
//! ```
//!
//! where every term is a mean over the batch. `γ_ij` is the mean of the `k`
//! smallest squared distances between prototype `j` and the patches of
//! image `i`; Clst averages `min_{j ∈ class(y_i)} γ_ij`, Sep averages
//! `−min_{j ∉ class(y_i)} γ_ij`, and Fine averages
//!
//! ```text
//! Σ_{j ∈ class(y_i)} ‖m_i ⊙ PAM_ij‖_F + Σ_{j ∉ class(y_i)} ‖PAM_ij‖_F
//! ```
//!
//! over items that carry a mask (fine mask for D′ members, lesion mask for
//! the rest), optionally rescaled by [`FineNormalization`].
//!
//! ```
//! use protomargin::losses::fine_closed_form;
//! // constant PAM v on a p×p map, half of it relevant
//! let (same, other) = fine_closed_form(2.0, 8, 0.5);
//! assert!((same - 2.0 * 8.0 / 2f64.sqrt()).abs() < 1e-12);
//! assert_eq!(other, 16.0);
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::classes::MarginClass;
use crate::error::{Error, Result};
use crate::protonet::{build_forward, ForwardVars, ModelParams, ParamVars};

/// Scale applied to each item's fine-annotation sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineNormalization {
    /// Plain Frobenius norms.
    #[default]
    None,
    /// Divide by the square root of the pixel count, i.e. use RMS activation.
    SqrtPixels,
    /// Divide by the pixel count.
    Pixels,
}

impl FineNormalization {
    pub fn factor(self, pixels: usize) -> f64 {
        match self {
            FineNormalization::None => 1.0,
            FineNormalization::SqrtPixels => 1.0 / (pixels as f64).sqrt(),
            FineNormalization::Pixels => 1.0 / pixels as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_f: f64,
    pub fine_normalization: FineNormalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_c: 0.8,
            lambda_s: 0.08,
            lambda_f: 0.001,
            fine_normalization: FineNormalization::None,
        }
    }
}

/// Values of the four terms and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub cluster: f64,
    pub separation: f64,
    pub fine: f64,
    pub total: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_f: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&self) -> f64 {
        self.cross_entropy + self.lambda_c * self.cluster + self.lambda_s * self.separation + self.lambda_f * self.fine
    }

    /// Adds the terms of `other` (coefficients must match).
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.cross_entropy += other.cross_entropy;
        self.cluster += other.cluster;
        self.separation += other.separation;
        self.fine += other.fine;
        self.total += other.total;
        self.lambda_c = other.lambda_c;
        self.lambda_s = other.lambda_s;
        self.lambda_f = other.lambda_f;
    }
}

/// One batch member as seen by the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossItem<'a> {
    pub image: &'a [f64],
    pub label: MarginClass,
    /// Fine mask for D′ members, lesion mask otherwise; 0 = relevant.
    /// `None` drops the item from the fine term.
    pub mask: Option<&'a [u8]>,
}

/// Graph nodes of the objective.
#[derive(Clone, Debug)]
pub struct ObjectiveVars {
    pub cross_entropy: Var,
    pub cluster: Var,
    pub separation: Var,
    pub fine: Var,
    pub total: Var,
}

impl ObjectiveVars {
    pub fn breakdown(&self, g: &Graph, cfg: &LossConfig) -> LossBreakdown {
        LossBreakdown {
            cross_entropy: g.value(self.cross_entropy).item(),
            cluster: g.value(self.cluster).item(),
            separation: g.value(self.separation).item(),
            fine: g.value(self.fine).item(),
            total: g.value(self.total).item(),
            lambda_c: cfg.lambda_c,
            lambda_s: cfg.lambda_s,
            lambda_f: cfg.lambda_f,
        }
    }
}

/// `γ`: mean of the `k` smallest entries of a distance map.
pub fn min_k_distance(g: &mut Graph, distance_map: Var, k: usize) -> Result<Var> {
    g.bottomk_mean(distance_map, k)
}

fn class_prototypes(params: &ModelParams, label: MarginClass, same: bool) -> Result<Vec<usize>> {
    let js: Vec<usize> = (0..params.num_prototypes())
        .filter(|&j| (params.prototype_class[j] == label) == same)
        .collect();
    if js.is_empty() {
        return Err(if same {
            Error::NoPrototypes(label.index())
        } else {
            Error::InvalidArgument(format!("no prototype outside class {label}"))
        });
    }
    Ok(js)
}

/// `min_{j ∈ class(label)} γ_j` for one image.
pub fn cluster_term(g: &mut Graph, params: &ModelParams, fv: &ForwardVars, label: MarginClass, k: usize) -> Result<Var> {
    let js = class_prototypes(params, label, true)?;
    let gammas = js
        .iter()
        .map(|&j| min_k_distance(g, fv.distances[j], k))
        .collect::<Result<Vec<_>>>()?;
    g.min(&gammas)
}

/// `−min_{j ∉ class(label)} γ_j` for one image.
pub fn separation_term(
    g: &mut Graph,
    params: &ModelParams,
    fv: &ForwardVars,
    label: MarginClass,
    k: usize,
) -> Result<Var> {
    let js = class_prototypes(params, label, false)?;
    let gammas = js
        .iter()
        .map(|&j| min_k_distance(g, fv.distances[j], k))
        .collect::<Result<Vec<_>>>()?;
    let m = g.min(&gammas)?;
    Ok(g.scale(m, -1.0))
}

/// Un-normalised fine-annotation sum for one image.
pub fn fine_term(
    g: &mut Graph,
    params: &ModelParams,
    fv: &ForwardVars,
    label: MarginClass,
    mask: &[u8],
) -> Result<Var> {
    let size = params.arch.image_size;
    if mask.len() != size * size {
        return Err(Error::Shape(format!(
            "mask has {} pixels, image has {}",
            mask.len(),
            size * size
        )));
    }
    let weights: Vec<f64> = mask.iter().map(|&m| if m == 0 { 0.0 } else { 1.0 }).collect();
    let mut norms = Vec::with_capacity(params.num_prototypes());
    for (j, &sim) in fv.similarities.iter().enumerate() {
        let pam = g.bilinear_upsample(sim, size, size)?;
        let pam = if params.prototype_class[j] == label {
            g.mul_const(pam, &weights)?
        } else {
            pam
        };
        norms.push(g.frobenius_norm(pam));
    }
    g.add_all(&norms)
}

/// Closed-form fine terms for a constant PAM `v` on a `p×p` map where a
/// fraction `relevant` of the pixels is relevant: `(same-class, other-class)`.
pub fn fine_closed_form(v: f64, p: usize, relevant: f64) -> (f64, f64) {
    let n = (p * p) as f64;
    (v * (n * (1.0 - relevant)).sqrt(), v * p as f64)
}

/// Builds the batch objective on `g`. Every term is divided by `denominator`
/// (normally `items.len()`); passing the full batch size while building one
/// item per graph lets per-item gradients be summed into the batch gradient.
pub fn build_objective(
    g: &mut Graph,
    params: &ModelParams,
    vars: &ParamVars,
    items: &[LossItem<'_>],
    cfg: &LossConfig,
    denominator: usize,
) -> Result<ObjectiveVars> {
    if items.is_empty() || denominator == 0 {
        return Err(Error::InvalidArgument("objective needs a nonempty batch".into()));
    }
    let k = params.arch.k;
    let pixels = params.arch.image_size * params.arch.image_size;
    let norm = cfg.fine_normalization.factor(pixels);
    let mut ce = Vec::new();
    let mut clst = Vec::new();
    let mut sep = Vec::new();
    let mut fine = Vec::new();
    for item in items {
        let fv = build_forward(g, params, vars, item.image)?;
        ce.push(g.softmax_cross_entropy(fv.logits, item.label.index())?);
        clst.push(cluster_term(g, params, &fv, item.label, k)?);
        sep.push(separation_term(g, params, &fv, item.label, k)?);
        if let Some(mask) = item.mask {
            let f = fine_term(g, params, &fv, item.label, mask)?;
            fine.push(g.scale(f, norm));
        }
    }
    let inv = 1.0 / denominator as f64;
    let mean = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        if v.is_empty() {
            return Ok(g.constant(crate::autodiff::Tensor::scalar(0.0)));
        }
        let s = g.add_all(v)?;
        Ok(g.scale(s, inv))
    };
    let cross_entropy = mean(g, &ce)?;
    let cluster = mean(g, &clst)?;
    let separation = mean(g, &sep)?;
    let fine = mean(g, &fine)?;
    let wc = g.scale(cluster, cfg.lambda_c);
    let ws = g.scale(separation, cfg.lambda_s);
    let wf = g.scale(fine, cfg.lambda_f);
    let total = g.add_all(&[cross_entropy, wc, ws, wf])?;
    Ok(ObjectiveVars {
        cross_entropy,
        cluster,
        separation,
        fine,
        total,
    })
}

/// Evaluates the objective on one graph and returns the breakdown only.
pub fn total_objective(params: &ModelParams, items: &[LossItem<'_>], cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, params, crate::protonet::Trainable::NONE);
    let obj = build_objective(&mut g, params, &vars, items, cfg, items.len())?;
    Ok(obj.breakdown(&g, cfg))
}
