//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Points whose nearest tie among discrete selections is closer than
    /// this are skipped.
    pub tie_tolerance: f64,
    /// Gradients smaller than this in both routes are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (sampled with
    /// `seed`). `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tie_tolerance: 1e-6,
            floor: 1e-6,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter, element)` with the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped: usize,
    /// Set when the base point itself sits on a selection tie.
    pub base_on_tie: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tolerance
    }
}

struct Eval {
    value: f64,
    signature: u64,
}

fn evaluate<F>(params: &[Tensor], build: &F) -> Result<Eval>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(Eval {
        value: g.value(out).item(),
        signature: g.selection_signature(),
    })
}

/// Compares the analytic gradient of the scalar built by `build` against
/// central differences, perturbing each parameter coordinate in turn.
pub fn grad_check<F>(params: &[Tensor], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let base_signature = g.selection_signature();
    let base_on_tie = g.min_tie_gap() < opts.tie_tolerance;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        base_on_tie,
    };
    if base_on_tie {
        return Ok(report);
    }

    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let n = params[pi].numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = params[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + opts.step;
            let plus = evaluate(&work, &build)?;
            work[pi].data_mut()[idx] = orig - opts.step;
            let minus = evaluate(&work, &build)?;
            work[pi].data_mut()[idx] = orig;
            if plus.signature != base_signature || minus.signature != base_signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * opts.step);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((pi, idx));
            }
        }
    }
    Ok(report)
}
