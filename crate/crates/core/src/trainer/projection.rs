use rayon::prelude::*;

use super::TrainData;
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::protonet::{ModelParams, Provenance};

/// Outcome of projecting one prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionRecord {
    pub prototype: usize,
    pub provenance: Provenance,
    /// Squared distance between the old prototype and the chosen patch.
    pub distance: f64,
}

/// Latent grids `[c, s, s]` of every training image, in data order.
pub fn training_latents(params: &ModelParams, data: &TrainData) -> Result<Vec<Tensor>> {
    data.items.par_iter().map(|it| params.latent(&it.image)).collect()
}

/// Replaces every prototype with its nearest training patch of the same
/// class. Candidates are scanned by image id, then row-major cell; only a
/// strictly smaller distance replaces the incumbent, so ties go to the
/// lowest id and cell.
pub fn project_prototypes(params: &mut ModelParams, data: &TrainData) -> Result<Vec<ProjectionRecord>> {
    let latents = training_latents(params, data)?;
    project_with_latents(params, data, &latents)
}

pub fn project_with_latents(
    params: &mut ModelParams,
    data: &TrainData,
    latents: &[Tensor],
) -> Result<Vec<ProjectionRecord>> {
    let c = params.arch.latent_channels;
    let grid = params.arch.grid_size();
    let cells = grid * grid;
    let mut order: Vec<usize> = (0..data.items.len()).collect();
    order.sort_by(|&a, &b| data.items[a].id.cmp(&data.items[b].id));

    let records: Vec<Option<(usize, usize, f64, Vec<f64>)>> = (0..params.num_prototypes())
        .into_par_iter()
        .map(|j| {
            let p = params.prototypes[j].data();
            let class = params.prototype_class[j];
            let mut best: Option<(usize, usize, f64)> = None;
            for &i in &order {
                if data.items[i].label != class {
                    continue;
                }
                let z = latents[i].data();
                for cell in 0..cells {
                    let mut d = 0.0;
                    for ch in 0..c {
                        let diff = z[ch * cells + cell] - p[ch];
                        d += diff * diff;
                    }
                    if best.is_none_or(|(_, _, bd)| d < bd) {
                        best = Some((i, cell, d));
                    }
                }
            }
            best.map(|(i, cell, d)| {
                let z = latents[i].data();
                let patch = (0..c).map(|ch| z[ch * cells + cell]).collect();
                (i, cell, d, patch)
            })
        })
        .collect();

    let mut out = Vec::new();
    for (j, rec) in records.into_iter().enumerate() {
        // a class without training images keeps its prototype as is
        let Some((i, cell, distance, patch)) = rec else { continue };
        let provenance = Provenance {
            image_id: data.items[i].id.clone(),
            row: cell / grid,
            col: cell % grid,
        };
        params.prototypes[j] = Tensor::vector(patch);
        params.provenance[j] = Some(provenance.clone());
        out.push(ProjectionRecord {
            prototype: j,
            provenance,
            distance,
        });
    }
    Ok(out)
}

/// Removes later prototypes whose class and provenance duplicate an earlier
/// one, together with their `w1` columns. Returns removed indices (in the
/// numbering before removal).
pub fn prune_duplicates(params: &mut ModelParams) -> Vec<usize> {
    let m = params.num_prototypes();
    let mut keep = Vec::with_capacity(m);
    let mut removed = Vec::new();
    for j in 0..m {
        let dup = params.provenance[j].is_some()
            && keep.iter().any(|&i: &usize| {
                params.prototype_class[i] == params.prototype_class[j] && params.provenance[i] == params.provenance[j]
            });
        if dup {
            removed.push(j);
        } else {
            keep.push(j);
        }
    }
    if removed.is_empty() {
        return removed;
    }
    let rows = params.w1.shape()[0];
    let w = params.w1.data();
    let mut w1 = Vec::with_capacity(rows * keep.len());
    for r in 0..rows {
        for &j in &keep {
            w1.push(w[r * m + j]);
        }
    }
    params.w1 = Tensor::new(vec![rows, keep.len()], w1).expect("pruned w1 shape");
    params.prototypes = keep.iter().map(|&j| params.prototypes[j].clone()).collect();
    params.prototype_class = keep.iter().map(|&j| params.prototype_class[j]).collect();
    params.provenance = keep.iter().map(|&j| params.provenance[j].clone()).collect();
    removed
}
