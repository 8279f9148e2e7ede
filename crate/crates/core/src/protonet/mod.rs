//! The prototype network: backbone `f`, prototype layer `g`, margin head
//! `h1` and malignancy head `h2`.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::autodiff::{Graph, Tensor, Var};
use crate::classes::{MarginClass, NUM_CLASSES};
use crate::error::{Error, Result};

pub(crate) use checkpoint::hex;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, LayoutEntry,
    CHECKPOINT_VERSION,
};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Side length of the square input image. Must be divisible by 8.
    pub image_size: usize,
    /// Output channels of the three conv blocks.
    pub block_channels: [usize; 3],
    /// Channels `c` of the latent grid (and of every prototype).
    pub latent_channels: usize,
    pub prototypes_per_class: usize,
    /// Number of cells averaged by top-k pooling.
    pub k: usize,
    pub epsilon: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 112,
            block_channels: [8, 16, 32],
            latent_channels: 64,
            prototypes_per_class: 5,
            k: 5,
            epsilon: 1e-4,
        }
    }
}

impl ArchConfig {
    pub fn grid_size(&self) -> usize {
        self.image_size / 8
    }

    pub fn grid_cells(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!(
                "image_size must be a multiple of 8 and at least 16, got {}",
                self.image_size
            )));
        }
        if self.block_channels.contains(&0) || self.latent_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if self.prototypes_per_class == 0 {
            return Err(Error::InvalidArgument("need at least one prototype per class".into()));
        }
        if self.k == 0 || self.k > self.grid_cells() {
            return Err(Error::InvalidArgument(format!(
                "k = {} outside 1..={}",
                self.k,
                self.grid_cells()
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, kh, kw]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(rng: &mut impl Rng, out: usize, inp: usize, size: usize, gain: f64) -> Self {
        let fan_in = (inp * size * size) as f64;
        let bound = (gain / fan_in).sqrt();
        let data = (0..out * inp * size * size)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(vec![out, inp, size, size], data).expect("conv shape"),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Where a projected prototype came from: a training image and a grid cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
}

/// Logistic malignancy head on unnormalised margin logits:
/// `P(malignant) = sigmoid(weights · logits + bias)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MalignancyHead {
    pub weights: [f64; NUM_CLASSES],
    pub bias: f64,
}

impl MalignancyHead {
    /// Head written as `sigmoid((raw · logits + shift) * scale)`.
    pub fn from_scaled(raw: [f64; NUM_CLASSES], shift: f64, scale: f64) -> Self {
        Self {
            weights: raw.map(|w| w * scale),
            bias: shift * scale,
        }
    }

    /// Coefficients `(-16, -10, 6)`, shift `-155`, scale `1/100`.
    pub fn reference() -> Self {
        Self::from_scaled([-16.0, -10.0, 6.0], -155.0, 0.01)
    }

    pub fn score(&self, logits: &[f64; NUM_CLASSES]) -> f64 {
        self.weights
            .iter()
            .zip(logits)
            .map(|(w, y)| w * y)
            .sum::<f64>()
            + self.bias
    }

    pub fn probability(&self, logits: &[f64; NUM_CLASSES]) -> f64 {
        kernels::sigmoid(self.score(logits))
    }
}

impl Default for MalignancyHead {
    fn default() -> Self {
        Self {
            weights: [0.0; NUM_CLASSES],
            bias: 0.0,
        }
    }
}

/// `sigmoid(head(logits))`, see [`MalignancyHead::probability`].
pub fn malignancy_probability(head: &MalignancyHead, logits: &[f64; NUM_CLASSES]) -> f64 {
    head.probability(logits)
}

/// All trainable state of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    /// Three 3×3 blocks followed by the 1×1 latent projection.
    pub backbone: Vec<ConvLayer>,
    /// One `[c]` vector per prototype.
    pub prototypes: Vec<Tensor>,
    pub prototype_class: Vec<MarginClass>,
    pub provenance: Vec<Option<Provenance>>,
    /// `[3, m]`; row = class, column = prototype.
    pub w1: Tensor,
    pub h2: MalignancyHead,
    /// Set once stage A3 has (re)initialised `w1`.
    pub w1_initialized: bool,
}

/// `+1` where the prototype belongs to the row's class, `-1` elsewhere.
pub fn signed_class_connections(classes: &[MarginClass]) -> Tensor {
    let m = classes.len();
    let mut data = vec![-1.0; NUM_CLASSES * m];
    for (j, class) in classes.iter().enumerate() {
        data[class.index() * m + j] = 1.0;
    }
    Tensor::new(vec![NUM_CLASSES, m], data).expect("w1 shape")
}

impl ModelParams {
    /// Random backbone, prototypes uniform in the unit hypercube, `w1` set to
    /// the ±1 class-connection pattern.
    pub fn init(arch: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let [c1, c2, c3] = arch.block_channels;
        let backbone = vec![
            ConvLayer::init(rng, c1, 1, 3, 6.0),
            ConvLayer::init(rng, c2, c1, 3, 6.0),
            ConvLayer::init(rng, c3, c2, 3, 6.0),
            ConvLayer::init(rng, arch.latent_channels, c3, 1, 3.0),
        ];
        let mut prototypes = Vec::new();
        let mut prototype_class = Vec::new();
        for class in MarginClass::ALL {
            for _ in 0..arch.prototypes_per_class {
                let v = (0..arch.latent_channels).map(|_| rng.gen::<f64>()).collect();
                prototypes.push(Tensor::vector(v));
                prototype_class.push(class);
            }
        }
        let m = prototypes.len();
        Ok(Self {
            w1: signed_class_connections(&prototype_class),
            provenance: vec![None; m],
            arch,
            backbone,
            prototypes,
            prototype_class,
            h2: MalignancyHead::default(),
            w1_initialized: false,
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn prototypes_of(&self, class: MarginClass) -> impl Iterator<Item = usize> + '_ {
        self.prototype_class
            .iter()
            .enumerate()
            .filter(move |(_, c)| **c == class)
            .map(|(j, _)| j)
    }

    pub fn check_image(&self, image: &[f64]) -> Result<()> {
        let n = self.arch.image_size * self.arch.image_size;
        if image.len() != n {
            return Err(Error::Shape(format!(
                "expected a {s}x{s} image ({n} pixels), got {} pixels",
                image.len(),
                s = self.arch.image_size
            )));
        }
        Ok(())
    }

    /// Full inference pass.
    pub fn forward(&self, image: &[f64]) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let vars = ParamVars::register(&mut g, self, Trainable::NONE);
        let fv = build_forward(&mut g, self, &vars, image)?;
        Ok(fv.collect(&g, self))
    }

    /// Latent grid `[c, s, s]` only.
    pub fn latent(&self, image: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = ParamVars::register(&mut g, self, Trainable::NONE);
        let latent = build_latent(&mut g, self, &vars, image)?;
        Ok(g.value(latent).clone())
    }

    /// Similarity maps for an already computed latent grid.
    pub fn similarity_maps(&self, latent: &Tensor) -> Result<SimilarityMaps> {
        let s = self.arch.grid_size();
        let c = self.arch.latent_channels;
        if latent.shape() != [c, s, s] {
            return Err(Error::Shape(format!(
                "latent shape {:?} does not match [{c}, {s}, {s}]",
                latent.shape()
            )));
        }
        let mut distances = Vec::with_capacity(self.num_prototypes());
        let mut similarities = Vec::with_capacity(self.num_prototypes());
        let mut pooled = Vec::with_capacity(self.num_prototypes());
        for p in &self.prototypes {
            let d = kernels::sq_distance_map(latent.data(), p.data(), c, s * s);
            let sim: Vec<f64> = d
                .iter()
                .map(|&v| kernels::log_similarity(v, self.arch.epsilon))
                .collect();
            let (sel, _) = kernels::select_k(&sim, self.arch.k, true);
            pooled.push(sel.iter().map(|&i| sim[i]).sum::<f64>() / self.arch.k as f64);
            distances.push(d);
            similarities.push(sim);
        }
        Ok(SimilarityMaps {
            grid: s,
            distances,
            similarities,
            pooled,
        })
    }

    pub fn margin_logits(&self, pooled: &[f64]) -> [f64; NUM_CLASSES] {
        let m = self.num_prototypes();
        let w = self.w1.data();
        let mut out = [0.0; NUM_CLASSES];
        for (r, o) in out.iter_mut().enumerate() {
            *o = w[r * m..(r + 1) * m]
                .iter()
                .zip(pooled)
                .map(|(a, b)| a * b)
                .sum();
        }
        out
    }

    /// Prototype activation map for prototype `j` on image-sized output.
    pub fn compute_pam(&self, maps: &SimilarityMaps, j: usize) -> Result<Pam> {
        compute_pam(maps, j, self.arch.image_size)
    }
}

/// Which parameter groups record gradients on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub prototypes: bool,
    pub w1: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        backbone: false,
        prototypes: false,
        w1: false,
    };
    /// Stage A1: backbone and prototypes.
    pub const FEATURES: Trainable = Trainable {
        backbone: true,
        prototypes: true,
        w1: false,
    };
    pub const ALL: Trainable = Trainable {
        backbone: true,
        prototypes: true,
        w1: true,
    };
}

/// Graph handles for every parameter of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    /// `(weight, bias)` per conv layer.
    pub backbone: Vec<(Var, Var)>,
    pub prototypes: Vec<Var>,
    pub w1: Var,
}

impl ParamVars {
    pub fn register(g: &mut Graph, params: &ModelParams, trainable: Trainable) -> Self {
        let backbone = params
            .backbone
            .iter()
            .map(|layer| {
                (
                    g.leaf(layer.weight.clone(), trainable.backbone),
                    g.leaf(layer.bias.clone(), trainable.backbone),
                )
            })
            .collect();
        let prototypes = params
            .prototypes
            .iter()
            .map(|p| g.leaf(p.clone(), trainable.prototypes))
            .collect();
        let w1 = g.leaf(params.w1.clone(), trainable.w1);
        Self {
            backbone,
            prototypes,
            w1,
        }
    }
}

/// Backbone only: returns the `[c, s, s]` latent grid node.
pub fn build_latent(g: &mut Graph, params: &ModelParams, vars: &ParamVars, image: &[f64]) -> Result<Var> {
    params.check_image(image)?;
    let size = params.arch.image_size;
    let x = g.constant(Tensor::new(vec![1, 1, size, size], image.to_vec())?);
    let mut h = x;
    let blocks = vars.backbone.len() - 1;
    for &(w, b) in &vars.backbone[..blocks] {
        h = g.conv2d(h, w, Some(b), 1, 1)?;
        h = g.relu(h);
        h = g.max_pool2d(h, 2)?;
    }
    let (w, b) = vars.backbone[blocks];
    h = g.conv2d(h, w, Some(b), 1, 0)?;
    h = g.sigmoid(h);
    let s = params.arch.grid_size();
    g.reshape(h, &[params.arch.latent_channels, s, s])
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub latent: Var,
    /// `[s, s]` squared distances, one per prototype.
    pub distances: Vec<Var>,
    /// `[s, s]` log similarities, one per prototype.
    pub similarities: Vec<Var>,
    /// Scalar top-k pooled similarity per prototype.
    pub pooled: Vec<Var>,
    /// `[3]` margin logits.
    pub logits: Var,
}

/// Prototype layer and `h1` on top of an existing latent node.
pub fn build_head(g: &mut Graph, params: &ModelParams, vars: &ParamVars, latent: Var) -> Result<ForwardVars> {
    let mut distances = Vec::with_capacity(vars.prototypes.len());
    let mut similarities = Vec::with_capacity(vars.prototypes.len());
    let mut pooled = Vec::with_capacity(vars.prototypes.len());
    for &p in &vars.prototypes {
        let d = g.sq_distance_map(latent, p)?;
        let s = g.dist_to_sim(d, params.arch.epsilon)?;
        let pool = g.topk_mean(s, params.arch.k)?;
        distances.push(d);
        similarities.push(s);
        pooled.push(pool);
    }
    let scores = g.stack(&pooled)?;
    let logits = g.linear(scores, vars.w1, None)?;
    Ok(ForwardVars {
        latent,
        distances,
        similarities,
        pooled,
        logits,
    })
}

pub fn build_forward(g: &mut Graph, params: &ModelParams, vars: &ParamVars, image: &[f64]) -> Result<ForwardVars> {
    let latent = build_latent(g, params, vars, image)?;
    build_head(g, params, vars, latent)
}

impl ForwardVars {
    pub fn collect(&self, g: &Graph, params: &ModelParams) -> ForwardOutput {
        let grid = params.arch.grid_size();
        let maps = SimilarityMaps {
            grid,
            distances: self.distances.iter().map(|&v| g.value(v).data().to_vec()).collect(),
            similarities: self
                .similarities
                .iter()
                .map(|&v| g.value(v).data().to_vec())
                .collect(),
            pooled: self.pooled.iter().map(|&v| g.value(v).item()).collect(),
        };
        let l = g.value(self.logits).data();
        let margin_logits = [l[0], l[1], l[2]];
        let p = kernels::softmax(&margin_logits);
        ForwardOutput {
            latent: g.value(self.latent).clone(),
            margin_probs: [p[0], p[1], p[2]],
            malignancy: params.h2.probability(&margin_logits),
            margin_logits,
            maps,
        }
    }
}

/// Per-prototype similarity grids for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMaps {
    /// Grid side length.
    pub grid: usize,
    pub distances: Vec<Vec<f64>>,
    pub similarities: Vec<Vec<f64>>,
    /// Top-k pooled similarity score `s_j` per prototype.
    pub pooled: Vec<f64>,
}

impl SimilarityMaps {
    /// Row-major grid cell of the largest similarity for prototype `j`
    /// (first on ties).
    pub fn argmax_cell(&self, j: usize) -> (usize, usize) {
        let (sel, _) = kernels::select_k(&self.similarities[j], 1, true);
        (sel[0] / self.grid, sel[0] % self.grid)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub latent: Tensor,
    pub maps: SimilarityMaps,
    pub margin_logits: [f64; NUM_CLASSES],
    pub margin_probs: [f64; NUM_CLASSES],
    pub malignancy: f64,
}

impl ForwardOutput {
    pub fn predicted_class(&self) -> MarginClass {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.margin_logits[i] > self.margin_logits[best] {
                best = i;
            }
        }
        MarginClass::from_index(best).expect("class index")
    }
}

/// Prototype activation map: a similarity grid upsampled to image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Pam {
    pub prototype: usize,
    pub size: usize,
    pub values: Vec<f64>,
}

pub fn compute_pam(maps: &SimilarityMaps, j: usize, image_size: usize) -> Result<Pam> {
    let grid = maps.similarities.get(j).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "prototype index {j} out of range ({} prototypes)",
            maps.similarities.len()
        ))
    })?;
    let values = kernels::bilinear_upsample(grid, maps.grid, maps.grid, image_size, image_size)?;
    Ok(Pam {
        prototype: j,
        size: image_size,
        values,
    })
}

/// Image-space pixel box `(y0, x0, y1, x1)`, inclusive, covered by the
/// receptive field of latent cell `(row, col)`: three padded 3×3 convs each
/// followed by 2× pooling give a 22-pixel window starting at `8·row − 7`.
pub fn receptive_field(row: usize, col: usize, image_size: usize) -> (usize, usize, usize, usize) {
    let span = |i: usize| {
        let lo = (8 * i).saturating_sub(7);
        let hi = (8 * i + 14).min(image_size - 1);
        (lo, hi)
    };
    let (y0, y1) = span(row);
    let (x0, x1) = span(col);
    (y0, x0, y1, x1)
}

/// Image pixel nearest to grid cell `(row, col)` under corner-aligned
/// upsampling.
pub fn cell_center(row: usize, col: usize, grid: usize, image_size: usize) -> (usize, usize) {
    let map = |i: usize| {
        if grid < 2 {
            return 0;
        }
        let num = i * (image_size - 1);
        let den = grid - 1;
        (num + den / 2) / den
    };
    (map(row), map(col))
}
