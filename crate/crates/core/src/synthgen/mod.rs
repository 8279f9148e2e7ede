//! Synthetic three-class lesion corpus.
//!
//! Each sample is a bright elliptical mass on a smooth textured background.
//! The margin class controls how the boundary looks:
//!
//! * circumscribed: sharp edge,
//! * indistinct: edge blurred over several pixels,
//! * spiculated: moderately sharp edge plus thin lines radiating outwards.
//!
//! Two masks come with every sample, both using 0 for "relevant":
//! the lesion mask covers the mass dilated by [`LESION_DILATION`] pixels plus
//! its spicules, and the fine mask covers a band of ±[`FINE_BAND`] pixels
//! around the boundary plus the spicules dilated by the same amount.
//!
//! Everything is a pure function of the spec and seed.
//!
//! ```
//! use protomargin::synthgen::{generate_sample, LesionSpec};
//! use protomargin::MarginClass;
//!
//! let spec = LesionSpec::sample(MarginClass::Spiculated, 112, 3);
//! let a = generate_sample(&spec, 3).unwrap();
//! let b = generate_sample(&spec, 3).unwrap();
//! assert_eq!(a.image, b.image);
//! assert!(a.fine_mask.iter().any(|&m| m == 0));
//! ```

mod augment;
mod dataset;

pub use augment::{apply_augment, augment, AugmentParams, CROP_FRACTION};
pub use dataset::{
    generate_corpus, manifest_sha256, read_dataset, split_quotas, write_dataset, CorpusConfig, Dataset,
    DatasetSample, Generated, Manifest, ManifestEntry, SamplePaths, Split, SplitSpec, MANIFEST_FILE,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classes::MarginClass;
use crate::error::{Error, Result};
use crate::rng;

/// Dilation of the lesion region for the lesion-scale mask, in pixels.
pub const LESION_DILATION: f64 = 6.0;
/// Half width of the fine-annotation band around the boundary, in pixels.
pub const FINE_BAND: f64 = 3.0;
/// Minimum distance between the lesion mask and the image border.
pub const MIN_BORDER: f64 = 8.0;

const BACKGROUND_LEVEL: f64 = 0.22;
const LESION_CONTRAST: f64 = 0.42;
const SPICULE_CONTRAST: f64 = 0.34;
const SPICULE_HALF_WIDTH: f64 = 0.9;
const PIXEL_NOISE: f64 = 0.015;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub margin_class: MarginClass,
    pub image_size: usize,
    /// `(y, x)` in pixels.
    pub center: (f64, f64),
    /// Semi-axes `(a, b)` in pixels before rotation.
    pub radii: (f64, f64),
    /// Rotation of the `a` axis, radians.
    pub orientation: f64,
    pub edge_blur_sigma: f64,
    pub spicule_count: usize,
    pub spicule_length: f64,
    pub background_texture_seed: u64,
}

impl LesionSpec {
    /// Draws a random spec of the given class.
    pub fn sample(class: MarginClass, image_size: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "lesion-spec");
        let s = image_size as f64;
        let mid = (s - 1.0) / 2.0;
        let scale = s / 112.0;
        let a = r.gen_range(18.0..26.0) * scale;
        let b = r.gen_range(0.75..1.0) * a;
        let (blur, count, length) = match class {
            MarginClass::Circumscribed => (0.6, 0, 0.0),
            MarginClass::Indistinct => (r.gen_range(4.0..6.0), 0, 0.0),
            MarginClass::Spiculated => (1.0, r.gen_range(8..=13), r.gen_range(8.0..12.0) * scale),
        };
        let jitter = 4.0 * scale;
        // shrink small-image lesions so the mask keeps its border
        let room = mid - jitter - MIN_BORDER - LESION_DILATION - 0.5;
        let shrink = (room / (a + length)).min(1.0);
        let (a, b, length) = (a * shrink, b * shrink, length * shrink);
        Self {
            margin_class: class,
            image_size,
            center: (
                mid + r.gen_range(-jitter..jitter),
                mid + r.gen_range(-jitter..jitter),
            ),
            radii: (a, b),
            orientation: r.gen_range(0.0..std::f64::consts::PI),
            edge_blur_sigma: blur,
            spicule_count: count,
            spicule_length: length,
            background_texture_seed: r.gen(),
        }
    }

    /// Largest distance from the centre covered by the lesion mask.
    pub fn extent(&self) -> f64 {
        self.radii.0.max(self.radii.1) + self.spicule_length + LESION_DILATION
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.image_size < 16 {
            return bad(format!("image size {} too small", self.image_size));
        }
        let (a, b) = self.radii;
        if !(a > 0.0 && b > 0.0) {
            return bad(format!("radii must be positive, got ({a}, {b})"));
        }
        if !(self.edge_blur_sigma > 0.0) {
            return bad("edge blur sigma must be positive".into());
        }
        let spiculated = self.margin_class == MarginClass::Spiculated;
        if spiculated != (self.spicule_count > 0) {
            return bad(format!(
                "{} lesion with {} spicules",
                self.margin_class, self.spicule_count
            ));
        }
        if spiculated && !(self.spicule_length > 0.0) {
            return bad("spicules need a positive length".into());
        }
        let indistinct = self.margin_class == MarginClass::Indistinct;
        if !indistinct && self.edge_blur_sigma > 2.0 {
            return bad(format!(
                "edge blur {} is reserved for indistinct margins",
                self.edge_blur_sigma
            ));
        }
        if indistinct && self.edge_blur_sigma < 3.0 {
            return bad(format!("indistinct margin with sharp edge {}", self.edge_blur_sigma));
        }
        let hi = self.image_size as f64 - 1.0 - MIN_BORDER;
        let e = self.extent();
        let (cy, cx) = self.center;
        if cy - e < MIN_BORDER || cx - e < MIN_BORDER || cy + e > hi || cx + e > hi {
            return bad(format!(
                "lesion of extent {e:.1} at ({cy:.1}, {cx:.1}) leaves less than {MIN_BORDER} px border"
            ));
        }
        Ok(())
    }
}

/// One generated sample. Masks hold 0 on relevant pixels and 1 elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub size: usize,
    /// Row-major intensities in `[0, 1]`, multiples of 1/255.
    pub image: Vec<f64>,
    pub margin_class: MarginClass,
    pub malignant: bool,
    pub lesion_mask: Vec<u8>,
    pub fine_mask: Vec<u8>,
    pub confounder: bool,
}

/// Class-conditional malignancy probabilities, indexed by class.
pub const DEFAULT_MALIGNANCY_PRIOR: [f64; 3] = [0.1, 0.6, 0.9];

/// Logistic approximation of the standard normal CDF; plenty for edge
/// profiles.
fn soft_step(x: f64) -> f64 {
    1.0 / (1.0 + (-1.702 * x).exp())
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0);
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    (((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt(), t)
}

struct Geometry<'a> {
    spec: &'a LesionSpec,
    cos: f64,
    sin: f64,
    spicules: Vec<((f64, f64), (f64, f64))>,
}

impl<'a> Geometry<'a> {
    fn new(spec: &'a LesionSpec, rng: &mut impl Rng) -> Self {
        let (cos, sin) = (spec.orientation.cos(), spec.orientation.sin());
        let mut g = Self {
            spec,
            cos,
            sin,
            spicules: Vec::new(),
        };
        let n = spec.spicule_count;
        let offset = rng.gen_range(0.0..std::f64::consts::TAU);
        for i in 0..n {
            let theta = offset + std::f64::consts::TAU * (i as f64 + rng.gen_range(-0.3..0.3)) / n as f64;
            let dir = (theta.sin(), theta.cos());
            let root = g.boundary_point(dir);
            // start slightly inside the mass so the spicule grows out of it
            let start = (root.0 - 1.5 * dir.0, root.1 - 1.5 * dir.1);
            let len = spec.spicule_length * rng.gen_range(0.8..1.0);
            let end = (root.0 + len * dir.0, root.1 + len * dir.1);
            g.spicules.push((start, end));
        }
        g
    }

    /// Elliptic radius of `p`: 1 on the boundary.
    fn norm_radius(&self, p: (f64, f64)) -> (f64, f64) {
        let (dy, dx) = (p.0 - self.spec.center.0, p.1 - self.spec.center.1);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let (a, b) = self.spec.radii;
        (((u / a).powi(2) + (v / b).powi(2)).sqrt(), (dy * dy + dx * dx).sqrt())
    }

    /// Signed distance to the boundary along the ray from the centre;
    /// negative inside.
    fn boundary_distance(&self, p: (f64, f64)) -> f64 {
        let (r, dist) = self.norm_radius(p);
        if r < 1e-12 {
            return -self.spec.radii.0.min(self.spec.radii.1);
        }
        dist - dist / r
    }

    fn boundary_point(&self, dir: (f64, f64)) -> (f64, f64) {
        let c = self.spec.center;
        let (r, dist) = self.norm_radius((c.0 + dir.0, c.1 + dir.1));
        let t = dist / r;
        (c.0 + t * dir.0, c.1 + t * dir.1)
    }

    fn spicule_distance(&self, p: (f64, f64)) -> Option<(f64, f64)> {
        self.spicules
            .iter()
            .map(|&(a, b)| segment_distance(p, a, b))
            .min_by(|x, y| x.0.total_cmp(&y.0))
    }
}

fn background(spec: &LesionSpec) -> Vec<f64> {
    let mut r = rng::stream(spec.background_texture_seed, "texture");
    let n = spec.image_size;
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                r.gen_range(0.01..0.025),
                r.gen_range(0.0..std::f64::consts::TAU),
                r.gen_range(0.0..std::f64::consts::TAU),
                r.gen_range(0.01..0.03),
            )
        })
        .collect();
    let mut out = vec![BACKGROUND_LEVEL; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut v = 0.0;
            for &(freq, dir, phase, amp) in &waves {
                let t = (x as f64 * dir.cos() + y as f64 * dir.sin()) * freq * std::f64::consts::TAU;
                v += amp * (t + phase).sin();
            }
            out[y * n + x] += v;
        }
    }
    out
}

/// Renders a sample from its spec. The seed drives spicule placement, pixel
/// noise and the malignancy label (drawn from [`DEFAULT_MALIGNANCY_PRIOR`]).
pub fn generate_sample(spec: &LesionSpec, seed: u64) -> Result<SynthSample> {
    generate_sample_with_prior(spec, seed, DEFAULT_MALIGNANCY_PRIOR)
}

pub fn generate_sample_with_prior(spec: &LesionSpec, seed: u64, prior: [f64; 3]) -> Result<SynthSample> {
    spec.validate()?;
    if prior.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument(format!("malignancy prior {prior:?} outside [0, 1]")));
    }
    let mut r = rng::stream(seed, "lesion-render");
    let geom = Geometry::new(spec, &mut r);
    let n = spec.image_size;
    let mut image = background(spec);
    let mut lesion_mask = vec![1u8; n * n];
    let mut fine_mask = vec![1u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let p = (y as f64, x as f64);
            let i = y * n + x;
            let bd = geom.boundary_distance(p);
            let mut lift = LESION_CONTRAST * soft_step(-bd / spec.edge_blur_sigma);
            let mut relevant_lesion = bd <= LESION_DILATION;
            let mut relevant_fine = bd.abs() <= FINE_BAND;
            if let Some((sd, t)) = geom.spicule_distance(p) {
                let taper = 1.0 - 0.6 * t;
                lift = lift.max(SPICULE_CONTRAST * taper * soft_step((SPICULE_HALF_WIDTH - sd) / 0.35));
                relevant_lesion |= sd <= FINE_BAND;
                relevant_fine |= sd <= FINE_BAND;
            }
            let v = image[i] + lift + PIXEL_NOISE * (r.gen::<f64>() - 0.5) * 2.0;
            image[i] = quantize(v);
            if relevant_lesion {
                lesion_mask[i] = 0;
            }
            if relevant_fine {
                fine_mask[i] = 0;
            }
        }
    }
    let malignant = rng::stream(seed, "malignancy").gen_bool(prior[spec.margin_class.index()]);
    Ok(SynthSample {
        size: n,
        image,
        margin_class: spec.margin_class,
        malignant,
        lesion_mask,
        fine_mask,
        confounder: false,
    })
}

/// Rounds to the nearest multiple of 1/255 in `[0, 1]`, so images survive
/// an 8-bit file round trip exactly.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Pixels whose distance to the lesion boundary is at most `FINE_BAND`, or
/// that lie on a spicule. Exposed for tests and the guide.
pub fn spicule_pixels(spec: &LesionSpec, seed: u64) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut r = rng::stream(seed, "lesion-render");
    let geom = Geometry::new(spec, &mut r);
    let n = spec.image_size;
    let mut out = Vec::new();
    for y in 0..n {
        for x in 0..n {
            if let Some((sd, _)) = geom.spicule_distance((y as f64, x as f64)) {
                if sd <= SPICULE_HALF_WIDTH {
                    out.push(y * n + x);
                }
            }
        }
    }
    Ok(out)
}

/// 5×5 glyph bitmaps, one per class: filled square, ring, cross.
const GLYPHS: [[u8; 5]; 3] = [
    [0b11111, 0b11111, 0b11111, 0b11111, 0b11111],
    [0b11111, 0b10001, 0b10001, 0b10001, 0b11111],
    [0b10001, 0b01010, 0b00100, 0b01010, 0b10001],
];
const GLYPH_SCALE: usize = 2;
const GLYPH_MARGIN: usize = 3;
const GLYPH_LEVEL: f64 = 0.95;

/// Pixel indices covered by the class glyph in the given corner
/// (0 = top left, then clockwise).
pub fn glyph_pixels(class: MarginClass, corner: usize, size: usize) -> Vec<usize> {
    let side = 5 * GLYPH_SCALE;
    let far = size - GLYPH_MARGIN - side;
    let (oy, ox) = match corner % 4 {
        0 => (GLYPH_MARGIN, GLYPH_MARGIN),
        1 => (GLYPH_MARGIN, far),
        2 => (far, far),
        _ => (far, GLYPH_MARGIN),
    };
    let bitmap = GLYPHS[class.index()];
    let mut out = Vec::new();
    for gy in 0..side {
        for gx in 0..side {
            let bit = bitmap[gy / GLYPH_SCALE] >> (4 - gx / GLYPH_SCALE) & 1;
            if bit == 1 {
                out.push((oy + gy) * size + ox + gx);
            }
        }
    }
    out
}

/// With probability `strength`, stamps the glyph of the sample's own class
/// into a random corner. Glyph pixels are always marked irrelevant in both
/// masks.
pub fn inject_confounder(sample: &SynthSample, strength: f64, seed: u64) -> Result<SynthSample> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!(
            "confounder strength {strength} outside [0, 1]"
        )));
    }
    let mut out = sample.clone();
    let mut r = rng::stream(seed, "confounder");
    let draw: f64 = r.gen();
    let corner = r.gen_range(0..4);
    if strength == 0.0 || draw >= strength {
        return Ok(out);
    }
    for i in glyph_pixels(sample.margin_class, corner, sample.size) {
        out.image[i] = quantize(GLYPH_LEVEL);
        out.lesion_mask[i] = 1;
        out.fine_mask[i] = 1;
    }
    out.confounder = true;
    Ok(out)
}
