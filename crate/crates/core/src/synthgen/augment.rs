use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SynthSample;
use crate::rng;

/// Side of the random crop relative to the image.
pub const CROP_FRACTION: f64 = 0.8;
const MAX_ROTATION_DEG: f64 = 15.0;

/// One geometric transform. Applied in this order to output coordinates:
/// crop → rotation about the image centre → flips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub angle_deg: f64,
    /// Top-left corner `(y, x)` of the crop window, or `None` for no crop.
    pub crop_origin: Option<(usize, usize)>,
    pub crop_size: usize,
}

impl AugmentParams {
    pub fn identity(size: usize) -> Self {
        Self {
            flip_horizontal: false,
            flip_vertical: false,
            angle_deg: 0.0,
            crop_origin: None,
            crop_size: size,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip_horizontal && !self.flip_vertical && self.angle_deg == 0.0 && self.crop_origin.is_none()
    }

    /// Random flips, a rotation uniform in ±15°, and a crop of
    /// `round(0.8 · size)` pixels at a uniform offset.
    pub fn draw(size: usize, rng: &mut impl Rng) -> Self {
        let crop_size = (CROP_FRACTION * size as f64).round() as usize;
        let slack = size - crop_size;
        Self {
            flip_horizontal: rng.gen_bool(0.5),
            flip_vertical: rng.gen_bool(0.5),
            angle_deg: rng.gen_range(-MAX_ROTATION_DEG..MAX_ROTATION_DEG),
            crop_origin: Some((rng.gen_range(0..=slack), rng.gen_range(0..=slack))),
            crop_size,
        }
    }

    /// Source coordinates for output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, size: usize) -> (f64, f64) {
        let (mut sy, mut sx) = (y as f64, x as f64);
        if let Some((oy, ox)) = self.crop_origin {
            // corner-aligned rescale of the crop window to the full image
            let f = (self.crop_size - 1) as f64 / (size - 1) as f64;
            sy = oy as f64 + sy * f;
            sx = ox as f64 + sx * f;
        }
        if self.angle_deg != 0.0 {
            let c = (size - 1) as f64 / 2.0;
            let (s, co) = self.angle_deg.to_radians().sin_cos();
            let (dy, dx) = (sy - c, sx - c);
            sy = c + co * dy - s * dx;
            sx = c + s * dy + co * dx;
        }
        let last = (size - 1) as f64;
        if self.flip_vertical {
            sy = last - sy;
        }
        if self.flip_horizontal {
            sx = last - sx;
        }
        (sy, sx)
    }
}

fn bilinear(img: &[f64], size: usize, y: f64, x: f64) -> f64 {
    let last = (size - 1) as f64;
    let y = y.clamp(0.0, last);
    let x = x.clamp(0.0, last);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(size - 1), (x0 + 1).min(size - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let a = img[y0 * size + x0];
    let b = img[y0 * size + x1];
    let c = img[y1 * size + x0];
    let d = img[y1 * size + x1];
    let top = a + fx * (b - a);
    let bottom = c + fx * (d - c);
    top + fy * (bottom - top)
}

fn nearest(mask: &[u8], size: usize, y: f64, x: f64) -> u8 {
    let last = (size - 1) as f64;
    if y < -0.5 || x < -0.5 || y > last + 0.5 || x > last + 0.5 {
        return 1;
    }
    let yi = y.round().clamp(0.0, last) as usize;
    let xi = x.round().clamp(0.0, last) as usize;
    mask[yi * size + xi]
}

/// Applies one transform jointly to the image and both masks. Pixels that
/// come from outside the source image repeat the nearest edge pixel in the
/// image and are marked irrelevant in the masks.
pub fn apply_augment(sample: &SynthSample, params: &AugmentParams) -> SynthSample {
    if params.is_identity() {
        return sample.clone();
    }
    let n = sample.size;
    let mut out = sample.clone();
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = params.source(y, x, n);
            let i = y * n + x;
            out.image[i] = bilinear(&sample.image, n, sy, sx);
            out.lesion_mask[i] = nearest(&sample.lesion_mask, n, sy, sx);
            out.fine_mask[i] = nearest(&sample.fine_mask, n, sy, sx);
        }
    }
    out
}

/// Draws a transform from `seed` and applies it.
pub fn augment(sample: &SynthSample, seed: u64) -> SynthSample {
    let params = AugmentParams::draw(sample.size, &mut rng::stream(seed, rng::AUGMENT));
    apply_augment(sample, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> SynthSample {
        SynthSample {
            size: n,
            image: (0..n * n).map(|i| (i % n) as f64 / n as f64).collect(),
            margin_class: crate::MarginClass::Circumscribed,
            malignant: false,
            lesion_mask: (0..n * n).map(|i| u8::from(i % n < n / 2)).collect(),
            fine_mask: vec![1; n * n],
            confounder: false,
        }
    }

    #[test]
    fn pure_flip_mirrors_columns() {
        let s = ramp(8);
        let p = AugmentParams {
            flip_horizontal: true,
            ..AugmentParams::identity(8)
        };
        let out = apply_augment(&s, &p);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.image[y * 8 + x], s.image[y * 8 + 7 - x]);
                assert_eq!(out.lesion_mask[y * 8 + x], s.lesion_mask[y * 8 + 7 - x]);
            }
        }
    }

    #[test]
    fn crop_size_is_eighty_percent() {
        let p = AugmentParams::draw(112, &mut rng::stream(1, rng::AUGMENT));
        assert_eq!(p.crop_size, 90);
        let (oy, ox) = p.crop_origin.unwrap();
        assert!(oy <= 22 && ox <= 22);
    }
}
