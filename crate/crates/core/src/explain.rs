//! Explanation artifacts: class activation visualizations, heatmap
//! overlays, per-case HTML reports and the prototype gallery.
//!
//! Asset files follow `{case}_{prototype}_{role}.ppm` (roles `pam`, `patch`,
//! `source`) plus `{case}_input.ppm` and `{case}_cav.ppm`; gallery assets are
//! `proto{j}_source.ppm` and `proto{j}_self.ppm`. The HTML pages embed the
//! same pixels as BMP data URIs so they render without the asset files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine as _;

use crate::classes::{MarginClass, NUM_CLASSES};
use crate::error::{Error, IoContext, Result};
use crate::image_io::{to_byte, RgbImage};
use crate::protonet::{cell_center, receptive_field, ForwardOutput, ModelParams, SimilarityMaps};
use crate::synthgen::Dataset;

/// Number of prototype rows in a case report.
pub const DEFAULT_TOP_N: usize = 3;

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(map: &[f64]) -> Vec<f64> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// `Σ_j w_j·PAM_j`, min-max normalized.
pub fn weighted_activation(pams: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = pams.first() else {
        return Err(Error::InvalidArgument("no activation maps to combine".into()));
    };
    if pams.len() != weights.len() || pams.iter().any(|p| p.len() != first.len()) {
        return Err(Error::Shape("activation maps and weights disagree in shape".into()));
    }
    let mut acc = vec![0.0; first.len()];
    for (p, w) in pams.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(p.iter()) {
            *a += w * v;
        }
    }
    Ok(min_max_normalize(&acc))
}

/// Class activation visualization: the PAMs of `class`'s prototypes
/// weighted by their pooled similarity scores.
pub fn class_activation_visualization(
    params: &ModelParams,
    maps: &SimilarityMaps,
    class: MarginClass,
) -> Result<Vec<f64>> {
    let js: Vec<usize> = params.prototypes_of(class).collect();
    if js.is_empty() {
        return Err(Error::NoPrototypes(class.index()));
    }
    let pams = js
        .iter()
        .map(|&j| params.compute_pam(maps, j).map(|p| p.values))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = pams.iter().map(|p| p.as_slice()).collect();
    let weights: Vec<f64> = js.iter().map(|&j| maps.pooled[j]).collect();
    weighted_activation(&refs, &weights)
}

/// Blue (0) through cyan, green and yellow to red (1).
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * 4.0;
    let i = (pos.floor() as usize).min(3);
    let f = pos - i as f64;
    let c = |k: usize| to_byte(STOPS[i][k] + (STOPS[i + 1][k] - STOPS[i][k]) * f);
    [c(0), c(1), c(2)]
}

/// Heatmap of `map` (min-max normalized) blended half-and-half over the
/// grayscale `image`.
pub fn overlay(image: &[f64], map: &[f64], size: usize) -> Result<RgbImage> {
    if image.len() != size * size || map.len() != size * size {
        return Err(Error::Shape(format!(
            "overlay needs {size}x{size} image and map, got {} and {} pixels",
            image.len(),
            map.len()
        )));
    }
    let norm = min_max_normalize(map);
    let mut out = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let g = image[i].clamp(0.0, 1.0);
            let heat = colormap(norm[i]);
            let px = heat.map(|c| to_byte(0.5 * g + 0.5 * f64::from(c) / 255.0));
            out.set(x, y, px);
        }
    }
    Ok(out)
}

/// Writes [`overlay`] as a binary PPM.
pub fn render_overlay(image: &[f64], map: &[f64], size: usize, path: &Path) -> Result<()> {
    overlay(image, map, size)?.write(path)
}

fn gray_rgb(image: &[f64], size: usize) -> RgbImage {
    let mut out = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let g = to_byte(image[y * size + x]);
            out.set(x, y, [g, g, g]);
        }
    }
    out
}

/// Draws a one-pixel rectangle outline, inclusive corners.
fn draw_box(img: &mut RgbImage, (y0, x0, y1, x1): (usize, usize, usize, usize), rgb: [u8; 3]) {
    for x in x0..=x1 {
        img.set(x, y0, rgb);
        img.set(x, y1, rgb);
    }
    for y in y0..=y1 {
        img.set(x0, y, rgb);
        img.set(x1, y, rgb);
    }
}

fn crop(img: &RgbImage, (y0, x0, y1, x1): (usize, usize, usize, usize)) -> RgbImage {
    let mut out = RgbImage::new(x1 - x0 + 1, y1 - y0 + 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            out.set(x - x0, y - y0, img.get(x, y));
        }
    }
    out
}

/// One prototype as it bears on a case.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatch {
    pub prototype: usize,
    pub class: MarginClass,
    /// Pooled similarity `s_j`.
    pub similarity: f64,
    /// `s_j · w1[class(j), j]`.
    pub contribution: f64,
    /// Grid cell of the strongest activation on the case image.
    pub best_cell: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct CaseExplanation {
    pub case_id: String,
    pub image: Vec<f64>,
    pub size: usize,
    pub forward: ForwardOutput,
    /// All prototypes by descending similarity.
    pub matches: Vec<PrototypeMatch>,
    /// `contributions[r][j] = s_j · w1[r, j]`; row sums are the margin logits.
    pub contributions: Vec<Vec<f64>>,
}

impl CaseExplanation {
    pub fn margin_probs(&self) -> [f64; NUM_CLASSES] {
        self.forward.margin_probs
    }

    pub fn malignancy(&self) -> f64 {
        self.forward.malignancy
    }
}

pub fn explain_case(params: &ModelParams, case_id: &str, image: &[f64]) -> Result<CaseExplanation> {
    let forward = params.forward(image)?;
    let m = params.num_prototypes();
    let w = params.w1.data();
    let s = &forward.maps.pooled;
    let contributions: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|r| (0..m).map(|j| s[j] * w[r * m + j]).collect())
        .collect();
    let mut matches: Vec<PrototypeMatch> = (0..m)
        .map(|j| {
            let class = params.prototype_class[j];
            PrototypeMatch {
                prototype: j,
                class,
                similarity: s[j],
                contribution: contributions[class.index()][j],
                best_cell: forward.maps.argmax_cell(j),
            }
        })
        .collect();
    matches.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.prototype.cmp(&b.prototype)));
    Ok(CaseExplanation {
        case_id: case_id.to_string(),
        image: image.to_vec(),
        size: params.arch.image_size,
        forward,
        matches,
        contributions,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn data_uri(img: &RgbImage) -> String {
    format!(
        "data:image/bmp;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(img.encode_bmp())
    )
}

fn img_tag(img: &RgbImage, alt: &str, scale: usize) -> String {
    format!(
        "<img src=\"{}\" alt=\"{}\" width=\"{}\" height=\"{}\" style=\"image-rendering:pixelated\">",
        data_uri(img),
        escape(alt),
        img.width * scale,
        img.height * scale
    )
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}\
td,th{border:1px solid #999;padding:4px 8px;text-align:right}td.l,th.l{text-align:left}";

/// Source images of projected prototypes, looked up by training image id.
pub trait SourceImages {
    fn source_image(&self, id: &str) -> Option<Vec<f64>>;
}

impl SourceImages for Dataset {
    fn source_image(&self, id: &str) -> Option<Vec<f64>> {
        self.get(id).map(|s| s.image.clone())
    }
}

/// Writes `{case}.html` and its assets into `out_dir`; returns the HTML path.
/// Prototype rows without a retrievable source image show the case-side
/// columns only.
pub fn case_report(
    params: &ModelParams,
    exp: &CaseExplanation,
    sources: Option<&dyn SourceImages>,
    top_n: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let size = exp.size;
    let case = &exp.case_id;
    let asset = |name: String| out_dir.join(name);

    let input = gray_rgb(&exp.image, size);
    input.write(&asset(format!("{case}_input.ppm")))?;
    let predicted = exp.forward.predicted_class();
    let cav = class_activation_visualization(params, &exp.forward.maps, predicted)?;
    let cav_img = overlay(&exp.image, &cav, size)?;
    cav_img.write(&asset(format!("{case}_cav.ppm")))?;

    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Case {c}</title><style>{STYLE}</style></head><body>\n\
         <h1>Case {c}</h1>\n<p>{input} {cav}</p>\n<p>Left: input. Right: class activation for the predicted class ({p}).</p>\n",
        c = escape(case),
        input = img_tag(&input, "input", 2),
        cav = img_tag(&cav_img, "class activation", 2),
        p = predicted.name(),
    );

    html.push_str("<h2>Closest prototypes</h2>\n<table>\n<tr><th>rank</th><th class=\"l\">prototype</th><th class=\"l\">class</th><th>similarity</th><th>contribution</th><th>activation on case</th><th>prototype patch</th><th>source image</th></tr>\n");
    for (rank, m) in exp.matches.iter().take(top_n).enumerate() {
        let j = m.prototype;
        let pam = params.compute_pam(&exp.forward.maps, j)?;
        let pam_img = overlay(&exp.image, &pam.values, size)?;
        pam_img.write(&asset(format!("{case}_{j}_pam.ppm")))?;
        let (mut patch_cell, mut source_cell) = (String::from("n/a"), String::from("n/a"));
        let prov = params.provenance[j].as_ref();
        if let (Some(prov), Some(src)) = (prov, sources) {
            if let Some(src_img) = src.source_image(&prov.image_id) {
                let bbox = receptive_field(prov.row, prov.col, size);
                let patch = crop(&gray_rgb(&src_img, size), bbox);
                patch.write(&asset(format!("{case}_{j}_patch.ppm")))?;
                let own = params.forward(&src_img)?;
                let own_pam = params.compute_pam(&own.maps, j)?;
                let mut src_vis = overlay(&src_img, &own_pam.values, size)?;
                draw_box(&mut src_vis, bbox, [255, 255, 255]);
                src_vis.write(&asset(format!("{case}_{j}_source.ppm")))?;
                patch_cell = img_tag(&patch, "prototype patch", 3);
                source_cell = format!("{}<br>{}", img_tag(&src_vis, "source", 1), escape(&prov.image_id));
            }
        }
        let _ = writeln!(
            html,
            "<tr><td>{}</td><td class=\"l\">{j}</td><td class=\"l\">{}</td><td>{:.4}</td><td>{:.4}</td><td>{}</td><td>{patch_cell}</td><td>{source_cell}</td></tr>",
            rank + 1,
            m.class.name(),
            m.similarity,
            m.contribution,
            img_tag(&pam_img, "activation", 1),
        );
    }
    html.push_str("</table>\n");

    html.push_str("<h2>Contributions</h2>\n<table>\n<tr><th class=\"l\">prototype</th><th class=\"l\">class</th><th>similarity</th>");
    for c in MarginClass::ALL {
        let _ = write!(html, "<th>{}</th>", c.name());
    }
    html.push_str("</tr>\n");
    for j in 0..params.num_prototypes() {
        let _ = write!(
            html,
            "<tr><td class=\"l\">{j}</td><td class=\"l\">{}</td><td>{:.6}</td>",
            params.prototype_class[j].name(),
            exp.forward.maps.pooled[j]
        );
        for row in &exp.contributions {
            let _ = write!(html, "<td>{:.6}</td>", row[j]);
        }
        html.push_str("</tr>\n");
    }
    html.push_str("<tr><th class=\"l\" colspan=\"3\">margin logit</th>");
    for z in exp.forward.margin_logits {
        let _ = write!(html, "<th>{z:.6}</th>");
    }
    html.push_str("</tr>\n<tr><th class=\"l\" colspan=\"3\">margin probability</th>");
    for p in exp.forward.margin_probs {
        let _ = write!(html, "<th>{p:.4}</th>");
    }
    html.push_str("</tr>\n</table>\n");

    let h2 = &params.h2;
    let _ = write!(
        html,
        "<h2>Malignancy</h2>\n<p>P(malignant) = sigmoid({:.4}", h2.bias
    );
    for (c, (w, z)) in MarginClass::ALL.iter().zip(h2.weights.iter().zip(exp.forward.margin_logits)) {
        let _ = write!(html, " + {w:.4}&middot;{z:.4}<sub>{}</sub>", c.name());
    }
    let _ = writeln!(html, ") = {:.4}</p>\n</body></html>", exp.forward.malignancy);

    let path = asset(format!("{case}.html"));
    fs::write(&path, html).at(&path)?;
    Ok(path)
}

/// One gallery entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub prototype: usize,
    pub class: MarginClass,
    pub image_id: String,
    pub cell: (usize, usize),
    /// Receptive field of the cell, `(y0, x0, y1, x1)`.
    pub bbox: (usize, usize, usize, usize),
    /// Pixel the cell maps to under the upsampling geometry.
    pub center: (usize, usize),
    /// Cell of the strongest self-activation on the source image.
    pub self_argmax: (usize, usize),
}

/// Writes `gallery.html` with one section per prototype. Every prototype
/// must have provenance and a retrievable source image.
pub fn prototype_gallery(
    params: &ModelParams,
    sources: &dyn SourceImages,
    out_dir: &Path,
) -> Result<(PathBuf, Vec<GalleryEntry>)> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let size = params.arch.image_size;
    let grid = params.arch.grid_size();
    let mut html = format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Prototype gallery</title><style>{STYLE}</style></head><body>\n<h1>Prototype gallery</h1>\n<p>{} prototypes.</p>\n",
        params.num_prototypes()
    );
    let mut entries = Vec::new();
    for j in 0..params.num_prototypes() {
        let prov = params.provenance[j]
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("prototype {j} has no provenance; project first")))?;
        let src = sources.source_image(&prov.image_id).ok_or_else(|| {
            Error::InvalidArgument(format!("source image {} of prototype {j} not found", prov.image_id))
        })?;
        let bbox = receptive_field(prov.row, prov.col, size);
        let mut marked = gray_rgb(&src, size);
        draw_box(&mut marked, bbox, [255, 0, 0]);
        marked.write(&out_dir.join(format!("proto{j}_source.ppm")))?;
        let own = params.forward(&src)?;
        let pam = params.compute_pam(&own.maps, j)?;
        let self_img = overlay(&src, &pam.values, size)?;
        self_img.write(&out_dir.join(format!("proto{j}_self.ppm")))?;
        let entry = GalleryEntry {
            prototype: j,
            class: params.prototype_class[j],
            image_id: prov.image_id.clone(),
            cell: (prov.row, prov.col),
            bbox,
            center: cell_center(prov.row, prov.col, grid, size),
            self_argmax: own.maps.argmax_cell(j),
        };
        let _ = writeln!(
            html,
            "<section id=\"proto{j}\"><h2>Prototype {j} ({})</h2>\n<p>source {} cell ({}, {}), pixels y {}..={} x {}..={}</p>\n<p>{} {}</p></section>",
            entry.class.name(),
            escape(&entry.image_id),
            entry.cell.0,
            entry.cell.1,
            bbox.0,
            bbox.2,
            bbox.1,
            bbox.3,
            img_tag(&marked, "source with patch", 2),
            img_tag(&self_img, "self activation", 2),
        );
        entries.push(entry);
    }
    html.push_str("</body></html>\n");
    let path = out_dir.join("gallery.html");
    fs::write(&path, html).at(&path)?;
    Ok((path, entries))
}
