use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_sample_with_prior, inject_confounder, LesionSpec, SynthSample, DEFAULT_MALIGNANCY_PRIOR};
use crate::classes::{MarginClass, NUM_CLASSES};
use crate::error::{Error, IoContext, Result};
use crate::image_io::GrayImage;
use crate::protonet::hex;
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Self::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How many samples go to train / val / test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Fractions, normalised to sum to one.
    Ratios([f64; 3]),
    /// Exact sizes; must add up to the corpus size.
    Counts([usize; 3]),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratios([0.73, 0.12, 0.15])
    }
}

fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let missing = total - out.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        out[i] += 1;
    }
    out
}

/// Per-class split sizes: `quotas[class][split]`. Every entry is within one
/// sample of the class's proportional share and the column sums equal the
/// split sizes.
pub fn split_quotas(class_counts: [usize; NUM_CLASSES], spec: &SplitSpec) -> Result<[[usize; 3]; NUM_CLASSES]> {
    let n: usize = class_counts.iter().sum();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot split an empty corpus".into()));
    }
    let totals: Vec<usize> = match spec {
        SplitSpec::Ratios(r) => {
            if r.iter().any(|v| !(*v >= 0.0)) || r.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidArgument(format!("bad split ratios {r:?}")));
            }
            largest_remainder(n, r)
        }
        SplitSpec::Counts(c) => {
            if c.iter().sum::<usize>() != n {
                return Err(Error::InvalidArgument(format!(
                    "split counts {c:?} do not add up to {n} samples"
                )));
            }
            c.to_vec()
        }
    };
    let exact = |c: usize, s: usize| class_counts[c] as f64 * totals[s] as f64 / n as f64;
    let mut q = [[0usize; 3]; NUM_CLASSES];
    let mut row_need = [0usize; NUM_CLASSES];
    let mut col_need = [0usize; 3];
    for c in 0..NUM_CLASSES {
        for s in 0..3 {
            q[c][s] = exact(c, s).floor() as usize;
        }
        row_need[c] = class_counts[c] - q[c].iter().sum::<usize>();
    }
    for s in 0..3 {
        col_need[s] = totals[s] - (0..NUM_CLASSES).map(|c| q[c][s]).sum::<usize>();
    }
    let mut cols: Vec<usize> = (0..3).collect();
    cols.sort_by(|&a, &b| col_need[b].cmp(&col_need[a]).then(a.cmp(&b)));
    for s in cols {
        let mut rows: Vec<usize> = (0..NUM_CLASSES).filter(|&c| row_need[c] > 0).collect();
        rows.sort_by(|&a, &b| {
            let fa = exact(a, s) - exact(a, s).floor();
            let fb = exact(b, s) - exact(b, s).floor();
            row_need[b].cmp(&row_need[a]).then(fb.total_cmp(&fa)).then(a.cmp(&b))
        });
        if rows.len() < col_need[s] {
            return Err(Error::InvalidArgument("split quotas are not attainable".into()));
        }
        for &c in rows.iter().take(col_need[s]) {
            q[c][s] += 1;
            row_need[c] -= 1;
        }
    }
    debug_assert!(row_need.iter().all(|&r| r == 0));
    Ok(q)
}

/// Parameters of the generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Indexed by class: circumscribed, indistinct, spiculated.
    pub samples_per_class: [usize; NUM_CLASSES],
    pub image_size: usize,
    /// Probability that a sample carries its class glyph.
    pub confounder_strength: f64,
    /// P(malignant | class).
    pub malignancy_prior: [f64; NUM_CLASSES],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            samples_per_class: [275; NUM_CLASSES],
            image_size: 112,
            confounder_strength: 0.0,
            malignancy_prior: DEFAULT_MALIGNANCY_PRIOR,
        }
    }
}

/// A sample together with everything needed to regenerate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub id: String,
    pub spec: LesionSpec,
    pub seed: u64,
    pub sample: SynthSample,
}

/// Generates the whole corpus in parallel; ids are `s0000`, `s0001`, … in
/// class-major order.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<Generated>> {
    let mut jobs = Vec::new();
    for class in MarginClass::ALL {
        for _ in 0..config.samples_per_class[class.index()] {
            jobs.push(class);
        }
    }
    if jobs.is_empty() {
        return Err(Error::InvalidArgument("corpus needs at least one sample".into()));
    }
    jobs.into_par_iter()
        .enumerate()
        .map(|(i, class)| {
            let sample_seed = rng::derive_seed(seed, rng::DATA, i as u64);
            let spec = LesionSpec::sample(class, config.image_size, sample_seed);
            let clean = generate_sample_with_prior(&spec, sample_seed, config.malignancy_prior)?;
            let sample = inject_confounder(&clean, config.confounder_strength, sample_seed)?;
            Ok(Generated {
                id: format!("s{i:04}"),
                spec,
                seed: sample_seed,
                sample,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub image: String,
    pub lesion_mask: String,
    pub fine_mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub margin_class: MarginClass,
    pub malignant: bool,
    pub has_fine_mask: bool,
    pub confounder: bool,
    pub seed: u64,
    pub spec: LesionSpec,
    pub paths: SamplePaths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub corpus: CorpusConfig,
    pub split: SplitSpec,
    /// Number of training samples carrying fine masks (the set D′).
    pub fine_annotated: usize,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|e| e.split == split).count()
    }

    pub fn fine_train_count(&self) -> usize {
        self.samples
            .iter()
            .filter(|e| e.split == Split::Train && e.has_fine_mask)
            .count()
    }
}

/// Splits `samples` class-stratified, picks `fine_annotated` training
/// samples (also stratified) to carry fine masks, and writes
///
/// ```text
/// <out>/manifest.json
/// <out>/<split>/<id>.pgm          image
/// <out>/<split>/<id>_lesion.pgm   lesion mask (0 = relevant)
/// <out>/<split>/<id>_fine.pgm     fine mask, D′ and all val/test samples
/// ```
///
/// Masks are stored as 0/255.
pub fn write_dataset(
    samples: &[Generated],
    corpus: &CorpusConfig,
    split: &SplitSpec,
    fine_annotated: usize,
    seed: u64,
    out: &Path,
) -> Result<Manifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples to write".into()))?;
    let size = first.sample.size;
    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, g) in samples.iter().enumerate() {
        by_class[g.sample.margin_class.index()].push(i);
    }
    let counts = [by_class[0].len(), by_class[1].len(), by_class[2].len()];
    let quotas = split_quotas(counts, split)?;
    let train_total: usize = quotas.iter().map(|q| q[0]).sum();
    if fine_annotated > train_total {
        return Err(Error::InvalidArgument(format!(
            "{fine_annotated} fine-annotated samples requested but only {train_total} in train"
        )));
    }
    let train_counts: Vec<f64> = quotas.iter().map(|q| q[0] as f64).collect();
    let fine_quota = if train_total == 0 {
        vec![0; NUM_CLASSES]
    } else {
        largest_remainder(fine_annotated, &train_counts)
    };

    let mut r = rng::stream(seed, "split");
    let mut assignment = vec![(Split::Train, false); samples.len()];
    for c in 0..NUM_CLASSES {
        let mut members = by_class[c].clone();
        members.shuffle(&mut r);
        let (train, rest) = members.split_at(quotas[c][0]);
        let (val, test) = rest.split_at(quotas[c][1]);
        let fine_here = fine_quota[c].min(train.len());
        for (k, &i) in train.iter().enumerate() {
            assignment[i] = (Split::Train, k < fine_here);
        }
        for &i in val {
            assignment[i] = (Split::Val, true);
        }
        for &i in test {
            assignment[i] = (Split::Test, true);
        }
    }

    let entries: Vec<ManifestEntry> = samples
        .par_iter()
        .zip(assignment.par_iter())
        .map(|(g, &(split, has_fine))| {
            let dir = split.name();
            let paths = SamplePaths {
                image: format!("{dir}/{}.pgm", g.id),
                lesion_mask: format!("{dir}/{}_lesion.pgm", g.id),
                fine_mask: has_fine.then(|| format!("{dir}/{}_fine.pgm", g.id)),
            };
            let s = &g.sample;
            GrayImage::from_unit(size, size, &s.image)?.write(&out.join(&paths.image))?;
            GrayImage::from_mask(size, size, &s.lesion_mask)?.write(&out.join(&paths.lesion_mask))?;
            if let Some(p) = &paths.fine_mask {
                GrayImage::from_mask(size, size, &s.fine_mask)?.write(&out.join(p))?;
            }
            Ok(ManifestEntry {
                id: g.id.clone(),
                split,
                margin_class: s.margin_class,
                malignant: s.malignant,
                has_fine_mask: has_fine,
                confounder: s.confounder,
                seed: g.seed,
                spec: g.spec.clone(),
                paths,
            })
        })
        .collect::<Result<_>>()?;

    let corpus = CorpusConfig {
        samples_per_class: counts,
        image_size: size,
        ..corpus.clone()
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        image_size: size,
        corpus,
        split: split.clone(),
        fine_annotated,
        samples: entries,
    };
    write_manifest(&manifest, out)?;
    Ok(manifest)
}

pub(crate) fn write_manifest(manifest: &Manifest, out: &Path) -> Result<()> {
    fs::create_dir_all(out).at(out)?;
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, bytes).at(path)
}

/// SHA-256 of the manifest file in `dir`, hex encoded.
pub fn manifest_sha256(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).at(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// A sample loaded back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub id: String,
    pub split: Split,
    pub margin_class: MarginClass,
    pub malignant: bool,
    pub confounder: bool,
    pub image: Vec<f64>,
    pub lesion_mask: Vec<u8>,
    pub fine_mask: Option<Vec<u8>>,
}

impl DatasetSample {
    /// View as a [`SynthSample`] for augmentation; a missing fine mask is
    /// replaced by an all-irrelevant one.
    pub fn to_synth(&self, size: usize) -> SynthSample {
        SynthSample {
            size,
            image: self.image.clone(),
            margin_class: self.margin_class,
            malignant: self.malignant,
            lesion_mask: self.lesion_mask.clone(),
            fine_mask: self.fine_mask.clone().unwrap_or_else(|| vec![1; size * size]),
            confounder: self.confounder,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    /// In manifest order.
    pub samples: Vec<DatasetSample>,
}

impl Dataset {
    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

fn read_mask(path: &Path, size: usize) -> Result<Vec<u8>> {
    let img = GrayImage::read(path)?;
    check_dims(&img, path, size)?;
    Ok(img.to_mask())
}

fn check_dims(img: &GrayImage, path: &Path, size: usize) -> Result<()> {
    if img.width != size || img.height != size {
        return Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!("{}x{} image, expected {size}x{size}", img.width, img.height),
        });
    }
    Ok(())
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).at(&path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::InvalidArgument(format!(
            "manifest version {} is not supported",
            manifest.version
        )));
    }
    let size = manifest.image_size;
    let samples = manifest
        .samples
        .par_iter()
        .map(|e| {
            let img_path = dir.join(&e.paths.image);
            let img = GrayImage::read(&img_path)?;
            check_dims(&img, &img_path, size)?;
            let fine_mask = match &e.paths.fine_mask {
                Some(p) => Some(read_mask(&dir.join(p), size)?),
                None => None,
            };
            Ok(DatasetSample {
                id: e.id.clone(),
                split: e.split,
                margin_class: e.margin_class,
                malignant: e.malignant,
                confounder: e.confounder,
                image: img.to_unit(),
                lesion_mask: read_mask(&dir.join(&e.paths.lesion_mask), size)?,
                fine_mask,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        samples,
    })
}
