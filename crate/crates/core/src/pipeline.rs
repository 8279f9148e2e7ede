//! End-to-end commands over a [`RunConfig`]: generate a dataset, train,
//! evaluate, explain. Each writes its artifacts to disk and returns a
//! summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::explain::{case_report, explain_case, prototype_gallery, SourceImages, DEFAULT_TOP_N};
use crate::image_io::GrayImage;
use crate::metrics::{evaluate, records_csv, EvalReport};
use crate::protonet::{load_checkpoint, ModelParams};
use crate::rng;
use crate::synthgen::{generate_corpus, manifest_sha256, read_dataset, write_dataset, Dataset, Manifest, Split};
use crate::trainer::{param_hashes, train, CycleSummary, ParamHashes, TrainData, TrainOutcome};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).at(path)
}

/// Generates the synthetic corpus into `cfg.dataset.dir`.
pub fn generate(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let d = &cfg.dataset;
    let samples = generate_corpus(&d.corpus(), cfg.seed)?;
    write_dataset(&samples, &d.corpus(), &d.split_spec(), d.fine_annotated, cfg.seed, &d.dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub seed: u64,
    pub dataset_manifest_sha256: String,
    pub cycles: Vec<CycleSummary>,
    pub converged: bool,
    pub stage_b_loss: f64,
    pub prototypes_per_class: [usize; 3],
    pub param_hashes: ParamHashes,
    pub malignancy_head: crate::protonet::MalignancyHead,
}

/// Trains on the dataset's training split, writing checkpoints, the loss
/// log and [`RUN_MANIFEST`] under `cfg.out`.
pub fn train_run(cfg: &RunConfig, progress: &dyn Fn(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = read_dataset(&cfg.dataset.dir)?;
    if ds.image_size() != cfg.model.image_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0} but dataset.image_size is {1}",
            ds.image_size(),
            cfg.model.image_size
        )));
    }
    let data = TrainData::from_dataset(&ds)?;
    let params = ModelParams::init(cfg.model.clone(), &mut rng::stream(cfg.seed, rng::INIT))?;
    let outcome = train(params, &data, &cfg.train, Some(&cfg.out), progress)?;
    let p = &outcome.params;
    let mut per_class = [0; 3];
    for c in &p.prototype_class {
        per_class[c.index()] += 1;
    }
    let manifest = RunManifest {
        config: serde_json::Value::Object(cfg.to_flat()),
        seed: cfg.seed,
        dataset_manifest_sha256: manifest_sha256(&cfg.dataset.dir)?,
        cycles: outcome.cycles.clone(),
        converged: outcome.converged,
        stage_b_loss: outcome.stage_b_loss,
        prototypes_per_class: per_class,
        param_hashes: param_hashes(p),
        malignancy_head: p.h2.clone(),
    };
    write_json(&manifest, &cfg.out.join(RUN_MANIFEST))?;
    Ok(outcome)
}

/// The checkpoint to use: `explicit` if given, else `<out>/final.ckpt`.
pub fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out.join(FINAL_CHECKPOINT))
}

/// Evaluates a checkpoint on one split; writes `eval_<split>.json` and
/// `eval_<split>.csv` into `report_dir`.
pub fn eval_run(cfg: &RunConfig, checkpoint: &Path, split: Split, report_dir: &Path) -> Result<EvalReport> {
    let params = load_checkpoint(checkpoint)?;
    let ds = read_dataset(&cfg.dataset.dir)?;
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset {} has no {} samples",
            cfg.dataset.dir.display(),
            split.name()
        )));
    }
    let mut opts = cfg.eval.clone();
    opts.seed = cfg.seed;
    let (report, records) = evaluate(&params, &samples, split.name(), &opts)?;
    write_json(&report, &report_dir.join(format!("eval_{}.json", split.name())))?;
    let csv = report_dir.join(format!("eval_{}.csv", split.name()));
    fs::create_dir_all(report_dir).at(report_dir)?;
    fs::write(&csv, records_csv(&records)).at(&csv)?;
    Ok(report)
}

/// What to explain.
#[derive(Clone, Debug, PartialEq)]
pub enum ExplainTarget {
    /// Every sample of a split.
    Split(Split),
    /// One PGM image; the case id is the file stem.
    Image(PathBuf),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExplainSummary {
    pub reports: Vec<PathBuf>,
    pub gallery: Option<PathBuf>,
}

struct NoSources;

impl SourceImages for NoSources {
    fn source_image(&self, _: &str) -> Option<Vec<f64>> {
        None
    }
}

/// Writes case reports (and optionally the prototype gallery) to `out_dir`.
/// Source images of prototypes come from the configured dataset when it is
/// readable.
pub fn explain_run(
    cfg: &RunConfig,
    checkpoint: &Path,
    target: Option<&ExplainTarget>,
    gallery: bool,
    out_dir: &Path,
) -> Result<ExplainSummary> {
    let params = load_checkpoint(checkpoint)?;
    let ds: Option<Dataset> = read_dataset(&cfg.dataset.dir).ok();
    let sources: &dyn SourceImages = match &ds {
        Some(d) => d,
        None => &NoSources,
    };
    let mut summary = ExplainSummary::default();
    let cases: Vec<(String, Vec<f64>)> = match target {
        None => Vec::new(),
        Some(ExplainTarget::Image(path)) => {
            let img = GrayImage::read(path)?;
            let size = params.arch.image_size;
            if img.width != size || img.height != size {
                return Err(Error::Image {
                    path: path.clone(),
                    reason: format!("expected {size}x{size}, found {}x{}", img.width, img.height),
                });
            }
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "case".into());
            vec![(id, img.to_unit())]
        }
        Some(ExplainTarget::Split(split)) => {
            let ds = ds.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("dataset {} is not readable", cfg.dataset.dir.display()))
            })?;
            ds.split(*split).into_iter().map(|s| (s.id.clone(), s.image.clone())).collect()
        }
    };
    for (id, image) in &cases {
        let exp = explain_case(&params, id, image)?;
        summary
            .reports
            .push(case_report(&params, &exp, Some(sources), DEFAULT_TOP_N, out_dir)?);
    }
    if gallery {
        let (path, _) = prototype_gallery(&params, sources, out_dir)?;
        summary.gallery = Some(path);
    }
    Ok(summary)
}
