use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Map, Value};

use protomargin::config::{describe_keys, RunConfig};
use protomargin::pipeline::{checkpoint_path, eval_run, explain_run, generate, train_run, ExplainTarget};
use protomargin::synthgen::Split;
use protomargin::MarginClass;

const THREADS_VAR: &str = "PROTO_MARGIN_THREADS";

#[derive(Parser, Debug)]
#[command(name = "proto-margin", version, about = "Prototype-part margin classifier on a synthetic lesion corpus")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat JSON config file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (key `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (key `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory (key `dataset.dir`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Fine-annotation weight (key `train.lambda_f`).
    #[arg(long = "lambda-f", global = true)]
    lambda_f: Option<f64>,
    /// Top-k pooling size (key `model.k`).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Confounder strength (key `dataset.confounder_strength`).
    #[arg(long, global = true)]
    confounder: Option<f64>,
    /// Set any key: `--set train.lr_a1=0.002`. Values are parsed as JSON,
    /// falling back to a string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus to `dataset.dir`.
    Generate,
    /// Train on the training split; writes checkpoints and logs under `out`.
    Train,
    /// Evaluate a checkpoint; writes eval_<split>.json and .csv under `out`.
    Eval {
        /// Defaults to `<out>/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write case reports (and the prototype gallery) under `<out>/explain`.
    Explain {
        /// Defaults to `<out>/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// One PGM image to explain.
        #[arg(long, conflicts_with = "split")]
        image: Option<PathBuf>,
        /// Explain every image of this split.
        #[arg(long)]
        split: Option<String>,
        /// Also write gallery.html with every prototype.
        #[arg(long)]
        gallery: bool,
    },
}

fn help_footer() -> String {
    format!(
        "Configuration keys (flat JSON, e.g. {{\"train.lambda_f\": 0.0}}):\n{}\n\
         Precedence, lowest first: defaults, --config file, --set, then the dedicated flags.\n\
         {THREADS_VAR} caps the number of worker threads.",
        describe_keys()
    )
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn build_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut overrides = Map::new();
    for item in &c.set {
        let (k, v) = item
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
        overrides.insert(k.to_string(), parse_value(v));
    }
    let flags = [
        ("seed", c.seed.map(|v| json!(v))),
        ("out", c.out.as_ref().map(|v| json!(v))),
        ("dataset.dir", c.data.as_ref().map(|v| json!(v))),
        ("train.lambda_f", c.lambda_f.map(|v| json!(v))),
        ("model.k", c.k.map(|v| json!(v))),
        ("dataset.confounder_strength", c.confounder.map(|v| json!(v))),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            overrides.insert(k.to_string(), v);
        }
    }
    cfg.apply_flat(&overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).with_context(|| format!("unknown split `{s}` (expected train, val or test)"))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("{THREADS_VAR} must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let matches = Cli::command().after_help(help_footer()).get_matches();
    let cli = Cli::from_arg_matches(&matches)?;
    init_threads()?;
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Generate => {
            let m = generate(&cfg)?;
            println!("wrote {} samples to {}", m.samples.len(), cfg.dataset.dir.display());
            for split in Split::ALL {
                let counts: Vec<String> = MarginClass::ALL
                    .iter()
                    .map(|&c| {
                        let n = m.samples.iter().filter(|e| e.split == split && e.margin_class == c).count();
                        format!("{} {n}", c.name())
                    })
                    .collect();
                println!("  {:<5} {:>4}  ({})", split.name(), m.count(split), counts.join(", "));
            }
            println!("  fine-annotated training samples: {}", m.fine_train_count());
        }
        Command::Train => {
            let start = Instant::now();
            let out = train_run(&cfg, &|line| eprintln!("[{:>6.1}s] {line}", start.elapsed().as_secs_f64()))?;
            println!(
                "trained {} cycles ({}converged), {} prototypes; wrote {}",
                out.cycles.len(),
                if out.converged { "" } else { "not " },
                out.params.num_prototypes(),
                cfg.out.display()
            );
        }
        Command::Eval { checkpoint, split } => {
            let split = parse_split(&split)?;
            let ckpt = checkpoint_path(&cfg, checkpoint.as_deref());
            let report = eval_run(&cfg, &ckpt, split, &cfg.out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Explain {
            checkpoint,
            image,
            split,
            gallery,
        } => {
            let target = match (image, split) {
                (Some(p), _) => Some(ExplainTarget::Image(p)),
                (None, Some(s)) => Some(ExplainTarget::Split(parse_split(&s)?)),
                (None, None) if gallery => None,
                (None, None) => bail!("explain needs --image, --split or --gallery"),
            };
            let ckpt = checkpoint_path(&cfg, checkpoint.as_deref());
            let dir = cfg.out.join("explain");
            let summary = explain_run(&cfg, &ckpt, target.as_ref(), gallery, &dir)?;
            for p in &summary.reports {
                println!("{}", p.display());
            }
            if let Some(g) = &summary.gallery {
                println!("{}", g.display());
            }
        }
    }
    Ok(())
}
