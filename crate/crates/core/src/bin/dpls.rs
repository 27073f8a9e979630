use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;

use dpls_core::config::KeyValues;
use dpls_core::pipeline::{
    self, cmd_ablate, cmd_evaluate, cmd_segment, cmd_synth, PipelineConfig, DATASET_ROOT_ENV, PIPELINE_KEYS,
};
use dpls_core::synth::SCENE_KEYS;

/// Panoptic segmentation of LiDAR scan sequences.
#[derive(Parser, Debug)]
#[command(name = "dpls", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Key-value configuration file; flags override its entries.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Dataset root holding `sequences/<seq>/`.
    #[arg(long, global = true, env = DATASET_ROOT_ENV)]
    dataset_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Worker threads for window segmentation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for scene generation and oracle noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated sequence names.
    #[arg(long, global = true)]
    sequences: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled sequence.
    Synth,
    /// Segment sequences and write prediction label files.
    Segment {
        /// Scans per window.
        #[arg(long)]
        window: Option<usize>,
        /// Scans between window starts.
        #[arg(long)]
        stride: Option<usize>,
        /// `one_hot` or `confidence`.
        #[arg(long)]
        prior: Option<String>,
        /// `files` or `oracle`.
        #[arg(long)]
        source: Option<String>,
        /// Oracle label flip probability.
        #[arg(long)]
        flip_prob: Option<f64>,
        /// Oracle offset noise, meters per axis.
        #[arg(long)]
        offset_sigma: Option<f64>,
    },
    /// Score predictions against ground truth, or recompute LSTQ from a score fixture.
    Evaluate {
        /// Root with `sequences/<seq>/predictions/` (or `labels/`).
        #[arg(long, required_unless_present = "fixture")]
        pred: Option<PathBuf>,
        /// Root with `sequences/<seq>/labels/`; defaults to the dataset root.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Rows of `name lstq s_assoc s_cls` percentages.
        #[arg(long, conflicts_with = "pred")]
        fixture: Option<PathBuf>,
    },
    /// Sweep prior kinds and label noise with oracle sources.
    Ablate,
    /// Print header and statistics of scan, label, poses, calib or class-map files.
    Inspect {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn key_values(common: &Common, command: &Command) -> Result<KeyValues, Box<dyn Error>> {
    let mut kv = match &common.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    let known: Vec<&str> = PIPELINE_KEYS.iter().chain(SCENE_KEYS).copied().collect();
    for k in kv.unknown_keys(&known) {
        warn!("unknown configuration key `{k}`");
    }
    if let Some(v) = &common.dataset_root {
        kv.set("dataset_root", v.display());
    }
    if let Some(v) = &common.output {
        kv.set("output", v.display());
    }
    if let Some(v) = common.threads {
        kv.set("threads", v);
    }
    if let Some(v) = common.seed {
        kv.set("seed", v);
    }
    if let Some(v) = &common.sequences {
        kv.set("sequences", v);
    }
    if let Command::Segment {
        window,
        stride,
        prior,
        source,
        flip_prob,
        offset_sigma,
    } = command
    {
        let pairs: [(&str, Option<String>); 6] = [
            ("window", window.map(|v| v.to_string())),
            ("stride", stride.map(|v| v.to_string())),
            ("prior", prior.clone()),
            ("source", source.clone()),
            ("flip_prob", flip_prob.map(|v| v.to_string())),
            ("offset_sigma", offset_sigma.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                kv.set(k, v);
            }
        }
    }
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {item:?}"))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn run(cli: Cli) -> Result<(), Box<dyn Error>> {
    let kv = key_values(&cli.common, &cli.command)?;
    match &cli.command {
        Command::Synth => {
            let dir = cmd_synth(&kv)?;
            println!("{}", dir.display());
        }
        Command::Segment { .. } => {
            let config = PipelineConfig::from_key_values(&kv)?;
            cmd_segment(&config)?;
        }
        Command::Evaluate { pred, gt, fixture } => {
            if let Some(path) = fixture {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                let rows = pipeline::parse_score_fixture(&path.display().to_string(), &text)?;
                print!("{}", pipeline::format_score_table(&pipeline::recompute_scores(&rows)));
                return Ok(());
            }
            let config = PipelineConfig::from_key_values(&kv)?;
            let class_map = config.load_class_map()?;
            let pred = pred.as_ref().expect("clap enforces --pred without --fixture");
            let gt = match gt {
                Some(g) => g.clone(),
                None => config.dataset_root()?.to_path_buf(),
            };
            let result = cmd_evaluate(pred, &gt, &config.sequences, &class_map, &config.output)?;
            print!("{}", result.overall.to_table(&class_map));
        }
        Command::Ablate => {
            let config = PipelineConfig::from_key_values(&kv)?;
            print!("{}", cmd_ablate(&config)?);
        }
        Command::Inspect { files } => {
            let config = PipelineConfig::from_key_values(&kv)?;
            let class_map = config.load_class_map()?;
            for f in files {
                print!("{}", pipeline::inspect(f, &class_map)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // error messages already embed their causes
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
