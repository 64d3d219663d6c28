use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use pcb_sentinel::config::Config;
use pcb_sentinel::{service, workflow};
use pcb_sentinel_core::datasets::SyntheticSpec;
use pcb_sentinel_core::FeatureExtractor;

/// Detects modifications on printed circuit boards by comparing each board
/// region with what an autoencoder trained on clean boards expects to see.
#[derive(Debug, Parser)]
#[command(name = "pcb-sentinel", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, short, global = true, default_value = "pcb-sentinel.toml")]
    config: PathBuf,
    /// Restrict to these regions (repeatable), e.g. `--region grid1_1`.
    #[arg(long = "region", global = true)]
    regions: Vec<String>,
    /// Binarization threshold in [0, 1]; overrides the stored operating thresholds.
    #[arg(long, global = true)]
    threshold: Option<f32>,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one autoencoder per region on the anomaly-free training split.
    Train,
    /// Store each region's normalization range from the test split.
    Calibrate,
    /// Score the test split and write the metrics report and ROC curves.
    Evaluate {
        /// Take the normalization range from this test split first.
        #[arg(long)]
        calibrate: bool,
    },
    /// Register and score a single board image.
    Infer {
        image: PathBuf,
        /// Output directory; defaults to the configured output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP inspection service.
    Serve {
        /// Overrides `service.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Write a synthetic board dataset with pasted-patch modifications.
    GenerateSynthetic {
        /// Destination dataset root.
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        normal: usize,
        #[arg(long, default_value_t = 20)]
        anomalous: usize,
        /// Board side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn load_config(g: &Global) -> Result<Config> {
    let mut cfg = Config::load(&g.config)?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn extractor() -> Result<FeatureExtractor> {
    let fe = FeatureExtractor::vgg19().context("building the VGG19 backbone")?;
    info!("backbone {} ({})", fe.source(), &fe.weights_hash()[..12]);
    Ok(fe)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenerateSynthetic {
            out,
            normal,
            anomalous,
            size,
        } => {
            let spec = SyntheticSpec {
                board_w: size,
                board_h: size,
                ..SyntheticSpec::default()
            };
            let record = workflow::synthesize(&spec, normal, anomalous, g.seed.unwrap_or(1), &out)?;
            println!("{}", serde_json::to_string_pretty(&record.annotations)?);
        }
        Command::Train => {
            let cfg = load_config(g)?;
            let bundles = workflow::train(&cfg, &extractor()?, &g.regions)?;
            for b in bundles {
                let m = b
                    .train_manifest
                    .as_ref()
                    .expect("trained bundles carry a manifest");
                println!(
                    "{}  best epoch {}  train {:.5}  val {}",
                    b.region_id,
                    m.best_epoch,
                    m.final_train_loss,
                    m.best_val_loss.map_or("-".into(), |v| format!("{v:.5}"))
                );
            }
        }
        Command::Calibrate => {
            let cfg = load_config(g)?;
            for b in workflow::calibrate(&cfg, &extractor()?, &g.regions)? {
                let (lo, hi) = b.norm_range.expect("calibrated");
                println!("{}  [{lo:.6}, {hi:.6}]", b.region_id);
            }
        }
        Command::Evaluate { calibrate } => {
            let cfg = load_config(g)?;
            if g.threshold.is_some() {
                anyhow::bail!("evaluate sweeps thresholds itself; --threshold does not apply");
            }
            let report = workflow::evaluate(&cfg, &extractor()?, &g.regions, calibrate)?;
            print!("{}", report.to_table());
            println!("report written to {}", cfg.output_dir.display());
        }
        Command::Infer { image, out } => {
            let mut cfg = load_config(g)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let report = workflow::infer_file(&cfg, &extractor()?, &image, g.threshold)?;
            for v in &report.verdicts {
                println!(
                    "{}  {}  {} px  score {:.3}  threshold {:.3}",
                    v.region_id,
                    if v.detected { "MODIFIED" } else { "ok" },
                    v.anomalous_pixels,
                    v.score,
                    v.threshold
                );
            }
            println!(
                "{}: {}",
                report.board_id,
                if report.any_detected {
                    "modification detected"
                } else {
                    "no modification"
                }
            );
        }
        Command::Serve { bind } => {
            let mut cfg = load_config(g)?;
            if let Some(b) = bind {
                cfg.service.bind = b;
            }
            let fe = extractor()?;
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(service::serve(cfg, fe))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
