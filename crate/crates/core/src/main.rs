use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use unsct::harness::{self, EpochRow, RunConfig};
use unsct::landmarks::Spacing;
use unsct::phantom::{build_dataset, ManifestSpec, PhantomConfig, Split};
use unsct::uncertainty::UeParams;
use unsct::{Error, Result};

#[derive(Parser)]
#[command(name = "unsct", version, about = "Landmark detection with PAF-based uncertainty on synthetic pelvis phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Train a network.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict landmarks for a single PNG.
    Infer(InferArgs),
    /// Masked Adaptive Wing versus MSE heatmap loss.
    LossCompare(RunArgs),
    /// SRF on/off by UE on/off comparison.
    Ablation(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 257)]
    train: usize,
    #[arg(long, default_value_t = 53)]
    val: usize,
    /// Fraction of unstructured images in each split. Defaults to the
    /// reference proportions (32/257 train, 18/53 val).
    #[arg(long)]
    unstructured_frac: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image height and width in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Dump encoded targets of the first training image as PNG grids.
    #[arg(long)]
    debug_targets: bool,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set network.srf_enabled=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.dataset {
            overrides.push(format!("dataset={}", toml_string(p)));
        }
        if let Some(p) = &self.output {
            overrides.push(format!("output={}", toml_string(p)));
        }
        if let Some(v) = self.epochs {
            overrides.push(format!("epochs={v}"));
        }
        if let Some(v) = self.seed {
            overrides.push(format!("seed={v}"));
        }
        if let Some(v) = self.learning_rate {
            overrides.push(format!("learning_rate={v:e}"));
        }
        if let Some(v) = self.batch_size {
            overrides.push(format!("batch_size={v}"));
        }
        overrides.extend(self.overrides.iter().cloned());
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let cfg = RunConfig::from_toml_with_overrides(&text, &overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn toml_string(p: &std::path::Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Apply uncertainty-based suppression before scoring.
    #[arg(long)]
    ue: bool,
    /// Keep threshold; defaults to the value stored with the checkpoint.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dump_uncertainty: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Isotropic pixel spacing in millimetres.
    #[arg(long, default_value_t = 0.5)]
    spacing_mm: f64,
    /// Report all landmarks without suppression.
    #[arg(long)]
    no_ue: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dump_uncertainty: bool,
}

fn print_epoch(r: &EpochRow) {
    eprintln!(
        "epoch {:>3}  train {:.5} (hm {:.5}, paf {:.5})  val {:.5}  val MRE {:.3} px / {:.3} mm  [{:.0}s]",
        r.epoch, r.train_total, r.train_heatmap, r.train_paf, r.val_total, r.val_mre_px, r.val_mre_mm, r.wall_s
    );
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = PhantomConfig::with_size(a.size, a.size);
    cfg.seed = a.seed;
    let spec = match a.unstructured_frac {
        Some(f) if !(0.0..=1.0).contains(&f) => {
            return Err(Error::Config(format!("unstructured fraction {f} outside [0, 1]")));
        }
        Some(f) => ManifestSpec::with_fraction(a.train, a.val, f),
        None => ManifestSpec::scaled(a.train, a.val),
    };
    let manifest = build_dataset(&cfg, &spec, &a.out)?;
    let count = |e: &[unsct::phantom::ManifestEntry]| e.iter().filter(|e| !e.structured).count();
    eprintln!(
        "wrote {} train ({} unstructured) and {} val ({} unstructured) images to {}",
        manifest.train.len(),
        count(&manifest.train),
        manifest.val.len(),
        count(&manifest.val),
        a.out.display()
    );
    if a.debug_targets {
        let data = unsct::phantom::Dataset::load(&a.out)?;
        let t = unsct::encoding::encode_targets(
            &data.train[0],
            &unsct::landmarks::build_default_skeleton(),
            &unsct::encoding::EncodingParams::default(),
        )?;
        let dir = a.out.join("debug");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        unsct::encoding::tile_channels(&t.heatmaps, 6, 0.0, 1.0).save_png(&dir.join("heatmaps.png"))?;
        unsct::encoding::tile_channels(&t.paf, 8, -1.0, 1.0).save_png(&dir.join("paf.png"))?;
        unsct::encoding::tile_channels(&t.mask, 6, 0.0, 1.0).save_png(&dir.join("mask.png"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => {
            let cfg = a.load()?;
            let ledger = harness::train_on(&cfg, &unsct::phantom::Dataset::load(&cfg.dataset)?, Some(&print_epoch))?;
            eprintln!(
                "best epoch {} (val MRE {:.3} px), checkpoint {}",
                ledger.best_epoch,
                ledger.best_val_mre_px,
                ledger.best_checkpoint.display()
            );
            Ok(())
        }
        Command::Eval(a) => {
            let split = match a.split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let ue = match a.tau {
                Some(tau) => {
                    let (_, meta) = unsct::net::Network::load(&a.checkpoint)?;
                    let stored: UeParams = serde_json::from_value(meta["ue"].clone()).unwrap_or_default();
                    Some(UeParams { tau, ..stored })
                }
                None => None,
            };
            let out = harness::evaluate(&a.checkpoint, &a.dataset, split, a.ue, ue, &a.out, a.dump_uncertainty)?;
            println!("{}", unsct::eval::REPORT_HEADER);
            for row in out.report.csv_rows() {
                println!("{row}");
            }
            Ok(())
        }
        Command::Infer(a) => {
            let spacing = Spacing {
                x: a.spacing_mm,
                y: a.spacing_mm,
            };
            if !(a.spacing_mm > 0.0) {
                return Err(Error::Config("spacing must be positive".into()));
            }
            let out = harness::infer(&a.checkpoint, &a.image, spacing, !a.no_ue, &a.out, a.dump_uncertainty)?;
            let kept = out.landmarks.iter().filter(|l| l.keep).count();
            eprintln!("{kept} of {} landmarks kept", out.landmarks.len());
            Ok(())
        }
        Command::LossCompare(a) => {
            let cfg = a.load()?;
            let r = harness::loss_comparison(&cfg, None)?;
            let show = |v: Option<usize>| v.map(|e| e.to_string()).unwrap_or_else(|| "never".into());
            println!(
                "epochs to val MRE <= {} px: awing {}, mse {}; final val MRE: awing {:.3} px, mse {:.3} px",
                harness::MRE_TARGET_PX,
                show(r.awing_epochs_to_target),
                show(r.mse_epochs_to_target),
                r.awing.final_row().val_mre_px,
                r.mse.final_row().val_mre_px
            );
            Ok(())
        }
        Command::Ablation(a) => {
            let cfg = a.load()?;
            harness::ablation(&cfg, None)?;
            let md = cfg.output.join("ablation.md");
            print!("{}", std::fs::read_to_string(&md).map_err(|e| Error::io(&md, e))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
