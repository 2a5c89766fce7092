use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rili_core::harness::{
    evaluate_run, full_grid, make_splits, param_table, report_tables, run_experiment, synth_dataset, ExperimentConfig,
    LesionPlacement, Manifest, SplitSpec, SynthConfig,
};
use rili_core::volume::{image_to_volume, load_volume, preprocess, save_volume, Dtype, InputMode, PrepConfig};
use rili_core::zoo::ModelConfig;
use rili_core::{Error, LoraConfig, Regime, Result};

/// Transformer fine-tuning experiments on CT follow-up scans.
#[derive(Parser)]
#[command(name = "rili", version)]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic phantom dataset with a manifest.
    Synth {
        #[arg(long, default_value_t = 40)]
        patients: usize,
        #[arg(long, default_value_t = 0.5)]
        prevalence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        min_scans: usize,
        #[arg(long, default_value_t = 3)]
        max_scans: usize,
        /// Place lesions away from the axial mid-plane.
        #[arg(long)]
        off_axial: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preprocess every scan of a manifest into cached model inputs.
    Prep {
        #[arg(long)]
        manifest: PathBuf,
        /// Crop cube side in mm.
        #[arg(long, default_value_t = 50)]
        crop: u32,
        /// axial (axial slice repeated) or ortho (axial, coronal, sagittal).
        #[arg(long, default_value = "ortho")]
        mode: InputMode,
        /// Preset whose input resolution the images are rendered at.
        #[arg(long, default_value = "toy-vit")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Patient-level holdout and 5-fold split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one grid cell described by a config file.
    #[command(after_long_help = default_config_help())]
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        /// Overrides `[experiment] manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write one config per grid cell, derived from a base config.
    Grid {
        /// Base config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute holdout metrics of a finished run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Comparison tables over run directories matching a glob.
    Report {
        #[arg(long)]
        runs: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trainable and total parameter counts for a preset under a regime.
    CountParams {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        regime: Regime,
        #[arg(long, default_value_t = 32)]
        rank: usize,
        /// Defaults to the rank, giving a scaling of 1.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value = "qv")]
        targets: String,
    },
}

fn default_config_help() -> String {
    format!("Config file defaults:\n\n{}", ExperimentConfig::default().to_toml())
}

fn synth(cfg: SynthConfig, out: &Path) -> Result<()> {
    let m = synth_dataset(&cfg, out)?;
    let pos = m.rows.iter().filter(|r| r.label == 1).count();
    println!("wrote {} scans ({pos} positive) to {}", m.len(), out.join("manifest.csv").display());
    Ok(())
}

fn prep(manifest: &Path, crop: u32, mode: InputMode, preset: &str, out: &Path) -> Result<()> {
    let m = Manifest::load(manifest)?;
    let cfg = PrepConfig {
        crop_side_mm: f64::from(crop),
        input_mode: mode,
        input_resolution: ModelConfig::preset(preset)?.input_resolution,
        ..PrepConfig::default()
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for row in &m.rows {
        let img = preprocess(&load_volume(&m.resolve(row))?, &cfg)?;
        save_volume(&image_to_volume(&img), &out.join(format!("{}.meta.json", row.scan_id)), Dtype::F32)?;
    }
    println!("wrote {} {} inputs at {}px to {}", m.len(), mode.as_str(), cfg.input_resolution, out.display());
    Ok(())
}

fn split(manifest: &Path, seed: u64, out: &Path) -> Result<()> {
    let m = Manifest::load(manifest)?;
    let s = make_splits(&m, seed)?;
    s.save(out)?;
    let prev = |ids: &[String]| {
        let pos = ids.iter().filter(|id| m.row(id).is_some_and(|r| r.label == 1)).count();
        format!("{} ({:.2} positive)", ids.len(), pos as f64 / ids.len().max(1) as f64)
    };
    let pct = 100.0 * s.holdout.len() as f64 / m.len() as f64;
    println!("holdout {} [{pct:.1}%], pool {}", prev(&s.holdout), s.pool().len());
    for (k, f) in s.folds.iter().enumerate() {
        println!("fold {k}: train {} val {}", prev(&f.train), prev(&f.val));
    }
    Ok(())
}

fn train(config: &Path, splits: &Path, manifest: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let path = manifest
        .or_else(|| cfg.experiment.manifest.clone())
        .ok_or_else(|| Error::validation("no manifest: pass --manifest or set [experiment] manifest"))?;
    let m = Manifest::load(&path)?;
    let s = SplitSpec::load(splits)?;
    let run = run_experiment(&cfg, &m, &s)?;
    let agg = &run.result.aggregate;
    println!("{}: holdout ROC-AUC {:.3}±{:.3}", run.dir.display(), agg.mean[0], agg.std[0]);
    Ok(())
}

fn grid(config: Option<PathBuf>, out: &Path) -> Result<()> {
    let base = match config {
        Some(p) => ExperimentConfig::load(&p)?,
        None => ExperimentConfig::default(),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for cell in full_grid() {
        let path = out.join(format!("{}.toml", cell.dir_name()));
        std::fs::write(&path, base.with_cell(&cell).to_toml()).map_err(|e| Error::io(&path, e))?;
    }
    println!("wrote 48 configs to {}", out.display());
    Ok(())
}

fn eval(run: &Path) -> Result<()> {
    let (result, _) = evaluate_run(run)?;
    let text = serde_json::to_string_pretty(&result.aggregate).map_err(Error::from)?;
    println!("{text}");
    Ok(())
}

fn report(pattern: &str, out: &Path) -> Result<()> {
    let dirs: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Error::validation(format!("bad glob {pattern:?}: {e}")))?
        .filter_map(|p| p.ok())
        .filter(|p| p.is_dir())
        .collect();
    if dirs.is_empty() {
        return Err(Error::validation(format!("no run directories match {pattern:?}")));
    }
    for path in report_tables(&dirs, out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn count_params(preset: &str, regime: Regime, rank: usize, alpha: Option<f64>, targets: &str) -> Result<()> {
    let lora = LoraConfig::new(rank, alpha.unwrap_or(rank as f64), targets)?;
    let row = param_table(preset, &lora, &[regime])?.remove(0);
    println!("preset\tregime\ttrainable\ttotal");
    println!("{preset}\t{}\t{}\t{}", regime.as_str(), row.trainable, row.total);
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { patients, prevalence, seed, min_scans, max_scans, off_axial, out } => synth(
            SynthConfig {
                n_patients: patients,
                scans_per_patient: (min_scans, max_scans),
                prevalence,
                seed,
                placement: if off_axial { LesionPlacement::OffAxial } else { LesionPlacement::Central },
                ..SynthConfig::default()
            },
            &out,
        ),
        Command::Prep { manifest, crop, mode, preset, out } => prep(&manifest, crop, mode, &preset, &out),
        Command::Split { manifest, seed, out } => split(&manifest, seed, &out),
        Command::Train { config, splits, manifest } => train(&config, &splits, manifest),
        Command::Grid { config, out } => grid(config, &out),
        Command::Eval { run } => eval(&run),
        Command::Report { runs, out } => report(&runs, &out),
        Command::CountParams { preset, regime, rank, alpha, targets } => {
            count_params(&preset, regime, rank, alpha, &targets)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
