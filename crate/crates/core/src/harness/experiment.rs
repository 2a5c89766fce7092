//! One cell of the experiment grid: five folds trained and scored on the
//! holdout set, with run artefacts persisted under a per-cell directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::splits::{validate_splits, SplitSpec, N_FOLDS};
use super::Manifest;
use crate::error::{Error, Result, ResultExt};
use crate::lora::{apply_regime, save_adapter_checkpoint, LoraConfig, Regime};
use crate::metrics::{
    aggregate_folds, confusion_metrics, roc_band, roc_curve, AggregateRecord, MetricsRecord, RocBand,
};
use crate::train::{predict_scores, train_fold, Example, RunHistory, TrainConfig};
use crate::volume::{image_from_volume, load_volume, preprocess, InputMode, PrepConfig};
use crate::zoo::{Model, ModelConfig};

/// Presets that make up the full comparison grid.
pub const GRID_PRESETS: [&str; 4] = ["dinov2-small-shape", "dinov2-base-shape", "swin-small-shape", "swin-base-shape"];
pub const GRID_CROPS_MM: [u32; 2] = [50, 75];
pub const GRID_MODES: [InputMode; 2] = [InputMode::AxialRepeat, InputMode::Orthogonal];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub preset: String,
    pub input_mode: InputMode,
    pub crop_mm: u32,
    pub regime: Regime,
}

impl GridCell {
    pub fn dir_name(&self) -> String {
        format!("{}__{}__{}mm__{}", self.preset, self.input_mode.as_str(), self.crop_mm, self.regime.as_str())
    }
}

/// All 48 cells: presets × input modes × crops × regimes.
pub fn full_grid() -> Vec<GridCell> {
    let mut cells = Vec::with_capacity(48);
    for preset in GRID_PRESETS {
        for mode in GRID_MODES {
            for crop in GRID_CROPS_MM {
                for regime in Regime::ALL {
                    cells.push(GridCell { preset: preset.to_string(), input_mode: mode, crop_mm: crop, regime });
                }
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: "toy-vit".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub regime: Regime,
    /// Cell directories are created beneath this directory.
    pub output_dir: PathBuf,
    pub manifest: Option<PathBuf>,
    /// Directory of preprocessed inputs written by the `prep` command.
    pub prep_cache: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { regime: Regime::Lora, output_dir: "runs".into(), manifest: None, prep_cache: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub prep: PrepConfig,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).context(|| path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        ModelConfig::preset(&self.model.preset)?.validate()?;
        self.prep.validate()?;
        self.train.validate()?;
        self.lora.validate()?;
        if self.prep.crop_side_mm.fract() != 0.0 {
            return Err(Error::validation(format!("crop side {} mm must be whole", self.prep.crop_side_mm)));
        }
        Ok(())
    }

    pub fn cell(&self) -> GridCell {
        GridCell {
            preset: self.model.preset.clone(),
            input_mode: self.prep.input_mode,
            crop_mm: self.prep.crop_side_mm as u32,
            regime: self.experiment.regime,
        }
    }

    pub fn with_cell(&self, cell: &GridCell) -> Self {
        let mut cfg = self.clone();
        cfg.model.preset = cell.preset.clone();
        cfg.prep.input_mode = cell.input_mode;
        cfg.prep.crop_side_mm = f64::from(cell.crop_mm);
        cfg.experiment.regime = cell.regime;
        cfg
    }

    pub fn run_dir(&self) -> PathBuf {
        self.experiment.output_dir.join(self.cell().dir_name())
    }

    /// Preprocessing settings with the input resolution the model expects.
    pub fn effective_prep(&self) -> Result<PrepConfig> {
        let model = ModelConfig::preset(&self.model.preset)?;
        Ok(PrepConfig { input_resolution: model.input_resolution, ..self.prep.clone() })
    }
}

/// Loads or derives model inputs for every listed scan.
pub fn prepare_examples(
    manifest: &Manifest,
    ids: &[&str],
    prep: &PrepConfig,
    cache: Option<&Path>,
) -> Result<HashMap<String, Example>> {
    let mut out = HashMap::with_capacity(ids.len());
    for &id in ids {
        let row = manifest.row(id).ok_or_else(|| Error::validation(format!("scan {id} is not in the manifest")))?;
        let image = match cache {
            Some(dir) => load_volume(&dir.join(format!("{id}.meta.json")))
                .and_then(|v| image_from_volume(&v, prep.input_mode))
                .and_then(|img| {
                    if img.resolution == prep.input_resolution {
                        Ok(img)
                    } else {
                        Err(Error::validation(format!(
                            "cached input is {}px, model needs {}px",
                            img.resolution, prep.input_resolution
                        )))
                    }
                }),
            None => preprocess(&load_volume(&manifest.resolve(row))?, prep),
        }
        .context(|| format!("preparing scan {id}"))?;
        out.insert(id.to_string(), Example { scan_id: id.to_string(), label: row.label, image });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub regime: Regime,
    pub trainable_params: usize,
    pub total_params: usize,
    pub fold_mean_epoch_s: Vec<f64>,
    pub mean_epoch_s: f64,
}

/// Contents of `aggregate.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub cell: GridCell,
    pub n_holdout: usize,
    pub n_holdout_positive: usize,
    pub threshold: f64,
    pub folds: Vec<MetricsRecord>,
    pub aggregate: AggregateRecord,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub histories: Vec<RunHistory>,
    pub result: RunAggregate,
    pub band: RocBand,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Trains and scores the cell described by `cfg` on every fold.
///
/// Layout: `config.json`, `splits.json`, `timing.json`, `fold_k/` with
/// `history.jsonl`, `best.ckpt`, `holdout_scores.csv` (and `adapters.ckpt`
/// under LoRA), then the outputs of [`evaluate_run`].
pub fn run_experiment(cfg: &ExperimentConfig, manifest: &Manifest, splits: &SplitSpec) -> Result<RunSummary> {
    cfg.validate()?;
    validate_splits(manifest, splits)?;
    let cell = cfg.cell();
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("config.json"), &(serde_json::to_string_pretty(cfg)? + "\n"))?;
    splits.save(&dir.join("splits.json"))?;

    let prep = cfg.effective_prep()?;
    let model_cfg = ModelConfig::preset(&cfg.model.preset)?;
    let ids: Vec<&str> = splits.holdout.iter().map(String::as_str).chain(splits.pool()).collect();
    let examples = prepare_examples(manifest, &ids, &prep, cfg.experiment.prep_cache.as_deref())?;
    let pick = |list: &[String]| -> Vec<&Example> { list.iter().map(|id| &examples[id]).collect() };
    let holdout = pick(&splits.holdout);

    let mut histories = Vec::with_capacity(N_FOLDS);
    let mut fold_times = Vec::with_capacity(N_FOLDS);
    let mut counts = (0, 0);
    for (k, fold) in splits.folds.iter().enumerate() {
        let fold_dir = dir.join(format!("fold_{k}"));
        let seed = cfg.train.seed.wrapping_add(k as u64);
        let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
        let mut run = || -> Result<RunHistory> {
            let mut model = Model::<f32>::build(&model_cfg, seed)?;
            let lr = apply_regime(&mut model, cell.regime, Some(&cfg.lora), seed)?;
            counts = (model.count_params(true), model.count_params(false));
            let history =
                train_fold(&mut model, lr, &pick(&fold.train), &pick(&fold.val), &train_cfg, Some(&fold_dir))?;
            let scores = predict_scores(&model, &holdout, train_cfg.batch_size)?;
            let mut csv = String::from("scan_id,label,score\n");
            for (e, s) in holdout.iter().zip(&scores) {
                writeln!(csv, "{},{},{}", e.scan_id, e.label, s).expect("string write");
            }
            write(&fold_dir.join("holdout_scores.csv"), &csv)?;
            if cell.regime == Regime::Lora {
                save_adapter_checkpoint(&model, &fold_dir.join("adapters.ckpt"))?;
            }
            Ok(history)
        };
        let history = run().context(|| format!("{} fold {k}", cell.dir_name()))?;
        log::info!(
            "{} fold {k}: best epoch {} val auc {:.4}",
            cell.dir_name(),
            history.best_epoch,
            history.best().val.roc_auc
        );
        fold_times.push(history.mean_epoch_time());
        histories.push(history);
    }
    let timing = RunTiming {
        regime: cell.regime,
        trainable_params: counts.0,
        total_params: counts.1,
        mean_epoch_s: fold_times.iter().sum::<f64>() / fold_times.len() as f64,
        fold_mean_epoch_s: fold_times,
    };
    write(&dir.join("timing.json"), &(serde_json::to_string_pretty(&timing)? + "\n"))?;
    let (result, band) = evaluate_run(&dir)?;
    Ok(RunSummary { dir, histories, result, band })
}

fn read_scores(path: &Path) -> Result<(Vec<String>, Vec<u8>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| super::manifest::csv_error(path, e))?;
    let (mut ids, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for rec in reader.deserialize::<(String, u8, f64)>() {
        let (id, label, score) = rec.map_err(|e| super::manifest::csv_error(path, e))?;
        ids.push(id);
        labels.push(label);
        scores.push(score);
    }
    Ok((ids, labels, scores))
}

/// Recomputes holdout metrics of a finished run from its score files and
/// writes `metrics.csv`, `aggregate.json` and `roc_band.csv`.
pub fn evaluate_run(dir: &Path) -> Result<(RunAggregate, RocBand)> {
    let cfg: ExperimentConfig = serde_json::from_str(&read(&dir.join("config.json"))?)
        .map_err(Error::from)
        .context(|| dir.join("config.json").display().to_string())?;
    let cell = cfg.cell();
    let threshold = cfg.train.threshold;
    let mut folds = Vec::with_capacity(N_FOLDS);
    let mut curves = Vec::with_capacity(N_FOLDS);
    let mut reference: Option<Vec<String>> = None;
    let mut n_pos = 0;
    for k in 0..N_FOLDS {
        let path = dir.join(format!("fold_{k}")).join("holdout_scores.csv");
        let (ids, labels, scores) = read_scores(&path)?;
        match &reference {
            Some(r) if *r != ids => {
                return Err(Error::format(format!("{}: holdout scans differ from fold 0", path.display())))
            }
            Some(_) => {}
            None => reference = Some(ids),
        }
        n_pos = labels.iter().filter(|&&l| l == 1).count();
        folds.push(confusion_metrics(&scores, &labels, threshold).context(|| path.display().to_string())?);
        curves.push(roc_curve(&scores, &labels)?);
    }
    let aggregate = aggregate_folds(&folds)?;
    let band = roc_band(&curves)?;

    let mut csv = String::from("config,crop_mm,input_mode,regime,roc_auc,f1,precision,recall,specificity,accuracy\n");
    let mut row = |label: String, values: [f64; 6]| {
        write!(csv, "{}/{label},{},{},{}", cell.preset, cell.crop_mm, cell.input_mode.as_str(), cell.regime.as_str())
            .expect("string write");
        for v in values {
            write!(csv, ",{v:.6}").expect("string write");
        }
        csv.push('\n');
    };
    for (k, f) in folds.iter().enumerate() {
        row(format!("fold{k}"), f.values());
    }
    row("mean".into(), aggregate.mean);
    row("std".into(), aggregate.std);
    write(&dir.join("metrics.csv"), &csv)?;

    let mut band_csv = String::from("fpr,tpr_mean,tpr_std,lower,upper\n");
    for i in 0..band.fpr.len() {
        writeln!(
            band_csv,
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            band.fpr[i], band.tpr_mean[i], band.tpr_std[i], band.lower[i], band.upper[i]
        )
        .expect("string write");
    }
    write(&dir.join("roc_band.csv"), &band_csv)?;

    let result = RunAggregate {
        cell,
        n_holdout: reference.map_or(0, |r| r.len()),
        n_holdout_positive: n_pos,
        threshold,
        folds,
        aggregate,
    };
    write(&dir.join("aggregate.json"), &(serde_json::to_string_pretty(&result)? + "\n"))?;
    Ok((result, band))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn grid_has_48_distinct_cells() {
        let grid = full_grid();
        assert_eq!(grid.len(), 48);
        let names: HashSet<String> = grid.iter().map(GridCell::dir_name).collect();
        assert_eq!(names.len(), 48);
        assert_eq!(grid[0].dir_name(), "dinov2-small-shape__axial_repeat__50mm__NFT");
        let base = ExperimentConfig::default();
        for c in &grid {
            assert_eq!(&base.with_cell(c).cell(), c);
        }
    }

    #[test]
    fn config_toml_roundtrip_and_rejections() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let text = "[model]\npreset = \"toy-swin\"\n[experiment]\nregime = \"FFT\"\n";
        let parsed = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(parsed.experiment.regime, Regime::Fft);
        assert_eq!(parsed.train.batch_size, 8);
        assert_eq!(parsed.effective_prep().unwrap().input_resolution, 64);
        assert!(ExperimentConfig::from_toml("[model]\npreset = \"resnet\"\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nbatch = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[prep]\ncrop_side_mm = 50.5\n").is_err());
    }
}
