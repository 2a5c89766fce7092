//! Comparison tables across finished grid cells.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::experiment::{ExperimentConfig, RunAggregate, RunTiming};
use crate::error::{Error, Result, ResultExt};
use crate::lora::{apply_regime, LoraConfig, Regime};
use crate::metrics::METRIC_NAMES;
use crate::zoo::{Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub regime: Regime,
    pub trainable: usize,
    pub total: usize,
}

/// Trainable and total parameter counts per regime, without allocating
/// weights.
pub fn param_table(preset: &str, lora: &LoraConfig, regimes: &[Regime]) -> Result<Vec<ParamRow>> {
    let cfg = ModelConfig::preset(preset)?;
    regimes
        .iter()
        .map(|&regime| {
            let mut m = Model::<f32>::shape_only(&cfg)?;
            apply_regime(&mut m, regime, Some(lora), 0)?;
            Ok(ParamRow { regime, trainable: m.count_params(true), total: m.count_params(false) })
        })
        .collect()
}

fn regime_rank(r: Regime) -> usize {
    Regime::ALL.iter().position(|&x| x == r).expect("listed regime")
}

struct Run {
    agg: RunAggregate,
    lora: LoraConfig,
    timing: Option<RunTiming>,
}

fn load_run(dir: &Path) -> Result<Option<Run>> {
    let agg_path = dir.join("aggregate.json");
    if !agg_path.is_file() {
        return Ok(None);
    }
    let parse = |name: &str| -> Result<String> {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let agg: RunAggregate = serde_json::from_str(&parse("aggregate.json")?)
        .map_err(Error::from)
        .context(|| agg_path.display().to_string())?;
    let cfg: ExperimentConfig = serde_json::from_str(&parse("config.json")?)
        .map_err(Error::from)
        .context(|| dir.join("config.json").display().to_string())?;
    let timing = if dir.join("timing.json").is_file() {
        Some(serde_json::from_str(&parse("timing.json")?).map_err(Error::from)?)
    } else {
        None
    };
    Ok(Some(Run { agg, lora: cfg.lora, timing }))
}

/// Writes `table_<preset>.csv` for every preset seen in `run_dirs` and a
/// `params_time.csv` with trainable/total counts and epoch times. Returns the
/// written paths.
pub fn report_tables(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::validation("no run directories given"));
    }
    let mut runs = Vec::new();
    let mut missing = Vec::new();
    for dir in run_dirs {
        match load_run(dir)? {
            Some(r) => runs.push(r),
            None => missing.push(dir.display().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::validation(format!("runs without aggregate.json: {}", missing.join(", "))));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut by_preset: BTreeMap<&str, Vec<&Run>> = BTreeMap::new();
    for r in &runs {
        by_preset.entry(r.agg.cell.preset.as_str()).or_default().push(r);
    }
    let mut written = Vec::new();
    let mut params = String::from("model,regime,trainable_params,total_params,epoch_time_s\n");
    for (preset, mut rows) in by_preset {
        rows.sort_by_key(|r| (regime_rank(r.agg.cell.regime), r.agg.cell.crop_mm, r.agg.cell.input_mode.as_str()));
        let mut csv = String::from("regime,crop_mm,input_mode");
        for name in METRIC_NAMES {
            write!(csv, ",{name}").expect("string write");
        }
        csv.push('\n');
        for r in &rows {
            let c = &r.agg.cell;
            write!(csv, "{},{},{}", c.regime.as_str(), c.crop_mm, c.input_mode.as_str()).expect("string write");
            for (m, s) in r.agg.aggregate.mean.iter().zip(&r.agg.aggregate.std) {
                write!(csv, ",{m:.3}±{s:.3}").expect("string write");
            }
            csv.push('\n');
        }
        let path = out_dir.join(format!("table_{preset}.csv"));
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        written.push(path);

        for row in param_table(preset, &rows[0].lora, &Regime::ALL)? {
            let times: Vec<f64> = rows
                .iter()
                .filter_map(|r| r.timing.as_ref())
                .filter(|t| t.regime == row.regime)
                .map(|t| t.mean_epoch_s)
                .collect();
            let time = if times.is_empty() {
                String::new()
            } else {
                format!("{:.3}", times.iter().sum::<f64>() / times.len() as f64)
            };
            writeln!(params, "{preset},{},{},{},{time}", row.regime.as_str(), row.trainable, row.total)
                .expect("string write");
        }
    }
    let path = out_dir.join("params_time.csv");
    std::fs::write(&path, params).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
