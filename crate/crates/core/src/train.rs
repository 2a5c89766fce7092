//! AdamW training with class-weighted cross-entropy, early stopping on
//! validation ROC-AUC and best-checkpoint restoration.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, grad, Binder, GradMap, Graph, ParamStore, Real, Tensor};
use crate::error::{Error, Result, ResultExt};
use crate::lora::{apply_regime, LoraConfig, Regime};
use crate::metrics::{confusion_metrics, MetricsRecord};
use crate::volume::InputImage;
use crate::zoo::{batch_tensor, forward_tensor, Mode, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Overrides the regime's learning rate when set.
    pub learning_rate: Option<f64>,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Smallest validation-AUC gain that resets the patience counter.
    pub min_delta: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Operating point for thresholded metrics.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: None,
            max_epochs: 100,
            early_stop_patience: 10,
            min_delta: 1e-4,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::validation("max_epochs and early_stop_patience must be at least 1"));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::validation(format!("learning rate {lr} is not a finite non-negative number")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::validation("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.min_delta >= 0.0) {
            return Err(Error::validation("adam_eps must be positive; weight_decay and min_delta non-negative"));
        }
        Ok(())
    }

    pub fn optimizer(&self, learning_rate: f64) -> AdamW {
        AdamW {
            learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Inverse-frequency weights `N / (2·N_c)`.
pub fn class_weights(labels: &[u8]) -> Result<[f64; 2]> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::validation("labels must be 0 or 1"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::validation(format!(
            "class weights need both classes, got {neg} negative and {pos} positive"
        )));
    }
    Ok([n / (2.0 * neg as f64), n / (2.0 * pos as f64)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One bias-corrected Adam update with decoupled weight decay on matrices.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut AdamState,
    opt: &AdamW,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::validation(format!("gradient for unknown parameter {name}")))?;
        if p.value.shape() != g.shape() {
            return Err(Error::Shape { op: "adamw_step", lhs: p.value.shape().to_vec(), rhs: g.shape().to_vec() });
        }
        if !p.trainable {
            return Err(Error::validation(format!("gradient supplied for frozen parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let decay = if p.kind.decays() { opt.weight_decay } else { 0.0 };
        let (m, v) = state.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi.f64();
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + opt.eps);
            let old = w.f64();
            *w = T::of(old - opt.learning_rate * (update + decay * old));
        }
    }
    Ok(())
}

/// One labelled scan ready for the model.
#[derive(Clone, Debug)]
pub struct Example {
    pub scan_id: String,
    pub label: u8,
    pub image: InputImage,
}

/// Patience-based stopping on a monitored score (higher is better).
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<(usize, f64)>,
    reference: f64,
    wait: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    /// The epoch is the best seen so far (strictly higher score).
    pub new_best: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: None, reference: f64::NEG_INFINITY, wait: 0 }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        let new_best = self.best.is_none_or(|(_, b)| score > b);
        if new_best {
            self.best = Some((epoch, score));
        }
        if score > self.reference + self.min_delta {
            self.reference = score;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        StopDecision { new_best, stop: self.wait >= self.patience }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsRecord,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub stopped_early: bool,
}

impl RunHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    /// Validation AUC sequence, for determinism comparisons.
    pub fn val_aucs(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val.roc_auc).collect()
    }

    pub fn mean_epoch_time(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_time_s).sum::<f64>() / self.epochs.len().max(1) as f64
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Batch order for `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order
}

/// Weighted loss of one batch, without gradients.
pub fn batch_loss<T: Real>(model: &Model<T>, batch: &[&Example], weights: [f64; 2]) -> Result<f64> {
    let g = Graph::new();
    let binder = Binder::new(&g, &model.params, false);
    let x = g.constant(&batch_tensor(batch.iter().map(|e| &e.image), model.config.input_resolution)?);
    let labels: Vec<usize> = batch.iter().map(|e| usize::from(e.label)).collect();
    let logits = model.forward(&binder, x, Mode::Eval)?;
    let loss = g.cross_entropy(logits, &labels, &[T::of(weights[0]), T::of(weights[1])])?;
    let v = g.value(loss)[0].f64();
    Ok(v)
}

/// One pass over `data` in the seeded order; returns the mean training loss.
pub fn run_epoch<T: Real>(
    model: &mut Model<T>,
    state: &mut AdamState,
    opt: &AdamW,
    data: &[&Example],
    weights: [f64; 2],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let w = [T::of(weights[0]), T::of(weights[1])];
    let mut total = 0.0;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let grads = {
            let g = Graph::new();
            let binder = Binder::new(&g, &model.params, true);
            let x = g.constant(&batch_tensor(chunk.iter().map(|&i| &data[i].image), model.config.input_resolution)?);
            let labels: Vec<usize> = chunk.iter().map(|&i| usize::from(data[i].label)).collect();
            let dropout_seed = cfg.seed ^ ((epoch as u64) << 32) ^ bi as u64;
            let logits = model.forward(&binder, x, Mode::Train { seed: dropout_seed })?;
            let loss = g.cross_entropy(logits, &labels, &w)?;
            let lv = g.value(loss)[0].f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {bi} is {lv}")));
            }
            total += lv * chunk.len() as f64;
            grad(loss, &binder)?
        };
        adamw_step(&mut model.params, &grads, state, opt)?;
    }
    Ok(total / data.len() as f64)
}

/// Positive-class probabilities in eval mode.
pub fn predict_scores<T: Real>(model: &Model<T>, data: &[&Example], batch_size: usize) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let x = batch_tensor(chunk.iter().map(|e| &e.image), model.config.input_resolution)?;
        let logits = forward_tensor(model, &x)?;
        for row in logits.data().chunks(2) {
            let d = row[0].f64() - row[1].f64();
            scores.push(1.0 / (1.0 + d.exp()));
        }
    }
    Ok(scores)
}

pub fn evaluate<T: Real>(model: &Model<T>, data: &[&Example], cfg: &TrainConfig) -> Result<MetricsRecord> {
    let scores = predict_scores(model, data, cfg.batch_size)?;
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    confusion_metrics(&scores, &labels, cfg.threshold)
}

fn check_splits(train: &[&Example], val: &[&Example]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation(format!(
            "empty split: {} training and {} validation samples",
            train.len(),
            val.len()
        )));
    }
    let ids: HashSet<&str> = train.iter().map(|e| e.scan_id.as_str()).collect();
    if let Some(dup) = val.iter().find(|e| ids.contains(e.scan_id.as_str())) {
        return Err(Error::validation(format!("scan {} is in both training and validation", dup.scan_id)));
    }
    Ok(())
}

/// Trains until early stopping or `max_epochs`, then restores the parameters
/// of the best validation epoch. With `run_dir`, writes `history.jsonl` (one
/// epoch per line) and `best.ckpt` there.
pub fn train_fold<T: Real>(
    model: &mut Model<T>,
    learning_rate: f64,
    train: &[&Example],
    val: &[&Example],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<RunHistory> {
    cfg.validate()?;
    check_splits(train, val)?;
    let labels: Vec<u8> = train.iter().map(|e| e.label).collect();
    let weights = class_weights(&labels)?;
    let lr = cfg.learning_rate.unwrap_or(learning_rate);
    let opt = cfg.optimizer(lr);

    let mut log = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("history.jsonl");
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let ckpt = run_dir.map(|d| d.join("best.ckpt"));

    let mut state = AdamState::default();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.min_delta);
    let mut epochs = Vec::new();
    let mut best_params: Vec<(String, Tensor<T>)> = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let train_loss =
            run_epoch(model, &mut state, &opt, train, weights, cfg, epoch).context(|| format!("epoch {epoch}"))?;
        let val_metrics = evaluate(model, val, cfg)?;
        if val_metrics.roc_auc.is_nan() {
            return Err(Error::validation("validation split must contain both classes"));
        }
        let record = EpochRecord { epoch, train_loss, val: val_metrics, wall_time_s: start.elapsed().as_secs_f64() };
        log::debug!("epoch {epoch}: loss {train_loss:.5} val auc {:.4}", record.val.roc_auc);
        if let Some((w, path)) = log.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        let decision = stopper.observe(epoch, record.val.roc_auc);
        epochs.push(record);
        if decision.new_best {
            best_params = model
                .params
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(n, p)| (n.to_string(), p.value.clone()))
                .collect();
            if let Some(path) = &ckpt {
                checkpoint::save(path, model.params.iter().map(|(n, p)| (n, &p.value)))?;
            }
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }
    if let Some((w, path)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    for (name, value) in best_params {
        model.params.get_mut(&name).expect("snapshot of own params").value = value;
    }
    let best_epoch = stopper.best().map(|(e, _)| e).expect("at least one epoch ran");
    Ok(RunHistory { epochs, best_epoch, checkpoint_path: ckpt, stopped_early })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub regime: Regime,
    pub trainable_params: usize,
    pub total_params: usize,
    pub epoch_seconds: Vec<f64>,
    pub mean_epoch_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    /// `NFT < LoRA < FFT`; `None` unless all three regimes were timed.
    pub ordered: Option<bool>,
}

impl TimingReport {
    pub fn mean(&self, regime: Regime) -> Option<f64> {
        self.rows.iter().find(|r| r.regime == regime).map(|r| r.mean_epoch_s)
    }
}

/// Mean training-epoch wall time per regime. Regimes are interleaved epoch by
/// epoch so slow drifts in machine load affect all of them alike.
pub fn benchmark_regimes(
    model_cfg: &ModelConfig,
    lora: &LoraConfig,
    regimes: &[Regime],
    data: &[&Example],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<TimingReport> {
    if epochs < 3 {
        return Err(Error::validation(format!("timing needs at least 3 epochs, got {epochs}")));
    }
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    let weights = class_weights(&labels)?;
    let mut runs = Vec::new();
    for &regime in regimes {
        let mut m = Model::<f32>::build(model_cfg, cfg.seed)?;
        let lr = apply_regime(&mut m, regime, Some(lora), cfg.seed)?;
        runs.push((regime, m, AdamState::default(), cfg.optimizer(lr), Vec::new()));
    }
    for epoch in 0..epochs {
        for (_, m, state, opt, times) in runs.iter_mut() {
            let start = Instant::now();
            run_epoch(m, state, opt, data, weights, cfg, epoch)?;
            times.push(start.elapsed().as_secs_f64());
        }
    }
    let rows: Vec<TimingRow> = runs
        .into_iter()
        .map(|(regime, m, _, _, times)| TimingRow {
            regime,
            trainable_params: m.count_params(true),
            total_params: m.count_params(false),
            mean_epoch_s: times.iter().sum::<f64>() / times.len() as f64,
            epoch_seconds: times,
        })
        .collect();
    let mut report = TimingReport { rows, ordered: None };
    if let (Some(n), Some(l), Some(f)) = (report.mean(Regime::Nft), report.mean(Regime::Lora), report.mean(Regime::Fft))
    {
        report.ordered = Some(n < l && l < f);
    }
    Ok(report)
}
