//! Low-rank adapters on attention projections and the three fine-tuning regimes.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Graph, ParamKind, Real, Tensor, Var};
use crate::error::{Error, Result, ResultExt};
use crate::zoo::{is_head, make_tensor, Fill, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

/// Parses target sets written as `qv`, `q,v` or `qkvo`.
pub fn parse_targets(s: &str) -> Result<BTreeSet<Projection>> {
    let mut out = BTreeSet::new();
    for ch in s.chars().filter(|c| !matches!(c, ',' | ' ')) {
        out.insert(match ch.to_ascii_lowercase() {
            'q' => Projection::Q,
            'k' => Projection::K,
            'v' => Projection::V,
            'o' => Projection::O,
            other => return Err(Error::validation(format!("unknown projection '{other}' in targets {s:?}"))),
        });
    }
    if out.is_empty() {
        return Err(Error::validation("LoRA targets must not be empty"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<Projection>,
    /// Std of the truncated-normal init of `A`.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 32, alpha: 32.0, targets: [Projection::Q, Projection::V].into_iter().collect(), init_std: 0.02 }
    }
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f64, targets: &str) -> Result<Self> {
        let cfg = Self { rank, alpha, targets: parse_targets(targets)?, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn targets_string(&self) -> String {
        self.targets.iter().map(|p| p.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::validation("LoRA rank must be positive; use the NFT regime for no adaptation"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::validation(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(Error::validation("LoRA targets must not be empty"));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::validation("LoRA init_std must be non-negative"));
        }
        Ok(())
    }
}

/// Adapter attached to one linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub scaling: f64,
}

/// `x·Wᵀ + b + scaling · (x·Aᵀ)·Bᵀ` with `W: [out, in]`, `A: [r, in]`, `B: [out, r]`.
pub fn lora_linear<T: Real>(
    g: &Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
    scaling: f64,
) -> Result<Var> {
    let base = g.linear(x, weight, bias)?;
    let low = g.linear(x, a, None)?;
    let up = g.linear(low, b, None)?;
    let up = g.scale(up, T::of(scaling))?;
    g.add(base, up)
}

/// A frozen linear layer with a standalone low-rank update.
#[derive(Clone, Debug)]
pub struct LoraLinear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub scaling: f64,
}

/// Graph handles created by [`LoraLinear::forward`].
pub struct LoraVars {
    pub output: Var,
    pub weight: Var,
    pub a: Var,
    pub b: Var,
}

impl<T: Real> LoraLinear<T> {
    /// Wraps `weight` (`[out, in]`) with `A ~ truncated normal`, `B = 0`.
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, cfg: &LoraConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let [d_out, d_in] = *weight.shape() else {
            return Err(Error::validation(format!("LoRA base weight must be 2-D, got {:?}", weight.shape())));
        };
        check_rank(cfg.rank, d_in, d_out, "layer")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            weight,
            bias,
            a: make_tensor(Some(&mut rng), vec![cfg.rank, d_in], Fill::TruncNormal(cfg.init_std)),
            b: Tensor::zeros(vec![d_out, cfg.rank]),
            scaling: cfg.scaling(),
        })
    }

    /// Adapted forward; `W` and the bias enter as frozen constants, `A` and `B`
    /// as trainable leaves.
    pub fn forward(&self, g: &Graph<T>, x: Var) -> Result<LoraVars> {
        let d_in = self.weight.shape()[1];
        let xs = g.shape(x);
        if xs.last() != Some(&d_in) {
            return Err(Error::Shape { op: "lora_linear", lhs: xs, rhs: self.weight.shape().to_vec() });
        }
        let weight = g.constant(&self.weight);
        let bias = self.bias.as_ref().map(|b| g.constant(b));
        let a = g.leaf(&self.a, true);
        let b = g.leaf(&self.b, true);
        let output = lora_linear(g, x, weight, bias, a, b, self.scaling)?;
        Ok(LoraVars { output, weight, a, b })
    }

    /// `W + scaling·B·A`.
    pub fn merged_weight(&self) -> Tensor<T> {
        let mut w = self.weight.clone();
        add_low_rank(&mut w, &self.b, &self.a, self.scaling);
        w
    }
}

fn add_low_rank<T: Real>(w: &mut Tensor<T>, b: &Tensor<T>, a: &Tensor<T>, scaling: f64) {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let r = a.shape()[0];
    let s = T::of(scaling);
    let (ad, bd) = (a.data(), b.data());
    let wd = w.data_mut();
    for i in 0..d_out {
        for j in 0..d_in {
            let mut acc = T::zero();
            for k in 0..r {
                acc += bd[i * r + k] * ad[k * d_in + j];
            }
            let delta = s * acc;
            if delta != T::zero() {
                wd[i * d_in + j] += delta;
            }
        }
    }
}

fn check_rank(rank: usize, d_in: usize, d_out: usize, layer: &str) -> Result<()> {
    if rank > d_in.min(d_out) {
        return Err(Error::validation(format!(
            "LoRA rank {rank} exceeds min(d_in, d_out) = {} of {layer}",
            d_in.min(d_out)
        )));
    }
    Ok(())
}

/// Adds adapters to every targeted attention projection and freezes the base
/// weights; the head stays trainable.
pub fn inject_lora<T: Real>(m: &mut Model<T>, cfg: &LoraConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    if !m.adapters.is_empty() {
        return Err(Error::validation("model already carries LoRA adapters"));
    }
    let layers: Vec<(String, usize, usize)> = m
        .attention_projections()
        .into_iter()
        .filter(|(prefix, _, _)| {
            let last = prefix.rsplit('.').next().unwrap_or_default();
            cfg.targets.iter().any(|t| t.as_str() == last)
        })
        .collect();
    if layers.is_empty() {
        return Err(Error::validation("no attention projections match the LoRA targets"));
    }
    for (prefix, d_in, d_out) in &layers {
        check_rank(cfg.rank, *d_in, *d_out, prefix)?;
    }
    let allocated = m.params.is_allocated();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (prefix, d_in, d_out) in layers {
        let rng = allocated.then_some(&mut rng);
        let a = make_tensor::<T>(rng, vec![cfg.rank, d_in], Fill::TruncNormal(cfg.init_std));
        let b = if allocated {
            Tensor::zeros(vec![d_out, cfg.rank])
        } else {
            make_tensor::<T>(None, vec![d_out, cfg.rank], Fill::Zeros)
        };
        m.params.insert(format!("{prefix}.lora_a"), a, ParamKind::Adapter)?;
        m.params.insert(format!("{prefix}.lora_b"), b, ParamKind::Adapter)?;
        m.adapters.insert(prefix, AdapterSpec { rank: cfg.rank, scaling: cfg.scaling() });
    }
    m.lora = Some(cfg.clone());
    m.params.set_trainable(|name, p| is_head(name) || p.kind == ParamKind::Adapter);
    Ok(())
}

/// Folds every adapter into its base weight (`W' = W + (α/r)·B·A`) and removes it.
pub fn merge_lora<T: Real>(m: &mut Model<T>) -> Result<()> {
    if m.adapters.is_empty() {
        return Err(Error::validation("model has no LoRA adapters to merge"));
    }
    if !m.params.is_allocated() {
        return Err(Error::validation("cannot merge a shape-only model"));
    }
    let adapters = std::mem::take(&mut m.adapters);
    for (prefix, spec) in adapters {
        let a = m.params.remove(&format!("{prefix}.lora_a")).expect("adapter A present").value;
        let b = m.params.remove(&format!("{prefix}.lora_b")).expect("adapter B present").value;
        let w = &mut m.params.get_mut(&format!("{prefix}.weight")).expect("base weight present").value;
        add_low_rank(w, &b, &a, spec.scaling);
    }
    m.lora = None;
    Ok(())
}

/// Number of adapter parameters currently attached.
pub fn adapter_param_count<T: Real>(m: &Model<T>) -> usize {
    m.params.iter().filter(|(_, p)| p.kind == ParamKind::Adapter).map(|(_, p)| p.value.numel()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "NFT")]
    Nft,
    #[serde(rename = "FFT")]
    Fft,
    #[serde(rename = "LoRA")]
    Lora,
}

impl Regime {
    /// Report order.
    pub const ALL: [Regime; 3] = [Regime::Nft, Regime::Fft, Regime::Lora];

    pub fn learning_rate(self) -> f64 {
        match self {
            Regime::Nft => 1e-3,
            Regime::Lora => 1e-4,
            Regime::Fft => 1e-6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Nft => "NFT",
            Regime::Fft => "FFT",
            Regime::Lora => "LoRA",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nft" => Ok(Regime::Nft),
            "fft" => Ok(Regime::Fft),
            "lora" => Ok(Regime::Lora),
            _ => Err(Error::validation(format!("unknown regime {s}; expected NFT, FFT or LoRA"))),
        }
    }
}

/// Sets trainable flags for `regime` (injecting adapters for LoRA) and
/// returns the regime's learning rate.
pub fn apply_regime<T: Real>(m: &mut Model<T>, regime: Regime, lora: Option<&LoraConfig>, seed: u64) -> Result<f64> {
    match regime {
        Regime::Nft => m.params.set_trainable(|name, _| is_head(name)),
        Regime::Fft => {
            if !m.adapters.is_empty() {
                return Err(Error::validation("FFT models carry no adapters; merge them first"));
            }
            m.params.set_trainable(|_, _| true);
        }
        Regime::Lora => {
            let cfg = lora.ok_or_else(|| Error::validation("the LoRA regime requires a LoRA configuration"))?;
            match m.lora_config() {
                None => inject_lora(m, cfg, seed)?,
                Some(existing) if existing == cfg => {}
                Some(_) => {
                    return Err(Error::validation("model already carries adapters with a different LoRA configuration"))
                }
            }
            m.params.set_trainable(|name, p| is_head(name) || p.kind == ParamKind::Adapter);
        }
    }
    Ok(regime.learning_rate())
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".lora.json");
    PathBuf::from(s)
}

/// Writes adapter and head arrays plus the LoRA configuration sidecar.
pub fn save_adapter_checkpoint<T: Real>(m: &Model<T>, path: &Path) -> Result<()> {
    let cfg = m.lora_config().ok_or_else(|| Error::validation("model has no LoRA adapters to save"))?;
    let entries: Vec<(&str, &Tensor<T>)> = m
        .params
        .iter()
        .filter(|(name, p)| is_head(name) || p.kind == ParamKind::Adapter)
        .map(|(name, p)| (name, &p.value))
        .collect();
    checkpoint::save(path, entries)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(cfg)?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Loads an adapter checkpoint into a model whose adapters match the sidecar.
pub fn load_adapter_checkpoint<T: Real>(m: &mut Model<T>, path: &Path) -> Result<()> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let cfg: LoraConfig =
        serde_json::from_str(&text).map_err(Error::from).context(|| format!("reading {}", side.display()))?;
    if m.lora_config() != Some(&cfg) {
        return Err(Error::validation("adapter checkpoint configuration does not match the model"));
    }
    for (name, t) in checkpoint::load(path)? {
        let p = m
            .params
            .get_mut(&name)
            .ok_or_else(|| Error::format(format!("checkpoint entry {name} is not a model parameter")))?;
        if p.value.shape() != t.shape() {
            return Err(Error::Shape {
                op: "load_adapter_checkpoint",
                lhs: p.value.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        p.value = t.cast();
    }
    Ok(())
}
