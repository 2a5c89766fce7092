//! ViT-style and Swin-style binary classifiers built from a [`ModelConfig`].

mod swin;
mod vit;
pub mod window;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, Graph, ParamKind, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::lora::{lora_linear, AdapterSpec, LoraConfig};
use crate::volume::InputImage;

pub use swin::swin_stage_geometry;
pub use window::{relative_position_index, shifted_window_mask, window_partition, window_reverse};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Vit,
    Swin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadStyle {
    /// Linear layer on `concat(CLS, mean of patch tokens)`.
    ConcatClsMean,
    /// Linear layer on the mean of the final tokens.
    GlobalPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub input_resolution: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    /// One entry for ViT; one per stage for Swin.
    pub depths: Vec<usize>,
    /// Heads per stage, parallel to `depths`.
    pub heads: Vec<usize>,
    pub patch_size: usize,
    /// Swin only.
    #[serde(default)]
    pub window_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub head_style: HeadStyle,
    #[serde(default)]
    pub dropout: f64,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_classes() -> usize {
    2
}

pub const PRESETS: [&str; 6] =
    ["dinov2-small-shape", "dinov2-base-shape", "swin-small-shape", "swin-base-shape", "toy-vit", "toy-swin"];

impl ModelConfig {
    pub fn vit(embed_dim: usize, depth: usize, heads: usize, patch_size: usize, resolution: usize) -> Self {
        Self {
            family: Family::Vit,
            input_resolution: resolution,
            in_channels: 3,
            embed_dim,
            depths: vec![depth],
            heads: vec![heads],
            patch_size,
            window_size: 0,
            mlp_ratio: 4.0,
            num_classes: 2,
            head_style: HeadStyle::ConcatClsMean,
            dropout: 0.0,
        }
    }

    pub fn swin(
        embed_dim: usize,
        depths: &[usize],
        heads: &[usize],
        patch_size: usize,
        window_size: usize,
        resolution: usize,
    ) -> Self {
        Self {
            family: Family::Swin,
            input_resolution: resolution,
            in_channels: 3,
            embed_dim,
            depths: depths.to_vec(),
            heads: heads.to_vec(),
            patch_size,
            window_size,
            mlp_ratio: 4.0,
            num_classes: 2,
            head_style: HeadStyle::GlobalPool,
            dropout: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "dinov2-small-shape" => Self::vit(384, 12, 6, 14, 224),
            "dinov2-base-shape" => Self::vit(768, 12, 12, 14, 224),
            "swin-small-shape" => Self::swin(96, &[2, 2, 18, 2], &[3, 6, 12, 24], 4, 7, 224),
            "swin-base-shape" => Self::swin(128, &[2, 2, 18, 2], &[4, 8, 16, 32], 4, 7, 224),
            "toy-vit" => Self::vit(64, 2, 4, 8, 64),
            "toy-swin" => Self::swin(32, &[1, 1], &[2, 4], 4, 4, 64),
            other => {
                return Err(Error::validation(format!("unknown preset {other}; known presets: {}", PRESETS.join(", "))))
            }
        })
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Channel width of Swin stage `s` (doubles per stage).
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::validation(msg));
        if self.in_channels != 3 {
            return bad(format!("in_channels must be 3, got {}", self.in_channels));
        }
        if self.num_classes != 2 {
            return bad(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.embed_dim == 0 || self.patch_size == 0 || self.input_resolution == 0 {
            return bad("embed_dim, patch_size and input_resolution must be positive".into());
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad(format!(
                "depths {:?} and heads {:?} must be non-empty and of equal length",
                self.depths, self.heads
            ));
        }
        if self.heads.contains(&0) || self.depths.contains(&0) {
            return bad("depths and heads must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.family {
            Family::Vit => {
                if self.depths.len() != 1 {
                    return bad("a ViT has a single depth entry".into());
                }
                if !self.input_resolution.is_multiple_of(self.patch_size) {
                    return bad(format!(
                        "resolution {} is not divisible by patch size {}",
                        self.input_resolution, self.patch_size
                    ));
                }
                if !self.embed_dim.is_multiple_of(self.heads[0]) {
                    return bad(format!("{} heads do not divide embed_dim {}", self.heads[0], self.embed_dim));
                }
                if self.head_style != HeadStyle::ConcatClsMean {
                    return bad("ViT models use the concat_cls_mean head".into());
                }
            }
            Family::Swin => {
                if self.window_size == 0 {
                    return bad("window_size must be positive".into());
                }
                let unit = self.patch_size * self.window_size * (1 << (self.depths.len() - 1));
                if !self.input_resolution.is_multiple_of(unit) {
                    return bad(format!(
                        "resolution {} is not divisible by patch·window·2^(stages−1) = {unit}",
                        self.input_resolution
                    ));
                }
                for (s, &h) in self.heads.iter().enumerate() {
                    if !self.stage_dim(s).is_multiple_of(h) {
                        return bad(format!("{h} heads do not divide stage {s} width {}", self.stage_dim(s)));
                    }
                }
                if self.head_style != HeadStyle::GlobalPool {
                    return bad("Swin models use the global_pool head".into());
                }
            }
        }
        Ok(())
    }
}

/// Forward-pass behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active with masks drawn from `seed`.
    Train {
        seed: u64,
    },
}

/// A classifier: named parameters, optional LoRA adapters, config snapshot.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub(crate) adapters: BTreeMap<String, AdapterSpec>,
    pub(crate) lora: Option<LoraConfig>,
}

pub(crate) enum Fill {
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// Normal sample redrawn until it falls within two standard deviations.
pub(crate) fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub(crate) fn make_tensor<T: Real>(rng: Option<&mut ChaCha8Rng>, shape: Vec<usize>, fill: Fill) -> Tensor<T> {
    let Some(rng) = rng else {
        return Tensor::unallocated(shape);
    };
    match fill {
        Fill::Zeros => Tensor::zeros(shape),
        Fill::Ones => Tensor::full(shape, T::one()),
        Fill::TruncNormal(std) => {
            let n = crate::autodiff::numel(&shape);
            let data = (0..n).map(|_| T::of(trunc_normal(rng, std))).collect();
            Tensor::new(shape, data).expect("positive dims")
        }
    }
}

const INIT_STD: f64 = 0.02;

pub(crate) struct Init<T> {
    pub store: ParamStore<T>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Real> Init<T> {
    fn new(seed: Option<u64>) -> Self {
        Self { store: ParamStore::new(), rng: seed.map(ChaCha8Rng::seed_from_u64) }
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, fill: Fill) -> Result<()> {
        let t = make_tensor(self.rng.as_mut(), shape, fill);
        self.store.insert(name, t, kind)
    }

    pub fn weight(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> Result<()> {
        self.add(name, shape, kind, Fill::TruncNormal(INIT_STD))
    }

    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Result<()> {
        self.weight(format!("{prefix}.weight"), vec![d_out, d_in], ParamKind::Weight)?;
        if bias {
            self.add(format!("{prefix}.bias"), vec![d_out], ParamKind::Bias, Fill::Zeros)?;
        }
        Ok(())
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.add(format!("{prefix}.weight"), vec![dim], ParamKind::Norm, Fill::Ones)?;
        self.add(format!("{prefix}.bias"), vec![dim], ParamKind::Norm, Fill::Zeros)
    }

    /// Pre-norm transformer block parameters shared by both families.
    pub fn block(&mut self, prefix: &str, dim: usize, hidden: usize) -> Result<()> {
        self.norm(&format!("{prefix}.norm1"), dim)?;
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.attn.{p}"), dim, dim, true)?;
        }
        self.norm(&format!("{prefix}.norm2"), dim)?;
        self.linear(&format!("{prefix}.mlp.fc1"), dim, hidden, true)?;
        self.linear(&format!("{prefix}.mlp.fc2"), hidden, dim, true)
    }
}

/// True for classification-head parameters.
pub fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model; initialization is a pure function of `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::construct(config, Some(seed))
    }

    /// Same layout as [`Model::build`] without allocating weights; useful for
    /// parameter accounting of large presets.
    pub fn shape_only(config: &ModelConfig) -> Result<Self> {
        Self::construct(config, None)
    }

    fn construct(config: &ModelConfig, seed: Option<u64>) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        match config.family {
            Family::Vit => vit::init_params(config, &mut init)?,
            Family::Swin => swin::init_params(config, &mut init)?,
        }
        Ok(Self { config: config.clone(), params: init.store, adapters: BTreeMap::new(), lora: None })
    }

    pub fn count_params(&self, trainable_only: bool) -> usize {
        self.params.count(trainable_only)
    }

    pub fn adapters(&self) -> &BTreeMap<String, AdapterSpec> {
        &self.adapters
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    /// Attention projection layers as `(prefix, d_in, d_out)`.
    pub fn attention_projections(&self) -> Vec<(String, usize, usize)> {
        self.params
            .iter()
            .filter_map(|(name, p)| {
                let prefix = name.strip_suffix(".weight")?;
                let (_, last) = prefix.rsplit_once(".attn.")?;
                matches!(last, "q" | "k" | "v" | "o")
                    .then(|| (prefix.to_string(), p.value.shape()[1], p.value.shape()[0]))
            })
            .collect()
    }

    /// Logits `[batch, 2]` for an image batch `x` of shape `[batch, 3, R, R]`.
    pub fn forward<'g>(&self, binder: &Binder<'g, T>, x: Var, mode: Mode) -> Result<Var> {
        let g = binder.graph();
        let shape = g.shape(x);
        let r = self.config.input_resolution;
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != r || shape[3] != r {
            return Err(Error::validation(format!(
                "input batch {shape:?} does not match [batch, {}, {r}, {r}]",
                self.config.in_channels
            )));
        }
        let ctx = Ctx {
            model: self,
            binder,
            g,
            rng: RefCell::new(match mode {
                Mode::Eval => None,
                Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            }),
        };
        match self.config.family {
            Family::Vit => vit::forward(&ctx, x),
            Family::Swin => swin::forward(&ctx, x),
        }
    }
}

/// Stacks images into a `[batch, 3, R, R]` tensor.
pub fn batch_tensor<'a, T: Real>(
    images: impl IntoIterator<Item = &'a InputImage>,
    resolution: usize,
) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut batch = 0;
    for img in images {
        if img.resolution != resolution || img.values.len() != 3 * resolution * resolution {
            return Err(Error::validation(format!(
                "image resolution {} does not match model resolution {resolution}",
                img.resolution
            )));
        }
        data.extend(img.values.iter().map(|&v| T::of(f64::from(v))));
        batch += 1;
    }
    if batch == 0 {
        return Err(Error::validation("empty image batch"));
    }
    Tensor::new(vec![batch, 3, resolution, resolution], data)
}

/// Eval-mode logits `[batch, 2]` for `images`.
pub fn forward_classify<T: Real>(m: &Model<T>, images: &[InputImage]) -> Result<Tensor<T>> {
    let x = batch_tensor(images, m.config.input_resolution)?;
    forward_tensor(m, &x)
}

pub fn forward_tensor<T: Real>(m: &Model<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let binder = Binder::new(&g, &m.params, false);
    let xv = g.constant(x);
    let logits = m.forward(&binder, xv, Mode::Eval)?;
    Ok(g.tensor(logits))
}

pub fn count_params<T: Real>(m: &Model<T>, trainable_only: bool) -> usize {
    m.count_params(trainable_only)
}

/// Forward-pass helpers shared by both families.
pub(crate) struct Ctx<'a, 'g, T> {
    pub model: &'a Model<T>,
    pub binder: &'a Binder<'g, T>,
    pub g: &'g Graph<T>,
    rng: RefCell<Option<ChaCha8Rng>>,
}

impl<T: Real> Ctx<'_, '_, T> {
    pub fn p(&self, name: &str) -> Result<Var> {
        self.binder.param(name)
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Linear layer `prefix`, with its LoRA branch when one is attached.
    pub fn linear(&self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.p(&format!("{prefix}.bias"))?) } else { None };
        match self.model.adapters.get(prefix) {
            Some(spec) => {
                let a = self.p(&format!("{prefix}.lora_a"))?;
                let up = self.p(&format!("{prefix}.lora_b"))?;
                lora_linear(self.g, x, w, b, a, up, spec.scaling)
            }
            None => self.g.linear(x, w, b),
        }
    }

    pub fn norm(&self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.p(&format!("{prefix}.weight"))?;
        let bias = self.p(&format!("{prefix}.bias"))?;
        self.g.layer_norm(x, gain, bias)
    }

    pub fn dropout(&self, x: Var) -> Result<Var> {
        let p = self.cfg().dropout;
        match self.rng.borrow_mut().as_mut() {
            Some(rng) => self.g.dropout(x, p, true, rng),
            None => Ok(x),
        }
    }

    pub fn mlp(&self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.fc1"), true)?;
        let h = self.g.gelu(h)?;
        let h = self.dropout(h)?;
        self.linear(h, &format!("{prefix}.fc2"), true)
    }

    /// `[n, tokens, heads·d]` → `[n, heads, tokens, d]`.
    pub fn split_heads(&self, x: Var, heads: usize) -> Result<Var> {
        let s = self.g.shape(x);
        let (n, t, dim) = (s[0], s[1], s[2]);
        let x = self.g.reshape(x, &[n, t, heads, dim / heads])?;
        self.g.permute(x, &[0, 2, 1, 3])
    }

    pub fn merge_heads(&self, x: Var) -> Result<Var> {
        let s = self.g.shape(x);
        let x = self.g.permute(x, &[0, 2, 1, 3])?;
        self.g.reshape(x, &[s[0], s[2], s[1] * s[3]])
    }

    /// Multi-head self-attention on `[n, tokens, dim]` with an optional
    /// per-head additive term (`[heads, t, t]` or broadcastable).
    pub fn self_attention(
        &self,
        x: Var,
        prefix: &str,
        heads: usize,
        bias: Option<Var>,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.split_heads(self.linear(x, &format!("{prefix}.q"), true)?, heads)?;
        let k = self.split_heads(self.linear(x, &format!("{prefix}.k"), true)?, heads)?;
        let v = self.split_heads(self.linear(x, &format!("{prefix}.v"), true)?, heads)?;
        let out = match (bias, mask) {
            (None, None) => self.g.attention(q, k, v, None)?,
            _ => {
                let d = self.g.shape(q)[3];
                let s = self.g.matmul_ext(q, k, true)?;
                let mut s = self.g.scale(s, T::one() / T::of(d as f64).sqrt())?;
                for extra in [bias, mask].into_iter().flatten() {
                    s = self.g.add_broadcast(s, extra)?;
                }
                let w = self.g.softmax(s)?;
                self.g.matmul(w, v)?
            }
        };
        let out = self.merge_heads(out)?;
        let out = self.linear(out, &format!("{prefix}.o"), true)?;
        self.dropout(out)
    }

    /// Non-overlapping `p×p` patches of `[B, C, R, R]` as `[B, (R/p)², C·p²]`
    /// (channel-major inside a patch, patches row-major).
    pub fn patchify(&self, x: Var) -> Result<Var> {
        let s = self.g.shape(x);
        let (b, c, r) = (s[0], s[1], s[2]);
        let p = self.cfg().patch_size;
        let grid = r / p;
        let mut index = Vec::with_capacity(b * c * r * r);
        for bi in 0..b {
            for gy in 0..grid {
                for gx in 0..grid {
                    for ci in 0..c {
                        for py in 0..p {
                            let row = ((bi * c + ci) * r + gy * p + py) * r + gx * p;
                            index.extend(row..row + p);
                        }
                    }
                }
            }
        }
        self.g.gather(x, index.into(), vec![b, grid * grid, c * p * p])
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Vit => "vit",
            Family::Swin => "swin",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Family::Vit),
            "swin" => Ok(Family::Swin),
            other => Err(Error::validation(format!("unknown model family {other}"))),
        }
    }
}

/// Mean of a loss over a batch, used by model-level gradient checks.
pub fn model_loss<T: Real>(
    m: &Model<T>,
    binder: &Binder<'_, T>,
    x: Var,
    labels: &[usize],
    weights: [f64; 2],
) -> Result<Var> {
    let logits = m.forward(binder, x, Mode::Eval)?;
    binder.graph().cross_entropy(logits, labels, &[T::of(weights[0]), T::of(weights[1])])
}

/// Central-difference check of the full model loss with respect to up to
/// `per_param` coordinates of every trainable parameter.
pub fn model_gradcheck(
    m: &Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    per_param: usize,
    seed: u64,
) -> Result<crate::autodiff::GradReport> {
    use rand::Rng;
    let weights = [1.0, 1.5];
    let g = Graph::new();
    let binder = Binder::new(&g, &m.params, true);
    let xv = g.constant(x);
    let loss = model_loss(m, &binder, xv, labels, weights)?;
    let grads = crate::autodiff::grad(loss, &binder)?;

    // flatten trainable params into one coordinate space
    let names: Vec<String> = m.params.trainable_names();
    let mut offsets = Vec::with_capacity(names.len());
    let mut point = Vec::new();
    let mut analytic = Vec::new();
    for n in &names {
        offsets.push(point.len());
        point.extend_from_slice(m.params.get(n).expect("listed").value.data());
        match grads.get(n) {
            Some(t) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, m.params.get(n).expect("listed").value.numel())),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (i, n) in names.iter().enumerate() {
        let len = m.params.get(n).expect("listed").value.numel();
        for _ in 0..per_param.min(len) {
            coords.push(offsets[i] + rng.random_range(0..len));
        }
    }
    let mut probe = m.clone();
    crate::autodiff::finite_difference_report(
        |p| {
            for (i, n) in names.iter().enumerate() {
                let t = &mut probe.params.get_mut(n).expect("listed").value;
                let len = t.numel();
                t.data_mut().copy_from_slice(&p[offsets[i]..offsets[i] + len]);
            }
            let g = Graph::new();
            let binder = Binder::new(&g, &probe.params, false);
            let xv = g.constant(x);
            let loss = model_loss(&probe, &binder, xv, labels, weights)?;
            let v = g.value(loss)[0];
            Ok(v)
        },
        &point,
        &analytic,
        &coords,
        crate::autodiff::DEFAULT_STEP,
    )
}

#[cfg(test)]
mod tests;
