//! Hierarchical shifted-window transformer.
//!
//! Stage `s` works at width `D·2^s` on a `(R/p)/2^s` square map. Attention is
//! local to `w×w` windows, every second block shifts the windows by `w/2`, and a
//! learned `(2w−1)² × heads` table supplies relative position biases. When a
//! stage's map is no larger than the window, the window shrinks to the map and
//! shifting is disabled. Stages are joined by 2×2 patch merging
//! (`LayerNorm(4C)` then a bias-free `4C → 2C` projection).

use super::window::{invert_index, relative_position_index, shifted_window_mask, window_index};
use super::{Ctx, Fill, Init, ModelConfig};
use crate::autodiff::{ParamKind, Real, Tensor, Var};
use crate::error::Result;

/// `(map side, effective window)` per stage.
pub fn swin_stage_geometry(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    let grid = cfg.input_resolution / cfg.patch_size;
    (0..cfg.depths.len())
        .map(|s| {
            let side = grid >> s;
            (side, cfg.window_size.min(side))
        })
        .collect()
}

fn block_shift(side: usize, window: usize, block: usize) -> usize {
    if side <= window || block.is_multiple_of(2) {
        0
    } else {
        window / 2
    }
}

pub(super) fn init_params<T: Real>(cfg: &ModelConfig, init: &mut Init<T>) -> Result<()> {
    let p = cfg.patch_size;
    init.linear("patch_embed", cfg.in_channels * p * p, cfg.embed_dim, true)?;
    init.norm("patch_embed.norm", cfg.embed_dim)?;
    let geometry = swin_stage_geometry(cfg);
    let stages = cfg.depths.len();
    for s in 0..stages {
        let dim = cfg.stage_dim(s);
        let (_, window) = geometry[s];
        for j in 0..cfg.depths[s] {
            let pre = format!("stages.{s}.blocks.{j}");
            init.block(&pre, dim, cfg.mlp_hidden(dim))?;
            init.add(
                format!("{pre}.attn.rel_bias"),
                vec![(2 * window - 1).pow(2), cfg.heads[s]],
                ParamKind::PositionBias,
                Fill::TruncNormal(0.02),
            )?;
        }
        if s + 1 < stages {
            init.norm(&format!("stages.{s}.merge.norm"), 4 * dim)?;
            init.linear(&format!("stages.{s}.merge.reduction"), 4 * dim, 2 * dim, false)?;
        }
    }
    let last = cfg.stage_dim(stages - 1);
    init.norm("norm", last)?;
    init.linear("head", last, cfg.num_classes, true)
}

fn block<T: Real>(ctx: &Ctx<'_, '_, T>, x: Var, stage: usize, j: usize, window: usize) -> Result<Var> {
    let g = ctx.g;
    let s = g.shape(x);
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let heads = ctx.cfg().heads[stage];
    let shift = block_shift(h, window, j);
    let pre = format!("stages.{stage}.blocks.{j}");
    let n = window * window;
    let n_win = (h / window) * (w / window);

    let xn = ctx.norm(x, &format!("{pre}.norm1"))?;
    let index = window_index(b, h, w, c, window, shift)?;
    let inverse = invert_index(&index);
    let wins = g.gather(xn, index.into(), vec![b * n_win, n, c])?;

    let rel = relative_position_index(window);
    let bias_index: Vec<usize> = (0..heads).flat_map(|hh| rel.iter().map(move |&r| r * heads + hh)).collect();
    let table = ctx.p(&format!("{pre}.attn.rel_bias"))?;
    let bias = g.gather(table, bias_index.into(), vec![heads, n, n])?;

    let mask = if shift > 0 {
        let m = shifted_window_mask(h, w, window, shift)?;
        let tiled: Vec<T> = (0..b).flat_map(|_| m.data().iter().map(|&v| T::of(v))).collect();
        Some(g.constant(&Tensor::new(vec![b * n_win, 1, n, n], tiled)?))
    } else {
        None
    };
    let attn = ctx.self_attention(wins, &format!("{pre}.attn"), heads, Some(bias), mask)?;
    let back = g.gather(attn, inverse.into(), vec![b, h, w, c])?;
    let x = g.add(x, back)?;

    let m = ctx.norm(x, &format!("{pre}.norm2"))?;
    let m = ctx.mlp(m, &format!("{pre}.mlp"))?;
    let m = ctx.dropout(m)?;
    g.add(x, m)
}

fn merge<T: Real>(ctx: &Ctx<'_, '_, T>, x: Var, stage: usize) -> Result<Var> {
    let g = ctx.g;
    let s = g.shape(x);
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (h2, w2) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h2 {
            for xx in 0..w2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let base = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    let x = g.gather(x, index.into(), vec![b, h2, w2, 4 * c])?;
    let x = ctx.norm(x, &format!("stages.{stage}.merge.norm"))?;
    ctx.linear(x, &format!("stages.{stage}.merge.reduction"), false)
}

pub(super) fn forward<T: Real>(ctx: &Ctx<'_, '_, T>, x: Var) -> Result<Var> {
    let g = ctx.g;
    let cfg = ctx.cfg();
    let b = g.shape(x)[0];
    let grid = cfg.input_resolution / cfg.patch_size;
    let t = ctx.linear(ctx.patchify(x)?, "patch_embed", true)?;
    let t = ctx.norm(t, "patch_embed.norm")?;
    let mut h = g.reshape(t, &[b, grid, grid, cfg.embed_dim])?;
    h = ctx.dropout(h)?;
    let geometry = swin_stage_geometry(cfg);
    let stages = cfg.depths.len();
    for (s, &(_, window)) in geometry.iter().enumerate() {
        for j in 0..cfg.depths[s] {
            h = block(ctx, h, s, j, window)?;
        }
        if s + 1 < stages {
            h = merge(ctx, h, s)?;
        }
    }
    let sh = g.shape(h);
    let h = g.reshape(h, &[b, sh[1] * sh[2], sh[3]])?;
    let h = ctx.norm(h, "norm")?;
    let pooled = g.mean(h, 1)?;
    ctx.linear(pooled, "head", true)
}
