//! Plain ViT with a CLS token and a CLS ⊕ mean-patch head.
//!
//! With `N = (R/p)²` patches, width `D`, depth `L`, MLP width `M` and `C`
//! input channels the parameter count is
//!
//! ```text
//! patch embed   C·p²·D + D
//! cls token     D
//! positions     (N + 1)·D
//! per block     4·D (two norms) + 4·(D² + D) (q, k, v, o) + D·M + M + M·D + D
//! final norm    2·D
//! head          2·(2·D) + 2
//! ```

use crate::autodiff::{ParamKind, Real, Var};
use crate::error::Result;

use super::{Ctx, Fill, Init, ModelConfig};

pub(super) fn init_params<T: Real>(cfg: &ModelConfig, init: &mut Init<T>) -> Result<()> {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let n = (cfg.input_resolution / p).pow(2);
    init.linear("patch_embed", cfg.in_channels * p * p, d, true)?;
    init.weight("cls_token".into(), vec![1, 1, d], ParamKind::Token)?;
    init.add("pos_embed".into(), vec![1, n + 1, d], ParamKind::PositionEmbedding, Fill::Zeros)?;
    for i in 0..cfg.depths[0] {
        init.block(&format!("blocks.{i}"), d, cfg.mlp_hidden(d))?;
    }
    init.norm("norm", d)?;
    init.linear("head", 2 * d, cfg.num_classes, true)
}

pub(super) fn forward<T: Real>(ctx: &Ctx<'_, '_, T>, x: Var) -> Result<Var> {
    let g = ctx.g;
    let cfg = ctx.cfg();
    let d = cfg.embed_dim;
    let batch = g.shape(x)[0];
    let patches = ctx.patchify(x)?;
    let n = g.shape(patches)[1];
    let tokens = ctx.linear(patches, "patch_embed", true)?;

    let cls = ctx.p("cls_token")?;
    let cls_index: Vec<usize> = (0..batch).flat_map(|_| 0..d).collect();
    let cls = g.gather(cls, cls_index.into(), vec![batch, 1, d])?;
    let h = g.concat(&[cls, tokens], 1)?;
    let mut h = g.add_broadcast(h, ctx.p("pos_embed")?)?;
    h = ctx.dropout(h)?;

    let heads = cfg.heads[0];
    for i in 0..cfg.depths[0] {
        let pre = format!("blocks.{i}");
        let a = ctx.norm(h, &format!("{pre}.norm1"))?;
        let a = ctx.self_attention(a, &format!("{pre}.attn"), heads, None, None)?;
        h = g.add(h, a)?;
        let m = ctx.norm(h, &format!("{pre}.norm2"))?;
        let m = ctx.mlp(m, &format!("{pre}.mlp"))?;
        let m = ctx.dropout(m)?;
        h = g.add(h, m)?;
    }
    let h = ctx.norm(h, "norm")?;
    let cls = g.reshape(g.narrow(h, 1, 0, 1)?, &[batch, d])?;
    let mean = g.mean(g.narrow(h, 1, 1, n)?, 1)?;
    let feat = g.concat(&[cls, mean], 1)?;
    ctx.linear(feat, "head", true)
}
