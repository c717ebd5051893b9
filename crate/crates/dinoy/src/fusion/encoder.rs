//! Early fusion: image tokens and prompt tokens update each other inside
//! every encoder block rather than meeting only at the classification head.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::nn::{key_padding_bias, LayerNorm, Mlp, MultiHeadAttention};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::prompts::{sincos_embed, PromptEmbedding};
use crate::tensor::{Arr, Tensor};

use super::backbone::MultiScaleFeatures;
use super::deform::MsDeformAttn;
use super::{grid_positions, map_to_tokens, tokens_to_map};

pub struct FusedMemory<'t> {
    /// `[N, d]` over the flattened memory levels
    pub tokens: Tensor<'t>,
    /// per-token index into `level_shapes`
    pub level_of: Vec<usize>,
    /// per-token normalized (x, y)
    pub positions: Array2<f32>,
    /// `(stride, H_l, W_l)` per memory level
    pub level_shapes: Vec<(usize, usize, usize)>,
    pub prompt: PromptEmbedding<'t>,
}

impl<'t> FusedMemory<'t> {
    pub fn len(&self) -> usize {
        self.level_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.level_of.is_empty()
    }

    /// Re-assemble per-level `[d, H, W]` maps for deformable sampling.
    pub fn value_maps(&self) -> Vec<Tensor<'t>> {
        let mut maps = Vec::with_capacity(self.level_shapes.len());
        let mut at = 0;
        for &(_, h, w) in &self.level_shapes {
            maps.push(tokens_to_map(self.tokens.slice_rows(at..at + h * w), h, w));
            at += h * w;
        }
        maps
    }
}

struct FusionLayer {
    self_attn: MsDeformAttn,
    norm_sa: LayerNorm,
    img_from_prompt: MultiHeadAttention,
    norm_ix: LayerNorm,
    prompt_from_img: MultiHeadAttention,
    norm_px: LayerNorm,
    prompt_self: MultiHeadAttention,
    norm_ps: LayerNorm,
    ffn_img: Mlp,
    norm_if: LayerNorm,
    ffn_prompt: Mlp,
    norm_pf: LayerNorm,
}

pub struct EarlyFusionEncoder {
    layers: Vec<FusionLayer>,
    level_emb: ParamId,
    d: usize,
}

impl EarlyFusionEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d = cfg.d;
        let levels = super::MEMORY_STRIDES.len();
        let layers = (0..cfg.enc_layers)
            .map(|i| {
                let n = format!("encoder.layer{i}");
                FusionLayer {
                    self_attn: MsDeformAttn::new(
                        store,
                        &format!("{n}.sa"),
                        d,
                        cfg.heads,
                        levels,
                        cfg.deform_points,
                    ),
                    norm_sa: LayerNorm::new(store, &format!("{n}.norm_sa"), d),
                    img_from_prompt: MultiHeadAttention::new(
                        store,
                        &format!("{n}.img_x"),
                        d,
                        cfg.heads,
                    ),
                    norm_ix: LayerNorm::new(store, &format!("{n}.norm_ix"), d),
                    prompt_from_img: MultiHeadAttention::new(
                        store,
                        &format!("{n}.prm_x"),
                        d,
                        cfg.heads,
                    ),
                    norm_px: LayerNorm::new(store, &format!("{n}.norm_px"), d),
                    prompt_self: MultiHeadAttention::new(
                        store,
                        &format!("{n}.prm_s"),
                        d,
                        cfg.heads,
                    ),
                    norm_ps: LayerNorm::new(store, &format!("{n}.norm_ps"), d),
                    ffn_img: Mlp::new(store, &format!("{n}.ffn_i"), &[d, cfg.ffn_dim, d], false),
                    norm_if: LayerNorm::new(store, &format!("{n}.norm_if"), d),
                    ffn_prompt: Mlp::new(store, &format!("{n}.ffn_p"), &[d, cfg.ffn_dim, d], false),
                    norm_pf: LayerNorm::new(store, &format!("{n}.norm_pf"), d),
                }
            })
            .collect();
        EarlyFusionEncoder {
            layers,
            level_emb: store.add_uniform("encoder.level_emb", &[levels, d], 0.02),
            d,
        }
    }

    pub fn fwd<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        feats: &MultiScaleFeatures<'t>,
        prompt: PromptEmbedding<'t>,
    ) -> FusedMemory<'t> {
        // flatten memory levels, remembering shape bookkeeping
        let mut parts = Vec::new();
        let mut level_of = Vec::new();
        let mut level_shapes = Vec::new();
        let mut pos_rows: Vec<Array2<f32>> = Vec::new();
        for (li, &(stride, map)) in feats.memory_levels().iter().enumerate() {
            let dims = map.dims();
            assert_eq!(dims[0], self.d, "encoder: feature dim mismatch");
            let (h, w) = (dims[1], dims[2]);
            parts.push(map_to_tokens(map));
            level_of.extend(std::iter::repeat(li).take(h * w));
            level_shapes.push((stride, h, w));
            pos_rows.push(grid_positions(h, w));
        }
        let n: usize = level_of.len();
        let mut positions = Array2::<f32>::zeros((n, 2));
        {
            let mut at = 0;
            for rows in &pos_rows {
                for r in rows.rows() {
                    positions[[at, 0]] = r[0];
                    positions[[at, 1]] = r[1];
                    at += 1;
                }
            }
        }
        // fixed sincos position features plus a learned per-level embedding
        let mut pos_embed = Array2::<f32>::zeros((n, self.d));
        for i in 0..n {
            let v = sincos_embed(&[positions[[i, 0]], positions[[i, 1]]], self.d / 2)
                .expect("grid positions are in range");
            pos_embed.row_mut(i).iter_mut().zip(v).for_each(|(o, s)| *o = s);
        }
        let pos_embed = ctx.tape.constant(pos_embed.into_dyn());
        let lvl = ctx.p(self.level_emb).select_rows(&level_of);
        let mut x = Tensor::concat_rows(&parts).add(&pos_embed).add(&lvl);

        let mut p = prompt.tokens;
        let valid = prompt.valid.clone();
        let n_valid = prompt.valid.iter().filter(|&&v| v).count();
        let fuse = n_valid > 0;
        let t = valid.len();
        let ip_bias = fuse.then(|| key_padding_bias(n, &valid));
        let ps_bias = fuse.then(|| key_padding_bias(t, &valid));

        for layer in &self.layers {
            let maps = {
                // rebuild per-level maps from the current tokens
                let mut maps = Vec::with_capacity(level_shapes.len());
                let mut at = 0;
                for &(_, h, w) in &level_shapes {
                    maps.push(tokens_to_map(x.slice_rows(at..at + h * w), h, w));
                    at += h * w;
                }
                maps
            };
            let sa = layer.self_attn.fwd(ctx, x, &positions, &maps);
            x = layer.norm_sa.fwd(ctx, x.add(&sa));

            if fuse {
                let a = layer
                    .img_from_prompt
                    .fwd(ctx, x, p, ip_bias.as_ref());
                x = layer.norm_ix.fwd(ctx, x.add(&a));
                let b = layer.prompt_from_img.fwd(ctx, p, x, None);
                p = layer.norm_px.fwd(ctx, p.add(&b));
                let c = layer.prompt_self.fwd(ctx, p, p, ps_bias.as_ref());
                p = layer.norm_ps.fwd(ctx, p.add(&c));
            } else {
                // keep the arithmetic identical to a zeroed cross-attention
                x = layer.norm_ix.fwd(ctx, x);
            }

            let f = layer.ffn_img.fwd(ctx, x);
            x = layer.norm_if.fwd(ctx, x.add(&f));
            if fuse {
                let g = layer.ffn_prompt.fwd(ctx, p);
                p = layer.norm_pf.fwd(ctx, p.add(&g));
            }
        }

        let prompt = PromptEmbedding::remask(p, valid, prompt.source);
        FusedMemory {
            tokens: x,
            level_of,
            positions,
            level_shapes,
            prompt,
        }
    }
}

/// Prompt embedding that fuses nothing: a single invalid all-zero row. The
/// encoder skips every cross-attention sublayer for it.
pub fn no_prompt<'t>(ctx: &Ctx<'t, '_>, d: usize) -> PromptEmbedding<'t> {
    PromptEmbedding::remask(
        ctx.tape.constant(Arr::zeros(ndarray::IxDyn(&[1, d]))),
        vec![false],
        crate::prompts::PromptSource::Text,
    )
}
