//! Query decoder: self-attention, deformable cross-attention into memory at
//! the current anchor, and iterative box refinement in inverse-sigmoid space.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::heads::BoxHead;
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::nn::{Ctx, ParamStore};
use crate::prompts::sincos_embed;
use crate::tensor::Tensor;

use super::encoder::FusedMemory;
use super::select::QuerySet;

pub struct DecoderStep<'t> {
    /// `[Q, d]` refined query content after this layer
    pub content: Tensor<'t>,
    /// `[Q, 4]` normalized (cx, cy, w, h) after this layer's refinement
    pub boxes: Tensor<'t>,
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm_sa: LayerNorm,
    cross: super::deform::MsDeformAttn,
    norm_ca: LayerNorm,
    ffn: Mlp,
    norm_f: LayerNorm,
    delta: BoxHead,
}

pub struct Decoder {
    layers: Vec<DecoderLayer>,
    query_pos: Linear,
    d: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d = cfg.d;
        let levels = super::MEMORY_STRIDES.len();
        let layers = (0..cfg.dec_layers)
            .map(|i| {
                let n = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{n}.sa"), d, cfg.heads),
                    norm_sa: LayerNorm::new(store, &format!("{n}.norm_sa"), d),
                    cross: super::deform::MsDeformAttn::new(
                        store,
                        &format!("{n}.ca"),
                        d,
                        cfg.heads,
                        levels,
                        cfg.deform_points,
                    ),
                    norm_ca: LayerNorm::new(store, &format!("{n}.norm_ca"), d),
                    ffn: Mlp::new(store, &format!("{n}.ffn"), &[d, cfg.ffn_dim, d], false),
                    norm_f: LayerNorm::new(store, &format!("{n}.norm_f"), d),
                    // zero-init: the first forward pass reproduces the anchors
                    delta: BoxHead::new(store, &format!("{n}.delta"), d),
                }
            })
            .collect();
        Decoder {
            layers,
            query_pos: Linear::new(store, "decoder.query_pos", d, d),
            d,
        }
    }

    pub fn fwd<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        queries: &QuerySet<'t>,
        memory: &FusedMemory<'t>,
    ) -> Vec<DecoderStep<'t>> {
        let maps = memory.value_maps();
        let q = queries.indices.len();
        let mut x = queries.content;
        let mut boxes = queries.anchors;
        let mut steps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            // positional features from the current boxes (values only)
            let banchor = boxes.to_arr();
            let mut pos = Array2::<f32>::zeros((q, self.d));
            let mut refs = Array2::<f32>::zeros((q, 2));
            for i in 0..q {
                let coords = [
                    banchor[[i, 0]].clamp(0.0, 1.0),
                    banchor[[i, 1]].clamp(0.0, 1.0),
                    banchor[[i, 2]].clamp(0.0, 1.0),
                    banchor[[i, 3]].clamp(0.0, 1.0),
                ];
                let v = sincos_embed(&coords, self.d / 4).expect("clamped coords");
                pos.row_mut(i).iter_mut().zip(v).for_each(|(o, s)| *o = s);
                refs[[i, 0]] = coords[0];
                refs[[i, 1]] = coords[1];
            }
            let qp = self.query_pos.fwd(ctx, ctx.tape.constant(pos.into_dyn()));

            let xq = x.add(&qp);
            let sa = layer.self_attn.fwd(ctx, xq, xq, None);
            x = layer.norm_sa.fwd(ctx, x.add(&sa));
            let ca = layer.cross.fwd(ctx, x.add(&qp), &refs, &maps);
            x = layer.norm_ca.fwd(ctx, x.add(&ca));
            let f = layer.ffn.fwd(ctx, x);
            x = layer.norm_f.fwd(ctx, x.add(&f));

            boxes = layer.delta.refine(ctx, x, boxes);
            steps.push(DecoderStep { content: x, boxes });
        }
        steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::encoder::EarlyFusionEncoder;
    use crate::fusion::select::QuerySelector;
    use crate::fusion::Backbone;
    use crate::prompts::{PromptEmbedding, PromptSource};
    use crate::tensor::gradcheck::rand_arr;
    use crate::tensor::Tape;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d: 32,
            ffn_dim: 64,
            enc_layers: 1,
            dec_layers: 3,
            ..ModelConfig::default()
        }
    }

    struct Rig {
        store: ParamStore,
        bb: Backbone,
        enc: EarlyFusionEncoder,
        sel: QuerySelector,
        dec: Decoder,
        cfg: ModelConfig,
    }

    fn rig(seed: u64) -> Rig {
        let cfg = small_cfg();
        let mut store = ParamStore::new(seed);
        let bb = Backbone::new(&mut store, &cfg);
        let enc = EarlyFusionEncoder::new(&mut store, &cfg);
        let sel = QuerySelector::new(&mut store, &cfg);
        let dec = Decoder::new(&mut store, &cfg);
        Rig {
            store,
            bb,
            enc,
            sel,
            dec,
            cfg,
        }
    }

    #[test]
    fn zero_init_deltas_keep_anchor_boxes_and_emit_one_step_per_layer() {
        let r = rig(11);
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &r.store);
        let img = tape.constant(rand_arr(&[3, 64, 64], 12, 0.0, 1.0));
        let feats = r.bb.fwd(&ctx, img).unwrap();
        let pe = PromptEmbedding::remask(
            tape.constant(rand_arr(&[2, r.cfg.d], 13, -1.0, 1.0)),
            vec![true, true],
            PromptSource::Text,
        );
        let mem = r.enc.fwd(&ctx, &feats, pe);
        let qs = r
            .sel
            .language_guided_query_selection(&ctx, &mem, 12)
            .unwrap();
        let steps = r.dec.fwd(&ctx, &qs, &mem);
        assert_eq!(steps.len(), r.cfg.dec_layers);

        let anchors = qs.anchors.to_arr();
        for step in &steps {
            let b = step.boxes.to_arr();
            for (x, y) in b.iter().zip(anchors.iter()) {
                assert!(
                    (x - y).abs() < 1e-5,
                    "zero-init delta must reproduce anchors: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn forward_passes_stay_finite_across_seeds() {
        for seed in 0..20u64 {
            let r = rig(100 + seed);
            let tape = Tape::no_grad();
            let ctx = Ctx::new(&tape, &r.store);
            let img = tape.constant(rand_arr(&[3, 64, 64], 200 + seed, 0.0, 1.0));
            let feats = r.bb.fwd(&ctx, img).unwrap();
            let pe = PromptEmbedding::remask(
                tape.constant(rand_arr(&[3, r.cfg.d], 300 + seed, -1.0, 1.0)),
                vec![true, true, true],
                PromptSource::Text,
            );
            let mem = r.enc.fwd(&ctx, &feats, pe);
            let qs = r
                .sel
                .language_guided_query_selection(&ctx, &mem, 8)
                .unwrap();
            let steps = r.dec.fwd(&ctx, &qs, &mem);
            for s in &steps {
                assert!(s.content.to_arr().iter().all(|v| v.is_finite()));
                assert!(s
                    .boxes
                    .to_arr()
                    .iter()
                    .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn every_trunk_parameter_receives_gradient() {
        let mut cfg = small_cfg();
        cfg.detach_query_content = true;
        let mut store = ParamStore::new(31);
        let bb = Backbone::new(&mut store, &cfg);
        let enc = EarlyFusionEncoder::new(&mut store, &cfg);
        let sel = QuerySelector::new(&mut store, &cfg);
        let dec = Decoder::new(&mut store, &cfg);

        // zero-init layers (box deltas, anchor head) block gradient flow to
        // their own inputs until the first optimizer step moves them; nudge
        // every weight off its initial value to test the trained regime
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            let shape: Vec<usize> = store.get(store.id_of(n).unwrap()).shape().to_vec();
            let noise = rand_arr(&shape, 7000 + i as u64, -0.05, 0.05);
            let cur = store.get(store.id_of(n).unwrap()).clone();
            store.set(n, cur + noise).unwrap();
        }

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let img = tape.constant(rand_arr(&[3, 64, 64], 32, 0.0, 1.0));
        let feats = bb.fwd(&ctx, img).unwrap();
        let pe = PromptEmbedding::remask(
            tape.constant(rand_arr(&[2, cfg.d], 33, -1.0, 1.0)),
            vec![true, true],
            PromptSource::Text,
        );
        let mem = enc.fwd(&ctx, &feats, pe);
        let qs = sel.language_guided_query_selection(&ctx, &mem, 10).unwrap();
        let steps = dec.fwd(&ctx, &qs, &mem);

        // touch every output surface: final content, all boxes, raw selected
        // rows, the fused prompt, and the stride-4 maps the mask head uses
        let mut loss = steps.last().unwrap().content.square().sum_all();
        for s in &steps {
            loss = loss.add(&s.boxes.square().sum_all());
        }
        loss = loss
            .add(&qs.content_raw.square().sum_all())
            .add(&qs.anchors.square().sum_all())
            .add(&mem.prompt.tokens.square().sum_all())
            .add(&feats.levels[0].1.square().sum_all());

        let mut grads = tape.backward(loss);
        let got = ctx.collect_grads(&mut grads);
        let with_grad: std::collections::HashSet<String> = got
            .iter()
            .filter(|(_, g)| g.iter().any(|&v| v != 0.0))
            .map(|(id, _)| store.name(*id).to_string())
            .collect();
        let missing: Vec<&str> = store
            .iter()
            .map(|(n, _)| n)
            .filter(|n| !with_grad.contains(*n))
            .collect();
        assert!(
            missing.is_empty(),
            "parameters with no gradient: {missing:?}"
        );
    }
}
