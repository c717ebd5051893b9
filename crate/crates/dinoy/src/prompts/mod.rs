//! The three prompt pathways — text, visual (box/point), customized — all
//! produce token matrices of the shared hidden width, interchangeable
//! downstream.

use indexmap::IndexMap;
use ndarray::Array2;

use crate::config::ModelConfig;
use crate::data::vocab;
use crate::error::{Error, Result};
use crate::fusion::backbone::MultiScaleFeatures;
use crate::fusion::deform::MsDeformAttn;
use crate::nn::{block_diag_bias, Embedding, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tensor::{Arr, Tensor};

pub const UNIVERSAL: &str = "universal";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSource {
    Text,
    Visual,
    Customized,
}

pub struct PromptEmbedding<'t> {
    /// `[T, d]`; rows with `valid=false` are all-zero
    pub tokens: Tensor<'t>,
    pub valid: Vec<bool>,
    pub source: PromptSource,
}

impl<'t> PromptEmbedding<'t> {
    pub fn all_valid(tokens: Tensor<'t>, source: PromptSource) -> Self {
        let t = tokens.dims()[0];
        PromptEmbedding {
            tokens,
            valid: vec![true; t],
            source,
        }
    }

    /// Zero out rows whose mask is false, restoring the type invariant after
    /// an update that touched every row.
    pub fn remask(tokens: Tensor<'t>, valid: Vec<bool>, source: PromptSource) -> Self {
        let any_invalid = valid.iter().any(|v| !v);
        let tokens = if any_invalid {
            let keep: Vec<f32> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
            let keep = tokens
                .tape
                .constant(Arr::from_shape_vec(ndarray::IxDyn(&[valid.len()]), keep).unwrap());
            tokens.scale_rows(&keep)
        } else {
            tokens
        };
        PromptEmbedding {
            tokens,
            valid,
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

// ---- positional encoding ----

/// Interleaved sine-cosine features: for each coordinate `c`,
/// `sin(c·ω_i), cos(c·ω_i)` with `ω_i = 10000^{-2i/per_coord_dim}`.
pub fn sincos_embed(coords: &[f32], per_coord_dim: usize) -> Result<Vec<f32>> {
    if per_coord_dim % 2 != 0 {
        return Err(Error::Config(format!(
            "per-coordinate embedding dim {per_coord_dim} must be even"
        )));
    }
    let mut out = Vec::with_capacity(coords.len() * per_coord_dim);
    for &c in coords {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::CoordOutOfRange(c));
        }
        for i in 0..per_coord_dim / 2 {
            let omega = (10000.0f64).powf(-2.0 * i as f64 / per_coord_dim as f64);
            let phase = c as f64 * omega;
            out.push(phase.sin() as f32);
            out.push(phase.cos() as f32);
        }
    }
    Ok(out)
}

/// sincos row tensor for a box or point, sized to exactly `d`.
pub fn coord_embedding<'t>(ctx: &Ctx<'t, '_>, coords: &[f32], d: usize) -> Result<Tensor<'t>> {
    let per = match coords.len() {
        2 => d / 2,
        4 => d / 4,
        n => {
            return Err(Error::Config(format!(
                "expected 2 or 4 coordinates, got {n}"
            )))
        }
    };
    let v = sincos_embed(coords, per)?;
    Ok(ctx
        .tape
        .constant(Arr::from_shape_vec(ndarray::IxDyn(&[1, d]), v).unwrap()))
}

// ---- text ----

#[derive(Clone, Debug, PartialEq)]
pub struct TextPrompt {
    pub token_ids: Vec<u32>,
    /// half-open (start, end) spans marking category phrases
    pub phrase_boundaries: Vec<(usize, usize)>,
}

impl TextPrompt {
    /// One phrase per category name, concatenated.
    pub fn from_phrases(phrases: &[String]) -> Result<TextPrompt> {
        let mut token_ids = Vec::new();
        let mut phrase_boundaries = Vec::new();
        for p in phrases {
            let ids = vocab::encode(p)?;
            let start = token_ids.len();
            token_ids.extend(ids);
            phrase_boundaries.push((start, token_ids.len()));
        }
        Ok(TextPrompt {
            token_ids,
            phrase_boundaries,
        })
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.token_ids.is_empty() {
            return Err(Error::Config("empty text prompt".into()));
        }
        for &id in &self.token_ids {
            if id as usize >= vocab_size {
                return Err(Error::UnknownToken(id, vocab_size));
            }
        }
        let mut prev_end = 0usize;
        for &(s, e) in &self.phrase_boundaries {
            if s >= e || e > self.token_ids.len() || s < prev_end {
                return Err(Error::Config(format!(
                    "bad phrase boundary ({s}, {e})"
                )));
            }
            prev_end = e;
        }
        Ok(())
    }

    /// Per-token attention group ids: tokens attend within their phrase;
    /// tokens outside any phrase attend only to themselves.
    fn attention_groups(&self) -> Vec<usize> {
        let mut groups = Vec::with_capacity(self.token_ids.len());
        let mut at = 0usize;
        let mut next = 0usize;
        for &(s, e) in &self.phrase_boundaries {
            while at < s {
                groups.push(next);
                next += 1;
                at += 1;
            }
            groups.extend(std::iter::repeat_n(next, e - s));
            next += 1;
            at = e;
        }
        while at < self.token_ids.len() {
            groups.push(next);
            next += 1;
            at += 1;
        }
        groups
    }
}

struct TextLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

pub struct TextEncoder {
    emb: Embedding,
    pos: ParamId,
    layers: Vec<TextLayer>,
    max_len: usize,
    vocab_size: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d = cfg.d;
        let layers = (0..cfg.text_layers)
            .map(|i| {
                let name = format!("text.layer{i}");
                TextLayer {
                    attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.heads),
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    ffn: Mlp::new(store, &format!("{name}.ffn"), &[d, cfg.ffn_dim, d], false),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                }
            })
            .collect();
        TextEncoder {
            emb: Embedding::new(store, "text.emb", cfg.vocab_size, d),
            pos: store.add_uniform("text.pos", &[cfg.max_text_len, d], 0.02),
            layers,
            max_len: cfg.max_text_len,
            vocab_size: cfg.vocab_size,
        }
    }

    /// One output row per input token, contextualized within each phrase.
    pub fn encode<'t>(&self, ctx: &Ctx<'t, '_>, prompt: &TextPrompt) -> Result<PromptEmbedding<'t>> {
        prompt.validate(self.vocab_size)?;
        let t = prompt.token_ids.len();
        if t > self.max_len {
            return Err(Error::Config(format!(
                "text prompt length {t} exceeds maximum {}",
                self.max_len
            )));
        }
        let ids: Vec<usize> = prompt.token_ids.iter().map(|&i| i as usize).collect();
        let mut x = self
            .emb
            .fwd(ctx, &ids)
            .add(&ctx.p(self.pos).slice_rows(0..t));
        let bias = block_diag_bias(&prompt.attention_groups());
        for layer in &self.layers {
            let a = layer.attn.fwd(ctx, x, x, Some(&bias));
            x = layer.norm1.fwd(ctx, x.add(&a));
            let f = layer.ffn.fwd(ctx, x);
            x = layer.norm2.fwd(ctx, x.add(&f));
        }
        Ok(PromptEmbedding::all_valid(x, PromptSource::Text))
    }

    /// Mean-pool token rows into one row per phrase — the classification
    /// tokens the heads score against.
    pub fn phrase_pool<'t>(
        &self,
        _ctx: &Ctx<'t, '_>,
        encoded: &PromptEmbedding<'t>,
        prompt: &TextPrompt,
    ) -> PromptEmbedding<'t> {
        let rows: Vec<Tensor<'t>> = prompt
            .phrase_boundaries
            .iter()
            .map(|&(s, e)| {
                encoded
                    .tokens
                    .slice_rows(s..e)
                    .mean_axis0()
                    .reshape(&[1, encoded.tokens.dims()[1]])
            })
            .collect();
        PromptEmbedding::all_valid(Tensor::concat_rows(&rows), PromptSource::Text)
    }

    /// encode + pool in one step.
    pub fn phrases<'t>(&self, ctx: &Ctx<'t, '_>, prompt: &TextPrompt) -> Result<PromptEmbedding<'t>> {
        let enc = self.encode(ctx, prompt)?;
        Ok(self.phrase_pool(ctx, &enc, prompt))
    }
}

// ---- visual ----

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VisualPrompt {
    Box { cx: f32, cy: f32, w: f32, h: f32 },
    Point { x: f32, y: f32 },
}

impl VisualPrompt {
    pub fn validate(self) -> Result<()> {
        match self {
            VisualPrompt::Box { cx, cy, w, h } => {
                for c in [cx, cy, w, h] {
                    if !(0.0..=1.0).contains(&c) {
                        return Err(Error::CoordOutOfRange(c));
                    }
                }
                if w <= 0.0 || h <= 0.0 {
                    return Err(Error::DegenerateBox(cx, cy, w, h));
                }
                Ok(())
            }
            VisualPrompt::Point { x, y } => {
                for c in [x, y] {
                    if !(0.0..=1.0).contains(&c) {
                        return Err(Error::CoordOutOfRange(c));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn coords(self) -> Vec<f32> {
        match self {
            VisualPrompt::Box { cx, cy, w, h } => vec![cx, cy, w, h],
            VisualPrompt::Point { x, y } => vec![x, y],
        }
    }

    /// Deformable-attention reference: box center or the point itself.
    pub fn ref_point(self) -> [f32; 2] {
        match self {
            VisualPrompt::Box { cx, cy, .. } => [cx, cy],
            VisualPrompt::Point { x, y } => [x, y],
        }
    }
}

pub struct VisualPromptEncoder {
    box_proj: Linear,
    point_proj: Linear,
    refine: Vec<MsDeformAttn>,
    d: usize,
}

impl VisualPromptEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let refine = (0..2)
            .map(|i| {
                MsDeformAttn::new(
                    store,
                    &format!("visual.refine{i}"),
                    cfg.d,
                    cfg.heads,
                    crate::fusion::MEMORY_STRIDES.len(),
                    cfg.deform_points,
                )
            })
            .collect();
        VisualPromptEncoder {
            box_proj: Linear::new(store, "visual.box_proj", cfg.d, cfg.d),
            point_proj: Linear::new(store, "visual.point_proj", cfg.d, cfg.d),
            refine,
            d: cfg.d,
        }
    }

    /// sincos features through the kind-specific projection; `T = 1`.
    pub fn project<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        prompt: VisualPrompt,
    ) -> Result<PromptEmbedding<'t>> {
        prompt.validate()?;
        let pe = coord_embedding(ctx, &prompt.coords(), self.d)?;
        let tokens = match prompt {
            VisualPrompt::Box { .. } => self.box_proj.fwd(ctx, pe),
            VisualPrompt::Point { .. } => self.point_proj.fwd(ctx, pe),
        };
        Ok(PromptEmbedding::all_valid(tokens, PromptSource::Visual))
    }

    /// Residual deformable cross-attention into the image pyramid, anchored
    /// at the prompt's reference point.
    pub fn refine<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        emb: PromptEmbedding<'t>,
        feats: &MultiScaleFeatures<'t>,
        prompt: VisualPrompt,
    ) -> Result<PromptEmbedding<'t>> {
        if emb.source != PromptSource::Visual {
            return Err(Error::Config(
                "refinement applies to visual prompt embeddings".into(),
            ));
        }
        let maps: Vec<Tensor<'t>> = feats.memory_levels().iter().map(|&(_, t)| t).collect();
        for m in &maps {
            if m.dims()[0] != self.d {
                return Err(Error::Shape {
                    op: "refine_visual_prompt",
                    expected: format!("feature channels {}", self.d),
                    got: format!("{}", m.dims()[0]),
                });
            }
        }
        let t = emb.len();
        let rp = prompt.ref_point();
        let mut refs = Array2::<f32>::zeros((t, 2));
        for i in 0..t {
            refs[[i, 0]] = rp[0];
            refs[[i, 1]] = rp[1];
        }
        let mut x = emb.tokens;
        for layer in &self.refine {
            x = x.add(&layer.fwd(ctx, x, &refs, &maps));
        }
        Ok(PromptEmbedding {
            tokens: x,
            valid: emb.valid,
            source: emb.source,
        })
    }

    /// project + refine.
    pub fn encode<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        feats: &MultiScaleFeatures<'t>,
        prompt: VisualPrompt,
    ) -> Result<PromptEmbedding<'t>> {
        let emb = self.project(ctx, prompt)?;
        self.refine(ctx, emb, feats, prompt)
    }

    /// One pooled embedding for several exemplars of the same category: the
    /// mean of their refined single-token embeddings.
    pub fn encode_exemplars<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        feats: &MultiScaleFeatures<'t>,
        prompts: &[VisualPrompt],
    ) -> Result<PromptEmbedding<'t>> {
        if prompts.is_empty() {
            return Err(Error::Config("no exemplar prompts given".into()));
        }
        let rows: Vec<Tensor<'t>> = prompts
            .iter()
            .map(|&p| self.encode(ctx, feats, p).map(|e| e.tokens))
            .collect::<Result<_>>()?;
        let stacked = Tensor::concat_rows(&rows);
        let pooled = stacked.mean_axis0().reshape(&[1, self.d]);
        Ok(PromptEmbedding::all_valid(pooled, PromptSource::Visual))
    }
}

// ---- customized ----

pub struct CustomizedPrompts {
    entries: IndexMap<String, ParamId>,
    pub rows: usize,
}

impl CustomizedPrompts {
    /// Registry with the reserved "universal" prompt pre-registered.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let mut reg = CustomizedPrompts {
            entries: IndexMap::new(),
            rows: cfg.custom_prompt_len,
        };
        reg.register(store, UNIVERSAL, cfg.d).unwrap();
        reg
    }

    /// Adds a zero-initialized `rows × d` learnable prompt.
    pub fn register(&mut self, store: &mut ParamStore, name: &str, d: usize) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!(
                "customized prompt {name:?} already registered"
            )));
        }
        let id = store.add_zeros(&format!("customized_prompts/{name}"), &[self.rows, d]);
        self.entries.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get<'t>(&self, ctx: &Ctx<'t, '_>, name: &str) -> Result<PromptEmbedding<'t>> {
        let id = self.entries.get(name).ok_or_else(|| Error::UnknownPrompt {
            name: name.to_string(),
            known: self.names(),
        })?;
        Ok(PromptEmbedding::all_valid(
            ctx.p(*id),
            PromptSource::Customized,
        ))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.entries.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Backbone;
    use crate::tensor::gradcheck::rand_arr;
    use crate::tensor::Tape;
    use std::collections::HashSet;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn sincos_zero_is_alternating_zero_one() {
        let v = sincos_embed(&[0.0], 4).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sincos_half_matches_direct_formula() {
        let v = sincos_embed(&[0.5], 4).unwrap();
        // ω_0 = 1, ω_1 = 10000^(-1/2) = 0.01
        let want = [
            0.5f64.sin(),
            0.5f64.cos(),
            0.005f64.sin(),
            0.005f64.cos(),
        ];
        for (a, b) in v.iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn sincos_rejects_out_of_range() {
        assert!(matches!(
            sincos_embed(&[1.5], 4),
            Err(Error::CoordOutOfRange(_))
        ));
        assert!(matches!(
            sincos_embed(&[-0.1], 4),
            Err(Error::CoordOutOfRange(_))
        ));
    }

    #[test]
    fn sincos_is_injective_on_coarse_grid() {
        // 1e-3 grid of [0,1]²: every embedding distinct
        let mut seen = HashSet::with_capacity(1_002_001);
        for xi in 0..=1000u32 {
            for yi in 0..=1000u32 {
                let v =
                    sincos_embed(&[xi as f32 * 1e-3, yi as f32 * 1e-3], 8).unwrap();
                let mut h = std::collections::hash_map::DefaultHasher::new();
                use std::hash::{Hash, Hasher};
                for f in &v {
                    f.to_bits().hash(&mut h);
                }
                assert!(seen.insert(h.finish()), "collision at ({xi}, {yi})");
            }
        }
    }

    #[test]
    fn text_encoding_is_deterministic_and_contextual() {
        let mut store = ParamStore::new(2);
        let enc = TextEncoder::new(&mut store, &cfg());
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);

        let p = TextPrompt {
            token_ids: vec![4, 13],
            phrase_boundaries: vec![(0, 2)],
        };
        let a = enc.encode(&ctx, &p).unwrap().tokens.to_arr();
        let b = enc.encode(&ctx, &p).unwrap().tokens.to_arr();
        assert_eq!(a, b, "eval-mode encoding must be pure");

        // same first token, different second, same phrase → first row differs
        let q = TextPrompt {
            token_ids: vec![4, 14],
            phrase_boundaries: vec![(0, 2)],
        };
        let c = enc.encode(&ctx, &q).unwrap().tokens.to_arr();
        let row_diff: f32 = (0..a.shape()[1])
            .map(|j| (a[[0, j]] - c[[0, j]]).abs())
            .sum();
        assert!(row_diff > 1e-6, "encoder collapsed to a pure lookup");
    }

    #[test]
    fn phrases_do_not_see_each_other() {
        let mut store = ParamStore::new(2);
        let enc = TextEncoder::new(&mut store, &cfg());
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        // "red triangle" alone vs followed by a second phrase
        let one = TextPrompt {
            token_ids: vec![4, 12],
            phrase_boundaries: vec![(0, 2)],
        };
        let two = TextPrompt {
            token_ids: vec![4, 12, 5, 13],
            phrase_boundaries: vec![(0, 2), (2, 4)],
        };
        let a = enc.encode(&ctx, &one).unwrap().tokens.to_arr();
        let b = enc.encode(&ctx, &two).unwrap().tokens.to_arr();
        for i in 0..2 {
            for j in 0..a.shape()[1] {
                assert!(
                    (a[[i, j]] - b[[i, j]]).abs() < 1e-6,
                    "phrase isolation broken at ({i}, {j})"
                );
            }
        }
    }

    #[test]
    fn text_errors_name_the_problem() {
        let mut store = ParamStore::new(2);
        let enc = TextEncoder::new(&mut store, &cfg());
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let bad = TextPrompt {
            token_ids: vec![4, 99],
            phrase_boundaries: vec![(0, 2)],
        };
        match enc.encode(&ctx, &bad) {
            Err(Error::UnknownToken(99, _)) => {}
            Err(other) => panic!("expected unknown-token error, got {other:?}"),
            Ok(_) => panic!("unknown token was accepted"),
        }
        let empty = TextPrompt {
            token_ids: vec![],
            phrase_boundaries: vec![],
        };
        assert!(enc.encode(&ctx, &empty).is_err());
    }

    #[test]
    fn phrase_pooling_averages_token_rows() {
        let mut store = ParamStore::new(2);
        let enc = TextEncoder::new(&mut store, &cfg());
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let p = TextPrompt {
            token_ids: vec![4, 12, 5, 13],
            phrase_boundaries: vec![(0, 2), (2, 4)],
        };
        let encoded = enc.encode(&ctx, &p).unwrap();
        let tok = encoded.tokens.to_arr();
        let pooled = enc.phrase_pool(&ctx, &encoded, &p).tokens.to_arr();
        assert_eq!(pooled.shape(), &[2, 128]);
        for j in 0..128 {
            let want0 = 0.5 * (tok[[0, j]] + tok[[1, j]]);
            let want1 = 0.5 * (tok[[2, j]] + tok[[3, j]]);
            assert!((pooled[[0, j]] - want0).abs() < 1e-6);
            assert!((pooled[[1, j]] - want1).abs() < 1e-6);
        }
    }

    #[test]
    fn visual_projection_separates_kinds_and_is_deterministic() {
        let mut store = ParamStore::new(2);
        let enc = VisualPromptEncoder::new(&mut store, &cfg());
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let b = VisualPrompt::Box {
            cx: 0.4,
            cy: 0.6,
            w: 0.2,
            h: 0.3,
        };
        let p = VisualPrompt::Point { x: 0.4, y: 0.6 };
        let eb = enc.project(&ctx, b).unwrap().tokens.to_arr();
        let eb2 = enc.project(&ctx, b).unwrap().tokens.to_arr();
        let ep = enc.project(&ctx, p).unwrap().tokens.to_arr();
        assert_eq!(eb, eb2);
        let diff: f32 = eb.iter().zip(ep.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3, "box and point paths share parameters?");
    }

    #[test]
    fn visual_projection_perturbation_is_lipschitz_bounded() {
        let mut store = ParamStore::new(2);
        let enc = VisualPromptEncoder::new(&mut store, &cfg());
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let mk = |cx: f32| VisualPrompt::Box {
            cx,
            cy: 0.5,
            w: 0.2,
            h: 0.2,
        };
        let a = enc.project(&ctx, mk(0.4)).unwrap().tokens.to_arr();
        let b = enc.project(&ctx, mk(0.4 + 1e-6)).unwrap().tokens.to_arr();
        let d_emb: f32 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f32>()
            .sqrt();

        let sa = sincos_embed(&mk(0.4).coords(), 32).unwrap();
        let sb = sincos_embed(&mk(0.4 + 1e-6).coords(), 32).unwrap();
        let d_in: f32 = sa
            .iter()
            .zip(sb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f32>()
            .sqrt();
        // Frobenius norm bounds the operator norm
        let w = store.get(store.id_of("visual.box_proj.w").unwrap());
        let fro: f32 = w.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(
            d_emb <= fro * d_in + 1e-7,
            "‖Δemb‖ {d_emb} exceeds bound {}",
            fro * d_in
        );
    }

    #[test]
    fn degenerate_and_out_of_range_visual_prompts_fail() {
        assert!(matches!(
            VisualPrompt::Box {
                cx: 0.5,
                cy: 0.5,
                w: 0.0,
                h: 0.2
            }
            .validate(),
            Err(Error::DegenerateBox(..))
        ));
        assert!(matches!(
            VisualPrompt::Point { x: 1.2, y: 0.5 }.validate(),
            Err(Error::CoordOutOfRange(_))
        ));
    }

    fn feats_for<'t>(
        tape: &'t Tape,
        store: &ParamStore,
        bb: &Backbone,
        img: Arr,
    ) -> MultiScaleFeatures<'t> {
        let ctx = Ctx::new(tape, store);
        bb.fwd(&ctx, tape.constant(img)).unwrap()
    }

    #[test]
    fn refinement_is_residual_and_sees_image_content() {
        let mut store = ParamStore::new(2);
        let c = cfg();
        let bb = Backbone::new(&mut store, &c);
        let enc = VisualPromptEncoder::new(&mut store, &c);
        let prompt = VisualPrompt::Box {
            cx: 0.5,
            cy: 0.5,
            w: 0.25,
            h: 0.25,
        };

        // zero the refiner output projections → refinement is the identity
        let mut zeroed = ParamStore::new(2);
        let bb2 = Backbone::new(&mut zeroed, &c);
        let enc2 = VisualPromptEncoder::new(&mut zeroed, &c);
        for i in 0..2 {
            let name = format!("visual.refine{i}.o.w");
            let shape = zeroed.get(zeroed.id_of(&name).unwrap()).shape().to_vec();
            zeroed.set(&name, Arr::zeros(ndarray::IxDyn(&shape))).unwrap();
        }
        let _ = (&bb2, &enc2);

        let img = rand_arr(&[3, 64, 64], 21, 0.0, 1.0);
        {
            let tape = Tape::no_grad();
            let ctx = Ctx::new(&tape, &zeroed);
            let feats = feats_for(&tape, &zeroed, &bb2, img.clone());
            let base = enc2.project(&ctx, prompt).unwrap();
            let base_vals = base.tokens.to_arr();
            let refined = enc2.refine(&ctx, base, &feats, prompt).unwrap();
            assert_eq!(refined.tokens.to_arr(), base_vals);
        }

        // with live weights, content inside the box changes the embedding
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let feats_a = feats_for(&tape, &store, &bb, img.clone());
        let mut img_b = img.clone();
        for y in 28..36 {
            for x in 28..36 {
                img_b[[0, y, x]] = 1.0 - img_b[[0, y, x]];
            }
        }
        let feats_b = feats_for(&tape, &store, &bb, img_b);
        let ra = enc.encode(&ctx, &feats_a, prompt).unwrap().tokens.to_arr();
        let ra2 = enc.encode(&ctx, &feats_a, prompt).unwrap().tokens.to_arr();
        let rb = enc.encode(&ctx, &feats_b, prompt).unwrap().tokens.to_arr();
        assert_eq!(ra, ra2, "refinement must be deterministic");
        let diff: f32 = ra.iter().zip(rb.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "refined embedding ignores image content");
    }

    #[test]
    fn customized_registry_lifecycle() {
        let mut store = ParamStore::new(2);
        let c = cfg();
        let mut reg = CustomizedPrompts::new(&mut store, &c);
        // universal is reserved and zero before tuning
        assert!(reg.register(&mut store, UNIVERSAL, c.d).is_err());
        reg.register(&mut store, "traffic", c.d).unwrap();

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let u = reg.get(&ctx, UNIVERSAL).unwrap();
        assert_eq!(u.tokens.dims(), vec![c.custom_prompt_len, c.d]);
        assert!(u.tokens.to_arr().iter().all(|&v| v == 0.0));
        assert_eq!(u.source, PromptSource::Customized);

        match reg.get(&ctx, "vehicles") {
            Err(Error::UnknownPrompt { name, known }) => {
                assert_eq!(name, "vehicles");
                assert!(known.contains(&UNIVERSAL.to_string()));
                assert!(known.contains(&"traffic".to_string()));
            }
            Err(other) => panic!("expected unknown-prompt error, got {other:?}"),
            Ok(_) => panic!("unknown prompt name was accepted"),
        }

        // gradients from one prompt never touch another
        let t = reg.get(&ctx, "traffic").unwrap();
        let loss = t.tokens.sum_all();
        let mut grads = tape.backward(loss);
        let contributions = ctx.collect_grads(&mut grads);
        let uni_id = reg.param_id(UNIVERSAL).unwrap();
        assert!(contributions.iter().all(|(id, _)| *id != uni_id));
        assert!(!contributions.is_empty());
    }

    #[test]
    fn remask_zeroes_invalid_rows() {
        let tape = Tape::no_grad();
        let toks = tape.constant(rand_arr(&[3, 4], 31, -1.0, 1.0));
        let e = PromptEmbedding::remask(toks, vec![true, false, true], PromptSource::Text);
        let a = e.tokens.to_arr();
        for j in 0..4 {
            assert_eq!(a[[1, j]], 0.0);
            assert_ne!(a[[0, j]], 0.0);
        }
        assert_eq!(e.n_valid(), 2);
    }
}
