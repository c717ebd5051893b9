//! Full model assembly: backbone, prompt encoders, fused encoder, query
//! selection, decoder, and the task heads, plus the per-scene training losses
//! and plain inference.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::GroundingSample;
use crate::error::Result;
use crate::fusion::backbone::MultiScaleFeatures;
use crate::fusion::decoder::{Decoder, DecoderStep};
use crate::fusion::encoder::{EarlyFusionEncoder, FusedMemory};
use crate::fusion::select::{QuerySelector, QuerySet};
use crate::fusion::Backbone;
use crate::heads::{
    contrastive_logits, detection_set_loss, point_sampled_mask_loss, Detection, MaskHead,
    MatchResult, MatchWeights,
};
use crate::keypoints::{KeypointHead, KeypointRegistry};
use crate::language::LanguageHead;
use crate::nn::{Ctx, ParamStore};
use crate::prompts::{
    CustomizedPrompts, PromptEmbedding, TextEncoder, TextPrompt, VisualPrompt,
    VisualPromptEncoder, UNIVERSAL,
};
use crate::tensor::Tensor;

/// Parameter prefixes owned by the stage-2 heads and the customized prompts;
/// everything else is the stage-1 "trunk".
const HEAD_PREFIXES: [&str; 3] = ["keypoint.", "lm.", "customized_prompts/"];

pub fn is_trunk_param(name: &str) -> bool {
    !HEAD_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub text: TextEncoder,
    pub visual: VisualPromptEncoder,
    pub custom: CustomizedPrompts,
    pub encoder: EarlyFusionEncoder,
    pub selector: QuerySelector,
    pub decoder: Decoder,
    pub mask: MaskHead,
    pub keypoints: KeypointHead,
    pub lm: LanguageHead,
    pub registry: KeypointRegistry,
}

/// How the scene is prompted for one forward pass.
pub enum Prompting {
    Text(Vec<String>),
    Visual(VisualPrompt),
    /// a set of exemplars pooled into one visual prompt token
    VisualExemplars(Vec<VisualPrompt>),
    Universal,
}

/// Everything a forward pass produces that the losses and inference need.
pub struct ForwardBundle<'t> {
    pub feats: MultiScaleFeatures<'t>,
    pub memory: FusedMemory<'t>,
    pub queries: QuerySet<'t>,
    pub steps: Vec<DecoderStep<'t>>,
    /// `[P, d]` classification targets: pooled phrases, the visual prompt
    /// embedding, or the pooled universal prompt
    pub phrase_embs: Tensor<'t>,
}

pub struct SceneLosses<'t> {
    pub total: Tensor<'t>,
    pub cls: f32,
    pub l1: f32,
    pub giou: f32,
    pub mask: f32,
    /// final-layer Hungarian assignment, reused by stage-2 heads
    pub final_match: MatchResult,
}

/// Ground truth for one prompted scene: boxes, the phrase index each object
/// answers to, and (optionally) its mask.
pub struct SceneTargets {
    pub boxes: Array2<f32>,
    pub phrase_of: Vec<usize>,
    /// image-resolution binary masks, parallel to `boxes` rows
    pub masks: Vec<Array2<f32>>,
}

impl Model {
    pub fn new(seed: u64, cfg: &ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let registry = KeypointRegistry::standard()?;
        let mut store = ParamStore::new(seed);
        let backbone = Backbone::new(&mut store, cfg);
        let text = TextEncoder::new(&mut store, cfg);
        let visual = VisualPromptEncoder::new(&mut store, cfg);
        let custom = CustomizedPrompts::new(&mut store, cfg);
        let encoder = EarlyFusionEncoder::new(&mut store, cfg);
        let selector = QuerySelector::new(&mut store, cfg);
        let decoder = Decoder::new(&mut store, cfg);
        let mask = MaskHead::new(&mut store, cfg);
        let keypoints = KeypointHead::new(&mut store, cfg, &registry);
        let lm = LanguageHead::new(&mut store, cfg);
        Ok(Model {
            cfg: cfg.clone(),
            store,
            backbone,
            text,
            visual,
            custom,
            encoder,
            selector,
            decoder,
            mask,
            keypoints,
            lm,
            registry,
        })
    }

    /// Digest over the stage-1 trunk parameters.
    pub fn trunk_digest(&self) -> String {
        self.store.digest(is_trunk_param)
    }

    /// One full detection pass under the given prompting mode.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        image: Tensor<'t>,
        prompting: &Prompting,
    ) -> Result<ForwardBundle<'t>> {
        let feats = self.backbone.fwd(ctx, image)?;

        let (fusion_prompt, phrase_embs): (PromptEmbedding<'t>, Tensor<'t>) = match prompting {
            Prompting::Text(phrases) => {
                let prompt = TextPrompt::from_phrases(phrases)?;
                let enc = self.text.encode(ctx, &prompt)?;
                let pooled = self.text.phrase_pool(ctx, &enc, &prompt);
                (enc, pooled.tokens)
            }
            Prompting::Visual(vp) => {
                let emb = self.visual.encode(ctx, &feats, *vp)?;
                let cls = emb.tokens;
                (emb, cls)
            }
            Prompting::VisualExemplars(vps) => {
                let emb = self.visual.encode_exemplars(ctx, &feats, vps)?;
                let cls = emb.tokens;
                (emb, cls)
            }
            Prompting::Universal => {
                let emb = self.custom.get(ctx, UNIVERSAL)?;
                let d = emb.tokens.dims()[1];
                let pooled = emb.tokens.mean_axis0().reshape(&[1, d]);
                (emb, pooled)
            }
        };

        let memory = self.encoder.fwd(ctx, &feats, fusion_prompt);
        let queries = self
            .selector
            .language_guided_query_selection(ctx, &memory, self.cfg.n_queries.min(memory.len()))?;
        let steps = self.decoder.fwd(ctx, &queries, &memory);
        Ok(ForwardBundle {
            feats,
            memory,
            queries,
            steps,
            phrase_embs,
        })
    }

    /// Detection training loss: per-layer set losses (plus the selection
    /// level) and point-sampled mask losses on the final matching.
    #[allow(clippy::too_many_arguments)]
    pub fn scene_loss<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        bundle: &ForwardBundle<'t>,
        targets: &SceneTargets,
        weights: &MatchWeights,
        mask_weight: f32,
        mask_points: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<SceneLosses<'t>> {
        let mut cls_sum = 0.0f32;
        let mut l1_sum = 0.0f32;
        let mut giou_sum = 0.0f32;
        let mut total: Option<Tensor<'t>> = None;
        let add = |t: Tensor<'t>, acc: &mut Option<Tensor<'t>>| {
            *acc = Some(match acc {
                Some(a) => a.add(&t),
                None => t,
            });
        };

        // selection-level supervision keeps gradients flowing to the encoder
        // ranking even when decoder content is detached
        let sel_logits = contrastive_logits(bundle.queries.content_raw, bundle.phrase_embs);
        let levels: Vec<(Tensor<'t>, Tensor<'t>)> = std::iter::once((sel_logits, bundle.queries.anchors))
            .chain(bundle.steps.iter().map(|s| {
                (
                    contrastive_logits(s.content, bundle.phrase_embs),
                    s.boxes,
                )
            }))
            .collect();

        let mut final_match = None;
        for (i, (logits, boxes)) in levels.iter().enumerate() {
            let (losses, m) = detection_set_loss(
                *logits,
                *boxes,
                &targets.boxes,
                &targets.phrase_of,
                weights,
            )?;
            cls_sum += losses.cls.scalar();
            l1_sum += losses.l1.scalar();
            giou_sum += losses.giou.scalar();
            add(losses.weighted(weights), &mut total);
            if i + 1 == levels.len() {
                final_match = Some(m);
            }
        }
        let final_match = final_match.expect("at least one level");

        // masks on the final assignment only
        let mut mask_sum = 0.0f32;
        if mask_weight > 0.0 && !final_match.pairs.is_empty() && !targets.masks.is_empty() {
            let enc_s8 = bundle.memory.value_maps()[0];
            let pm = self.mask.pixel_map(ctx, bundle.feats.raw_s4, enc_s8)?;
            let (h, w) = (pm.dims()[1], pm.dims()[2]);
            let qidx: Vec<usize> = final_match.pairs.iter().map(|&(q, _)| q).collect();
            let content = bundle.steps.last().unwrap().content.select_rows(&qidx);
            let logits = self.mask.mask_logits(ctx, content, pm);
            let flat = logits.reshape(&[qidx.len(), h * w]);
            let mut macc: Option<Tensor<'t>> = None;
            for (row, &(_, g)) in final_match.pairs.iter().enumerate() {
                let pred = flat.slice_rows(row..row + 1).reshape(&[h, w]);
                let l = point_sampled_mask_loss(pred, &targets.masks[g], mask_points, true, rng);
                add(l, &mut macc);
            }
            let m = macc
                .unwrap()
                .scale(mask_weight / final_match.pairs.len() as f32);
            mask_sum = m.scalar();
            add(m, &mut total);
        }

        Ok(SceneLosses {
            total: total.expect("levels are never empty"),
            cls: cls_sum,
            l1: l1_sum,
            giou: giou_sum,
            mask: mask_sum,
            final_match,
        })
    }

    /// Plain inference: final-layer boxes scored against the prompt phrases.
    pub fn detect<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        bundle: &ForwardBundle<'t>,
        score_threshold: f32,
        max_detections: usize,
        with_masks: bool,
    ) -> Result<Vec<Detection>> {
        let last = bundle.steps.last().expect("decoder emits steps");
        let logits = contrastive_logits(last.content, bundle.phrase_embs).to_arr();
        let boxes = last.boxes.to_arr();
        let q = boxes.shape()[0];
        let p = logits.shape()[1];

        let mask_grids = if with_masks {
            let enc_s8 = bundle.memory.value_maps()[0];
            let pm = self.mask.pixel_map(ctx, bundle.feats.raw_s4, enc_s8)?;
            Some(self.mask.mask_logits(ctx, last.content, pm).to_arr())
        } else {
            None
        };

        let mut dets = Vec::new();
        for i in 0..q {
            let row: Vec<f32> = (0..p).map(|j| logits[[i, j]]).collect();
            let bx = [
                boxes[[i, 0]],
                boxes[[i, 1]],
                boxes[[i, 2]].max(1e-4),
                boxes[[i, 3]].max(1e-4),
            ];
            let mask = mask_grids.as_ref().map(|g| {
                let (h, w) = (g.shape()[1], g.shape()[2]);
                let mut m = Array2::<f32>::zeros((h, w));
                for y in 0..h {
                    for x in 0..w {
                        m[[y, x]] = g[[i, y, x]];
                    }
                }
                m
            });
            let det = Detection::new(bx, row, mask)?;
            if det.score >= score_threshold {
                dets.push(det);
            }
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(max_detections);
        Ok(dets)
    }
}

/// Assemble text-prompt targets for a scene: its phrases plus sampled
/// negatives, and the per-object phrase indices.
pub fn text_targets(
    sample: &GroundingSample,
    all_names: &[String],
    neg_phrases: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, SceneTargets) {
    let mut phrases = sample.phrases.clone();
    let mut absent: Vec<&String> = all_names
        .iter()
        .filter(|n| !phrases.contains(n))
        .collect();
    // Fisher-Yates prefix: pick up to `neg_phrases` distinct negatives
    let take = neg_phrases.min(absent.len());
    for i in 0..take {
        let j = rng.random_range(i..absent.len());
        absent.swap(i, j);
        phrases.push(absent[i].clone());
    }

    let phrase_of = sample
        .objects
        .iter()
        .map(|o| {
            let name = &all_names[o.category];
            sample.phrases.iter().position(|p| p == name).expect("own phrase present")
        })
        .collect();
    (phrases, scene_targets(sample, phrase_of))
}

/// Visual-prompt targets: one exemplar instance prompts for every object of
/// its category.
pub fn visual_targets(
    sample: &GroundingSample,
    rng: &mut ChaCha8Rng,
) -> Option<(VisualPrompt, SceneTargets)> {
    if sample.objects.is_empty() {
        return None;
    }
    let pick = rng.random_range(0..sample.objects.len());
    let cat = sample.objects[pick].category;
    let b = sample.objects[pick].box_cxcywh;
    let prompt = if rng.random_range(0.0..1.0) < 0.5 {
        VisualPrompt::Box {
            cx: b[0],
            cy: b[1],
            w: b[2],
            h: b[3],
        }
    } else {
        VisualPrompt::Point { x: b[0], y: b[1] }
    };
    let keep: Vec<usize> = (0..sample.objects.len())
        .filter(|&i| sample.objects[i].category == cat)
        .collect();
    Some((prompt, subset_targets(sample, &keep, 0)))
}

/// Universal-prompt targets: every annotated object answers to phrase 0.
pub fn universal_targets(sample: &GroundingSample) -> SceneTargets {
    let phrase_of = vec![0usize; sample.objects.len()];
    scene_targets(sample, phrase_of)
}

fn scene_targets(sample: &GroundingSample, phrase_of: Vec<usize>) -> SceneTargets {
    let n = sample.objects.len();
    let mut boxes = Array2::<f32>::zeros((n, 4));
    let mut masks = Vec::with_capacity(n);
    for (i, o) in sample.objects.iter().enumerate() {
        for c in 0..4 {
            boxes[[i, c]] = o.box_cxcywh[c];
        }
        masks.push(o.mask.mapv(|v| v as f32));
    }
    SceneTargets {
        boxes,
        phrase_of,
        masks,
    }
}

fn subset_targets(sample: &GroundingSample, keep: &[usize], phrase: usize) -> SceneTargets {
    let mut boxes = Array2::<f32>::zeros((keep.len(), 4));
    let mut masks = Vec::with_capacity(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        let o = &sample.objects[i];
        for c in 0..4 {
            boxes[[row, c]] = o.box_cxcywh[c];
        }
        masks.push(o.mask.mapv(|v| v as f32));
    }
    SceneTargets {
        boxes,
        phrase_of: vec![phrase; keep.len()],
        masks,
    }
}
