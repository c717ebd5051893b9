//! Two-stage training: joint grounding pretraining of the trunk, then
//! frozen-trunk head training (keypoints, language) and universal prompt
//! tuning, with checkpoints that freeze those contracts into digests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::container::Container;
use crate::data::vocab::EOS;
use crate::data::{make_splits, DataConfig, SceneMix, SplitPlan};
use crate::error::{Error, Result};
use crate::heads::{detection_set_loss, MatchWeights};
use crate::keypoints::keypoint_loss;
use crate::language::{roi_align, TaskKind};
use crate::model::{
    is_trunk_param, text_targets, universal_targets, visual_targets, Model, Prompting,
};
use crate::nn::{warmup_cosine, AdamW, AdamWConfig, Ctx, GradBag, ParamStore};
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Stage1,
    Keypoint,
    Language,
    PromptTune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Keypoint => "keypoint",
            Stage::Language => "language",
            Stage::PromptTune => "prompt-tune",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// learning-rate multiplier for `backbone.*` parameters
    pub backbone_lr_mult: f32,
    pub warmup: usize,
    pub weight_decay: f32,
    pub clip_norm: f32,
    pub seed: u64,
    /// absent-category phrases mixed into each text prompt
    pub neg_phrases: usize,
    pub mask_points: usize,
    pub mask_weight: f32,
    /// fraction of stage-1 scenes trained with a visual prompt
    pub visual_fraction: f32,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Stage1,
            steps: 600,
            batch_size: 2,
            lr: 1e-3,
            backbone_lr_mult: 0.1,
            warmup: 50,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            seed: 0,
            neg_phrases: 8,
            mask_points: 32,
            mask_weight: 5.0,
            visual_fraction: 0.5,
            data: DataConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: String,
    pub loss: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub giou: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<f32>,
    pub lr: f32,
    pub grad_norm: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub steps: Vec<StepMetrics>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f32> {
        self.steps.last().map(|s| s.loss)
    }

    /// Append one JSON object per step to `path`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        for s in &self.steps {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    /// training stages applied so far, in order
    pub provenance: Vec<String>,
    /// trunk digest pinned when stage-1 finished; later stages must not move it
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen_trunk_digest: Option<String>,
}

impl CheckpointMeta {
    pub fn fresh(model: &ModelConfig) -> Self {
        CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: model.clone(),
            provenance: Vec::new(),
            frozen_trunk_digest: None,
        }
    }

    pub fn record(&mut self, stage: Stage) {
        self.provenance.push(stage.name().to_string());
    }

    pub fn require(&self, stage: Stage) -> Result<()> {
        if self.provenance.iter().any(|s| s == stage.name()) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint has not been through {} training (provenance: [{}])",
                stage.name(),
                self.provenance.join(", ")
            )))
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let mut c = Container::new();
    c.put_json("meta", meta)?;
    for (name, arr) in model.store.iter() {
        c.put_f32(&format!("param/{name}"), arr);
    }
    c.write_to(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let c = Container::read_from(path)?;
    let meta: CheckpointMeta = c.get_json("meta")?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            meta.format_version
        )));
    }
    let mut model = Model::new(0, &meta.model)?;
    let names: Vec<String> = c.names().map(str::to_string).collect();
    let mut restored = 0usize;
    for name in &names {
        if let Some(p) = name.strip_prefix("param/") {
            model.store.set(p, c.get_f32(name)?)?;
            restored += 1;
        }
    }
    let expected = model.store.iter().count();
    if restored != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint restored {restored} of {expected} parameters"
        )));
    }
    Ok((model, meta))
}

/// Hex SHA-256 of each parameter selected by `keep`, keyed by name.
fn per_param_digests(
    store: &ParamStore,
    keep: impl Fn(&str) -> bool,
) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for (name, arr) in store.iter() {
        if !keep(name) {
            continue;
        }
        let mut h = Sha256::new();
        for v in arr.iter() {
            h.update(v.to_le_bytes());
        }
        let d = h.finalize();
        let mut s = String::with_capacity(64);
        for b in d {
            s.push_str(&format!("{b:02x}"));
        }
        out.insert(name.to_string(), s);
    }
    out
}

fn check_frozen(
    store: &ParamStore,
    before: &BTreeMap<String, String>,
    keep: impl Fn(&str) -> bool,
    stage: Stage,
) -> Result<()> {
    let after = per_param_digests(store, keep);
    let changed: Vec<&str> = before
        .iter()
        .filter(|(name, digest)| after.get(*name) != Some(digest))
        .map(|(name, _)| name.as_str())
        .collect();
    if changed.is_empty() {
        Ok(())
    } else {
        Err(Error::DigestMismatch(format!(
            "{} training moved frozen parameters: {}",
            stage.name(),
            changed.join(", ")
        )))
    }
}

/// Stage-1 joint grounding pretraining: text and visual prompts, box, class,
/// and mask losses, deep supervision on every decoder layer.
pub fn run_stage1(model: &mut Model, tcfg: &TrainConfig) -> Result<TrainReport> {
    if tcfg.data.mix != SceneMix::HeldInOnly {
        return Err(Error::Contamination(
            "stage-1 training must draw held-in scenes only".into(),
        ));
    }
    let splits = make_splits(&tcfg.data)?;
    let held_out = tcfg.data.held_out_indices();
    let names: Vec<String> = tcfg.data.categories.iter().map(|c| c.name.clone()).collect();

    let frozen_before = per_param_digests(&model.store, |n| !is_trunk_param(n));
    let mut opt = AdamW::new(AdamWConfig {
        lr: tcfg.lr,
        weight_decay: tcfg.weight_decay,
        clip_norm: tcfg.clip_norm,
        lr_groups: vec![("backbone.".into(), tcfg.backbone_lr_mult)],
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mw = MatchWeights::default();
    let mut steps = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let mut bag = GradBag::new();
        let (mut loss, mut cls, mut l1, mut giou, mut mask) = (0f32, 0f32, 0f32, 0f32, 0f32);
        for b in 0..tcfg.batch_size {
            let idx = (step * tcfg.batch_size + b) % splits.train.len();
            let sample = splits.train.scene(idx)?;
            for o in &sample.objects {
                if held_out.contains(&o.category) {
                    return Err(Error::Contamination(format!(
                        "held-out category `{}` appeared in training scene {idx}",
                        names[o.category]
                    )));
                }
            }
            let tape = Tape::new();
            let ctx = Ctx::with_trainable(&tape, &model.store, is_trunk_param);
            let img = tape.constant(sample.image.clone());
            let go_visual = rng.random_range(0.0..1.0) < tcfg.visual_fraction;
            let (bundle, targets) = if go_visual {
                let (vp, t) = visual_targets(&sample, &mut rng).expect("scenes have objects");
                (model.forward(&ctx, img, &Prompting::Visual(vp))?, t)
            } else {
                let (phrases, t) = text_targets(&sample, &names, tcfg.neg_phrases, &mut rng);
                (model.forward(&ctx, img, &Prompting::Text(phrases))?, t)
            };
            let sl = model.scene_loss(
                &ctx,
                &bundle,
                &targets,
                &mw,
                tcfg.mask_weight,
                tcfg.mask_points,
                &mut rng,
            )?;
            loss += sl.total.scalar();
            cls += sl.cls;
            l1 += sl.l1;
            giou += sl.giou;
            mask += sl.mask;
            let mut grads = tape.backward(sl.total);
            bag.add(ctx.collect_grads(&mut grads));
        }
        let inv = 1.0 / tcfg.batch_size as f32;
        bag.scale(inv);
        let sched = warmup_cosine(step, tcfg.steps, tcfg.warmup);
        let grad_norm = opt.step(&mut model.store, bag, sched);
        steps.push(StepMetrics {
            step,
            stage: Stage::Stage1.name().into(),
            loss: loss * inv,
            cls: Some(cls * inv),
            l1: Some(l1 * inv),
            giou: Some(giou * inv),
            mask: Some(mask * inv),
            feature: None,
            response: None,
            lr: tcfg.lr * sched,
            grad_norm,
        });
    }

    check_frozen(&model.store, &frozen_before, |n| !is_trunk_param(n), Stage::Stage1)?;
    Ok(TrainReport {
        stage: Stage::Stage1.name().into(),
        steps,
    })
}

/// Matched `(query, gt)` pairs of the final decoder layer for a scene
/// prompted with exactly its own phrases.
fn matched_pairs<'t>(
    model: &Model,
    ctx: &Ctx<'t, '_>,
    sample: &crate::data::GroundingSample,
    names: &[String],
) -> Result<(crate::model::ForwardBundle<'t>, crate::model::SceneTargets, Vec<(usize, usize)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
    let (phrases, targets) = text_targets(sample, names, 0, &mut rng);
    let tape_img = ctx.tape.constant(sample.image.clone());
    let bundle = model.forward(ctx, tape_img, &Prompting::Text(phrases))?;
    let last = bundle.steps.last().expect("decoder emits steps");
    let logits = crate::heads::contrastive_logits(last.content, bundle.phrase_embs);
    let (_, m) = detection_set_loss(
        logits,
        last.boxes,
        &targets.boxes,
        &targets.phrase_of,
        &MatchWeights::default(),
    )?;
    Ok((bundle, targets, m.pairs))
}

fn box_area(b: [f32; 4]) -> f32 {
    b[2] * b[3]
}

/// Stage-2 keypoint training: trunk frozen, per-layer keypoint losses on the
/// final Hungarian assignment, boxes and content taken from ground truth
/// matches.
pub fn run_stage2_keypoint(model: &mut Model, tcfg: &TrainConfig) -> Result<TrainReport> {
    let splits = make_splits(&tcfg.data)?;
    let names: Vec<String> = tcfg.data.categories.iter().map(|c| c.name.clone()).collect();
    let trainable = |n: &str| n.starts_with("keypoint.");
    let frozen_before = per_param_digests(&model.store, |n| !trainable(n));
    let mut opt = AdamW::new(AdamWConfig {
        lr: tcfg.lr,
        weight_decay: tcfg.weight_decay,
        clip_norm: tcfg.clip_norm,
        ..AdamWConfig::default()
    });
    let mut steps = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let mut bag = GradBag::new();
        let mut loss_sum = 0f32;
        let mut counted = 0usize;
        for b in 0..tcfg.batch_size {
            let idx = (step * tcfg.batch_size + b) % splits.train.len();
            let sample = splits.train.scene(idx)?;
            let tape = Tape::new();
            let ctx = Ctx::with_trainable(&tape, &model.store, trainable);
            let (bundle, _targets, pairs) = matched_pairs(model, &ctx, &sample, &names)?;
            let last = bundle.steps.last().unwrap();

            let mut acc: Option<Tensor> = None;
            let mut n_items = 0usize;
            for &(q, g) in &pairs {
                let o = &sample.objects[g];
                let Some(spec) = model.registry.spec_for_phrase(&names[o.category]) else {
                    continue;
                };
                let gt = keypoint_set_of(o)?;
                let content = last.content.select_rows(&[q]);
                let pred = model
                    .keypoints
                    .fwd(&ctx, content, o.box_cxcywh, spec, &bundle.memory)?;
                let n_layers = pred.layer_points.len() as f32;
                for pts in &pred.layer_points {
                    let l = keypoint_loss(*pts, pred.vis_logits, &gt, box_area(o.box_cxcywh), spec)?
                        .scale(1.0 / n_layers);
                    acc = Some(match acc {
                        Some(a) => a.add(&l),
                        None => l,
                    });
                }
                n_items += 1;
            }
            let Some(total) = acc else { continue };
            let total = total.scale(1.0 / n_items as f32);
            loss_sum += total.scalar();
            counted += 1;
            let mut grads = tape.backward(total);
            bag.add(ctx.collect_grads(&mut grads));
        }
        if counted == 0 {
            continue;
        }
        bag.scale(1.0 / counted as f32);
        let sched = warmup_cosine(step, tcfg.steps, tcfg.warmup);
        let grad_norm = opt.step(&mut model.store, bag, sched);
        steps.push(StepMetrics {
            step,
            stage: Stage::Keypoint.name().into(),
            loss: loss_sum / counted as f32,
            cls: None,
            l1: None,
            giou: None,
            mask: None,
            feature: None,
            response: None,
            lr: tcfg.lr * sched,
            grad_norm,
        });
    }

    check_frozen(&model.store, &frozen_before, |n| !trainable(n), Stage::Keypoint)?;
    Ok(TrainReport {
        stage: Stage::Keypoint.name().into(),
        steps,
    })
}

fn keypoint_set_of(o: &crate::data::SceneObject) -> Result<crate::keypoints::KeypointSet> {
    let mut flat = Vec::with_capacity(o.keypoints.len() * 3);
    for kp in &o.keypoints {
        flat.extend_from_slice(kp);
    }
    crate::keypoints::KeypointSet::from_flat(&flat)
}

/// Stage-2 language training: trunk frozen, teacher-forced recognition and
/// captioning over RoI features of matched ground-truth regions.
pub fn run_stage2_language(model: &mut Model, tcfg: &TrainConfig) -> Result<TrainReport> {
    let splits = make_splits(&tcfg.data)?;
    let names: Vec<String> = tcfg.data.categories.iter().map(|c| c.name.clone()).collect();
    let trainable = |n: &str| n.starts_with("lm.");
    let frozen_before = per_param_digests(&model.store, |n| !trainable(n));
    let mut opt = AdamW::new(AdamWConfig {
        lr: tcfg.lr,
        weight_decay: tcfg.weight_decay,
        clip_norm: tcfg.clip_norm,
        ..AdamWConfig::default()
    });
    let mut steps = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let mut bag = GradBag::new();
        let mut loss_sum = 0f32;
        let mut counted = 0usize;
        for b in 0..tcfg.batch_size {
            let idx = (step * tcfg.batch_size + b) % splits.train.len();
            let sample = splits.train.scene(idx)?;
            let tape = Tape::new();
            let ctx = Ctx::with_trainable(&tape, &model.store, trainable);
            let (bundle, _targets, pairs) = matched_pairs(model, &ctx, &sample, &names)?;
            let last = bundle.steps.last().unwrap();
            let s8 = bundle.memory.value_maps()[0];

            let mut acc: Option<Tensor> = None;
            let mut n_items = 0usize;
            for &(q, g) in &pairs {
                let o = &sample.objects[g];
                let roi = roi_align(&ctx, s8, clamp_box(o.box_cxcywh), model.cfg.roi_grid)?;
                let content = last.content.select_rows(&[q]);
                let obj = model.lm.build_object_tokens(&ctx, roi, content)?;
                let (rec, cap) = region_text_targets(o);
                let l = model
                    .lm
                    .caption_loss(&ctx, &obj, TaskKind::Recognize, &rec)?
                    .add(&model.lm.caption_loss(&ctx, &obj, TaskKind::Caption, &cap)?);
                acc = Some(match acc {
                    Some(a) => a.add(&l),
                    None => l,
                });
                n_items += 1;
            }
            let Some(total) = acc else { continue };
            let total = total.scale(1.0 / n_items as f32);
            loss_sum += total.scalar();
            counted += 1;
            let mut grads = tape.backward(total);
            bag.add(ctx.collect_grads(&mut grads));
        }
        if counted == 0 {
            continue;
        }
        bag.scale(1.0 / counted as f32);
        let sched = warmup_cosine(step, tcfg.steps, tcfg.warmup);
        let grad_norm = opt.step(&mut model.store, bag, sched);
        steps.push(StepMetrics {
            step,
            stage: Stage::Language.name().into(),
            loss: loss_sum / counted as f32,
            cls: None,
            l1: None,
            giou: None,
            mask: None,
            feature: None,
            response: None,
            lr: tcfg.lr * sched,
            grad_norm,
        });
    }

    check_frozen(&model.store, &frozen_before, |n| !trainable(n), Stage::Language)?;
    Ok(TrainReport {
        stage: Stage::Language.name().into(),
        steps,
    })
}

/// Category-name tokens (recognize) and full attribute tokens (caption) for a
/// region, both EOS-terminated.
pub fn region_text_targets(o: &crate::data::SceneObject) -> (Vec<u32>, Vec<u32>) {
    let c = &o.caption;
    (vec![c[0], c[2], EOS], vec![c[0], c[1], c[2], EOS])
}

/// Shrink a box just enough that its corners sit inside the unit square.
fn clamp_box(b: [f32; 4]) -> [f32; 4] {
    let x0 = (b[0] - b[2] / 2.0).clamp(0.0, 1.0);
    let y0 = (b[1] - b[3] / 2.0).clamp(0.0, 1.0);
    let x1 = (b[0] + b[2] / 2.0).clamp(0.0, 1.0);
    let y1 = (b[1] + b[3] / 2.0).clamp(0.0, 1.0);
    [
        (x0 + x1) / 2.0,
        (y0 + y1) / 2.0,
        (x1 - x0).max(1e-3),
        (y1 - y0).max(1e-3),
    ]
}

/// Prompt tuning: only the universal prompt embedding learns; the scene is
/// prompted promptlessly and every annotated object is a target.
pub fn run_prompt_tune(model: &mut Model, tcfg: &TrainConfig) -> Result<TrainReport> {
    let splits = make_splits(&tcfg.data)?;
    let trainable = |n: &str| n.starts_with("customized_prompts/");
    let frozen_before = per_param_digests(&model.store, |n| !trainable(n));
    let mut opt = AdamW::new(AdamWConfig {
        lr: tcfg.lr,
        weight_decay: 0.0,
        clip_norm: tcfg.clip_norm,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mw = MatchWeights::default();
    let mut steps = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let mut bag = GradBag::new();
        let mut loss_sum = 0f32;
        for b in 0..tcfg.batch_size {
            let idx = (step * tcfg.batch_size + b) % splits.train.len();
            let sample = splits.train.scene(idx)?;
            let tape = Tape::new();
            let ctx = Ctx::with_trainable(&tape, &model.store, trainable);
            let img = tape.constant(sample.image.clone());
            let bundle = model.forward(&ctx, img, &Prompting::Universal)?;
            let targets = universal_targets(&sample);
            let sl = model.scene_loss(&ctx, &bundle, &targets, &mw, 0.0, tcfg.mask_points, &mut rng)?;
            loss_sum += sl.total.scalar();
            let mut grads = tape.backward(sl.total);
            bag.add(ctx.collect_grads(&mut grads));
        }
        let inv = 1.0 / tcfg.batch_size as f32;
        bag.scale(inv);
        let sched = warmup_cosine(step, tcfg.steps, tcfg.warmup);
        let grad_norm = opt.step(&mut model.store, bag, sched);
        steps.push(StepMetrics {
            step,
            stage: Stage::PromptTune.name().into(),
            loss: loss_sum * inv,
            cls: None,
            l1: None,
            giou: None,
            mask: None,
            feature: None,
            response: None,
            lr: tcfg.lr * sched,
            grad_norm,
        });
    }

    check_frozen(&model.store, &frozen_before, |n| !trainable(n), Stage::PromptTune)?;
    Ok(TrainReport {
        stage: Stage::PromptTune.name().into(),
        steps,
    })
}

/// Run the stage named in the config against a model, enforcing provenance.
pub fn run_stage(model: &mut Model, meta: &mut CheckpointMeta, tcfg: &TrainConfig) -> Result<TrainReport> {
    let report = match tcfg.stage {
        Stage::Stage1 => run_stage1(model, tcfg)?,
        Stage::Keypoint => {
            meta.require(Stage::Stage1)?;
            run_stage2_keypoint(model, tcfg)?
        }
        Stage::Language => {
            meta.require(Stage::Stage1)?;
            run_stage2_language(model, tcfg)?
        }
        Stage::PromptTune => {
            meta.require(Stage::Stage1)?;
            run_prompt_tune(model, tcfg)?
        }
    };
    if tcfg.stage == Stage::Stage1 {
        meta.frozen_trunk_digest = Some(model.trunk_digest());
    } else if let Some(expect) = &meta.frozen_trunk_digest {
        let now = model.trunk_digest();
        if &now != expect {
            return Err(Error::DigestMismatch(format!(
                "trunk digest moved during {}: {expect} -> {now}",
                tcfg.stage.name()
            )));
        }
    }
    meta.record(tcfg.stage);
    Ok(report)
}

/// Convenience: scene iterator for evaluation hooks.
pub fn split_of<'a>(splits: &'a crate::data::Splits, name: &str) -> Option<&'a SplitPlan> {
    match name {
        "train" => Some(&splits.train),
        "val_held_in" => Some(&splits.val_held_in),
        "val_held_out" => Some(&splits.val_held_out),
        _ => None,
    }
}
