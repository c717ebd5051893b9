//! COCO-style average precision for boxes and masks, counting error, and
//! whole-split evaluation across the three prompting modes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{CategorySpec, SplitPlan};
use crate::error::{Error, Result};
use crate::heads::Detection;
use crate::keypoints::{oks, KeypointSet, KeypointSpec};
use crate::language::TaskKind;
use crate::model::{Model, Prompting};
use crate::nn::Ctx;
use crate::prompts::VisualPrompt;
use crate::tensor::Tape;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// COCO threshold sweep 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f32> {
    (0..10).map(|i| 0.5 + 0.05 * i as f32).collect()
}

pub const MAX_DETS_PER_IMAGE_PER_CATEGORY: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApMode {
    Box,
    Mask,
}

/// One detection prepared for scoring: image and category resolved, mask
/// already binarized at ground-truth resolution.
#[derive(Clone, Debug)]
pub struct EvalDet {
    pub image: usize,
    pub category: usize,
    pub score: f32,
    pub box_cxcywh: [f32; 4],
    pub mask: Option<Array2<bool>>,
    pub keypoints: Option<KeypointSet>,
}

#[derive(Clone, Debug)]
pub struct EvalGt {
    pub image: usize,
    pub category: usize,
    pub box_cxcywh: [f32; 4],
    pub mask: Option<Array2<bool>>,
    pub keypoints: Option<KeypointSet>,
    pub area: f32,
}

/// Plain intersection-over-union of two `cxcywh` boxes, in f64.
pub fn box_iou(a: [f32; 4], b: [f32; 4]) -> f64 {
    let half = |v: [f32; 4]| {
        (
            (v[0] - v[2] / 2.0) as f64,
            (v[1] - v[3] / 2.0) as f64,
            (v[0] + v[2] / 2.0) as f64,
            (v[1] + v[3] / 2.0) as f64,
        )
    };
    let (ax0, ay0, ax1, ay1) = half(a);
    let (bx0, by0, bx1, by1) = half(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Pixel-count IoU of two binary masks of equal shape.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "mask grids must share a resolution");
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn pair_iou(det: &EvalDet, gt: &EvalGt, mode: ApMode) -> f64 {
    match mode {
        ApMode::Box => box_iou(det.box_cxcywh, gt.box_cxcywh),
        ApMode::Mask => match (&det.mask, &gt.mask) {
            (Some(a), Some(b)) => mask_iou(a, b),
            _ => 0.0,
        },
    }
}

/// 101-point interpolated AP from (score-desc) TP/FP flags and the gt count.
fn interpolated_ap(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: max precision at recall >= r
    let mut ap = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let mut best = 0.0f64;
        for i in 0..flags.len() {
            if recalls[i] + 1e-12 >= r && precisions[i] > best {
                best = precisions[i];
            }
        }
        ap += best;
    }
    ap / 101.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApReport {
    pub mode: String,
    pub thresholds: Vec<f32>,
    /// category name → AP per threshold
    pub per_category: BTreeMap<String, Vec<f64>>,
    /// mean over scored categories, per threshold
    pub mean_per_threshold: Vec<f64>,
    /// mean over categories and thresholds
    pub mean_ap: f64,
    /// mean AP at IoU 0.5 (first threshold)
    pub ap50: f64,
    /// AP over the rare bucket (bottom tercile of frequency ranks)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rare_ap: Option<f64>,
    pub notes: Vec<String>,
}

/// Greedy highest-score-first matching per image at each IoU threshold,
/// 101-point interpolation, per-category and mean AP.
pub fn average_precision(
    dets: &[EvalDet],
    gts: &[EvalGt],
    mode: ApMode,
    thresholds: &[f32],
    categories: &[CategorySpec],
) -> Result<ApReport> {
    if thresholds.is_empty() {
        return Err(Error::Eval("no IoU thresholds given".into()));
    }
    let mut per_category = BTreeMap::new();
    let mut notes = Vec::new();
    let mut scored: Vec<(usize, Vec<f64>)> = Vec::new();

    for (ci, cat) in categories.iter().enumerate() {
        let cat_gts: Vec<&EvalGt> = gts.iter().filter(|g| g.category == ci).collect();
        if cat_gts.is_empty() {
            notes.push(format!("category `{}` has no ground truth; skipped", cat.name));
            continue;
        }
        // cap dets per image, then order globally by score (deterministic ties)
        let mut by_image: BTreeMap<usize, Vec<&EvalDet>> = BTreeMap::new();
        for d in dets.iter().filter(|d| d.category == ci) {
            by_image.entry(d.image).or_default().push(d);
        }
        let mut cat_dets: Vec<&EvalDet> = Vec::new();
        for (_, mut v) in by_image {
            v.sort_by(|a, b| b.score.total_cmp(&a.score));
            v.truncate(MAX_DETS_PER_IMAGE_PER_CATEGORY);
            cat_dets.extend(v);
        }
        cat_dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image.cmp(&b.image)));

        let mut aps = Vec::with_capacity(thresholds.len());
        for &thr in thresholds {
            let mut gt_used = vec![false; cat_gts.len()];
            let mut flags = Vec::with_capacity(cat_dets.len());
            for d in &cat_dets {
                let mut best = -1.0f64;
                let mut best_j = None;
                for (j, g) in cat_gts.iter().enumerate() {
                    if gt_used[j] || g.image != d.image {
                        continue;
                    }
                    let iou = pair_iou(d, g, mode);
                    if iou >= thr as f64 && iou > best {
                        best = iou;
                        best_j = Some(j);
                    }
                }
                match best_j {
                    Some(j) => {
                        gt_used[j] = true;
                        flags.push(true);
                    }
                    None => flags.push(false),
                }
            }
            aps.push(interpolated_ap(&flags, cat_gts.len()));
        }
        per_category.insert(cat.name.clone(), aps.clone());
        scored.push((ci, aps));
    }

    let n_thr = thresholds.len();
    let mut mean_per_threshold = vec![0.0f64; n_thr];
    if !scored.is_empty() {
        for (_, aps) in &scored {
            for t in 0..n_thr {
                mean_per_threshold[t] += aps[t];
            }
        }
        for v in mean_per_threshold.iter_mut() {
            *v /= scored.len() as f64;
        }
    }
    let mean_ap = if scored.is_empty() {
        0.0
    } else {
        mean_per_threshold.iter().sum::<f64>() / n_thr as f64
    };

    // rare bucket: bottom tercile of frequency ranks among scored categories
    let rare_ap = {
        let mut ranked: Vec<(usize, &Vec<f64>)> = scored
            .iter()
            .map(|(ci, aps)| (categories[*ci].frequency_rank, aps))
            .collect();
        ranked.sort_by_key(|(rank, _)| std::cmp::Reverse(*rank));
        let n_rare = ranked.len() / 3;
        if n_rare == 0 {
            None
        } else {
            let mut acc = 0.0;
            for (_, aps) in ranked.iter().take(n_rare) {
                acc += aps.iter().sum::<f64>() / n_thr as f64;
            }
            Some(acc / n_rare as f64)
        }
    };

    let ap50 = mean_per_threshold.first().copied().unwrap_or(0.0);
    Ok(ApReport {
        mode: match mode {
            ApMode::Box => "box".into(),
            ApMode::Mask => "mask".into(),
        },
        thresholds: thresholds.to_vec(),
        per_category,
        mean_per_threshold,
        mean_ap,
        ap50,
        rare_ap,
        notes,
    })
}

/// Mean absolute error between predicted and true instance counts.
pub fn counting_mae(pred: &[usize], truth: &[usize]) -> Result<f32> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Eval(format!(
            "counting needs equal non-empty lists, got {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum();
    Ok((total / pred.len() as f64) as f32)
}

/// Keypoint AP: detection-style greedy matching with OKS as the similarity.
pub fn keypoint_ap(
    dets: &[EvalDet],
    gts: &[EvalGt],
    oks_threshold: f64,
    spec_of: &dyn Fn(usize) -> Option<KeypointSpec>,
) -> Result<f64> {
    let mut with_kp: Vec<&EvalDet> = dets.iter().filter(|d| d.keypoints.is_some()).collect();
    with_kp.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image.cmp(&b.image)));
    let gt_kp: Vec<&EvalGt> = gts.iter().filter(|g| g.keypoints.is_some()).collect();
    if gt_kp.is_empty() {
        return Err(Error::Eval("no keypoint-annotated ground truth".into()));
    }
    let mut used = vec![false; gt_kp.len()];
    let mut flags = Vec::with_capacity(with_kp.len());
    for d in &with_kp {
        let pred = d.keypoints.as_ref().unwrap();
        let mut best = -1.0f64;
        let mut best_j = None;
        for (j, g) in gt_kp.iter().enumerate() {
            if used[j] || g.image != d.image || g.category != d.category {
                continue;
            }
            let gt_set = g.keypoints.as_ref().unwrap();
            if gt_set.k() != pred.k() {
                continue;
            }
            let Some(spec) = spec_of(g.category) else { continue };
            let Ok(s) = oks(pred, gt_set, g.area, &spec) else {
                continue;
            };
            if s >= oks_threshold && s > best {
                best = s;
                best_j = Some(j);
            }
        }
        match best_j {
            Some(j) => {
                used[j] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    Ok(interpolated_ap(&flags, gt_kp.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalTask {
    Text,
    Masks,
    Counting,
    PromptFree,
    Keypoints,
    Recognize,
    Caption,
}

impl EvalTask {
    pub fn from_name(s: &str) -> Result<EvalTask> {
        Ok(match s {
            "text" => EvalTask::Text,
            "masks" => EvalTask::Masks,
            "counting" => EvalTask::Counting,
            "prompt-free" => EvalTask::PromptFree,
            "keypoints" => EvalTask::Keypoints,
            "recognize" => EvalTask::Recognize,
            "caption" => EvalTask::Caption,
            other => {
                return Err(Error::Config(format!(
                    "unknown eval task `{other}` (expected text, masks, counting, prompt-free, keypoints, recognize, caption)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub tasks: Vec<EvalTask>,
    /// cap on evaluated scenes (None = whole split)
    pub max_images: Option<usize>,
    /// score cut for counting and overlays; AP sweeps all scores
    pub score_threshold: f32,
    pub overlay_dir: Option<std::path::PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tasks: vec![EvalTask::Text],
            max_images: None,
            score_threshold: 0.5,
            overlay_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountingReport {
    pub mae: f32,
    pub pairs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitReport {
    pub schema_version: u32,
    pub split: String,
    pub images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_ap_held_in: Option<ApReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_ap_held_out: Option<ApReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_ap_held_in: Option<ApReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_ap_held_out: Option<ApReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counting: Option<CountingReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_free_recall: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keypoint_ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recognize_exact: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption_exact: Option<f32>,
}

impl SplitReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Bilinear upsample of a logit grid to the full image resolution
/// (pixel-center convention), then binarize at zero.
pub fn mask_to_image(logits: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<bool> {
    let (h, w) = logits.dim();
    let mut out = Array2::<bool>::from_elem((out_h, out_w), false);
    for y in 0..out_h {
        let sy = ((y as f32 + 0.5) * h as f32 / out_h as f32 - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for x in 0..out_w {
            let sx = ((x as f32 + 0.5) * w as f32 / out_w as f32 - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            let v = logits[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
                + logits[[y0, x1]] * (1.0 - fy) * fx
                + logits[[y1, x0]] * fy * (1.0 - fx)
                + logits[[y1, x1]] * fy * fx;
            out[[y, x]] = v > 0.0;
        }
    }
    out
}

fn gt_of_scene(
    sample: &crate::data::GroundingSample,
    image: usize,
    want_masks: bool,
    want_keypoints: bool,
) -> Vec<EvalGt> {
    sample
        .objects
        .iter()
        .map(|o| EvalGt {
            image,
            category: o.category,
            box_cxcywh: o.box_cxcywh,
            mask: want_masks.then(|| o.mask.mapv(|v| v > 0)),
            keypoints: if want_keypoints && !o.keypoints.is_empty() {
                let mut flat = Vec::with_capacity(o.keypoints.len() * 3);
                for kp in &o.keypoints {
                    flat.extend_from_slice(kp);
                }
                KeypointSet::from_flat(&flat).ok()
            } else {
                None
            },
            area: o.box_cxcywh[2] * o.box_cxcywh[3],
        })
        .collect()
}

/// Evaluate a model over one split under the requested tasks.
pub fn evaluate_split(model: &Model, split: &SplitPlan, opts: &EvalOptions) -> Result<SplitReport> {
    let categories = &split.config.categories;
    let names: Vec<String> = categories.iter().map(|c| c.name.clone()).collect();
    let n_images = opts.max_images.unwrap_or(split.len()).min(split.len());
    if n_images == 0 {
        return Err(Error::Eval(format!("split `{}` has no scenes", split.name)));
    }
    let has = |t: EvalTask| opts.tasks.contains(&t);
    let want_masks = has(EvalTask::Masks);
    let want_kp = has(EvalTask::Keypoints);
    let img_size = split.config.image_size;

    let mut dets: Vec<EvalDet> = Vec::new();
    let mut gts: Vec<EvalGt> = Vec::new();
    let mut count_pred: Vec<usize> = Vec::new();
    let mut count_true: Vec<usize> = Vec::new();
    let mut covered = 0usize;
    let mut total_gt = 0usize;
    let mut rec_hits = 0usize;
    let mut rec_total = 0usize;
    let mut cap_hits = 0usize;
    let mut cap_total = 0usize;

    for i in 0..n_images {
        let sample = split.scene(i)?;
        gts.extend(gt_of_scene(&sample, i, want_masks, want_kp));

        let tape = Tape::new();
        let ctx = Ctx::with_trainable(&tape, &model.store, |_| false);
        let img = tape.constant(sample.image.clone());

        if has(EvalTask::Text) || want_masks || want_kp || has(EvalTask::Recognize) || has(EvalTask::Caption) {
            let bundle = model.forward(&ctx, img, &Prompting::Text(names.clone()))?;
            let found = model.detect(&ctx, &bundle, 0.0, model.cfg.n_queries, want_masks)?;
            let last = bundle.steps.last().unwrap();
            for d in &found {
                let kp = if want_kp {
                    keypoints_for(model, &ctx, &bundle, d, &names)?
                } else {
                    None
                };
                dets.push(EvalDet {
                    image: i,
                    category: d.phrase_index,
                    score: d.score,
                    box_cxcywh: d.box_cxcywh,
                    mask: d
                        .mask_logits
                        .as_ref()
                        .filter(|_| want_masks)
                        .map(|m| mask_to_image(m, img_size, img_size)),
                    keypoints: kp,
                });
            }

            if has(EvalTask::Recognize) || has(EvalTask::Caption) {
                let s8 = bundle.memory.value_maps()[0];
                for o in &sample.objects {
                    // query content of the best-scoring detection overlapping
                    // this region, falling back to the best IoU regardless
                    let mut best: Option<(f64, usize)> = None;
                    for (qi, d) in found.iter().enumerate() {
                        let iou = box_iou(d.box_cxcywh, o.box_cxcywh);
                        if best.map(|(b, _)| iou > b).unwrap_or(true) {
                            best = Some((iou, qi));
                        }
                    }
                    let Some((_, qi)) = best else { continue };
                    let content = last.content.select_rows(&[query_of(&bundle, &found[qi])?]);
                    let roi = crate::language::roi_align(
                        &ctx,
                        s8,
                        clamp_box(o.box_cxcywh),
                        model.cfg.roi_grid,
                    )?;
                    let obj = model.lm.build_object_tokens(&ctx, roi, content)?;
                    if has(EvalTask::Recognize) {
                        let got = model.lm.generate(&ctx, &obj, TaskKind::Recognize, model.cfg.max_text_len)?;
                        let want = vec![o.caption[0], o.caption[2], crate::data::vocab::EOS];
                        rec_total += 1;
                        if got == want {
                            rec_hits += 1;
                        }
                    }
                    if has(EvalTask::Caption) {
                        let got = model.lm.generate(&ctx, &obj, TaskKind::Caption, model.cfg.max_text_len)?;
                        let want = vec![o.caption[0], o.caption[1], o.caption[2], crate::data::vocab::EOS];
                        cap_total += 1;
                        if got == want {
                            cap_hits += 1;
                        }
                    }
                }
            }

            if let Some(dir) = &opts.overlay_dir {
                let strong: Vec<&Detection> = found
                    .iter()
                    .filter(|d| d.score >= opts.score_threshold)
                    .collect();
                write_overlay(dir, &split.name, i, &sample, &strong)?;
            }
        }

        if has(EvalTask::Counting) {
            let mut present: Vec<usize> = sample.objects.iter().map(|o| o.category).collect();
            present.sort_unstable();
            present.dedup();
            for cat in present {
                let exemplars: Vec<VisualPrompt> = sample
                    .objects
                    .iter()
                    .filter(|o| o.category == cat)
                    .take(3)
                    .map(|o| VisualPrompt::Box {
                        cx: o.box_cxcywh[0],
                        cy: o.box_cxcywh[1],
                        w: o.box_cxcywh[2],
                        h: o.box_cxcywh[3],
                    })
                    .collect();
                let truth = sample.objects.iter().filter(|o| o.category == cat).count();
                let bundle =
                    model.forward(&ctx, img, &Prompting::VisualExemplars(exemplars))?;
                let found = model.detect(&ctx, &bundle, opts.score_threshold, model.cfg.n_queries, false)?;
                count_pred.push(found.len());
                count_true.push(truth);
            }
        }

        if has(EvalTask::PromptFree) {
            let bundle = model.forward(&ctx, img, &Prompting::Universal)?;
            let found = model.detect(&ctx, &bundle, opts.score_threshold, model.cfg.n_queries, false)?;
            for o in &sample.objects {
                total_gt += 1;
                if found
                    .iter()
                    .any(|d| box_iou(d.box_cxcywh, o.box_cxcywh) >= 0.5)
                {
                    covered += 1;
                }
            }
        }
    }

    let held_out: std::collections::BTreeSet<usize> =
        split.config.held_out_indices().into_iter().collect();
    let split_sets = |items: &[EvalGt]| -> (Vec<EvalGt>, Vec<EvalGt>) {
        let (mut hi, mut ho) = (Vec::new(), Vec::new());
        for g in items {
            if held_out.contains(&g.category) {
                ho.push(g.clone());
            } else {
                hi.push(g.clone());
            }
        }
        (hi, ho)
    };
    let (gt_in, gt_out) = split_sets(&gts);
    let det_in: Vec<EvalDet> = dets.iter().filter(|d| !held_out.contains(&d.category)).cloned().collect();
    let det_out: Vec<EvalDet> = dets.iter().filter(|d| held_out.contains(&d.category)).cloned().collect();
    let thr = coco_thresholds();

    let mut report = SplitReport {
        schema_version: REPORT_SCHEMA_VERSION,
        split: split.name.clone(),
        images: n_images,
        box_ap_held_in: None,
        box_ap_held_out: None,
        mask_ap_held_in: None,
        mask_ap_held_out: None,
        counting: None,
        prompt_free_recall: None,
        keypoint_ap: None,
        recognize_exact: None,
        caption_exact: None,
    };

    if has(EvalTask::Text) {
        if !gt_in.is_empty() {
            report.box_ap_held_in =
                Some(average_precision(&det_in, &gt_in, ApMode::Box, &thr, categories)?);
        }
        if !gt_out.is_empty() {
            report.box_ap_held_out =
                Some(average_precision(&det_out, &gt_out, ApMode::Box, &thr, categories)?);
        }
    }
    if want_masks {
        if !gt_in.is_empty() {
            report.mask_ap_held_in =
                Some(average_precision(&det_in, &gt_in, ApMode::Mask, &thr, categories)?);
        }
        if !gt_out.is_empty() {
            report.mask_ap_held_out =
                Some(average_precision(&det_out, &gt_out, ApMode::Mask, &thr, categories)?);
        }
    }
    if has(EvalTask::Counting) && !count_pred.is_empty() {
        report.counting = Some(CountingReport {
            mae: counting_mae(&count_pred, &count_true)?,
            pairs: count_pred.len(),
        });
    }
    if has(EvalTask::PromptFree) && total_gt > 0 {
        report.prompt_free_recall = Some(covered as f32 / total_gt as f32);
    }
    if want_kp {
        let registry = &model.registry;
        let spec_of = |cat: usize| -> Option<KeypointSpec> {
            registry.spec_for_phrase(&categories[cat].name).cloned()
        };
        report.keypoint_ap = Some(keypoint_ap(&dets, &gts, 0.5, &spec_of)?);
    }
    if rec_total > 0 {
        report.recognize_exact = Some(rec_hits as f32 / rec_total as f32);
    }
    if cap_total > 0 {
        report.caption_exact = Some(cap_hits as f32 / cap_total as f32);
    }
    Ok(report)
}

/// Index of the query that produced a detection (by matching its box in the
/// final decoder layer).
fn query_of(bundle: &crate::model::ForwardBundle<'_>, det: &Detection) -> Result<usize> {
    let boxes = bundle.steps.last().unwrap().boxes.to_arr();
    let q = boxes.shape()[0];
    for i in 0..q {
        let b = [boxes[[i, 0]], boxes[[i, 1]], boxes[[i, 2]].max(1e-4), boxes[[i, 3]].max(1e-4)];
        if b == det.box_cxcywh {
            return Ok(i);
        }
    }
    Err(Error::Eval("detection does not match any query box".into()))
}

fn keypoints_for<'t>(
    model: &Model,
    ctx: &Ctx<'t, '_>,
    bundle: &crate::model::ForwardBundle<'t>,
    det: &Detection,
    names: &[String],
) -> Result<Option<KeypointSet>> {
    let Some(spec) = model.registry.spec_for_phrase(&names[det.phrase_index]) else {
        return Ok(None);
    };
    let q = query_of(bundle, det)?;
    let last = bundle.steps.last().unwrap();
    let content = last.content.select_rows(&[q]);
    let pred = model
        .keypoints
        .fwd(ctx, content, det.box_cxcywh, spec, &bundle.memory)?;
    Ok(Some(pred.to_set()))
}

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

/// Render the scene with detection boxes burned in as red outlines.
pub fn write_overlay(
    dir: &Path,
    split: &str,
    image_id: usize,
    sample: &crate::data::GroundingSample,
    dets: &[&Detection],
) -> Result<()> {
    let shape = sample.image.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (sample.image[[c, y, x]].clamp(0.0, 1.0) * 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    for d in dets {
        let b = d.box_cxcywh;
        let x0 = (((b[0] - b[2] / 2.0) * w as f32) as i64).clamp(0, w as i64 - 1) as usize;
        let x1 = (((b[0] + b[2] / 2.0) * w as f32) as i64).clamp(0, w as i64 - 1) as usize;
        let y0 = (((b[1] - b[3] / 2.0) * h as f32) as i64).clamp(0, h as i64 - 1) as usize;
        let y1 = (((b[1] + b[3] / 2.0) * h as f32) as i64).clamp(0, h as i64 - 1) as usize;
        let red = image::Rgb([255u8, 32, 32]);
        for x in x0..=x1 {
            img.put_pixel(x as u32, y0 as u32, red);
            img.put_pixel(x as u32, y1 as u32, red);
        }
        for y in y0..=y1 {
            img.put_pixel(x0 as u32, y as u32, red);
            img.put_pixel(x1 as u32, y as u32, red);
        }
    }
    let out = dir.join(split);
    std::fs::create_dir_all(&out)?;
    img.save(out.join(format!("{image_id}.png")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cat(name: &str, rank: usize) -> CategorySpec {
        CategorySpec {
            name: name.into(),
            shape: crate::data::shapes::ShapeKind::Square,
            color: 0,
            frequency_rank: rank,
            held_out: false,
        }
    }

    fn det(image: usize, category: usize, score: f32, b: [f32; 4]) -> EvalDet {
        EvalDet {
            image,
            category,
            score,
            box_cxcywh: b,
            mask: None,
            keypoints: None,
        }
    }

    fn gt(image: usize, category: usize, b: [f32; 4]) -> EvalGt {
        EvalGt {
            image,
            category,
            box_cxcywh: b,
            mask: None,
            keypoints: None,
            area: b[2] * b[3],
        }
    }

    #[test]
    fn perfect_detections_score_one_and_none_score_zero() {
        let cats = vec![cat("a", 0), cat("b", 1)];
        let g = vec![
            gt(0, 0, [0.3, 0.3, 0.2, 0.2]),
            gt(0, 1, [0.7, 0.7, 0.2, 0.2]),
            gt(1, 0, [0.5, 0.5, 0.4, 0.4]),
        ];
        let d: Vec<EvalDet> = g
            .iter()
            .map(|x| det(x.image, x.category, 1.0, x.box_cxcywh))
            .collect();
        let r = average_precision(&d, &g, ApMode::Box, &coco_thresholds(), &cats).unwrap();
        assert!((r.mean_ap - 1.0).abs() < 1e-12, "{}", r.mean_ap);
        assert!((r.ap50 - 1.0).abs() < 1e-12);

        let r0 = average_precision(&[], &g, ApMode::Box, &coco_thresholds(), &cats).unwrap();
        assert_eq!(r0.mean_ap, 0.0);
    }

    #[test]
    fn hand_built_pr_staircase_matches_to_1e9() {
        // two gt, three detections; the second-ranked one is a false positive
        let cats = vec![cat("a", 0)];
        let g = vec![gt(0, 0, [0.25, 0.25, 0.2, 0.2]), gt(0, 0, [0.75, 0.75, 0.2, 0.2])];
        let d = vec![
            det(0, 0, 0.9, [0.25, 0.25, 0.2, 0.2]), // TP
            det(0, 0, 0.8, [0.5, 0.5, 0.05, 0.05]), // FP (overlaps nothing)
            det(0, 0, 0.7, [0.75, 0.75, 0.2, 0.2]), // TP
        ];
        let r = average_precision(&d, &g, ApMode::Box, &[0.5], &cats).unwrap();
        // PR points: (0.5, 1.0), (0.5, 0.5), (1.0, 2/3)
        // interpolated: r<=0.5 -> 1.0 (51 samples), r>0.5 -> 2/3 (50 samples)
        let oracle = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        let got = r.per_category["a"][0];
        assert!((got - oracle).abs() < 1e-9, "got {got}, want {oracle}");
    }

    #[test]
    fn empty_gt_category_is_skipped_with_a_note() {
        let cats = vec![cat("seen", 0), cat("unseen", 1)];
        let g = vec![gt(0, 0, [0.5, 0.5, 0.2, 0.2])];
        let d = vec![det(0, 0, 1.0, [0.5, 0.5, 0.2, 0.2])];
        let r = average_precision(&d, &g, ApMode::Box, &[0.5], &cats).unwrap();
        assert!(r.per_category.contains_key("seen"));
        assert!(!r.per_category.contains_key("unseen"));
        assert_eq!(r.notes.len(), 1);
        assert!(r.notes[0].contains("unseen"));
    }

    #[test]
    fn ap_is_invariant_to_order_preserving_score_transforms() {
        let cats = vec![cat("a", 0)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Vec::new();
        let mut d = Vec::new();
        for img in 0..4 {
            for k in 0..3 {
                let b = [
                    0.2 + 0.3 * k as f32,
                    0.2 + 0.2 * img as f32,
                    0.15,
                    0.15,
                ];
                g.push(gt(img, 0, b));
                // jittered detection, random score
                let jit = [
                    b[0] + rng.random_range(-0.05..0.05),
                    b[1] + rng.random_range(-0.05..0.05),
                    b[2],
                    b[3],
                ];
                d.push(det(img, 0, rng.random_range(0.1..0.9), jit));
            }
            // one stray FP per image
            d.push(det(img, 0, rng.random_range(0.1..0.9), [0.9, 0.9, 0.1, 0.1]));
        }
        let r1 = average_precision(&d, &g, ApMode::Box, &coco_thresholds(), &cats).unwrap();
        let mut d2 = d.clone();
        for x in d2.iter_mut() {
            x.score = x.score.exp() * 3.0 + 1.0; // strictly monotone
        }
        let r2 = average_precision(&d2, &g, ApMode::Box, &coco_thresholds(), &cats).unwrap();
        assert_eq!(r1.mean_ap.to_bits(), r2.mean_ap.to_bits());
    }

    #[test]
    fn adding_a_correct_detection_never_decreases_ap() {
        let cats = vec![cat("a", 0)];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let mut g = Vec::new();
            let mut d = Vec::new();
            let n = rng.random_range(2..5usize);
            for k in 0..n {
                let b = [0.15 + 0.2 * k as f32, 0.5, 0.12, 0.12];
                g.push(gt(0, 0, b));
                if rng.random_range(0.0..1.0) < 0.6 {
                    d.push(det(0, 0, rng.random_range(0.2..0.8), b));
                } else {
                    // miss: detection far away counts as FP
                    d.push(det(0, 0, rng.random_range(0.2..0.8), [0.9, 0.1, 0.05, 0.05]));
                }
            }
            let before = average_precision(&d, &g, ApMode::Box, &[0.5], &cats).unwrap();
            // find an unmatched gt (one whose box no detection sits on)
            let unmatched = g.iter().find(|x| {
                !d.iter().any(|y| box_iou(y.box_cxcywh, x.box_cxcywh) > 0.5)
            });
            if let Some(target) = unmatched {
                let mut d2 = d.clone();
                d2.push(det(0, 0, 0.99, target.box_cxcywh)); // above all others
                let after = average_precision(&d2, &g, ApMode::Box, &[0.5], &cats).unwrap();
                assert!(
                    after.mean_ap >= before.mean_ap - 1e-12,
                    "AP dropped from {} to {}",
                    before.mean_ap,
                    after.mean_ap
                );
            }
        }
    }

    #[test]
    fn mask_mode_equals_pixel_count_oracle_exactly() {
        let cats = vec![cat("a", 0)];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let (h, w) = (24usize, 24usize);
            let mut gm = Array2::<bool>::from_elem((h, w), false);
            let mut pm = Array2::<bool>::from_elem((h, w), false);
            for y in 0..h {
                for x in 0..w {
                    gm[[y, x]] = rng.random_range(0.0..1.0) < 0.3;
                    pm[[y, x]] = rng.random_range(0.0..1.0) < 0.3;
                }
            }
            // oracle by counting pixels
            let mut inter = 0usize;
            let mut union = 0usize;
            for (a, b) in gm.iter().zip(pm.iter()) {
                inter += (*a && *b) as usize;
                union += (*a || *b) as usize;
            }
            let oracle = inter as f64 / union.max(1) as f64;
            let got = mask_iou(&pm, &gm);
            assert_eq!(got.to_bits(), oracle.to_bits());

            // and through the AP machinery at a threshold the pair straddles
            let mut g0 = gt(0, 0, [0.5, 0.5, 0.5, 0.5]);
            g0.mask = Some(gm);
            let mut d0 = det(0, 0, 1.0, [0.5, 0.5, 0.5, 0.5]);
            d0.mask = Some(pm);
            let r = average_precision(&[d0], &[g0], ApMode::Mask, &[oracle as f32 - 1e-3], &cats)
                .unwrap();
            let expect = if oracle >= oracle - 1e-3 as f64 { 1.0 } else { 0.0 };
            assert_eq!(r.per_category["a"][0], expect);
        }
    }

    #[test]
    fn rare_bucket_is_bottom_tercile_by_frequency_rank() {
        let cats = vec![cat("common", 0), cat("mid", 1), cat("rare", 2)];
        let g = vec![
            gt(0, 0, [0.2, 0.2, 0.2, 0.2]),
            gt(0, 1, [0.5, 0.5, 0.2, 0.2]),
            gt(0, 2, [0.8, 0.8, 0.15, 0.15]),
        ];
        // perfect on common+mid, nothing on rare
        let d = vec![
            det(0, 0, 1.0, [0.2, 0.2, 0.2, 0.2]),
            det(0, 1, 1.0, [0.5, 0.5, 0.2, 0.2]),
        ];
        let r = average_precision(&d, &g, ApMode::Box, &[0.5], &cats).unwrap();
        assert_eq!(r.rare_ap, Some(0.0));
        assert!((r.mean_ap - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn counting_mae_fixture() {
        assert_eq!(counting_mae(&[1, 2], &[1, 2]).unwrap(), 0.0);
        assert_eq!(counting_mae(&[2, 3], &[1, 2]).unwrap(), 1.0);
        let got = counting_mae(&[3, 7, 0], &[5, 7, 2]).unwrap();
        assert!((got - 4.0 / 3.0).abs() < 1e-6);
        assert!(counting_mae(&[], &[]).is_err());
        assert!(counting_mae(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn upsampled_mask_binarization_is_sane() {
        // constant-positive logits upsample to all-true
        let pos = Array2::<f32>::from_elem((8, 8), 2.0);
        let up = mask_to_image(&pos, 32, 32);
        assert!(up.iter().all(|&v| v));
        // half-plane stays a half-plane (boundary within one cell)
        let mut half = Array2::<f32>::from_elem((8, 8), -1.0);
        for y in 0..4 {
            for x in 0..8 {
                half[[y, x]] = 1.0;
            }
        }
        let up = mask_to_image(&half, 32, 32);
        assert!(up[[0, 0]] && up[[12, 16]]);
        assert!(!up[[31, 0]] && !up[[20, 16]]);
    }

    #[test]
    fn whole_split_evaluation_emits_a_stable_report() {
        let mcfg = crate::config::ModelConfig {
            d: 32,
            ffn_dim: 48,
            enc_layers: 1,
            dec_layers: 2,
            n_queries: 16,
            text_layers: 1,
            d_lm: 24,
            lm_layers: 1,
            keypoint_layers: 1,
            ..Default::default()
        };
        let model = Model::new(21, &mcfg).unwrap();
        let dcfg = crate::data::DataConfig {
            image_size: 64,
            max_objects: 2,
            train_scenes: 2,
            val_scenes: 2,
            ..Default::default()
        };
        let splits = crate::data::make_splits(&dcfg).unwrap();
        let opts = EvalOptions {
            tasks: vec![
                EvalTask::Text,
                EvalTask::Masks,
                EvalTask::Counting,
                EvalTask::PromptFree,
                EvalTask::Keypoints,
                EvalTask::Recognize,
            ],
            max_images: Some(2),
            score_threshold: 0.3,
            overlay_dir: None,
        };
        let r1 = evaluate_split(&model, &splits.val_held_in, &opts).unwrap();
        assert_eq!(r1.schema_version, REPORT_SCHEMA_VERSION);
        assert!(r1.box_ap_held_in.is_some());
        assert!(r1.counting.is_some());
        assert!(r1.prompt_free_recall.is_some());
        assert!(r1.keypoint_ap.is_some());
        assert!(r1.recognize_exact.is_some());
        let r2 = evaluate_split(&model, &splits.val_held_in, &opts).unwrap();
        assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap(), "reports must be byte-stable");

        // held-out split reports held-out AP separately
        let r3 = evaluate_split(&model, &splits.val_held_out, &opts).unwrap();
        assert!(r3.box_ap_held_out.is_some());
    }

    #[test]
    fn overlays_are_written_per_image() {
        let mcfg = crate::config::ModelConfig {
            d: 32,
            ffn_dim: 48,
            enc_layers: 1,
            dec_layers: 1,
            n_queries: 8,
            text_layers: 1,
            d_lm: 24,
            lm_layers: 1,
            keypoint_layers: 1,
            ..Default::default()
        };
        let model = Model::new(2, &mcfg).unwrap();
        let dcfg = crate::data::DataConfig {
            image_size: 64,
            max_objects: 2,
            train_scenes: 2,
            val_scenes: 1,
            ..Default::default()
        };
        let splits = crate::data::make_splits(&dcfg).unwrap();
        let dir = std::env::temp_dir().join(format!("dinoy-eval-test-{}", std::process::id()));
        let opts = EvalOptions {
            tasks: vec![EvalTask::Text],
            max_images: Some(1),
            score_threshold: 0.0,
            overlay_dir: Some(dir.clone()),
        };
        evaluate_split(&model, &splits.val_held_in, &opts).unwrap();
        assert!(dir.join("val_held_in").join("0.png").exists());
        std::fs::remove_dir_all(&dir).ok();
    }
}
