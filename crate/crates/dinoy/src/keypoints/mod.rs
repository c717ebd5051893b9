//! Keypoint decoding by query expansion, plus the OKS / PCK measurement
//! kernels used to score it.
//!
//! A detection's content vector is expanded into one query per keypoint by
//! adding a learned per-index embedding, and the expanded set runs through a
//! small deformable decoder whose reference points start at the detection's
//! box center.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::Deserialize;

use crate::config::ModelConfig;
use crate::data::shapes::ALL_SHAPES;
use crate::error::{Error, Result};
use crate::fusion::encoder::FusedMemory;
use crate::fusion::inverse_sigmoid;
use crate::nn::{Ctx, Embedding, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::prompts::sincos_embed;
use crate::tensor::Tensor;

pub const KP_L1_WEIGHT: f32 = 5.0;
pub const KP_VIS_WEIGHT: f32 = 1.0;
pub const KP_OKS_WEIGHT: f32 = 2.0;

/// A named keypoint layout: how many points and the per-point OKS falloff
/// constants (larger = more forgiving).
#[derive(Debug, Clone)]
pub struct KeypointSpec {
    pub name: String,
    pub k: usize,
    pub oks_constants: Vec<f32>,
}

impl KeypointSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config(format!(
                "keypoint spec {:?} has zero keypoints",
                self.name
            )));
        }
        if self.oks_constants.len() != self.k {
            return Err(Error::Config(format!(
                "keypoint spec {:?}: {} OKS constants for {} keypoints",
                self.name,
                self.oks_constants.len(),
                self.k
            )));
        }
        if self.oks_constants.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::Config(format!(
                "keypoint spec {:?} has a non-positive OKS constant",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct SigmaEntry {
    sigmas: Vec<f32>,
}

/// Registered keypoint layouts, looked up by name or by scanning a phrase.
pub struct KeypointRegistry {
    specs: Vec<KeypointSpec>,
}

impl KeypointRegistry {
    /// The standard registry: "person" (17 points) and "hand" (21 points)
    /// with their published per-keypoint constants, plus one layout per
    /// synthetic shape with a uniform falloff of 0.1.
    pub fn standard() -> Result<KeypointRegistry> {
        let table: BTreeMap<String, SigmaEntry> =
            serde_json::from_str(include_str!("oks_sigmas.json"))?;
        let mut specs = Vec::new();
        for (name, entry) in table {
            specs.push(KeypointSpec {
                name,
                k: entry.sigmas.len(),
                // the published tables list per-keypoint sigmas; the OKS
                // exponent uses k_i = 2*sigma_i
                oks_constants: entry.sigmas.iter().map(|s| 2.0 * s).collect(),
            });
        }
        for shape in ALL_SHAPES {
            let k = shape.keypoint_count();
            specs.push(KeypointSpec {
                name: shape.word().to_string(),
                k,
                oks_constants: vec![0.1; k],
            });
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(KeypointRegistry { specs })
    }

    pub fn get(&self, name: &str) -> Result<&KeypointSpec> {
        self.specs.iter().find(|s| s.name == name).ok_or_else(|| {
            Error::Config(format!(
                "no keypoint layout named {:?}; registered: {:?}",
                name,
                self.specs.iter().map(|s| s.name.as_str()).collect::<Vec<_>>()
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    /// Route a detection to a layout by scanning its phrase for a registered
    /// name ("red small star" -> the star layout). Returns `None` when no
    /// word matches, in which case the detection simply gets no keypoints.
    pub fn spec_for_phrase(&self, phrase: &str) -> Option<&KeypointSpec> {
        phrase
            .split_whitespace()
            .find_map(|w| self.specs.iter().find(|s| s.name == w))
    }
}

/// Ground-truth or predicted keypoints for one object: `[K, 2]` normalized
/// coordinates plus a per-point visibility in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Array2<f32>,
    pub visibility: Vec<f32>,
}

impl KeypointSet {
    pub fn new(points: Array2<f32>, visibility: Vec<f32>) -> Result<KeypointSet> {
        let set = KeypointSet { points, visibility };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.ncols() != 2 {
            return Err(Error::Shape {
                op: "keypoint_set",
                expected: "[K, 2] points".into(),
                got: format!("{:?}", self.points.shape()),
            });
        }
        if self.visibility.len() != self.points.nrows() {
            return Err(Error::Shape {
                op: "keypoint_set",
                expected: format!("{} visibility entries", self.points.nrows()),
                got: format!("{}", self.visibility.len()),
            });
        }
        for &v in &self.points {
            if !v.is_finite() {
                return Err(Error::Data("non-finite keypoint coordinate".into()));
            }
        }
        if self.visibility.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data("keypoint visibility outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.points.nrows()
    }

    /// Serialized wire form: `[x1, y1, v1, x2, y2, v2, ...]`.
    pub fn flat_triplets(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.k() * 3);
        for i in 0..self.k() {
            out.push(self.points[[i, 0]]);
            out.push(self.points[[i, 1]]);
            out.push(self.visibility[i]);
        }
        out
    }

    pub fn from_flat(flat: &[f32]) -> Result<KeypointSet> {
        if flat.len() % 3 != 0 {
            return Err(Error::Data(format!(
                "keypoint triplet stream of length {} is not a multiple of 3",
                flat.len()
            )));
        }
        let k = flat.len() / 3;
        let mut points = Array2::<f32>::zeros((k, 2));
        let mut visibility = Vec::with_capacity(k);
        for i in 0..k {
            points[[i, 0]] = flat[3 * i];
            points[[i, 1]] = flat[3 * i + 1];
            visibility.push(flat[3 * i + 2]);
        }
        KeypointSet::new(points, visibility)
    }
}

fn visible_indices(gt: &KeypointSet) -> Vec<usize> {
    (0..gt.k()).filter(|&i| gt.visibility[i] > 0.5).collect()
}

/// Object keypoint similarity between a prediction and ground truth, averaged
/// over the ground truth's visible points:
/// `mean_i exp(-d_i^2 / (2 * area * k_i^2))`.
pub fn oks(pred: &KeypointSet, gt: &KeypointSet, gt_area: f32, spec: &KeypointSpec) -> Result<f64> {
    if pred.k() != spec.k || gt.k() != spec.k {
        return Err(Error::Shape {
            op: "oks",
            expected: format!("{} keypoints", spec.k),
            got: format!("pred {}, gt {}", pred.k(), gt.k()),
        });
    }
    if !(gt_area > 0.0) || !gt_area.is_finite() {
        return Err(Error::Eval(format!(
            "OKS needs a positive object area, got {gt_area}"
        )));
    }
    let vis = visible_indices(gt);
    if vis.is_empty() {
        return Err(Error::Eval("OKS over an object with no visible keypoints".into()));
    }
    let s2 = gt_area as f64; // s = sqrt(area), so s^2 is the area itself
    let mut total = 0.0f64;
    for &i in &vis {
        let dx = pred.points[[i, 0]] as f64 - gt.points[[i, 0]] as f64;
        let dy = pred.points[[i, 1]] as f64 - gt.points[[i, 1]] as f64;
        let k = spec.oks_constants[i] as f64;
        total += (-(dx * dx + dy * dy) / (2.0 * s2 * k * k)).exp();
    }
    Ok(total / vis.len() as f64)
}

/// Fraction of visible ground-truth keypoints whose prediction lands strictly
/// within `threshold * max(box_w, box_h)`.
pub fn pck(
    pred: &KeypointSet,
    gt: &KeypointSet,
    bbox: [f32; 4],
    threshold: f32,
) -> Result<f32> {
    if pred.k() != gt.k() {
        return Err(Error::Shape {
            op: "pck",
            expected: format!("{} keypoints", gt.k()),
            got: format!("{}", pred.k()),
        });
    }
    if !(bbox[2] > 0.0) || !(bbox[3] > 0.0) {
        return Err(Error::DegenerateBox(bbox[0], bbox[1], bbox[2], bbox[3]));
    }
    let vis = visible_indices(gt);
    if vis.is_empty() {
        return Err(Error::Eval("PCK over an object with no visible keypoints".into()));
    }
    let radius = threshold * bbox[2].max(bbox[3]);
    let correct = vis
        .iter()
        .filter(|&&i| {
            let dx = pred.points[[i, 0]] - gt.points[[i, 0]];
            let dy = pred.points[[i, 1]] - gt.points[[i, 1]];
            (dx * dx + dy * dy).sqrt() < radius
        })
        .count();
    Ok(correct as f32 / vis.len() as f32)
}

struct KpLayer {
    self_attn: MultiHeadAttention,
    norm_sa: LayerNorm,
    cross: crate::fusion::deform::MsDeformAttn,
    norm_ca: LayerNorm,
    ffn: Mlp,
    norm_f: LayerNorm,
    delta: Mlp,
}

/// Per-detection keypoint decoder. One learned embedding table per registered
/// layout expands a detection's content vector into `K` queries; the decoder
/// layers themselves are shared across layouts.
pub struct KeypointHead {
    embeddings: BTreeMap<String, Embedding>,
    layers: Vec<KpLayer>,
    query_pos: Linear,
    vis: Linear,
    d: usize,
}

pub struct KeypointPrediction<'t> {
    /// `[K, 2]` normalized coordinates after each refinement layer
    pub layer_points: Vec<Tensor<'t>>,
    /// `[K, 1]` visibility logits from the final layer's content
    pub vis_logits: Tensor<'t>,
}

impl<'t> KeypointPrediction<'t> {
    pub fn points(&self) -> Tensor<'t> {
        *self.layer_points.last().expect("at least one layer")
    }

    pub fn to_set(&self) -> KeypointSet {
        let pts = self.points().to_arr();
        let k = pts.shape()[0];
        let mut points = Array2::<f32>::zeros((k, 2));
        let logits = self.vis_logits.to_arr();
        let mut visibility = Vec::with_capacity(k);
        for i in 0..k {
            points[[i, 0]] = pts[[i, 0]];
            points[[i, 1]] = pts[[i, 1]];
            let x = logits[[i, 0]];
            visibility.push(if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            });
        }
        KeypointSet { points, visibility }
    }
}

impl KeypointHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, registry: &KeypointRegistry) -> Self {
        let d = cfg.d;
        let levels = crate::fusion::MEMORY_STRIDES.len();
        let mut embeddings = BTreeMap::new();
        for spec in &registry.specs {
            embeddings.insert(
                spec.name.clone(),
                Embedding::new(store, &format!("keypoint.emb.{}", spec.name), spec.k, d),
            );
        }
        let layers = (0..cfg.keypoint_layers)
            .map(|i| {
                let n = format!("keypoint.layer{i}");
                KpLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{n}.sa"), d, cfg.heads),
                    norm_sa: LayerNorm::new(store, &format!("{n}.norm_sa"), d),
                    cross: crate::fusion::deform::MsDeformAttn::new(
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
                    // zero-init: layer-0 keypoints sit exactly at the box
                    // center until training moves them
                    delta: Mlp::new(store, &format!("{n}.delta"), &[d, d, 2], true),
                }
            })
            .collect();
        KeypointHead {
            embeddings,
            layers,
            query_pos: Linear::new(store, "keypoint.query_pos", d, d),
            vis: Linear::new(store, "keypoint.vis", d, 1),
            d,
        }
    }

    /// Expand one detection's `[1, d]` content vector into `[K, d]` keypoint
    /// queries by adding the layout's per-index embeddings. Identical content
    /// expands identically; the embeddings keep the K queries distinct.
    pub fn expand_queries<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        content: Tensor<'t>,
        spec: &KeypointSpec,
    ) -> Result<Tensor<'t>> {
        let dims = content.dims();
        if dims != [1, self.d] {
            return Err(Error::Shape {
                op: "expand_queries",
                expected: format!("[1, {}]", self.d),
                got: format!("{dims:?}"),
            });
        }
        let emb = self.embeddings.get(&spec.name).ok_or_else(|| {
            Error::Config(format!("no embedding table for keypoint layout {:?}", spec.name))
        })?;
        let ids: Vec<usize> = (0..spec.k).collect();
        Ok(content.select_rows(&vec![0; spec.k]).add(&emb.fwd(ctx, &ids)))
    }

    /// Decode keypoints for one detection. Reference points start at the
    /// detection box center and each layer refines them in inverse-sigmoid
    /// space.
    pub fn fwd<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        content: Tensor<'t>,
        det_box: [f32; 4],
        spec: &KeypointSpec,
        memory: &FusedMemory<'t>,
    ) -> Result<KeypointPrediction<'t>> {
        let maps = memory.value_maps();
        let k = spec.k;
        let mut x = self.expand_queries(ctx, content, spec)?;

        let cx = det_box[0].clamp(1e-4, 1.0 - 1e-4);
        let cy = det_box[1].clamp(1e-4, 1.0 - 1e-4);
        let mut center = Array2::<f32>::zeros((k, 2));
        for i in 0..k {
            center[[i, 0]] = cx;
            center[[i, 1]] = cy;
        }
        let mut coords = ctx.tape.constant(center.into_dyn());

        let mut layer_points = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            // positional features from the current points (values only)
            let cur = coords.to_arr();
            let mut pos = Array2::<f32>::zeros((k, self.d));
            let mut refs = Array2::<f32>::zeros((k, 2));
            for i in 0..k {
                let p = [cur[[i, 0]].clamp(0.0, 1.0), cur[[i, 1]].clamp(0.0, 1.0)];
                let v = sincos_embed(&p, self.d / 2).expect("clamped coords");
                pos.row_mut(i).iter_mut().zip(v).for_each(|(o, s)| *o = s);
                refs[[i, 0]] = p[0];
                refs[[i, 1]] = p[1];
            }
            let qp = self.query_pos.fwd(ctx, ctx.tape.constant(pos.into_dyn()));

            let xq = x.add(&qp);
            let sa = layer.self_attn.fwd(ctx, xq, xq, None);
            x = layer.norm_sa.fwd(ctx, x.add(&sa));
            let ca = layer.cross.fwd(ctx, x.add(&qp), &refs, &maps);
            x = layer.norm_ca.fwd(ctx, x.add(&ca));
            let f = layer.ffn.fwd(ctx, x);
            x = layer.norm_f.fwd(ctx, x.add(&f));

            coords = inverse_sigmoid(coords)
                .add(&layer.delta.fwd(ctx, x))
                .sigmoid();
            layer_points.push(coords);
        }

        Ok(KeypointPrediction {
            layer_points,
            vis_logits: self.vis.fwd(ctx, x),
        })
    }
}

/// Training loss for one object's keypoints: weighted L1 on visible
/// coordinates, binary cross-entropy on visibility, and `1 - OKS`.
pub fn keypoint_loss<'t>(
    points: Tensor<'t>,
    vis_logits: Tensor<'t>,
    gt: &KeypointSet,
    gt_area: f32,
    spec: &KeypointSpec,
) -> Result<Tensor<'t>> {
    let k = spec.k;
    gt.validate()?;
    if points.dims() != [k, 2] || gt.k() != k {
        return Err(Error::Shape {
            op: "keypoint_loss",
            expected: format!("[{k}, 2] points"),
            got: format!("pred {:?}, gt {}", points.dims(), gt.k()),
        });
    }
    if !(gt_area > 0.0) || !gt_area.is_finite() {
        return Err(Error::Eval(format!(
            "keypoint loss needs a positive object area, got {gt_area}"
        )));
    }
    let vis = visible_indices(gt);
    if vis.is_empty() {
        return Err(Error::Eval(
            "keypoint loss over an object with no visible keypoints".into(),
        ));
    }
    let n_vis = vis.len() as f32;
    let tape = points.tape;

    let gt_pts = tape.constant(gt.points.clone().into_dyn());
    let mut mask = ndarray::Array1::<f32>::zeros(k);
    for &i in &vis {
        mask[i] = 1.0;
    }
    let mask = tape.constant(mask.into_dyn());

    let diff = points.sub(&gt_pts);
    let l1 = diff
        .abs()
        .sum_axis1()
        .mul(&mask)
        .sum_all()
        .scale(1.0 / (2.0 * n_vis));

    let x = vis_logits.reshape(&[k]);
    let t = tape.constant(ndarray::Array1::from(gt.visibility.clone()).into_dyn());
    let one_minus_t = t.neg().add_scalar(1.0);
    let bce = t
        .mul(&x.neg().softplus())
        .add(&one_minus_t.mul(&x.softplus()))
        .mean_all();

    let mut inv = ndarray::Array1::<f32>::zeros(k);
    for &i in &vis {
        let kc = spec.oks_constants[i];
        inv[i] = 1.0 / (2.0 * gt_area * kc * kc);
    }
    let inv = tape.constant(inv.into_dyn());
    let sim = diff.square().sum_axis1().mul(&inv).neg().exp();
    let oks_t = sim.mul(&mask).sum_all().scale(1.0 / n_vis);
    let oks_loss = oks_t.neg().add_scalar(1.0);

    Ok(l1
        .scale(KP_L1_WEIGHT)
        .add(&bce.scale(KP_VIS_WEIGHT))
        .add(&oks_loss.scale(KP_OKS_WEIGHT)))
}
