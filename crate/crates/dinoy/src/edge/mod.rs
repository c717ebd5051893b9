//! Compression path: distilling the trained model into a smaller student,
//! a normalized half-precision matmul kernel, and a persistent cache of
//! precomputed text-prompt embeddings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use half::f16;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::container::Container;
use crate::data::{make_splits, DataConfig, SplitPlan};
use crate::error::{Error, Result};
use crate::heads::{contrastive_logits, hungarian_match, MatchWeights};
use crate::model::{text_targets, Model, Prompting};
use crate::nn::{warmup_cosine, AdamW, AdamWConfig, Ctx, GradBag, Linear};
use crate::prompts::{PromptEmbedding, PromptSource, TextPrompt};
use crate::tensor::{Arr, Tape, Tensor};
use crate::train::{StepMetrics, TrainReport};

/// A thinner, shallower copy of the detector plus a feature-alignment
/// adapter back into the teacher's width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudentConfig {
    pub model: ModelConfig,
}

impl StudentConfig {
    /// Halve the width and trim a layer from each stack.
    pub fn derive(teacher: &ModelConfig) -> StudentConfig {
        let mut m = teacher.clone();
        m.d = (teacher.d / 2).max(16);
        m.ffn_dim = (teacher.ffn_dim / 2).max(16);
        m.enc_layers = teacher.enc_layers.saturating_sub(1).max(1);
        m.dec_layers = teacher.dec_layers.saturating_sub(1).max(1);
        StudentConfig { model: m }
    }

    pub fn validate(&self, teacher: &ModelConfig) -> Result<()> {
        if self.model.d >= teacher.d {
            return Err(Error::Config(format!(
                "student width {} must be smaller than teacher width {}",
                self.model.d, teacher.d
            )));
        }
        if self.model.enc_layers > teacher.enc_layers || self.model.dec_layers > teacher.dec_layers
        {
            return Err(Error::Config(
                "student may not be deeper than the teacher".into(),
            ));
        }
        Ok(())
    }
}

pub struct Student {
    pub model: Model,
    pub adapter: Linear,
}

pub fn param_count(model: &Model) -> usize {
    model.store.iter().map(|(_, a)| a.len()).sum()
}

impl Student {
    pub fn new(seed: u64, cfg: &StudentConfig, teacher: &Model) -> Result<Student> {
        cfg.validate(&teacher.cfg)?;
        let mut model = Model::new(seed, &cfg.model)?;
        let adapter = Linear::new(
            &mut model.store,
            "distill.adapter",
            cfg.model.d,
            teacher.cfg.d,
        );
        let student = Student { model, adapter };
        let (s, t) = (param_count(&student.model), param_count(teacher));
        if s >= t {
            return Err(Error::Config(format!(
                "student has {s} parameters, teacher only {t}; shrink the student"
            )));
        }
        Ok(student)
    }
}

/// MSE between adapter-lifted student encoder memory and the teacher's,
/// averaged over tokens and dims.
pub fn feature_distill_loss<'t>(
    ctx: &Ctx<'t, '_>,
    adapter: &Linear,
    student_feats: Tensor<'t>,
    teacher_feats: Tensor<'t>,
) -> Result<Tensor<'t>> {
    let lifted = adapter.fwd(ctx, student_feats);
    let (ld, td) = (lifted.dims(), teacher_feats.dims());
    if ld != td {
        return Err(Error::Shape {
            op: "feature_distill_loss",
            expected: format!("{td:?} (teacher memory grid)"),
            got: format!("{ld:?}"),
        });
    }
    Ok(lifted.sub(&teacher_feats).square().mean_all())
}

/// MSE on raw query–phrase logits over Hungarian-matched pairs.
pub fn response_distill_loss<'t>(
    student_logits: Tensor<'t>,
    teacher_logits: Tensor<'t>,
) -> Result<Tensor<'t>> {
    if student_logits.dims() != teacher_logits.dims() {
        return Err(Error::Shape {
            op: "response_distill_loss",
            expected: format!("{:?}", teacher_logits.dims()),
            got: format!("{:?}", student_logits.dims()),
        });
    }
    Ok(student_logits.sub(&teacher_logits).square().mean_all())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup: usize,
    pub weight_decay: f32,
    pub clip_norm: f32,
    pub seed: u64,
    pub neg_phrases: usize,
    /// ground-truth detection loss weight; setting the two distillation
    /// weights to zero trains the same student from scratch
    pub detect_weight: f32,
    pub feature_weight: f32,
    pub response_weight: f32,
    pub data: DataConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 300,
            batch_size: 2,
            lr: 1e-3,
            warmup: 30,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            seed: 0,
            neg_phrases: 4,
            detect_weight: 1.0,
            feature_weight: 1.0,
            response_weight: 1.0,
            data: DataConfig::default(),
        }
    }
}

struct TeacherView {
    memory: Arr,
    /// `[G, P]` teacher logits rows ordered by ground-truth index
    matched_logits: Array2<f32>,
    matched_gt: Vec<usize>,
}

/// Run the frozen teacher on a scene and keep only what distillation needs.
fn teacher_view(
    teacher: &Model,
    sample: &crate::data::GroundingSample,
    phrases: &[String],
    gt_boxes: &Array2<f32>,
    gt_phrase: &[usize],
) -> Result<TeacherView> {
    let tape = Tape::new();
    let ctx = Ctx::with_trainable(&tape, &teacher.store, |_| false);
    let img = tape.constant(sample.image.clone());
    let bundle = teacher.forward(&ctx, img, &Prompting::Text(phrases.to_vec()))?;
    let memory = bundle.memory.tokens.to_arr();
    let last = bundle.steps.last().unwrap();
    let logits = contrastive_logits(last.content, bundle.phrase_embs).to_arr();
    let boxes = last.boxes.to_arr();
    let l2 = logits.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
    let b2 = boxes.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
    let m = hungarian_match(&b2, &l2, gt_boxes, gt_phrase, &MatchWeights::default())?;
    let mut pairs = m.pairs.clone();
    pairs.sort_by_key(|&(_, g)| g);
    let mut matched = Array2::<f32>::zeros((pairs.len(), l2.ncols()));
    let mut matched_gt = Vec::with_capacity(pairs.len());
    for (row, &(q, g)) in pairs.iter().enumerate() {
        for j in 0..l2.ncols() {
            matched[[row, j]] = l2[[q, j]];
        }
        matched_gt.push(g);
    }
    Ok(TeacherView {
        memory,
        matched_logits: matched,
        matched_gt,
    })
}

/// Feature- and response-distillation training of a student against a frozen
/// teacher, with the plain detection loss mixed in.
pub fn distill(student: &mut Student, teacher: &Model, dcfg: &DistillConfig) -> Result<TrainReport> {
    let splits = make_splits(&dcfg.data)?;
    let names: Vec<String> = dcfg.data.categories.iter().map(|c| c.name.clone()).collect();
    let mut opt = AdamW::new(AdamWConfig {
        lr: dcfg.lr,
        weight_decay: dcfg.weight_decay,
        clip_norm: dcfg.clip_norm,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(dcfg.seed);
    let mw = MatchWeights::default();
    let mut steps = Vec::with_capacity(dcfg.steps);

    for step in 0..dcfg.steps {
        let mut bag = GradBag::new();
        let (mut loss_s, mut feat_s, mut resp_s) = (0f32, 0f32, 0f32);
        for b in 0..dcfg.batch_size {
            let idx = (step * dcfg.batch_size + b) % splits.train.len();
            let sample = splits.train.scene(idx)?;
            let (phrases, targets) = text_targets(&sample, &names, dcfg.neg_phrases, &mut rng);

            let tape = Tape::new();
            let ctx = Ctx::with_trainable(&tape, &student.model.store, crate::model::is_trunk_param);
            let img = tape.constant(sample.image.clone());
            let bundle = student
                .model
                .forward(&ctx, img, &Prompting::Text(phrases.clone()))?;
            let sl = student.model.scene_loss(&ctx, &bundle, &targets, &mw, 0.0, 8, &mut rng)?;
            let mut total = sl.total.scale(dcfg.detect_weight);

            if dcfg.feature_weight > 0.0 || dcfg.response_weight > 0.0 {
                let tv = teacher_view(teacher, &sample, &phrases, &targets.boxes, &targets.phrase_of)?;
                if dcfg.feature_weight > 0.0 {
                    let t_mem = tape.constant(tv.memory.clone());
                    let f = feature_distill_loss(&ctx, &student.adapter, bundle.memory.tokens, t_mem)?;
                    feat_s += f.scalar();
                    total = total.add(&f.scale(dcfg.feature_weight));
                }
                if dcfg.response_weight > 0.0 && !tv.matched_gt.is_empty() {
                    let last = bundle.steps.last().unwrap();
                    let s_logits = contrastive_logits(last.content, bundle.phrase_embs);
                    let mut s_rows = vec![0usize; tv.matched_gt.len()];
                    let by_gt: std::collections::HashMap<usize, usize> =
                        sl.final_match.pairs.iter().map(|&(q, g)| (g, q)).collect();
                    for (row, &g) in tv.matched_gt.iter().enumerate() {
                        s_rows[row] = by_gt[&g];
                    }
                    let s_sel = s_logits.select_rows(&s_rows);
                    let t_sel = tape.constant(tv.matched_logits.clone().into_dyn());
                    let r = response_distill_loss(s_sel, t_sel)?;
                    resp_s += r.scalar();
                    total = total.add(&r.scale(dcfg.response_weight));
                }
            }

            loss_s += total.scalar();
            let mut grads = tape.backward(total);
            bag.add(ctx.collect_grads(&mut grads));
        }
        let inv = 1.0 / dcfg.batch_size as f32;
        bag.scale(inv);
        let sched = warmup_cosine(step, dcfg.steps, dcfg.warmup);
        let grad_norm = opt.step(&mut student.model.store, bag, sched);
        steps.push(StepMetrics {
            step,
            stage: "distill".into(),
            loss: loss_s * inv,
            cls: None,
            l1: None,
            giou: None,
            mask: None,
            feature: Some(feat_s * inv),
            response: Some(resp_s * inv),
            lr: dcfg.lr * sched,
            grad_norm,
        });
    }
    Ok(TrainReport {
        stage: "distill".into(),
        steps,
    })
}

/// Mean student–teacher logit MSE over matched pairs of the first `n` scenes
/// of a split.
pub fn val_logit_mse(
    student: &Student,
    teacher: &Model,
    split: &SplitPlan,
    n: usize,
    neg_phrases: usize,
) -> Result<f32> {
    let names: Vec<String> = split
        .config
        .categories
        .iter()
        .map(|c| c.name.clone())
        .collect();
    let mut sum = 0f64;
    let mut count = 0usize;
    for i in 0..n.min(split.len()) {
        let sample = split.scene(i)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
        let (phrases, targets) = text_targets(&sample, &names, neg_phrases, &mut rng);
        let tv = teacher_view(teacher, &sample, &phrases, &targets.boxes, &targets.phrase_of)?;
        if tv.matched_gt.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let ctx = Ctx::with_trainable(&tape, &student.model.store, |_| false);
        let img = tape.constant(sample.image.clone());
        let bundle = student
            .model
            .forward(&ctx, img, &Prompting::Text(phrases.clone()))?;
        let last = bundle.steps.last().unwrap();
        let s_logits = contrastive_logits(last.content, bundle.phrase_embs);
        let l2 = s_logits.to_arr().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = last.boxes.to_arr().into_dimensionality::<ndarray::Ix2>().unwrap();
        let m = hungarian_match(&b2, &l2, &targets.boxes, &targets.phrase_of, &MatchWeights::default())?;
        let by_gt: std::collections::HashMap<usize, usize> =
            m.pairs.iter().map(|&(q, g)| (g, q)).collect();
        for (row, &g) in tv.matched_gt.iter().enumerate() {
            let q = by_gt[&g];
            for j in 0..l2.ncols() {
                let d = (l2[[q, j]] - tv.matched_logits[[row, j]]) as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Eval("no matched pairs on the split".into()));
    }
    Ok((sum / count as f64) as f32)
}

// --- half-precision kernel ---------------------------------------------------

/// Length of one fused multiply-accumulate group; the accumulator is rounded
/// back to half precision after each group.
const FMA_GROUP: usize = 8;

fn f16_matmul_core(a: &Array2<f16>, b: &Array2<f16>) -> Array2<f32> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    let mut c = Array2::<f32>::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut acc = f16::from_f32(0.0);
            let mut k0 = 0;
            while k0 < k {
                let hi = (k0 + FMA_GROUP).min(k);
                let mut partial = f32::from(acc);
                for kk in k0..hi {
                    partial += f32::from(a[[i, kk]]) * f32::from(b[[kk, j]]);
                }
                acc = f16::from_f32(partial);
                k0 = hi;
            }
            c[[i, j]] = f32::from(acc);
        }
    }
    c
}

fn to_f16(x: &Array2<f32>) -> Array2<f16> {
    x.mapv(f16::from_f32)
}

/// Emulated half-precision matmul without any scaling; large inputs overflow.
pub fn naive_fp16_matmul(a: &Array2<f32>, b: &Array2<f32>) -> Array2<f32> {
    f16_matmul_core(&to_f16(a), &to_f16(b))
}

/// Half-precision matmul with per-row/per-column max-abs normalization, so
/// every operand enters the half-precision core in `[-1, 1]` and the result
/// is rescaled in full precision.
pub fn normalized_fp16_matmul(a: &Array2<f32>, b: &Array2<f32>) -> Result<Array2<f32>> {
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite input to normalized_fp16_matmul".into()));
    }
    let (m, k) = a.dim();
    let (kb, n) = b.dim();
    if k != kb {
        return Err(Error::Shape {
            op: "normalized_fp16_matmul",
            expected: format!("inner dims to agree ({k})"),
            got: format!("{kb}"),
        });
    }
    let mut sa = vec![1f32; m];
    for i in 0..m {
        let mx = (0..k).map(|kk| a[[i, kk]].abs()).fold(0f32, f32::max);
        if mx > 0.0 {
            sa[i] = mx;
        }
    }
    let mut sb = vec![1f32; n];
    for j in 0..n {
        let mx = (0..kb).map(|kk| b[[kk, j]].abs()).fold(0f32, f32::max);
        if mx > 0.0 {
            sb[j] = mx;
        }
    }
    let mut ah = Array2::<f16>::from_elem((m, k), f16::from_f32(0.0));
    for i in 0..m {
        for kk in 0..k {
            ah[[i, kk]] = f16::from_f32(a[[i, kk]] / sa[i]);
        }
    }
    let mut bh = Array2::<f16>::from_elem((kb, n), f16::from_f32(0.0));
    for kk in 0..kb {
        for j in 0..n {
            bh[[kk, j]] = f16::from_f32(b[[kk, j]] / sb[j]);
        }
    }
    let mut c = f16_matmul_core(&ah, &bh);
    for i in 0..m {
        for j in 0..n {
            c[[i, j]] *= sa[i] * sb[j];
        }
    }
    Ok(c)
}

// --- prompt-embedding cache ----------------------------------------------------

pub const CACHE_FORMAT_VERSION: u32 = 1;
pub const CACHE_DIR_ENV: &str = "DINOY_CACHE_DIR";

/// Cache location: `$DINOY_CACHE_DIR` or `.dinoy-cache` in the working dir.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".dinoy-cache"))
}

fn sha256_hex(data: &[u8]) -> String {
    let d = Sha256::digest(data);
    let mut s = String::with_capacity(64);
    for b in d {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CacheMeta {
    format_version: u32,
    model_digest: String,
    created_unix: u64,
    /// prompt hash → original text (for listing and collision checks)
    texts: BTreeMap<String, String>,
    valids: BTreeMap<String, Vec<bool>>,
}

pub struct EmbeddingCache {
    meta: CacheMeta,
    embeddings: BTreeMap<String, Arr>,
}

pub enum CacheLookup<'c> {
    Hit(&'c Arr, &'c [bool]),
    /// cached under a different model digest
    Stale,
    Miss,
}

impl EmbeddingCache {
    /// Encode every prompt once with the text encoder and freeze the results
    /// against the model's current parameter digest.
    pub fn build(model: &Model, prompts: &[String]) -> Result<EmbeddingCache> {
        let mut cache = EmbeddingCache {
            meta: CacheMeta {
                format_version: CACHE_FORMAT_VERSION,
                model_digest: model.store.digest(|_| true),
                created_unix: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                texts: BTreeMap::new(),
                valids: BTreeMap::new(),
            },
            embeddings: BTreeMap::new(),
        };
        for text in prompts {
            let (tokens, valid) = encode_text_once(model, text)?;
            let key = sha256_hex(text.as_bytes());
            cache.meta.texts.insert(key.clone(), text.clone());
            cache.meta.valids.insert(key.clone(), valid);
            cache.embeddings.insert(key, tokens);
        }
        Ok(cache)
    }

    pub fn model_digest(&self) -> &str {
        &self.meta.model_digest
    }

    pub fn created_unix(&self) -> u64 {
        self.meta.created_unix
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn lookup(&self, model_digest: &str, text: &str) -> CacheLookup<'_> {
        if model_digest != self.meta.model_digest {
            eprintln!("warning: prompt cache was built for a different model; recomputing");
            return CacheLookup::Stale;
        }
        let key = sha256_hex(text.as_bytes());
        match (self.embeddings.get(&key), self.meta.valids.get(&key)) {
            (Some(t), Some(v)) => CacheLookup::Hit(t, v),
            _ => CacheLookup::Miss,
        }
    }

    /// Bind this cache to a model, verifying the digest once up front.
    pub fn for_model<'c, 'm>(&'c self, model: &'m Model) -> CachedEncoder<'c, 'm> {
        CachedEncoder {
            cache: self,
            model,
            digest: model.store.digest(|_| true),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.put_json("meta", &self.meta)?;
        for (key, arr) in &self.embeddings {
            c.put_f32(&format!("emb/{key}"), arr);
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        c.write_to(path)
    }

    pub fn load(path: &Path) -> Result<EmbeddingCache> {
        let c = Container::read_from(path)?;
        let meta: CacheMeta = c.get_json("meta")?;
        if meta.format_version != CACHE_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported prompt cache version {}",
                meta.format_version
            )));
        }
        let mut embeddings = BTreeMap::new();
        for key in meta.texts.keys() {
            embeddings.insert(key.clone(), c.get_f32(&format!("emb/{key}"))?);
        }
        Ok(EmbeddingCache { meta, embeddings })
    }
}

/// A cache bound to one model; the digest comparison happens once at
/// construction, so hits cost a hash lookup and a constant insert.
pub struct CachedEncoder<'c, 'm> {
    cache: &'c EmbeddingCache,
    model: &'m Model,
    digest: String,
}

impl CachedEncoder<'_, '_> {
    /// Cached text encoding: hits skip the text encoder entirely and return
    /// embeddings bit-identical to a fresh encode.
    pub fn encode<'t>(&self, ctx: &Ctx<'t, '_>, text: &str) -> Result<PromptEmbedding<'t>> {
        match self.cache.lookup(&self.digest, text) {
            CacheLookup::Hit(tokens, valid) => Ok(PromptEmbedding {
                tokens: ctx.tape.constant(tokens.clone()),
                valid: valid.to_vec(),
                source: PromptSource::Text,
            }),
            CacheLookup::Stale | CacheLookup::Miss => {
                let prompt = TextPrompt::from_phrases(&split_phrases(text))?;
                self.model.text.encode(ctx, &prompt)
            }
        }
    }
}

/// Comma-separated prompt text → phrase list.
pub fn split_phrases(text: &str) -> Vec<String> {
    text.split(',')
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

fn encode_text_once(model: &Model, text: &str) -> Result<(Arr, Vec<bool>)> {
    let prompt = TextPrompt::from_phrases(&split_phrases(text))?;
    let tape = Tape::new();
    let ctx = Ctx::with_trainable(&tape, &model.store, |_| false);
    let emb = model.text.encode(&ctx, &prompt)?;
    Ok((emb.tokens.to_arr(), emb.valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use ndarray::ArrayD;

    fn tiny_teacher_cfg() -> ModelConfig {
        ModelConfig {
            d: 32,
            ffn_dim: 48,
            enc_layers: 1,
            dec_layers: 2,
            n_queries: 16,
            text_layers: 1,
            d_lm: 24,
            lm_layers: 1,
            keypoint_layers: 1,
            ..ModelConfig::default()
        }
    }

    fn tiny_data_cfg() -> DataConfig {
        DataConfig {
            image_size: 64,
            max_objects: 2,
            train_scenes: 3,
            val_scenes: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn student_is_strictly_smaller_and_oversize_is_rejected() {
        let tcfg = tiny_teacher_cfg();
        let teacher = Model::new(1, &tcfg).unwrap();
        let scfg = StudentConfig::derive(&tcfg);
        assert!(scfg.model.d < tcfg.d);
        let student = Student::new(2, &scfg, &teacher).unwrap();
        assert!(param_count(&student.model) < param_count(&teacher));

        let fat = StudentConfig { model: tcfg.clone() };
        assert!(matches!(
            Student::new(2, &fat, &teacher),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identity_adapter_on_identical_features_gives_zero_loss() {
        let mut store = crate::nn::ParamStore::new(0);
        let d = 6;
        let adapter = Linear::new(&mut store, "distill.adapter", d, d);
        let mut eye = Array2::<f32>::zeros((d, d));
        for i in 0..d {
            eye[[i, i]] = 1.0;
        }
        store.set("distill.adapter.w", eye.into_dyn()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let feats = tape.constant(
            ArrayD::from_shape_fn(ndarray::IxDyn(&[5, d]), |ix| (ix[0] * d + ix[1]) as f32 * 0.1),
        );
        let loss = feature_distill_loss(&ctx, &adapter, feats, feats).unwrap();
        assert_eq!(loss.scalar(), 0.0);

        let other = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[4, d])));
        assert!(feature_distill_loss(&ctx, &adapter, feats, other).is_err());
    }

    #[test]
    fn feature_distill_gradient_matches_f64_oracle() {
        let mut store = crate::nn::ParamStore::new(7);
        let (ds, dt, n) = (3usize, 4usize, 5usize);
        let adapter = Linear::new(&mut store, "distill.adapter", ds, dt);
        let w = store.get(store.id_of("distill.adapter.w").unwrap()).clone();
        let bias = store.get(store.id_of("distill.adapter.b").unwrap()).clone();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s0 = ArrayD::from_shape_fn(ndarray::IxDyn(&[n, ds]), |_| rng.random_range(-1.0..1.0f32));
        let t0 = ArrayD::from_shape_fn(ndarray::IxDyn(&[n, dt]), |_| rng.random_range(-1.0..1.0f32));

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let s = tape.leaf(s0.clone());
        let t = tape.constant(t0.clone());
        let loss = feature_distill_loss(&ctx, &adapter, s, t).unwrap();
        let mut grads = tape.backward(loss);
        let g = grads.take(s).unwrap();

        // f64 oracle: mean over n*dt of (s W^T + b - t)^2, perturbed in f64
        // so the step size carries no f32 representation error
        let s64: Vec<f64> = s0.iter().map(|&v| v as f64).collect();
        let f = |sv: &[f64]| -> f64 {
            let mut total = 0f64;
            for i in 0..n {
                for o in 0..dt {
                    let mut y = bias[[o]] as f64;
                    for q in 0..ds {
                        y += sv[i * ds + q] * w[[o, q]] as f64;
                    }
                    let d = y - t0[[i, o]] as f64;
                    total += d * d;
                }
            }
            total / (n * dt) as f64
        };
        let h = 1e-6f64;
        for probe in 0..10 {
            let i = probe % n;
            let q = (probe * 7) % ds;
            let mut plus = s64.clone();
            plus[i * ds + q] += h;
            let mut minus = s64.clone();
            minus[i * ds + q] -= h;
            let fd = ((f(&plus) - f(&minus)) / (2.0 * h)) as f32;
            let ad = g[[i, q]];
            let denom = fd.abs().max(1e-2);
            assert!(
                (fd - ad).abs() / denom < 1e-4,
                "grad mismatch at ({i},{q}): fd={fd} ad={ad}"
            );
        }
    }

    #[test]
    fn response_distill_is_mse_with_offset_delta_squared() {
        let tape = Tape::new();
        let x0 = ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 3]), |ix| (ix[0] + ix[1]) as f32 * 0.3);
        let s = tape.constant(x0.clone());
        let t = tape.constant(x0.clone());
        assert_eq!(response_distill_loss(s, t).unwrap().scalar(), 0.0);

        let delta = 0.25f32;
        let t2 = tape.constant(x0.mapv(|v| v + delta));
        let l = response_distill_loss(s, t2).unwrap().scalar();
        assert!((l - delta * delta).abs() < 1e-7, "got {l}");

        let bad = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[4, 2])));
        assert!(response_distill_loss(s, bad).is_err());
    }

    #[test]
    fn distillation_loop_runs_and_logs_both_terms() {
        let tcfg = tiny_teacher_cfg();
        let teacher = Model::new(1, &tcfg).unwrap();
        let scfg = StudentConfig::derive(&tcfg);
        let mut student = Student::new(2, &scfg, &teacher).unwrap();
        let dcfg = DistillConfig {
            steps: 2,
            batch_size: 1,
            warmup: 1,
            data: tiny_data_cfg(),
            ..DistillConfig::default()
        };
        let rep = distill(&mut student, &teacher, &dcfg).unwrap();
        assert_eq!(rep.steps.len(), 2);
        for s in &rep.steps {
            assert!(s.loss.is_finite());
            assert!(s.feature.unwrap() > 0.0);
            assert!(s.response.is_some());
        }
        let mse = val_logit_mse(&student, &teacher, &make_splits(&dcfg.data).unwrap().val_held_in, 2, 2);
        assert!(mse.unwrap().is_finite());
    }

    #[test]
    fn identity_times_b_reproduces_b_within_half_rounding() {
        let k = 12;
        let mut eye = Array2::<f32>::zeros((k, k));
        for i in 0..k {
            eye[[i, i]] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Array2::from_shape_fn((k, 7), |_| rng.random_range(-3.0..3.0f32));
        let c = normalized_fp16_matmul(&eye, &b).unwrap();
        for i in 0..k {
            for j in 0..7 {
                let denom = b[[i, j]].abs().max(1e-3);
                assert!(
                    (c[[i, j]] - b[[i, j]]).abs() / denom < 2e-3,
                    "({i},{j}): {} vs {}",
                    c[[i, j]],
                    b[[i, j]]
                );
            }
        }
    }

    #[test]
    fn normalization_rescues_magnitudes_where_naive_half_overflows() {
        let k = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_fn((4, k), |_| rng.random_range(0.5e3..1.5e3f32));
        let b = Array2::from_shape_fn((k, 4), |_| rng.random_range(0.5e3..1.5e3f32));
        let naive = naive_fp16_matmul(&a, &b);
        assert!(
            naive.iter().any(|v| !v.is_finite()),
            "naive half should overflow at these magnitudes"
        );
        let c = normalized_fp16_matmul(&a, &b).unwrap();
        assert!(c.iter().all(|v| v.is_finite()));
        for i in 0..4 {
            for j in 0..4 {
                let mut exact = 0f64;
                for kk in 0..k {
                    exact += a[[i, kk]] as f64 * b[[kk, j]] as f64;
                }
                let rel = ((c[[i, j]] as f64 - exact) / exact).abs();
                assert!(rel <= 0.01, "({i},{j}): rel err {rel}");
            }
        }
    }

    #[test]
    fn stress_log_uniform_matrices_stay_within_one_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..1000 {
            let m = rng.random_range(1..5usize);
            let n = rng.random_range(1..5usize);
            let k = rng.random_range(1..=256usize);
            let draw = |rng: &mut ChaCha8Rng| {
                let mag = 10f32.powf(rng.random_range(-3.0..3.0f32));
                if rng.random_range(0.0..1.0) < 0.5 {
                    -mag
                } else {
                    mag
                }
            };
            let a = Array2::from_shape_fn((m, k), |_| draw(&mut rng));
            let b = Array2::from_shape_fn((k, n), |_| draw(&mut rng));
            let c = normalized_fp16_matmul(&a, &b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut exact = 0f64;
                    let mut absum = 0f64;
                    for kk in 0..k {
                        exact += a[[i, kk]] as f64 * b[[kk, j]] as f64;
                        absum += (a[[i, kk]] as f64 * b[[kk, j]] as f64).abs();
                    }
                    // relative error against the magnitude of the summands:
                    // heavy cancellation can erase any fixed relative bound
                    // on the tiny difference itself
                    let scale = absum.max(1e-9);
                    let rel = (c[[i, j]] as f64 - exact).abs() / scale;
                    assert!(
                        rel <= 0.01,
                        "trial {trial} ({i},{j}) k={k}: rel {rel} exact {exact} got {}",
                        c[[i, j]]
                    );
                }
            }
        }
    }

    #[test]
    fn scaling_a_row_scales_the_matching_output_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = Array2::from_shape_fn((3, 9), |_| rng.random_range(-2.0..2.0f32));
        let b = Array2::from_shape_fn((9, 4), |_| rng.random_range(-2.0..2.0f32));
        let c1 = normalized_fp16_matmul(&a, &b).unwrap();

        let mut a8 = a.clone();
        for kk in 0..9 {
            a8[[1, kk]] *= 8.0; // power of two: normalized operands identical
        }
        let c8 = normalized_fp16_matmul(&a8, &b).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let want = if i == 1 { 8.0 * c1[[i, j]] } else { c1[[i, j]] };
                assert_eq!(c8[[i, j]].to_bits(), want.to_bits(), "({i},{j})");
            }
        }

        let mut a10 = a.clone();
        for kk in 0..9 {
            a10[[1, kk]] *= 10.0;
        }
        let c10 = normalized_fp16_matmul(&a10, &b).unwrap();
        for j in 0..4 {
            let denom = c1[[1, j]].abs().max(1e-3);
            assert!((c10[[1, j]] - 10.0 * c1[[1, j]]).abs() / denom < 1e-3);
        }
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let a = ndarray::arr2(&[[1.0f32, f32::NAN]]);
        let b = ndarray::arr2(&[[1.0f32], [1.0]]);
        assert!(matches!(normalized_fp16_matmul(&a, &b), Err(Error::Data(_))));
        let a2 = ndarray::arr2(&[[1.0f32, f32::INFINITY]]);
        assert!(normalized_fp16_matmul(&a2, &b).is_err());
    }

    #[test]
    fn cache_lookup_is_bit_identical_and_invalidates_on_model_change() {
        let tcfg = tiny_teacher_cfg();
        let mut model = Model::new(4, &tcfg).unwrap();
        let prompts: Vec<String> = ["red triangle", "blue square, green circle"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let cache = EmbeddingCache::build(&model, &prompts).unwrap();
        assert_eq!(cache.len(), 2);
        assert!(cache.created_unix() > 0);

        let digest = model.store.digest(|_| true);
        for text in &prompts {
            let CacheLookup::Hit(tokens, _) = cache.lookup(&digest, text) else {
                panic!("expected hit for {text}");
            };
            let (fresh, _) = encode_text_once(&model, text).unwrap();
            assert_eq!(tokens.shape(), fresh.shape());
            for (a, b) in tokens.iter().zip(fresh.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(matches!(cache.lookup(&digest, "unseen prompt"), CacheLookup::Miss));

        // perturb one parameter: digest changes, cache goes stale but still
        // produces a correct fresh encoding through encode()
        let name = "text.emb.table";
        let id = model.store.id_of(name).unwrap();
        let mut w = model.store.get(id).clone();
        w[[1, 0]] += 0.5;
        model.store.set(name, w).unwrap();
        let new_digest = model.store.digest(|_| true);
        assert!(matches!(cache.lookup(&new_digest, &prompts[0]), CacheLookup::Stale));

        let enc = cache.for_model(&model);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store);
        let emb = enc.encode(&ctx, &prompts[0]).unwrap();
        let (fresh, _) = encode_text_once(&model, &prompts[0]).unwrap();
        for (a, b) in emb.tokens.to_arr().iter().zip(fresh.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn cache_round_trips_through_disk_and_speeds_up_repeated_encoding() {
        let tcfg = tiny_teacher_cfg();
        let model = Model::new(8, &tcfg).unwrap();
        let prompts: Vec<String> = (0..50)
            .map(|i| {
                let colors = ["red", "blue", "green", "yellow"];
                let shapes = ["triangle", "square", "circle", "star"];
                format!("{} {}", colors[i % 4], shapes[(i / 4) % 4])
            })
            .collect();
        let cache = EmbeddingCache::build(&model, &prompts).unwrap();

        let dir = std::env::temp_dir().join(format!("dinoy-cache-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("prompts.cache");
        cache.save(&path).unwrap();
        let loaded = EmbeddingCache::load(&path).unwrap();
        assert_eq!(loaded.model_digest(), cache.model_digest());
        assert_eq!(loaded.len(), cache.len());

        let enc = loaded.for_model(&model);
        let timed = |use_cache: bool| {
            let start = std::time::Instant::now();
            for text in &prompts {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &model.store);
                if use_cache {
                    let _ = enc.encode(&ctx, text).unwrap();
                } else {
                    let p = TextPrompt::from_phrases(&split_phrases(text)).unwrap();
                    let _ = model.text.encode(&ctx, &p).unwrap();
                }
            }
            start.elapsed().as_secs_f64()
        };
        let warm = timed(true); // warm both paths' allocations
        let _ = warm;
        let without = timed(false);
        let with = timed(true);
        assert!(
            without >= 1.2 * with,
            "cache should be at least 1.2x faster: {without:.6}s vs {with:.6}s"
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn scratch_config_disables_teacher_terms() {
        let tcfg = tiny_teacher_cfg();
        let teacher = Model::new(1, &tcfg).unwrap();
        let scfg = StudentConfig::derive(&tcfg);
        let mut student = Student::new(3, &scfg, &teacher).unwrap();
        let dcfg = DistillConfig {
            steps: 1,
            batch_size: 1,
            warmup: 1,
            feature_weight: 0.0,
            response_weight: 0.0,
            data: tiny_data_cfg(),
            ..DistillConfig::default()
        };
        let rep = distill(&mut student, &teacher, &dcfg).unwrap();
        assert_eq!(rep.steps[0].feature, Some(0.0));
        assert_eq!(rep.steps[0].response, Some(0.0));
    }

    #[test]
    fn dinoy_cache_dir_env_var_is_honored() {
        // process-global env var: set, read, restore
        let key = CACHE_DIR_ENV;
        let prev = std::env::var_os(key);
        std::env::set_var(key, "/tmp/dinoy-test-cache");
        assert_eq!(cache_dir(), PathBuf::from("/tmp/dinoy-test-cache"));
        match prev {
            Some(v) => std::env::set_var(key, v),
            None => std::env::remove_var(key),
        }
    }
}
