//! Region captioner: RoI features plus the detection's query embedding become
//! "object tokens", a learnable task token selects the behavior, and a small
//! causal decoder generates text greedily over the closed vocabulary.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::data::vocab;
use crate::error::{Error, Result};
use crate::fusion::map_to_tokens;
use crate::nn::{causal_bias, Ctx, Embedding, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Recognize,
    Caption,
    Ocr,
    Qa,
}

pub const ALL_TASKS: [TaskKind; 4] = [
    TaskKind::Recognize,
    TaskKind::Caption,
    TaskKind::Ocr,
    TaskKind::Qa,
];

impl TaskKind {
    pub fn index(self) -> usize {
        ALL_TASKS.iter().position(|&t| t == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Recognize => "recognize",
            TaskKind::Caption => "caption",
            TaskKind::Ocr => "ocr",
            TaskKind::Qa => "qa",
        }
    }

    pub fn from_name(name: &str) -> Result<TaskKind> {
        ALL_TASKS
            .iter()
            .copied()
            .find(|t| t.name() == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown task {name:?}; available: {:?}",
                    ALL_TASKS.map(|t| t.name())
                ))
            })
    }
}

/// Sample a `[d, H, W]` feature map over a box with an S×S grid, averaging 4
/// bilinear sub-samples per cell; no coordinate quantization anywhere.
pub fn roi_align<'t>(
    ctx: &Ctx<'t, '_>,
    feature_map: Tensor<'t>,
    bbox: [f32; 4],
    s: usize,
) -> Result<Tensor<'t>> {
    assert!(s > 0, "RoI grid must be non-empty");
    let dims = feature_map.dims();
    assert_eq!(dims.len(), 3, "expected a [d, H, W] feature map");
    let d = dims[0];
    let (cx, cy, w, h) = (bbox[0], bbox[1], bbox[2], bbox[3]);
    if !(w > 0.0) || !(h > 0.0) {
        return Err(Error::DegenerateBox(cx, cy, w, h));
    }
    let x0 = cx - w / 2.0;
    let y0 = cy - h / 2.0;
    for c in [x0, y0, x0 + w, y0 + h] {
        if !(-1e-4..=1.0 + 1e-4).contains(&c) {
            return Err(Error::CoordOutOfRange(c));
        }
    }

    // 2x2 regular sub-grid per cell, at 1/4 and 3/4 of the cell extent
    let mut pts = Array2::<f32>::zeros((s * s * 4, 2));
    for i in 0..s {
        for j in 0..s {
            for sy in 0..2 {
                for sx in 0..2 {
                    let r = (i * s + j) * 4 + sy * 2 + sx;
                    pts[[r, 0]] = (x0 + (j as f32 + 0.25 + 0.5 * sx as f32) * w / s as f32)
                        .clamp(0.0, 1.0);
                    pts[[r, 1]] = (y0 + (i as f32 + 0.25 + 0.5 * sy as f32) * h / s as f32)
                        .clamp(0.0, 1.0);
                }
            }
        }
    }
    let sampled = feature_map.grid_sample(&ctx.tape.constant(pts.into_dyn()));
    let sub = |k: usize| {
        let ids: Vec<usize> = (0..s * s).map(|c| c * 4 + k).collect();
        sampled.select_rows(&ids)
    };
    let avg = sub(0).add(&sub(1)).add(&sub(2)).add(&sub(3)).scale(0.25);
    Ok(avg.transpose2d().reshape(&[d, s, s]))
}

struct LmLayer {
    sa: MultiHeadAttention,
    norm_sa: LayerNorm,
    ffn: Mlp,
    norm_f: LayerNorm,
}

/// `[S*S + 1, d_lm]` projected region tokens for one detection.
pub struct ObjectTokens<'t> {
    pub tokens: Tensor<'t>,
}

pub struct LanguageHead {
    proj: Linear,
    tok_emb: Embedding,
    task_emb: Embedding,
    pos_emb: Embedding,
    layers: Vec<LmLayer>,
    out: Linear,
    vocab_size: usize,
    roi_grid: usize,
    max_text_len: usize,
}

impl LanguageHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d_lm = cfg.d_lm;
        let max_seq = cfg.roi_grid * cfg.roi_grid + 2 + cfg.max_text_len;
        let layers = (0..cfg.lm_layers)
            .map(|i| {
                let n = format!("lm.layer{i}");
                LmLayer {
                    sa: MultiHeadAttention::new(store, &format!("{n}.sa"), d_lm, cfg.heads),
                    norm_sa: LayerNorm::new(store, &format!("{n}.norm_sa"), d_lm),
                    ffn: Mlp::new(store, &format!("{n}.ffn"), &[d_lm, cfg.ffn_dim, d_lm], false),
                    norm_f: LayerNorm::new(store, &format!("{n}.norm_f"), d_lm),
                }
            })
            .collect();
        LanguageHead {
            proj: Linear::new(store, "lm.proj", cfg.d, d_lm),
            tok_emb: Embedding::new(store, "lm.tok", cfg.vocab_size, d_lm),
            task_emb: Embedding::new(store, "lm.task", ALL_TASKS.len(), d_lm),
            pos_emb: Embedding::new(store, "lm.pos", max_seq, d_lm),
            layers,
            out: Linear::new(store, "lm.out", d_lm, cfg.vocab_size),
            vocab_size: cfg.vocab_size,
            roi_grid: cfg.roi_grid,
            max_text_len: cfg.max_text_len,
        }
    }

    /// Flatten an RoI grid, append the detection's query embedding, and
    /// project everything with one shared linear map.
    pub fn build_object_tokens<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        roi_feat: Tensor<'t>,
        query_content: Tensor<'t>,
    ) -> Result<ObjectTokens<'t>> {
        let rd = roi_feat.dims();
        if rd.len() != 3 || rd[1] != self.roi_grid || rd[2] != self.roi_grid {
            return Err(Error::Shape {
                op: "build_object_tokens",
                expected: format!("[d, {}, {}] RoI grid", self.roi_grid, self.roi_grid),
                got: format!("{rd:?}"),
            });
        }
        if query_content.dims() != [1, rd[0]] {
            return Err(Error::Shape {
                op: "build_object_tokens",
                expected: format!("[1, {}] query content", rd[0]),
                got: format!("{:?}", query_content.dims()),
            });
        }
        let grid = map_to_tokens(roi_feat);
        let all = Tensor::concat_rows(&[grid, query_content]);
        Ok(ObjectTokens {
            tokens: self.proj.fwd(ctx, all),
        })
    }

    /// Run the causal decoder over `[obj | task | text]` and return the
    /// hidden rows for the text positions.
    fn text_rows<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        obj: &ObjectTokens<'t>,
        task: TaskKind,
        text_ids: &[u32],
    ) -> Result<Tensor<'t>> {
        let m = obj.tokens.dims()[0];
        let n = m + 1 + text_ids.len();
        let max_seq = self.roi_grid * self.roi_grid + 2 + self.max_text_len;
        if n > max_seq {
            return Err(Error::Config(format!(
                "sequence of {n} tokens exceeds the decoder capacity {max_seq}"
            )));
        }
        for &id in text_ids {
            if id as usize >= self.vocab_size {
                return Err(Error::UnknownToken(id, self.vocab_size));
            }
        }
        let task_row = self.task_emb.fwd(ctx, &[task.index()]);
        let text_ids_usize: Vec<usize> = text_ids.iter().map(|&t| t as usize).collect();
        let text = self.tok_emb.fwd(ctx, &text_ids_usize);
        let seq = Tensor::concat_rows(&[obj.tokens, task_row, text]);
        let positions: Vec<usize> = (0..n).collect();
        let mut x = seq.add(&self.pos_emb.fwd(ctx, &positions));

        let bias = causal_bias(n);
        for layer in &self.layers {
            let sa = layer.sa.fwd(ctx, x, x, Some(&bias));
            x = layer.norm_sa.fwd(ctx, x.add(&sa));
            let f = layer.ffn.fwd(ctx, x);
            x = layer.norm_f.fwd(ctx, x.add(&f));
        }
        Ok(x.slice_rows(m + 1..n))
    }

    /// Teacher-forced next-token logits: row `k` scores the k-th target given
    /// `[obj | task | BOS | targets[..k]]`.
    pub fn target_logits<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        obj: &ObjectTokens<'t>,
        task: TaskKind,
        targets: &[u32],
    ) -> Result<Tensor<'t>> {
        if targets.is_empty() {
            return Err(Error::Data("empty caption target".into()));
        }
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(vocab::BOS);
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        let rows = self.text_rows(ctx, obj, task, &inputs)?;
        Ok(self.out.fwd(ctx, rows))
    }

    /// Greedy decode; stops at EOS or after `max_len` generated tokens.
    pub fn generate<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        obj: &ObjectTokens<'t>,
        task: TaskKind,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        if max_len == 0 {
            return Err(Error::Config("generation needs max_len >= 1".into()));
        }
        if max_len > self.max_text_len {
            return Err(Error::Config(format!(
                "max_len {max_len} exceeds the decoder's text capacity {}",
                self.max_text_len
            )));
        }
        let mut inputs = vec![vocab::BOS];
        let mut generated = Vec::new();
        while generated.len() < max_len {
            let rows = self.text_rows(ctx, obj, task, &inputs)?;
            let last = rows.slice_rows(inputs.len() - 1..inputs.len());
            let logits = self.out.fwd(ctx, last).to_arr();
            let next = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i as u32)
                .unwrap();
            generated.push(next);
            if next == vocab::EOS {
                break;
            }
            inputs.push(next);
        }
        Ok(generated)
    }

    /// Mean next-token cross-entropy over the target positions; anything
    /// after the first EOS (padding) is outside both the loss and the
    /// computation, and the object/task positions contribute nothing.
    pub fn caption_loss<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        obj: &ObjectTokens<'t>,
        task: TaskKind,
        targets: &[u32],
    ) -> Result<Tensor<'t>> {
        if targets.is_empty() {
            return Err(Error::Data("empty caption target".into()));
        }
        let end = match targets.iter().position(|&t| t == vocab::EOS) {
            Some(e) => e + 1,
            None => {
                return Err(Error::Data(
                    "caption target does not terminate with <eos>".into(),
                ))
            }
        };
        let targets = &targets[..end];
        let logits = self.target_logits(ctx, obj, task, targets)?;
        Ok(sequence_ce(logits, targets))
    }
}

/// Mean cross-entropy of `[T, V]` next-token logits against `T` target ids.
pub fn sequence_ce<'t>(logits: Tensor<'t>, targets: &[u32]) -> Tensor<'t> {
    let dims = logits.dims();
    assert_eq!(dims[0], targets.len(), "one logit row per target");
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    logits
        .log_softmax_lastdim()
        .gather_cols(&ids)
        .mean_all()
        .neg()
}
