//! Language-guided query selection: rank memory tokens by their best
//! similarity to any valid prompt token and seed the decoder from the top Q.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

use super::encoder::FusedMemory;

pub struct QuerySet<'t> {
    /// `[Q, d]` decoder inputs (detached from selection when configured)
    pub content: Tensor<'t>,
    /// `[Q, d]` the same rows with gradients intact, for selection-level
    /// supervision
    pub content_raw: Tensor<'t>,
    /// `[Q, 4]` normalized (cx, cy, w, h)
    pub anchors: Tensor<'t>,
    /// best prompt similarity per selected token, non-increasing
    pub selection_scores: Vec<f32>,
    /// selected memory token ids
    pub indices: Vec<usize>,
}

pub struct QuerySelector {
    anchor_mlp: Mlp,
    detach_content: bool,
}

impl QuerySelector {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        QuerySelector {
            // zero-init: initial anchors equal the positional prior
            anchor_mlp: Mlp::new(store, "select.anchor", &[cfg.d, cfg.d, 4], true),
            detach_content: cfg.detach_query_content,
        }
    }

    pub fn language_guided_query_selection<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        memory: &FusedMemory<'t>,
        q: usize,
    ) -> Result<QuerySet<'t>> {
        let n = memory.len();
        if q > n {
            return Err(Error::Config(format!(
                "cannot select {q} queries from {n} memory tokens"
            )));
        }
        if memory.prompt.n_valid() == 0 {
            return Err(Error::Config(
                "query selection requires at least one valid prompt token".into(),
            ));
        }

        // similarity against valid prompt tokens only; ranking needs values,
        // not gradients
        let sim = memory
            .tokens
            .matmul_nt(&memory.prompt.tokens)
            .to_arr();
        let mut scored: Vec<(usize, f32)> = (0..n)
            .map(|i| {
                let best = memory
                    .prompt
                    .valid
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v)
                    .map(|(j, _)| sim[[i, j]])
                    .fold(f32::NEG_INFINITY, f32::max);
                (i, best)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(q);
        let indices: Vec<usize> = scored.iter().map(|&(i, _)| i).collect();
        let selection_scores: Vec<f32> = scored.iter().map(|&(_, s)| s).collect();

        let content_raw = memory.tokens.select_rows(&indices);
        let content = if self.detach_content {
            content_raw.detach()
        } else {
            content_raw
        };

        // positional prior: token position plus a level-sized box
        let mut prior = Array2::<f32>::zeros((q, 4));
        for (row, &i) in indices.iter().enumerate() {
            let (_, h, w) = memory.level_shapes[memory.level_of[i]];
            let base = [
                memory.positions[[i, 0]],
                memory.positions[[i, 1]],
                (2.0 / w as f32).min(0.9),
                (2.0 / h as f32).min(0.9),
            ];
            for (c, &v) in base.iter().enumerate() {
                let x = v.clamp(1e-5, 1.0 - 1e-5);
                prior[[row, c]] = (x / (1.0 - x)).ln();
            }
        }
        let prior = ctx.tape.constant(prior.into_dyn());
        let anchors = self.anchor_mlp.fwd(ctx, content).add(&prior).sigmoid();

        Ok(QuerySet {
            content,
            content_raw,
            anchors,
            selection_scores,
            indices,
        })
    }
}
