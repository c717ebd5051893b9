//! Multi-scale deformable attention: each query predicts a small set of
//! sampling points per head and level, bilinearly samples the value maps
//! there, and mixes the samples with softmax weights.

use ndarray::Array2;

use crate::nn::Linear;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

pub struct MsDeformAttn {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    offsets: Linear,
    weights: Linear,
    value: Linear,
    out: Linear,
}

impl MsDeformAttn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Self {
        assert_eq!(d % heads, 0);
        let hlk = heads * levels * points;
        MsDeformAttn {
            heads,
            levels,
            points,
            // zero-init: sampling starts exactly at the reference points with
            // uniform weights
            offsets: Linear::zeroed(store, &format!("{name}.off"), d, hlk * 2),
            weights: Linear::zeroed(store, &format!("{name}.wt"), d, hlk),
            value: Linear::new(store, &format!("{name}.v"), d, d),
            out: Linear::new(store, &format!("{name}.o"), d, d),
        }
    }

    /// Softmax-normalized mixing weights, one `[Q, levels·points]` matrix per
    /// head; rows sum to 1.
    pub fn head_weights<'t>(&self, ctx: &Ctx<'t, '_>, queries: Tensor<'t>) -> Vec<Tensor<'t>> {
        let lk = self.levels * self.points;
        let logits = self.weights.fwd(ctx, queries);
        (0..self.heads)
            .map(|h| logits.slice_cols(h * lk..(h + 1) * lk).softmax_lastdim(None))
            .collect()
    }

    /// `queries`: `[Q, d]`; `refs`: `[Q, 2]` normalized points; `maps`: one
    /// `[d, H_l, W_l]` value source per level. Out-of-range samples clamp to
    /// the border.
    pub fn fwd<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        queries: Tensor<'t>,
        refs: &Array2<f32>,
        maps: &[Tensor<'t>],
    ) -> Tensor<'t> {
        assert_eq!(maps.len(), self.levels, "level count mismatch");
        let qd = queries.dims();
        let (qn, d) = (qd[0], qd[1]);
        let dh = d / self.heads;
        assert_eq!(refs.nrows(), qn);

        // references repeated per sampling point (row q·K + k)
        let mut rep = Array2::<f32>::zeros((qn * self.points, 2));
        for q in 0..qn {
            for k in 0..self.points {
                rep[[q * self.points + k, 0]] = refs[[q, 0]];
                rep[[q * self.points + k, 1]] = refs[[q, 1]];
            }
        }
        let rep = ctx.tape.constant(rep.into_dyn());

        let offs = self.offsets.fwd(ctx, queries);
        let wts = self.head_weights(ctx, queries);

        // per-level, per-head value maps [dh, H, W]
        let mut head_maps: Vec<Vec<Tensor<'t>>> = Vec::with_capacity(self.levels);
        for m in maps {
            let md = m.dims();
            assert_eq!(md[0], d, "value map channel mismatch");
            let tokens = super::map_to_tokens(*m);
            let v = self.value.fwd(ctx, tokens);
            head_maps.push(
                (0..self.heads)
                    .map(|h| super::tokens_to_map(v.slice_cols(h * dh..(h + 1) * dh), md[1], md[2]))
                    .collect(),
            );
        }

        let mut head_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut acc: Option<Tensor<'t>> = None;
            for l in 0..self.levels {
                let base = (h * self.levels + l) * self.points * 2;
                let pts = offs
                    .slice_cols(base..base + self.points * 2)
                    .reshape(&[qn * self.points, 2])
                    .add(&rep);
                let sampled = head_maps[l][h].grid_sample(&pts);
                for k in 0..self.points {
                    let ids: Vec<usize> = (0..qn).map(|q| q * self.points + k).collect();
                    let s = sampled.select_rows(&ids);
                    let col = l * self.points + k;
                    let w = wts[h].slice_cols(col..col + 1).reshape(&[qn]);
                    let term = s.scale_rows(&w);
                    acc = Some(match acc {
                        Some(a) => a.add(&term),
                        None => term,
                    });
                }
            }
            head_out.push(acc.unwrap());
        }
        self.out.fwd(ctx, Tensor::concat_cols(&head_out))
    }
}
