//! Standard layers: projections, MLPs, norms, embeddings, attention.

use ndarray::{Array2, IxDyn};

use super::{Ctx, ParamId, ParamStore};
use crate::tensor::{Arr, Tensor};

/// Additive logit mask value for disallowed attention pairs. Finite so the
/// arithmetic stays NaN-free, large enough to underflow to exactly zero
/// probability after softmax.
pub const ATTN_NEG: f32 = -1e9;

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add_linear_weight(&format!("{name}.w"), dout, din);
        let b = Some(store.add_zeros(&format!("{name}.b"), &[dout]));
        Linear { w, b }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add_linear_weight(&format!("{name}.w"), dout, din);
        Linear { w, b: None }
    }

    /// All-zero weights and bias, for residual deltas that must start inert.
    pub fn zeroed(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add_zeros(&format!("{name}.w"), &[dout, din]);
        let b = Some(store.add_zeros(&format!("{name}.b"), &[dout]));
        Linear { w, b }
    }

    /// `[n, din] -> [n, dout]`
    pub fn fwd<'t>(&self, ctx: &Ctx<'t, '_>, x: Tensor<'t>) -> Tensor<'t> {
        let y = x.matmul_nt(&ctx.p(self.w));
        match self.b {
            Some(b) => y.add_rowvec(&ctx.p(b)),
            None => y,
        }
    }
}

/// Fully-connected stack with ReLU between layers.
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], zero_last: bool) -> Self {
        assert!(dims.len() >= 2);
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let lname = format!("{name}.{i}");
            let last = i == dims.len() - 2;
            let layer = if last && zero_last {
                Linear::zeroed(store, &lname, dims[i], dims[i + 1])
            } else {
                Linear::new(store, &lname, dims[i], dims[i + 1])
            };
            layers.push(layer);
        }
        Mlp { layers }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t, '_>, x: Tensor<'t>) -> Tensor<'t> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.fwd(ctx, h);
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        h
    }
}

pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add_ones(&format!("{name}.g"), &[d]),
            beta: store.add_zeros(&format!("{name}.b"), &[d]),
        }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t, '_>, x: Tensor<'t>) -> Tensor<'t> {
        x.layer_norm(&ctx.p(self.gamma), &ctx.p(self.beta), 1e-5)
    }
}

pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, d: usize) -> Self {
        // N(0, 0.02)-like scale via uniform bounds
        let table = store.add_uniform(&format!("{name}.table"), &[vocab, d], 0.04);
        Embedding { table }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t, '_>, ids: &[usize]) -> Tensor<'t> {
        ctx.p(self.table).select_rows(ids)
    }
}

pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (cin * k * k) as f32;
        let limit = (6.0 / fan_in).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), &[cout, cin * k * k], limit);
        let b = store.add_zeros(&format!("{name}.b"), &[cout]);
        Conv2d {
            w,
            b,
            k,
            stride,
            pad,
        }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t, '_>, x: Tensor<'t>) -> Tensor<'t> {
        x.conv2d(&ctx.p(self.w), &ctx.p(self.b), self.k, self.stride, self.pad)
    }
}

pub struct GroupNorm2d {
    groups: usize,
    gamma: ParamId,
    beta: ParamId,
}

impl GroupNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, c: usize) -> Self {
        GroupNorm2d {
            groups,
            gamma: store.add_ones(&format!("{name}.g"), &[c]),
            beta: store.add_zeros(&format!("{name}.b"), &[c]),
        }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t, '_>, x: Tensor<'t>) -> Tensor<'t> {
        x.group_norm(self.groups, &ctx.p(self.gamma), &ctx.p(self.beta), 1e-5)
    }
}

pub struct MultiHeadAttention {
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Self {
        assert_eq!(d % heads, 0);
        MultiHeadAttention {
            heads,
            q: Linear::new(store, &format!("{name}.q"), d, d),
            k: Linear::new(store, &format!("{name}.k"), d, d),
            v: Linear::new(store, &format!("{name}.v"), d, d),
            o: Linear::new(store, &format!("{name}.o"), d, d),
        }
    }

    /// Scaled dot-product attention of `q_in` over `kv_in`, with an optional
    /// additive logit bias of shape `[nq, nk]` (use [`ATTN_NEG`] to forbid).
    pub fn fwd<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        q_in: Tensor<'t>,
        kv_in: Tensor<'t>,
        bias: Option<&Arr>,
    ) -> Tensor<'t> {
        let d = q_in.dims()[1];
        let dh = d / self.heads;
        let q = self.q.fwd(ctx, q_in);
        let k = self.k.fwd(ctx, kv_in);
        let v = self.v.fwd(ctx, kv_in);
        let bias_t = bias.map(|b| {
            assert_eq!(b.shape(), [q_in.dims()[0], kv_in.dims()[0]]);
            ctx.tape.constant(b.clone())
        });
        let scale = 1.0 / (dh as f32).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice_cols(cols.clone());
            let ks = k.slice_cols(cols.clone());
            let vs = v.slice_cols(cols);
            let mut sc = qs.matmul_nt(&ks).scale(scale);
            if let Some(bt) = bias_t {
                sc = sc.add(&bt);
            }
            let at = sc.softmax_lastdim(None);
            outs.push(at.matmul(&vs));
        }
        let cat = Tensor::concat_cols(&outs);
        self.o.fwd(ctx, cat)
    }
}

/// Bias forbidding attention to later positions (strictly upper triangle).
pub fn causal_bias(n: usize) -> Arr {
    let mut b = Array2::<f32>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            b[[i, j]] = ATTN_NEG;
        }
    }
    b.into_dyn()
}

/// Bias allowing attention only within the same group id.
pub fn block_diag_bias(groups: &[usize]) -> Arr {
    let n = groups.len();
    let mut b = Array2::<f32>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if groups[i] != groups[j] {
                b[[i, j]] = ATTN_NEG;
            }
        }
    }
    b.into_dyn()
}

/// Bias masking out invalid key columns for every query row.
pub fn key_padding_bias(nq: usize, valid: &[bool]) -> Arr {
    let nk = valid.len();
    let mut b = Arr::zeros(IxDyn(&[nq, nk]));
    for i in 0..nq {
        for (j, &ok) in valid.iter().enumerate() {
            if !ok {
                b[[i, j]] = ATTN_NEG;
            }
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::rand_arr;
    use crate::tensor::Tape;

    #[test]
    fn linear_matches_manual_projection() {
        let mut store = ParamStore::new(3);
        let lin = Linear::new(&mut store, "l", 3, 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = rand_arr(&[4, 3], 5, -1.0, 1.0);
        let y = lin.fwd(&ctx, tape.constant(x.clone()));
        let w = store.get(lin.w);
        for i in 0..4 {
            for o in 0..2 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += x[[i, j]] * w[[o, j]];
                }
                assert!((y.value()[[i, o]] - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn causal_attention_ignores_future_tokens() {
        let mut store = ParamStore::new(4);
        let attn = MultiHeadAttention::new(&mut store, "a", 8, 2);
        let x1 = rand_arr(&[5, 8], 6, -1.0, 1.0);
        let mut x2 = x1.clone();
        // change only the last token; earlier outputs must not move
        for j in 0..8 {
            x2[[4, j]] += 1.0;
        }
        let bias = causal_bias(5);
        let run = |x: &Arr| {
            let tape = Tape::no_grad();
            let ctx = Ctx::new(&tape, &store);
            let t = tape.constant(x.clone());
            attn.fwd(&ctx, t, t, Some(&bias)).to_arr()
        };
        let (y1, y2) = (run(&x1), run(&x2));
        for i in 0..4 {
            for j in 0..8 {
                assert!((y1[[i, j]] - y2[[i, j]]).abs() < 1e-6);
            }
        }
        assert!((0..8).any(|j| (y1[[4, j]] - y2[[4, j]]).abs() > 1e-4));
    }

    #[test]
    fn block_diag_bias_separates_groups() {
        let b = block_diag_bias(&[0, 0, 1]);
        assert_eq!(b[[0, 1]], 0.0);
        assert_eq!(b[[0, 2]], ATTN_NEG);
        assert_eq!(b[[2, 2]], 0.0);
    }

    #[test]
    fn mlp_zero_last_starts_at_zero_output() {
        let mut store = ParamStore::new(9);
        let mlp = Mlp::new(&mut store, "m", &[4, 8, 3], true);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = rand_arr(&[2, 4], 10, -1.0, 1.0);
        let y = mlp.fwd(&ctx, tape.constant(x));
        assert!(y.value().iter().all(|&v| v == 0.0));
    }
}
