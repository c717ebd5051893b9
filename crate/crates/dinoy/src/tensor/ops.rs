//! Elementwise, linear-algebra, shape and reduction ops with backward rules.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Ix1, Ix2, IxDyn};

use super::{Arr, Tensor};

pub(crate) fn as2(a: &Arr) -> ArrayView2<'_, f32> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
}

fn dims2(a: &Arr) -> (usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 2, "expected rank-2, got shape {s:?}");
    (s[0], s[1])
}

impl<'t> Tensor<'t> {
    fn binary(
        &self,
        other: &Tensor<'t>,
        value: Arr,
        backward: impl Fn(&Arr) -> Vec<Arr> + 'static,
    ) -> Tensor<'t> {
        assert!(self.same_tape(other), "tensors from different tapes");
        self.tape
            .op(value, vec![self.id, other.id], Box::new(backward))
    }

    fn unary(&self, value: Arr, backward: impl Fn(&Arr) -> Vec<Arr> + 'static) -> Tensor<'t> {
        self.tape.op(value, vec![self.id], Box::new(backward))
    }

    // ---- elementwise binary ----

    pub fn add(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.binary(other, &*a + &*b, |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.binary(other, &*a - &*b, |g| vec![g.clone(), g.mapv(|x| -x)])
    }

    pub fn mul(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let (ca, cb) = (a.clone(), b.clone());
        self.binary(other, &*a * &*b, move |g| vec![g * &*cb, g * &*ca])
    }

    pub fn div(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "div: shape mismatch");
        let (ca, cb) = (a.clone(), b.clone());
        self.binary(other, &*a / &*b, move |g| {
            vec![g / &*cb, -(g * &*ca) / (&*cb * &*cb)]
        })
    }

    /// Elementwise min; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "minimum: shape mismatch");
        let mut mask = Arr::zeros(a.raw_dim());
        let mut out = Arr::zeros(a.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(&mut mask)
            .and(&*a)
            .and(&*b)
            .for_each(|o, m, &x, &y| {
                if x <= y {
                    *o = x;
                    *m = 1.0;
                } else {
                    *o = y;
                }
            });
        self.binary(other, out, move |g| {
            vec![g * &mask, g * &mask.mapv(|m| 1.0 - m)]
        })
    }

    /// Elementwise max; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "maximum: shape mismatch");
        let mut mask = Arr::zeros(a.raw_dim());
        let mut out = Arr::zeros(a.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(&mut mask)
            .and(&*a)
            .and(&*b)
            .for_each(|o, m, &x, &y| {
                if x >= y {
                    *o = x;
                    *m = 1.0;
                } else {
                    *o = y;
                }
            });
        self.binary(other, out, move |g| {
            vec![g * &mask, g * &mask.mapv(|m| 1.0 - m)]
        })
    }

    // ---- elementwise unary ----

    pub fn neg(&self) -> Tensor<'t> {
        self.unary(self.value().mapv(|x| -x), |g| vec![g.mapv(|x| -x)])
    }

    pub fn abs(&self) -> Tensor<'t> {
        let a = self.value();
        let sign = a.mapv(|x| if x >= 0.0 { 1.0 } else { -1.0 });
        self.unary(a.mapv(f32::abs), move |g| vec![g * &sign])
    }

    pub fn relu(&self) -> Tensor<'t> {
        let a = self.value();
        let mask = a.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.unary(a.mapv(|x| x.max(0.0)), move |g| vec![g * &mask])
    }

    pub fn sigmoid(&self) -> Tensor<'t> {
        let out = self.value().mapv(stable_sigmoid);
        let c = out.clone();
        self.unary(out, move |g| vec![g * &c.mapv(|s| s * (1.0 - s))])
    }

    pub fn exp(&self) -> Tensor<'t> {
        let out = self.value().mapv(f32::exp);
        let c = out.clone();
        self.unary(out, move |g| vec![g * &c])
    }

    pub fn ln(&self) -> Tensor<'t> {
        let a = self.value();
        let c = a.clone();
        self.unary(a.mapv(f32::ln), move |g| vec![g / &*c])
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&self) -> Tensor<'t> {
        let a = self.value();
        let c = a.clone();
        self.unary(a.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p()), move |g| {
            vec![g * &c.mapv(stable_sigmoid)]
        })
    }

    pub fn square(&self) -> Tensor<'t> {
        let a = self.value();
        let c = a.clone();
        self.unary(a.mapv(|x| x * x), move |g| vec![g * &c.mapv(|x| 2.0 * x)])
    }

    pub fn sqrt(&self) -> Tensor<'t> {
        let out = self.value().mapv(f32::sqrt);
        let c = out.clone();
        self.unary(out, move |g| vec![g / &c.mapv(|s| 2.0 * s)])
    }

    pub fn powf(&self, e: f32) -> Tensor<'t> {
        let a = self.value();
        let c = a.clone();
        self.unary(a.mapv(|x| x.powf(e)), move |g| {
            vec![g * &c.mapv(|x| e * x.powf(e - 1.0))]
        })
    }

    pub fn scale(&self, c: f32) -> Tensor<'t> {
        self.unary(self.value().mapv(|x| x * c), move |g| vec![g.mapv(|x| x * c)])
    }

    pub fn add_scalar(&self, c: f32) -> Tensor<'t> {
        self.unary(self.value().mapv(|x| x + c), |g| vec![g.clone()])
    }

    /// Gradient-free constant with this tensor's shape, filled with `c`.
    pub fn const_like(&self, c: f32) -> Tensor<'t> {
        self.tape
            .constant(Arr::from_elem(self.value().raw_dim(), c))
    }

    // ---- broadcast helpers ----

    /// `[n, d] + [d]`, broadcasting the vector over rows.
    pub fn add_rowvec(&self, v: &Tensor<'t>) -> Tensor<'t> {
        let a = self.value();
        let b = v.value();
        let (_, d) = dims2(&a);
        assert_eq!(b.len(), d, "add_rowvec: dim mismatch");
        let bv = b.view().into_dimensionality::<Ix1>().unwrap();
        let out = &as2(&a) + &bv;
        self.binary(v, out.into_dyn(), |g| {
            vec![g.clone(), as2(g).sum_axis(Axis(0)).into_dyn()]
        })
    }

    /// Multiply row `i` of a `[n, d]` matrix by `v[i]`.
    pub fn scale_rows(&self, v: &Tensor<'t>) -> Tensor<'t> {
        let a = self.value();
        let b = v.value();
        let (n, _) = dims2(&a);
        assert_eq!(b.len(), n, "scale_rows: dim mismatch");
        let col = b
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .insert_axis(Axis(1))
            .to_owned();
        let out = &as2(&a) * &col;
        let (ca, cb) = (a.clone(), col);
        self.binary(v, out.into_dyn(), move |g| {
            let g2 = as2(g);
            let da = (&g2 * &cb).into_dyn();
            let dv = (&g2 * &as2(&ca)).sum_axis(Axis(1)).into_dyn();
            vec![da, dv]
        })
    }

    // ---- matmul family ----

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.value(), other.value());
        let (_, ka) = dims2(&a);
        let (kb, _) = dims2(&b);
        assert_eq!(ka, kb, "matmul: inner dim mismatch");
        let out = as2(&a).dot(&as2(&b)).into_dyn();
        let (ca, cb) = (a.clone(), b.clone());
        self.binary(other, out, move |g| {
            let gv = as2(g);
            vec![
                gv.dot(&as2(&cb).t()).into_dyn(),
                as2(&ca).t().dot(&gv).into_dyn(),
            ]
        })
    }

    /// `[m, k] x [n, k]^T -> [m, n]`
    pub fn matmul_nt(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.value(), other.value());
        let (_, ka) = dims2(&a);
        let (_, kb) = dims2(&b);
        assert_eq!(ka, kb, "matmul_nt: inner dim mismatch");
        let out = as2(&a).dot(&as2(&b).t()).into_dyn();
        let (ca, cb) = (a.clone(), b.clone());
        self.binary(other, out, move |g| {
            let gv = as2(g);
            vec![
                gv.dot(&as2(&cb)).into_dyn(),
                gv.t().dot(&as2(&ca)).into_dyn(),
            ]
        })
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor<'t> {
        let a = self.value();
        let old: Vec<usize> = a.shape().to_vec();
        let out = a
            .to_shape(IxDyn(shape))
            .expect("reshape: incompatible shape")
            .to_owned();
        self.unary(out, move |g| {
            vec![g.to_shape(IxDyn(&old)).unwrap().to_owned()]
        })
    }

    pub fn transpose2d(&self) -> Tensor<'t> {
        let a = self.value();
        let out = as2(&a).t().to_owned().into_dyn();
        self.unary(out, |g| vec![as2(g).t().to_owned().into_dyn()])
    }

    /// Gather rows by index (rows may repeat).
    pub fn select_rows(&self, ids: &[usize]) -> Tensor<'t> {
        let a = self.value();
        let (n, d) = dims2(&a);
        assert!(ids.iter().all(|&i| i < n), "select_rows: index out of range");
        let av = as2(&a);
        let mut out = Array2::<f32>::zeros((ids.len(), d));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&av.row(i));
        }
        let ids: Vec<usize> = ids.to_vec();
        self.unary(out.into_dyn(), move |g| {
            let gv = as2(g);
            let mut da = Array2::<f32>::zeros((n, d));
            for (r, &i) in ids.iter().enumerate() {
                let mut row = da.row_mut(i);
                row += &gv.row(r);
            }
            vec![da.into_dyn()]
        })
    }

    pub fn slice_rows(&self, r: Range<usize>) -> Tensor<'t> {
        let a = self.value();
        let (n, d) = dims2(&a);
        assert!(r.end <= n);
        let out = as2(&a).slice(s![r.clone(), ..]).to_owned().into_dyn();
        self.unary(out, move |g| {
            let mut da = Array2::<f32>::zeros((n, d));
            da.slice_mut(s![r.clone(), ..]).assign(&as2(g));
            vec![da.into_dyn()]
        })
    }

    pub fn slice_cols(&self, c: Range<usize>) -> Tensor<'t> {
        let a = self.value();
        let (n, d) = dims2(&a);
        assert!(c.end <= d);
        let out = as2(&a).slice(s![.., c.clone()]).to_owned().into_dyn();
        self.unary(out, move |g| {
            let mut da = Array2::<f32>::zeros((n, d));
            da.slice_mut(s![.., c.clone()]).assign(&as2(g));
            vec![da.into_dyn()]
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<'t> {
        let a = self.value();
        let shape: Vec<usize> = a.shape().to_vec();
        let out = Arr::from_elem(IxDyn(&[]), a.sum());
        self.unary(out, move |g| {
            let gv = *g.iter().next().unwrap();
            vec![Arr::from_elem(IxDyn(&shape), gv)]
        })
    }

    pub fn mean_all(&self) -> Tensor<'t> {
        let n = self.len() as f32;
        self.sum_all().scale(1.0 / n)
    }

    /// `[n, d] -> [d]`, mean over rows.
    pub fn mean_axis0(&self) -> Tensor<'t> {
        let a = self.value();
        let (n, d) = dims2(&a);
        let out = as2(&a).mean_axis(Axis(0)).unwrap().into_dyn();
        self.unary(out, move |g| {
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut da = Array2::<f32>::zeros((n, d));
            let scaled = gv.mapv(|x| x / n as f32);
            for mut row in da.rows_mut() {
                row.assign(&scaled);
            }
            vec![da.into_dyn()]
        })
    }

    /// `[n, d] -> [n]`, sum over columns.
    pub fn sum_axis1(&self) -> Tensor<'t> {
        let a = self.value();
        let (n, d) = dims2(&a);
        let out = as2(&a).sum_axis(Axis(1)).into_dyn();
        self.unary(out, move |g| {
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut da = Array2::<f32>::zeros((n, d));
            for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                row.fill(gv[i]);
            }
            vec![da.into_dyn()]
        })
    }

    // ---- concatenation ----

    pub fn concat_rows(parts: &[Tensor<'t>]) -> Tensor<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<_> = parts.iter().map(|t| t.value()).collect();
        let views: Vec<_> = vals.iter().map(|v| as2(v)).collect();
        let out = concatenate(Axis(0), &views).unwrap().into_dyn();
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[0]).collect();
        let ids: Vec<usize> = parts.iter().map(|t| t.id).collect();
        tape.op(
            out,
            ids,
            Box::new(move |g| {
                let gv = as2(g);
                let mut outp = Vec::with_capacity(sizes.len());
                let mut at = 0;
                for &n in &sizes {
                    outp.push(gv.slice(s![at..at + n, ..]).to_owned().into_dyn());
                    at += n;
                }
                outp
            }),
        )
    }

    pub fn concat_cols(parts: &[Tensor<'t>]) -> Tensor<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<_> = parts.iter().map(|t| t.value()).collect();
        let views: Vec<_> = vals.iter().map(|v| as2(v)).collect();
        let out = concatenate(Axis(1), &views).unwrap().into_dyn();
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[1]).collect();
        let ids: Vec<usize> = parts.iter().map(|t| t.id).collect();
        tape.op(
            out,
            ids,
            Box::new(move |g| {
                let gv = as2(g);
                let mut outp = Vec::with_capacity(sizes.len());
                let mut at = 0;
                for &d in &sizes {
                    outp.push(gv.slice(s![.., at..at + d]).to_owned().into_dyn());
                    at += d;
                }
                outp
            }),
        )
    }

    // ---- softmax family ----

    /// Rowwise softmax over the last axis of a `[n, m]` matrix. Columns where
    /// `valid` is false are excluded and get probability zero.
    pub fn softmax_lastdim(&self, valid: Option<&[bool]>) -> Tensor<'t> {
        let a = self.value();
        let (n, m) = dims2(&a);
        if let Some(v) = valid {
            assert_eq!(v.len(), m, "softmax mask length mismatch");
        }
        let valid: Vec<bool> = valid.map(|v| v.to_vec()).unwrap_or_else(|| vec![true; m]);
        let av = as2(&a);
        let mut out = Array2::<f32>::zeros((n, m));
        for i in 0..n {
            let mut mx = f32::NEG_INFINITY;
            for j in 0..m {
                if valid[j] {
                    mx = mx.max(av[[i, j]]);
                }
            }
            if !mx.is_finite() {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..m {
                if valid[j] {
                    let e = (av[[i, j]] - mx).exp();
                    out[[i, j]] = e;
                    sum += e;
                }
            }
            if sum > 0.0 {
                for j in 0..m {
                    out[[i, j]] /= sum;
                }
            }
        }
        let c = out.clone();
        self.unary(out.into_dyn(), move |g| {
            let gv = as2(g);
            let mut da = Array2::<f32>::zeros(c.dim());
            for i in 0..c.nrows() {
                let mut dot = 0.0;
                for j in 0..c.ncols() {
                    dot += gv[[i, j]] * c[[i, j]];
                }
                for j in 0..c.ncols() {
                    da[[i, j]] = c[[i, j]] * (gv[[i, j]] - dot);
                }
            }
            vec![da.into_dyn()]
        })
    }

    /// Rowwise log-softmax over the last axis of a `[n, m]` matrix.
    pub fn log_softmax_lastdim(&self) -> Tensor<'t> {
        let a = self.value();
        let (n, m) = dims2(&a);
        let av = as2(&a);
        let mut out = Array2::<f32>::zeros((n, m));
        for i in 0..n {
            let row = av.row(i);
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f32>().ln() + mx;
            for j in 0..m {
                out[[i, j]] = av[[i, j]] - lse;
            }
        }
        let c = out.clone();
        self.unary(out.into_dyn(), move |g| {
            let gv = as2(g);
            let mut da = Array2::<f32>::zeros(c.dim());
            for i in 0..c.nrows() {
                let rowsum: f32 = gv.row(i).sum();
                for j in 0..c.ncols() {
                    da[[i, j]] = gv[[i, j]] - c[[i, j]].exp() * rowsum;
                }
            }
            vec![da.into_dyn()]
        })
    }

    /// Pick one column per row: `out[i] = self[i, idx[i]]`.
    pub fn gather_cols(&self, idx: &[usize]) -> Tensor<'t> {
        let a = self.value();
        let (n, m) = dims2(&a);
        assert_eq!(idx.len(), n);
        assert!(idx.iter().all(|&j| j < m));
        let av = as2(&a);
        let out = Array1::from_iter(idx.iter().enumerate().map(|(i, &j)| av[[i, j]]));
        let idx: Vec<usize> = idx.to_vec();
        self.unary(out.into_dyn(), move |g| {
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut da = Array2::<f32>::zeros((n, m));
            for (i, &j) in idx.iter().enumerate() {
                da[[i, j]] = gv[i];
            }
            vec![da.into_dyn()]
        })
    }

    // ---- fused normalization ----

    /// LayerNorm over the last axis of `[n, d]` with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<'t>, beta: &Tensor<'t>, eps: f32) -> Tensor<'t> {
        let a = self.value();
        let (n, d) = dims2(&a);
        let gm = gamma.value();
        let bt = beta.value();
        assert_eq!(gm.len(), d);
        assert_eq!(bt.len(), d);
        let av = as2(&a);
        let gv = gm.view().into_dimensionality::<Ix1>().unwrap();
        let bv = bt.view().into_dimensionality::<Ix1>().unwrap();
        let mut xhat = Array2::<f32>::zeros((n, d));
        let mut inv_std = Array1::<f32>::zeros(n);
        let mut out = Array2::<f32>::zeros((n, d));
        for i in 0..n {
            let row = av.row(i);
            let mu = row.mean().unwrap();
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[[i, j]] = xh;
                out[[i, j]] = gv[j] * xh + bv[j];
            }
        }
        let gm2 = gm.clone();
        assert!(self.same_tape(gamma) && self.same_tape(beta));
        self.tape.op(
            out.into_dyn(),
            vec![self.id, gamma.id, beta.id],
            Box::new(move |g| {
                let gvw = as2(g);
                let gmv = gm2.view().into_dimensionality::<Ix1>().unwrap();
                let (n, d) = xhat.dim();
                let mut dx = Array2::<f32>::zeros((n, d));
                let mut dgamma = Array1::<f32>::zeros(d);
                let mut dbeta = Array1::<f32>::zeros(d);
                for i in 0..n {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = gvw[[i, j]] * gmv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[[i, j]];
                        dgamma[j] += gvw[[i, j]] * xhat[[i, j]];
                        dbeta[j] += gvw[[i, j]];
                    }
                    mean_dxhat /= d as f32;
                    mean_dxhat_xhat /= d as f32;
                    for j in 0..d {
                        let dxh = gvw[[i, j]] * gmv[j];
                        dx[[i, j]] =
                            (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat) * inv_std[i];
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            }),
        )
    }

    /// GroupNorm over a `[c, h, w]` feature map.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Tensor<'t>,
        beta: &Tensor<'t>,
        eps: f32,
    ) -> Tensor<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        assert_eq!(shape.len(), 3, "group_norm expects [c, h, w]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(c % groups, 0);
        let per = c / groups;
        let gsize = (per * h * w) as f32;
        let gm = gamma.value();
        let bt = beta.value();
        assert_eq!(gm.len(), c);
        assert_eq!(bt.len(), c);

        let flat = a.as_slice().unwrap();
        let mut xhat = vec![0.0f32; flat.len()];
        let mut inv_std = vec![0.0f32; groups];
        let mut out = vec![0.0f32; flat.len()];
        let gms = gm.as_slice().unwrap().to_vec();
        let bts = bt.as_slice().unwrap();
        let plane = h * w;
        for gi in 0..groups {
            let lo = gi * per * plane;
            let hi = lo + per * plane;
            let mu: f32 = flat[lo..hi].iter().sum::<f32>() / gsize;
            let var: f32 = flat[lo..hi].iter().map(|&x| (x - mu) * (x - mu)).sum::<f32>() / gsize;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            for idx in lo..hi {
                let ch = idx / plane;
                let xh = (flat[idx] - mu) * is;
                xhat[idx] = xh;
                out[idx] = gms[ch] * xh + bts[ch];
            }
        }
        let out = Arr::from_shape_vec(IxDyn(&shape), out).unwrap();
        assert!(self.same_tape(gamma) && self.same_tape(beta));
        self.tape.op(
            out,
            vec![self.id, gamma.id, beta.id],
            Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0f32; gs.len()];
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for gi in 0..groups {
                    let lo = gi * per * plane;
                    let hi = lo + per * plane;
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for idx in lo..hi {
                        let ch = idx / plane;
                        let dxh = gs[idx] * gms[ch];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[idx];
                        dgamma[ch] += gs[idx] * xhat[idx];
                        dbeta[ch] += gs[idx];
                    }
                    mean_dxhat /= gsize;
                    mean_dxhat_xhat /= gsize;
                    for idx in lo..hi {
                        let ch = idx / plane;
                        let dxh = gs[idx] * gms[ch];
                        dx[idx] = (dxh - mean_dxhat - xhat[idx] * mean_dxhat_xhat) * inv_std[gi];
                    }
                }
                vec![
                    Arr::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap(),
                    Arr::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                    Arr::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
                ]
            }),
        )
    }

    // ---- convolution ----

    /// 2-D convolution of `[cin, h, w]` with weights `[cout, cin*k*k]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<'t>,
        bias: &Tensor<'t>,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Tensor<'t> {
        let x = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let shape = x.shape().to_vec();
        assert_eq!(shape.len(), 3, "conv2d expects [cin, h, w]");
        let (cin, h, w) = (shape[0], shape[1], shape[2]);
        let (cout, wk) = dims2(&wv);
        assert_eq!(wk, cin * k * k, "conv2d: weight dims mismatch");
        assert_eq!(bv.len(), cout);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;

        let cols = im2col(&x, k, stride, pad, oh, ow);
        let w2 = as2(&wv);
        let mut out2 = w2.dot(&cols);
        let bvv = bv.view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, &b) in out2.rows_mut().into_iter().zip(bvv.iter()) {
            row += b;
        }
        let out = out2
            .into_shape_with_order((cout, oh, ow))
            .unwrap()
            .into_dyn();

        let cols = Arc::new(cols);
        let wv2 = wv.clone();
        assert!(self.same_tape(weight) && self.same_tape(bias));
        self.tape.op(
            out,
            vec![self.id, weight.id, bias.id],
            Box::new(move |g| {
                let g2 = g.to_shape((cout, oh * ow)).unwrap().to_owned();
                let dw = g2.dot(&cols.t()).into_dyn();
                let db = g2.sum_axis(Axis(1)).into_dyn();
                let dcols = as2(&wv2).t().dot(&g2);
                let dx = col2im(&dcols, cin, h, w, k, stride, pad, oh, ow);
                vec![dx, dw, db]
            }),
        )
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &Arr, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f32> {
    let shape = x.shape();
    let (cin, h, w) = (shape[0], shape[1], shape[2]);
    let xs = x.as_slice().unwrap();
    let mut cols = Array2::<f32>::zeros((cin * k * k, oh * ow));
    {
        let cs = cols.as_slice_mut().unwrap();
        for c in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let base = row * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = (c * h + iy as usize) * w;
                        let dst = base + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[dst + ox] = xs[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f32>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Arr {
    let mut dx = vec![0.0f32; cin * h * w];
    let std_order;
    let ds = match dcols.as_slice() {
        Some(s) => s,
        None => {
            std_order = dcols.as_standard_layout().into_owned();
            std_order.as_slice().unwrap()
        }
    };
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w;
                    let src = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst + ix as usize] += ds[src + ox];
                        }
                    }
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[cin, h, w]), dx).unwrap()
}
