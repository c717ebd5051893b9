//! Bilinear sampling and resizing, differentiable w.r.t. the feature map and
//! (for point sampling) the sample coordinates.

use ndarray::{Array2, ArrayView3, Ix2, Ix3, IxDyn};

use super::{Arr, Tensor};

/// Bilinear lookup on a `[c, h, w]` map at normalized coords `(x, y)` in
/// `[0, 1]` mapped so the corner pixels sit exactly at 0 and 1. Coordinates
/// outside the range clamp to the border.
pub fn bilinear_at(map: &ArrayView3<f32>, x: f32, y: f32, out: &mut [f32]) {
    let (c, h, w) = map.dim();
    debug_assert_eq!(out.len(), c);
    let (x0, x1, wx) = span(x, w);
    let (y0, y1, wy) = span(y, h);
    for ch in 0..c {
        let v00 = map[[ch, y0, x0]];
        let v01 = map[[ch, y0, x1]];
        let v10 = map[[ch, y1, x0]];
        let v11 = map[[ch, y1, x1]];
        out[ch] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
    }
}

/// `(lo index, hi index, fractional weight)` for one axis with border clamp.
fn span(t: f32, n: usize) -> (usize, usize, f32) {
    let p = (t * (n as f32 - 1.0)).clamp(0.0, n as f32 - 1.0);
    let lo = p.floor();
    let i0 = lo as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - lo)
}

/// True when the un-clamped pixel coordinate falls strictly inside the map so
/// the sample value actually varies with the coordinate.
fn in_linear_region(t: f32, n: usize) -> bool {
    let p = t * (n as f32 - 1.0);
    p > 0.0 && p < n as f32 - 1.0
}

impl<'t> Tensor<'t> {
    /// Sample a `[c, h, w]` map at `[p, 2]` normalized `(x, y)` points,
    /// producing `[p, c]`. Gradients flow into the map and the points.
    pub fn grid_sample(&self, points: &Tensor<'t>) -> Tensor<'t> {
        assert!(self.same_tape(points));
        let map = self.value();
        let pts = points.value();
        let mv = map
            .view()
            .into_dimensionality::<Ix3>()
            .expect("grid_sample: map must be [c, h, w]");
        let pv = pts
            .view()
            .into_dimensionality::<Ix2>()
            .expect("grid_sample: points must be [p, 2]");
        assert_eq!(pv.ncols(), 2);
        let (c, h, w) = mv.dim();
        let p = pv.nrows();

        let mut out = Array2::<f32>::zeros((p, c));
        for i in 0..p {
            bilinear_at(&mv, pv[[i, 0]], pv[[i, 1]], out.row_mut(i).as_slice_mut().unwrap());
        }

        let map_c = map.clone();
        let pts_c = pts.clone();
        self.tape.op(
            out.into_dyn(),
            vec![self.id, points.id],
            Box::new(move |g| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mv = map_c.view().into_dimensionality::<Ix3>().unwrap();
                let pv = pts_c.view().into_dimensionality::<Ix2>().unwrap();
                let mut dmap = Arr::zeros(map_c.raw_dim());
                let mut dpts = Array2::<f32>::zeros((p, 2));
                {
                    let mut dm = dmap.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for i in 0..p {
                        let (x, y) = (pv[[i, 0]], pv[[i, 1]]);
                        let (x0, x1, wx) = span(x, w);
                        let (y0, y1, wy) = span(y, h);
                        let mut ddx = 0.0;
                        let mut ddy = 0.0;
                        for ch in 0..c {
                            let go = gv[[i, ch]];
                            dm[[ch, y0, x0]] += go * (1.0 - wy) * (1.0 - wx);
                            dm[[ch, y0, x1]] += go * (1.0 - wy) * wx;
                            dm[[ch, y1, x0]] += go * wy * (1.0 - wx);
                            dm[[ch, y1, x1]] += go * wy * wx;
                            let v00 = mv[[ch, y0, x0]];
                            let v01 = mv[[ch, y0, x1]];
                            let v10 = mv[[ch, y1, x0]];
                            let v11 = mv[[ch, y1, x1]];
                            ddx += go * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                            ddy += go * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                        }
                        if in_linear_region(x, w) {
                            dpts[[i, 0]] = ddx * (w as f32 - 1.0);
                        }
                        if in_linear_region(y, h) {
                            dpts[[i, 1]] = ddy * (h as f32 - 1.0);
                        }
                    }
                }
                vec![dmap, dpts.into_dyn()]
            }),
        )
    }

    /// Bilinearly resize a `[c, h, w]` map to `[c, oh, ow]` using the
    /// pixel-center convention (`src = (dst + 0.5) * h / oh - 0.5`).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Tensor<'t> {
        let map = self.value();
        let shape = map.shape().to_vec();
        assert_eq!(shape.len(), 3, "resize_bilinear expects [c, h, w]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let plan_y = resize_plan(h, oh);
        let plan_x = resize_plan(w, ow);
        let mv = map.view().into_dimensionality::<Ix3>().unwrap();
        let mut out = Arr::zeros(IxDyn(&[c, oh, ow]));
        {
            let mut ov = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for ch in 0..c {
                for oy in 0..oh {
                    let (y0, y1, wy) = plan_y[oy];
                    for ox in 0..ow {
                        let (x0, x1, wx) = plan_x[ox];
                        ov[[ch, oy, ox]] = (1.0 - wy)
                            * ((1.0 - wx) * mv[[ch, y0, x0]] + wx * mv[[ch, y0, x1]])
                            + wy * ((1.0 - wx) * mv[[ch, y1, x0]] + wx * mv[[ch, y1, x1]]);
                    }
                }
            }
        }
        self.tape.op(
            out,
            vec![self.id],
            Box::new(move |g| {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dmap = Arr::zeros(IxDyn(&[c, h, w]));
                {
                    let mut dm = dmap.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for ch in 0..c {
                        for oy in 0..oh {
                            let (y0, y1, wy) = plan_y[oy];
                            for ox in 0..ow {
                                let (x0, x1, wx) = plan_x[ox];
                                let go = gv[[ch, oy, ox]];
                                dm[[ch, y0, x0]] += go * (1.0 - wy) * (1.0 - wx);
                                dm[[ch, y0, x1]] += go * (1.0 - wy) * wx;
                                dm[[ch, y1, x0]] += go * wy * (1.0 - wx);
                                dm[[ch, y1, x1]] += go * wy * wx;
                            }
                        }
                    }
                }
                vec![dmap]
            }),
        )
    }
}

fn resize_plan(n: usize, on: usize) -> Vec<(usize, usize, f32)> {
    (0..on)
        .map(|o| {
            let src = ((o as f32 + 0.5) * n as f32 / on as f32 - 0.5).clamp(0.0, n as f32 - 1.0);
            let lo = src.floor();
            let i0 = lo as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - lo)
        })
        .collect()
}

/// Plain-array bilinear resize with the same convention as
/// [`Tensor::resize_bilinear`], for use outside the tape.
pub fn resize_bilinear_arr(map: &ArrayView3<f32>, oh: usize, ow: usize) -> Arr {
    let (c, h, w) = map.dim();
    let plan_y = resize_plan(h, oh);
    let plan_x = resize_plan(w, ow);
    let mut out = Arr::zeros(IxDyn(&[c, oh, ow]));
    let mut ov = out.view_mut().into_dimensionality::<Ix3>().unwrap();
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1, wy) = plan_y[oy];
            for ox in 0..ow {
                let (x0, x1, wx) = plan_x[ox];
                ov[[ch, oy, ox]] = (1.0 - wy)
                    * ((1.0 - wx) * map[[ch, y0, x0]] + wx * map[[ch, y0, x1]])
                    + wy * ((1.0 - wx) * map[[ch, y1, x0]] + wx * map[[ch, y1, x1]]);
            }
        }
    }
    drop(ov);
    out
}
