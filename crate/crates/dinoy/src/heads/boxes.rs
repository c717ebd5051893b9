//! Box regression: GIoU, L1, and the anchor-refining box head.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fusion::inverse_sigmoid;
use crate::nn::{Ctx, Mlp, ParamStore};
use crate::tensor::Tensor;

fn corners(b: [f32; 4]) -> [f32; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

fn check_box(b: [f32; 4]) -> Result<()> {
    if b[2] <= 0.0 || b[3] <= 0.0 || !b.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateBox(b[0], b[1], b[2], b[3]));
    }
    Ok(())
}

/// Generalized IoU of two `(cx, cy, w, h)` boxes, in (−1, 1].
pub fn giou(a: [f32; 4], b: [f32; 4]) -> Result<f32> {
    check_box(a)?;
    check_box(b)?;
    let ca = corners(a);
    let cb = corners(b);
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let enc = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    Ok(inter / union - (enc - union) / enc)
}

/// Per-row GIoU of predicted boxes against fixed targets, differentiable in
/// the predictions. Both sides are `[n, 4]` in `(cx, cy, w, h)`; output `[n, 1]`.
pub fn giou_rows<'t>(pred: Tensor<'t>, gt: &Array2<f32>) -> Result<Tensor<'t>> {
    let pv = pred.to_arr();
    let n = gt.nrows();
    if pred.dims() != [n, 4] {
        return Err(Error::Shape {
            op: "giou_rows",
            expected: format!("[{n}, 4]"),
            got: format!("{:?}", pred.dims()),
        });
    }
    for i in 0..n {
        check_box([pv[[i, 0]], pv[[i, 1]], pv[[i, 2]], pv[[i, 3]]])?;
        check_box([gt[[i, 0]], gt[[i, 1]], gt[[i, 2]], gt[[i, 3]]])?;
    }

    let col = |j: usize| pred.slice_cols(j..j + 1);
    let gcol = |j: usize| {
        let mut c = Array2::<f32>::zeros((n, 1));
        for i in 0..n {
            c[[i, 0]] = gt[[i, j]];
        }
        pred.tape.constant(c.into_dyn())
    };
    let (cx, cy, w, h) = (col(0), col(1), col(2), col(3));
    let (gx, gy, gw, gh) = (gcol(0), gcol(1), gcol(2), gcol(3));
    let x0 = cx.sub(&w.scale(0.5));
    let x1 = cx.add(&w.scale(0.5));
    let y0 = cy.sub(&h.scale(0.5));
    let y1 = cy.add(&h.scale(0.5));
    let gx0 = gx.sub(&gw.scale(0.5));
    let gx1 = gx.add(&gw.scale(0.5));
    let gy0 = gy.sub(&gh.scale(0.5));
    let gy1 = gy.add(&gh.scale(0.5));

    let iw = x1.minimum(&gx1).sub(&x0.maximum(&gx0)).relu();
    let ih = y1.minimum(&gy1).sub(&y0.maximum(&gy0)).relu();
    let inter = iw.mul(&ih);
    let union = w.mul(&h).add(&gw.mul(&gh)).sub(&inter);
    let ew = x1.maximum(&gx1).sub(&x0.minimum(&gx0));
    let eh = y1.maximum(&gy1).sub(&y0.minimum(&gy0));
    let enc = ew.mul(&eh);
    Ok(inter.div(&union).sub(&enc.sub(&union).div(&enc)))
}

/// Per-row L1 distance `Σ|pred − gt|` over the four coordinates; `[n]`.
pub fn l1_rows<'t>(pred: Tensor<'t>, gt: &Array2<f32>) -> Tensor<'t> {
    let g = pred.tape.constant(gt.clone().into_dyn());
    pred.sub(&g).abs().sum_axis1()
}

/// Three-layer MLP producing box deltas applied to an anchor in
/// inverse-sigmoid space, so outputs stay in (0, 1) and a zero-initialized
/// final layer reproduces the anchor exactly.
pub struct BoxHead {
    mlp: Mlp,
}

impl BoxHead {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        BoxHead {
            mlp: Mlp::new(store, name, &[d, d, d, 4], true),
        }
    }

    pub fn refine<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        content: Tensor<'t>,
        anchors: Tensor<'t>,
    ) -> Tensor<'t> {
        inverse_sigmoid(anchors)
            .add(&self.mlp.fwd(ctx, content))
            .sigmoid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::rand_arr;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_box(rng: &mut ChaCha8Rng) -> [f32; 4] {
        [
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.05..0.4),
            rng.random_range(0.05..0.4),
        ]
    }

    #[test]
    fn identical_boxes_have_giou_one() {
        let b = [0.3f32, 0.4, 0.2, 0.1];
        assert!((giou(b, b).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn giou_is_bitwise_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
            assert_eq!(giou(a, b).unwrap(), giou(b, a).unwrap());
        }
    }

    #[test]
    fn giou_never_exceeds_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
            let g = giou(a, b).unwrap();
            let ca = corners(a);
            let cb = corners(b);
            let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
            let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
            let inter = iw * ih;
            let iou = inter / (a[2] * a[3] + b[2] * b[3] - inter);
            assert!(g <= iou + 1e-6, "giou {g} > iou {iou}");
        }
    }

    #[test]
    fn separated_squares_approach_minus_one() {
        let a = [0.0f32, 0.0, 1.0, 1.0];
        let mut prev = 1.0f32;
        for k in 1..30 {
            let dist = k as f32;
            let g = giou([dist, 0.0, 1.0, 1.0], a).unwrap();
            assert!(g < prev, "giou must fall with distance");
            prev = g;
        }
        assert!(prev > -1.0 && prev < -0.9);
    }

    #[test]
    fn zero_area_box_is_rejected() {
        match giou([0.5, 0.5, 0.0, 0.2], [0.5, 0.5, 0.1, 0.1]) {
            Err(Error::DegenerateBox(_, _, w, _)) => assert_eq!(w, 0.0),
            other => panic!("expected degenerate-box error, got {other:?}"),
        }
    }

    #[test]
    fn giou_matches_pixel_counting_on_reference_pair() {
        let a = [0.25f32, 0.25, 0.5, 0.5];
        let b = [0.35f32, 0.25, 0.5, 0.5];
        let ca = corners(a);
        let cb = corners(b);
        let n = 1000usize;
        let (mut na, mut nb, mut ni, mut nc) = (0u64, 0u64, 0u64, 0u64);
        let ex = [
            ca[0].min(cb[0]),
            ca[1].min(cb[1]),
            ca[2].max(cb[2]),
            ca[3].max(cb[3]),
        ];
        for iy in 0..n {
            let y = (iy as f32 + 0.5) / n as f32;
            for ix in 0..n {
                let x = (ix as f32 + 0.5) / n as f32;
                let in_a = x >= ca[0] && x < ca[2] && y >= ca[1] && y < ca[3];
                let in_b = x >= cb[0] && x < cb[2] && y >= cb[1] && y < cb[3];
                na += in_a as u64;
                nb += in_b as u64;
                ni += (in_a && in_b) as u64;
                nc += (x >= ex[0] && x < ex[2] && y >= ex[1] && y < ex[3]) as u64;
            }
        }
        let union = (na + nb - ni) as f64;
        let raster = ni as f64 / union - (nc as f64 - union) / nc as f64;
        let exact = giou(a, b).unwrap() as f64;
        assert!(
            (raster - exact).abs() < 1e-3,
            "raster {raster} vs closed form {exact}"
        );
    }

    fn giou_f64(a: &[f64; 4], b: &[f64; 4]) -> f64 {
        let c = |v: &[f64; 4]| {
            [
                v[0] - v[2] / 2.0,
                v[1] - v[3] / 2.0,
                v[0] + v[2] / 2.0,
                v[1] + v[3] / 2.0,
            ]
        };
        let (ca, cb) = (c(a), c(b));
        let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
        let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
        let inter = iw * ih;
        let union = a[2] * a[3] + b[2] * b[3] - inter;
        let enc = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
        inter / union - (enc - union) / enc
    }

    #[test]
    fn row_giou_gradients_match_f64_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20usize;
        let mut pred = Array2::<f32>::zeros((n, 4));
        let mut gt = Array2::<f32>::zeros((n, 4));
        for i in 0..n {
            // keep boxes overlapping and away from corner-degenerate setups
            let g = rand_box(&mut rng);
            for j in 0..4 {
                gt[[i, j]] = g[j];
            }
            pred[[i, 0]] = g[0] + rng.random_range(-0.02..0.02);
            pred[[i, 1]] = g[1] + rng.random_range(-0.02..0.02);
            pred[[i, 2]] = g[2] * rng.random_range(0.8..1.2);
            pred[[i, 3]] = g[3] * rng.random_range(0.8..1.2);
        }

        let tape = Tape::new();
        let p = tape.leaf(pred.clone().into_dyn());
        let loss = giou_rows(p, &gt).unwrap().neg().add_scalar(1.0).sum_all();
        let grads = tape.backward(loss);
        let analytic = grads.get(p).unwrap().clone();

        let h = 1e-6f64;
        for i in 0..n {
            let gb = [
                gt[[i, 0]] as f64,
                gt[[i, 1]] as f64,
                gt[[i, 2]] as f64,
                gt[[i, 3]] as f64,
            ];
            for j in 0..4 {
                let mut pb = [
                    pred[[i, 0]] as f64,
                    pred[[i, 1]] as f64,
                    pred[[i, 2]] as f64,
                    pred[[i, 3]] as f64,
                ];
                pb[j] += h;
                let up = 1.0 - giou_f64(&pb, &gb);
                pb[j] -= 2.0 * h;
                let dn = 1.0 - giou_f64(&pb, &gb);
                let numeric = (up - dn) / (2.0 * h);
                let got = analytic[[i, j]] as f64;
                let denom = numeric.abs().max(got.abs()).max(1e-2);
                assert!(
                    ((got - numeric) / denom).abs() < 1e-4,
                    "d giou loss / d pred[{i},{j}]: autodiff {got} vs f64 fd {numeric}"
                );
            }
        }
    }

    #[test]
    fn l1_gradient_is_coordinate_sign() {
        let gt = ndarray::arr2(&[[0.5f32, 0.5, 0.2, 0.2]]);
        let pred = ndarray::arr2(&[[0.6f32, 0.4, 0.25, 0.1]]);
        let tape = Tape::new();
        let p = tape.leaf(pred.into_dyn());
        let loss = l1_rows(p, &gt).sum_all();
        let grads = tape.backward(loss);
        let g = grads.get(p).unwrap();
        let expect = [1.0f32, -1.0, 1.0, -1.0];
        for (got, want) in g.iter().zip(expect) {
            assert_eq!(*got, want);
        }
    }

    #[test]
    fn zero_initialized_head_reproduces_anchors_in_unit_range() {
        let mut store = ParamStore::new(3);
        let head = BoxHead::new(&mut store, "boxhead", 16);
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let content = tape.constant(rand_arr(&[6, 16], 4, -2.0, 2.0));
        let anchors = tape.constant(rand_arr(&[6, 4], 5, 0.05, 0.95));
        let out = head.refine(&ctx, content, anchors);
        let (o, a) = (out.to_arr(), anchors.to_arr());
        for (x, y) in o.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-5);
            assert!(*x > 0.0 && *x < 1.0);
        }
    }

    #[test]
    fn head_l1_loss_gradient_matches_f64_reimplementation() {
        let d = 12usize;
        let mut store = ParamStore::new(8);
        let head = BoxHead::new(&mut store, "boxhead", d);
        // move the zero-initialized final layer so content influences boxes
        let final_w = rand_arr(&[4, d], 9, -0.3, 0.3);
        let final_b = rand_arr(&[4], 10, -0.1, 0.1);
        store.set("boxhead.2.w", final_w).unwrap();
        store.set("boxhead.2.b", final_b).unwrap();

        let content = rand_arr(&[1, d], 11, -1.0, 1.0);
        let anchor = [0.4f32, 0.55, 0.3, 0.25];
        let gt = [0.5f32, 0.5, 0.2, 0.2];

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let c = tape.leaf(content.clone());
        let anchors = tape.constant(ndarray::arr2(&[anchor]).into_dyn());
        let boxes = head.refine(&ctx, c, anchors);
        let loss = l1_rows(boxes, &ndarray::arr2(&[gt])).sum_all();
        let grads = tape.backward(loss);
        let analytic = grads.get(c).unwrap().clone();

        // independent f64 forward: three linears with relu between, then the
        // inverse-sigmoid refinement and the L1 distance
        let w = |name: &str| {
            let a = store.get(store.id_of(name).unwrap());
            a.iter().map(|&v| v as f64).collect::<Vec<f64>>()
        };
        let (w0, b0) = (w("boxhead.0.w"), w("boxhead.0.b"));
        let (w1, b1) = (w("boxhead.1.w"), w("boxhead.1.b"));
        let (w2, b2) = (w("boxhead.2.w"), w("boxhead.2.b"));
        let forward = |x: &[f64]| -> f64 {
            let lin = |x: &[f64], w: &[f64], b: &[f64], dout: usize| {
                let din = x.len();
                (0..dout)
                    .map(|o| b[o] + (0..din).map(|i| w[o * din + i] * x[i]).sum::<f64>())
                    .collect::<Vec<f64>>()
            };
            let h0: Vec<f64> = lin(x, &w0, &b0, d).iter().map(|v| v.max(0.0)).collect();
            let h1: Vec<f64> = lin(&h0, &w1, &b1, d).iter().map(|v| v.max(0.0)).collect();
            let delta = lin(&h1, &w2, &b2, 4);
            let mut loss = 0.0;
            for j in 0..4 {
                let a = (anchor[j] as f64).clamp(1e-5, 1.0 - 1e-5);
                let logit = (a / (1.0 - a)).ln() + delta[j];
                let out = 1.0 / (1.0 + (-logit).exp());
                loss += (out - gt[j] as f64).abs();
            }
            loss
        };

        let h = 1e-6f64;
        let x0: Vec<f64> = content.iter().map(|&v| v as f64).collect();
        for i in 0..d {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let numeric = (forward(&xp) - forward(&xm)) / (2.0 * h);
            let got = analytic[[0, i]] as f64;
            let denom = numeric.abs().max(got.abs()).max(1e-2);
            assert!(
                ((got - numeric) / denom).abs() < 1e-4,
                "d loss / d content[{i}]: autodiff {got} vs f64 fd {numeric}"
            );
        }
    }
}
