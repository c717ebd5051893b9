//! Mask prediction: a stride-4 pixel embedding map, per-query dot-product
//! logits, and a point-sampled BCE + dice loss.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{backbone::S4_CHANNELS, map_to_tokens};
use crate::nn::{Conv2d, Ctx, Linear, ParamStore};
use crate::tensor::{bilinear_at, Tensor};

pub struct MaskHead {
    bb_proj: Conv2d,
    enc_proj: Conv2d,
    fuse: Conv2d,
    query_proj: Linear,
}

impl MaskHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d = cfg.d;
        MaskHead {
            bb_proj: Conv2d::new(store, "mask.bb_proj", S4_CHANNELS, d, 1, 1, 0),
            enc_proj: Conv2d::new(store, "mask.enc_proj", d, d, 1, 1, 0),
            fuse: Conv2d::new(store, "mask.fuse", d, d, 3, 1, 1),
            query_proj: Linear::new(store, "mask.query", d, d),
        }
    }

    /// Fuse the raw stride-4 backbone map `[c4, H/4, W/4]` with the encoder's
    /// stride-8 memory map `[d, H/8, W/8]` (upsampled ×2) into a pixel
    /// embedding map `[d, H/4, W/4]`.
    pub fn pixel_map<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        raw_s4: Tensor<'t>,
        enc_s8: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let (s4, s8) = (raw_s4.dims(), enc_s8.dims());
        if s4.len() != 3 || s8.len() != 3 || s4[1] != 2 * s8[1] || s4[2] != 2 * s8[2] {
            return Err(Error::Shape {
                op: "pixel_map",
                expected: "stride-4 map exactly twice the stride-8 map".into(),
                got: format!("{s4:?} vs {s8:?}"),
            });
        }
        let up = enc_s8.resize_bilinear(s4[1], s4[2]);
        let summed = self
            .bb_proj
            .fwd(ctx, raw_s4)
            .add(&self.enc_proj.fwd(ctx, up));
        Ok(self.fuse.fwd(ctx, summed).relu())
    }

    /// Per-query mask logits `[Q, h, w]`: projected content dotted with every
    /// pixel embedding.
    pub fn mask_logits<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        content: Tensor<'t>,
        pixel_map: Tensor<'t>,
    ) -> Tensor<'t> {
        let q = content.dims()[0];
        let (h, w) = (pixel_map.dims()[1], pixel_map.dims()[2]);
        let proj = self.query_proj.fwd(ctx, content);
        proj.matmul_nt(&map_to_tokens(pixel_map)).reshape(&[q, h, w])
    }
}

/// BCE + dice (with +1 smoothing) over explicit sample points.
///
/// `pred` is a `[h, w]` logit grid sampled bilinearly at `points` (`[p, 2]`
/// normalized `(x, y)`, corners at 0 and 1); `gt` is read the same way at any
/// resolution. Gradients flow only into `pred`.
pub fn mask_loss_at_points<'t>(
    pred: Tensor<'t>,
    gt: &Array2<f32>,
    points: &Array2<f32>,
) -> Tensor<'t> {
    let dims = pred.dims();
    let (h, w) = (dims[0], dims[1]);
    let n = points.nrows();
    assert!(n > 0);

    let map = pred.reshape(&[1, h, w]);
    let pts = pred.tape.constant(points.clone().into_dyn());
    let logits = map.grid_sample(&pts);

    let gt3 = gt
        .view()
        .into_shape_with_order((1, gt.nrows(), gt.ncols()))
        .unwrap();
    let mut t = Array2::<f32>::zeros((n, 1));
    let mut buf = [0.0f32];
    for i in 0..n {
        bilinear_at(&gt3, points[[i, 0]], points[[i, 1]], &mut buf);
        t[[i, 0]] = buf[0];
    }
    let t = pred.tape.constant(t.into_dyn());

    let bce = t
        .mul(&logits.neg().softplus())
        .add(&t.neg().add_scalar(1.0).mul(&logits.softplus()))
        .mean_all();

    let p = logits.sigmoid();
    let num = p.mul(&t).sum_all().scale(2.0).add_scalar(1.0);
    let den = p.sum_all().add(&t.sum_all()).add_scalar(1.0);
    let dice = num.div(&den).neg().add_scalar(1.0);

    bce.add(&dice)
}

/// Draw `n` points uniformly in the unit square.
fn uniform_points(n: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let mut pts = Array2::<f32>::zeros((n, 2));
    for i in 0..n {
        pts[[i, 0]] = rng.random_range(0.0..1.0);
        pts[[i, 1]] = rng.random_range(0.0..1.0);
    }
    pts
}

/// Point-sampled mask loss. With `importance` set, oversample 3·n uniform
/// candidates, keep the 75% of n with the smallest |logit| (most uncertain)
/// and fill the rest with fresh uniform points; otherwise sample n uniformly.
pub fn point_sampled_mask_loss<'t>(
    pred: Tensor<'t>,
    gt: &Array2<f32>,
    n_points: usize,
    importance: bool,
    rng: &mut ChaCha8Rng,
) -> Tensor<'t> {
    assert!(n_points >= 1);
    let points = if importance {
        let cand = uniform_points(3 * n_points, rng);
        let pv = pred.to_arr();
        let dims = pv.shape().to_vec();
        let view = pv
            .view()
            .into_shape_with_order((1, dims[0], dims[1]))
            .unwrap();
        let mut scored: Vec<(f32, usize)> = (0..cand.nrows())
            .map(|i| {
                let mut buf = [0.0f32];
                bilinear_at(&view, cand[[i, 0]], cand[[i, 1]], &mut buf);
                (buf[0].abs(), i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n_hard = (3 * n_points) / 4;
        let fresh = uniform_points(n_points - n_hard, rng);
        let mut pts = Array2::<f32>::zeros((n_points, 2));
        for (row, &(_, src)) in scored.iter().take(n_hard).enumerate() {
            pts[[row, 0]] = cand[[src, 0]];
            pts[[row, 1]] = cand[[src, 1]];
        }
        for i in 0..fresh.nrows() {
            pts[[n_hard + i, 0]] = fresh[[i, 0]];
            pts[[n_hard + i, 1]] = fresh[[i, 1]];
        }
        pts
    } else {
        uniform_points(n_points, rng)
    };
    mask_loss_at_points(pred, gt, &points)
}
