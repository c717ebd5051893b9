//! Strided convnet producing a four-level feature pyramid.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm2d};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Raw backbone channel widths per stride {4, 8, 16, 32}.
const CH: [usize; 4] = [24, 48, 96, 128];
const GN_GROUPS: usize = 8;

/// Channel count of the unprojected stride-4 map handed to the mask head.
pub const S4_CHANNELS: usize = CH[0];

pub struct MultiScaleFeatures<'t> {
    /// `(stride, [d, H_l, W_l])` at strides 4, 8, 16, 32
    pub levels: Vec<(usize, Tensor<'t>)>,
    /// unprojected stride-4 features; consumed only by the mask head
    pub raw_s4: Tensor<'t>,
}

impl<'t> MultiScaleFeatures<'t> {
    /// Levels that become encoder memory (stride-4 excluded).
    pub fn memory_levels(&self) -> &[(usize, Tensor<'t>)] {
        &self.levels[1..]
    }
}

struct Stage {
    conv: Conv2d,
    gn: GroupNorm2d,
}

impl Stage {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Stage {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, 1),
            gn: GroupNorm2d::new(store, &format!("{name}.gn"), GN_GROUPS, cout),
        }
    }

    fn fwd<'t>(&self, ctx: &Ctx<'t, '_>, x: Tensor<'t>) -> Tensor<'t> {
        self.gn.fwd(ctx, self.conv.fwd(ctx, x)).relu()
    }
}

pub struct Backbone {
    stem: Stage,
    s4: Stage,
    s4b: Stage,
    s8: Stage,
    s8b: Stage,
    s16: Stage,
    s32: Stage,
    proj: [Conv2d; 4],
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d = cfg.d;
        let proj = [
            Conv2d::new(store, "backbone.proj4", CH[0], d, 1, 1, 0),
            Conv2d::new(store, "backbone.proj8", CH[1], d, 1, 1, 0),
            Conv2d::new(store, "backbone.proj16", CH[2], d, 1, 1, 0),
            Conv2d::new(store, "backbone.proj32", CH[3], d, 1, 1, 0),
        ];
        Backbone {
            stem: Stage::new(store, "backbone.stem", 3, CH[0], 2),
            s4: Stage::new(store, "backbone.s4", CH[0], CH[0], 2),
            s4b: Stage::new(store, "backbone.s4b", CH[0], CH[0], 1),
            s8: Stage::new(store, "backbone.s8", CH[0], CH[1], 2),
            s8b: Stage::new(store, "backbone.s8b", CH[1], CH[1], 1),
            s16: Stage::new(store, "backbone.s16", CH[1], CH[2], 2),
            s32: Stage::new(store, "backbone.s32", CH[2], CH[3], 2),
            proj,
        }
    }

    pub fn fwd<'t>(&self, ctx: &Ctx<'t, '_>, image: Tensor<'t>) -> Result<MultiScaleFeatures<'t>> {
        let dims = image.dims();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(Error::Shape {
                op: "backbone",
                expected: "[3, H, W]".into(),
                got: format!("{dims:?}"),
            });
        }
        let (h, w) = (dims[1], dims[2]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::BadImageSize(h, w));
        }
        let x2 = self.stem.fwd(ctx, image);
        let x4 = self.s4b.fwd(ctx, self.s4.fwd(ctx, x2));
        let x8 = self.s8b.fwd(ctx, self.s8.fwd(ctx, x4));
        let x16 = self.s16.fwd(ctx, x8);
        let x32 = self.s32.fwd(ctx, x16);
        let levels = vec![
            (4, self.proj[0].fwd(ctx, x4)),
            (8, self.proj[1].fwd(ctx, x8)),
            (16, self.proj[2].fwd(ctx, x16)),
            (32, self.proj[3].fwd(ctx, x32)),
        ];
        Ok(MultiScaleFeatures { levels, raw_s4: x4 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Arr, Tape};

    fn build() -> (ParamStore, Backbone) {
        let mut store = ParamStore::new(1);
        let bb = Backbone::new(&mut store, &ModelConfig::default());
        (store, bb)
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let (store, bb) = build();
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let img = tape.constant(Arr::zeros(ndarray::IxDyn(&[3, 128, 96])));
        let feats = bb.fwd(&ctx, img).unwrap();
        let expect = [(4, 32, 24), (8, 16, 12), (16, 8, 6), (32, 4, 3)];
        for ((stride, t), (es, eh, ew)) in feats.levels.iter().zip(expect) {
            assert_eq!(*stride, es);
            assert_eq!(t.dims(), vec![128, eh, ew]);
        }
        assert_eq!(feats.raw_s4.dims(), vec![CH[0], 32, 24]);
        assert_eq!(feats.memory_levels().len(), 3);
    }

    #[test]
    fn zero_image_stays_finite() {
        let (store, bb) = build();
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let img = tape.constant(Arr::zeros(ndarray::IxDyn(&[3, 64, 64])));
        let feats = bb.fwd(&ctx, img).unwrap();
        for (_, t) in &feats.levels {
            assert!(t.to_arr().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn indivisible_size_is_rejected_with_padding_hint() {
        let (store, bb) = build();
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let img = tape.constant(Arr::zeros(ndarray::IxDyn(&[3, 100, 128])));
        let err = match bb.fwd(&ctx, img) {
            Err(e) => e,
            Ok(_) => panic!("expected a size error"),
        };
        assert!(err.to_string().contains("pad"), "{err}");
    }
}
