//! Shared trunk: backbone pyramid, prompt/image early-fusion encoder,
//! language-guided query selection, and the box-refining decoder.

pub mod backbone;
pub mod decoder;
pub mod deform;
pub mod encoder;
pub mod select;

use ndarray::Array2;

use crate::tensor::Tensor;

pub use backbone::{Backbone, MultiScaleFeatures};
pub use decoder::{Decoder, DecoderStep};
pub use deform::MsDeformAttn;
pub use encoder::{EarlyFusionEncoder, FusedMemory};
pub use select::{QuerySelector, QuerySet};

/// Strides whose tokens form the fused memory; stride 4 feeds only the mask
/// head.
pub const MEMORY_STRIDES: [usize; 3] = [8, 16, 32];

/// ln(x / (1-x)) with clamping away from the endpoints.
pub fn inverse_sigmoid<'t>(x: Tensor<'t>) -> Tensor<'t> {
    let eps = 1e-5f32;
    let lo = x.const_like(eps);
    let hi = x.const_like(1.0 - eps);
    let c = x.maximum(&lo).minimum(&hi);
    let one_minus = c.neg().add_scalar(1.0);
    c.ln().sub(&one_minus.ln())
}

/// Flatten a `[d, H, W]` map into `[H·W, d]` tokens (row-major pixels).
pub fn map_to_tokens<'t>(map: Tensor<'t>) -> Tensor<'t> {
    let dims = map.dims();
    map.reshape(&[dims[0], dims[1] * dims[2]]).transpose2d()
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map<'t>(tokens: Tensor<'t>, h: usize, w: usize) -> Tensor<'t> {
    let d = tokens.dims()[1];
    tokens.transpose2d().reshape(&[d, h, w])
}

/// Normalized pixel-center positions for an `h`×`w` grid, row-major.
pub fn grid_positions(h: usize, w: usize) -> Array2<f32> {
    let mut pos = Array2::<f32>::zeros((h * w, 2));
    for y in 0..h {
        for x in 0..w {
            pos[[y * w + x, 0]] = (x as f32 + 0.5) / w as f32;
            pos[[y * w + x, 1]] = (y as f32 + 0.5) / h as f32;
        }
    }
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Arr, Tape};

    #[test]
    fn inverse_sigmoid_inverts_sigmoid() {
        let tape = Tape::new();
        let x = tape.leaf(Arr::from_shape_vec(ndarray::IxDyn(&[3]), vec![-2.0, 0.3, 4.0]).unwrap());
        let back = inverse_sigmoid(x.sigmoid());
        for (a, b) in back.to_arr().iter().zip([-2.0f32, 0.3, 4.0]) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn token_map_round_trip() {
        let tape = Tape::no_grad();
        let m = tape.constant(crate::tensor::gradcheck::rand_arr(&[5, 3, 4], 9, -1.0, 1.0));
        let back = tokens_to_map(map_to_tokens(m), 3, 4);
        assert_eq!(m.to_arr(), back.to_arr());
    }

    #[test]
    fn grid_positions_are_normalized_centers() {
        let p = grid_positions(2, 4);
        assert_eq!(p.nrows(), 8);
        assert!((p[[0, 0]] - 0.125).abs() < 1e-6);
        assert!((p[[0, 1]] - 0.25).abs() < 1e-6);
        assert!((p[[7, 0]] - 0.875).abs() < 1e-6);
        assert!((p[[7, 1]] - 0.75).abs() < 1e-6);
    }
}
