//! Detection heads and stage-1 losses: box regression with GIoU, contrastive
//! phrase classification, dot-product masks, and Hungarian set matching.

pub mod boxes;
pub mod classify;
pub mod criterion;
pub mod mask;
pub mod matching;
pub mod output;

pub use boxes::{giou, giou_rows, l1_rows, BoxHead};
pub use classify::{contrastive_logits, focal_cost, focal_terms, FOCAL_ALPHA, FOCAL_GAMMA};
pub use criterion::{detection_set_loss, SetLosses};
pub use mask::{mask_loss_at_points, point_sampled_mask_loss, MaskHead};
pub use matching::{hungarian_match, MatchResult, MatchWeights};
pub use output::{rle_decode, rle_encode, Detection, DetectionJson, MaskRle};
