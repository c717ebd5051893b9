//! Detection records and their JSON wire format, including run-length
//! encoded masks.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Detection {
    /// normalized `(cx, cy, w, h)`
    pub box_cxcywh: [f32; 4],
    /// one similarity logit per prompt phrase
    pub token_logits: Vec<f32>,
    /// optional stride-4 mask logit grid
    pub mask_logits: Option<Array2<f32>>,
    /// max sigmoid over the phrase logits
    pub score: f32,
    /// argmax phrase
    pub phrase_index: usize,
    /// optional keypoints as flat `[x1, y1, v1, x2, y2, v2, ...]` triplets
    pub keypoints: Option<Vec<f32>>,
    /// optional generated text ("recognize" task)
    pub label: Option<String>,
    /// optional generated text ("caption" task)
    pub caption: Option<String>,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Detection {
    pub fn new(
        box_cxcywh: [f32; 4],
        token_logits: Vec<f32>,
        mask_logits: Option<Array2<f32>>,
    ) -> Result<Self> {
        if box_cxcywh[2] <= 0.0 || box_cxcywh[3] <= 0.0 {
            return Err(Error::DegenerateBox(
                box_cxcywh[0],
                box_cxcywh[1],
                box_cxcywh[2],
                box_cxcywh[3],
            ));
        }
        if token_logits.is_empty() {
            return Err(Error::Config("detection needs at least one phrase".into()));
        }
        let (phrase_index, best) = token_logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, &v)| (i, v))
            .unwrap();
        Ok(Detection {
            box_cxcywh,
            token_logits,
            mask_logits,
            score: sigmoid(best),
            phrase_index,
            keypoints: None,
            label: None,
            caption: None,
        })
    }

    pub fn with_keypoints(mut self, flat_triplets: Vec<f32>) -> Self {
        self.keypoints = Some(flat_triplets);
        self
    }

    pub fn with_label(mut self, label: String) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_caption(mut self, caption: String) -> Self {
        self.caption = Some(caption);
        self
    }

    /// Binary mask from the logit grid (positive logit = foreground).
    pub fn binary_mask(&self) -> Option<Array2<u8>> {
        self.mask_logits
            .as_ref()
            .map(|m| m.mapv(|v| (v > 0.0) as u8))
    }

    pub fn to_json(&self, phrases: &[String]) -> DetectionJson {
        DetectionJson {
            box_cxcywh: self.box_cxcywh,
            score: self.score,
            phrase: phrases
                .get(self.phrase_index)
                .cloned()
                .unwrap_or_default(),
            mask_rle: self.binary_mask().as_ref().map(rle_encode),
            keypoints: self.keypoints.clone(),
            label: self.label.clone(),
            caption: self.caption.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DetectionJson {
    #[serde(rename = "box")]
    pub box_cxcywh: [f32; 4],
    pub score: f32,
    pub phrase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<MaskRle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// Row-major run-length encoding; runs alternate starting with background.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MaskRle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

pub fn rle_encode(mask: &Array2<u8>) -> MaskRle {
    let (h, w) = mask.dim();
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for &v in mask.iter() {
        let bit = (v != 0) as u8;
        if bit == current {
            run += 1;
        } else {
            counts.push(run);
            current = bit;
            run = 1;
        }
    }
    counts.push(run);
    if counts == [0] {
        counts.clear();
    }
    MaskRle {
        size: [h, w],
        counts,
    }
}

pub fn rle_decode(rle: &MaskRle) -> Result<Array2<u8>> {
    let [h, w] = rle.size;
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::Checkpoint(format!(
            "mask run lengths cover {total} pixels, grid has {}",
            h * w
        )));
    }
    let mut flat = Vec::with_capacity(h * w);
    for (i, &c) in rle.counts.iter().enumerate() {
        flat.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
    }
    Ok(Array2::from_shape_vec((h, w), flat).expect("length checked"))
}
