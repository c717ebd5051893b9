//! Model hyperparameters shared across the trunk, prompt encoders, and heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// hidden width of the trunk and every prompt pathway
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    /// object queries selected from memory
    pub n_queries: usize,
    /// deformable sampling points per head and level
    pub deform_points: usize,
    pub vocab_size: usize,
    pub text_layers: usize,
    /// longest text prompt the encoder accepts
    pub max_text_len: usize,
    /// stop selection gradients from flowing into query content
    pub detach_query_content: bool,
    /// rows in a customized prompt embedding
    pub custom_prompt_len: usize,
    /// hidden width of the caption decoder
    pub d_lm: usize,
    pub lm_layers: usize,
    pub keypoint_layers: usize,
    /// RoI grid side for object-token pooling
    pub roi_grid: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            heads: 4,
            enc_layers: 3,
            dec_layers: 3,
            ffn_dim: 256,
            n_queries: 100,
            deform_points: 4,
            vocab_size: crate::data::vocab::VOCAB_SIZE,
            text_layers: 2,
            max_text_len: 48,
            detach_query_content: true,
            custom_prompt_len: 16,
            d_lm: 128,
            lm_layers: 2,
            keypoint_layers: 2,
            roi_grid: 3,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d % 4 != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} must be divisible by 4 (box position embeddings)",
                self.d
            )));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.n_queries == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("layer and query counts must be positive".into()));
        }
        if self.deform_points == 0 {
            return Err(Error::Config("need at least one sampling point".into()));
        }
        if self.roi_grid == 0 {
            return Err(Error::Config("roi_grid must be positive".into()));
        }
        Ok(())
    }
}
