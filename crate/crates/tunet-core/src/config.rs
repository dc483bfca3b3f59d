//! Architecture hyperparameters and their validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything that determines the network's shape. `validate` enforces the
/// coupling rules (patch tiling, head divisibility, stage counts) once at
/// construction; the rest of the crate assumes a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch edge length n; tokens are n×n tiles.
    pub patch_size: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// MLP hidden width = mlp_ratio · token dim.
    pub mlp_ratio: usize,
    /// Output channels of the 1×1 embedding conv; token dim d = embed_channels·n².
    pub embed_channels: usize,
    /// Channels of each encoder stage, full resolution first.
    pub encoder_widths: Vec<usize>,
    /// Channels of each decoder stage, lowest resolution first.
    pub decoder_widths: Vec<usize>,
    /// Convs per decoder stage: 2 for the deep backbone, 1 for the shallow variant.
    pub decoder_convs_per_stage: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// The reference configuration: 512×512 single-channel slices, 16×16
    /// patches (sequence length 1024, token dim 256), 8 heads, 6 layers,
    /// five encoder/decoder stages.
    pub fn reference() -> Self {
        ModelConfig {
            height: 512,
            width: 512,
            channels: 1,
            patch_size: 16,
            num_heads: 8,
            num_layers: 6,
            mlp_ratio: 4,
            embed_channels: 1,
            encoder_widths: vec![16, 32, 64, 128, 256],
            decoder_widths: vec![256, 128, 64, 32, 16],
            decoder_convs_per_stage: 2,
            alpha: 1.0,
            seed: 0,
        }
    }

    /// Desk-scale configuration used by verification and tests.
    pub fn tiny() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            channels: 1,
            patch_size: 8,
            num_heads: 2,
            num_layers: 1,
            mlp_ratio: 4,
            embed_channels: 1,
            encoder_widths: vec![4, 8],
            decoder_widths: vec![8, 4],
            decoder_convs_per_stage: 2,
            alpha: 1.0,
            seed: 0,
        }
    }

    /// Sequence length S = HW/n².
    pub fn seq_len(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    /// Token dimension d = embed_channels·n².
    pub fn token_dim(&self) -> usize {
        self.embed_channels * self.patch_size * self.patch_size
    }

    /// Number of factor-of-two stages between full resolution and the n×n map.
    pub fn num_stages(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Equality on everything that determines the parameter set and forward
    /// pass (the seed only affects initialization).
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.seed = 0;
        b.seed = 0;
        a == b
    }

    pub fn validate(&self) -> Result<()> {
        if self.height != self.width {
            return Err(Error::Config(format!(
                "image must be square, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels == 0 || self.patch_size == 0 || self.num_heads == 0 || self.num_layers == 0
        {
            return Err(Error::Config(
                "channels, patch_size, heads and layers must all be positive".into(),
            ));
        }
        if self.mlp_ratio == 0 || self.embed_channels == 0 {
            return Err(Error::Config(
                "mlp_ratio and embed_channels must be positive".into(),
            ));
        }
        if !self.height.is_multiple_of(self.patch_size) || !self.width.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "{}x{} image is not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if !self.token_dim().is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "token dim {} is not divisible by {} heads",
                self.token_dim(),
                self.num_heads
            )));
        }
        let ratio = self.height / self.patch_size;
        if !ratio.is_power_of_two() || ratio < 2 {
            return Err(Error::Config(format!(
                "height/patch_size must be a power of two ≥ 2, got {ratio}"
            )));
        }
        let stages = ratio.trailing_zeros() as usize;
        if self.encoder_widths.len() != stages || self.decoder_widths.len() != stages {
            return Err(Error::Config(format!(
                "expected {} encoder and decoder stages (log2({}/{})), got {} and {}",
                stages,
                self.height,
                self.patch_size,
                self.encoder_widths.len(),
                self.decoder_widths.len()
            )));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.decoder_convs_per_stage != 1 && self.decoder_convs_per_stage != 2 {
            return Err(Error::Config(format!(
                "decoder_convs_per_stage must be 1 or 2, got {}",
                self.decoder_convs_per_stage
            )));
        }
        Ok(())
    }
}
