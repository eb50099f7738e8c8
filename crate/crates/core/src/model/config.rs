use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ff_expansion: usize,
    pub conv_kernel: usize,
    pub prenet_kernel: usize,
    pub prenet_gru_hidden: usize,
    pub groupnorm_groups: usize,
    /// Kept for config compatibility; the forward pass is inference-only.
    pub dropout: f64,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 512,
            d_model: 384,
            num_layers: 12,
            num_heads: 6,
            head_dim: 64,
            ff_expansion: 4,
            conv_kernel: 15,
            prenet_kernel: 5,
            prenet_gru_hidden: 256,
            groupnorm_groups: 32,
            dropout: 0.15,
            vocab_size: 42,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            input_dim: 8,
            d_model: 16,
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            prenet_gru_hidden: 8,
            groupnorm_groups: 4,
            ..Self::default()
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ff_expansion", self.ff_expansion),
            ("conv_kernel", self.conv_kernel),
            ("prenet_kernel", self.prenet_kernel),
            ("prenet_gru_hidden", self.prenet_gru_hidden),
            ("groupnorm_groups", self.groupnorm_groups),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if self.d_model != self.num_heads * self.head_dim {
            return Err(Error::param(format!(
                "d_model {} != num_heads {} x head_dim {}",
                self.d_model, self.num_heads, self.head_dim
            )));
        }
        if self.conv_kernel % 2 == 0 || self.prenet_kernel % 2 == 0 {
            return Err(Error::param("kernel sizes must be odd"));
        }
        // GroupNorm runs on the d_model channels left after the GLU.
        if self.d_model % self.groupnorm_groups != 0 {
            return Err(Error::param(format!(
                "groupnorm_groups {} must divide d_model {}",
                self.groupnorm_groups, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param("dropout must lie in [0, 1)"));
        }
        if self.vocab_size < 2 {
            return Err(Error::param("vocab_size must be at least 2"));
        }
        Ok(())
    }
}
