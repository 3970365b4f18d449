use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resolution the reference pipeline resizes inputs to. Kept for
/// documentation; toy models run at [`ModelConfig::image_size`].
pub const REFERENCE_IMAGE_SIZE: usize = 1024;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub enc_depth: usize,
    pub n_heads: usize,
    pub mem_depth: usize,
    pub d_mem: usize,
    /// Self-attention blocks in the mask decoder before upsampling.
    pub dec_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            d_model: 64,
            enc_depth: 4,
            n_heads: 4,
            mem_depth: 2,
            d_mem: 32,
            dec_depth: 1,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for the training experiments.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            d_model: 32,
            enc_depth: 2,
            n_heads: 4,
            mem_depth: 2,
            d_mem: 16,
            dec_depth: 1,
        }
    }

    /// Smallest configuration, sized for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch: 4,
            d_model: 8,
            enc_depth: 1,
            n_heads: 2,
            mem_depth: 1,
            d_mem: 8,
            dec_depth: 1,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch == 0 || !self.patch.is_power_of_two() {
            return fail(format!("patch {} must be a power of two", self.patch));
        }
        if self.image_size == 0 || self.image_size % self.patch != 0 {
            return fail(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model < 4 || self.d_model % 4 != 0 {
            return fail(format!("d_model {} must be a multiple of 4", self.d_model));
        }
        if self.d_mem < 4 || self.d_mem % 4 != 0 {
            return fail(format!("d_mem {} must be a multiple of 4", self.d_mem));
        }
        if self.enc_depth == 0 || self.mem_depth == 0 {
            return fail("encoder and memory attention need at least one block".into());
        }
        Ok(())
    }

    pub(crate) fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("d_model", self.d_model),
            ("enc_depth", self.enc_depth),
            ("n_heads", self.n_heads),
            ("mem_depth", self.mem_depth),
            ("d_mem", self.d_mem),
            ("dec_depth", self.dec_depth),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    pub(crate) fn from_kv(kv: &std::collections::BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("model config missing `{k}`")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("model config `{k}` is not an integer")))
        };
        let cfg = Self {
            image_size: get("image_size")?,
            patch: get("patch")?,
            d_model: get("d_model")?,
            enc_depth: get("enc_depth")?,
            n_heads: get("n_heads")?,
            mem_depth: get("mem_depth")?,
            d_mem: get("d_mem")?,
            dec_depth: get("dec_depth")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig::desk(),
            ModelConfig::tiny(),
        ] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let bad = ModelConfig {
            image_size: 60,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
