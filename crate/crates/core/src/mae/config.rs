use serde::{Deserialize, Serialize};

use crate::attention::WindowSchedule;
use crate::error::{Error, Result};

/// Model hyperparameters. Defaults are the reference configuration:
/// 200x80 inputs, 4x16 patches, ViT-B encoder, 4-layer 384-wide MW-MHA
/// decoder, 80% masking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub input_t: usize,
    pub input_f: usize,
    pub patch_t: usize,
    pub patch_f: usize,
    pub enc_depth: usize,
    pub enc_width: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_width: usize,
    /// Must equal the window-schedule length when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dec_heads: Option<usize>,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            input_t: 200,
            input_f: 80,
            patch_t: 4,
            patch_f: 16,
            enc_depth: 12,
            enc_width: 768,
            enc_heads: 12,
            dec_depth: 4,
            dec_width: 384,
            dec_heads: None,
            mlp_ratio: 4,
            mask_ratio: 0.8,
            seed: 0,
        }
    }
}

impl MaeConfig {
    /// 8x8 inputs with 2x2 patches (16 patches, decoder windows
    /// `[2, 4, 8, 16, 16]`); all widths at most 16.
    pub fn tiny() -> Self {
        Self {
            input_t: 8,
            input_f: 8,
            patch_t: 2,
            patch_f: 2,
            enc_depth: 2,
            enc_width: 16,
            enc_heads: 2,
            dec_depth: 2,
            dec_width: 10,
            dec_heads: None,
            mlp_ratio: 4,
            mask_ratio: 0.8,
            seed: 0,
        }
    }

    /// Small model on full 200x80 spectrograms with 8x16 patches
    /// (125 patches, decoder windows `[5, 25, 125, 125]`).
    pub fn small() -> Self {
        Self {
            patch_t: 8,
            patch_f: 16,
            enc_depth: 2,
            enc_width: 32,
            enc_heads: 4,
            dec_depth: 2,
            dec_width: 32,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_t / self.patch_t, self.input_f / self.patch_f)
    }

    pub fn n_patches(&self) -> usize {
        let (t, f) = self.grid();
        t * f
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_t * self.patch_f
    }

    /// `round(mask_ratio * n_p)`, rounding halves up.
    pub fn n_masked(&self) -> usize {
        masked_count(self.n_patches(), self.mask_ratio)
    }

    pub fn n_visible(&self) -> usize {
        self.n_patches() - self.n_masked()
    }

    pub fn dec_schedule(&self) -> Result<WindowSchedule> {
        WindowSchedule::for_patches(self.n_patches())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_t", self.input_t),
            ("input_f", self.input_f),
            ("patch_t", self.patch_t),
            ("patch_f", self.patch_f),
            ("enc_width", self.enc_width),
            ("enc_heads", self.enc_heads),
            ("dec_width", self.dec_width),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.input_t.is_multiple_of(self.patch_t) {
            return Err(Error::config(
                "patch_t",
                format!("{} does not divide input_t {}", self.patch_t, self.input_t),
            ));
        }
        if !self.input_f.is_multiple_of(self.patch_f) {
            return Err(Error::config(
                "patch_f",
                format!("{} does not divide input_f {}", self.patch_f, self.input_f),
            ));
        }
        let n_p = self.n_patches();
        if n_p < 2 {
            return Err(Error::config("patch_t", "need at least two patches"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(
                "mask_ratio",
                format!("{} is outside the open interval (0, 1)", self.mask_ratio),
            ));
        }
        let masked = self.n_masked();
        if masked == 0 || masked >= n_p {
            return Err(Error::config(
                "mask_ratio",
                format!("{} masks {masked} of {n_p} patches", self.mask_ratio),
            ));
        }
        if !self.enc_width.is_multiple_of(2) {
            return Err(Error::config(
                "enc_width",
                "must be even for sin/cos positions",
            ));
        }
        if !self.dec_width.is_multiple_of(2) {
            return Err(Error::config(
                "dec_width",
                "must be even for sin/cos positions",
            ));
        }
        if !self.enc_width.is_multiple_of(self.enc_heads) {
            return Err(Error::config(
                "enc_heads",
                format!(
                    "{} does not divide enc_width {}",
                    self.enc_heads, self.enc_width
                ),
            ));
        }
        let h = self.dec_schedule()?.heads();
        if let Some(given) = self.dec_heads {
            if given != h {
                return Err(Error::config(
                    "dec_heads",
                    format!("{given} differs from the {h} windows derived from {n_p} patches"),
                ));
            }
        }
        if !self.dec_width.is_multiple_of(h) {
            return Err(Error::config(
                "dec_width",
                format!("{} is not divisible by {h} decoder heads", self.dec_width),
            ));
        }
        Ok(())
    }
}

pub(crate) fn masked_count(n_p: usize, ratio: f64) -> usize {
    (ratio * n_p as f64 + 0.5).floor() as usize
}
