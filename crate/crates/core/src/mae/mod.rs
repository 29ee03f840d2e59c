//! The masked autoencoder: patching, positions, random masking, the
//! visible-only encoder, the MW-MHA decoder and the masked-MSE objective.

mod config;
mod mask;
mod model;
mod patch;

pub use config::MaeConfig;
pub use mask::{random_mask, MaskSet};
pub use model::{
    decays, expected_shapes, masked_mse, masked_mse_value, sidecar_path, MaeModel, MaeOutput,
    MaeVars, Stack, StackTrace, LN_EPS, MASK_TOKEN,
};
pub use patch::{patchify, sincos_pos_embed, unpatchify};

#[cfg(test)]
mod tests;
