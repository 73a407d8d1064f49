//! Reference-size architectures, used for parameter accounting only.

use crate::error::{Error, Result};
use crate::nn::{DecoderConfig, EncoderConfig};

pub const REFERENCE_VOCAB: usize = 50272;
pub const REFERENCE_MAX_POSITIONS: usize = 2050;
pub const REFERENCE_PATCHES: usize = 196;
pub const REFERENCE_PATCH_DIM: usize = 768;

pub const ENCODER_PRESETS: [&str; 3] = ["vit_s", "vit_b", "vit_l"];
pub const DECODER_PRESETS: [&str; 5] = ["opt125", "opt350", "opt1b3", "opt2b7", "opt6b7"];

fn encoder(d: usize, n: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: n,
        d_model: d,
        n_heads: heads,
        d_ffn: 4 * d,
        n_patches: REFERENCE_PATCHES,
        patch_feature_dim: REFERENCE_PATCH_DIM,
    }
}

fn decoder(d: usize, n: usize, heads: usize) -> DecoderConfig {
    DecoderConfig {
        n_layers: n,
        d_model: d,
        n_heads: heads,
        d_ffn: 4 * d,
        vocab_size: REFERENCE_VOCAB,
        max_positions: REFERENCE_MAX_POSITIONS,
    }
}

pub fn encoder_preset(name: &str) -> Result<EncoderConfig> {
    Ok(match name {
        "vit_s" => encoder(384, 12, 6),
        "vit_b" => encoder(768, 12, 12),
        "vit_l" => encoder(1024, 24, 16),
        _ => return Err(Error::Config(format!("unknown encoder preset {name:?}"))),
    })
}

pub fn decoder_preset(name: &str) -> Result<DecoderConfig> {
    Ok(match name {
        "opt125" => decoder(768, 12, 12),
        "opt350" => decoder(1024, 24, 16),
        "opt1b3" => decoder(2048, 24, 32),
        "opt2b7" => decoder(2560, 32, 32),
        "opt6b7" => decoder(4096, 32, 32),
        _ => return Err(Error::Config(format!("unknown decoder preset {name:?}"))),
    })
}

pub const TASK_DIMS: [&str; 2] = ["tiny", "small"];
pub const TASK_MAX_POSITIONS: usize = 64;

/// Task-sized backbones: `tiny` (d=16, 2 heads) for gradient checks and
/// `small` (d=32, 4 heads) for training. Both have 4 encoder and 6 decoder layers.
pub fn task_configs(dims: &str, n_patches: usize, patch_feature_dim: usize, vocab_size: usize) -> Result<(EncoderConfig, DecoderConfig)> {
    let (d, heads) = match dims {
        "tiny" => (16, 2),
        "small" => (32, 4),
        _ => return Err(Error::Config(format!("unknown dims preset {dims:?}"))),
    };
    Ok((
        EncoderConfig {
            n_layers: 4,
            d_model: d,
            n_heads: heads,
            d_ffn: 4 * d,
            n_patches,
            patch_feature_dim,
        },
        DecoderConfig {
            n_layers: 6,
            d_model: d,
            n_heads: heads,
            d_ffn: 4 * d,
            vocab_size,
            max_positions: TASK_MAX_POSITIONS,
        },
    ))
}
