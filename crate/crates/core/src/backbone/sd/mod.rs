//! Latent-diffusion UNet and autoencoder, adapted from `candle-transformers`
//! (MIT OR Apache-2.0). Changes: layer norm and attention softmax use
//! differentiable primitives so conditioning gradients are exact, the
//! autoencoder exposes its posterior mean, tracing and flash attention are
//! removed.
#![allow(dead_code, clippy::all)]

pub mod attention;
pub mod embeddings;
pub mod resnet;
pub mod unet_2d;
pub mod unet_2d_blocks;
pub mod vae;

use unet_2d::{BlockConfig, UNet2DConditionModelConfig};
use vae::AutoEncoderKLConfig;

/// UNet of the v1 family (cross-attention width 768).
pub fn unet_v1() -> UNet2DConditionModelConfig {
    let bc = |out_channels, use_cross_attn, attention_head_dim| BlockConfig {
        out_channels,
        use_cross_attn,
        attention_head_dim,
    };
    UNet2DConditionModelConfig {
        blocks: vec![bc(320, Some(1), 8), bc(640, Some(1), 8), bc(1280, Some(1), 8), bc(1280, None, 8)],
        center_input_sample: false,
        cross_attention_dim: 768,
        downsample_padding: 1,
        flip_sin_to_cos: true,
        freq_shift: 0.,
        layers_per_block: 2,
        mid_block_scale_factor: 1.,
        norm_eps: 1e-5,
        norm_num_groups: 32,
        sliced_attention_size: None,
        use_linear_projection: false,
    }
}

pub fn vae_v1() -> AutoEncoderKLConfig {
    AutoEncoderKLConfig {
        block_out_channels: vec![128, 256, 512, 512],
        layers_per_block: 2,
        latent_channels: 4,
        norm_num_groups: 32,
        use_quant_conv: true,
        use_post_quant_conv: true,
    }
}
