//! All learned parameters of the pipeline, materialized up front from a
//! seed so runs are reproducible. Two initializations exist: `Seeded`
//! scaled-uniform weights (untrained but dimensionally faithful), and
//! `Passthrough`, which zeroes the positional-encoder perceptrons and the
//! attention value/FFN paths and makes the decoders carry geometry through
//! unchanged, so end-to-end tests can check the pipeline's geometric
//! plumbing without any training.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    AttentionWeights, Linear, Mlp, PositionalEncoder, TransformerLayerWeights,
};
use crate::bev::PointEncoder;

use super::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightsMode {
    Seeded(u64),
    Passthrough,
}

#[derive(Debug, Clone)]
pub struct BevEncoderWeights {
    pub owl_encoder: PointEncoder,
    pub lidar_encoder: PointEncoder,
}

#[derive(Debug, Clone)]
pub struct CameraBlockWeights {
    pub self_attn: TransformerLayerWeights,
    /// Cross-attention from queries to sampled frustum features.
    pub cross_attn: TransformerLayerWeights,
    /// Decodes (x, y, z, l, w, h, sin, cos).
    pub box_decoder: Mlp,
}

#[derive(Debug, Clone)]
pub struct CameraBranchWeights {
    pub token_reduce: Mlp,
    pub affinity_encode: Mlp,
    pub pe_uvd: PositionalEncoder,
    pub pe_xyz: PositionalEncoder,
    pub blocks: Vec<CameraBlockWeights>,
    pub class_decoder: Mlp,
}

#[derive(Debug, Clone)]
pub struct RefineBlockWeights {
    pub lidar_offset_head: Linear,
    pub lidar_cross: TransformerLayerWeights,
    pub cam_offset_head: Linear,
    pub cam_cross: TransformerLayerWeights,
    pub self_attn: TransformerLayerWeights,
    /// Decodes (x, y, z, l, w, h, theta) relative to the query position.
    pub box_decoder: Mlp,
    pub class_decoder: Mlp,
}

#[derive(Debug, Clone)]
pub struct RefineWeights {
    pub lidar_adapter: Linear,
    pub camera_token_adapter: Linear,
    pub pe_xyz: PositionalEncoder,
    pub blocks: Vec<RefineBlockWeights>,
}

#[derive(Debug, Clone)]
pub struct PipelineWeights {
    pub mode: WeightsMode,
    pub bev: BevEncoderWeights,
    pub camera: CameraBranchWeights,
    pub refine: RefineWeights,
}

impl PipelineWeights {
    pub fn new(
        cfg: &PipelineConfig,
        n_prompts: usize,
        n_classes: usize,
        mode: WeightsMode,
    ) -> Self {
        let seed = match mode {
            WeightsMode::Seeded(s) => s,
            WeightsMode::Passthrough => cfg.weights_seed,
        };
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let passthrough = mode == WeightsMode::Passthrough;
        let d = cfg.d_model;
        let fused = 2 * cfg.d_bev;
        let base = cfg.pe_base;

        let pe = |coords: usize, out: usize, rng: &mut ChaCha8Rng| {
            if passthrough {
                PositionalEncoder::zeroed(coords, out, base, rng)
            } else {
                PositionalEncoder::seeded(coords, out, base, rng)
            }
        };
        let layer = |q: usize, kv: usize, rng: &mut ChaCha8Rng| {
            if passthrough {
                TransformerLayerWeights::passthrough(q, kv, kv, cfg.ffn_dim, cfg.heads, rng)
            } else {
                TransformerLayerWeights::seeded(q, kv, kv, cfg.ffn_dim, cfg.heads, rng)
            }
        };

        let bev = BevEncoderWeights {
            owl_encoder: PointEncoder::new(
                Linear::seeded(cfg.d_owl, cfg.d_bev, rng),
                pe(3, cfg.d_bev, rng),
            )
            .with_min_z(cfg.ground_filter_z),
            lidar_encoder: PointEncoder::new(
                Linear::seeded(1, cfg.d_bev, rng),
                pe(3, cfg.d_bev, rng),
            )
            .with_min_z(cfg.ground_filter_z),
        };

        // Mirrors the recorded three-linear reduction stack, scaled down.
        let camera = CameraBranchWeights {
            token_reduce: Mlp::seeded(&[cfg.d_owl, d, d, d], rng),
            affinity_encode: Mlp::seeded(&[n_prompts, d, d, d], rng),
            pe_uvd: pe(3, d, rng),
            pe_xyz: pe(3, d, rng),
            blocks: (0..cfg.camera_blocks)
                .map(|_| CameraBlockWeights {
                    self_attn: layer(d, d, rng),
                    cross_attn: layer(d, fused, rng),
                    box_decoder: Mlp::seeded(&[d, d / 2, d / 2, 8], rng),
                })
                .collect(),
            class_decoder: Mlp::seeded(&[d, d / 2, d / 2, n_classes], rng),
        };

        let refine = RefineWeights {
            lidar_adapter: Linear::seeded(cfg.d_bev, d, rng),
            camera_token_adapter: Linear::seeded(d, d, rng),
            pe_xyz: pe(3, d, rng),
            blocks: (0..cfg.refine_blocks)
                .map(|_| RefineBlockWeights {
                    lidar_offset_head: Linear::seeded(d, 2 * cfg.deformable_samples, rng),
                    lidar_cross: layer(d, cfg.d_bev, rng),
                    cam_offset_head: Linear::seeded(d, 2 * cfg.deformable_samples, rng),
                    cam_cross: layer(d, cfg.d_owl, rng),
                    self_attn: layer(d, d, rng),
                    box_decoder: Mlp::seeded(&[d, d, d, 7], rng),
                    class_decoder: Mlp::seeded(&[d, d, n_classes], rng),
                })
                .collect(),
        };

        PipelineWeights {
            mode,
            bev,
            camera,
            refine,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.mode == WeightsMode::Passthrough
    }

    /// Single-probe occupancy attention used on the geometric path: the key
    /// projection selects one feature channel, scaled by the sharpness, and
    /// the value path is the identity over sample positions.
    pub fn occupancy_attention(
        key_dim: usize,
        channel: usize,
        sharpness: f64,
    ) -> (Array2<f64>, AttentionWeights) {
        let mut p_k = Array2::zeros((key_dim, 1));
        p_k[[channel, 0]] = 1.0;
        let w = AttentionWeights {
            p_q: Array2::from_elem((1, 1), sharpness),
            p_k,
            p_v: Array2::eye(3),
            w_o: Array2::eye(3),
            heads: 1,
        };
        let probe = Array1::ones(1).insert_axis(ndarray::Axis(0));
        (probe, w)
    }
}
