//! Parameter bundle for the whole pipeline.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionLayer, AttentionStack, FeedForward, LayerNorm};
use crate::constants::{ENCODER_CHANNELS, FEATURE_CHANNELS, NUM_OFFSETS, UNET_DEPTH};
use crate::error::{Error, Result};
use crate::fusion::{DetectionHead, FusionParams};
use crate::offsets::OffsetGenerator;
use crate::params::TensorBundle;
use crate::pillars::{BackboneParams, EncoderParams};
use crate::temporal::TemporalFusionParams;
use crate::trajfield::UNetParams;

/// Calibration of the analytic score head on seeded features.
pub const ORACLE_HEAD_GAIN: f64 = 20.0;
pub const ORACLE_HEAD_BIAS: f64 = -4.0;
pub const CAR_LENGTH: f64 = 4.5;
pub const CAR_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub backbone: BackboneParams,
    pub temporal: TemporalFusionParams,
    pub unet: UNetParams,
    pub offsets: OffsetGenerator,
    pub attention: AttentionStack,
    /// Fusion over ego plus one cooperating agent.
    pub fusion: FusionParams,
    pub head: DetectionHead,
}

impl ModelParams {
    /// Seeded, untrained weights. Fusion sums agents and the head is the analytic one.
    pub fn seeded(seed: u64, agents: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = FEATURE_CHANNELS;
        let encoder = EncoderParams::seeded(ENCODER_CHANNELS, &mut rng);
        let backbone = BackboneParams::seeded(ENCODER_CHANNELS, c, &mut rng);
        let temporal = TemporalFusionParams::seeded(c, 0.05, &mut rng);
        let unet = UNetParams::seeded(2 * c, &mut rng);
        let offsets = OffsetGenerator::seeded(c + 3, c, NUM_OFFSETS, 0.1, &mut rng);
        let attention = AttentionStack::seeded(c, &mut rng);
        Self {
            encoder,
            backbone,
            temporal,
            unet,
            offsets,
            attention,
            fusion: FusionParams::sum(c, agents),
            head: DetectionHead::analytic(c, ORACLE_HEAD_GAIN, ORACLE_HEAD_BIAS, CAR_LENGTH, CAR_WIDTH),
        }
    }

    pub fn channels(&self) -> usize {
        self.backbone.blocks[1].out_channels()
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new();
        self.encoder.save_into(&mut b, "encoder");
        self.backbone.save_into(&mut b, "backbone");
        b.insert_conv("temporal.conv", &self.temporal.conv);
        self.unet.save_into(&mut b, "unet");
        self.offsets.save_into(&mut b, "offsets");
        save_stack(&self.attention, &mut b);
        self.fusion.save_into(&mut b, "fusion");
        self.head.save_into(&mut b, "head");
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        Ok(Self {
            encoder: EncoderParams::load_from(b, "encoder")?,
            backbone: BackboneParams::load_from(b, "backbone")?,
            temporal: TemporalFusionParams {
                conv: b.get_conv("temporal.conv")?,
            },
            unet: UNetParams::load_from(b, "unet", UNET_DEPTH)?,
            offsets: OffsetGenerator::load_from(b, "offsets")?,
            attention: load_stack(b)?,
            fusion: FusionParams::load_from(b, "fusion")?,
            head: DetectionHead::load_from(b, "head")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

fn put2(b: &mut TensorBundle, name: String, m: &ndarray::Array2<f64>) {
    b.insert(name, &m.clone().into_dyn());
}

fn put1(b: &mut TensorBundle, name: String, v: &[f64]) {
    b.insert(name, &ndarray::Array1::from(v.to_vec()).into_dyn());
}

fn get2(b: &TensorBundle, name: &str) -> Result<ndarray::Array2<f64>> {
    b.get(name)?
        .into_dimensionality()
        .map_err(|e| Error::Shape(format!("{name}: {e}")))
}

fn get1(b: &TensorBundle, name: &str) -> Result<Vec<f64>> {
    Ok(b.get(name)?.iter().copied().collect())
}

fn has(b: &TensorBundle, name: &str) -> bool {
    b.names().any(|n| n == name)
}

fn save_stack(stack: &AttentionStack, b: &mut TensorBundle) {
    put1(b, "attention.layers".into(), &[stack.layers.len() as f64]);
    for (i, l) in stack.layers.iter().enumerate() {
        let p = format!("attention.{i}");
        put1(b, format!("{p}.heads"), &[l.heads as f64]);
        put1(b, format!("{p}.residual"), &[l.residual as u8 as f64]);
        put2(b, format!("{p}.w_q"), &l.w_q);
        put2(b, format!("{p}.w_k"), &l.w_k);
        put2(b, format!("{p}.w_v"), &l.w_v);
        put2(b, format!("{p}.w_o"), &l.w_o);
        if let Some(f) = &l.ffn {
            put2(b, format!("{p}.ffn.w1"), &f.w1);
            put1(b, format!("{p}.ffn.b1"), &f.b1);
            put2(b, format!("{p}.ffn.w2"), &f.w2);
            put1(b, format!("{p}.ffn.b2"), &f.b2);
        }
        for (k, n) in [("norm1", &l.norm1), ("norm2", &l.norm2)] {
            if let Some(n) = n {
                put1(b, format!("{p}.{k}.gamma"), &n.gamma);
                put1(b, format!("{p}.{k}.beta"), &n.beta);
            }
        }
    }
}

fn load_stack(b: &TensorBundle) -> Result<AttentionStack> {
    let n = get1(b, "attention.layers")?.first().copied().unwrap_or(0.0) as usize;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let p = format!("attention.{i}");
        let ffn = if has(b, &format!("{p}.ffn.w1")) {
            Some(FeedForward {
                w1: get2(b, &format!("{p}.ffn.w1"))?,
                b1: get1(b, &format!("{p}.ffn.b1"))?,
                w2: get2(b, &format!("{p}.ffn.w2"))?,
                b2: get1(b, &format!("{p}.ffn.b2"))?,
            })
        } else {
            None
        };
        let norm = |k: &str| -> Result<Option<LayerNorm>> {
            if !has(b, &format!("{p}.{k}.gamma")) {
                return Ok(None);
            }
            Ok(Some(LayerNorm {
                gamma: get1(b, &format!("{p}.{k}.gamma"))?,
                beta: get1(b, &format!("{p}.{k}.beta"))?,
                eps: 1e-5,
            }))
        };
        let layer = AttentionLayer {
            heads: get1(b, &format!("{p}.heads"))?[0] as usize,
            w_q: get2(b, &format!("{p}.w_q"))?,
            w_k: get2(b, &format!("{p}.w_k"))?,
            w_v: get2(b, &format!("{p}.w_v"))?,
            w_o: get2(b, &format!("{p}.w_o"))?,
            ffn,
            norm1: norm("norm1")?,
            norm2: norm("norm2")?,
            residual: get1(b, &format!("{p}.residual"))?[0] != 0.0,
        };
        layer.validate()?;
        layers.push(layer);
    }
    Ok(AttentionStack { layers })
}
