//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use qica_core::backbone::{TextEncoderConfig, VisionEncoderConfig};
use qica_core::data::{Category, Sample, SceneSpec, DEFAULT_KERNEL_SIGMA};
use qica_core::decoder::DecoderConfig;
use qica_core::quantity::QuantityHypothesisSet;
use qica_core::ModelConfig;

/// Smallest configuration exercising every code path: 4x4 patch grid,
/// two text and three vision layers.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        text: TextEncoderConfig {
            num_layers: 2,
            width: 16,
            num_heads: 2,
            prompt_depth: 2,
            prompt_length: 2,
            max_seq_len: 8,
            mlp_ratio: 2,
        },
        vision: VisionEncoderConfig {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            num_layers: 3,
            width: 24,
            num_heads: 2,
            skip_stage_indices: vec![1, 2],
            mlp_ratio: 2,
        },
        decoder: DecoderConfig {
            width: 16,
            num_heads: 2,
            window: 2,
            ..DecoderConfig::default()
        },
        max_count: 64,
        ..ModelConfig::default()
    }
}

pub fn scene(config: &ModelConfig, category: Category, count: usize, seed: u64) -> Sample {
    let mut spec = SceneSpec::new(category, count, seed);
    spec.height = config.vision.image_height;
    spec.width = config.vision.image_width;
    if spec.height < 64 {
        spec.radius_min = 1.5;
        spec.radius_max = 2.0;
    }
    Sample::generate(&spec, config.density_hw(), DEFAULT_KERNEL_SIGMA).expect("scene fits")
}

/// Brute-force ranking hinge written from the definition: chains are
/// rebuilt from the quantities themselves rather than from the set's
/// index ranges.
pub fn hinge_oracle(alpha: &[f64], hyp: &QuantityHypothesisSet) -> f64 {
    let k = alpha.len();
    if k < 3 {
        return 0.0;
    }
    let n = hyp.n_gt as i64;
    let mut dominance = 0.0;
    for &a in &alpha[1..] {
        if a > alpha[0] {
            dominance += a - alpha[0];
        }
    }
    dominance /= (k - 1) as f64;
    let mut chain = 0.0;
    for side in [-1i64, 1] {
        let mut idx: Vec<usize> = (1..k)
            .filter(|&i| (hyp.quantities[i] as i64 - n).signum() == side)
            .collect();
        idx.sort_by_key(|&i| (hyp.quantities[i] as i64 - n).abs());
        for w in idx.windows(2) {
            let (near, far) = (alpha[w[0]], alpha[w[1]]);
            if far > near {
                chain += far - near;
            }
        }
    }
    let norm = if k > 3 { (k - 3) as f64 } else { 1.0 };
    dominance + chain / norm
}

/// Kahan-summed mean absolute error.
pub fn mae_oracle(p: &[f64], t: &[f64]) -> f64 {
    kahan(p.iter().zip(t).map(|(a, b)| (a - b).abs())) / p.len() as f64
}

pub fn rmse_oracle(p: &[f64], t: &[f64]) -> f64 {
    (kahan(p.iter().zip(t).map(|(a, b)| (a - b) * (a - b))) / p.len() as f64).sqrt()
}

pub fn kahan(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

pub fn cosine_oracle(v: &[f64], t: &[f64]) -> f64 {
    let dot: f64 = v.iter().zip(t).map(|(a, b)| a * b).sum();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot / (nv * nt).max(1e-8)).clamp(-1.0, 1.0)
}
