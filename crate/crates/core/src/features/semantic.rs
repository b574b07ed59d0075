//! Deterministic, contrast-robust dense feature provider.
//!
//! Each pyramid level `l` (σ = 2^l) contributes two channels: the blurred
//! gradient-energy map `G_σ * |∇I|` and the gradient magnitude of the blurred
//! image `|∇(G_σ * I)|`. Both are unchanged by intensity inversion, and each
//! channel is divided by its image mean so global contrast changes cancel.
//! A seeded random linear projection maps the stack to `out_dim` channels.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DenseFeatureMap, Image, Provenance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticConfig {
    pub depth: usize,
    pub proj_seed: u64,
    pub out_dim: usize,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            proj_seed: 17,
            out_dim: 32,
        }
    }
}

/// Raw (unnormalised, unprojected) channel stack: for each level the blurred
/// gradient energy followed by the gradient magnitude of the blurred image.
pub fn semantic_channels(image: &Image, depth: usize) -> Vec<Image> {
    assert!(depth >= 1, "depth must be at least 1");
    let grad = image.gradient_magnitude();
    let mut out = Vec::with_capacity(2 * depth);
    for level in 0..depth {
        let sigma = (1u64 << level) as f64;
        out.push(grad.gaussian_blur(sigma));
        out.push(image.gaussian_blur(sigma).gradient_magnitude());
    }
    out
}

fn projection(seed: u64, out_dim: usize, in_dim: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (in_dim as f64).sqrt();
    Array2::from_shape_fn((out_dim, in_dim), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

pub fn synthetic_semantic_map(image: &Image, cfg: &SemanticConfig) -> DenseFeatureMap {
    let channels: Vec<Image> = semantic_channels(image, cfg.depth)
        .into_iter()
        .map(|c| {
            let m = c.mean();
            c.map(|v| v / (m + 1e-8))
        })
        .collect();
    let proj = projection(cfg.proj_seed, cfg.out_dim, channels.len());
    let (w, h) = image.size();
    let mut data = Array3::zeros((h, w, cfg.out_dim));
    let mut pix = vec![0.0; channels.len()];
    for y in 0..h {
        for x in 0..w {
            for (c, ch) in channels.iter().enumerate() {
                pix[c] = ch.get(x, y);
            }
            for d in 0..cfg.out_dim {
                data[[y, x, d]] = proj.row(d).iter().zip(pix.iter()).map(|(a, b)| a * b).sum();
            }
        }
    }
    DenseFeatureMap {
        data,
        stride: 1.0,
        provenance: Provenance {
            provider: "synthetic".into(),
            depth: Some(cfg.depth),
            proj_seed: Some(cfg.proj_seed),
            ..Default::default()
        },
    }
}
