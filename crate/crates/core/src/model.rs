//! The full network: latent refinement, fusion, the attention stack and one
//! matchability head per layer, plus the per-image feature front end.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, ParamStore, Var};
use crate::cha::{ChaStack, PositionalEncoder};
use crate::error::{Error, Result};
use crate::features::{
    detect_keypoints_synthetic, sample_dense_at_keypoints, synthetic_semantic_map, Image, KeypointSet,
    SemanticConfig, BASE_DESCRIPTOR_DIM,
};
use crate::lfa::LfaModule;
use crate::matcher::{dual_softmax_graph, MatchabilityHead};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub max_keypoints: usize,
    pub nms_radius: f64,
    pub semantic: SemanticConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            max_keypoints: 512,
            nms_radius: 4.0,
            semantic: SemanticConfig::default(),
        }
    }
}

/// Keypoints with their base descriptors (N×C_base) and sampled latent
/// features (N×D).
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    pub kpts: KeypointSet,
    pub base: Mat,
    pub latent: Mat,
}

impl ImageFeatures {
    pub fn len(&self) -> usize {
        self.kpts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kpts.is_empty()
    }
}

pub fn describe_image(image: &Image, cfg: &FeatureConfig) -> Result<ImageFeatures> {
    let (kpts, base) = detect_keypoints_synthetic(image, cfg.max_keypoints, cfg.nms_radius)?;
    let map = synthetic_semantic_map(image, &cfg.semantic);
    let latent = sample_dense_at_keypoints(&map, &kpts);
    Ok(ImageFeatures {
        kpts,
        base: base.descriptors,
        latent: latent.descriptors,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub layers: usize,
    pub latent_dim: usize,
    pub base_dim: usize,
    /// Initial scale of every attention unit's output layer.
    pub attention_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            layers: 9,
            latent_dim: SemanticConfig::default().out_dim,
            base_dim: BASE_DESCRIPTOR_DIM,
            attention_init_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MifNet {
    pub config: ModelConfig,
    pub lfa: LfaModule,
    pub positions: PositionalEncoder,
    pub stack: ChaStack,
    pub heads: Vec<MatchabilityHead>,
}

/// Graph handles for one layer of a pair forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerForward {
    pub fa: Var,
    pub fb: Var,
    pub p: Var,
    pub sigma_a: Var,
    pub sigma_b: Var,
}

#[derive(Clone, Debug)]
pub struct PairForward {
    pub refined_a: Var,
    pub refined_b: Var,
    pub layers: Vec<LayerForward>,
}

/// Final-layer outputs as plain arrays.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub p: Mat,
    pub sigma_a: Vec<f64>,
    pub sigma_b: Vec<f64>,
    pub descriptors_a: Mat,
    pub descriptors_b: Mat,
}

impl MifNet {
    pub fn new<R: Rng>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.layers == 0 || config.feature_dim == 0 || config.latent_dim == 0 || config.base_dim == 0 {
            return Err(Error::Config("model dimensions and depth must be positive".into()));
        }
        let c = config.feature_dim;
        let lfa = LfaModule::new(store, config.latent_dim, c, rng);
        let positions = PositionalEncoder::new(store, c, rng);
        let stack = ChaStack::new(store, config.base_dim, c, config.layers, config.attention_init_scale, rng);
        let heads = (0..config.layers)
            .map(|j| MatchabilityHead::new(store, &format!("head{j}"), c, rng))
            .collect();
        Ok(Self {
            config,
            lfa,
            positions,
            stack,
            heads,
        })
    }

    fn check(&self, f: &ImageFeatures) -> Result<()> {
        if f.is_empty() {
            return Err(Error::EmptyFeatureSet);
        }
        if f.base.ncols() != self.config.base_dim || f.latent.ncols() != self.config.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "model expects base C={} and latent D={}, got {} and {}",
                self.config.base_dim,
                self.config.latent_dim,
                f.base.ncols(),
                f.latent.ncols()
            )));
        }
        if f.base.nrows() != f.len() || f.latent.nrows() != f.len() {
            return Err(Error::ShapeMismatch("feature rows differ from keypoint count".into()));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, a: &ImageFeatures, b: &ImageFeatures) -> Result<PairForward> {
        self.check(a)?;
        self.check(b)?;
        let la = g.constant(a.latent.clone());
        let lb = g.constant(b.latent.clone());
        let (ra, rb) = self.lfa.forward(g, store, la, lb);
        let pa = self.positions.forward(g, store, &a.kpts);
        let pb = self.positions.forward(g, store, &b.kpts);
        let ba = g.constant(a.base.clone());
        let bb = g.constant(b.base.clone());
        let fa0 = self.stack.fuse(g, store, ra, ba, pa);
        let fb0 = self.stack.fuse(g, store, rb, bb, pb);
        let layers = self
            .stack
            .forward(g, store, fa0, fb0)
            .into_iter()
            .zip(&self.heads)
            .map(|((fa, fb), head)| {
                let s = g.matmul_t(fa, fb);
                let p = dual_softmax_graph(g, s);
                let sigma_a = head.forward(g, store, fa);
                let sigma_b = head.forward(g, store, fb);
                LayerForward {
                    fa,
                    fb,
                    p,
                    sigma_a,
                    sigma_b,
                }
            })
            .collect();
        Ok(PairForward {
            refined_a: ra,
            refined_b: rb,
            layers,
        })
    }

    pub fn predict(&self, store: &ParamStore, a: &ImageFeatures, b: &ImageFeatures) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, a, b)?;
        let last = *out.layers.last().expect("at least one layer");
        let column = |v: Var| g.value(v).column(0).to_vec();
        Ok(Prediction {
            p: g.value(last.p).clone(),
            sigma_a: column(last.sigma_a),
            sigma_b: column(last.sigma_b),
            descriptors_a: g.value(last.fa).clone(),
            descriptors_b: g.value(last.fb).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<(f64, f64, f64)> = (0..12)
            .map(|_| (rng.gen_range(8.0..56.0), rng.gen_range(8.0..56.0), rng.gen_range(2.0..5.0)))
            .collect();
        Image::from_fn(64, 64, |x, y| {
            blobs
                .iter()
                .map(|&(cx, cy, r)| (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * r * r)).exp())
                .sum::<f64>()
                .min(1.0)
        })
    }

    fn small() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            layers: 2,
            latent_dim: 6,
            base_dim: BASE_DESCRIPTOR_DIM,
            attention_init_scale: 0.5,
        }
    }

    fn features() -> FeatureConfig {
        FeatureConfig {
            max_keypoints: 16,
            nms_radius: 4.0,
            semantic: SemanticConfig {
                depth: 2,
                proj_seed: 3,
                out_dim: 6,
            },
        }
    }

    #[test]
    fn front_end_shapes() {
        let f = describe_image(&toy_image(1), &features()).unwrap();
        assert!(!f.is_empty() && f.len() <= 16);
        assert_eq!(f.base.dim(), (f.len(), BASE_DESCRIPTOR_DIM));
        assert_eq!(f.latent.dim(), (f.len(), 6));
    }

    #[test]
    fn prediction_shapes_and_layers() {
        let mut store = ParamStore::new();
        let net = MifNet::new(&mut store, small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = describe_image(&toy_image(1), &features()).unwrap();
        let b = describe_image(&toy_image(2), &features()).unwrap();
        let mut g = Graph::new();
        let out = net.forward(&mut g, &store, &a, &b).unwrap();
        assert_eq!(out.layers.len(), 2);
        let pred = net.predict(&store, &a, &b).unwrap();
        assert_eq!(pred.p.dim(), (a.len(), b.len()));
        assert!(pred.sigma_a.iter().chain(&pred.sigma_b).all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn wrong_widths_rejected() {
        let mut store = ParamStore::new();
        let mut cfg = small();
        cfg.latent_dim = 7;
        let net = MifNet::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = describe_image(&toy_image(1), &features()).unwrap();
        assert!(matches!(net.predict(&store, &a, &a), Err(Error::ShapeMismatch(_))));
    }
}
