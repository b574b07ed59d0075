//! Keypoints, descriptor sets and dense semantic feature maps.

mod detector;
mod image;
mod manifest;
mod semantic;
mod tensor_file;

pub use self::detector::{detect_keypoints_synthetic, harris_response, patch_descriptor, BASE_DESCRIPTOR_DIM};
pub use self::image::{Border, Image};
pub use self::manifest::{load_keypoints_and_features, read_manifest, write_manifest, ManifestEntry};
pub use self::semantic::{semantic_channels, synthetic_semantic_map, SemanticConfig};
pub use self::tensor_file::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, Tensor};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Keypoint locations (pixels) and detection scores for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub coords: Vec<Point>,
    pub scores: Vec<f64>,
    /// `(width, height)`.
    pub image_size: (usize, usize),
}

impl KeypointSet {
    pub fn new(coords: Vec<Point>, scores: Vec<f64>, image_size: (usize, usize)) -> Result<Self> {
        if coords.len() != scores.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates but {} scores",
                coords.len(),
                scores.len()
            )));
        }
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        if let Some(p) = coords
            .iter()
            .find(|p| !(p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h))
        {
            return Err(Error::ShapeMismatch(format!(
                "keypoint ({}, {}) outside {}x{} image",
                p[0], p[1], image_size.0, image_size.1
            )));
        }
        Ok(Self {
            coords,
            scores,
            image_size,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Applies a permutation: entry `k` of the result is entry `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            scores: perm.iter().map(|&i| self.scores[i]).collect(),
            image_size: self.image_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureRole {
    Base,
    Latent,
    Refined,
    Invariant,
}

/// N×C descriptors belonging to a keypoint set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub descriptors: Array2<f64>,
    pub role: FeatureRole,
}

impl FeatureSet {
    pub fn new(descriptors: Array2<f64>, role: FeatureRole) -> Result<Self> {
        if descriptors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData(format!("{role:?} descriptors")));
        }
        Ok(Self { descriptors, role })
    }

    pub fn len(&self) -> usize {
        self.descriptors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }

    pub fn check_matches(&self, kpts: &KeypointSet) -> Result<()> {
        if self.len() != kpts.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} descriptors for {} keypoints",
                self.len(),
                kpts.len()
            )));
        }
        Ok(())
    }
}

/// Where a dense map came from; `decoder_layer` and `noise_steps` describe
/// maps exported from a generative model, `depth`/`proj_seed` the built-in
/// synthetic provider.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub provider: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_layer: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proj_seed: Option<u64>,
}

/// H'×W'×D feature grid; map node `(u, v)` covers image pixel `(u·stride, v·stride)`
/// measured between pixel centres.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatureMap {
    pub data: Array3<f64>,
    pub stride: f64,
    pub provenance: Provenance,
}

impl DenseFeatureMap {
    pub fn new(data: Array3<f64>, stride: f64, provenance: Provenance) -> Result<Self> {
        let (h, w, d) = data.dim();
        if h == 0 || w == 0 || d == 0 || stride <= 0.0 {
            return Err(Error::ShapeMismatch(format!(
                "dense map must be non-empty with positive stride, got {h}x{w}x{d} stride {stride}"
            )));
        }
        Ok(Self {
            data,
            stride,
            provenance,
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

/// Bilinear interpolation of a dense map at keypoint locations.
///
/// Pixel centres are aligned: pixel `x` maps to `(x + 0.5) / stride - 0.5`
/// in map coordinates; samples are clamped to the grid.
pub fn sample_dense_at_keypoints(map: &DenseFeatureMap, kpts: &KeypointSet) -> FeatureSet {
    let (h, w, d) = map.data.dim();
    let mut out = Array2::zeros((kpts.len(), d));
    for (k, p) in kpts.coords.iter().enumerate() {
        let u = ((p[0] + 0.5) / map.stride - 0.5).clamp(0.0, (w - 1) as f64);
        let v = ((p[1] + 0.5) / map.stride - 0.5).clamp(0.0, (h - 1) as f64);
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (u1, v1) = ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1));
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let weights = [
            ((v0, u0), (1.0 - fu) * (1.0 - fv)),
            ((v0, u1), fu * (1.0 - fv)),
            ((v1, u0), (1.0 - fu) * fv),
            ((v1, u1), fu * fv),
        ];
        for c in 0..d {
            out[[k, c]] = weights
                .iter()
                .map(|&((y, x), wt)| wt * map.data[[y, x, c]])
                .sum();
        }
    }
    FeatureSet {
        descriptors: out,
        role: FeatureRole::Latent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kp(coords: Vec<Point>, size: (usize, usize)) -> KeypointSet {
        let n = coords.len();
        KeypointSet::new(coords, vec![1.0; n], size).unwrap()
    }

    fn map_from(data: Array3<f64>) -> DenseFeatureMap {
        DenseFeatureMap::new(data, 1.0, Provenance::default()).unwrap()
    }

    #[test]
    fn sample_on_grid_node() {
        let data = Array3::from_shape_fn((4, 4, 3), |(y, x, c)| (y * 16 + x * 4 + c) as f64);
        let f = sample_dense_at_keypoints(&map_from(data.clone()), &kp(vec![[2.0, 1.0]], (4, 4)));
        for c in 0..3 {
            assert_eq!(f.descriptors[[0, c]], data[[1, 2, c]]);
        }
    }

    #[test]
    fn sample_at_midpoint() {
        let data = Array3::from_shape_fn((4, 4, 1), |(_, x, _)| if x == 1 { 2.0 } else if x == 2 { 6.0 } else { 0.0 });
        let f = sample_dense_at_keypoints(&map_from(data), &kp(vec![[1.5, 2.0]], (4, 4)));
        assert!((f.descriptors[[0, 0]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn sample_matches_four_corner_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = Array3::from_shape_fn((4, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let pts: Vec<Point> = (0..5).map(|_| [rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)]).collect();
        let f = sample_dense_at_keypoints(&map_from(data.clone()), &kp(pts.clone(), (4, 4)));
        for (k, p) in pts.iter().enumerate() {
            let (x0, y0) = (p[0].floor(), p[1].floor());
            let (ax, ay) = (p[0] - x0, p[1] - y0);
            let (x0, y0) = (x0 as usize, y0 as usize);
            for c in 0..3 {
                let expected = data[[y0, x0, c]] * (1.0 - ax) * (1.0 - ay)
                    + data[[y0, x0 + 1, c]] * ax * (1.0 - ay)
                    + data[[y0 + 1, x0, c]] * (1.0 - ax) * ay
                    + data[[y0 + 1, x0 + 1, c]] * ax * ay;
                assert!((f.descriptors[[k, c]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_linear_in_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m1 = Array3::from_shape_fn((6, 5, 2), |_| rng.gen_range(-1.0..1.0));
        let m2 = Array3::from_shape_fn((6, 5, 2), |_| rng.gen_range(-1.0..1.0));
        let pts: Vec<Point> = (0..7).map(|_| [rng.gen_range(0.0..5.0), rng.gen_range(0.0..6.0)]).collect();
        let k = kp(pts, (5, 6));
        let (a, b) = (0.7, -1.3);
        let comb = &m1 * a + &m2 * b;
        let s = sample_dense_at_keypoints(&map_from(comb), &k).descriptors;
        let s1 = sample_dense_at_keypoints(&map_from(m1), &k).descriptors;
        let s2 = sample_dense_at_keypoints(&map_from(m2), &k).descriptors;
        let lin = s1 * a + s2 * b;
        assert!(s.iter().zip(lin.iter()).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn keypoints_outside_image_rejected() {
        assert!(KeypointSet::new(vec![[4.0, 0.0]], vec![1.0], (4, 4)).is_err());
    }
}
