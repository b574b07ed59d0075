//! Planar homographies: random synthesis, point warping, ground-truth
//! correspondence labelling and robust estimation from putative matches.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::KeypointSet;

/// Pixel coordinate `(x, y)`.
pub type Point = [f64; 2];

const DET_EPS: f64 = 1e-12;

/// 3×3 projective transform with `m[2][2] == 1`.
///
/// Serialises as 9 row-major numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    /// Normalises by the bottom-right entry and checks invertibility.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if !s.is_finite() || s.abs() < DET_EPS {
            return Err(Error::EstimationFailed(format!(
                "bottom-right entry {s:e} cannot be normalised"
            )));
        }
        let m = m / s;
        let det = m.determinant();
        if !det.is_finite() || det.abs() <= DET_EPS || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::EstimationFailed(format!("singular matrix (det {det:e})")));
        }
        Ok(Homography(m))
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    /// Axis-aligned scaling about the origin.
    pub fn scaling(sx: f64, sy: f64) -> Self {
        Homography(Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let inv = self.0.try_inverse().expect("homography invariant: invertible");
        Homography(inv / inv[(2, 2)])
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Self {
        let m = self.0 * other.0;
        Homography(m / m[(2, 2)])
    }

    pub fn apply(&self, p: Point) -> Result<Point> {
        let v = self.0 * Vector3::new(p[0], p[1], 1.0);
        if v.z.abs() <= DET_EPS {
            return Err(Error::PointAtInfinity(v.z));
        }
        Ok([v.x / v.z, v.y / v.z])
    }

    /// Conjugates by an isotropic-per-axis rescaling of both images, giving
    /// the same mapping expressed in rescaled pixel coordinates.
    pub fn rescaled(&self, sx: f64, sy: f64) -> Self {
        let s = Homography::scaling(sx, sy);
        s.compose(self).compose(&s.inverse())
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        Homography::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

/// Ranges for random homography synthesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomographyConfig {
    /// Degrees, symmetric about zero.
    pub rotation_range: [f64; 2],
    pub scale_range: [f64; 2],
    /// Maximum corner displacement as a fraction of the image size.
    pub perspective_distortion: f64,
    /// Fraction of the image size.
    pub translation_range: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

impl Default for HomographyConfig {
    fn default() -> Self {
        Self {
            rotation_range: [-25.0, 25.0],
            scale_range: [0.7, 1.4],
            perspective_distortion: 0.2,
            translation_range: [-0.1, 0.1],
            seed: 0,
        }
    }
}

impl HomographyConfig {
    pub fn zero() -> Self {
        Self {
            rotation_range: [0.0, 0.0],
            scale_range: [1.0, 1.0],
            perspective_distortion: 0.0,
            translation_range: [0.0, 0.0],
            seed: 0,
        }
    }

    /// Rotation-only perturbation within `[-deg, deg]`.
    pub fn rotation_only(deg: f64) -> Self {
        Self {
            rotation_range: [-deg, deg],
            ..Self::zero()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [rlo, rhi] = self.rotation_range;
        if (rlo + rhi).abs() > 1e-9 || rlo > rhi {
            return Err(Error::Config(format!(
                "rotation_range must be symmetric about 0, got [{rlo}, {rhi}]"
            )));
        }
        let [slo, shi] = self.scale_range;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Config(format!(
                "scale_range must be positive and ordered, got [{slo}, {shi}]"
            )));
        }
        if !(0.0..=0.5).contains(&self.perspective_distortion) {
            return Err(Error::Config(format!(
                "perspective_distortion must lie in [0, 0.5], got {}",
                self.perspective_distortion
            )));
        }
        let [tlo, thi] = self.translation_range;
        if tlo > thi {
            return Err(Error::Config("translation_range is not ordered".into()));
        }
        Ok(())
    }
}

/// One concrete draw of the homography synthesis parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HomographyParams {
    pub angle_deg: f64,
    pub scale: f64,
    /// Pixels.
    pub translation: Point,
    /// Pixel displacement of the corners (0,0), (w,0), (w,h), (0,h).
    pub corner_offsets: [Point; 4],
}

impl HomographyParams {
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            scale: 1.0,
            translation: [0.0, 0.0],
            corner_offsets: [[0.0; 2]; 4],
        }
    }

    /// translation ∘ (rotation ∘ scale about the centre) ∘ corner jitter.
    pub fn to_homography(&self, size: (usize, usize)) -> Result<Homography> {
        let (w, h) = (size.0 as f64, size.1 as f64);
        let corners = image_corners(size);
        let jitter = if self.corner_offsets.iter().all(|o| o[0] == 0.0 && o[1] == 0.0) {
            Homography::identity()
        } else {
            let pairs: Vec<(Point, Point)> = corners
                .iter()
                .zip(self.corner_offsets.iter())
                .map(|(c, o)| (*c, [c[0] + o[0], c[1] + o[1]]))
                .collect();
            dlt(&pairs)?
        };
        let (cx, cy) = (w / 2.0, h / 2.0);
        let theta = self.angle_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let rot_scale = Matrix3::new(
            self.scale * c,
            -self.scale * s,
            0.0,
            self.scale * s,
            self.scale * c,
            0.0,
            0.0,
            0.0,
            1.0,
        );
        let about_centre = Homography::translation(cx, cy)
            .compose(&Homography(rot_scale))
            .compose(&Homography::translation(-cx, -cy));
        let m = Homography::translation(self.translation[0], self.translation[1])
            .compose(&about_centre)
            .compose(&jitter);
        Homography::from_matrix(m.0)
    }
}

pub fn image_corners(size: (usize, usize)) -> [Point; 4] {
    let (w, h) = (size.0 as f64, size.1 as f64);
    [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn is_convex(quad: &[Point; 4]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let a = quad[i];
        let b = quad[(i + 1) % 4];
        let c = quad[(i + 2) % 4];
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross.abs() < 1e-9 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Draws a random homography; resamples up to 100 times when the warped
/// image outline is not a convex quadrilateral.
pub fn sample_homography<R: Rng>(
    cfg: &HomographyConfig,
    size: (usize, usize),
    rng: &mut R,
) -> Result<Homography> {
    const MAX_TRIES: usize = 100;
    cfg.validate()?;
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let (w, h) = (size.0 as f64, size.1 as f64);
    for _ in 0..MAX_TRIES {
        let d = cfg.perspective_distortion;
        let mut corner_offsets = [[0.0; 2]; 4];
        for o in corner_offsets.iter_mut() {
            *o = [uniform(rng, -d * w / 2.0, d * w / 2.0), uniform(rng, -d * h / 2.0, d * h / 2.0)];
        }
        let params = HomographyParams {
            angle_deg: uniform(rng, cfg.rotation_range[0], cfg.rotation_range[1]),
            scale: uniform(rng, cfg.scale_range[0], cfg.scale_range[1]),
            translation: [
                uniform(rng, cfg.translation_range[0], cfg.translation_range[1]) * w,
                uniform(rng, cfg.translation_range[0], cfg.translation_range[1]) * h,
            ],
            corner_offsets,
        };
        let Ok(hm) = params.to_homography(size) else {
            continue;
        };
        let Ok(warped) = warp_points(&hm, &image_corners(size)) else {
            continue;
        };
        if is_convex(&[warped[0], warped[1], warped[2], warped[3]]) {
            return Ok(hm);
        }
    }
    Err(Error::DegenerateHomography(MAX_TRIES))
}

/// Projective action with perspective divide.
pub fn warp_points(h: &Homography, pts: &[Point]) -> Result<Vec<Point>> {
    pts.iter().map(|&p| h.apply(p)).collect()
}

/// Ground-truth matches and unmatched sets for a keypoint pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceLabels {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
    pub threshold_px: f64,
}

impl CorrespondenceLabels {
    /// Swaps the roles of the two images.
    pub fn transposed(&self) -> Self {
        let mut matches: Vec<(usize, usize)> = self.matches.iter().map(|&(i, j)| (j, i)).collect();
        matches.sort_unstable();
        Self {
            matches,
            unmatched_a: self.unmatched_b.clone(),
            unmatched_b: self.unmatched_a.clone(),
            threshold_px: self.threshold_px,
        }
    }
}

/// Symmetric reprojection distance: the larger of the error measured in B
/// (A warped forward) and in A (B warped back).
pub fn pair_distance_matrix(a: &[Point], b: &[Point], h_ab: &Homography) -> Vec<Vec<f64>> {
    let h_ba = h_ab.inverse();
    let fwd: Vec<Option<Point>> = a.iter().map(|&p| h_ab.apply(p).ok()).collect();
    let bwd: Vec<Option<Point>> = b.iter().map(|&p| h_ba.apply(p).ok()).collect();
    a.iter()
        .zip(fwd.iter())
        .map(|(pa, fa)| {
            b.iter()
                .zip(bwd.iter())
                .map(|(pb, bb)| match (fa, bb) {
                    (Some(fa), Some(bb)) => dist(*fa, *pb).max(dist(*pa, *bb)),
                    _ => f64::INFINITY,
                })
                .collect()
        })
        .collect()
}

fn dist(p: Point, q: Point) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Mutual-nearest-neighbour labelling under the ground-truth homography.
///
/// Points that have a counterpart within the threshold but are not part of a
/// mutual match are ambiguous and appear in neither the match list nor the
/// unmatched sets.
pub fn label_correspondences(
    kpts_a: &KeypointSet,
    kpts_b: &KeypointSet,
    h_ab: &Homography,
    threshold_px: f64,
) -> CorrespondenceLabels {
    label_points(&kpts_a.coords, &kpts_b.coords, h_ab, threshold_px)
}

pub fn label_points(a: &[Point], b: &[Point], h_ab: &Homography, threshold_px: f64) -> CorrespondenceLabels {
    assert!(threshold_px > 0.0, "threshold_px must be positive");
    let d = pair_distance_matrix(a, b, h_ab);
    let argmin = |it: &mut dyn Iterator<Item = f64>| {
        let mut best = (usize::MAX, f64::INFINITY);
        for (k, v) in it.enumerate() {
            if v < best.1 {
                best = (k, v);
            }
        }
        best
    };
    let nn_a: Vec<(usize, f64)> = d.iter().map(|row| argmin(&mut row.iter().copied())).collect();
    let nn_b: Vec<(usize, f64)> = (0..b.len())
        .map(|j| argmin(&mut d.iter().map(|row| row[j])))
        .collect();
    let mut labels = CorrespondenceLabels {
        threshold_px,
        ..Default::default()
    };
    let mut matched_b = vec![false; b.len()];
    for (i, &(j, dij)) in nn_a.iter().enumerate() {
        if j != usize::MAX && dij <= threshold_px && nn_b[j].0 == i {
            labels.matches.push((i, j));
            matched_b[j] = true;
        } else if dij > threshold_px {
            labels.unmatched_a.push(i);
        }
    }
    for (j, &(_, dj)) in nn_b.iter().enumerate() {
        if !matched_b[j] && dj > threshold_px {
            labels.unmatched_b.push(j);
        }
    }
    labels
}

/// Hartley normalisation: centroid to the origin, mean distance √2.
fn normalising_transform(pts: &[Point]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_d = pts.iter().map(|p| dist(*p, [cx, cy])).sum::<f64>() / n;
    let s = if mean_d > 1e-12 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(m: &Matrix3<f64>, p: Point) -> Point {
    let v = m * Vector3::new(p[0], p[1], 1.0);
    [v.x / v.z, v.y / v.z]
}

/// Normalised direct linear transform; least squares for more than 4 pairs.
pub fn dlt(pairs: &[(Point, Point)]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientMatches(pairs.len()));
    }
    let src: Vec<Point> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point> = pairs.iter().map(|p| p.1).collect();
    let ta = normalising_transform(&src);
    let tb = normalising_transform(&dst);
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in src.iter().zip(dst.iter()).enumerate() {
        let [x, y] = transform(&ta, *s);
        let [u, v] = transform(&tb, *d);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::EstimationFailed("SVD did not converge".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &s)| if s < best.1 { (i, s) } else { best });
    let hv = v_t.row(min_idx);
    let hn = Matrix3::from_row_slice(&hv.iter().copied().collect::<Vec<_>>());
    let tb_inv = tb
        .try_inverse()
        .ok_or_else(|| Error::EstimationFailed("normalisation not invertible".into()))?;
    Homography::from_matrix(tb_inv * hn * ta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            max_iters: 2000,
            confidence: 0.995,
        }
    }
}

fn triangle_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs()
}

fn has_collinear_triple(p: &[Point; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| triangle_area(p[t[0]], p[t[1]], p[t[2]]) < 1e-6)
}

fn inlier_mask(h: &Homography, pairs: &[(Point, Point)], thr: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = Vec::with_capacity(pairs.len());
    let mut count = 0;
    let mut err_sum = 0.0;
    for (a, b) in pairs {
        let ok = match h.apply(*a) {
            Ok(p) => {
                let e = dist(p, *b);
                if e <= thr {
                    err_sum += e;
                    true
                } else {
                    false
                }
            }
            Err(_) => false,
        };
        count += ok as usize;
        mask.push(ok);
    }
    (mask, count, err_sum)
}

/// RANSAC over normalised 4-point DLTs with a least-squares refit on the
/// final consensus set.
pub fn estimate_homography<R: Rng>(
    pairs: &[(Point, Point)],
    cfg: &RansacConfig,
    rng: &mut R,
) -> Result<(Homography, Vec<bool>)> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::InsufficientMatches(n));
    }
    let mut best: Option<(Homography, Vec<bool>, usize, f64)> = None;
    let mut needed = cfg.max_iters;
    let mut iter = 0;
    while iter < needed.min(cfg.max_iters) {
        iter += 1;
        let idx = index::sample(rng, n, 4);
        let sample: Vec<(Point, Point)> = idx.iter().map(|i| pairs[i]).collect();
        let src = [sample[0].0, sample[1].0, sample[2].0, sample[3].0];
        let dst = [sample[0].1, sample[1].1, sample[2].1, sample[3].1];
        if has_collinear_triple(&src) || has_collinear_triple(&dst) {
            continue;
        }
        let Ok(h) = dlt(&sample) else {
            continue;
        };
        let (mask, count, err) = inlier_mask(&h, pairs, cfg.threshold_px);
        let better = match &best {
            None => true,
            Some((_, _, bc, be)) => count > *bc || (count == *bc && err < *be),
        };
        if better {
            let w = count as f64 / n as f64;
            best = Some((h, mask, count, err));
            let p_fail = 1.0 - w.powi(4);
            needed = if p_fail <= 0.0 {
                iter
            } else if p_fail >= 1.0 {
                cfg.max_iters
            } else {
                let k = (1.0 - cfg.confidence).ln() / p_fail.ln();
                (k.ceil() as usize).max(iter)
            };
        }
    }
    let Some((mut h, mut mask, mut count, _)) = best else {
        return Err(Error::EstimationFailed("no non-degenerate minimal sample".into()));
    };
    if count < 4 {
        return Err(Error::EstimationFailed(format!("best consensus has {count} inliers")));
    }
    for _ in 0..2 {
        let inliers: Vec<(Point, Point)> = pairs
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(p, _)| *p)
            .collect();
        let Ok(refit) = dlt(&inliers) else {
            break;
        };
        let (m2, c2, _) = inlier_mask(&refit, pairs, cfg.threshold_px);
        if c2 < count {
            break;
        }
        h = refit;
        mask = m2;
        count = c2;
    }
    Ok((h, mask))
}

/// Frobenius norm of the difference of two normalised homographies.
pub fn homography_error(h_true: &Homography, h_pred: &Homography) -> f64 {
    (h_true.0 - h_pred.0).iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn generic() -> Homography {
        Homography::from_row_major(&[1.1, 0.05, 12.0, -0.03, 0.95, -7.0, 1e-4, -2e-4, 1.0]).unwrap()
    }

    fn max_abs_diff(a: &Homography, b: &Homography) -> f64 {
        (a.0 - b.0).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn zero_config_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = sample_homography(&HomographyConfig::zero(), (64, 48), &mut rng).unwrap();
        assert!(max_abs_diff(&h, &Homography::identity()) < 1e-12);
    }

    #[test]
    fn quarter_turn_maps_corner_to_corner() {
        let p = HomographyParams {
            angle_deg: 90.0,
            ..HomographyParams::identity()
        };
        let h = p.to_homography((100, 100)).unwrap();
        // T(50,50)·R(90°)·T(-50,-50) built by hand.
        let expected = Homography::from_row_major(&[0.0, -1.0, 100.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(max_abs_diff(&h, &expected) < 1e-9);
        let c = h.apply([0.0, 0.0]).unwrap();
        assert!((c[0] - 100.0).abs() < 1e-9 && c[1].abs() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = HomographyConfig::default();
        let a = sample_homography(&cfg, (128, 128), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_homography(&cfg, (128, 128), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = HomographyConfig::default();
        cfg.rotation_range = [-10.0, 20.0];
        assert!(cfg.validate().is_err());
        let mut cfg = HomographyConfig::default();
        cfg.scale_range = [0.0, 1.0];
        assert!(cfg.validate().is_err());
        let mut cfg = HomographyConfig::default();
        cfg.perspective_distortion = 0.6;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn warp_simple_cases() {
        let id = Homography::identity();
        assert_eq!(warp_points(&id, &[[10.0, 20.0]]).unwrap(), vec![[10.0, 20.0]]);
        let t = Homography::translation(5.0, -3.0);
        assert_eq!(warp_points(&t, &[[0.0, 0.0]]).unwrap(), vec![[5.0, -3.0]]);
    }

    #[test]
    fn warp_matches_homogeneous_arithmetic() {
        let h = generic();
        let m = h.to_row_major();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Point> = (0..5)
            .map(|_| [rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0)])
            .collect();
        let out = warp_points(&h, &pts).unwrap();
        for (p, q) in pts.iter().zip(out.iter()) {
            let x = m[0] * p[0] + m[1] * p[1] + m[2];
            let y = m[3] * p[0] + m[4] * p[1] + m[5];
            let w = m[6] * p[0] + m[7] * p[1] + m[8];
            assert!((q[0] - x / w).abs() < 1e-9 && (q[1] - y / w).abs() < 1e-9);
        }
    }

    #[test]
    fn point_at_infinity_is_reported() {
        let h = Homography::from_row_major(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(h.apply([-1.0, 5.0]), Err(Error::PointAtInfinity(_))));
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let h = generic();
        let i = h.compose(&h.inverse());
        assert!(max_abs_diff(&i, &Homography::identity()) < 1e-9);
    }

    #[test]
    fn labels_identical_sets_on_diagonal() {
        let pts: Vec<Point> = (0..6).map(|i| [i as f64 * 10.0, 5.0 + i as f64 * 7.0]).collect();
        let l = label_points(&pts, &pts, &Homography::identity(), 3.0);
        assert_eq!(l.matches, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(l.unmatched_a.is_empty() && l.unmatched_b.is_empty());
    }

    #[test]
    fn labels_offset_sets_are_unmatched() {
        let a: Vec<Point> = (0..5).map(|i| [i as f64 * 30.0, 0.0]).collect();
        let b: Vec<Point> = a.iter().map(|p| [p[0], p[1] + 10.0]).collect();
        let l = label_points(&a, &b, &Homography::identity(), 3.0);
        assert!(l.matches.is_empty());
        assert_eq!(l.unmatched_a.len(), 5);
        assert_eq!(l.unmatched_b.len(), 5);
    }

    /// Exhaustive mutual-nearest search over the symmetric distance.
    fn brute_force_labels(a: &[Point], b: &[Point], h: &Homography, thr: f64) -> Vec<(usize, usize)> {
        let hi = h.inverse();
        let d = |i: usize, j: usize| {
            let f = h.apply(a[i]).unwrap();
            let g = hi.apply(b[j]).unwrap();
            let e1 = ((f[0] - b[j][0]).powi(2) + (f[1] - b[j][1]).powi(2)).sqrt();
            let e2 = ((g[0] - a[i][0]).powi(2) + (g[1] - a[i][1]).powi(2)).sqrt();
            e1.max(e2)
        };
        let mut out = vec![];
        for i in 0..a.len() {
            for j in 0..b.len() {
                let dij = d(i, j);
                let row_min = (0..b.len()).all(|k| d(i, k) > dij || (d(i, k) == dij && k >= j));
                let col_min = (0..a.len()).all(|k| d(k, j) > dij || (d(k, j) == dij && k >= i));
                if row_min && col_min && dij <= thr {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn labels_match_brute_force() {
        let h = Homography::translation(4.0, -2.0);
        let a: Vec<Point> = vec![[10.0, 10.0], [40.0, 12.0], [70.0, 30.0], [20.0, 60.0], [55.0, 55.0], [90.0, 90.0]];
        let offsets = [[0.5, 0.2], [2.5, -1.0], [8.0, 0.0], [-0.3, 1.9], [0.0, 4.0], [1.0, 1.0]];
        let mut b: Vec<Point> = a
            .iter()
            .zip(offsets.iter())
            .map(|(p, o)| [p[0] + 4.0 + o[0], p[1] - 2.0 + o[1]])
            .collect();
        b.swap(0, 4);
        let l = label_points(&a, &b, &h, 3.0);
        let mut got = l.matches.clone();
        got.sort_unstable();
        assert_eq!(got, brute_force_labels(&a, &b, &h, 3.0));
        assert_eq!(got.len(), 4);
    }

    #[test]
    fn dlt_recovers_from_four_points() {
        let h = generic();
        let src: Vec<Point> = vec![[0.0, 0.0], [100.0, 5.0], [90.0, 120.0], [-10.0, 80.0]];
        let pairs: Vec<(Point, Point)> = src.iter().map(|&p| (p, h.apply(p).unwrap())).collect();
        let est = dlt(&pairs).unwrap();
        assert!(max_abs_diff(&est, &h) < 1e-6);
    }

    #[test]
    fn ransac_identity_correspondences() {
        let pts: Vec<(Point, Point)> = (0..12)
            .map(|i| {
                let p = [(i * 17 % 50) as f64 * 3.0, (i * 31 % 70) as f64 * 2.0];
                (p, p)
            })
            .collect();
        let (h, mask) =
            estimate_homography(&pts, &RansacConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(max_abs_diff(&h, &Homography::identity()) < 1e-9);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn ransac_errors() {
        let few = vec![([0.0, 0.0], [0.0, 0.0]); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            estimate_homography(&few, &RansacConfig::default(), &mut rng),
            Err(Error::InsufficientMatches(3))
        ));
        let collinear: Vec<(Point, Point)> = (0..8).map(|i| ([i as f64, i as f64], [i as f64, 2.0 * i as f64])).collect();
        assert!(matches!(
            estimate_homography(&collinear, &RansacConfig::default(), &mut rng),
            Err(Error::EstimationFailed(_))
        ));
    }

    #[test]
    fn homography_error_cases() {
        let h = generic();
        assert_eq!(homography_error(&h, &h), 0.0);
        let mut m = h.to_row_major();
        m[1] += 3.0;
        let p = Homography::from_row_major(&m).unwrap();
        assert!((homography_error(&h, &p) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip() {
        let h = generic();
        let s = serde_json::to_string(&h).unwrap();
        let back: Homography = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
    }
}
