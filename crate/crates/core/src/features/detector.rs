use ndarray::Array2;

use super::{FeatureRole, FeatureSet, Image, KeypointSet};
use crate::error::{Error, Result};
use crate::geometry::Point;

pub const BASE_DESCRIPTOR_DIM: usize = 64;
const PATCH: isize = 8;
const HARRIS_K: f64 = 0.04;
const WINDOW_SIGMA: f64 = 1.0;
/// Keypoints closer than this to the border are discarded.
const BORDER: usize = 4;
/// Candidates weaker than this fraction of the strongest response are dropped.
const REL_THRESHOLD: f64 = 1e-4;

/// Harris corner response `det(M) - k·tr(M)²` of the Gaussian-weighted
/// structure tensor built from Sobel derivatives.
pub fn harris_response(image: &Image) -> Image {
    let (gx, gy) = image.sobel();
    let (w, h) = image.size();
    let ixx = Image::from_fn(w, h, |x, y| gx.get(x, y) * gx.get(x, y)).gaussian_blur(WINDOW_SIGMA);
    let iyy = Image::from_fn(w, h, |x, y| gy.get(x, y) * gy.get(x, y)).gaussian_blur(WINDOW_SIGMA);
    let ixy = Image::from_fn(w, h, |x, y| gx.get(x, y) * gy.get(x, y)).gaussian_blur(WINDOW_SIGMA);
    Image::from_fn(w, h, |x, y| {
        let (a, b, c) = (ixx.get(x, y), iyy.get(x, y), ixy.get(x, y));
        let tr = a + b;
        a * b - c * c - HARRIS_K * tr * tr
    })
}

/// Flattened 8×8 intensity patch around `p` (offsets −4..=3), zero outside
/// the image, L2-normalised.
pub fn patch_descriptor(image: &Image, p: Point) -> Vec<f64> {
    let (cx, cy) = (p[0].round() as isize, p[1].round() as isize);
    let mut d = Vec::with_capacity(BASE_DESCRIPTOR_DIM);
    for dy in -PATCH / 2..PATCH / 2 {
        for dx in -PATCH / 2..PATCH / 2 {
            d.push(image.get_border(cx + dx, cy + dy, super::Border::Zero));
        }
    }
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        d.iter_mut().for_each(|v| *v /= norm);
    } else {
        let u = 1.0 / (BASE_DESCRIPTOR_DIM as f64).sqrt();
        d.iter_mut().for_each(|v| *v = u);
    }
    d
}

/// Harris corners with greedy radius suppression, strongest first, plus
/// normalised patch descriptors.
pub fn detect_keypoints_synthetic(
    image: &Image,
    max_kpts: usize,
    nms_radius: f64,
) -> Result<(KeypointSet, FeatureSet)> {
    assert!(max_kpts >= 1, "max_kpts must be at least 1");
    if !image.is_finite() {
        return Err(Error::NonFiniteData("image".into()));
    }
    let (w, h) = image.size();
    let resp = harris_response(image);
    let max_r = resp.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max_r > 1e-12) {
        return Err(Error::NoKeypoints);
    }
    let floor = max_r * REL_THRESHOLD;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let border = BORDER.min(w / 4).min(h / 4);
    for y in border..h.saturating_sub(border) {
        for x in border..w.saturating_sub(border) {
            let r = resp.get(x, y);
            if r <= floor {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dx, dy) != (0, 0) && resp.get_border(x as isize + dx, y as isize + dy, super::Border::Clamp) > r {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                candidates.push((r, x, y));
            }
        }
    }
    // Strongest first; ties by raster order.
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));

    let cell = nms_radius.max(1.0);
    let gw = (w as f64 / cell).ceil() as usize + 1;
    let gh = (h as f64 / cell).ceil() as usize + 1;
    let mut grid: Vec<Vec<Point>> = vec![Vec::new(); gw * gh];
    let mut coords = Vec::new();
    let mut scores = Vec::new();
    for (r, x, y) in candidates {
        if coords.len() >= max_kpts {
            break;
        }
        let p = [x as f64, y as f64];
        let (gx, gy) = ((p[0] / cell) as usize, (p[1] / cell) as usize);
        let mut clear = true;
        'outer: for cy in gy.saturating_sub(1)..=(gy + 1).min(gh - 1) {
            for cx in gx.saturating_sub(1)..=(gx + 1).min(gw - 1) {
                for q in &grid[cy * gw + cx] {
                    if (q[0] - p[0]).hypot(q[1] - p[1]) < nms_radius {
                        clear = false;
                        break 'outer;
                    }
                }
            }
        }
        if clear {
            grid[gy * gw + gx].push(p);
            coords.push(p);
            scores.push((r / max_r).clamp(0.0, 1.0));
        }
    }
    if coords.is_empty() {
        return Err(Error::NoKeypoints);
    }
    let mut desc = Array2::zeros((coords.len(), BASE_DESCRIPTOR_DIM));
    for (k, p) in coords.iter().enumerate() {
        for (c, v) in patch_descriptor(image, *p).into_iter().enumerate() {
            desc[[k, c]] = v;
        }
    }
    let kpts = KeypointSet::new(coords, scores, (w, h))?;
    Ok((
        kpts,
        FeatureSet {
            descriptors: desc,
            role: FeatureRole::Base,
        },
    ))
}
