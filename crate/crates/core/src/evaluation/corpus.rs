//! Procedural test images and pseudo-modality intensity transforms.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{write_manifest, Image, ManifestEntry};

/// Multi-octave value noise plus Gaussian blobs and dark curvilinear
/// "vessels", rescaled to `[0.05, 0.95]`.
pub fn corpus_image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut img = vec![0.0; size * size];

    for (cell, amp) in [(s / 4.0, 0.5), (s / 8.0, 0.3), (s / 16.0, 0.2)] {
        let cells = (s / cell).ceil() as usize + 2;
        let grid: Vec<f64> = (0..cells * cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for y in 0..size {
            let gy = y as f64 / cell;
            let (y0, ty) = (gy.floor() as usize, smooth(gy.fract()));
            for x in 0..size {
                let gx = x as f64 / cell;
                let (x0, tx) = (gx.floor() as usize, smooth(gx.fract()));
                let v = |i: usize, j: usize| grid[(y0 + j) * cells + x0 + i];
                let top = v(0, 0) * (1.0 - tx) + v(1, 0) * tx;
                let bottom = v(0, 1) * (1.0 - tx) + v(1, 1) * tx;
                img[y * size + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }

    let n_blobs = rng.gen_range(15..30);
    for _ in 0..n_blobs {
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let r: f64 = rng.gen_range(2.0..s / 20.0 + 3.0);
        let a = rng.gen_range(0.4..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        stamp(&mut img, size, cx, cy, 3.0 * r, |d2| a * (-d2 / (2.0 * r * r)).exp());
    }

    let mut vessels = vec![0.0; size * size];
    let n_vessels = rng.gen_range(4..9);
    for _ in 0..n_vessels {
        let mut p = [rng.gen_range(0.0..s), rng.gen_range(0.0..s)];
        let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let width: f64 = rng.gen_range(0.8..2.5);
        let depth = rng.gen_range(0.5..1.0);
        let steps = rng.gen_range(20..60);
        for _ in 0..steps {
            heading += rng.gen_range(-0.35..0.35);
            let q = [p[0] + 3.0 * heading.cos(), p[1] + 3.0 * heading.sin()];
            segment(&mut vessels, size, p, q, width, depth);
            p = q;
            if !(0.0..s).contains(&p[0]) || !(0.0..s).contains(&p[1]) {
                break;
            }
        }
    }
    img.iter_mut().zip(&vessels).for_each(|(v, d)| *v -= 0.5 * d);

    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = (hi - lo).max(1e-12);
    Image::from_vec(size, size, img.iter().map(|v| 0.05 + 0.9 * (v - lo) / range).collect())
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn stamp(img: &mut [f64], size: usize, cx: f64, cy: f64, radius: f64, f: impl Fn(f64) -> f64) {
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil() as usize).min(size.saturating_sub(1));
    let y1 = ((cy + radius).ceil() as usize).min(size.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            img[y * size + x] += f(d2);
        }
    }
}

/// Gaussian cross-section around segment `pq`; overlaps keep the maximum.
fn segment(img: &mut [f64], size: usize, p: [f64; 2], q: [f64; 2], width: f64, depth: f64) {
    let reach = 3.0 * width;
    let x0 = (p[0].min(q[0]) - reach).floor().max(0.0) as usize;
    let y0 = (p[1].min(q[1]) - reach).floor().max(0.0) as usize;
    let x1 = ((p[0].max(q[0]) + reach).ceil().max(0.0) as usize).min(size.saturating_sub(1));
    let y1 = ((p[1].max(q[1]) + reach).ceil().max(0.0) as usize).min(size.saturating_sub(1));
    let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
    let len2 = (dx * dx + dy * dy).max(1e-12);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - p[0], y as f64 - p[1]);
            let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
            let d2 = (px - t * dx).powi(2) + (py - t * dy).powi(2);
            let v = depth * (-d2 / (2.0 * width * width)).exp();
            let cell = &mut img[y * size + x];
            *cell = cell.max(v);
        }
    }
}

/// Writes `count` corpus images as PNGs plus a manifest listing them.
pub fn write_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for k in 0..count {
        let name = format!("img_{k:04}.png");
        corpus_image(seed.wrapping_mul(1_000_003).wrapping_add(k as u64), size).save(&dir.join(&name))?;
        entries.push(ManifestEntry::image(name));
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoModality {
    None,
    InvertGamma,
    BlurNoise,
}

impl std::str::FromStr for PseudoModality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "invert_gamma" => Ok(Self::InvertGamma),
            "blur_noise" => Ok(Self::BlurNoise),
            other => Err(Error::Config(format!("unknown pseudo-modality `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoModalityParams {
    pub gamma: f64,
    pub blur_sigma: f64,
    /// Standard deviation of the multiplicative speckle.
    pub speckle_sigma: f64,
}

impl Default for PseudoModalityParams {
    fn default() -> Self {
        Self {
            gamma: 1.5,
            blur_sigma: 2.0,
            speckle_sigma: 0.1,
        }
    }
}

/// `invert_gamma`: `(1 − I)^γ`. `blur_noise`: Gaussian blur then
/// `I·(1 + s·n)` speckle, clamped to `[0, 1]`.
pub fn pseudo_modality(image: &Image, kind: PseudoModality, params: &PseudoModalityParams, seed: u64) -> Image {
    match kind {
        PseudoModality::None => image.clone(),
        PseudoModality::InvertGamma => image.map(|v| (1.0 - v).clamp(0.0, 1.0).powf(params.gamma)),
        PseudoModality::BlurNoise => {
            let blurred = image.gaussian_blur(params.blur_sigma);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = blurred
                .data()
                .iter()
                .map(|&v| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    (v * (1.0 + params.speckle_sigma * n)).clamp(0.0, 1.0)
                })
                .collect();
            Image::from_vec(image.width(), image.height(), data)
        }
    }
}
