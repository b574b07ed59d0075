//! JSON-lines dataset manifests.
//!
//! Each line describes one image. A line that carries `pair_homography` or
//! `gt_points` is the second image of a pair whose first image is the line
//! directly above it.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{read_tensor, FeatureRole, FeatureSet, KeypointSet};
use crate::error::{Error, Result};
use crate::geometry::Point;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kpts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desc: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_map: Option<PathBuf>,
    /// TensorFile M×4 of `(ax, ay, bx, by)` control points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_points: Option<PathBuf>,
    /// Row-major homography mapping the previous entry's image onto this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_homography: Option<[f64; 9]>,
}

impl ManifestEntry {
    pub fn image(path: impl Into<PathBuf>) -> Self {
        Self {
            image: path.into(),
            kpts: None,
            desc: None,
            semantic_map: None,
            gt_points: None,
            pair_homography: None,
        }
    }

    pub fn closes_pair(&self) -> bool {
        self.pair_homography.is_some() || self.gt_points.is_some()
    }

    fn resolve(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.image);
        for p in [&mut self.kpts, &mut self.desc, &mut self.semantic_map, &mut self.gt_points]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        self
    }
}

/// Reads a manifest, resolving relative paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str::<ManifestEntry>(l)
                .map(|e| e.resolve(base))
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads file-backed keypoints (N×2, or N×3 with scores) and descriptors (N×C).
pub fn load_keypoints_and_features(entry: &ManifestEntry) -> Result<(KeypointSet, FeatureSet)> {
    let kpath = entry
        .kpts
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{}: no kpts file", entry.image.display())))?;
    let dpath = entry
        .desc
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{}: no desc file", entry.image.display())))?;
    let kt = read_tensor(kpath)?;
    let dt = read_tensor(dpath)?;
    kt.check_finite("keypoints")?;
    dt.check_finite("descriptors")?;
    let (n, kc) = match kt.shape.as_slice() {
        [n, c] if *c == 2 || *c == 3 => (*n, *c),
        s => return Err(Error::ShapeMismatch(format!("keypoints must be N×2 or N×3, got {s:?}"))),
    };
    let desc: Array2<f64> = match dt.shape.as_slice() {
        [dn, _] if *dn == n => dt.to_matrix()?,
        s => return Err(Error::ShapeMismatch(format!("descriptors must be {n}×C, got {s:?}"))),
    };
    let (w, h) = image::image_dimensions(&entry.image).map_err(|source| Error::Image {
        path: entry.image.clone(),
        source,
    })?;
    let coords: Vec<Point> = (0..n)
        .map(|i| [f64::from(kt.data[i * kc]), f64::from(kt.data[i * kc + 1])])
        .collect();
    let scores: Vec<f64> = if kc == 3 {
        (0..n).map(|i| f64::from(kt.data[i * kc + 2])).collect()
    } else {
        vec![1.0; n]
    };
    let kpts = KeypointSet::new(coords, scores, (w as usize, h as usize))?;
    let feats = FeatureSet::new(desc, FeatureRole::Base)?;
    Ok((kpts, feats))
}
