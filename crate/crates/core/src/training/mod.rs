//! Self-supervised pair synthesis, the matching and aggregation losses, and
//! the optimisation loop.

mod checkpoint;

pub use self::checkpoint::{load_checkpoint, load_model, save_checkpoint, Checkpoint, CheckpointMeta};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Mat, ParamStore, Var};
use crate::error::{Error, Result};
use crate::features::{read_manifest, Border, Image};
use crate::geometry::{label_correspondences, sample_homography, CorrespondenceLabels, Homography, HomographyConfig};
use crate::lfa::{fit_gmm, lfa_losses, GmmConfig, GmmModel};
use crate::model::{describe_image, FeatureConfig, ImageFeatures, MifNet, ModelConfig};
use crate::nn::Adam;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotometricConfig {
    /// Additive offset drawn from `[-b, b]`.
    pub brightness_range: f64,
    pub contrast_range: [f64; 2],
    pub noise_sigma: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness_range: 0.2,
            contrast_range: [0.8, 1.25],
            noise_sigma: 0.01,
        }
    }
}

impl PhotometricConfig {
    pub fn none() -> Self {
        Self {
            brightness_range: 0.0,
            contrast_range: [1.0, 1.0],
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_lfa: f64,
    pub gmm_k: usize,
    pub gmm_max_iters: usize,
    /// Take the aggregation losses on L2-normalised refined features.
    pub lfa_normalize: bool,
    pub layers: usize,
    pub feature_dim: usize,
    pub attention_init_scale: f64,
    pub homography: HomographyConfig,
    pub photometric: PhotometricConfig,
    pub features: FeatureConfig,
    /// Images are resized to `image_size × image_size` before synthesis.
    pub image_size: usize,
    pub correspondence_threshold_px: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 2,
            epochs: 15,
            lambda_lfa: 2.0,
            gmm_k: 5,
            gmm_max_iters: 100,
            lfa_normalize: true,
            layers: 9,
            feature_dim: 64,
            attention_init_scale: 0.5,
            homography: HomographyConfig::default(),
            photometric: PhotometricConfig::default(),
            features: FeatureConfig::default(),
            image_size: 512,
            correspondence_threshold_px: 3.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0) {
            return bad("lr must be non-negative");
        }
        if !(self.lambda_lfa >= 0.0) {
            return bad("lambda_lfa must be non-negative");
        }
        if self.gmm_k == 0 || self.layers == 0 || self.feature_dim == 0 {
            return bad("gmm_k, layers and feature_dim must be at least 1");
        }
        if self.batch_size == 0 || self.image_size < 64 {
            return bad("batch_size must be positive and image_size at least 64");
        }
        if !(self.correspondence_threshold_px > 0.0) {
            return bad("correspondence_threshold_px must be positive");
        }
        let p = &self.photometric;
        if !(p.brightness_range >= 0.0 && p.noise_sigma >= 0.0 && p.contrast_range[0] > 0.0 && p.contrast_range[0] <= p.contrast_range[1]) {
            return bad("photometric ranges are invalid");
        }
        self.homography.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            layers: self.layers,
            latent_dim: self.features.semantic.out_dim,
            attention_init_scale: self.attention_init_scale,
            ..ModelConfig::default()
        }
    }

    pub fn gmm_config(&self, seed: u64) -> GmmConfig {
        GmmConfig {
            k: self.gmm_k,
            max_iters: self.gmm_max_iters,
            seed,
            ..GmmConfig::default()
        }
    }

    /// Hex SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic per-sample generator: the base seed selects the key, the
/// sample coordinates select the stream.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub image_a: Image,
    pub image_b: Image,
    pub h_ab: Homography,
    pub features_a: ImageFeatures,
    pub features_b: ImageFeatures,
    pub labels: CorrespondenceLabels,
}

pub fn photometric_jitter<R: Rng>(image: &Image, cfg: &PhotometricConfig, rng: &mut R) -> Image {
    let b = if cfg.brightness_range > 0.0 {
        rng.gen_range(-cfg.brightness_range..=cfg.brightness_range)
    } else {
        0.0
    };
    let c = if cfg.contrast_range[1] > cfg.contrast_range[0] {
        rng.gen_range(cfg.contrast_range[0]..=cfg.contrast_range[1])
    } else {
        cfg.contrast_range[0]
    };
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("valid sigma"));
    let data = image
        .data()
        .iter()
        .map(|&v| {
            let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            ((v - 0.5) * c + 0.5 + b + n).clamp(0.0, 1.0)
        })
        .collect();
    Image::from_vec(image.width(), image.height(), data)
}

/// Warps `image` by a random homography (reflected borders), jitters the
/// copy, and describes and labels both views.
pub fn synthesize_pair<R: Rng>(image: &Image, cfg: &TrainConfig, rng: &mut R) -> Result<TrainingSample> {
    let size = image.size();
    let h_ab = sample_homography(&cfg.homography, size, rng)?;
    let warped = image.warp(&h_ab, size, Border::Reflect);
    let image_b = photometric_jitter(&warped, &cfg.photometric, rng);
    let features_a = describe_image(image, &cfg.features)?;
    let features_b = describe_image(&image_b, &cfg.features)?;
    let labels = label_correspondences(&features_a.kpts, &features_b.kpts, &h_ab, cfg.correspondence_threshold_px);
    Ok(TrainingSample {
        image_a: image.clone(),
        image_b,
        h_ab,
        features_a,
        features_b,
        labels,
    })
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Negative log-likelihood of the labelled assignment:
/// `−mean log p_ij` over matches, `−mean log(1−σ)` over each unmatched set.
pub fn match_loss(p: &Mat, sigma_a: &[f64], sigma_b: &[f64], labels: &CorrespondenceLabels) -> f64 {
    fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
        let n = v.len();
        if n == 0 {
            0.0
        } else {
            v.sum::<f64>() / n as f64
        }
    }
    let gt = mean(labels.matches.iter().map(|&(i, j)| -clamp_p(p[[i, j]]).ln()));
    let ua = mean(labels.unmatched_a.iter().map(|&i| -clamp_p(1.0 - sigma_a[i]).ln()));
    let ub = mean(labels.unmatched_b.iter().map(|&j| -clamp_p(1.0 - sigma_b[j]).ln()));
    gt + ua + ub
}

/// Graph form of [`match_loss`]; `sigma_a`/`sigma_b` are N×1.
pub fn match_loss_graph(g: &mut Graph, p: Var, sigma_a: Var, sigma_b: Var, labels: &CorrespondenceLabels) -> Var {
    let mut terms = Vec::new();
    if !labels.matches.is_empty() {
        let picked = g.gather(p, labels.matches.clone());
        let logs = g.log_clamped(picked, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let m = g.mean(logs);
        terms.push(g.scale(m, -1.0));
    }
    for (sigma, idx) in [(sigma_a, &labels.unmatched_a), (sigma_b, &labels.unmatched_b)] {
        if idx.is_empty() {
            continue;
        }
        let picked = g.rows(sigma, idx.clone());
        let ones = g.constant(Array2::ones((idx.len(), 1)));
        let comp = g.sub(ones, picked);
        let logs = g.log_clamped(comp, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let m = g.mean(logs);
        terms.push(g.scale(m, -1.0));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return g.constant(Array2::zeros((1, 1))),
    };
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    total
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_layer: Vec<f64>,
    pub l_match: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_lfa: f64,
    pub total: f64,
    /// Images whose mixture fit failed and so contributed no aggregation loss.
    pub lfa_skipped: usize,
}

/// Weight of the aggregation loss and the mixture fitted for it. When
/// `fixed_mixtures` is set those models are used instead of fitting.
#[derive(Clone, Debug)]
pub struct LossSettings {
    pub lambda: f64,
    pub gmm: GmmConfig,
    /// Fit the mixture and take the aggregation losses on unit-length rows.
    pub normalize_features: bool,
    pub fixed_mixtures: Option<[Option<GmmModel>; 2]>,
}

impl LossSettings {
    pub fn new(lambda: f64, gmm: GmmConfig) -> Self {
        Self {
            lambda,
            gmm,
            normalize_features: true,
            fixed_mixtures: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Mixtures used for images A and B; `None` where the fit failed or λ = 0.
    pub mixtures: [Option<GmmModel>; 2],
}

/// `mean_j match_loss(layer j) + λ·Σ_images (intra − inter)`.
///
/// The mixture is fitted to the current refined features of each image and
/// its responsibilities enter the graph as constants.
pub fn total_loss(
    g: &mut Graph,
    store: &ParamStore,
    model: &MifNet,
    a: &ImageFeatures,
    b: &ImageFeatures,
    labels: &CorrespondenceLabels,
    settings: &LossSettings,
) -> Result<LossOutput> {
    let out = model.forward(g, store, a, b)?;
    let mut br = LossBreakdown::default();
    let mut layer_sum: Option<Var> = None;
    for layer in &out.layers {
        let l = match_loss_graph(g, layer.p, layer.sigma_a, layer.sigma_b, labels);
        br.per_layer.push(g.scalar(l));
        layer_sum = Some(match layer_sum {
            Some(s) => g.add(s, l),
            None => l,
        });
    }
    let l_match = g.scale(layer_sum.expect("at least one layer"), 1.0 / out.layers.len() as f64);
    br.l_match = g.scalar(l_match);
    let mut total = l_match;
    let mut mixtures: [Option<GmmModel>; 2] = [None, None];
    if settings.lambda > 0.0 {
        for (k, refined) in [out.refined_a, out.refined_b].into_iter().enumerate() {
            let refined = if settings.normalize_features {
                g.normalize_rows(refined, 1e-12)
            } else {
                refined
            };
            let fitted = match &settings.fixed_mixtures {
                Some(fixed) => fixed[k].clone(),
                None => {
                    let cfg = GmmConfig {
                        seed: settings.gmm.seed.wrapping_add(k as u64),
                        ..settings.gmm.clone()
                    };
                    fit_gmm(g.value(refined), &cfg)
                        .map_err(|e| log::warn!("mixture fit skipped: {e}"))
                        .ok()
                }
            };
            let Some(mixture) = fitted else {
                br.lfa_skipped += 1;
                continue;
            };
            let (intra, inter) = lfa_losses(g, refined, &mixture);
            br.l_intra += g.scalar(intra);
            br.l_inter += g.scalar(inter);
            let lfa = g.sub(intra, inter);
            let weighted = g.scale(lfa, settings.lambda);
            total = g.add(total, weighted);
            mixtures[k] = Some(mixture);
        }
    }
    br.l_lfa = br.l_intra - br.l_inter;
    br.total = g.scalar(total);
    Ok(LossOutput {
        total,
        breakdown: br,
        mixtures,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub l_match: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub skipped_samples: usize,
    pub final_loss: f64,
}

pub fn load_training_images(manifest: &Path, size: usize) -> Result<Vec<Image>> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Config(format!("{}: manifest is empty", manifest.display())));
    }
    entries
        .iter()
        .map(|e| {
            let img = Image::load(&e.image)?;
            Ok(if img.size() == (size, size) { img } else { img.resize(size, size) })
        })
        .collect()
}

struct SampleResult {
    grads: Vec<Mat>,
    breakdown: LossBreakdown,
}

fn run_sample(
    store: &ParamStore,
    model: &MifNet,
    image: &Image,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<Option<SampleResult>> {
    let mut rng = sample_rng(cfg.seed, epoch, index);
    let sample = match synthesize_pair(image, cfg, &mut rng) {
        Ok(s) => s,
        Err(Error::NoKeypoints) => {
            log::warn!("sample {index} in epoch {epoch} skipped: no keypoints");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let mut g = Graph::new();
    let settings = LossSettings {
        normalize_features: cfg.lfa_normalize,
        ..LossSettings::new(cfg.lambda_lfa, cfg.gmm_config(rng.gen()))
    };
    let out = total_loss(
        &mut g,
        store,
        model,
        &sample.features_a,
        &sample.features_b,
        &sample.labels,
        &settings,
    )?;
    g.backward(out.total);
    Ok(Some(SampleResult {
        grads: g.param_grads(store),
        breakdown: out.breakdown,
    }))
}

/// Trains from scratch, or from `resume` when given, writing
/// `epoch_XXX.ckpt`, `model.ckpt` and `train_log.jsonl` under `out_dir`.
pub fn train(manifest: &Path, cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let images = load_training_images(manifest, cfg.image_size)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (model, mut store, mut adam, start_epoch, mut step) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.meta.config_hash != cfg.hash() {
                log::warn!("resuming with a configuration that differs from the checkpoint's");
            }
            let (model, store) = ck.build_model()?;
            let mut adam = Adam::new(&store, cfg.lr);
            if let Some((m, v)) = ck.adam.clone() {
                adam.m = m;
                adam.v = v;
                adam.step = ck.meta.adam_step;
            }
            (model, store, adam, ck.meta.epoch, ck.meta.step)
        }
        None => {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = MifNet::new(&mut store, cfg.model_config(), &mut rng)?;
            let adam = Adam::new(&store, cfg.lr);
            (model, store, adam, 0, 0)
        }
    };

    let log_path = out_dir.join("train_log.jsonl");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log_out = BufWriter::new(log_file);

    let mut skipped = 0;
    let mut final_loss = f64::NAN;
    let mut last_ckpt = out_dir.join("model.ckpt");
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut sample_rng(cfg.seed ^ 0x5eed, epoch, 0));
        for (batch_id, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<Option<SampleResult>>> = batch
                .par_iter()
                .map(|&idx| run_sample(&store, &model, &images[idx], cfg, epoch, idx))
                .collect();
            let mut grads: Option<Vec<Mat>> = None;
            let mut used = 0usize;
            let mut agg = LossBreakdown::default();
            for r in results {
                let Some(r) = r? else {
                    skipped += 1;
                    continue;
                };
                if !r.breakdown.total.is_finite() {
                    return Err(Error::NonFiniteLoss(batch_id));
                }
                used += 1;
                agg.l_match += r.breakdown.l_match;
                agg.l_intra += r.breakdown.l_intra;
                agg.l_inter += r.breakdown.l_inter;
                agg.total += r.breakdown.total;
                match grads.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&r.grads).for_each(|(a, g)| *a += g),
                    None => grads = Some(r.grads),
                }
            }
            let Some(mut grads) = grads else { continue };
            let inv = 1.0 / used as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss(batch_id));
            }
            adam.update(&mut store, &grads);
            step += 1;
            let line = StepLog {
                step,
                epoch,
                l_match: agg.l_match * inv,
                l_intra: agg.l_intra * inv,
                l_inter: agg.l_inter * inv,
                total: agg.total * inv,
            };
            final_loss = line.total;
            serde_json::to_writer(&mut log_out, &line)?;
            writeln!(log_out).map_err(|e| Error::io(&log_path, e))?;
        }
        log_out.flush().map_err(|e| Error::io(&log_path, e))?;
        log::info!("epoch {} done, step {step}, loss {final_loss:.4}", epoch + 1);
        let meta = CheckpointMeta::new(cfg, epoch + 1, step, adam.step);
        let ck = Checkpoint::from_store(meta, &store, Some((&adam.m, &adam.v)));
        let epoch_path = out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
        save_checkpoint(&epoch_path, &ck)?;
        last_ckpt = out_dir.join("model.ckpt");
        save_checkpoint(&last_ckpt, &ck)?;
    }
    if !last_ckpt.exists() {
        let meta = CheckpointMeta::new(cfg, cfg.epochs, step, adam.step);
        save_checkpoint(&last_ckpt, &Checkpoint::from_store(meta, &store, Some((&adam.m, &adam.v))))?;
    }
    Ok(TrainOutcome {
        checkpoint: last_ckpt,
        steps: step,
        skipped_samples: skipped,
        final_loss,
    })
}

#[cfg(test)]
mod tests;
