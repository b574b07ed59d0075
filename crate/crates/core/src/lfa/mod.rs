//! Latent feature aggregation: attention refinement of the latent features
//! and per-image mixture clustering with compactness/separation losses.

mod attention;
mod gmm;

pub use self::attention::{attention_message, attention_update, AttentionKind, AttentionUnit};
pub use self::gmm::{fit_gmm, row_sums, GmmConfig, GmmModel};

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureRole, FeatureSet};
use crate::nn::Mlp;

/// Entry MLP (D→C→C) followed by one self and one cross attention update.
#[derive(Clone, Debug)]
pub struct LfaModule {
    pub entry: Mlp,
    pub self_unit: AttentionUnit,
    pub cross_unit: AttentionUnit,
}

impl LfaModule {
    pub fn new<R: Rng>(store: &mut ParamStore, latent_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            entry: Mlp::new(store, "lfa.entry", latent_dim, dim, dim, rng),
            self_unit: AttentionUnit::new(store, "lfa.self", dim, AttentionKind::SelfAttention, 1.0, rng),
            cross_unit: AttentionUnit::new(store, "lfa.cross", dim, AttentionKind::Cross, 1.0, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latent_a: Var, latent_b: Var) -> (Var, Var) {
        let ea = self.entry.forward(g, store, latent_a);
        let eb = self.entry.forward(g, store, latent_b);
        let sa = self.self_unit.update(g, store, ea, ea);
        let sb = self.self_unit.update(g, store, eb, eb);
        let ra = self.cross_unit.update(g, store, sa, sb);
        let rb = self.cross_unit.update(g, store, sb, sa);
        (ra, rb)
    }
}

/// Refined features for both images of a pair.
pub fn refine_latent(
    store: &ParamStore,
    module: &LfaModule,
    latent_a: &FeatureSet,
    latent_b: &FeatureSet,
) -> Result<(FeatureSet, FeatureSet)> {
    if latent_a.is_empty() || latent_b.is_empty() {
        return Err(Error::EmptyFeatureSet);
    }
    let mut g = Graph::new();
    let a = g.constant(latent_a.descriptors.clone());
    let b = g.constant(latent_b.descriptors.clone());
    let (ra, rb) = module.forward(&mut g, store, a, b);
    let wrap = |m: &Array2<f64>| FeatureSet {
        descriptors: m.clone(),
        role: FeatureRole::Refined,
    };
    Ok((wrap(g.value(ra)), wrap(g.value(rb))))
}

/// Sum over points of the squared distance to the mean of the point's
/// argmax cluster, means being responsibility-weighted feature averages.
pub fn loss_intra(features: &Array2<f64>, model: &GmmModel) -> f64 {
    let means = model.weighted_means(features);
    model
        .assignments()
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            features
                .row(i)
                .iter()
                .zip(means.row(k))
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>()
        })
        .sum()
}

/// Sum over ordered pairs `k ≠ j` of squared distances between component means.
pub fn loss_inter(model: &GmmModel) -> f64 {
    inter_from_means(&model.means)
}

fn inter_from_means(means: &Array2<f64>) -> f64 {
    let k = means.nrows();
    let mut s = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                s += means
                    .row(a)
                    .iter()
                    .zip(means.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
        }
    }
    s
}

pub fn loss_lfa(intra: f64, inter: f64) -> f64 {
    intra - inter
}

/// Differentiable intra/inter losses for features `x` (N×C) under a fitted
/// model whose responsibilities are held constant.
pub fn lfa_losses(g: &mut Graph, x: Var, model: &GmmModel) -> (Var, Var) {
    let n = g.value(x).nrows();
    let k = model.k;
    let weights = model.mean_weights();
    let assign = model.assignments();
    let mut onehot = Array2::zeros((n, k));
    for (i, &a) in assign.iter().enumerate() {
        onehot[[i, a]] = 1.0;
    }
    let w = g.constant(weights);
    let means = g.matmul(w, x);
    let sel = g.constant(onehot);
    let own = g.matmul(sel, means);
    let diff = g.sub(x, own);
    let intra = g.sum_squares(diff);
    // Σ_k Σ_j ||μk − μj||² = 2K Σ_k ||μk||² − 2 ||Σ_k μk||²
    let sq = g.sum_squares(means);
    let ones = g.constant(Array2::ones((1, k)));
    let total = g.matmul(ones, means);
    let tsq = g.sum_squares(total);
    let a = g.scale(sq, 2.0 * k as f64);
    let b = g.scale(tsq, 2.0);
    let inter = g.sub(a, b);
    (intra, inter)
}
