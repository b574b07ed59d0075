//! Full-covariance Gaussian mixture fitted by EM with k-means++ / Lloyd
//! initialisation.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub reg_covar: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_iters: 100,
            tol: 1e-3,
            reg_covar: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GmmModel {
    pub k: usize,
    pub weights: Vec<f64>,
    /// K×C.
    pub means: Array2<f64>,
    pub covariances: Vec<Array2<f64>>,
    /// N×K, rows sum to one.
    pub responsibilities: Array2<f64>,
    /// Mean per-point log-likelihood after each E-step.
    pub log_likelihood_history: Vec<f64>,
    pub converged: bool,
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    k: usize,
    weights: &'a [f64],
    means: Vec<Vec<f64>>,
    log_likelihood: f64,
    iterations: usize,
    converged: bool,
}

/// Lower Cholesky factor plus log-determinant of one component covariance.
struct Component {
    chol: DMatrix<f64>,
    log_det: f64,
}

impl Component {
    fn new(cov: &Array2<f64>) -> Option<Self> {
        let c = cov.ncols();
        let m = DMatrix::from_fn(c, c, |i, j| cov[[i, j]]);
        let chol = m.cholesky()?.l();
        let log_det = 2.0 * (0..c).map(|i| chol[(i, i)].ln()).sum::<f64>();
        Some(Self { chol, log_det })
    }

    fn log_pdf(&self, x: ArrayView1<f64>, mean: ArrayView1<f64>, buf: &mut [f64]) -> f64 {
        let c = buf.len();
        // forward substitution L y = x - mu
        let mut maha = 0.0;
        for i in 0..c {
            let mut s = x[i] - mean[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * buf[j];
            }
            let yi = s / self.chol[(i, i)];
            buf[i] = yi;
            maha += yi * yi;
        }
        -0.5 * (c as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det + maha)
    }
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp<R: Rng>(x: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.gen_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(x.row(i), centers.row(c)));
        }
    }
    centers
}

fn lloyd(x: &Array2<f64>, centers: &mut Array2<f64>, iters: usize) -> Vec<usize> {
    let (n, k) = (x.nrows(), centers.nrows());
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iters {
        let mut changed = false;
        for i in 0..n {
            let best = (0..k)
                .map(|c| (c, sq_dist(x.row(i), centers.row(c))))
                .fold((0, f64::INFINITY), |b, (c, d)| if d < b.1 { (c, d) } else { b })
                .0;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut row = sums.row_mut(assign[i]);
            row += &x.row(i);
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

struct EmState {
    weights: Vec<f64>,
    means: Array2<f64>,
    covariances: Vec<Array2<f64>>,
}

fn m_step(x: &Array2<f64>, resp: &Array2<f64>, reg: f64) -> (EmState, Vec<f64>) {
    let (n, c) = x.dim();
    let k = resp.ncols();
    let nk: Vec<f64> = (0..k).map(|j| resp.column(j).sum()).collect();
    let mut means = resp.t().dot(x);
    for j in 0..k {
        if nk[j] > 0.0 {
            means.row_mut(j).mapv_inplace(|v| v / nk[j]);
        }
    }
    let mut covariances = Vec::with_capacity(k);
    for j in 0..k {
        let mut cov = Array2::<f64>::zeros((c, c));
        if nk[j] > 0.0 {
            let centered = x - &means.row(j);
            let weighted = &centered * &resp.column(j).insert_axis(Axis(1));
            cov = weighted.t().dot(&centered) / nk[j];
        }
        for d in 0..c {
            cov[[d, d]] += reg;
        }
        covariances.push(cov);
    }
    let weights = nk.iter().map(|v| v / n as f64).collect();
    (
        EmState {
            weights,
            means,
            covariances,
        },
        nk,
    )
}

/// Returns per-point log-likelihoods and fills `resp`.
fn e_step(x: &Array2<f64>, st: &EmState, resp: &mut Array2<f64>) -> Result<Vec<f64>> {
    let (n, c) = x.dim();
    let k = st.weights.len();
    let comps: Vec<Component> = st
        .covariances
        .iter()
        .enumerate()
        .map(|(j, cov)| Component::new(cov).ok_or(Error::DegenerateCluster(j)))
        .collect::<Result<_>>()?;
    let mut buf = vec![0.0; c];
    let mut lp = vec![0.0; k];
    let mut ll = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..k {
            lp[j] = st.weights[j].ln() + comps[j].log_pdf(x.row(i), st.means.row(j), &mut buf);
        }
        let lse = logsumexp(&lp);
        for j in 0..k {
            resp[[i, j]] = (lp[j] - lse).exp();
        }
        ll.push(lse);
    }
    Ok(ll)
}

/// Fits a K-component GMM.
///
/// A component whose responsibility mass falls below 1e-10 is re-seeded once
/// at the point with the lowest density; a second collapse is an error.
pub fn fit_gmm(x: &Array2<f64>, cfg: &GmmConfig) -> Result<GmmModel> {
    let n = x.nrows();
    if cfg.k == 0 || n < cfg.k {
        return Err(Error::ShapeMismatch(format!("need at least k={} points, got {n}", cfg.k)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData("gmm input".into()));
    }
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = kmeans_pp(x, k, &mut rng);
    let assign = lloyd(x, &mut centers, 100);
    let mut resp = Array2::zeros((n, k));
    for (i, &a) in assign.iter().enumerate() {
        resp[[i, a]] = 1.0;
    }
    // Points ranked by how poorly the current model explains them; before the
    // first E-step, distance to the assigned k-means centre stands in.
    let mut point_ll: Vec<f64> = (0..n).map(|i| -sq_dist(x.row(i), centers.row(assign[i]))).collect();
    let mut reseeded = false;
    let mut history = Vec::new();
    let mut converged = false;
    let mut state;
    let mut iter = 0;
    loop {
        let (st, nk) = m_step(x, &resp, cfg.reg_covar);
        state = st;
        if let Some(bad) = nk.iter().position(|&m| m < 1e-10) {
            if reseeded {
                return Err(Error::DegenerateCluster(bad));
            }
            reseeded = true;
            let worst = point_ll
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |b, (i, &v)| if v < b.1 { (i, v) } else { b })
                .0;
            resp.row_mut(worst).fill(0.0);
            resp[[worst, bad]] = 1.0;
            let (st, _) = m_step(x, &resp, cfg.reg_covar);
            state = st;
        }
        let ll = e_step(x, &state, &mut resp)?;
        let mean_ll = ll.iter().sum::<f64>() / n as f64;
        point_ll = ll;
        let prev = history.last().copied();
        history.push(mean_ll);
        iter += 1;
        if let Some(p) = prev {
            if (mean_ll - p).abs() < cfg.tol {
                converged = true;
                break;
            }
        }
        if iter >= cfg.max_iters.max(1) {
            break;
        }
    }
    Ok(GmmModel {
        k,
        weights: state.weights,
        means: state.means,
        covariances: state.covariances,
        responsibilities: resp,
        log_likelihood_history: history,
        converged,
    })
}

impl GmmModel {
    pub fn final_log_likelihood(&self) -> f64 {
        self.log_likelihood_history.last().copied().unwrap_or(f64::NAN)
    }

    /// Argmax-responsibility cluster per point (lowest index on ties).
    pub fn assignments(&self) -> Vec<usize> {
        self.responsibilities
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                    .0
            })
            .collect()
    }

    /// Responsibility-weighted feature means, K×C.
    pub fn weighted_means(&self, x: &Array2<f64>) -> Array2<f64> {
        let w = self.mean_weights();
        w.dot(x)
    }

    /// K×N matrix whose rows are responsibilities normalised to sum to one.
    pub fn mean_weights(&self) -> Array2<f64> {
        let mut w = self.responsibilities.t().to_owned();
        for mut row in w.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
        w
    }

    /// Mixture density at `x`.
    pub fn density(&self, x: ArrayView1<f64>) -> f64 {
        let c = x.len();
        let mut buf = vec![0.0; c];
        let lp: Vec<f64> = (0..self.k)
            .map(|j| {
                let comp = Component::new(&self.covariances[j]).expect("fitted covariance is SPD");
                self.weights[j].ln() + comp.log_pdf(x, self.means.row(j), &mut buf)
            })
            .collect();
        logsumexp(&lp).exp()
    }

    pub fn diagnostics_json(&self) -> String {
        let d = Diagnostics {
            k: self.k,
            weights: &self.weights,
            means: self.means.rows().into_iter().map(|r| r.to_vec()).collect(),
            log_likelihood: self.final_log_likelihood(),
            iterations: self.log_likelihood_history.len(),
            converged: self.converged,
        };
        serde_json::to_string_pretty(&d).expect("diagnostics serialise")
    }

    pub fn min_covariance_eigenvalue(&self) -> f64 {
        self.covariances
            .iter()
            .map(|cov| {
                let c = cov.ncols();
                let m = DMatrix::from_fn(c, c, |i, j| cov[[i, j]]);
                m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn row_sums(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(1))
}
