//! Score matrices, dual-softmax assignment, matchability and match extraction,
//! plus nearest-neighbour ratio matching on raw descriptors.

use ndarray::{ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_rows, Graph, Mat, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

pub const DEFAULT_P_THRESHOLD: f64 = 0.2;
pub const DEFAULT_SIGMA_FLOOR: f64 = 0.1;
pub const DEFAULT_KNN_RATIO: f64 = 0.75;

/// One correspondence; serialises as `[i, j, p]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64)", into = "(usize, usize, f64)")]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub p: f64,
}

impl From<(usize, usize, f64)> for Match {
    fn from((i, j, p): (usize, usize, f64)) -> Self {
        Self { i, j, p }
    }
}

impl From<Match> for (usize, usize, f64) {
    fn from(m: Match) -> Self {
        (m.i, m.j, m.p)
    }
}

/// `S = A · Bᵀ`, unscaled.
pub fn score_matrix(fm_a: &Mat, fm_b: &Mat) -> Result<Mat> {
    if fm_a.ncols() != fm_b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "score matrix needs equal widths, got {} and {}",
            fm_a.ncols(),
            fm_b.ncols()
        )));
    }
    Ok(fm_a.dot(&fm_b.t()))
}

/// Row softmax times column softmax.
pub fn dual_softmax(s: &Mat) -> Mat {
    let rows = softmax_rows(s);
    let cols = softmax_rows(&s.t().to_owned()).reversed_axes();
    rows * cols
}

pub fn dual_softmax_graph(g: &mut Graph, s: Var) -> Var {
    let r = g.softmax_rows(s);
    let c = g.softmax_cols(s);
    g.mul(r, c)
}

/// Linear C→1 followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct MatchabilityHead {
    pub linear: Linear,
}

impl MatchabilityHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, name, dim, 1, true, rng),
        }
    }

    /// N×1 probabilities.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fm: Var) -> Var {
        let logits = self.linear.forward(g, store, fm);
        g.sigmoid(logits)
    }
}

pub fn matchability(store: &ParamStore, fm: &Mat, head: &MatchabilityHead) -> Vec<f64> {
    let w = store.get(head.linear.weight);
    let b = head.linear.bias.map_or(0.0, |b| store.get(b)[[0, 0]]);
    fm.dot(w).column(0).iter().map(|&z| sigmoid(z + b)).collect()
}

fn argmax(v: ArrayView1<f64>) -> usize {
    // lowest index wins ties
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Mutual argmax pairs with `p ≥ p_threshold` and both matchabilities at
/// least `sigma_floor`, sorted by `p` descending.
pub fn extract_matches(p: &Mat, sigma_a: &[f64], sigma_b: &[f64], p_threshold: f64, sigma_floor: f64) -> Vec<Match> {
    let (na, nb) = p.dim();
    if na == 0 || nb == 0 {
        return Vec::new();
    }
    let col_best: Vec<usize> = (0..nb).map(|j| argmax(p.column(j))).collect();
    let mut out: Vec<Match> = (0..na)
        .filter_map(|i| {
            let j = argmax(p.row(i));
            let pij = p[[i, j]];
            (col_best[j] == i && pij >= p_threshold && sigma_a[i].min(sigma_b[j]) >= sigma_floor)
                .then_some(Match { i, j, p: pij })
        })
        .collect();
    out.sort_by(|x, y| y.p.total_cmp(&x.p).then(x.i.cmp(&y.i)));
    out
}

/// Nearest B index and `d1/d2` for every A row. Two coincident nearest
/// neighbours (`d2 = 0`) count as fully ambiguous, ratio 1.
pub fn lowe_ratios(desc_a: &Mat, desc_b: &Mat) -> Result<Vec<(usize, f64)>> {
    if desc_b.nrows() < 2 {
        return Err(Error::InsufficientMatches(desc_b.nrows()));
    }
    if desc_a.ncols() != desc_b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "descriptor widths differ: {} vs {}",
            desc_a.ncols(),
            desc_b.ncols()
        )));
    }
    let d2 = squared_distances(desc_a, desc_b);
    Ok(d2
        .axis_iter(Axis(0))
        .map(|row| {
            let (mut b1, mut b2) = (0usize, usize::MAX);
            for j in 1..row.len() {
                if row[j] < row[b1] {
                    b2 = b1;
                    b1 = j;
                } else if b2 == usize::MAX || row[j] < row[b2] {
                    b2 = j;
                }
            }
            if b2 == usize::MAX {
                b2 = 1;
            }
            let (n1, n2) = (row[b1].sqrt(), row[b2].sqrt());
            let ratio = if n2 > 0.0 { n1 / n2 } else { 1.0 };
            (b1, ratio)
        })
        .collect())
}

fn squared_distances(a: &Mat, b: &Mat) -> Mat {
    let na: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let nb: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
    }
    d
}

/// Nearest-neighbour matches passing the ratio test, ordered by `i`; `p`
/// carries `1 - d1/d2`.
pub fn knn_ratio_match(desc_a: &Mat, desc_b: &Mat, ratio: f64) -> Result<Vec<Match>> {
    Ok(lowe_ratios(desc_a, desc_b)?
        .into_iter()
        .enumerate()
        .filter(|(_, (_, r))| *r < ratio)
        .map(|(i, (j, r))| Match { i, j, p: 1.0 - r })
        .collect())
}

/// Counts of `d1/d2` over `bins` equal bins of `[0, 1]`; a ratio of exactly 1
/// falls in the last bin.
pub fn ratio_histogram(desc_a: &Mat, desc_b: &Mat, bins: usize) -> Result<Vec<usize>> {
    let bins = bins.max(1);
    let mut h = vec![0; bins];
    for (_, r) in lowe_ratios(desc_a, desc_b)? {
        h[((r * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(h)
}

/// Fraction of matches from a descriptor pair that pass the ratio test.
pub fn distinctiveness(desc_a: &Mat, desc_b: &Mat, ratio: f64) -> Result<f64> {
    let r = lowe_ratios(desc_a, desc_b)?;
    if r.is_empty() {
        return Ok(0.0);
    }
    Ok(r.iter().filter(|(_, x)| *x < ratio).count() as f64 / r.len() as f64)
}

/// Row-wise L2 normalisation; zero rows stay zero.
pub fn l2_normalize_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, c: usize, seed: u64) -> Mat {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, c), |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn scores() {
        let e = Array2::<f64>::eye(3);
        assert_eq!(score_matrix(&e, &e).unwrap(), e);
        assert!(score_matrix(&Array2::zeros((2, 4)), &Array2::zeros((3, 4)))
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let a = random(3, 2, 1);
        let b = random(4, 2, 2);
        let s = score_matrix(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for c in 0..2 {
                    acc += a[[i, c]] * b[[j, c]];
                }
                assert!((s[[i, j]] - acc).abs() < 1e-15);
            }
        }
        assert!(matches!(
            score_matrix(&Array2::zeros((1, 2)), &Array2::zeros((1, 3))),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn dual_softmax_cases() {
        assert!(dual_softmax(&Array2::zeros((2, 2))).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!((dual_softmax(&array![[3.7]])[[0, 0]] - 1.0).abs() < 1e-15);
        let p = dual_softmax(&array![[10.0, 0.0], [0.0, 10.0]]);
        let d = (1.0 / (1.0 + (-10f64).exp())).powi(2);
        assert!((p[[0, 0]] - d).abs() < 1e-15 && (p[[0, 0]] - 0.999909).abs() < 1e-5);
        let off = (1.0 / (1.0 + 10f64.exp())).powi(2);
        assert!((p[[0, 1]] - off).abs() < 1e-20 && (off - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn graph_dual_softmax_agrees() {
        let s = random(3, 4, 3) * 5.0;
        let mut g = Graph::new();
        let v = g.constant(s.clone());
        let p = dual_softmax_graph(&mut g, v);
        assert!(g.value(p).iter().zip(dual_softmax(&s).iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn matchability_cases() {
        let mut store = ParamStore::new();
        let head = MatchabilityHead::new(&mut store, "h", 3, &mut ChaCha8Rng::seed_from_u64(1));
        head.linear.zero(&mut store);
        let f = random(4, 3, 4);
        assert!(matchability(&store, &f, &head).iter().all(|&s| s == 0.5));
        store.get_mut(head.linear.bias.unwrap())[[0, 0]] = 10.0;
        assert!(matchability(&store, &f, &head).iter().all(|&s| (s - 0.9999546).abs() < 1e-7));
        store.get_mut(head.linear.weight)[[0, 0]] = 1.0;
        let s = matchability(&store, &array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], &head);
        assert!(s[1] > s[0]);
        let mut g = Graph::new();
        let v = g.constant(f.clone());
        let out = head.forward(&mut g, &store, v);
        let plain = matchability(&store, &f, &head);
        assert!(g.value(out).iter().zip(&plain).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn extraction_cases() {
        let mut p = Array2::from_elem((4, 4), 0.002);
        for i in 0..4 {
            p[[i, i]] = 0.99;
        }
        let m = extract_matches(&p, &[0.9; 4], &[0.9; 4], 0.2, 0.1);
        assert_eq!(m.len(), 4);
        assert!(m.iter().all(|x| x.i == x.j));
        let flat = Array2::from_elem((3, 3), 1.0 / 9.0);
        assert!(extract_matches(&flat, &[1.0; 3], &[1.0; 3], 0.2, 0.1).is_empty());
        let m = extract_matches(&flat, &[1.0; 3], &[1.0; 3], 0.0, 0.1);
        assert_eq!(m, vec![Match { i: 0, j: 0, p: 1.0 / 9.0 }]);
        // low matchability removes the pair
        assert_eq!(extract_matches(&p, &[0.9, 0.05, 0.9, 0.9], &[0.9; 4], 0.2, 0.1).len(), 3);
    }

    fn brute_force(p: &Mat, thr: f64) -> Vec<(usize, usize)> {
        let (na, nb) = p.dim();
        let mut out = Vec::new();
        for i in 0..na {
            for j in 0..nb {
                let row_best = (0..nb).all(|k| p[[i, k]] < p[[i, j]] || (p[[i, k]] == p[[i, j]] && k >= j));
                let col_best = (0..na).all(|k| p[[k, j]] < p[[i, j]] || (p[[k, j]] == p[[i, j]] && k >= i));
                if row_best && col_best && p[[i, j]] >= thr {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn extraction_matches_exhaustive_scan() {
        for seed in 0..20 {
            let p = dual_softmax(&(random(5, 5, seed) * 4.0));
            let mut got: Vec<(usize, usize)> = extract_matches(&p, &[1.0; 5], &[1.0; 5], 0.2, 0.1)
                .iter()
                .map(|m| (m.i, m.j))
                .collect();
            got.sort();
            assert_eq!(got, brute_force(&p, 0.2));
        }
    }

    #[test]
    fn knn_cases() {
        let a = array![[1.0, 2.0]];
        let b = array![[1.0, 2.0], [10.0, 10.0]];
        let m = knn_ratio_match(&a, &b, 0.75).unwrap();
        assert_eq!(m, vec![Match { i: 0, j: 0, p: 1.0 }]);
        let b = array![[2.0, 2.0], [0.0, 2.0]];
        assert!(knn_ratio_match(&a, &b, 0.99).unwrap().is_empty());
        assert!(matches!(knn_ratio_match(&a, &a, 0.75), Err(Error::InsufficientMatches(1))));
    }

    fn ratio_oracle(a: &Mat, b: &Mat) -> Vec<(usize, f64)> {
        a.rows()
            .into_iter()
            .map(|q| {
                let mut d: Vec<(f64, usize)> = b
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(|(j, r)| ((&q - &r).mapv(|v| v * v).sum().sqrt(), j))
                    .collect();
                d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                (d[0].1, d[0].0 / d[1].0)
            })
            .collect()
    }

    #[test]
    fn knn_matches_sort_oracle() {
        for seed in 0..10 {
            let a = random(6, 4, seed);
            let b = random(6, 4, seed + 100);
            let want: Vec<(usize, usize)> = ratio_oracle(&a, &b)
                .into_iter()
                .enumerate()
                .filter(|(_, (_, r))| *r < 0.75)
                .map(|(i, (j, _))| (i, j))
                .collect();
            let got: Vec<(usize, usize)> = knn_ratio_match(&a, &b, 0.75)
                .unwrap()
                .iter()
                .map(|m| (m.i, m.j))
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn histogram_cases() {
        let a = random(5, 3, 7);
        let h = ratio_histogram(&a, &a, 10).unwrap();
        assert_eq!(h[0], 5);
        let q = array![[0.0, 0.0, 1.0]];
        let b = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(ratio_histogram(&q, &b, 4).unwrap(), vec![0, 0, 0, 1]);
        let a = random(30, 4, 8);
        let b = random(9, 4, 9);
        let mut want = vec![0; 7];
        for (_, r) in ratio_oracle(&a, &b) {
            want[((r * 7.0) as usize).min(6)] += 1;
        }
        assert_eq!(ratio_histogram(&a, &b, 7).unwrap(), want);
    }

    #[test]
    fn match_serialises_as_triple() {
        let s = serde_json::to_string(&Match { i: 1, j: 2, p: 0.5 }).unwrap();
        assert_eq!(s, "[1,2,0.5]");
    }

    proptest! {
        #[test]
        fn dual_softmax_bounds(vals in proptest::collection::vec(-20.0f64..20.0, 12)) {
            let s = Array2::from_shape_vec((3, 4), vals).unwrap();
            let p = dual_softmax(&s);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0 || v == 1.0));
            for r in p.rows() { prop_assert!(r.sum() <= 1.0 + 1e-6); }
            for c in p.columns() { prop_assert!(c.sum() <= 1.0 + 1e-6); }
        }

        #[test]
        fn extraction_is_partial_and_equivariant(vals in proptest::collection::vec(-5.0f64..5.0, 20), shift in 0usize..5) {
            let s = Array2::from_shape_vec((4, 5), vals).unwrap();
            let p = dual_softmax(&s);
            let m = extract_matches(&p, &[1.0; 4], &[1.0; 5], 0.0, 0.0);
            let mut is: Vec<usize> = m.iter().map(|x| x.i).collect();
            let mut js: Vec<usize> = m.iter().map(|x| x.j).collect();
            is.sort(); is.dedup(); js.sort(); js.dedup();
            prop_assert_eq!(is.len(), m.len());
            prop_assert_eq!(js.len(), m.len());
            // cyclic shift of B's rows
            let perm: Vec<usize> = (0..5).map(|k| (k + shift) % 5).collect();
            let sp = s.select(Axis(1), &perm);
            let mp = extract_matches(&dual_softmax(&sp), &[1.0; 4], &[1.0; 5], 0.0, 0.0);
            let mut a: Vec<(usize, usize)> = m.iter().map(|x| (x.i, x.j)).collect();
            let mut b: Vec<(usize, usize)> = mp.iter().map(|x| (x.i, perm[x.j])).collect();
            a.sort(); b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
