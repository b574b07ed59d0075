use super::*;
use crate::features::{KeypointSet, SemanticConfig};
use crate::geometry::label_points;
use crate::lfa::{loss_inter, loss_intra};
use crate::matcher::dual_softmax;

fn blob_image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64)> = (0..40)
        .map(|_| {
            (
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(1.5..4.0),
            )
        })
        .collect();
    Image::from_fn(size, size, |x, y| {
        blobs
            .iter()
            .map(|&(cx, cy, r)| (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * r * r)).exp())
            .sum::<f64>()
            .min(1.0)
    })
}

fn small_config() -> TrainConfig {
    TrainConfig {
        layers: 2,
        feature_dim: 8,
        gmm_k: 2,
        image_size: 64,
        features: FeatureConfig {
            max_keypoints: 24,
            nms_radius: 3.0,
            semantic: SemanticConfig {
                depth: 2,
                proj_seed: 1,
                out_dim: 6,
            },
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_perturbation_gives_identity_pair() {
    let cfg = TrainConfig {
        homography: HomographyConfig::zero(),
        photometric: PhotometricConfig::none(),
        ..small_config()
    };
    let img = blob_image(1, 64);
    let s = synthesize_pair(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(s.features_a.kpts.coords, s.features_b.kpts.coords);
    let n = s.features_a.len();
    assert_eq!(s.labels.matches, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
    assert!(s.labels.unmatched_a.is_empty() && s.labels.unmatched_b.is_empty());
}

#[test]
fn synthesis_is_deterministic() {
    let cfg = small_config();
    let img = blob_image(2, 64);
    let a = synthesize_pair(&img, &cfg, &mut sample_rng(5, 1, 3)).unwrap();
    let b = synthesize_pair(&img, &cfg, &mut sample_rng(5, 1, 3)).unwrap();
    assert_eq!(a.image_b, b.image_b);
    assert_eq!(a.h_ab, b.h_ab);
    assert_eq!(a.labels, b.labels);
}

/// Mutual nearest neighbours by exhaustive search over the symmetric error.
fn mutual_oracle(a: &[[f64; 2]], b: &[[f64; 2]], h: &Homography, thr: f64) -> Vec<(usize, usize)> {
    let hi = h.inverse();
    let d = |i: usize, j: usize| {
        let fa = h.apply(a[i]).unwrap();
        let bb = hi.apply(b[j]).unwrap();
        let e1 = ((fa[0] - b[j][0]).powi(2) + (fa[1] - b[j][1]).powi(2)).sqrt();
        let e2 = ((bb[0] - a[i][0]).powi(2) + (bb[1] - a[i][1]).powi(2)).sqrt();
        e1.max(e2)
    };
    let mut out = Vec::new();
    for i in 0..a.len() {
        for j in 0..b.len() {
            let dij = d(i, j);
            if dij <= thr && (0..b.len()).all(|k| d(i, k) >= dij) && (0..a.len()).all(|k| d(k, j) >= dij) {
                out.push((i, j));
            }
        }
    }
    out
}

#[test]
fn labels_agree_with_exhaustive_oracle_on_grid() {
    let h = Homography::from_row_major(&[1.02, 0.05, 3.0, -0.04, 0.98, 1.5, 1e-4, -5e-5, 1.0]).unwrap();
    let a: Vec<[f64; 2]> = (0..6)
        .flat_map(|y| (0..6).map(move |x| [8.0 + 9.0 * x as f64, 8.0 + 9.0 * y as f64]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b: Vec<[f64; 2]> = a
        .iter()
        .map(|&p| {
            let q = h.apply(p).unwrap();
            [q[0] + rng.gen_range(-2.0..2.0), q[1] + rng.gen_range(-2.0..2.0)]
        })
        .collect();
    let labels = label_points(&a, &b, &h, 3.0);
    assert_eq!(labels.matches, mutual_oracle(&a, &b, &h, 3.0));
}

#[test]
fn match_loss_cases() {
    let labels = CorrespondenceLabels {
        matches: vec![(0, 0)],
        unmatched_a: vec![],
        unmatched_b: vec![],
        threshold_px: 3.0,
    };
    let p = dual_softmax(&Array2::zeros((2, 2)));
    assert!((match_loss(&p, &[0.5; 2], &[0.5; 2], &labels) - 1.386294).abs() < 1e-6);

    let saturated = CorrespondenceLabels {
        matches: vec![(0, 0), (1, 1)],
        unmatched_a: vec![2],
        unmatched_b: vec![2],
        threshold_px: 3.0,
    };
    let mut p = Array2::zeros((3, 3));
    p[[0, 0]] = 1.0;
    p[[1, 1]] = 1.0;
    let l = match_loss(&p, &[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], &saturated);
    assert!(l >= 0.0 && l < 1e-6);

    let mut q = p.clone();
    q[[0, 0]] = 0.5;
    let l1 = match_loss(&q, &[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], &saturated);
    q[[0, 0]] = 0.6;
    let l2 = match_loss(&q, &[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], &saturated);
    assert!(l2 < l1);

    // empty label sets contribute nothing
    assert_eq!(match_loss(&p, &[0.3; 3], &[0.3; 3], &CorrespondenceLabels::default()), 0.0);
}

#[test]
fn graph_match_loss_agrees_with_plain() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-2.0..2.0));
    let p = dual_softmax(&s);
    let sa: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..0.95)).collect();
    let sb: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..0.95)).collect();
    let labels = CorrespondenceLabels {
        matches: vec![(0, 1), (2, 3)],
        unmatched_a: vec![1, 3],
        unmatched_b: vec![0, 4],
        threshold_px: 3.0,
    };
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let av = g.constant(Array2::from_shape_vec((4, 1), sa.clone()).unwrap());
    let bv = g.constant(Array2::from_shape_vec((5, 1), sb.clone()).unwrap());
    let l = match_loss_graph(&mut g, pv, av, bv, &labels);
    assert!((g.scalar(l) - match_loss(&p, &sa, &sb, &labels)).abs() < 1e-12);
}

pub(crate) fn toy_pair(seed: u64, n: usize, base_dim: usize, latent_dim: usize) -> (ImageFeatures, ImageFeatures, CorrespondenceLabels) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = || {
        let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)]).collect();
        let kpts = KeypointSet::new(coords, vec![1.0; n], (32, 32)).unwrap();
        ImageFeatures {
            kpts,
            base: Array2::from_shape_fn((n, base_dim), |_| rng.gen_range(-1.0..1.0)),
            latent: Array2::from_shape_fn((n, latent_dim), |_| rng.gen_range(-1.0..1.0)),
        }
    };
    let a = make();
    let b = make();
    let labels = CorrespondenceLabels {
        matches: vec![(0, 1), (1, 0), (2, 2), (3, 4)],
        unmatched_a: vec![4, 5],
        unmatched_b: vec![3, 5],
        threshold_px: 3.0,
    };
    (a, b, labels)
}

fn toy_model(layers: usize) -> (MifNet, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = ModelConfig {
        feature_dim: 8,
        layers,
        latent_dim: 4,
        base_dim: 5,
        attention_init_scale: 1.0,
    };
    let net = MifNet::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    (net, store)
}

#[test]
fn lambda_zero_is_mean_layer_loss() {
    let (net, store) = toy_model(2);
    let (a, b, labels) = toy_pair(1, 6, 5, 4);
    let mut g = Graph::new();
    let out = total_loss(&mut g, &store, &net, &a, &b, &labels, &LossSettings::new(0.0, GmmConfig::default())).unwrap();
    let br = out.breakdown;
    assert_eq!(br.per_layer.len(), 2);
    assert!((br.total - (br.per_layer[0] + br.per_layer[1]) / 2.0).abs() < 1e-12);
}

#[test]
fn zero_network_gives_finite_loss() {
    let (net, mut store) = toy_model(2);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).fill(0.0);
    }
    let (a, b, labels) = toy_pair(2, 6, 5, 4);
    let mut g = Graph::new();
    let gmm = GmmConfig {
        k: 1,
        ..GmmConfig::default()
    };
    let out = total_loss(&mut g, &store, &net, &a, &b, &labels, &LossSettings::new(2.0, gmm)).unwrap();
    assert!(out.breakdown.total.is_finite());
}

#[test]
fn two_layer_total_matches_module_oracles() {
    for normalize in [true, false] {
        two_layer_total_case(normalize);
    }
}

fn two_layer_total_case(normalize: bool) {
    let (net, store) = toy_model(2);
    let (a, b, labels) = toy_pair(3, 6, 5, 4);
    let gmm = GmmConfig {
        k: 2,
        ..GmmConfig::default()
    };
    let mut g = Graph::new();
    let settings = LossSettings {
        normalize_features: normalize,
        ..LossSettings::new(2.0, gmm)
    };
    let out = total_loss(&mut g, &store, &net, &a, &b, &labels, &settings).unwrap();

    // recompute from plain module functions
    let mut g2 = Graph::new();
    let fw = net.forward(&mut g2, &store, &a, &b).unwrap();
    let mut layer_losses = Vec::new();
    for layer in &fw.layers {
        let col = |v: Var| g2.value(v).column(0).to_vec();
        layer_losses.push(match_loss(g2.value(layer.p), &col(layer.sigma_a), &col(layer.sigma_b), &labels));
    }
    let mut lfa = 0.0;
    for (k, refined) in [fw.refined_a, fw.refined_b].into_iter().enumerate() {
        let m = out.mixtures[k].as_ref().expect("fit succeeded");
        let raw = g2.value(refined).clone();
        let x = &if normalize { crate::matcher::l2_normalize_rows(&raw) } else { raw };
        lfa += loss_intra(x, m) - loss_inter(&{
            let mut mm = m.clone();
            mm.means = m.weighted_means(x);
            mm
        });
    }
    let want = (layer_losses[0] + layer_losses[1]) / 2.0 + 2.0 * lfa;
    assert!((out.breakdown.total - want).abs() < 1e-9 * want.abs().max(1.0));
}

fn relative_error(a: &Mat, b: &Mat) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let (net, mut store) = toy_model(2);
    let (a, b, labels) = toy_pair(5, 6, 5, 4);
    let gmm = GmmConfig {
        k: 2,
        ..GmmConfig::default()
    };
    let mut g = Graph::new();
    let out = total_loss(&mut g, &store, &net, &a, &b, &labels, &LossSettings::new(2.0, gmm.clone())).unwrap();
    g.backward(out.total);
    let analytic = g.param_grads(&store);
    let fixed = LossSettings {
        fixed_mixtures: Some(out.mixtures.clone()),
        ..LossSettings::new(2.0, gmm)
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let o = total_loss(&mut g, store, &net, &a, &b, &labels, &fixed).unwrap();
        o.breakdown.total
    };
    let h = 1e-4;
    for id in store.ids().collect::<Vec<_>>() {
        let mut numeric = Mat::zeros(store.get(id).dim());
        for idx in 0..numeric.len() {
            let (r, c) = (idx / numeric.ncols(), idx % numeric.ncols());
            let orig = store.get(id)[[r, c]];
            store.get_mut(id)[[r, c]] = orig + h;
            let up = eval(&store);
            store.get_mut(id)[[r, c]] = orig - h;
            let down = eval(&store);
            store.get_mut(id)[[r, c]] = orig;
            numeric[[r, c]] = (up - down) / (2.0 * h);
        }
        let err = relative_error(&analytic[id.0], &numeric);
        assert!(err < 1e-2, "{}: relative error {err}", store.name(id));
    }
}

#[test]
fn loss_is_invariant_to_keypoint_reindexing() {
    let (net, store) = toy_model(2);
    let (a, b, labels) = toy_pair(6, 6, 5, 4);
    let settings = LossSettings::new(0.0, GmmConfig::default());
    let mut g = Graph::new();
    let base = total_loss(&mut g, &store, &net, &a, &b, &labels, &settings).unwrap().breakdown.total;
    let perm = [3, 5, 1, 0, 2, 4];
    let mut inv = [0; 6];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let ap = ImageFeatures {
        kpts: a.kpts.permuted(&perm),
        base: a.base.select(ndarray::Axis(0), &perm),
        latent: a.latent.select(ndarray::Axis(0), &perm),
    };
    let lp = CorrespondenceLabels {
        matches: labels.matches.iter().map(|&(i, j)| (inv[i], j)).collect(),
        unmatched_a: labels.unmatched_a.iter().map(|&i| inv[i]).collect(),
        ..labels.clone()
    };
    let mut g = Graph::new();
    let permuted = total_loss(&mut g, &store, &net, &ap, &b, &lp, &settings).unwrap().breakdown.total;
    assert!((base - permuted).abs() < 1e-10);
}

#[test]
fn overfits_a_fixed_batch() {
    let (net, mut store) = toy_model(2);
    let (a, b, labels) = toy_pair(7, 6, 5, 4);
    let mut adam = Adam::new(&store, 1e-2);
    let settings = LossSettings::new(0.0, GmmConfig::default());
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut g = Graph::new();
        let out = total_loss(&mut g, &store, &net, &a, &b, &labels, &settings).unwrap();
        losses.push(out.breakdown.total);
        g.backward(out.total);
        let grads = g.param_grads(&store);
        adam.update(&mut store, &grads);
    }
    let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let windows: Vec<f64> = losses.chunks(20).map(avg).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn config_hash_tracks_content() {
    let a = TrainConfig::default();
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    b.lr = 2e-4;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn invalid_configs_rejected() {
    for cfg in [
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
        TrainConfig { gmm_k: 0, ..TrainConfig::default() },
        TrainConfig { layers: 0, ..TrainConfig::default() },
        TrainConfig { lambda_lfa: -0.5, ..TrainConfig::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = small_config();
    let mut store = ParamStore::new();
    let net = MifNet::new(&mut store, cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let adam = Adam::new(&store, cfg.lr);
    let meta = CheckpointMeta::new(&cfg, 1, 10, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::from_store(meta.clone(), &store, Some((&adam.m, &adam.v)))).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.meta, meta);
    assert!(ck.adam.is_some());
    let (net2, store2) = ck.build_model().unwrap();
    assert_eq!(net2.config, net.config);
    for id in store.ids() {
        let (x, y) = (store.get(id), store2.get(id));
        assert!(x.iter().zip(y.iter()).all(|(u, v)| (u - v).abs() <= 1e-6 * u.abs().max(1.0)));
    }
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing.ckpt")),
        Err(Error::CheckpointNotFound(_))
    ));
}

#[test]
fn train_with_zero_lr_keeps_parameters_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut entries = Vec::new();
    for k in 0..3 {
        let p = dir.path().join(format!("img{k}.png"));
        blob_image(10 + k, 64).save(&p).unwrap();
        entries.push(crate::features::ManifestEntry::image(p));
    }
    let manifest = dir.path().join("train.jsonl");
    crate::features::write_manifest(&manifest, &entries).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        lr: 0.0,
        ..small_config()
    };
    let out1 = train(&manifest, &cfg, &dir.path().join("run1"), None).unwrap();
    let out2 = train(&manifest, &cfg, &dir.path().join("run2"), None).unwrap();
    assert_eq!(fs::read(&out1.checkpoint).unwrap(), fs::read(&out2.checkpoint).unwrap());
    assert_eq!(
        fs::read(dir.path().join("run1/train_log.jsonl")).unwrap(),
        fs::read(dir.path().join("run2/train_log.jsonl")).unwrap()
    );
    let (_, trained, _) = load_model(&out1.checkpoint).unwrap();
    let mut store = ParamStore::new();
    MifNet::new(&mut store, cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    for id in store.ids() {
        let same = store.get(id).iter().zip(trained.get(id).iter()).all(|(a, b)| (*a as f32) == (*b as f32));
        assert!(same, "{}", store.name(id));
    }
}
