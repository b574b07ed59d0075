//! Cumulative hybrid aggregation: positional encoding, initial fusion of
//! refined and base features, and the layered self/cross attention stack.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, Mat, ParamStore, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureRole, FeatureSet, KeypointSet};
use crate::lfa::{AttentionKind, AttentionUnit};
use crate::nn::Mlp;

/// MLP 2→C→C over keypoint coordinates normalised to `[-1, 1]²`.
#[derive(Clone, Debug)]
pub struct PositionalEncoder {
    pub mlp: Mlp,
}

impl PositionalEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(store, "cha.pos", 2, dim, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, kpts: &KeypointSet) -> Var {
        let x = g.constant(normalized_coords(kpts));
        self.mlp.forward(g, store, x)
    }
}

/// Pixel centres span `[-0.5, w - 0.5]`; that extent maps onto `[-1, 1]`, so
/// the image centre `((w-1)/2, (h-1)/2)` lands on the origin.
pub fn normalized_coords(kpts: &KeypointSet) -> Mat {
    let (w, h) = (kpts.image_size.0 as f64, kpts.image_size.1 as f64);
    let mut out = Array2::zeros((kpts.len(), 2));
    for (i, p) in kpts.coords.iter().enumerate() {
        out[[i, 0]] = (2.0 * p[0] + 1.0) / w - 1.0;
        out[[i, 1]] = (2.0 * p[1] + 1.0) / h - 1.0;
    }
    out
}

pub fn encode_positions(store: &ParamStore, kpts: &KeypointSet, enc: &PositionalEncoder) -> Mat {
    let mut g = Graph::new();
    let v = enc.forward(&mut g, store, kpts);
    g.value(v).clone()
}

#[derive(Clone, Debug)]
pub struct ChaLayer {
    pub self_unit: AttentionUnit,
    pub cross_unit: AttentionUnit,
}

/// `L` unshared (self, cross) blocks plus the base-descriptor adapter.
#[derive(Clone, Debug)]
pub struct ChaStack {
    pub base_adapter: Mlp,
    pub layers: Vec<ChaLayer>,
    pub dim: usize,
}

impl ChaStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        base_dim: usize,
        dim: usize,
        depth: usize,
        out_scale: f64,
        rng: &mut R,
    ) -> Self {
        let base_adapter = Mlp::new(store, "cha.base_adapter", base_dim, dim, dim, rng);
        let layers = (0..depth)
            .map(|j| ChaLayer {
                self_unit: AttentionUnit::new(
                    store,
                    &format!("cha.layer{j}.self"),
                    dim,
                    AttentionKind::SelfAttention,
                    out_scale,
                    rng,
                ),
                cross_unit: AttentionUnit::new(
                    store,
                    &format!("cha.layer{j}.cross"),
                    dim,
                    AttentionKind::Cross,
                    out_scale,
                    rng,
                ),
            })
            .collect();
        Self {
            base_adapter,
            layers,
            dim,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `(pe + refined) + (pe + adapter(base))`.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, refined: Var, base: Var, pe: Var) -> Var {
        let adapted = self.base_adapter.forward(g, store, base);
        let left = g.add(pe, refined);
        let right = g.add(pe, adapted);
        g.add(left, right)
    }

    /// Per layer: both images self-update, then both cross-update against the
    /// other's post-self features. Every layer's output pair is returned.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, a0: Var, b0: Var) -> Vec<(Var, Var)> {
        let (mut a, mut b) = (a0, b0);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let sa = layer.self_unit.update(g, store, a, a);
            let sb = layer.self_unit.update(g, store, b, b);
            a = layer.cross_unit.update(g, store, sa, sb);
            b = layer.cross_unit.update(g, store, sb, sa);
            out.push((a, b));
        }
        out
    }
}

pub fn fuse_initial(
    store: &ParamStore,
    stack: &ChaStack,
    refined: &FeatureSet,
    base: &FeatureSet,
    pe: &Mat,
) -> Result<FeatureSet> {
    let n = refined.len();
    if base.len() != n || pe.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "fusion needs equal rows: refined {n}, base {}, positions {}",
            base.len(),
            pe.nrows()
        )));
    }
    if refined.dim() != stack.dim || pe.ncols() != stack.dim || base.dim() != stack.base_adapter.hidden.in_dim {
        return Err(Error::ShapeMismatch(format!(
            "fusion widths: refined {}, positions {}, base {} (stack C={}, base C={})",
            refined.dim(),
            pe.ncols(),
            base.dim(),
            stack.dim,
            stack.base_adapter.hidden.in_dim
        )));
    }
    let mut g = Graph::new();
    let r = g.constant(refined.descriptors.clone());
    let b = g.constant(base.descriptors.clone());
    let p = g.constant(pe.clone());
    let f = stack.fuse(&mut g, store, r, b, p);
    Ok(FeatureSet {
        descriptors: g.value(f).clone(),
        role: FeatureRole::Invariant,
    })
}

pub fn run_stack(store: &ParamStore, stack: &ChaStack, fm_a0: &Mat, fm_b0: &Mat) -> Vec<(Mat, Mat)> {
    let mut g = Graph::new();
    let a = g.constant(fm_a0.clone());
    let b = g.constant(fm_b0.clone());
    stack
        .forward(&mut g, store, a, b)
        .into_iter()
        .map(|(x, y)| (g.value(x).clone(), g.value(y).clone()))
        .collect()
}
