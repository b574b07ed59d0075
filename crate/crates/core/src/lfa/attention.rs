use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::nn::{Linear, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttention,
    Cross,
}

/// Single-head attention followed by the residual update
/// `f ← f + MLP([f | message])`.
#[derive(Clone, Debug)]
pub struct AttentionUnit {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub mlp: Mlp,
    pub kind: AttentionKind,
    pub dim: usize,
}

impl AttentionUnit {
    /// The update MLP has hidden width `2C`; its output layer starts scaled
    /// down by `out_scale` so deep stacks begin close to the identity.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kind: AttentionKind,
        out_scale: f64,
        rng: &mut R,
    ) -> Self {
        let query = Linear::new(store, &format!("{name}.q"), dim, dim, false, rng);
        let key = Linear::new(store, &format!("{name}.k"), dim, dim, false, rng);
        let value = Linear::new(store, &format!("{name}.v"), dim, dim, false, rng);
        let hidden = Linear::new(store, &format!("{name}.mlp.0"), 2 * dim, 2 * dim, true, rng);
        let output = Linear::with_bound(
            store,
            &format!("{name}.mlp.1"),
            2 * dim,
            dim,
            true,
            out_scale / ((2 * dim) as f64).sqrt(),
            rng,
        );
        Self {
            query,
            key,
            value,
            mlp: Mlp { hidden, output },
            kind,
            dim,
        }
    }

    /// `softmax((q Wq)(bank Wk)ᵀ / √C) · (bank Wv)` for every query row.
    pub fn message(&self, g: &mut Graph, store: &ParamStore, x: Var, bank: Var) -> Var {
        let q = self.query.forward(g, store, x);
        let k = self.key.forward(g, store, bank);
        let v = self.value.forward(g, store, bank);
        let logits = g.matmul_t(q, k);
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax_rows(logits);
        g.matmul(attn, v)
    }

    pub fn update(&self, g: &mut Graph, store: &ParamStore, x: Var, bank: Var) -> Var {
        let m = self.message(g, store, x, bank);
        let cat = g.concat_cols(x, m);
        let delta = self.mlp.forward(g, store, cat);
        g.add(x, delta)
    }

    /// Makes the unit an exact identity map.
    pub fn zero_update(&self, store: &mut ParamStore) {
        self.mlp.zero(store);
    }
}

/// Attention message for a single query vector against a bank of M rows.
pub fn attention_message(
    store: &ParamStore,
    unit: &AttentionUnit,
    query: ArrayView1<f64>,
    bank: &Array2<f64>,
) -> Array1<f64> {
    assert!(bank.nrows() >= 1, "attention bank must be non-empty");
    let mut g = Graph::new();
    let q = g.constant(query.to_owned().insert_axis(ndarray::Axis(0)));
    let b = g.constant(bank.clone());
    let m = unit.message(&mut g, store, q, b);
    g.value(m).row(0).to_owned()
}

/// Residual attention update of every row of `features_a`. For self units the
/// bank is `features_a` itself and `features_o` is ignored.
pub fn attention_update(
    store: &ParamStore,
    unit: &AttentionUnit,
    features_a: &Array2<f64>,
    features_o: &Array2<f64>,
) -> Array2<f64> {
    let mut g = Graph::new();
    let a = g.constant(features_a.clone());
    let bank = match unit.kind {
        AttentionKind::SelfAttention => a,
        AttentionKind::Cross => g.constant(features_o.clone()),
    };
    let out = unit.update(&mut g, store, a, bank);
    g.value(out).clone()
}
