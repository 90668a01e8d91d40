//! Parameter naming and application helpers for the common layer types.
//!
//! A layer called `name` owns parameters `name.w` / `name.b` (linear, conv) or
//! `name.gamma` / `name.beta` (layer norm).

use rand::Rng;

use super::{Bound, ConvSpec, ParamStore, Var};

/// Registers a dense layer `in -> out` (weights `[in, out]`, zero bias).
pub fn add_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    store.init_uniform(
        format!("{name}.w"),
        &[fan_in, fan_out],
        fan_in,
        fan_out,
        rng,
    );
    store.zeros(format!("{name}.b"), &[fan_out]);
}

/// Registers a 1-D convolution `ci -> co` with kernel `k` (weights `[co, ci, k]`, zero bias).
pub fn add_conv(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    ci: usize,
    co: usize,
    k: usize,
) {
    store.init_uniform(format!("{name}.w"), &[co, ci, k], ci * k, co * k, rng);
    store.zeros(format!("{name}.b"), &[co]);
}

pub fn add_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.ones(format!("{name}.gamma"), &[dim]);
    store.zeros(format!("{name}.beta"), &[dim]);
}

impl<'g> Bound<'g> {
    pub fn linear(&self, name: &str, x: Var<'g>) -> Var<'g> {
        x.linear(
            self.get(&format!("{name}.w")),
            self.get(&format!("{name}.b")),
        )
    }

    pub fn conv(&self, name: &str, x: Var<'g>, spec: ConvSpec) -> Var<'g> {
        x.conv1d(self.get(&format!("{name}.w")), spec)
            .add_bias(self.get(&format!("{name}.b")))
    }

    pub fn layer_norm(&self, name: &str, x: Var<'g>) -> Var<'g> {
        x.layer_norm(
            self.get(&format!("{name}.gamma")),
            self.get(&format!("{name}.beta")),
        )
    }
}

/// Registers the four projections of a multi-head attention layer.
pub fn add_attention(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    q_dim: usize,
    kv_dim: usize,
    hidden: usize,
) {
    add_linear(store, rng, &format!("{name}.q"), q_dim, hidden);
    add_linear(store, rng, &format!("{name}.k"), kv_dim, hidden);
    add_linear(store, rng, &format!("{name}.v"), kv_dim, hidden);
    add_linear(store, rng, &format!("{name}.o"), hidden, q_dim);
}

/// Scaled dot-product attention of `query [Tq, q_dim]` over `context [Tk, kv_dim]`,
/// returning `[Tq, q_dim]`. `heads` must divide the hidden width.
pub fn attention<'g>(
    p: &Bound<'g>,
    name: &str,
    query: Var<'g>,
    context: Var<'g>,
    heads: usize,
) -> Var<'g> {
    let q = p.linear(&format!("{name}.q"), query);
    let k = p.linear(&format!("{name}.k"), context);
    let v = p.linear(&format!("{name}.v"), context);
    let hidden = q.shape()[1];
    assert!(
        heads >= 1 && hidden % heads == 0,
        "{heads} heads do not divide width {hidden}"
    );
    let dh = hidden / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var<'g>> = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = (
                q.slice_last(h * dh, dh),
                k.slice_last(h * dh, dh),
                v.slice_last(h * dh, dh),
            );
            qh.matmul(kh.transpose())
                .scale(scale)
                .softmax_last()
                .matmul(vh)
        })
        .collect();
    let joined = if heads == 1 {
        outs[0]
    } else {
        Var::concat_last(&outs)
    };
    p.linear(&format!("{name}.o"), joined)
}
