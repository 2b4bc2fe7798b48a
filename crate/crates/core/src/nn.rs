//! Small dense building blocks shared by the attention and model code.

use rand::Rng;

use crate::diff::{Graph, ParamStore, Var};
use crate::error::Result;

/// Registers `{prefix}.w1/b1/w2/b2` for a two-layer perceptron.
pub(crate) fn init_mlp2(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
    rng: &mut impl Rng,
) {
    store.init_glorot(&format!("{prefix}.w1"), input, hidden, rng);
    store.init_zeros(&format!("{prefix}.b1"), &[hidden]);
    store.init_glorot(&format!("{prefix}.w2"), hidden, output, rng);
    store.init_zeros(&format!("{prefix}.b2"), &[output]);
}

/// `relu(x·W1 + b1)·W2 + b2`.
pub(crate) fn mlp2(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let h = g.linear(x, w1, b1)?;
    let h = g.relu(h)?;
    g.linear(h, w2, b2)
}
