//! Parameter initialisation and the few layer shapes reused across the
//! model: affine maps, ReLU MLPs and LayerNorm.

use crate::error::Result;
use crate::tensor::{ParameterStore, Tape, Tensor, Var};
use rand::Rng;

/// Registers `{name}.w` (`fan_in × fan_out`, uniform Xavier) and `{name}.b`
/// (zeros).
pub fn init_linear<R: Rng>(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm(store: &mut ParameterStore, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::filled(&[d], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

pub fn linear(tape: &mut Tape, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let w = store.bind(tape, &format!("{name}.w"))?;
    let b = store.bind(tape, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Affine layers named `{name}.0`, `{name}.1`, ... with ReLU between them.
pub fn mlp(tape: &mut Tape, store: &ParameterStore, name: &str, layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(tape, store, &format!("{name}.{i}"), h)?;
        if i + 1 < layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

pub fn init_mlp<R: Rng>(store: &mut ParameterStore, name: &str, widths: &[usize], rng: &mut R) {
    for (i, w) in widths.windows(2).enumerate() {
        init_linear(store, &format!("{name}.{i}"), w[0], w[1], rng);
    }
}

pub fn layer_norm(tape: &mut Tape, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let g = store.bind(tape, &format!("{name}.g"))?;
    let b = store.bind(tape, &format!("{name}.b"))?;
    tape.layer_norm(x, g, b, 1e-5)
}
