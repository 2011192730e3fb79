use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Decoupled weight-decay Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Named trainable tensors plus their AdamW moments. Iteration is
/// lexicographic by name.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Replaces (and resets optimizer state for) an
    /// existing entry of the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let n = tensor.numel();
        self.slots.insert(
            name.into(),
            Slot {
                tensor: tensor.with_requires_grad(true),
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.tensor))
    }

    pub fn numel(&self) -> usize {
        self.slots.values().map(|s| s.tensor.numel()).sum()
    }

    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.slots.get(name).map(|s| s.step)
    }

    /// Records the named parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        Ok(tape.bind(name, t))
    }

    /// Sets every gradient to zero (present, not missing).
    pub fn zero_grad(&mut self) {
        for s in self.slots.values_mut() {
            *s.tensor.grad_mut() = Some(vec![0.0; s.tensor.numel()]);
        }
    }

    /// Adds the gradients of every parameter bound on `tape`. Bound but
    /// unreachable parameters receive a zero gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (name, var) in tape.bindings() {
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let n = slot.tensor.numel();
            let g = slot.tensor.grad_mut().get_or_insert_with(|| vec![0.0; n]);
            if let Some(src) = tape.grad(*var) {
                for (a, b) in g.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, c: f64) {
        for s in self.slots.values_mut() {
            if let Some(g) = s.tensor.grad_mut() {
                g.iter_mut().for_each(|x| *x *= c);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.slots
            .values()
            .filter_map(|s| s.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// One AdamW update over every parameter; gradients are zeroed after.
    pub fn optimizer_step(&mut self, opt: &AdamW) -> Result<()> {
        if let Some((name, _)) = self.slots.iter().find(|(_, s)| s.tensor.grad().is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        let (b1, b2) = opt.betas;
        for slot in self.slots.values_mut() {
            slot.step += 1;
            let bc1 = 1.0 - b1.powf(slot.step as f64);
            let bc2 = 1.0 - b2.powf(slot.step as f64);
            let grad = slot.tensor.grad_mut().take().expect("checked above");
            let decay = 1.0 - opt.lr * opt.weight_decay;
            let values = slot.tensor.values_mut();
            for i in 0..values.len() {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                values[i] = values[i] * decay - opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
            *slot.tensor.grad_mut() = Some(vec![0.0; values.len()]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(vec![1], vec![value]).unwrap());
        s
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut s = store_with(0.7);
        s.zero_grad();
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        s.optimizer_step(&opt).unwrap();
        assert_eq!(s.get("w").unwrap().values(), &[0.7]);
        assert_eq!(s.step_count("w"), Some(1));
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_wd_theta() {
        let mut s = store_with(2.0);
        s.zero_grad();
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamW::default()
        };
        s.optimizer_step(&opt).unwrap();
        let expected = 2.0 - 0.1 * 0.5 * 2.0;
        assert!((s.get("w").unwrap().values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn scalar_recurrence_matches_hand_rolled_update() {
        let grads = [0.3, -1.2, 0.05];
        let opt = AdamW {
            lr: 0.01,
            betas: (0.8, 0.95),
            weight_decay: 0.1,
            eps: 1e-8,
        };
        let mut s = store_with(1.5);
        // independent recurrence
        let (mut theta, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            theta -= opt.lr * opt.weight_decay * theta;
            m = 0.8 * m + 0.2 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            theta -= opt.lr * mh / (vh.sqrt() + opt.eps);

            s.zero_grad();
            let mut tape = Tape::new();
            let w = s.bind(&mut tape, "w").unwrap();
            let loss = tape.scale(w, *g);
            tape.backward(loss).unwrap();
            s.accumulate_grads(&tape).unwrap();
            s.optimizer_step(&opt).unwrap();
        }
        assert!((s.get("w").unwrap().values()[0] - theta).abs() < 1e-14);
    }

    #[test]
    fn missing_grad_is_named() {
        let mut s = store_with(1.0);
        let err = s.optimizer_step(&AdamW::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParameterStore::new();
        for n in ["b", "a.z", "a.b"] {
            s.insert(n, Tensor::zeros(&[1]));
        }
        assert_eq!(s.names().collect::<Vec<_>>(), ["a.b", "a.z", "b"]);
    }
}
