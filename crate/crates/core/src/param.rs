//! Named parameter traversal and seeded initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// A structure holding trainable tensors addressable by dotted names.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Replaces the tensor called `name`; returns whether it existed.
    fn set_param(&mut self, name: &str, value: Tensor) -> bool {
        let mut found = false;
        self.visit_mut("", &mut |n, t| {
            if n == name {
                *t = value.clone();
                found = true;
            }
        });
        found
    }

    /// Turns every tensor into a fresh gradient-accumulating leaf.
    fn make_trainable(&mut self) {
        self.visit_mut("", &mut |_, t| *t = t.detach_param());
    }

    /// Turns every tensor into a constant.
    fn freeze(&mut self) {
        self.visit_mut("", &mut |_, t| *t = t.detach());
    }

    fn zero_grad(&self) {
        self.visit("", &mut |_, t| t.zero_grad());
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded source of initial weights.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("valid shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = Init::new(3).normal(&[4, 4], 1.0);
        let b = Init::new(3).normal(&[4, 4], 1.0);
        assert_eq!(a.data(), b.data());
        let c = Init::new(4).normal(&[4, 4], 1.0);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn join_names() {
        assert_eq!(join("", "w"), "w");
        assert_eq!(join("stem.trans0", "w"), "stem.trans0.w");
    }
}
