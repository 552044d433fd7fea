//! Named parameter arrays with per-array Adam state, plus helpers to lease
//! them into a [`Graph`] for one update step and apply the resulting
//! gradients.

use crate::error::Result;
use crate::rng::{fnv1a64, mix64, SeededPrng};
use crate::tensor::{adam::adam_step, AdamState, Graph, Tensor, Var};

/// One parameter array: name (stable, used in checkpoints), shape, values,
/// and its Adam optimizer state.
#[derive(Clone, Debug)]
pub struct PVec {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub adam: AdamState,
}

impl PVec {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, lr: f64) -> Self {
        let numel = shape.iter().product();
        PVec {
            name: name.into(),
            shape,
            data: vec![0.0; numel],
            adam: AdamState::new(numel, lr),
        }
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], seeded per array.
    pub fn uniform_fan_in(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        seed: u64,
        lr: f64,
    ) -> Self {
        let name = name.into();
        let mut rng = SeededPrng::new(mix64(seed ^ fnv1a64(name.as_bytes())));
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        PVec {
            name,
            shape,
            data,
            adam: AdamState::new(numel, lr),
        }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.clone()).unwrap()
    }
}

/// Ordered collection of parameter arrays belonging to one network.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub items: Vec<PVec>,
}

/// Graph handles for one leased [`ParamSet`], aligned with `items`.
pub struct Leased {
    pub vars: Vec<Var>,
}

impl ParamSet {
    pub fn push(&mut self, p: PVec) -> usize {
        self.items.push(p);
        self.items.len() - 1
    }

    /// Insert every array as a graph leaf. `trainable` controls whether the
    /// leaves participate in backward.
    pub fn lease(&self, g: &mut Graph, trainable: bool) -> Leased {
        Leased {
            vars: self
                .items
                .iter()
                .map(|p| g.leaf(p.tensor(), trainable))
                .collect(),
        }
    }

    /// Apply one Adam step per array from the gradients accumulated on the
    /// leased leaves. Arrays whose leaf received no gradient are stepped with
    /// zero gradient so the whole set shares one step counter cadence.
    pub fn apply_grads(&mut self, g: &Graph, leased: &Leased) -> Result<()> {
        for (p, &v) in self.items.iter_mut().zip(&leased.vars) {
            match g.grad(v) {
                Some(grad) => adam_step(&mut p.data, grad, &mut p.adam)?,
                None => {
                    let zeros = vec![0.0; p.data.len()];
                    adam_step(&mut p.data, &zeros, &mut p.adam)?;
                }
            }
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.items.iter().map(|p| p.data.len()).sum()
    }
}
