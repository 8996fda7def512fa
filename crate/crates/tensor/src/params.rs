use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{KernelError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Frozen parameters (e.g. random Fourier frequencies) are stored and
    /// checkpointed but never receive gradients or optimizer updates.
    pub trainable: bool,
}

/// Named parameter registry shared by every model component.
///
/// Parameters are created in a deterministic order from a single seeded RNG,
/// so the same construction sequence always yields identical weights.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.len()];
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        id
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
    pub fn linear_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..fan_in * fan_out)
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        let t = Tensor::matrix(fan_in, fan_out, data).expect("valid shape");
        self.insert(name.into(), t, true)
    }

    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, trainable: bool) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::matrix(rows, cols, data).expect("valid shape");
        self.insert(name.into(), t, trainable)
    }

    pub fn constant(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        let t = Tensor::matrix(rows, cols, vec![value; rows * cols]).expect("valid shape");
        self.insert(name.into(), t, true)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalar weights.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add gradients gathered elsewhere (e.g. from a parallel worker).
    pub fn add_grads(&mut self, grads: &[(ParamId, Vec<f64>)]) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Replace values by name; every stored name must be present in `values`
    /// with a matching shape.
    pub fn load_named(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in values {
            let id = self
                .id(&name)
                .ok_or_else(|| KernelError::UnknownParam(name.clone()))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(KernelError::ShapeMismatch {
                    op: "load",
                    detail: format!("{name}: expected {:?}, got {:?}", p.value.shape(), t.shape()),
                });
            }
            p.value = t;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(KernelError::Checkpoint(format!(
                "parameter `{}` missing from checkpoint",
                self.params[missing].name
            )));
        }
        Ok(())
    }
}
