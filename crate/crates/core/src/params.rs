//! Named parameter storage. Parameters live as plain buffers between steps
//! and are bound as fresh differentiable leaves for each forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform in `(-a, a)`.
    Uniform(f64),
    /// Glorot uniform from the given fan-in and fan-out.
    Glorot { fan_in: usize, fan_out: usize },
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter, drawing its initial values from `rng_seed`.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng_seed: u64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Uniform(a) => {
                let mut rng = rng_from(rng_seed);
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
            Init::Glorot { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = rng_from(rng_seed);
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
        };
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Differentiable leaves for one forward/backward pass.
    pub fn bind(&self) -> Bound {
        Bound {
            tensors: self
                .params
                .iter()
                .map(|p| Tensor::param(p.data.clone(), &p.shape).expect("stored shapes are valid"))
                .collect(),
        }
    }

    /// Constant tensors, for inference without a graph.
    pub fn freeze(&self) -> Bound {
        Bound {
            tensors: self
                .params
                .iter()
                .map(|p| Tensor::new(p.data.clone(), &p.shape).expect("stored shapes are valid"))
                .collect(),
        }
    }

    /// Replaces values with those of `other`, which must have the same
    /// names and shapes in the same order.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.shape != theirs.shape || theirs.data.len() != mine.data.len() {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    mine.name, mine.shape, theirs.name, theirs.shape
                )));
            }
            mine.data.clone_from(&theirs.data);
        }
        Ok(())
    }
}

/// Parameters bound as tensors for one pass.
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Gradient of every parameter (zeros where backward did not reach).
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }
}

/// `x · W + b` for `x` with one item per row.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, bias: bool, seed: u64) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            &[inputs, outputs],
            Init::Glorot {
                fan_in: inputs,
                fan_out: outputs,
            },
            seed,
        );
        let bias = bias.then(|| store.add(&format!("{name}.bias"), &[outputs], Init::Zeros, 0));
        Linear { weight, bias }
    }

    pub fn forward(&self, bound: &Bound, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(bound.get(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(bound.get(b)),
            None => Ok(y),
        }
    }
}
