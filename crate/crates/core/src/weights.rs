//! Named model parameters, their initialization and binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Width of the handcrafted descriptor fed to the projection.
pub const DESCRIPTOR_DIM: usize = 10;
/// Group count of the EdgeConv MLP normalization.
pub const GROUPS: usize = 8;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature width.
    pub d: usize,
    /// Neighbours in the feature-space graph.
    pub k_graph: usize,
    /// Neighbours for the handcrafted descriptor.
    pub k_local: usize,
}

impl ModelConfig {
    pub fn new(d: usize, k_graph: usize, k_local: usize) -> Result<Self> {
        let c = ModelConfig { d, k_graph, k_local };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % GROUPS != 0 || self.d % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "d = {} must be a positive multiple of {} and 4",
                self.d, GROUPS
            )));
        }
        if self.k_graph == 0 {
            return Err(Error::InvalidArgument("k_graph must be at least 1".into()));
        }
        if self.k_local < 4 {
            return Err(Error::InvalidArgument(format!("k_local = {} must be at least 4", self.k_local)));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in initialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d;
        let mut out = Vec::new();
        let mut lin = |name: &str, fan_in: usize, fan_out: usize| {
            out.push((format!("{}.weight", name), vec![fan_out, fan_in]));
            out.push((format!("{}.bias", name), vec![fan_out]));
        };
        lin("proj", DESCRIPTOR_DIM, d);
        for (i, (a, b)) in [(2 * d, d), (d, d), (d, 2 * d)].into_iter().enumerate() {
            lin(&format!("gcnn.h1.{}", i), a, b);
        }
        lin("gcnn.post", 2 * d, d);
        lin("fusion_xy", 2 * d, d);
        lin("fusion_yx", 2 * d, d);
        for (i, (a, b)) in [(1, d / 4), (d / 4, d / 2), (d / 2, d)].into_iter().enumerate() {
            lin(&format!("consistency.h2.{}", i), a, b);
        }
        for side in ["x", "y"] {
            for (i, (a, b)) in [(2 * d, d / 4), (d / 4, d / 4), (d / 4, d / 2), (d / 2, 1)]
                .into_iter()
                .enumerate()
            {
                lin(&format!("matchability_{}.h3.{}", side, i), a, b);
            }
        }
        out.push(("consistency.log_sigma".into(), vec![1]));
        out
    }
}

/// The full learnable parameter set, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelWeights<T> {
    /// Fan-in scaled uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
    /// `log_sigma` starts at 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut fan_in = 1;
        for (name, shape) in config.parameter_shapes() {
            let value = if name.ends_with("log_sigma") {
                Tensor::zeros(&shape)
            } else {
                if name.ends_with(".weight") {
                    fan_in = shape[1];
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::of(rng.random_range(-bound..bound)))
            };
            params.insert(name, value);
        }
        Ok(ModelWeights { config, params })
    }

    /// All-zero parameters (log_sigma = 0 as well).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(n, s)| {
                let t = Tensor::zeros(&s);
                (n, t)
            })
            .collect();
        Ok(ModelWeights { config, params })
    }

    /// Assemble from a name map, requiring exactly the expected names and shapes.
    pub fn from_map(config: ModelConfig, mut map: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = map.remove(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ParameterShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: shape,
                });
            }
            if !t.is_finite() {
                return Err(Error::InvalidInput(format!("parameter {} has non-finite values", name)));
            }
            params.insert(name, t);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::InvalidInput(format!("unexpected parameter '{}'", extra)));
        }
        Ok(ModelWeights { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Register every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundWeights {
        BoundWeights {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct BoundWeights {
    vars: BTreeMap<String, Var>,
}

impl BoundWeights {
    /// Wrap handles created elsewhere, e.g. by a gradient checker.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        BoundWeights { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.var(&format!("{}.weight", prefix))?,
            bias: self.var(&format!("{}.bias", prefix))?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// A bound fully connected layer.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, Some(self.bias))
    }
}
