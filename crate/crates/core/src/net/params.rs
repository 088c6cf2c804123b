use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Freezing boundary of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    EnvmapAdapter,
    KeyframeAdapter,
    InverseAdapter,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Base,
        ParamGroup::EnvmapAdapter,
        ParamGroup::KeyframeAdapter,
        ParamGroup::InverseAdapter,
    ];

    fn bit(self) -> u8 {
        match self {
            ParamGroup::Base => 1,
            ParamGroup::EnvmapAdapter => 2,
            ParamGroup::KeyframeAdapter => 4,
            ParamGroup::InverseAdapter => 8,
        }
    }
}

/// Set of parameter groups that take part in autodiff.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupMask(u8);

impl GroupMask {
    pub const NONE: GroupMask = GroupMask(0);
    pub const ALL: GroupMask = GroupMask(15);

    pub fn of(groups: &[ParamGroup]) -> Self {
        GroupMask(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }
}

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
}

impl Param {
    /// The parameter as a graph node, or detached when its group is frozen.
    pub fn get(&self, trainable: GroupMask) -> Tensor {
        if trainable.contains(self.group) {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    pub fn numel(&self) -> usize {
        self.var.elem_count()
    }
}

/// Ordered registry of every parameter of a model.
#[derive(Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            params: Vec::new(),
            dtype,
            device,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn create(&mut self, name: String, group: ParamGroup, shape: &[usize], init: Init) -> Result<Param> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-a..a)).collect()
            }
        };
        // Round through f32 so f32 and f64 models start from identical values.
        let data: Vec<f64> = data.into_iter().map(|v| v as f32 as f64).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let p = Param {
            name,
            group,
            var: Var::from_tensor(&t)?,
        };
        self.params.push(p.clone());
        Ok(p)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn group_sizes(&self) -> [(ParamGroup, usize); 4] {
        ParamGroup::ALL.map(|g| {
            (
                g,
                self.params.iter().filter(|p| p.group == g).map(Param::numel).sum(),
            )
        })
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }
}

/// Scoped helper that prefixes names and tags a group while building layers.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    prefix: String,
    group: ParamGroup,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: &str, group: ParamGroup) -> Self {
        Self {
            store,
            prefix: prefix.to_string(),
            group,
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            prefix,
            group: self.group,
            store: self.store,
        }
    }

    pub fn with_group(&mut self, group: ParamGroup) -> Builder<'_> {
        Builder {
            prefix: self.prefix.clone(),
            group,
            store: self.store,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, self.group, shape, init)
    }
}
