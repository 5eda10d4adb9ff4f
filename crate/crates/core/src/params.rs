//! Named parameter tensors organised into freezable groups.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    BodyPretrained,
    AggregationBranches,
    SideBranch,
    Cfn,
    Rpn,
    Frcnn,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::BodyPretrained,
        Group::AggregationBranches,
        Group::SideBranch,
        Group::Cfn,
        Group::Rpn,
        Group::Frcnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::BodyPretrained => "body-pretrained",
            Group::AggregationBranches => "aggregation-branches",
            Group::SideBranch => "side-branch",
            Group::Cfn => "cfn",
            Group::Rpn => "rpn",
            Group::Frcnn => "frcnn",
        }
    }

    /// Group owning a parameter, from the first component of its name.
    pub fn of(name: &str) -> Option<Group> {
        match name.split('.').next()? {
            "body" => Some(Group::BodyPretrained),
            "agg" => Some(Group::AggregationBranches),
            "side" => Some(Group::SideBranch),
            "cfn" => Some(Group::Cfn),
            "rpn" => Some(Group::Rpn),
            "frcnn" => Some(Group::Frcnn),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type GroupSet = BTreeSet<Group>;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Parameters in insertion order; names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Zero-mean Gaussian with the given standard deviation.
    Gaussian(f64),
    /// Zero-mean Gaussian with σ = sqrt(2 / fan_in).
    He,
    Zeros,
}

/// Initialization of a newly added layer, as configured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerInit {
    Gaussian { std: f64 },
    He,
}

impl Default for LayerInit {
    fn default() -> Self {
        LayerInit::Gaussian {
            std: crate::backbone::NEW_LAYER_SIGMA,
        }
    }
}

impl From<LayerInit> for Init {
    fn from(l: LayerInit) -> Init {
        match l {
            LayerInit::Gaussian { std } => Init::Gaussian(std),
            LayerInit::He => Init::He,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
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

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        let group = Group::of(name)
            .ok_or_else(|| Error::Config(format!("parameter `{}` has no known group prefix", name)))?;
        if self.index(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter `{}`", name)));
        }
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
        });
        Ok(())
    }

    /// Create a parameter drawn from `init`; `fan_in` feeds [`Init::He`].
    pub fn init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let sigma = match init {
            Init::Gaussian(s) => s,
            Init::He => (2.0 / fan_in.max(1) as f64).sqrt(),
            Init::Zeros => 0.0,
        };
        let t = if sigma == 0.0 {
            Tensor::zeros(shape)
        } else {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            Tensor::from_fn(shape, |_| normal.sample(rng))
        };
        self.insert(name, t)
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(move |i| &mut self.params[i].value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index(name).is_some()
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{}`", name)))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                name,
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn groups(&self) -> GroupSet {
        self.params.iter().map(|p| p.group).collect()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of the parameters
    /// in `groups`, in insertion order.
    pub fn hash(&self, groups: &GroupSet) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }

    pub fn hash_all(&self) -> String {
        self.hash(&Group::ALL.into_iter().collect())
    }

    /// Put every parameter on `g`; only those in `trainable` receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: &GroupSet) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable.contains(&p.group)))
            .collect();
        Bindings {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            vars,
        }
    }
}

/// Graph variables for one [`ParamStore::bind`] call.
#[derive(Clone, Debug)]
pub struct Bindings {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("parameter `{}` is not bound", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(String::as_str).zip(self.vars.iter().copied())
    }
}

/// Deterministic generator for parameter initialization.
pub fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
