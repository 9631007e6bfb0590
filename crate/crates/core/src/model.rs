//! Model configuration, parameter layout and the combined forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::AssociationHead;
use crate::csc_attention::{Fusion, FusionConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::RegionConfig;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub region: RegionConfig,
    /// Token and feature dimension.
    pub dim: usize,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            region: RegionConfig::default(),
            dim: 64,
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.region.patch_size < 4 {
            return Err(Error::Config("patch_size must be at least 4".into()));
        }
        if self.region.num_parts() == 0 {
            return Err(Error::Config("part grid must be non-empty".into()));
        }
        if self.fusion.heads == 0 || self.dim % self.fusion.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.fusion.heads
            )));
        }
        if self.encoder.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        Ok(())
    }
}

/// Registers fresh parameters or binds to existing ones by name.
pub(crate) enum Builder<'a> {
    Init {
        store: &'a mut ParamStore,
        rng: ChaCha8Rng,
    },
    Bind {
        store: &'a ParamStore,
    },
}

impl Builder<'_> {
    pub(crate) fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        match self {
            Builder::Init { store, rng } => Ok(store.register_uniform(name, shape, fan_in, fan_out, rng)),
            Builder::Bind { store } => bind(store, name, shape),
        }
    }

    pub(crate) fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        match self {
            Builder::Init { store, .. } => Ok(store.register_const(name, shape, value)),
            Builder::Bind { store } => bind(store, name, shape),
        }
    }
}

fn bind(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store.id(name)?;
    if store.get(id).shape != shape {
        return Err(Error::Checkpoint(format!(
            "parameter {name} has shape {:?}, expected {shape:?}",
            store.get(id).shape
        )));
    }
    Ok(id)
}

/// Fully connected layer `y = x W (+ b)` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub(crate) fn build(b: &mut Builder<'_>, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = b.uniform(&format!("{name}.weight"), &[input, output], input, output)?;
        let bias = if bias {
            Some(b.constant(&format!("{name}.bias"), &[output], 0.0)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

/// Parameters and configuration of the full appearance-and-association model.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) encoder: Encoder,
    pub(crate) fusion: Fusion,
    pub(crate) association: AssociationHead,
}

impl Model {
    /// Seeded random initialisation.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder::Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (encoder, fusion, association) = Self::build(&config, &mut b)?;
        Ok(Model {
            config,
            params,
            encoder,
            fusion,
            association,
        })
    }

    /// Wraps existing parameters, checking every expected tensor is present.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::Bind { store: &params };
        let (encoder, fusion, association) = Self::build(&config, &mut b)?;
        Ok(Model {
            config,
            params,
            encoder,
            fusion,
            association,
        })
    }

    fn build(config: &ModelConfig, b: &mut Builder<'_>) -> Result<(Encoder, Fusion, AssociationHead)> {
        let encoder = Encoder::build(b, &config.encoder, config.dim)?;
        let fusion = Fusion::build(b, &config.fusion, config.dim, config.region.num_parts())?;
        let association = AssociationHead::build(b, config.dim)?;
        Ok((encoder, fusion, association))
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_parts(&self) -> usize {
        self.config.region.num_parts()
    }

    /// The same model with a different fusion variant; parameters are shared.
    pub fn with_fusion(&self, fusion: FusionConfig) -> Result<Self> {
        let config = ModelConfig {
            fusion,
            ..self.config.clone()
        };
        Model::from_params(config, self.params.clone())
    }

    pub(crate) fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub(crate) fn association(&self) -> &AssociationHead {
        &self.association
    }

    /// Encodes a stacked `[B, S, S, 3]` patch batch into `[B, dim]` features.
    pub fn encode_batch(&self, g: &mut Graph, patches: Tensor) -> Var {
        let x = g.input(patches);
        self.encoder.forward(g, &self.params, x)
    }
}
