//! Model configuration, parameter layout and initialization.

mod checkpoint;
mod encoder;
mod gradcheck;
mod heads;
mod input;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::structure::BOND_SENSES;
use crate::molgraph::D_INF;
use crate::nn::{Mat, ParamId, ParamStore};
use crate::reaction::LeavingGroupVocab;

pub use checkpoint::{Checkpoint, CheckpointError, TrainState};
pub use encoder::{EncodeOptions, EncodedGraph, Encoding, NumericsError};
pub use gradcheck::{check_against, grad_check, max_relative_error, GradCheckFailure, Objective, FD_STEP, GRAD_TOLERANCE};
pub use heads::{HeadOutputs, LossBreakdown, Sample, SampleError, TaskVars};
pub use input::{GraphInput, COUNT_CLIP, DEGREE_CLIP};

/// Number of reaction classes with their own embedding.
pub const REACTION_TYPES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_k: usize,
    pub n_head: usize,
    pub layers: usize,
    /// Longest walk length with its own bias tables.
    pub max_hop: usize,
    /// Number of bond senses used, taken from the front of the sense list.
    pub senses: usize,
    /// Hydrogen change bound; 2k+1 hydrogen classes.
    pub k: i8,
    pub vocab_size: usize,
    /// Gate slots available to the connection head.
    pub max_gates: usize,
    pub seed: u64,
    /// Whether reaction-type embeddings exist.
    pub reaction_types: bool,
    /// One encoder per task group instead of a shared one.
    pub separate_encoders: bool,
    pub mask_local: bool,
    pub mask_global: bool,
    /// Softmax temperature of the leaving-group classifier, in training and
    /// at inference.
    pub lg_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            d_k: 16,
            n_head: 8,
            layers: 4,
            max_hop: 4,
            senses: BOND_SENSES.len(),
            k: crate::reaction::DEFAULT_MAX_H_CHANGE,
            vocab_size: 1,
            max_gates: 2,
            seed: 0,
            reaction_types: false,
            separate_encoders: false,
            mask_local: false,
            mask_global: false,
            lg_temperature: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("d ({d}) must equal d_k ({d_k}) × n_head ({n_head})")]
    HeadDims { d: usize, d_k: usize, n_head: usize },
    #[error("max_hop {0} exceeds 5")]
    MaxHop(usize),
    #[error("senses {0} outside 0..=6")]
    Senses(usize),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("checkpoint {field} = {found}, session expects {expected}")]
    Mismatch {
        field: &'static str,
        found: String,
        expected: String,
    },
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d == 0 || self.n_head == 0 || self.d_k == 0 {
            return Err(ConfigError::NonPositive("d, d_k and n_head"));
        }
        if self.d != self.d_k * self.n_head {
            return Err(ConfigError::HeadDims {
                d: self.d,
                d_k: self.d_k,
                n_head: self.n_head,
            });
        }
        if self.max_hop > 5 {
            return Err(ConfigError::MaxHop(self.max_hop));
        }
        if self.senses > BOND_SENSES.len() {
            return Err(ConfigError::Senses(self.senses));
        }
        if self.k < 0 {
            return Err(ConfigError::NonPositive("k"));
        }
        if !(self.lg_temperature > 0.0) {
            return Err(ConfigError::NonPositive("lg_temperature"));
        }
        if self.vocab_size == 0 {
            return Err(ConfigError::NonPositive("vocab_size"));
        }
        Ok(())
    }

    pub fn hydrogen_classes(&self) -> usize {
        2 * self.k as usize + 1
    }

    pub fn encoder_count(&self) -> usize {
        if self.separate_encoders {
            3
        } else {
            1
        }
    }

    /// Checks that a loaded checkpoint's architecture matches this session.
    pub fn ensure_compatible(&self, found: &ModelConfig) -> Result<(), ConfigError> {
        let checks: [(&'static str, String, String); 7] = [
            ("max_hop", found.max_hop.to_string(), self.max_hop.to_string()),
            ("d", found.d.to_string(), self.d.to_string()),
            ("n_head", found.n_head.to_string(), self.n_head.to_string()),
            ("layers", found.layers.to_string(), self.layers.to_string()),
            ("senses", found.senses.to_string(), self.senses.to_string()),
            ("k", found.k.to_string(), self.k.to_string()),
            (
                "separate_encoders",
                found.separate_encoders.to_string(),
                self.separate_encoders.to_string(),
            ),
        ];
        for (field, found, expected) in checks {
            if found != expected {
                return Err(ConfigError::Mismatch { field, found, expected });
            }
        }
        Ok(())
    }
}

/// Task groups that may own separate encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskGroup {
    Rcp = 0,
    Lgm = 1,
    Lgc = 2,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderIds {
    pub element: ParamId,
    pub charge: ParamId,
    pub hydrogens: ParamId,
    pub aromatic: ParamId,
    pub ring: ParamId,
    pub degree: ParamId,
    pub super_node: ParamId,
    pub reaction_type: Option<ParamId>,
    pub local: Vec<ParamId>,
    pub virtual_edge: ParamId,
    pub rbf_mean: ParamId,
    pub rbf_std: ParamId,
    pub layers: Vec<LayerIds>,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadIds {
    pub bond_wq: ParamId,
    pub bond_wk: ParamId,
    pub bond_w: ParamId,
    pub bond_b: ParamId,
    pub atom_w: ParamId,
    pub atom_b: ParamId,
    pub lg_w: ParamId,
    pub lg_b: ParamId,
    pub contrast: ParamId,
    pub gate_slots: ParamId,
    pub conn_wq: ParamId,
    pub conn_wk: ParamId,
    pub conn_w: ParamId,
    pub conn_b: ParamId,
}

/// Configuration, leaving-group vocabulary and every learnable tensor.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: LeavingGroupVocab,
    pub params: ParamStore,
    pub(crate) encoders: Vec<EncoderIds>,
    pub(crate) heads: HeadIds,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> ParamId {
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.store.add(name, Mat::from_vec(rows, cols, data))
    }

    /// Glorot-uniform weight matrix.
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(name, rows, cols, bound)
    }

    fn embedding(&mut self, name: String, rows: usize, d: usize) -> ParamId {
        self.uniform(name, rows, d, 1.0 / (d as f64).sqrt())
    }

    fn fill(&mut self, name: String, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Mat::from_vec(rows, cols, vec![value; rows * cols]))
    }
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig, vocab: LeavingGroupVocab) -> Result<Model, ConfigError> {
        let mut config = config;
        config.vocab_size = vocab.len();
        config.max_gates = config.max_gates.max(vocab.max_gates()).max(1);
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            store: ParamStore::new(),
        };
        let (d, h) = (config.d, config.n_head);
        let mut encoders = Vec::new();
        for e in 0..config.encoder_count() {
            let p = format!("enc{e}.");
            let element = init.embedding(format!("{p}element"), input::ELEMENT_ROWS, d);
            let charge = init.embedding(format!("{p}charge"), input::CHARGE_ROWS, d);
            let hydrogens = init.embedding(format!("{p}hydrogens"), input::HYDROGEN_ROWS, d);
            let aromatic = init.embedding(format!("{p}aromatic"), 2, d);
            let ring = init.embedding(format!("{p}ring"), 2, d);
            let degree = init.embedding(format!("{p}degree"), input::DEGREE_ROWS, d);
            let super_node = init.embedding(format!("{p}super"), 1, d);
            let reaction_type = config
                .reaction_types
                .then(|| init.embedding(format!("{p}reaction_type"), REACTION_TYPES, d));
            let mut local = Vec::new();
            for s in 0..config.senses {
                for j in 1..=config.max_hop {
                    local.push(init.uniform(format!("{p}bias.s{s}.h{j}"), input::COUNT_ROWS, h, 0.1));
                }
            }
            let virtual_edge = init.fill(format!("{p}bias.virtual"), 1, h, 0.0);
            // Gaussian centres spread over [0, D_INF], denser at short range.
            let span = (h.max(2) - 1) as f64;
            let means: Vec<f64> = (0..h).map(|i| D_INF as f64 * (i as f64 / span).powi(2)).collect();
            let stds: Vec<f64> = means.iter().map(|m| 1.0 + m / 4.0).collect();
            let rbf_mean = init.store.add(format!("{p}rbf.mean"), Mat::row_vector(means));
            let rbf_std = init.store.add(format!("{p}rbf.std"), Mat::row_vector(stds));
            let mut layers = Vec::new();
            for l in 0..config.layers {
                let q = format!("{p}layer{l}.");
                layers.push(LayerIds {
                    ln1_g: init.fill(format!("{q}ln1.gamma"), 1, d, 1.0),
                    ln1_b: init.fill(format!("{q}ln1.beta"), 1, d, 0.0),
                    wq: init.weight(format!("{q}wq"), d, d),
                    wk: init.weight(format!("{q}wk"), d, d),
                    wv: init.weight(format!("{q}wv"), d, d),
                    wo: init.weight(format!("{q}wo"), d, d),
                    bo: init.fill(format!("{q}bo"), 1, d, 0.0),
                    ln2_g: init.fill(format!("{q}ln2.gamma"), 1, d, 1.0),
                    ln2_b: init.fill(format!("{q}ln2.beta"), 1, d, 0.0),
                    w1: init.weight(format!("{q}ffn.w1"), d, 4 * d),
                    b1: init.fill(format!("{q}ffn.b1"), 1, 4 * d, 0.0),
                    w2: init.weight(format!("{q}ffn.w2"), 4 * d, d),
                    b2: init.fill(format!("{q}ffn.b2"), 1, d, 0.0),
                });
            }
            encoders.push(EncoderIds {
                element,
                charge,
                hydrogens,
                aromatic,
                ring,
                degree,
                super_node,
                reaction_type,
                local,
                virtual_edge,
                rbf_mean,
                rbf_std,
                layers,
            });
        }
        let heads = HeadIds {
            bond_wq: init.weight("head.bond.wq".into(), d, d),
            bond_wk: init.weight("head.bond.wk".into(), d, d),
            bond_w: init.weight("head.bond.w".into(), h, 1),
            bond_b: init.fill("head.bond.b".into(), 1, 1, 0.0),
            atom_w: init.weight("head.atom.w".into(), d, config.hydrogen_classes()),
            atom_b: init.fill("head.atom.b".into(), 1, config.hydrogen_classes(), 0.0),
            lg_w: init.weight("head.lg.w".into(), d, config.vocab_size),
            lg_b: init.fill("head.lg.b".into(), 1, config.vocab_size, 0.0),
            contrast: init.embedding("head.lg.contrast".into(), 1, d),
            gate_slots: init.embedding("head.conn.slots".into(), config.max_gates, d),
            conn_wq: init.weight("head.conn.wq".into(), 2 * d, d),
            conn_wk: init.weight("head.conn.wk".into(), d, d),
            conn_w: init.weight("head.conn.w".into(), h, 1),
            conn_b: init.fill("head.conn.b".into(), 1, 1, 0.0),
        };
        let mut params = init.store;
        params.round_to_f32();
        Ok(Model {
            config,
            vocab,
            params,
            encoders,
            heads,
        })
    }

    pub(crate) fn encoder_for(&self, group: TaskGroup) -> &EncoderIds {
        &self.encoders[if self.config.separate_encoders { group as usize } else { 0 }]
    }

    pub fn input(&self, g: &crate::molgraph::MolGraph) -> GraphInput {
        GraphInput::new(g, self.config.senses, self.config.max_hop)
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.value_mut(id).data.fill(0.0);
        }
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }
}
