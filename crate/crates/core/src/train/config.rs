use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::DropoutSpec;
use crate::hypergraph::IncidenceScaling;
use crate::model::{ForwardOptions, ModelDims};
use crate::ssl::{ContrastConfig, SideSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub hyperedges: usize,
    pub layers: usize,
    pub pairs_per_user: usize,
    pub batch_size: usize,
    pub keep_prob: f64,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub temperature: f64,
    pub include_positive: bool,
    pub full_denominator: bool,
    pub node_cl_sides: SideSet,
    pub graph_cl_item_side: bool,
    pub slope: f64,
    pub incidence: IncidenceScaling,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub seed: u64,
    pub no_node_cl: bool,
    pub no_graph_cl: bool,
    pub no_meta: bool,
    pub no_intents: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hyperedges: 32,
            layers: 2,
            pairs_per_user: 1,
            batch_size: 256,
            keep_prob: 0.8,
            lr: 1e-3,
            lambda1: 1e-4,
            lambda2: 1e-5,
            lambda3: 1e-5,
            temperature: 0.5,
            include_positive: true,
            full_denominator: false,
            node_cl_sides: SideSet::Both,
            graph_cl_item_side: false,
            slope: 0.5,
            incidence: IncidenceScaling::InvSqrtEdges,
            optimizer: OptimizerKind::Adam,
            epochs: 30,
            seed: 0,
            no_node_cl: false,
            no_graph_cl: false,
            no_meta: false,
            no_intents: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {v:?}"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

pub const ABLATIONS: [&str; 4] = ["no_node_cl", "no_graph_cl", "no_meta", "no_intents"];

impl TrainConfig {
    pub const KEYS: [&'static str; 24] = [
        "dim",
        "hyperedges",
        "layers",
        "pairs_per_user",
        "batch_size",
        "keep_prob",
        "lr",
        "lambda1",
        "lambda2",
        "lambda3",
        "temperature",
        "include_positive",
        "full_denominator",
        "node_cl_sides",
        "graph_cl_item_side",
        "slope",
        "incidence",
        "optimizer",
        "epochs",
        "seed",
        "no_node_cl",
        "no_graph_cl",
        "no_meta",
        "no_intents",
    ];

    /// Sets one field from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "dim" => self.dim = parse_num(key, v)?,
            "hyperedges" => self.hyperedges = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "pairs_per_user" => self.pairs_per_user = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "keep_prob" => self.keep_prob = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lambda1" => self.lambda1 = parse_num(key, v)?,
            "lambda2" => self.lambda2 = parse_num(key, v)?,
            "lambda3" => self.lambda3 = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "include_positive" => self.include_positive = parse_bool(key, v)?,
            "full_denominator" => self.full_denominator = parse_bool(key, v)?,
            "node_cl_sides" => {
                self.node_cl_sides = match v {
                    "user" => SideSet::User,
                    "item" => SideSet::Item,
                    "both" => SideSet::Both,
                    _ => {
                        return Err(Error::Config(format!(
                            "node_cl_sides: expected user|item|both, got {v:?}"
                        )))
                    }
                }
            }
            "graph_cl_item_side" => self.graph_cl_item_side = parse_bool(key, v)?,
            "slope" => self.slope = parse_num(key, v)?,
            "incidence" => {
                self.incidence = match v {
                    "inv_sqrt" => IncidenceScaling::InvSqrtEdges,
                    "softmax" => IncidenceScaling::RowSoftmax,
                    _ => {
                        return Err(Error::Config(format!(
                            "incidence: expected inv_sqrt|softmax, got {v:?}"
                        )))
                    }
                }
            }
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => {
                        return Err(Error::Config(format!(
                            "optimizer: expected adam|sgd, got {v:?}"
                        )))
                    }
                }
            }
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "no_node_cl" => self.no_node_cl = parse_bool(key, v)?,
            "no_graph_cl" => self.no_graph_cl = parse_bool(key, v)?,
            "no_meta" => self.no_meta = parse_bool(key, v)?,
            "no_intents" => self.no_intents = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let side = |s: SideSet| match s {
            SideSet::User => "user",
            SideSet::Item => "item",
            SideSet::Both => "both",
        };
        Some(match key {
            "dim" => self.dim.to_string(),
            "hyperedges" => self.hyperedges.to_string(),
            "layers" => self.layers.to_string(),
            "pairs_per_user" => self.pairs_per_user.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "keep_prob" => self.keep_prob.to_string(),
            "lr" => self.lr.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "lambda3" => self.lambda3.to_string(),
            "temperature" => self.temperature.to_string(),
            "include_positive" => self.include_positive.to_string(),
            "full_denominator" => self.full_denominator.to_string(),
            "node_cl_sides" => side(self.node_cl_sides).to_string(),
            "graph_cl_item_side" => self.graph_cl_item_side.to_string(),
            "slope" => self.slope.to_string(),
            "incidence" => match self.incidence {
                IncidenceScaling::InvSqrtEdges => "inv_sqrt",
                IncidenceScaling::RowSoftmax => "softmax",
            }
            .to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
            .to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "no_node_cl" => self.no_node_cl.to_string(),
            "no_graph_cl" => self.no_graph_cl.to_string(),
            "no_meta" => self.no_meta.to_string(),
            "no_intents" => self.no_intents.to_string(),
            _ => return None,
        })
    }

    /// `(key, value)` for every field, sorted by key.
    pub fn canonical_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Self::KEYS
            .iter()
            .map(|k| (k.to_string(), self.get(k).expect("known key")))
            .collect();
        out.sort();
        out
    }

    pub fn set_ablation(&mut self, name: &str) -> Result<()> {
        if !ABLATIONS.contains(&name) {
            return Err(Error::Config(format!(
                "unknown ablation {name:?}; expected one of {}",
                ABLATIONS.join(", ")
            )));
        }
        self.set(name, "true")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hyperedges == 0 {
            return Err(Error::Config(
                "dim and hyperedges must be at least 1".into(),
            ));
        }
        if self.pairs_per_user == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "pairs_per_user and batch_size must be at least 1".into(),
            ));
        }
        DropoutSpec::new(self.keep_prob)?;
        for (name, v) in [
            ("lr", self.lr),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.slope) {
            return Err(Error::Config(format!(
                "slope {} outside [0, 1]",
                self.slope
            )));
        }
        self.contrast().validate()
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            temperature: self.temperature,
            node_sides: self.node_cl_sides,
            graph_sides: if self.graph_cl_item_side {
                SideSet::Both
            } else {
                SideSet::User
            },
            include_positive: self.include_positive,
            full_denominator: self.full_denominator,
        }
    }

    pub fn dims(
        &self,
        num_users: usize,
        num_items: usize,
        num_behaviors: usize,
        target: usize,
    ) -> ModelDims {
        ModelDims {
            num_users,
            num_items,
            num_behaviors,
            target_behavior: target,
            dim: self.dim,
            hyperedges: self.hyperedges,
            layers: self.layers,
        }
    }

    pub fn node_cl_active(&self, num_behaviors: usize) -> bool {
        !self.no_node_cl && num_behaviors >= 2 && self.layers > 0
    }

    pub fn graph_cl_active(&self, num_behaviors: usize) -> bool {
        !self.no_graph_cl && !self.no_intents && num_behaviors >= 2 && self.layers > 0
    }

    pub fn meta_active(&self, num_behaviors: usize) -> bool {
        !self.no_meta && self.node_cl_active(num_behaviors)
    }

    /// Forward settings for a training step (`training`) or for scoring.
    pub fn forward_options(&self, num_behaviors: usize, training: bool) -> ForwardOptions {
        let corrupt = training && self.graph_cl_active(num_behaviors);
        ForwardOptions {
            slope: self.slope,
            scaling: self.incidence,
            dropout: if training {
                DropoutSpec::new(self.keep_prob).unwrap_or_else(|_| DropoutSpec::off())
            } else {
                DropoutSpec::off()
            },
            no_intents: self.no_intents,
            corrupt: [corrupt, corrupt && self.graph_cl_item_side],
        }
    }

    /// Hex SHA-256 over the sorted `key=value` lines.
    pub fn hash(&self) -> String {
        hash_pairs(&self.canonical_pairs())
    }
}

pub fn hash_pairs(pairs: &[(String, String)]) -> String {
    let mut sorted = pairs.to_vec();
    sorted.sort();
    let mut h = Sha256::new();
    for (k, v) in &sorted {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
