//! Planted-intent synthetic multi-behavior data.
//!
//! Every user and item carries a latent intent. A (user, item) pair with
//! matching intents is `intent_boost` times more likely to be interacted
//! with than a mismatched pair, at every behavior level. Behavior `k`
//! occurs with probability `funnel_probs[k] · affinity / mean_affinity`.
//! Behaviors share one uniform draw with probability `funnel_coupling`, so
//! a coupled purchase implies a view, the way a real funnel nests.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionTensor};
use crate::corelin::SeededRng;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub intents: usize,
    /// Base rate per behavior, non-increasing (view ≥ cart ≥ purchase).
    /// The last behavior is the target.
    pub funnel_probs: Vec<f64>,
    pub intent_boost: f64,
    pub funnel_coupling: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_items: 1000,
            num_behaviors: 3,
            intents: 4,
            funnel_probs: vec![0.05, 0.02, 0.008],
            intent_boost: 6.0,
            funnel_coupling: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.intents == 0 {
            return Err(Error::Config("intents must be at least 1".into()));
        }
        if self.num_behaviors == 0 || self.funnel_probs.len() != self.num_behaviors {
            return Err(Error::Config(format!(
                "funnel_probs has {} entries for {} behaviors",
                self.funnel_probs.len(),
                self.num_behaviors
            )));
        }
        for &p in &self.funnel_probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "funnel probability {p} outside [0, 1]"
                )));
            }
        }
        if self.funnel_probs.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("funnel_probs must be non-increasing".into()));
        }
        if !(self.intent_boost >= 1.0) {
            return Err(Error::Config("intent_boost must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.funnel_coupling) {
            return Err(Error::Config("funnel_coupling outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub tensor: InteractionTensor,
    pub user_intents: Vec<usize>,
    pub item_intents: Vec<usize>,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed, "synth");
    let user_intents: Vec<usize> = (0..cfg.num_users)
        .map(|_| rng.random_range(0..cfg.intents))
        .collect();
    let item_intents: Vec<usize> = (0..cfg.num_items)
        .map(|_| rng.random_range(0..cfg.intents))
        .collect();

    let mean_affinity = (cfg.intent_boost + (cfg.intents - 1) as f64) / cfg.intents as f64;
    let mut order: Vec<usize> = (0..cfg.num_items).collect();
    let mut triples = Vec::new();
    for (u, &ui) in user_intents.iter().enumerate() {
        order.shuffle(&mut rng);
        for &j in &order {
            let affinity = if item_intents[j] == ui {
                cfg.intent_boost
            } else {
                1.0
            };
            let scale = affinity / mean_affinity;
            let shared: f64 = rng.random();
            for (k, &p) in cfg.funnel_probs.iter().enumerate() {
                let draw = if rng.random::<f64>() < cfg.funnel_coupling {
                    shared
                } else {
                    rng.random()
                };
                if draw < (p * scale).min(1.0) {
                    triples.push(Interaction {
                        user: u,
                        item: j,
                        behavior: k,
                    });
                }
            }
        }
    }

    let tensor = InteractionTensor::new(
        cfg.num_users,
        cfg.num_items,
        cfg.num_behaviors,
        cfg.num_behaviors - 1,
        triples,
    )?;
    Ok(SynthDataset {
        tensor,
        user_intents,
        item_intents,
    })
}

/// Small dense random tensor for checks: every (user, item, behavior) cell
/// is present with probability `density`. Every user gets at least one
/// target interaction and at least one unseen target item.
pub fn random_tensor(
    num_users: usize,
    num_items: usize,
    num_behaviors: usize,
    density: f64,
    seed: u64,
) -> Result<InteractionTensor> {
    if num_items < 2 || num_behaviors == 0 {
        return Err(Error::Config(
            "random_tensor needs at least two items and one behavior".into(),
        ));
    }
    let target = num_behaviors - 1;
    let mut rng = SeededRng::new(seed, "random-tensor");
    let mut triples = Vec::new();
    for u in 0..num_users {
        let mut has_target = vec![false; num_items];
        for j in 0..num_items {
            for k in 0..num_behaviors {
                if rng.random::<f64>() < density {
                    triples.push(Interaction {
                        user: u,
                        item: j,
                        behavior: k,
                    });
                    if k == target {
                        has_target[j] = true;
                    }
                }
            }
        }
        let count = has_target.iter().filter(|&&x| x).count();
        if count == 0 {
            let j = rng.random_range(0..num_items);
            triples.push(Interaction {
                user: u,
                item: j,
                behavior: target,
            });
        } else if count == num_items {
            let j = rng.random_range(0..num_items);
            triples.retain(|t| !(t.user == u && t.item == j && t.behavior == target));
        }
    }
    InteractionTensor::new(num_users, num_items, num_behaviors, target, triples)
}
