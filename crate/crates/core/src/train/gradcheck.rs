//! Central finite differences against the analytic gradient.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corelin::SeededRng;
use crate::data::{random_tensor, sample_pairs, InteractionTensor, PairBatch};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, BehaviorAdjacency};
use crate::model::{forward, Corruption, ForwardState, ModelParams};

use super::objective::{exclude_kinks, kink_signature, loss_and_grad, table_active, total_loss};
use super::TrainConfig;

/// Default denominator floor for the relative error. Entries whose
/// gradient is below it are judged by absolute error `< tol · floor`.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Probe at most this many entries per table (seeded subsample).
    pub max_entries_per_table: Option<usize>,
    pub seed: u64,
    pub rel_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_table: None,
            seed: 0,
            rel_floor: REL_ERROR_FLOOR,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub checked: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    /// Keyed by table name.
    pub tables: BTreeMap<String, GroupError>,
    /// Keyed by parameter family (embeddings, hyperedges, ...).
    pub families: BTreeMap<String, GroupError>,
    pub max_rel: f64,
    pub checked: usize,
    pub excluded_pairs: usize,
    /// Entries skipped because a probe crossed an activation or hinge kink.
    pub excluded_entries: usize,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel < tol && self.checked > 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn fold(acc: &mut GroupError, rel: f64, abs: f64) {
    acc.mean_rel = (acc.mean_rel * acc.checked as f64 + rel) / (acc.checked + 1) as f64;
    acc.checked += 1;
    acc.max_rel = acc.max_rel.max(rel);
    acc.max_abs = acc.max_abs.max(abs);
}

/// Compares the analytic gradient of the full objective with central
/// differences. Dropout is forced off; corruption permutations are drawn
/// once and replayed for every probe. Pairs near the hinge kink are
/// dropped first, and entries whose probes land on a different side of any
/// kink than the base point are skipped, since central differences are
/// meaningless across them. Inactive tables (disabled by ablations) are
/// skipped too.
pub fn grad_check(
    params: &ModelParams,
    adj: &BehaviorAdjacency,
    batch: &PairBatch,
    cfg: &TrainConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let nk = params.dims().num_behaviors;
    let mut fopts = cfg.forward_options(nk, true);
    fopts.dropout = crate::graph::DropoutSpec::off();
    let mut corr_rng = SeededRng::new(opts.seed, "gradcheck-corruption");
    let state = forward(params, adj, &fopts, 0, Corruption::Sample(&mut corr_rng))?;
    let (batch, excluded_pairs) = exclude_kinks(&state, batch, 10.0 * opts.step)?;
    let (loss, grads) = loss_and_grad(&state, params, adj, &batch, cfg)?;

    let base_sig = kink_signature(&state, params, &batch, cfg)?;
    let probe = |p: &ModelParams, reference: &ForwardState| -> Result<(f64, bool)> {
        let s = forward(p, adj, &fopts, 0, Corruption::Replay(reference))?;
        let l = total_loss(&s, p, adj, &batch, cfg)?.total;
        if !l.is_finite() {
            return Err(Error::Overflow(
                "loss during finite-difference probe".into(),
            ));
        }
        Ok((l, kink_signature(&s, p, &batch, cfg)? == base_sig))
    };

    let mut pick_rng = SeededRng::new(opts.seed, "gradcheck-entries");
    let mut tables = BTreeMap::new();
    let mut families: BTreeMap<String, GroupError> = BTreeMap::new();
    let mut work = params.clone();
    let mut excluded_entries = 0;
    for (ti, group) in params.groups().iter().enumerate() {
        if !table_active(*group, cfg, nk) {
            continue;
        }
        let len = params.tables()[ti].as_slice().len();
        let entries: Vec<usize> = match opts.max_entries_per_table {
            Some(cap) if cap < len => {
                let mut v = sample(&mut pick_rng, len, cap).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut acc = GroupError::default();
        for idx in entries {
            let orig = params.tables()[ti].as_slice()[idx];
            work.tables_mut()[ti].as_mut_slice()[idx] = orig + opts.step;
            let (lp, smooth_p) = probe(&work, &state)?;
            work.tables_mut()[ti].as_mut_slice()[idx] = orig - opts.step;
            let (lm, smooth_m) = probe(&work, &state)?;
            work.tables_mut()[ti].as_mut_slice()[idx] = orig;
            if !(smooth_p && smooth_m) {
                excluded_entries += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let analytic = grads.tables[ti].as_slice()[idx];
            let rel = relative_error(analytic, numeric, opts.rel_floor);
            let abs = (analytic - numeric).abs();
            fold(&mut acc, rel, abs);
            fold(
                families.entry(group.family().to_string()).or_default(),
                rel,
                abs,
            );
        }
        tables.insert(group.name(), acc);
    }
    let max_rel = tables.values().fold(0.0f64, |m, g| m.max(g.max_rel));
    let checked = tables.values().map(|g| g.checked).sum();
    Ok(GradCheckReport {
        step: opts.step,
        tables,
        families,
        max_rel,
        checked,
        excluded_pairs,
        excluded_entries,
        loss: loss.total,
    })
}

/// Settings for the small check instance: every loss term switched on with
/// weights large enough that the contrastive gradients are not swamped.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        hyperedges: 4,
        layers: 2,
        pairs_per_user: 2,
        lambda1: 1e-2,
        lambda2: 0.5,
        lambda3: 0.5,
        full_denominator: true,
        ..Default::default()
    }
}

pub struct TinyInstance {
    pub train: InteractionTensor,
    pub adj: BehaviorAdjacency,
    pub params: ModelParams,
    pub batch: PairBatch,
}

/// 6 users, 5 items, 3 behaviors, about 40% of cells filled.
pub fn tiny_instance(cfg: &TrainConfig, seed: u64) -> Result<TinyInstance> {
    let train = random_tensor(6, 5, 3, 0.4, seed)?;
    let adj = build_adjacency(&train);
    let dims = cfg.dims(6, 5, 3, 2);
    let params = ModelParams::init(&dims, &mut SeededRng::new(seed, "init"))?;
    let batch = sample_pairs(&train, cfg.pairs_per_user, &mut SeededRng::new(seed, "pairs"))?;
    Ok(TinyInstance {
        train,
        adj,
        params,
        batch,
    })
}

pub fn tiny_grad_check(
    cfg: &TrainConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let t = tiny_instance(cfg, seed)?;
    grad_check(&t.params, &t.adj, &t.batch, cfg, opts)
}
