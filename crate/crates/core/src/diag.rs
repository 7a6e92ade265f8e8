//! Score decompositions and operation counting.
//!
//! A linear GNN score is a double sum over base-embedding inner products
//! weighted by path coefficients (α), which vanish outside the L-hop
//! neighborhood. With an identity activation the hypergraph score has the
//! same shape, but its coefficients (β) come from the learned incidence and
//! reach every node.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corelin::{dot, DenseMatrix, SeededRng};
use crate::data::{sample_pairs, Interaction, InteractionTensor};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, propagate_behavior, BehaviorAdjacency, Side};
use crate::model::{forward, Corruption, ModelDims, ModelParams, ParamGroup};
use crate::train::{loss_and_grad, sgd_step, EpochStats, TrainConfig};

/// Operation counts accumulated during a forward (and optionally backward) pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    /// Edge messages sent by graph propagation.
    pub messages: u64,
    pub graph_macs: u64,
    pub hyper_macs: u64,
    pub contrastive_macs: u64,
}

/// Coefficients at or below this magnitude count as zero for support.
pub const SUPPORT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub side: Side,
    pub node: usize,
    pub value: f64,
    /// Hop distance from the anchor in the union interaction graph.
    pub distance: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub kind: String,
    pub user: usize,
    pub item: usize,
    pub hops: usize,
    pub direct_score: f64,
    pub reconstructed_score: f64,
    pub max_abs_error: f64,
    pub user_coefficients: Vec<Coefficient>,
    pub item_coefficients: Vec<Coefficient>,
    /// Nonzero coefficients on either side.
    pub nonzero: usize,
    /// Nodes farther than `hops` from their anchor (or unreachable).
    pub beyond_hops: usize,
    pub beyond_hops_nonzero: usize,
    /// Largest |Δβ| for the user anchor after one gradient step.
    pub beta_change: Option<f64>,
}

impl DecompositionReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_abs_error <= tol
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} decomposition, user {} item {}", self.kind, self.user, self.item);
        let _ = writeln!(s, "  direct        {:.12e}", self.direct_score);
        let _ = writeln!(s, "  reconstructed {:.12e}", self.reconstructed_score);
        let _ = writeln!(s, "  abs error     {:.3e}", self.max_abs_error);
        let _ = writeln!(
            s,
            "  nonzero {}  beyond {} hops: {} nodes, {} nonzero",
            self.nonzero, self.hops, self.beyond_hops, self.beyond_hops_nonzero
        );
        if let Some(b) = self.beta_change {
            let _ = writeln!(s, "  max |Δβ| after one step {b:.3e}");
        }
        let _ = writeln!(s, "  {:<6} {:>6} {:>9} {:>14}", "side", "node", "distance", "coef");
        for c in self.user_coefficients.iter().chain(&self.item_coefficients) {
            let d = c.distance.map_or("-".to_string(), |d| d.to_string());
            let _ = writeln!(s, "  {:<6} {:>6} {:>9} {:>14.6e}", c.side.name(), c.node, d, c.value);
        }
        s
    }
}

/// Hop distances from `(side, node)` over the union of all behaviors.
pub fn hop_distances(adj: &BehaviorAdjacency, side: Side, node: usize) -> [Vec<Option<usize>>; 2] {
    let mut dist = [vec![None; adj.num_users()], vec![None; adj.num_items()]];
    dist[side.index()][node] = Some(0);
    let mut queue = VecDeque::from([(side, node)]);
    while let Some((s, n)) = queue.pop_front() {
        let d = dist[s.index()][n].expect("queued nodes have a distance");
        for k in 0..adj.num_behaviors() {
            let csr = adj.csr(s, k);
            for e in csr.edges(n) {
                let (os, on) = (s.other(), csr.col[e]);
                if dist[os.index()][on].is_none() {
                    dist[os.index()][on] = Some(d + 1);
                    queue.push_back((os, on));
                }
            }
        }
    }
    dist
}

/// Sums of path-coefficient products: entry `(s, n)` of the result is the
/// total weight of all length-`hops` walks from the anchor ending at `n`.
fn path_coefficients(adj: &BehaviorAdjacency, side: Side, node: usize, hops: usize) -> (Side, Vec<f64>) {
    let mut cur_side = side;
    let mut cur = vec![0.0; adj.num_nodes(side)];
    cur[node] = 1.0;
    for _ in 0..hops {
        let next_side = cur_side.other();
        let mut next = vec![0.0; adj.num_nodes(next_side)];
        for (n, &w) in cur.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for k in 0..adj.num_behaviors() {
                let csr = adj.csr(cur_side, k);
                for e in csr.edges(n) {
                    next[csr.col[e]] += w * csr.coef[e];
                }
            }
        }
        cur = next;
        cur_side = next_side;
    }
    (cur_side, cur)
}

fn coefficients(side: Side, values: &[f64], dist: &[Option<usize>]) -> Vec<Coefficient> {
    values
        .iter()
        .enumerate()
        .map(|(n, &value)| Coefficient {
            side,
            node: n,
            value,
            distance: dist[n],
        })
        .collect()
}

fn support_counts(coefs: &[&[Coefficient]], hops: usize) -> (usize, usize, usize) {
    let (mut nonzero, mut beyond, mut beyond_nz) = (0, 0, 0);
    for c in coefs.iter().flat_map(|c| c.iter()) {
        let nz = c.value.abs() > SUPPORT_EPS;
        nonzero += nz as usize;
        if c.distance.is_none_or(|d| d > hops) {
            beyond += 1;
            beyond_nz += nz as usize;
        }
    }
    (nonzero, beyond, beyond_nz)
}

fn table_for(side: Side, users: &DenseMatrix, items: &DenseMatrix) -> DenseMatrix {
    match side {
        Side::User => users.clone(),
        Side::Item => items.clone(),
    }
}

/// Linear `hops`-layer GNN score `⟨z_i, z_j⟩` with `z = Pᴸe`, next to its
/// reconstruction `Σ α_{i'} α_{j'} ⟨e_{i'}, e_{j'}⟩`.
pub fn gnn_decompose(
    adj: &BehaviorAdjacency,
    users: &DenseMatrix,
    items: &DenseMatrix,
    hops: usize,
    user: usize,
    item: usize,
) -> Result<DecompositionReport> {
    if user >= adj.num_users() {
        return Err(Error::Range {
            what: "user",
            index: user,
            limit: adj.num_users(),
        });
    }
    if item >= adj.num_items() {
        return Err(Error::Range {
            what: "item",
            index: item,
            limit: adj.num_items(),
        });
    }
    let (mut zu, mut zv) = (users.clone(), items.clone());
    for _ in 0..hops {
        let mut nu = DenseMatrix::zeros(zu.rows(), zu.cols());
        let mut nv = DenseMatrix::zeros(zv.rows(), zv.cols());
        for k in 0..adj.num_behaviors() {
            nu.add_assign(&propagate_behavior(adj, Side::User, k, &zv, None)?)?;
            nv.add_assign(&propagate_behavior(adj, Side::Item, k, &zu, None)?)?;
        }
        zu = nu;
        zv = nv;
    }
    let direct = dot(zu.row(user), zv.row(item));

    let (su, au) = path_coefficients(adj, Side::User, user, hops);
    let (sv, av) = path_coefficients(adj, Side::Item, item, hops);
    let (eu, ev) = (table_for(su, users, items), table_for(sv, users, items));
    let mut recon = 0.0;
    for (a, &wa) in au.iter().enumerate() {
        if wa == 0.0 {
            continue;
        }
        for (b, &wb) in av.iter().enumerate() {
            if wb != 0.0 {
                recon += wa * wb * dot(eu.row(a), ev.row(b));
            }
        }
    }
    let du = hop_distances(adj, Side::User, user);
    let dv = hop_distances(adj, Side::Item, item);
    let uc = coefficients(su, &au, &du[su.index()]);
    let ic = coefficients(sv, &av, &dv[sv.index()]);
    let (nonzero, beyond, beyond_nz) = support_counts(&[&uc, &ic], hops);
    Ok(DecompositionReport {
        kind: "gnn".into(),
        user,
        item,
        hops,
        direct_score: direct,
        reconstructed_score: recon,
        max_abs_error: (direct - recon).abs(),
        user_coefficients: uc,
        item_coefficients: ic,
        nonzero,
        beyond_hops: beyond,
        beyond_hops_nonzero: beyond_nz,
        beta_change: None,
    })
}

/// Which hypergraph to decompose: behavior `behavior` in layer `layer`
/// (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperTarget {
    pub layer: usize,
    pub behavior: usize,
}

fn require_identity(cfg: &TrainConfig) -> Result<()> {
    if cfg.slope != 1.0 {
        return Err(Error::Mode(format!(
            "decomposition needs the identity activation (slope 1), got slope {}",
            cfg.slope
        )));
    }
    if cfg.no_intents {
        return Err(Error::Mode("decomposition needs the hypergraph channel".into()));
    }
    Ok(())
}

/// `β_{i'} = ⟨ℋ̃_i, ℋ̃_{i'}⟩` for every node on `side`.
fn betas(incidence: &DenseMatrix, anchor: usize) -> Vec<f64> {
    (0..incidence.rows())
        .map(|r| dot(incidence.row(anchor), incidence.row(r)))
        .collect()
}

struct HyperParts {
    betas: [Vec<f64>; 2],
    z: [DenseMatrix; 2],
    direct: f64,
}

fn hyper_parts(
    params: &ModelParams,
    adj: &BehaviorAdjacency,
    cfg: &TrainConfig,
    target: HyperTarget,
    user: usize,
    item: usize,
) -> Result<HyperParts> {
    require_identity(cfg)?;
    let dims = params.dims();
    if target.layer >= dims.layers {
        return Err(Error::Range {
            what: "layer",
            index: target.layer,
            limit: dims.layers,
        });
    }
    if target.behavior >= dims.num_behaviors {
        return Err(Error::Range {
            what: "behavior",
            index: target.behavior,
            limit: dims.num_behaviors,
        });
    }
    if user >= dims.num_users || item >= dims.num_items {
        return Err(Error::Range {
            what: if user >= dims.num_users { "user" } else { "item" },
            index: if user >= dims.num_users { user } else { item },
            limit: if user >= dims.num_users { dims.num_users } else { dims.num_items },
        });
    }
    let opts = cfg.forward_options(dims.num_behaviors, false);
    let state = forward(params, adj, &opts, 0, Corruption::Off)?;
    let layer = &state.layers[target.layer];
    let part = |side: Side, anchor: usize| -> (Vec<f64>, DenseMatrix, Vec<f64>) {
        let sl = layer.side(side);
        let hb = &sl.hyper.as_ref().expect("hypergraph channel is on").per_behavior[target.behavior];
        (
            betas(&hb.incidence.scaled, anchor),
            sl.z[target.behavior].clone(),
            hb.pass.h.row(anchor).to_vec(),
        )
    };
    let (bu, zu, hu) = part(Side::User, user);
    let (bv, zv, hv) = part(Side::Item, item);
    Ok(HyperParts {
        betas: [bu, bv],
        z: [zu, zv],
        direct: dot(&hu, &hv),
    })
}

/// Identity-activation hypergraph score `⟨H_i, H_j⟩` for one behavior and
/// layer, next to `Σ β_{i'} β_{j'} ⟨z_{i'}, z_{j'}⟩` where `z` is the
/// hypergraph input. Coefficient distances are measured in the training
/// graph against `cfg.layers` hops.
pub fn hyper_decompose(
    params: &ModelParams,
    adj: &BehaviorAdjacency,
    cfg: &TrainConfig,
    target: HyperTarget,
    user: usize,
    item: usize,
) -> Result<DecompositionReport> {
    let p = hyper_parts(params, adj, cfg, target, user, item)?;
    let [bu, bv] = &p.betas;
    let mut recon = 0.0;
    for (a, &wa) in bu.iter().enumerate() {
        for (b, &wb) in bv.iter().enumerate() {
            recon += wa * wb * dot(p.z[0].row(a), p.z[1].row(b));
        }
    }
    let du = hop_distances(adj, Side::User, user);
    let dv = hop_distances(adj, Side::Item, item);
    let uc = coefficients(Side::User, bu, &du[0]);
    let ic = coefficients(Side::Item, bv, &dv[1]);
    let hops = cfg.layers;
    let (nonzero, beyond, beyond_nz) = support_counts(&[&uc, &ic], hops);
    Ok(DecompositionReport {
        kind: "hypergraph".into(),
        user,
        item,
        hops,
        direct_score: p.direct,
        reconstructed_score: recon,
        max_abs_error: (p.direct - recon).abs(),
        user_coefficients: uc,
        item_coefficients: ic,
        nonzero,
        beyond_hops: beyond,
        beyond_hops_nonzero: beyond_nz,
        beta_change: None,
    })
}

/// Largest change of the user anchor's β after one SGD step of size `lr`
/// on the full objective over a seeded pair batch. Nonzero means the
/// coefficients are learned rather than fixed by the graph.
pub fn beta_adaptivity(
    params: &ModelParams,
    train: &InteractionTensor,
    cfg: &TrainConfig,
    target: HyperTarget,
    user: usize,
    lr: f64,
) -> Result<f64> {
    let adj = build_adjacency(train);
    let before = hyper_parts(params, &adj, cfg, target, user, 0)?.betas[0].clone();
    let mut fopts = cfg.forward_options(params.dims().num_behaviors, true);
    fopts.dropout = crate::graph::DropoutSpec::off();
    let mut rng = SeededRng::new(cfg.seed, "diag-step");
    let batch = sample_pairs(train, cfg.pairs_per_user, &mut rng)?;
    let state = forward(params, &adj, &fopts, 0, Corruption::Sample(&mut rng))?;
    let (_, grads) = loss_and_grad(&state, params, &adj, &batch, cfg)?;
    let mut stepped = params.clone();
    sgd_step(&mut stepped, &grads, lr)?;
    let after = &hyper_parts(&stepped, &adj, cfg, target, user, 0)?.betas[0];
    Ok(before.iter().zip(after).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
}

/// Runs [`hyper_decompose`] and attaches [`beta_adaptivity`].
pub fn hyper_decompose_with_step(
    params: &ModelParams,
    train: &InteractionTensor,
    cfg: &TrainConfig,
    target: HyperTarget,
    user: usize,
    item: usize,
    lr: f64,
) -> Result<DecompositionReport> {
    let adj = build_adjacency(train);
    let mut r = hyper_decompose(params, &adj, cfg, target, user, item)?;
    r.beta_change = Some(beta_adaptivity(params, train, cfg, target, user, lr)?);
    Ok(r)
}

/// Two disconnected communities: users 0..4 with items 0..3, users 4..8
/// with items 3..6. Nodes of the other block are unreachable from any
/// anchor, so any nonzero coefficient there is beyond every hop limit.
pub fn two_block_tensor(seed: u64) -> Result<InteractionTensor> {
    let mut rng = SeededRng::new(seed, "blocks");
    let mut t = Vec::new();
    for (users, items) in [(0..4, 0..3), (4..8, 3..6)] {
        for u in users.clone() {
            for i in items.clone() {
                for b in 0..3 {
                    if rng.random_bool(0.5) || (b == 2 && i == items.start + u % 3) {
                        t.push(Interaction {
                            user: u,
                            item: i,
                            behavior: b,
                        });
                    }
                }
            }
        }
    }
    InteractionTensor::new(8, 6, 3, 2, t)
}

/// Identity-activation settings used by the decomposition suite.
pub fn identity_config() -> TrainConfig {
    TrainConfig {
        dim: 4,
        hyperedges: 3,
        layers: 2,
        slope: 1.0,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSuite {
    pub reports: Vec<DecompositionReport>,
    pub max_gnn_error: f64,
    pub max_hyper_error: f64,
    /// Some hypergraph report had a nonzero coefficient beyond the hop limit.
    pub global_support_seen: bool,
    /// Every GNN report had zero coefficients beyond the hop limit.
    pub gnn_support_local: bool,
}

impl DecompositionSuite {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_gnn_error <= tol
            && self.max_hyper_error <= tol
            && self.global_support_seen
            && self.gnn_support_local
    }
}

/// Decomposes `instances` seeded two-block instances, each with one GNN and
/// one hypergraph report (layer alternating, target behavior, anchor user
/// and item drawn from the seed). The hypergraph reports carry the β change
/// after one SGD step of size `lr`.
pub fn decomposition_suite(
    instances: usize,
    base_seed: u64,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<DecompositionSuite> {
    require_identity(cfg)?;
    let mut reports = Vec::with_capacity(2 * instances);
    for n in 0..instances as u64 {
        let seed = base_seed.wrapping_add(n);
        let t = two_block_tensor(seed)?;
        let adj = build_adjacency(&t);
        let dims = cfg.dims(t.num_users(), t.num_items(), t.num_behaviors(), t.target_behavior());
        let params = ModelParams::init(&dims, &mut SeededRng::new(seed, "diag-init"))?;
        let mut pick = SeededRng::new(seed, "diag-anchor");
        let user = pick.random_range(0..t.num_users());
        let item = pick.random_range(0..t.num_items());
        reports.push(gnn_decompose(
            &adj,
            params.table(ParamGroup::BaseEmbedding(Side::User)),
            params.table(ParamGroup::BaseEmbedding(Side::Item)),
            cfg.layers.max(1),
            user,
            item,
        )?);
        let target = HyperTarget {
            layer: n as usize % cfg.layers.max(1),
            behavior: t.target_behavior(),
        };
        reports.push(hyper_decompose_with_step(&params, &t, cfg, target, user, item, lr)?);
    }
    let max_of = |kind: &str| {
        reports
            .iter()
            .filter(|r| r.kind == kind)
            .fold(0.0f64, |m, r| m.max(r.max_abs_error))
    };
    Ok(DecompositionSuite {
        max_gnn_error: max_of("gnn"),
        max_hyper_error: max_of("hypergraph"),
        global_support_seen: reports
            .iter()
            .any(|r| r.kind == "hypergraph" && r.beyond_hops_nonzero > 0),
        gnn_support_local: reports
            .iter()
            .filter(|r| r.kind == "gnn")
            .all(|r| r.beyond_hops_nonzero == 0),
        reports,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCost {
    pub name: String,
    /// Multiply-accumulates per training step, as counted.
    pub measured: f64,
    /// The asymptotic term evaluated at this run's sizes.
    pub formula: String,
    pub formula_value: f64,
    /// `measured / formula_value`.
    pub factor: f64,
    pub within_2x: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub steps: usize,
    pub dims: ModelDims,
    pub interactions: usize,
    pub mean_batch_users: f64,
    pub mean_batch_items: f64,
    pub components: Vec<ComponentCost>,
}

impl ComplexityReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>14} {:>14} {:>8}  formula",
            "component", "measured", "formula", "factor"
        );
        for c in &self.components {
            let _ = writeln!(
                s,
                "{:<12} {:>14.0} {:>14.0} {:>8.3}  {}",
                c.name, c.measured, c.formula_value, c.factor, c.formula
            );
        }
        s
    }

    pub fn component(&self, name: &str) -> Option<&ComponentCost> {
        self.components.iter().find(|c| c.name == name)
    }
}

fn cost(name: &str, measured: f64, formula: &str, value: f64) -> ComponentCost {
    let factor = if value > 0.0 {
        measured / value
    } else if measured == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    ComponentCost {
        name: name.into(),
        measured,
        formula: formula.into(),
        formula_value: value,
        factor,
        within_2x: (0.5..=2.0).contains(&factor),
    }
}

/// Per-step counts from an epoch next to the textbook cost terms:
/// graph `|𝒳|·d·L`, hypergraph `(I+J)·E·d` per behavior and layer, and
/// contrast `B_u·B_v·d` per layer.
pub fn complexity_counters(stats: &EpochStats, dims: &ModelDims, interactions: usize) -> ComplexityReport {
    let steps = stats.batches.max(1) as f64;
    let (d, e, l, k) = (
        dims.dim as f64,
        dims.hyperedges as f64,
        dims.layers as f64,
        dims.num_behaviors as f64,
    );
    let bu = stats.batch_users as f64 / steps;
    let bv = stats.batch_items as f64 / steps;
    let nodes = (dims.num_users + dims.num_items) as f64;
    let c = &stats.counters;
    ComplexityReport {
        steps: stats.batches,
        dims: dims.clone(),
        interactions,
        mean_batch_users: bu,
        mean_batch_items: bv,
        components: vec![
            cost("graph", c.graph_macs as f64 / steps, "|X|*d*L", interactions as f64 * d * l),
            cost("hypergraph", c.hyper_macs as f64 / steps, "(I+J)*E*d*K*L", nodes * e * d * k * l),
            cost("contrastive", c.contrastive_macs as f64 / steps, "Bu*Bv*d*L", bu * bv * d * l),
        ],
    }
}
