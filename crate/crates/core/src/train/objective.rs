//! Joint objective and its reverse pass.
//!
//! ```text
//! ℒ = Σ max(0, 1 − (x̂_pos − x̂_neg)) + λ₁‖Θ‖² + λ₂·ℒ_node + λ₃·ℒ_graph
//! ```
//!
//! Contrastive terms are averaged over layers. The gradient walks the
//! layers backwards, threading `∂ℒ/∂Λ⁽ˡ⁾` through the residual, the
//! hypergraph (including the learned incidence) and the graph adjoint.

use serde::{Deserialize, Serialize};

use crate::corelin::{dot, matmul, matmul_tn, DenseMatrix};
use crate::data::PairBatch;
use crate::error::{Error, Result};
use crate::graph::{propagate_behavior_transpose, BehaviorAdjacency, Side};
use crate::hypergraph::{hyper_propagate_backward, hyperedge_backward, unpermute_rows_into};
use crate::model::{ForwardState, GradientSet, ModelParams, ParamGroup};
use crate::ssl::{graph_cl_loss, meta_transform_backward, meta_transform_cached, node_cl_loss};

use super::TrainConfig;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub hinge: f64,
    /// `λ₁‖Θ‖²` (already weighted).
    pub regularization: f64,
    /// Unweighted node-level contrastive loss.
    pub node_cl: f64,
    /// Unweighted graph-level contrastive loss.
    pub graph_cl: f64,
    pub total: f64,
    /// Pairs with a positive hinge margin.
    pub active_pairs: usize,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.hinge += other.hinge;
        self.regularization += other.regularization;
        self.node_cl += other.node_cl;
        self.graph_cl += other.graph_cl;
        self.total += other.total;
        self.active_pairs += other.active_pairs;
    }

    pub fn is_finite(&self) -> bool {
        [
            self.hinge,
            self.regularization,
            self.node_cl,
            self.graph_cl,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn hinge_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.len() != neg.len() {
        return Err(Error::Shape {
            op: "hinge_loss",
            lhs: (pos.len(), 1),
            rhs: (neg.len(), 1),
        });
    }
    Ok(pos
        .iter()
        .zip(neg)
        .map(|(p, n)| (1.0 - (p - n)).max(0.0))
        .sum())
}

/// Whether table `g` takes part in the objective under `cfg`. Inactive
/// tables get no weight decay and no gradient.
pub fn table_active(g: ParamGroup, cfg: &TrainConfig, num_behaviors: usize) -> bool {
    match g {
        ParamGroup::BaseEmbedding(_) => true,
        ParamGroup::Hyperedges { .. } => !cfg.no_intents,
        ParamGroup::MetaWeight { .. } | ParamGroup::MetaBias { .. } => {
            cfg.meta_active(num_behaviors)
        }
    }
}

pub fn total_loss(
    state: &ForwardState,
    params: &ModelParams,
    adj: &BehaviorAdjacency,
    batch: &PairBatch,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    Ok(objective(state, params, adj, batch, cfg, false)?.0)
}

/// Exact gradient of [`total_loss`] for the forward pass in `state`.
pub fn backward(
    state: &ForwardState,
    params: &ModelParams,
    adj: &BehaviorAdjacency,
    batch: &PairBatch,
    cfg: &TrainConfig,
) -> Result<GradientSet> {
    Ok(loss_and_grad(state, params, adj, batch, cfg)?.1)
}

pub fn loss_and_grad(
    state: &ForwardState,
    params: &ModelParams,
    adj: &BehaviorAdjacency,
    batch: &PairBatch,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, GradientSet)> {
    let (loss, grads) = objective(state, params, adj, batch, cfg, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

type PerLayer<T> = Vec<[Vec<Option<T>>; 2]>;

fn per_layer<T>(layers: usize, nk: usize) -> PerLayer<T> {
    (0..layers)
        .map(|_| {
            [
                (0..nk).map(|_| None).collect(),
                (0..nk).map(|_| None).collect(),
            ]
        })
        .collect()
}

fn add_into(slot: &mut Option<DenseMatrix>, g: DenseMatrix) -> Result<()> {
    match slot {
        Some(s) => s.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn broadcast_rows(v: &[f64], rows: usize, scale: f64) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, v.len());
    for r in 0..rows {
        for (o, &x) in m.row_mut(r).iter_mut().zip(v) {
            *o = scale * x;
        }
    }
    m
}

fn objective(
    state: &ForwardState,
    params: &ModelParams,
    adj: &BehaviorAdjacency,
    batch: &PairBatch,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<GradientSet>)> {
    if state.params_generation != params.generation() {
        return Err(Error::StaleCache);
    }
    let dims = params.dims();
    let nk = dims.num_behaviors;
    let nl = state.layers.len();
    let target = dims.target_behavior;
    let slope = state.options.slope;
    let mut out = LossBreakdown::default();
    let mut grads = want_grad.then(|| GradientSet::zeros_like(params));

    // pairwise hinge on the multi-order embeddings
    let (pu, pv) = (state.psi(Side::User), state.psi(Side::Item));
    let mut g_psi = [
        DenseMatrix::zeros(pu.rows(), pu.cols()),
        DenseMatrix::zeros(pv.rows(), pv.cols()),
    ];
    for e in &batch.entries {
        let margin =
            1.0 - (state.predict(e.user, e.positive)? - state.predict(e.user, e.negative)?);
        if margin > 0.0 {
            out.hinge += margin;
            out.active_pairs += 1;
            if want_grad {
                let (u, p, n) = (pu.row(e.user), pv.row(e.positive), pv.row(e.negative));
                let gu: Vec<f64> = p.iter().zip(n).map(|(a, b)| b - a).collect();
                for (g, x) in g_psi[0].row_mut(e.user).iter_mut().zip(&gu) {
                    *g += x;
                }
                for (g, x) in g_psi[1].row_mut(e.positive).iter_mut().zip(u) {
                    *g -= x;
                }
                for (g, x) in g_psi[1].row_mut(e.negative).iter_mut().zip(u) {
                    *g += x;
                }
            }
        }
    }

    // weight decay over the active tables
    for (idx, (g, t)) in params.groups().iter().zip(params.tables()).enumerate() {
        if table_active(*g, cfg, nk) {
            out.regularization += cfg.lambda1 * t.frobenius_sq();
            if let Some(gs) = grads.as_mut() {
                gs.tables[idx].axpy(2.0 * cfg.lambda1, t)?;
            }
        }
    }

    // gradients landing on per-behavior views and hyperedge embeddings
    let mut g_view: PerLayer<DenseMatrix> = per_layer(nl, nk);
    let mut g_gamma: PerLayer<DenseMatrix> = per_layer(nl, nk);
    let mut g_gamma_corr: Vec<[Option<DenseMatrix>; 2]> = (0..nl).map(|_| [None, None]).collect();
    let contrast = cfg.contrast();
    let layer_weight = if nl > 0 { 1.0 / nl as f64 } else { 0.0 };

    if cfg.node_cl_active(nk) && !batch.is_empty() {
        let users = batch.users();
        let items = batch.items();
        for side in Side::BOTH {
            if !contrast.node_sides.contains(side) {
                continue;
            }
            let rows = match side {
                Side::User => &users,
                Side::Item => &items,
            };
            let all: Vec<usize>;
            let negatives = if contrast.full_denominator {
                all = (0..dims.num_nodes(side)).collect();
                &all
            } else {
                rows
            };
            for (l, layer) in state.layers.iter().enumerate() {
                let sl = layer.side(side);
                let base: Vec<&DenseMatrix> = match &sl.hyper {
                    Some(h) => h.per_behavior.iter().map(|b| &b.pass.h).collect(),
                    None => sl.z.iter().collect(),
                };
                let mut views = Vec::with_capacity(nk);
                let mut caches = Vec::with_capacity(nk);
                for (k, b) in base.iter().enumerate() {
                    if k != target && cfg.meta_active(nk) {
                        let (v, c) = meta_transform_cached(
                            b,
                            params.meta_weight(l, side, k),
                            params.meta_bias(l, side, k),
                            slope,
                            NORM_EPS,
                        )?;
                        views.push(v);
                        caches.push(Some(c));
                    } else {
                        views.push((*b).clone());
                        caches.push(None);
                    }
                }
                let (loss, gv) = node_cl_loss(&views, target, rows, negatives, &contrast)?;
                out.node_cl += layer_weight * loss;
                if let Some(gs) = grads.as_mut() {
                    let w = cfg.lambda2 * layer_weight;
                    for (k, g) in gv.into_iter().enumerate() {
                        let g = g.scale(w);
                        match &caches[k] {
                            Some(c) => {
                                let wm = params.meta_weight(l, side, k);
                                let mg =
                                    meta_transform_backward(base[k], wm, c, slope, NORM_EPS, &g)?;
                                gs.get_mut(
                                    params,
                                    ParamGroup::MetaWeight {
                                        layer: l,
                                        side,
                                        behavior: k,
                                    },
                                )
                                .add_assign(&mg.w)?;
                                gs.get_mut(
                                    params,
                                    ParamGroup::MetaBias {
                                        layer: l,
                                        side,
                                        behavior: k,
                                    },
                                )
                                .add_assign(&mg.b)?;
                                add_into(&mut g_view[l][side.index()][k], mg.h)?;
                            }
                            None => add_into(&mut g_view[l][side.index()][k], g)?,
                        }
                    }
                }
            }
        }
    }

    if cfg.graph_cl_active(nk) && !batch.is_empty() {
        for side in Side::BOTH {
            if !contrast.graph_sides.contains(side) {
                continue;
            }
            for (l, layer) in state.layers.iter().enumerate() {
                let h = layer.side(side).hyper.as_ref().ok_or_else(|| {
                    Error::Config("graph-level contrast needs the hypergraph channel".into())
                })?;
                let corrupted = h.per_behavior[target].corrupted.as_ref().ok_or_else(|| {
                    Error::Config(
                        "graph-level contrast needs a forward pass with corruption".into(),
                    )
                })?;
                let readouts = h.readouts();
                let (loss, g) = graph_cl_loss(&readouts, &corrupted.readout(), target)?;
                out.graph_cl += layer_weight * loss;
                if want_grad {
                    let w = cfg.lambda3 * layer_weight;
                    for (k, gr) in g.readouts.iter().enumerate() {
                        let rows = h.per_behavior[k].pass.gamma.rows();
                        add_into(
                            &mut g_gamma[l][side.index()][k],
                            broadcast_rows(gr, rows, w),
                        )?;
                    }
                    let rows = corrupted.gamma.rows();
                    g_gamma_corr[l][side.index()] = Some(broadcast_rows(&g.corrupted, rows, w));
                }
            }
        }
    }

    out.total =
        out.hinge + out.regularization + cfg.lambda2 * out.node_cl + cfg.lambda3 * out.graph_cl;
    let Some(mut gs) = grads else {
        return Ok((out, None));
    };

    // reverse through the layers; g_lam holds ∂ℒ/∂Λ⁽ˡ⁾
    let mut g_lam = g_psi.clone();
    for l in (0..nl).rev() {
        let layer = &state.layers[l];
        let mut g_prev = g_psi.clone();
        for side in Side::BOTH {
            let s = side.index();
            let sl = layer.side(side);
            g_prev[s].add_assign(&g_lam[s])?;
            for k in 0..nk {
                let mut gz = g_lam[s].clone();
                match &sl.hyper {
                    Some(h) => {
                        let hb = &h.per_behavior[k];
                        let mut gh = g_lam[s].clone();
                        if let Some(extra) = &g_view[l][s][k] {
                            gh.add_assign(extra)?;
                        }
                        let hg = hyper_propagate_backward(
                            &hb.incidence.scaled,
                            &sl.z[k],
                            &hb.pass,
                            slope,
                            &gh,
                            g_gamma[l][s][k].as_ref(),
                        )?;
                        let mut g_scaled = hg.scaled;
                        gz.add_assign(&hg.z)?;
                        if let (Some(c), Some(gc)) = (&hb.corrupted, &g_gamma_corr[l][s]) {
                            let (gsc, gz2) = hyperedge_backward(
                                &c.incidence.scaled,
                                &sl.z[k],
                                &c.gamma_pre,
                                slope,
                                gc,
                            )?;
                            unpermute_rows_into(&gsc, &c.incidence.perm, &mut g_scaled);
                            gz.add_assign(&gz2)?;
                        }
                        let g_raw = hb.incidence.backward_scaling(&g_scaled);
                        gz.add_assign(&matmul(&g_raw, params.hyperedges(side, k))?)?;
                        gs.get_mut(params, ParamGroup::Hyperedges { side, behavior: k })
                            .add_assign(&matmul_tn(&g_raw, &sl.z[k])?)?;
                    }
                    None => {
                        if let Some(extra) = &g_view[l][s][k] {
                            gz.add_assign(extra)?;
                        }
                    }
                }
                let mask = sl.masks.as_ref().map(|m| m.behavior(k));
                let g_src = propagate_behavior_transpose(adj, side, k, &gz, mask);
                g_prev[side.other().index()].add_assign(&g_src)?;
            }
        }
        g_lam = g_prev;
    }
    for side in Side::BOTH {
        gs.get_mut(params, ParamGroup::BaseEmbedding(side))
            .add_assign(&g_lam[side.index()])?;
    }
    if !gs.is_finite() {
        return Err(Error::Overflow("gradient".into()));
    }
    Ok((out, Some(gs)))
}

/// Drops pairs whose hinge margin lies within `width` of the kink.
pub fn exclude_kinks(
    state: &ForwardState,
    batch: &PairBatch,
    width: f64,
) -> Result<(PairBatch, usize)> {
    let mut kept = Vec::with_capacity(batch.len());
    for e in &batch.entries {
        let d = dot(
            state.psi(Side::User).row(e.user),
            state.psi(Side::Item).row(e.positive),
        ) - dot(
            state.psi(Side::User).row(e.user),
            state.psi(Side::Item).row(e.negative),
        );
        if (1.0 - d).abs() >= width {
            kept.push(*e);
        }
    }
    let dropped = batch.len() - kept.len();
    Ok((
        PairBatch {
            entries: kept,
            pairs_per_user: batch.pairs_per_user,
        },
        dropped,
    ))
}

/// Which side of every non-differentiable point the objective sits on:
/// the sign of each leaky-ReLU pre-activation (hypergraph and meta gate)
/// and of each hinge margin. Two parameter settings with equal signatures
/// lie in the same smooth piece.
pub fn kink_signature(
    state: &ForwardState,
    params: &ModelParams,
    batch: &PairBatch,
    cfg: &TrainConfig,
) -> Result<Vec<bool>> {
    let mut sig = Vec::new();
    let mut push = |m: &DenseMatrix| sig.extend(m.as_slice().iter().map(|&x| x >= 0.0));
    let nk = params.dims().num_behaviors;
    let target = params.dims().target_behavior;
    let contrast = cfg.contrast();
    let leaky_kinks = cfg.slope != 1.0;
    for (l, layer) in state.layers.iter().enumerate() {
        for side in Side::BOTH {
            let sl = layer.side(side);
            if let (Some(h), true) = (&sl.hyper, leaky_kinks) {
                for b in &h.per_behavior {
                    push(&b.pass.gamma_pre);
                    push(&b.pass.h_pre);
                    if let Some(c) = &b.corrupted {
                        push(&c.gamma_pre);
                    }
                }
            }
            if leaky_kinks && cfg.meta_active(nk) && contrast.node_sides.contains(side) {
                for k in (0..nk).filter(|&k| k != target) {
                    let base = match &sl.hyper {
                        Some(h) => &h.per_behavior[k].pass.h,
                        None => &sl.z[k],
                    };
                    let (_, c) = meta_transform_cached(
                        base,
                        params.meta_weight(l, side, k),
                        params.meta_bias(l, side, k),
                        cfg.slope,
                        NORM_EPS,
                    )?;
                    push(&c.pre);
                }
            }
        }
    }
    for e in &batch.entries {
        let u = state.psi(Side::User).row(e.user);
        let d = dot(u, state.psi(Side::Item).row(e.positive))
            - dot(u, state.psi(Side::Item).row(e.negative));
        sig.push(1.0 - d > 0.0);
    }
    Ok(sig)
}
