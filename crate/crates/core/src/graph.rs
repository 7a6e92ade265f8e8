//! Multiplex user–item graph: one symmetric-normalized bipartite adjacency per
//! behavior, stored in compressed-row form for both directions, and
//! relation-aware message passing over it.

use serde::{Deserialize, Serialize};

use crate::corelin::{counter_uniform, for_each_row, mix64, DenseMatrix};
use crate::data::InteractionTensor;
use crate::error::{Error, Result};

/// Which node set a quantity lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::User, Side::Item];

    pub fn other(self) -> Side {
        match self {
            Side::User => Side::Item,
            Side::Item => Side::User,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::User => 0,
            Side::Item => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }
}

/// One direction of one behavior layer. Row `r` lists the neighbors of
/// destination node `r`; `mirror[e]` is the position of the same edge in the
/// opposite-direction CSR.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub coef: Vec<f64>,
    pub mirror: Vec<usize>,
}

impl Csr {
    pub fn num_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    pub fn edges(&self, row: usize) -> std::ops::Range<usize> {
        self.row_ptr[row]..self.row_ptr[row + 1]
    }
}

#[derive(Clone, Debug)]
pub struct BehaviorAdjacency {
    num_users: usize,
    num_items: usize,
    /// `[side][behavior]`, rows are nodes of `side`.
    csr: [Vec<Csr>; 2],
}

impl BehaviorAdjacency {
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self, side: Side) -> usize {
        match side {
            Side::User => self.num_users,
            Side::Item => self.num_items,
        }
    }

    pub fn num_behaviors(&self) -> usize {
        self.csr[0].len()
    }

    /// Adjacency whose rows are `side` nodes under behavior `k`.
    pub fn csr(&self, side: Side, k: usize) -> &Csr {
        &self.csr[side.index()][k]
    }

    /// Total stored edges over all behaviors (one direction).
    pub fn nnz(&self) -> usize {
        self.csr[0].iter().map(Csr::nnz).sum()
    }

    /// Dense `D^{-1/2} A_k D^{-1/2}` with `side` nodes as rows.
    pub fn dense_normalized(&self, side: Side, k: usize) -> DenseMatrix {
        let c = self.csr(side, k);
        let mut m = DenseMatrix::zeros(self.num_nodes(side), self.num_nodes(side.other()));
        for r in 0..c.num_rows() {
            for e in c.edges(r) {
                m.set(r, c.col[e], c.coef[e]);
            }
        }
        m
    }
}

/// Builds per-behavior bipartite adjacency with coefficient
/// `1/√(deg_k(u)·deg_k(v))` on every edge.
pub fn build_adjacency(train: &InteractionTensor) -> BehaviorAdjacency {
    let (nu, ni, nk) = (train.num_users(), train.num_items(), train.num_behaviors());
    let mut user_csr = Vec::with_capacity(nk);
    let mut item_csr = Vec::with_capacity(nk);
    for k in 0..nk {
        let mut edges: Vec<(usize, usize)> = train
            .triples()
            .iter()
            .filter(|t| t.behavior == k)
            .map(|t| (t.user, t.item))
            .collect();
        edges.sort_unstable();
        let mut deg_u = vec![0usize; nu];
        let mut deg_i = vec![0usize; ni];
        for &(u, i) in &edges {
            deg_u[u] += 1;
            deg_i[i] += 1;
        }
        let coef_of = |u: usize, i: usize| 1.0 / ((deg_u[u] * deg_i[i]) as f64).sqrt();

        // user-major
        let mut u_ptr = vec![0usize; nu + 1];
        for &(u, _) in &edges {
            u_ptr[u + 1] += 1;
        }
        for r in 0..nu {
            u_ptr[r + 1] += u_ptr[r];
        }
        let u_col: Vec<usize> = edges.iter().map(|&(_, i)| i).collect();
        let u_coef: Vec<f64> = edges.iter().map(|&(u, i)| coef_of(u, i)).collect();

        // item-major, remembering each edge's user-major position
        let mut by_item: Vec<(usize, usize, usize)> = edges
            .iter()
            .enumerate()
            .map(|(e, &(u, i))| (i, u, e))
            .collect();
        by_item.sort_unstable();
        let mut i_ptr = vec![0usize; ni + 1];
        for &(i, _, _) in &by_item {
            i_ptr[i + 1] += 1;
        }
        for r in 0..ni {
            i_ptr[r + 1] += i_ptr[r];
        }
        let i_col: Vec<usize> = by_item.iter().map(|&(_, u, _)| u).collect();
        let i_coef: Vec<f64> = by_item.iter().map(|&(i, u, _)| coef_of(u, i)).collect();
        let i_mirror: Vec<usize> = by_item.iter().map(|&(_, _, e)| e).collect();
        let mut u_mirror = vec![0usize; edges.len()];
        for (pos, &e) in i_mirror.iter().enumerate() {
            u_mirror[e] = pos;
        }

        user_csr.push(Csr {
            row_ptr: u_ptr,
            col: u_col,
            coef: u_coef,
            mirror: u_mirror,
        });
        item_csr.push(Csr {
            row_ptr: i_ptr,
            col: i_col,
            coef: i_coef,
            mirror: i_mirror,
        });
    }
    BehaviorAdjacency {
        num_users: nu,
        num_items: ni,
        csr: [user_csr, item_csr],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub keep_prob: f64,
    pub enabled: bool,
}

impl DropoutSpec {
    pub fn off() -> Self {
        Self {
            keep_prob: 1.0,
            enabled: false,
        }
    }

    pub fn new(keep_prob: f64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "keep_prob {keep_prob} outside (0, 1]"
            )));
        }
        Ok(Self {
            keep_prob,
            enabled: true,
        })
    }

    pub fn is_active(&self) -> bool {
        self.enabled && self.keep_prob < 1.0
    }

    /// Per-edge message scales for every behavior of the `side`-rows CSR:
    /// `1/keep_prob` with probability `keep_prob`, else 0. Each edge draws
    /// from a counter-based stream keyed by `(key, behavior, edge)`, so the
    /// result does not depend on evaluation order. `None` when inactive.
    pub fn sample_masks(&self, adj: &BehaviorAdjacency, side: Side, key: u64) -> Option<EdgeMasks> {
        if !self.is_active() {
            return None;
        }
        let scale = 1.0 / self.keep_prob;
        let masks = (0..adj.num_behaviors())
            .map(|k| {
                let kk = mix64(key ^ mix64(k as u64 + 1) ^ ((side.index() as u64) << 40));
                (0..adj.csr(side, k).nnz())
                    .map(|e| {
                        if counter_uniform(kk, e as u64) < self.keep_prob {
                            scale
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Some(EdgeMasks(masks))
    }
}

/// Message scales per behavior, indexed like the corresponding CSR edges.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMasks(pub Vec<Vec<f64>>);

impl EdgeMasks {
    pub fn behavior(&self, k: usize) -> &[f64] {
        &self.0[k]
    }
}

#[derive(Clone, Debug)]
pub struct Propagation {
    pub per_behavior: Vec<DenseMatrix>,
    pub summed: DenseMatrix,
}

/// Aggregates `src` (nodes of the opposite side) into `side` nodes along
/// behavior `k`: `z_r = Σ_e mask_e · coef_e · src[col_e]`.
pub fn propagate_behavior(
    adj: &BehaviorAdjacency,
    side: Side,
    k: usize,
    src: &DenseMatrix,
    mask: Option<&[f64]>,
) -> Result<DenseMatrix> {
    let csr = adj.csr(side, k);
    check_src(adj, side, src)?;
    let mut out = DenseMatrix::zeros(adj.num_nodes(side), src.cols());
    for_each_row(
        &mut out,
        #[inline(always)]
        |r, row| {
            for e in csr.edges(r) {
                let w = match mask {
                    Some(m) => m[e] * csr.coef[e],
                    None => csr.coef[e],
                };
                if w == 0.0 {
                    continue;
                }
                for (o, s) in row.iter_mut().zip(src.row(csr.col[e])) {
                    *o += w * s;
                }
            }
        },
    );
    Ok(out)
}

/// Adjoint of [`propagate_behavior`]: maps a gradient on the `side` output
/// back onto the source (opposite side) nodes.
pub fn propagate_behavior_transpose(
    adj: &BehaviorAdjacency,
    side: Side,
    k: usize,
    grad_out: &DenseMatrix,
    mask: Option<&[f64]>,
) -> DenseMatrix {
    let fwd = adj.csr(side, k);
    let rev = adj.csr(side.other(), k);
    let mut out = DenseMatrix::zeros(adj.num_nodes(side.other()), grad_out.cols());
    for_each_row(
        &mut out,
        #[inline(always)]
        |r, row| {
            for e in rev.edges(r) {
                let fe = rev.mirror[e];
                let w = match mask {
                    Some(m) => m[fe] * fwd.coef[fe],
                    None => fwd.coef[fe],
                };
                if w == 0.0 {
                    continue;
                }
                for (o, g) in row.iter_mut().zip(grad_out.row(rev.col[e])) {
                    *o += w * g;
                }
            }
        },
    );
    out
}

pub fn propagate_with_masks(
    adj: &BehaviorAdjacency,
    side: Side,
    src: &DenseMatrix,
    masks: Option<&EdgeMasks>,
) -> Result<Propagation> {
    if src.cols() == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let mut summed = DenseMatrix::zeros(adj.num_nodes(side), src.cols());
    let mut per_behavior = Vec::with_capacity(adj.num_behaviors());
    for k in 0..adj.num_behaviors() {
        let z = propagate_behavior(adj, side, k, src, masks.map(|m| m.behavior(k)))?;
        summed.add_assign(&z)?;
        per_behavior.push(z);
    }
    Ok(Propagation {
        per_behavior,
        summed,
    })
}

/// Relation-aware message passing into `side` nodes from the opposite side's
/// embeddings `src`, with per-edge dropout drawn under `mask_key`.
/// Returns the per-behavior outputs, their sum, and the masks used.
pub fn relation_propagate(
    adj: &BehaviorAdjacency,
    side: Side,
    src: &DenseMatrix,
    drop: &DropoutSpec,
    mask_key: u64,
) -> Result<(Propagation, Option<EdgeMasks>)> {
    let masks = drop.sample_masks(adj, side, mask_key);
    let p = propagate_with_masks(adj, side, src, masks.as_ref())?;
    Ok((p, masks))
}

fn check_src(adj: &BehaviorAdjacency, side: Side, src: &DenseMatrix) -> Result<()> {
    let want = adj.num_nodes(side.other());
    if src.rows() != want {
        return Err(Error::Shape {
            op: "relation_propagate",
            lhs: (want, src.cols()),
            rhs: src.shape(),
        });
    }
    Ok(())
}
