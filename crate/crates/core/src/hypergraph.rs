//! Learnable node–hyperedge incidence and hypergraph message passing.
//!
//! For one behavior and one side, with node embeddings `Z` (n×d) and a
//! hyperedge table `W` (E×d):
//!
//! ```text
//! ℋ  = Z·Wᵀ            (n×E)
//! ℋ̃  = ℋ/√E            (or a row softmax, see IncidenceScaling)
//! Γ  = δ(ℋ̃ᵀ·Z)         (E×d) hyperedge embeddings
//! H  = δ(ℋ̃·Γ)          (n×d) smoothed node embeddings
//! ```
//!
//! The backward helpers return gradients with respect to `ℋ̃` and `Z` so the
//! model can chain them through the incidence into `Z` and `W`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corelin::{leaky, leaky_grad, matmul, matmul_nt, matmul_tn, DenseMatrix, SeededRng};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum IncidenceScaling {
    /// `ℋ̃ = ℋ/√E`; keeps the incidence bilinear in `(Z, W)`.
    #[default]
    InvSqrtEdges,
    /// Row-wise softmax over hyperedges.
    RowSoftmax,
}

#[derive(Clone, Debug)]
pub struct HyperIncidence {
    pub raw: DenseMatrix,
    pub scaled: DenseMatrix,
    pub scaling: IncidenceScaling,
}

pub fn hyper_incidence(
    z: &DenseMatrix,
    w: &DenseMatrix,
    scaling: IncidenceScaling,
) -> Result<HyperIncidence> {
    if z.cols() != w.cols() {
        return Err(Error::Shape {
            op: "hyper_incidence",
            lhs: z.shape(),
            rhs: w.shape(),
        });
    }
    let raw = matmul_nt(z, w)?;
    let scaled = match scaling {
        IncidenceScaling::InvSqrtEdges => raw.scale(1.0 / (w.rows() as f64).sqrt()),
        IncidenceScaling::RowSoftmax => row_softmax(&raw),
    };
    Ok(HyperIncidence {
        raw,
        scaled,
        scaling,
    })
}

fn row_softmax(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl HyperIncidence {
    /// Maps a gradient on `ℋ̃` back to a gradient on `ℋ`.
    pub fn backward_scaling(&self, grad_scaled: &DenseMatrix) -> DenseMatrix {
        match self.scaling {
            IncidenceScaling::InvSqrtEdges => {
                grad_scaled.scale(1.0 / (self.raw.cols() as f64).sqrt())
            }
            IncidenceScaling::RowSoftmax => {
                let mut g = grad_scaled.clone();
                for r in 0..g.rows() {
                    let s = self.scaled.row(r);
                    let inner = crate::corelin::dot(grad_scaled.row(r), s);
                    for (gv, sv) in g.row_mut(r).iter_mut().zip(s) {
                        *gv = sv * (*gv - inner);
                    }
                }
                g
            }
        }
    }
}

/// Hyperedge (`Γ`) and node (`H`) outputs with their pre-activations.
#[derive(Clone, Debug)]
pub struct HyperPass {
    pub gamma_pre: DenseMatrix,
    pub gamma: DenseMatrix,
    pub h_pre: DenseMatrix,
    pub h: DenseMatrix,
}

impl HyperPass {
    /// Sum-pooled hyperedge embeddings: the behavior's graph-level readout.
    pub fn readout(&self) -> Vec<f64> {
        self.gamma.column_sums()
    }
}

/// Node → hyperedge aggregation only: `Γ = δ(ℋ̃ᵀ·Z)`. Returns `(pre, post)`.
pub fn hyperedge_embeddings(
    scaled: &DenseMatrix,
    z: &DenseMatrix,
    slope: f64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let pre = matmul_tn(scaled, z)?;
    let post = pre.map(|v| leaky(v, slope));
    Ok((pre, post))
}

pub fn hyper_propagate(scaled: &DenseMatrix, z: &DenseMatrix, slope: f64) -> Result<HyperPass> {
    let (gamma_pre, gamma) = hyperedge_embeddings(scaled, z, slope)?;
    let h_pre = matmul(scaled, &gamma)?;
    let h = h_pre.map(|v| leaky(v, slope));
    Ok(HyperPass {
        gamma_pre,
        gamma,
        h_pre,
        h,
    })
}

pub struct HyperGrads {
    pub scaled: DenseMatrix,
    pub z: DenseMatrix,
}

/// Reverse pass of [`hyper_propagate`]. `grad_gamma` is any gradient landing
/// directly on `Γ` (e.g. from the readout); it may be `None`.
pub fn hyper_propagate_backward(
    scaled: &DenseMatrix,
    z: &DenseMatrix,
    pass: &HyperPass,
    slope: f64,
    grad_h: &DenseMatrix,
    grad_gamma: Option<&DenseMatrix>,
) -> Result<HyperGrads> {
    let mut g_hpre = grad_h.clone();
    for (g, &p) in g_hpre.as_mut_slice().iter_mut().zip(pass.h_pre.as_slice()) {
        *g *= leaky_grad(p, slope);
    }
    let mut g_scaled = matmul_nt(&g_hpre, &pass.gamma)?;
    let mut g_gamma = matmul_tn(scaled, &g_hpre)?;
    if let Some(extra) = grad_gamma {
        g_gamma.add_assign(extra)?;
    }
    let (gs2, gz) = hyperedge_backward(scaled, z, &pass.gamma_pre, slope, &g_gamma)?;
    g_scaled.add_assign(&gs2)?;
    Ok(HyperGrads {
        scaled: g_scaled,
        z: gz,
    })
}

/// Reverse pass of [`hyperedge_embeddings`]; returns `(∂ℋ̃, ∂Z)`.
pub fn hyperedge_backward(
    scaled: &DenseMatrix,
    z: &DenseMatrix,
    gamma_pre: &DenseMatrix,
    slope: f64,
    grad_gamma: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut g_pre = grad_gamma.clone();
    for (g, &p) in g_pre.as_mut_slice().iter_mut().zip(gamma_pre.as_slice()) {
        *g *= leaky_grad(p, slope);
    }
    let g_scaled = matmul_nt(z, &g_pre)?;
    let g_z = matmul(scaled, &g_pre)?;
    Ok((g_scaled, g_z))
}

/// Row-shuffled copy of an incidence matrix for graph-level negatives.
#[derive(Clone, Debug)]
pub struct CorruptedIncidence {
    pub scaled: DenseMatrix,
    /// Output row `r` is input row `perm[r]`.
    pub perm: Vec<usize>,
}

/// Permutes the node rows of `scaled` uniformly at random. When the rows are
/// not all identical the identity permutation is redrawn.
pub fn corrupt_incidence(scaled: &DenseMatrix, rng: &mut SeededRng) -> Result<CorruptedIncidence> {
    let n = scaled.rows();
    if n < 2 {
        return Err(Error::Corruption(n));
    }
    let distinct = (1..n).any(|r| scaled.row(r) != scaled.row(0));
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if !distinct || perm.iter().enumerate().any(|(i, &p)| i != p) {
            break;
        }
    }
    Ok(CorruptedIncidence {
        scaled: permute_rows(scaled, &perm),
        perm,
    })
}

pub fn permute_rows(m: &DenseMatrix, perm: &[usize]) -> DenseMatrix {
    m.gather_rows(perm)
}

/// Adjoint of [`permute_rows`]: adds `g[r]` into row `perm[r]` of `into`.
pub fn unpermute_rows_into(g: &DenseMatrix, perm: &[usize], into: &mut DenseMatrix) {
    into.scatter_add_rows(perm, g);
}
