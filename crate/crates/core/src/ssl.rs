//! Behavior-adaptive meta transform and the two contrastive objectives.
//!
//! Node level: for every node, the target-behavior view is the anchor and
//! each auxiliary view of the same node is a positive. Negatives are the
//! target views of other nodes.
//!
//! Graph level: the readout of each auxiliary behavior should sit closer to
//! the clean target readout than to the readout of a row-shuffled target
//! incidence.

use serde::{Deserialize, Serialize};

use crate::corelin::{
    axpy_slice, dot, l2_normalize_rows, l2_normalize_rows_backward, leaky, leaky_grad, matmul,
    matmul_nt, matmul_tn, wide, DenseMatrix,
};
use crate::error::{Error, Result};
use crate::graph::Side;

pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SideSet {
    User,
    Item,
    Both,
}

impl SideSet {
    pub fn contains(self, side: Side) -> bool {
        matches!(
            (self, side),
            (SideSet::Both, _) | (SideSet::User, Side::User) | (SideSet::Item, Side::Item)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub node_sides: SideSet,
    /// `User` or `Both`.
    pub graph_sides: SideSet,
    /// Add the positive term to the InfoNCE denominator.
    pub include_positive: bool,
    /// Negatives over every node instead of only the batch.
    pub full_denominator: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            node_sides: SideSet::Both,
            graph_sides: SideSet::User,
            include_positive: true,
            full_denominator: false,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.graph_sides == SideSet::Item {
            return Err(Error::Config(
                "graph-level contrast needs the user side".into(),
            ));
        }
        Ok(())
    }
}

/// Intermediates of [`meta_transform_cached`] needed for the reverse pass.
#[derive(Clone, Debug)]
pub struct MetaCache {
    pub normed: DenseMatrix,
    pub pre: DenseMatrix,
    pub gate: DenseMatrix,
}

/// `H̃ = H ∘ δ(Norm(H)·W + b)`
pub fn meta_transform(
    h: &DenseMatrix,
    w: &DenseMatrix,
    b: &DenseMatrix,
    slope: f64,
    eps: f64,
) -> Result<DenseMatrix> {
    Ok(meta_transform_cached(h, w, b, slope, eps)?.0)
}

pub fn meta_transform_cached(
    h: &DenseMatrix,
    w: &DenseMatrix,
    b: &DenseMatrix,
    slope: f64,
    eps: f64,
) -> Result<(DenseMatrix, MetaCache)> {
    let d = h.cols();
    if w.shape() != (d, d) || b.shape() != (1, d) {
        return Err(Error::Shape {
            op: "meta_transform",
            lhs: h.shape(),
            rhs: w.shape(),
        });
    }
    let normed = l2_normalize_rows(h, eps);
    let mut pre = matmul(&normed, w)?;
    for r in 0..pre.rows() {
        for (p, &bv) in pre.row_mut(r).iter_mut().zip(b.row(0)) {
            *p += bv;
        }
    }
    let gate = pre.map(|v| leaky(v, slope));
    let out = h.hadamard(&gate)?;
    Ok((out, MetaCache { normed, pre, gate }))
}

pub struct MetaGrads {
    pub h: DenseMatrix,
    pub w: DenseMatrix,
    pub b: DenseMatrix,
}

pub fn meta_transform_backward(
    h: &DenseMatrix,
    w: &DenseMatrix,
    cache: &MetaCache,
    slope: f64,
    eps: f64,
    grad_out: &DenseMatrix,
) -> Result<MetaGrads> {
    let mut gh = grad_out.hadamard(&cache.gate)?;
    let mut g_pre = grad_out.hadamard(h)?;
    for (g, &p) in g_pre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
        *g *= leaky_grad(p, slope);
    }
    let gw = matmul_tn(&cache.normed, &g_pre)?;
    let gb = DenseMatrix::from_vec(1, h.cols(), g_pre.column_sums())?;
    let g_normed = matmul_nt(&g_pre, w)?;
    gh.add_assign(&l2_normalize_rows_backward(h, &g_normed, eps))?;
    Ok(MetaGrads {
        h: gh,
        w: gw,
        b: gb,
    })
}

/// Node-level InfoNCE for one side and one layer.
///
/// `views[k]` holds behavior `k`'s (adapted) embeddings for every node.
/// Anchors are the nodes in `rows`; negatives are target views of the nodes
/// in `negatives`. Returns the loss and one gradient per view.
pub fn node_cl_loss(
    views: &[DenseMatrix],
    target: usize,
    rows: &[usize],
    negatives: &[usize],
    cfg: &ContrastConfig,
) -> Result<(f64, Vec<DenseMatrix>)> {
    cfg.validate()?;
    let nk = views.len();
    if nk < 2 {
        return Err(Error::Config(
            "node-level contrast needs at least two behaviors".into(),
        ));
    }
    if target >= nk {
        return Err(Error::Range {
            what: "target behavior",
            index: target,
            limit: nk,
        });
    }
    let shape = views[0].shape();
    if let Some(v) = views.iter().find(|v| v.shape() != shape) {
        return Err(Error::Shape {
            op: "node_cl_loss",
            lhs: shape,
            rhs: v.shape(),
        });
    }
    let tau = cfg.temperature;
    let normed: Vec<DenseMatrix> = views
        .iter()
        .map(|v| l2_normalize_rows(v, COSINE_EPS))
        .collect();
    let mut g_normed: Vec<DenseMatrix> = views
        .iter()
        .map(|v| DenseMatrix::zeros(v.rows(), v.cols()))
        .collect();
    let t = &normed[target];
    let mut loss = 0.0;
    wide(
        #[inline(always)]
        || {
            let mut neg_exp = vec![0.0; negatives.len()];
            let mut g_anchor = vec![0.0; shape.1];
            for &i in rows {
                let anchor = t.row(i);
                let mut neg_sum = 0.0;
                for (e, &j) in neg_exp.iter_mut().zip(negatives) {
                    *e = (dot(t.row(j), anchor) / tau).exp();
                    neg_sum += *e;
                }
                g_anchor.fill(0.0);
                // d(log den)/d s = weight / τ, accumulated over every auxiliary term
                let mut neg_scale = 0.0;
                for k in (0..nk).filter(|&k| k != target) {
                    let pos = normed[k].row(i);
                    let s_pos = dot(anchor, pos) / tau;
                    let pos_exp = s_pos.exp();
                    let den = neg_sum + if cfg.include_positive { pos_exp } else { 0.0 };
                    loss += den.ln() - s_pos;
                    let c_pos = (if cfg.include_positive {
                        pos_exp / den
                    } else {
                        0.0
                    } - 1.0)
                        / tau;
                    axpy_slice(&mut g_anchor, c_pos, pos);
                    axpy_slice(g_normed[k].row_mut(i), c_pos, anchor);
                    neg_scale += 1.0 / (den * tau);
                }
                for (&e, &j) in neg_exp.iter().zip(negatives) {
                    let w = e * neg_scale;
                    if w == 0.0 {
                        continue;
                    }
                    axpy_slice(&mut g_anchor, w, t.row(j));
                    axpy_slice(g_normed[target].row_mut(j), w, anchor);
                }
                axpy_slice(g_normed[target].row_mut(i), 1.0, &g_anchor);
            }
        },
    );
    let grads = views
        .iter()
        .zip(&g_normed)
        .map(|(v, g)| l2_normalize_rows_backward(v, g, COSINE_EPS))
        .collect();
    Ok((loss, grads))
}

/// Cosine similarity with the same eps guard as the node-level loss.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt().max(COSINE_EPS);
    let nb = dot(b, b).sqrt().max(COSINE_EPS);
    dot(a, b) / (na * nb)
}

/// `(∂cos/∂a, ∂cos/∂b)`
fn cosine_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let am = DenseMatrix::from_vec(1, a.len(), a.to_vec()).expect("row");
    let bm = DenseMatrix::from_vec(1, b.len(), b.to_vec()).expect("row");
    let an = l2_normalize_rows(&am, COSINE_EPS);
    let bn = l2_normalize_rows(&bm, COSINE_EPS);
    let ga = l2_normalize_rows_backward(&am, &bn, COSINE_EPS).into_vec();
    let gb = l2_normalize_rows_backward(&bm, &an, COSINE_EPS).into_vec();
    (ga, gb)
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct GraphClGrads {
    /// One per behavior.
    pub readouts: Vec<Vec<f64>>,
    pub corrupted: Vec<f64>,
}

/// `Σ_{k≠k′} softplus(s(Γ̄′_{k′}, Γ̄_k) − s(Γ̄_{k′}, Γ̄_k))`
pub fn graph_cl_loss(
    readouts: &[Vec<f64>],
    corrupted: &[f64],
    target: usize,
) -> Result<(f64, GraphClGrads)> {
    let nk = readouts.len();
    if nk < 2 {
        return Err(Error::Config(
            "graph-level contrast needs at least two behaviors".into(),
        ));
    }
    if target >= nk {
        return Err(Error::Range {
            what: "target behavior",
            index: target,
            limit: nk,
        });
    }
    let d = corrupted.len();
    if readouts.iter().any(|r| r.len() != d) {
        return Err(Error::Shape {
            op: "graph_cl_loss",
            lhs: (nk, readouts[0].len()),
            rhs: (1, d),
        });
    }
    let mut g_read = vec![vec![0.0; d]; nk];
    let mut g_corr = vec![0.0; d];
    let mut loss = 0.0;
    for k in (0..nk).filter(|&k| k != target) {
        let s_pos = cosine(&readouts[target], &readouts[k]);
        let s_neg = cosine(corrupted, &readouts[k]);
        loss += softplus(s_neg - s_pos);
        let w = sigmoid(s_neg - s_pos);
        let (gp_t, gp_k) = cosine_grad(&readouts[target], &readouts[k]);
        let (gn_c, gn_k) = cosine_grad(corrupted, &readouts[k]);
        for c in 0..d {
            g_read[target][c] -= w * gp_t[c];
            g_read[k][c] += w * (gn_k[c] - gp_k[c]);
            g_corr[c] += w * gn_c[c];
        }
    }
    Ok((
        loss,
        GraphClGrads {
            readouts: g_read,
            corrupted: g_corr,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corelin::SeededRng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
        DenseMatrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn cos_loop(a: &[f64], b: &[f64]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for c in 0..a.len() {
            ab += a[c] * b[c];
            aa += a[c] * a[c];
            bb += b[c] * b[c];
        }
        ab / (aa.sqrt() * bb.sqrt())
    }

    /// Straight transcription of the InfoNCE sum with the denominator over
    /// every node.
    fn node_loss_loop(views: &[DenseMatrix], t: usize, tau: f64, include_positive: bool) -> f64 {
        let n = views[0].rows();
        let mut total = 0.0;
        for i in 0..n {
            for k in 0..views.len() {
                if k == t {
                    continue;
                }
                let num = (cos_loop(views[t].row(i), views[k].row(i)) / tau).exp();
                let mut den = 0.0;
                for j in 0..n {
                    den += (cos_loop(views[t].row(j), views[t].row(i)) / tau).exp();
                }
                if include_positive {
                    den += num;
                }
                total += -(num / den).ln();
            }
        }
        total
    }

    #[test]
    fn meta_identity_gate() {
        let mut rng = SeededRng::new(1, "ssl");
        let h = random_matrix(4, 3, &mut rng);
        let w = DenseMatrix::zeros(3, 3);
        let b = DenseMatrix::filled(1, 3, 1.0);
        for slope in [0.0, 0.5, 1.0] {
            assert_eq!(meta_transform(&h, &w, &b, slope, 1e-12).unwrap(), h);
        }
    }

    #[test]
    fn meta_of_zero_is_zero() {
        let mut rng = SeededRng::new(2, "ssl");
        let w = random_matrix(3, 3, &mut rng);
        let b = random_matrix(1, 3, &mut rng);
        let out = meta_transform(&DenseMatrix::zeros(2, 3), &w, &b, 0.5, 1e-12).unwrap();
        assert_eq!(out, DenseMatrix::zeros(2, 3));
    }

    #[test]
    fn meta_matches_composed_loops() {
        let mut rng = SeededRng::new(3, "ssl");
        let h = random_matrix(5, 4, &mut rng);
        let w = random_matrix(4, 4, &mut rng);
        let b = random_matrix(1, 4, &mut rng);
        let out = meta_transform(&h, &w, &b, 0.3, 1e-12).unwrap();
        for r in 0..5 {
            let norm: f64 = h.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..4 {
                let mut a = b.get(0, c);
                for m in 0..4 {
                    a += h.get(r, m) / norm * w.get(m, c);
                }
                let gate = if a >= 0.0 { a } else { 0.3 * a };
                assert!((out.get(r, c) - h.get(r, c) * gate).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn meta_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(4, "ssl");
        let h = random_matrix(3, 4, &mut rng);
        let w = random_matrix(4, 4, &mut rng);
        let b = random_matrix(1, 4, &mut rng);
        let probe = random_matrix(3, 4, &mut rng);
        let f = |h: &DenseMatrix, w: &DenseMatrix, b: &DenseMatrix| {
            let o = meta_transform(h, w, b, 0.5, 1e-12).unwrap();
            o.as_slice()
                .iter()
                .zip(probe.as_slice())
                .map(|(a, p)| a * p)
                .sum::<f64>()
        };
        let (_, cache) = meta_transform_cached(&h, &w, &b, 0.5, 1e-12).unwrap();
        let g = meta_transform_backward(&h, &w, &cache, 0.5, 1e-12, &probe).unwrap();
        let step = 1e-6;
        for (which, analytic) in [(0, &g.h), (1, &g.w), (2, &g.b)] {
            let base = [&h, &w, &b][which];
            for idx in 0..base.as_slice().len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus.as_mut_slice()[idx] += step;
                minus.as_mut_slice()[idx] -= step;
                let eval = |m: &DenseMatrix| match which {
                    0 => f(m, &w, &b),
                    1 => f(&h, m, &b),
                    _ => f(&h, &w, m),
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = analytic.as_slice()[idx];
                assert!(
                    (fd - a).abs() < 1e-6 * (1.0 + a.abs()),
                    "{which}/{idx}: {fd} vs {a}"
                );
            }
        }
    }

    fn identical_views() -> Vec<DenseMatrix> {
        let v = DenseMatrix::from_rows(&[vec![0.3, -0.2, 0.5], vec![0.3, -0.2, 0.5]]);
        vec![v.clone(), v]
    }

    #[test]
    fn node_loss_closed_form_with_positive() {
        let cfg = ContrastConfig::default();
        let (l, _) = node_cl_loss(&identical_views(), 1, &[0, 1], &[0, 1], &cfg).unwrap();
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-10, "{l}");
    }

    #[test]
    fn node_loss_closed_form_strict() {
        let cfg = ContrastConfig {
            include_positive: false,
            ..Default::default()
        };
        let (l, _) = node_cl_loss(&identical_views(), 1, &[0, 1], &[0, 1], &cfg).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-10, "{l}");
    }

    #[test]
    fn node_loss_matches_loop_reference() {
        let mut rng = SeededRng::new(5, "ssl");
        let views: Vec<DenseMatrix> = (0..3).map(|_| random_matrix(4, 5, &mut rng)).collect();
        let all = [0, 1, 2, 3];
        for include_positive in [true, false] {
            let cfg = ContrastConfig {
                temperature: 0.7,
                include_positive,
                ..Default::default()
            };
            let (l, _) = node_cl_loss(&views, 2, &all, &all, &cfg).unwrap();
            let want = node_loss_loop(&views, 2, 0.7, include_positive);
            assert!((l - want).abs() < 1e-10, "{l} vs {want}");
        }
    }

    #[test]
    fn node_loss_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(6, "ssl");
        let views: Vec<DenseMatrix> = (0..3).map(|_| random_matrix(5, 4, &mut rng)).collect();
        let rows = [0, 2, 3];
        let cfg = ContrastConfig {
            temperature: 0.4,
            ..Default::default()
        };
        let (_, grads) = node_cl_loss(&views, 1, &rows, &rows, &cfg).unwrap();
        let step = 1e-6;
        for k in 0..3 {
            for idx in 0..views[k].as_slice().len() {
                let mut plus = views.clone();
                let mut minus = views.clone();
                plus[k].as_mut_slice()[idx] += step;
                minus[k].as_mut_slice()[idx] -= step;
                let lp = node_cl_loss(&plus, 1, &rows, &rows, &cfg).unwrap().0;
                let lm = node_cl_loss(&minus, 1, &rows, &rows, &cfg).unwrap().0;
                let fd = (lp - lm) / (2.0 * step);
                let a = grads[k].as_slice()[idx];
                assert!(
                    (fd - a).abs() < 1e-6 * (1.0 + a.abs()),
                    "k{k} idx{idx}: {fd} vs {a}"
                );
            }
        }
    }

    #[test]
    fn bad_temperature_rejected() {
        let cfg = ContrastConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            node_cl_loss(&identical_views(), 1, &[0], &[0], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn graph_loss_closed_forms() {
        let mut rng = SeededRng::new(7, "ssl");
        let r: Vec<Vec<f64>> = (0..4)
            .map(|_| random_matrix(1, 5, &mut rng).into_vec())
            .collect();
        let (l, _) = graph_cl_loss(&r, &r[3].clone(), 3).unwrap();
        assert!((l - 3.0 * 2f64.ln()).abs() < 1e-10);

        // s_pos = 1, s_neg = -1
        let r = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        let (l, _) = graph_cl_loss(&r, &[-1.0, 0.0], 1).unwrap();
        assert!((l - softplus(-2.0)).abs() < 1e-12);
        assert!((l - 0.126_928_011_042_972_6).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_zero_readout_is_finite() {
        let r = vec![vec![0.0; 3], vec![1.0, 2.0, 3.0]];
        let (l, g) = graph_cl_loss(&r, &[0.0; 3], 1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(g.readouts.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn graph_loss_matches_loop_reference() {
        let mut rng = SeededRng::new(8, "ssl");
        let r: Vec<Vec<f64>> = (0..4)
            .map(|_| random_matrix(1, 6, &mut rng).into_vec())
            .collect();
        let c = random_matrix(1, 6, &mut rng).into_vec();
        let (l, _) = graph_cl_loss(&r, &c, 0).unwrap();
        let mut want = 0.0;
        for k in 1..4 {
            let pos = cos_loop(&r[0], &r[k]).exp();
            let neg = cos_loop(&c, &r[k]).exp();
            want += -(pos / (pos + neg)).ln();
        }
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
    }

    #[test]
    fn graph_loss_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(9, "ssl");
        let r: Vec<Vec<f64>> = (0..3)
            .map(|_| random_matrix(1, 4, &mut rng).into_vec())
            .collect();
        let c = random_matrix(1, 4, &mut rng).into_vec();
        let (_, g) = graph_cl_loss(&r, &c, 2).unwrap();
        let step = 1e-6;
        for k in 0..=3 {
            for idx in 0..4 {
                let (mut rp, mut rm, mut cp, mut cm) = (r.clone(), r.clone(), c.clone(), c.clone());
                if k < 3 {
                    rp[k][idx] += step;
                    rm[k][idx] -= step;
                } else {
                    cp[idx] += step;
                    cm[idx] -= step;
                }
                let fd = (graph_cl_loss(&rp, &cp, 2).unwrap().0
                    - graph_cl_loss(&rm, &cm, 2).unwrap().0)
                    / (2.0 * step);
                let a = if k < 3 {
                    g.readouts[k][idx]
                } else {
                    g.corrupted[idx]
                };
                assert!((fd - a).abs() < 1e-7, "{k}/{idx}: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn graph_loss_decreases_as_target_moves_toward_auxiliary() {
        let aux = vec![1.0, 0.0];
        let corrupted = vec![0.0, 1.0];
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let theta = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 10.0);
            let target = vec![theta.cos(), theta.sin()];
            let (l, _) = graph_cl_loss(&[aux.clone(), target], &corrupted, 1).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    proptest! {
        #[test]
        fn node_loss_is_nonnegative_and_permutation_invariant(seed in 0u64..500, n in 2usize..6) {
            let mut rng = SeededRng::new(seed, "ssl-prop");
            let views: Vec<DenseMatrix> = (0..3).map(|_| random_matrix(n, 3, &mut rng)).collect();
            let all: Vec<usize> = (0..n).collect();
            let cfg = ContrastConfig::default();
            let (l, _) = node_cl_loss(&views, 2, &all, &all, &cfg).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());

            let perm: Vec<usize> = (0..n).rev().collect();
            let permuted: Vec<DenseMatrix> = views.iter().map(|v| v.gather_rows(&perm)).collect();
            let (lp, _) = node_cl_loss(&permuted, 2, &all, &all, &cfg).unwrap();
            prop_assert!((l - lp).abs() < 1e-10);
        }

        #[test]
        fn cosine_is_bounded(a in prop::collection::vec(-1e6f64..1e6, 4), b in prop::collection::vec(-1e6f64..1e6, 4)) {
            let s = cosine(&a, &b);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
    }
}
