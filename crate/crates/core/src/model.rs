//! Trainable parameters and the residual multi-order forward pass.
//!
//! Each layer runs relation-aware propagation over the multiplex graph and
//! then hypergraph propagation on every per-behavior output:
//!
//! ```text
//! Z̄⁽ˡ⁾ = Σ_k Z_k⁽ˡ⁾,   Z_k⁽ˡ⁾ = Â_k Λ_other⁽ˡ⁻¹⁾
//! H̄⁽ˡ⁾ = Σ_k H_k⁽ˡ⁾,   H_k⁽ˡ⁾ = hypergraph(Z_k⁽ˡ⁾, W_k)
//! Λ⁽ˡ⁾ = Z̄⁽ˡ⁾ + H̄⁽ˡ⁾ + Λ⁽ˡ⁻¹⁾,  Λ⁽⁰⁾ = base embeddings
//! Ψ    = Σ_{l=0..L} Λ⁽ˡ⁾
//! ```
//!
//! Users and items are updated symmetrically.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corelin::{dot, mix64, DenseMatrix, SeededRng};
use crate::diag::OpCounters;
use crate::error::{Error, Result};
use crate::graph::{propagate_with_masks, BehaviorAdjacency, DropoutSpec, EdgeMasks, Side};
use crate::hypergraph::{
    corrupt_incidence, hyper_incidence, hyper_propagate, hyperedge_embeddings, CorruptedIncidence,
    HyperIncidence, HyperPass, IncidenceScaling,
};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub target_behavior: usize,
    pub dim: usize,
    pub hyperedges: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim", self.dim),
            ("hyperedges", self.hyperedges),
            ("behaviors", self.num_behaviors),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.target_behavior >= self.num_behaviors {
            return Err(Error::Range {
                what: "target behavior",
                index: self.target_behavior,
                limit: self.num_behaviors,
            });
        }
        Ok(())
    }

    pub fn num_nodes(&self, side: Side) -> usize {
        match side {
            Side::User => self.num_users,
            Side::Item => self.num_items,
        }
    }

    /// Auxiliary behaviors in ascending order.
    pub fn auxiliary(&self) -> Vec<usize> {
        (0..self.num_behaviors)
            .filter(|&k| k != self.target_behavior)
            .collect()
    }

    fn aux_slot(&self, k: usize) -> usize {
        debug_assert_ne!(k, self.target_behavior);
        if k < self.target_behavior {
            k
        } else {
            k - 1
        }
    }
}

/// Names one parameter table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    BaseEmbedding(Side),
    Hyperedges {
        side: Side,
        behavior: usize,
    },
    /// `layer` is 0-based (the first propagation layer is 0).
    MetaWeight {
        layer: usize,
        side: Side,
        behavior: usize,
    },
    MetaBias {
        layer: usize,
        side: Side,
        behavior: usize,
    },
}

impl ParamGroup {
    pub fn name(&self) -> String {
        match *self {
            ParamGroup::BaseEmbedding(s) => format!("{}_embedding", s.name()),
            ParamGroup::Hyperedges { side, behavior } => {
                format!("{}_hyperedges_b{behavior}", side.name())
            }
            ParamGroup::MetaWeight {
                layer,
                side,
                behavior,
            } => {
                format!("{}_meta_weight_l{}_b{behavior}", side.name(), layer + 1)
            }
            ParamGroup::MetaBias {
                layer,
                side,
                behavior,
            } => {
                format!("{}_meta_bias_l{}_b{behavior}", side.name(), layer + 1)
            }
        }
    }

    /// Coarse family used for gradient-check reporting.
    pub fn family(&self) -> &'static str {
        match self {
            ParamGroup::BaseEmbedding(_) => "embeddings",
            ParamGroup::Hyperedges { .. } => "hyperedges",
            ParamGroup::MetaWeight { .. } => "meta_weights",
            ParamGroup::MetaBias { .. } => "meta_biases",
        }
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Table layout shared by parameters and gradients.
fn layout(dims: &ModelDims) -> Vec<(ParamGroup, (usize, usize))> {
    let d = dims.dim;
    let mut out = vec![
        (ParamGroup::BaseEmbedding(Side::User), (dims.num_users, d)),
        (ParamGroup::BaseEmbedding(Side::Item), (dims.num_items, d)),
    ];
    for side in Side::BOTH {
        for behavior in 0..dims.num_behaviors {
            out.push((
                ParamGroup::Hyperedges { side, behavior },
                (dims.hyperedges, d),
            ));
        }
    }
    for layer in 0..dims.layers {
        for side in Side::BOTH {
            for behavior in dims.auxiliary() {
                out.push((
                    ParamGroup::MetaWeight {
                        layer,
                        side,
                        behavior,
                    },
                    (d, d),
                ));
                out.push((
                    ParamGroup::MetaBias {
                        layer,
                        side,
                        behavior,
                    },
                    (1, d),
                ));
            }
        }
    }
    out
}

fn table_index(dims: &ModelDims, g: ParamGroup) -> usize {
    let nk = dims.num_behaviors;
    let naux = nk - 1;
    match g {
        ParamGroup::BaseEmbedding(s) => s.index(),
        ParamGroup::Hyperedges { side, behavior } => 2 + side.index() * nk + behavior,
        ParamGroup::MetaWeight {
            layer,
            side,
            behavior,
        } => 2 + 2 * nk + ((layer * 2 + side.index()) * naux + dims.aux_slot(behavior)) * 2,
        ParamGroup::MetaBias {
            layer,
            side,
            behavior,
        } => 2 + 2 * nk + ((layer * 2 + side.index()) * naux + dims.aux_slot(behavior)) * 2 + 1,
    }
}

/// Every trainable table: base embeddings, per-behavior hyperedge tables and
/// per-(layer, side, auxiliary behavior) meta-network weights and biases.
///
/// Mutation goes through [`ModelParams::tables_mut`], which stamps a new
/// generation so forward caches can detect staleness.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    groups: Vec<ParamGroup>,
    tables: Vec<DenseMatrix>,
    generation: u64,
}

impl ModelParams {
    pub fn zeros(dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        let lay = layout(dims);
        Ok(Self {
            dims: dims.clone(),
            groups: lay.iter().map(|(g, _)| *g).collect(),
            tables: lay
                .iter()
                .map(|(_, (r, c))| DenseMatrix::zeros(*r, *c))
                .collect(),
            generation: next_generation(),
        })
    }

    /// Uniform in `[-1/√d, 1/√d]` for every table.
    pub fn init(dims: &ModelDims, rng: &mut SeededRng) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let bound = 1.0 / (dims.dim as f64).sqrt();
        for t in p.tables.iter_mut() {
            for v in t.as_mut_slice() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(p)
    }

    pub fn from_tables(dims: &ModelDims, tables: Vec<DenseMatrix>) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        if tables.len() != p.tables.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tables, got {}",
                p.tables.len(),
                tables.len()
            )));
        }
        for (slot, t) in p.tables.iter().zip(&tables) {
            if slot.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "ModelParams::from_tables",
                    lhs: slot.shape(),
                    rhs: t.shape(),
                });
            }
        }
        p.tables = tables;
        Ok(p)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn tables(&self) -> &[DenseMatrix] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [DenseMatrix] {
        self.generation = next_generation();
        &mut self.tables
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn index_of(&self, g: ParamGroup) -> usize {
        table_index(&self.dims, g)
    }

    pub fn table(&self, g: ParamGroup) -> &DenseMatrix {
        &self.tables[self.index_of(g)]
    }

    pub fn table_mut(&mut self, g: ParamGroup) -> &mut DenseMatrix {
        let i = self.index_of(g);
        &mut self.tables_mut()[i]
    }

    pub fn base(&self, side: Side) -> &DenseMatrix {
        &self.tables[side.index()]
    }

    pub fn hyperedges(&self, side: Side, behavior: usize) -> &DenseMatrix {
        self.table(ParamGroup::Hyperedges { side, behavior })
    }

    pub fn meta_weight(&self, layer: usize, side: Side, behavior: usize) -> &DenseMatrix {
        self.table(ParamGroup::MetaWeight {
            layer,
            side,
            behavior,
        })
    }

    pub fn meta_bias(&self, layer: usize, side: Side, behavior: usize) -> &DenseMatrix {
        self.table(ParamGroup::MetaBias {
            layer,
            side,
            behavior,
        })
    }

    /// `‖Θ‖²_F` over every table.
    pub fn frobenius_sq(&self) -> f64 {
        self.tables.iter().map(DenseMatrix::frobenius_sq).sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.tables.iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tables.iter().all(DenseMatrix::is_finite)
    }

    /// Order-sensitive fingerprint of every value.
    pub fn checksum(&self) -> u64 {
        let mut h = 0u64;
        for t in &self.tables {
            for v in t.as_slice() {
                h = mix64(h ^ v.to_bits());
            }
        }
        h
    }

    /// Writes `node_id,dim_0,...` rows of `table` to CSV.
    pub fn export_csv(table: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        let header: Vec<String> = (0..table.cols()).map(|c| format!("dim_{c}")).collect();
        writeln!(w, "node_id,{}", header.join(","))?;
        for r in 0..table.rows() {
            let vals: Vec<String> = table.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{r},{}", vals.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Gradient tables shape-congruent with a [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub tables: Vec<DenseMatrix>,
}

impl GradientSet {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            tables: p
                .tables()
                .iter()
                .map(|t| DenseMatrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, p: &ModelParams, g: ParamGroup) -> &DenseMatrix {
        &self.tables[p.index_of(g)]
    }

    pub fn get_mut(&mut self, p: &ModelParams, g: ParamGroup) -> &mut DenseMatrix {
        &mut self.tables[p.index_of(g)]
    }

    pub fn is_finite(&self) -> bool {
        self.tables.iter().all(DenseMatrix::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.tables
            .iter()
            .flat_map(|t| t.as_slice())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Everything about the forward pass that is not a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub slope: f64,
    pub scaling: IncidenceScaling,
    pub dropout: DropoutSpec,
    /// Skip the hypergraph channel entirely.
    pub no_intents: bool,
    /// Build row-shuffled target-behavior readouts on these sides.
    pub corrupt: [bool; 2],
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            slope: 0.5,
            scaling: IncidenceScaling::InvSqrtEdges,
            dropout: DropoutSpec::off(),
            no_intents: false,
            corrupt: [false, false],
        }
    }
}

/// Source of incidence row permutations for the corrupted readouts.
pub enum Corruption<'a> {
    Off,
    Sample(&'a mut SeededRng),
    /// Reuse the permutations recorded in an earlier forward state.
    Replay(&'a ForwardState),
}

#[derive(Clone, Debug)]
pub struct CorruptedPass {
    pub incidence: CorruptedIncidence,
    pub gamma_pre: DenseMatrix,
    pub gamma: DenseMatrix,
}

impl CorruptedPass {
    pub fn readout(&self) -> Vec<f64> {
        self.gamma.column_sums()
    }
}

#[derive(Clone, Debug)]
pub struct HyperBehavior {
    pub incidence: HyperIncidence,
    pub pass: HyperPass,
    pub corrupted: Option<CorruptedPass>,
}

/// Hypergraph outputs of one side in one layer.
#[derive(Clone, Debug)]
pub struct HyperState {
    pub per_behavior: Vec<HyperBehavior>,
    pub h_sum: DenseMatrix,
}

impl HyperState {
    pub fn readouts(&self) -> Vec<Vec<f64>> {
        self.per_behavior.iter().map(|b| b.pass.readout()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SideLayer {
    pub z: Vec<DenseMatrix>,
    pub z_sum: DenseMatrix,
    /// `None` when the hypergraph channel is disabled.
    pub hyper: Option<HyperState>,
    pub lambda: DenseMatrix,
    pub masks: Option<EdgeMasks>,
}

#[derive(Clone, Debug)]
pub struct LayerState {
    pub sides: [SideLayer; 2],
}

impl LayerState {
    pub fn side(&self, s: Side) -> &SideLayer {
        &self.sides[s.index()]
    }
}

/// Cached activations of one forward pass, consumed by backward.
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub lambda0: [DenseMatrix; 2],
    pub layers: Vec<LayerState>,
    pub psi: [DenseMatrix; 2],
    pub options: ForwardOptions,
    pub mask_key: u64,
    pub params_generation: u64,
    pub counters: OpCounters,
}

impl ForwardState {
    pub fn psi(&self, side: Side) -> &DenseMatrix {
        &self.psi[side.index()]
    }

    /// Λ⁽ˡ⁾ for `l` in `0..=L`.
    pub fn lambda(&self, side: Side, l: usize) -> &DenseMatrix {
        if l == 0 {
            &self.lambda0[side.index()]
        } else {
            &self.layers[l - 1].side(side).lambda
        }
    }

    pub fn num_users(&self) -> usize {
        self.psi[0].rows()
    }

    pub fn num_items(&self) -> usize {
        self.psi[1].rows()
    }

    /// `⟨Ψᵤ_i, Ψᵥ_j⟩`
    pub fn predict(&self, user: usize, item: usize) -> Result<f64> {
        if user >= self.num_users() {
            return Err(Error::Range {
                what: "user id",
                index: user,
                limit: self.num_users(),
            });
        }
        if item >= self.num_items() {
            return Err(Error::Range {
                what: "item id",
                index: item,
                limit: self.num_items(),
            });
        }
        Ok(dot(self.psi[0].row(user), self.psi[1].row(item)))
    }

    pub fn score_items(&self, user: usize, items: &[usize]) -> Result<Vec<f64>> {
        items.iter().map(|&j| self.predict(user, j)).collect()
    }
}

fn layer_key(mask_key: u64, layer: usize) -> u64 {
    mix64(mask_key ^ (layer as u64).wrapping_mul(0x9e37_79b9))
}

/// One propagation layer for both sides, reading only the previous layer.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    prev: [&DenseMatrix; 2],
    adj: &BehaviorAdjacency,
    params: &ModelParams,
    layer: usize,
    opts: &ForwardOptions,
    mask_key: u64,
    corruption: &mut Corruption<'_>,
    counters: &mut OpCounters,
) -> Result<LayerState> {
    let dims = params.dims();
    let key = layer_key(mask_key, layer);
    let mut sides = Vec::with_capacity(2);
    for side in Side::BOTH {
        let src = prev[side.other().index()];
        let masks = opts.dropout.sample_masks(adj, side, key);
        let prop = propagate_with_masks(adj, side, src, masks.as_ref())?;
        let edges = adj.nnz() as u64;
        counters.messages += edges;
        counters.graph_macs += edges * dims.dim as u64;

        let hyper = if opts.no_intents {
            None
        } else {
            let mut per_behavior = Vec::with_capacity(dims.num_behaviors);
            let mut h_sum = DenseMatrix::zeros(prev[side.index()].rows(), dims.dim);
            for (k, z) in prop.per_behavior.iter().enumerate() {
                let w = params.hyperedges(side, k);
                let incidence = hyper_incidence(z, w, opts.scaling)?;
                let pass = hyper_propagate(&incidence.scaled, z, opts.slope)?;
                let n = z.rows() as u64;
                counters.hyper_macs += 3 * n * (dims.hyperedges * dims.dim) as u64;
                let corrupted = if opts.corrupt[side.index()] && k == dims.target_behavior {
                    let inc = match corruption {
                        Corruption::Off => None,
                        Corruption::Sample(rng) => Some(corrupt_incidence(&incidence.scaled, rng)?),
                        Corruption::Replay(prev_state) => {
                            let old =
                                prev_state.layers[layer]
                                    .side(side)
                                    .hyper
                                    .as_ref()
                                    .and_then(|h| {
                                        h.per_behavior[k]
                                            .corrupted
                                            .as_ref()
                                            .map(|c| c.incidence.perm.clone())
                                    });
                            old.map(|perm| CorruptedIncidence {
                                scaled: incidence.scaled.gather_rows(&perm),
                                perm,
                            })
                        }
                    };
                    match inc {
                        Some(inc) => {
                            let (gamma_pre, gamma) =
                                hyperedge_embeddings(&inc.scaled, z, opts.slope)?;
                            counters.hyper_macs += n * (dims.hyperedges * dims.dim) as u64;
                            Some(CorruptedPass {
                                incidence: inc,
                                gamma_pre,
                                gamma,
                            })
                        }
                        None => None,
                    }
                } else {
                    None
                };
                if !pass.h.is_finite() || !pass.gamma.is_finite() {
                    return Err(Error::Overflow(format!(
                        "hypergraph output, layer {}, {} side, behavior {k}",
                        layer + 1,
                        side.name()
                    )));
                }
                h_sum.add_assign(&pass.h)?;
                per_behavior.push(HyperBehavior {
                    incidence,
                    pass,
                    corrupted,
                });
            }
            Some(HyperState {
                per_behavior,
                h_sum,
            })
        };

        let mut lambda = prop.summed.clone();
        if let Some(h) = &hyper {
            lambda.add_assign(&h.h_sum)?;
        }
        lambda.add_assign(prev[side.index()])?;
        if !lambda.is_finite() {
            return Err(Error::Overflow(format!(
                "layer {} {} embeddings",
                layer + 1,
                side.name()
            )));
        }
        sides.push(SideLayer {
            z: prop.per_behavior,
            z_sum: prop.summed,
            hyper,
            lambda,
            masks,
        });
    }
    let item = sides.pop().expect("two sides");
    let user = sides.pop().expect("two sides");
    Ok(LayerState {
        sides: [user, item],
    })
}

/// Runs every layer and the multi-order sum. `mask_key` seeds the
/// counter-based dropout draws.
pub fn forward(
    params: &ModelParams,
    adj: &BehaviorAdjacency,
    opts: &ForwardOptions,
    mask_key: u64,
    mut corruption: Corruption<'_>,
) -> Result<ForwardState> {
    let dims = params.dims();
    if adj.num_users() != dims.num_users
        || adj.num_items() != dims.num_items
        || adj.num_behaviors() != dims.num_behaviors
    {
        return Err(Error::Shape {
            op: "forward",
            lhs: (dims.num_users, dims.num_items),
            rhs: (adj.num_users(), adj.num_items()),
        });
    }
    let lambda0 = [
        params.base(Side::User).clone(),
        params.base(Side::Item).clone(),
    ];
    let mut counters = OpCounters::default();
    let mut layers: Vec<LayerState> = Vec::with_capacity(dims.layers);
    for l in 0..dims.layers {
        let prev = match layers.last() {
            Some(last) => [&last.sides[0].lambda, &last.sides[1].lambda],
            None => [&lambda0[0], &lambda0[1]],
        };
        let layer = layer_forward(
            prev,
            adj,
            params,
            l,
            opts,
            mask_key,
            &mut corruption,
            &mut counters,
        )?;
        layers.push(layer);
    }
    let mut psi = lambda0.clone();
    for layer in &layers {
        for side in Side::BOTH {
            psi[side.index()].add_assign(&layer.side(side).lambda)?;
        }
    }
    Ok(ForwardState {
        lambda0,
        layers,
        psi,
        options: *opts,
        mask_key,
        params_generation: params.generation(),
        counters,
    })
}
