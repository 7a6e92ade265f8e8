//! Leave-one-out ranking metrics and a matrix-factorization baseline.
//!
//! Each evaluation user's held-out item is ranked among its sampled
//! negatives by descending score, ties going to the smaller item id.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corelin::{dot, SeededRng};
use crate::data::{sample_pairs_for, Interaction, InteractionTensor, SplitDataset, TargetIndex};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, Side};
use crate::model::{
    forward, Corruption, ForwardOptions, ForwardState, GradientSet, ModelDims, ModelParams,
    ParamGroup,
};
use crate::train::{adam_step, AdamState};

pub const DEFAULT_CUTOFFS: [usize; 3] = [5, 10, 20];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// `(user, rank)` in ascending user order.
    pub per_user_ranks: Vec<(usize, usize)>,
    pub num_eval_users: usize,
}

impl Metrics {
    pub fn from_ranks(per_user_ranks: Vec<(usize, usize)>, cutoffs: &[usize]) -> Self {
        let n = per_user_ranks.len();
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &c in cutoffs {
            let (mut h, mut g) = (0.0, 0.0);
            for &(_, r) in &per_user_ranks {
                h += hit(r, c);
                g += ndcg_at(r, c);
            }
            let denom = n.max(1) as f64;
            hr.insert(c, h / denom);
            ndcg.insert(c, g / denom);
        }
        Self {
            hr,
            ndcg,
            per_user_ranks,
            num_eval_users: n,
        }
    }

    pub fn hr_at(&self, n: usize) -> f64 {
        self.hr.get(&n).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, n: usize) -> f64 {
        self.ndcg.get(&n).copied().unwrap_or(f64::NAN)
    }
}

pub fn hit(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of `test` among `test ∪ negatives` by counting the
/// candidates that beat it.
pub fn rank_of(test: (usize, f64), negatives: &[(usize, f64)]) -> usize {
    let (ti, ts) = test;
    1 + negatives
        .iter()
        .filter(|&&(j, s)| s > ts || (s == ts && j < ti))
        .count()
}

/// Sorts every candidate and reads the position of the test item.
pub fn naive_rank(test: (usize, f64), negatives: &[(usize, f64)]) -> usize {
    let mut all: Vec<(usize, f64)> = negatives.to_vec();
    all.push(test);
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    1 + all
        .iter()
        .position(|&(j, _)| j == test.0)
        .expect("test item present")
}

fn candidates(split: &SplitDataset, user: usize) -> Result<(usize, &[usize])> {
    let test = split.test_items[user]
        .ok_or_else(|| Error::Data(format!("user {user} has no test item")))?;
    let negs = &split.eval_negatives[user];
    if negs.is_empty() {
        return Err(Error::Data(format!(
            "user {user} has no evaluation negatives"
        )));
    }
    Ok((test, negs))
}

/// Ranks with an arbitrary scorer `score(user, items) -> scores`.
pub fn evaluate_with<F>(score: F, split: &SplitDataset, cutoffs: &[usize]) -> Result<Metrics>
where
    F: Fn(usize, &[usize]) -> Result<Vec<f64>> + Sync,
{
    let users = split.eval_users();
    let ranks: Result<Vec<(usize, usize)>> = users
        .par_iter()
        .map(|&u| {
            let (test, negs) = candidates(split, u)?;
            let mut items = Vec::with_capacity(negs.len() + 1);
            items.push(test);
            items.extend_from_slice(negs);
            let scores = score(u, &items)?;
            let cands: Vec<(usize, f64)> = negs
                .iter()
                .copied()
                .zip(scores[1..].iter().copied())
                .collect();
            Ok((u, rank_of((test, scores[0]), &cands)))
        })
        .collect();
    Ok(Metrics::from_ranks(ranks?, cutoffs))
}

/// Metrics for a dropout-free forward state.
pub fn evaluate(state: &ForwardState, split: &SplitDataset, cutoffs: &[usize]) -> Result<Metrics> {
    if state.options.dropout.is_active() {
        return Err(Error::Mode(
            "evaluation needs a forward pass without dropout".into(),
        ));
    }
    evaluate_with(|u, items| state.score_items(u, items), split, cutoffs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankCheckReport {
    pub users_checked: usize,
    pub agreements: usize,
    pub mismatches: Vec<(usize, usize, usize)>,
}

impl RankCheckReport {
    pub fn all_agree(&self) -> bool {
        self.users_checked > 0 && self.agreements == self.users_checked
    }
}

/// Compares [`rank_of`] with [`naive_rank`] on up to `max_users` sampled
/// evaluation users.
pub fn rank_oracle_check(
    state: &ForwardState,
    split: &SplitDataset,
    max_users: usize,
    rng: &mut SeededRng,
) -> Result<RankCheckReport> {
    let mut users = split.eval_users();
    users.shuffle(rng);
    users.truncate(max_users);
    let mut report = RankCheckReport {
        users_checked: 0,
        agreements: 0,
        mismatches: Vec::new(),
    };
    for u in users {
        let (test, negs) = candidates(split, u)?;
        let ts = state.predict(u, test)?;
        let cands: Vec<(usize, f64)> = negs
            .iter()
            .map(|&j| Ok((j, state.predict(u, j)?)))
            .collect::<Result<_>>()?;
        let fast = rank_of((test, ts), &cands);
        let slow = naive_rank((test, ts), &cands);
        report.users_checked += 1;
        if fast == slow {
            report.agreements += 1;
        } else {
            report.mismatches.push((u, fast, slow));
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    pub batch_size: usize,
    pub pairs_per_user: usize,
    pub seed: u64,
}

/// Defaults come from a small grid search on the default synthetic data
/// (lr, reg, pairs per user); the weight decay applies to whole tables at
/// every step, so it is much larger than a per-example penalty would be.
impl Default for MfConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 30,
            lr: 2e-2,
            reg: 7e-2,
            batch_size: 256,
            pairs_per_user: 4,
            seed: 0,
        }
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

/// Plain embeddings trained with BPR on the target behavior only.
pub struct MfModel {
    pub params: ModelParams,
}

impl MfModel {
    pub fn score(&self, user: usize, item: usize) -> f64 {
        dot(
            self.params.base(Side::User).row(user),
            self.params.base(Side::Item).row(item),
        )
    }
}

/// Trains the baseline with Adam over shuffled user batches and evaluates it
/// with the same protocol as the main model.
pub fn train_mf_baseline(
    split: &SplitDataset,
    cfg: &MfConfig,
    cutoffs: &[usize],
) -> Result<(Metrics, MfModel)> {
    let train = &split.train;
    let target = train.target_behavior();
    let only_target: Vec<Interaction> = train
        .triples()
        .iter()
        .filter(|t| t.behavior == target)
        .map(|t| Interaction { behavior: 0, ..*t })
        .collect();
    if only_target.is_empty() {
        return Err(Error::EmptyDataset(
            "no target-behavior training interactions".into(),
        ));
    }
    let tt = InteractionTensor::new(train.num_users(), train.num_items(), 1, 0, only_target)?;
    let index = TargetIndex::new(&tt);
    let dims = ModelDims {
        num_users: tt.num_users(),
        num_items: tt.num_items(),
        num_behaviors: 1,
        target_behavior: 0,
        dim: cfg.dim,
        hyperedges: 1,
        layers: 0,
    };
    let mut params = ModelParams::init(&dims, &mut SeededRng::new(cfg.seed, "mf-init"))?;
    let mut adam = AdamState::new(&params);
    let mut order_rng = SeededRng::new(cfg.seed, "mf-order");
    let mut pair_rng = SeededRng::new(cfg.seed, "mf-pairs");
    let users: Vec<usize> = (0..tt.num_users())
        .filter(|&u| !index.items(u).is_empty())
        .collect();
    let (ui, ii) = (
        params.index_of(ParamGroup::BaseEmbedding(Side::User)),
        params.index_of(ParamGroup::BaseEmbedding(Side::Item)),
    );
    for _ in 0..cfg.epochs {
        let mut order = users.clone();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = sample_pairs_for(&index, chunk, cfg.pairs_per_user, &mut pair_rng)?;
            let mut g = GradientSet::zeros_like(&params);
            let (pu, pv) = (params.base(Side::User), params.base(Side::Item));
            for e in &batch.entries {
                let (u, p, n) = (pu.row(e.user), pv.row(e.positive), pv.row(e.negative));
                let x = dot(u, p) - dot(u, n);
                // d softplus(-x)/dx = -σ(-x)
                let c = -sigmoid(-x);
                for col in 0..cfg.dim {
                    let gu = c * (p[col] - n[col]);
                    g.tables[ui].row_mut(e.user)[col] += gu;
                    g.tables[ii].row_mut(e.positive)[col] += c * u[col];
                    g.tables[ii].row_mut(e.negative)[col] -= c * u[col];
                }
            }
            for idx in [ui, ii] {
                g.tables[idx].axpy(2.0 * cfg.reg, &params.tables()[idx])?;
            }
            adam_step(&mut params, &g, &mut adam, cfg.lr)?;
        }
    }
    let model = MfModel { params };
    let metrics = evaluate_with(
        |u, items| Ok(items.iter().map(|&j| model.score(u, j)).collect()),
        split,
        cutoffs,
    )?;
    Ok((metrics, model))
}

/// Scores from freshly initialized parameters: the random-scorer sanity line.
pub fn untrained_metrics(
    split: &SplitDataset,
    dims: &ModelDims,
    seed: u64,
    cutoffs: &[usize],
) -> Result<Metrics> {
    let params = ModelParams::init(dims, &mut SeededRng::new(seed, "init"))?;
    let adj = build_adjacency(&split.train);
    let state = forward(
        &params,
        &adj,
        &ForwardOptions::default(),
        0,
        Corruption::Off,
    )?;
    evaluate(&state, split, cutoffs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBucket {
    /// Inclusive range of training interaction counts.
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub users: Vec<usize>,
}

/// Splits evaluation users into `n` near-equal groups by their number of
/// training interactions (all behaviors), ties broken by user id.
pub fn frequency_buckets(split: &SplitDataset, n: usize) -> Vec<FrequencyBucket> {
    let deg = split.train.user_degrees();
    let mut users = split.eval_users();
    users.sort_by_key(|&u| (deg[u], u));
    let n = n.max(1).min(users.len().max(1));
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let lo = b * users.len() / n;
        let hi = (b + 1) * users.len() / n;
        let group: Vec<usize> = users[lo..hi].to_vec();
        if group.is_empty() {
            continue;
        }
        out.push(FrequencyBucket {
            min_interactions: deg[group[0]],
            max_interactions: deg[*group.last().expect("nonempty")],
            users: group,
        });
    }
    out
}

/// HR@`cutoff` restricted to each bucket's users.
pub fn bucket_hr(metrics: &Metrics, buckets: &[FrequencyBucket], cutoff: usize) -> Vec<f64> {
    let ranks: BTreeMap<usize, usize> = metrics.per_user_ranks.iter().copied().collect();
    buckets
        .iter()
        .map(|b| {
            let hits: f64 = b
                .users
                .iter()
                .filter_map(|u| ranks.get(u))
                .map(|&r| hit(r, cutoff))
                .sum();
            hits / b.users.len().max(1) as f64
        })
        .collect()
}

/// Draws a uniformly random score per candidate; used to check the harness.
pub fn random_scorer_metrics(
    split: &SplitDataset,
    seed: u64,
    cutoffs: &[usize],
) -> Result<Metrics> {
    evaluate_with(
        |u, items| {
            let mut rng = SeededRng::new(seed ^ u as u64, "random-scorer");
            Ok(items.iter().map(|_| rng.random::<f64>()).collect())
        },
        split,
        cutoffs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_out_split, synth_generate, SynthConfig};
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of((3, 0.9), &[(1, 0.5), (2, 0.1)]), 1);
        assert_eq!(rank_of((3, 0.5), &[(1, 0.5), (4, 0.5)]), 2);
        assert_eq!(rank_of((3, 0.5), &[]), 1);
        assert_eq!(naive_rank((3, 0.5), &[(1, 0.5), (4, 0.5)]), 2);
    }

    #[test]
    fn metric_formulas() {
        let m = Metrics::from_ranks(vec![(0, 1)], &[10]);
        assert_eq!((m.hr_at(10), m.ndcg_at(10)), (1.0, 1.0));
        let m = Metrics::from_ranks(vec![(0, 2)], &[10]);
        assert!((m.ndcg_at(10) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((m.ndcg_at(10) - 0.6309).abs() < 1e-4);
        let m = Metrics::from_ranks(vec![(0, 11)], &[10]);
        assert_eq!((m.hr_at(10), m.ndcg_at(10)), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn fast_rank_equals_sort(scores in prop::collection::vec(0u8..6, 1..40), test in 0u8..6, tid in 0usize..50) {
            let negs: Vec<(usize, f64)> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| (if i >= tid { i + 1 } else { i }, s as f64))
                .collect();
            prop_assert_eq!(rank_of((tid, test as f64), &negs), naive_rank((tid, test as f64), &negs));
        }

        #[test]
        fn ndcg_bounded_by_hr_and_monotone(r in 1usize..200, n in 1usize..50) {
            prop_assert!(ndcg_at(r, n) <= hit(r, n));
            prop_assert!(ndcg_at(r + 1, n) <= ndcg_at(r, n));
            prop_assert!(hit(r + 1, n) <= hit(r, n));
        }
    }

    fn small_split(seed: u64) -> SplitDataset {
        let cfg = SynthConfig {
            num_users: 300,
            num_items: 200,
            funnel_probs: vec![0.1, 0.05, 0.03],
            seed,
            ..Default::default()
        };
        let d = synth_generate(&cfg).unwrap();
        leave_one_out_split(&d.tensor, 99, &mut SeededRng::new(seed, "split")).unwrap()
    }

    #[test]
    fn random_scorer_is_near_one_tenth() {
        let split = small_split(1);
        let m = random_scorer_metrics(&split, 3, &[10]).unwrap();
        let n = m.num_eval_users as f64;
        assert!(n > 100.0);
        assert!(
            (m.hr_at(10) - 0.1).abs() < 3.0 * (0.09 / n).sqrt() + 1e-9,
            "{}",
            m.hr_at(10)
        );
    }

    #[test]
    fn evaluation_does_not_mutate_params_and_agrees_with_oracle() {
        let split = small_split(2);
        let dims = ModelDims {
            num_users: split.train.num_users(),
            num_items: split.train.num_items(),
            num_behaviors: 3,
            target_behavior: 2,
            dim: 8,
            hyperedges: 4,
            layers: 2,
        };
        let params = ModelParams::init(&dims, &mut SeededRng::new(1, "init")).unwrap();
        let before = params.checksum();
        let adj = build_adjacency(&split.train);
        let state = forward(
            &params,
            &adj,
            &ForwardOptions::default(),
            0,
            Corruption::Off,
        )
        .unwrap();
        let m = evaluate(&state, &split, &DEFAULT_CUTOFFS).unwrap();
        assert_eq!(params.checksum(), before);
        for n in DEFAULT_CUTOFFS {
            assert!(m.ndcg_at(n) <= m.hr_at(n));
        }
        let r = rank_oracle_check(&state, &split, 50, &mut SeededRng::new(0, "oracle")).unwrap();
        assert!(r.all_agree() && r.users_checked == 50, "{r:?}");
    }

    #[test]
    fn dropout_state_is_refused() {
        let split = small_split(3);
        let dims = ModelDims {
            num_users: split.train.num_users(),
            num_items: split.train.num_items(),
            num_behaviors: 3,
            target_behavior: 2,
            dim: 4,
            hyperedges: 2,
            layers: 1,
        };
        let params = ModelParams::init(&dims, &mut SeededRng::new(1, "init")).unwrap();
        let adj = build_adjacency(&split.train);
        let opts = ForwardOptions {
            dropout: crate::graph::DropoutSpec::new(0.5).unwrap(),
            ..Default::default()
        };
        let state = forward(&params, &adj, &opts, 0, Corruption::Off).unwrap();
        assert!(matches!(
            evaluate(&state, &split, &[10]),
            Err(Error::Mode(_))
        ));
    }

    #[test]
    fn missing_negatives_is_a_data_error() {
        let mut split = small_split(4);
        let u = split.eval_users()[0];
        split.eval_negatives[u].clear();
        let err = random_scorer_metrics(&split, 0, &[10]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn mf_with_zero_lr_equals_initial_embeddings() {
        let split = small_split(5);
        let cfg = MfConfig {
            lr: 0.0,
            epochs: 2,
            dim: 8,
            ..Default::default()
        };
        let (m, model) = train_mf_baseline(&split, &cfg, &[10]).unwrap();
        let init = ModelParams::init(
            &model.params.dims().clone(),
            &mut SeededRng::new(0, "mf-init"),
        )
        .unwrap();
        assert_eq!(model.params.tables(), init.tables());
        let m0 = evaluate_with(
            |u, items| {
                Ok(items
                    .iter()
                    .map(|&j| dot(init.base(Side::User).row(u), init.base(Side::Item).row(j)))
                    .collect())
            },
            &split,
            &[10],
        )
        .unwrap();
        assert_eq!(m, m0);
    }

    #[test]
    fn buckets_partition_eval_users() {
        let split = small_split(6);
        let b = frequency_buckets(&split, 4);
        assert_eq!(b.len(), 4);
        let total: usize = b.iter().map(|x| x.users.len()).sum();
        assert_eq!(total, split.eval_users().len());
        for w in b.windows(2) {
            assert!(w[0].max_interactions <= w[1].min_interactions);
        }
    }
}
