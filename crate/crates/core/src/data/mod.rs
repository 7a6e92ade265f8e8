//! Multi-behavior interaction data: the sparse (user, item, behavior) tensor,
//! its TSV form, the leave-one-out split and training-pair sampling.

mod split;
mod synth;

pub use split::{leave_one_out_split, SplitDataset, SplitSidecar, DEFAULT_EVAL_NEGATIVES};
pub use synth::{random_tensor, synth_generate, SynthConfig, SynthDataset};

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corelin::SeededRng;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub behavior: usize,
}

/// Observed `(user, item, behavior)` triples, each with implicit value 1.
///
/// Triples are kept in first-occurrence order; that order stands in for
/// time when choosing each user's held-out interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionTensor {
    num_users: usize,
    num_items: usize,
    num_behaviors: usize,
    target_behavior: usize,
    triples: Vec<Interaction>,
}

/// Column spec for [`load_interactions`].
#[derive(Clone, Debug)]
pub struct Schema {
    pub num_behaviors: usize,
    pub target_behavior: usize,
    /// Explicit user count; inferred as `max id + 1` when absent.
    pub num_users: Option<usize>,
    pub num_items: Option<usize>,
}

impl Schema {
    pub fn new(num_behaviors: usize, target_behavior: usize) -> Self {
        Self {
            num_behaviors,
            target_behavior,
            num_users: None,
            num_items: None,
        }
    }
}

impl InteractionTensor {
    /// Validates and deduplicates `triples`, keeping the first occurrence.
    pub fn new(
        num_users: usize,
        num_items: usize,
        num_behaviors: usize,
        target_behavior: usize,
        triples: impl IntoIterator<Item = Interaction>,
    ) -> Result<Self> {
        if num_behaviors == 0 {
            return Err(Error::Config(
                "number of behaviors must be at least 1".into(),
            ));
        }
        if target_behavior >= num_behaviors {
            return Err(Error::Range {
                what: "target behavior",
                index: target_behavior,
                limit: num_behaviors,
            });
        }
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        for t in triples {
            check_triple(&t, num_users, num_items, num_behaviors)?;
            if seen.insert(t) {
                kept.push(t);
            }
        }
        Ok(Self {
            num_users,
            num_items,
            num_behaviors,
            target_behavior,
            triples: kept,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_behaviors(&self) -> usize {
        self.num_behaviors
    }

    pub fn target_behavior(&self) -> usize {
        self.target_behavior
    }

    pub fn nnz(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> &[Interaction] {
        &self.triples
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn behavior_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_behaviors];
        for t in &self.triples {
            counts[t.behavior] += 1;
        }
        counts
    }

    /// Target-behavior items of every user, in file order.
    pub fn target_items_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for t in &self.triples {
            if t.behavior == self.target_behavior {
                out[t.user].push(t.item);
            }
        }
        out
    }

    /// Interaction count (all behaviors) per user.
    pub fn user_degrees(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_users];
        for t in &self.triples {
            out[t.user] += 1;
        }
        out
    }

    pub fn contains(&self, t: &Interaction) -> bool {
        self.triples.contains(t)
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for t in &self.triples {
            writeln!(w, "{}\t{}\t{}", t.user, t.item, t.behavior)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_triple(t: &Interaction, users: usize, items: usize, behaviors: usize) -> Result<()> {
    if t.user >= users {
        return Err(Error::Range {
            what: "user id",
            index: t.user,
            limit: users,
        });
    }
    if t.item >= items {
        return Err(Error::Range {
            what: "item id",
            index: t.item,
            limit: items,
        });
    }
    if t.behavior >= behaviors {
        return Err(Error::Range {
            what: "behavior id",
            index: t.behavior,
            limit: behaviors,
        });
    }
    Ok(())
}

/// Parses `user<TAB>item<TAB>behavior` lines. Blank lines and `#` comments
/// are skipped; duplicate triples count once.
pub fn parse_interactions(text: &str, schema: &Schema) -> Result<InteractionTensor> {
    let mut triples = Vec::new();
    let (mut max_user, mut max_item) = (None::<usize>, None::<usize>);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 3 columns, found {}", fields.len()),
            });
        }
        let mut vals = [0usize; 3];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("not a non-negative integer: {f:?}"),
            })?;
        }
        let [user, item, behavior] = vals;
        if behavior >= schema.num_behaviors {
            return Err(Error::Range {
                what: "behavior id",
                index: behavior,
                limit: schema.num_behaviors,
            });
        }
        max_user = max_user.max(Some(user));
        max_item = max_item.max(Some(item));
        triples.push(Interaction {
            user,
            item,
            behavior,
        });
    }
    let num_users = schema.num_users.unwrap_or(max_user.map_or(0, |u| u + 1));
    let num_items = schema.num_items.unwrap_or(max_item.map_or(0, |i| i + 1));
    InteractionTensor::new(
        num_users,
        num_items,
        schema.num_behaviors,
        schema.target_behavior,
        triples,
    )
}

pub fn load_interactions(path: impl AsRef<Path>, schema: &Schema) -> Result<InteractionTensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    parse_interactions(&text, schema)
}

/// Sorted per-user target-behavior item lists for fast membership tests.
#[derive(Clone, Debug)]
pub struct TargetIndex {
    num_items: usize,
    items: Vec<Vec<usize>>,
}

impl TargetIndex {
    pub fn new(t: &InteractionTensor) -> Self {
        let mut items = t.target_items_by_user();
        for v in &mut items {
            v.sort_unstable();
        }
        Self {
            num_items: t.num_items(),
            items,
        }
    }

    pub fn items(&self, user: usize) -> &[usize] {
        &self.items[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.items[user].binary_search(&item).is_ok()
    }

    pub fn num_users(&self) -> usize {
        self.items.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub user: usize,
    pub positive: usize,
    pub negative: usize,
}

/// `S` sampled (positive, negative) target-behavior pairs per user.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    pub entries: Vec<PairEntry>,
    pub pairs_per_user: usize,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct users in first-appearance order.
    pub fn users(&self) -> Vec<usize> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.user))
            .map(|e| e.user)
            .collect()
    }

    /// Distinct positive and negative items in first-appearance order.
    pub fn items(&self) -> Vec<usize> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for e in &self.entries {
            for it in [e.positive, e.negative] {
                if seen.insert(it) {
                    out.push(it);
                }
            }
        }
        out
    }
}

/// Samples `pairs_per_user` pairs for every user with target interactions.
pub fn sample_pairs(
    train: &InteractionTensor,
    pairs_per_user: usize,
    rng: &mut SeededRng,
) -> Result<PairBatch> {
    let index = TargetIndex::new(train);
    let users: Vec<usize> = (0..train.num_users()).collect();
    sample_pairs_for(&index, &users, pairs_per_user, rng)
}

/// Like [`sample_pairs`], restricted to `users`. Users without target
/// interactions are skipped.
pub fn sample_pairs_for(
    index: &TargetIndex,
    users: &[usize],
    pairs_per_user: usize,
    rng: &mut SeededRng,
) -> Result<PairBatch> {
    if pairs_per_user == 0 {
        return Err(Error::Config("pairs per user must be at least 1".into()));
    }
    let mut entries = Vec::with_capacity(users.len() * pairs_per_user);
    for &user in users {
        let pos = index.items(user);
        if pos.is_empty() {
            continue;
        }
        if pos.len() >= index.num_items() {
            return Err(Error::Sampling(format!(
                "user {user} interacted with every item; no negative exists"
            )));
        }
        for _ in 0..pairs_per_user {
            let positive = pos[rng.random_range(0..pos.len())];
            let negative = loop {
                let cand = rng.random_range(0..index.num_items());
                if !index.contains(user, cand) {
                    break cand;
                }
            };
            entries.push(PairEntry {
                user,
                positive,
                negative,
            });
        }
    }
    Ok(PairBatch {
        entries,
        pairs_per_user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri(user: usize, item: usize, behavior: usize) -> Interaction {
        Interaction {
            user,
            item,
            behavior,
        }
    }

    #[test]
    fn single_line() {
        let t = parse_interactions("0\t1\t2\n", &Schema::new(3, 2)).unwrap();
        assert_eq!(t.triples(), &[tri(0, 1, 2)]);
        assert!(t.num_users() >= 1 && t.num_items() >= 2);
    }

    #[test]
    fn duplicates_count_once() {
        let t = parse_interactions("0\t1\t0\n0\t1\t0\n1\t0\t1\n", &Schema::new(2, 1)).unwrap();
        assert_eq!(t.nnz(), 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_interactions("0\t1\t0\n0\tx\t0\n", &Schema::new(2, 1)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_interactions("0\t1\n", &Schema::new(2, 1)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn behavior_out_of_schema_range() {
        let err = parse_interactions("0\t1\t3\n", &Schema::new(3, 2)).unwrap_err();
        assert!(matches!(
            err,
            Error::Range {
                what: "behavior id",
                index: 3,
                limit: 3
            }
        ));
    }

    #[test]
    fn target_behavior_must_exist() {
        assert!(InteractionTensor::new(1, 1, 2, 2, []).is_err());
    }

    #[test]
    fn save_then_load_preserves_triples() {
        let t = InteractionTensor::new(
            3,
            4,
            2,
            1,
            [tri(2, 3, 0), tri(0, 0, 1), tri(1, 2, 1), tri(0, 3, 0)],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsv");
        t.save_tsv(&p).unwrap();
        let mut schema = Schema::new(2, 1);
        schema.num_users = Some(3);
        schema.num_items = Some(4);
        let back = load_interactions(&p, &schema).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn pairs_respect_target_set() {
        let t = InteractionTensor::new(1, 3, 1, 0, [tri(0, 0, 0)]).unwrap();
        let mut rng = SeededRng::new(1, "negatives");
        let b = sample_pairs(&t, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        for e in &b.entries {
            assert_eq!(e.positive, 0);
            assert!(e.negative == 1 || e.negative == 2);
        }
    }

    #[test]
    fn exactly_s_pairs_per_eligible_user() {
        let t = InteractionTensor::new(
            3,
            5,
            2,
            1,
            [tri(0, 0, 1), tri(0, 1, 1), tri(1, 4, 1), tri(2, 2, 0)],
        )
        .unwrap();
        let mut rng = SeededRng::new(2, "negatives");
        let b = sample_pairs(&t, 4, &mut rng).unwrap();
        assert_eq!(b.entries.iter().filter(|e| e.user == 0).count(), 4);
        assert_eq!(b.entries.iter().filter(|e| e.user == 1).count(), 4);
        // user 2 has no target interaction
        assert_eq!(b.entries.iter().filter(|e| e.user == 2).count(), 0);
    }

    #[test]
    fn saturated_user_cannot_get_negative() {
        let t = InteractionTensor::new(1, 2, 1, 0, [tri(0, 0, 0), tri(0, 1, 0)]).unwrap();
        let mut rng = SeededRng::new(3, "negatives");
        assert!(matches!(
            sample_pairs(&t, 1, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn zero_pairs_rejected() {
        let t = InteractionTensor::new(1, 2, 1, 0, [tri(0, 0, 0)]).unwrap();
        let mut rng = SeededRng::new(3, "negatives");
        assert!(sample_pairs(&t, 0, &mut rng).is_err());
    }

    #[test]
    fn negatives_are_uniform_over_eligible_items() {
        // user 0 owns items {0, 3}; eligible negatives are {1, 2, 4, 5}
        let t = InteractionTensor::new(1, 6, 1, 0, [tri(0, 0, 0), tri(0, 3, 0)]).unwrap();
        let index = TargetIndex::new(&t);
        let mut rng = SeededRng::new(4, "negatives");
        let draws = 100_000;
        let b = sample_pairs_for(&index, &[0], draws, &mut rng).unwrap();
        let mut counts = [0usize; 6];
        for e in &b.entries {
            counts[e.negative] += 1;
        }
        assert_eq!(counts[0] + counts[3], 0);
        let expected = draws as f64 / 4.0;
        let chi2: f64 = [1, 2, 4, 5]
            .iter()
            .map(|&i| (counts[i] as f64 - expected).powi(2) / expected)
            .sum();
        // 3 degrees of freedom, 99.9% quantile
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts = {counts:?}");
    }
}
