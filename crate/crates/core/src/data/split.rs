use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{load_interactions, InteractionTensor, Schema};
use crate::corelin::SeededRng;
use crate::error::{Error, Result};

pub const DEFAULT_EVAL_NEGATIVES: usize = 99;

/// Train tensor plus, per user, the held-out target item and the sampled
/// evaluation negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: InteractionTensor,
    pub test_items: Vec<Option<usize>>,
    pub eval_negatives: Vec<Vec<usize>>,
    pub seed: u64,
}

/// JSON sidecar written next to `train.tsv` / `test.tsv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSidecar {
    pub seed: u64,
    pub target_behavior: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub negatives: Vec<Vec<usize>>,
}

impl SplitDataset {
    /// Users that have a held-out item.
    pub fn eval_users(&self) -> Vec<usize> {
        self.test_items
            .iter()
            .enumerate()
            .filter_map(|(u, t)| t.map(|_| u))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.train.save_tsv(dir.join("train.tsv"))?;
        let mut test = String::new();
        for (u, t) in self.test_items.iter().enumerate() {
            if let Some(item) = t {
                test.push_str(&format!("{u}\t{item}\t{}\n", self.train.target_behavior()));
            }
        }
        fs::write(dir.join("test.tsv"), test)?;
        let sidecar = SplitSidecar {
            seed: self.seed,
            target_behavior: self.train.target_behavior(),
            num_users: self.train.num_users(),
            num_items: self.train.num_items(),
            num_behaviors: self.train.num_behaviors(),
            negatives: self.eval_negatives.clone(),
        };
        fs::write(dir.join("split.json"), serde_json::to_string(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let sidecar: SplitSidecar =
            serde_json::from_str(&fs::read_to_string(dir.join("split.json"))?)?;
        let schema = Schema {
            num_behaviors: sidecar.num_behaviors,
            target_behavior: sidecar.target_behavior,
            num_users: Some(sidecar.num_users),
            num_items: Some(sidecar.num_items),
        };
        let train = load_interactions(dir.join("train.tsv"), &schema)?;
        let test = load_interactions(dir.join("test.tsv"), &schema)?;
        let mut test_items = vec![None; sidecar.num_users];
        for t in test.triples() {
            test_items[t.user] = Some(t.item);
        }
        if sidecar.negatives.len() != sidecar.num_users {
            return Err(Error::Data(format!(
                "split sidecar lists negatives for {} users, expected {}",
                sidecar.negatives.len(),
                sidecar.num_users
            )));
        }
        Ok(Self {
            train,
            test_items,
            eval_negatives: sidecar.negatives,
            seed: sidecar.seed,
        })
    }
}

/// Holds out each user's last target-behavior interaction (file order) and
/// samples `num_negatives` evaluation items the user never interacted with
/// under the target behavior.
///
/// Users with fewer than two target interactions stay train-only. Auxiliary
/// copies of a held-out pair are kept in train.
pub fn leave_one_out_split(
    t: &InteractionTensor,
    num_negatives: usize,
    rng: &mut SeededRng,
) -> Result<SplitDataset> {
    if t.num_users() == 0 || t.is_empty() {
        return Err(Error::EmptyDataset(
            "no users or interactions to split".into(),
        ));
    }
    let target = t.target_behavior();
    let by_user = t.target_items_by_user();

    let mut test_items = vec![None; t.num_users()];
    for (u, items) in by_user.iter().enumerate() {
        if items.len() >= 2 {
            test_items[u] = items.last().copied();
        }
    }

    let train_triples = t
        .triples()
        .iter()
        .copied()
        .filter(|x| !(x.behavior == target && test_items[x.user] == Some(x.item)));
    let train = InteractionTensor::new(
        t.num_users(),
        t.num_items(),
        t.num_behaviors(),
        target,
        train_triples,
    )?;

    let mut eval_negatives = vec![Vec::new(); t.num_users()];
    for (u, negs) in eval_negatives.iter_mut().enumerate() {
        if test_items[u].is_none() {
            continue;
        }
        let owned: HashSet<usize> = by_user[u].iter().copied().collect();
        let eligible = t.num_items() - owned.len();
        let want = num_negatives.min(eligible);
        let mut chosen = HashSet::with_capacity(want);
        while negs.len() < want {
            let cand = rng.random_range(0..t.num_items());
            if !owned.contains(&cand) && chosen.insert(cand) {
                negs.push(cand);
            }
        }
    }

    Ok(SplitDataset {
        train,
        test_items,
        eval_negatives,
        seed: rng.seed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;

    fn tri(user: usize, item: usize, behavior: usize) -> Interaction {
        Interaction {
            user,
            item,
            behavior,
        }
    }

    fn sample() -> InteractionTensor {
        // user 0: target items a=3, b=1, c=4 in file order; user 1: one target item
        InteractionTensor::new(
            2,
            10,
            2,
            1,
            [
                tri(0, 3, 1),
                tri(0, 4, 0),
                tri(0, 1, 1),
                tri(1, 2, 1),
                tri(0, 4, 1),
                tri(1, 5, 0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn last_target_occurrence_is_held_out() {
        let t = sample();
        let s = leave_one_out_split(&t, 3, &mut SeededRng::new(1, "eval")).unwrap();
        assert_eq!(s.test_items[0], Some(4));
        assert!(s.train.contains(&tri(0, 3, 1)));
        assert!(s.train.contains(&tri(0, 1, 1)));
        assert!(!s.train.contains(&tri(0, 4, 1)));
        // auxiliary copy stays
        assert!(s.train.contains(&tri(0, 4, 0)));
    }

    #[test]
    fn single_target_user_is_train_only() {
        let s = leave_one_out_split(&sample(), 3, &mut SeededRng::new(1, "eval")).unwrap();
        assert_eq!(s.test_items[1], None);
        assert!(s.train.contains(&tri(1, 2, 1)));
        assert!(s.eval_negatives[1].is_empty());
    }

    #[test]
    fn split_is_complete_and_disjoint() {
        let t = sample();
        let s = leave_one_out_split(&t, 3, &mut SeededRng::new(1, "eval")).unwrap();
        let mut all: Vec<Interaction> = s.train.triples().to_vec();
        for (u, item) in s.test_items.iter().enumerate() {
            if let Some(i) = item {
                let held = tri(u, *i, 1);
                assert!(!s.train.contains(&held));
                all.push(held);
            }
        }
        all.sort();
        let mut orig = t.triples().to_vec();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn negatives_avoid_target_items_and_are_reproducible() {
        let t = sample();
        let a = leave_one_out_split(&t, 5, &mut SeededRng::new(7, "eval")).unwrap();
        let b = leave_one_out_split(&t, 5, &mut SeededRng::new(7, "eval")).unwrap();
        assert_eq!(a.eval_negatives, b.eval_negatives);
        assert_eq!(a.eval_negatives[0].len(), 5);
        for n in &a.eval_negatives[0] {
            assert!(![3, 1, 4].contains(n));
        }
        let distinct: HashSet<_> = a.eval_negatives[0].iter().collect();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn empty_tensor_is_an_error() {
        let t = InteractionTensor::new(0, 0, 1, 0, []).unwrap();
        assert!(matches!(
            leave_one_out_split(&t, 99, &mut SeededRng::new(1, "eval")),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn save_and_load_round_trip() {
        let s = leave_one_out_split(&sample(), 4, &mut SeededRng::new(3, "eval")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        assert_eq!(SplitDataset::load(dir.path()).unwrap(), s);
    }
}
