use super::*;
use crate::corelin::{DenseMatrix, SeededRng};
use crate::data::{random_tensor, InteractionTensor, PairBatch, PairEntry};
use crate::graph::{BehaviorAdjacency, Side};
use crate::model::{forward, Corruption, ForwardState, ModelParams, ParamGroup};
use crate::ssl::{graph_cl_loss, node_cl_loss};

fn tiny_cfg() -> TrainConfig {
    tiny_config()
}

struct Fixture {
    adj: BehaviorAdjacency,
    params: ModelParams,
    batch: PairBatch,
}

fn fixture(cfg: &TrainConfig, seed: u64) -> Fixture {
    let t = tiny_instance(cfg, seed).unwrap();
    Fixture {
        adj: t.adj,
        params: t.params,
        batch: t.batch,
    }
}

fn run_forward(f: &Fixture, cfg: &TrainConfig) -> ForwardState {
    let mut opts = cfg.forward_options(3, true);
    opts.dropout = crate::graph::DropoutSpec::off();
    let mut rng = SeededRng::new(1, "corruption");
    forward(&f.params, &f.adj, &opts, 0, Corruption::Sample(&mut rng)).unwrap()
}

#[test]
fn hinge_examples() {
    assert_eq!(hinge_loss(&[3.0], &[1.0]).unwrap(), 0.0);
    assert_eq!(hinge_loss(&[0.4, 0.4], &[0.4, 0.4]).unwrap(), 2.0);
    assert!((hinge_loss(&[1.3], &[1.0]).unwrap() - 0.7).abs() < 1e-12);
    assert!(matches!(
        hinge_loss(&[1.0], &[]),
        Err(crate::Error::Shape { .. })
    ));
}

#[test]
fn zero_lambdas_leave_only_hinge() {
    let cfg = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        ..tiny_cfg()
    };
    let f = fixture(&cfg, 1);
    let s = run_forward(&f, &cfg);
    let l = total_loss(&s, &f.params, &f.adj, &f.batch, &cfg).unwrap();
    assert_eq!(l.total, l.hinge);
    assert!(l.hinge > 0.0);
}

#[test]
fn zero_params_and_empty_batch_give_zero() {
    let cfg = tiny_cfg();
    let mut f = fixture(&cfg, 2);
    f.params = ModelParams::zeros(f.params.dims()).unwrap();
    let s = run_forward(&f, &cfg);
    let l = total_loss(&s, &f.params, &f.adj, &PairBatch::default(), &cfg).unwrap();
    assert_eq!(l.total, 0.0);
}

/// Recomputes every component from the forward cache with direct calls.
#[test]
fn total_is_sum_of_recomputed_components() {
    let cfg = TrainConfig {
        no_meta: true,
        ..tiny_cfg()
    };
    let f = fixture(&cfg, 3);
    let s = run_forward(&f, &cfg);
    let l = total_loss(&s, &f.params, &f.adj, &f.batch, &cfg).unwrap();

    let mut hinge = 0.0;
    for e in &f.batch.entries {
        let d = s.predict(e.user, e.positive).unwrap() - s.predict(e.user, e.negative).unwrap();
        hinge += (1.0 - d).max(0.0);
    }
    let reg: f64 = cfg.lambda1
        * f.params
            .tables()
            .iter()
            .take(8)
            .map(|t| t.frobenius_sq())
            .sum::<f64>();
    let cc = cfg.contrast();
    let mut node = 0.0;
    let mut graph = 0.0;
    for layer in &s.layers {
        for side in Side::BOTH {
            let h = layer.side(side).hyper.as_ref().unwrap();
            let views: Vec<DenseMatrix> = h.per_behavior.iter().map(|b| b.pass.h.clone()).collect();
            let rows = match side {
                Side::User => f.batch.users(),
                Side::Item => f.batch.items(),
            };
            let all: Vec<usize> = (0..views[0].rows()).collect();
            node += node_cl_loss(&views, 2, &rows, &all, &cc).unwrap().0 / 2.0;
            if side == Side::User {
                let c = h.per_behavior[2].corrupted.as_ref().unwrap().readout();
                graph += graph_cl_loss(&h.readouts(), &c, 2).unwrap().0 / 2.0;
            }
        }
    }
    let want = hinge + reg + cfg.lambda2 * node + cfg.lambda3 * graph;
    assert!((l.total - want).abs() < 1e-10, "{} vs {want}", l.total);
    assert!((l.hinge - hinge).abs() < 1e-12);
    assert!((l.node_cl - node).abs() < 1e-10);
    assert!((l.graph_cl - graph).abs() < 1e-10);
}

#[test]
fn slack_margins_give_pure_weight_decay() {
    let cfg = TrainConfig {
        lambda2: 0.0,
        lambda3: 0.0,
        ..tiny_cfg()
    };
    let mut f = fixture(&cfg, 4);
    for t in f.params.tables_mut()[..2].iter_mut() {
        *t = t.scale(4.0);
    }
    let s = run_forward(&f, &cfg);
    let mut entries = Vec::new();
    for u in 0..6 {
        for p in 0..5 {
            for n in 0..5 {
                if s.predict(u, p).unwrap() - s.predict(u, n).unwrap() > 1.5 {
                    entries.push(PairEntry {
                        user: u,
                        positive: p,
                        negative: n,
                    });
                }
            }
        }
    }
    assert!(!entries.is_empty());
    let batch = PairBatch {
        entries,
        pairs_per_user: 1,
    };
    let g = backward(&s, &f.params, &f.adj, &batch, &cfg).unwrap();
    for (gt, pt) in g.tables.iter().zip(f.params.tables()) {
        assert_eq!(gt, &pt.scale(2.0 * cfg.lambda1));
    }
}

#[test]
fn zero_params_give_zero_gradient() {
    let cfg = tiny_cfg();
    let mut f = fixture(&cfg, 5);
    f.params = ModelParams::zeros(f.params.dims()).unwrap();
    let s = run_forward(&f, &cfg);
    let (l, g) = loss_and_grad(&s, &f.params, &f.adj, &f.batch, &cfg).unwrap();
    assert_eq!(l.hinge, f.batch.len() as f64);
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn stale_cache_is_detected() {
    let cfg = tiny_cfg();
    let mut f = fixture(&cfg, 6);
    let s = run_forward(&f, &cfg);
    f.params.tables_mut()[0].set(0, 0, 0.5);
    assert!(matches!(
        backward(&s, &f.params, &f.adj, &f.batch, &cfg),
        Err(crate::Error::StaleCache)
    ));
}

#[test]
fn quadratic_only_loss_checks_to_1e9() {
    let cfg = TrainConfig {
        lambda2: 0.0,
        lambda3: 0.0,
        ..tiny_cfg()
    };
    let f = fixture(&cfg, 7);
    let r = grad_check(
        &f.params,
        &f.adj,
        &PairBatch::default(),
        &cfg,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel < 1e-9, "{}", r.max_rel);
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let cfg = tiny_cfg();
    for seed in 0..3 {
        let f = fixture(&cfg, 10 + seed);
        let r = grad_check(
            &f.params,
            &f.adj,
            &f.batch,
            &cfg,
            &GradCheckOptions::default(),
        )
        .unwrap();
        for fam in ["embeddings", "hyperedges", "meta_weights", "meta_biases"] {
            assert!(r.families[fam].checked > 0, "{fam} not covered");
        }
        assert!(r.max_rel < 1e-6, "seed {seed}: {:#?}", r.families);
    }
}

#[test]
fn variant_gradients_match_finite_differences() {
    let variants: [(&str, &str); 7] = [
        ("include_positive", "false"),
        ("incidence", "softmax"),
        ("graph_cl_item_side", "true"),
        ("full_denominator", "false"),
        ("no_meta", "true"),
        ("no_intents", "true"),
        ("slope", "1"),
    ];
    for (k, v) in variants {
        let mut cfg = tiny_cfg();
        cfg.set(k, v).unwrap();
        let f = fixture(&cfg, 0);
        let r = grad_check(
            &f.params,
            &f.adj,
            &f.batch,
            &cfg,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel < 1e-6, "{k}={v}: {:#?}", r.families);
    }
}

#[test]
fn ablations_zero_their_gradient_paths() {
    let base = tiny_cfg();
    let f = fixture(&base, 8);
    let grads = |cfg: &TrainConfig| {
        let s = run_forward(&f, cfg);
        backward(&s, &f.params, &f.adj, &f.batch, cfg).unwrap()
    };
    let meta_zero = |g: &GradientSet| {
        f.params
            .groups()
            .iter()
            .zip(&g.tables)
            .filter(|(p, _)| {
                matches!(
                    p,
                    ParamGroup::MetaWeight { .. } | ParamGroup::MetaBias { .. }
                )
            })
            .all(|(_, t)| t.max_abs_diff(&DenseMatrix::zeros(t.rows(), t.cols())) == 0.0)
    };

    let g = grads(&TrainConfig {
        no_meta: true,
        ..base.clone()
    });
    assert!(meta_zero(&g));

    let g = grads(&TrainConfig {
        no_node_cl: true,
        ..base.clone()
    });
    assert!(meta_zero(&g));
    let g0 = grads(&TrainConfig {
        lambda2: 0.0,
        no_meta: true,
        ..base.clone()
    });
    assert_eq!(g.tables[..8], g0.tables[..8]);

    let g = grads(&TrainConfig {
        no_graph_cl: true,
        ..base.clone()
    });
    let g0 = grads(&TrainConfig {
        lambda3: 0.0,
        ..base.clone()
    });
    assert_eq!(g.tables, g0.tables);

    let g = grads(&TrainConfig {
        no_intents: true,
        ..base.clone()
    });
    for side in Side::BOTH {
        for k in 0..3 {
            let t = g.get(&f.params, ParamGroup::Hyperedges { side, behavior: k });
            assert_eq!(t.max_abs(), 0.0);
        }
    }
}

trait MaxAbs {
    fn max_abs(&self) -> f64;
}

impl MaxAbs for DenseMatrix {
    fn max_abs(&self) -> f64 {
        self.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn small_trainer(cfg: TrainConfig) -> (Trainer, InteractionTensor) {
    let train = random_tensor(40, 30, 3, 0.15, 3).unwrap();
    (Trainer::new(cfg, &train).unwrap(), train)
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        dim: 8,
        hyperedges: 4,
        batch_size: 16,
        lr: 1e-2,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_keeps_params() {
    let (mut t, _) = small_trainer(TrainConfig {
        lr: 0.0,
        ..small_cfg()
    });
    let before = t.params().tables().to_vec();
    t.train_epoch().unwrap();
    assert_eq!(t.params().tables(), &before[..]);
}

#[test]
fn training_is_deterministic() {
    let (mut a, _) = small_trainer(small_cfg());
    let (mut b, _) = small_trainer(small_cfg());
    for _ in 0..2 {
        let (mut x, mut y) = (a.train_epoch().unwrap(), b.train_epoch().unwrap());
        x.wall_secs = 0.0;
        y.wall_secs = 0.0;
        assert_eq!(x, y);
    }
    assert_eq!(a.params().tables(), b.params().tables());
}

#[test]
fn checkpoint_resume_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (mut a, train) = small_trainer(small_cfg());
    a.train_epoch().unwrap();
    let path = dir.path().join("ckpt.json");
    a.checkpoint().save(&path).unwrap();
    a.train_epoch().unwrap();

    let mut b = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap(), &train).unwrap();
    b.train_epoch().unwrap();
    assert_eq!(a.checkpoint(), b.checkpoint());
}

#[test]
fn checkpoint_refuses_other_data() {
    let (a, _) = small_trainer(small_cfg());
    let other = random_tensor(40, 30, 3, 0.15, 4).unwrap();
    assert!(matches!(
        Trainer::from_checkpoint(&a.checkpoint(), &other),
        Err(crate::Error::Data(_))
    ));
}

#[test]
fn divergence_restores_last_good_params() {
    let (mut t, _) = small_trainer(TrainConfig {
        lr: 1e200,
        optimizer: OptimizerKind::Sgd,
        ..small_cfg()
    });
    let before = t.params().tables().to_vec();
    let err = t.train_epoch().unwrap_err();
    assert!(matches!(err, crate::Error::Divergence { .. }), "{err}");
    assert_eq!(t.params().tables(), &before[..]);
}

#[test]
fn epoch_counters_follow_graph_size() {
    let (mut t, train) = small_trainer(small_cfg());
    let s = t.train_epoch().unwrap();
    // one forward per batch, L layers, both directions
    let per_forward = (2 * 2 * train.nnz()) as u64;
    assert_eq!(s.counters.messages, per_forward * s.batches as u64);
}
