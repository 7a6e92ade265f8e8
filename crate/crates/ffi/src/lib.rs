//! C interface. Objects are opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`MixrecStatus`]; on failure the message is available from
//! [`mixrec_last_error_message`] on the same thread. Panics are caught at
//! the boundary and reported as `MIXREC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mixrec::cli::parse_config_text;
use mixrec::corelin::SeededRng;
use mixrec::data::{leave_one_out_split, load_interactions, synth_generate, Schema, SplitDataset, SynthConfig};
use mixrec::eval::evaluate;
use mixrec::model::ForwardState;
use mixrec::train::{tiny_config, tiny_grad_check, Checkpoint, GradCheckOptions, TrainConfig, Trainer};
use mixrec::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixrecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Io = 5,
    Data = 6,
    Numeric = 7,
    Panic = 8,
}

/// A loaded interaction file with its leave-one-out split.
pub struct MixrecDataset {
    split: SplitDataset,
}

pub struct MixrecTrainer {
    trainer: Trainer,
    scoring: Option<ForwardState>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MixrecStatus {
    match e {
        Error::Config(_) => MixrecStatus::Config,
        Error::Parse { .. } | Error::Json(_) => MixrecStatus::Parse,
        Error::Io(_) => MixrecStatus::Io,
        Error::EmptyDataset(_) | Error::Sampling(_) | Error::Corruption(_) | Error::Data(_) => {
            MixrecStatus::Data
        }
        Error::Overflow(_) | Error::Divergence { .. } => MixrecStatus::Numeric,
        _ => MixrecStatus::InvalidArgument,
    }
}

struct Fail(MixrecStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MixrecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MixrecStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MixrecStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MixrecStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MixrecStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mixrec_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mixrec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads `user item behavior` triples from `path` and holds out each
/// user's last target interaction with `eval_negatives` sampled negatives.
/// The target is the last behavior.
///
/// # Safety
/// `path` must be a valid C string; `out_dataset` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mixrec_dataset_load(
    path: *const c_char,
    num_behaviors: usize,
    eval_negatives: usize,
    split_seed: u64,
    out_dataset: *mut *mut MixrecDataset,
) -> MixrecStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        let slot = out(out_dataset, "out_dataset")?;
        if num_behaviors == 0 {
            return Err(Fail(MixrecStatus::InvalidArgument, "num_behaviors is 0".into()));
        }
        let t = load_interactions(&path, &Schema::new(num_behaviors, num_behaviors - 1))?;
        let split = leave_one_out_split(&t, eval_negatives, &mut SeededRng::new(split_seed, "split"))?;
        *slot = Box::into_raw(Box::new(MixrecDataset { split }));
        Ok(())
    })
}

/// Generates planted-intent synthetic data (3 behaviors, default rates)
/// and splits it with 99 negatives, both seeded by `seed`.
///
/// # Safety
/// `out_dataset` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mixrec_dataset_synth(
    num_users: usize,
    num_items: usize,
    seed: u64,
    out_dataset: *mut *mut MixrecDataset,
) -> MixrecStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let d = synth_generate(&SynthConfig {
            num_users,
            num_items,
            seed,
            ..SynthConfig::default()
        })?;
        let split = leave_one_out_split(&d.tensor, 99, &mut SeededRng::new(seed, "split"))?;
        *slot = Box::into_raw(Box::new(MixrecDataset { split }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from a dataset constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mixrec_dataset_free(dataset: *mut MixrecDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Users, items, behaviors and evaluation users, written to `out_sizes[0..4]`.
///
/// # Safety
/// `dataset` must be live; `out_sizes` must hold 4 values.
#[no_mangle]
pub unsafe extern "C" fn mixrec_dataset_sizes(
    dataset: *const MixrecDataset,
    out_sizes: *mut usize,
) -> MixrecStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        if out_sizes.is_null() {
            return Err(null("out_sizes"));
        }
        let t = &d.split.train;
        let v = [t.num_users(), t.num_items(), t.num_behaviors(), d.split.eval_users().len()];
        std::slice::from_raw_parts_mut(out_sizes, 4).copy_from_slice(&v);
        Ok(())
    })
}

fn parse_train_config(text: Option<&str>) -> Result<TrainConfig, Fail> {
    let mut cfg = TrainConfig::default();
    if let Some(t) = text {
        for (k, v) in parse_config_text(t, "config")? {
            cfg.set(&k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates a trainer on the dataset's training part. `config` holds
/// `key=value` lines (null for defaults); unknown keys are rejected.
///
/// # Safety
/// `dataset` must be live; `config` null or a valid C string.
#[no_mangle]
pub unsafe extern "C" fn mixrec_trainer_new(
    dataset: *const MixrecDataset,
    config: *const c_char,
    out_trainer: *mut *mut MixrecTrainer,
) -> MixrecStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let slot = out(out_trainer, "out_trainer")?;
        let text = if config.is_null() { None } else { Some(text(config, "config")?) };
        let cfg = parse_train_config(text)?;
        let trainer = Trainer::new(cfg, &d.split.train)?;
        *slot = Box::into_raw(Box::new(MixrecTrainer {
            trainer,
            scoring: None,
        }));
        Ok(())
    })
}

/// Restores a trainer from a checkpoint file written for the same data.
///
/// # Safety
/// `dataset` must be live; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn mixrec_trainer_load(
    dataset: *const MixrecDataset,
    path: *const c_char,
    out_trainer: *mut *mut MixrecTrainer,
) -> MixrecStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let path = text(path, "path")?;
        let slot = out(out_trainer, "out_trainer")?;
        let ckpt = Checkpoint::load(path)?;
        let trainer = Trainer::from_checkpoint(&ckpt, &d.split.train)?;
        *slot = Box::into_raw(Box::new(MixrecTrainer {
            trainer,
            scoring: None,
        }));
        Ok(())
    })
}

/// # Safety
/// `trainer` must come from a trainer constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mixrec_trainer_free(trainer: *mut MixrecTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Runs one epoch; the total loss and its hinge part go to the optional
/// out-pointers. On divergence the last good parameters are kept and
/// `MIXREC_STATUS_NUMERIC` is returned.
///
/// # Safety
/// `trainer` must be live; the out-pointers null or valid.
#[no_mangle]
pub unsafe extern "C" fn mixrec_trainer_train_epoch(
    trainer: *mut MixrecTrainer,
    out_loss: *mut f64,
    out_hinge: *mut f64,
) -> MixrecStatus {
    guard(|| {
        let t = handle_mut(trainer, "trainer")?;
        t.scoring = None;
        let stats = t.trainer.train_epoch()?;
        if let Some(l) = out_loss.as_mut() {
            *l = stats.loss.total;
        }
        if let Some(h) = out_hinge.as_mut() {
            *h = stats.loss.hinge;
        }
        Ok(())
    })
}

/// Completed epochs.
///
/// # Safety
/// `trainer` must be live or null (null gives 0).
#[no_mangle]
pub unsafe extern "C" fn mixrec_trainer_epoch(trainer: *const MixrecTrainer) -> usize {
    trainer.as_ref().map_or(0, |t| t.trainer.epoch())
}

fn scoring(t: &mut MixrecTrainer) -> Result<&ForwardState, Fail> {
    if t.scoring.is_none() {
        t.scoring = Some(t.trainer.scoring_state()?);
    }
    Ok(t.scoring.as_ref().expect("just computed"))
}

/// HR@`cutoff` and NDCG@`cutoff` on the dataset's held-out items.
///
/// # Safety
/// Handles must be live; out-pointers valid.
#[no_mangle]
pub unsafe extern "C" fn mixrec_trainer_evaluate(
    trainer: *mut MixrecTrainer,
    dataset: *const MixrecDataset,
    cutoff: usize,
    out_hr: *mut f64,
    out_ndcg: *mut f64,
) -> MixrecStatus {
    guard(|| {
        let t = handle_mut(trainer, "trainer")?;
        let d = handle(dataset, "dataset")?;
        let hr = out(out_hr, "out_hr")?;
        let ndcg = out(out_ndcg, "out_ndcg")?;
        if cutoff == 0 {
            return Err(Fail(MixrecStatus::InvalidArgument, "cutoff is 0".into()));
        }
        let m = evaluate(scoring(t)?, &d.split, &[cutoff])?;
        *hr = m.hr_at(cutoff);
        *ndcg = m.ndcg_at(cutoff);
        Ok(())
    })
}

/// Scores `num_items` items for one user into `out_scores`.
///
/// # Safety
/// `items` and `out_scores` must each hold `num_items` values.
#[no_mangle]
pub unsafe extern "C" fn mixrec_trainer_score(
    trainer: *mut MixrecTrainer,
    user: usize,
    items: *const usize,
    num_items: usize,
    out_scores: *mut f64,
) -> MixrecStatus {
    guard(|| {
        let t = handle_mut(trainer, "trainer")?;
        if num_items == 0 {
            return Ok(());
        }
        if items.is_null() {
            return Err(null("items"));
        }
        if out_scores.is_null() {
            return Err(null("out_scores"));
        }
        let items = std::slice::from_raw_parts(items, num_items);
        let scores = scoring(t)?.score_items(user, items)?;
        std::slice::from_raw_parts_mut(out_scores, num_items).copy_from_slice(&scores);
        Ok(())
    })
}

/// Writes a resumable checkpoint.
///
/// # Safety
/// `trainer` must be live; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn mixrec_trainer_save(
    trainer: *const MixrecTrainer,
    path: *const c_char,
) -> MixrecStatus {
    guard(|| {
        let t = handle(trainer, "trainer")?;
        let path = text(path, "path")?;
        t.trainer.checkpoint().save(path)?;
        Ok(())
    })
}

/// Finite-difference check of the full objective on the built-in tiny
/// instance; the largest relative error goes to `out_max_rel`.
///
/// # Safety
/// `out_max_rel` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mixrec_gradcheck_tiny(seed: u64, out_max_rel: *mut f64) -> MixrecStatus {
    guard(|| {
        let slot = out(out_max_rel, "out_max_rel")?;
        let r = tiny_grad_check(&tiny_config(), seed, &GradCheckOptions::default())?;
        *slot = r.max_rel;
        Ok(())
    })
}
