use std::ffi::{CStr, CString};
use std::ptr;

use mixrec_ffi::*;

fn last_error() -> String {
    let p = mixrec_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn synth() -> *mut MixrecDataset {
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { mixrec_dataset_synth(150, 80, 3, &mut d) }, MixrecStatus::Ok);
    d
}

const SMALL: &str = "dim = 8\nhyperedges = 4\nbatch_size = 64\nlr = 0.01\n";

#[test]
fn train_evaluate_score_and_resume() {
    let d = synth();
    let mut sizes = [0usize; 4];
    assert_eq!(unsafe { mixrec_dataset_sizes(d, sizes.as_mut_ptr()) }, MixrecStatus::Ok);
    assert_eq!(&sizes[..3], &[150, 80, 3]);
    assert!(sizes[3] > 0);

    let cfg = CString::new(SMALL).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { mixrec_trainer_new(d, cfg.as_ptr(), &mut t) }, MixrecStatus::Ok);
    let (mut loss, mut hinge) = (0.0, 0.0);
    assert_eq!(unsafe { mixrec_trainer_train_epoch(t, &mut loss, &mut hinge) }, MixrecStatus::Ok);
    assert!(loss.is_finite() && hinge > 0.0 && loss >= hinge);
    assert_eq!(unsafe { mixrec_trainer_epoch(t) }, 1);

    let (mut hr, mut ndcg) = (f64::NAN, f64::NAN);
    assert_eq!(unsafe { mixrec_trainer_evaluate(t, d, 10, &mut hr, &mut ndcg) }, MixrecStatus::Ok);
    assert!((0.0..=1.0).contains(&hr) && ndcg <= hr);

    let items = [0usize, 5, 7];
    let mut scores = [0.0; 3];
    assert_eq!(
        unsafe { mixrec_trainer_score(t, 2, items.as_ptr(), 3, scores.as_mut_ptr()) },
        MixrecStatus::Ok
    );
    assert!(scores.iter().all(|s| s.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("c.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mixrec_trainer_save(t, path.as_ptr()) }, MixrecStatus::Ok);
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { mixrec_trainer_load(d, path.as_ptr(), &mut r) }, MixrecStatus::Ok);
    assert_eq!(unsafe { mixrec_trainer_epoch(r) }, 1);
    unsafe {
        mixrec_trainer_train_epoch(t, &mut loss, ptr::null_mut());
        let mut resumed = 0.0;
        mixrec_trainer_train_epoch(r, &mut resumed, ptr::null_mut());
        assert_eq!(loss.to_bits(), resumed.to_bits());
        let mut again = [0.0; 3];
        mixrec_trainer_score(t, 2, items.as_ptr(), 3, scores.as_mut_ptr());
        mixrec_trainer_score(r, 2, items.as_ptr(), 3, again.as_mut_ptr());
        assert_eq!(scores, again);
        mixrec_trainer_free(t);
        mixrec_trainer_free(r);
        mixrec_dataset_free(d);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut d = ptr::null_mut();
    let missing = CString::new("/nonexistent/x.tsv").unwrap();
    assert_eq!(unsafe { mixrec_dataset_load(missing.as_ptr(), 3, 99, 0, &mut d) }, MixrecStatus::Io);
    assert!(d.is_null());
    assert!(last_error().contains("/nonexistent"));

    assert_eq!(
        unsafe { mixrec_dataset_load(ptr::null(), 3, 99, 0, &mut d) },
        MixrecStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "0 0 0\n0 zz 1\n").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mixrec_dataset_load(bad.as_ptr(), 3, 99, 0, &mut d) }, MixrecStatus::Parse);

    let ds = synth();
    let cfg = CString::new("dim = 8\nwarp_speed = 9\n").unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { mixrec_trainer_new(ds, cfg.as_ptr(), &mut t) }, MixrecStatus::Config);
    assert!(last_error().contains("warp_speed"));
    assert!(t.is_null());

    let cfg = CString::new(SMALL).unwrap();
    assert_eq!(unsafe { mixrec_trainer_new(ds, cfg.as_ptr(), &mut t) }, MixrecStatus::Ok);
    let items = [0usize, 1000];
    let mut s = [0.0; 2];
    assert_eq!(
        unsafe { mixrec_trainer_score(t, 0, items.as_ptr(), 2, s.as_mut_ptr()) },
        MixrecStatus::InvalidArgument
    );
    let (mut hr, mut ndcg) = (0.0, 0.0);
    assert_eq!(
        unsafe { mixrec_trainer_evaluate(t, ds, 0, &mut hr, &mut ndcg) },
        MixrecStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { mixrec_trainer_train_epoch(ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) },
        MixrecStatus::NullPointer
    );
    unsafe {
        mixrec_trainer_free(t);
        mixrec_dataset_free(ds);
        mixrec_trainer_free(ptr::null_mut());
        mixrec_dataset_free(ptr::null_mut());
    }
}

#[test]
fn divergence_is_numeric() {
    let ds = synth();
    let cfg = CString::new(format!("{SMALL}lr = 1e200\noptimizer = sgd\n")).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { mixrec_trainer_new(ds, cfg.as_ptr(), &mut t) }, MixrecStatus::Ok);
    let mut status = MixrecStatus::Ok;
    for _ in 0..3 {
        status = unsafe { mixrec_trainer_train_epoch(t, ptr::null_mut(), ptr::null_mut()) };
        if status != MixrecStatus::Ok {
            break;
        }
    }
    assert_eq!(status, MixrecStatus::Numeric);
    unsafe {
        mixrec_trainer_free(t);
        mixrec_dataset_free(ds);
    }
}

#[test]
fn gradcheck_and_version() {
    let mut e = 1.0;
    assert_eq!(unsafe { mixrec_gradcheck_tiny(0, &mut e) }, MixrecStatus::Ok);
    assert!(e < 1e-6, "{e}");
    let v = unsafe { CStr::from_ptr(mixrec_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
