//! Compiles and runs a C program against the generated header and the
//! shared library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "mixrec.h"

int main(void) {
    MixrecDataset *d = NULL;
    if (mixrec_dataset_synth(100, 60, 1, &d) != MIXREC_STATUS_OK) return 10;
    MixrecTrainer *t = NULL;
    if (mixrec_trainer_new(d, "dim = 8\nhyperedges = 4\n", &t) != MIXREC_STATUS_OK) return 11;
    double loss = 0.0, hr = 0.0, ndcg = 0.0;
    if (mixrec_trainer_train_epoch(t, &loss, NULL) != MIXREC_STATUS_OK) return 12;
    if (mixrec_trainer_evaluate(t, d, 10, &hr, &ndcg) != MIXREC_STATUS_OK) return 13;
    MixrecTrainer *bad = NULL;
    if (mixrec_trainer_new(d, "nope = 1", &bad) != MIXREC_STATUS_CONFIG) return 14;
    if (mixrec_last_error_message() == NULL) return 15;
    printf("loss %.6f hr %.4f version %s\n", loss, hr, mixrec_version());
    mixrec_trainer_free(t);
    mixrec_dataset_free(d);
    return 0;
}
"#;

fn lib_dir() -> PathBuf {
    // target/<profile>/deps/<test> -> target/<profile>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let lib = lib_dir();
    assert!(
        lib.join("libmixrec_ffi.so").exists(),
        "shared library not found in {}",
        lib.display()
    );
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg("-L")
        .arg(&lib)
        .arg("-lmixrec_ffi")
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&bin).env("LD_LIBRARY_PATH", &lib).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("loss "), "{text}");
}
