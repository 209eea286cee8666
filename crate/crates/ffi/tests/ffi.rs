use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use medc::data::{compute_label_stats, generate_synthetic, write_feature_file, CountSpec, SyntheticConfig};
use medc::model::ModelConfig;
use medc::training::{run_training, TrainConfig, Trainer};
use medc_ffi::*;

fn last_error() -> String {
    let p = medc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

/// Writes train/test feature files and a 1-epoch checkpoint.
fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let syn = generate_synthetic(&SyntheticConfig {
        num_classes: 3,
        feature_dim: 4,
        frames: 2,
        counts: CountSpec::Explicit(vec![12, 6, 3]),
        test_per_class: 3,
        seed: 5,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let test = dir.join("test.medc");
    write_feature_file(&test, &syn.test).unwrap();
    let stats = compute_label_stats(&syn.train.records, 3, 10, 4).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        learning_rate: 1e-2,
        model: ModelConfig {
            trunk_dim: 6,
            hidden_dim: 6,
            embed_dim: 3,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = run_training(Trainer::new(cfg, &syn.train, stats, 1).unwrap(), &syn.train, Some(dir)).unwrap();
    (out.checkpoints.last().unwrap().clone(), test)
}

#[test]
fn average_precision_through_the_abi() {
    let scores = [0.9, 0.8, 0.7];
    let pos = [1u8, 0, 1];
    let mut ap = 0.0;
    let st = unsafe { medc_average_precision(scores.as_ptr(), pos.as_ptr(), 3, &mut ap) };
    assert_eq!(st, MedcStatus::Ok);
    assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
    assert!(medc_last_error().is_null());

    let none = [0u8; 3];
    let st = unsafe { medc_average_precision(scores.as_ptr(), none.as_ptr(), 3, &mut ap) };
    assert_eq!(st, MedcStatus::NoPositives);
    assert!(last_error().contains("positive"));

    let st = unsafe { medc_average_precision(ptr::null(), pos.as_ptr(), 3, &mut ap) };
    assert_eq!(st, MedcStatus::NullPointer);
}

#[test]
fn dataset_and_model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, test) = fixture(dir.path());

    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { medc_dataset_read(cpath(&test).as_ptr(), &mut ds) }, MedcStatus::Ok);
    assert_eq!(unsafe { medc_dataset_num_records(ds) }, 9);
    assert_eq!(unsafe { medc_dataset_num_classes(ds) }, 3);

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { medc_model_load(cpath(&ckpt).as_ptr(), &mut m) }, MedcStatus::Ok);
    assert_eq!(unsafe { medc_model_num_classes(m) }, 3);
    assert_eq!(unsafe { medc_model_input_dim(m) }, 4);

    let clip = [0.1f64; 8];
    let mut probs = [0.0f64; 3];
    let st = unsafe { medc_model_predict(m, clip.as_ptr(), 2, 4, probs.as_mut_ptr(), 3) };
    assert_eq!(st, MedcStatus::Ok);
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));

    let st = unsafe { medc_model_predict(m, clip.as_ptr(), 2, 4, probs.as_mut_ptr(), 2) };
    assert_eq!(st, MedcStatus::ShapeMismatch);
    let st = unsafe { medc_model_predict(m, clip.as_ptr(), 4, 2, probs.as_mut_ptr(), 3) };
    assert_eq!(st, MedcStatus::ShapeMismatch);

    let mut metrics = MedcMetrics::default();
    assert_eq!(unsafe { medc_model_evaluate(m, ds, &mut metrics) }, MedcStatus::Ok);
    assert!((0.0..=1.0).contains(&metrics.overall_map));
    assert!(metrics.acc_at_5 == 1.0, "C=3 so every record has a positive in its top 5");

    unsafe {
        medc_model_free(m);
        medc_dataset_free(ds);
        medc_model_free(ptr::null_mut());
        medc_dataset_free(ptr::null_mut());
    }
}

#[test]
fn bad_files_report_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bad.medc");
    std::fs::write(&bogus, b"NOPE0000000000000000000000000000").unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { medc_dataset_read(cpath(&bogus).as_ptr(), &mut ds) }, MedcStatus::ParseError);
    assert!(last_error().contains("byte 0"));
    assert!(ds.is_null());

    let missing = dir.path().join("missing.json");
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { medc_model_load(cpath(&missing).as_ptr(), &mut m) }, MedcStatus::IoError);
    assert_eq!(unsafe { medc_model_load(ptr::null(), &mut m) }, MedcStatus::NullPointer);
}

#[test]
fn gradcheck_through_the_abi() {
    let mut err = f64::NAN;
    assert_eq!(unsafe { medc_gradcheck(7, &mut err) }, MedcStatus::Ok);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(medc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "medc.h"
int main(void) {
    MedcDataset *ds = NULL;
    MedcModel *m = NULL;
    MedcMetrics metrics;
    double ap = 0.0;
    double s[2] = {0.2, 0.1};
    uint8_t p[2] = {1, 0};
    MedcStatus st = medc_average_precision(s, p, 2, &ap);
    if (st != MEDC_STATUS_OK) return 1;
    (void)medc_dataset_read("x", &ds);
    (void)medc_model_load("y", &m);
    (void)medc_model_evaluate(m, ds, &metrics);
    medc_model_free(m);
    medc_dataset_free(ds);
    return medc_last_error() == NULL ? 0 : 2;
}
"#,
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&header)
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler on PATH; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
