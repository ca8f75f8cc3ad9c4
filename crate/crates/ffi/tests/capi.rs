use std::ffi::{CStr, CString};
use std::ptr;

use dibc_ffi::*;

fn last_error() -> String {
    let p = dibc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Two well separated blobs in the plane.
fn blobs() -> (Vec<f64>, Vec<u32>) {
    let mut values = Vec::new();
    let mut truth = Vec::new();
    for i in 0..60 {
        let (cx, label) = if i % 2 == 0 { (-10.0, 1) } else { (10.0, 2) };
        let u = (i as f64 * 0.37).sin();
        let v = (i as f64 * 0.91).cos();
        values.extend([cx + u, v]);
        truth.push(label);
    }
    (values, truth)
}

fn small_config() -> DibcFitConfig {
    DibcFitConfig {
        workers: 2,
        clusters: 4,
        subcomponents: 2,
        iterations: 80,
        burn_in: 40,
        refine_samples: 8,
        candidates: 4,
        param_iterations: 60,
        param_burn_in: 30,
        seed: 5,
        ..dibc_fit_config_default()
    }
}

#[test]
fn null_arguments_are_rejected() {
    let mut out = 0.0;
    let a = [1u32, 2];
    let status = unsafe { dibc_vi_distance(ptr::null(), a.as_ptr(), 2, &mut out) };
    assert_eq!(status, DibcStatus::InvalidArgument);
    assert!(last_error().contains("null"));

    let status = unsafe { dibc_draws_load(ptr::null(), ptr::null_mut()) };
    assert_eq!(status, DibcStatus::InvalidArgument);
    unsafe {
        dibc_draws_free(ptr::null_mut());
        dibc_fit_result_free(ptr::null_mut());
    }
}

#[test]
fn vi_and_metrics() {
    let a = [1u32, 1, 2, 2];
    let b = [1u32, 2, 1, 2];
    let mut vi = -1.0;
    assert_eq!(unsafe { dibc_vi_distance(a.as_ptr(), b.as_ptr(), 4, &mut vi) }, DibcStatus::Ok);
    assert!((vi - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!(dibc_last_error().is_null());

    let swapped = [2u32, 2, 1, 1];
    let mut m = DibcMetrics::default();
    assert_eq!(unsafe { dibc_metrics(a.as_ptr(), swapped.as_ptr(), 4, &mut m) }, DibcStatus::Ok);
    assert_eq!((m.accuracy, m.ari, m.f_measure), (1.0, 1.0, 1.0));

    let short = [1u32; 3];
    let status = unsafe { dibc_metrics(short.as_ptr(), short.as_ptr(), 0, &mut m) };
    assert_eq!(status, DibcStatus::Data);
}

#[test]
fn missing_draws_file_is_an_io_error() {
    let file = CString::new("/nonexistent/draws.bin").unwrap();
    let mut draws = ptr::null_mut();
    assert_eq!(unsafe { dibc_draws_load(file.as_ptr(), &mut draws) }, DibcStatus::Io);
    assert!(draws.is_null());
    assert!(last_error().contains("draws.bin"));
}

#[test]
fn fit_classify_predict_roundtrip() {
    let (values, truth) = blobs();
    let n = truth.len();
    let cfg = small_config();
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { dibc_fit(values.as_ptr(), n, 2, &cfg, &mut fit) }, DibcStatus::Ok);
    assert_eq!(unsafe { dibc_fit_result_len(fit) }, n);

    let mut clusters = vec![0u32; n];
    let mut subs = vec![0u32; n];
    let status = unsafe { dibc_fit_result_labels(fit, clusters.as_mut_ptr(), subs.as_mut_ptr()) };
    assert_eq!(status, DibcStatus::Ok);
    assert!(subs.iter().all(|&s| (1..=2).contains(&s)));
    let mut m = DibcMetrics::default();
    unsafe { dibc_metrics(truth.as_ptr(), clusters.as_ptr(), n, &mut m) };
    assert_eq!(m.ari, 1.0);

    let mut draws = ptr::null_mut();
    assert_eq!(unsafe { dibc_fit_result_draws(fit, &mut draws) }, DibcStatus::Ok);
    unsafe { dibc_fit_result_free(fit) };

    let dir = tempfile::tempdir().unwrap();
    let file = CString::new(dir.path().join("d.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dibc_draws_save(draws, file.as_ptr()) }, DibcStatus::Ok);
    unsafe { dibc_draws_free(draws) };
    let mut draws = ptr::null_mut();
    assert_eq!(unsafe { dibc_draws_load(file.as_ptr(), &mut draws) }, DibcStatus::Ok);
    let k = unsafe { dibc_draws_clusters(draws) };
    assert_eq!(unsafe { dibc_draws_dim(draws) }, 2);
    assert_eq!(k, 2);
    assert!(unsafe { dibc_draws_count(draws) } > 0);

    let mut labels = vec![0u32; n];
    let mut probs = vec![0.0; n * k];
    let status = unsafe { dibc_classify(draws, values.as_ptr(), n, 2, labels.as_mut_ptr(), probs.as_mut_ptr()) };
    assert_eq!(status, DibcStatus::Ok);
    unsafe { dibc_metrics(truth.as_ptr(), labels.as_ptr(), n, &mut m) };
    assert_eq!(m.ari, 1.0);
    for row in probs.chunks(k) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let status = unsafe { dibc_classify(draws, values.as_ptr(), n / 2, 1, labels.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(status, DibcStatus::InvalidArgument);

    let mut sim = vec![0.0; 200 * 2];
    let mut tags = vec![0u32; 200];
    let status = unsafe { dibc_predict(draws, 200, 3, sim.as_mut_ptr(), tags.as_mut_ptr()) };
    assert_eq!(status, DibcStatus::Ok);
    assert!(tags.iter().all(|t| clusters.contains(t)));
    assert!(sim.iter().all(|v| v.is_finite()));
    unsafe { dibc_draws_free(draws) };
}

#[test]
fn bad_config_reports_data_error() {
    let (values, truth) = blobs();
    let cfg = DibcFitConfig {
        candidates: 100,
        ..small_config()
    };
    let mut fit = ptr::null_mut();
    let status = unsafe { dibc_fit(values.as_ptr(), truth.len(), 2, &cfg, &mut fit) };
    assert_eq!(status, DibcStatus::Data);
    assert!(fit.is_null());
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dibc.h")).unwrap();
    for name in ["dibc_fit", "dibc_classify", "dibc_last_error", "DIBC_STATUS_INVALID_ARGUMENT", "typedef struct DibcDraws"] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
