// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use invprobe_ffi::*;

const CLEAN: &str = r#"{"d": 16, "K": 4, "n_per_class": 10, "heads": 2, "seed": 3}"#;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> Option<String> {
    let p = ip_last_error_message();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn synth() -> *mut IpBundle {
    let mut b = ptr::null_mut();
    let cfg = cstr(CLEAN);
    assert_eq!(unsafe { ip_synth_bundle(cfg.as_ptr(), &mut b) }, IpStatus::Ok);
    assert!(!b.is_null());
    b
}

#[test]
fn synth_write_load_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().to_str().unwrap());
    unsafe {
        let b = synth();
        assert_eq!(ip_bundle_write(b, path.as_ptr()), IpStatus::Ok);
        ip_bundle_free(b);

        let mut loaded = ptr::null_mut();
        assert_eq!(ip_bundle_load(path.as_ptr(), &mut loaded), IpStatus::Ok);
        let (mut k, mut n, mut heads, mut d) = (0, 0, 0, 0);
        assert_eq!(ip_bundle_shape(loaded, &mut k, &mut n, &mut heads, &mut d), IpStatus::Ok);
        assert_eq!((k, n, heads, d), (4, 40, 2, 16));

        let mut scores = ptr::null_mut();
        assert_eq!(ip_probe_zeroshot(loaded, &mut scores), IpStatus::Ok);
        assert_eq!(ip_scores_len(scores), 2);
        let mut s = IpHeadScore { layer: 9, head: 9, accuracy: 0.0, n_correct: 0, n_eval: 0 };
        assert_eq!(ip_scores_get(scores, 0, &mut s), IpStatus::Ok);
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.n_eval, 40);
        assert_eq!(ip_scores_get(scores, 2, &mut s), IpStatus::InvalidArgument);
        assert!(last_error().unwrap().contains("out of range"));

        let mut json = ptr::null_mut();
        assert_eq!(ip_scores_to_json(scores, &mut json), IpStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        assert!(text.starts_with('[') && text.contains("\"zeroshot\""));
        ip_string_free(json);
        ip_scores_free(scores);
        ip_bundle_free(loaded);
    }
}

#[test]
fn classify_vector_matches_class_token() {
    unsafe {
        let b = synth();
        let dir = tempfile::tempdir().unwrap();
        let path = cstr(dir.path().to_str().unwrap());
        ip_bundle_write(b, path.as_ptr());
        let tok = cstr(dir.path().join("layer0_head1_class.actbin").to_str().unwrap());
        let mut m = ptr::null_mut();
        assert_eq!(ip_matrix_read(tok.as_ptr(), &mut m), IpStatus::Ok);
        let (mut rows, mut cols) = (0, 0);
        ip_matrix_shape(m, &mut rows, &mut cols);
        assert_eq!((rows, cols), (4, 16));
        let data = std::slice::from_raw_parts(ip_matrix_data(m), rows * cols);
        for k in 0..rows {
            let mut class = usize::MAX;
            let row = &data[k * cols..(k + 1) * cols];
            assert_eq!(ip_classify(b, 0, 1, row.as_ptr(), cols, &mut class), IpStatus::Ok);
            assert_eq!(class, k);
        }
        let mut class = 0;
        assert_eq!(ip_classify(b, 0, 1, data.as_ptr(), 3, &mut class), IpStatus::Shape);
        assert_eq!(ip_classify(b, 0, 7, data.as_ptr(), cols, &mut class), IpStatus::InvalidArgument);
        ip_matrix_free(m);
        ip_bundle_free(b);
    }
}

#[test]
fn trained_methods_with_configs() {
    unsafe {
        let b = synth();
        let mut scores = ptr::null_mut();
        let cfg = cstr(r#"{"epochs": 20}"#);
        assert_eq!(ip_probe_unsupervised(b, cfg.as_ptr(), &mut scores), IpStatus::Ok);
        assert_eq!(ip_scores_len(scores), 2);
        ip_scores_free(scores);

        let cfg = cstr(r#"{"k": 4, "epochs": 5}"#);
        assert_eq!(ip_sae_classify(b, cfg.as_ptr(), &mut scores), IpStatus::Ok);
        assert_eq!(ip_scores_len(scores), 2);
        ip_scores_free(scores);

        let bad = cstr("{not json");
        assert_eq!(ip_sae_classify(b, bad.as_ptr(), &mut scores), IpStatus::InvalidArgument);
        assert!(last_error().unwrap().starts_with("config_json"));
        ip_bundle_free(b);
    }
}

#[test]
fn error_codes() {
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(ip_bundle_load(ptr::null(), &mut b), IpStatus::NullPointer);
        assert_eq!(last_error().as_deref(), Some("dir is null"));

        let missing = cstr("/nonexistent/bundle");
        assert_eq!(ip_bundle_load(missing.as_ptr(), &mut b), IpStatus::Io);
        assert!(b.is_null());

        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("bad.actbin");
        std::fs::write(&f, b"NOPE\x01\0\0\0").unwrap();
        let fp = cstr(f.to_str().unwrap());
        let mut m = ptr::null_mut();
        assert_eq!(ip_matrix_read(fp.as_ptr(), &mut m), IpStatus::Format);

        let infeasible = cstr(r#"{"d": 2, "K": 5, "n_per_class": 1}"#);
        assert_eq!(ip_synth_bundle(infeasible.as_ptr(), &mut b), IpStatus::Infeasible);

        assert_eq!(ip_scores_len(ptr::null()), 0);
        assert!(ip_matrix_data(ptr::null()).is_null());
        ip_bundle_free(ptr::null_mut());
        ip_scores_free(ptr::null_mut());
        ip_matrix_free(ptr::null_mut());
        ip_string_free(ptr::null_mut());

        // success clears the message
        let cfg = cstr(CLEAN);
        assert_eq!(ip_synth_bundle(cfg.as_ptr(), &mut b), IpStatus::Ok);
        assert!(last_error().is_none());
        ip_bundle_free(b);
    }
}

#[test]
fn grok_metrics_json() {
    let cfg = cstr(
        r#"{"p": 5, "d_model": 8, "n_heads": 2, "mlp_width": 16, "max_steps": 4,
            "eval_interval": 2, "probe_epochs": 5}"#,
    );
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(ip_grok_run(cfg.as_ptr(), &mut out), IpStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
        ip_string_free(out);
        assert_eq!(v["config"]["p"], 5);
        assert!(v["fourier_kappa"].is_number());

        let bad = cstr(r#"{"p": 4}"#);
        assert_eq!(ip_grok_run(bad.as_ptr(), &mut out), IpStatus::InvalidArgument);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(ip_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/invprobe.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["ip_bundle_load", "ip_scores_get", "ip_last_error_message", "IP_STATUS_PANIC"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{}\"\nint main(void) {{ IpBundle *b = NULL; return ip_bundle_load(\"x\", &b) == IP_STATUS_OK; }}\n",
            header.display()
        ),
    )
    .unwrap();
    let status = match Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler; header syntax check skipped");
            return;
        }
    };
    assert!(status.success());
}
