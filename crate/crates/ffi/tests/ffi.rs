use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use avloc_ffi::*;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn path_c(p: &Path) -> CString {
    cstr(p.to_str().unwrap())
}

/// Takes ownership of a library string.
unsafe fn take(p: *mut c_char) -> String {
    assert!(!p.is_null());
    let s = CStr::from_ptr(p).to_str().unwrap().to_owned();
    avloc_string_free(p);
    s
}

unsafe fn last_error() -> String {
    take(avloc_last_error_message())
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> AvlocBox {
    AvlocBox { x1, y1, x2, y2 }
}

#[test]
fn iou_and_box_ops() {
    unsafe {
        let mut v = 0.0;
        assert_eq!(avloc_iou(bx(0., 0., 10., 10.), bx(0., 0., 10., 10.), &mut v), AvlocStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(avloc_iou(bx(0., 0., 10., 10.), bx(20., 20., 30., 30.), &mut v), AvlocStatus::Ok);
        assert_eq!(v, 0.0);
        assert_eq!(avloc_iou(bx(5., 0., 5., 10.), bx(0., 0., 1., 1.), &mut v), AvlocStatus::DegenerateBox);

        let mut out = bx(0., 0., 0., 0.);
        let b = bx(50., 50., 100., 100.);
        assert_eq!(avloc_box_delta(b, 4., -2., 1., 0., 0., 3., 224, 224, &mut out), AvlocStatus::Ok);
        assert_eq!(out, bx(55., 48., 104., 101.));
        assert_eq!(avloc_box_expand_shrink(b, -5., 224, 224, &mut out), AvlocStatus::Ok);
        assert_eq!(out, bx(55., 55., 95., 95.));
        assert_eq!(avloc_box_recenter(b, 112., 112., 224, 224, &mut out), AvlocStatus::Ok);
        assert_eq!(out, bx(87., 87., 137., 137.));
        assert_eq!(avloc_box_expand_shrink(b, -30., 224, 224, &mut out), AvlocStatus::DegenerateBox);
        assert!(last_error().contains("degenerate"));
    }
}

#[test]
fn validate_clamps_and_rejects() {
    unsafe {
        let mut out = bx(0., 0., 0., 0.);
        assert_eq!(avloc_box_validate(bx(-3., 10., 230., 50.), 224, 224, &mut out), AvlocStatus::Ok);
        assert_eq!(out, bx(0., 10., 224., 50.));
        assert_eq!(avloc_box_validate(bx(0., 0., 10., 10.), 0, 224, &mut out), AvlocStatus::InvalidArgument);
        assert_eq!(
            avloc_box_validate(bx(f64::NAN, 0., 10., 10.), 224, 224, &mut out),
            AvlocStatus::InvalidArgument
        );
        assert_eq!(avloc_box_validate(bx(0., 0., 10., 10.), 224, 224, ptr::null_mut()), AvlocStatus::NullArgument);
    }
}

#[test]
fn error_message_clears_on_success() {
    unsafe {
        let mut v = 0.0;
        assert_eq!(avloc_iou(bx(1., 1., 1., 1.), bx(0., 0., 1., 1.), &mut v), AvlocStatus::DegenerateBox);
        assert!(!avloc_last_error_message().is_null());
        avloc_string_free(avloc_last_error_message());
        assert_eq!(avloc_iou(bx(0., 0., 1., 1.), bx(0., 0., 1., 1.), &mut v), AvlocStatus::Ok);
        assert!(avloc_last_error_message().is_null());
        avloc_string_free(ptr::null_mut());
    }
}

#[test]
fn parse_reply_repairs_and_reports() {
    unsafe {
        let mut out = ptr::null_mut();
        let raw = cstr(r#"Here you go: {"audio_class": "FLUTE", "audio_confidence": 0.82}"#);
        assert_eq!(avloc_parse_reply(cstr("gen_aud").as_ptr(), raw.as_ptr(), &mut out), AvlocStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(v["reply"]["audio_class"], "flute");
        assert_eq!(v["reply"]["audio_confidence_score"], 0.82);
        assert!(!v["repair_notes"].as_array().unwrap().is_empty());

        let prose = cstr("no structure here");
        assert_eq!(avloc_parse_reply(cstr("refine").as_ptr(), prose.as_ptr(), &mut out), AvlocStatus::ParseError);
        assert_eq!(avloc_parse_reply(cstr("bogus").as_ptr(), raw.as_ptr(), &mut out), AvlocStatus::InvalidArgument);
        assert!(last_error().contains("bogus"));
        assert_eq!(avloc_parse_reply(ptr::null(), raw.as_ptr(), &mut out), AvlocStatus::NullArgument);
        let bad_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(
            avloc_parse_reply(cstr("gen_aud").as_ptr(), bad_utf8.as_ptr().cast(), &mut out),
            AvlocStatus::InvalidUtf8
        );
    }
}

fn golden_line(id: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(fixtures().join("golden/results.jsonl")).unwrap();
    text.lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["sample_id"] == id)
        .unwrap()
}

fn manifest_line(id: &str) -> String {
    let text = std::fs::read_to_string(fixtures().join("manifest.jsonl")).unwrap();
    text.lines().find(|l| l.contains(&format!("\"id\":\"{id}\""))).unwrap().to_owned()
}

#[test]
fn engine_reproduces_golden_sample() {
    unsafe {
        let mut engine = ptr::null_mut();
        let store = path_c(&fixtures().join("replay.jsonl"));
        assert_eq!(avloc_engine_new_replay(ptr::null(), store.as_ptr(), &mut engine), AvlocStatus::Ok);
        let base = path_c(&fixtures());
        for id in ["guitar-002", "violin-001+piano-004"] {
            let line = cstr(&manifest_line(id));
            let mut out = ptr::null_mut();
            assert_eq!(avloc_engine_run_sample(engine, line.as_ptr(), base.as_ptr(), &mut out), AvlocStatus::Ok);
            let mut got: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
            avloc_core::harness::mask_timing(&mut got);
            assert_eq!(got, golden_line(id));
        }
        avloc_engine_free(engine);
        avloc_engine_free(ptr::null_mut());
    }
}

#[test]
fn engine_rejects_bad_inputs() {
    unsafe {
        let mut engine = ptr::null_mut();
        let store = path_c(&fixtures().join("replay.jsonl"));
        let cfg = cstr(r#"{"n": 0}"#);
        assert_eq!(avloc_engine_new_replay(cfg.as_ptr(), store.as_ptr(), &mut engine), AvlocStatus::InvalidArgument);
        assert!(engine.is_null());
        let missing = cstr("/nonexistent/replay.jsonl");
        assert_eq!(avloc_engine_new_replay(ptr::null(), missing.as_ptr(), &mut engine), AvlocStatus::IoError);

        let cfg = cstr(r#"{"n": 3, "variant": "method2"}"#);
        assert_eq!(avloc_engine_new_replay(cfg.as_ptr(), store.as_ptr(), &mut engine), AvlocStatus::Ok);
        let mut out = ptr::null_mut();
        let base = path_c(&fixtures());
        let two = cstr(&format!("{}\n{}", manifest_line("dog-003"), manifest_line("drum-005")));
        assert_eq!(
            avloc_engine_run_sample(engine, two.as_ptr(), base.as_ptr(), &mut out),
            AvlocStatus::InvalidArgument
        );
        let one = cstr(&manifest_line("dog-003"));
        assert_eq!(avloc_engine_run_sample(engine, one.as_ptr(), base.as_ptr(), &mut out), AvlocStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(v["variant"], "method2");
        avloc_engine_free(engine);
    }
}

#[test]
fn evaluate_matches_golden_report() {
    unsafe {
        let results = path_c(&fixtures().join("golden/results.jsonl"));
        let manifest = path_c(&fixtures().join("manifest.jsonl"));
        let mut out = ptr::null_mut();
        assert_eq!(avloc_evaluate(results.as_ptr(), manifest.as_ptr(), &mut out), AvlocStatus::Ok);
        let got: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        let want: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(fixtures().join("golden/report.json")).unwrap()).unwrap();
        assert_eq!(got, want);

        let nothing = cstr("/nonexistent.jsonl");
        assert_eq!(avloc_evaluate(nothing.as_ptr(), manifest.as_ptr(), &mut out), AvlocStatus::IoError);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/avloc.h")).unwrap();
    for name in [
        "typedef struct AvlocEngine AvlocEngine;",
        "AVLOC_STATUS_DEGENERATE_BOX = 4",
        "avloc_last_error_message(void)",
        "avloc_string_free(",
        "avloc_iou(",
        "avloc_box_validate(",
        "avloc_box_delta(",
        "avloc_box_expand_shrink(",
        "avloc_box_recenter(",
        "avloc_parse_reply(",
        "avloc_engine_new_replay(",
        "avloc_engine_run_sample(",
        "avloc_engine_free(",
        "avloc_evaluate(",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

/// Compiles tests/c/smoke.c against the static library and runs it. Skipped
/// when no C compiler is on PATH.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libavloc_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe)
        .arg(fixtures().join("replay.jsonl"))
        .arg(fixtures())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
