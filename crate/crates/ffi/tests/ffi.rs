use std::ffi::{CStr, CString};
use std::ptr;

use pitchflow::flow::{TrainConfig, TrainState};
use pitchflow::net::{save_checkpoint, ModelConfig, Parameters};
use pitchflow::rng::rng_from;
use pitchflow_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pf_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn tiny_checkpoint(dir: &std::path::Path) -> CString {
    let params = Parameters::init(ModelConfig::tiny(), &mut rng_from(1, &[3])).unwrap();
    let ck = TrainState::new(params).to_checkpoint(&TrainConfig::default());
    let path = dir.join("model");
    save_checkpoint(&path, &ck).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

struct Model(*mut PfModel);

impl Drop for Model {
    fn drop(&mut self) {
        unsafe { pf_model_free(self.0) };
    }
}

fn load(path: &CString) -> Model {
    let mut m = ptr::null_mut();
    let status = unsafe { pf_model_load(path.as_ptr(), &mut m) };
    assert_eq!(status, PfStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    Model(m)
}

#[test]
fn load_reports_null_and_missing_paths() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { pf_model_load(ptr::null(), &mut m) }, PfStatus::NullPointer);
    assert!(last_error().contains("path"));
    let missing = CString::new("/nonexistent/pitchflow/model").unwrap();
    assert_eq!(unsafe { pf_model_load(missing.as_ptr(), &mut m) }, PfStatus::Io);
    assert!(!last_error().is_empty());
    assert!(m.is_null());
    unsafe { pf_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { pf_model_max_len(ptr::null()) }, 0);
}

#[test]
fn generate_is_deterministic_and_keeps_context() {
    let dir = tempfile::tempdir().unwrap();
    let model = load(&tiny_checkpoint(dir.path()));
    assert_eq!(unsafe { pf_model_max_len(model.0) }, 64);
    assert!(!unsafe { pf_model_uses_voicing(model.0) });

    let n = 48;
    let x: Vec<f64> = (0..n).map(|i| 0.01 * i as f64 - 0.2).collect();
    let y: Vec<u8> = (0..n).map(|i| 30 + (i / 8) as u8).collect();
    let u = vec![0u8; n];
    let mask: Vec<u8> = (0..n).map(|i| u8::from(i >= 20)).collect();
    let run = |seed: u64| {
        let mut out = vec![0.0; n];
        let status = unsafe {
            pf_generate(
                model.0, x.as_ptr(), y.as_ptr(), u.as_ptr(), mask.as_ptr(), n, true, 4, -1.0, seed,
                out.as_mut_ptr(),
            )
        };
        assert_eq!(status, PfStatus::Ok, "{}", last_error());
        out
    };
    let (a, b, c) = (run(9), run(9), run(10));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(&a[..20], &x[..20]);
    assert!(a.iter().all(|v| v.is_finite()));

    let mut out = vec![0.0; n];
    let bad_y = vec![90u8; n];
    let status = unsafe {
        pf_generate(
            model.0, x.as_ptr(), bad_y.as_ptr(), u.as_ptr(), mask.as_ptr(), n, false, 4, 1.25, 0,
            out.as_mut_ptr(),
        )
    };
    assert_ne!(status, PfStatus::Ok);
    let long = 65;
    let (xl, yl, ul, ml) = (vec![0.0; long], vec![REST_CLASS; long], vec![0u8; long], vec![1u8; long]);
    let mut out = vec![0.0; long];
    let status = unsafe {
        pf_generate(
            model.0, xl.as_ptr(), yl.as_ptr(), ul.as_ptr(), ml.as_ptr(), long, false, 4, 1.25, 0,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, PfStatus::OutOfRange);
    let status = unsafe {
        pf_generate(
            model.0, x.as_ptr(), y.as_ptr(), u.as_ptr(), mask.as_ptr(), n, false, 4, 1.25, 0,
            ptr::null_mut(),
        )
    };
    assert_eq!(status, PfStatus::NullPointer);
}

const REST_CLASS: u8 = 72;

#[test]
fn metrics_identity_and_unvoiced_reference() {
    let s: Vec<f64> = (0..50).map(|i| 60.0 + (i % 7) as f64).collect();
    let v = vec![1u8; 50];
    let mut m = PfMelodyMetrics {
        rpa: 0.0,
        rca: 0.0,
        oa: 0.0,
        n_voiced_ref: 0,
        n_frames: 0,
    };
    let status = unsafe { pf_melody_metrics(s.as_ptr(), v.as_ptr(), s.as_ptr(), v.as_ptr(), 50, &mut m) };
    assert_eq!(status, PfStatus::Ok);
    assert_eq!((m.rpa, m.rca, m.oa, m.n_voiced_ref), (100.0, 100.0, 100.0, 50));

    let off = vec![0u8; 50];
    let status = unsafe { pf_melody_metrics(s.as_ptr(), off.as_ptr(), s.as_ptr(), off.as_ptr(), 50, &mut m) };
    assert_eq!(status, PfStatus::Ok);
    assert!(m.rpa.is_nan() && m.rca.is_nan());
    assert_eq!(m.oa, 100.0);
}

#[test]
fn extract_notes_and_buffer_sizing() {
    let s = vec![64.0; 100];
    let v = vec![1u8; 100];
    let mut count = 0usize;
    let status = unsafe { pf_extract_notes(s.as_ptr(), v.as_ptr(), 100, 50.0, true, ptr::null_mut(), 0, &mut count) };
    assert_eq!(status, PfStatus::BufferTooSmall);
    assert_eq!(count, 1);
    let mut notes = [PfNote {
        onset_frame: 0,
        offset_frame: 0,
        midi: 0,
    }; 4];
    let status = unsafe { pf_extract_notes(s.as_ptr(), v.as_ptr(), 100, 50.0, true, notes.as_mut_ptr(), 4, &mut count) };
    assert_eq!(status, PfStatus::Ok, "{}", last_error());
    assert_eq!(count, 1);
    assert_eq!(notes[0].midi, 64);
    assert!(last_error().is_empty());
    let status = unsafe { pf_extract_notes(s.as_ptr(), v.as_ptr(), 100, 0.0, true, notes.as_mut_ptr(), 4, &mut count) };
    assert_eq!(status, PfStatus::InvalidArgument);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pitchflow.h")).unwrap();
    for name in [
        "pf_model_load",
        "pf_model_free",
        "pf_generate",
        "pf_melody_metrics",
        "pf_extract_notes",
        "pf_last_error_message",
        "PF_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let version = unsafe { CStr::from_ptr(pf_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}
