//! C ABI over the pitchflow toolkit.
//!
//! Every fallible function returns a [`PfStatus`]. On failure a message is
//! kept per thread and can be read with [`pf_last_error_message`]. Models are
//! opaque [`PfModel`] handles created by [`pf_model_load`] and released with
//! [`pf_model_free`]. Panics never cross the boundary; they map to
//! `PF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pitchflow::eval::melody_metrics;
use pitchflow::flow::{generate, SamplerConfig};
use pitchflow::net::{load_checkpoint, Parameters};
use pitchflow::rng::{rng_from, stream};
use pitchflow::score::{extract_score, ScoreConfig};
use pitchflow::signal::{Mask, ModelSequence, SemitoneCurve};
use pitchflow::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    LengthMismatch = 4,
    Domain = 5,
    Numeric = 6,
    Io = 7,
    Parse = 8,
    CorruptCheckpoint = 9,
    /// The output buffer is too small; the required count was written.
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for PfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Domain(_) => PfStatus::Domain,
            Error::OutOfRange(_) => PfStatus::OutOfRange,
            Error::LengthMismatch(_) => PfStatus::LengthMismatch,
            Error::InvalidArgument(_) => PfStatus::InvalidArgument,
            Error::Numeric(_) => PfStatus::Numeric,
            Error::Io { .. } => PfStatus::Io,
            Error::Parse { .. } => PfStatus::Parse,
            Error::CorruptCheckpoint(_) => PfStatus::CorruptCheckpoint,
        }
    }
}

/// Loaded model weights. Opaque to C.
pub struct PfModel {
    params: Parameters<f32>,
    uses_unvoiced: bool,
}

/// Melody accuracy in percent. `rpa`/`rca` are NaN without voiced reference frames.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfMelodyMetrics {
    pub rpa: f64,
    pub rca: f64,
    pub oa: f64,
    pub n_voiced_ref: usize,
    pub n_frames: usize,
}

/// A note on frames `[onset_frame, offset_frame)` with its MIDI number.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PfNote {
    pub onset_frame: usize,
    pub offset_frame: usize,
    pub midi: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(PfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(PfStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PfStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            PfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            PfStatus::Panic
        }
    }
}

/// Borrow `n` elements, allowing a null pointer when `n == 0`.
unsafe fn slice<'a, T>(ptr: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, n))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, n))
}

fn flags(v: &[u8]) -> Vec<bool> {
    v.iter().map(|&b| b != 0).collect()
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_model_load(path: *const c_char, out: *mut *mut PfModel) -> PfStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(PfStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = load_checkpoint(Path::new(path))?;
        let model = Box::new(PfModel {
            params: ck.params,
            uses_unvoiced: ck.meta.uses_unvoiced,
        });
        *out = Box::into_raw(model);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`pf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pf_model_free(model: *mut PfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Longest sequence the model accepts, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_model_max_len(model: *const PfModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.max_len)
}

/// Whether the model was trained with the voicing condition.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_model_uses_voicing(model: *const PfModel) -> bool {
    model.as_ref().is_some_and(|m| m.uses_unvoiced)
}

/// Infills masked frames of a normalized pitch sequence.
///
/// `x` holds normalized pitch, `y` note classes (0..=72, 72 = rest), `u`
/// unvoiced flags and `mask` 1 at frames to generate; all have length `n`.
/// `out_x` receives `n` values; unmasked frames are copied from `x`.
/// `n_steps == 0` and a negative `cfg_scale` select the defaults (16, 1.25).
///
/// # Safety
/// All pointers must reference `n` readable (or, for `out_x`, writable)
/// elements and `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_generate(
    model: *const PfModel,
    x: *const f64,
    y: *const u8,
    u: *const u8,
    mask: *const u8,
    n: usize,
    use_voicing: bool,
    n_steps: usize,
    cfg_scale: f64,
    seed: u64,
    out_x: *mut f64,
) -> PfStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let seq = ModelSequence::new(
            slice(x, n, "x")?.to_vec(),
            slice(y, n, "y")?.to_vec(),
            flags(slice(u, n, "u")?),
        )?;
        let mask = Mask {
            m: flags(slice(mask, n, "mask")?),
        };
        let defaults = SamplerConfig::default();
        let sampler = SamplerConfig {
            n_steps: if n_steps == 0 { defaults.n_steps } else { n_steps },
            cfg_scale: if cfg_scale < 0.0 { defaults.cfg_scale } else { cfg_scale },
            ..defaults
        };
        let mut rng = rng_from(seed, &[stream::GENERATE]);
        let use_voicing = use_voicing && model.uses_unvoiced;
        let result = generate(&model.params, &seq, &mask, use_voicing, &sampler, &mut rng)?;
        slice_mut(out_x, n, "out_x")?.copy_from_slice(&result);
        Ok(())
    })
}

/// Raw pitch, raw chroma and overall accuracy of `est` against `ref`
/// (semitone values with voicing flags, `n` frames each).
///
/// # Safety
/// Input pointers must reference `n` readable elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pf_melody_metrics(
    est_semitones: *const f64,
    est_voiced: *const u8,
    ref_semitones: *const f64,
    ref_voiced: *const u8,
    n: usize,
    out: *mut PfMelodyMetrics,
) -> PfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let curve = |s: *const f64, v: *const u8, what: &str| -> Result<SemitoneCurve, Failure> {
            Ok(SemitoneCurve {
                semitones: slice(s, n, what)?.to_vec(),
                voiced: flags(slice(v, n, what)?),
            })
        };
        let m = melody_metrics(
            &curve(est_semitones, est_voiced, "est")?,
            &curve(ref_semitones, ref_voiced, "ref")?,
        )?;
        *out = PfMelodyMetrics {
            rpa: m.rpa.unwrap_or(f64::NAN),
            rca: m.rca.unwrap_or(f64::NAN),
            oa: m.oa,
            n_voiced_ref: m.n_voiced_ref,
            n_frames: m.n_frames,
        };
        Ok(())
    })
}

/// Extracts notes from a semitone curve with the default smoothing, or
/// without any when `smoothing` is false. Writes at most `capacity` notes to
/// `out_notes` and the total to `*out_count`; returns
/// `PF_STATUS_BUFFER_TOO_SMALL` when they do not fit.
///
/// # Safety
/// Input pointers must reference `n` readable elements, `out_notes`
/// `capacity` writable elements (may be null when `capacity == 0`) and
/// `out_count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pf_extract_notes(
    semitones: *const f64,
    voiced: *const u8,
    n: usize,
    frame_rate_hz: f64,
    smoothing: bool,
    out_notes: *mut PfNote,
    capacity: usize,
    out_count: *mut usize,
) -> PfStatus {
    guard(|| {
        let out_count = out_count.as_mut().ok_or_else(|| null("out_count"))?;
        let curve = SemitoneCurve {
            semitones: slice(semitones, n, "semitones")?.to_vec(),
            voiced: flags(slice(voiced, n, "voiced")?),
        };
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(Failure(PfStatus::InvalidArgument, "frame_rate_hz must be positive".into()));
        }
        let cfg = if smoothing {
            ScoreConfig::default()
        } else {
            ScoreConfig::default().without_smoothing()
        };
        let (notes, _) = extract_score(&curve, frame_rate_hz, &cfg)?;
        *out_count = notes.len();
        if notes.len() > capacity {
            return Err(Failure(
                PfStatus::BufferTooSmall,
                format!("{} notes do not fit in {capacity}", notes.len()),
            ));
        }
        let out = slice_mut(out_notes, notes.len(), "out_notes")?;
        for (o, e) in out.iter_mut().zip(&notes) {
            *o = PfNote {
                onset_frame: e.onset_frame,
                offset_frame: e.offset_frame,
                midi: e.semitone() as i32,
            };
        }
        Ok(())
    })
}
