//! Canonical pitch representations shared by every other module.
//!
//! Pitch is carried in three forms:
//!
//! * [`PitchCurve`]: per-frame F0 in Hz, `0.0` meaning unvoiced (file form).
//! * [`SemitoneCurve`]: MIDI-scale pitch with a voicing flag; unvoiced gaps
//!   hold interpolated values so the curve is continuous.
//! * [`ModelSequence`]: normalized pitch `x` in `[-1, 1]`, note classes `y`
//!   and the unvoiced indicator `u`, frame aligned.
//!
//! The model scale maps semitones `[24, 96]` affinely onto `[-1, 1]`, so a
//! shift of `k` semitones is exactly a shift of `k / 36` model units.

use rand::Rng;

use crate::{Error, Result};

/// Lowest grid pitch (C1) on the MIDI scale.
pub const MIDI_LOW: f64 = 24.0;
/// Upper clamp for voiced pitch (C7, one past B6).
pub const MIDI_HIGH: f64 = 96.0;
/// Number of pitched note classes (C1..B6).
pub const N_PITCH_CLASSES: usize = 72;
/// Note class used for frames without an active note.
pub const REST: u8 = 72;
/// Semitone mapped to 0 in model units.
pub const PITCH_CENTER: f64 = 60.0;
/// Semitones per model unit.
pub const PITCH_HALF_RANGE: f64 = 36.0;
/// Fill value for curves without a single voiced frame.
pub const UNVOICED_FILL: f64 = 60.0;

pub fn hz_to_semitone(f: f64) -> Result<f64> {
    if !f.is_finite() || f <= 0.0 {
        return Err(Error::Domain(format!("frequency must be positive and finite, got {f}")));
    }
    Ok(69.0 + 12.0 * (f / 440.0).log2())
}

pub fn semitone_to_hz(s: f64) -> Result<f64> {
    if !s.is_finite() {
        return Err(Error::Domain(format!("semitone must be finite, got {s}")));
    }
    Ok(440.0 * ((s - 69.0) / 12.0).exp2())
}

/// Note class of a pitch on the 72-class grid: `round(s) - 24`.
pub fn note_class(s: f64) -> Result<u8> {
    let r = s.round();
    if !r.is_finite() || !(24.0..=95.0).contains(&r) {
        return Err(Error::OutOfRange(format!(
            "pitch {s} is outside the C1..B6 note grid"
        )));
    }
    Ok((r - MIDI_LOW) as u8)
}

/// Center semitone of a note class; REST has none.
pub fn class_semitone(class: u8) -> Option<f64> {
    (class < REST).then(|| f64::from(class) + MIDI_LOW)
}

pub fn normalize_pitch(s: f64) -> Result<f64> {
    if !(MIDI_LOW..=MIDI_HIGH).contains(&s) {
        return Err(Error::OutOfRange(format!(
            "semitone {s} outside [{MIDI_LOW}, {MIDI_HIGH}]"
        )));
    }
    Ok((s - PITCH_CENTER) / PITCH_HALF_RANGE)
}

pub fn denormalize_pitch(x: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::OutOfRange(format!("model pitch {x} outside [-1, 1]")));
    }
    Ok(x * PITCH_HALF_RANGE + PITCH_CENTER)
}

/// Denormalization without range checks, for raw model output.
pub fn denormalize_unchecked(x: f64) -> f64 {
    x * PITCH_HALF_RANGE + PITCH_CENTER
}

/// Per-frame F0 in Hz; `0.0` marks an unvoiced frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchCurve {
    pub frame_rate_hz: f64,
    pub f0_hz: Vec<f64>,
}

impl PitchCurve {
    pub fn new(frame_rate_hz: f64, f0_hz: Vec<f64>) -> Result<Self> {
        let curve = Self { frame_rate_hz, f0_hz };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frame_rate_hz.is_finite() || self.frame_rate_hz <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "frame_rate_hz must be positive, got {}",
                self.frame_rate_hz
            )));
        }
        if self.f0_hz.is_empty() {
            return Err(Error::InvalidArgument("f0_hz is empty".into()));
        }
        if let Some((i, v)) = self
            .f0_hz
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "f0_hz[{i}] = {v} is negative or non-finite"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    /// Builds the Hz form of a semitone curve; unvoiced frames become 0.
    pub fn from_semitones(frame_rate_hz: f64, curve: &SemitoneCurve) -> Result<Self> {
        let f0_hz = curve
            .semitones
            .iter()
            .zip(&curve.voiced)
            .map(|(&s, &v)| if v { semitone_to_hz(s) } else { Ok(0.0) })
            .collect::<Result<Vec<_>>>()?;
        Self::new(frame_rate_hz, f0_hz)
    }
}

/// MIDI-scale pitch with voicing. Unvoiced frames hold interpolated values.
#[derive(Debug, Clone, PartialEq)]
pub struct SemitoneCurve {
    pub semitones: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl SemitoneCurve {
    pub fn len(&self) -> usize {
        self.semitones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semitones.is_empty()
    }
}

/// Fills unvoiced frames by linear interpolation between the neighbouring
/// voiced frames. Leading/trailing gaps hold the nearest voiced value; with
/// no voiced frame at all, every frame becomes [`UNVOICED_FILL`].
pub fn fill_unvoiced(values: &[f64], voiced: &[bool]) -> Vec<f64> {
    debug_assert_eq!(values.len(), voiced.len());
    let anchors: Vec<usize> = (0..values.len()).filter(|&i| voiced[i]).collect();
    let (Some(&first), Some(&last)) = (anchors.first(), anchors.last()) else {
        return vec![UNVOICED_FILL; values.len()];
    };
    let mut out = values.to_vec();
    out[..first].fill(values[first]);
    out[last + 1..].fill(values[last]);
    for pair in anchors.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a < 2 {
            continue;
        }
        let (va, vb) = (values[a], values[b]);
        let span = (b - a) as f64;
        for (i, slot) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let w = (i - a) as f64 / span;
            *slot = va + (vb - va) * w;
        }
    }
    out
}

/// Converts Hz to semitones, clamping voiced frames to `[24, 96]` and filling
/// unvoiced gaps.
pub fn to_semitone_curve(p: &PitchCurve) -> Result<SemitoneCurve> {
    to_semitone_curve_counted(p).map(|(c, _)| c)
}

/// Like [`to_semitone_curve`], also returning how many voiced frames were clamped.
pub fn to_semitone_curve_counted(p: &PitchCurve) -> Result<(SemitoneCurve, usize)> {
    p.validate()?;
    let mut clamped = 0;
    let voiced: Vec<bool> = p.f0_hz.iter().map(|&f| f > 0.0).collect();
    let raw = p
        .f0_hz
        .iter()
        .map(|&f| {
            if f > 0.0 {
                let s = hz_to_semitone(f)?;
                let c = s.clamp(MIDI_LOW, MIDI_HIGH);
                if c != s {
                    clamped += 1;
                }
                Ok(c)
            } else {
                Ok(0.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if clamped > 0 {
        log::warn!("clamped {clamped} voiced frames into [{MIDI_LOW}, {MIDI_HIGH}] semitones");
    }
    let semitones = fill_unvoiced(&raw, &voiced);
    Ok((SemitoneCurve { semitones, voiced }, clamped))
}

/// Linear resampling of pitch, nearest-neighbour resampling of voicing.
pub fn resample_curve(c: &SemitoneCurve, from_rate: f64, to_rate: f64) -> Result<SemitoneCurve> {
    if !(from_rate > 0.0 && from_rate.is_finite() && to_rate > 0.0 && to_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "frame rates must be positive, got {from_rate} -> {to_rate}"
        )));
    }
    if c.is_empty() {
        return Err(Error::InvalidArgument("cannot resample an empty curve".into()));
    }
    let n = c.len();
    let out_len = ((n as f64 * to_rate / from_rate).round() as usize).max(1);
    let ratio = from_rate / to_rate;
    let mut semitones = Vec::with_capacity(out_len);
    let mut voiced = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let pos = (j as f64 * ratio).min((n - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let w = pos - lo as f64;
        let s = if w == 0.0 {
            c.semitones[lo]
        } else {
            c.semitones[lo] * (1.0 - w) + c.semitones[hi] * w
        };
        semitones.push(s);
        voiced.push(c.voiced[(pos.round() as usize).min(n - 1)]);
    }
    Ok(SemitoneCurve { semitones, voiced })
}

/// The model's frame-aligned I/O triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSequence {
    /// Normalized pitch in `[-1, 1]`.
    pub x: Vec<f64>,
    /// Note class per frame, `0..=72` with 72 = REST.
    pub y: Vec<u8>,
    /// Unvoiced indicator (`true` = unvoiced).
    pub u: Vec<bool>,
}

impl ModelSequence {
    pub fn new(x: Vec<f64>, y: Vec<u8>, u: Vec<bool>) -> Result<Self> {
        let seq = Self { x, y, u };
        seq.validate()?;
        Ok(seq)
    }

    pub fn empty() -> Self {
        Self {
            x: Vec::new(),
            y: Vec::new(),
            u: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.y.len() || self.x.len() != self.u.len() {
            return Err(Error::LengthMismatch(format!(
                "x/y/u lengths {}/{}/{}",
                self.x.len(),
                self.y.len(),
                self.u.len()
            )));
        }
        if let Some(i) = self.y.iter().position(|&c| c > REST) {
            return Err(Error::OutOfRange(format!("y[{i}] = {} exceeds REST", self.y[i])));
        }
        if let Some(i) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("x[{i}] is not finite")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Builds a sequence from a semitone curve and per-frame note classes.
    pub fn from_curve(curve: &SemitoneCurve, y: Vec<u8>) -> Result<Self> {
        if y.len() != curve.len() {
            return Err(Error::LengthMismatch(format!(
                "curve has {} frames, notes have {}",
                curve.len(),
                y.len()
            )));
        }
        let x = curve
            .semitones
            .iter()
            .map(|&s| normalize_pitch(s))
            .collect::<Result<Vec<_>>>()?;
        let u = curve.voiced.iter().map(|v| !v).collect();
        Self::new(x, y, u)
    }

    /// Semitone view of `x` with voicing taken from `u`.
    pub fn to_semitone_curve(&self) -> SemitoneCurve {
        SemitoneCurve {
            semitones: self.x.iter().map(|&x| denormalize_unchecked(x)).collect(),
            voiced: self.u.iter().map(|u| !u).collect(),
        }
    }

    pub fn concat(&self, other: &ModelSequence) -> ModelSequence {
        let mut out = self.clone();
        out.x.extend_from_slice(&other.x);
        out.y.extend_from_slice(&other.y);
        out.u.extend_from_slice(&other.u);
        out
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> ModelSequence {
        ModelSequence {
            x: self.x[range.clone()].to_vec(),
            y: self.y[range.clone()].to_vec(),
            u: self.u[range].to_vec(),
        }
    }
}

/// Binary infilling mask: `true` = frame to generate, `false` = context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub m: Vec<bool>,
}

impl Mask {
    pub fn none(len: usize) -> Self {
        Self { m: vec![false; len] }
    }

    pub fn all(len: usize) -> Self {
        Self { m: vec![true; len] }
    }

    /// Mask with ones on `[start, end)`.
    pub fn span(len: usize, start: usize, end: usize) -> Self {
        let mut m = vec![false; len];
        m[start..end].fill(true);
        Self { m }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn count(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }

    /// True when the ones form at most one contiguous run.
    pub fn is_contiguous(&self) -> bool {
        let starts = self
            .m
            .iter()
            .enumerate()
            .filter(|&(i, &b)| b && (i == 0 || !self.m[i - 1]))
            .count();
        starts <= 1
    }

    /// `(1 - m) ⊙ x`.
    pub fn context(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.m)
            .map(|(&v, &m)| if m { 0.0 } else { v })
            .collect()
    }

    /// `m ⊙ x`.
    pub fn masked(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.m)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect()
    }
}

/// A ground-truth sequence plus its infilling mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub seq: ModelSequence,
    pub mask: Mask,
}

impl TrainingExample {
    pub fn new(seq: ModelSequence, mask: Mask) -> Result<Self> {
        if seq.len() != mask.len() {
            return Err(Error::LengthMismatch(format!(
                "sequence has {} frames, mask has {}",
                seq.len(),
                mask.len()
            )));
        }
        Ok(Self { seq, mask })
    }
}

/// Masks one contiguous span of `round(len * r / 100)` frames, with
/// `r ~ U[r_lo, r_hi]` and a uniform offset.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, r_lo: f64, r_hi: f64, rng: &mut R) -> Result<Mask> {
    if len == 0 {
        return Err(Error::InvalidArgument("mask length must be at least 1".into()));
    }
    if !(0.0..=100.0).contains(&r_lo) || !(0.0..=100.0).contains(&r_hi) || r_lo > r_hi {
        return Err(Error::InvalidArgument(format!(
            "mask ratio range [{r_lo}, {r_hi}] is not within 0 <= lo <= hi <= 100"
        )));
    }
    let r = if r_lo == r_hi { r_lo } else { rng.gen_range(r_lo..=r_hi) };
    let count = ((len as f64 * r / 100.0).round() as usize).min(len);
    let start = rng.gen_range(0..=len - count);
    Ok(Mask::span(len, start, start + count))
}

/// Draws an integer shift uniformly from `[-max_shift, max_shift]`.
pub fn random_shift<R: Rng + ?Sized>(max_shift: i32, rng: &mut R) -> i32 {
    rng.gen_range(-max_shift..=max_shift)
}

/// Largest same-sign shift with magnitude `<= |shift|` that keeps voiced
/// pitch inside `[24, 96]` and pitched classes inside the grid.
fn admissible_shift(seq: &ModelSequence, shift: i32) -> i32 {
    if shift == 0 {
        return 0;
    }
    let mut room = f64::INFINITY;
    for ((&x, &y), &u) in seq.x.iter().zip(&seq.y).zip(&seq.u) {
        if !u {
            let s = denormalize_unchecked(x);
            let r = if shift > 0 { MIDI_HIGH - s } else { s - MIDI_LOW };
            room = room.min((r + 1e-9).floor());
        }
        if y != REST {
            let r = if shift > 0 {
                (N_PITCH_CLASSES as f64 - 1.0) - f64::from(y)
            } else {
                f64::from(y)
            };
            room = room.min(r);
        }
    }
    let mag = (shift.unsigned_abs() as f64).min(room.max(0.0)) as i32;
    mag * shift.signum()
}

/// Transposes pitch and notes jointly by `shift` semitones (|shift| <= 4),
/// reducing the shift until everything stays on the grid. Returns the
/// shifted sequence and the shift actually applied.
pub fn shift_augment(seq: &ModelSequence, shift: i32) -> (ModelSequence, i32) {
    let applied = admissible_shift(seq, shift.clamp(-4, 4));
    if applied == 0 {
        return (seq.clone(), 0);
    }
    let dx = f64::from(applied) / PITCH_HALF_RANGE;
    let x = seq.x.iter().map(|&v| v + dx).collect();
    let y = seq
        .y
        .iter()
        .map(|&c| if c == REST { REST } else { (i32::from(c) + applied) as u8 })
        .collect();
    (
        ModelSequence {
            x,
            y,
            u: seq.u.clone(),
        },
        applied,
    )
}
