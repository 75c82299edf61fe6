//! F0 → note events.
//!
//! The pipeline synthesizes a pitch-activation map directly from the F0
//! curve (triangular kernel over the 72-class grid), smooths it with a
//! separable Gaussian blur, segments argmax runs into notes, and removes
//! short rests and notes. Blurring is what keeps vibrato and other
//! expressive wiggles from being transcribed as extra notes.

use serde::{Deserialize, Serialize};

use crate::signal::{SemitoneCurve, MIDI_LOW, N_PITCH_CLASSES, REST};
use crate::{Error, Result};

/// `n_frames × 72` activation matrix, row-major, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub values: Vec<f64>,
    pub n_frames: usize,
    pub frame_rate_hz: f64,
}

impl ActivationMap {
    pub fn zeros(n_frames: usize, frame_rate_hz: f64) -> Self {
        Self {
            values: vec![0.0; n_frames * N_PITCH_CLASSES],
            n_frames,
            frame_rate_hz,
        }
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * N_PITCH_CLASSES..(frame + 1) * N_PITCH_CLASSES]
    }

    pub fn get(&self, frame: usize, class: usize) -> f64 {
        self.values[frame * N_PITCH_CLASSES + class]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// A note spanning frames `[onset_frame, offset_frame)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset_frame: usize,
    pub offset_frame: usize,
    pub pitch_class: u8,
}

impl NoteEvent {
    pub fn new(onset_frame: usize, offset_frame: usize, pitch_class: u8) -> Result<Self> {
        if onset_frame >= offset_frame {
            return Err(Error::InvalidArgument(format!(
                "note onset {onset_frame} must precede offset {offset_frame}"
            )));
        }
        if usize::from(pitch_class) >= N_PITCH_CLASSES {
            return Err(Error::OutOfRange(format!("pitch class {pitch_class} is not on the grid")));
        }
        Ok(Self {
            onset_frame,
            offset_frame,
            pitch_class,
        })
    }

    pub fn len(&self) -> usize {
        self.offset_frame - self.onset_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn semitone(&self) -> f64 {
        f64::from(self.pitch_class) + MIDI_LOW
    }
}

/// Smoothing and segmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub sigma_time: f64,
    pub sigma_pitch: f64,
    pub threshold: f64,
    pub min_note_s: f64,
    pub min_rest_s: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            sigma_time: 4.0,
            sigma_pitch: 1.0,
            threshold: 0.3,
            min_note_s: 0.1,
            min_rest_s: 0.05,
        }
    }
}

impl ScoreConfig {
    /// The ablation without smoothing: no blur and no short-event removal.
    pub fn without_smoothing(self) -> Self {
        Self {
            sigma_time: 0.0,
            sigma_pitch: 0.0,
            min_note_s: 0.0,
            min_rest_s: 0.0,
            ..self
        }
    }
}

pub fn activation_from_curve(c: &SemitoneCurve, frame_rate_hz: f64) -> ActivationMap {
    let mut map = ActivationMap::zeros(c.len(), frame_rate_hz);
    for (i, (&s, &voiced)) in c.semitones.iter().zip(&c.voiced).enumerate() {
        if !voiced || !s.is_finite() {
            continue;
        }
        let pos = s - MIDI_LOW;
        let base = pos.floor();
        for k in [base, base + 1.0] {
            if k < 0.0 || k >= N_PITCH_CLASSES as f64 {
                continue;
            }
            let w = 1.0 - (pos - k).abs();
            if w > 0.0 {
                map.values[i * N_PITCH_CLASSES + k as usize] = w;
            }
        }
    }
    map
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid for any offset.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Convolves `len` strided samples starting at `offset` with `kernel`.
fn convolve_strided(data: &[f64], out: &mut [f64], offset: usize, stride: usize, len: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as i64;
    for i in 0..len {
        let mut acc = 0.0;
        for (j, w) in kernel.iter().enumerate() {
            let src = reflect(i as i64 + j as i64 - radius, len);
            acc += w * data[offset + src * stride];
        }
        out[offset + i * stride] = acc;
    }
}

/// Separable Gaussian blur along time then pitch, radius `ceil(3σ)`,
/// normalized kernels, reflect padding. `σ = 0` leaves that axis untouched.
pub fn blur_activation(a: &ActivationMap, sigma_time: f64, sigma_pitch: f64) -> Result<ActivationMap> {
    if !(sigma_time >= 0.0 && sigma_pitch >= 0.0 && sigma_time.is_finite() && sigma_pitch.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "blur sigmas must be non-negative, got ({sigma_time}, {sigma_pitch})"
        )));
    }
    let mut cur = a.clone();
    if a.n_frames == 0 {
        return Ok(cur);
    }
    if sigma_time > 0.0 {
        let kernel = gaussian_kernel(sigma_time);
        let mut next = cur.values.clone();
        for k in 0..N_PITCH_CLASSES {
            convolve_strided(&cur.values, &mut next, k, N_PITCH_CLASSES, a.n_frames, &kernel);
        }
        cur.values = next;
    }
    if sigma_pitch > 0.0 {
        let kernel = gaussian_kernel(sigma_pitch);
        let mut next = cur.values.clone();
        for i in 0..a.n_frames {
            convolve_strided(&cur.values, &mut next, i * N_PITCH_CLASSES, 1, N_PITCH_CLASSES, &kernel);
        }
        cur.values = next;
    }
    Ok(cur)
}

/// Argmax-run segmentation: a frame is active when its strongest class
/// reaches `threshold`; maximal runs of one active class become a note.
pub fn segment_notes(a: &ActivationMap, threshold: f64) -> Vec<NoteEvent> {
    let mut notes = Vec::new();
    let mut current: Option<(usize, u8)> = None;
    for i in 0..a.n_frames {
        let row = a.row(i);
        let (best, &val) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |acc, (k, v)| if *v > *acc.1 { (k, v) } else { acc });
        let active = (val >= threshold && val > 0.0).then_some(best as u8);
        match (current, active) {
            (Some((_, c)), Some(n)) if c == n => {}
            (prev, next) => {
                if let Some((start, c)) = prev {
                    notes.push(NoteEvent {
                        onset_frame: start,
                        offset_frame: i,
                        pitch_class: c,
                    });
                }
                current = next.map(|n| (i, n));
            }
        }
    }
    if let Some((start, c)) = current {
        notes.push(NoteEvent {
            onset_frame: start,
            offset_frame: a.n_frames,
            pitch_class: c,
        });
    }
    notes
}

/// Joins neighbours of equal class separated by fewer than `max_gap` frames.
fn merge_equal(notes: Vec<NoteEvent>, min_rest_frames: f64) -> Vec<NoteEvent> {
    let mut out: Vec<NoteEvent> = Vec::with_capacity(notes.len());
    for n in notes {
        if let Some(last) = out.last_mut() {
            let gap = n.onset_frame - last.offset_frame;
            if last.pitch_class == n.pitch_class && (gap == 0 || (gap as f64) < min_rest_frames) {
                last.offset_frame = n.offset_frame;
                continue;
            }
        }
        out.push(n);
    }
    out
}

/// Removes short rests, then short notes.
///
/// Rests shorter than `min_rest_s` between equal classes are bridged. Each
/// remaining note shorter than `min_note_s` (shortest first) is absorbed
/// into the longer touching neighbour within one class, or deleted when no
/// such neighbour exists.
pub fn postprocess_notes(notes: &[NoteEvent], min_note_s: f64, min_rest_s: f64, frame_rate_hz: f64) -> Vec<NoteEvent> {
    let min_note = min_note_s.max(0.0) * frame_rate_hz;
    let min_rest = min_rest_s.max(0.0) * frame_rate_hz;
    let mut sorted = notes.to_vec();
    sorted.sort_by_key(|n| n.onset_frame);
    let mut notes = merge_equal(sorted, min_rest);
    loop {
        let Some(idx) = notes
            .iter()
            .enumerate()
            .filter(|(_, n)| (n.len() as f64) < min_note)
            .min_by_key(|(i, n)| (n.len(), *i))
            .map(|(i, _)| i)
        else {
            break;
        };
        let short = notes[idx];
        let close = |other: &NoteEvent| other.pitch_class.abs_diff(short.pitch_class) <= 1;
        let prev = idx
            .checked_sub(1)
            .filter(|&p| notes[p].offset_frame == short.onset_frame && close(&notes[p]));
        let next = Some(idx + 1)
            .filter(|&q| q < notes.len() && notes[q].onset_frame == short.offset_frame && close(&notes[q]));
        let target = match (prev, next) {
            (Some(p), Some(q)) => Some(if notes[q].len() > notes[p].len() { q } else { p }),
            (p, q) => p.or(q),
        };
        if let Some(t) = target {
            notes[t].onset_frame = notes[t].onset_frame.min(short.onset_frame);
            notes[t].offset_frame = notes[t].offset_frame.max(short.offset_frame);
        }
        notes.remove(idx);
        notes = merge_equal(notes, min_rest);
    }
    notes
}

/// Per-frame note classes; frames outside every event are REST.
pub fn notes_to_frames(notes: &[NoteEvent], n_frames: usize) -> Result<Vec<u8>> {
    let mut y = vec![REST; n_frames];
    let mut sorted = notes.to_vec();
    sorted.sort_by_key(|n| n.onset_frame);
    for (i, n) in sorted.iter().enumerate() {
        if n.offset_frame > n_frames {
            return Err(Error::OutOfRange(format!(
                "note [{}, {}) exceeds {n_frames} frames",
                n.onset_frame, n.offset_frame
            )));
        }
        if i > 0 && sorted[i - 1].offset_frame > n.onset_frame {
            return Err(Error::InvalidArgument(format!(
                "notes overlap at frame {}",
                n.onset_frame
            )));
        }
        y[n.onset_frame..n.offset_frame].fill(n.pitch_class);
    }
    Ok(y)
}

/// Inverse of [`notes_to_frames`]: maximal runs of equal non-REST classes.
pub fn frames_to_notes(y: &[u8]) -> Vec<NoteEvent> {
    let mut notes = Vec::new();
    let mut start = 0;
    for i in 1..=y.len() {
        if i == y.len() || y[i] != y[start] {
            if y[start] != REST {
                notes.push(NoteEvent {
                    onset_frame: start,
                    offset_frame: i,
                    pitch_class: y[start],
                });
            }
            start = i;
        }
    }
    notes
}

/// Full pipeline: activation → blur → segmentation → clean-up → frames.
pub fn extract_score(c: &SemitoneCurve, frame_rate_hz: f64, cfg: &ScoreConfig) -> Result<(Vec<NoteEvent>, Vec<u8>)> {
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {}",
            cfg.threshold
        )));
    }
    let act = activation_from_curve(c, frame_rate_hz);
    let blurred = blur_activation(&act, cfg.sigma_time, cfg.sigma_pitch)?;
    let raw = segment_notes(&blurred, cfg.threshold);
    let notes = postprocess_notes(&raw, cfg.min_note_s, cfg.min_rest_s, frame_rate_hz);
    let y = notes_to_frames(&notes, c.len())?;
    Ok((notes, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn curve(semitones: Vec<f64>) -> SemitoneCurve {
        let voiced = vec![true; semitones.len()];
        SemitoneCurve { semitones, voiced }
    }

    fn vibrato(rate: f64, depth: f64, center: f64, seconds: f64, fps: f64) -> SemitoneCurve {
        let n = (seconds * fps).round() as usize;
        curve(
            (0..n)
                .map(|i| center + depth * (2.0 * std::f64::consts::PI * rate * i as f64 / fps).sin())
                .collect(),
        )
    }

    fn note(on: usize, off: usize, class: u8) -> NoteEvent {
        NoteEvent::new(on, off, class).unwrap()
    }

    #[test]
    fn triangular_activation() {
        let c = SemitoneCurve {
            semitones: vec![60.0, 60.5, 70.0],
            voiced: vec![true, true, false],
        };
        let a = activation_from_curve(&c, 50.0);
        assert_eq!(a.get(0, 36), 1.0);
        assert_eq!(a.row(0).iter().sum::<f64>(), 1.0);
        assert_eq!(a.get(1, 36), 0.5);
        assert_eq!(a.get(1, 37), 0.5);
        assert!(a.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_sigma_blur_is_identity() {
        let a = activation_from_curve(&vibrato(6.0, 0.8, 60.0, 1.0, 50.0), 50.0);
        assert_eq!(blur_activation(&a, 0.0, 0.0).unwrap(), a);
        assert!(blur_activation(&a, -1.0, 0.0).is_err());
    }

    #[test]
    fn impulse_response_is_normalized_gaussian() {
        let mut a = ActivationMap::zeros(21, 50.0);
        a.values[10 * N_PITCH_CLASSES + 30] = 1.0;
        let b = blur_activation(&a, 1.0, 0.0).unwrap();
        // Oracle: Gaussian samples at offsets -3..=3, normalized by their sum.
        let raw: Vec<f64> = (-3..=3).map(|d: i32| (-(d * d) as f64 / 2.0).exp()).collect();
        let sum: f64 = raw.iter().sum();
        for (d, w) in (-3i64..=3).zip(&raw) {
            let got = b.get((10 + d) as usize, 30);
            assert!((got - w / sum).abs() < 1e-15, "offset {d}: {got}");
        }
        assert_eq!(b.get(6, 30), 0.0);
        assert_eq!(b.get(10, 31), 0.0);
    }

    #[test]
    fn blur_preserves_mass() {
        let mut rng = rng_from(5, &[]);
        for trial in 0..20 {
            let n = rng.gen_range(1..60);
            let mut a = ActivationMap::zeros(n, 50.0);
            for v in &mut a.values {
                *v = rng.gen::<f64>();
            }
            let (st, sp) = (rng.gen_range(0.0..8.0), rng.gen_range(0.0..3.0));
            let b = blur_activation(&a, st, sp).unwrap();
            let rel = (b.total() - a.total()).abs() / a.total();
            assert!(rel < 1e-6, "trial {trial}: rel {rel}");
        }
    }

    #[test]
    fn segmentation_examples() {
        let flat = activation_from_curve(&curve(vec![60.0; 100]), 50.0);
        assert_eq!(segment_notes(&flat, 0.3), vec![note(0, 100, 36)]);

        let silent = ActivationMap::zeros(40, 50.0);
        assert!(segment_notes(&silent, 0.3).is_empty());

        let vib = activation_from_curve(&vibrato(6.0, 0.8, 60.0, 2.0, 50.0), 50.0);
        assert!(segment_notes(&vib, 0.3).len() >= 3);
    }

    #[test]
    fn postprocess_merges_short_rest() {
        // 100 fps: 0.3 s notes, 0.03 s rest.
        let notes = vec![note(0, 30, 36), note(33, 63, 36)];
        assert_eq!(postprocess_notes(&notes, 0.1, 0.05, 100.0), vec![note(0, 63, 36)]);
    }

    #[test]
    fn postprocess_noop_on_long_events() {
        let notes = vec![note(0, 30, 36), note(40, 70, 38), note(70, 90, 30)];
        assert_eq!(postprocess_notes(&notes, 0.1, 0.05, 100.0), notes);
    }

    #[test]
    fn postprocess_absorbs_then_merges() {
        // 0.5 s C4, 0.04 s C#4, 0.5 s C4 at 100 fps.
        let notes = vec![note(0, 50, 36), note(50, 54, 37), note(54, 104, 36)];
        assert_eq!(postprocess_notes(&notes, 0.05, 0.05, 100.0), vec![note(0, 104, 36)]);
    }

    #[test]
    fn postprocess_short_note_dispositions() {
        let near = vec![note(0, 50, 36), note(50, 53, 40), note(53, 100, 41)];
        assert_eq!(
            postprocess_notes(&near, 0.05, 0.0, 100.0),
            vec![note(0, 50, 36), note(50, 100, 41)]
        );
        let far = vec![note(0, 50, 36), note(50, 53, 45), note(53, 100, 41)];
        assert_eq!(
            postprocess_notes(&far, 0.05, 0.0, 100.0),
            vec![note(0, 50, 36), note(53, 100, 41)]
        );
    }

    #[test]
    fn frames_from_notes() {
        assert_eq!(notes_to_frames(&[note(0, 5, 36)], 5).unwrap(), vec![36; 5]);
        assert_eq!(notes_to_frames(&[], 3).unwrap(), vec![REST; 3]);
        assert_eq!(
            notes_to_frames(&[note(0, 2, 1), note(3, 5, 2)], 5).unwrap(),
            vec![1, 1, REST, 2, 2]
        );
        assert!(notes_to_frames(&[note(0, 3, 1), note(2, 5, 2)], 5).is_err());
        assert!(notes_to_frames(&[note(0, 6, 1)], 5).is_err());
        let y = vec![REST, 3, 3, 4, REST, REST, 4];
        assert_eq!(notes_to_frames(&frames_to_notes(&y), y.len()).unwrap(), y);
    }

    #[test]
    fn pipeline_examples() {
        let cfg = ScoreConfig::default();
        let (notes, y) = extract_score(&curve(vec![60.0; 100]), 50.0, &cfg).unwrap();
        assert_eq!(notes, vec![note(0, 100, 36)]);
        assert_eq!(y, vec![36; 100]);

        let vib = vibrato(6.0, 0.8, 60.0, 2.0, 50.0);
        let (smoothed, _) = extract_score(&vib, 50.0, &cfg).unwrap();
        assert_eq!(smoothed.len(), 1);
        assert_eq!(smoothed[0].pitch_class, 36);
        let (raw, _) = extract_score(&vib, 50.0, &cfg.without_smoothing()).unwrap();
        assert!(raw.len() >= 3, "{raw:?}");
    }

    #[test]
    fn smoothing_never_adds_notes_on_vibrato_family() {
        let cfg = ScoreConfig::default();
        for depth in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            for rate in [4.0, 5.0, 6.5, 8.0] {
                let vib = vibrato(rate, depth, 57.3, 2.0, 50.0);
                let smooth = extract_score(&vib, 50.0, &cfg).unwrap().0.len();
                let raw = extract_score(&vib, 50.0, &cfg.without_smoothing()).unwrap().0.len();
                assert!(smooth <= raw, "depth {depth} rate {rate}: {smooth} > {raw}");
            }
        }
    }

    #[test]
    fn pipeline_output_is_well_formed() {
        let mut rng = rng_from(3, &[]);
        for _ in 0..30 {
            let n = rng.gen_range(10..300);
            let mut s = 50.0;
            let semitones: Vec<f64> = (0..n)
                .map(|_| {
                    s += rng.gen_range(-0.6..0.6);
                    s
                })
                .collect();
            let voiced: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.85)).collect();
            let c = SemitoneCurve { semitones, voiced };
            let (notes, y) = extract_score(&c, 50.0, &ScoreConfig::default()).unwrap();
            for w in notes.windows(2) {
                assert!(w[0].offset_frame <= w[1].onset_frame);
            }
            for n in &notes {
                assert!(n.onset_frame < n.offset_frame && n.offset_frame <= c.len());
                assert!(y[n.onset_frame..n.offset_frame].iter().all(|&v| v == n.pitch_class));
            }
        }
    }
}
