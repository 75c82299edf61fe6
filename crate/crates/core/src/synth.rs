//! Parametric synthetic singer.
//!
//! Produces (F0, score, voicing) triples whose expressive style is controlled
//! by a handful of parameters: vibrato, portamento, onset overshoot, slow
//! drift and per-frame jitter. Stands in for a real singing corpus in
//! desk-scale training and gives the style probes a known ground truth.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::io;
use crate::rng::{rng_from, stream};
use crate::score::{notes_to_frames, NoteEvent};
use crate::signal::{fill_unvoiced, ModelSequence, PitchCurve, SemitoneCurve, MIDI_HIGH, MIDI_LOW};
use crate::{Error, Result};

/// Vibrato fade-in time after its onset delay.
const VIBRATO_RAMP_S: f64 = 0.2;

/// Expressive profile of one synthetic singer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleParams {
    pub vibrato_rate_hz: f64,
    pub vibrato_depth_st: f64,
    pub vibrato_onset_s: f64,
    pub portamento_s: f64,
    pub overshoot_st: f64,
    pub drift_st: f64,
    pub jitter_st: f64,
}

impl StyleParams {
    pub const VIBRATO_RATE_HZ: (f64, f64) = (3.0, 8.0);
    pub const VIBRATO_DEPTH_ST: (f64, f64) = (0.0, 1.5);
    pub const VIBRATO_ONSET_S: (f64, f64) = (0.0, 0.5);
    pub const PORTAMENTO_S: (f64, f64) = (0.02, 0.3);
    pub const OVERSHOOT_ST: (f64, f64) = (0.0, 0.5);
    pub const DRIFT_ST: (f64, f64) = (0.0, 0.3);
    pub const JITTER_ST: (f64, f64) = (0.0, 0.1);

    /// A singer with no expression at all; renders the score exactly.
    pub fn expressionless() -> Self {
        Self {
            vibrato_rate_hz: 5.0,
            vibrato_depth_st: 0.0,
            vibrato_onset_s: 0.0,
            portamento_s: 0.0,
            overshoot_st: 0.0,
            drift_st: 0.0,
            jitter_st: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Portamento may be 0 so the expressionless singer is representable.
        let checks = [
            ("vibrato_rate_hz", self.vibrato_rate_hz, Self::VIBRATO_RATE_HZ),
            ("vibrato_depth_st", self.vibrato_depth_st, Self::VIBRATO_DEPTH_ST),
            ("vibrato_onset_s", self.vibrato_onset_s, Self::VIBRATO_ONSET_S),
            ("portamento_s", self.portamento_s, (0.0, Self::PORTAMENTO_S.1)),
            ("overshoot_st", self.overshoot_st, Self::OVERSHOOT_ST),
            ("drift_st", self.drift_st, Self::DRIFT_ST),
            ("jitter_st", self.jitter_st, Self::JITTER_ST),
        ];
        for (name, v, (lo, hi)) in checks {
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::OutOfRange(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

pub fn sample_style<R: Rng + ?Sized>(rng: &mut R) -> StyleParams {
    let mut draw = |(lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
    StyleParams {
        vibrato_rate_hz: draw(StyleParams::VIBRATO_RATE_HZ),
        vibrato_depth_st: draw(StyleParams::VIBRATO_DEPTH_ST),
        vibrato_onset_s: draw(StyleParams::VIBRATO_ONSET_S),
        portamento_s: draw(StyleParams::PORTAMENTO_S),
        overshoot_st: draw(StyleParams::OVERSHOOT_ST),
        drift_st: draw(StyleParams::DRIFT_ST),
        jitter_st: draw(StyleParams::JITTER_ST),
    }
}

/// A score: sorted, non-overlapping note events over `total_frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub events: Vec<NoteEvent>,
    pub frame_rate_hz: f64,
    pub total_frames: usize,
}

impl ScoreSpec {
    pub fn new(events: Vec<NoteEvent>, frame_rate_hz: f64, total_frames: usize) -> Result<Self> {
        notes_to_frames(&events, total_frames)?;
        if events.windows(2).any(|w| w[0].onset_frame > w[1].onset_frame) {
            return Err(Error::InvalidArgument("score events must be sorted by onset".into()));
        }
        Ok(Self {
            events,
            frame_rate_hz,
            total_frames,
        })
    }

    pub fn frames(&self) -> Vec<u8> {
        notes_to_frames(&self.events, self.total_frames).expect("validated score")
    }
}

/// Parameters of the random score process.
pub mod score_process {
    /// Note classes visited by the random walk (MIDI 48..=84).
    pub const CLASS_RANGE: (i32, i32) = (24, 60);
    pub const MAX_STEP: i32 = 5;
    pub const NOTE_S: (f64, f64) = (0.2, 1.2);
    pub const REST_PROB: f64 = 0.15;
    pub const REST_S: (f64, f64) = (0.05, 0.3);
}

/// Random-walk melody: steps of up to ±5 classes, note lengths U[0.2, 1.2] s,
/// a rest of U[0.05, 0.3] s before a note with probability 0.15.
pub fn sample_score<R: Rng + ?Sized>(rng: &mut R, n_frames: usize, frame_rate_hz: f64) -> Result<ScoreSpec> {
    use score_process::*;
    if n_frames < 50 {
        return Err(Error::InvalidArgument(format!("scores need at least 50 frames, got {n_frames}")));
    }
    let frames = |s: f64| ((s * frame_rate_hz).round() as usize).max(1);
    let mut events = Vec::new();
    let mut class = rng.gen_range(CLASS_RANGE.0..=CLASS_RANGE.1);
    let mut pos = 0usize;
    while pos < n_frames {
        if !events.is_empty() && rng.gen_bool(REST_PROB) {
            pos += frames(rng.gen_range(REST_S.0..=REST_S.1));
            if pos >= n_frames {
                break;
            }
        }
        if !events.is_empty() {
            let step = rng.gen_range(-MAX_STEP..=MAX_STEP);
            class = (class + step).clamp(CLASS_RANGE.0, CLASS_RANGE.1);
        }
        let end = (pos + frames(rng.gen_range(NOTE_S.0..=NOTE_S.1))).min(n_frames);
        events.push(NoteEvent::new(pos, end, class as u8)?);
        pos = end;
    }
    ScoreSpec::new(events, frame_rate_hz, n_frames)
}

/// Renders a score in a style. Returns the curve and the unvoiced indicator
/// (`true` on rest frames).
///
/// Per voiced frame the pitch is the note pitch plus: a cosine-eased glide
/// of `portamento_s` centred on each boundary between touching notes, an
/// overshoot bump peaking as the glide lands, vibrato with a per-note random
/// phase that fades in after `vibrato_onset_s`, a slow sinusoidal drift
/// (period 2..6 s), and Gaussian jitter.
pub fn render_curve<R: Rng + ?Sized>(score: &ScoreSpec, style: &StyleParams, rng: &mut R) -> Result<(SemitoneCurve, Vec<bool>)> {
    style.validate()?;
    let fps = score.frame_rate_hz;
    let n = score.total_frames;
    let drift_period = rng.gen_range(2.0..6.0);
    let drift_phase = rng.gen_range(0.0..2.0 * PI);
    let jitter = Normal::new(0.0, style.jitter_st).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut raw = vec![0.0; n];
    let mut voiced = vec![false; n];
    for note in &score.events {
        raw[note.onset_frame..note.offset_frame].fill(note.semitone());
        voiced[note.onset_frame..note.offset_frame].fill(true);
    }
    // Glides straddle each boundary between touching notes; after a rest the
    // voice re-enters on pitch.
    let half = style.portamento_s / 2.0;
    let mut entry: Vec<Option<f64>> = vec![None; score.events.len()];
    for (k, pair) in score.events.windows(2).enumerate() {
        let (prev, next) = (&pair[0], &pair[1]);
        if prev.offset_frame != next.onset_frame || half <= 0.0 {
            continue;
        }
        entry[k + 1] = Some(prev.semitone());
        let boundary = next.onset_frame as f64 / fps;
        let lo = prev.onset_frame.max(((boundary - half) * fps).ceil().max(0.0) as usize);
        let hi = next.offset_frame.min(((boundary + half) * fps).ceil() as usize);
        for (i, slot) in raw.iter_mut().enumerate().take(hi).skip(lo) {
            let z = ((i as f64 / fps - (boundary - half)) / style.portamento_s).clamp(0.0, 1.0);
            let ease = 0.5 * (1.0 - (PI * z).cos());
            *slot = prev.semitone() + (next.semitone() - prev.semitone()) * ease;
        }
    }
    for (note, from) in score.events.iter().zip(entry) {
        let target = note.semitone();
        let phase = rng.gen_range(0.0..2.0 * PI);
        for i in note.onset_frame..note.offset_frame {
            let tau = (i - note.onset_frame) as f64 / fps;
            let mut s = raw[i];
            if let (Some(from), true) = (from, style.overshoot_st > 0.0) {
                let z = tau / half;
                s += (target - from).signum() * style.overshoot_st * z * (1.0 - z).exp();
            }
            if style.vibrato_depth_st > 0.0 {
                let ramp = ((tau - style.vibrato_onset_s) / VIBRATO_RAMP_S).clamp(0.0, 1.0);
                s += style.vibrato_depth_st * ramp * (2.0 * PI * style.vibrato_rate_hz * tau + phase).sin();
            }
            if style.drift_st > 0.0 {
                let t = i as f64 / fps;
                s += style.drift_st * (2.0 * PI * t / drift_period + drift_phase).sin();
            }
            if style.jitter_st > 0.0 {
                s += jitter.sample(rng);
            }
            raw[i] = s.clamp(MIDI_LOW, MIDI_HIGH);
        }
    }
    let semitones = fill_unvoiced(&raw, &voiced);
    let u = voiced.iter().map(|v| !v).collect();
    Ok((SemitoneCurve { semitones, voiced }, u))
}

/// One generated example with its generating metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthExample {
    pub id: String,
    pub style: StyleParams,
    pub score: ScoreSpec,
    pub curve: SemitoneCurve,
    pub seq: ModelSequence,
}

pub fn example_id(index: usize) -> String {
    format!("ex{index:06}")
}

/// Generates example `index` of the dataset keyed by `seed`. Each example has
/// its own random stream, so any subset can be regenerated independently.
pub fn gen_example(seed: u64, index: usize, n_frames: usize, frame_rate_hz: f64) -> Result<SynthExample> {
    let mut rng = rng_from(seed, &[stream::DATASET, index as u64]);
    let style = sample_style(&mut rng);
    let score = sample_score(&mut rng, n_frames, frame_rate_hz)?;
    let (curve, _) = render_curve(&score, &style, &mut rng)?;
    let seq = ModelSequence::from_curve(&curve, score.frames())?;
    Ok(SynthExample {
        id: example_id(index),
        style,
        score,
        curve,
        seq,
    })
}

pub fn gen_dataset(n_examples: usize, n_frames: usize, frame_rate_hz: f64, seed: u64) -> Result<Vec<SynthExample>> {
    if n_examples == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one example".into()));
    }
    (0..n_examples)
        .map(|i| gen_example(seed, i, n_frames, frame_rate_hz))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub n_frames: usize,
    pub frame_rate_hz: f64,
    pub ids: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn pitch_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.pitch.json"))
}

pub fn notes_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.notes.json"))
}

pub fn style_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.style.json"))
}

/// Writes pitch, note and style files per example plus `manifest.json`.
pub fn write_dataset(dir: &Path, examples: &[SynthExample], seed: u64) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = examples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no examples to write".into()))?;
    for ex in examples {
        let pitch = PitchCurve::from_semitones(ex.score.frame_rate_hz, &ex.curve)?;
        io::write_pitch_file(&pitch_path(dir, &ex.id), &pitch)?;
        io::write_notes_file(&notes_path(dir, &ex.id), &ex.score.events)?;
        io::write_json(&style_path(dir, &ex.id), &ex.style)?;
    }
    let manifest = Manifest {
        seed,
        n_frames: first.score.total_frames,
        frame_rate_hz: first.score.frame_rate_hz,
        ids: examples.iter().map(|e| e.id.clone()).collect(),
    };
    io::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A training sequence loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedExample {
    pub id: String,
    pub seq: ModelSequence,
    pub notes: Vec<NoteEvent>,
}

/// Loads a dataset directory back into model sequences (pitch via the
/// canonical Hz → semitone ingest, notes from the score files).
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<LoadedExample>)> {
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    let examples = manifest
        .ids
        .iter()
        .map(|id| {
            let pitch = io::read_pitch_file(&pitch_path(dir, id), manifest.frame_rate_hz)?;
            let curve = crate::signal::to_semitone_curve(&pitch)?;
            let notes = io::read_notes_file(&notes_path(dir, id))?;
            let y = notes_to_frames(&notes, curve.len())?;
            let seq = ModelSequence::from_curve(&curve, y)?;
            Ok(LoadedExample {
                id: id.clone(),
                seq,
                notes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, examples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{extract_score, ScoreConfig};
    use crate::signal::REST;

    #[test]
    fn style_sampling_is_deterministic_and_in_range() {
        let a = sample_style(&mut rng_from(0, &[]));
        let b = sample_style(&mut rng_from(0, &[]));
        assert_eq!(a, b);
        let mut rng = rng_from(1, &[]);
        let draws: Vec<StyleParams> = (0..10_000).map(|_| sample_style(&mut rng)).collect();
        for s in &draws {
            s.validate().unwrap();
            assert!(s.portamento_s >= 0.02);
        }
        let mean = draws.iter().map(|s| s.vibrato_rate_hz).sum::<f64>() / draws.len() as f64;
        assert!((mean - 5.5).abs() < 0.1, "mean rate {mean}");
    }

    #[test]
    fn scores_are_valid_and_reproducible() {
        for seed in 0..50 {
            let s = sample_score(&mut rng_from(seed, &[]), 400, 50.0).unwrap();
            assert_eq!(s, sample_score(&mut rng_from(seed, &[]), 400, 50.0).unwrap());
            for w in s.events.windows(2) {
                assert!(w[0].offset_frame <= w[1].onset_frame);
            }
            let last = s.events.last().unwrap();
            assert!(last.offset_frame <= s.total_frames);
            for e in &s.events {
                assert!((24..=60).contains(&e.pitch_class));
            }
        }
        assert!(sample_score(&mut rng_from(0, &[]), 49, 50.0).is_err());
    }

    #[test]
    fn rest_fraction_matches_process() {
        // Independent oracle: per note, E[rest] = p * mean(rest) and the
        // first note never has one, so the long-run rest fraction is
        // p*E[R] / (E[N] + p*E[R]) = 0.02625 / 0.72625 ≈ 0.036.
        use score_process::*;
        let expected_rest = REST_PROB * (REST_S.0 + REST_S.1) / 2.0;
        let expected_note = (NOTE_S.0 + NOTE_S.1) / 2.0;
        let oracle = expected_rest / (expected_note + expected_rest);
        let mut rng = rng_from(9, &[]);
        let (mut rest, mut total) = (0usize, 0usize);
        for _ in 0..1000 {
            let y = sample_score(&mut rng, 1000, 50.0).unwrap().frames();
            rest += y.iter().filter(|&&c| c == REST).count();
            total += y.len();
        }
        let frac = rest as f64 / total as f64;
        assert!((frac - oracle).abs() < 0.01, "rest fraction {frac} vs oracle {oracle}");
    }

    #[test]
    fn expressionless_render_matches_score() {
        let mut rng = rng_from(4, &[]);
        for _ in 0..20 {
            let score = sample_score(&mut rng, 300, 50.0).unwrap();
            let (curve, u) = render_curve(&score, &StyleParams::expressionless(), &mut rng).unwrap();
            let y = score.frames();
            for i in 0..y.len() {
                assert_eq!(u[i], y[i] == REST);
                if y[i] != REST {
                    assert_eq!(curve.semitones[i], f64::from(y[i]) + 24.0);
                }
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let score = sample_score(&mut rng_from(2, &[]), 200, 50.0).unwrap();
        let style = sample_style(&mut rng_from(3, &[]));
        let a = render_curve(&score, &style, &mut rng_from(5, &[])).unwrap();
        let b = render_curve(&score, &style, &mut rng_from(5, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_examples_are_valid() {
        let data = gen_dataset(8, 256, 50.0, 17).unwrap();
        assert_eq!(data, gen_dataset(8, 256, 50.0, 17).unwrap());
        for ex in &data {
            ex.seq.validate().unwrap();
            assert_eq!(ex.seq.len(), 256);
            assert!(ex.seq.x.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        assert!(gen_dataset(0, 256, 50.0, 17).is_err());
    }

    #[test]
    fn scorekit_recovers_synthetic_notes() {
        let mut hits = 0usize;
        let mut voiced = 0usize;
        let mut i = 0;
        let mut used = 0;
        while used < 40 {
            let ex = gen_example(23, i, 500, 50.0).unwrap();
            i += 1;
            if ex.style.vibrato_depth_st > 1.0 {
                continue;
            }
            used += 1;
            let (_, y) = extract_score(&ex.curve, 50.0, &ScoreConfig::default()).unwrap();
            for (truth, got) in ex.seq.y.iter().zip(&y) {
                if *truth != REST {
                    voiced += 1;
                    hits += usize::from(truth == got);
                }
            }
        }
        let frac = hits as f64 / voiced as f64;
        assert!(frac >= 0.8, "class-exact recovery {frac}");
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_dataset(3, 120, 50.0, 5).unwrap();
        let manifest = write_dataset(dir.path(), &data, 5).unwrap();
        assert_eq!(manifest.ids, vec!["ex000000", "ex000001", "ex000002"]);
        let (loaded_manifest, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded_manifest, manifest);
        for (ex, back) in data.iter().zip(&loaded) {
            assert_eq!(ex.seq.y, back.seq.y);
            assert_eq!(ex.seq.u, back.seq.u);
            for (a, b) in ex.seq.x.iter().zip(&back.seq.x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
