//! Objective evaluation: frame-level melody accuracy and vibrato probes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::score::NoteEvent;
use crate::signal::SemitoneCurve;
use crate::{Error, Result};

/// Tolerance of a correct pitch frame, in semitones.
pub const PITCH_TOLERANCE_ST: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelodyEvalResult {
    /// Raw pitch accuracy (%), absent without voiced reference frames.
    pub rpa: Option<f64>,
    /// Raw chroma accuracy (%), absent without voiced reference frames.
    pub rca: Option<f64>,
    /// Overall accuracy (%) including unvoiced frames.
    pub oa: f64,
    pub n_voiced_ref: usize,
    pub n_frames: usize,
}

/// Folds a semitone difference into `(-6, 6]`.
pub fn fold_octave(delta: f64) -> f64 {
    let d = delta.rem_euclid(12.0);
    if d > 6.0 {
        d - 12.0
    } else {
        d
    }
}

pub fn melody_metrics(est: &SemitoneCurve, reference: &SemitoneCurve) -> Result<MelodyEvalResult> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch(format!(
            "estimate has {} frames, reference has {}",
            est.len(),
            reference.len()
        )));
    }
    let n = reference.len();
    let (mut voiced_ref, mut raw_hits, mut chroma_hits, mut overall) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..n {
        let (ev, rv) = (est.voiced[i], reference.voiced[i]);
        if !rv {
            overall += usize::from(!ev);
            continue;
        }
        voiced_ref += 1;
        if !ev {
            continue;
        }
        let delta = est.semitones[i] - reference.semitones[i];
        if delta.abs() <= PITCH_TOLERANCE_ST {
            raw_hits += 1;
            overall += 1;
        }
        if fold_octave(delta).abs() <= PITCH_TOLERANCE_ST {
            chroma_hits += 1;
        }
    }
    let pct = |k: usize, d: usize| 100.0 * k as f64 / d as f64;
    Ok(MelodyEvalResult {
        rpa: (voiced_ref > 0).then(|| pct(raw_hits, voiced_ref)),
        rca: (voiced_ref > 0).then(|| pct(chroma_hits, voiced_ref)),
        oa: if n == 0 { 0.0 } else { pct(overall, n) },
        n_voiced_ref: voiced_ref,
        n_frames: n,
    })
}

/// Vibrato statistics over held notes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleProbe {
    /// Amplitude-weighted vibrato rate; absent when no note shows vibrato.
    pub vibrato_rate_hz: Option<f64>,
    /// Mean vibrato amplitude (semitones, half peak-to-peak).
    pub vibrato_extent_st: f64,
    /// Number of qualifying notes measured.
    pub n_notes: usize,
}

impl StyleProbe {
    pub fn empty() -> Self {
        Self {
            vibrato_rate_hz: None,
            vibrato_extent_st: 0.0,
            n_notes: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.n_notes == 0
    }
}

/// Probe settings. The defaults are what [`vibrato_probe`] uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub min_note_s: f64,
    /// Trimmed from the start of each note (glide/overshoot region).
    pub head_trim_s: f64,
    pub tail_trim_s: f64,
    pub band_hz: (f64, f64),
    /// Extents below this count as "no vibrato".
    pub min_extent_st: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            min_note_s: 1.0,
            head_trim_s: 0.15,
            tail_trim_s: 0.05,
            band_hz: (2.0, 10.0),
            min_extent_st: 0.05,
        }
    }
}

/// Removes the least-squares line.
fn detrend(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean_t = (n - 1.0) / 2.0;
    let mean_x = x.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let dt = i as f64 - mean_t;
        sxy += dt * (v - mean_x);
        sxx += dt * dt;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    x.iter()
        .enumerate()
        .map(|(i, v)| v - mean_x - slope * (i as f64 - mean_t))
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Windowed amplitude of the component at `freq_hz`: `2 |Σ w x e^{-iωn}| / Σ w`.
fn tone_amplitude(x: &[f64], window: &[f64], freq_hz: f64, fps: f64) -> f64 {
    let omega = 2.0 * PI * freq_hz / fps;
    let (mut re, mut im, mut wsum) = (0.0, 0.0, 0.0);
    for (i, (v, w)) in x.iter().zip(window).enumerate() {
        let phase = omega * i as f64;
        re += w * v * phase.cos();
        im -= w * v * phase.sin();
        wsum += w;
    }
    2.0 * (re * re + im * im).sqrt() / wsum
}

/// Peak of the Hann-windowed spectrum inside `band`, refined by parabolic
/// interpolation on a 0.02 Hz grid.
fn spectral_peak(x: &[f64], fps: f64, band: (f64, f64)) -> f64 {
    let window = hann(x.len());
    let step = 0.02;
    let hi = band.1.min(fps / 2.0);
    let n_bins = ((hi - band.0) / step).floor() as usize + 1;
    let mags: Vec<f64> = (0..n_bins)
        .map(|k| tone_amplitude(x, &window, band.0 + k as f64 * step, fps))
        .collect();
    let (k, _) = mags
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (k, &m)| if m > acc.1 { (k, m) } else { acc });
    let mut f = band.0 + k as f64 * step;
    if k > 0 && k + 1 < n_bins {
        let (a, b, c) = (mags[k - 1], mags[k], mags[k + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            f += step * 0.5 * (a - c) / denom;
        }
    }
    f
}

/// Local vibrato amplitude: the tone amplitude at `freq_hz` over sliding
/// two-period windows, taking the upper quartile so that a delayed vibrato
/// onset does not dilute the estimate.
fn vibrato_extent(x: &[f64], freq_hz: f64, fps: f64) -> f64 {
    let win = ((2.0 * fps / freq_hz).round() as usize).clamp(4, x.len());
    let window = hann(win);
    let mut amps: Vec<f64> = (0..=x.len() - win)
        .map(|start| {
            let seg = &x[start..start + win];
            let mean = seg.iter().sum::<f64>() / win as f64;
            let centred: Vec<f64> = seg.iter().map(|v| v - mean).collect();
            tone_amplitude(&centred, &window, freq_hz, fps)
        })
        .collect();
    amps.sort_by(f64::total_cmp);
    amps[(amps.len() * 3) / 4]
}

/// Measures vibrato over notes lasting at least one second.
pub fn vibrato_probe(c: &SemitoneCurve, notes: &[NoteEvent], frame_rate_hz: f64) -> StyleProbe {
    vibrato_probe_with(c, notes, frame_rate_hz, &ProbeConfig::default())
}

pub fn vibrato_probe_with(c: &SemitoneCurve, notes: &[NoteEvent], fps: f64, cfg: &ProbeConfig) -> StyleProbe {
    let min_len = (cfg.min_note_s * fps).round() as usize;
    let head = (cfg.head_trim_s * fps).round() as usize;
    let tail = (cfg.tail_trim_s * fps).round() as usize;
    let (mut extents, mut weighted_rate, mut weight) = (Vec::new(), 0.0, 0.0);
    for note in notes {
        if note.len() < min_len || note.offset_frame > c.len() {
            continue;
        }
        let seg = &c.semitones[note.onset_frame + head..note.offset_frame - tail];
        if seg.len() < 8 {
            continue;
        }
        let flat = detrend(seg);
        let rate = spectral_peak(&flat, fps, cfg.band_hz);
        let extent = vibrato_extent(&flat, rate, fps);
        extents.push(extent);
        if extent >= cfg.min_extent_st {
            weighted_rate += extent * rate;
            weight += extent;
        }
    }
    if extents.is_empty() {
        return StyleProbe::empty();
    }
    StyleProbe {
        vibrato_rate_hz: (weight > 0.0).then(|| weighted_rate / weight),
        vibrato_extent_st: extents.iter().sum::<f64>() / extents.len() as f64,
        n_notes: extents.len(),
    }
}

/// Range-normalized L1 distance `|Δrate|/8 + |Δextent|/1.5`. An absent rate
/// (no vibrato) counts as 0 Hz.
pub fn style_distance(generated: &StyleProbe, reference: &StyleProbe) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument(
            "style distance needs probes with at least one qualifying note".into(),
        ));
    }
    let rate = |p: &StyleProbe| p.vibrato_rate_hz.unwrap_or(0.0);
    Ok((rate(generated) - rate(reference)).abs() / 8.0
        + (generated.vibrato_extent_st - reference.vibrato_extent_st).abs() / 1.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::synth::{render_curve, ScoreSpec, StyleParams};
    use rand::Rng;

    fn voiced_curve(semitones: Vec<f64>) -> SemitoneCurve {
        let voiced = vec![true; semitones.len()];
        SemitoneCurve { semitones, voiced }
    }

    /// Per-frame counting oracle written independently of `melody_metrics`.
    fn brute_force(est: &SemitoneCurve, r: &SemitoneCurve) -> (Option<f64>, Option<f64>, f64) {
        let mut rows = Vec::new();
        for i in 0..r.len() {
            let d = est.semitones[i] - r.semitones[i];
            let mut best = f64::INFINITY;
            for k in -20..=20 {
                let folded = d - 12.0 * k as f64;
                if folded > -6.0 && folded <= 6.0 {
                    best = folded;
                }
            }
            let pitch_ok = r.voiced[i] && est.voiced[i] && d.abs() <= 0.5;
            let chroma_ok = r.voiced[i] && est.voiced[i] && best.abs() <= 0.5;
            let frame_ok = if r.voiced[i] { pitch_ok } else { !est.voiced[i] };
            rows.push((r.voiced[i], pitch_ok, chroma_ok, frame_ok));
        }
        let voiced = rows.iter().filter(|r| r.0).count();
        let count = |f: fn(&(bool, bool, bool, bool)) -> bool| rows.iter().filter(|r| f(r)).count() as f64;
        let rpa = (voiced > 0).then(|| 100.0 * count(|r| r.1) / voiced as f64);
        let rca = (voiced > 0).then(|| 100.0 * count(|r| r.2) / voiced as f64);
        (rpa, rca, 100.0 * count(|r| r.3) / rows.len() as f64)
    }

    #[test]
    fn identity_and_octave() {
        let mut r = voiced_curve(vec![60.0, 61.0, 62.5, 70.0]);
        r.voiced[1] = false;
        let m = melody_metrics(&r, &r).unwrap();
        assert_eq!((m.rpa, m.rca, m.oa), (Some(100.0), Some(100.0), 100.0));

        let mut up = r.clone();
        for s in &mut up.semitones {
            *s += 12.0;
        }
        let m = melody_metrics(&up, &r).unwrap();
        assert_eq!((m.rpa, m.rca), (Some(0.0), Some(100.0)));
    }

    #[test]
    fn half_semitone_rule() {
        let r = voiced_curve(vec![60.0; 10]);
        let est = voiced_curve((0..10).map(|i| if i < 5 { 60.4 } else { 60.6 }).collect());
        assert_eq!(melody_metrics(&est, &r).unwrap().rpa, Some(50.0));
    }

    #[test]
    fn degenerate_cases() {
        let r = SemitoneCurve {
            semitones: vec![60.0; 4],
            voiced: vec![false; 4],
        };
        let m = melody_metrics(&r, &r).unwrap();
        assert_eq!((m.rpa, m.rca, m.oa), (None, None, 100.0));
        let complement = SemitoneCurve {
            semitones: vec![60.0; 4],
            voiced: vec![true, false, true, false],
        };
        let flipped = SemitoneCurve {
            semitones: vec![60.0; 4],
            voiced: vec![false, true, false, true],
        };
        assert_eq!(melody_metrics(&flipped, &complement).unwrap().oa, 0.0);
        assert!(melody_metrics(&r, &voiced_curve(vec![1.0])).is_err());
    }

    #[test]
    fn agrees_with_counting_oracle() {
        let mut rng = rng_from(42, &[]);
        for _ in 0..1000 {
            let gen = |rng: &mut crate::rng::Rng| SemitoneCurve {
                semitones: (0..100).map(|_| rng.gen_range(30.0..90.0)).collect(),
                voiced: (0..100).map(|_| rng.gen_bool(0.7)).collect(),
            };
            let r = gen(&mut rng);
            let mut est = gen(&mut rng);
            for i in 0..100 {
                if rng.gen_bool(0.5) {
                    est.semitones[i] = r.semitones[i] + 12.0 * rng.gen_range(-2..=2) as f64 + rng.gen_range(-0.8..0.8);
                }
            }
            let m = melody_metrics(&est, &r).unwrap();
            assert_eq!((m.rpa, m.rca, m.oa), brute_force(&est, &r));
            assert!(m.rca.unwrap() >= m.rpa.unwrap());
        }
    }

    fn sinusoid_note(rate: f64, depth: f64, seconds: f64, fps: f64) -> (SemitoneCurve, Vec<NoteEvent>) {
        let n = (seconds * fps).round() as usize;
        let c = voiced_curve(
            (0..n)
                .map(|i| 62.0 + depth * (2.0 * PI * rate * i as f64 / fps + 0.4).sin())
                .collect(),
        );
        (c, vec![NoteEvent::new(0, n, 38).unwrap()])
    }

    #[test]
    fn pure_vibrato_is_measured() {
        let (c, notes) = sinusoid_note(6.0, 0.5, 2.0, 50.0);
        let p = vibrato_probe(&c, &notes, 50.0);
        assert_eq!(p.n_notes, 1);
        let rate = p.vibrato_rate_hz.unwrap();
        assert!((rate - 6.0).abs() <= 0.2, "rate {rate}");
        assert!((p.vibrato_extent_st - 0.5).abs() <= 0.05, "extent {}", p.vibrato_extent_st);
    }

    #[test]
    fn flat_note_has_no_vibrato() {
        let (c, notes) = sinusoid_note(6.0, 0.0, 2.0, 50.0);
        let p = vibrato_probe(&c, &notes, 50.0);
        assert_eq!(p.n_notes, 1);
        assert!(p.vibrato_extent_st <= 0.02);
        assert_eq!(p.vibrato_rate_hz, None);
        let short = vibrato_probe(&c, &[NoteEvent::new(0, 30, 38).unwrap()], 50.0);
        assert!(short.is_empty());
    }

    fn held_note_render(style: &StyleParams, seed: u64) -> (SemitoneCurve, Vec<NoteEvent>) {
        let events = vec![
            NoteEvent::new(0, 100, 36).unwrap(),
            NoteEvent::new(100, 200, 39).unwrap(),
            NoteEvent::new(200, 300, 34).unwrap(),
        ];
        let score = ScoreSpec::new(events.clone(), 50.0, 300).unwrap();
        let (curve, _) = render_curve(&score, style, &mut rng_from(seed, &[])).unwrap();
        (curve, events)
    }

    #[test]
    fn rendered_vibrato_rate_is_recovered() {
        let style = StyleParams {
            vibrato_rate_hz: 6.0,
            vibrato_depth_st: 0.5,
            ..StyleParams::expressionless()
        };
        let (curve, notes) = held_note_render(&style, 1);
        let rate = vibrato_probe(&curve, &notes[..1], 50.0).vibrato_rate_hz.unwrap();
        assert!((rate - 6.0).abs() <= 0.5, "rate {rate}");
    }

    #[test]
    fn probe_recovers_sampled_styles() {
        let mut rng = rng_from(77, &[]);
        for trial in 0..40 {
            let mut style = crate::synth::sample_style(&mut rng);
            style.vibrato_depth_st = rng.gen_range(0.2..=1.5);
            let (curve, notes) = held_note_render(&style, trial);
            let p = vibrato_probe(&curve, &notes, 50.0);
            let rate = p.vibrato_rate_hz.unwrap();
            assert!((rate - style.vibrato_rate_hz).abs() <= 0.5, "trial {trial}: {style:?} -> {p:?}");
            assert!(
                (p.vibrato_extent_st - style.vibrato_depth_st).abs() <= 0.1,
                "trial {trial}: {style:?} -> {p:?}"
            );
        }
    }

    #[test]
    fn distance_examples() {
        let p = |rate: f64, extent: f64| StyleProbe {
            vibrato_rate_hz: Some(rate),
            vibrato_extent_st: extent,
            n_notes: 1,
        };
        assert_eq!(style_distance(&p(5.0, 0.4), &p(5.0, 0.4)).unwrap(), 0.0);
        assert_eq!(style_distance(&p(10.0, 0.4), &p(2.0, 0.4)).unwrap(), 1.0);
        assert_eq!(style_distance(&p(6.0, 1.0), &p(2.0, 0.25)).unwrap(), 1.0);
        assert!(style_distance(&StyleProbe::empty(), &p(5.0, 0.4)).is_err());
    }
}
