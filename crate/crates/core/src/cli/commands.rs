//! Command implementations behind [`super::run`].
//!
//! All pitch inputs are resampled to `data.frame_rate_hz` on load; note files
//! are read and written in frames at that rate.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use super::config::{load_run_config, RunConfig};
use super::plot::{render_svg, PlotInput};
use super::{ApcArgs, Cli, Command, EvalArgs, ExtractArgs, GenerateArgs, SvcArgs, SvsArgs, SynthArgs, TrainArgs};
use crate::eval::{melody_metrics, style_distance, vibrato_probe, MelodyEvalResult, StyleProbe};
use crate::flow::{generate, run_training, SamplerConfig, TrainState};
use crate::flow::train::{resume, TrainPaths};
use crate::io::{read_notes_file, read_pitch_file, write_bytes, write_json, write_notes_file, write_pitch_file};
use crate::net::{load_checkpoint, Parameters};
use crate::rng::{rng_from, stream};
use crate::score::{extract_score, frames_to_notes, notes_to_frames, NoteEvent, ScoreConfig};
use crate::signal::{class_semitone, resample_curve, to_semitone_curve, ModelSequence, PitchCurve, SemitoneCurve, REST};
use crate::synth::{gen_dataset, load_dataset, write_dataset};
use crate::task::{build_apc, build_transfer, split_result, TaskInput};
use crate::{Error, Result};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_run_config(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::ExtractNotes(a) => cmd_extract_notes(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Apc(a) => cmd_apc(&cfg, a),
        Command::Svs(a) => cmd_svs(&cfg, a),
        Command::Svc(a) => cmd_svc(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
    }
}

fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

/// Pitch file as a semitone curve at the model frame rate.
fn load_curve(cfg: &RunConfig, path: &Path) -> Result<SemitoneCurve> {
    let pitch = read_pitch_file(path, cfg.data.csv_frame_rate_hz)?;
    if pitch.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no frames", path.display())));
    }
    let curve = to_semitone_curve(&pitch)?;
    if pitch.frame_rate_hz == cfg.data.frame_rate_hz {
        Ok(curve)
    } else {
        resample_curve(&curve, pitch.frame_rate_hz, cfg.data.frame_rate_hz)
    }
}

fn write_curve(cfg: &RunConfig, path: &Path, curve: &SemitoneCurve) -> Result<()> {
    write_pitch_file(path, &PitchCurve::from_semitones(cfg.data.frame_rate_hz, curve)?)
}

fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    let examples = gen_dataset(a.n, cfg.data.n_frames, cfg.data.frame_rate_hz, cfg.seed)?;
    let manifest = write_dataset(&a.out, &examples, cfg.seed)?;
    println!("wrote {} examples to {}", manifest.ids.len(), a.out.display());
    Ok(())
}

fn cmd_extract_notes(cfg: &RunConfig, a: &ExtractArgs) -> Result<()> {
    let curve = load_curve(cfg, &a.pitch)?;
    let score = if a.no_smoothing {
        cfg.score.without_smoothing()
    } else {
        cfg.score
    };
    let (notes, _) = extract_score(&curve, cfg.data.frame_rate_hz, &score)?;
    write_notes_file(&a.out, &notes)?;
    println!("{} notes", notes.len());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    require_exists(&a.data)?;
    let (manifest, examples) = load_dataset(&a.data)?;
    if manifest.frame_rate_hz != cfg.data.frame_rate_hz {
        return Err(Error::InvalidArgument(format!(
            "dataset is at {} Hz, data.frame_rate_hz is {}",
            manifest.frame_rate_hz, cfg.data.frame_rate_hz
        )));
    }
    let paths = TrainPaths::new(&a.out);
    let resumed = if a.resume { resume(&paths)? } else { None };
    let (mut state, mut trace, train_cfg) = match resumed {
        Some((state, trace, stored)) => {
            if stored != cfg.train {
                warn!("resuming with the training settings stored in the checkpoint");
            }
            info!("resuming at step {}", state.step);
            (state, trace, stored)
        }
        None => {
            if !a.resume && !paths.checkpoint_steps()?.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{} already holds checkpoints; pass --resume or choose a fresh directory",
                    a.out.display()
                )));
            }
            if a.resume {
                warn!("no checkpoint under {}, starting from scratch", a.out.display());
            }
            let mut rng = rng_from(cfg.seed, &[stream::INIT]);
            let params = Parameters::init(cfg.model.clone(), &mut rng)?;
            (TrainState::new(params), Vec::new(), cfg.train.clone())
        }
    };
    let max_len = state.params.config.max_len;
    let longest = if train_cfg.crop_frames > 0 {
        train_cfg.crop_frames.min(manifest.n_frames)
    } else {
        manifest.n_frames
    };
    if longest > max_len {
        return Err(Error::OutOfRange(format!(
            "training sequences have {longest} frames but the model handles at most {max_len}; \
             set train.crop_frames"
        )));
    }
    let data: Vec<ModelSequence> = examples.into_iter().map(|e| e.seq).collect();
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    run_training(&mut state, &data, &train_cfg, Some(&paths), a.stop_after, &mut trace)?;
    match trace.last() {
        Some(r) => println!("step {} loss {:.5}", state.step, r.loss),
        None => println!("step {}", state.step),
    }
    Ok(())
}

/// Score as a curve: voiced at note frames, unvoiced at rests.
fn score_curve(y: &[u8]) -> SemitoneCurve {
    let semitones = y.iter().map(|&c| class_semitone(c).unwrap_or(60.0)).collect();
    SemitoneCurve {
        semitones,
        voiced: y.iter().map(|&c| c != REST).collect(),
    }
}

#[derive(Serialize)]
struct GenerationMeta<'a> {
    command: &'a str,
    checkpoint: String,
    checkpoint_step: u64,
    seed: u64,
    sampler: SamplerConfig,
    /// `"reference"`, `"off-key take"` or `"none"` (no-context pathway).
    context: &'a str,
    context_frames: usize,
    generated_frames: usize,
    uses_voicing: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MelodyEvalResult>,
}

struct Generated {
    curve: SemitoneCurve,
    step: u64,
    uses_voicing: bool,
}

/// Runs the sampler on `task` and writes the generated segment, the plot and
/// the metadata sidecar.
fn run_task(
    cfg: &RunConfig,
    g: &GenerateArgs,
    task: &TaskInput,
    has_voicing: bool,
    command: &str,
    context: &str,
    metrics: impl FnOnce(&SemitoneCurve) -> Result<Option<MelodyEvalResult>>,
) -> Result<Option<MelodyEvalResult>> {
    let generated = sample_task(cfg, g, task, has_voicing)?;
    write_curve(cfg, &g.out, &generated.curve)?;
    let metrics = metrics(&generated.curve)?;
    if let Some(path) = &g.plot {
        let ctx = task.seq.slice(0..task.split_point).to_semitone_curve();
        let notes = frames_to_notes(&task.seq.y);
        let svg = render_svg(&PlotInput {
            context: &ctx,
            generated: &generated.curve,
            notes: &notes,
            frame_rate_hz: cfg.data.frame_rate_hz,
        });
        write_bytes(path, svg.as_bytes())?;
    }
    let meta = GenerationMeta {
        command,
        checkpoint: g.checkpoint.display().to_string(),
        checkpoint_step: generated.step,
        seed: cfg.seed,
        sampler: cfg.sampler,
        context: if task.has_context() { context } else { "none" },
        context_frames: task.split_point,
        generated_frames: task.len() - task.split_point,
        uses_voicing: generated.uses_voicing,
        metrics,
    };
    write_json(&g.out.with_extension("meta.json"), &meta)?;
    Ok(metrics)
}

fn sample_task(cfg: &RunConfig, g: &GenerateArgs, task: &TaskInput, has_voicing: bool) -> Result<Generated> {
    require_exists(&g.checkpoint)?;
    let ck = load_checkpoint(&g.checkpoint)?;
    let max_len = ck.params.config.max_len;
    if task.len() > max_len {
        return Err(Error::OutOfRange(format!(
            "context and target need {} frames; the model's budget is {max_len} frames",
            task.len()
        )));
    }
    let uses_voicing = ck.meta.uses_unvoiced && has_voicing;
    if ck.meta.uses_unvoiced && !has_voicing {
        warn!("checkpoint was trained with voicing but none was given; using the null voicing embedding");
    }
    let mut rng = rng_from(cfg.seed, &[stream::GENERATE]);
    let x_hat = generate(&ck.params, &task.seq, &task.mask, uses_voicing, &cfg.sampler, &mut rng)?;
    Ok(Generated {
        curve: split_result(&x_hat, task)?,
        step: ck.meta.step,
        uses_voicing,
    })
}

fn cmd_apc(cfg: &RunConfig, a: &ApcArgs) -> Result<()> {
    let curve = load_curve(cfg, &a.off)?;
    let (_, y_off) = extract_score(&curve, cfg.data.frame_rate_hz, &cfg.score)?;
    let y_in = notes_to_frames(&read_notes_file(&a.notes)?, curve.len())?;
    let off = ModelSequence::from_curve(&curve, y_off)?;
    let task = build_apc(&off, &y_in, usize::MAX)?;
    let target = score_curve(&y_in);
    let metrics = run_task(cfg, &a.gen, &task, true, "apc", "off-key take", |c| {
        melody_metrics(c, &target).map(Some)
    })?;
    if let Some(m) = metrics {
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.2}"));
        println!("rpa {} rca {} oa {:.2} (vs target notes)", pct(m.rpa), pct(m.rca), m.oa);
    }
    Ok(())
}

/// Reference pitch plus its notes (given or extracted) as a context block.
fn load_reference(cfg: &RunConfig, pitch: Option<&Path>, notes: Option<&Path>) -> Result<ModelSequence> {
    let Some(pitch) = pitch else {
        if notes.is_some() {
            return Err(Error::InvalidArgument("reference notes given without a reference".into()));
        }
        return Ok(ModelSequence::empty());
    };
    let curve = load_curve(cfg, pitch)?;
    let y = match notes {
        Some(n) => notes_to_frames(&read_notes_file(n)?, curve.len())?,
        None => extract_score(&curve, cfg.data.frame_rate_hz, &cfg.score)?.1,
    };
    ModelSequence::from_curve(&curve, y)
}

fn cmd_svs(cfg: &RunConfig, a: &SvsArgs) -> Result<()> {
    let reference = load_reference(cfg, a.reference.as_deref(), a.reference_notes.as_deref())?;
    let notes = read_notes_file(&a.notes)?;
    let n = a
        .frames
        .or_else(|| notes.iter().map(|e| e.offset_frame).max())
        .ok_or_else(|| Error::InvalidArgument("target score is empty; pass --frames".into()))?;
    let y = notes_to_frames(&notes, n)?;
    let (u, has_voicing) = match &a.voicing {
        Some(path) => {
            let v = load_curve(cfg, path)?;
            if v.len() != n {
                return Err(Error::LengthMismatch(format!(
                    "voicing has {} frames, target {n}",
                    v.len()
                )));
            }
            (v.voiced.iter().map(|v| !v).collect(), true)
        }
        None => (y.iter().map(|&c| c == REST).collect(), false),
    };
    let target = ModelSequence::new(vec![0.0; n], y, u)?;
    let task = build_transfer(&reference, &target, usize::MAX)?;
    run_task(cfg, &a.gen, &task, has_voicing, "svs", "reference", |_| Ok(None))?;
    Ok(())
}

fn cmd_svc(cfg: &RunConfig, a: &SvcArgs) -> Result<()> {
    let reference = load_reference(cfg, a.reference.as_deref(), None)?;
    let source = load_reference(cfg, Some(&a.source), None)?;
    let target = ModelSequence {
        x: vec![0.0; source.len()],
        ..source
    };
    let task = build_transfer(&reference, &target, usize::MAX)?;
    run_task(cfg, &a.gen, &task, true, "svc", "reference", |_| Ok(None))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct FileReport {
    id: String,
    #[serde(flatten)]
    metrics: MelodyEvalResult,
    probe_est: StyleProbe,
    probe_ref: StyleProbe,
    /// Absent when either probe found no qualifying note.
    style_distance: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Aggregate {
    /// Means over files with voiced reference frames.
    rpa: Option<f64>,
    rca: Option<f64>,
    oa: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    n_files: usize,
    mean: Aggregate,
    files: Vec<FileReport>,
}

/// Maps id to path for `<id>.pitch.json` / `<id>.pitch.csv` files.
fn pitch_ids(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let id = name
            .strip_suffix(".pitch.json")
            .or_else(|| name.strip_suffix(".pitch.csv"));
        if let Some(id) = id {
            out.push((id.to_owned(), path.clone()));
        }
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument(format!(
            "{} holds both JSON and CSV pitch for `{}`",
            dir.display(),
            w[0].0
        )));
    }
    Ok(out)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    // Eval compares curves at the reference's own frame rate.
    let est = pitch_ids(&a.est)?;
    let reference = pitch_ids(&a.reference)?;
    let est_ids: BTreeSet<&str> = est.iter().map(|(id, _)| id.as_str()).collect();
    let ref_ids: BTreeSet<&str> = reference.iter().map(|(id, _)| id.as_str()).collect();
    if est_ids != ref_ids {
        let missing_est: Vec<&str> = ref_ids.difference(&est_ids).copied().collect();
        let missing_ref: Vec<&str> = est_ids.difference(&ref_ids).copied().collect();
        return Err(Error::InvalidArgument(format!(
            "file ids differ; missing estimates: [{}]; missing references: [{}]",
            missing_est.join(", "),
            missing_ref.join(", ")
        )));
    }
    if est.is_empty() {
        return Err(Error::InvalidArgument(format!("no pitch files in {}", a.reference.display())));
    }
    let csv_rate = cfg.data.csv_frame_rate_hz;
    let mut files = Vec::with_capacity(est.len());
    for ((id, est_path), (_, ref_path)) in est.iter().zip(&reference) {
        let ref_pitch = read_pitch_file(ref_path, csv_rate)?;
        let rate = ref_pitch.frame_rate_hz;
        let ref_curve = to_semitone_curve(&ref_pitch)?;
        let est_pitch = read_pitch_file(est_path, csv_rate)?;
        let mut est_curve = to_semitone_curve(&est_pitch)?;
        if est_pitch.frame_rate_hz != rate && !est_curve.is_empty() {
            est_curve = resample_curve(&est_curve, est_pitch.frame_rate_hz, rate)?;
        }
        let metrics = melody_metrics(&est_curve, &ref_curve).map_err(|e| match e {
            Error::LengthMismatch(m) => Error::LengthMismatch(format!("{id}: {m}")),
            other => other,
        })?;
        let notes = eval_notes(a, id, &ref_curve, rate, &cfg.score)?;
        let probe_est = vibrato_probe(&est_curve, &notes, rate);
        let probe_ref = vibrato_probe(&ref_curve, &notes, rate);
        files.push(FileReport {
            id: id.clone(),
            metrics,
            probe_est,
            probe_ref,
            style_distance: style_distance(&probe_est, &probe_ref).ok(),
        });
    }
    let report = EvalReport {
        n_files: files.len(),
        mean: Aggregate {
            rpa: mean(files.iter().filter_map(|f| f.metrics.rpa)),
            rca: mean(files.iter().filter_map(|f| f.metrics.rca)),
            oa: mean(files.iter().map(|f| f.metrics.oa)).unwrap_or(0.0),
        },
        files,
    };
    write_json(&a.out, &report)?;
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.2}"));
    println!(
        "{} files: rpa {} rca {} oa {:.2}",
        report.n_files,
        pct(report.mean.rpa),
        pct(report.mean.rca),
        report.mean.oa
    );
    Ok(())
}

fn eval_notes(a: &EvalArgs, id: &str, ref_curve: &SemitoneCurve, rate: f64, score: &ScoreConfig) -> Result<Vec<NoteEvent>> {
    let name = format!("{id}.notes.json");
    for dir in a.notes.iter().chain(std::iter::once(&a.reference)) {
        let path = dir.join(&name);
        if path.exists() {
            return read_notes_file(&path);
        }
    }
    if ref_curve.is_empty() {
        return Ok(Vec::new());
    }
    Ok(extract_score(ref_curve, rate, score)?.0)
}
