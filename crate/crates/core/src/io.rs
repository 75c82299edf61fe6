//! File formats: pitch curves (JSON or CSV), note events, generic JSON helpers.
//!
//! Pitch JSON: `{"frame_rate_hz": 50.0, "f0_hz": [0.0, 261.63, ...]}`.
//! Pitch CSV: header `frame,f0_hz`, one row per frame; the frame rate is
//! supplied by the caller since CSV does not carry it.
//! Notes JSON: `[{"onset_frame": 0, "offset_frame": 40, "midi": 60}, ...]`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::score::NoteEvent;
use crate::signal::{PitchCurve, MIDI_LOW, N_PITCH_CLASSES};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PitchFile {
    pub frame_rate_hz: f64,
    pub f0_hz: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteRecord {
    pub onset_frame: usize,
    pub offset_frame: usize,
    pub midi: i64,
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn parse_pitch_json(text: &str, context: &str) -> Result<PitchCurve> {
    let file: PitchFile = serde_json::from_str(text).map_err(|e| Error::parse(context, e))?;
    PitchCurve::new(file.frame_rate_hz, file.f0_hz).map_err(|e| Error::parse(context, e))
}

pub fn parse_pitch_csv(text: &str, frame_rate_hz: f64, context: &str) -> Result<PitchCurve> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::parse(context, e))?.clone();
    if headers.len() != 2 || &headers[0] != "frame" || &headers[1] != "f0_hz" {
        return Err(Error::parse(context, "expected header `frame,f0_hz`"));
    }
    let mut f0 = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(context, e))?;
        let frame: usize = record[0]
            .parse()
            .map_err(|_| Error::parse(context, format!("row {row}: bad frame `{}`", &record[0])))?;
        if frame != row {
            return Err(Error::parse(
                context,
                format!("row {row}: frame index {frame} is out of sequence"),
            ));
        }
        let v: f64 = record[1]
            .parse()
            .map_err(|_| Error::parse(context, format!("row {row}: bad f0_hz `{}`", &record[1])))?;
        f0.push(v);
    }
    PitchCurve::new(frame_rate_hz, f0).map_err(|e| Error::parse(context, e))
}

/// Reads a pitch file; `.csv` files take `csv_frame_rate_hz`, everything else is JSON.
pub fn read_pitch_file(path: &Path, csv_frame_rate_hz: f64) -> Result<PitchCurve> {
    let text = read_to_string(path)?;
    let context = path.display().to_string();
    if is_csv(path) {
        parse_pitch_csv(&text, csv_frame_rate_hz, &context)
    } else {
        parse_pitch_json(&text, &context)
    }
}

pub fn pitch_to_json(curve: &PitchCurve) -> String {
    let file = PitchFile {
        frame_rate_hz: curve.frame_rate_hz,
        f0_hz: curve.f0_hz.clone(),
    };
    let mut s = serde_json::to_string(&file).expect("pitch file serializes");
    s.push('\n');
    s
}

pub fn pitch_to_csv(curve: &PitchCurve) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["frame", "f0_hz"]).expect("in-memory write");
    for (i, f) in curve.f0_hz.iter().enumerate() {
        writer
            .write_record([i.to_string(), f.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("ascii csv")
}

pub fn write_pitch_file(path: &Path, curve: &PitchCurve) -> Result<()> {
    let text = if is_csv(path) {
        pitch_to_csv(curve)
    } else {
        pitch_to_json(curve)
    };
    write_bytes(path, text.as_bytes())
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn notes_to_records(notes: &[NoteEvent]) -> Vec<NoteRecord> {
    notes
        .iter()
        .map(|n| NoteRecord {
            onset_frame: n.onset_frame,
            offset_frame: n.offset_frame,
            midi: i64::from(n.pitch_class) + MIDI_LOW as i64,
        })
        .collect()
}

pub fn records_to_notes(records: &[NoteRecord], context: &str) -> Result<Vec<NoteEvent>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let class = r.midi - MIDI_LOW as i64;
            if !(0..N_PITCH_CLASSES as i64).contains(&class) {
                return Err(Error::parse(
                    context,
                    format!("note {i}: midi {} outside the C1..B6 grid", r.midi),
                ));
            }
            NoteEvent::new(r.onset_frame, r.offset_frame, class as u8)
                .map_err(|e| Error::parse(context, format!("note {i}: {e}")))
        })
        .collect()
}

pub fn read_notes_file(path: &Path) -> Result<Vec<NoteEvent>> {
    let records: Vec<NoteRecord> = read_json(path)?;
    records_to_notes(&records, &path.display().to_string())
}

pub fn write_notes_file(path: &Path, notes: &[NoteEvent]) -> Result<()> {
    write_json(path, &notes_to_records(notes))
}
