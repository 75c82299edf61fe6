//! Input construction for the three applications: pitch correction (APC),
//! style transfer from a reference for synthesis (SVS) and conversion (SVC).
//!
//! Each builder lays a context block and a target block end to end and masks
//! exactly the target block. Inputs longer than the model budget are an error,
//! never silently truncated.

use crate::signal::{Mask, ModelSequence, SemitoneCurve, MIDI_HIGH, MIDI_LOW};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInput {
    pub seq: ModelSequence,
    pub mask: Mask,
    /// First generated frame.
    pub split_point: usize,
}

impl TaskInput {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    /// No context frames: the model sees only the target block.
    pub fn has_context(&self) -> bool {
        self.split_point > 0
    }
}

fn check_budget(len: usize, max_len: usize) -> Result<()> {
    if len > max_len {
        return Err(Error::OutOfRange(format!(
            "task needs {len} frames but the model handles at most {max_len}"
        )));
    }
    Ok(())
}

fn suffix_task(seq: ModelSequence, split_point: usize) -> TaskInput {
    let n = seq.len();
    TaskInput {
        seq,
        mask: Mask::span(n, split_point, n),
        split_point,
    }
}

/// Pitch correction: the off-key take is the context, the target block keeps
/// its timing (voicing duplicated) and takes the intended notes `y_in`.
pub fn build_apc(off: &ModelSequence, y_in: &[u8], max_len: usize) -> Result<TaskInput> {
    off.validate()?;
    if y_in.len() != off.len() {
        return Err(Error::LengthMismatch(format!(
            "off-key take has {} frames, target notes {}",
            off.len(),
            y_in.len()
        )));
    }
    if off.is_empty() {
        return Err(Error::InvalidArgument("off-key take is empty".into()));
    }
    check_budget(2 * off.len(), max_len)?;
    let target = ModelSequence::new(vec![0.0; off.len()], y_in.to_vec(), off.u.clone())?;
    Ok(suffix_task(off.concat(&target), off.len()))
}

/// Reference-guided generation: `reference` supplies style, `target` supplies
/// notes and voicing. Its pitch values are ignored by the model since the
/// block is masked.
pub fn build_transfer(reference: &ModelSequence, target: &ModelSequence, max_len: usize) -> Result<TaskInput> {
    reference.validate()?;
    target.validate()?;
    if target.is_empty() {
        return Err(Error::InvalidArgument("target segment is empty".into()));
    }
    check_budget(reference.len() + target.len(), max_len)?;
    Ok(suffix_task(reference.concat(target), reference.len()))
}

/// Normalized pitch of the generated block.
pub fn split_normalized(x_hat: &[f64], input: &TaskInput) -> Result<Vec<f64>> {
    if x_hat.len() != input.len() {
        return Err(Error::LengthMismatch(format!(
            "generated {} frames for a {}-frame task",
            x_hat.len(),
            input.len()
        )));
    }
    Ok(x_hat[input.split_point..].to_vec())
}

/// Generated block as a semitone curve, voiced where the target block's
/// voicing says so. Values are clamped to the pitch grid.
pub fn split_result(x_hat: &[f64], input: &TaskInput) -> Result<SemitoneCurve> {
    let x = split_normalized(x_hat, input)?;
    let target = input.seq.slice(input.split_point..input.len());
    let clamped = ModelSequence {
        x,
        ..target
    }
    .to_semitone_curve();
    Ok(SemitoneCurve {
        semitones: clamped
            .semitones
            .iter()
            .map(|s| s.clamp(MIDI_LOW, MIDI_HIGH))
            .collect(),
        voiced: clamped.voiced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::denormalize_unchecked;

    fn seq(n: usize, base: f64) -> ModelSequence {
        ModelSequence::new(
            (0..n).map(|i| base + (i as f64 * 0.01).sin() * 0.1).collect(),
            (0..n).map(|i| (i % 73) as u8).collect(),
            (0..n).map(|i| i % 5 == 0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn apc_layout() {
        let off = seq(400, 0.1);
        let y_in: Vec<u8> = vec![40; 400];
        let task = build_apc(&off, &y_in, 1024).unwrap();
        assert_eq!((task.len(), task.split_point, task.mask.count()), (800, 400, 400));
        assert!(task.mask.m[400..].iter().all(|&m| m) && task.mask.m[..400].iter().all(|&m| !m));
        assert_eq!(&task.seq.y[400..], &y_in[..]);
        assert_eq!(&task.seq.u[400..], &off.u[..]);
        assert_eq!(&task.seq.u[..400], &off.u[..]);
        assert!(task.seq.x[400..].iter().all(|&x| x == 0.0));
        assert!(build_apc(&seq(600, 0.0), &[40; 600], 1024).is_err());
        assert!(build_apc(&off, &[40; 10], 1024).is_err());
    }

    #[test]
    fn transfer_layout_and_bounds() {
        let task = build_transfer(&seq(500, 0.0), &seq(400, 0.2), 1024).unwrap();
        assert_eq!((task.len(), task.mask.count(), task.split_point), (900, 400, 500));
        assert!(task.mask.is_contiguous());
        assert!(build_transfer(&seq(700, 0.0), &seq(400, 0.0), 1024).is_err());
    }

    #[test]
    fn empty_reference_equals_fully_masked_target() {
        let tgt = seq(300, 0.0);
        let task = build_transfer(&ModelSequence::empty(), &tgt, 1024).unwrap();
        assert_eq!(task.seq, tgt);
        assert_eq!(task.mask, Mask::all(300));
        assert!(!task.has_context());
    }

    #[test]
    fn split_round_trip_and_voicing() {
        let (r, t) = (seq(120, -0.1), seq(80, 0.3));
        let task = build_transfer(&r, &t, 256).unwrap();
        let x_hat = task.seq.x.clone();
        assert_eq!(split_normalized(&x_hat, &task).unwrap(), t.x);
        let curve = split_result(&x_hat, &task).unwrap();
        assert_eq!(curve.len(), 80);
        let voiced: Vec<bool> = t.u.iter().map(|u| !u).collect();
        assert_eq!(curve.voiced, voiced);
        for (s, x) in curve.semitones.iter().zip(&t.x) {
            assert_eq!(*s, denormalize_unchecked(*x));
        }
        assert!(split_result(&x_hat[1..], &task).is_err());
    }

    #[test]
    fn split_clamps_wild_output() {
        let task = build_transfer(&seq(4, 0.0), &seq(4, 0.0), 16).unwrap();
        let curve = split_result(&[0.0, 0.0, 0.0, 0.0, 5.0, -5.0, 0.0, 0.0], &task).unwrap();
        assert_eq!(&curve.semitones[..2], &[MIDI_HIGH, MIDI_LOW]);
    }
}
