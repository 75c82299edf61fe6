//! Deterministic SVG overlay: context pitch in blue, generated pitch in red,
//! score notes as grey bars.

use std::fmt::Write as _;

use crate::score::NoteEvent;
use crate::signal::SemitoneCurve;

const WIDTH: f64 = 1000.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 40.0;

pub struct PlotInput<'a> {
    /// Context curve, drawn from frame 0.
    pub context: &'a SemitoneCurve,
    /// Generated curve, drawn right after the context.
    pub generated: &'a SemitoneCurve,
    /// Notes over the whole timeline (context then generated frames).
    pub notes: &'a [NoteEvent],
    pub frame_rate_hz: f64,
}

struct Frame {
    n_frames: f64,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn x(&self, frame: f64) -> f64 {
        MARGIN + frame / self.n_frames.max(1.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, semitone: f64) -> f64 {
        HEIGHT - MARGIN - (semitone - self.lo) / (self.hi - self.lo) * (HEIGHT - 2.0 * MARGIN)
    }
}

/// Voiced runs as `M x y L x y ...` path data.
fn path_data(frame: &Frame, curve: &SemitoneCurve, offset: usize) -> String {
    let mut d = String::new();
    let mut pen_down = false;
    for (i, (&s, &v)) in curve.semitones.iter().zip(&curve.voiced).enumerate() {
        if !v {
            pen_down = false;
            continue;
        }
        let cmd = if pen_down { 'L' } else { 'M' };
        let _ = write!(d, "{cmd}{:.2} {:.2} ", frame.x((offset + i) as f64), frame.y(s));
        pen_down = true;
    }
    d.trim_end().to_owned()
}

pub fn render_svg(p: &PlotInput<'_>) -> String {
    let voiced = p
        .context
        .semitones
        .iter()
        .zip(&p.context.voiced)
        .chain(p.generated.semitones.iter().zip(&p.generated.voiced))
        .filter(|(_, &v)| v)
        .map(|(&s, _)| s)
        .chain(p.notes.iter().map(NoteEvent::semitone));
    let (lo, hi) = voiced.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
    let (lo, hi) = if lo.is_finite() { (lo.floor() - 2.0, hi.ceil() + 2.0) } else { (58.0, 62.0) };
    let frame = Frame {
        n_frames: (p.context.len() + p.generated.len()) as f64,
        lo,
        hi,
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    for s in (lo as i64)..=(hi as i64) {
        let y = frame.y(s as f64);
        let stroke = if s % 12 == 0 { "#bbbbbb" } else { "#eeeeee" };
        let _ = writeln!(
            svg,
            r#"<path d="M{MARGIN:.2} {y:.2} L{:.2} {y:.2}" stroke="{stroke}" stroke-width="0.5"/>"#,
            WIDTH - MARGIN
        );
    }
    for n in p.notes {
        let y = frame.y(n.semitone());
        let _ = writeln!(
            svg,
            r##"<path d="M{:.2} {y:.2} L{:.2} {y:.2}" stroke="#888888" stroke-width="4" stroke-opacity="0.5"/>"##,
            frame.x(n.onset_frame as f64),
            frame.x(n.offset_frame as f64)
        );
    }
    if !p.context.is_empty() {
        let x = frame.x(p.context.len() as f64);
        let _ = writeln!(
            svg,
            r##"<path d="M{x:.2} {MARGIN:.2} L{x:.2} {:.2}" stroke="#444444" stroke-dasharray="4 4"/>"##,
            HEIGHT - MARGIN
        );
    }
    for (curve, offset, colour) in [
        (p.context, 0, "#1f4fd1"),
        (p.generated, p.context.len(), "#d11f1f"),
    ] {
        let d = path_data(&frame, curve, offset);
        if !d.is_empty() {
            let _ = writeln!(svg, r#"<path d="{d}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#);
        }
    }
    let seconds = frame.n_frames / p.frame_rate_hz;
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{:.2}" font-family="sans-serif" font-size="12">{seconds:.2} s, MIDI {lo}..{hi}</text>"#,
        HEIGHT - 12.0
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_both_curves_and_breaks_at_unvoiced_frames() {
        let ctx = SemitoneCurve {
            semitones: vec![60.0, 60.5, 61.0, 61.0],
            voiced: vec![true, true, false, true],
        };
        let generated = SemitoneCurve {
            semitones: vec![62.0, 62.0],
            voiced: vec![true, true],
        };
        let notes = [NoteEvent::new(0, 6, 36).unwrap()];
        let svg = render_svg(&PlotInput {
            context: &ctx,
            generated: &generated,
            notes: &notes,
            frame_rate_hz: 50.0,
        });
        assert!(svg.contains("#1f4fd1") && svg.contains("#d11f1f"));
        let blue = svg.lines().find(|l| l.contains("#1f4fd1")).unwrap();
        assert_eq!(blue.matches('M').count(), 2);
        assert!(svg.ends_with("</svg>\n"));
    }
}
