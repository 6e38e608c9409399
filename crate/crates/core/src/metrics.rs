//! Objective metrics over decoded note streams, following the usual
//! multitrack-generation evaluation convention: pitch-class entropy, scale
//! consistency and groove consistency.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::midi_io::NoteEvent;

/// Four beats at twelve ticks per beat.
pub const DEFAULT_BAR_TICKS: u32 = 48;

const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const NATURAL_MINOR: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];

fn class_counts(events: &[NoteEvent]) -> Result<[usize; 12]> {
    if events.is_empty() {
        return Err(Error::EmptyPiece);
    }
    let mut counts = [0usize; 12];
    for e in events {
        counts[(e.pitch % 12) as usize] += 1;
    }
    Ok(counts)
}

/// Shannon entropy in bits of the 12-bin pitch-class histogram.
pub fn pitch_class_entropy(events: &[NoteEvent]) -> Result<f64> {
    let counts = class_counts(events)?;
    let n = events.len() as f64;
    Ok(-counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>())
}

/// Bitmask over pitch classes for each of the 24 major and natural-minor
/// scales.
pub fn scale_masks() -> [u16; 24] {
    std::array::from_fn(|i| {
        let (root, steps) = if i < 12 { (i, &MAJOR) } else { (i - 12, &NATURAL_MINOR) };
        steps.iter().fold(0u16, |m, s| m | 1 << ((root + *s as usize) % 12))
    })
}

/// Largest fraction of notes inside any single major or natural-minor
/// scale.
pub fn scale_consistency(events: &[NoteEvent]) -> Result<f64> {
    let counts = class_counts(events)?;
    let best = scale_masks()
        .iter()
        .map(|mask| (0..12).filter(|c| mask & (1 << c) != 0).map(|c| counts[c]).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / events.len() as f64)
}

/// Number of bars needed to hold every note from tick 0 to its release.
pub fn bar_count(events: &[NoteEvent], resolution: u32, bar_ticks: u32) -> usize {
    events
        .iter()
        .map(|e| e.onset(resolution) + e.duration.max(1))
        .max()
        .map_or(0, |end| end.div_ceil(bar_ticks) as usize)
}

/// One minus the mean normalized Hamming distance between the onset
/// patterns of consecutive bars.
pub fn groove_consistency(events: &[NoteEvent], resolution: u32, bar_ticks: u32) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::EmptyPiece);
    }
    let bars = bar_count(events, resolution, bar_ticks);
    if bars < 2 {
        return Err(Error::TooShort { bars });
    }
    let width = bar_ticks as usize;
    let mut grooves = vec![false; bars * width];
    for e in events {
        grooves[e.onset(resolution) as usize] = true;
    }
    let distance: usize = grooves
        .chunks_exact(width)
        .zip(grooves.chunks_exact(width).skip(1))
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
        .sum();
    Ok(1.0 - distance as f64 / ((bars - 1) * width) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub pitch_class_entropy: f64,
    pub scale_consistency: f64,
    /// `None` for pieces shorter than two bars.
    pub groove_consistency: Option<f64>,
    pub n_notes: usize,
    pub n_bars: usize,
}

pub fn evaluate_piece(events: &[NoteEvent], resolution: u32, bar_ticks: u32) -> Result<MetricReport> {
    let groove = match groove_consistency(events, resolution, bar_ticks) {
        Ok(g) => Some(g),
        Err(Error::TooShort { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        pitch_class_entropy: pitch_class_entropy(events)?,
        scale_consistency: scale_consistency(events)?,
        groove_consistency: groove,
        n_notes: events.len(),
        n_bars: bar_count(events, resolution, bar_ticks),
    })
}

/// Mean and population standard deviation; `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Per-piece rows followed by `mean` and `std` rows.
pub fn write_report_csv<W: Write>(rows: &[(String, MetricReport)], mut w: W) -> Result<()> {
    writeln!(w, "piece,n_notes,n_bars,pitch_class_entropy,scale_consistency,groove_consistency")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (name, r) in rows {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{}",
            csv_field(name),
            r.n_notes,
            r.n_bars,
            r.pitch_class_entropy,
            r.scale_consistency,
            opt(r.groove_consistency)
        )?;
    }
    let column = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(|(_, r)| f(r)).collect();
        mean_std(&v)
    };
    let stats = [
        column(&|r| Some(r.n_notes as f64)),
        column(&|r| Some(r.n_bars as f64)),
        column(&|r| Some(r.pitch_class_entropy)),
        column(&|r| Some(r.scale_consistency)),
        column(&|r| r.groove_consistency),
    ];
    for (label, pick) in [("mean", 0), ("std", 1)] {
        write!(w, "{label}")?;
        for s in &stats {
            write!(w, ",{}", opt(s.map(|(m, sd)| if pick == 0 { m } else { sd })))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(onset: u32, pitch: u8) -> NoteEvent {
        NoteEvent::from_onset(onset, 12, pitch, 6, 0)
    }

    fn pitches(ps: &[u8]) -> Vec<NoteEvent> {
        ps.iter().enumerate().map(|(i, &p)| note(i as u32, p)).collect()
    }

    #[test]
    fn entropy_anchors() {
        assert_eq!(pitch_class_entropy(&pitches(&[60, 72, 48])).unwrap(), 0.0);
        let all: Vec<u8> = (60..72).collect();
        assert!((pitch_class_entropy(&pitches(&all)).unwrap() - 12f64.log2()).abs() < 1e-12);
        // counts (2, 1, 1)
        let h = pitch_class_entropy(&pitches(&[60, 72, 61, 62])).unwrap();
        assert!((h - 1.5).abs() < 1e-12);
        assert!(matches!(pitch_class_entropy(&[]), Err(Error::EmptyPiece)));
    }

    #[test]
    fn scale_anchors() {
        assert_eq!(scale_consistency(&pitches(&[60, 62, 64, 65, 67, 69, 71])).unwrap(), 1.0);
        let all: Vec<u8> = (60..72).collect();
        assert!((scale_consistency(&pitches(&all)).unwrap() - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(scale_consistency(&pitches(&[61])).unwrap(), 1.0);
    }

    #[test]
    fn scale_masks_have_seven_classes() {
        let masks = scale_masks();
        assert!(masks.iter().all(|m| m.count_ones() == 7));
        // A minor shares C major's classes
        assert_eq!(masks[0], masks[12 + 9]);
    }

    #[test]
    fn groove_anchors() {
        let same: Vec<NoteEvent> = (0..4).flat_map(|b| [note(b * 48, 60), note(b * 48 + 12, 64)]).collect();
        assert_eq!(groove_consistency(&same, 12, 48).unwrap(), 1.0);

        // every tick of bar 1 starts a note; the last one rings into bar 2
        let dense: Vec<NoteEvent> = (0..48).map(|t| note(t, 60)).collect();
        assert_eq!(bar_count(&dense, 12, 48), 2);
        assert_eq!(groove_consistency(&dense, 12, 48).unwrap(), 0.0);

        assert!(matches!(groove_consistency(&[note(5, 60)], 12, 48), Err(Error::TooShort { bars: 1 })));
        assert_eq!(bar_count(&[note(42, 60)], 12, 48), 1);
    }

    #[test]
    fn report_csv_shape() {
        let a = evaluate_piece(&pitches(&[60, 62, 64]), 12, 48).unwrap();
        assert_eq!(a.groove_consistency, None);
        let rows = vec![("a".to_string(), a.clone()), ("b,c".to_string(), a)];
        let mut out = Vec::new();
        write_report_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 2);
        assert!(lines[2].starts_with("\"b,c\","));
        assert!(lines[3].starts_with("mean,3.000000,1.000000,"));
        assert!(lines[4].starts_with("std,0.000000,"));
    }
}
