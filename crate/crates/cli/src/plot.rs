//! Piano-roll rendering to SVG or PNG.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use dptok_core::midi_io::NoteEvent;
use image::{Rgb, RgbImage};

const TICK_PX: u32 = 2;
const PITCH_PX: u32 = 4;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];
const SHADE: [u8; 3] = [225, 225, 225];
const BAR_LINE: [u8; 3] = [190, 190, 190];

struct Layout {
    low: u8,
    high: u8,
    ticks: u32,
}

impl Layout {
    fn new(events: &[NoteEvent], resolution: u32, prompt_ticks: u32) -> Self {
        let low = events.iter().map(|e| e.pitch).min().unwrap_or(60).saturating_sub(2);
        let high = events.iter().map(|e| e.pitch).max().unwrap_or(60).saturating_add(2).min(127);
        let ticks = events
            .iter()
            .map(|e| e.onset(resolution) + e.duration)
            .max()
            .unwrap_or(0)
            .max(prompt_ticks)
            .max(1);
        Self { low, high, ticks }
    }

    fn width(&self) -> u32 {
        self.ticks * TICK_PX
    }

    fn height(&self) -> u32 {
        (self.high - self.low + 1) as u32 * PITCH_PX
    }

    fn y(&self, pitch: u8) -> u32 {
        (self.high - pitch) as u32 * PITCH_PX
    }
}

fn color(instrument: u32) -> [u8; 3] {
    PALETTE[instrument as usize % PALETTE.len()]
}

/// SVG piano roll; ticks before `prompt_ticks` are shaded.
pub fn render_svg(events: &[NoteEvent], resolution: u32, bar_ticks: u32, prompt_ticks: u32) -> String {
    let l = Layout::new(events, resolution, prompt_ticks);
    let (w, h) = (l.width(), l.height());
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if prompt_ticks > 0 {
        let [r, g, b] = SHADE;
        let _ = writeln!(
            s,
            r#"<rect class="prompt" width="{}" height="{h}" fill="rgb({r},{g},{b})"/>"#,
            prompt_ticks * TICK_PX
        );
    }
    let [r, g, b] = BAR_LINE;
    for bar in (bar_ticks..l.ticks).step_by(bar_ticks.max(1) as usize) {
        let x = bar * TICK_PX;
        let _ = writeln!(s, r#"<line x1="{x}" y1="0" x2="{x}" y2="{h}" stroke="rgb({r},{g},{b})"/>"#);
    }
    for e in events {
        let [r, g, b] = color(e.instrument);
        let _ = writeln!(
            s,
            r#"<rect class="note" x="{}" y="{}" width="{}" height="{PITCH_PX}" fill="rgb({r},{g},{b})"/>"#,
            e.onset(resolution) * TICK_PX,
            l.y(e.pitch),
            (e.duration * TICK_PX).max(1)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_png(events: &[NoteEvent], resolution: u32, bar_ticks: u32, prompt_ticks: u32) -> RgbImage {
    let l = Layout::new(events, resolution, prompt_ticks);
    let mut img = RgbImage::from_pixel(l.width(), l.height(), Rgb([255, 255, 255]));
    let mut fill = |x0: u32, y0: u32, w: u32, h: u32, c: [u8; 3]| {
        for x in x0..(x0 + w).min(img.width()) {
            for y in y0..(y0 + h).min(img.height()) {
                img.put_pixel(x, y, Rgb(c));
            }
        }
    };
    fill(0, 0, prompt_ticks * TICK_PX, l.height(), SHADE);
    for bar in (bar_ticks..l.ticks).step_by(bar_ticks.max(1) as usize) {
        fill(bar * TICK_PX, 0, 1, l.height(), BAR_LINE);
    }
    for e in events {
        let w = (e.duration * TICK_PX).max(1);
        fill(e.onset(resolution) * TICK_PX, l.y(e.pitch), w, PITCH_PX, color(e.instrument));
    }
    img
}

/// Writes SVG or PNG depending on the extension of `path`.
pub fn write_plot(path: &Path, events: &[NoteEvent], resolution: u32, bar_ticks: u32, prompt_ticks: u32) -> Result<()> {
    let png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if png {
        render_png(events, resolution, bar_ticks, prompt_ticks)
            .save(path)
            .with_context(|| format!("writing {}", path.display()))?;
    } else {
        std::fs::write(path, render_svg(events, resolution, bar_ticks, prompt_ticks))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn notes() -> Vec<NoteEvent> {
        vec![
            NoteEvent::from_onset(0, 12, 60, 12, 0),
            NoteEvent::from_onset(100, 12, 64, 6, 1),
        ]
    }

    #[test]
    fn svg_has_one_rect_per_note_and_a_shaded_prompt() {
        let svg = render_svg(&notes(), 12, 48, 96);
        assert_eq!(svg.matches(r#"class="note""#).count(), 2);
        assert!(svg.contains(r#"<rect class="prompt" width="192""#));
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn png_marks_prompt_and_notes() {
        let img = render_png(&notes(), 12, 48, 96);
        let l = Layout::new(&notes(), 12, 96);
        assert_eq!(img.dimensions(), (l.width(), l.height()));
        assert_eq!(img.get_pixel(0, l.y(60)).0, PALETTE[0]);
        assert_eq!(img.get_pixel(150, 0).0, SHADE);
        assert_eq!(img.get_pixel(l.width() - 1, 0).0, [255, 255, 255]);
    }
}
