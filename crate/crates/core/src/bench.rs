//! Notes-per-second throughput and decode-step complexity.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::delay_codec::DelaySchedule;
use crate::error::Result;
use crate::metrics::mean_std;
use crate::model::{generate, DecodeMode, Model, SamplingConfig};
use crate::tokenizer::{CompoundToken, NUM_FIELDS};

/// Prompts excluded from timing at the start of every run.
pub const WARMUP_PROMPTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub scheme: String,
    pub pieces: usize,
    pub notes_generated: usize,
    pub wall_seconds: f64,
    /// `notes_generated / wall_seconds`.
    pub nps: f64,
    /// Mean of per-piece NPS.
    pub mean_piece_nps: f64,
    /// Rows decoded after the prompts.
    pub grid_steps: usize,
    /// Coefficient of variation of `nps` across repeated runs.
    pub cv: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    pieces: usize,
    notes: usize,
    seconds: f64,
    piece_nps: f64,
    steps: usize,
}

impl Tally {
    fn result(&self, scheme: &str, runs: &[f64]) -> BenchResult {
        let cv = (runs.len() > 1)
            .then(|| mean_std(runs))
            .flatten()
            .and_then(|(m, s)| (m > 0.0).then_some(s / m));
        BenchResult {
            scheme: scheme.to_string(),
            pieces: self.pieces,
            notes_generated: self.notes,
            wall_seconds: self.seconds,
            nps: nps(self.notes, self.seconds),
            mean_piece_nps: if self.pieces == 0 { 0.0 } else { self.piece_nps / self.pieces as f64 },
            grid_steps: self.steps,
            cv,
        }
    }
}

/// Notes per second, 0 when nothing was generated or no time elapsed.
pub fn nps(notes: usize, seconds: f64) -> f64 {
    if notes == 0 || seconds <= 0.0 {
        0.0
    } else {
        notes as f64 / seconds
    }
}

/// `model` with its schedule replaced, parameters untouched.
pub fn with_schedule(model: &Model, schedule: DelaySchedule) -> Model {
    let mut m = model.clone();
    m.config.schedule = schedule;
    m
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sampling: SamplingConfig,
    pub max_steps: usize,
    pub mode: DecodeMode,
    /// Full passes over the prompt set; their spread gives the CV.
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            max_steps: 1024,
            mode: DecodeMode::FullPrefix,
            runs: 1,
        }
    }
}

/// Times generation for every scheme on the same prompts.
///
/// Schemes are interleaved prompt by prompt so drifts in machine speed hit
/// all of them alike. Prompt `i` is sampled with seed `sampling.seed + i`
/// under every scheme. The first [`WARMUP_PROMPTS`] prompts of each run are
/// generated but not timed. Aggregates cover all runs.
pub fn measure_nps(schemes: &[(&str, &Model)], prompts: &[Vec<CompoundToken>], cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    let mut totals = vec![Tally::default(); schemes.len()];
    let mut run_nps = vec![Vec::new(); schemes.len()];
    for run in 0..cfg.runs.max(1) {
        let mut tallies = vec![Tally::default(); schemes.len()];
        for (i, prompt) in prompts.iter().enumerate() {
            let sampling = SamplingConfig {
                seed: cfg.sampling.seed.wrapping_add(i as u64),
                ..cfg.sampling.clone()
            };
            for (s, (_, model)) in schemes.iter().enumerate() {
                let start = Instant::now();
                let g = generate(model, prompt, &sampling, cfg.max_steps, cfg.mode)?;
                let secs = start.elapsed().as_secs_f64();
                if i < WARMUP_PROMPTS {
                    continue;
                }
                let t = &mut tallies[s];
                t.pieces += 1;
                t.notes += g.notes_generated;
                t.seconds += secs;
                t.piece_nps += nps(g.notes_generated, secs);
                t.steps += g.steps_decoded;
            }
        }
        for (s, t) in tallies.iter().enumerate() {
            log::info!("run {run} {}: {:.2} notes/s", schemes[s].0, nps(t.notes, t.seconds));
            run_nps[s].push(nps(t.notes, t.seconds));
            let total = &mut totals[s];
            total.pieces += t.pieces;
            total.notes += t.notes;
            total.seconds += t.seconds;
            total.piece_nps += t.piece_nps;
            total.steps += t.steps;
        }
    }
    Ok(schemes
        .iter()
        .zip(&totals)
        .zip(&run_nps)
        .map(|(((name, _), t), runs)| t.result(name, runs))
        .collect())
}

/// Decode steps needed for `n` events of `k` fields under each layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Complexity {
    pub n: usize,
    pub parallel: usize,
    pub delay: usize,
    pub flattened: usize,
}

pub fn complexity_table(n: usize, k: usize) -> Complexity {
    Complexity {
        n,
        parallel: n,
        delay: n + k.saturating_sub(1),
        flattened: n * k,
    }
}

pub fn default_complexity(n: usize) -> Complexity {
    complexity_table(n, NUM_FIELDS)
}

pub fn write_markdown<W: Write>(results: &[BenchResult], complexity: &Complexity, mut w: W) -> Result<()> {
    writeln!(w, "| Scheme | Complexity | Steps for N={} | NPS | Mean piece NPS | CV |", complexity.n)?;
    writeln!(w, "|---|---|---|---|---|---|")?;
    for r in results {
        let (big_o, steps) = if r.scheme.contains("zero") || r.scheme.contains("parallel") {
            ("O(N^2)", complexity.parallel)
        } else {
            ("O((N+K-1)^2)", complexity.delay)
        };
        let cv = r.cv.map(|c| format!("{:.1}%", 100.0 * c)).unwrap_or_else(|| "-".into());
        writeln!(
            w,
            "| {} | {big_o} | {steps} | {:.2} | {:.2} | {cv} |",
            r.scheme, r.nps, r.mean_piece_nps
        )?;
    }
    writeln!(w, "| flattened | O((NK)^2) | {} | - | - | - |", complexity.flattened)?;
    Ok(())
}

pub fn write_csv<W: Write>(results: &[BenchResult], mut w: W) -> Result<()> {
    writeln!(w, "scheme,pieces,notes_generated,wall_seconds,nps,mean_piece_nps,grid_steps,cv")?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{:.6},{:.4},{:.4},{},{}",
            r.scheme,
            r.pieces,
            r.notes_generated,
            r.wall_seconds,
            r.nps,
            r.mean_piece_nps,
            r.grid_steps,
            r.cv.map(|c| format!("{c:.6}")).unwrap_or_default()
        )?;
    }
    Ok(())
}
