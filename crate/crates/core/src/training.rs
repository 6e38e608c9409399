//! Teacher-forced training: learning-rate schedule, Adam, batching with
//! pitch augmentation, and the optimization loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::delay_codec::{dp_encode, DelaySchedule, TokenGrid};
use crate::error::{Error, Result};
use crate::midi_io::AugmentConfig;
use crate::model::{LossStats, Model, Params};
use crate::tokenizer::{tokens_from_bytes, CompoundToken, Field, FieldVocabulary, TokenType, NUM_FIELDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Pitch transposition drawn per sequence; off when `None`.
    pub augment: Option<AugmentConfig>,
    /// Held-out evaluation period in steps (0 evaluates only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            warmup_steps: 4000,
            batch_size: 16,
            max_seq_len: 1024,
            total_steps: 200_000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip: None,
            augment: None,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: 100 warmup steps, 2000 steps in total.
    pub fn desk() -> Self {
        Self {
            warmup_steps: 100,
            total_steps: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self, model_max_steps: usize) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::InvalidConfig("warmup_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.max_seq_len > model_max_steps {
            return Err(Error::InvalidConfig(format!(
                "max_seq_len {} exceeds model max_steps {model_max_steps}",
                self.max_seq_len
            )));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr_peak {} must be positive", self.lr_peak)));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak`, then inverse square-root decay. `step` is
/// 1-based.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warmup = cfg.warmup_steps.max(1) as f64;
    if step <= warmup {
        cfg.lr_peak * step / warmup
    } else {
        cfg.lr_peak * (warmup / step).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Params,
    v: Params,
    steps: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &Params, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let tensors = params
            .named_mut()
            .into_iter()
            .zip(grads.named())
            .zip(self.m.named_mut().into_iter().zip(self.v.named_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Reads token files written in the tokenizer's binary format.
pub fn load_token_files<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<Vec<CompoundToken>>> {
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p.as_ref())?;
            tokens_from_bytes(&bytes)
                .map_err(|e| Error::BadFormat(format!("{}: {e}", p.as_ref().display())))
        })
        .collect()
}

/// Shifts every note's pitch index by `semitones`, dropping notes that
/// leave the MIDI range. Other tokens and fields are untouched.
pub fn shift_pitch(tokens: &[CompoundToken], semitones: i32) -> (Vec<CompoundToken>, usize) {
    let p = Field::Pitch.index();
    let mut dropped = 0;
    let out = tokens
        .iter()
        .filter_map(|t| {
            if t.kind() != Some(TokenType::Note) {
                return Some(*t);
            }
            let shifted = t.0[p] as i32 + semitones;
            if (1..=128).contains(&shifted) {
                let mut t = *t;
                t.0[p] = shifted as u32;
                Some(t)
            } else {
                dropped += 1;
                None
            }
        })
        .collect();
    (out, dropped)
}

/// Endless stream of training batches.
///
/// Each epoch visits every piece once in an order drawn from the seed and
/// epoch number; a batch may straddle two epochs. Grids are truncated to
/// `max_seq_len` steps. Sequences are processed one by one, so they are
/// never right-padded: trailing pad rows would only add excluded targets.
#[derive(Debug, Clone)]
pub struct BatchStream {
    pieces: Vec<Vec<CompoundToken>>,
    schedule: DelaySchedule,
    vocab: FieldVocabulary,
    batch_size: usize,
    max_seq_len: usize,
    seed: u64,
    augment: Option<AugmentConfig>,
    aug_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

pub fn make_batches(
    pieces: Vec<Vec<CompoundToken>>,
    cfg: &TrainConfig,
    schedule: DelaySchedule,
    vocab: FieldVocabulary,
) -> Result<BatchStream> {
    if pieces.is_empty() {
        return Err(Error::TooFewPieces { needed: 1, got: 0 });
    }
    for (i, p) in pieces.iter().enumerate() {
        dp_encode(p, &schedule, &vocab).map_err(|e| Error::BadFormat(format!("piece {i}: {e}")))?;
    }
    let aug_seed = cfg.augment.as_ref().map_or(0, |a| a.seed);
    let mut stream = BatchStream {
        pieces,
        schedule,
        vocab,
        batch_size: cfg.batch_size,
        max_seq_len: cfg.max_seq_len,
        seed: cfg.seed,
        augment: cfg.augment.clone(),
        aug_rng: ChaCha8Rng::seed_from_u64(aug_seed ^ cfg.seed.rotate_left(17)),
        order: Vec::new(),
        cursor: 0,
        epoch: 0,
    };
    stream.shuffle();
    Ok(stream)
}

impl BatchStream {
    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = (0..self.pieces.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Piece indices of the next batch, advancing the stream.
    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn next_batch(&mut self) -> Result<Vec<TokenGrid>> {
        self.next_indices().into_iter().map(|i| self.grid(i)).collect()
    }

    fn grid(&mut self, index: usize) -> Result<TokenGrid> {
        let piece = &self.pieces[index];
        let grid = match &self.augment {
            Some(a) => {
                let (shifted, _) = shift_pitch(piece, a.draw(&mut self.aug_rng));
                dp_encode(&shifted, &self.schedule, &self.vocab)?
            }
            None => dp_encode(piece, &self.schedule, &self.vocab)?,
        };
        Ok(truncate(grid, self.max_seq_len))
    }
}

pub fn truncate(grid: TokenGrid, max_steps: usize) -> TokenGrid {
    if grid.steps() <= max_steps {
        return grid;
    }
    let schedule = *grid.schedule();
    let mut rows = grid.into_rows();
    rows.truncate(max_steps);
    TokenGrid::from_rows(rows, schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub field_loss: [f64; NUM_FIELDS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    pub step: usize,
    pub loss: f64,
    pub accuracy: [f64; NUM_FIELDS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub held_out: Vec<HeldOut>,
}

/// Teacher-forced loss and per-field accuracy over `grids`.
pub fn evaluate(model: &Model, grids: &[TokenGrid]) -> Result<LossStats> {
    let mut total = LossStats::default();
    for g in grids {
        total.merge(&model.loss_stats(g.rows())?);
    }
    Ok(total)
}

/// Runs `cfg.total_steps` Adam steps on `model` in place.
///
/// Each step averages the cross-entropy over every contributing cell of the
/// batch. `held_out` is scored every `eval_every` steps and at the end.
pub fn train(model: &mut Model, batches: &mut BatchStream, cfg: &TrainConfig, held_out: &[TokenGrid]) -> Result<TrainReport> {
    cfg.validate(model.config.max_steps)?;
    let mut adam = Adam::new(&model.params, cfg);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let use_dropout = model.config.dropout > 0.0;
    let mut report = TrainReport {
        trace: Vec::with_capacity(cfg.total_steps),
        held_out: Vec::new(),
    };
    for step in 1..=cfg.total_steps {
        let batch = batches.next_batch()?;
        let mut stats = LossStats::default();
        let mut grads = model.params.zeros_like();
        for grid in &batch {
            let rng = use_dropout.then_some(&mut dropout_rng);
            let (s, g) = model.loss_and_grad(grid.rows(), rng)?;
            stats.merge(&s);
            grads.add_scaled(&g, 1.0);
        }
        let cells = stats.cells();
        if cells == 0 {
            return Err(Error::EmptyGrid);
        }
        let loss = stats.mean();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let mut scale = 1.0 / cells as f64;
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.flat().iter().map(|g| g * g).sum::<f64>().sqrt() * scale;
            if norm > clip {
                scale *= clip / norm;
            }
        }
        let mut scaled = grads.zeros_like();
        scaled.add_scaled(&grads, scale);
        let lr = lr_at(step, cfg);
        adam.step(&mut model.params, &scaled, lr);
        log::debug!("step {step} lr {lr:.3e} loss {loss:.5}");
        report.trace.push(TraceRow {
            step,
            lr,
            loss,
            field_loss: stats.field_mean(),
        });
        let last = step == cfg.total_steps;
        if !held_out.is_empty() && (last || (cfg.eval_every > 0 && step % cfg.eval_every == 0)) {
            let s = evaluate(model, held_out)?;
            log::info!("step {step} held-out loss {:.5}", s.mean());
            report.held_out.push(HeldOut {
                step,
                loss: s.mean(),
                accuracy: s.field_accuracy(),
            });
        }
    }
    Ok(report)
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut w: W) -> Result<()> {
    write!(w, "step,lr,loss")?;
    for f in Field::ALL {
        write!(w, ",{f}")?;
    }
    writeln!(w)?;
    for r in trace {
        write!(w, "{},{:e},{}", r.step, r.lr, r.loss)?;
        for l in r.field_loss {
            write!(w, ",{l}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
