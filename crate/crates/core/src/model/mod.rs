//! Decoder-only causal model over token grids.
//!
//! Each grid row is embedded as the sum of one embedding per field plus a
//! learned absolute position embedding. A pre-norm transformer trunk feeds
//! one linear head per field. All arithmetic is `f64`.

mod checkpoint;
mod generate;
mod sampling;
mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::delay_codec::DelaySchedule;
use crate::error::{Error, Result};
use crate::tokenizer::{Field, FieldVocabulary, NUM_FIELDS};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use generate::{generate, prompt_prefix, DecodeMode, Generation};
pub use sampling::{DecodeState, SamplingConfig};
pub use transformer::{IncrementalState, LossStats, StepLogits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_steps: usize,
    pub vocab: FieldVocabulary,
    pub schedule: DelaySchedule,
    /// Share each field's input embedding with its output head.
    pub tie_embeddings: bool,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 256,
            dropout: 0.1,
            max_steps: 1024,
            vocab: FieldVocabulary::default(),
            schedule: DelaySchedule::uniform(),
            tie_embeddings: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// The full-size configuration: 8 layers, 8 heads, width 512.
    pub fn full_size() -> Self {
        Self {
            layers: 8,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig("layers, heads, d_model and d_ff must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_steps <= self.schedule.max_delay() {
            return Err(Error::InvalidConfig(format!(
                "max_steps {} leaves no room for delay {}",
                self.max_steps,
                self.schedule.max_delay()
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// Projections are `[out, in]`.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// One `[vocab, d_model]` table per field.
    pub field_embed: Vec<Tensor>,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// `[vocab, d_model]` per field; empty when embeddings are tied.
    pub head_weight: Vec<Tensor>,
    pub head_bias: Vec<Tensor>,
}

impl Params {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = cfg.init_std;
        let dm = cfg.d_model;
        let mut p = Self::zeros(cfg);
        for t in &mut p.field_embed {
            *t = Tensor::normal(t.rows, t.cols, std, &mut rng);
        }
        p.pos_embed = Tensor::normal(cfg.max_steps, dm, std, &mut rng);
        for layer in &mut p.layers {
            for w in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo, &mut layer.w1, &mut layer.w2] {
                *w = Tensor::normal(w.rows, w.cols, std, &mut rng);
            }
        }
        for w in &mut p.head_weight {
            *w = Tensor::normal(w.rows, w.cols, std, &mut rng);
        }
        p
    }

    /// Same shapes as `cfg` requires, all zeros except unit norm gains.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let dm = cfg.d_model;
        let sizes = cfg.vocab.sizes.map(|s| s as usize);
        let layer = || LayerParams {
            ln1_gain: Tensor::filled(1, dm, 1.0),
            ln1_bias: Tensor::zeros(1, dm),
            wq: Tensor::zeros(dm, dm),
            wk: Tensor::zeros(dm, dm),
            wv: Tensor::zeros(dm, dm),
            wo: Tensor::zeros(dm, dm),
            ln2_gain: Tensor::filled(1, dm, 1.0),
            ln2_bias: Tensor::zeros(1, dm),
            w1: Tensor::zeros(cfg.d_ff, dm),
            b1: Tensor::zeros(1, cfg.d_ff),
            w2: Tensor::zeros(dm, cfg.d_ff),
            b2: Tensor::zeros(1, dm),
        };
        Self {
            field_embed: sizes.iter().map(|&v| Tensor::zeros(v, dm)).collect(),
            pos_embed: Tensor::zeros(cfg.max_steps, dm),
            layers: (0..cfg.layers).map(|_| layer()).collect(),
            final_gain: Tensor::filled(1, dm, 1.0),
            final_bias: Tensor::zeros(1, dm),
            head_weight: if cfg.tie_embeddings {
                Vec::new()
            } else {
                sizes.iter().map(|&v| Tensor::zeros(v, dm)).collect()
            },
            head_bias: sizes.iter().map(|&v| Tensor::zeros(1, v)).collect(),
        }
    }

    /// Zero-valued tensors of identical shapes (gains included).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (d, t) in self.field_embed.iter().enumerate() {
            out.push((format!("embed.{}", Field::ALL[d]), t));
        }
        out.push(("embed.position".into(), &self.pos_embed));
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(layer_tensors(l).map(|(name, t)| (format!("layer{i}.{name}"), t)));
        }
        out.push(("final.gain".into(), &self.final_gain));
        out.push(("final.bias".into(), &self.final_bias));
        for (d, t) in self.head_weight.iter().enumerate() {
            out.push((format!("head.{}.weight", Field::ALL[d]), t));
        }
        for (d, t) in self.head_bias.iter().enumerate() {
            out.push((format!("head.{}.bias", Field::ALL[d]), t));
        }
        out
    }

    /// Mutable counterpart of [`Params::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (d, t) in self.field_embed.iter_mut().enumerate() {
            out.push((format!("embed.{}", Field::ALL[d]), t));
        }
        out.push(("embed.position".into(), &mut self.pos_embed));
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(layer_tensors_mut(l).map(|(name, t)| (format!("layer{i}.{name}"), t)));
        }
        out.push(("final.gain".into(), &mut self.final_gain));
        out.push(("final.bias".into(), &mut self.final_bias));
        for (d, t) in self.head_weight.iter_mut().enumerate() {
            out.push((format!("head.{}.weight", Field::ALL[d]), t));
        }
        for (d, t) in self.head_bias.iter_mut().enumerate() {
            out.push((format!("head.{}.bias", Field::ALL[d]), t));
        }
        out
    }

    /// Every scalar, concatenated in [`Params::named`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.named().into_iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Mutable access to the scalar at `index` of [`Params::flat`] order.
    pub fn scalar_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for (_, t) in self.named_mut() {
            if index < t.len() {
                return Some(&mut t.data[index]);
            }
            index -= t.len();
        }
        None
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }
}

fn layer_tensors(l: &LayerParams) -> [(&'static str, &Tensor); 12] {
    [
        ("ln1.gain", &l.ln1_gain),
        ("ln1.bias", &l.ln1_bias),
        ("attn.q", &l.wq),
        ("attn.k", &l.wk),
        ("attn.v", &l.wv),
        ("attn.out", &l.wo),
        ("ln2.gain", &l.ln2_gain),
        ("ln2.bias", &l.ln2_bias),
        ("ffn.w1", &l.w1),
        ("ffn.b1", &l.b1),
        ("ffn.w2", &l.w2),
        ("ffn.b2", &l.b2),
    ]
}

fn layer_tensors_mut(l: &mut LayerParams) -> [(&'static str, &mut Tensor); 12] {
    [
        ("ln1.gain", &mut l.ln1_gain),
        ("ln1.bias", &mut l.ln1_bias),
        ("attn.q", &mut l.wq),
        ("attn.k", &mut l.wk),
        ("attn.v", &mut l.wv),
        ("attn.out", &mut l.wo),
        ("ln2.gain", &mut l.ln2_gain),
        ("ln2.bias", &mut l.ln2_bias),
        ("ffn.w1", &mut l.w1),
        ("ffn.b1", &mut l.b1),
        ("ffn.w2", &mut l.w2),
        ("ffn.b2", &mut l.b2),
    ]
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let shapes = |p: &Params| -> Vec<(String, usize, usize)> {
            p.named().into_iter().map(|(n, t)| (n, t.rows, t.cols)).collect()
        };
        if shapes(&Params::zeros(&config)) != shapes(&params) {
            return Err(Error::CheckpointMismatch("parameter shapes do not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn vocab(&self) -> &FieldVocabulary {
        &self.config.vocab
    }

    pub fn schedule(&self) -> &DelaySchedule {
        &self.config.schedule
    }

    /// Output-head weight table for `field`, honoring tying.
    pub fn head_table(&self, field: usize) -> &Tensor {
        if self.config.tie_embeddings {
            &self.params.field_embed[field]
        } else {
            &self.params.head_weight[field]
        }
    }

    pub(crate) fn check_row(&self, row: &[u32; NUM_FIELDS]) -> Result<()> {
        for f in Field::ALL {
            self.config.vocab.check_index(f, row[f.index()])?;
        }
        Ok(())
    }
}
