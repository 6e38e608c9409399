use std::path::Path;

use anyhow::{Context, Result};
use dptok_core::delay_codec::DelaySchedule;
use dptok_core::midi_io::QuantizationConfig;
use dptok_core::model::{ModelConfig, SamplingConfig};
use dptok_core::tokenizer::{FieldVocabulary, NUM_FIELDS};
use dptok_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

/// Everything a run can be configured with. Files may set any subset;
/// missing keys keep these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub quantization: QuantizationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            quantization: QuantizationConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
            sampling: SamplingConfig::default(),
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with a TOML or JSON file (chosen by extension).
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let overlay: Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
        };
        let mut value = serde_json::to_value(Self::default())?;
        merge(&mut value, overlay);
        serde_json::from_value(value).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }

    /// Propagates shared settings: the vocabulary follows the quantization
    /// grid and one seed drives initialization, batching and sampling.
    pub fn finish(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.model.vocab = FieldVocabulary::from_quantization(&self.quantization);
        self.train.seed = self.seed;
        self.sampling.seed = self.seed;
        if let Some(a) = self.train.augment.as_mut() {
            a.seed = self.seed;
        }
        self
    }

    pub fn log(&self) {
        match serde_json::to_string(self) {
            Ok(json) => log::info!("resolved config: {json}"),
            Err(e) => log::warn!("cannot serialize config: {e}"),
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct ModelArgs {
    /// Delay schedule: "uniform", "zero" or six comma-separated delays
    #[arg(long)]
    pub schedule: Option<DelaySchedule>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Longest grid the model accepts
    #[arg(long)]
    pub model_max_steps: Option<usize>,
    #[arg(long)]
    pub tie_embeddings: bool,
}

impl ModelArgs {
    pub fn apply(&self, cfg: &mut ModelConfig) {
        if let Some(s) = self.schedule {
            cfg.schedule = s;
        }
        set(&mut cfg.layers, self.layers);
        set(&mut cfg.heads, self.heads);
        set(&mut cfg.d_model, self.d_model);
        set(&mut cfg.d_ff, self.d_ff);
        set(&mut cfg.dropout, self.dropout);
        set(&mut cfg.max_steps, self.model_max_steps);
        if self.tie_embeddings {
            cfg.tie_embeddings = true;
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Random pitch transposition within -5..=6 semitones
    #[arg(long)]
    pub augment: bool,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.total_steps, self.steps);
        set(&mut cfg.lr_peak, self.lr);
        set(&mut cfg.warmup_steps, self.warmup);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.max_seq_len, self.max_seq_len);
        set(&mut cfg.eval_every, self.eval_every);
        if self.grad_clip.is_some() {
            cfg.grad_clip = self.grad_clip;
        }
        if self.augment && cfg.augment.is_none() {
            cfg.augment = Some(Default::default());
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct SamplingArgs {
    /// One k for every field, or six comma-separated values
    #[arg(long, value_parser = parse_top_k)]
    pub top_k: Option<[usize; NUM_FIELDS]>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

impl SamplingArgs {
    pub fn apply(&self, cfg: &mut SamplingConfig) {
        set(&mut cfg.top_k, self.top_k);
        set(&mut cfg.temperature, self.temperature);
    }
}

fn parse_top_k(s: &str) -> std::result::Result<[usize; NUM_FIELDS], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts.len() {
        1 => Ok([parts[0]; NUM_FIELDS]),
        NUM_FIELDS => Ok(parts.try_into().expect("length checked")),
        n => Err(format!("expected 1 or {NUM_FIELDS} values, got {n}")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
