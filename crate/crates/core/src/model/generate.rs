use super::{DecodeState, Model, SamplingConfig, StepLogits};
use crate::delay_codec::{dp_encode, staircase_rows, Row, TokenGrid};
use crate::error::{Error, Result};
use crate::tokenizer::{CompoundToken, Field, FieldVocabulary, TokenType};

/// How logits are obtained at each decoding step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// Recompute the whole prefix every step.
    #[default]
    FullPrefix,
    /// Reuse cached keys and values.
    Incremental,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full-prefix" => Ok(Self::FullPrefix),
            "incremental" | "kv" => Ok(Self::Incremental),
            other => Err(Error::InvalidConfig(format!("unknown decode mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Staircase grid of the finished sequence, prompt included.
    pub grid: TokenGrid,
    pub tokens: Vec<CompoundToken>,
    pub prompt_len: usize,
    /// Note tokens produced after the prompt.
    pub notes_generated: usize,
    /// Rows decoded after the prompt.
    pub steps_decoded: usize,
}

/// Continues `prompt` until end-of-song and its delayed fields are out, or
/// `max_steps` rows exist. An empty prompt starts from start-of-song.
pub fn generate(
    model: &Model,
    prompt: &[CompoundToken],
    sampling: &SamplingConfig,
    max_steps: usize,
    mode: DecodeMode,
) -> Result<Generation> {
    let vocab = *model.vocab();
    let schedule = *model.schedule();
    let start = [CompoundToken::structural(TokenType::StartOfSong)];
    let prompt = if prompt.is_empty() { &start[..] } else { prompt };
    let max_steps = max_steps.min(model.config.max_steps);

    if prompt.last().and_then(CompoundToken::kind) == Some(TokenType::EndOfSong) {
        crate::tokenizer::validate_grammar(prompt).map_err(Error::from)?;
        return finish(prompt.to_vec(), prompt.len(), 0, &schedule, &vocab);
    }

    let mut state = DecodeState::new(prompt, schedule, vocab, sampling.clone(), max_steps)?;
    let mut rows: Vec<Row> = staircase_rows(prompt, &schedule, &vocab, prompt.len());
    let mut cache = (mode == DecodeMode::Incremental).then(|| model.incremental());
    let mut logits: StepLogits = match cache.as_mut() {
        Some(inc) => {
            let mut last = None;
            for row in &rows {
                last = Some(inc.step(row)?);
            }
            last.expect("prompt is non-empty")
        }
        None => model.forward_last(&rows)?,
    };
    while !state.is_finished() {
        let row = state.sample_step(&logits)?;
        rows.push(row);
        if state.is_finished() {
            break;
        }
        logits = match cache.as_mut() {
            Some(inc) => inc.step(&row)?,
            None => model.forward_last(&rows)?,
        };
    }
    let tokens = state.tokens();
    if state.end_event() != Some(tokens.len()) {
        return Err(Error::NoFeasibleValue {
            step: state.steps(),
            field: Field::Type,
        });
    }
    let decoded = rows.len() - prompt.len();
    finish(tokens, prompt.len(), decoded, &schedule, &vocab)
}

fn finish(
    tokens: Vec<CompoundToken>,
    prompt_len: usize,
    steps_decoded: usize,
    schedule: &crate::delay_codec::DelaySchedule,
    vocab: &FieldVocabulary,
) -> Result<Generation> {
    let grid = dp_encode(&tokens, schedule, vocab)?;
    let notes_generated = tokens[prompt_len.min(tokens.len())..]
        .iter()
        .filter(|t| t.kind() == Some(TokenType::Note))
        .count();
    Ok(Generation {
        grid,
        tokens,
        prompt_len,
        notes_generated,
        steps_decoded,
    })
}

/// The opening `bars` bars of a tokenized piece: its header plus every note
/// whose onset falls before `bars * bar_ticks`, without end-of-song.
pub fn prompt_prefix(
    tokens: &[CompoundToken],
    vocab: &FieldVocabulary,
    bars: usize,
    bar_ticks: u32,
) -> Result<Vec<CompoundToken>> {
    let res = vocab.resolution();
    let onset = |t: &CompoundToken| (t.get(Field::Beat) - 1) * res + t.get(Field::Position) - 1;
    let notes = tokens.iter().filter(|t| t.kind() == Some(TokenType::Note));
    let span = notes.clone().map(onset).max().map_or(0, |o| (o / bar_ticks) as usize + 1);
    if span < bars {
        return Err(Error::PromptTooShort { bars: span, needed: bars });
    }
    let limit = bars as u32 * bar_ticks;
    Ok(tokens
        .iter()
        .filter(|t| match t.kind() {
            Some(TokenType::Note) => onset(t) < limit,
            Some(TokenType::EndOfSong) => false,
            _ => true,
        })
        .copied()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay_codec::{dp_decode, DelaySchedule};
    use crate::midi_io::NoteEvent;
    use crate::model::ModelConfig;
    use crate::tokenizer::{encode_events, validate_grammar};

    fn tiny(schedule: DelaySchedule) -> Model {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            max_steps: 64,
            schedule,
            init_std: 0.5,
            ..ModelConfig::default()
        };
        Model::new(cfg, 3).unwrap()
    }

    fn piece() -> Vec<CompoundToken> {
        let events: Vec<NoteEvent> = (0..10)
            .map(|i| NoteEvent {
                beat: i * 2,
                position: 0,
                pitch: 60 + i as u8,
                duration: 6,
                instrument: 0,
            })
            .collect();
        encode_events(&events, &FieldVocabulary::default()).unwrap()
    }

    #[test]
    fn complete_prompt_returns_at_once() {
        let model = tiny(DelaySchedule::uniform());
        let toks = piece();
        let g = generate(&model, &toks, &SamplingConfig::default(), 64, DecodeMode::FullPrefix).unwrap();
        assert_eq!(g.tokens, toks);
        assert_eq!(g.steps_decoded, 0);
        assert_eq!(g.notes_generated, 0);
    }

    #[test]
    fn deterministic_and_modes_agree() {
        for schedule in [DelaySchedule::uniform(), DelaySchedule::zero(), DelaySchedule::new(&[3, 0, 5, 1, 2, 4]).unwrap()] {
            let model = tiny(schedule);
            let cfg = SamplingConfig {
                seed: 11,
                ..SamplingConfig::default()
            };
            let a = generate(&model, &[], &cfg, 64, DecodeMode::FullPrefix).unwrap();
            let b = generate(&model, &[], &cfg, 64, DecodeMode::FullPrefix).unwrap();
            let c = generate(&model, &[], &cfg, 64, DecodeMode::Incremental).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
            let decoded = dp_decode(&a.grid, model.vocab()).unwrap();
            assert!(validate_grammar(&decoded).is_ok(), "{schedule}");
            assert!(a.grid.steps() <= 64);
        }
    }

    #[test]
    fn prefix_of_two_bars() {
        let vocab = FieldVocabulary::default();
        let toks = piece();
        let p = prompt_prefix(&toks, &vocab, 2, 48).unwrap();
        // notes on beats 0, 2, 4, 6
        assert_eq!(p.iter().filter(|t| t.kind() == Some(TokenType::Note)).count(), 4);
        assert_eq!(p.last().unwrap().kind(), Some(TokenType::Note));
        let short = prompt_prefix(&toks[..5], &vocab, 2, 48);
        assert!(matches!(short, Err(Error::PromptTooShort { bars: 1, needed: 2 })));
    }
}
