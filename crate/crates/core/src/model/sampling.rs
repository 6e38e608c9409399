//! Constrained top-k sampling of grid rows.
//!
//! Each event being generated keeps a domain of token types it may still
//! take. A field value is only samplable if some type in the domain
//! permits it, and domains of neighbouring events are kept consistent with
//! the type grammar, so every completed sequence is grammatical. Under the
//! uniform schedule the type of an event is always decided before its other
//! fields; the domain bookkeeping is what makes other field orders work too.
//!
//! An event that follows a possible end-of-song is tentative: if its
//! predecessor turns out to be end-of-song, whatever was sampled for it is
//! discarded and its cells become pad.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StepLogits;
use crate::delay_codec::{DelaySchedule, Row};
use crate::error::{Error, Result};
use crate::tokenizer::{validate_grammar, CompoundToken, Field, FieldVocabulary, TokenType, NULL_ID, NUM_FIELDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub top_k: [usize; NUM_FIELDS],
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_k: [10; NUM_FIELDS],
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn greedy(seed: u64) -> Self {
        Self {
            top_k: [1; NUM_FIELDS],
            temperature: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k.contains(&0) {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

type Domain = u8;
/// Bit for "this event does not exist" (it follows end-of-song).
const GHOST: Domain = 1 << 6;
const REAL: Domain = 0b0011_1110;

fn bit(kind: TokenType) -> Domain {
    1 << kind.id()
}

fn kinds(domain: Domain) -> impl Iterator<Item = TokenType> {
    TokenType::ALL.into_iter().filter(move |k| domain & bit(*k) != 0)
}

/// Types that may follow anything in `domain`.
fn image(domain: Domain) -> Domain {
    let mut out = 0;
    for k in kinds(domain) {
        if k == TokenType::EndOfSong {
            out |= GHOST;
        }
        for s in TokenType::successors(Some(k)) {
            out |= bit(*s);
        }
    }
    if domain & GHOST != 0 {
        out |= GHOST;
    }
    out
}

/// Members of `domain` with at least one successor in `next`.
fn supported(domain: Domain, next: Domain) -> Domain {
    let mut out = 0;
    for k in kinds(domain) {
        if image(bit(k)) & next != 0 {
            out |= bit(k);
        }
    }
    if domain & GHOST != 0 && next & GHOST != 0 {
        out |= GHOST;
    }
    out
}

#[derive(Debug, Clone)]
struct Slot {
    fields: [Option<u32>; NUM_FIELDS],
    domain: Domain,
}

/// Running state of constrained decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    schedule: DelaySchedule,
    vocab: FieldVocabulary,
    sampling: SamplingConfig,
    rng: ChaCha8Rng,
    prompt_len: usize,
    /// Index 0 holds event 1.
    slots: Vec<Slot>,
    /// Largest event index that can still be followed by its flush.
    max_events: usize,
    max_steps: usize,
    steps: usize,
    end: Option<usize>,
}

impl DecodeState {
    /// State positioned after the prompt's `prompt.len()` staircase rows.
    ///
    /// The prompt must be a grammatical prefix starting with start-of-song.
    pub fn new(
        prompt: &[CompoundToken],
        schedule: DelaySchedule,
        vocab: FieldVocabulary,
        sampling: SamplingConfig,
        max_steps: usize,
    ) -> Result<Self> {
        sampling.validate()?;
        validate_prefix(prompt)?;
        let max_events = max_steps.saturating_sub(schedule.max_delay());
        let last = prompt.last().and_then(CompoundToken::kind);
        let needed = prompt.len() + last.map_or(3, TokenType::tokens_to_close);
        if needed > max_events {
            return Err(Error::SequenceTooLong {
                len: needed + schedule.max_delay(),
                max: max_steps,
            });
        }
        let slots = prompt
            .iter()
            .map(|t| Slot {
                fields: t.0.map(Some),
                domain: bit(t.kind().expect("validated prefix")),
            })
            .collect();
        let end = (last == Some(TokenType::EndOfSong)).then_some(prompt.len());
        Ok(Self {
            schedule,
            vocab,
            rng: ChaCha8Rng::seed_from_u64(sampling.seed),
            sampling,
            prompt_len: prompt.len(),
            slots,
            max_events,
            max_steps,
            steps: prompt.len(),
            end,
        })
    }

    /// Rows emitted so far, prompt included.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Grammar phase: the type of the last event whose type is settled.
    pub fn phase(&self) -> Option<TokenType> {
        self.slots
            .iter()
            .rev()
            .find_map(|s| s.fields[0].and_then(TokenType::from_id))
    }

    /// Largest beat index emitted so far (0 when no note has a beat yet).
    pub fn last_beat(&self) -> u32 {
        self.beat_floor(self.slots.len() + 1)
    }

    /// Index of the end-of-song event, once decided.
    pub fn end_event(&self) -> Option<usize> {
        self.end
    }

    /// True once end-of-song and its delayed fields are all emitted, or the
    /// step budget is exhausted.
    pub fn is_finished(&self) -> bool {
        match self.end {
            Some(e) => self.steps >= e + self.schedule.max_delay(),
            None => self.steps >= self.max_steps,
        }
    }

    /// Completed tokens up to and including end-of-song.
    pub fn tokens(&self) -> Vec<CompoundToken> {
        let n = self.end.unwrap_or(self.slots.len());
        self.slots[..n.min(self.slots.len())]
            .iter()
            .take_while(|s| s.fields.iter().all(Option::is_some))
            .map(|s| CompoundToken(s.fields.map(|v| v.unwrap_or(NULL_ID))))
            .collect()
    }

    fn beat_floor(&self, event: usize) -> u32 {
        let pad = self.vocab.pad_id(Field::Beat);
        self.slots[..event.saturating_sub(1).min(self.slots.len())]
            .iter()
            .filter_map(|s| s.fields[Field::Beat.index()])
            .filter(|&b| b != NULL_ID && b != pad)
            .max()
            .unwrap_or(0)
    }

    fn unary(&self, event: usize) -> Domain {
        let mut d = GHOST;
        for k in TokenType::ALL {
            if event + k.tokens_to_close() <= self.max_events {
                d |= bit(k);
            }
        }
        d
    }

    fn ensure_slot(&mut self, event: usize) -> Result<()> {
        while self.slots.len() < event {
            let i = self.slots.len() + 1;
            let prev = self.slots.last().map_or(0, |s| s.domain);
            let domain = image(prev) & self.unary(i);
            self.slots.push(Slot {
                fields: [None; NUM_FIELDS],
                domain,
            });
            self.propagate(i)?;
        }
        Ok(())
    }

    /// Restores arc consistency around event `i` (1-based).
    fn propagate(&mut self, i: usize) -> Result<()> {
        for j in (1..i).rev() {
            let next = self.slots[j].domain;
            let narrowed = supported(self.slots[j - 1].domain, next);
            if narrowed == self.slots[j - 1].domain {
                break;
            }
            self.slots[j - 1].domain = narrowed;
        }
        for j in i..self.slots.len() {
            let narrowed = self.slots[j].domain & image(self.slots[j - 1].domain);
            if narrowed == self.slots[j].domain {
                break;
            }
            self.slots[j].domain = narrowed;
        }
        if self.slots.iter().any(|s| s.domain == 0) {
            return Err(Error::NoFeasibleValue {
                step: self.steps + 1,
                field: Field::Type,
            });
        }
        Ok(())
    }

    fn permits(&self, kind: TokenType, field: Field, value: u32, beat_floor: u32) -> bool {
        if value == self.vocab.pad_id(field) {
            return false;
        }
        if field == Field::Type {
            return value == kind.id();
        }
        match kind {
            TokenType::StartOfSong | TokenType::StartOfNotes | TokenType::EndOfSong => value == NULL_ID,
            TokenType::Instrument => (value != NULL_ID) == (field == Field::Instrument),
            TokenType::Note => value != NULL_ID && (field != Field::Beat || value >= beat_floor),
        }
    }

    /// Samples (or forces) the next row from the logits at the current
    /// last step.
    pub fn sample_step(&mut self, logits: &StepLogits) -> Result<Row> {
        let step = self.steps + 1;
        let mut row = self.vocab.pad_row();
        for field in self.schedule.decode_order() {
            let Some(event) = self.schedule.event_at(step, field) else {
                continue;
            };
            if self.end.is_some_and(|e| event > e) {
                continue;
            }
            self.ensure_slot(event)?;
            let slot = &self.slots[event - 1];
            if let Some(v) = slot.fields[field.index()] {
                row[field.index()] = v;
                continue;
            }
            if slot.domain & REAL == 0 {
                continue;
            }
            let value = self.choose(event, field, logits.field(field.index()), step)?;
            row[field.index()] = value;
        }
        self.steps = step;
        if self.end.is_none() {
            self.end = self
                .slots
                .iter()
                .position(|s| s.domain == bit(TokenType::EndOfSong))
                .map(|i| i + 1);
        }
        Ok(row)
    }

    fn choose(&mut self, event: usize, field: Field, scores: &[f64], step: usize) -> Result<u32> {
        let domain = self.slots[event - 1].domain;
        let floor = self.beat_floor(event);
        let allowed: Vec<(u32, f64)> = scores
            .iter()
            .enumerate()
            .map(|(v, &s)| (v as u32, s))
            .filter(|&(v, _)| kinds(domain).any(|k| self.permits(k, field, v, floor)))
            .collect();
        if allowed.is_empty() {
            return Err(Error::NoFeasibleValue { step, field });
        }
        let value = self.top_k_sample(allowed, self.sampling.top_k[field.index()]);

        let slot = &mut self.slots[event - 1];
        slot.fields[field.index()] = Some(value);
        let mut narrowed = domain & GHOST;
        for k in kinds(domain) {
            if self.permits(k, field, value, floor) {
                narrowed |= bit(k);
            }
        }
        self.slots[event - 1].domain = narrowed;
        self.propagate(event)?;
        Ok(value)
    }

    fn top_k_sample(&mut self, mut candidates: Vec<(u32, f64)>, k: usize) -> u32 {
        let temp = self.sampling.temperature;
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        candidates.truncate(k.max(1));
        if candidates.len() == 1 {
            return candidates[0].0;
        }
        let max = candidates[0].1 / temp;
        let weights: Vec<f64> = candidates.iter().map(|c| (c.1 / temp - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = self.rng.gen::<f64>() * total;
        for (c, w) in candidates.iter().zip(&weights) {
            if u < *w {
                return c.0;
            }
            u -= w;
        }
        candidates.last().map(|c| c.0).expect("non-empty")
    }
}

/// Like [`validate_grammar`] but without requiring end-of-song.
fn validate_prefix(tokens: &[CompoundToken]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::GrammarViolation {
            index: 0,
            reason: "prompt must start with start-of-song".into(),
        });
    }
    match validate_grammar(tokens) {
        Ok(()) => Ok(()),
        Err(v) if v.index == tokens.len() => Ok(()),
        Err(v) => Err(v.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::FieldVocabulary;

    fn vocab() -> FieldVocabulary {
        FieldVocabulary::default()
    }

    fn peaked(field: Field, value: u32) -> StepLogits {
        let v = vocab();
        let fields = Field::ALL
            .iter()
            .map(|&f| {
                let mut s = vec![0.0; v.size(f) as usize];
                if f == field {
                    s[value as usize] = 10.0;
                }
                s
            })
            .collect();
        StepLogits { fields }
    }

    fn sos() -> CompoundToken {
        CompoundToken::structural(TokenType::StartOfSong)
    }

    #[test]
    fn after_start_of_song_only_instrument_or_notes() {
        let mut st = DecodeState::new(&[sos()], DelaySchedule::uniform(), vocab(), SamplingConfig::default(), 1024)
            .unwrap();
        for seed in 0..50 {
            st.rng = ChaCha8Rng::seed_from_u64(seed);
            let mut trial = st.clone();
            let row = trial.sample_step(&peaked(Field::Type, 5)).unwrap();
            assert!(row[0] == 2 || row[0] == 3, "type {}", row[0]);
        }
    }

    #[test]
    fn beat_mask_overrides_peaked_logits() {
        let v = vocab();
        let note = v
            .note_token(&crate::midi_io::NoteEvent {
                beat: 6,
                position: 0,
                pitch: 60,
                duration: 3,
                instrument: 0,
            })
            .unwrap();
        let prompt = [
            sos(),
            v.instrument_token(0).unwrap(),
            CompoundToken::structural(TokenType::StartOfNotes),
            note,
        ];
        let mut st =
            DecodeState::new(&prompt, DelaySchedule::uniform(), v, SamplingConfig::greedy(0), 1024).unwrap();
        assert_eq!(st.last_beat(), 7);
        let row = st.sample_step(&peaked(Field::Type, TokenType::Note.id())).unwrap();
        assert_eq!(row[0], TokenType::Note.id());
        // beat of event 5 is decided one step later; logits prefer index 3
        let row = st.sample_step(&peaked(Field::Beat, 3)).unwrap();
        assert!(row[1] >= 7, "beat {}", row[1]);
        assert_eq!(row[1], 7);
    }

    #[test]
    fn greedy_is_deterministic_argmax() {
        let mk = || {
            DecodeState::new(&[sos()], DelaySchedule::zero(), vocab(), SamplingConfig::greedy(9), 1024).unwrap()
        };
        let logits = peaked(Field::Type, TokenType::StartOfNotes.id());
        let a = mk().sample_step(&logits).unwrap();
        let b = mk().sample_step(&logits).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, [3, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn budget_forces_an_ending() {
        // room for SOS + 2 more events before the flush
        let mut st =
            DecodeState::new(&[sos()], DelaySchedule::uniform(), vocab(), SamplingConfig::greedy(0), 3 + 5).unwrap();
        let logits = peaked(Field::Type, TokenType::Instrument.id());
        while !st.is_finished() {
            st.sample_step(&logits).unwrap();
        }
        let toks = st.tokens();
        assert_eq!(toks.len(), 3);
        assert!(validate_grammar(&toks).is_ok());
        assert_eq!(st.steps(), 8);
    }

    #[test]
    fn prompt_must_fit_budget() {
        assert!(matches!(
            DecodeState::new(&[sos()], DelaySchedule::uniform(), vocab(), SamplingConfig::default(), 7),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn domain_algebra() {
        use TokenType::*;
        assert_eq!(image(bit(StartOfSong)), bit(Instrument) | bit(StartOfNotes));
        assert_eq!(image(bit(EndOfSong)), GHOST);
        assert_eq!(supported(bit(Note) | bit(EndOfSong), GHOST), bit(EndOfSong));
        assert_eq!(supported(bit(Note) | bit(Instrument), bit(Note)), bit(Note));
    }
}
