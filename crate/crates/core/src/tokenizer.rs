//! Compound tokens: one six-field token per musical event.
//!
//! A piece is laid out as
//! `start-of-song, instrument*, start-of-notes, note*, end-of-song`.
//! Index 0 of every field is the null value used by the unused fields of
//! non-note tokens; the last index of every field is the pad symbol, which
//! event encoding never produces.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::midi_io::{NoteEvent, QuantizationConfig};

pub const NUM_FIELDS: usize = 6;
pub const NULL_ID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Field {
    Type,
    Beat,
    Position,
    Pitch,
    Duration,
    Instrument,
}

impl Field {
    pub const ALL: [Field; NUM_FIELDS] = [
        Field::Type,
        Field::Beat,
        Field::Position,
        Field::Pitch,
        Field::Duration,
        Field::Instrument,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::Type => "type",
            Field::Beat => "beat",
            Field::Position => "position",
            Field::Pitch => "pitch",
            Field::Duration => "duration",
            Field::Instrument => "instrument",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Values of the `type` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u32)]
pub enum TokenType {
    StartOfSong = 1,
    Instrument = 2,
    StartOfNotes = 3,
    Note = 4,
    EndOfSong = 5,
}

impl TokenType {
    pub const ALL: [TokenType; 5] = [
        TokenType::StartOfSong,
        TokenType::Instrument,
        TokenType::StartOfNotes,
        TokenType::Note,
        TokenType::EndOfSong,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get((id as usize).wrapping_sub(1)).copied()
    }

    /// Types allowed to follow `prev` (`None` = sequence start).
    pub fn successors(prev: Option<TokenType>) -> &'static [TokenType] {
        use TokenType::*;
        match prev {
            None => &[StartOfSong],
            Some(StartOfSong) | Some(Instrument) => &[Instrument, StartOfNotes],
            Some(StartOfNotes) | Some(Note) => &[Note, EndOfSong],
            Some(EndOfSong) => &[],
        }
    }

    /// Fewest tokens that must follow this type to close the sequence.
    pub fn tokens_to_close(self) -> usize {
        match self {
            TokenType::EndOfSong => 0,
            TokenType::Note | TokenType::StartOfNotes => 1,
            TokenType::StartOfSong | TokenType::Instrument => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CompoundToken(pub [u32; NUM_FIELDS]);

impl CompoundToken {
    pub fn get(&self, field: Field) -> u32 {
        self.0[field.index()]
    }

    pub fn structural(kind: TokenType) -> Self {
        let mut t = [NULL_ID; NUM_FIELDS];
        t[0] = kind.id();
        CompoundToken(t)
    }

    pub fn kind(&self) -> Option<TokenType> {
        TokenType::from_id(self.0[0])
    }
}

/// Per-field vocabulary sizes. Null is 0 and pad is `size - 1` everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldVocabulary {
    pub sizes: [u32; NUM_FIELDS],
}

impl Default for FieldVocabulary {
    fn default() -> Self {
        Self::from_quantization(&QuantizationConfig::default())
    }
}

impl FieldVocabulary {
    pub fn from_quantization(cfg: &QuantizationConfig) -> Self {
        Self {
            sizes: [
                TokenType::ALL.len() as u32 + 2,
                cfg.max_beat + 2,
                cfg.resolution + 2,
                128 + 2,
                cfg.max_duration + 1,
                cfg.instruments.num_classes + 2,
            ],
        }
    }

    pub fn size(&self, field: Field) -> u32 {
        self.sizes[field.index()]
    }

    pub fn pad_id(&self, field: Field) -> u32 {
        self.sizes[field.index()] - 1
    }

    pub fn pad_row(&self) -> [u32; NUM_FIELDS] {
        self.sizes.map(|s| s - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes[0] < TokenType::ALL.len() as u32 + 2 {
            return Err(Error::InvalidConfig(format!(
                "type vocabulary of {} cannot hold null, 5 types and pad",
                self.sizes[0]
            )));
        }
        if self.sizes.iter().any(|&s| s < 3) {
            return Err(Error::InvalidConfig("every field needs null, a value and pad".into()));
        }
        if self.sizes.iter().any(|&s| s > u16::MAX as u32) {
            return Err(Error::InvalidConfig("vocabulary sizes must fit in u16".into()));
        }
        Ok(())
    }

    pub fn check_index(&self, field: Field, index: u32) -> Result<()> {
        let size = self.size(field);
        if index >= size {
            return Err(Error::IndexOutOfVocab { field, index, size });
        }
        Ok(())
    }

    /// Total number of output classes across fields.
    pub fn total(&self) -> usize {
        self.sizes.iter().map(|&s| s as usize).sum()
    }

    pub fn max_beat(&self) -> u32 {
        self.sizes[1] - 2
    }

    pub fn resolution(&self) -> u32 {
        self.sizes[2] - 2
    }

    pub fn max_duration(&self) -> u32 {
        self.sizes[4] - 1
    }

    pub fn num_instruments(&self) -> u32 {
        self.sizes[5] - 2
    }

    pub fn note_token(&self, e: &NoteEvent) -> Result<CompoundToken> {
        let overflow = |field, value: u32, bound: u32| Error::VocabOverflow {
            field,
            value: value as u64,
            bound: bound as u64,
        };
        if e.beat >= self.max_beat() {
            return Err(overflow("beat", e.beat, self.max_beat()));
        }
        if e.position >= self.resolution() {
            return Err(overflow("position", e.position, self.resolution()));
        }
        if e.pitch > 127 {
            return Err(overflow("pitch", e.pitch as u32, 128));
        }
        if e.duration == 0 || e.duration >= self.max_duration() {
            return Err(overflow("duration", e.duration, self.max_duration()));
        }
        if e.instrument >= self.num_instruments() {
            return Err(overflow("instrument", e.instrument, self.num_instruments()));
        }
        Ok(CompoundToken([
            TokenType::Note.id(),
            e.beat + 1,
            e.position + 1,
            e.pitch as u32 + 1,
            e.duration,
            e.instrument + 1,
        ]))
    }

    pub fn instrument_token(&self, instrument: u32) -> Result<CompoundToken> {
        if instrument >= self.num_instruments() {
            return Err(Error::VocabOverflow {
                field: "instrument",
                value: instrument as u64,
                bound: self.num_instruments() as u64,
            });
        }
        let mut t = CompoundToken::structural(TokenType::Instrument);
        t.0[Field::Instrument.index()] = instrument + 1;
        Ok(t)
    }

    /// Stable hash of the sizes, stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.sizes.iter().flat_map(|s| s.to_le_bytes()))
    }
}

pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Encodes events (sorted by onset) into the token layout.
pub fn encode_events(events: &[NoteEvent], vocab: &FieldVocabulary) -> Result<Vec<CompoundToken>> {
    if let Some(i) = events
        .windows(2)
        .position(|w| (w[1].beat, w[1].position) < (w[0].beat, w[0].position))
    {
        return Err(Error::UnsortedInput(i + 1));
    }
    let mut ordered = events.to_vec();
    ordered.sort_by_key(|e| (e.beat, e.position, e.instrument, e.pitch));

    let instruments: BTreeSet<u32> = ordered.iter().map(|e| e.instrument).collect();
    let mut tokens = Vec::with_capacity(events.len() + instruments.len() + 3);
    tokens.push(CompoundToken::structural(TokenType::StartOfSong));
    for &inst in &instruments {
        tokens.push(vocab.instrument_token(inst)?);
    }
    tokens.push(CompoundToken::structural(TokenType::StartOfNotes));
    for e in &ordered {
        tokens.push(vocab.note_token(e)?);
    }
    tokens.push(CompoundToken::structural(TokenType::EndOfSong));
    Ok(tokens)
}

/// Where and why a token sequence breaks the grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub reason: String,
}

impl From<Violation> for Error {
    fn from(v: Violation) -> Self {
        Error::GrammarViolation {
            index: v.index,
            reason: v.reason,
        }
    }
}

/// Checks the type grammar and that note beats never decrease.
pub fn validate_grammar(tokens: &[CompoundToken]) -> Result<(), Violation> {
    let mut prev: Option<TokenType> = None;
    let mut last_beat = 0u32;
    for (index, tok) in tokens.iter().enumerate() {
        let violation = |reason: String| Violation { index, reason };
        let kind = tok
            .kind()
            .ok_or_else(|| violation(format!("type index {} is not a token type", tok.0[0])))?;
        if !TokenType::successors(prev).contains(&kind) {
            return Err(violation(format!("{kind:?} cannot follow {prev:?}")));
        }
        if kind == TokenType::Note {
            let beat = tok.get(Field::Beat);
            if beat < last_beat {
                return Err(violation(format!("beat index {beat} after {last_beat}")));
            }
            last_beat = beat;
        }
        prev = Some(kind);
    }
    if prev != Some(TokenType::EndOfSong) {
        return Err(Violation {
            index: tokens.len(),
            reason: "missing end-of-song".into(),
        });
    }
    Ok(())
}

pub fn decode_events(tokens: &[CompoundToken], vocab: &FieldVocabulary) -> Result<Vec<NoteEvent>> {
    for (index, tok) in tokens.iter().enumerate() {
        for field in Field::ALL {
            let v = tok.get(field);
            vocab.check_index(field, v)?;
            if v == vocab.pad_id(field) {
                return Err(Error::PadLeak { index, field });
            }
        }
    }
    validate_grammar(tokens)?;

    let mut events = Vec::new();
    for (index, tok) in tokens.iter().enumerate() {
        if tok.kind() != Some(TokenType::Note) {
            continue;
        }
        if let Some(field) = Field::ALL[1..].iter().find(|&&f| tok.get(f) == NULL_ID) {
            return Err(Error::GrammarViolation {
                index,
                reason: format!("note token has null {field}"),
            });
        }
        events.push(NoteEvent {
            beat: tok.get(Field::Beat) - 1,
            position: tok.get(Field::Position) - 1,
            pitch: (tok.get(Field::Pitch) - 1) as u8,
            duration: tok.get(Field::Duration),
            instrument: tok.get(Field::Instrument) - 1,
        });
    }
    Ok(events)
}

/// Writes one `type beat pos pitch dur inst` line per token.
pub fn write_tokens_text<W: Write>(tokens: &[CompoundToken], mut w: W) -> Result<()> {
    for t in tokens {
        let [a, b, c, d, e, f] = t.0;
        writeln!(w, "{a} {b} {c} {d} {e} {f}")?;
    }
    Ok(())
}

pub fn read_tokens_text<R: BufRead>(r: R) -> Result<Vec<CompoundToken>> {
    let mut tokens = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<u32> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::BadFormat(format!("line {}: {e}", lineno + 1)))?;
        let arr: [u32; NUM_FIELDS] = values.try_into().map_err(|v: Vec<u32>| {
            Error::BadFormat(format!("line {}: expected 6 values, got {}", lineno + 1, v.len()))
        })?;
        tokens.push(CompoundToken(arr));
    }
    Ok(tokens)
}

/// Packs tokens as little-endian u16, six values per token, no header.
pub fn tokens_to_bytes(tokens: &[CompoundToken]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(tokens.len() * NUM_FIELDS * 2);
    for t in tokens {
        for &v in &t.0 {
            let v = u16::try_from(v).map_err(|_| Error::BadFormat(format!("value {v} does not fit u16")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn tokens_from_bytes(bytes: &[u8]) -> Result<Vec<CompoundToken>> {
    const STRIDE: usize = NUM_FIELDS * 2;
    if bytes.len() % STRIDE != 0 {
        return Err(Error::BadFormat(format!(
            "token file length {} is not a multiple of {STRIDE}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(STRIDE)
        .map(|c| {
            let mut t = [0u32; NUM_FIELDS];
            for (i, v) in t.iter_mut().enumerate() {
                *v = u16::from_le_bytes([c[2 * i], c[2 * i + 1]]) as u32;
            }
            CompoundToken(t)
        })
        .collect())
}
