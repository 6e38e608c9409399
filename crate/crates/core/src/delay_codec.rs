//! Delay-pattern interleaving of compound tokens.
//!
//! Field `d` of event `i` (1-based) is placed at step `t = i + delay[d]`, so
//! a sequence of `N` tokens becomes a grid of `N + max(delay)` steps. Cells
//! that no event reaches hold the field's pad symbol. Storage is 0-based;
//! the 1-based event/step arithmetic stays inside this module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{fnv1a, CompoundToken, Field, FieldVocabulary, NUM_FIELDS};

/// One grid step: a value (or pad) per field.
pub type Row = [u32; NUM_FIELDS];

/// Largest delay accepted for any field.
pub const MAX_DELAY: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct DelaySchedule {
    delays: [usize; NUM_FIELDS],
}

impl Default for DelaySchedule {
    fn default() -> Self {
        Self::uniform()
    }
}

impl DelaySchedule {
    pub fn new(delays: &[usize]) -> Result<Self> {
        let delays: [usize; NUM_FIELDS] = delays.try_into().map_err(|_| {
            Error::InvalidSchedule(format!("expected {NUM_FIELDS} delays, got {}", delays.len()))
        })?;
        if let Some(d) = delays.iter().find(|&&d| d > MAX_DELAY) {
            return Err(Error::InvalidSchedule(format!("delay {d} exceeds {MAX_DELAY}")));
        }
        Ok(Self { delays })
    }

    /// Builds a schedule from a per-field map; every field must be present.
    pub fn from_map(map: &BTreeMap<Field, usize>) -> Result<Self> {
        let mut delays = [0; NUM_FIELDS];
        for f in Field::ALL {
            delays[f.index()] = *map
                .get(&f)
                .ok_or_else(|| Error::InvalidSchedule(format!("no delay for field {f}")))?;
        }
        Self::new(&delays)
    }

    /// type 0, beat 1, position 2, pitch 3, duration 4, instrument 5.
    pub fn uniform() -> Self {
        Self {
            delays: [0, 1, 2, 3, 4, 5],
        }
    }

    /// All fields at the same step: the parallel compound layout.
    pub fn zero() -> Self {
        Self { delays: [0; NUM_FIELDS] }
    }

    pub fn delays(&self) -> [usize; NUM_FIELDS] {
        self.delays
    }

    pub fn delay(&self, field: Field) -> usize {
        self.delays[field.index()]
    }

    pub fn max_delay(&self) -> usize {
        self.delays.iter().copied().max().unwrap_or(0)
    }

    /// Fields in the order they are decided within an event: by delay, then
    /// by field index for ties.
    pub fn decode_order(&self) -> [Field; NUM_FIELDS] {
        let mut order = Field::ALL;
        order.sort_by_key(|f| (self.delay(*f), f.index()));
        order
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.delays.iter().flat_map(|d| (*d as u32).to_le_bytes()))
    }

    /// Grid length for `n` source tokens.
    pub fn grid_len(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            n + self.max_delay()
        }
    }

    /// Event (1-based) whose field lands at `step` (1-based), if any.
    pub fn event_at(&self, step: usize, field: Field) -> Option<usize> {
        step.checked_sub(self.delay(field)).filter(|&i| i >= 1)
    }
}

impl TryFrom<Vec<usize>> for DelaySchedule {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<DelaySchedule> for Vec<usize> {
    fn from(s: DelaySchedule) -> Self {
        s.delays.to_vec()
    }
}

impl fmt::Display for DelaySchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.delays.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for DelaySchedule {
    type Err = Error;

    /// Accepts `uniform`, `zero`, or six comma-separated delays.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" | "dp" => Ok(Self::uniform()),
            "zero" | "parallel" => Ok(Self::zero()),
            other => {
                let delays = other
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::InvalidSchedule(format!("{other:?}: {e}")))?;
                Self::new(&delays)
            }
        }
    }
}

/// A delay-interleaved token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    schedule: DelaySchedule,
    rows: Vec<Row>,
}

impl TokenGrid {
    /// Wraps rows without checking the staircase; [`dp_decode`] validates.
    pub fn from_rows(rows: Vec<Row>, schedule: DelaySchedule) -> Self {
        Self { schedule, rows }
    }

    pub fn schedule(&self) -> &DelaySchedule {
        &self.schedule
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Row> {
        self.rows
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    /// Number of source tokens, assuming a complete staircase.
    pub fn events(&self) -> usize {
        self.rows.len().saturating_sub(self.schedule.max_delay())
    }

    /// Cell at 1-based `step`.
    pub fn cell(&self, step: usize, field: Field) -> u32 {
        self.rows[step - 1][field.index()]
    }
}

fn check_token(tok: &CompoundToken, index: usize, vocab: &FieldVocabulary) -> Result<()> {
    for field in Field::ALL {
        let v = tok.get(field);
        vocab.check_index(field, v)?;
        if v == vocab.pad_id(field) {
            return Err(Error::PadLeak { index, field });
        }
    }
    Ok(())
}

/// Rows `1..=steps` of the staircase for `tokens`, treating events beyond
/// `tokens.len()` as pad.
pub fn staircase_rows(tokens: &[CompoundToken], schedule: &DelaySchedule, vocab: &FieldVocabulary, steps: usize) -> Vec<Row> {
    let n = tokens.len();
    (1..=steps)
        .map(|t| {
            let mut row = vocab.pad_row();
            for f in Field::ALL {
                if let Some(i) = schedule.event_at(t, f).filter(|&i| i <= n) {
                    row[f.index()] = tokens[i - 1].get(f);
                }
            }
            row
        })
        .collect()
}

pub fn dp_encode(tokens: &[CompoundToken], schedule: &DelaySchedule, vocab: &FieldVocabulary) -> Result<TokenGrid> {
    for (i, t) in tokens.iter().enumerate() {
        check_token(t, i, vocab)?;
    }
    let steps = schedule.grid_len(tokens.len());
    Ok(TokenGrid {
        schedule: *schedule,
        rows: staircase_rows(tokens, schedule, vocab, steps),
    })
}

pub fn dp_decode(grid: &TokenGrid, vocab: &FieldVocabulary) -> Result<Vec<CompoundToken>> {
    let schedule = grid.schedule;
    let steps = grid.steps();
    if steps == 0 {
        return Ok(Vec::new());
    }
    let max_delay = schedule.max_delay();
    if steps <= max_delay {
        let field = Field::ALL.into_iter().max_by_key(|f| schedule.delay(*f)).unwrap_or(Field::Type);
        return Err(Error::MalformedGrid {
            step: steps,
            field,
            reason: "grid shorter than the schedule's flush",
        });
    }
    let n = steps - max_delay;
    let mut tokens = vec![CompoundToken([0; NUM_FIELDS]); n];
    for (t0, row) in grid.rows.iter().enumerate() {
        let step = t0 + 1;
        for field in Field::ALL {
            let value = row[field.index()];
            vocab.check_index(field, value)?;
            let is_pad = value == vocab.pad_id(field);
            match schedule.event_at(step, field).filter(|&i| i <= n) {
                Some(i) => {
                    if is_pad {
                        return Err(Error::MalformedGrid {
                            step,
                            field,
                            reason: "pad in a value cell",
                        });
                    }
                    tokens[i - 1].0[field.index()] = value;
                }
                None if !is_pad => {
                    return Err(Error::MalformedGrid {
                        step,
                        field,
                        reason: "value in a pad cell",
                    })
                }
                None => {}
            }
        }
    }
    Ok(tokens)
}

/// The cells a field prediction may condition on, as `(event, field)`
/// pairs with 1-based events: earlier-delayed fields of the same event plus
/// every field of all earlier events.
///
/// The history part is the idealized context; the cells a causal model can
/// actually see when predicting step `t` are given by [`attention_reach`],
/// which excludes the not-yet-emitted tails of the last `max_delay` events.
pub fn conditioning_context(grid: &TokenGrid, step: usize, field: Field) -> Result<BTreeSet<(usize, Field)>> {
    let steps = grid.steps();
    if step == 0 || step > steps {
        return Err(Error::OutOfRange {
            what: "step",
            value: step,
            lo: 1,
            hi: steps,
        });
    }
    let n = grid.events();
    let schedule = grid.schedule;
    let mut ctx = BTreeSet::new();
    let Some(event) = schedule.event_at(step, field) else {
        return Ok(ctx);
    };
    if event <= n {
        for other in Field::ALL {
            if schedule.delay(other) < schedule.delay(field) {
                ctx.insert((event, other));
            }
        }
    }
    for j in 1..event.min(n + 1) {
        for other in Field::ALL {
            ctx.insert((j, other));
        }
    }
    Ok(ctx)
}

/// Source cells present in grid rows `1..step`, i.e. visible to a causal
/// model predicting row `step`.
pub fn attention_reach(schedule: &DelaySchedule, events: usize, step: usize) -> BTreeSet<(usize, Field)> {
    let mut reach = BTreeSet::new();
    for j in 1..=events {
        for f in Field::ALL {
            if j + schedule.delay(f) < step {
                reach.insert((j, f));
            }
        }
    }
    reach
}

const GRID_MAGIC: [u8; 2] = *b"DG";

/// Serializes a grid: 8-byte header (`"DG"`, K, T, schedule hash as
/// little-endian u16s) followed by row-major little-endian u16 cells.
pub fn grid_to_bytes(grid: &TokenGrid) -> Result<Vec<u8>> {
    let steps = u16::try_from(grid.steps())
        .map_err(|_| Error::BadFormat(format!("{} steps do not fit u16", grid.steps())))?;
    let mut out = Vec::with_capacity(8 + grid.steps() * NUM_FIELDS * 2);
    out.extend_from_slice(&GRID_MAGIC);
    out.extend_from_slice(&(NUM_FIELDS as u16).to_le_bytes());
    out.extend_from_slice(&steps.to_le_bytes());
    out.extend_from_slice(&schedule_hash16(&grid.schedule).to_le_bytes());
    for row in &grid.rows {
        for &v in row {
            let v = u16::try_from(v).map_err(|_| Error::BadFormat(format!("cell {v} does not fit u16")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn grid_from_bytes(bytes: &[u8], schedule: &DelaySchedule) -> Result<TokenGrid> {
    if bytes.len() < 8 || bytes[..2] != GRID_MAGIC {
        return Err(Error::BadFormat("missing grid header".into()));
    }
    let word = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let k = word(2) as usize;
    let steps = word(4) as usize;
    if k != NUM_FIELDS {
        return Err(Error::BadFormat(format!("grid has {k} fields, expected {NUM_FIELDS}")));
    }
    if word(6) != schedule_hash16(schedule) {
        return Err(Error::BadFormat(format!("grid was written with a different schedule than {schedule}")));
    }
    let body = &bytes[8..];
    if body.len() != steps * NUM_FIELDS * 2 {
        return Err(Error::BadFormat(format!(
            "grid body is {} bytes, header promises {}",
            body.len(),
            steps * NUM_FIELDS * 2
        )));
    }
    let rows = body
        .chunks_exact(NUM_FIELDS * 2)
        .map(|c| {
            let mut row = [0u32; NUM_FIELDS];
            for (i, v) in row.iter_mut().enumerate() {
                *v = u16::from_le_bytes([c[2 * i], c[2 * i + 1]]) as u32;
            }
            row
        })
        .collect();
    Ok(TokenGrid {
        schedule: *schedule,
        rows,
    })
}

/// 64-bit schedule fingerprint folded to 16 bits.
pub fn schedule_hash16(schedule: &DelaySchedule) -> u16 {
    let h = schedule.fingerprint();
    ((h ^ (h >> 16) ^ (h >> 32) ^ (h >> 48)) & 0xFFFF) as u16
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi_io::NoteEvent;
    use crate::tokenizer::encode_events;

    fn vocab() -> FieldVocabulary {
        FieldVocabulary::default()
    }

    fn piece() -> Vec<CompoundToken> {
        let e = |beat, pitch| NoteEvent {
            beat,
            position: 0,
            pitch,
            duration: 6,
            instrument: 0,
        };
        encode_events(&[e(0, 60), e(1, 62), e(2, 64)], &vocab()).unwrap()
    }

    #[test]
    fn single_token_staircase() {
        let v = vocab();
        let tok = CompoundToken([4, 1, 2, 61, 12, 1]);
        let grid = dp_encode(&[tok], &DelaySchedule::uniform(), &v).unwrap();
        assert_eq!(grid.steps(), 6);
        for t in 1..=6 {
            for f in Field::ALL {
                let expected = if t == f.index() + 1 { tok.get(f) } else { v.pad_id(f) };
                assert_eq!(grid.cell(t, f), expected, "step {t} field {f}");
            }
        }
    }

    #[test]
    fn empty_sequence_gives_empty_grid() {
        let grid = dp_encode(&[], &DelaySchedule::uniform(), &vocab()).unwrap();
        assert_eq!(grid.steps(), 0);
        assert!(dp_decode(&grid, &vocab()).unwrap().is_empty());
    }

    #[test]
    fn zero_delay_rows_are_tokens() {
        let toks = piece();
        let grid = dp_encode(&toks, &DelaySchedule::zero(), &vocab()).unwrap();
        assert_eq!(grid.steps(), toks.len());
        for (row, tok) in grid.rows().iter().zip(&toks) {
            assert_eq!(row, &tok.0);
        }
        assert_eq!(dp_decode(&grid, &vocab()).unwrap(), toks);
    }

    #[test]
    fn pad_in_value_cell_is_malformed() {
        let v = vocab();
        let grid = dp_encode(&piece(), &DelaySchedule::uniform(), &v).unwrap();
        let mut rows = grid.clone().into_rows();
        rows[0][0] = v.pad_id(Field::Type);
        let bad = TokenGrid::from_rows(rows, DelaySchedule::uniform());
        assert!(matches!(
            dp_decode(&bad, &v),
            Err(Error::MalformedGrid { step: 1, field: Field::Type, .. })
        ));

        let mut rows = grid.into_rows();
        rows[0][5] = 1;
        let bad = TokenGrid::from_rows(rows, DelaySchedule::uniform());
        assert!(matches!(
            dp_decode(&bad, &v),
            Err(Error::MalformedGrid { step: 1, field: Field::Instrument, .. })
        ));
    }

    #[test]
    fn pad_tokens_are_rejected() {
        let v = vocab();
        let mut toks = piece();
        toks[1].0[5] = v.pad_id(Field::Instrument);
        assert!(matches!(
            dp_encode(&toks, &DelaySchedule::uniform(), &v),
            Err(Error::PadLeak { index: 1, .. })
        ));
    }

    #[test]
    fn schedule_parsing() {
        assert_eq!("0,1,2,3,4,5".parse::<DelaySchedule>().unwrap(), DelaySchedule::uniform());
        assert_eq!("zero".parse::<DelaySchedule>().unwrap(), DelaySchedule::zero());
        assert!(matches!("0,1,2".parse::<DelaySchedule>(), Err(Error::InvalidSchedule(_))));
        let mut map: BTreeMap<Field, usize> = Field::ALL.iter().map(|&f| (f, f.index())).collect();
        assert_eq!(DelaySchedule::from_map(&map).unwrap(), DelaySchedule::uniform());
        map.remove(&Field::Pitch);
        assert!(matches!(DelaySchedule::from_map(&map), Err(Error::InvalidSchedule(_))));
        let json = serde_json::to_string(&DelaySchedule::uniform()).unwrap();
        assert_eq!(json, "[0,1,2,3,4,5]");
        assert!(serde_json::from_str::<DelaySchedule>("[0,1]").is_err());
    }

    #[test]
    fn pitch_context_under_uniform_schedule() {
        let grid = dp_encode(&piece(), &DelaySchedule::uniform(), &vocab()).unwrap();
        // pitch of event 4 sits at step 4 + 3
        let ctx = conditioning_context(&grid, 7, Field::Pitch).unwrap();
        for f in [Field::Type, Field::Beat, Field::Position] {
            assert!(ctx.contains(&(4, f)));
        }
        for f in [Field::Pitch, Field::Duration, Field::Instrument] {
            assert!(!ctx.contains(&(4, f)));
        }
        for j in 1..4 {
            for f in Field::ALL {
                assert!(ctx.contains(&(j, f)));
            }
        }
        assert_eq!(ctx.len(), 3 + 3 * 6);
    }

    #[test]
    fn first_type_has_no_context() {
        let grid = dp_encode(&piece(), &DelaySchedule::uniform(), &vocab()).unwrap();
        assert!(conditioning_context(&grid, 1, Field::Type).unwrap().is_empty());
        assert!(matches!(
            conditioning_context(&grid, 0, Field::Type),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn zero_delay_has_no_intra_event_context() {
        let toks = piece();
        let grid = dp_encode(&toks, &DelaySchedule::zero(), &vocab()).unwrap();
        for t in 1..=grid.steps() {
            for f in Field::ALL {
                let ctx = conditioning_context(&grid, t, f).unwrap();
                assert!(ctx.iter().all(|&(j, _)| j < t));
            }
        }
    }

    #[test]
    fn grid_bytes_layout() {
        let grid = dp_encode(&piece(), &DelaySchedule::uniform(), &vocab()).unwrap();
        let bytes = grid_to_bytes(&grid).unwrap();
        assert_eq!(&bytes[..2], b"DG");
        assert_eq!(u16::from_le_bytes([bytes[2], bytes[3]]), 6);
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]) as usize, grid.steps());
        assert_eq!(bytes.len(), 8 + grid.steps() * 12);
        assert_eq!(grid_from_bytes(&bytes, &DelaySchedule::uniform()).unwrap(), grid);
        assert!(matches!(
            grid_from_bytes(&bytes, &DelaySchedule::zero()),
            Err(Error::BadFormat(_))
        ));
    }
}
