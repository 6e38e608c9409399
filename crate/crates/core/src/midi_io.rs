//! Standard MIDI File reading and writing on a fixed beat grid.
//!
//! Notes are quantized to `resolution` ticks per quarter note. Tempo and
//! time-signature meta events are ignored: the grid is defined by the file's
//! pulses-per-quarter-note alone. Velocity is not preserved; written files
//! use [`WRITE_VELOCITY`].

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION: u32 = 12;
pub const WRITE_VELOCITY: u8 = 64;
/// Program classes 0..=127 plus the drum class.
pub const DEFAULT_INSTRUMENT_CLASSES: u32 = 129;
pub const DRUM_CLASS: u32 = 128;
const DRUM_CHANNEL: u8 = 9;

/// One quantized note.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NoteEvent {
    pub beat: u32,
    pub position: u32,
    pub pitch: u8,
    pub duration: u32,
    pub instrument: u32,
}

impl NoteEvent {
    pub fn from_onset(onset: u32, resolution: u32, pitch: u8, duration: u32, instrument: u32) -> Self {
        Self {
            beat: onset / resolution,
            position: onset % resolution,
            pitch,
            duration,
            instrument,
        }
    }

    pub fn onset(&self, resolution: u32) -> u32 {
        self.beat * resolution + self.position
    }

    /// Canonical corpus order: onset, then instrument, then pitch.
    pub fn sort_key(&self) -> (u32, u32, u32, u8, u32) {
        (self.beat, self.position, self.instrument, self.pitch, self.duration)
    }
}

/// Sorts into canonical `(onset, instrument, pitch)` order.
pub fn sort_events(events: &mut [NoteEvent]) {
    events.sort_by_key(NoteEvent::sort_key);
}

/// Maps MIDI programs (and the drum channel) onto instrument classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentMap {
    /// Class for each of the 128 General MIDI programs.
    pub program_class: Vec<u32>,
    pub drum_class: u32,
    pub num_classes: u32,
}

impl Default for InstrumentMap {
    fn default() -> Self {
        Self {
            program_class: (0..128).collect(),
            drum_class: DRUM_CLASS,
            num_classes: DEFAULT_INSTRUMENT_CLASSES,
        }
    }
}

impl InstrumentMap {
    pub fn class_of(&self, channel: u8, program: u8) -> u32 {
        if channel == DRUM_CHANNEL {
            self.drum_class
        } else {
            self.program_class[program as usize]
        }
    }

    /// First program that maps to `class`, used when writing.
    fn program_for(&self, class: u32) -> Option<u8> {
        self.program_class.iter().position(|&c| c == class).map(|p| p as u8)
    }

    fn validate(&self) -> Result<()> {
        if self.program_class.len() != 128 {
            return Err(Error::InvalidConfig(format!(
                "instrument map needs 128 program entries, got {}",
                self.program_class.len()
            )));
        }
        if let Some(&c) = self
            .program_class
            .iter()
            .chain(std::iter::once(&self.drum_class))
            .find(|&&c| c >= self.num_classes)
        {
            return Err(Error::InvalidConfig(format!(
                "instrument class {c} >= num_classes {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizationConfig {
    pub resolution: u32,
    pub max_beat: u32,
    pub max_duration: u32,
    pub instruments: InstrumentMap,
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            max_beat: 256,
            max_duration: 384,
            instruments: InstrumentMap::default(),
        }
    }
}

impl QuantizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.max_beat == 0 || self.max_duration < 2 {
            return Err(Error::InvalidConfig(
                "resolution and max_beat must be positive, max_duration at least 2".into(),
            ));
        }
        self.instruments.validate()
    }

    /// Checks one event against the grid and vocabulary bounds.
    pub fn check_event(&self, e: &NoteEvent) -> Result<()> {
        let overflow = |field, value: u32, bound: u32| Error::VocabOverflow {
            field,
            value: value as u64,
            bound: bound as u64,
        };
        if e.beat >= self.max_beat {
            return Err(overflow("beat", e.beat, self.max_beat));
        }
        if e.position >= self.resolution {
            return Err(overflow("position", e.position, self.resolution));
        }
        if e.pitch > 127 {
            return Err(overflow("pitch", e.pitch as u32, 128));
        }
        if e.duration == 0 || e.duration >= self.max_duration {
            return Err(overflow("duration", e.duration, self.max_duration));
        }
        if e.instrument >= self.instruments.num_classes {
            return Err(overflow("instrument", e.instrument, self.instruments.num_classes));
        }
        Ok(())
    }
}

/// Notes lost or altered while parsing. Serialized as the JSON sidecar.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub notes_read: usize,
    pub dropped_beyond_max_beat: usize,
    pub clamped_durations: usize,
    pub unterminated_notes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPiece {
    pub events: Vec<NoteEvent>,
    pub stats: ParseStats,
    pub ticks_per_quarter: u16,
}

pub fn parse_midi(bytes: &[u8], cfg: &QuantizationConfig) -> Result<Vec<NoteEvent>> {
    parse_midi_with_stats(bytes, cfg).map(|p| p.events)
}

pub fn parse_midi_with_stats(bytes: &[u8], cfg: &QuantizationConfig) -> Result<ParsedPiece> {
    cfg.validate()?;
    let mut reader = ByteReader::new(bytes);
    let (id, header) = reader.chunk()?;
    if id != *b"MThd" {
        return Err(Error::MalformedFile("missing MThd header".into()));
    }
    if header.len() < 6 {
        return Err(Error::MalformedFile(format!("header length {} < 6", header.len())));
    }
    let format = u16::from_be_bytes([header[0], header[1]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    match format {
        0 | 1 => {}
        2 => return Err(Error::UnsupportedFormat("SMF format 2".into())),
        other => return Err(Error::MalformedFile(format!("unknown SMF format {other}"))),
    }
    if division & 0x8000 != 0 {
        return Err(Error::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(Error::MalformedFile("zero ticks per quarter note".into()));
    }

    let mut raw = Vec::new();
    let mut stats = ParseStats::default();
    while !reader.is_empty() {
        let (id, body) = reader.chunk()?;
        if id == *b"MTrk" {
            read_track(body, &cfg.instruments, &mut raw, &mut stats)?;
        }
    }

    let tpq = division as u64;
    let res = cfg.resolution as u64;
    let quantize = |ticks: u64| -> u64 { (2 * ticks * res + tpq) / (2 * tpq) };
    let mut events = Vec::with_capacity(raw.len());
    for note in raw {
        let onset = quantize(note.start);
        let mut duration = quantize(note.end - note.start).max(1);
        let beat = onset / res;
        if beat >= cfg.max_beat as u64 {
            stats.dropped_beyond_max_beat += 1;
            continue;
        }
        if duration >= cfg.max_duration as u64 {
            stats.clamped_durations += 1;
            duration = cfg.max_duration as u64 - 1;
        }
        events.push(NoteEvent {
            beat: beat as u32,
            position: (onset % res) as u32,
            pitch: note.pitch,
            duration: duration as u32,
            instrument: note.instrument,
        });
    }
    if events.is_empty() {
        return Err(Error::EmptyPiece);
    }
    sort_events(&mut events);
    Ok(ParsedPiece {
        events,
        stats,
        ticks_per_quarter: division,
    })
}

struct RawNote {
    start: u64,
    end: u64,
    pitch: u8,
    instrument: u32,
}

fn read_track(
    body: &[u8],
    instruments: &InstrumentMap,
    out: &mut Vec<RawNote>,
    stats: &mut ParseStats,
) -> Result<()> {
    let mut r = ByteReader::new(body);
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut programs = [0u8; 16];
    // (channel, pitch) -> pending (start tick, instrument class), matched first-in first-out
    let mut pending: HashMap<(u8, u8), VecDeque<(u64, u32)>> = HashMap::new();

    while !r.is_empty() {
        tick += r.vlq()? as u64;
        let first = r.u8()?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            let s = running.ok_or_else(|| {
                Error::MalformedFile("data byte without running status".into())
            })?;
            r.unread();
            s
        };
        match status {
            0xFF => {
                running = None;
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                r.take(len)?;
                if kind == 0x2F {
                    break;
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            0x80..=0xEF => {
                running = Some(status);
                let channel = status & 0x0F;
                match status & 0xF0 {
                    0x80 | 0x90 => {
                        let pitch = r.data()?;
                        let velocity = r.data()?;
                        let key = (channel, pitch);
                        if status & 0xF0 == 0x90 && velocity > 0 {
                            let class = instruments.class_of(channel, programs[channel as usize]);
                            pending.entry(key).or_default().push_back((tick, class));
                        } else if let Some((start, instrument)) =
                            pending.get_mut(&key).and_then(VecDeque::pop_front)
                        {
                            stats.notes_read += 1;
                            out.push(RawNote {
                                start,
                                end: tick,
                                pitch,
                                instrument,
                            });
                        }
                    }
                    0xC0 => programs[channel as usize] = r.data()?,
                    0xD0 => {
                        r.data()?;
                    }
                    _ => {
                        r.data()?;
                        r.data()?;
                    }
                }
            }
            other => {
                return Err(Error::MalformedFile(format!(
                    "unexpected status byte {other:#04x} in track"
                )))
            }
        }
    }

    // Notes never switched off end at the last tick of the track.
    let mut dangling: Vec<_> = pending
        .into_iter()
        .flat_map(|((_, pitch), q)| q.into_iter().map(move |(start, inst)| (start, pitch, inst)))
        .collect();
    dangling.sort_unstable();
    for (start, pitch, instrument) in dangling {
        stats.unterminated_notes += 1;
        stats.notes_read += 1;
        out.push(RawNote {
            start,
            end: tick,
            pitch,
            instrument,
        });
    }
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::MalformedFile(format!(
                    "need {n} bytes at offset {}, only {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn unread(&mut self) {
        self.pos -= 1;
    }

    fn data(&mut self) -> Result<u8> {
        let b = self.u8()?;
        if b & 0x80 != 0 {
            return Err(Error::MalformedFile(format!("data byte {b:#04x} has high bit set")));
        }
        Ok(b)
    }

    fn vlq(&mut self) -> Result<u32> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7F) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::MalformedFile("variable-length quantity longer than 4 bytes".into()))
    }

    fn chunk(&mut self) -> Result<([u8; 4], &'a [u8])> {
        let id: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        let len = u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes"));
        let body = self.take(len as usize)?;
        Ok((id, body))
    }
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut stack = [0u8; 5];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7F) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(stack[i] | if i > 0 { 0x80 } else { 0 });
    }
}

/// Ticks per quarter note used for written files.
pub fn write_division(cfg: &QuantizationConfig) -> u16 {
    (cfg.resolution * 40).min(0x7FFF) as u16
}

/// Writes a format-1 file with one track per distinct instrument class.
pub fn write_midi(events: &[NoteEvent], cfg: &QuantizationConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    if events.is_empty() {
        return Err(Error::EmptyPiece);
    }
    for e in events {
        cfg.check_event(e)?;
    }
    let division = write_division(cfg);
    let scale = (division as u32 / cfg.resolution) as u64;
    let instruments: BTreeSet<u32> = events.iter().map(|e| e.instrument).collect();

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(instruments.len() as u16).to_be_bytes());
    out.extend_from_slice(&division.to_be_bytes());

    let melodic_channels: Vec<u8> = (0..16).filter(|&c| c != DRUM_CHANNEL).collect();
    let mut next_melodic = 0usize;
    for &inst in &instruments {
        let (channel, program) = if inst == cfg.instruments.drum_class {
            (DRUM_CHANNEL, None)
        } else {
            let c = melodic_channels[next_melodic % melodic_channels.len()];
            next_melodic += 1;
            let program = cfg.instruments.program_for(inst).ok_or_else(|| {
                Error::InvalidConfig(format!("no program maps to instrument class {inst}"))
            })?;
            (c, Some(program))
        };

        // (tick, 0 = off / 1 = on, pitch)
        let mut timeline: Vec<(u64, u8, u8)> = Vec::new();
        for e in events.iter().filter(|e| e.instrument == inst) {
            let start = e.onset(cfg.resolution) as u64 * scale;
            timeline.push((start, 1, e.pitch));
            timeline.push((start + e.duration as u64 * scale, 0, e.pitch));
        }
        timeline.sort_unstable();

        let mut track = Vec::new();
        if let Some(p) = program {
            track.extend_from_slice(&[0x00, 0xC0 | channel, p]);
        }
        let mut last = 0u64;
        for (tick, on, pitch) in timeline {
            let delta = u32::try_from(tick - last)
                .map_err(|_| Error::InvalidConfig("delta time overflow".into()))?;
            push_vlq(&mut track, delta);
            last = tick;
            if on == 1 {
                track.extend_from_slice(&[0x90 | channel, pitch, WRITE_VELOCITY]);
            } else {
                track.extend_from_slice(&[0x80 | channel, pitch, WRITE_VELOCITY]);
            }
        }
        track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(track.len() as u32).to_be_bytes());
        out.extend_from_slice(&track);
    }
    Ok(out)
}

/// Shifts every pitch by `semitones`, dropping notes that leave 0..=127.
/// Returns the surviving events and the number dropped.
pub fn transpose(events: &[NoteEvent], semitones: i32) -> (Vec<NoteEvent>, usize) {
    let kept: Vec<NoteEvent> = events
        .iter()
        .filter_map(|e| {
            let p = e.pitch as i32 + semitones;
            (0..=127).contains(&p).then(|| NoteEvent { pitch: p as u8, ..*e })
        })
        .collect();
    let dropped = events.len() - kept.len();
    (kept, dropped)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub transpose_low: i32,
    pub transpose_high: i32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            transpose_low: -5,
            transpose_high: 6,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.transpose_low > self.transpose_high {
            return Err(Error::InvalidConfig(format!(
                "transpose range {}..={} is empty",
                self.transpose_low, self.transpose_high
            )));
        }
        Ok(())
    }

    /// Draws a shift uniformly from `transpose_low..=transpose_high`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> i32 {
        rng.gen_range(self.transpose_low..=self.transpose_high)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit<T> {
    pub seed: u64,
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

pub const MIN_SPLIT_PIECES: usize = 10;

/// Shuffles `ids` under `seed` and cuts them into train/valid/test.
///
/// Valid and test sizes are `floor(ratio * n)`; the remainder goes to train.
pub fn split_dataset<T: Clone>(ids: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit<T>> {
    let n = ids.len();
    if n < MIN_SPLIT_PIECES {
        return Err(Error::TooFewPieces {
            needed: MIN_SPLIT_PIECES,
            got: n,
        });
    }
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios {ratios:?} must be fractions summing to 1"
        )));
    }
    let n_valid = (rv * n as f64 + 1e-9).floor() as usize;
    let n_test = (rs * n as f64 + 1e-9).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: &[usize]| range.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    let n_train = n - n_valid - n_test;
    Ok(DatasetSplit {
        seed,
        train: pick(&order[..n_train]),
        valid: pick(&order[n_train..n_train + n_valid]),
        test: pick(&order[n_train + n_valid..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> QuantizationConfig {
        QuantizationConfig::default()
    }

    /// Minimal single-track format-0 file builder for hand-made fixtures.
    fn smf(division: u16, track: &[u8]) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&0u16.to_be_bytes());
        out.extend_from_slice(&1u16.to_be_bytes());
        out.extend_from_slice(&division.to_be_bytes());
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(track.len() as u32).to_be_bytes());
        out.extend_from_slice(track);
        out
    }

    #[test]
    fn one_beat_note_at_480_ppq() {
        // on at 0, off after 480 ticks (0x83 0x60 = 480)
        let track = [0x00, 0x90, 60, 100, 0x83, 0x60, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00];
        let events = parse_midi(&smf(480, &track), &cfg()).unwrap();
        assert_eq!(
            events,
            vec![NoteEvent {
                beat: 0,
                position: 0,
                pitch: 60,
                duration: 12,
                instrument: 0
            }]
        );
    }

    #[test]
    fn onset_rounds_half_ticks_up() {
        // note at tick 20 with 480 ppq: 20 / 40 = 0.5 grid ticks -> 1
        let track = [0x14, 0x90, 60, 100, 0x83, 0x60, 0x90, 60, 0, 0x00, 0xFF, 0x2F, 0x00];
        let events = parse_midi(&smf(480, &track), &cfg()).unwrap();
        assert_eq!(events[0].position, 1);
        assert_eq!(events[0].onset(12), 1);
    }

    #[test]
    fn velocity_zero_note_on_is_note_off_and_running_status_works() {
        // running status: second and third messages omit the 0x90 status byte
        let track = [0x00, 0x90, 60, 100, 0x81, 0x70, 60, 0, 0x00, 64, 90, 0x81, 0x70, 64, 0, 0x00, 0xFF, 0x2F, 0x00];
        let events = parse_midi(&smf(480, &track), &cfg()).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].duration, 6);
        assert_eq!(events[1].onset(12), 6);
    }

    #[test]
    fn empty_track_is_empty_piece() {
        let err = parse_midi(&smf(480, &[0x00, 0xFF, 0x2F, 0x00]), &cfg()).unwrap_err();
        assert!(matches!(err, Error::EmptyPiece));
    }

    #[test]
    fn format_two_is_unsupported() {
        let mut bytes = smf(480, &[0x00, 0xFF, 0x2F, 0x00]);
        bytes[9] = 2;
        assert!(matches!(parse_midi(&bytes, &cfg()), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn truncated_chunk_is_malformed() {
        let mut bytes = smf(480, &[0x00, 0xFF, 0x2F, 0x00]);
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(parse_midi(&bytes, &cfg()), Err(Error::MalformedFile(_))));
        assert!(matches!(parse_midi(b"RIFF....", &cfg()), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn notes_beyond_max_beat_are_dropped() {
        let mut c = cfg();
        c.max_beat = 1;
        // second note starts at beat 1
        let track = [
            0x00, 0x90, 60, 100, 0x83, 0x60, 0x80, 60, 0, 0x00, 0x90, 62, 100, 0x83, 0x60, 0x80, 62, 0, 0x00, 0xFF,
            0x2F, 0x00,
        ];
        let piece = parse_midi_with_stats(&smf(480, &track), &c).unwrap();
        assert_eq!(piece.events.len(), 1);
        assert_eq!(piece.stats.dropped_beyond_max_beat, 1);
    }

    #[test]
    fn drums_and_programs_map_to_classes() {
        let track = [
            0x00, 0xC1, 40, // program 40 on channel 1
            0x00, 0x91, 67, 90, 0x00, 0x99, 36, 90, 0x83, 0x60, 0x81, 67, 0, 0x00, 0x89, 36, 0, 0x00, 0xFF, 0x2F,
            0x00,
        ];
        let events = parse_midi(&smf(480, &track), &cfg()).unwrap();
        let classes: Vec<u32> = events.iter().map(|e| e.instrument).collect();
        assert_eq!(classes, vec![40, 128]);
    }

    #[test]
    fn write_single_note_round_trips() {
        let e = NoteEvent {
            beat: 0,
            position: 0,
            pitch: 60,
            duration: 12,
            instrument: 0,
        };
        let bytes = write_midi(&[e], &cfg()).unwrap();
        assert_eq!(&bytes[..4], b"MThd");
        assert_eq!(parse_midi(&bytes, &cfg()).unwrap(), vec![e]);
    }

    #[test]
    fn two_instruments_write_two_tracks() {
        let a = NoteEvent {
            beat: 2,
            position: 3,
            pitch: 60,
            duration: 5,
            instrument: 0,
        };
        let b = NoteEvent { instrument: 128, pitch: 38, ..a };
        let bytes = write_midi(&[a, b], &cfg()).unwrap();
        assert_eq!(u16::from_be_bytes([bytes[10], bytes[11]]), 2);
        assert_eq!(bytes.windows(4).filter(|w| w == b"MTrk").count(), 2);
        assert_eq!(parse_midi(&bytes, &cfg()).unwrap(), vec![a, b]);
    }

    #[test]
    fn write_rejects_empty_and_overflow() {
        assert!(matches!(write_midi(&[], &cfg()), Err(Error::EmptyPiece)));
        let e = NoteEvent {
            beat: 300,
            position: 0,
            pitch: 60,
            duration: 1,
            instrument: 0,
        };
        assert!(matches!(write_midi(&[e], &cfg()), Err(Error::VocabOverflow { field: "beat", .. })));
    }

    #[test]
    fn transpose_shifts_and_drops() {
        let e = NoteEvent {
            beat: 0,
            position: 0,
            pitch: 60,
            duration: 1,
            instrument: 0,
        };
        assert_eq!(transpose(&[e], 6).0[0].pitch, 66);
        assert_eq!(transpose(&[e], 0), (vec![e], 0));
        let top = NoteEvent { pitch: 127, ..e };
        assert_eq!(transpose(&[top], 1), (vec![], 1));
    }

    #[test]
    fn augment_draws_within_range() {
        let aug = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: BTreeSet<i32> = (0..2000).map(|_| aug.draw(&mut rng)).collect();
        assert_eq!(draws, (-5..=6).collect());
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let ids: Vec<u32> = (0..10).collect();
        let s = split_dataset(&ids, (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_dataset(&ids, (0.8, 0.1, 0.1), 0).unwrap());

        // 12 pieces: floor(1.2) = 1 each for valid/test, 10 left for train
        let ids: Vec<u32> = (0..12).collect();
        let s = split_dataset(&ids, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (10, 1, 1));

        assert!(matches!(
            split_dataset(&ids[..9], (0.8, 0.1, 0.1), 0),
            Err(Error::TooFewPieces { got: 9, .. })
        ));
    }
}
