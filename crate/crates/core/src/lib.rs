//! Delay-pattern scheduling over compound MIDI tokens.
//!
//! A piece is parsed from Standard MIDI ([`midi_io`]), turned into a
//! sequence of six-field compound tokens ([`tokenizer`]) and laid out on a
//! staircase grid where field `d` of event `i` sits at step `i + delay[d]`
//! ([`delay_codec`]). A small decoder-only transformer ([`model`]) is trained
//! on such grids ([`training`]) and sampled under grammar and beat
//! constraints; [`metrics`] and [`bench`] evaluate the results.

pub mod bench;
pub mod delay_codec;
pub mod error;
pub mod metrics;
pub mod midi_io;
pub mod model;
pub mod tokenizer;
pub mod training;

pub use delay_codec::{dp_decode, dp_encode, DelaySchedule, Row, TokenGrid};
pub use error::{Error, Result};
pub use midi_io::{InstrumentMap, NoteEvent, QuantizationConfig};
pub use model::{generate, DecodeMode, Model, ModelConfig, SamplingConfig};
pub use tokenizer::{decode_events, encode_events, validate_grammar, CompoundToken, Field, FieldVocabulary, TokenType};
