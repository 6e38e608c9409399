//! Shared fixtures for the criterion benchmarks.

use dptok_core::midi_io::NoteEvent;
use dptok_core::model::{Model, ModelConfig};
use dptok_core::tokenizer::{encode_events, CompoundToken, FieldVocabulary};

/// A deterministic four-voice piece with `notes` notes.
pub fn piece(notes: usize) -> Vec<NoteEvent> {
    (0..notes)
        .map(|i| {
            let i = i as u32;
            NoteEvent::from_onset(i * 3, 12, 48 + (i * 7 % 36) as u8, 6 + i % 12, i % 4)
        })
        .collect()
}

pub fn tokens(notes: usize) -> Vec<CompoundToken> {
    encode_events(&piece(notes), &FieldVocabulary::default()).expect("fixture encodes")
}

/// The default desk model with a given grid capacity.
pub fn model(max_steps: usize) -> Model {
    let cfg = ModelConfig {
        max_steps,
        ..ModelConfig::default()
    };
    Model::new(cfg, 0).expect("valid config")
}
