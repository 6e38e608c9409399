//! Shared fixtures for integration tests: random pieces, a toy corpus and a
//! straight-line reference forward pass.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dptok_core::midi_io::{sort_events, NoteEvent};
use dptok_core::model::{Model, Tensor};
use dptok_core::tokenizer::{encode_events, CompoundToken, FieldVocabulary, NUM_FIELDS};
use dptok_core::Row;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random sorted events that survive a MIDI write/parse cycle: notes sharing
/// an instrument and pitch never sit strictly inside one another.
pub fn random_events(rng: &mut ChaCha8Rng, max_notes: usize) -> Vec<NoteEvent> {
    let n = rng.gen_range(1..=max_notes);
    let instruments: Vec<u32> = (0..rng.gen_range(1..=3))
        .map(|_| if rng.gen_bool(0.2) { 128 } else { rng.gen_range(0..128) })
        .collect();
    let mut events: Vec<NoteEvent> = (0..n)
        .map(|_| NoteEvent {
            beat: rng.gen_range(0..64),
            position: rng.gen_range(0..12),
            pitch: rng.gen_range(0..128),
            duration: rng.gen_range(1..48),
            instrument: instruments[rng.gen_range(0..instruments.len())],
        })
        .collect();
    sort_events(&mut events);
    let mut last_end: BTreeMap<(u32, u8), u32> = BTreeMap::new();
    events.retain(|e| {
        let end = e.onset(12) + e.duration;
        let slot = last_end.entry((e.instrument, e.pitch)).or_insert(0);
        if end >= *slot {
            *slot = end;
            true
        } else {
            false
        }
    });
    events
}

/// A random grammatical token sequence of at most `max_len` tokens.
pub fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<CompoundToken> {
    assert!(max_len >= 8);
    loop {
        let events = random_events(rng, max_len - 6);
        let toks = encode_events(&events, &FieldVocabulary::default()).unwrap();
        if toks.len() <= max_len {
            return toks;
        }
    }
}

/// Eight short pieces, one instrument each, about twenty notes apiece.
pub fn toy_corpus() -> Vec<Vec<CompoundToken>> {
    let vocab = FieldVocabulary::default();
    let scale = [0u8, 2, 4, 5, 7, 9, 11, 12];
    (0..8u32)
        .map(|p| {
            let root = 48 + 3 * p as u8;
            let events: Vec<NoteEvent> = (0..20u32)
                .map(|i| NoteEvent {
                    beat: i / 2,
                    position: (i % 2) * 6,
                    pitch: root + scale[((i * (p + 1)) % 8) as usize],
                    duration: if i % 4 == 3 { 12 } else { 6 },
                    instrument: p * 8,
                })
                .collect();
            encode_events(&events, &vocab).unwrap()
        })
        .collect()
}

fn vec_mat(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows)
        .map(|o| (0..w.cols).map(|i| w.data[o * w.cols + i] * x[i]).sum())
        .collect()
}

fn layer_norm(x: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean: f64 = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) / sd * gain.data[i] + bias.data[i]).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Logits for every step, recomputed naively from the parameter tensors.
pub fn reference_logits(model: &Model, rows: &[Row]) -> Vec<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let p = &model.params;
    let dm = cfg.d_model;
    let dh = dm / cfg.heads;
    let mut xs: Vec<Vec<f64>> = rows
        .iter()
        .enumerate()
        .map(|(t, row)| {
            (0..dm)
                .map(|j| {
                    let mut s = p.pos_embed.data[t * dm + j];
                    for d in 0..NUM_FIELDS {
                        s += p.field_embed[d].data[row[d] as usize * dm + j];
                    }
                    s
                })
                .collect()
        })
        .collect();
    for l in &p.layers {
        let a: Vec<Vec<f64>> = xs.iter().map(|x| layer_norm(x, &l.ln1_gain, &l.ln1_bias)).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|v| vec_mat(&l.wq, v)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|v| vec_mat(&l.wk, v)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|v| vec_mat(&l.wv, v)).collect();
        for t in 0..xs.len() {
            let mut ctx = vec![0.0; dm];
            for h in 0..cfg.heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..=t)
                    .map(|j| r.clone().map(|i| q[t][i] * k[j][i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..=t {
                    let w = (scores[j] - m).exp() / z;
                    for i in r.clone() {
                        ctx[i] += w * v[j][i];
                    }
                }
            }
            let o = vec_mat(&l.wo, &ctx);
            for i in 0..dm {
                xs[t][i] += o[i];
            }
        }
        for x in xs.iter_mut() {
            let b = layer_norm(x, &l.ln2_gain, &l.ln2_bias);
            let u: Vec<f64> = vec_mat(&l.w1, &b).iter().zip(&l.b1.data).map(|(u, c)| gelu(u + c)).collect();
            let f = vec_mat(&l.w2, &u);
            for i in 0..dm {
                x[i] += f[i] + l.b2.data[i];
            }
        }
    }
    xs.iter()
        .map(|x| {
            let h = layer_norm(x, &p.final_gain, &p.final_bias);
            (0..NUM_FIELDS)
                .map(|d| {
                    let table = if cfg.tie_embeddings { &p.field_embed[d] } else { &p.head_weight[d] };
                    let mut out = vec_mat(table, &h);
                    out.iter_mut().zip(&p.head_bias[d].data).for_each(|(o, b)| *o += b);
                    out
                })
                .collect()
        })
        .collect()
}

pub fn log_softmax_at(scores: &[f64], target: usize) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    scores[target] - lse
}

/// Per-field mean cross-entropy of the parallel-heads layout, where each
/// row is one whole token and row `t` is predicted entirely from rows
/// `..t`.
pub fn parallel_baseline_loss(model: &Model, tokens: &[CompoundToken]) -> [f64; NUM_FIELDS] {
    let rows: Vec<Row> = tokens.iter().map(|t| t.0).collect();
    let logits = reference_logits(model, &rows);
    let mut out = [0.0; NUM_FIELDS];
    for (d, o) in out.iter_mut().enumerate() {
        let terms: Vec<f64> = (1..rows.len())
            .map(|t| -log_softmax_at(&logits[t - 1][d], rows[t][d] as usize))
            .collect();
        *o = terms.iter().sum::<f64>() / terms.len() as f64;
    }
    out
}
