mod common;

use dptok_core::delay_codec::{dp_encode, DelaySchedule};
use dptok_core::model::{generate, load_checkpoint, save_checkpoint, DecodeMode, Model, ModelConfig, SamplingConfig};
use dptok_core::tokenizer::{CompoundToken, Field, FieldVocabulary, TokenType, NUM_FIELDS};
use dptok_core::Row;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_logits_match(model: &Model, rows: &[Row]) {
    let ours = model.forward(rows).unwrap();
    let reference = common::reference_logits(model, rows);
    for (t, (a, b)) in ours.iter().zip(&reference).enumerate() {
        for d in 0..NUM_FIELDS {
            for (x, y) in a.field(d).iter().zip(&b[d]) {
                assert!((x - y).abs() < 1e-12, "step {t} field {d}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn toy_model_matches_reference_forward() {
    let cfg = ModelConfig {
        layers: 1,
        heads: 1,
        d_model: 4,
        d_ff: 8,
        max_steps: 32,
        init_std: 0.5,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let toks = common::random_tokens(&mut rng, 20);
    let grid = dp_encode(&toks, model.schedule(), model.vocab()).unwrap();
    assert_logits_match(&model, grid.rows());
}

#[test]
fn desk_model_matches_reference_forward() {
    let cfg = ModelConfig {
        init_std: 0.1,
        tie_embeddings: true,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 22).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let toks = common::random_tokens(&mut rng, 24);
    let grid = dp_encode(&toks, model.schedule(), model.vocab()).unwrap();
    assert_logits_match(&model, grid.rows());
}

#[test]
fn first_step_sees_only_first_row() {
    let model = Model::new(ModelConfig::default(), 23).unwrap();
    let vocab = *model.vocab();
    let a: Vec<Row> = vec![[1, 0, 0, 0, 0, 0], vocab.pad_row()];
    let b: Vec<Row> = vec![[1, 0, 0, 0, 0, 0], [3, 5, 5, 5, 5, 5]];
    assert_eq!(model.forward(&a).unwrap()[0], model.forward(&b).unwrap()[0]);
    assert_eq!(model.forward(&a[..1]).unwrap()[0], model.forward(&a).unwrap()[0]);
}

#[test]
fn contributing_cells_of_a_two_token_grid() {
    let vocab = FieldVocabulary::default();
    let schedule = DelaySchedule::uniform();
    let toks = [
        CompoundToken::structural(TokenType::StartOfSong),
        CompoundToken::structural(TokenType::StartOfNotes),
    ];
    let grid = dp_encode(&toks, &schedule, &vocab).unwrap();
    let steps = grid.steps();
    let expected: usize = Field::ALL
        .iter()
        .map(|&f| {
            (2..=steps)
                .filter(|&t| schedule.event_at(t, f).is_some_and(|i| i <= 2))
                .count()
        })
        .sum();
    // every field of the second event plus the delayed fields of the first
    assert_eq!(expected, 6 + 5);
    let model = Model::new(ModelConfig::default(), 24).unwrap();
    assert_eq!(model.loss_stats(grid.rows()).unwrap().cells(), expected);
}

#[test]
fn uniform_logits_cost_log_vocab() {
    let mut model = Model::new(ModelConfig::default(), 25).unwrap();
    for w in model.params.head_weight.iter_mut().chain(model.params.head_bias.iter_mut()) {
        w.data.iter_mut().for_each(|x| *x = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let toks = common::random_tokens(&mut rng, 30);
    let grid = dp_encode(&toks, model.schedule(), model.vocab()).unwrap();
    let stats = model.loss_stats(grid.rows()).unwrap();
    let means = stats.field_mean();
    for f in Field::ALL {
        let ln_v = (model.vocab().size(f) as f64).ln();
        assert!((means[f.index()] - ln_v).abs() < 1e-12, "{f}");
    }
    let max = Field::ALL.iter().map(|&f| (model.vocab().size(f) as f64).ln()).fold(0.0, f64::max);
    let loss = model.loss(&grid).unwrap();
    assert!(loss > 0.0 && loss <= max);
}

#[test]
fn confident_correct_logits_cost_nothing() {
    let cfg = ModelConfig {
        schedule: DelaySchedule::zero(),
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg, 26).unwrap();
    let note = CompoundToken([4, 3, 2, 61, 6, 1]);
    let toks = vec![note; 10];
    for (d, b) in model.params.head_bias.iter_mut().enumerate() {
        b.data[note.0[d] as usize] = 1e3;
    }
    let grid = dp_encode(&toks, model.schedule(), model.vocab()).unwrap();
    assert!(model.loss(&grid).unwrap() < 1e-9);
}

#[test]
fn generation_survives_checkpoint_round_trip() {
    let cfg = ModelConfig {
        layers: 1,
        d_model: 16,
        d_ff: 32,
        max_steps: 48,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 27).unwrap();
    let dir = std::env::temp_dir().join(format!("dptok-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.ckpt");
    save_checkpoint(&path, &model, 0).unwrap();
    let (a, _) = load_checkpoint(&path).unwrap();
    let (b, _) = load_checkpoint(&path).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    let sampling = SamplingConfig::default();
    let ga = generate(&a, &[], &sampling, 48, DecodeMode::Incremental).unwrap();
    let gb = generate(&b, &[], &sampling, 48, DecodeMode::FullPrefix).unwrap();
    assert_eq!(ga, gb);
}

#[test]
fn sampling_stays_grammatical_under_any_field_order() {
    let vocab = FieldVocabulary::default();
    for (k, delays) in [[5, 4, 3, 2, 1, 0], [2, 0, 5, 1, 4, 3], [0, 0, 0, 0, 0, 0], [3, 3, 0, 1, 1, 2]]
        .iter()
        .enumerate()
    {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 16,
            d_ff: 32,
            max_steps: 40,
            init_std: 0.5,
            schedule: DelaySchedule::new(delays).unwrap(),
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 30 + k as u64).unwrap();
        for seed in 0..40 {
            let sampling = SamplingConfig {
                seed,
                top_k: [3; NUM_FIELDS],
                temperature: 2.0,
            };
            let g = generate(&model, &[], &sampling, 40, DecodeMode::Incremental).unwrap();
            assert!(g.grid.steps() <= 40);
            let toks = dptok_core::dp_decode(&g.grid, &vocab).unwrap();
            dptok_core::validate_grammar(&toks).unwrap();
            let beats: Vec<u32> = toks
                .iter()
                .filter(|t| t.kind() == Some(TokenType::Note))
                .map(|t| t.get(Field::Beat))
                .collect();
            assert!(beats.windows(2).all(|w| w[0] <= w[1]), "{delays:?} seed {seed}");
        }
    }
}
