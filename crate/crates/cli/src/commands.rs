use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dptok_core::bench::{default_complexity, measure_nps, with_schedule, write_csv, write_markdown, BenchConfig};
use dptok_core::delay_codec::{dp_decode, dp_encode, grid_from_bytes, grid_to_bytes, DelaySchedule};
use dptok_core::metrics::{evaluate_piece, write_report_csv};
use dptok_core::midi_io::{parse_midi, parse_midi_with_stats, split_dataset, write_midi, ParseStats, MIN_SPLIT_PIECES};
use dptok_core::model::{generate, load_checkpoint, prompt_prefix, save_checkpoint, DecodeMode, Model};
use dptok_core::tokenizer::{decode_events, encode_events, tokens_from_bytes, tokens_to_bytes, CompoundToken, Field};
use dptok_core::training::{make_batches, train, write_trace_csv};
use dptok_core::{Error, NoteEvent};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{plot, Cli, Command, UsageError};

const MIDI_EXTS: [&str; 2] = ["mid", "midi"];
const TOKEN_EXT: &str = "tok";
/// Four beats of twelve ticks.
const BAR_TICKS: u32 = 48;
const MIN_BENCH_PROMPTS: usize = 20;

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?.finish(cli.seed);
    match cli.command {
        Command::Tokenize { input, output, skip_bad } => {
            cfg.log();
            tokenize(&input, &output, skip_bad, &cfg)
        }
        Command::Detokenize { input, output } => {
            cfg.log();
            detokenize(&input, &output, &cfg)
        }
        Command::DpEncode { input, output, schedule } => {
            let tokens = read_tokens(&input)?;
            let grid = dp_encode(&tokens, &schedule, &cfg.model.vocab)?;
            write(&output, &grid_to_bytes(&grid)?)
        }
        Command::DpDecode { input, output, schedule } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let grid = grid_from_bytes(&bytes, &schedule)?;
            write(&output, &tokens_to_bytes(&dp_decode(&grid, &cfg.model.vocab)?)?)
        }
        Command::Train { data, output, model, train } => {
            model.apply(&mut cfg.model);
            train.apply(&mut cfg.train);
            cfg.log();
            cmd_train(&data, &output, &cfg)
        }
        Command::Generate {
            checkpoint,
            prompt,
            output,
            bars,
            plot,
            schedule,
            max_steps,
            mode,
            sampling,
        } => {
            sampling.apply(&mut cfg.sampling);
            cfg.log();
            let schedule = schedule.unwrap_or(cfg.model.schedule);
            let plot = plot.unwrap_or_else(|| output.with_extension("svg"));
            let job = GenerateJob {
                checkpoint: &checkpoint,
                prompt: &prompt,
                output: &output,
                plot: &plot,
                bars,
                schedule,
                max_steps,
                mode,
            };
            cmd_generate(&job, &cfg)
        }
        Command::Eval {
            input,
            output,
            bar_ticks,
        } => cmd_eval(&input, output.as_deref(), bar_ticks, &cfg),
        Command::Bench {
            prompts,
            checkpoint,
            max_steps,
            mode,
            runs,
            markdown,
            csv,
            model,
            sampling,
        } => {
            model.apply(&mut cfg.model);
            sampling.apply(&mut cfg.sampling);
            cfg.log();
            let modes = match mode.as_str() {
                "both" => vec![DecodeMode::FullPrefix, DecodeMode::Incremental],
                m => vec![m.parse::<DecodeMode>()?],
            };
            let job = BenchJob {
                prompts: &prompts,
                checkpoint: checkpoint.as_deref(),
                max_steps,
                modes,
                runs,
                markdown: markdown.as_deref(),
                csv: csv.as_deref(),
            };
            cmd_bench(&job, &cfg)
        }
        Command::Plot {
            input,
            output,
            prompt_bars,
        } => {
            let events = read_piece(&input, &cfg)?;
            plot::write_plot(&output, &events, cfg.quantization.resolution, BAR_TICKS, prompt_bars * BAR_TICKS)
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// `path` itself if it is a file, else its entries with matching
/// extensions, sorted by name.
fn list_inputs(path: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_ext(p, exts))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_tokens(path: &Path) -> Result<Vec<CompoundToken>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    tokens_from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Notes of a MIDI or token file.
fn read_piece(path: &Path, cfg: &RunConfig) -> Result<Vec<NoteEvent>> {
    if has_ext(path, &[TOKEN_EXT]) {
        let tokens = read_tokens(path)?;
        return decode_events(&tokens, &cfg.model.vocab).with_context(|| format!("decoding {}", path.display()));
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_midi(&bytes, &cfg.quantization).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct ManifestPiece {
    id: String,
    source: String,
    tokens: usize,
    notes: usize,
    stats: ParseStats,
}

#[derive(Serialize)]
struct Skipped {
    source: String,
    error: String,
}

#[derive(Serialize)]
struct Manifest {
    n: usize,
    notes: usize,
    dropped_beyond_max_beat: usize,
    clamped_durations: usize,
    unterminated_notes: usize,
    pieces: Vec<ManifestPiece>,
    skipped: Vec<Skipped>,
}

fn tokenize(input: &Path, output: &Path, skip_bad: bool, cfg: &RunConfig) -> Result<()> {
    let files = list_inputs(input, &MIDI_EXTS)?;
    fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    let mut manifest = Manifest {
        n: 0,
        notes: 0,
        dropped_beyond_max_beat: 0,
        clamped_durations: 0,
        unterminated_notes: 0,
        pieces: Vec::new(),
        skipped: Vec::new(),
    };
    for file in &files {
        let bytes = fs::read(file).with_context(|| format!("reading {}", file.display()))?;
        let parsed = parse_midi_with_stats(&bytes, &cfg.quantization)
            .and_then(|p| encode_events(&p.events, &cfg.model.vocab).map(|t| (p, t)));
        let (piece, tokens) = match parsed {
            Ok(ok) => ok,
            Err(e) if skip_bad && e.is_data_error() => {
                log::warn!("skipping {}: {e}", file.display());
                manifest.skipped.push(Skipped {
                    source: file.display().to_string(),
                    error: e.to_string(),
                });
                continue;
            }
            Err(e) => return Err(e).with_context(|| format!("tokenizing {}", file.display())),
        };
        let id = stem(file);
        write(&output.join(format!("{id}.{TOKEN_EXT}")), &tokens_to_bytes(&tokens)?)?;
        let s = &piece.stats;
        manifest.notes += piece.events.len();
        manifest.dropped_beyond_max_beat += s.dropped_beyond_max_beat;
        manifest.clamped_durations += s.clamped_durations;
        manifest.unterminated_notes += s.unterminated_notes;
        manifest.pieces.push(ManifestPiece {
            id,
            source: file.display().to_string(),
            tokens: tokens.len(),
            notes: piece.events.len(),
            stats: piece.stats,
        });
    }
    manifest.n = manifest.pieces.len();
    log::info!("tokenized {} pieces, skipped {}", manifest.n, manifest.skipped.len());
    write(&output.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
}

fn detokenize(input: &Path, output: &Path, cfg: &RunConfig) -> Result<()> {
    let files = list_inputs(input, &[TOKEN_EXT])?;
    let single_file = input.is_file() && has_ext(output, &MIDI_EXTS);
    if !single_file {
        fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    }
    for file in &files {
        let events = read_piece(file, cfg)?;
        let midi = write_midi(&events, &cfg.quantization).with_context(|| format!("writing {}", file.display()))?;
        let target = if single_file {
            output.to_path_buf()
        } else {
            output.join(format!("{}.mid", stem(file)))
        };
        write(&target, &midi)?;
    }
    Ok(())
}

fn cmd_train(data: &Path, output: &Path, cfg: &RunConfig) -> Result<()> {
    let files = list_inputs(data, &[TOKEN_EXT])?;
    if files.is_empty() {
        return Err(Error::EmptyCorpus).with_context(|| format!("no .{TOKEN_EXT} files in {}", data.display()));
    }
    let pieces: Vec<Vec<CompoundToken>> = files.iter().map(|f| read_tokens(f)).collect::<Result<_>>()?;
    let (train_set, held_out) = if pieces.len() >= MIN_SPLIT_PIECES {
        let ids: Vec<usize> = (0..pieces.len()).collect();
        let split = split_dataset(&ids, (0.8, 0.1, 0.1), cfg.seed)?;
        let pick = |ids: &[usize]| ids.iter().map(|&i| pieces[i].clone()).collect::<Vec<_>>();
        (pick(&split.train), pick(&split.valid))
    } else {
        log::warn!(
            "only {} pieces; training without a split and reporting accuracy on the training set",
            pieces.len()
        );
        (pieces.clone(), pieces.clone())
    };
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let schedule = *model.schedule();
    let vocab = *model.vocab();
    let held: Vec<_> = held_out
        .iter()
        .map(|p| dp_encode(p, &schedule, &vocab).map(|g| dptok_core::training::truncate(g, cfg.train.max_seq_len)))
        .collect::<dptok_core::Result<_>>()?;
    let mut batches = make_batches(train_set, &cfg.train, schedule, vocab)?;
    let report = train(&mut model, &mut batches, &cfg.train, &held)?;

    fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    save_checkpoint(&output.join("model.ckpt"), &model, cfg.train.total_steps)?;
    let mut trace = Vec::new();
    write_trace_csv(&report.trace, &mut trace)?;
    write(&output.join("loss.csv"), &trace)?;
    let mut acc = String::from("step,loss");
    for f in Field::ALL {
        acc.push_str(&format!(",{f}"));
    }
    acc.push('\n');
    for h in &report.held_out {
        acc.push_str(&format!("{},{}", h.step, h.loss));
        for a in h.accuracy {
            acc.push_str(&format!(",{a}"));
        }
        acc.push('\n');
    }
    write(&output.join("held_out.csv"), acc.as_bytes())?;
    write(&output.join("config.json"), &serde_json::to_vec_pretty(cfg)?)?;
    if let Some(last) = report.held_out.last() {
        log::info!("final held-out loss {:.4}, accuracy {:?}", last.loss, last.accuracy);
    }
    Ok(())
}

struct GenerateJob<'a> {
    checkpoint: &'a Path,
    prompt: &'a Path,
    output: &'a Path,
    plot: &'a Path,
    bars: usize,
    schedule: DelaySchedule,
    max_steps: usize,
    mode: DecodeMode,
}

fn cmd_generate(job: &GenerateJob, cfg: &RunConfig) -> Result<()> {
    let (model, header) =
        load_checkpoint(job.checkpoint).with_context(|| format!("loading {}", job.checkpoint.display()))?;
    header.expect(&job.schedule, &cfg.model.vocab)?;
    let events = read_piece(job.prompt, cfg)?;
    let tokens = encode_events(&events, model.vocab())?;
    let prompt = prompt_prefix(&tokens, model.vocab(), job.bars, BAR_TICKS)?;
    let g = generate(&model, &prompt, &cfg.sampling, job.max_steps, job.mode)?;
    let out = decode_events(&g.tokens, model.vocab())?;
    log::info!(
        "generated {} notes in {} steps ({} notes in prompt)",
        g.notes_generated,
        g.steps_decoded,
        out.len() - g.notes_generated
    );
    let midi = write_midi(&out, &cfg.quantization)?;
    write(job.output, &midi)?;
    plot::write_plot(
        job.plot,
        &out,
        cfg.quantization.resolution,
        BAR_TICKS,
        job.bars as u32 * BAR_TICKS,
    )
}

fn corpus(input: &Path, cfg: &RunConfig) -> Result<Vec<(String, Vec<NoteEvent>)>> {
    let mut exts = MIDI_EXTS.to_vec();
    exts.push(TOKEN_EXT);
    let files = list_inputs(input, &exts)?;
    if files.is_empty() {
        return Err(Error::EmptyCorpus).with_context(|| format!("nothing to read in {}", input.display()));
    }
    files
        .iter()
        .map(|f| Ok((stem(f), read_piece(f, cfg)?)))
        .collect()
}

fn cmd_eval(input: &Path, output: Option<&Path>, bar_ticks: u32, cfg: &RunConfig) -> Result<()> {
    if bar_ticks == 0 {
        return Err(UsageError("--bar-ticks must be positive".into()).into());
    }
    let mut rows = Vec::new();
    for (name, events) in corpus(input, cfg)? {
        let report = evaluate_piece(&events, cfg.quantization.resolution, bar_ticks)
            .with_context(|| format!("evaluating {name}"))?;
        rows.push((name, report));
    }
    let mut csv = Vec::new();
    write_report_csv(&rows, &mut csv)?;
    match output {
        Some(p) => write(p, &csv),
        None => {
            print!("{}", String::from_utf8_lossy(&csv));
            Ok(())
        }
    }
}

struct BenchJob<'a> {
    prompts: &'a Path,
    checkpoint: Option<&'a Path>,
    max_steps: usize,
    modes: Vec<DecodeMode>,
    runs: usize,
    markdown: Option<&'a Path>,
    csv: Option<&'a Path>,
}

fn cmd_bench(job: &BenchJob, cfg: &RunConfig) -> Result<()> {
    let model = match job.checkpoint {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?.0,
        None => Model::new(cfg.model.clone(), cfg.seed)?,
    };
    let mut prompts = Vec::new();
    for (name, events) in corpus(job.prompts, cfg)? {
        let tokens = encode_events(&events, model.vocab())?;
        match prompt_prefix(&tokens, model.vocab(), 2, BAR_TICKS) {
            Ok(p) => prompts.push(p),
            Err(e @ Error::PromptTooShort { .. }) => log::warn!("skipping {name}: {e}"),
            Err(e) => return Err(e.into()),
        }
    }
    if prompts.len() < MIN_BENCH_PROMPTS {
        return Err(Error::TooFewPieces {
            needed: MIN_BENCH_PROMPTS,
            got: prompts.len(),
        }
        .into());
    }
    let dp = with_schedule(&model, *model.schedule());
    let zero = with_schedule(&model, DelaySchedule::zero());
    let dp_name = format!("delay {}", model.schedule());
    let mut results = Vec::new();
    for &mode in &job.modes {
        let bench = BenchConfig {
            sampling: cfg.sampling.clone(),
            max_steps: job.max_steps,
            mode,
            runs: job.runs,
        };
        let tag = match mode {
            DecodeMode::FullPrefix => "full",
            DecodeMode::Incremental => "incremental",
        };
        let zero_name = format!("zero-delay ({tag})");
        let dp_name = format!("{dp_name} ({tag})");
        results.extend(measure_nps(&[(&zero_name, &zero), (&dp_name, &dp)], &prompts, &bench)?);
    }
    let mean_notes = results[0].notes_generated / results[0].pieces.max(1);
    let mut md = Vec::new();
    write_markdown(&results, &default_complexity(mean_notes), &mut md)?;
    print!("{}", String::from_utf8_lossy(&md));
    if let Some(p) = job.markdown {
        write(p, &md)?;
    }
    if let Some(p) = job.csv {
        let mut csv = Vec::new();
        write_csv(&results, &mut csv)?;
        write(p, &csv)?;
    }
    Ok(())
}
