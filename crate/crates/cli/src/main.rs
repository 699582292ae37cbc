use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use symupe_core::codec::{normalize, read_aligned, write_aligned, AlignedSequence, Feature, TokenizerConfig, Vocab};
use symupe_core::conditioning::{
    parse_prompt_file, prompt_text_rows, ControlInputs, DropFlags, EmbeddingFile, EmotionTable, TextRows,
};
use symupe_core::eval::evaluate_sets;
use symupe_core::maskgen::parse_bits;
use symupe_core::midi::{parse_smf, write_smf, MidiNoteEvent, PerformanceTrack};
use symupe_core::model::{checkpoint, ModelConfig, PianoFlow, SequenceInput};
use symupe_core::pipeline::{load_aligned, pair_by_pitch, score_from_midi, train, RunConfig, ALIGN_EXTENSION};
use symupe_core::sampler::{
    decode_to_midi, inpaint, make_step_schedule, render_windowed, with_performance, SamplerConfig, DEFAULT_GAMMA,
    DEFAULT_NEW_NOTES, DEFAULT_STEPS, DEFAULT_WINDOW,
};
use symupe_core::synth::{synth_dataset, SynthStyle};
use symupe_tensor::{grad_check, Array};

#[derive(Parser)]
#[command(name = "symupe", version, about = "Expressive piano performance rendering from symbolic scores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the token ids of a MIDI or align file, one note per line.
    Tokenize {
        input: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Pair a score MIDI file with a performance MIDI file into an align file.
    Encode {
        score: PathBuf,
        performance: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write a synthetic dataset of align files and MIDI renderings.
    SynthData {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train a model from a run config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for the config echo, logs and checkpoints.
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render an expressive performance of a score MIDI file.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        score: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        control: ControlArgs,
    },
    /// Regenerate the masked notes of an aligned performance.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        /// `bits:<0/1 per note>`, `notes:<start>-<end>`, `below:<pitch>` or `above:<pitch>`.
        #[arg(long)]
        mask_spec: String,
        /// Align file, or MIDI when the name ends in `.mid`.
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        control: ControlArgs,
    },
    /// Compare two directories of align files score by score.
    Eval {
        generated: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = 4096)]
        n_mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare model gradients against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the sampling time boundaries.
    Schedule {
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
    },
}

#[derive(Args)]
struct Sampling {
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Guidance strength; 1 samples the conditional model as is.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_NEW_NOTES)]
    new_notes: usize,
}

#[derive(Args)]
struct ControlArgs {
    /// Per-bar text prompts.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    /// Embeddings of the emotion labels used by prompts.
    #[arg(long)]
    emotion_table: Option<PathBuf>,
    /// Embeddings for free-text prompt labels.
    #[arg(long)]
    prompt_embeddings: Option<PathBuf>,
    /// Target performed tempo relative to the score marking.
    #[arg(long)]
    tempo_scale: Option<f64>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}

fn is_midi(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

fn load_midi(path: &Path) -> Result<PerformanceTrack> {
    parse_smf(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// An align file, or a MIDI file read as a score played as written.
fn load_sequence(path: &Path) -> Result<AlignedSequence> {
    if is_midi(path) {
        Ok(score_from_midi(&load_midi(path)?)?)
    } else {
        read_aligned(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
    }
}

fn vocab(path: Option<&Path>) -> Result<Vocab> {
    let config = match path {
        Some(p) => TokenizerConfig::parse(&read_text(p)?)?,
        None => TokenizerConfig::default(),
    };
    Ok(Vocab::new(&config)?)
}

fn sampler_config(s: &Sampling) -> Result<SamplerConfig> {
    Ok(SamplerConfig {
        schedule: make_step_schedule(s.k, s.gamma)?,
        alpha: s.alpha,
        window_n: s.window,
        new_k: s.new_notes,
    })
}

/// Control inputs for sampling, or none when no control was requested.
fn control(seq: &AlignedSequence, args: &ControlArgs, model: &ModelConfig) -> Result<Option<ControlInputs>> {
    if args.prompt_file.is_none() && args.tempo_scale.is_none() {
        return Ok(None);
    }
    let vocab = vocab(args.tokenizer.as_deref())?;
    let mut c = ControlInputs::from_sequence(seq, &vocab);
    c.drop = DropFlags { score: false, perf: args.tempo_scale.is_none(), text: args.prompt_file.is_none() };
    if let Some(scale) = args.tempo_scale {
        if !(scale > 0.0) {
            bail!("tempo scale must be positive, got {scale}");
        }
        let q = vocab.quantizer(Feature::PerfTempo);
        c.perf_tempo = seq.score_tempo_bpm.iter().map(|&b| q.tokenize(b * scale).0).collect();
    }
    c.text = Some(match &args.prompt_file {
        Some(p) => {
            let prompts = parse_prompt_file(&read_text(p)?)?;
            let table_path = args.emotion_table.as_ref().context("--prompt-file needs --emotion-table")?;
            let table = EmotionTable::from_file(&EmbeddingFile::parse(&read_text(table_path)?)?)?;
            let extra = args.prompt_embeddings.as_deref().map(|p| read_text(p).map(|t| EmbeddingFile::parse(&t))).transpose()?.transpose()?;
            prompt_text_rows(seq, &prompts, &table, extra.as_ref())?
        }
        None => TextRows { emb: Array::zeros(&[seq.len(), model.text_emb_dim]), present: vec![false; seq.len()] },
    });
    c.validate()?;
    Ok(Some(c))
}

fn parse_mask(spec: &str, seq: &AlignedSequence) -> Result<Vec<bool>> {
    let n = seq.len();
    let (kind, arg) = spec.split_once(':').context("mask spec must look like kind:value")?;
    let mask = match kind {
        "bits" => parse_bits(arg)?,
        "notes" => {
            let (a, b) = arg.split_once('-').context("notes range must be start-end")?;
            let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
            if a > b || b > n {
                bail!("note range {a}-{b} outside 0-{n}");
            }
            (0..n).map(|i| (a..b).contains(&i)).collect()
        }
        "below" => {
            let p: u8 = arg.trim().parse()?;
            seq.score.iter().map(|s| s.pitch < p).collect()
        }
        "above" => {
            let p: u8 = arg.trim().parse()?;
            seq.score.iter().map(|s| s.pitch > p).collect()
        }
        _ => bail!("unknown mask kind {kind:?}"),
    };
    if mask.len() != n {
        bail!("mask has {} entries for {n} notes", mask.len());
    }
    Ok(mask)
}

fn interpolated(seq: &AlignedSequence) -> Vec<bool> {
    seq.perf.iter().map(|p| p.interpolated).collect()
}

fn write_performance(path: &Path, seq: &AlignedSequence, perf: &Array) -> Result<()> {
    let pitches: Vec<u8> = seq.score.iter().map(|s| s.pitch).collect();
    if is_midi(path) {
        let decoded = decode_to_midi(&pitches, perf, &interpolated(seq))?;
        if decoded.clamped > 0 {
            log::warn!("{} values clamped while decoding", decoded.clamped);
        }
        write(path, write_smf(&decoded.notes, &decoded.pedals)?)
    } else {
        let (out, clamped) = with_performance(seq, perf)?;
        if clamped > 0 {
            log::warn!("{clamped} values clamped while decoding");
        }
        write(path, write_aligned(&out))
    }
}

fn score_array(seq: &AlignedSequence) -> Result<Array> {
    Ok(Array::from_rows(&normalize(seq).0, 4)?)
}

/// The score as notation: nominal timing at 120 BPM, fixed velocity.
fn score_midi(seq: &AlignedSequence) -> Vec<MidiNoteEvent> {
    seq.score
        .iter()
        .map(|s| MidiNoteEvent { pitch: s.pitch, velocity: 64, onset_s: 2.0 * s.onset, offset_s: 2.0 * (s.onset + s.duration), channel: 0 })
        .collect()
}

/// Groups align files by the part of the file name before the first dot,
/// so several performances of one score can sit side by side.
fn load_set(dir: &Path) -> Result<BTreeMap<String, Vec<AlignedSequence>>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut set: BTreeMap<String, Vec<AlignedSequence>> = BTreeMap::new();
    for (name, seq) in load_aligned(&[dir.to_path_buf()])? {
        let key = name.split('.').next().unwrap_or(&name).to_string();
        set.entry(key).or_default().push(seq);
    }
    if set.is_empty() {
        bail!("no .{ALIGN_EXTENSION} files in {}", dir.display());
    }
    Ok(set)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Tokenize { input, tokenizer, output } => {
            let seq = load_sequence(&input)?;
            let (tokens, clamped) = vocab(tokenizer.as_deref())?.tokenize(&seq);
            if clamped > 0 {
                log::warn!("{clamped} values clamped into range");
            }
            let mut text = Feature::ALL.map(Feature::name).join("\t");
            text.push('\n');
            for t in tokens {
                text.push_str(&t.map(|id| id.to_string()).join("\t"));
                text.push('\n');
            }
            match output {
                Some(p) => write(&p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Encode { score, performance, output } => {
            let (seq, report) = pair_by_pitch(&load_midi(&score)?, &load_midi(&performance)?)?;
            if !report.dropped.is_empty() || report.interpolated > 0 {
                log::warn!("{} notes interpolated, {} dropped", report.interpolated, report.dropped.len());
            }
            write(&output, write_aligned(&seq))?;
        }
        Command::SynthData { n, seed, output } => {
            fs::create_dir_all(&output).with_context(|| format!("creating {}", output.display()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in synth_dataset(n, &SynthStyle::default(), &mut rng) {
                let seq = &p.performance;
                write(&output.join(format!("{}.{ALIGN_EXTENSION}", p.name)), write_aligned(seq))?;
                write(&output.join(format!("{}.score.mid", p.name)), write_smf(&score_midi(seq), &[])?)?;
                let decoded = decode_to_midi(
                    &seq.score.iter().map(|s| s.pitch).collect::<Vec<_>>(),
                    &Array::from_rows(&normalize(seq).1, 4)?,
                    &interpolated(seq),
                )?;
                write(&output.join(format!("{}.perf.mid", p.name)), write_smf(&decoded.notes, &decoded.pedals)?)?;
            }
        }
        Command::Train { config, output, steps, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = steps {
                cfg.total_steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let data: Vec<AlignedSequence> = load_aligned(&cfg.data)?.into_iter().map(|(_, s)| s).collect();
            if data.is_empty() {
                bail!("no training data found");
            }
            fs::create_dir_all(&output).with_context(|| format!("creating {}", output.display()))?;
            let run = train(&cfg, &data, Some(&output))?;
            if let Some(last) = run.history.last() {
                println!("trained {} steps, final loss {:.6}", run.history.len(), last.loss);
            }
        }
        Command::Render { checkpoint: ckpt, score, output, sampling, control: ctrl } => {
            let model = checkpoint::load(&ckpt)?;
            let seq = load_sequence(&score)?;
            let c = control(&seq, &ctrl, &model.config)?;
            let cfg = sampler_config(&sampling)?;
            let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
            let perf = render_windowed(&model, &score_array(&seq)?, &interpolated(&seq), c.as_ref(), &cfg, &mut rng)?;
            write_performance(&output, &seq, &perf)?;
        }
        Command::Inpaint { checkpoint: ckpt, input, mask_spec, output, sampling, control: ctrl } => {
            let model = checkpoint::load(&ckpt)?;
            let seq = load_sequence(&input)?;
            let mask = parse_mask(&mask_spec, &seq)?;
            let c = control(&seq, &ctrl, &model.config)?;
            let cfg = sampler_config(&sampling)?;
            let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
            let known = Array::from_rows(&normalize(&seq).1, 4)?;
            let perf = inpaint(&model, &score_array(&seq)?, &known, &mask, &interpolated(&seq), c.as_ref(), &cfg, &mut rng)?;
            write_performance(&output, &seq, &perf)?;
        }
        Command::Eval { generated, reference, n_mc, seed, json } => {
            let report = evaluate_sets(&load_set(&generated)?, &load_set(&reference)?, n_mc, seed);
            print!("{}", report.to_table());
            if let Some(p) = json {
                write(&p, report.to_json())?;
            }
        }
        Command::GradCheck { layers, dim, seed } => {
            let config = ModelConfig {
                layers,
                dim,
                heads: 2,
                ff_dim: dim * 3 / 2,
                feat_emb_dim: 4,
                time_emb_dim: 4,
                cond_layer_index: layers,
                text_emb_dim: 6,
                max_len: 64,
                ..ModelConfig::default()
            };
            let mut model = PianoFlow::new(config, seed)?;
            // randomize every parameter so no gradient path is trivially zero
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 0.3)?;
            for id in 0..model.params.len() {
                for x in model.params.get_mut(id).data_mut() {
                    *x = normal.sample(&mut rng);
                }
            }
            let n = 5;
            let mut randn = |r, c| Array::from_fn(&[r, c], |_| normal.sample(&mut rng) / 0.3);
            let (score, x_t, x_ctx, u, text) = (randn(n, 4), randn(n, 4), randn(n, 4), randn(n, 4), randn(n, 6));
            let mask: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
            let interp = vec![false; n];
            let control = ControlInputs {
                score_tempo: (0..n as u32).map(|i| 40 + i).collect(),
                score_velocity: (0..n as u32).map(|i| 60 + 2 * i).collect(),
                perf_tempo: (0..n as u32).map(|i| 90 - i).collect(),
                text: Some(TextRows { emb: text, present: (0..n).map(|i| i + 1 < n).collect() }),
                drop: DropFlags::default(),
            };
            let inp = SequenceInput { score: &score, x_t: &x_t, x_ctx: &x_ctx, mask: &mask, interpolated: &interp, t: 0.37, control: Some(&control) };
            let mut params = model.params.clone();
            let report = grad_check(&mut params, 1e-5, None, |g| model.masked_loss(g, &[inp], &[&u]).expect("shapes agree").0);
            println!("checked {} entries, max relative error {:.3e}", report.checked, report.max_rel_error);
            if !(report.max_rel_error < 1e-5) {
                bail!("gradient check failed");
            }
        }
        Command::Schedule { k, gamma } => {
            let s = make_step_schedule(k, gamma)?;
            for t in &s.boundaries {
                println!("{t}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
