//! Run configuration, dataset loading and the training driver.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use symupe_tensor::optim::{AdamConfig, LrSchedule};
use thiserror::Error;

use crate::augment::{augment, AugmentSpec};
use crate::codec::{
    clean_alignment, encode_sequence, read_aligned, AlignedSequence, CleanupReport, CodecError, NotePair, PerfEvent, ScoreEvent, ScoreMarkings,
    TimeSignature, TokenizerConfig, Vocab,
};
use crate::flow::DEFAULT_SIGMA_MIN;
use crate::maskgen::{MAX_RATIO, MIN_RATIO};
use crate::midi::{resolve_sustain, MidiNoteEvent, PerformanceTrack, DEFAULT_PEDAL_THRESHOLD};
use crate::model::{checkpoint, ModelConfig, ModelError, PianoFlow, StepStats, TrainConfig, TrainExample, Trainer};

pub const ALIGN_EXTENSION: &str = "align";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("data: {0}")]
    Data(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Everything that defines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    /// Notes shared by consecutive chunks of long sequences.
    pub chunk_overlap: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub sigma_min: f64,
    pub mask_ratio: [f64; 2],
    /// Per-channel control drop probability.
    pub drop_prob: f64,
    /// Feed score/performance tempo and velocity controls to the model.
    pub use_control: bool,
    pub augment: bool,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Aligned-sequence files or directories of them.
    pub data: Vec<PathBuf>,
    /// Tokenizer table; the built-in table when absent.
    pub tokenizer: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    /// Full-size training settings.
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 128,
            max_seq_len: 256,
            chunk_overlap: 32,
            total_steps: 300_000,
            learning_rate: 2e-4,
            final_learning_rate: 1e-4,
            warmup_steps: 1000,
            weight_decay: AdamConfig::default().weight_decay,
            sigma_min: DEFAULT_SIGMA_MIN,
            mask_ratio: [MIN_RATIO, MAX_RATIO],
            drop_prob: 0.2,
            use_control: true,
            augment: true,
            checkpoint_every: 10_000,
            data: Vec::new(),
            tokenizer: None,
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small settings that train in minutes on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            max_seq_len: 128,
            chunk_overlap: 32,
            total_steps: 2000,
            learning_rate: 1e-3,
            final_learning_rate: 1e-4,
            warmup_steps: 100,
            use_control: false,
            checkpoint_every: 500,
            model: ModelConfig { max_len: 128, ..ModelConfig::toy(2, 64) },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        self.model.validate()?;
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive");
        }
        if self.max_seq_len == 0 || self.max_seq_len > self.model.max_len {
            return bad("max_seq_len must be in 1..=model.max_len");
        }
        if self.chunk_overlap >= self.max_seq_len {
            return bad("chunk_overlap must be below max_seq_len");
        }
        let [lo, hi] = self.mask_ratio;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return bad("mask_ratio must satisfy 0 < lo <= hi < 1");
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return bad("drop_prob outside [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate >= 0.0 && self.sigma_min >= 0.0) {
            return bad("learning rates and sigma_min must be non-negative");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside resolve against the
    /// file's directory, and every referenced path must exist.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        cfg.data = cfg.data.iter().map(resolve).collect();
        cfg.tokenizer = cfg.tokenizer.as_ref().map(resolve);
        for p in cfg.data.iter().chain(&cfg.tokenizer) {
            if !p.exists() {
                return Err(PipelineError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: LrSchedule {
                initial: self.learning_rate,
                final_lr: self.final_learning_rate,
                warmup: self.warmup_steps,
                total_steps: self.total_steps,
            },
            adam: AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::default() },
            sigma_min: self.sigma_min,
            drop_prob: self.drop_prob,
            mask_ratio: (self.mask_ratio[0], self.mask_ratio[1]),
        }
    }

    pub fn vocab(&self) -> Result<Vocab, PipelineError> {
        let cfg = match &self.tokenizer {
            Some(p) => TokenizerConfig::parse(&fs::read_to_string(p).map_err(io_err(p))?)?,
            None => TokenizerConfig::default(),
        };
        Ok(Vocab::new(&cfg)?)
    }
}

/// Splits a sequence into chunks of at most `max_len` notes, consecutive
/// chunks sharing `overlap` notes.
pub fn chunk_sequence(seq: &AlignedSequence, max_len: usize, overlap: usize) -> Vec<AlignedSequence> {
    assert!(overlap < max_len, "overlap must be below the chunk length");
    let n = seq.len();
    if n <= max_len {
        return vec![seq.clone()];
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + max_len).min(n);
        out.push(seq.slice(start, end));
        if end == n {
            return out;
        }
        start = end - overlap;
    }
}

/// Named aligned sequences from files and directories, in path order.
pub fn load_aligned(paths: &[PathBuf]) -> Result<Vec<(String, AlignedSequence)>, PipelineError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            for e in fs::read_dir(p).map_err(io_err(p))? {
                let f = e.map_err(io_err(p))?.path();
                if f.extension().is_some_and(|x| x == ALIGN_EXTENSION) {
                    files.push(f);
                }
            }
        } else {
            files.push(p.clone());
        }
    }
    files.sort();
    files
        .into_iter()
        .map(|f| {
            let text = fs::read_to_string(&f).map_err(io_err(&f))?;
            let seq = read_aligned(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", f.display())))?;
            let name = f.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            Ok((name, seq))
        })
        .collect()
}

/// Description of the build and machine, written into run directories.
pub fn env_fingerprint() -> String {
    format!(
        "package = {} {}\nos = {}\narch = {}\ndebug_assertions = {}\nthreads = {}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        std::env::consts::OS,
        std::env::consts::ARCH,
        cfg!(debug_assertions),
        std::thread::available_parallelism().map_or(1, |n| n.get()),
    )
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: PianoFlow,
    pub history: Vec<StepStats>,
}

/// Trains a fresh model on `data`. With a run directory, it receives the
/// resolved config, tokenizer bin edges, a loss log, an environment
/// fingerprint and checkpoints; a failed step leaves the last checkpoint.
pub fn train(cfg: &RunConfig, data: &[AlignedSequence], run_dir: Option<&Path>) -> Result<TrainRun, PipelineError> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let chunks: Vec<AlignedSequence> = data
        .iter()
        .filter(|s| !s.is_empty())
        .flat_map(|s| chunk_sequence(s, cfg.max_seq_len, cfg.chunk_overlap))
        .collect();
    if chunks.is_empty() {
        return Err(PipelineError::Data("no training sequences".into()));
    }
    let mut log = None;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(io_err(&p))
        };
        write("config.toml", &cfg.to_toml())?;
        write("env.txt", &env_fingerprint())?;
        let edges = dir.join("edges");
        fs::create_dir_all(&edges).map_err(io_err(&edges))?;
        vocab.dump_edges(&edges).map_err(io_err(&edges))?;
        let p = dir.join("loss.tsv");
        let mut f = fs::File::create(&p).map_err(io_err(&p))?;
        writeln!(f, "step\tloss\tlr\tmasked_entries").map_err(io_err(&p))?;
        log = Some((f, p));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = PianoFlow::new(cfg.model, rng.random())?;
    let mut trainer = Trainer::new(cfg.train_config(), &model);
    let mut history = Vec::with_capacity(cfg.total_steps);
    let save = |model: &PianoFlow, name: &str| -> Result<(), PipelineError> {
        if let Some(dir) = run_dir {
            let p = dir.join(name);
            checkpoint::save(model, &p).map_err(io_err(&p))?;
        }
        Ok(())
    };
    for step in 1..=cfg.total_steps {
        let examples: Vec<TrainExample> = (0..cfg.batch_size)
            .map(|_| {
                let seq = &chunks[rng.random_range(0..chunks.len())];
                let seq = if cfg.augment { augment(seq, &AugmentSpec::sample(&mut rng), &mut rng) } else { seq.clone() };
                TrainExample::from_sequence(&seq, cfg.use_control.then_some(&vocab))
            })
            .collect();
        let batch: Vec<&TrainExample> = examples.iter().collect();
        let stats = trainer.step(&mut model, &batch, &mut rng)?;
        if let Some((f, p)) = log.as_mut() {
            writeln!(f, "{}\t{:.9e}\t{:.6e}\t{}", stats.step, stats.loss, stats.lr, stats.masked_entries)
                .map_err(io_err(p))?;
        }
        if step % 100 == 0 || step == 1 {
            log::info!("step {step}: loss {:.5} lr {:.2e}", stats.loss, stats.lr);
        }
        history.push(stats);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save(&model, &format!("step{step:07}.ckpt"))?;
        }
    }
    save(&model, "model.ckpt")?;
    Ok(TrainRun { model, history })
}

/// Score notes and markings of a MIDI file read as notation: note timing
/// in ticks becomes score position, tempo and time signature events become
/// markings. Notes outside the piano range are left out. Returns the index
/// of the source note for each score note.
pub fn score_events_from_midi(track: &PerformanceTrack) -> (Vec<ScoreEvent>, Vec<usize>, ScoreMarkings) {
    let map = track.tempo_map();
    let per_whole = 4.0 * f64::from(map.ticks_per_quarter());
    let whole = |s: f64| map.ticks_at(s).round() / per_whole;
    let (mut events, mut source) = (Vec::new(), Vec::new());
    for (i, n) in track.notes.iter().enumerate() {
        if (crate::codec::PITCH_MIN..=crate::codec::PITCH_MAX).contains(&n.pitch) {
            events.push(ScoreEvent { pitch: n.pitch, onset: whole(n.onset_s), duration: whole(n.offset_s) - whole(n.onset_s) });
            source.push(i);
        }
    }
    let markings = ScoreMarkings {
        time_signatures: track
            .time_signatures
            .iter()
            .map(|t| TimeSignature { onset: t.tick as f64 / per_whole, numerator: t.numerator, denominator: t.denominator })
            .collect(),
        tempos: track.tempo_changes.iter().map(|c| (c.tick as f64 / per_whole, map.bpm_at(c.tick))).collect(),
        dynamics: Vec::new(),
    };
    (events, source, markings)
}

fn perf_event(n: &MidiNoteEvent, sustain: f64) -> PerfEvent {
    PerfEvent { onset_s: n.onset_s, offset_s: n.offset_s, sustain_offset_s: n.onset_s + sustain, velocity: n.velocity }
}

/// Reads a score from a MIDI file. The performance half of the result is
/// the file played as written.
pub fn score_from_midi(track: &PerformanceTrack) -> Result<AlignedSequence, PipelineError> {
    let (events, source, markings) = score_events_from_midi(track);
    if events.is_empty() {
        return Err(PipelineError::Data("no notes in the piano range".into()));
    }
    let sustained = resolve_sustain(track, DEFAULT_PEDAL_THRESHOLD);
    let pairs: Vec<NotePair> = events
        .iter()
        .zip(&source)
        .map(|(s, &i)| NotePair { score: *s, perf: Some(perf_event(&track.notes[i], sustained[i].1)) })
        .collect();
    Ok(encode_sequence(&pairs, &markings)?)
}

/// Pairs a score MIDI file with a performance of it by matching each score
/// note, in order, to the earliest unused performed note of the same pitch.
/// Unmatched score notes are interpolated; extra performed notes are
/// dropped. This is a stand-in for a real score-performance aligner and
/// only suits performances without large deviations from the score.
pub fn pair_by_pitch(
    score: &PerformanceTrack,
    perf: &PerformanceTrack,
) -> Result<(AlignedSequence, CleanupReport), PipelineError> {
    let (events, _, markings) = score_events_from_midi(score);
    if events.is_empty() {
        return Err(PipelineError::Data("no notes in the piano range".into()));
    }
    let sustained = resolve_sustain(perf, DEFAULT_PEDAL_THRESHOLD);
    let mut used = vec![false; perf.notes.len()];
    let pairs: Vec<NotePair> = events
        .iter()
        .map(|s| {
            let hit = (0..perf.notes.len()).find(|&j| !used[j] && perf.notes[j].pitch == s.pitch);
            let perf_note = hit.map(|j| {
                used[j] = true;
                perf_event(&perf.notes[j], sustained[j].1)
            });
            NotePair { score: *s, perf: perf_note }
        })
        .collect();
    Ok(clean_alignment(&pairs, &markings)?)
}
