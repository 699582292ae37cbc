//! Control inputs: score markings, performed beat tempo and bar-level text
//! embeddings, plus dropout for classifier-free guidance.

use rand::Rng;
use symupe_tensor::Array;
use thiserror::Error;

use crate::codec::{AlignedSequence, Feature, Vocab};

pub const EMOTIONS: [&str; 33] = [
    "anger",
    "anxious",
    "calm",
    "capricious",
    "comical",
    "decisive",
    "depressed",
    "dreamy",
    "elegant",
    "enthusiastic",
    "fierce",
    "gentle",
    "happy",
    "harsh",
    "heavy",
    "impetuous",
    "important",
    "kind",
    "longing",
    "marching",
    "melancholic",
    "melodious",
    "mysterious",
    "nostalgia",
    "passionately",
    "rapidly",
    "reflective",
    "religious",
    "sad",
    "sincere",
    "sleepy",
    "solemn",
    "triumphantly",
];

/// Sentence templates; `{}` is replaced by the emotion label.
pub const TEMPLATES: [&str; 16] = [
    "{}",
    "{} emotion",
    "{} music",
    "{} music performance",
    "{} music emotion",
    "Musical mood: {}",
    "Play music in a {} mood",
    "Perform music in a {} mood",
    "Play {} music",
    "Perform {} music",
    "Music described as {}",
    "Described as {}",
    "Music classified as {}",
    "Classified as {}",
    "Music performance with a {} emotion",
    "Music performed {}",
];

pub const EMB_HEADER: &str = "SYMUPE-EMB v1";
pub const DEFAULT_DROP_PROB: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditioningError {
    #[error("invalid probabilities: {0}")]
    Validation(String),
    #[error("embedding file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("length mismatch: {0}")]
    Shape(String),
}

/// Every template filled with `label`.
pub fn template_sentences(label: &str) -> Vec<String> {
    TEMPLATES.iter().map(|t| t.replace("{}", label)).collect()
}

/// Labelled embedding vectors as read from an embedding file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingFile {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl EmbeddingFile {
    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.1.len())
    }

    pub fn get(&self, label: &str) -> Option<&[f64]> {
        self.entries.iter().find(|(l, _)| l == label).map(|(_, v)| v.as_slice())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{EMB_HEADER}\n");
        for (label, v) in &self.entries {
            out.push_str(label);
            out.push('\t');
            let nums: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            out.push_str(&nums.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ConditioningError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == EMB_HEADER => {}
            _ => return Err(ConditioningError::Format { line: 1, message: format!("expected {EMB_HEADER:?}") }),
        }
        let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ConditioningError::Format { line: n + 1, message };
            let (label, nums) = line.split_once('\t').ok_or_else(|| err("missing tab after label".into()))?;
            let v = nums
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(err("non-finite value".into()));
            }
            if let Some(d) = entries.first().map(|e| e.1.len()) {
                if v.len() != d {
                    return Err(err(format!("expected {d} values, got {}", v.len())));
                }
            }
            entries.push((label.to_string(), v));
        }
        Ok(Self { entries })
    }
}

/// Template-averaged embedding per emotion label, rows in [`EMOTIONS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionTable {
    pub rows: Array,
}

impl EmotionTable {
    pub fn from_file(file: &EmbeddingFile) -> Result<Self, ConditioningError> {
        let dim = file.dim().ok_or_else(|| ConditioningError::Shape("empty embedding file".into()))?;
        let mut data = Vec::with_capacity(EMOTIONS.len() * dim);
        for label in EMOTIONS {
            let row = file.get(label).ok_or_else(|| ConditioningError::UnknownLabel(label.into()))?;
            data.extend_from_slice(row);
        }
        Ok(Self { rows: Array::from_vec(&[EMOTIONS.len(), dim], data).expect("rows checked") })
    }

    /// Averages per-template sentence embeddings into one row per label.
    /// `sentences` must hold an entry for every filled template.
    pub fn from_sentences(sentences: &EmbeddingFile) -> Result<Self, ConditioningError> {
        let dim = sentences.dim().ok_or_else(|| ConditioningError::Shape("empty embedding file".into()))?;
        let mut data = vec![0.0; EMOTIONS.len() * dim];
        for (r, label) in EMOTIONS.iter().enumerate() {
            for s in template_sentences(label) {
                let v = sentences.get(&s).ok_or(ConditioningError::UnknownLabel(s))?;
                for (acc, x) in data[r * dim..(r + 1) * dim].iter_mut().zip(v) {
                    *acc += x / TEMPLATES.len() as f64;
                }
            }
        }
        Ok(Self { rows: Array::from_vec(&[EMOTIONS.len(), dim], data).expect("rows checked") })
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn to_file(&self) -> EmbeddingFile {
        EmbeddingFile {
            entries: EMOTIONS.iter().enumerate().map(|(i, l)| (l.to_string(), self.rows.row(i).to_vec())).collect(),
        }
    }

    pub fn index_of(label: &str) -> Option<usize> {
        EMOTIONS.iter().position(|&e| e == label)
    }
}

/// Probability-weighted sum of the emotion rows.
pub fn emotion_weighted_embedding(probs: &[f64], table: &EmotionTable) -> Result<Vec<f64>, ConditioningError> {
    if probs.len() != EMOTIONS.len() {
        return Err(ConditioningError::Validation(format!("expected {} probabilities, got {}", EMOTIONS.len(), probs.len())));
    }
    if probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(ConditioningError::Validation("probabilities must be non-negative".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(ConditioningError::Validation(format!("probabilities sum to {total}")));
    }
    let mut out = vec![0.0; table.dim()];
    for (r, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(table.rows.row(r)) {
            *o += p * x;
        }
    }
    Ok(out)
}

/// Which control channels are replaced by their null embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropFlags {
    pub score: bool,
    pub perf: bool,
    pub text: bool,
}

impl DropFlags {
    pub const ALL: DropFlags = DropFlags { score: true, perf: true, text: true };
}

/// Per-note text embeddings; notes without one use the null embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRows {
    pub emb: Array,
    pub present: Vec<bool>,
}

/// The control `c` for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInputs {
    pub score_tempo: Vec<u32>,
    pub score_velocity: Vec<u32>,
    pub perf_tempo: Vec<u32>,
    pub text: Option<TextRows>,
    pub drop: DropFlags,
}

impl ControlInputs {
    pub fn len(&self) -> usize {
        self.score_tempo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score_tempo.is_empty()
    }

    /// Score and performance tokens of an aligned sequence, no text.
    pub fn from_sequence(seq: &AlignedSequence, vocab: &Vocab) -> Self {
        let tok = |f: Feature, v: f64| vocab.quantizer(f).tokenize(v).0;
        Self {
            score_tempo: seq.score_tempo_bpm.iter().map(|&b| tok(Feature::ScoreTempo, b)).collect(),
            score_velocity: seq.score_velocity.iter().map(|&v| tok(Feature::ScoreVelocity, f64::from(v))).collect(),
            perf_tempo: beat_tempo_tokens(seq, vocab),
            text: None,
            drop: DropFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConditioningError> {
        let n = self.len();
        let text_ok = self.text.as_ref().is_none_or(|t| t.emb.rows() == n && t.present.len() == n);
        if self.score_velocity.len() != n || self.perf_tempo.len() != n || !text_ok {
            return Err(ConditioningError::Shape("control channels differ in length".into()));
        }
        Ok(())
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            score_tempo: self.score_tempo[start..end].to_vec(),
            score_velocity: self.score_velocity[start..end].to_vec(),
            perf_tempo: self.perf_tempo[start..end].to_vec(),
            text: self.text.as_ref().map(|t| TextRows {
                emb: Array::from_rows(&(start..end).map(|i| t.emb.row(i)).collect::<Vec<_>>(), t.emb.cols())
                    .expect("row width"),
                present: t.present[start..end].to_vec(),
            }),
            drop: self.drop,
        }
    }
}

/// Drops each channel independently with probability `p`; values are
/// never touched, only the flags.
pub fn cfg_dropout<R: Rng + ?Sized>(inputs: &ControlInputs, rng: &mut R, p: f64) -> ControlInputs {
    let mut out = inputs.clone();
    out.drop = DropFlags { score: rng.random_bool(p), perf: rng.random_bool(p), text: rng.random_bool(p) };
    out
}

/// Performed tempo tokens per note from the local one-beat-window tempo.
pub fn beat_tempo_tokens(seq: &AlignedSequence, vocab: &Vocab) -> Vec<u32> {
    let q = vocab.quantizer(Feature::PerfTempo);
    seq.beat_tempo_bpm.iter().map(|&b| q.tokenize(b).0).collect()
}

/// What a prompt line assigns to its bars.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptValue {
    Label(String),
    Probs(Vec<f64>),
    Embedding(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptLine {
    pub bar_start: u32,
    pub bar_end: u32,
    pub value: PromptValue,
}

/// Parses `bar_start bar_end value` lines with an inclusive bar range.
/// The value is `probs p1 .. p33`, `emb x1 .. xd`, or a label.
pub fn parse_prompt_file(text: &str) -> Result<Vec<PromptLine>, ConditioningError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| ConditioningError::Format { line: n + 1, message };
        let mut parts = line.splitn(3, char::is_whitespace);
        let mut bar = || -> Result<u32, ConditioningError> {
            let s = parts.next().ok_or_else(|| err("missing bar range".into()))?;
            s.parse().map_err(|e| err(format!("{s:?}: {e}")))
        };
        let (bar_start, bar_end) = (bar()?, bar()?);
        if bar_end < bar_start {
            return Err(err("bar_end before bar_start".into()));
        }
        let rest = parts.next().map(str::trim).filter(|r| !r.is_empty()).ok_or_else(|| err("missing value".into()))?;
        let nums = |s: &str| {
            s.split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|e| err(format!("{x:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()
        };
        let value = if let Some(p) = rest.strip_prefix("probs ") {
            PromptValue::Probs(nums(p)?)
        } else if let Some(p) = rest.strip_prefix("emb ") {
            PromptValue::Embedding(nums(p)?)
        } else {
            PromptValue::Label(rest.to_string())
        };
        out.push(PromptLine { bar_start, bar_end, value });
    }
    Ok(out)
}

/// Resolves prompt lines into per-note text rows for the bars of `seq`.
///
/// Labels are looked up among the emotions first, then in `extra`.
pub fn prompt_text_rows(
    seq: &AlignedSequence,
    prompts: &[PromptLine],
    table: &EmotionTable,
    extra: Option<&EmbeddingFile>,
) -> Result<TextRows, ConditioningError> {
    let dim = table.dim();
    let resolve = |v: &PromptValue| -> Result<Vec<f64>, ConditioningError> {
        let out = match v {
            PromptValue::Probs(p) => emotion_weighted_embedding(p, table)?,
            PromptValue::Embedding(e) => e.clone(),
            PromptValue::Label(l) => match EmotionTable::index_of(l) {
                Some(i) => table.rows.row(i).to_vec(),
                None => extra.and_then(|f| f.get(l)).map(<[f64]>::to_vec).ok_or_else(|| ConditioningError::UnknownLabel(l.clone()))?,
            },
        };
        if out.len() != dim {
            return Err(ConditioningError::Shape(format!("prompt embedding has {} values, expected {dim}", out.len())));
        }
        Ok(out)
    };
    let resolved = prompts.iter().map(|p| resolve(&p.value)).collect::<Result<Vec<_>, _>>()?;
    let mut emb = Array::zeros(&[seq.len(), dim]);
    let mut present = vec![false; seq.len()];
    for (i, note) in seq.score.iter().enumerate() {
        // later lines override earlier ones
        if let Some(k) = prompts.iter().rposition(|p| (p.bar_start..=p.bar_end).contains(&note.bar_index)) {
            emb.row_mut(i).copy_from_slice(&resolved[k]);
            present[i] = true;
        }
    }
    Ok(TextRows { emb, present })
}
