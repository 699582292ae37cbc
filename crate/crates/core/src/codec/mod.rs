//! Score/performance note features and their serialized forms.
//!
//! Every note carries four score features (pitch, position in bar, shift
//! from the previous onset, notated duration; all timing in whole notes)
//! and four performance features (velocity, time shift from the previous
//! note, pressed duration and pedal-extended duration; all timing in
//! seconds). Notes are ordered by score onset, then pitch.

mod cleanup;
mod textio;
pub mod tokenizer;

use thiserror::Error;

pub use cleanup::{clean_alignment, CleanupReport, DroppedNote};
pub use textio::{read_aligned, write_aligned, ALIGN_HEADER};
pub use tokenizer::{Feature, FeatureSpec, Quantizer, Scheme, TokenizedNote, TokenizerConfig, Vocab};

pub const PITCH_MIN: u8 = 21;
pub const PITCH_MAX: u8 = 108;
/// Grid steps per whole note for positions and score timing.
pub const TICKS_PER_WHOLE: f64 = 96.0;
pub const DEFAULT_TEMPO_BPM: f64 = 120.0;
pub const DEFAULT_SCORE_VELOCITY: u8 = 64;

/// Score onsets closer than this (in whole notes) form one chord.
pub(crate) const ONSET_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("pitch {pitch} of note {index} outside [{PITCH_MIN}, {PITCH_MAX}]")]
    Range { index: usize, pitch: u8 },
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("cannot decode token {id} for {feature:?}: {reason}")]
    Decode { feature: Feature, id: u32, reason: &'static str },
    #[error("tokenizer config: {0}")]
    Config(String),
    #[error("align file line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Notated note, timing in whole notes from the start of the piece.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEvent {
    pub pitch: u8,
    pub onset: f64,
    pub duration: f64,
}

/// Performed note, timing in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    /// Release time including the sustain pedal; never before `offset_s`.
    pub sustain_offset_s: f64,
    pub velocity: u8,
}

/// A score note with its matched performance note, or `None` when the
/// aligner marked it as missing from the performance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotePair {
    pub score: ScoreEvent,
    pub perf: Option<PerfEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSignature {
    /// Start in whole notes.
    pub onset: f64,
    pub numerator: u8,
    pub denominator: u8,
}

impl TimeSignature {
    pub fn bar_length(&self) -> f64 {
        f64::from(self.numerator) / f64::from(self.denominator)
    }

    pub fn beat_length(&self) -> f64 {
        1.0 / f64::from(self.denominator)
    }
}

/// Time signatures and performance direction markings of a score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreMarkings {
    pub time_signatures: Vec<TimeSignature>,
    /// (onset in whole notes, quarter-note BPM)
    pub tempos: Vec<(f64, f64)>,
    /// (onset in whole notes, MIDI velocity)
    pub dynamics: Vec<(f64, u8)>,
}

impl ScoreMarkings {
    pub fn tempo_at(&self, onset: f64) -> f64 {
        last_at(&self.tempos, onset).unwrap_or(DEFAULT_TEMPO_BPM)
    }

    pub fn velocity_at(&self, onset: f64) -> u8 {
        last_at(&self.dynamics, onset).unwrap_or(DEFAULT_SCORE_VELOCITY)
    }

    /// (bar index, beat index, position in bar) for a score onset.
    pub fn locate(&self, onset: f64) -> (u32, u32, f64) {
        let mut sigs = self.time_signatures.clone();
        sigs.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        if sigs.first().is_none_or(|s| s.onset > ONSET_EPS) {
            sigs.insert(0, TimeSignature { onset: 0.0, numerator: 4, denominator: 4 });
        }
        let (mut bars, mut beats) = (0u32, 0u32);
        for (k, sig) in sigs.iter().enumerate() {
            let end = sigs.get(k + 1).map_or(f64::INFINITY, |s| s.onset);
            if onset < end - ONSET_EPS || k + 1 == sigs.len() {
                let rel = (onset - sig.onset).max(0.0);
                let bar = (rel / sig.bar_length() + ONSET_EPS).floor();
                let beat = (rel / sig.beat_length() + ONSET_EPS).floor();
                let pos = (rel - bar * sig.bar_length()).max(0.0);
                return (bars + bar as u32, beats + beat as u32, if pos < ONSET_EPS { 0.0 } else { pos });
            }
            let span = end - sig.onset;
            bars += (span / sig.bar_length() - ONSET_EPS).ceil() as u32;
            beats += (span / sig.beat_length() - ONSET_EPS).ceil() as u32;
        }
        unreachable!("last time signature always matches")
    }
}

fn last_at<T: Copy>(marks: &[(f64, T)], onset: f64) -> Option<T> {
    marks
        .iter()
        .filter(|(t, _)| *t <= onset + ONSET_EPS)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|&(_, v)| v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreNote {
    pub pitch: u8,
    /// Absolute onset in whole notes.
    pub onset: f64,
    /// Position inside the bar, whole notes.
    pub position: f64,
    /// Gap to the previous distinct onset; zero for all but the first
    /// note of a chord.
    pub position_shift: f64,
    pub duration: f64,
    pub bar_index: u32,
    pub beat_index: u32,
    pub is_downbeat: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfNote {
    pub velocity: u8,
    /// Onset gap to the previous note in sequence order; may be negative.
    pub time_shift: f64,
    pub time_duration: f64,
    pub time_duration_sustain: f64,
    /// Filled in by alignment cleanup rather than performed.
    pub interpolated: bool,
}

/// Parallel score and performance notes plus per-note control values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignedSequence {
    pub score: Vec<ScoreNote>,
    pub perf: Vec<PerfNote>,
    /// Tempo marking in effect at each note, quarter-note BPM.
    pub score_tempo_bpm: Vec<f64>,
    /// Dynamic marking in effect at each note.
    pub score_velocity: Vec<u8>,
    /// Local performed tempo at each note's onset, quarter-note BPM.
    pub beat_tempo_bpm: Vec<f64>,
}

impl AlignedSequence {
    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let n = self.score.len();
        if [self.perf.len(), self.score_tempo_bpm.len(), self.score_velocity.len(), self.beat_tempo_bpm.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(CodecError::Invalid("per-note arrays differ in length".into()));
        }
        for (i, (s, p)) in self.score.iter().zip(&self.perf).enumerate() {
            if !(PITCH_MIN..=PITCH_MAX).contains(&s.pitch) {
                return Err(CodecError::Range { index: i, pitch: s.pitch });
            }
            if p.velocity > 127 {
                return Err(CodecError::Invalid(format!("note {i}: velocity {}", p.velocity)));
            }
            if !(p.time_duration >= 0.0 && p.time_duration_sustain >= p.time_duration) {
                return Err(CodecError::Invalid(format!(
                    "note {i}: durations {} / {} violate 0 <= pressed <= sustained",
                    p.time_duration, p.time_duration_sustain
                )));
            }
            if i > 0 {
                let prev = &self.score[i - 1];
                let chord = (s.onset - prev.onset).abs() < ONSET_EPS;
                if s.onset < prev.onset - ONSET_EPS || (chord && s.pitch < prev.pitch) {
                    return Err(CodecError::Invalid(format!("note {i} out of score order")));
                }
            }
        }
        Ok(())
    }

    /// Absolute performance onsets (cumulative time shifts).
    pub fn perf_onsets(&self) -> Vec<f64> {
        self.perf
            .iter()
            .scan(0.0, |t, p| {
                *t += p.time_shift;
                Some(*t)
            })
            .collect()
    }

    /// Sub-sequence `[start, end)`; the first note keeps its original shifts.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            score: self.score[start..end].to_vec(),
            perf: self.perf[start..end].to_vec(),
            score_tempo_bpm: self.score_tempo_bpm[start..end].to_vec(),
            score_velocity: self.score_velocity[start..end].to_vec(),
            beat_tempo_bpm: self.beat_tempo_bpm[start..end].to_vec(),
        }
    }

    /// Indices of the first note of each distinct score onset.
    pub fn onset_groups(&self) -> Vec<std::ops::Range<usize>> {
        let mut groups = Vec::new();
        let mut start = 0;
        for i in 1..=self.score.len() {
            if i == self.score.len() || (self.score[i].onset - self.score[start].onset).abs() >= ONSET_EPS {
                groups.push(start..i);
                start = i;
            }
        }
        groups
    }
}

/// Encodes matched score/performance pairs into an ordered feature sequence.
///
/// Every pair must carry a performance note; use [`clean_alignment`] when
/// some are missing.
pub fn encode_sequence(pairs: &[NotePair], markings: &ScoreMarkings) -> Result<AlignedSequence, CodecError> {
    let flags = vec![false; pairs.len()];
    encode_with_flags(pairs, &flags, markings)
}

pub(crate) fn encode_with_flags(
    pairs: &[NotePair],
    interpolated: &[bool],
    markings: &ScoreMarkings,
) -> Result<AlignedSequence, CodecError> {
    for (i, p) in pairs.iter().enumerate() {
        if !(PITCH_MIN..=PITCH_MAX).contains(&p.score.pitch) {
            return Err(CodecError::Range { index: i, pitch: p.score.pitch });
        }
        if p.perf.is_none() {
            return Err(CodecError::Invalid(format!("note {i} has no performance match")));
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&pairs[a].score, &pairs[b].score);
        if (x.onset - y.onset).abs() < ONSET_EPS {
            x.pitch.cmp(&y.pitch)
        } else {
            x.onset.total_cmp(&y.onset)
        }
    });

    let mut seq = AlignedSequence::default();
    let mut prev_onset = 0.0;
    let mut prev_perf = 0.0;
    for (k, &i) in order.iter().enumerate() {
        let s = pairs[i].score;
        let p = pairs[i].perf.expect("checked above");
        let new_onset = k == 0 || (s.onset - prev_onset).abs() >= ONSET_EPS;
        let position_shift = if new_onset { (s.onset - prev_onset).max(0.0) } else { 0.0 };
        if new_onset {
            prev_onset = s.onset;
        }
        let (bar_index, beat_index, position) = markings.locate(s.onset);
        let duration = (p.offset_s - p.onset_s).max(0.0);
        seq.score.push(ScoreNote {
            pitch: s.pitch,
            onset: s.onset,
            position,
            position_shift,
            duration: s.duration,
            bar_index,
            beat_index,
            is_downbeat: position == 0.0,
        });
        seq.perf.push(PerfNote {
            velocity: p.velocity.min(127),
            time_shift: p.onset_s - prev_perf,
            time_duration: duration,
            time_duration_sustain: (p.sustain_offset_s - p.onset_s).max(duration),
            interpolated: interpolated[i],
        });
        prev_perf = p.onset_s;
        seq.score_tempo_bpm.push(markings.tempo_at(s.onset));
        seq.score_velocity.push(markings.velocity_at(s.onset));
    }
    seq.beat_tempo_bpm = local_beat_tempo(&seq);
    Ok(seq)
}

/// Quarter-note BPM performed around each onset.
///
/// For an onset at score time `s` the tempo is measured between the last
/// onset at or before `s - beat/2` and the first at or after `s + beat/2`
/// (the sequence ends when none exist), i.e. over a centered window of one
/// quarter-note beat. A lone onset, or a window with no performed time,
/// falls back to the score tempo marking.
pub fn local_beat_tempo(seq: &AlignedSequence) -> Vec<f64> {
    let groups = seq.onset_groups();
    let onsets = seq.perf_onsets();
    let score_t: Vec<f64> = groups.iter().map(|g| seq.score[g.start].onset).collect();
    let perf_t: Vec<f64> =
        groups.iter().map(|g| onsets[g.clone()].iter().sum::<f64>() / g.len() as f64).collect();
    let half = 0.125;
    let mut out = vec![0.0; seq.len()];
    for (gi, g) in groups.iter().enumerate() {
        let s = score_t[gi];
        let a = score_t.partition_point(|&x| x <= s - half + ONSET_EPS).saturating_sub(1).min(gi);
        let b = score_t.partition_point(|&x| x < s + half - ONSET_EPS).max(gi).min(groups.len() - 1);
        let fallback = seq.score_tempo_bpm[g.start];
        let bpm = if a == b {
            fallback
        } else {
            let dp = perf_t[b] - perf_t[a];
            let ds = score_t[b] - score_t[a];
            if dp > 1e-6 {
                ds * 4.0 * 60.0 / dp
            } else {
                fallback
            }
        };
        out[g.clone()].fill(bpm);
    }
    out
}

/// Normalized score features `[pitch, position, position_shift, duration]`.
pub fn normalize_score(note: &ScoreNote) -> [f64; 4] {
    [
        (f64::from(note.pitch) - f64::from(PITCH_MIN)) / f64::from(PITCH_MAX - PITCH_MIN),
        note.position,
        note.position_shift,
        note.duration,
    ]
}

/// Normalized performance features
/// `[velocity, time_shift, time_duration, time_duration_sustain]`.
pub fn normalize_perf(note: &PerfNote) -> [f64; 4] {
    [f64::from(note.velocity) / 127.0, note.time_shift, note.time_duration, note.time_duration_sustain]
}

/// Real-valued model inputs for a sequence: (score rows, performance rows).
pub fn normalize(seq: &AlignedSequence) -> (Vec<[f64; 4]>, Vec<[f64; 4]>) {
    (seq.score.iter().map(normalize_score).collect(), seq.perf.iter().map(normalize_perf).collect())
}

/// Inverse pitch normalization; the flag is set when the value was clamped.
pub fn denormalize_pitch(v: f64) -> (u8, bool) {
    let raw = (v * f64::from(PITCH_MAX - PITCH_MIN) + f64::from(PITCH_MIN)).round();
    clamp_int(raw, f64::from(PITCH_MIN), f64::from(PITCH_MAX))
}

pub fn denormalize_velocity(v: f64) -> (u8, bool) {
    clamp_int((v * 127.0).round(), 0.0, 127.0)
}

fn clamp_int(raw: f64, lo: f64, hi: f64) -> (u8, bool) {
    if raw.is_nan() {
        return (lo as u8, true);
    }
    let c = raw.clamp(lo, hi);
    (c as u8, c != raw)
}

/// Converts a normalized performance row back to a note, keeping
/// `0 <= pressed <= sustained`. Returns the number of clamped values.
pub fn denormalize_perf(row: &[f64; 4], interpolated: bool) -> (PerfNote, usize) {
    let (velocity, mut clamped) = denormalize_velocity(row[0]);
    let mut clamped = usize::from(std::mem::take(&mut clamped));
    let time_duration = if row[2] < 0.0 {
        clamped += 1;
        0.0
    } else {
        row[2]
    };
    let time_duration_sustain = if row[3] < time_duration {
        clamped += 1;
        time_duration
    } else {
        row[3]
    };
    (PerfNote { velocity, time_shift: row[1], time_duration, time_duration_sustain, interpolated }, clamped)
}
