//! Synthetic scores and rule-based expressive performances of them.
//!
//! Scores are four-bar phrases of a diatonic melody over a chordal
//! accompaniment in 4/4. Performances follow local rules tied to what the
//! score shows (beat position, register, note length) plus phrase-level
//! shaping and per-note noise, so the expressive curves are partly
//! predictable from the score.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{encode_sequence, AlignedSequence, NotePair, PerfEvent, ScoreEvent, ScoreMarkings, TimeSignature};
use crate::midi::{resolve_sustain_events, MidiNoteEvent, PedalEvent, DEFAULT_PEDAL_THRESHOLD};

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const BAR: f64 = 1.0;
const BEAT: f64 = 0.25;

/// Generator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthStyle {
    pub min_bars: usize,
    pub max_bars: usize,
    pub tempo_range: (f64, f64),
    /// Range of the piece-wide dynamic marking, MIDI velocity.
    pub dynamic_range: (u8, u8),
    /// Per-note velocity noise, MIDI steps.
    pub velocity_noise: f64,
    /// Per-note onset noise, seconds.
    pub timing_noise: f64,
    /// Probability that a bar is pedaled.
    pub pedal_prob: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        Self {
            min_bars: 8,
            max_bars: 16,
            tempo_range: (96.0, 120.0),
            dynamic_range: (60, 68),
            velocity_noise: 5.0,
            timing_noise: 0.008,
            pedal_prob: 0.6,
        }
    }
}

/// A generated score.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScore {
    pub notes: Vec<ScoreEvent>,
    /// Marks accompaniment notes; parallel to `notes`.
    pub accompaniment: Vec<bool>,
    pub markings: ScoreMarkings,
    pub bars: usize,
}

fn diatonic(tonic: i32, degree: i32) -> i32 {
    let (oct, step) = (degree.div_euclid(7), degree.rem_euclid(7));
    tonic + 12 * oct + MAJOR[step as usize]
}

pub fn synth_score<R: Rng + ?Sized>(style: &SynthStyle, rng: &mut R) -> SynthScore {
    let bars = rng.random_range(style.min_bars..=style.max_bars.max(style.min_bars));
    let tonic = 60 + rng.random_range(-3..=4);
    let bpm = rng.random_range(style.tempo_range.0..=style.tempo_range.1).round();
    let dynamic = rng.random_range(style.dynamic_range.0..=style.dynamic_range.1.max(style.dynamic_range.0));
    let mut notes = Vec::new();
    let mut accompaniment = Vec::new();
    let mut degree: i32 = rng.random_range(0..7);
    let rhythms: [&[f64]; 4] = [&[0.25, 0.25, 0.25, 0.25], &[0.125, 0.125, 0.25, 0.5], &[0.375, 0.125, 0.25, 0.25], &[0.5, 0.25, 0.125, 0.125]];
    for bar in 0..bars {
        let start = bar as f64 * BAR;
        let cadence = bar % 4 == 3;
        let pattern: &[f64] = if cadence { &[0.5, 0.5] } else { rhythms.choose(rng).expect("non-empty") };
        let mut t = start;
        for &d in pattern {
            degree = (degree + rng.random_range(-2..=2)).clamp(-2, 11);
            if cadence && (t - start).abs() < 1e-9 {
                degree = degree.clamp(0, 7);
            }
            let pitch = diatonic(tonic, degree).clamp(60, 96) as u8;
            notes.push(ScoreEvent { pitch, onset: t, duration: d });
            accompaniment.push(false);
            t += d;
        }
        // root-position triads on beats 1 and 3
        let root: i32 = [0, 3, 4, 0, 5, 3, 4, 0][bar % 8];
        for half in 0..2 {
            let onset = start + half as f64 * 0.5;
            for k in [0, 2, 4] {
                let pitch = diatonic(tonic - 24, root + k).clamp(33, 59) as u8;
                notes.push(ScoreEvent { pitch, onset, duration: 0.5 });
                accompaniment.push(true);
            }
        }
    }
    let markings = ScoreMarkings {
        time_signatures: vec![TimeSignature { onset: 0.0, numerator: 4, denominator: 4 }],
        tempos: vec![(0.0, bpm)],
        dynamics: vec![(0.0, dynamic)],
    };
    SynthScore { notes, accompaniment, markings, bars }
}

/// Local tempo stretch at a score onset: agogic lengthening on strong
/// beats, quicker offbeats and a ritardando into each cadence.
fn stretch(onset: f64, phrase_bar: usize) -> f64 {
    let pos = onset.rem_euclid(BAR);
    let beat = (pos / BEAT + 1e-9).floor() as usize;
    let offbeat = (pos / BEAT - beat as f64).abs() > 1e-6;
    let mut s = 1.0;
    if pos < 1e-9 {
        s += 0.12;
    } else if beat == 2 && !offbeat {
        s += 0.05;
    }
    if offbeat {
        s -= 0.06;
    }
    if phrase_bar == 3 {
        s += 0.25 * (pos / BAR);
    }
    s
}

/// Renders one expressive performance of `score`.
pub fn synth_performance<R: Rng + ?Sized>(score: &SynthScore, style: &SynthStyle, rng: &mut R) -> AlignedSequence {
    let bpm = score.markings.tempo_at(0.0);
    let whole = 4.0 * 60.0 / bpm;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let tempo_offset = 1.0 + 0.04 * unit.sample(rng);
    let level = f64::from(score.markings.velocity_at(0.0)) + 3.0 * unit.sample(rng);

    // performed time of each distinct onset
    let mut onsets: Vec<f64> = score.notes.iter().map(|n| n.onset).collect();
    onsets.sort_by(f64::total_cmp);
    onsets.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let mut times = Vec::with_capacity(onsets.len());
    let mut t = 0.0;
    let mut drift = 0.0;
    for (i, &o) in onsets.iter().enumerate() {
        times.push(t);
        if let Some(&next) = onsets.get(i + 1) {
            drift = 0.8 * drift + 0.02 * unit.sample(rng);
            let phrase_bar = ((o / BAR) as usize) % 4;
            t += (next - o) * whole * tempo_offset * (stretch(o, phrase_bar) + drift).max(0.5);
        }
    }
    let time_of = |onset: f64| times[onsets.partition_point(|&x| x < onset - 1e-9)];
    let end_time = times.last().copied().unwrap_or(0.0) + whole;

    // pedal down shortly after each pedaled bar line, up just before the next
    let mut pedals = Vec::new();
    for bar in 0..score.bars {
        if rng.random_bool(style.pedal_prob) {
            let a = time_of(bar as f64 * BAR);
            let b = if bar + 1 < score.bars { time_of((bar + 1) as f64 * BAR) } else { end_time };
            pedals.push(PedalEvent { time_s: a + 0.05, value: 100 });
            pedals.push(PedalEvent { time_s: (b - 0.03).max(a + 0.06), value: 0 });
        }
    }

    let mut events = Vec::with_capacity(score.notes.len());
    for (n, &acc) in score.notes.iter().zip(&score.accompaniment) {
        let pos = n.onset.rem_euclid(BAR);
        let phrase = (n.onset / (4.0 * BAR)).fract();
        let mut v = level + 4.0 * (std::f64::consts::PI * phrase).sin();
        v += if acc { -12.0 } else { 0.4 * (f64::from(n.pitch) - 72.0) };
        if pos < 1e-9 {
            v += 8.0;
        }
        v += 10.0 * (n.duration - 0.25);
        v += style.velocity_noise * unit.sample(rng);
        let velocity = v.round().clamp(1.0, 127.0) as u8;

        // melody leads the accompaniment slightly
        let lead = if acc { 0.0 } else { -0.015 };
        let onset_s = (time_of(n.onset) + lead + style.timing_noise * unit.sample(rng)).max(0.0);
        let span = time_of((n.onset + n.duration).min(onsets.last().copied().unwrap_or(0.0))).max(time_of(n.onset));
        let nominal = if n.onset + n.duration > onsets.last().copied().unwrap_or(0.0) + 1e-9 {
            n.duration * whole * tempo_offset
        } else {
            span - time_of(n.onset)
        };
        let legato = if acc { 0.7 } else { 0.9 };
        let dur = (nominal * legato * (1.0 + 0.08 * unit.sample(rng))).max(0.03);
        events.push(MidiNoteEvent { pitch: n.pitch, velocity, onset_s, offset_s: onset_s + dur, channel: 0 });
    }
    let sustained = resolve_sustain_events(&events, &pedals, DEFAULT_PEDAL_THRESHOLD);
    let pairs: Vec<NotePair> = score
        .notes
        .iter()
        .zip(&events)
        .zip(&sustained)
        .map(|((s, e), &(_, sus))| NotePair {
            score: *s,
            perf: Some(PerfEvent {
                onset_s: e.onset_s,
                offset_s: e.offset_s,
                sustain_offset_s: e.onset_s + sus,
                velocity: e.velocity,
            }),
        })
        .collect();
    encode_sequence(&pairs, &score.markings).expect("generated notes lie in the piano range")
}

/// A score with one performance, named for file output.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPiece {
    pub name: String,
    pub score: SynthScore,
    pub performance: AlignedSequence,
}

pub fn synth_dataset<R: Rng + ?Sized>(n_pieces: usize, style: &SynthStyle, rng: &mut R) -> Vec<SynthPiece> {
    (0..n_pieces)
        .map(|i| {
            let score = synth_score(style, rng);
            let performance = synth_performance(&score, style, rng);
            SynthPiece { name: format!("piece{i:03}"), score, performance }
        })
        .collect()
}
