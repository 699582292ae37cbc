//! Training-time data augmentation.

use rand::Rng;

use crate::codec::{local_beat_tempo, AlignedSequence, PITCH_MAX, PITCH_MIN};

pub const MAX_PITCH_SHIFT: i32 = 6;
pub const MAX_VELOCITY_SHIFT: i32 = 6;
pub const MAX_TEMPO_CHANGE: f64 = 0.05;
pub const DEFAULT_APPLY_PROB: f64 = 0.5;

/// One concrete augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    /// Semitones added to score and performance pitch.
    pub pitch_shift: i32,
    /// MIDI steps added to performed velocity.
    pub velocity_shift: i32,
    /// Multiplies every performed time value.
    pub tempo_factor: f64,
    pub apply_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { pitch_shift: 0, velocity_shift: 0, tempo_factor: 1.0, apply_prob: DEFAULT_APPLY_PROB }
    }
}

impl AugmentSpec {
    /// Uniform draw over the allowed shift and tempo ranges.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            pitch_shift: rng.random_range(-MAX_PITCH_SHIFT..=MAX_PITCH_SHIFT),
            velocity_shift: rng.random_range(-MAX_VELOCITY_SHIFT..=MAX_VELOCITY_SHIFT),
            tempo_factor: rng.random_range(1.0 - MAX_TEMPO_CHANGE..=1.0 + MAX_TEMPO_CHANGE),
            apply_prob: DEFAULT_APPLY_PROB,
        }
    }
}

/// Applies `spec` unconditionally. A pitch shift that would leave the piano
/// range is reduced to the largest legal shift in the same direction.
pub fn apply_augment(seq: &AlignedSequence, spec: &AugmentSpec) -> AlignedSequence {
    let mut out = seq.clone();
    if let (Some(lo), Some(hi)) = (seq.score.iter().map(|n| n.pitch).min(), seq.score.iter().map(|n| n.pitch).max()) {
        let shift = spec.pitch_shift.clamp(i32::from(PITCH_MIN) - i32::from(lo), i32::from(PITCH_MAX) - i32::from(hi));
        for n in &mut out.score {
            n.pitch = (i32::from(n.pitch) + shift) as u8;
        }
    }
    let f = spec.tempo_factor;
    for p in &mut out.perf {
        p.velocity = (i32::from(p.velocity) + spec.velocity_shift).clamp(1, 127) as u8;
        p.time_shift *= f;
        p.time_duration *= f;
        p.time_duration_sustain *= f;
    }
    if f != 1.0 {
        out.beat_tempo_bpm = local_beat_tempo(&out);
    }
    out
}

/// Applies `spec` with probability `spec.apply_prob`.
pub fn augment<R: Rng + ?Sized>(seq: &AlignedSequence, spec: &AugmentSpec, rng: &mut R) -> AlignedSequence {
    if rng.random_bool(spec.apply_prob.clamp(0.0, 1.0)) {
        apply_augment(seq, spec)
    } else {
        seq.clone()
    }
}
