//! Temporal masks selecting which notes' performance features to predict.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::codec::ScoreNote;

pub const MIN_RATIO: f64 = 0.1;
pub const MAX_RATIO: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("cannot mask an empty sequence")]
    EmptySequence,
    #[error("mask ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("bad mask string: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    RandomNotes,
    Beats,
    Bars,
    Segment,
    EndOfSequence,
    Full,
}

impl Strategy {
    pub const PARTIAL: [Strategy; 5] =
        [Strategy::RandomNotes, Strategy::Beats, Strategy::Bars, Strategy::Segment, Strategy::EndOfSequence];
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// `true` marks a note whose performance is predicted.
    pub mask: Vec<bool>,
    pub strategy: Strategy,
    pub ratio: f64,
}

impl MaskSpec {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `0/1` string, one character per note.
    pub fn to_bits(&self) -> String {
        bits(&self.mask)
    }
}

pub fn bits(mask: &[bool]) -> String {
    mask.iter().map(|&m| if m { '1' } else { '0' }).collect()
}

pub fn parse_bits(s: &str) -> Result<Vec<bool>, MaskError> {
    s.trim()
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(MaskError::Parse(format!("unexpected character {c:?}"))),
        })
        .collect()
}

/// Uniform draw from `[MIN_RATIO, MAX_RATIO]`.
pub fn sample_ratio<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(MIN_RATIO..=MAX_RATIO)
}

/// Number of notes masked by count-based strategies: `round(ratio * n)`
/// kept inside `[1, n - 1]` so both sides are non-empty when `n >= 2`.
fn target_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, (n - 1).max(1))
}

pub fn sample_mask<R: Rng + ?Sized>(
    strategy: Strategy,
    score: &[ScoreNote],
    ratio: f64,
    rng: &mut R,
) -> Result<MaskSpec, MaskError> {
    let n = score.len();
    if n == 0 {
        return Err(MaskError::EmptySequence);
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(MaskError::InvalidRatio(ratio));
    }
    let mut mask = vec![false; n];
    match strategy {
        Strategy::Full => mask.fill(true),
        Strategy::RandomNotes => {
            for i in index::sample(rng, n, target_count(n, ratio)) {
                mask[i] = true;
            }
        }
        Strategy::Segment => segment(&mut mask, ratio, rng),
        Strategy::EndOfSequence => {
            let k = target_count(n, ratio);
            mask[n - k..].fill(true);
        }
        Strategy::Beats | Strategy::Bars => {
            let unit = |s: &ScoreNote| if strategy == Strategy::Bars { s.bar_index } else { s.beat_index };
            let mut units: Vec<u32> = score.iter().map(unit).collect();
            units.sort_unstable();
            units.dedup();
            if units.len() < 2 {
                segment(&mut mask, ratio, rng);
            } else {
                units.shuffle(rng);
                let target = ratio * n as f64 - 1e-9;
                let mut covered = 0usize;
                // never take the last unit, so some note stays visible
                for &u in &units[..units.len() - 1] {
                    if covered as f64 >= target {
                        break;
                    }
                    for (m, s) in mask.iter_mut().zip(score) {
                        if unit(s) == u {
                            *m = true;
                            covered += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(MaskSpec { mask, strategy, ratio })
}

fn segment<R: Rng + ?Sized>(mask: &mut [bool], ratio: f64, rng: &mut R) {
    let n = mask.len();
    let k = target_count(n, ratio);
    let start = rng.random_range(0..=n - k);
    mask[start..start + k].fill(true);
}

/// Strategies for one batch: `b / 2` sequences fully masked (plus one more
/// with probability 1/2 when `b` is odd), the rest uniform over the partial
/// strategies, in shuffled order.
pub fn batch_mask_plan<R: Rng + ?Sized>(batch_size: usize, rng: &mut R) -> Vec<Strategy> {
    let mut n_full = batch_size / 2;
    if batch_size % 2 == 1 && rng.random_bool(0.5) {
        n_full += 1;
    }
    let mut plan = vec![Strategy::Full; n_full];
    for _ in n_full..batch_size {
        plan.push(Strategy::PARTIAL[rng.random_range(0..Strategy::PARTIAL.len())]);
    }
    plan.shuffle(rng);
    plan
}
