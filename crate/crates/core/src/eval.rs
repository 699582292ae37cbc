//! Objective evaluation: expressive curves, correlation, KL divergence and
//! per-score aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{local_beat_tempo, AlignedSequence};

/// Fewest samples per side for a KL estimate.
pub const MIN_KL_SAMPLES: usize = 10;
pub const DEFAULT_MC_SAMPLES: usize = 4096;
/// Estimates below this are reported as suspicious Monte Carlo noise.
pub const KL_NOISE_FLOOR: f64 = -0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric not defined: {0}")]
    NotDefined(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
}

/// Expressive features of one performance. Entries that cannot be computed
/// for a note or onset pair are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpressiveCurves {
    /// Mean velocity per score onset.
    pub vel: Vec<f64>,
    /// Performed over nominal onset gap per consecutive onset pair.
    pub ioi: Vec<Option<f64>>,
    /// Per-note onset deviation from the chord mean over the local performed gap.
    pub od: Vec<Option<f64>>,
    /// Per-note performed over notated duration at the local tempo.
    pub art: Vec<Option<f64>>,
    pub art_s: Vec<Option<f64>>,
    /// Onset pairs whose score gap was not positive.
    pub skipped_ioi: usize,
}

fn nominal_seconds(whole_notes: f64, bpm: f64) -> f64 {
    whole_notes * 4.0 * 60.0 / bpm
}

pub fn extract_curves(seq: &AlignedSequence) -> ExpressiveCurves {
    let groups = seq.onset_groups();
    let onsets = seq.perf_onsets();
    let tempo = local_beat_tempo(seq);
    let mean_onset: Vec<f64> =
        groups.iter().map(|g| onsets[g.clone()].iter().sum::<f64>() / g.len() as f64).collect();
    let vel = groups
        .iter()
        .map(|g| seq.perf[g.clone()].iter().map(|p| f64::from(p.velocity)).sum::<f64>() / g.len() as f64)
        .collect();

    let mut ioi = Vec::with_capacity(groups.len().saturating_sub(1));
    let mut skipped_ioi = 0;
    for w in 0..groups.len().saturating_sub(1) {
        let (a, b) = (groups[w].start, groups[w + 1].start);
        let gap = nominal_seconds(seq.score[b].onset - seq.score[a].onset, seq.score_tempo_bpm[a]);
        if gap > 0.0 {
            ioi.push(Some((mean_onset[w + 1] - mean_onset[w]) / gap));
        } else {
            skipped_ioi += 1;
            ioi.push(None);
        }
    }

    let mut od = vec![None; seq.len()];
    for (gi, g) in groups.iter().enumerate() {
        let gap = if gi + 1 < groups.len() {
            mean_onset[gi + 1] - mean_onset[gi]
        } else if gi > 0 {
            mean_onset[gi] - mean_onset[gi - 1]
        } else {
            0.0
        };
        if gap > 0.0 {
            for i in g.clone() {
                od[i] = Some((onsets[i] - mean_onset[gi]) / gap);
            }
        }
    }

    let ratio = |i: usize, performed: f64| {
        let notated = nominal_seconds(seq.score[i].duration, tempo[i]);
        (notated > 0.0).then(|| performed / notated)
    };
    let art = (0..seq.len()).map(|i| ratio(i, seq.perf[i].time_duration)).collect();
    let art_s = (0..seq.len()).map(|i| ratio(i, seq.perf[i].time_duration_sustain)).collect();
    ExpressiveCurves { vel, ioi, od, art, art_s, skipped_ioi }
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Length(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricError::NotDefined(format!("{} points", a.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricError::NotDefined("zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson over the positions where both series are defined.
pub fn pearson_defined(a: &[Option<f64>], b: &[Option<f64>]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Length(a.len(), b.len()));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = a.iter().zip(b).filter_map(|(x, y)| Some(((*x)?, (*y)?))).unzip();
    pearson(&x, &y)
}

/// Gaussian kernel density estimate.
#[derive(Debug, Clone)]
pub struct Kde {
    sorted: Vec<f64>,
    pub bandwidth: f64,
    log_norm: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Kde {
    /// Silverman's rule `0.9 min(sd, IQR / 1.34) n^(-1/5)`, floored at
    /// 1e-3 of the data scale for degenerate samples.
    pub fn fit(samples: &[f64]) -> Result<Self, MetricError> {
        if samples.is_empty() || samples.iter().any(|x| !x.is_finite()) {
            return Err(MetricError::NotDefined("empty or non-finite samples".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let sd = if sorted.len() > 1 {
            (sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        let scale = if sd > 0.0 {
            sd
        } else {
            sorted.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1.0)
        };
        let bandwidth = (0.9 * spread * n.powf(-0.2)).max(1e-3 * scale);
        let log_norm = (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt()).ln();
        Ok(Self { sorted, bandwidth, log_norm })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        // kernels further than 12 bandwidths contribute below e^-72 of the nearest
        let reach = 12.0 * self.bandwidth;
        let lo = self.sorted.partition_point(|&s| s < x - reach);
        let hi = self.sorted.partition_point(|&s| s <= x + reach);
        let near = if lo < hi {
            &self.sorted[lo..hi]
        } else {
            let i = lo.min(self.sorted.len() - 1);
            let j = if i > 0 && (x - self.sorted[i - 1]).abs() < (self.sorted[i] - x).abs() { i - 1 } else { i };
            &self.sorted[j..=j]
        };
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        let exps: Vec<f64> = near.iter().map(|s| -(x - s) * (x - s) * inv).collect();
        let m = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + exps.iter().map(|e| (e - m).exp()).sum::<f64>().ln() - self.log_norm
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let i = rng.random_range(0..self.sorted.len());
        let z: f64 = rng.sample(StandardNormal);
        self.sorted[i] + self.bandwidth * z
    }
}

/// Monte Carlo estimate of KL(p || q) between kernel density fits.
pub fn kl_mc<R: Rng + ?Sized>(p: &[f64], q: &[f64], n_mc: usize, rng: &mut R) -> Result<f64, MetricError> {
    if p.len() < MIN_KL_SAMPLES || q.len() < MIN_KL_SAMPLES {
        return Err(MetricError::NotDefined(format!("{} and {} samples, need {MIN_KL_SAMPLES}", p.len(), q.len())));
    }
    if n_mc == 0 {
        return Err(MetricError::NotDefined("no Monte Carlo samples".into()));
    }
    let (kp, kq) = (Kde::fit(p)?, Kde::fit(q)?);
    let mut total = 0.0;
    for _ in 0..n_mc {
        let x = kp.sample(rng);
        total += kp.log_density(x) - kq.log_density(x);
    }
    let d = total / n_mc as f64;
    if d < KL_NOISE_FLOOR {
        log::warn!("KL estimate {d} below {KL_NOISE_FLOOR}");
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum CurveKind {
    Vel,
    Ioi,
    Od,
    Art,
    ArtS,
}

impl CurveKind {
    pub const ALL: [CurveKind; 5] = [CurveKind::Vel, CurveKind::Ioi, CurveKind::Od, CurveKind::Art, CurveKind::ArtS];

    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Vel => "Vel",
            CurveKind::Ioi => "IOI",
            CurveKind::Od => "OD",
            CurveKind::Art => "Art",
            CurveKind::ArtS => "ArtS",
        }
    }
}

impl ExpressiveCurves {
    pub fn series(&self, kind: CurveKind) -> Vec<Option<f64>> {
        match kind {
            CurveKind::Vel => self.vel.iter().map(|&v| Some(v)).collect(),
            CurveKind::Ioi => self.ioi.clone(),
            CurveKind::Od => self.od.clone(),
            CurveKind::Art => self.art.clone(),
            CurveKind::ArtS => self.art_s.clone(),
        }
    }

    pub fn values(&self, kind: CurveKind) -> Vec<f64> {
        self.series(kind).into_iter().flatten().collect()
    }
}

/// Correlation and KL for one pair of performances; `None` where undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMetrics {
    pub corr: BTreeMap<CurveKind, Option<f64>>,
    pub kl: BTreeMap<CurveKind, Option<f64>>,
}

pub fn compare_pair(a: &ExpressiveCurves, b: &ExpressiveCurves, n_mc: usize, seed: u64) -> PairMetrics {
    let mut corr = BTreeMap::new();
    let mut kl = BTreeMap::new();
    for (j, kind) in CurveKind::ALL.into_iter().enumerate() {
        corr.insert(kind, pearson_defined(&a.series(kind), &b.series(kind)).ok());
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, j as u64));
        kl.insert(kind, kl_mc(&a.values(kind), &b.values(kind), n_mc, &mut rng).ok());
    }
    PairMetrics { corr, kl }
}

/// Mean and standard deviation of per-score values, each score weighted equally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    /// Scores that contributed.
    pub scores: usize,
}

/// Averages each score's defined pair values, then averages over scores.
pub fn aggregate_per_score(per_score: &[Vec<Option<f64>>]) -> Option<Summary> {
    let means: Vec<f64> = per_score
        .iter()
        .filter_map(|pairs| {
            let vals: Vec<f64> = pairs.iter().flatten().copied().collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    if means.is_empty() {
        return None;
    }
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let std = (means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n).sqrt();
    Some(Summary { mean, std, scores: means.len() })
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn name_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub corr: BTreeMap<CurveKind, Option<Summary>>,
    pub kl: BTreeMap<CurveKind, Option<Summary>>,
    /// Pairs compared per score.
    pub pairs: BTreeMap<String, usize>,
    /// Scores found in only one of the two sets.
    pub skipped: Vec<String>,
}

/// Compares every performance in `a` with every one in `b` for each score
/// present in both.
pub fn evaluate_sets(
    a: &BTreeMap<String, Vec<AlignedSequence>>,
    b: &BTreeMap<String, Vec<AlignedSequence>>,
    n_mc: usize,
    seed: u64,
) -> EvalReport {
    let skipped: Vec<String> =
        a.keys().filter(|k| !b.contains_key(*k)).chain(b.keys().filter(|k| !a.contains_key(*k))).cloned().collect();
    let mut corr_vals: BTreeMap<CurveKind, Vec<Vec<Option<f64>>>> = BTreeMap::new();
    let mut kl_vals: BTreeMap<CurveKind, Vec<Vec<Option<f64>>>> = BTreeMap::new();
    let mut pairs = BTreeMap::new();
    for (name, perfs_a) in a {
        let Some(perfs_b) = b.get(name) else { continue };
        let ca: Vec<ExpressiveCurves> = perfs_a.iter().map(extract_curves).collect();
        let cb: Vec<ExpressiveCurves> = perfs_b.iter().map(extract_curves).collect();
        let mut score_corr: BTreeMap<CurveKind, Vec<Option<f64>>> = BTreeMap::new();
        let mut score_kl: BTreeMap<CurveKind, Vec<Option<f64>>> = BTreeMap::new();
        for (i, x) in ca.iter().enumerate() {
            for (j, y) in cb.iter().enumerate() {
                let pair_seed = mix(mix(seed, name_hash(name)), ((i as u64) << 32) | j as u64);
                let m = compare_pair(x, y, n_mc, pair_seed);
                for kind in CurveKind::ALL {
                    score_corr.entry(kind).or_default().push(m.corr[&kind]);
                    score_kl.entry(kind).or_default().push(m.kl[&kind]);
                }
            }
        }
        pairs.insert(name.clone(), ca.len() * cb.len());
        for kind in CurveKind::ALL {
            corr_vals.entry(kind).or_default().push(score_corr.remove(&kind).unwrap_or_default());
            kl_vals.entry(kind).or_default().push(score_kl.remove(&kind).unwrap_or_default());
        }
    }
    let summarize = |vals: &BTreeMap<CurveKind, Vec<Vec<Option<f64>>>>| {
        CurveKind::ALL.into_iter().map(|k| (k, vals.get(&k).and_then(|v| aggregate_per_score(v)))).collect()
    };
    EvalReport { corr: summarize(&corr_vals), kl: summarize(&kl_vals), pairs, skipped }
}

impl EvalReport {
    /// Plain-text table, one row per statistic and one column per curve.
    pub fn to_table(&self) -> String {
        let cell = |s: &Option<Summary>| match s {
            Some(s) => format!("{:.3} ± {:.3}", s.mean, s.std),
            None => "n/a".to_string(),
        };
        let mut out = String::new();
        let _ = write!(out, "{:<6}", "");
        for k in CurveKind::ALL {
            let _ = write!(out, " | {:^15}", k.name());
        }
        out.push('\n');
        for (label, map) in [("corr", &self.corr), ("KL", &self.kl)] {
            let _ = write!(out, "{label:<6}");
            for k in CurveKind::ALL {
                let _ = write!(out, " | {:^15}", cell(&map[&k]));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "scores: {}, pairs: {}", self.pairs.len(), self.pairs.values().sum::<usize>());
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "skipped (present in one set only): {}", self.skipped.join(", "));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
