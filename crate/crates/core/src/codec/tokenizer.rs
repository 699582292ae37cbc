//! Quantized token codec.
//!
//! Ids 0..=2 are reserved (PAD, shared SOS/EOS, MASK); value bin `b` of a
//! feature has id `b + 3`. Each bin is a half-open interval between two
//! edges and decodes to its midpoint, so a roundtrip is off by at most half
//! the bin width.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{AlignedSequence, CodecError, TICKS_PER_WHOLE};

pub const PAD: u32 = 0;
pub const SOS_EOS: u32 = 1;
pub const MASK: u32 = 2;
pub const NUM_SPECIAL: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    Pitch,
    Position,
    PositionShift,
    Duration,
    ScoreTempo,
    ScoreVelocity,
    Velocity,
    TimeShift,
    TimeDuration,
    TimeDurationSustain,
    PerfTempo,
}

impl Feature {
    pub const ALL: [Feature; 11] = [
        Feature::Pitch,
        Feature::Position,
        Feature::PositionShift,
        Feature::Duration,
        Feature::ScoreTempo,
        Feature::ScoreVelocity,
        Feature::Velocity,
        Feature::TimeShift,
        Feature::TimeDuration,
        Feature::TimeDurationSustain,
        Feature::PerfTempo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Pitch => "Pitch",
            Feature::Position => "Position",
            Feature::PositionShift => "PositionShift",
            Feature::Duration => "Duration",
            Feature::ScoreTempo => "ScoreTempo",
            Feature::ScoreVelocity => "ScoreVelocity",
            Feature::Velocity => "Velocity",
            Feature::TimeShift => "TimeShift",
            Feature::TimeDuration => "TimeDuration",
            Feature::TimeDurationSustain => "TimeDurationSustain",
            Feature::PerfTempo => "PerfTempo",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| CodecError::Config(format!("unknown feature {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    MidiBins,
    Note96,
    Bpm,
    Seconds,
}

impl Resolution {
    fn text(self) -> &'static str {
        match self {
            Resolution::MidiBins => "MIDI bins",
            Resolution::Note96 => "96th note",
            Resolution::Bpm => "BPM",
            Resolution::Seconds => "seconds",
        }
    }
}

impl FromStr for Resolution {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Resolution::MidiBins, Resolution::Note96, Resolution::Bpm, Resolution::Seconds]
            .into_iter()
            .find(|r| r.text() == s)
            .ok_or_else(|| CodecError::Config(format!("unknown resolution {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Equal-width bins centered on `min..=max`.
    Uniform,
    /// Geometric edges between `min` and `max`.
    Log,
    /// Fine bins for small magnitudes, coarser further out; the last
    /// segment absorbs whatever bins remain.
    Adaptive,
}

impl Scheme {
    fn text(self) -> &'static str {
        match self {
            Scheme::Uniform => "uniform",
            Scheme::Log => "log",
            Scheme::Adaptive => "adaptive",
        }
    }
}

impl FromStr for Scheme {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Scheme::Uniform, Scheme::Log, Scheme::Adaptive]
            .into_iter()
            .find(|r| r.text() == s)
            .ok_or_else(|| CodecError::Config(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSpec {
    pub feature: Feature,
    pub resolution: Resolution,
    pub min: f64,
    pub max: f64,
    /// Vocabulary size including the reserved ids.
    pub tokens: usize,
    pub scheme: Scheme,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    pub features: Vec<FeatureSpec>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        use Feature::*;
        use Resolution::*;
        use Scheme::*;
        let row = |feature, resolution, min, max, tokens, scheme| FeatureSpec { feature, resolution, min, max, tokens, scheme };
        Self {
            features: vec![
                row(Pitch, MidiBins, 21.0, 108.0, 91, Uniform),
                row(Position, Note96, 0.0, 192.0, 196, Uniform),
                row(PositionShift, Note96, 0.0, 1536.0, 136, Adaptive),
                row(Duration, Note96, 0.0, 1536.0, 136, Adaptive),
                row(ScoreTempo, Bpm, 15.0, 480.0, 164, Log),
                row(ScoreVelocity, MidiBins, 0.0, 127.0, 131, Uniform),
                row(Velocity, MidiBins, 0.0, 127.0, 131, Uniform),
                row(TimeShift, Seconds, -0.5, 10.0, 365, Adaptive),
                row(TimeDuration, Seconds, 0.0, 10.0, 313, Adaptive),
                row(TimeDurationSustain, Seconds, 0.0, 10.0, 313, Adaptive),
                row(PerfTempo, Bpm, 15.0, 480.0, 164, Log),
            ],
        }
    }
}

const CONFIG_HEADER: &str = "# feature\tresolution\tmin\tmax\ttokens\tscheme";

impl TokenizerConfig {
    /// Tab-separated text, one feature per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from(CONFIG_HEADER);
        out.push('\n');
        for s in &self.features {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                s.feature,
                s.resolution.text(),
                s.min,
                s.max,
                s.tokens,
                s.scheme.text()
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CodecError> {
        let mut features = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let err = |m: String| CodecError::Config(format!("line {}: {m}", n + 1));
            if cols.len() != 6 {
                return Err(err(format!("expected 6 tab-separated columns, got {}", cols.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            features.push(FeatureSpec {
                feature: cols[0].parse()?,
                resolution: cols[1].parse()?,
                min: num(cols[2])?,
                max: num(cols[3])?,
                tokens: cols[4].parse().map_err(|e| err(format!("{:?}: {e}", cols[4])))?,
                scheme: cols[5].parse()?,
            });
        }
        Ok(Self { features })
    }
}

/// Bin edges for one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub spec: FeatureSpec,
    edges: Vec<f64>,
}

impl Quantizer {
    pub fn new(spec: FeatureSpec) -> Result<Self, CodecError> {
        let bins = spec.tokens.checked_sub(NUM_SPECIAL as usize).filter(|&b| b >= 1).ok_or_else(|| {
            CodecError::Config(format!("{}: {} tokens leave no value bins", spec.feature, spec.tokens))
        })?;
        if !(spec.min < spec.max) {
            return Err(CodecError::Config(format!("{}: min must be below max", spec.feature)));
        }
        let edges = match spec.scheme {
            Scheme::Uniform => {
                let w = if bins > 1 { (spec.max - spec.min) / (bins - 1) as f64 } else { spec.max - spec.min };
                (0..=bins).map(|k| spec.min - w / 2.0 + k as f64 * w).collect()
            }
            Scheme::Log => {
                if spec.min <= 0.0 {
                    return Err(CodecError::Config(format!("{}: log scheme needs min > 0", spec.feature)));
                }
                let ratio = spec.max / spec.min;
                let mut e: Vec<f64> = (0..=bins).map(|k| spec.min * ratio.powf(k as f64 / bins as f64)).collect();
                e[bins] = spec.max;
                e
            }
            Scheme::Adaptive => adaptive_edges(&spec, bins)?,
        };
        Ok(Self { spec, edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin holding `v`; values outside the edge table are clamped and flagged.
    pub fn bin_of(&self, v: f64) -> (usize, bool) {
        let lo = self.edges[0];
        let hi = self.edges[self.bins()];
        if v.is_nan() {
            return (0, true);
        }
        let clamped = v < lo || v > hi;
        let b = self.edges.partition_point(|&e| e <= v).saturating_sub(1).min(self.bins() - 1);
        (b, clamped)
    }

    pub fn center(&self, bin: usize) -> f64 {
        0.5 * (self.edges[bin] + self.edges[bin + 1])
    }

    pub fn half_width(&self, bin: usize) -> f64 {
        0.5 * (self.edges[bin + 1] - self.edges[bin])
    }

    pub fn tokenize(&self, v: f64) -> (u32, bool) {
        let (b, clamped) = self.bin_of(v);
        (b as u32 + NUM_SPECIAL, clamped)
    }

    pub fn detokenize(&self, id: u32) -> Result<f64, CodecError> {
        let feature = self.spec.feature;
        if id < NUM_SPECIAL {
            return Err(CodecError::Decode { feature, id, reason: "special token carries no value" });
        }
        let b = (id - NUM_SPECIAL) as usize;
        if b >= self.bins() {
            return Err(CodecError::Decode { feature, id, reason: "id outside vocabulary" });
        }
        Ok(self.center(b))
    }
}

/// Segments `(upper bound, width)` laid out from the lower edge; the final
/// segment up to the upper edge gets the remaining bins.
fn adaptive_edges(spec: &FeatureSpec, bins: usize) -> Result<Vec<f64>, CodecError> {
    let (start, end, ladder): (f64, f64, Vec<(f64, f64)>) = match spec.resolution {
        Resolution::Seconds => {
            let mut l = Vec::new();
            if spec.min < 0.0 {
                l.push((0.0, 0.01));
            }
            l.extend([(1.0, 0.01), (3.0, 0.025)]);
            (spec.min, spec.max, l)
        }
        Resolution::Note96 => (
            spec.min - 0.5,
            spec.max + 0.5,
            vec![(47.5, 1.0), (95.5, 2.0), (191.5, 4.0), (383.5, 8.0)],
        ),
        r => {
            return Err(CodecError::Config(format!("{}: adaptive scheme not defined for {}", spec.feature, r.text())))
        }
    };
    let mut edges = vec![start];
    let mut last_width = 0.0;
    for (upper, width) in ladder {
        if upper >= end {
            break;
        }
        let cur = *edges.last().expect("non-empty");
        let n = ((upper - cur) / width).round() as usize;
        for k in 1..=n {
            edges.push(if k == n { upper } else { cur + k as f64 * width });
        }
        last_width = width;
    }
    let used = edges.len() - 1;
    let rest = bins.checked_sub(used).filter(|&r| r >= 1).ok_or_else(|| {
        CodecError::Config(format!("{}: {} bins cannot hold the fine segments ({used} bins)", spec.feature, bins))
    })?;
    let cur = *edges.last().expect("non-empty");
    let width = (end - cur) / rest as f64;
    if width < last_width {
        return Err(CodecError::Config(format!(
            "{}: {bins} bins make the tail finer than the preceding segment",
            spec.feature
        )));
    }
    for k in 1..=rest {
        edges.push(if k == rest { end } else { cur + k as f64 * width });
    }
    Ok(edges)
}

/// One note as token ids, indexed in [`Feature::ALL`] order.
pub type TokenizedNote = [u32; 11];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    quantizers: Vec<Quantizer>,
}

impl Vocab {
    pub fn new(config: &TokenizerConfig) -> Result<Self, CodecError> {
        let mut quantizers = Vec::with_capacity(Feature::ALL.len());
        for f in Feature::ALL {
            let spec = config
                .features
                .iter()
                .find(|s| s.feature == f)
                .ok_or_else(|| CodecError::Config(format!("missing feature {f}")))?;
            quantizers.push(Quantizer::new(*spec)?);
        }
        Ok(Self { quantizers })
    }

    pub fn quantizer(&self, f: Feature) -> &Quantizer {
        &self.quantizers[f as usize]
    }

    /// Vocabulary size of a feature including reserved ids.
    pub fn size(&self, f: Feature) -> usize {
        self.quantizer(f).bins() + NUM_SPECIAL as usize
    }

    /// Raw feature values in vocabulary units for every note.
    pub fn values(seq: &AlignedSequence) -> Vec<[f64; 11]> {
        (0..seq.len())
            .map(|i| {
                let (s, p) = (&seq.score[i], &seq.perf[i]);
                [
                    f64::from(s.pitch),
                    s.position * TICKS_PER_WHOLE,
                    s.position_shift * TICKS_PER_WHOLE,
                    s.duration * TICKS_PER_WHOLE,
                    seq.score_tempo_bpm[i],
                    f64::from(seq.score_velocity[i]),
                    f64::from(p.velocity),
                    p.time_shift,
                    p.time_duration,
                    p.time_duration_sustain,
                    seq.beat_tempo_bpm[i],
                ]
            })
            .collect()
    }

    /// Token ids per note and the number of values clamped into range.
    pub fn tokenize(&self, seq: &AlignedSequence) -> (Vec<TokenizedNote>, usize) {
        let mut clamped = 0;
        let ids = Self::values(seq)
            .iter()
            .map(|row| {
                let mut ids = [0u32; 11];
                for (k, q) in self.quantizers.iter().enumerate() {
                    let (id, c) = q.tokenize(row[k]);
                    ids[k] = id;
                    clamped += usize::from(c);
                }
                ids
            })
            .collect();
        (ids, clamped)
    }

    /// Bin-center values per note, in vocabulary units.
    pub fn detokenize(&self, tokens: &[TokenizedNote]) -> Result<Vec<[f64; 11]>, CodecError> {
        tokens
            .iter()
            .map(|ids| {
                let mut row = [0.0; 11];
                for (k, q) in self.quantizers.iter().enumerate() {
                    row[k] = q.detokenize(ids[k])?;
                }
                Ok(row)
            })
            .collect()
    }

    /// Writes `<Feature>.edges` files (one edge per line) into `dir`.
    pub fn dump_edges(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for q in &self.quantizers {
            let path = dir.join(format!("{}.edges", q.spec.feature));
            let body: String = q.edges.iter().map(|e| format!("{e}\n")).collect();
            std::fs::write(&path, body)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Reads an edge file written by [`Vocab::dump_edges`].
pub fn read_edges(path: &Path) -> Result<Vec<f64>, CodecError> {
    let text = std::fs::read_to_string(path).map_err(|e| CodecError::Config(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map_err(|e| CodecError::Config(format!("{l:?}: {e}"))))
        .collect()
}
