//! Line-oriented text form of [`AlignedSequence`].
//!
//! ```text
//! SYMUPE-ALIGN v1
//! # pitch onset position position_shift duration bar beat downbeat velocity time_shift time_duration time_duration_sustain interpolated score_tempo score_velocity beat_tempo
//! 60 0 0 0 0.25 0 0 1 72 0 0.41 0.83 0 120 64 118.2
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a write/read cycle
//! is lossless.

use super::{AlignedSequence, CodecError, PerfNote, ScoreNote};

pub const ALIGN_HEADER: &str = "SYMUPE-ALIGN v1";
const COLUMNS: &str = "# pitch onset position position_shift duration bar beat downbeat velocity time_shift time_duration time_duration_sustain interpolated score_tempo score_velocity beat_tempo";

pub fn write_aligned(seq: &AlignedSequence) -> String {
    let mut out = format!("{ALIGN_HEADER}\n{COLUMNS}\n");
    for i in 0..seq.len() {
        let (s, p) = (&seq.score[i], &seq.perf[i]);
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            s.pitch,
            s.onset,
            s.position,
            s.position_shift,
            s.duration,
            s.bar_index,
            s.beat_index,
            u8::from(s.is_downbeat),
            p.velocity,
            p.time_shift,
            p.time_duration,
            p.time_duration_sustain,
            u8::from(p.interpolated),
            seq.score_tempo_bpm[i],
            seq.score_velocity[i],
            seq.beat_tempo_bpm[i],
        ));
    }
    out
}

pub fn read_aligned(text: &str) -> Result<AlignedSequence, CodecError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == ALIGN_HEADER => {}
        _ => return Err(CodecError::Format { line: 1, message: format!("expected header {ALIGN_HEADER:?}") }),
    }
    let mut seq = AlignedSequence::default();
    for (n, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| CodecError::Format { line: n + 1, message };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 16 {
            return Err(err(format!("expected 16 columns, got {}", cols.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, CodecError>
        where
            T::Err: std::fmt::Display,
        {
            s.parse().map_err(|e: T::Err| CodecError::Format { line, message: format!("{s:?}: {e}") })
        }
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(err(format!("flag must be 0 or 1, got {s:?}"))),
        };
        let l = n + 1;
        seq.score.push(ScoreNote {
            pitch: num(cols[0], l)?,
            onset: num(cols[1], l)?,
            position: num(cols[2], l)?,
            position_shift: num(cols[3], l)?,
            duration: num(cols[4], l)?,
            bar_index: num(cols[5], l)?,
            beat_index: num(cols[6], l)?,
            is_downbeat: flag(cols[7])?,
        });
        seq.perf.push(PerfNote {
            velocity: num(cols[8], l)?,
            time_shift: num(cols[9], l)?,
            time_duration: num(cols[10], l)?,
            time_duration_sustain: num(cols[11], l)?,
            interpolated: flag(cols[12])?,
        });
        seq.score_tempo_bpm.push(num(cols[13], l)?);
        seq.score_velocity.push(num(cols[14], l)?);
        seq.beat_tempo_bpm.push(num(cols[15], l)?);
    }
    seq.validate()?;
    Ok(seq)
}
