//! Filling in score notes the performer skipped.

use super::{encode_with_flags, AlignedSequence, CodecError, NotePair, PerfEvent, ScoreMarkings, ONSET_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedNote {
    pub pitch: u8,
    pub onset: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CleanupReport {
    pub interpolated: usize,
    pub dropped: Vec<DroppedNote>,
}

/// Seconds per whole note implied by two anchors, or the nominal tempo.
fn local_rate(a: Option<(f64, f64)>, b: Option<(f64, f64)>, nominal: f64) -> f64 {
    match (a, b) {
        (Some((sa, pa)), Some((sb, pb))) if sb - sa > ONSET_EPS && pb > pa => (pb - pa) / (sb - sa),
        _ => nominal,
    }
}

/// Interpolates onset, duration and velocity for notes without a
/// performance match, then encodes the completed sequence.
///
/// A missing chord member takes the onset of a matched member of the same
/// chord (the preceding one in pitch order when there is one). Other
/// missing notes are placed linearly in score time between the nearest
/// matched onsets, extrapolating at the local rate near the ends. Velocity
/// is the mean over matched notes of the same bar; without any, the note is
/// dropped and reported.
pub fn clean_alignment(
    pairs: &[NotePair],
    markings: &ScoreMarkings,
) -> Result<(AlignedSequence, CleanupReport), CodecError> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&pairs[a].score, &pairs[b].score);
        if (x.onset - y.onset).abs() < ONSET_EPS {
            x.pitch.cmp(&y.pitch)
        } else {
            x.onset.total_cmp(&y.onset)
        }
    });
    let sorted: Vec<NotePair> = order.iter().map(|&i| pairs[i]).collect();

    // matched anchors: (score onset, mean performed onset) per distinct onset
    let mut anchors: Vec<(f64, f64)> = Vec::new();
    let mut k = 0;
    while k < sorted.len() {
        let s = sorted[k].score.onset;
        let mut end = k;
        let (mut sum, mut cnt) = (0.0, 0usize);
        while end < sorted.len() && (sorted[end].score.onset - s).abs() < ONSET_EPS {
            if let Some(p) = sorted[end].perf {
                sum += p.onset_s;
                cnt += 1;
            }
            end += 1;
        }
        if cnt > 0 {
            anchors.push((s, sum / cnt as f64));
        }
        k = end;
    }

    let mut bar_vel: std::collections::HashMap<u32, (f64, usize)> = Default::default();
    for p in &sorted {
        if let Some(perf) = p.perf {
            let e = bar_vel.entry(markings.locate(p.score.onset).0).or_default();
            e.0 += f64::from(perf.velocity);
            e.1 += 1;
        }
    }

    let mut report = CleanupReport::default();
    let mut filled = Vec::with_capacity(sorted.len());
    let mut flags = Vec::with_capacity(sorted.len());
    for (i, pair) in sorted.iter().enumerate() {
        if pair.perf.is_some() {
            filled.push(*pair);
            flags.push(false);
            continue;
        }
        let s = pair.score;
        let drop = |reason: &str| DroppedNote { pitch: s.pitch, onset: s.onset, reason: reason.to_string() };
        let Some(&(sum, cnt)) = bar_vel.get(&markings.locate(s.onset).0) else {
            report.dropped.push(drop("NotInterpolatable: no matched notes in bar"));
            continue;
        };
        if anchors.is_empty() {
            report.dropped.push(drop("NotInterpolatable: no matched onsets"));
            continue;
        }
        let nominal = 240.0 / markings.tempo_at(s.onset);
        let chord_mate = sorted[..i]
            .iter()
            .rev()
            .chain(sorted[i + 1..].iter())
            .filter(|q| (q.score.onset - s.onset).abs() < ONSET_EPS)
            .find_map(|q| q.perf);
        let after = anchors.partition_point(|a| a.0 < s.onset - ONSET_EPS);
        let prev = after.checked_sub(1).map(|j| anchors[j]);
        let next = anchors.get(after).copied();
        let rate = match (prev, next) {
            (Some(_), Some(_)) => local_rate(prev, next, nominal),
            (Some(_), None) => local_rate(after.checked_sub(2).map(|j| anchors[j]), prev, nominal),
            (None, Some(_)) => local_rate(next, anchors.get(after + 1).copied(), nominal),
            (None, None) => nominal,
        };
        let onset_s = match (chord_mate, prev, next) {
            (Some(m), _, _) => m.onset_s,
            (None, Some((sa, pa)), Some((sb, pb))) => pa + (s.onset - sa) / (sb - sa) * (pb - pa),
            (None, Some((sa, pa)), None) => pa + (s.onset - sa) * rate,
            (None, None, Some((sb, pb))) => pb - (sb - s.onset) * rate,
            (None, None, None) => unreachable!("anchors is non-empty"),
        };
        let offset_s = onset_s + s.duration * rate;
        let velocity = (sum / cnt as f64).round().clamp(1.0, 127.0) as u8;
        filled.push(NotePair { score: s, perf: Some(PerfEvent { onset_s, offset_s, sustain_offset_s: offset_s, velocity }) });
        flags.push(true);
        report.interpolated += 1;
    }
    let seq = encode_with_flags(&filled, &flags, markings)?;
    Ok((seq, report))
}
