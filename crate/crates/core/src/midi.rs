//! Standard MIDI File reading and writing, restricted to what performance
//! features need: notes, the sustain pedal (CC64), tempo and time signature.

use std::collections::HashMap;

use thiserror::Error;

/// Ticks per quarter note used by [`write_smf`].
pub const WRITE_TICKS_PER_QUARTER: u16 = 480;
/// Tempo written by [`write_smf`], in microseconds per quarter (120 BPM).
pub const WRITE_US_PER_QUARTER: u32 = 500_000;
/// Conventional "pedal down" threshold for CC64.
pub const DEFAULT_PEDAL_THRESHOLD: u8 = 64;

const SUSTAIN_CC: u8 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid MIDI data: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MidiNoteEvent {
    pub pitch: u8,
    pub velocity: u8,
    pub onset_s: f64,
    pub offset_s: f64,
    pub channel: u8,
}

impl MidiNoteEvent {
    pub fn duration(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PedalEvent {
    pub time_s: f64,
    pub value: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TempoChange {
    pub tick: u64,
    pub us_per_quarter: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSignatureEvent {
    pub tick: u64,
    pub numerator: u8,
    pub denominator: u8,
}

/// Recoverable irregularities found while parsing.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseWarning {
    /// A note-on without a matching note-off; closed at the end of its track.
    UnmatchedNoteOn { channel: u8, pitch: u8, tick: u64 },
    /// A note whose on and off fell on the same tick; dropped.
    ZeroLengthNote { channel: u8, pitch: u8, tick: u64 },
}

/// Piecewise-constant tempo map converting ticks to seconds and back.
#[derive(Debug, Clone, PartialEq)]
pub struct TempoMap {
    ticks_per_quarter: u16,
    // (tick, seconds at tick, seconds per tick from here on)
    segments: Vec<(u64, f64, f64)>,
}

impl TempoMap {
    pub fn new(ticks_per_quarter: u16, changes: &[TempoChange]) -> Self {
        let tpq = f64::from(ticks_per_quarter.max(1));
        let mut sorted: Vec<TempoChange> = changes.to_vec();
        sorted.sort_by_key(|c| c.tick);
        let mut segments = vec![(0u64, 0.0, f64::from(WRITE_US_PER_QUARTER) / 1e6 / tpq)];
        for c in sorted {
            let spt = f64::from(c.us_per_quarter.max(1)) / 1e6 / tpq;
            let &(t0, s0, spt0) = segments.last().expect("non-empty");
            if c.tick == t0 {
                segments.last_mut().expect("non-empty").2 = spt;
            } else {
                segments.push((c.tick, s0 + (c.tick - t0) as f64 * spt0, spt));
            }
        }
        Self { ticks_per_quarter: ticks_per_quarter.max(1), segments }
    }

    pub fn ticks_per_quarter(&self) -> u16 {
        self.ticks_per_quarter
    }

    pub fn seconds_at(&self, tick: u64) -> f64 {
        let i = self.segments.partition_point(|s| s.0 <= tick) - 1;
        let (t0, s0, spt) = self.segments[i];
        s0 + (tick - t0) as f64 * spt
    }

    /// Inverse of [`TempoMap::seconds_at`], as a fractional tick.
    pub fn ticks_at(&self, seconds: f64) -> f64 {
        let i = self.segments.partition_point(|s| s.1 <= seconds).max(1) - 1;
        let (t0, s0, spt) = self.segments[i];
        t0 as f64 + (seconds - s0) / spt
    }

    /// Quarter-note BPM in effect at `tick`.
    pub fn bpm_at(&self, tick: u64) -> f64 {
        let i = self.segments.partition_point(|s| s.0 <= tick) - 1;
        60.0 / (self.segments[i].2 * f64::from(self.ticks_per_quarter))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceTrack {
    pub notes: Vec<MidiNoteEvent>,
    pub pedals: Vec<PedalEvent>,
    pub ticks_per_quarter: u16,
    pub tempo_changes: Vec<TempoChange>,
    pub time_signatures: Vec<TimeSignatureEvent>,
    pub warnings: Vec<ParseWarning>,
}

impl PerformanceTrack {
    /// Wraps in-memory events, sorting notes by onset then pitch and
    /// pedals by time.
    pub fn new(mut notes: Vec<MidiNoteEvent>, mut pedals: Vec<PedalEvent>) -> Self {
        sort_notes(&mut notes);
        pedals.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
        Self {
            notes,
            pedals,
            ticks_per_quarter: WRITE_TICKS_PER_QUARTER,
            tempo_changes: Vec::new(),
            time_signatures: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn tempo_map(&self) -> TempoMap {
        TempoMap::new(self.ticks_per_quarter, &self.tempo_changes)
    }
}

fn sort_notes(notes: &mut [MidiNoteEvent]) {
    notes.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.pitch.cmp(&b.pitch)));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, MidiError> {
        Err(MidiError::Parse { offset: self.pos, message: message.into() })
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        if self.pos >= self.end {
            return self.err("unexpected end of data");
        }
        let b = self.bytes[self.pos];
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        match self.pos.checked_add(n) {
            Some(e) if e <= self.end => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            _ => self.err(format!("need {n} bytes past end of chunk")),
        }
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        self.err("variable-length quantity longer than 4 bytes")
    }
}

#[derive(Debug, Clone, Copy)]
enum RawKind {
    NoteOn { channel: u8, pitch: u8, velocity: u8 },
    NoteOff { channel: u8, pitch: u8 },
    Pedal { value: u8 },
}

struct RawTrack {
    events: Vec<(u64, RawKind)>,
    end_tick: u64,
}

/// Parses a format 0 or 1 Standard MIDI File.
///
/// All event times are converted to absolute seconds through the merged
/// tempo map. Unsupported messages are skipped.
pub fn parse_smf(bytes: &[u8]) -> Result<PerformanceTrack, MidiError> {
    let mut r = Reader { bytes, pos: 0, end: bytes.len() };
    if r.take(4).ok() != Some(b"MThd".as_slice()) {
        return Err(MidiError::Parse { offset: 0, message: "missing MThd header".into() });
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return r.err(format!("header length {header_len} < 6"));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    if format > 1 {
        return Err(MidiError::Parse { offset: header_start, message: format!("unsupported SMF format {format}") });
    }
    let _ntracks = r.u16()?;
    let division = r.u16()?;
    if division & 0x8000 != 0 || division == 0 {
        return Err(MidiError::Parse {
            offset: header_start + 4,
            message: "only ticks-per-quarter time division is supported".into(),
        });
    }
    r.pos = match header_start.checked_add(header_len) {
        Some(p) if p <= bytes.len() => p,
        _ => return r.err("header chunk runs past end of file"),
    };

    let mut tempo_changes = Vec::new();
    let mut time_signatures = Vec::new();
    let mut tracks = Vec::new();
    while r.pos < bytes.len() {
        if bytes.len() - r.pos < 8 {
            return r.err("truncated chunk header");
        }
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let start = r.pos;
        let end = match start.checked_add(len) {
            Some(e) if e <= bytes.len() => e,
            _ => return r.err(format!("chunk length {len} runs past end of file")),
        };
        if id == b"MTrk" {
            let mut tr = Reader { bytes, pos: start, end };
            tracks.push(parse_track(&mut tr, &mut tempo_changes, &mut time_signatures)?);
        }
        r.pos = end;
    }

    let tempo = TempoMap::new(division, &tempo_changes);
    let mut notes = Vec::new();
    let mut pedals = Vec::new();
    let mut warnings = Vec::new();
    for track in &tracks {
        let mut open: HashMap<(u8, u8), (u64, u8)> = HashMap::new();
        let mut close = |key: (u8, u8), on: (u64, u8), off_tick: u64, warnings: &mut Vec<ParseWarning>| {
            if off_tick <= on.0 {
                warnings.push(ParseWarning::ZeroLengthNote { channel: key.0, pitch: key.1, tick: on.0 });
                return;
            }
            notes.push(MidiNoteEvent {
                pitch: key.1,
                velocity: on.1,
                onset_s: tempo.seconds_at(on.0),
                offset_s: tempo.seconds_at(off_tick),
                channel: key.0,
            });
        };
        for &(tick, kind) in &track.events {
            match kind {
                RawKind::NoteOn { channel, pitch, velocity } => {
                    // last note-on wins: an overlapping same-pitch note closes the earlier one
                    if let Some(prev) = open.insert((channel, pitch), (tick, velocity)) {
                        close((channel, pitch), prev, tick, &mut warnings);
                    }
                }
                RawKind::NoteOff { channel, pitch } => {
                    if let Some(on) = open.remove(&(channel, pitch)) {
                        close((channel, pitch), on, tick, &mut warnings);
                    }
                }
                RawKind::Pedal { value } => pedals.push(PedalEvent { time_s: tempo.seconds_at(tick), value }),
            }
        }
        let mut leftover: Vec<_> = open.into_iter().collect();
        leftover.sort_by_key(|&(k, (t, _))| (t, k));
        for (key, on) in leftover {
            warnings.push(ParseWarning::UnmatchedNoteOn { channel: key.0, pitch: key.1, tick: on.0 });
            close(key, on, track.end_tick, &mut warnings);
        }
    }
    sort_notes(&mut notes);
    pedals.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
    tempo_changes.sort_by_key(|c| c.tick);
    time_signatures.sort_by_key(|t| t.tick);
    Ok(PerformanceTrack { notes, pedals, ticks_per_quarter: division, tempo_changes, time_signatures, warnings })
}

fn parse_track(
    r: &mut Reader<'_>,
    tempo_changes: &mut Vec<TempoChange>,
    time_signatures: &mut Vec<TimeSignatureEvent>,
) -> Result<RawTrack, MidiError> {
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut events = Vec::new();
    while r.pos < r.end {
        tick += u64::from(r.vlq()?);
        let first = r.u8()?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => {
                    r.pos -= 1;
                    return r.err("data byte without running status");
                }
            }
        };
        match status {
            0x80..=0xef => {
                running = Some(status);
                let d1 = match first_data {
                    Some(d) => d,
                    None => r.u8()?,
                } & 0x7f;
                let kind = status & 0xf0;
                let channel = status & 0x0f;
                let d2 = if kind == 0xc0 || kind == 0xd0 { 0 } else { r.u8()? & 0x7f };
                match kind {
                    0x90 if d2 > 0 => events.push((tick, RawKind::NoteOn { channel, pitch: d1, velocity: d2 })),
                    0x80 | 0x90 => events.push((tick, RawKind::NoteOff { channel, pitch: d1 })),
                    0xb0 if d1 == SUSTAIN_CC => events.push((tick, RawKind::Pedal { value: d2 })),
                    _ => {}
                }
            }
            0xff => {
                running = None;
                let meta = r.u8()?;
                let len = r.vlq()? as usize;
                let data = r.take(len)?;
                match meta {
                    0x2f => return Ok(RawTrack { events, end_tick: tick }),
                    0x51 if len >= 3 => {
                        let us = u32::from(data[0]) << 16 | u32::from(data[1]) << 8 | u32::from(data[2]);
                        tempo_changes.push(TempoChange { tick, us_per_quarter: us.max(1) });
                    }
                    0x58 if len >= 2 => time_signatures.push(TimeSignatureEvent {
                        tick,
                        numerator: data[0].max(1),
                        denominator: 1u8.checked_shl(u32::from(data[1])).unwrap_or(128).max(1),
                    }),
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            _ => {
                r.pos -= 1;
                return r.err(format!("unsupported status byte {status:#04x}"));
            }
        }
    }
    // track without an explicit end-of-track meta event
    Ok(RawTrack { events, end_tick: tick })
}

/// Pressed and pedal-extended duration of every note, in note order.
///
/// A note whose offset finds the pedal at or above `threshold` sounds until
/// the first later pedal event below the threshold (or the end of the
/// recording if the pedal is never lifted).
pub fn resolve_sustain(track: &PerformanceTrack, threshold: u8) -> Vec<(f64, f64)> {
    resolve_sustain_events(&track.notes, &track.pedals, threshold)
}

pub fn resolve_sustain_events(notes: &[MidiNoteEvent], pedals: &[PedalEvent], threshold: u8) -> Vec<(f64, f64)> {
    let horizon = notes
        .iter()
        .map(|n| n.offset_s)
        .chain(pedals.iter().map(|p| p.time_s))
        .fold(0.0_f64, f64::max);
    notes
        .iter()
        .map(|n| {
            let pressed = n.duration();
            // last pedal event at or before the release
            let k = pedals.partition_point(|p| p.time_s <= n.offset_s);
            let down = k > 0 && pedals[k - 1].value >= threshold;
            if !down {
                return (pressed, pressed);
            }
            let release = pedals[k..].iter().find(|p| p.value < threshold).map_or(horizon, |p| p.time_s);
            (pressed, pressed.max(release - n.onset_s))
        })
        .collect()
}

fn write_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 4];
    let mut i = 3;
    buf[i] = (v & 0x7f) as u8;
    v >>= 7;
    while v > 0 {
        i -= 1;
        buf[i] = (v & 0x7f) as u8 | 0x80;
        v >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn validate(notes: &[MidiNoteEvent], pedals: &[PedalEvent]) -> Result<(), MidiError> {
    for (i, n) in notes.iter().enumerate() {
        if n.pitch > 127 {
            return Err(MidiError::Validation(format!("note {i}: pitch {} outside [0,127]", n.pitch)));
        }
        if n.velocity == 0 || n.velocity > 127 {
            return Err(MidiError::Validation(format!("note {i}: velocity {} outside [1,127]", n.velocity)));
        }
        if n.channel > 15 {
            return Err(MidiError::Validation(format!("note {i}: channel {} outside [0,15]", n.channel)));
        }
        if !(n.onset_s.is_finite() && n.offset_s.is_finite()) || n.onset_s < 0.0 || n.offset_s <= n.onset_s {
            return Err(MidiError::Validation(format!(
                "note {i}: invalid times onset {} offset {}",
                n.onset_s, n.offset_s
            )));
        }
    }
    for (i, p) in pedals.iter().enumerate() {
        if p.value > 127 || !p.time_s.is_finite() || p.time_s < 0.0 {
            return Err(MidiError::Validation(format!("pedal {i}: invalid event {p:?}")));
        }
    }
    Ok(())
}

/// Writes a format 0 file at 480 ticks per quarter and 120 BPM.
///
/// Velocity 0 is rejected since a zero-velocity note-on reads back as a
/// note-off. Overlapping notes of the same pitch and channel are cut at the
/// later onset, mirroring how [`parse_smf`] pairs them.
pub fn write_smf(notes: &[MidiNoteEvent], pedals: &[PedalEvent]) -> Result<Vec<u8>, MidiError> {
    validate(notes, pedals)?;
    let ticks_per_second = f64::from(WRITE_TICKS_PER_QUARTER) * 1e6 / f64::from(WRITE_US_PER_QUARTER);
    let to_tick = |s: f64| (s * ticks_per_second).round() as u64;

    // (tick, order, bytes); note-offs sort before pedal changes before note-ons
    let mut events: Vec<(u64, u8, [u8; 3])> = Vec::with_capacity(notes.len() * 2 + pedals.len());
    let mut sorted: Vec<&MidiNoteEvent> = notes.iter().collect();
    sorted.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.pitch.cmp(&b.pitch)));
    let mut next_on: HashMap<(u8, u8), u64> = HashMap::new();
    let mut spans = Vec::with_capacity(sorted.len());
    for n in sorted.iter().rev() {
        let on = to_tick(n.onset_s);
        let mut off = to_tick(n.offset_s).max(on + 1);
        if let Some(&later) = next_on.get(&(n.channel, n.pitch)) {
            off = off.min(later);
        }
        next_on.insert((n.channel, n.pitch), on);
        spans.push((n, on, off));
    }
    for (n, on, off) in spans {
        if off <= on {
            // two same-pitch onsets on one tick cannot both be represented
            continue;
        }
        events.push((on, 2, [0x90 | n.channel, n.pitch, n.velocity]));
        events.push((off, 0, [0x80 | n.channel, n.pitch, 0]));
    }
    for p in pedals {
        events.push((to_tick(p.time_s), 1, [0xb0, SUSTAIN_CC, p.value]));
    }
    events.sort_by_key(|e| (e.0, e.1));

    let mut track = Vec::new();
    // time signature 4/4, tempo
    track.extend_from_slice(&[0x00, 0xff, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08]);
    let us = WRITE_US_PER_QUARTER.to_be_bytes();
    track.extend_from_slice(&[0x00, 0xff, 0x51, 0x03, us[1], us[2], us[3]]);
    let mut last = 0u64;
    for (tick, _, msg) in events {
        let delta = u32::try_from(tick - last)
            .map_err(|_| MidiError::Validation("event gap exceeds the SMF delta-time range".into()))?;
        write_vlq(&mut track, delta);
        track.extend_from_slice(&msg);
        last = tick;
    }
    track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
    if track.len() > u32::MAX as usize {
        return Err(MidiError::Validation("track too large".into()));
    }

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&WRITE_TICKS_PER_QUARTER.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}
