//! ODE sampling of the learned field, windowed rendering and inpainting.

use rand::Rng;
use rand_distr::StandardNormal;
use symupe_tensor::Array;
use thiserror::Error;

use crate::codec::{denormalize_perf, local_beat_tempo, AlignedSequence, PerfNote};
use crate::conditioning::ControlInputs;
use crate::flow::guided_field;
use crate::midi::{MidiNoteEvent, PedalEvent};
use crate::model::{ModelError, PianoFlow, SequenceInput, NOTE_FEATURES};

pub const DEFAULT_STEPS: usize = 10;
pub const DEFAULT_GAMMA: f64 = 0.75;
pub const DEFAULT_WINDOW: usize = 256;
pub const DEFAULT_NEW_NOTES: usize = 128;
/// Smallest step a schedule may contain; below this the boundaries near
/// `t = 1` stop being distinct in double precision.
pub const MIN_STEP: f64 = 1e-9;
/// Shortest note written to MIDI, seconds.
pub const MIN_NOTE_SECONDS: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("solver diverged at step {step}")]
    SolverDiverged { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Euler step sizes that shrink geometrically toward `t = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub gamma: f64,
    pub steps: Vec<f64>,
    /// `t_0 = 0 < ... < t_k = 1`.
    pub boundaries: Vec<f64>,
}

impl StepSchedule {
    pub fn k(&self) -> usize {
        self.steps.len()
    }
}

pub fn make_step_schedule(k: usize, gamma: f64) -> Result<StepSchedule, SamplerError> {
    if k < 1 {
        return Err(SamplerError::Domain("at least one step is required".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(SamplerError::Domain(format!("gamma {gamma} outside (0, 1]")));
    }
    let first = if gamma == 1.0 { 1.0 / k as f64 } else { (1.0 - gamma) / (1.0 - gamma.powi(k as i32)) };
    let steps: Vec<f64> = (0..k).map(|i| first * gamma.powi(i as i32)).collect();
    if steps[k - 1] < MIN_STEP {
        return Err(SamplerError::Domain(format!("last step {:e} of k={k}, gamma={gamma} is below {MIN_STEP:e}", steps[k - 1])));
    }
    let mut boundaries = Vec::with_capacity(k + 1);
    let mut t = 0.0;
    boundaries.push(t);
    for dt in &steps[..k - 1] {
        t += dt;
        boundaries.push(t);
    }
    boundaries.push(1.0);
    Ok(StepSchedule { gamma, steps, boundaries })
}

/// Anything that predicts a velocity for a partially known sequence.
pub trait VectorField {
    fn field(&self, input: &SequenceInput) -> Result<Array, SamplerError>;

    /// Conditional and unconditional fields for guidance.
    fn field_pair(&self, input: &SequenceInput) -> Result<(Array, Array), SamplerError> {
        let uncond = SequenceInput { control: None, ..*input };
        Ok((self.field(input)?, self.field(&uncond)?))
    }
}

impl VectorField for PianoFlow {
    fn field(&self, input: &SequenceInput) -> Result<Array, SamplerError> {
        Ok(self.predict(std::slice::from_ref(input))?.pop().expect("one sequence"))
    }

    // both passes share one batched forward
    fn field_pair(&self, input: &SequenceInput) -> Result<(Array, Array), SamplerError> {
        let uncond = SequenceInput { control: None, ..*input };
        let mut out = self.predict(&[*input, uncond])?;
        let u = out.pop().expect("two sequences");
        let c = out.pop().expect("two sequences");
        Ok((c, u))
    }
}

/// Everything except the noise that defines one solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveRequest<'a> {
    pub score: &'a Array,
    /// Known performance rows; masked rows are ignored.
    pub x_ctx: &'a Array,
    pub mask: &'a [bool],
    pub interpolated: &'a [bool],
    pub control: Option<&'a ControlInputs>,
    /// Guidance strength; 1 is plain conditional sampling.
    pub alpha: f64,
}

pub fn sample_noise<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Array {
    Array::from_fn(&[rows, NOTE_FEATURES], |_| rng.sample(StandardNormal))
}

/// Explicit Euler from `x0` at `t = 0` to `t = 1`. Only masked rows move;
/// the rest stay at their context values throughout.
pub fn ode_solve<F: VectorField + ?Sized>(
    field: &F,
    req: &SolveRequest,
    x0: &Array,
    schedule: &StepSchedule,
) -> Result<Array, SamplerError> {
    let n = req.mask.len();
    if x0.shape() != [n, NOTE_FEATURES] || req.x_ctx.shape() != [n, NOTE_FEATURES] {
        return Err(SamplerError::Domain(format!(
            "noise {:?} and context {:?} must be [{n}, {NOTE_FEATURES}]",
            x0.shape(),
            req.x_ctx.shape()
        )));
    }
    let mut x = req.x_ctx.clone();
    for (i, &m) in req.mask.iter().enumerate() {
        if m {
            x.row_mut(i).copy_from_slice(x0.row(i));
        }
    }
    if !req.mask.iter().any(|&m| m) {
        return Ok(x);
    }
    let guided = req.alpha != 1.0 && req.control.is_some();
    for (step, (&t, &dt)) in schedule.boundaries.iter().zip(&schedule.steps).enumerate() {
        let input = SequenceInput {
            score: req.score,
            x_t: &x,
            x_ctx: req.x_ctx,
            mask: req.mask,
            interpolated: req.interpolated,
            t,
            control: req.control,
        };
        let v = if guided {
            let (c, u) = field.field_pair(&input)?;
            guided_field(&c, &u, req.alpha).map_err(|e| SamplerError::Domain(e.to_string()))?
        } else {
            field.field(&input)?
        };
        if v.shape() != x.shape() {
            return Err(SamplerError::Domain(format!("field shape {:?}, expected {:?}", v.shape(), x.shape())));
        }
        for (i, &m) in req.mask.iter().enumerate() {
            if !m {
                continue;
            }
            let vr = v.row(i);
            if vr.iter().any(|a| !a.is_finite()) {
                return Err(SamplerError::SolverDiverged { step });
            }
            for (a, b) in x.row_mut(i).iter_mut().zip(vr) {
                *a += dt * b;
            }
        }
    }
    Ok(x)
}

/// One inference window: notes `start..end` are fed to the model and
/// notes `generate_from..end` are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub generate_from: usize,
    pub end: usize,
}

/// Overlapping windows that generate every note exactly once. The first
/// window is generated whole; each later one keeps up to `window_n - new_k`
/// earlier notes as context and generates at most `new_k` new ones.
pub fn window_plan(len: usize, window_n: usize, new_k: usize) -> Result<Vec<Window>, SamplerError> {
    if window_n == 0 || new_k == 0 || new_k > window_n {
        return Err(SamplerError::Domain(format!("need 1 <= new_k ({new_k}) <= window ({window_n})")));
    }
    if len == 0 {
        return Ok(Vec::new());
    }
    let first = len.min(window_n);
    let mut plan = vec![Window { start: 0, generate_from: 0, end: first }];
    let mut covered = first;
    while covered < len {
        let end = (covered + new_k).min(len);
        plan.push(Window { start: end - window_n, generate_from: covered, end });
        covered = end;
    }
    Ok(plan)
}

/// Sampling settings shared by rendering and inpainting.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub schedule: StepSchedule,
    pub alpha: f64,
    pub window_n: usize,
    pub new_k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            schedule: make_step_schedule(DEFAULT_STEPS, DEFAULT_GAMMA).expect("valid defaults"),
            alpha: 1.0,
            window_n: DEFAULT_WINDOW,
            new_k: DEFAULT_NEW_NOTES,
        }
    }
}

fn rows(a: &Array, start: usize, end: usize) -> Array {
    Array::from_vec(&[end - start, a.cols()], a.data()[start * a.cols()..end * a.cols()].to_vec()).expect("row range")
}

/// Generates performance features for a whole score window by window.
/// `known` holds the performance where `mask` is false; masked rows are
/// generated. Returns an `[n, 4]` array equal to `known` on unmasked rows.
pub fn solve_windowed<F: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    score: &Array,
    known: &Array,
    mask: &[bool],
    interpolated: &[bool],
    control: Option<&ControlInputs>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Array, SamplerError> {
    let n = score.rows();
    if known.shape() != [n, NOTE_FEATURES] || mask.len() != n || interpolated.len() != n {
        return Err(SamplerError::Domain(format!("inputs disagree on length {n}")));
    }
    if let Some(c) = control {
        if c.len() != n {
            return Err(SamplerError::Domain(format!("control has {} notes, score {n}", c.len())));
        }
    }
    let mut out = known.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out.row_mut(i).fill(0.0);
        }
    }
    for w in window_plan(n, cfg.window_n, cfg.new_k)? {
        let (s, e) = (w.start, w.end);
        // earlier rows of the window are already final, later ones follow the mask
        let wmask: Vec<bool> = (s..e).map(|i| i >= w.generate_from && mask[i]).collect();
        let x0 = sample_noise(e - s, rng);
        if !wmask.iter().any(|&m| m) {
            continue;
        }
        let wscore = rows(score, s, e);
        let wctx = rows(&out, s, e);
        let wctrl = control.map(|c| c.slice(s, e));
        let req = SolveRequest {
            score: &wscore,
            x_ctx: &wctx,
            mask: &wmask,
            interpolated: &interpolated[s..e],
            control: wctrl.as_ref(),
            alpha: cfg.alpha,
        };
        let x = ode_solve(field, &req, &x0, &cfg.schedule)?;
        for (j, &m) in wmask.iter().enumerate() {
            if m {
                out.row_mut(s + j).copy_from_slice(x.row(j));
            }
        }
    }
    Ok(out)
}

/// Renders a performance of the whole score from noise.
pub fn render_windowed<F: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    score: &Array,
    interpolated: &[bool],
    control: Option<&ControlInputs>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Array, SamplerError> {
    let n = score.rows();
    let known = Array::zeros(&[n, NOTE_FEATURES]);
    solve_windowed(field, score, &known, &vec![true; n], interpolated, control, cfg, rng)
}

/// Regenerates the masked notes of an existing performance. Unmasked rows
/// of the result are bit-identical to `perf`.
pub fn inpaint<F: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    score: &Array,
    perf: &Array,
    mask: &[bool],
    interpolated: &[bool],
    control: Option<&ControlInputs>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Array, SamplerError> {
    let mut out = solve_windowed(field, score, perf, mask, interpolated, control, cfg, rng)?;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            out.row_mut(i).copy_from_slice(perf.row(i));
        }
    }
    Ok(out)
}

/// Replaces the performance of `seq` with decoded feature rows. Returns the
/// new sequence and the number of clamped values.
pub fn with_performance(seq: &AlignedSequence, perf: &Array) -> Result<(AlignedSequence, usize), SamplerError> {
    if perf.shape() != [seq.len(), NOTE_FEATURES] {
        return Err(SamplerError::Domain(format!("{} notes, performance {:?}", seq.len(), perf.shape())));
    }
    let mut out = seq.clone();
    let mut clamped = 0;
    for (i, p) in out.perf.iter_mut().enumerate() {
        let row: [f64; 4] = perf.row(i).try_into().expect("four features");
        let (note, c) = denormalize_perf(&row, p.interpolated);
        *p = note;
        clamped += c;
    }
    out.beat_tempo_bpm = local_beat_tempo(&out);
    Ok((out, clamped))
}

/// A performance ready for MIDI output.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPerformance {
    pub notes: Vec<MidiNoteEvent>,
    /// Sustain pedal (CC64) presses and releases.
    pub pedals: Vec<PedalEvent>,
    pub perf: Vec<PerfNote>,
    /// Number of values clamped into range while decoding.
    pub clamped: usize,
}

/// Turns normalized performance rows back into notes. Onsets accumulate
/// `time_shift` from zero (shifted up if they would go negative) and the
/// sustained tail of each note becomes a pedal span from its release to
/// the end of its sustain; overlapping spans merge.
pub fn decode_to_midi(pitches: &[u8], perf: &Array, interpolated: &[bool]) -> Result<DecodedPerformance, SamplerError> {
    let n = pitches.len();
    if perf.shape() != [n, NOTE_FEATURES] || interpolated.len() != n {
        return Err(SamplerError::Domain(format!("{n} pitches, performance {:?}", perf.shape())));
    }
    if !perf.all_finite() {
        return Err(SamplerError::Domain("performance contains non-finite values".into()));
    }
    let mut clamped = 0;
    let mut notes_perf = Vec::with_capacity(n);
    let mut onsets = Vec::with_capacity(n);
    let mut t = 0.0;
    for i in 0..n {
        let row: [f64; 4] = perf.row(i).try_into().expect("four features");
        let (mut p, c) = denormalize_perf(&row, interpolated[i]);
        clamped += c;
        if p.velocity == 0 {
            p.velocity = 1;
            clamped += 1;
        }
        t += p.time_shift;
        onsets.push(t);
        notes_perf.push(p);
    }
    let lift = onsets.iter().fold(0.0_f64, |a, &b| a.min(b));
    let mut notes = Vec::with_capacity(n);
    let mut spans: Vec<(f64, f64)> = Vec::new();
    for ((&pitch, p), onset) in pitches.iter().zip(&notes_perf).zip(&onsets) {
        let onset_s = onset - lift;
        let offset_s = onset_s + p.time_duration.max(MIN_NOTE_SECONDS);
        notes.push(MidiNoteEvent { pitch, velocity: p.velocity, onset_s, offset_s, channel: 0 });
        let end = onset_s + p.time_duration_sustain;
        if end > offset_s {
            spans.push((offset_s, end));
        }
    }
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (s, e) in spans {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    let pedals = merged
        .into_iter()
        .flat_map(|(s, e)| [PedalEvent { time_s: s, value: 127 }, PedalEvent { time_s: e, value: 0 }])
        .collect();
    Ok(DecodedPerformance { notes, pedals, perf: notes_perf, clamped })
}
