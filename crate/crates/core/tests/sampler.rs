use std::cell::RefCell;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use symupe_core::codec::{encode_sequence, normalize, NotePair, PerfEvent, ScoreEvent, ScoreMarkings};
use symupe_core::conditioning::{ControlInputs, DropFlags};
use symupe_core::midi::resolve_sustain_events;
use symupe_core::model::{ModelConfig, PianoFlow, SequenceInput};
use symupe_core::sampler::{
    decode_to_midi, inpaint, make_step_schedule, ode_solve, render_windowed, sample_noise, window_plan,
    SamplerConfig, SamplerError, MIN_STEP, SolveRequest, VectorField, Window,
};
use symupe_tensor::Array;

struct Constant(Vec<f64>);

impl VectorField for Constant {
    fn field(&self, input: &SequenceInput) -> Result<Array, SamplerError> {
        let n = input.x_t.rows();
        Ok(Array::from_fn(&[n, 4], |i| self.0[i % 4]))
    }
}

struct Decay;

impl VectorField for Decay {
    fn field(&self, input: &SequenceInput) -> Result<Array, SamplerError> {
        Ok(input.x_t.map(|x| -x))
    }
}

/// Nonlinear in everything it is given; records each call.
#[derive(Default)]
struct Recorder {
    calls: RefCell<Vec<(usize, Vec<bool>, bool)>>,
}

impl VectorField for Recorder {
    fn field(&self, input: &SequenceInput) -> Result<Array, SamplerError> {
        self.calls.borrow_mut().push((input.x_t.rows(), input.mask.to_vec(), input.control.is_some()));
        let bias = if input.control.is_some() { 0.5 } else { -0.5 };
        Ok(Array::from_fn(&[input.x_t.rows(), 4], |k| {
            let (i, f) = (k / 4, k % 4);
            (input.x_t.get(i, f) * input.t).tanh() + input.x_ctx.get(i, f).sin() + input.score.get(i, f) + bias
        }))
    }
}

struct Explodes;

impl VectorField for Explodes {
    fn field(&self, input: &SequenceInput) -> Result<Array, SamplerError> {
        let v = if input.t > 0.5 { f64::NAN } else { 1.0 };
        Ok(Array::full(input.x_t.shape(), v))
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Array {
    Array::from_fn(&[n, 4], |_| StandardNormal.sample(rng))
}

fn request<'a>(score: &'a Array, ctx: &'a Array, mask: &'a [bool], interp: &'a [bool]) -> SolveRequest<'a> {
    SolveRequest { score, x_ctx: ctx, mask, interpolated: interp, control: None, alpha: 1.0 }
}

#[test]
fn schedule_matches_geometric_series() {
    let s = make_step_schedule(10, 0.75).unwrap();
    // geometric series summed term by term
    let mut total = 0.0;
    let mut term = 1.0;
    for _ in 0..10 {
        total += term;
        term *= 0.75;
    }
    let dt0 = 1.0 / total;
    assert!((s.steps[0] - dt0).abs() < 1e-12);
    assert!((s.steps[0] - 0.264918).abs() < 5e-7);
    assert!((s.steps[9] - dt0 * 0.75f64.powi(9)).abs() < 1e-12);
    assert!((s.steps[9] - 0.0198913).abs() < 5e-7);
    assert_eq!(*s.boundaries.last().unwrap(), 1.0);
    assert_eq!(s.boundaries.len(), 11);
}

proptest! {
    #[test]
    fn schedule_invariants(k in 1usize..60, gamma in 0.05f64..=1.0) {
        let s = match make_step_schedule(k, gamma) {
            Ok(s) => s,
            Err(_) => {
                let dt0 = (1.0 - gamma) / (1.0 - gamma.powi(k as i32));
                prop_assert!(dt0 * gamma.powi(k as i32 - 1) < MIN_STEP);
                return Ok(());
            }
        };
        prop_assert_eq!(s.boundaries[0], 0.0);
        prop_assert_eq!(s.boundaries[k], 1.0);
        prop_assert!(s.boundaries.windows(2).all(|w| w[0] < w[1]));
        prop_assert!((s.steps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for w in s.steps.windows(2) {
            prop_assert!((w[1] / w[0] - gamma).abs() < 1e-12);
        }
    }
}

#[test]
fn euler_is_exact_for_constant_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 5;
    let score = randn(&mut rng, n);
    let ctx = Array::zeros(&[n, 4]);
    let x0 = randn(&mut rng, n);
    let (mask, interp) = (vec![true; n], vec![false; n]);
    let u = [0.5, -0.25, 2.0, 0.125];
    for (k, gamma) in [(1, 1.0), (4, 1.0), (10, 0.75), (7, 0.5)] {
        let s = make_step_schedule(k, gamma).unwrap();
        let x1 = ode_solve(&Constant(u.to_vec()), &request(&score, &ctx, &mask, &interp), &x0, &s).unwrap();
        for (i, (&a, &b)) in x1.data().iter().zip(x0.data()).enumerate() {
            assert!((a - (b + u[i % 4])).abs() < 1e-14);
        }
    }
}

#[test]
fn linear_field_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 6;
    let score = randn(&mut rng, n);
    let ctx = randn(&mut rng, n);
    let x0 = randn(&mut rng, n);
    let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let interp = vec![false; n];
    let s = make_step_schedule(10, 0.75).unwrap();
    let x1 = ode_solve(&Decay, &request(&score, &ctx, &mask, &interp), &x0, &s).unwrap();
    let factor: f64 = s.steps.iter().map(|dt| 1.0 - dt).product();
    for i in 0..n {
        for f in 0..4 {
            if mask[i] {
                assert!((x1.get(i, f) - x0.get(i, f) * factor).abs() < 1e-12);
            } else {
                assert_eq!(x1.get(i, f).to_bits(), ctx.get(i, f).to_bits());
            }
        }
    }
}

#[test]
fn empty_mask_returns_context_without_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4;
    let (score, ctx, x0) = (randn(&mut rng, n), randn(&mut rng, n), randn(&mut rng, n));
    let (mask, interp) = (vec![false; n], vec![false; n]);
    let rec = Recorder::default();
    let s = make_step_schedule(10, 0.75).unwrap();
    let out = ode_solve(&rec, &request(&score, &ctx, &mask, &interp), &x0, &s).unwrap();
    assert_eq!(out, ctx);
    assert!(rec.calls.borrow().is_empty());
}

#[test]
fn divergence_reports_the_step() {
    let n = 3;
    let (score, ctx, x0) = (Array::zeros(&[n, 4]), Array::zeros(&[n, 4]), Array::zeros(&[n, 4]));
    let (mask, interp) = (vec![true; n], vec![false; n]);
    let s = make_step_schedule(4, 1.0).unwrap();
    let err = ode_solve(&Explodes, &request(&score, &ctx, &mask, &interp), &x0, &s).unwrap_err();
    assert_eq!(err, SamplerError::SolverDiverged { step: 3 });
}

fn control(n: usize) -> ControlInputs {
    ControlInputs {
        score_tempo: vec![50; n],
        score_velocity: vec![70; n],
        perf_tempo: vec![55; n],
        text: None,
        drop: DropFlags::default(),
    }
}

#[test]
fn guidance_uses_two_passes_only_when_needed() {
    let n = 4;
    let (score, ctx, x0) = (Array::zeros(&[n, 4]), Array::zeros(&[n, 4]), Array::zeros(&[n, 4]));
    let (mask, interp) = (vec![true; n], vec![false; n]);
    let c = control(n);
    let s = make_step_schedule(5, 0.75).unwrap();
    for (alpha, with_c, expect) in [(1.0, true, 5), (2.0, true, 10), (2.0, false, 5), (0.0, true, 10)] {
        let rec = Recorder::default();
        let req = SolveRequest { control: with_c.then_some(&c), alpha, ..request(&score, &ctx, &mask, &interp) };
        ode_solve(&rec, &req, &x0, &s).unwrap();
        assert_eq!(rec.calls.borrow().len(), expect, "alpha {alpha} control {with_c}");
    }
}

#[test]
fn window_bookkeeping() {
    let plan = window_plan(300, 256, 64).unwrap();
    assert_eq!(
        plan,
        vec![Window { start: 0, generate_from: 0, end: 256 }, Window { start: 44, generate_from: 256, end: 300 }]
    );
    for (len, w, k) in [(300, 256, 64), (1000, 256, 128), (257, 256, 1), (5, 4, 4), (31, 8, 3)] {
        let plan = window_plan(len, w, k).unwrap();
        let mut count = vec![0; len];
        for win in &plan {
            assert!(win.end - win.start <= w && win.end - win.generate_from <= w.max(k));
            for c in &mut count[win.generate_from..win.end] {
                *c += 1;
            }
        }
        assert!(count.iter().all(|&c| c == 1), "len {len} window {w} new {k}");
    }

    let rec = Recorder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 300;
    let score = randn(&mut rng, n);
    let cfg = SamplerConfig { window_n: 256, new_k: 64, ..SamplerConfig::default() };
    render_windowed(&rec, &score, &vec![false; n], None, &cfg, &mut rng).unwrap();
    let calls = rec.calls.borrow();
    assert_eq!(calls.len(), 20);
    assert!(calls[..10].iter().all(|(len, m, _)| *len == 256 && m.iter().all(|&b| b)));
    for (len, m, _) in &calls[10..] {
        assert_eq!(*len, 256);
        assert!(m[..212].iter().all(|&b| !b) && m[212..].iter().all(|&b| b));
    }
}

#[test]
fn short_score_is_one_solve() {
    let rec = Recorder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let score = randn(&mut rng, 40);
    let cfg = SamplerConfig { schedule: make_step_schedule(1, 1.0).unwrap(), ..SamplerConfig::default() };
    render_windowed(&rec, &score, &[false; 40], None, &cfg, &mut rng).unwrap();
    assert_eq!(rec.calls.borrow().len(), 1);
}

fn toy_model() -> PianoFlow {
    PianoFlow::new(ModelConfig { max_len: 32, ..ModelConfig::toy(2, 16) }, 11).unwrap()
}

#[test]
fn rendering_is_deterministic_per_seed() {
    let m = toy_model();
    let n = 50;
    let score = randn(&mut ChaCha8Rng::seed_from_u64(6), n);
    let c = control(n);
    let cfg = SamplerConfig { window_n: 32, new_k: 12, alpha: 1.5, ..SamplerConfig::default() };
    let run = |seed| {
        let out = render_windowed(&m, &score, &vec![false; n], Some(&c), &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        out.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}

#[test]
fn inpainting_keeps_regions_fixed() {
    let m = toy_model();
    let n = 96;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let score = Array::from_fn(&[n, 4], |k| if k % 4 == 0 { ((k / 4) * 7 % 88) as f64 / 87.0 } else { 0.25 });
    let perf = randn(&mut rng, n);
    let interp = vec![false; n];
    let cfg = SamplerConfig { window_n: 32, new_k: 16, ..SamplerConfig::default() };

    // left hand: pitch below middle C
    let left: Vec<bool> = (0..n).map(|i| score.get(i, 0) * 87.0 + 21.0 < 60.0).collect();
    assert!(left.iter().any(|&b| b) && left.iter().any(|&b| !b));
    let out = inpaint(&m, &score, &perf, &left, &interp, None, &cfg, &mut rng).unwrap();
    for i in 0..n {
        if !left[i] {
            assert_eq!(out.row(i), perf.row(i));
        } else {
            assert_ne!(out.row(i), perf.row(i));
        }
    }

    // bridge between kept first and last 32 notes
    let bridge: Vec<bool> = (0..n).map(|i| (32..n - 32).contains(&i)).collect();
    let out = inpaint(&m, &score, &perf, &bridge, &interp, None, &cfg, &mut rng).unwrap();
    assert_eq!(&out.data()[..32 * 4], &perf.data()[..32 * 4]);
    assert_eq!(&out.data()[(n - 32) * 4..], &perf.data()[(n - 32) * 4..]);

    let none = vec![false; n];
    assert_eq!(inpaint(&m, &score, &perf, &none, &interp, None, &cfg, &mut rng).unwrap(), perf);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn inpainting_never_touches_context(
        mask in prop::collection::vec(any::<bool>(), 1..80),
        seed in any::<u64>(),
        window in 4usize..40,
    ) {
        let n = mask.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let score = randn(&mut rng, n);
        let perf = randn(&mut rng, n);
        let cfg = SamplerConfig { window_n: window, new_k: window.div_ceil(2), alpha: 1.7, ..SamplerConfig::default() };
        let out = inpaint(&Recorder::default(), &score, &perf, &mask, &vec![false; n], Some(&control(n)), &cfg, &mut rng)
            .unwrap();
        for i in 0..n {
            if !mask[i] {
                let a: Vec<u64> = out.row(i).iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = perf.row(i).iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}

fn perf_rows(rows: &[[f64; 4]]) -> Array {
    Array::from_rows(rows, 4).unwrap()
}

#[test]
fn decode_accumulates_shifts_and_clamps_velocity() {
    let rows: Vec<[f64; 4]> = (0..4).map(|i| [0.0, if i == 0 { 0.0 } else { 0.5 }, 0.3, 0.3]).collect();
    let d = decode_to_midi(&[60, 62, 64, 65], &perf_rows(&rows), &[false; 4]).unwrap();
    let onsets: Vec<f64> = d.notes.iter().map(|n| n.onset_s).collect();
    assert_eq!(onsets, vec![0.0, 0.5, 1.0, 1.5]);
    assert!(d.notes.iter().all(|n| n.velocity == 1));
    assert!(d.pedals.is_empty());
    assert!(decode_to_midi(&[60], &perf_rows(&rows[..2]), &[false]).is_err());
}

#[test]
fn decode_then_encode_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let noise = sample_noise(40, &mut rng);
    let n = 40;
    // one note per onset, sustain tails shorter than the next release
    let rows: Vec<[f64; 4]> = (0..n)
        .map(|i| {
            let dur = 0.2 + 0.1 * noise.get(i, 2).abs().min(1.0);
            let tail = if i % 3 == 0 { 0.15 } else { 0.0 };
            [(64.0 + 30.0 * noise.get(i, 0).clamp(-1.0, 1.0)).round() / 127.0, 0.5 + 0.05 * noise.get(i, 1).clamp(-1.0, 1.0), dur, dur + tail]
        })
        .collect();
    let pitches: Vec<u8> = (0..n).map(|i| 40 + (i % 30) as u8).collect();
    let d = decode_to_midi(&pitches, &perf_rows(&rows), &vec![false; n]).unwrap();
    let sustained = resolve_sustain_events(&d.notes, &d.pedals, 64);
    let pairs: Vec<NotePair> = d
        .notes
        .iter()
        .zip(&sustained)
        .enumerate()
        .map(|(i, (note, &(_, sus)))| NotePair {
            score: ScoreEvent { pitch: note.pitch, onset: i as f64 * 0.25, duration: 0.25 },
            perf: Some(PerfEvent {
                onset_s: note.onset_s,
                offset_s: note.offset_s,
                sustain_offset_s: note.onset_s + sus,
                velocity: note.velocity,
            }),
        })
        .collect();
    let seq = encode_sequence(&pairs, &ScoreMarkings::default()).unwrap();
    let (_, back) = normalize(&seq);
    for (a, b) in back.iter().zip(&rows) {
        for f in 0..4 {
            assert!((a[f] - b[f]).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }
}
