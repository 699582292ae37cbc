//! Trains the desk-scale model on synthetic pieces and compares
//! unconditional renders of held-out scores with their reference
//! performances.
//!
//! cargo run --release --example desk_run -- [steps] [seed] [held-out pieces]

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use symupe_core::codec::{normalize, AlignedSequence};
use symupe_core::eval::{evaluate_sets, extract_curves, kl_mc, CurveKind};
use symupe_core::pipeline::{train, RunConfig};
use symupe_core::sampler::{render_windowed, with_performance, SamplerConfig};
use symupe_core::synth::{synth_dataset, synth_performance, SynthStyle};
use symupe_tensor::Array;

fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let n_eval = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let style = SynthStyle::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_set = synth_dataset(50, &style, &mut rng);
    let held_out = synth_dataset(n_eval, &style, &mut rng);

    let cfg = RunConfig { total_steps: steps, seed, ..RunConfig::desk() };
    let data: Vec<AlignedSequence> = train_set.iter().map(|p| p.performance.clone()).collect();
    let start = Instant::now();
    let run = train(&cfg, &data, None).expect("training");
    let h = &run.history;
    let mean = |s: &[symupe_core::model::StepStats]| s.iter().map(|x| x.loss).sum::<f64>() / s.len() as f64;
    println!("trained {steps} steps in {:.1}s", start.elapsed().as_secs_f64());
    println!("loss step 10: {:.4}, steps 1-10: {:.4}, last 50: {:.4}", h[9].loss, mean(&h[..10]), mean(&h[h.len() - 50..]));

    let sampler = SamplerConfig { window_n: cfg.max_seq_len, new_k: cfg.max_seq_len / 2, ..SamplerConfig::default() };
    let (mut generated, mut reference, mut second) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for p in &held_out {
        let seq = &p.performance;
        let score = Array::from_rows(&normalize(seq).0, 4).unwrap();
        let interp = vec![false; seq.len()];
        let out = render_windowed(&run.model, &score, &interp, None, &sampler, &mut rng).unwrap();
        let (gen, _) = with_performance(seq, &out).unwrap();
        if std::env::var_os("DESK_DETAIL").is_some() {
            let (a, b) = (extract_curves(&gen).vel, extract_curves(seq).vel);
            let kl = kl_mc(&a, &b, 4096, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
            println!("{} kl {kl:.3}\n  gen {:?}\n  ref {:?}", p.name, a.iter().map(|v| v.round() as i32).collect::<Vec<_>>(), b.iter().map(|v| v.round() as i32).collect::<Vec<_>>());
        }
        generated.insert(p.name.clone(), vec![gen]);
        reference.insert(p.name.clone(), vec![seq.clone()]);
        second.insert(p.name.clone(), vec![synth_performance(&p.score, &style, &mut rng)]);
    }
    let r = evaluate_sets(&generated, &reference, 4096, seed);
    println!("generated vs reference\n{}", r.to_table());
    let s = evaluate_sets(&second, &reference, 4096, seed);
    println!("reference vs reference\n{}", s.to_table());
    println!("KL(Vel) ratio {:.3}", r.kl[&CurveKind::Vel].unwrap().mean / s.kl[&CurveKind::Vel].unwrap().mean);
}
