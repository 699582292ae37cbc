use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use symupe_core::codec::ScoreNote;
use symupe_core::maskgen::{batch_mask_plan, sample_mask, sample_ratio, Strategy};

/// Notes grouped into bars of the given sizes, one beat per note pair.
fn bars(sizes: &[usize]) -> Vec<ScoreNote> {
    let mut out = Vec::new();
    for (b, &k) in sizes.iter().enumerate() {
        for j in 0..k {
            let i = out.len();
            out.push(ScoreNote {
                pitch: 60 + (j % 12) as u8,
                onset: b as f64 + j as f64 / k as f64,
                position: j as f64 / k as f64,
                position_shift: 0.1,
                duration: 0.1,
                bar_index: b as u32,
                beat_index: (i / 2) as u32,
                is_downbeat: j == 0,
            });
        }
    }
    out
}

fn unit_of(s: &ScoreNote, strategy: Strategy) -> u32 {
    if strategy == Strategy::Bars {
        s.bar_index
    } else {
        s.beat_index
    }
}

#[test]
fn ratio_mean_and_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws: Vec<f64> = (0..100_000).map(|_| sample_ratio(&mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    assert!(draws.iter().all(|&r| (0.1..=0.9).contains(&r)));
    let lo = draws.iter().cloned().fold(1.0, f64::min);
    let hi = draws.iter().cloned().fold(0.0, f64::max);
    assert!(lo < 0.1001 && hi > 0.8999);
    let mut a = ChaCha8Rng::seed_from_u64(3);
    let mut b = ChaCha8Rng::seed_from_u64(3);
    assert!((0..100).all(|_| sample_ratio(&mut a) == sample_ratio(&mut b)));
}

#[test]
fn four_bars_half_ratio_is_minimal_union() {
    let seq = bars(&[3, 5, 2, 6]);
    let n = seq.len() as f64;
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = sample_mask(Strategy::Bars, &seq, 0.5, &mut rng).unwrap();
        let chosen: BTreeSet<u32> = seq.iter().zip(&m.mask).filter(|(_, &b)| b).map(|(s, _)| s.bar_index).collect();
        // union of complete bars
        for (s, &b) in seq.iter().zip(&m.mask) {
            assert_eq!(b, chosen.contains(&s.bar_index));
        }
        assert!(m.count() as f64 >= 0.5 * n);
        // overshoot by at most one bar: some chosen bar is needed to reach the ratio
        let size = |b: u32| seq.iter().filter(|s| s.bar_index == b).count();
        assert!(chosen.iter().any(|&b| ((m.count() - size(b)) as f64) < 0.5 * n), "seed {seed}");
    }
}

#[test]
fn plan_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 5];
    let mut total = 0;
    for _ in 0..10_000 {
        let plan = batch_mask_plan(8, &mut rng);
        assert_eq!(plan.iter().filter(|&&s| s == Strategy::Full).count(), 4);
        for s in plan.into_iter().filter(|&s| s != Strategy::Full) {
            counts[Strategy::PARTIAL.iter().position(|&p| p == s).unwrap()] += 1;
            total += 1;
        }
    }
    for c in counts {
        assert!((c as f64 / total as f64 - 0.2).abs() < 0.02);
    }
    let plan = batch_mask_plan(2, &mut rng);
    assert_eq!(plan.iter().filter(|&&s| s == Strategy::Full).count(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn masks_are_structured_and_leave_context(
        sizes in prop::collection::vec(1usize..8, 1..10),
        ratio in 0.1f64..=0.9,
        seed in any::<u64>(),
        k in 0usize..5,
    ) {
        let seq = bars(&sizes);
        let n = seq.len();
        let strategy = Strategy::PARTIAL[k];
        let m = sample_mask(strategy, &seq, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let again = sample_mask(strategy, &seq, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&m, &again);
        prop_assert_eq!(m.mask.len(), n);
        if n >= 2 {
            prop_assert!(m.count() < n);
        }
        prop_assert!(m.count() >= 1);
        match strategy {
            Strategy::RandomNotes if n >= 2 => {
                let want = ratio * n as f64;
                prop_assert!((m.count() as f64 - want).abs() <= 1.0);
            }
            Strategy::Beats | Strategy::Bars => {
                let units: BTreeSet<u32> = seq.iter().map(|s| unit_of(s, strategy)).collect();
                if units.len() >= 2 {
                    let chosen: BTreeSet<u32> =
                        seq.iter().zip(&m.mask).filter(|(_, &b)| b).map(|(s, _)| unit_of(s, strategy)).collect();
                    for (s, &b) in seq.iter().zip(&m.mask) {
                        prop_assert_eq!(b, chosen.contains(&unit_of(s, strategy)));
                    }
                }
            }
            Strategy::Segment | Strategy::EndOfSequence => {
                let first = m.mask.iter().position(|&b| b).unwrap();
                prop_assert!(m.mask[first..first + m.count()].iter().all(|&b| b));
                if strategy == Strategy::EndOfSequence {
                    prop_assert!(m.mask[n - 1]);
                }
            }
            _ => {}
        }
    }
}
