use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use symupe_core::flow::{guided_field, make_training_target, masked_cfm_loss, ot_interpolate, ot_target_field};
use symupe_tensor::Array;

fn arr(v: Vec<f64>) -> Array {
    let n = v.len() / 4;
    Array::from_vec(&[n, 4], v).unwrap()
}

fn rows(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n * 4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn path_derivative_matches_field(
        (x0, x1) in (1usize..6).prop_flat_map(|n| (rows(n), rows(n))),
        t in 0.01f64..0.99,
        sigma in 0.0f64..0.5,
    ) {
        let (x0, x1) = (arr(x0), arr(x1));
        let h = 1e-3;
        let plus = ot_interpolate(&x0, &x1, t + h, sigma).unwrap();
        let minus = ot_interpolate(&x0, &x1, t - h, sigma).unwrap();
        let u = ot_target_field(&x0, &x1, sigma).unwrap();
        for ((p, m), ui) in plus.data().iter().zip(minus.data()).zip(u.data()) {
            let fd = (p - m) / (2.0 * h);
            prop_assert!((fd - ui).abs() / ui.abs().max(1.0) < 1e-8, "fd {fd} vs {ui}");
        }
    }

    #[test]
    fn loss_ignores_unmasked_entries(
        (v, u, noise, mask) in (1usize..8).prop_flat_map(|n| (rows(n), rows(n), rows(n), prop::collection::vec(any::<bool>(), n))),
    ) {
        let (v, u) = (arr(v), arr(u));
        let base = masked_cfm_loss(&v, &u, &mask).unwrap();
        let mut v2 = v.clone();
        let mut u2 = u.clone();
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                for c in 0..4 {
                    v2.row_mut(i)[c] += noise[i * 4 + c];
                    u2.row_mut(i)[c] -= noise[i * 4 + c];
                }
            }
        }
        let perturbed = masked_cfm_loss(&v2, &u2, &mask).unwrap();
        prop_assert_eq!(base.value.to_bits(), perturbed.value.to_bits());
        prop_assert_eq!(base.degenerate, !mask.iter().any(|&m| m));
    }

    #[test]
    fn guidance_of_equal_fields_is_identity(v in (1usize..6).prop_flat_map(rows), alpha in -3.0f64..5.0) {
        let v = arr(v);
        prop_assert_eq!(guided_field(&v, &v, alpha).unwrap(), v);
    }
}

#[test]
fn training_target_is_reproducible_and_masks_context() {
    let x1 = arr((0..24).map(|i| i as f64 * 0.1).collect());
    let all = vec![true; 6];
    let none = vec![false; 6];
    let a = make_training_target(&x1, &all, &mut ChaCha8Rng::seed_from_u64(5), 1e-4).unwrap();
    let b = make_training_target(&x1, &all, &mut ChaCha8Rng::seed_from_u64(5), 1e-4).unwrap();
    assert_eq!(a, b);
    assert!(a.x_ctx.data().iter().all(|&x| x == 0.0));
    let c = make_training_target(&x1, &none, &mut ChaCha8Rng::seed_from_u64(5), 1e-4).unwrap();
    assert_eq!(c.x_ctx, x1);
    assert_eq!(c.x_t, ot_interpolate(&c.x0, &x1, c.t, 1e-4).unwrap());
}
