//! Local adaptation and the global value-predictor step.

use memiml::imitation::{global_step, local_adapt, local_loss, rec_loss, LocalAdaptConfig};
use memiml::memory::{MemorySlot, TaskMemory};
use memiml::nets::{ValueKind, ValuePredictor};
use memiml::{ParamSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn single_slot_fixed_point() {
    // g(k) = k w; each step scales the residual by 1 - k^2
    for (k, v, w0) in [(1.0, 3.0, 0.0), (0.8, -2.0, 1.5), (1.2, 0.5, -1.0), (0.9, 10.0, 0.0)] {
        let vp = ValuePredictor::linear(1, 1, ValueKind::Vector);
        let omega = ParamSet::new().with("vp.w", Tensor::matrix(1, 1, vec![w0]));
        let mut mem = TaskMemory::new(1, 1, 1).unwrap();
        mem.write(MemorySlot::new(Tensor::vector(vec![k]), Tensor::vector(vec![v]))).unwrap();
        let s = &mem.slots()[0];
        let (keys, values) = (s.key.reshape(vec![1, 1]).unwrap(), s.value.reshape(vec![1, 1]).unwrap());
        let cfg = LocalAdaptConfig { gamma: 0.0, steps: 20, step_size: 0.5 };
        let adapted = local_adapt(&vp, &omega, &keys, &values, &cfg).unwrap();
        let pred = vp.predict(&adapted, &s.key).unwrap().item();
        assert!((pred - v).abs() < 1e-6, "k={k}: predicted {pred}, stored {v}");
        // omega itself is untouched
        assert_eq!(omega.require("vp.w").unwrap().item(), w0);
    }
}

#[test]
fn proximal_term_pulls_toward_anchor() {
    // ||w~ - w|| after any number of steps shrinks as gamma grows (quadratic case)
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let vp = ValuePredictor::linear(3, 2, ValueKind::Vector);
        let omega = vp.init_params(&mut rng);
        let keys = batch(&mut rng, 4, 3);
        let values = batch(&mut rng, 4, 2);
        let mut last = f64::INFINITY;
        for gamma in [0.0, 0.05, 0.3, 1.0, 4.0] {
            let cfg = LocalAdaptConfig { gamma, steps: 50, step_size: 0.05 };
            let adapted = local_adapt(&vp, &omega, &keys, &values, &cfg).unwrap();
            let d = adapted.l2_distance(&omega).unwrap();
            assert!(d <= last + 1e-12, "gamma {gamma}: distance {d} > {last}");
            last = d;
        }
    }
}

#[test]
fn zero_steps_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vp = ValuePredictor::new(3, 5, 2, ValueKind::Label);
    let omega = vp.init_params(&mut rng);
    let keys = batch(&mut rng, 3, 3);
    let values = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    let cfg = LocalAdaptConfig { gamma: 0.1, steps: 0, step_size: 0.5 };
    assert_eq!(local_adapt(&vp, &omega, &keys, &values, &cfg).unwrap(), omega);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn local_adaptation_descends(seed in any::<u64>(), gamma in 0.0f64..1.0, rows in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vp = ValuePredictor::new(4, 6, 2, ValueKind::Vector);
        let omega = vp.init_params(&mut rng);
        let keys = batch(&mut rng, rows, 4);
        let values = batch(&mut rng, rows, 2);
        let before = local_loss(&vp, &omega, &omega, &keys, &values, gamma).unwrap();
        let cfg = LocalAdaptConfig { gamma, steps: 5, step_size: 0.05 };
        let adapted = local_adapt(&vp, &omega, &keys, &values, &cfg).unwrap();
        let after = local_loss(&vp, &omega, &adapted, &keys, &values, gamma).unwrap();
        prop_assert!(after <= before + 1e-12, "{after} > {before}");
    }

    #[test]
    fn global_step_descends(seed in any::<u64>(), rows in 1usize..8, label in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = if label { ValueKind::Label } else { ValueKind::Vector };
        let vp = ValuePredictor::new(4, 6, 2, kind);
        let omega = vp.init_params(&mut rng);
        let keys = batch(&mut rng, rows, 4);
        let values = if label {
            let data = (0..rows).flat_map(|_| if rng.random::<bool>() { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
            Tensor::matrix(rows, 2, data)
        } else {
            batch(&mut rng, rows, 2)
        };
        let before = rec_loss(&vp, &omega, &keys, &values).unwrap();
        let stepped = global_step(&vp, &omega, &keys, &values, 0.01).unwrap();
        let after = rec_loss(&vp, &stepped, &keys, &values).unwrap();
        prop_assert!(after <= before + 1e-12, "{after} > {before}");
    }
}
