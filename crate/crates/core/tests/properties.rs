mod common;

use aqm::aqm::{compression_rate, AqmStack, InputShape, LevelConfig, StackConfig};
use aqm::autodiff::Tensor;
use aqm::memory::{tv_to_uniform, MemoryBuffer, Policy, ENTRY_METADATA_BYTES};
use aqm::metrics::snnrmse;
use aqm::streamio::checkpoint;
use common::{image, MockCompressor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    proptest::collection::vec(proptest::array::uniform3(-10.0f64..10.0), 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reservoir_holds_min_of_seen_and_slots(slots in 1usize..40, stream in 0usize..300, seed in any::<u64>()) {
        let dims = [1, 2, 3];
        let comp = MockCompressor::raw(dims);
        let per = 6 + ENTRY_METADATA_BYTES;
        let mut mem = MemoryBuffer::new(slots * per + per / 2, 0, 6, Policy::Reservoir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed >> 1);
        for t in 0..stream {
            mem.add_to_memory(&image(dims, 0.4), None, t as u32, &comp, 0.0, &mut rng).unwrap();
            prop_assert!(mem.used() <= mem.budget());
        }
        prop_assert_eq!(mem.len(), stream.min(slots));
        prop_assert_eq!(mem.seen(), stream as u64);
    }

    #[test]
    fn kde_policy_stays_within_budget(capacity in 40usize..400, n in 1usize..200, seed in any::<u64>()) {
        let dims = [1, 2, 2];
        let comp = MockCompressor::leveled(dims, 0.0);
        let mut mem = MemoryBuffer::new(capacity, 0, 4, Policy::Kde).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed >> 1);
        for t in 0..n {
            let xs: Vec<Tensor> = (0..3).map(|_| image(dims, rng.gen_range(0.0..1.0))).collect();
            mem.add_batch(&xs, &[None, Some(2), None], t as u32, &comp, 0.0, &mut rng).unwrap();
            prop_assert!(mem.used() <= mem.budget());
        }
        prop_assert!(!mem.is_empty());
    }

    #[test]
    fn tv_is_a_distance_to_uniform(ts in proptest::collection::vec(0u32..1000, 1..300), bins in 1usize..30) {
        let d = tv_to_uniform(&ts, 0, 1000, bins);
        prop_assert!((0.0..=1.0).contains(&d));
        // A single bin is always uniform.
        prop_assert_eq!(tv_to_uniform(&ts, 0, 1000, 1), 0.0);
    }

    #[test]
    fn tv_of_evenly_spread_timestamps_is_zero(bins in 1u32..20, per in 1u32..10) {
        let ts: Vec<u32> = (0..bins * per).collect();
        prop_assert!(tv_to_uniform(&ts, 0, bins * per, bins as usize) < 1e-12);
    }

    #[test]
    fn snnrmse_is_symmetric_and_translation_invariant(a in points(30), b in points(30), shift in proptest::array::uniform3(-5.0f64..5.0)) {
        let ab = snnrmse(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, snnrmse(&b, &a).unwrap());
        let mv = |p: &[[f64; 3]]| -> Vec<[f64; 3]> { p.iter().map(|q| [q[0] + shift[0], q[1] + shift[1], q[2] + shift[2]]).collect() };
        prop_assert!((snnrmse(&mv(&a), &mv(&b)).unwrap() - ab).abs() < 1e-9);
    }

    #[test]
    fn rate_matches_the_bit_ratio(c in 1usize..5, hw in 1usize..64, lh in 1usize..32, nc in 1usize..4, k in 2usize..2048) {
        let r = compression_rate(InputShape::new(c, hw, hw), lh, lh, nc, k).unwrap();
        let bits = usize::BITS - (k - 1).leading_zeros();
        let expect = (c * hw * hw * 8) as f64 / (nc * lh * lh) as f64 / bits as f64;
        prop_assert!((r.value() - expect).abs() <= 1e-12 * expect);
        prop_assert_eq!(num_gcd(r.numerator, r.denominator), 1);
    }

    #[test]
    fn checkpoint_round_trips_random_buffers(seed in any::<u64>(), n in 0usize..40, train in 0usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = StackConfig::new(InputShape::new(1, 8, 8), vec![LevelConfig::new(4, 16, 1), LevelConfig::new(2, 4, 1)]);
        cfg.seed = seed >> 2;
        let mut stack = AqmStack::new(cfg).unwrap();
        for _ in 0..train {
            stack.train_step(&Tensor::from_fn(&[4, 1, 8, 8], |_| r.gen_range(0.0..1.0))).unwrap();
        }
        if r.gen_bool(0.3) {
            stack.level_mut(1).freeze();
        }
        let policy = if r.gen_bool(0.5) { Policy::Kde } else { Policy::Reservoir };
        let mut mem = MemoryBuffer::new(stack.model_bytes() + 3000, stack.model_bytes(), 64, policy).unwrap();
        for t in 0..n {
            let x = Tensor::from_fn(&[1, 8, 8], |_| r.gen_range(0.0..1.0));
            let label = r.gen_bool(0.8).then(|| r.gen_range(0..10u16));
            mem.add_to_memory(&x, label, t as u32, &stack, r.gen_range(0.0..0.2), &mut r).unwrap();
        }
        let bytes = checkpoint::to_bytes(&stack, &mem).unwrap();
        prop_assert_eq!(bytes.len(), stack.model_bytes() + mem.used());
        let (s2, m2) = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(checkpoint::to_bytes(&s2, &m2).unwrap(), bytes);
        prop_assert_eq!(m2.len(), mem.len());
        prop_assert_eq!(m2.policy(), mem.policy());
        prop_assert_eq!(s2.level(1).is_frozen(), stack.level(1).is_frozen());
    }
}

fn num_gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        num_gcd(b, a % b)
    }
}
