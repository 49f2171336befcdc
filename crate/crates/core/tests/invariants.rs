//! Property tests for the spec-level invariants that hold for all inputs.

mod support;

use proptest::prelude::*;
use vqcd_core::diffusion::NoiseSchedule;
use vqcd_core::mask::{apply_mask, generate_mask, BitMask, CapacityLedger};
use vqcd_core::qsa::{clip_codebook, pad_align, quantize_rows};
use vqcd_core::rng::substream;
use vqcd_core::suite::normalized_score;
use vqcd_core::tensor::{CheckpointMeta, ParameterStore, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_stay_disjoint_and_complete(
        n_tasks in 1usize..6,
        rows in 1usize..7,
        cols in 1usize..9,
        seed in 0u64..500,
    ) {
        let shapes = vec![("w".to_string(), vec![rows, cols])];
        let mut ledger = CapacityLedger::new(&shapes, n_tasks, 1.0 / n_tasks as f64).unwrap();
        let n = rows * cols;
        let mut coverage = vec![0usize; n];
        for task in 1..=n_tasks {
            let mut rng = substream(seed, &[task as u64]);
            let mask = generate_mask(task, task, &mut ledger, seed, &mut rng).unwrap();
            for i in mask.bits("w").unwrap().iter_ones() {
                coverage[i] += 1;
            }
            // Partial sums never exceed one.
            prop_assert!(coverage.iter().all(|&c| c <= 1));
        }
        // After all tasks the union is complete.
        prop_assert!(coverage.iter().all(|&c| c == 1));
    }

    #[test]
    fn mask_generation_is_deterministic(seed in 0u64..1000) {
        let shapes = vec![("a".to_string(), vec![9]), ("b".to_string(), vec![4, 3])];
        let draw = || {
            let mut ledger = CapacityLedger::new(&shapes, 3, 1.0 / 3.0).unwrap();
            let mut rng = substream(seed, &[7]);
            generate_mask(0, 1, &mut ledger, seed, &mut rng).unwrap()
        };
        let (m1, m2) = (draw(), draw());
        for (name, _, bits) in m1.entries() {
            prop_assert_eq!(bits, m2.bits(name).unwrap());
        }
    }

    #[test]
    fn apply_mask_equals_elementwise_product(
        values in prop::collection::vec(-10.0f32..10.0, 1..64),
        bits in prop::collection::vec(prop::bool::ANY, 1..64),
    ) {
        let n = values.len().min(bits.len());
        let values = &values[..n];
        let t = Tensor::new(vec![n], values.to_vec()).unwrap();
        let mut m = BitMask::zeros(n);
        for (i, &b) in bits[..n].iter().enumerate() {
            m.set(i, b);
        }
        let out = apply_mask(&t, &m).unwrap();
        for i in 0..n {
            let expect = values[i] * if bits[i] { 1.0 } else { 0.0 };
            prop_assert_eq!(out.data()[i], expect);
        }
    }

    #[test]
    fn quantize_is_idempotent_and_matches_scan(
        codes in prop::collection::vec(-2.0f32..2.0, 8..64),
        probes in prop::collection::vec(-3.0f32..3.0, 2..40),
    ) {
        let d = 2usize;
        let n_codes = codes.len() / d;
        prop_assume!(n_codes >= 1);
        let codebook = &codes[..n_codes * d];
        let rows = &probes[..(probes.len() / d) * d];
        prop_assume!(!rows.is_empty());
        let (z_q, idx) = quantize_rows(codebook, n_codes, d, rows);
        // Idempotence with identical indices.
        let (z_q2, idx2) = quantize_rows(codebook, n_codes, d, &z_q);
        prop_assert_eq!(&z_q, &z_q2);
        prop_assert_eq!(&idx, &idx2);
        // Brute-force scan agreement.
        for (r, &got) in idx.iter().enumerate() {
            let row = &rows[r * d..(r + 1) * d];
            let mut best = 0usize;
            let mut best_d = f32::INFINITY;
            for c in 0..n_codes {
                let code = &codebook[c * d..(c + 1) * d];
                let dist: f32 = row.iter().zip(code).map(|(x, e)| (x - e) * (x - e)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            prop_assert_eq!(got, best);
        }
    }

    #[test]
    fn clip_codebook_enforces_bound(
        codes in prop::collection::vec(-5.0f32..5.0, 2..64),
        rho in 0.5f32..4.0,
    ) {
        let d = 2usize;
        let n = (codes.len() / d) * d;
        let mut codebook = codes[..n].to_vec();
        clip_codebook(&mut codebook, d, rho);
        for code in codebook.chunks(d) {
            let n2: f32 = code.iter().map(|&v| v * v).sum();
            prop_assert!(n2 <= rho + 1e-5, "norm^2 {} > rho {}", n2, rho);
        }
    }

    #[test]
    fn pad_align_round_trips(
        x in prop::collection::vec(-10.0f32..10.0, 1..16),
        extra in 0usize..8,
    ) {
        let d_max = x.len() + extra;
        let padded = pad_align(&x, d_max).unwrap();
        prop_assert_eq!(padded.len(), d_max);
        prop_assert_eq!(&padded[..x.len()], x.as_slice());
        prop_assert!(padded[x.len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schedule_monotone_for_any_length(k_max in 1usize..400) {
        let s = NoiseSchedule::cosine(k_max).unwrap();
        for k in 1..=k_max {
            prop_assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            prop_assert!(s.beta(k) > 0.0 && s.beta(k) <= 0.999);
        }
    }

    #[test]
    fn normalized_score_is_affine(
        r_random in -500.0f64..-10.0,
        gap in 1.0f64..400.0,
        alpha in 0.0f64..1.0,
    ) {
        let r_expert = r_random + gap;
        let r = alpha * r_expert + (1.0 - alpha) * r_random;
        let s = normalized_score(r, r_random, r_expert).unwrap();
        prop_assert!((s - alpha * 100.0).abs() < 1e-7);
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(
        data in prop::collection::vec(prop::num::f32::NORMAL, 1..48),
        step in 0u64..u64::MAX,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParameterStore::new();
        store.insert("p.w", Tensor::new(vec![data.len()], data.clone()).unwrap());
        let meta = CheckpointMeta {
            task_id: Some(1),
            step,
            seed: 3,
            config_hash: 9,
            extra: Default::default(),
        };
        let path = dir.path().join("c.ckpt");
        store.save(&path, &meta).unwrap();
        let (loaded, meta2) = ParameterStore::load(&path).unwrap();
        prop_assert_eq!(meta2.step, step);
        let a: Vec<u32> = store.get("p.w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = loaded.get("p.w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}
