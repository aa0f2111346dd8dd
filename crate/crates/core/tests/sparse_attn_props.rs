use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwkvx::sparse_attn::{
    attention_weights, decode_step_traced, full_attention_oracle, prefill_traced, sparse_attend, sparse_attend_backward,
};
use rwkvx::tensor::finite_diff_grad;
use rwkvx::{prefill, AttnConfig, KvCache, Matrix};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn cfg(b: usize, k: usize, d: usize) -> AttnConfig {
    AttnConfig {
        chunk_size: b,
        top_k: k,
        d_k: d,
        d_v: d,
        cache_budget: None,
        obs_window: b,
    }
}

fn qkv(seed: u64, n: usize, d: usize) -> (Matrix<f64>, Matrix<f64>, Matrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (random(&mut rng, n, d), random(&mut rng, n, d), random(&mut rng, n, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn saturated_top_k_equals_dense_oracle(seed in 0u64..10_000, n in 1usize..96, b in 1usize..20, d in 1usize..9) {
        let (q, k, v) = qkv(seed, n, d);
        let sparse = prefill(&q, &k, &v, &cfg(b, n.div_ceil(b), d)).unwrap();
        let dense = full_attention_oracle(&q, &k, &v, d, true).unwrap();
        prop_assert!(sparse.max_abs_diff(&dense) < 1e-10);
    }

    #[test]
    fn outputs_ignore_future_tokens(seed in 0u64..10_000, n in 2usize..64, b in 1usize..9, k in 1usize..4, at in 0usize..63) {
        let at = at % (n - 1);
        let d = 4;
        let (q, keys, v) = qkv(seed, n, d);
        let base = prefill(&q, &keys, &v, &cfg(b, k, d)).unwrap();
        let (q2, k2, v2) = qkv(seed + 1, n, d);
        let splice = |a: &Matrix<f64>, b: &Matrix<f64>| a.slice_rows(0, at + 1).vstack(&b.slice_rows(at + 1, n)).unwrap();
        let moved = prefill(&splice(&q, &q2), &splice(&keys, &k2), &splice(&v, &v2), &cfg(b, k, d)).unwrap();
        prop_assert_eq!(base.slice_rows(0, at + 1), moved.slice_rows(0, at + 1));
    }

    #[test]
    fn attended_sets_nest_in_k_and_respect_bound(seed in 0u64..10_000, n in 1usize..80, b in 1usize..9, k in 1usize..5) {
        let d = 3;
        let (q, keys, v) = qkv(seed, n, d);
        let (_, small) = prefill_traced(&q, &keys, &v, &cfg(b, k, d)).unwrap();
        let (_, large) = prefill_traced(&q, &keys, &v, &cfg(b, k + 1, d)).unwrap();
        for (s, l) in small.iter().zip(&large) {
            prop_assert!(s.attended.iter().all(|i| l.attended.contains(i)));
            prop_assert!(s.attended.iter().all(|&i| i <= s.position));
            prop_assert!(s.attended.contains(&s.position));
            prop_assert!(s.attended.len() <= k * b + b);
        }
    }

    #[test]
    fn weights_form_a_distribution(seed in 0u64..10_000, n in 1usize..40, d in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let keys = random(&mut rng, n, d);
        let w = attention_weights(&q, &keys, d).unwrap();
        prop_assert!(w.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_reproduces_prefill_rows(seed in 0u64..10_000, n in 1usize..64, b in 1usize..9, k in 1usize..4) {
        let d = 4;
        let (q, keys, v) = qkv(seed, n, d);
        let c = cfg(b, k, d);
        let (full, trace) = prefill_traced(&q, &keys, &v, &c).unwrap();
        let mut cache = KvCache::new(d, d, None, b).unwrap();
        for t in 0..n {
            cache.append(q.row(t), keys.row(t), v.row(t)).unwrap();
            let (y, tr) = decode_step_traced(q.row(t), &cache, &c).unwrap();
            prop_assert_eq!(y.as_slice(), full.row(t));
            prop_assert_eq!(&tr, &trace[t]);
        }
    }
}

#[test]
fn backward_matches_central_differences() {
    let (b, chunks, d) = (4, 4, 8);
    let n = b * chunks;
    let eps = 1e-5;
    for seed in 0..25 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let keys = random(&mut rng, n, d);
        let values = random(&mut rng, n, d);
        let g: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |q: &[f64], k: &Matrix<f64>, v: &Matrix<f64>| -> f64 {
            let y = sparse_attend(q, k, v, d).unwrap();
            y.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let grads = sparse_attend_backward(&q, &keys, &values, d, &g).unwrap();
        let close = |analytic: &[f64], numeric: &[f64]| {
            for (a, n) in analytic.iter().zip(numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel <= 1e-4 || (a - n).abs() < 1e-9, "seed {seed}: {a} vs {n}");
            }
        };
        close(
            &grads.dq,
            &finite_diff_grad(|x| loss(x, &keys, &values), &q, eps).unwrap(),
        );
        let dk = finite_diff_grad(
            |x| loss(&q, &Matrix::new(n, d, x.to_vec()).unwrap(), &values),
            keys.data(),
            eps,
        )
        .unwrap();
        close(grads.dk.data(), &dk);
        let dv = finite_diff_grad(
            |x| loss(&q, &keys, &Matrix::new(n, d, x.to_vec()).unwrap()),
            values.data(),
            eps,
        )
        .unwrap();
        close(grads.dv.data(), &dv);
    }
}
