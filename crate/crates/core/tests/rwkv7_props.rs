use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwkvx::{rwkv7_forward, transition_matrix, Matrix, Rwkv7Inputs, Rwkv7State};

fn random_inputs(rng: &mut ChaCha8Rng, d_k: usize, d_v: usize, zero_a: bool) -> Rwkv7Inputs<f64> {
    let mut vec = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
    let w = vec(d_k, 0.05, 1.0);
    let a = if zero_a { vec![0.0; d_k] } else { vec(d_k, 0.0, 1.0) };
    let kappa = vec(d_k, -1.0, 1.0);
    let k_tilde = vec(d_k, -1.0, 1.0);
    let v = vec(d_v, -1.0, 1.0);
    let r = vec(d_k, -1.0, 1.0);
    Rwkv7Inputs::new(w.into(), a.into(), kappa.into(), k_tilde.into(), v.into(), r.into()).unwrap()
}

fn sequence(seed: u64, len: usize, d_k: usize, d_v: usize, zero_a: bool) -> Vec<Rwkv7Inputs<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| random_inputs(&mut rng, d_k, d_v, zero_a)).collect()
}

fn bits(m: &Matrix<f64>) -> Vec<u64> {
    m.data().iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prefix_split_is_bitwise_identical(seed in 0u64..10_000, len in 2usize..48, cut in 1usize..47, d_k in 1usize..6, d_v in 1usize..6) {
        let cut = cut.min(len - 1);
        let seq = sequence(seed, len, d_k, d_v, false);
        let (whole_y, whole_s) = rwkv7_forward(&seq, Rwkv7State::zeros(d_v, d_k)).unwrap();
        let (head_y, mid) = rwkv7_forward(&seq[..cut], Rwkv7State::zeros(d_v, d_k)).unwrap();
        let (tail_y, end) = rwkv7_forward(&seq[cut..], mid).unwrap();
        prop_assert_eq!(bits(&whole_s.s), bits(&end.s));
        let joined: Vec<_> = head_y.into_iter().chain(tail_y).collect();
        prop_assert_eq!(joined, whole_y);
    }

    #[test]
    fn step_matches_dense_transition_product(seed in 0u64..10_000, len in 1usize..16, d_k in 1usize..6, d_v in 1usize..6) {
        let seq = sequence(seed, len, d_k, d_v, false);
        let mut s = Matrix::<f64>::zeros(d_v, d_k);
        for x in &seq {
            let m = transition_matrix(&x.w, &x.kappa_hat, &x.a).unwrap();
            let mut next = Matrix::zeros(d_v, d_k);
            for r in 0..d_v {
                for c in 0..d_k {
                    let mut acc = 0.0;
                    for j in 0..d_k {
                        acc += s[(r, j)] * m[(j, c)];
                    }
                    next[(r, c)] = acc + x.v[r] * x.k_tilde[c];
                }
            }
            s = next;
        }
        let (_, state) = rwkv7_forward(&seq, Rwkv7State::zeros(d_v, d_k)).unwrap();
        prop_assert!(state.s.max_abs_diff(&s) < 1e-12);
    }
}

#[test]
fn zero_learning_rate_follows_closed_form_decay() {
    let (d_k, d_v) = (4, 3);
    for seed in 0..20 {
        let seq = sequence(seed, 64, d_k, d_v, true);
        let mut state = Rwkv7State::zeros(d_v, d_k);
        for t in 0..seq.len() {
            state.step(&seq[t]).unwrap();
            // S_t[r][c] = Σ_τ v_τ[r]·k̃_τ[c]·Π_{σ>τ} w_σ[c]
            for r in 0..d_v {
                for c in 0..d_k {
                    let mut expect = 0.0;
                    for tau in 0..=t {
                        let decay: f64 = seq[tau + 1..=t].iter().map(|x| x.w[c]).product();
                        expect += seq[tau].v[r] * seq[tau].k_tilde[c] * decay;
                    }
                    assert!((state.s[(r, c)] - expect).abs() < 1e-10, "seed {seed} t {t}");
                }
            }
        }
    }
}

#[test]
fn removal_key_is_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let d = rng.gen_range(1..64);
        let scale = 10f64.powi(rng.gen_range(-6..6));
        let x = random_inputs(&mut rng, d, 2, false);
        let kappa: Vec<f64> = x.kappa_hat.iter().map(|k| k * scale).collect();
        let y = Rwkv7Inputs::new(x.w.clone(), x.a.clone(), kappa.into(), x.k_tilde, x.v, x.r).unwrap();
        assert!((y.kappa_hat.norm() - 1.0).abs() < 1e-9);
    }
}
