//! Invariant checks shared by `rwkvx verify` and the acceptance suite. Each
//! check compares an engine path against an independent oracle and reports a
//! single pass/fail outcome with its worst observed deviation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwkvx::bench::{compare_sparse_full, fit_power_law, median, random_matrix, CompareOptions};
use rwkvx::model::expansion_positions;
use rwkvx::sparse_attn::{decode_step_traced, full_attention_oracle, sparse_attend, sparse_attend_backward};
use rwkvx::tensor::finite_diff_grad;
use rwkvx::{
    importance_scores, load_checkpoint, prefill, rwkv7_forward, save_checkpoint, AttnConfig, KvCache, Matrix, Mode,
    Model, ModelConfig, Result, Rwkv7Inputs, Rwkv7State,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

type CheckFn = fn(&ModelConfig, u64) -> Result<CheckOutcome>;

/// Checks run by `verify`, in order.
pub const VERIFY_CHECKS: [(&str, CheckFn); 9] = [
    ("oracle_equivalence", oracle_equivalence),
    ("decode_prefill_consistency", decode_prefill_consistency),
    ("constant_memory_decode", constant_memory_decode),
    ("attended_set_bound", attended_set_bound),
    ("expansion_identity", expansion_identity),
    ("gradient_check", gradient_check),
    ("rwkv7_recurrence", rwkv7_recurrence),
    ("kv_compression", kv_compression),
    ("checkpoint_round_trip", checkpoint_round_trip),
];

pub fn check_names() -> impl Iterator<Item = &'static str> {
    VERIFY_CHECKS.iter().map(|(n, _)| *n)
}

/// Runs one named check; an engine error counts as a failure.
pub fn run_check(name: &'static str, f: CheckFn, cfg: &ModelConfig, seed: u64) -> CheckOutcome {
    f(cfg, seed).unwrap_or_else(|e| CheckOutcome::new(name, false, format!("error: {e}")))
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Saturated-k sparse prefill against the dense causal oracle, double
/// precision, `N ∈ {32, 128, 512}`, `B ∈ {4, 16, 64}`.
pub fn oracle_equivalence(cfg: &ModelConfig, seed: u64) -> Result<CheckOutcome> {
    let d = cfg.d_k.min(16);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in [32usize, 128, 512] {
        for b in [4usize, 16, 64] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n * 131 + b) as u64);
            let (q, k, v) = (
                random_mat(&mut rng, n, d),
                random_mat(&mut rng, n, d),
                random_mat(&mut rng, n, d),
            );
            let attn = AttnConfig {
                chunk_size: b,
                top_k: n.div_ceil(b),
                d_k: d,
                d_v: d,
                cache_budget: None,
                obs_window: b,
            };
            let sparse = prefill(&q, &k, &v, &attn)?;
            let dense = full_attention_oracle(&q, &k, &v, d, true)?;
            worst = worst.max(max_diff(sparse.data(), dense.data()));
            cases += 1;
        }
    }
    Ok(CheckOutcome::new(
        "oracle_equivalence",
        worst <= 1e-10,
        format!("max |sparse - dense| = {worst:.3e} over {cases} (N, B) cases, tolerance 1e-10"),
    ))
}

/// Token-by-token decode through the full hybrid stack against prefill of
/// the same prefix, compression disabled, up to 1024 tokens.
pub fn decode_prefill_consistency(cfg: &ModelConfig, seed: u64) -> Result<CheckOutcome> {
    const T: usize = 1024;
    let mut cfg = cfg.clone();
    cfg.attn.cache_budget = None;
    let model: Model<f64> = Model::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..T).map(|_| rng.gen_range(0..256)).collect();

    // Prefill is causal, so row t of one long prefill is the final row of the
    // prefill of tokens[..=t]; a few prefixes are also prefilled separately.
    let (all_rows, _) = model.prefill(&tokens)?;
    let mut state = model.fresh_state()?;
    let mut worst = 0.0f64;
    for (t, &tok) in tokens.iter().enumerate() {
        let y = model.decode(tok, &mut state)?;
        worst = worst.max(max_diff(&y, all_rows.row(t)));
    }
    for t in [1usize, 2, 63, 64, 65, 257, 700, T] {
        let (rows, _) = model.prefill(&tokens[..t])?;
        worst = worst.max(max_diff(rows.row(t - 1), all_rows.row(t - 1)));
    }
    Ok(CheckOutcome::new(
        "decode_prefill_consistency",
        worst <= 1e-10,
        format!("max |decode - prefill| = {worst:.3e} over t = 1..={T}, tolerance 1e-10"),
    ))
}

/// Stored entries after `8 (m + L_obs)` decode steps equal `m + L_obs`
/// exactly, for `m ∈ {256, 1024}`, `L_obs ∈ {16, 64}`.
pub fn constant_memory_decode(cfg: &ModelConfig, seed: u64) -> Result<CheckOutcome> {
    let d = cfg.d_k;
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for m in [256usize, 1024] {
        for l_obs in [16usize, 64] {
            let attn = AttnConfig {
                chunk_size: cfg.attn.chunk_size.min(l_obs),
                top_k: cfg.attn.top_k,
                d_k: d,
                d_v: cfg.d_v,
                cache_budget: Some(m),
                obs_window: l_obs,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (m * 7 + l_obs) as u64);
            let mut cache = KvCache::<f32>::for_config(&attn)?;
            let steps = 8 * (m + l_obs);
            let mut peak = 0;
            for _ in 0..steps {
                let q = random_matrix::<f32>(&mut rng, 1, d);
                let k = random_matrix::<f32>(&mut rng, 1, d);
                let v = random_matrix::<f32>(&mut rng, 1, attn.d_v);
                cache.append(q.row(0), k.row(0), v.row(0))?;
                decode_step_traced(q.row(0), &cache, &attn)?;
                peak = peak.max(cache.len());
            }
            if cache.len() != m + l_obs || peak != m + l_obs {
                failures.push(format!("m={m} L_obs={l_obs}: final {} peak {}", cache.len(), peak));
            }
            summary.push(format!(
                "m={m}/L_obs={l_obs}: {} entries after {steps} steps",
                cache.len()
            ));
        }
    }
    let passed = failures.is_empty();
    let detail = if passed {
        summary.join("; ")
    } else {
        failures.join("; ")
    };
    Ok(CheckOutcome::new("constant_memory_decode", passed, detail))
}

/// Instrumented decode over 10,000 random steps never attends more than
/// `k·B + L_obs` entries. Part of the steps use the configured attention
/// settings, the rest random valid settings.
pub fn attended_set_bound(cfg: &ModelConfig, seed: u64) -> Result<CheckOutcome> {
    const TOTAL: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = vec![(cfg.attn, 2_000usize)];
    let mut remaining = TOTAL - 2_000;
    while remaining > 0 {
        let b = rng.gen_range(1..=16);
        let l_obs = rng.gen_range(b..=32);
        let attn = AttnConfig {
            chunk_size: b,
            top_k: rng.gen_range(1..=4),
            d_k: 8,
            d_v: 8,
            cache_budget: Some(rng.gen_range(b..=64)),
            obs_window: l_obs,
        };
        let steps = rng.gen_range(100..=800).min(remaining);
        runs.push((attn, steps));
        remaining -= steps;
    }
    let mut worst_excess = i64::MIN;
    let mut violations = 0;
    let mut steps_run = 0;
    for (attn, steps) in &runs {
        let mut cache = KvCache::<f32>::for_config(attn)?;
        for _ in 0..*steps {
            let q = random_matrix::<f32>(&mut rng, 1, attn.d_k);
            let k = random_matrix::<f32>(&mut rng, 1, attn.d_k);
            let v = random_matrix::<f32>(&mut rng, 1, attn.d_v);
            cache.append(q.row(0), k.row(0), v.row(0))?;
            let (_, trace) = decode_step_traced(q.row(0), &cache, attn)?;
            let excess = trace.attended_count() as i64 - attn.attended_bound() as i64;
            worst_excess = worst_excess.max(excess);
            if excess > 0 {
                violations += 1;
            }
            steps_run += 1;
        }
    }
    Ok(CheckOutcome::new(
        "attended_set_bound",
        violations == 0 && steps_run == TOTAL,
        format!(
            "{violations} violations in {steps_run} steps over {} configurations; max (attended - bound) = {worst_excess}",
            runs.len()
        ),
    ))
}

/// Expanded-model logits equal base-model logits bitwise at initialization,
/// 50 random inputs for each of 5 random base models.
pub fn expansion_identity(cfg: &ModelConfig, seed: u64) -> Result<CheckOutcome> {
    let ratio = if cfg.attn_ratio > 0.0 { cfg.attn_ratio } else { 0.25 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut compared = 0;
    let mut added = 0;
    for b in 0..5u64 {
        let mut base_cfg = cfg.clone();
        base_cfg.attn_ratio = 0.0;
        base_cfg.seed = seed.wrapping_mul(31).wrapping_add(b);
        let base: Model<f64> = Model::new(base_cfg)?;
        let expanded = base.expand_blocks(&expansion_positions(base.layers().len(), ratio)?)?;
        added = expanded.layers().len() - base.layers().len();
        for _ in 0..50 {
            let len = rng.gen_range(1..=128);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..256)).collect();
            let (a, _) = base.forward(&tokens, Mode::Prefill)?;
            let (e, _) = expanded.forward(&tokens, Mode::Prefill)?;
            let same = a.data().iter().zip(e.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                mismatches += 1;
            }
            compared += 1;
        }
    }
    Ok(CheckOutcome::new(
        "expansion_identity",
        mismatches == 0,
        format!("{mismatches} of {compared} inputs differ bitwise (5 base models, {added} blocks inserted each)"),
    ))
}

fn gradient_rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Analytic sparse-attention gradients against central differences (eps
/// 1e-5) on 100 random instances of 4 chunks of 4 tokens, `d_k = d_v = 8`.
pub fn gradient_check(_cfg: &ModelConfig, seed: u64) -> Result<CheckOutcome> {
    const INSTANCES: usize = 100;
    let (n, d) = (16, 8);
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let q = random_vec(&mut rng, d, -1.0, 1.0);
        let keys = random_mat(&mut rng, n, d);
        let values = random_mat(&mut rng, n, d);
        let g = random_vec(&mut rng, d, -1.0, 1.0);
        let loss = |q: &[f64], k: &Matrix<f64>, v: &Matrix<f64>| -> f64 {
            let y = sparse_attend(q, k, v, d).expect("valid selection");
            y.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let grads = sparse_attend_backward(&q, &keys, &values, d, &g)?;
        let dq = finite_diff_grad(|x| loss(x, &keys, &values), &q, eps)?;
        let dk = finite_diff_grad(
            |x| loss(&q, &Matrix::new(n, d, x.to_vec()).unwrap(), &values),
            keys.data(),
            eps,
        )?;
        let dv = finite_diff_grad(
            |x| loss(&q, &keys, &Matrix::new(n, d, x.to_vec()).unwrap()),
            values.data(),
            eps,
        )?;
        for (a, b) in grads
            .dq
            .iter()
            .zip(dq.iter())
            .chain(grads.dk.data().iter().zip(dk.iter()))
            .chain(grads.dv.data().iter().zip(dv.iter()))
        {
            worst = worst.max(gradient_rel_err(*a, *b));
        }
    }
    Ok(CheckOutcome::new(
        "gradient_check",
        worst <= 1e-4,
        format!("max relative error {worst:.3e} over {INSTANCES} instances, tolerance 1e-4"),
    ))
}

fn rwkv_inputs(rng: &mut ChaCha8Rng, d_k: usize, d_v: usize, zero_a: bool) -> Result<Rwkv7Inputs<f64>> {
    let w = random_vec(rng, d_k, 0.05, 1.0);
    let a = if zero_a {
        vec![0.0; d_k]
    } else {
        random_vec(rng, d_k, 0.0, 1.0)
    };
    let kappa = random_vec(rng, d_k, -1.0, 1.0);
    let k_tilde = random_vec(rng, d_k, -1.0, 1.0);
    let v = random_vec(rng, d_v, -1.0, 1.0);
    let r = random_vec(rng, d_k, -1.0, 1.0);
    Rwkv7Inputs::new(w.into(), a.into(), kappa.into(), k_tilde.into(), v.into(), r.into())
}

/// Prefix-split equivalence (bitwise), zero-learning-rate closed form
/// (1e-10, t ≤ 64) and removal-key normalization (1e-9, 1000 draws).
pub fn rwkv7_recurrence(_cfg: &ModelConfig, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut split_mismatch = 0;
    for _ in 0..100 {
        let (d_k, d_v) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let len = rng.gen_range(2..=96);
        let cut = rng.gen_range(1..len);
        let seq = (0..len)
            .map(|_| rwkv_inputs(&mut rng, d_k, d_v, false))
            .collect::<Result<Vec<_>>>()?;
        let (y_all, s_all) = rwkv7_forward(&seq, Rwkv7State::zeros(d_v, d_k))?;
        let (y_head, mid) = rwkv7_forward(&seq[..cut], Rwkv7State::zeros(d_v, d_k))?;
        let (y_tail, s_end) = rwkv7_forward(&seq[cut..], mid)?;
        let same_state = s_all
            .s
            .data()
            .iter()
            .zip(s_end.s.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let same_out = y_head
            .iter()
            .chain(&y_tail)
            .zip(&y_all)
            .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        if !(same_state && same_out) {
            split_mismatch += 1;
        }
    }

    let mut closed_form_err = 0.0f64;
    for _ in 0..10 {
        let (d_k, d_v) = (4, 4);
        let seq = (0..64)
            .map(|_| rwkv_inputs(&mut rng, d_k, d_v, true))
            .collect::<Result<Vec<_>>>()?;
        let mut state = Rwkv7State::zeros(d_v, d_k);
        for t in 0..seq.len() {
            state.step(&seq[t])?;
            for r in 0..d_v {
                for c in 0..d_k {
                    let mut expect = 0.0;
                    for tau in 0..=t {
                        let decay: f64 = seq[tau + 1..=t].iter().map(|x| x.w[c]).product();
                        expect += seq[tau].v[r] * seq[tau].k_tilde[c] * decay;
                    }
                    closed_form_err = closed_form_err.max((state.s[(r, c)] - expect).abs());
                }
            }
        }
    }

    let mut norm_err = 0.0f64;
    for _ in 0..1000 {
        let d = rng.gen_range(1..=64);
        let scale = 10f64.powi(rng.gen_range(-8..=8));
        let kappa: Vec<f64> = random_vec(&mut rng, d, -1.0, 1.0).iter().map(|x| x * scale).collect();
        let x = Rwkv7Inputs::new(
            vec![0.5; d].into(),
            vec![0.5; d].into(),
            kappa.into(),
            vec![0.0; d].into(),
            vec![0.0; 1].into(),
            vec![0.0; d].into(),
        )?;
        norm_err = norm_err.max((x.kappa_hat.norm() - 1.0).abs());
    }

    Ok(CheckOutcome::new(
        "rwkv7_recurrence",
        split_mismatch == 0 && closed_form_err <= 1e-10 && norm_err <= 1e-9,
        format!(
            "prefix-split mismatches {split_mismatch}/100; closed-form max error {closed_form_err:.3e} (1e-10); \
             max | |κ̂| - 1 | {norm_err:.3e} over 1000 draws (1e-9)"
        ),
    ))
}

fn dense_importance(q: &Matrix<f64>, k: &Matrix<f64>, d: usize) -> Vec<f64> {
    let mut c = vec![0.0; k.rows()];
    for i in 0..q.rows() {
        let logits: Vec<f64> = (0..k.rows())
            .map(|j| (0..d).map(|x| q[(i, x)] * k[(j, x)]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (cj, l) in c.iter_mut().zip(&logits) {
            *cj += (l - max).exp() / z;
        }
    }
    c
}

/// Exhaustive top-m: among all size-m subsets, the one whose members'
/// (score, index) keys, sorted best first, are lexicographically greatest.
/// Higher index wins a score tie.
fn exhaustive_top_m(scores: &[f64], m: usize) -> Vec<usize> {
    type Keys = Vec<(f64, usize)>;
    let better = |a: (f64, usize), b: (f64, usize)| a.0 > b.0 || (a.0 == b.0 && a.1 > b.1);
    let mut best: Option<(Keys, Vec<usize>)> = None;
    for mask in 0u32..(1 << scores.len()) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let members: Vec<usize> = (0..scores.len()).filter(|&i| mask & (1 << i) != 0).collect();
        let mut keys: Keys = members.iter().map(|&i| (scores[i], i)).collect();
        keys.sort_by(|&a, &b| {
            if better(a, b) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        let wins = match &best {
            None => true,
            Some((bk, _)) => keys
                .iter()
                .zip(bk)
                .find(|(a, b)| a != b)
                .is_some_and(|(&a, &b)| better(a, b)),
        };
        if wins {
            best = Some((keys, members));
        }
    }
    best.map(|(_, m)| m).unwrap_or_default()
}

/// Importance scores against a dense softmax oracle (1e-10) and retention
/// against exhaustive enumeration for every past size ≤ 12 and every budget.
pub fn kv_compression(_cfg: &ModelConfig, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut score_err = 0.0f64;
    for _ in 0..200 {
        let d = rng.gen_range(1..=16);
        let q = Matrix::from_fn(rng.gen_range(1..=16), d, |_, _| rng.gen_range(-3.0..3.0));
        let k = Matrix::from_fn(rng.gen_range(1..=64), d, |_, _| rng.gen_range(-3.0..3.0));
        let c = importance_scores(&q, &k, d)?;
        score_err = score_err.max(max_diff(&c, &dense_importance(&q, &k, d)));
    }

    let mut wrong = 0;
    let mut cases = 0;
    let d = 2;
    for n_past in 1..=12usize {
        for m in 1..=n_past {
            for trial in 0..4 {
                let window = 1 + trial % 3;
                // Coarse value grids make equal scores common.
                let levels = (trial % 3) as i32;
                let n = n_past + window;
                let grid = |rng: &mut ChaCha8Rng| rng.gen_range(-levels..=levels) as f64 * 0.5;
                let q = Matrix::from_fn(n, d, |_, _| grid(&mut rng));
                let k = Matrix::from_fn(n, d, |_, _| grid(&mut rng));
                let v = Matrix::from_fn(n, 1, |r, _| r as f64);
                let scores = importance_scores(&q.slice_rows(n_past, n), &k.slice_rows(0, n_past), d)?;
                let cache = KvCache::from_sequence(&q, &k, &v, Some(m), window)?;
                let kept: Vec<usize> = cache.split().past_values.data().iter().map(|&x| x as usize).collect();
                if kept != exhaustive_top_m(&scores, m) || cache.obs_len() != window {
                    wrong += 1;
                }
                cases += 1;
            }
        }
    }
    Ok(CheckOutcome::new(
        "kv_compression",
        score_err <= 1e-10 && wrong == 0,
        format!("importance max error {score_err:.3e} (1e-10); retention mismatches {wrong}/{cases} against exhaustive top-m"),
    ))
}

/// Save, load and forward a model in both precisions; logits must be
/// bitwise identical.
pub fn checkpoint_round_trip(cfg: &ModelConfig, seed: u64) -> Result<CheckOutcome> {
    fn one<T: rwkvx::Scalar>(cfg: &ModelConfig, tokens: &[usize], tag: &str) -> Result<bool> {
        let model: Model<T> = Model::new(cfg.clone())?;
        let path = std::env::temp_dir().join(format!("rwkvx-verify-{}-{tag}.ckpt", std::process::id()));
        save_checkpoint(&model, &path)?;
        let loaded = load_checkpoint::<T>(&path);
        std::fs::remove_file(&path).ok();
        let loaded = loaded?;
        let (a, _) = model.forward(tokens, Mode::Prefill)?;
        let (b, _) = loaded.forward(tokens, Mode::Prefill)?;
        Ok(loaded == model && encode(&a) == encode(&b))
    }
    fn encode<T: rwkvx::Scalar>(m: &Matrix<T>) -> Vec<u8> {
        let mut out = Vec::with_capacity(m.data().len() * T::WIDTH as usize);
        m.data().iter().for_each(|&x| x.write_le(&mut out));
        out
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..96).map(|_| rng.gen_range(0..256)).collect();
    let ok64 = one::<f64>(cfg, &tokens, "f64")?;
    let ok32 = one::<f32>(cfg, &tokens, "f32")?;
    Ok(CheckOutcome::new(
        "checkpoint_round_trip",
        ok64 && ok32,
        format!("f64 identical: {ok64}; f32 identical: {ok32}"),
    ))
}

/// Result of the scaling benchmark behind the complexity claims.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub lengths: Vec<usize>,
    pub sparse_prefill: Vec<f64>,
    pub full_prefill: Vec<f64>,
    pub sparse_decode: Vec<f64>,
    pub sparse_exponent: f64,
    pub full_exponent: f64,
    /// Sparse decode step time at the largest length over that at 8K.
    pub decode_ratio: f64,
}

/// Sparse and dense attention-layer prefill over `lengths` (single
/// precision), exponent fits, and the decode-time ratio between the largest
/// context and 8192 tokens.
pub fn scaling(attn: &AttnConfig, lengths: &[usize], seed: u64) -> Result<ScalingReport> {
    let opts = CompareOptions {
        repeats: 3,
        full_repeats: 1,
        decode_steps: 64,
        seed,
    };
    let cmp = compare_sparse_full::<f32>(attn, lengths, opts)?;
    let pick = |f: fn(&rwkvx::bench::ComparisonRow) -> f64| cmp.rows.iter().map(f).collect::<Vec<f64>>();
    let sparse_prefill = pick(|r| r.sparse_prefill.wall_time);
    let full_prefill = pick(|r| r.full_prefill.wall_time);
    let sparse_decode = pick(|r| r.sparse_decode.wall_time);
    let fit = |ys: &[f64]| {
        fit_power_law(
            &lengths
                .iter()
                .map(|&n| n as f64)
                .zip(ys.iter().copied())
                .collect::<Vec<_>>(),
        )
    };
    let at = |n: usize| lengths.iter().position(|&l| l == n);
    let decode_ratio = match (at(8192), sparse_decode.last()) {
        (Some(i), Some(&last)) => last / sparse_decode[i],
        _ => f64::NAN,
    };
    Ok(ScalingReport {
        lengths: lengths.to_vec(),
        sparse_exponent: fit(&sparse_prefill)?,
        full_exponent: fit(&full_prefill)?,
        sparse_prefill,
        full_prefill,
        sparse_decode,
        decode_ratio,
    })
}

/// Sparse-only prefill exponent (median of 3 after a warmup per length).
pub fn sparse_prefill_exponent(attn: &AttnConfig, lengths: &[usize], seed: u64) -> Result<f64> {
    let mut points = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let q = random_matrix::<f32>(&mut rng, n, attn.d_k);
        let k = random_matrix::<f32>(&mut rng, n, attn.d_k);
        let v = random_matrix::<f32>(&mut rng, n, attn.d_v);
        prefill(&q, &k, &v, attn)?;
        let mut samples = Vec::with_capacity(3);
        for _ in 0..3 {
            let start = std::time::Instant::now();
            prefill(&q, &k, &v, attn)?;
            samples.push(start.elapsed().as_secs_f64());
        }
        points.push((n as f64, median(&mut samples)));
    }
    fit_power_law(&points)
}
