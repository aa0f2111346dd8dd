//! Latency and memory measurement for prefill and decode, power-law fitting,
//! and a sparse-versus-dense comparison at the attention-layer level.
//!
//! Timings use a monotonic clock and report the median of the repeats taken
//! after one warmup run. Cache entry counts are the machine-independent
//! memory measure; heap bytes come from [`alloc::PeakProbe`] and are only
//! informational.

pub mod alloc;
mod passkey;
mod report;

pub use passkey::{count_occurrences, gen_passkey_task, needle_len, PasskeyTask, NEEDLE_KEY, VALUE_DIGITS};
pub use report::{render_csv, render_report, CSV_HEADER};

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::sparse_attn::{self, AttnConfig};
use crate::tensor::{max_abs_diff, Matrix};
use alloc::PeakProbe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Whole-model prompt processing.
    Prefill,
    /// Whole-model per-token decoding.
    Decode,
    AttnPrefillSparse,
    AttnPrefillFull,
    AttnDecodeSparse,
    AttnDecodeFull,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
            Phase::AttnPrefillSparse => "attn_prefill_sparse",
            Phase::AttnPrefillFull => "attn_prefill_full",
            Phase::AttnDecodeSparse => "attn_decode_sparse",
            Phase::AttnDecodeFull => "attn_decode_full",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRecord {
    pub phase: Phase,
    pub context_len: usize,
    /// Seconds: whole pass for prefill phases, per step for decode phases.
    pub wall_time: f64,
    pub peak_entries: usize,
    pub peak_bytes: usize,
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// One warmup call, then the median wall time of `repeats` calls.
fn time_median<R>(repeats: usize, mut f: impl FnMut() -> Result<R>) -> Result<(f64, R)> {
    f()?;
    time_runs(repeats, f)
}

/// Median wall time of `repeats >= 1` calls, with the last call's result.
fn time_runs<R>(repeats: usize, mut f: impl FnMut() -> Result<R>) -> Result<(f64, R)> {
    let mut samples = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let start = Instant::now();
        last = Some(f()?);
        samples.push(start.elapsed().as_secs_f64());
    }
    let last = last.ok_or_else(|| Error::InvalidConfig("repeats >= 1 violated".into()))?;
    Ok((median(&mut samples), last))
}

fn random_tokens(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..vocab.min(256))).collect()
}

/// Uniform `[-1, 1)` matrix from a seeded generator.
pub fn random_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-1.0..1.0)))
}

fn check_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "benchmark lengths must be strictly ascending".into(),
        ));
    }
    Ok(())
}

/// Whole-model prefill latency per length.
pub fn measure_prefill<T: Scalar>(
    model: &Model<T>,
    lengths: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<LatencyRecord>> {
    check_lengths(lengths)?;
    if repeats < 3 {
        return Err(Error::InvalidConfig("repeats >= 3 violated".into()));
    }
    let vocab = model.config().vocab_size;
    lengths
        .iter()
        .map(|&len| {
            let tokens = random_tokens(len, vocab, seed ^ len as u64);
            let (wall_time, (_, state)) = time_median(repeats, || model.prefill(&tokens))?;
            let probe = PeakProbe::start();
            drop(model.prefill(&tokens)?);
            Ok(LatencyRecord {
                phase: Phase::Prefill,
                context_len: len,
                wall_time,
                peak_entries: state.cache_entries(),
                peak_bytes: probe.peak_bytes(),
            })
        })
        .collect()
}

/// Whole-model decode latency. For each length the model prefills
/// `context_len − steps` tokens and then decodes `steps` more, so the context
/// ends at `context_len`; the record holds the median step time and the
/// largest per-layer cache seen.
pub fn measure_decode<T: Scalar>(
    model: &Model<T>,
    context_lens: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Vec<LatencyRecord>> {
    check_lengths(context_lens)?;
    if steps < 16 {
        return Err(Error::InvalidConfig("decode steps >= 16 violated".into()));
    }
    let vocab = model.config().vocab_size;
    context_lens
        .iter()
        .map(|&len| {
            if len < steps {
                return Err(Error::InvalidConfig(format!(
                    "context {len} shorter than {steps} decode steps"
                )));
            }
            let tokens = random_tokens(len, vocab, seed ^ len as u64);
            let (prompt, rest) = tokens.split_at(len - steps);
            let (_, mut state) = model.prefill(prompt)?;
            let probe = PeakProbe::start();
            let mut samples = Vec::with_capacity(steps);
            let mut peak_entries = state.cache_entries();
            for &t in rest {
                let start = Instant::now();
                model.decode(t, &mut state)?;
                samples.push(start.elapsed().as_secs_f64());
                peak_entries = peak_entries.max(state.cache_entries());
            }
            Ok(LatencyRecord {
                phase: Phase::Decode,
                context_len: len,
                wall_time: median(&mut samples),
                peak_entries,
                peak_bytes: probe.peak_bytes(),
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<f64> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if points.len() < 3 || xs.len() < 3 {
        return Err(Error::InsufficientData(xs.len().min(points.len())));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Input("power-law fit needs positive values".into()));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Scaling exponent of wall time against context length.
pub fn fit_scaling(records: &[LatencyRecord]) -> Result<f64> {
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.context_len as f64, r.wall_time)).collect();
    fit_power_law(&points)
}

/// One context length of a sparse-versus-dense comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub context_len: usize,
    pub sparse_prefill: LatencyRecord,
    pub full_prefill: LatencyRecord,
    pub sparse_decode: LatencyRecord,
    pub full_decode: LatencyRecord,
    /// Largest |sparse − dense| prefill output difference, reported only when
    /// `top_k` covers every chunk and the two must agree.
    pub max_abs_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub sparse_prefill_exponent: Option<f64>,
    pub full_prefill_exponent: Option<f64>,
}

impl Comparison {
    pub fn records(&self) -> Vec<LatencyRecord> {
        self.rows
            .iter()
            .flat_map(|r| [&r.sparse_prefill, &r.full_prefill, &r.sparse_decode, &r.full_decode])
            .cloned()
            .collect()
    }
}

/// Options for [`compare_sparse_full`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompareOptions {
    /// Timed sparse prefill runs per length, after a warmup run.
    pub repeats: usize,
    /// Timed dense prefill runs per length. The dense path is warmed up once
    /// at the first length only, since a warmup at 64K tokens costs minutes.
    pub full_repeats: usize,
    pub decode_steps: usize,
    pub seed: u64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            repeats: 3,
            full_repeats: 1,
            decode_steps: 32,
            seed: 0,
        }
    }
}

/// Runs one attention layer's prefill and decode under both the sparse path
/// (with the configured cache budget) and the dense reference path (with an
/// unbounded cache) on random `Q, K, V`.
pub fn compare_sparse_full<T: Scalar>(cfg: &AttnConfig, lengths: &[usize], opts: CompareOptions) -> Result<Comparison> {
    cfg.validate()?;
    check_lengths(lengths)?;
    if opts.repeats < 1 || opts.full_repeats < 1 || opts.decode_steps < 1 {
        return Err(Error::InvalidConfig(
            "repeats, full_repeats and decode_steps must be >= 1".into(),
        ));
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for (i, &n) in lengths.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ n as u64);
        let q = random_matrix::<T>(&mut rng, n, cfg.d_k);
        let k = random_matrix::<T>(&mut rng, n, cfg.d_k);
        let v = random_matrix::<T>(&mut rng, n, cfg.d_v);

        let probe = PeakProbe::start();
        let (sparse_t, sparse_out) = time_median(opts.repeats, || sparse_attn::prefill(&q, &k, &v, cfg))?;
        let sparse_bytes = probe.peak_bytes();
        let probe = PeakProbe::start();
        let full = || sparse_attn::full_attention_oracle(&q, &k, &v, cfg.d_k, true);
        if i == 0 {
            full()?;
        }
        let (full_t, full_out) = time_runs(opts.full_repeats, full)?;
        let full_bytes = probe.peak_bytes();
        let saturated = cfg.top_k >= n.div_ceil(cfg.chunk_size);
        let max_abs_diff = saturated.then(|| {
            let d = max_abs_diff(sparse_out.data(), full_out.data());
            d.to_f64().unwrap_or(f64::NAN)
        });
        let prefill_record = |phase, wall_time, peak_bytes| LatencyRecord {
            phase,
            context_len: n,
            wall_time,
            peak_entries: n,
            peak_bytes,
        };

        let steps = opts.decode_steps.min(n);
        let start = n - steps;
        let (sparse_decode, full_decode) = {
            let mut cache = KvCache::from_sequence(
                &q.slice_rows(0, start),
                &k.slice_rows(0, start),
                &v.slice_rows(0, start),
                cfg.cache_budget,
                cfg.obs_window,
            )?;
            let probe = PeakProbe::start();
            let mut samples = Vec::with_capacity(steps);
            let mut peak = cache.len();
            for t in start..n {
                let t0 = Instant::now();
                cache.append(q.row(t), k.row(t), v.row(t))?;
                sparse_attn::decode_step(q.row(t), &cache, cfg)?;
                samples.push(t0.elapsed().as_secs_f64());
                peak = peak.max(cache.len());
            }
            let sparse = LatencyRecord {
                phase: Phase::AttnDecodeSparse,
                context_len: n,
                wall_time: median(&mut samples),
                peak_entries: peak,
                peak_bytes: probe.peak_bytes(),
            };

            let probe = PeakProbe::start();
            samples.clear();
            for t in start..n {
                let t0 = Instant::now();
                sparse_attn::full_attention_row(q.row(t), &k, &v, t + 1, cfg.d_k);
                samples.push(t0.elapsed().as_secs_f64());
            }
            let full = LatencyRecord {
                phase: Phase::AttnDecodeFull,
                context_len: n,
                wall_time: median(&mut samples),
                peak_entries: n,
                peak_bytes: probe.peak_bytes(),
            };
            (sparse, full)
        };

        rows.push(ComparisonRow {
            context_len: n,
            sparse_prefill: prefill_record(Phase::AttnPrefillSparse, sparse_t, sparse_bytes),
            full_prefill: prefill_record(Phase::AttnPrefillFull, full_t, full_bytes),
            sparse_decode,
            full_decode,
            max_abs_diff,
        });
    }
    let fit = |pick: fn(&ComparisonRow) -> &LatencyRecord| {
        let recs: Vec<LatencyRecord> = rows.iter().map(|r| pick(r).clone()).collect();
        fit_scaling(&recs).ok()
    };
    Ok(Comparison {
        sparse_prefill_exponent: fit(|r| &r.sparse_prefill),
        full_prefill_exponent: fit(|r| &r.full_prefill),
        rows,
    })
}
