//! Top-k chunk sparse attention.
//!
//! Keys are grouped into chunks of `B` consecutive tokens. A query scores
//! each candidate chunk by its inner product with the chunk's mean-pooled key,
//! keeps the `k` best, and runs softmax attention over the keys and values of
//! those chunks only.
//!
//! Causal rule shared by prefill and decode: the candidates for the token at
//! position `t` are the complete chunks strictly before the chunk containing
//! `t`, and that own chunk's prefix `[own_start, t]` is always attended. A
//! query therefore never sees a later token, and position 0 always attends at
//! least itself.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::kv_cache::KvCache;
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, dots_by, mean_of_range, mean_of_rows_by, softmax_in_place, Matrix, Vector};

/// Sparse attention hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    /// Chunk size `B` in tokens.
    pub chunk_size: usize,
    /// Number of selected chunks `k`.
    pub top_k: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Past-cache budget `m`; `None` disables compression.
    pub cache_budget: Option<usize>,
    /// Observation window `L_obs`.
    pub obs_window: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig {
            chunk_size: 64,
            top_k: 4,
            d_k: 64,
            d_v: 64,
            cache_budget: Some(1024),
            obs_window: 64,
        }
    }
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.chunk_size < 1 {
            return fail("chunk_size >= 1 violated");
        }
        if self.top_k < 1 {
            return fail("top_k >= 1 violated");
        }
        if self.d_k < 1 || self.d_v < 1 {
            return fail("d_k >= 1 and d_v >= 1 violated");
        }
        if self.obs_window < 1 {
            return fail("obs_window >= 1 violated");
        }
        if self.obs_window < self.chunk_size {
            return fail("obs_window >= chunk_size violated");
        }
        if let Some(m) = self.cache_budget {
            if m < self.chunk_size {
                return fail("cache_budget >= chunk_size violated");
            }
        }
        Ok(())
    }

    /// Same configuration with compression disabled.
    pub fn uncompressed(mut self) -> Self {
        self.cache_budget = None;
        self
    }

    /// Upper bound on the entries a single decode step can attend.
    pub fn attended_bound(&self) -> usize {
        self.top_k * self.chunk_size + self.obs_window
    }

    /// Steady-state number of stored cache entries per attention layer.
    pub fn cache_capacity(&self) -> Option<usize> {
        self.cache_budget.map(|m| m + self.obs_window)
    }

    pub fn scale<T: Scalar>(&self) -> T {
        T::one() / T::lit(self.d_k as f64).sqrt()
    }
}

/// Relevance score per candidate chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkScores<T> {
    pub scores: Vector<T>,
    pub candidate_ids: Vec<usize>,
}

impl<T: Scalar> ChunkScores<T> {
    pub fn len(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidate_ids.is_empty()
    }
}

/// Scores every chunk of `keys` (temporal order, `⌈rows/B⌉` chunks) against
/// `q`. A trailing partial chunk is pooled over its actual length.
pub fn chunk_scores<T: Scalar>(q: &[T], keys: &Matrix<T>, chunk_size: usize) -> Result<ChunkScores<T>> {
    if chunk_size == 0 {
        return Err(Error::InvalidConfig("chunk_size >= 1 violated".into()));
    }
    if !keys.is_empty() && q.len() != keys.cols() {
        return Err(shape_err("chunk_scores", keys.cols(), q.len()));
    }
    let n = keys.rows().div_ceil(chunk_size);
    let mut scores = Vec::with_capacity(n);
    for c in 0..n {
        let end = ((c + 1) * chunk_size).min(keys.rows());
        let pooled = mean_of_range(keys, c * chunk_size, end)?;
        scores.push(dot(q, &pooled));
    }
    Ok(ChunkScores {
        scores: scores.into(),
        candidate_ids: (0..n).collect(),
    })
}

/// The `k` best candidates, returned as chunk ids in ascending order. Equal
/// scores favour the lower chunk id.
pub fn select_topk<T: Scalar>(scores: &ChunkScores<T>, k: usize) -> Vec<usize> {
    let mut picked = top_k_positions(&scores.scores, k);
    for p in picked.iter_mut() {
        *p = scores.candidate_ids[*p];
    }
    picked.sort_unstable();
    picked
}

/// Positions of the `k` largest values, ties to the lower position. Keeps a
/// sorted buffer of at most `k` entries, so it runs in `O(n·k)`.
fn top_k_positions<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    if k >= scores.len() {
        return (0..scores.len()).collect();
    }
    // Sorted best-first; a later position only displaces on a strictly
    // greater score, which implements the lower-index tie-break.
    let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
    for (i, &s) in scores.iter().enumerate() {
        if best.len() == k && s <= best[k - 1].0 {
            continue;
        }
        let at = best.partition_point(|&(b, _)| b >= s);
        best.insert(at, (s, i));
        best.truncate(k);
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// Running state of a softmax accumulated block by block: the largest logit
/// so far and the denominator relative to it. The weighted value sum lives in
/// the caller's output row.
#[derive(Debug, Clone, Copy)]
struct OnlineSoftmax<T> {
    max: T,
    denom: T,
}

impl<T: Scalar> OnlineSoftmax<T> {
    fn new() -> Self {
        OnlineSoftmax {
            max: T::neg_infinity(),
            denom: T::zero(),
        }
    }

    /// Folds rows `range` into `acc`, rescaling what is already there when
    /// the running maximum grows.
    #[allow(clippy::too_many_arguments)]
    fn merge<'a>(
        &mut self,
        q: &[T],
        key_row: impl Fn(usize) -> &'a [T],
        value_row: impl Fn(usize) -> &'a [T],
        range: (usize, usize),
        scale: T,
        acc: &mut [T],
        logits: &mut Vec<T>,
    ) where
        T: 'a,
    {
        let (start, end) = range;
        if start >= end {
            return;
        }
        logits.clear();
        dots_by(q, key_row, start..end, logits);
        let mut block_max = T::neg_infinity();
        for l in logits.iter_mut() {
            *l *= scale;
            if *l > block_max {
                block_max = *l;
            }
        }
        if block_max > self.max {
            if self.denom > T::zero() {
                let alpha = (self.max - block_max).exp();
                self.denom *= alpha;
                for a in acc.iter_mut() {
                    *a *= alpha;
                }
            }
            self.max = block_max;
        }
        for (j, &l) in (start..end).zip(logits.iter()) {
            let e = (l - self.max).exp();
            self.denom += e;
            axpy(e, value_row(j), acc);
        }
    }

    fn finish(&self, acc: &mut [T]) {
        for a in acc.iter_mut() {
            *a /= self.denom;
        }
    }
}

/// Sparse attention of `q` over rows in `ranges`, merged in the given order.
/// Prefill and decode both reduce to this sequence of merges, so equal
/// attended ranges give bitwise-equal outputs.
fn attend_ranges<'a, T: Scalar>(
    q: &[T],
    key_row: impl Fn(usize) -> &'a [T] + Copy,
    value_row: impl Fn(usize) -> &'a [T] + Copy,
    ranges: &[(usize, usize)],
    scale: T,
    d_v: usize,
    logits: &mut Vec<T>,
) -> Vector<T> {
    let mut out = vec![T::zero(); d_v];
    let mut sm = OnlineSoftmax::new();
    for &r in ranges {
        sm.merge(q, key_row, value_row, r, scale, &mut out, logits);
    }
    sm.finish(&mut out);
    out.into()
}

/// Two-pass softmax attention of `q` over the first `n` rows.
fn dense_attend<'a, T: Scalar>(
    q: &[T],
    key_row: impl Fn(usize) -> &'a [T],
    value_row: impl Fn(usize) -> &'a [T],
    n: usize,
    scale: T,
    d_v: usize,
    logits: &mut Vec<T>,
) -> Vector<T> {
    logits.clear();
    logits.extend((0..n).map(|j| dot(q, key_row(j)) * scale));
    softmax_in_place(logits);
    let mut out = vec![T::zero(); d_v];
    for (j, &p) in logits.iter().enumerate() {
        axpy(p, value_row(j), &mut out);
    }
    out.into()
}

fn check_selection<T: Scalar>(q: &[T], keys: &Matrix<T>, values: &Matrix<T>, op: &'static str) -> Result<()> {
    if keys.rows() != values.rows() {
        return Err(shape_err(op, format!("{} value rows", keys.rows()), values.rows()));
    }
    if keys.is_empty() {
        return Err(Error::EmptySelection);
    }
    if q.len() != keys.cols() {
        return Err(shape_err(op, format!("query of dim {}", keys.cols()), q.len()));
    }
    Ok(())
}

/// `softmax(q·Kᵀ/√d_k)·V` over an already selected set of keys and values.
pub fn sparse_attend<T: Scalar>(q: &[T], keys: &Matrix<T>, values: &Matrix<T>, d_k: usize) -> Result<Vector<T>> {
    check_selection(q, keys, values, "sparse_attend")?;
    let scale = T::one() / T::lit(d_k as f64).sqrt();
    Ok(dense_attend(
        q,
        |j| keys.row(j),
        |j| values.row(j),
        keys.rows(),
        scale,
        values.cols(),
        &mut Vec::new(),
    ))
}

/// The softmax weights [`sparse_attend`] applies to each selected row.
pub fn attention_weights<T: Scalar>(q: &[T], keys: &Matrix<T>, d_k: usize) -> Result<Vector<T>> {
    if keys.is_empty() {
        return Err(Error::EmptySelection);
    }
    if q.len() != keys.cols() {
        return Err(shape_err("attention_weights", keys.cols(), q.len()));
    }
    let scale = T::one() / T::lit(d_k as f64).sqrt();
    let mut w: Vec<T> = keys.row_iter().map(|k| dot(q, k) * scale).collect();
    softmax_in_place(&mut w);
    Ok(w.into())
}

/// Per-query selection record emitted by the traced prefill and decode paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionTrace {
    pub position: usize,
    /// Selected past chunks, ascending.
    pub chunk_ids: Vec<usize>,
    /// Every attended token index, ascending.
    pub attended: Vec<usize>,
}

impl PositionTrace {
    pub fn attended_count(&self) -> usize {
        self.attended.len()
    }
}

/// `position, [chunk ids], attended_count`, chunk ids space-separated.
impl fmt::Display for PositionTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.chunk_ids.iter().map(|c| c.to_string()).collect();
        write!(f, "{}, [{}], {}", self.position, ids.join(" "), self.attended.len())
    }
}

/// Parsed form of one trace line. The attended index set itself is not part
/// of the line format, only its size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub position: usize,
    pub chunk_ids: Vec<usize>,
    pub attended_count: usize,
}

impl FromStr for TraceLine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("malformed trace line `{s}`"));
        let open = s.find('[').ok_or_else(bad)?;
        let close = s.find(']').ok_or_else(bad)?;
        let position = s[..open]
            .trim()
            .trim_end_matches(',')
            .trim()
            .parse()
            .map_err(|_| bad())?;
        let chunk_ids = s[open + 1..close]
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let attended_count = s[close + 1..]
            .trim()
            .trim_start_matches(',')
            .trim()
            .parse()
            .map_err(|_| bad())?;
        Ok(TraceLine {
            position,
            chunk_ids,
            attended_count,
        })
    }
}

fn check_qkv<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    d_k: usize,
    d_v: usize,
    op: &'static str,
) -> Result<()> {
    if q.rows() != k.rows() || k.rows() != v.rows() {
        return Err(shape_err(
            op,
            "Q, K, V with equal row counts",
            format!("{}, {}, {}", q.rows(), k.rows(), v.rows()),
        ));
    }
    if q.cols() != d_k || k.cols() != d_k {
        return Err(shape_err(
            op,
            format!("Q and K width {d_k}"),
            format!("{}, {}", q.cols(), k.cols()),
        ));
    }
    if v.cols() != d_v {
        return Err(shape_err(op, format!("V width {d_v}"), v.cols()));
    }
    Ok(())
}

/// Causal sparse self-attention over a whole sequence.
pub fn prefill<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, cfg: &AttnConfig) -> Result<Matrix<T>> {
    prefill_impl(q, k, v, cfg, None)
}

/// [`prefill`] plus the per-position selection record.
pub fn prefill_traced<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    cfg: &AttnConfig,
) -> Result<(Matrix<T>, Vec<PositionTrace>)> {
    let mut trace = Vec::with_capacity(q.rows());
    let out = prefill_impl(q, k, v, cfg, Some(&mut trace))?;
    Ok((out, trace))
}

fn prefill_impl<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    cfg: &AttnConfig,
    trace: Option<&mut Vec<PositionTrace>>,
) -> Result<Matrix<T>> {
    cfg.validate()?;
    check_qkv(q, k, v, cfg.d_k, cfg.d_v, "prefill")?;
    let n = q.rows();
    let b = cfg.chunk_size;
    let scale = cfg.scale::<T>();

    let complete = n / b;
    let mut means = Matrix::empty(cfg.d_k);
    for c in 0..complete {
        means.push_row(&mean_of_range(k, c * b, (c + 1) * b)?)?;
    }

    // Selection for every position first, then the attention itself chunk by
    // chunk, so each selected chunk's keys and values are loaded once for all
    // the queries that picked it.
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); complete];
    let mut picks: Vec<Vec<usize>> = Vec::new();
    let mut scores = Vec::new();
    for t in 0..n {
        let own = t / b;
        scores.clear();
        dots_by(q.row(t), |c| means.row(c), 0..own, &mut scores);
        let mut picked = top_k_positions(&scores, cfg.top_k);
        picked.sort_unstable();
        for &c in &picked {
            buckets[c].push(t);
        }
        if trace.is_some() {
            picks.push(picked);
        }
    }

    let mut out = Matrix::zeros(n, cfg.d_v);
    let mut state = vec![OnlineSoftmax::<T>::new(); n];
    let mut logits = Vec::with_capacity(b);
    for (c, bucket) in buckets.iter().enumerate() {
        for &t in bucket {
            let range = (c * b, (c + 1) * b);
            state[t].merge(
                q.row(t),
                |j| k.row(j),
                |j| v.row(j),
                range,
                scale,
                out.row_mut(t),
                &mut logits,
            );
        }
    }
    for (t, sm) in state.iter_mut().enumerate() {
        let range = ((t / b) * b, t + 1);
        sm.merge(
            q.row(t),
            |j| k.row(j),
            |j| v.row(j),
            range,
            scale,
            out.row_mut(t),
            &mut logits,
        );
        sm.finish(out.row_mut(t));
    }

    if let Some(trace) = trace {
        trace.extend(picks.into_iter().enumerate().map(|(t, chunk_ids)| {
            let own_start = (t / b) * b;
            let mut attended: Vec<usize> = chunk_ids.iter().flat_map(|&c| c * b..(c + 1) * b).collect();
            attended.extend(own_start..=t);
            PositionTrace {
                position: t,
                chunk_ids,
                attended,
            }
        }));
    }
    Ok(out)
}

/// One decode step of query `q` against the stored cache sequence
/// (retained past entries followed by the observation window).
///
/// The stored sequence is re-chunked contiguously from its start; the rule is
/// the prefill rule applied to the newest entry, which is assumed to be the
/// token that produced `q`.
pub fn decode_step<T: Scalar>(q: &[T], cache: &KvCache<T>, cfg: &AttnConfig) -> Result<Vector<T>> {
    decode_impl(q, cache, cfg).map(|(y, _)| y)
}

/// [`decode_step`] plus its selection record; `position` is the index of the
/// newest entry in the stored sequence.
pub fn decode_step_traced<T: Scalar>(
    q: &[T],
    cache: &KvCache<T>,
    cfg: &AttnConfig,
) -> Result<(Vector<T>, PositionTrace)> {
    decode_impl(q, cache, cfg)
}

fn decode_impl<T: Scalar>(q: &[T], cache: &KvCache<T>, cfg: &AttnConfig) -> Result<(Vector<T>, PositionTrace)> {
    let n = cache.len();
    if n == 0 {
        return Err(Error::EmptySelection);
    }
    if q.len() != cache.d_k() {
        return Err(shape_err("decode_step", cache.d_k(), q.len()));
    }
    let b = cfg.chunk_size;
    let own = (n - 1) / b;
    let mut scores = Vec::with_capacity(own);
    for c in 0..own {
        let pooled = mean_of_rows_by(|j| cache.key_row(j), c * b, (c + 1) * b)?;
        scores.push(dot(q, &pooled));
    }
    let mut picked = top_k_positions(&scores, cfg.top_k);
    picked.sort_unstable();

    let mut ranges: Vec<(usize, usize)> = picked.iter().map(|&c| (c * b, (c + 1) * b)).collect();
    ranges.push((own * b, n));
    let y = attend_ranges(
        q,
        |j| cache.key_row(j),
        |j| cache.value_row(j),
        &ranges,
        cfg.scale::<T>(),
        cache.d_v(),
        &mut Vec::with_capacity(n.min(cfg.attended_bound())),
    );
    let trace = PositionTrace {
        position: n - 1,
        attended: ranges.iter().flat_map(|&(s, e)| s..e).collect(),
        chunk_ids: picked,
    };
    Ok((y, trace))
}

/// Dense reference attention, optionally causal. `O(N²)` time, `O(N)` extra
/// memory (one logit row at a time).
pub fn full_attention_oracle<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    d_k: usize,
    causal: bool,
) -> Result<Matrix<T>> {
    if q.cols() != k.cols() || k.rows() != v.rows() || (causal && q.rows() > k.rows()) {
        return Err(shape_err(
            "full_attention_oracle",
            "Q.cols == K.cols, K.rows == V.rows",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let scale = T::one() / T::lit(d_k as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut logits = Vec::with_capacity(k.rows());
    for t in 0..q.rows() {
        let visible = if causal { t + 1 } else { k.rows() };
        let y = dense_attend(
            q.row(t),
            |j| k.row(j),
            |j| v.row(j),
            visible,
            scale,
            v.cols(),
            &mut logits,
        );
        out.row_mut(t).copy_from_slice(&y);
    }
    Ok(out)
}

/// Dense attention of one query over the first `visible` rows; the per-step
/// cost of an uncompressed full-attention decoder.
pub fn full_attention_row<T: Scalar>(q: &[T], k: &Matrix<T>, v: &Matrix<T>, visible: usize, d_k: usize) -> Vector<T> {
    let scale = T::one() / T::lit(d_k as f64).sqrt();
    dense_attend(q, |j| k.row(j), |j| v.row(j), visible, scale, v.cols(), &mut Vec::new())
}

/// Gradients of [`sparse_attend`] for a fixed selection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttendGrads<T> {
    pub dq: Vector<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
}

/// Exact backward pass of `y = softmax(q·Kᵀ/√d_k)·V`. Selection is hard
/// routing: no gradient reaches the chunk scores.
pub fn sparse_attend_backward<T: Scalar>(
    q: &[T],
    keys: &Matrix<T>,
    values: &Matrix<T>,
    d_k: usize,
    upstream: &[T],
) -> Result<AttendGrads<T>> {
    check_selection(q, keys, values, "sparse_attend_backward")?;
    if upstream.len() != values.cols() {
        return Err(shape_err("sparse_attend_backward", values.cols(), upstream.len()));
    }
    let scale = T::one() / T::lit(d_k as f64).sqrt();
    let p = attention_weights(q, keys, d_k)?;
    let n = keys.rows();

    // dL/dp_j = g·v_j; through softmax: ds_j = p_j (dp_j − Σ_l p_l dp_l).
    let dp: Vec<T> = values.row_iter().map(|vj| dot(upstream, vj)).collect();
    let mean_dp: T = p.iter().zip(&dp).fold(T::zero(), |acc, (&pj, &dpj)| acc + pj * dpj);
    let ds: Vec<T> = p.iter().zip(&dp).map(|(&pj, &dpj)| pj * (dpj - mean_dp)).collect();

    let mut dq = vec![T::zero(); q.len()];
    let mut dk = Matrix::zeros(n, keys.cols());
    let mut dv = Matrix::zeros(n, values.cols());
    for j in 0..n {
        axpy(ds[j] * scale, keys.row(j), &mut dq);
        axpy(ds[j] * scale, q, dk.row_mut(j));
        axpy(p[j], upstream, dv.row_mut(j));
    }
    Ok(AttendGrads { dq: dq.into(), dk, dv })
}
