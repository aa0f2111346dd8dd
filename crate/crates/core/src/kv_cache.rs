//! Constant-budget KV cache for decoding.
//!
//! The cache is a past segment (at most `m` entries) followed by an
//! observation window of the `L_obs` most recent entries. Window entries keep
//! their queries as well, because importance scoring is attention from the
//! window queries onto the past keys:
//!
//! ```text
//! C = Σ_i softmax(Q_obs · K_pastᵀ / √d_k)[i, :]
//! ```
//!
//! Whenever the past grows beyond `m`, the `m` highest-importance entries are
//! kept in their original order and the rest are evicted.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::sparse_attn::AttnConfig;
use crate::tensor::{dots_by, softmax_in_place, Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    past_keys: Matrix<T>,
    past_values: Matrix<T>,
    obs_queries: Matrix<T>,
    obs_keys: Matrix<T>,
    obs_values: Matrix<T>,
    budget: Option<usize>,
    window: usize,
}

/// Borrowed view of the two cache segments.
#[derive(Debug, Clone, Copy)]
pub struct CacheSplit<'a, T> {
    pub past_keys: &'a Matrix<T>,
    pub past_values: &'a Matrix<T>,
    pub obs_queries: &'a Matrix<T>,
    pub obs_keys: &'a Matrix<T>,
    pub obs_values: &'a Matrix<T>,
}

impl<T: Scalar> KvCache<T> {
    /// Empty cache. `budget == None` disables compression.
    pub fn new(d_k: usize, d_v: usize, budget: Option<usize>, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidConfig("obs_window >= 1 violated".into()));
        }
        Ok(KvCache {
            past_keys: Matrix::empty(d_k),
            past_values: Matrix::empty(d_v),
            obs_queries: Matrix::empty(d_k),
            obs_keys: Matrix::empty(d_k),
            obs_values: Matrix::empty(d_v),
            budget,
            window,
        })
    }

    pub fn for_config(cfg: &AttnConfig) -> Result<Self> {
        Self::new(cfg.d_k, cfg.d_v, cfg.cache_budget, cfg.obs_window)
    }

    /// Bulk-loads a prefilled sequence: the last `window` rows become the
    /// observation window, the rest the past, which is then compressed once.
    pub fn from_sequence(
        queries: &Matrix<T>,
        keys: &Matrix<T>,
        values: &Matrix<T>,
        budget: Option<usize>,
        window: usize,
    ) -> Result<Self> {
        let n = keys.rows();
        if queries.rows() != n || values.rows() != n {
            return Err(shape_err(
                "KvCache::from_sequence",
                "equal row counts",
                format!("{}, {}, {}", queries.rows(), n, values.rows()),
            ));
        }
        let mut cache = Self::new(keys.cols(), values.cols(), budget, window)?;
        if queries.cols() != keys.cols() {
            return Err(shape_err("KvCache::from_sequence", keys.cols(), queries.cols()));
        }
        let split = n.saturating_sub(window);
        cache.past_keys = keys.slice_rows(0, split);
        cache.past_values = values.slice_rows(0, split);
        cache.obs_queries = queries.slice_rows(split, n);
        cache.obs_keys = keys.slice_rows(split, n);
        cache.obs_values = values.slice_rows(split, n);
        cache.enforce_budget()?;
        Ok(cache)
    }

    pub fn d_k(&self) -> usize {
        self.past_keys.cols()
    }

    pub fn d_v(&self) -> usize {
        self.past_values.cols()
    }

    pub fn budget(&self) -> Option<usize> {
        self.budget
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn past_len(&self) -> usize {
        self.past_keys.rows()
    }

    pub fn obs_len(&self) -> usize {
        self.obs_keys.rows()
    }

    /// Total stored entries.
    pub fn len(&self) -> usize {
        self.past_len() + self.obs_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split(&self) -> CacheSplit<'_, T> {
        CacheSplit {
            past_keys: &self.past_keys,
            past_values: &self.past_values,
            obs_queries: &self.obs_queries,
            obs_keys: &self.obs_keys,
            obs_values: &self.obs_values,
        }
    }

    /// Key `j` of the stored sequence (past, then window).
    #[inline]
    pub fn key_row(&self, j: usize) -> &[T] {
        let p = self.past_len();
        if j < p {
            self.past_keys.row(j)
        } else {
            self.obs_keys.row(j - p)
        }
    }

    #[inline]
    pub fn value_row(&self, j: usize) -> &[T] {
        let p = self.past_len();
        if j < p {
            self.past_values.row(j)
        } else {
            self.obs_values.row(j - p)
        }
    }

    /// Stored keys and values as contiguous matrices, in stored order.
    pub fn stored(&self) -> (Matrix<T>, Matrix<T>) {
        (
            self.past_keys.vstack(&self.obs_keys).expect("segments share width"),
            self.past_values.vstack(&self.obs_values).expect("segments share width"),
        )
    }

    /// Adds a token to the window, migrates the oldest window entry to the
    /// past when the window overflows, and compresses the past if it then
    /// exceeds the budget.
    pub fn append(&mut self, q: &[T], k: &[T], v: &[T]) -> Result<()> {
        if q.len() != self.d_k() || k.len() != self.d_k() || v.len() != self.d_v() {
            return Err(shape_err(
                "KvCache::append",
                format!("q, k of dim {} and v of dim {}", self.d_k(), self.d_v()),
                format!("{}, {}, {}", q.len(), k.len(), v.len()),
            ));
        }
        self.obs_queries.push_row(q)?;
        self.obs_keys.push_row(k)?;
        self.obs_values.push_row(v)?;
        if self.obs_len() > self.window {
            self.obs_queries.pop_front_row();
            let k0 = self.obs_keys.pop_front_row().expect("window is non-empty");
            let v0 = self.obs_values.pop_front_row().expect("window is non-empty");
            self.past_keys.push_row(&k0)?;
            self.past_values.push_row(&v0)?;
        }
        self.enforce_budget()
    }

    fn enforce_budget(&mut self) -> Result<()> {
        match self.budget {
            Some(m) if self.past_len() > m => {
                let keep = retained_past(&self.obs_queries, &self.past_keys, m)?;
                self.past_keys = self.past_keys.gather_rows(&keep);
                self.past_values = self.past_values.gather_rows(&keep);
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Text dump: a header line `m, L_obs, n_past, n_obs`, then one line per
    /// past entry `k0,k1,..|v0,v1,..`, then one line per window entry
    /// `k..|v..|q..`. Values use shortest round-trip decimals, so a dump
    /// parses back to an identical cache (an empty cache loses its widths).
    /// An unbounded budget prints `inf`.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        let m = self.budget.map_or_else(|| "inf".to_string(), |m| m.to_string());
        writeln!(out, "{m}, {}, {}, {}", self.window, self.past_len(), self.obs_len()).unwrap();
        let join = |row: &[T]| row.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        for j in 0..self.past_len() {
            writeln!(out, "{}|{}", join(self.past_keys.row(j)), join(self.past_values.row(j))).unwrap();
        }
        for j in 0..self.obs_len() {
            writeln!(
                out,
                "{}|{}|{}",
                join(self.obs_keys.row(j)),
                join(self.obs_values.row(j)),
                join(self.obs_queries.row(j))
            )
            .unwrap();
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let bad = |what: String| Error::Input(format!("cache dump: {what}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(format!("header `{header}` needs 4 fields")));
        }
        let count = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad count `{s}`")));
        let budget = match fields[0] {
            "inf" => None,
            s => Some(count(s)?),
        };
        let (window, n_past, n_obs) = (count(fields[1])?, count(fields[2])?, count(fields[3])?);

        let parse_group = |g: &str| -> Result<Vec<T>> {
            if g.is_empty() {
                return Ok(Vec::new());
            }
            g.split(',')
                .map(|x| x.parse::<T>().map_err(|_| bad(format!("bad value `{x}`"))))
                .collect()
        };
        let mut rows: Vec<Vec<Vec<T>>> = Vec::with_capacity(n_past + n_obs);
        for (i, line) in lines.by_ref().take(n_past + n_obs).enumerate() {
            let groups: Vec<&str> = line.split('|').collect();
            let expected = if i < n_past { 2 } else { 3 };
            if groups.len() != expected {
                return Err(bad(format!(
                    "line {} has {} groups, expected {expected}",
                    i + 2,
                    groups.len()
                )));
            }
            rows.push(groups.into_iter().map(parse_group).collect::<Result<_>>()?);
        }
        if rows.len() != n_past + n_obs {
            return Err(bad(format!(
                "expected {} entries, found {}",
                n_past + n_obs,
                rows.len()
            )));
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing data".into()));
        }
        let (d_k, d_v) = rows.first().map_or((0, 0), |r| (r[0].len(), r[1].len()));
        let mut cache = Self::new(d_k, d_v, budget, window)?;
        for (i, r) in rows.iter().enumerate() {
            if i < n_past {
                cache.past_keys.push_row(&r[0])?;
                cache.past_values.push_row(&r[1])?;
            } else {
                cache.obs_keys.push_row(&r[0])?;
                cache.obs_values.push_row(&r[1])?;
                cache.obs_queries.push_row(&r[2])?;
            }
        }
        Ok(cache)
    }
}

/// Views over the past segment and the observation window (the `L_obs` most
/// recent entries, or all of them if fewer are stored).
pub fn split_cache<T: Scalar>(cache: &KvCache<T>) -> CacheSplit<'_, T> {
    cache.split()
}

/// Cumulative attention each past key receives from the window queries.
/// The result sums to `q_obs.rows()` because every softmax row sums to 1.
pub fn importance_scores<T: Scalar>(q_obs: &Matrix<T>, k_past: &Matrix<T>, d_k: usize) -> Result<Vector<T>> {
    if k_past.is_empty() {
        return Ok(Vector::zeros(0));
    }
    if q_obs.cols() != k_past.cols() {
        return Err(shape_err("importance_scores", k_past.cols(), q_obs.cols()));
    }
    let scale = T::one() / T::lit(d_k as f64).sqrt();
    let mut total = vec![T::zero(); k_past.rows()];
    let mut row = Vec::with_capacity(k_past.rows());
    for q in q_obs.row_iter() {
        row.clear();
        dots_by(q, |j| k_past.row(j), 0..k_past.rows(), &mut row);
        for x in row.iter_mut() {
            *x *= scale;
        }
        softmax_in_place(&mut row);
        for (c, &p) in total.iter_mut().zip(&row) {
            *c += p;
        }
    }
    Ok(total.into())
}

fn retained_past<T: Scalar>(q_obs: &Matrix<T>, k_past: &Matrix<T>, m: usize) -> Result<Vec<usize>> {
    if q_obs.is_empty() {
        return Err(Error::CompressionUndefined { past: k_past.rows() });
    }
    let scores = importance_scores(q_obs, k_past, k_past.cols())?;
    Ok(top_m_recent_ties(&scores, m))
}

/// Returns the cache with its past segment reduced to the budget; a cache
/// already within budget comes back unchanged. Scores are scaled by `d_k`.
pub fn compress<T: Scalar>(cache: &KvCache<T>, d_k: usize) -> Result<KvCache<T>> {
    let mut out = cache.clone();
    if let Some(m) = cache.budget {
        if cache.past_len() > m {
            if cache.obs_len() == 0 {
                return Err(Error::CompressionUndefined { past: cache.past_len() });
            }
            let scores = importance_scores(&cache.obs_queries, &cache.past_keys, d_k)?;
            let keep = top_m_recent_ties(&scores, m);
            out.past_keys = cache.past_keys.gather_rows(&keep);
            out.past_values = cache.past_values.gather_rows(&keep);
        }
    }
    Ok(out)
}

/// Ascending indices of the `m` highest scores; equal scores favour the more
/// recent (higher) index.
fn top_m_recent_ties<T: Scalar>(scores: &[T], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.cmp(&a))
    });
    order.truncate(m);
    order.sort_unstable();
    order
}

/// Appends one token, returning the updated cache.
pub fn append<T: Scalar>(cache: &KvCache<T>, q: &[T], k: &[T], v: &[T]) -> Result<KvCache<T>> {
    let mut out = cache.clone();
    out.append(q, k, v)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, d: usize) -> Vec<f64> {
        (0..d).map(|c| ((i * 31 + c * 7) as f64 * 0.173).sin()).collect()
    }

    fn filled(n: usize, budget: Option<usize>, window: usize) -> KvCache<f64> {
        let mut c = KvCache::new(3, 2, budget, window).unwrap();
        for i in 0..n {
            c.append(&row(i, 3), &row(i + 1000, 3), &row(i + 2000, 2)).unwrap();
        }
        c
    }

    #[test]
    fn split_examples() {
        let c = filled(3, None, 8);
        let s = split_cache(&c);
        assert_eq!((s.past_keys.rows(), s.obs_keys.rows()), (0, 3));

        let c = filled(10, None, 4);
        let s = c.split();
        assert_eq!((s.past_keys.rows(), s.obs_keys.rows()), (6, 4));
        assert_eq!(s.past_keys.row(0), row(1000, 3).as_slice());
        assert_eq!(s.obs_keys.row(0), row(1006, 3).as_slice());

        let (keys, values) = c.stored();
        for i in 0..10 {
            assert_eq!(keys.row(i), row(1000 + i, 3).as_slice());
            assert_eq!(values.row(i), row(2000 + i, 2).as_slice());
        }
    }

    #[test]
    fn importance_examples() {
        let keys = Matrix::from_fn(4, 2, |r, c| (r + c) as f64);
        let c = importance_scores(&Matrix::zeros(1, 2), &keys, 2).unwrap();
        assert_eq!(c.as_slice(), &[0.25; 4]);

        let q = Matrix::from_rows(&[[0.3, -0.2]]).unwrap();
        let single = importance_scores(&q, &keys, 2).unwrap();
        let double = importance_scores(&q.vstack(&q).unwrap(), &keys, 2).unwrap();
        for (s, d) in single.iter().zip(double.iter()) {
            assert_eq!(2.0 * s, *d);
        }
        assert_eq!(importance_scores(&q, &Matrix::empty(2), 2).unwrap().dim(), 0);
    }

    #[test]
    fn compress_keeps_budget_plus_window() {
        let mut c = KvCache::from_sequence(
            &Matrix::from_fn(6, 3, |r, c| row(r, 3)[c]),
            &Matrix::from_fn(6, 3, |r, c| row(r + 50, 3)[c]),
            &Matrix::from_fn(6, 2, |r, c| row(r + 90, 2)[c]),
            None,
            2,
        )
        .unwrap();
        assert_eq!(c.past_len(), 4);
        c.budget = Some(2);
        let out = compress(&c, 3).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.split().obs_keys, c.split().obs_keys);
    }

    #[test]
    fn uniform_importance_keeps_most_recent() {
        let mut c = filled(7, None, 2);
        c.obs_queries = Matrix::zeros(2, 3);
        c.budget = Some(3);
        let out = compress(&c, 3).unwrap();
        let (keys, _) = out.stored();
        for (slot, i) in [2, 3, 4, 5, 6].into_iter().enumerate() {
            assert_eq!(keys.row(slot), row(1000 + i, 3).as_slice());
        }
    }

    #[test]
    fn dominant_entry_is_retained() {
        let d = 2;
        let mut c = KvCache::new(d, 1, None, 2).unwrap();
        for i in 0..6 {
            let k = if i == 2 {
                vec![8.0, 8.0]
            } else {
                vec![0.1 * i as f64, -0.2]
            };
            c.append(&[1.0, 1.0], &k, &[i as f64]).unwrap();
        }
        c.budget = Some(1);
        let out = compress(&c, d).unwrap();
        assert_eq!(out.split().past_values.data(), &[2.0]);
    }

    #[test]
    fn compress_errors_and_identity() {
        let mut c = filled(5, None, 1);
        c.obs_queries = Matrix::empty(3);
        c.obs_keys = Matrix::empty(3);
        c.obs_values = Matrix::empty(2);
        c.budget = Some(2);
        assert!(matches!(compress(&c, 3), Err(Error::CompressionUndefined { past: 4 })));

        let c = filled(5, Some(8), 2);
        assert_eq!(compress(&c, 3).unwrap(), c);
    }

    #[test]
    fn append_examples() {
        let c = filled(4, Some(4), 4);
        assert_eq!((c.past_len(), c.obs_len()), (0, 4));
        let c = filled(200, Some(16), 4);
        assert_eq!(c.len(), 20);
        let c = filled(50, None, 4);
        assert_eq!(c.len(), 50);
        let (keys, _) = c.stored();
        for i in 0..50 {
            assert_eq!(keys.row(i), row(1000 + i, 3).as_slice());
        }
        let mut c = filled(1, None, 4);
        assert!(matches!(
            c.append(&[0.0; 2], &[0.0; 3], &[0.0; 2]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn dump_round_trips_exactly() {
        for c in [filled(1, Some(4), 2), filled(3, None, 8), filled(40, Some(8), 4)] {
            let text = c.to_dump();
            assert_eq!(KvCache::<f64>::from_dump(&text).unwrap(), c, "{text}");
        }
        let header = filled(40, Some(8), 4).to_dump();
        assert!(header.starts_with("8, 4, 8, 4\n"));
        assert!(KvCache::<f64>::from_dump("1, 2, 3").is_err());
        assert!(KvCache::<f64>::from_dump("4, 2, 1, 0\n1,2|x\n").is_err());
    }
}
