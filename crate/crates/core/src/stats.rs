//! Streaming moments and deterministic parallel reductions.

use std::ops::Range;

use rayon::prelude::*;

/// Ensemble members per work unit. Reductions merge units in index order, so
/// results do not depend on the number of worker threads.
pub const CHUNK: usize = 64;

/// Runs `f` on consecutive index ranges of length [`CHUNK`] in parallel and
/// returns the results in range order.
pub fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
        .collect()
}

/// Chunks processed per parallel wave in [`fold_chunks`].
const WAVE: usize = 32;

/// Maps chunks like [`map_chunks`] but folds the results into `acc` in
/// chunk order, keeping at most a bounded number of partial results alive.
pub fn fold_chunks<T, A, F, M>(n: usize, mut acc: A, f: F, mut merge: M) -> A
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync,
    M: FnMut(&mut A, T),
{
    let n_chunks = n.div_ceil(CHUNK);
    let mut c0 = 0;
    while c0 < n_chunks {
        let c1 = (c0 + WAVE).min(n_chunks);
        let parts: Vec<T> = (c0..c1)
            .into_par_iter()
            .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
            .collect();
        for p in parts {
            merge(&mut acc, p);
        }
        c0 = c1;
    }
    acc
}

/// Running mean and scatter matrix (Welford / Chan et al. merge).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.dim();
        self.n += 1;
        let n = self.n as f64;
        for i in 0..d {
            self.mean[i] += (x[i] - self.mean[i]) / n;
        }
        if self.n == 1 {
            return;
        }
        // (x − old mean) = (x − new mean)·n/(n−1)
        let w = n / (n - 1.0);
        for i in 0..d {
            let di = (x[i] - self.mean[i]) * w;
            for j in 0..d {
                self.m2[i * d + j] += di * (x[j] - self.mean[j]);
            }
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let d = self.dim();
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..d {
            for j in 0..d {
                self.m2[i * d + j] += other.m2[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for i in 0..d {
            self.mean[i] += delta[i] * nb / n;
        }
        self.n += other.n;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased covariance, row-major. Zero when fewer than two samples.
    pub fn covariance(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.m2.len()];
        }
        let denom = (self.n - 1) as f64;
        self.m2.iter().map(|v| v / denom).collect()
    }

    pub fn variance(&self, i: usize) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.m2[i * self.dim() + i] / (self.n - 1) as f64
    }

    /// Standard error of the mean of coordinate `i`.
    pub fn stderr(&self, i: usize) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.variance(i) / self.n as f64).sqrt()
    }
}

/// Merges a sequence of partial moments in order.
pub fn merge_all<'a>(dim: usize, parts: impl IntoIterator<Item = &'a Moments>) -> Moments {
    let mut acc = Moments::new(dim);
    for p in parts {
        acc.merge(p);
    }
    acc
}

/// Mean and covariance of row-major samples `[n × d]`.
pub fn sample_moments(samples: &[f64], d: usize) -> Moments {
    let mut m = Moments::new(d);
    for row in samples.chunks_exact(d) {
        m.push(row);
    }
    m
}

/// Ordinary least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let data: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 * 0.1 + 1e3).collect();
        let m = sample_moments(&data, 3);
        let rows: Vec<&[f64]> = data.chunks(3).collect();
        let n = rows.len() as f64;
        for j in 0..3 {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            assert!((m.mean()[j] - mean).abs() < 1e-10);
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((m.variance(j) - var).abs() < 1e-8 * var);
        }
    }

    #[test]
    fn merge_equals_sequential() {
        let data: Vec<f64> = (0..200).map(|i| (i as f64 * 0.7).sin()).collect();
        let whole = sample_moments(&data, 2);
        let mut a = sample_moments(&data[..64], 2);
        let b = sample_moments(&data[64..], 2);
        a.merge(&b);
        assert_eq!(a.count(), whole.count());
        for (x, y) in a.covariance().iter().zip(whole.covariance()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn chunk_results_are_ordered() {
        let v = map_chunks(1000, |r| r.start);
        assert_eq!(v, (0..1000).step_by(CHUNK).collect::<Vec<_>>());
    }

    #[test]
    fn fold_visits_chunks_in_order() {
        let v = fold_chunks(5000, Vec::new(), |r| r.start, |acc: &mut Vec<usize>, s| acc.push(s));
        assert_eq!(v, (0..5000).step_by(CHUNK).collect::<Vec<_>>());
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        let (s, c) = linear_fit(&x, &y);
        assert!((s + 2.0).abs() < 1e-12 && (c - 3.0).abs() < 1e-12);
    }
}
