//! Brownian increments on a fixed time grid.
//!
//! Every increment is addressed by an absolute grid index `j` (covering
//! `[j·dt, (j+1)·dt)`) and is a pure function of `(seed, stream, j)`. The
//! Wiener shift `θ_{k·dt}` is therefore plain re-indexing, and two paths that
//! overlap in time see the same increments no matter how they were sampled.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Steps generated per counter block. Each block owns a disjoint region of
/// the ChaCha keystream, so blocks can be produced in any order.
pub const BLOCK_STEPS: usize = 4096;

const BLOCK_WORD_SHIFT: u32 = 36;
const MAX_BLOCK: i64 = 1 << 31;
const DUMP_MAGIC: &[u8; 8] = b"RPMWIEN1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub seed: u64,
    pub dt: f64,
    pub noise_dim: usize,
    #[serde(default)]
    pub origin: f64,
}

impl NoiseSpec {
    pub fn new(seed: u64, dt: f64, noise_dim: usize) -> Self {
        Self {
            seed,
            dt,
            noise_dim,
            origin: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", format!("must be > 0, got {}", self.dt)));
        }
        if !self.origin.is_finite() {
            return Err(Error::param("origin", "must be finite"));
        }
        Ok(())
    }

    /// Independent spec for a sub-experiment, keyed by `tag`.
    pub fn derive(&self, tag: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(tag);
        Self {
            seed: rng.next_u64(),
            ..*self
        }
    }

    /// Grid index of `origin`.
    pub fn origin_index(&self) -> Result<i64> {
        grid_index(self.origin, self.dt)
    }

    pub fn stream(&self, index: u64) -> NoiseStream {
        NoiseStream::new(*self, index)
    }
}

/// Grid index of `t`, or an error when `t` is not a multiple of `dt`.
pub fn grid_index(t: f64, dt: f64) -> Result<i64> {
    let q = t / dt;
    let k = q.round();
    if (q - k).abs() > 1e-6 || !k.is_finite() {
        return Err(Error::GridMisaligned(format!("time {t} is not a multiple of dt = {dt}")));
    }
    Ok(k as i64)
}

/// Source of increments addressed by absolute grid index.
pub trait IncrementSource: Clone {
    fn dt(&self) -> f64;
    fn noise_dim(&self) -> usize;
    /// Increment over `[j·dt, (j+1)·dt)`, length `noise_dim`.
    fn increment(&mut self, j: i64) -> Result<&[f64]>;
    /// The same source seen through `θ_{k·dt}`.
    fn shifted(&self, k: i64) -> Result<Self>;
}

/// Lazily generated, unbounded noise for one stream. Caches one block.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    spec: NoiseSpec,
    stream: u64,
    shift: i64,
    cached_block: Option<i64>,
    cache: Vec<f64>,
}

impl NoiseStream {
    pub fn new(spec: NoiseSpec, stream: u64) -> Self {
        Self {
            spec,
            stream,
            shift: 0,
            cached_block: None,
            cache: Vec::new(),
        }
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn stream_index(&self) -> u64 {
        self.stream
    }

    fn fill_block(&mut self, block: i64) -> Result<()> {
        if !(-MAX_BLOCK..MAX_BLOCK).contains(&block) {
            return Err(Error::NoiseWindow(format!("block {block} outside the addressable range")));
        }
        let m = self.spec.noise_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((block + MAX_BLOCK) as u128) << BLOCK_WORD_SHIFT);
        let scale = self.spec.dt.sqrt();
        self.cache.clear();
        self.cache.extend((0..BLOCK_STEPS * m).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
        self.cached_block = Some(block);
        Ok(())
    }
}

impl IncrementSource for NoiseStream {
    fn dt(&self) -> f64 {
        self.spec.dt
    }

    fn noise_dim(&self) -> usize {
        self.spec.noise_dim
    }

    #[inline]
    fn increment(&mut self, j: i64) -> Result<&[f64]> {
        let j = j + self.shift;
        let block = j.div_euclid(BLOCK_STEPS as i64);
        if self.cached_block != Some(block) {
            self.fill_block(block)?;
        }
        let m = self.spec.noise_dim;
        let off = j.rem_euclid(BLOCK_STEPS as i64) as usize * m;
        Ok(&self.cache[off..off + m])
    }

    fn shifted(&self, k: i64) -> Result<Self> {
        Ok(Self {
            shift: self.shift + k,
            cached_block: None,
            cache: Vec::new(),
            ..*self
        })
    }
}

/// Materialized increments over a window of grid indices.
///
/// The storage may extend beyond the visible window so that shifted views
/// can be taken without resampling.
#[derive(Debug, Clone)]
pub struct WienerPath {
    dt: f64,
    noise_dim: usize,
    storage: Arc<[f64]>,
    storage_lo: i64,
    lo: i64,
    n_steps: usize,
    shift: i64,
}

impl WienerPath {
    /// Samples storage for indices `[lo − pad, lo + n_steps + pad)` and
    /// exposes `[lo, lo + n_steps)`.
    fn sample(spec: &NoiseSpec, n_steps: usize, stream: u64, pad: usize) -> Result<Self> {
        spec.validate()?;
        let lo = spec.origin_index()?;
        let m = spec.noise_dim;
        let storage_lo = lo - pad as i64;
        let total = n_steps + 2 * pad;
        let mut src = spec.stream(stream);
        let mut data = Vec::with_capacity(total * m);
        for i in 0..total {
            data.extend_from_slice(src.increment(storage_lo + i as i64)?);
        }
        Ok(Self {
            dt: spec.dt,
            noise_dim: m,
            storage: data.into(),
            storage_lo,
            lo,
            n_steps,
            shift: 0,
        })
    }

    /// Like [`sample_path`] but pre-samples `pad` extra steps on both sides,
    /// so shifts by up to `pad` stay inside the window.
    pub fn sample_padded(spec: &NoiseSpec, n_steps: usize, stream: u64, pad: usize) -> Result<Self> {
        Self::sample(spec, n_steps, stream, pad)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// First grid index of the visible window.
    pub fn first_index(&self) -> i64 {
        self.lo
    }

    /// One past the last grid index of the visible window.
    pub fn end_index(&self) -> i64 {
        self.lo + self.n_steps as i64
    }

    pub fn origin(&self) -> f64 {
        self.lo as f64 * self.dt
    }

    /// `θ_{k·dt}`: the visible window stays put, the increments under it move.
    pub fn shift(&self, k: i64) -> Result<Self> {
        let shift = self.shift + k;
        let start = self.lo + shift - self.storage_lo;
        let stored = (self.storage.len() / self.noise_dim.max(1)) as i64;
        if self.n_steps > 0 && (start < 0 || start + self.n_steps as i64 > stored) {
            return Err(Error::NoiseWindow(format!(
                "shift by {k} steps needs stored indices [{}, {}) but only [{}, {}) were sampled",
                self.lo + shift,
                self.lo + shift + self.n_steps as i64,
                self.storage_lo,
                self.storage_lo + stored
            )));
        }
        Ok(Self {
            shift,
            storage: Arc::clone(&self.storage),
            ..*self
        })
    }

    /// Increment at absolute grid index `j`.
    pub fn get(&self, j: i64) -> Result<&[f64]> {
        if j < self.lo || j >= self.end_index() {
            return Err(Error::NoiseWindow(format!(
                "index {j} outside sampled window [{}, {})",
                self.lo,
                self.end_index()
            )));
        }
        let m = self.noise_dim;
        let off = (j + self.shift - self.storage_lo) as usize * m;
        Ok(&self.storage[off..off + m])
    }

    /// Visible increments, row-major `n_steps × m`.
    pub fn increments(&self) -> &[f64] {
        let m = self.noise_dim;
        let off = (self.lo + self.shift - self.storage_lo) as usize * m;
        &self.storage[off..off + self.n_steps * m]
    }

    /// `W(b) − W(a)` for window-relative step indices `a ≤ b`, summed over
    /// the increments in between.
    pub fn increment_sum(&self, a: usize, b: usize) -> Vec<f64> {
        let m = self.noise_dim;
        let inc = self.increments();
        let mut out = vec![0.0; m];
        for i in a..b {
            for (o, v) in out.iter_mut().zip(&inc[i * m..(i + 1) * m]) {
                *o += v;
            }
        }
        out
    }

    /// `W` after `j` steps from the window origin.
    pub fn cumulative(&self, j: usize) -> Vec<f64> {
        self.increment_sum(0, j)
    }

    /// Little-endian dump: magic, `m` (u64), `dt` (f64), `n_steps` (u64),
    /// then the increments.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.noise_dim as u64).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&(self.n_steps as u64).to_le_bytes())?;
        for v in self.increments() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump written by [`WienerPath::write_binary`]; the window starts at index 0.
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Unsupported("not a Wiener path dump".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let m = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let dt = f64::from_le_bytes(word);
        r.read_exact(&mut word)?;
        let n = u64::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n * m {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Ok(Self {
            dt,
            noise_dim: m,
            storage: data.into(),
            storage_lo: 0,
            lo: 0,
            n_steps: n,
            shift: 0,
        })
    }
}

impl IncrementSource for WienerPath {
    fn dt(&self) -> f64 {
        self.dt
    }

    fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    #[inline]
    fn increment(&mut self, j: i64) -> Result<&[f64]> {
        self.get(j)
    }

    fn shifted(&self, k: i64) -> Result<Self> {
        self.shift(k)
    }
}

/// Increments for `n_steps` steps starting at `spec.origin`, drawn from
/// stream `stream_index`.
pub fn sample_path(spec: &NoiseSpec, n_steps: usize, stream_index: u64) -> Result<WienerPath> {
    WienerPath::sample(spec, n_steps, stream_index, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> NoiseSpec {
        NoiseSpec::new(42, 0.01, 2)
    }

    #[test]
    fn empty_path() {
        let p = sample_path(&spec(), 0, 0).unwrap();
        assert!(p.increments().is_empty());
    }

    #[test]
    fn deterministic_per_stream() {
        let a = sample_path(&spec(), 5000, 3).unwrap();
        let b = sample_path(&spec(), 5000, 3).unwrap();
        assert_eq!(a.increments(), b.increments());
        let c = sample_path(&spec(), 5000, 4).unwrap();
        assert_ne!(a.increments(), c.increments());
    }

    #[test]
    fn overlapping_windows_agree() {
        let s = spec();
        let long = sample_path(&s, 10_000, 1).unwrap();
        let mut later = s;
        later.origin = 37.0 * s.dt;
        let short = sample_path(&later, 100, 1).unwrap();
        assert_eq!(short.increments(), &long.increments()[74..274]);
    }

    #[test]
    fn block_order_does_not_matter() {
        let mut a = spec().stream(9);
        let mut b = spec().stream(9);
        let far = 7 * BLOCK_STEPS as i64 + 5;
        let x1 = a.increment(far).unwrap().to_vec();
        let _ = b.increment(-3).unwrap();
        let x2 = b.increment(far).unwrap().to_vec();
        assert_eq!(x1, x2);
    }

    #[test]
    fn shift_zero_and_inverse() {
        let p = WienerPath::sample_padded(&spec(), 200, 0, 50).unwrap();
        assert_eq!(p.shift(0).unwrap().increments(), p.increments());
        let back = p.shift(17).unwrap().shift(-17).unwrap();
        assert_eq!(back.increments(), p.increments());
        assert!(matches!(p.shift(51), Err(Error::NoiseWindow(_))));
    }

    #[test]
    fn shift_realizes_wiener_shift_exactly() {
        let p = WienerPath::sample_padded(&spec(), 1000, 5, 400).unwrap();
        let k = 250;
        let q = p.shift(k as i64).unwrap();
        for j in (0..500).step_by(5) {
            // W_t(θ_s ω) = W_{t+s}(ω) − W_s(ω)
            assert_eq!(q.cumulative(j), p.increment_sum(k, k + j));
        }
    }

    #[test]
    fn increment_moments() {
        let s = NoiseSpec::new(11, 0.01, 1);
        let n = 100_000;
        let p = sample_path(&s, n, 0).unwrap();
        let inc = p.increments();
        let mean = inc.iter().sum::<f64>() / n as f64;
        let var = inc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 * (s.dt / n as f64).sqrt());
        assert!((var - s.dt).abs() < 4.0 * s.dt * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn streams_are_uncorrelated() {
        let s = NoiseSpec::new(11, 1.0, 1);
        let n = 50_000;
        let a = sample_path(&s, n, 0).unwrap();
        let b = sample_path(&s, n, 1).unwrap();
        let c: f64 = a.increments().iter().zip(b.increments()).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!(c.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn derived_specs_differ() {
        let s = spec();
        assert_ne!(s.derive(1).seed, s.derive(2).seed);
        assert_eq!(s.derive(1), s.derive(1));
    }

    #[test]
    fn binary_round_trip() {
        let p = sample_path(&spec(), 123, 2).unwrap();
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 123 * 2 * 8);
        let q = WienerPath::read_binary(buf.as_slice()).unwrap();
        assert_eq!(q.increments(), p.increments());
        assert_eq!(q.dt(), p.dt());
    }

    #[test]
    fn misaligned_origin_rejected() {
        let mut s = spec();
        s.origin = 0.005;
        assert!(matches!(sample_path(&s, 10, 0), Err(Error::GridMisaligned(_))));
    }
}
