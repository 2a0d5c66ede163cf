//! Reproducible noise realizations: Brownian increments and compound-Poisson
//! jump events on a uniform time grid.
//!
//! Every draw comes from a counter-based ChaCha substream keyed by
//! `(seed, purpose)` with the path index as the stream id, so any path can be
//! regenerated in isolation and in any order.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal, Poisson};
use thiserror::Error;

/// Brownian increments are rounded to integer multiples of this quantum so
/// that partial sums in any order are exact.
pub const BROWNIAN_QUANTUM: f64 = 1.0 / (1u64 << 40) as f64;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error(
        "time grid needs t_end > 0 and n_steps >= 1 (got t_end = {t_end}, n_steps = {n_steps})"
    )]
    InvalidGrid { t_end: f64, n_steps: usize },
    #[error("jump intensity must be finite and nonnegative, got {0}")]
    NegativeIntensity(f64),
    #[error("coarsening factor {factor} does not divide n_steps = {n_steps}")]
    IndivisibleFactor { factor: usize, n_steps: usize },
    #[error("mark sampler returned {0}; marks must be finite and nonzero")]
    InvalidMark(f64),
    #[error("malformed noise dump: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(io::ErrorKind),
}

/// Uniform grid `t_i = i * T / n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self, NoiseError> {
        if !(t_end.is_finite() && t_end > 0.0) || n_steps == 0 {
            return Err(NoiseError::InvalidGrid { t_end, n_steps });
        }
        Ok(Self { t_end, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    /// Node time `t_i`; exact at both endpoints.
    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.t_end
        } else {
            self.t_end * (i as f64 / self.n_steps as f64)
        }
    }

    /// Index of the node closest to `t`, if `t` lies on the grid to within a
    /// relative `1e-9` of a step.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = t / self.t_end * self.n_steps as f64;
        let i = x.round();
        if i < 0.0 || i > self.n_steps as f64 || (x - i).abs() > 1e-9 {
            return None;
        }
        Some(i as usize)
    }

    /// Grid with `factor` times as many steps.
    pub fn refine(&self, factor: usize) -> Self {
        Self {
            t_end: self.t_end,
            n_steps: self.n_steps * factor.max(1),
        }
    }
}

/// Substream purposes. Each tag addresses an independent ChaCha key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Brownian = 1,
    JumpCount = 2,
    JumpTime = 3,
    Mark = 4,
    Compensator = 5,
    MalliavinMark = 6,
    Probe = 7,
}

/// A counter-based uniform/normal source.
///
/// The key is `(seed, purpose)`, the ChaCha stream id is the path index, and
/// [`StreamRng::at_block`] seeks to a disjoint 2^32-word window so per-step
/// draws can be regenerated without replaying the stream.
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha12Rng,
}

impl StreamRng {
    pub fn new(seed: u64, purpose: Purpose, path_index: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
        let mut inner = ChaCha12Rng::from_seed(key);
        inner.set_stream(path_index);
        Self { inner }
    }

    /// Same substream, positioned at the start of window `block`.
    pub fn at_block(seed: u64, purpose: Purpose, path_index: u64, block: u64) -> Self {
        let mut rng = Self::new(seed, purpose, path_index);
        rng.inner.set_word_pos((block as u128) << 32);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on (0, 1].
    pub fn uniform_left_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal by inversion of the uniform stream.
    pub fn normal(&mut self) -> f64 {
        let u = self.uniform();
        standard_normal().inverse_cdf(u)
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Samples marks of the normalized jump law.
pub trait MarkSampler: Send + Sync {
    fn sample(&self, rng: &mut StreamRng) -> f64;
}

impl<F> MarkSampler for F
where
    F: Fn(&mut StreamRng) -> f64 + Send + Sync,
{
    fn sample(&self, rng: &mut StreamRng) -> f64 {
        self(rng)
    }
}

/// One jump event. `step` is the grid step whose interval `(t_i, t_{i+1}]`
/// contains `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub time: f64,
    pub mark: f64,
    pub step: usize,
}

/// One realization of the driving noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub grid: TimeGrid,
    pub d_b: Vec<f64>,
    pub jumps: Vec<Jump>,
    pub intensity: f64,
    pub seed: u64,
    pub stream_id: u64,
}

fn quantize(x: f64) -> f64 {
    (x / BROWNIAN_QUANTUM).round() * BROWNIAN_QUANTUM
}

/// Draws a noise path for `(seed, path_index)` on `grid`.
pub fn sample_noise(
    grid: TimeGrid,
    intensity: f64,
    marks: &dyn MarkSampler,
    seed: u64,
    path_index: u64,
) -> Result<NoisePath, NoiseError> {
    if !(intensity.is_finite() && intensity >= 0.0) {
        return Err(NoiseError::NegativeIntensity(intensity));
    }
    let n = grid.n_steps();
    let sqrt_dt = grid.dt().sqrt();
    let mut rng = StreamRng::new(seed, Purpose::Brownian, path_index);
    let d_b = (0..n).map(|_| quantize(rng.normal() * sqrt_dt)).collect();

    let mut jumps = Vec::new();
    if intensity > 0.0 {
        let mean = intensity * grid.t_end();
        let u = StreamRng::new(seed, Purpose::JumpCount, path_index).uniform();
        let count = Poisson::new(mean)
            .map_err(|_| NoiseError::NegativeIntensity(intensity))?
            .inverse_cdf(u) as usize;
        let mut time_rng = StreamRng::new(seed, Purpose::JumpTime, path_index);
        let mut fractions: Vec<f64> = (0..count).map(|_| time_rng.uniform_left_open()).collect();
        fractions.sort_by(f64::total_cmp);
        fractions.dedup();
        let mut mark_rng = StreamRng::new(seed, Purpose::Mark, path_index);
        for u in fractions {
            let mark = marks.sample(&mut mark_rng);
            if !mark.is_finite() || mark == 0.0 {
                return Err(NoiseError::InvalidMark(mark));
            }
            let step = ((u * n as f64).ceil() as usize).clamp(1, n) - 1;
            jumps.push(Jump {
                time: u * grid.t_end(),
                mark,
                step,
            });
        }
    }

    Ok(NoisePath {
        grid,
        d_b,
        jumps,
        intensity,
        seed,
        stream_id: path_index,
    })
}

/// Aggregates `factor` consecutive increments into one; jumps are kept and
/// re-indexed onto the coarse steps.
pub fn coarsen(path: &NoisePath, factor: usize) -> Result<NoisePath, NoiseError> {
    let n = path.grid.n_steps();
    if factor == 0 || !n.is_multiple_of(factor) {
        return Err(NoiseError::IndivisibleFactor { factor, n_steps: n });
    }
    let grid = TimeGrid::new(path.grid.t_end(), n / factor)?;
    let d_b = path.d_b.chunks(factor).map(|c| c.iter().sum()).collect();
    let jumps = path
        .jumps
        .iter()
        .map(|j| Jump {
            step: j.step / factor,
            ..*j
        })
        .collect();
    Ok(NoisePath {
        grid,
        d_b,
        jumps,
        intensity: path.intensity,
        seed: path.seed,
        stream_id: path.stream_id,
    })
}

impl NoisePath {
    /// Jumps falling in step `i`, in time order.
    pub fn jumps_in_step(&self, i: usize) -> &[Jump] {
        let lo = self.jumps.partition_point(|j| j.step < i);
        let hi = self.jumps.partition_point(|j| j.step <= i);
        &self.jumps[lo..hi]
    }

    /// Writes the little-endian debug dump:
    ///
    /// | field      | type      |
    /// |------------|-----------|
    /// | magic      | `b"SKJNOIS1"` |
    /// | T          | f64       |
    /// | n_steps    | u64       |
    /// | λ          | f64       |
    /// | stream_id  | u64       |
    /// | n_jumps    | u64       |
    /// | dB         | n_steps × f64 |
    /// | jumps      | n_jumps × (time f64, mark f64) |
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&self.grid.t_end().to_le_bytes())?;
        w.write_all(&(self.grid.n_steps() as u64).to_le_bytes())?;
        w.write_all(&self.intensity.to_le_bytes())?;
        w.write_all(&self.stream_id.to_le_bytes())?;
        w.write_all(&(self.jumps.len() as u64).to_le_bytes())?;
        for x in &self.d_b {
            w.write_all(&x.to_le_bytes())?;
        }
        for j in &self.jumps {
            w.write_all(&j.time.to_le_bytes())?;
            w.write_all(&j.mark.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump written by [`NoisePath::write_dump`]. The seed is not part
    /// of the format and is restored as 0.
    pub fn read_dump<R: Read>(mut r: R) -> Result<Self, NoiseError> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(NoiseError::Malformed("bad magic".into()));
        }
        let t_end = read_f64(&mut r)?;
        let n_steps = read_u64(&mut r)? as usize;
        let intensity = read_f64(&mut r)?;
        let stream_id = read_u64(&mut r)?;
        let n_jumps = read_u64(&mut r)? as usize;
        let grid = TimeGrid::new(t_end, n_steps)?;
        let d_b = (0..n_steps)
            .map(|_| read_f64(&mut r))
            .collect::<Result<_, _>>()?;
        let mut jumps = Vec::with_capacity(n_jumps);
        for _ in 0..n_jumps {
            let time = read_f64(&mut r)?;
            let mark = read_f64(&mut r)?;
            if !(time > 0.0 && time <= t_end) {
                return Err(NoiseError::Malformed(format!(
                    "jump time {time} outside (0, T]"
                )));
            }
            let step = ((time / t_end * n_steps as f64).ceil() as usize).clamp(1, n_steps) - 1;
            jumps.push(Jump { time, mark, step });
        }
        Ok(Self {
            grid,
            d_b,
            jumps,
            intensity,
            seed: 0,
            stream_id,
        })
    }
}

const DUMP_MAGIC: &[u8; 8] = b"SKJNOIS1";

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), NoiseError> {
    r.read_exact(buf).map_err(|e| NoiseError::Io(e.kind()))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, NoiseError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NoiseError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
