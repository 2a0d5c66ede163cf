//! Estimators over ensembles: two-sample Kolmogorov distance, L^p strong
//! errors, sup-moments, inverse Malliavin-norm moments and log-log rate fits.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("nonpositive norm² {value} at index {index}; the diffusion coefficient may vanish")]
    NonPositiveNorm { index: usize, value: f64 },
    #[error("rate fit needs positive (eps, err); got ({eps}, {err}) at index {index}")]
    NonPositivePoint { index: usize, eps: f64, err: f64 },
    #[error("rate fit needs distinct abscissae")]
    DegenerateAbscissae,
    #[error("p must be at least {min}, got {p}")]
    InvalidExponent { p: f64, min: f64 },
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateWithError {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
}

impl EstimateWithError {
    /// Sample mean and `s / √n` (with the `n - 1` sample variance). Summation
    /// runs in input order.
    pub fn from_samples(samples: &[f64]) -> Result<Self, StatsError> {
        let n = samples.len();
        if n == 0 {
            return Err(StatsError::Empty);
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(i));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let ss: f64 = samples.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            value: mean,
            std_error,
            n,
        })
    }
}

/// Empirical CDF over a sorted copy of the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(samples: &[f64]) -> Result<Self, StatsError> {
        if samples.is_empty() {
            return Err(StatsError::Empty);
        }
        if let Some(i) = samples.iter().position(|v| v.is_nan()) {
            return Err(StatsError::NonFinite(i));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    /// `#{samples ≤ x} / n`
    pub fn eval(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }
}

/// Exact two-sample Kolmogorov–Smirnov statistic `sup_x |F_a(x) - F_b(x)|`.
///
/// Both ECDFs are right-continuous step functions, so the supremum is attained
/// just after one of the merged breakpoints; a single merge pass visits them
/// all, advancing past ties in both samples before comparing.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let ea = Ecdf::new(a)?;
    let eb = Ecdf::new(b)?;
    Ok(ks_distance_sorted(ea.sorted(), eb.sorted()))
}

/// [`ks_distance`] on inputs already sorted ascending.
pub fn ks_distance_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// `E|x^ε - x|^p` over coupled pairs.
pub fn lp_error(pairs: &[(f64, f64)], p: f64) -> Result<EstimateWithError, StatsError> {
    if pairs.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: pairs.len(),
        });
    }
    if p.is_nan() || p < 1.0 {
        return Err(StatsError::InvalidExponent { p, min: 1.0 });
    }
    let gaps: Vec<f64> = pairs.iter().map(|(a, b)| (a - b).abs().powf(p)).collect();
    EstimateWithError::from_samples(&gaps)
}

/// `E max_i |x_i|^p` over an ensemble of discretized paths.
pub fn moment_sup<P: AsRef<[f64]>>(paths: &[P], p: f64) -> Result<EstimateWithError, StatsError> {
    if paths.is_empty() {
        return Err(StatsError::Empty);
    }
    let maxima: Vec<f64> = paths
        .iter()
        .map(|path| {
            path.as_ref()
                .iter()
                .fold(0.0_f64, |m, v| m.max(v.abs()))
                .powf(p)
        })
        .collect();
    EstimateWithError::from_samples(&maxima)
}

/// `E[(‖D X_t‖²)^{-p}]`.
pub fn inverse_norm_moment(norms_sq: &[f64], p: f64) -> Result<EstimateWithError, StatsError> {
    if let Some((index, &value)) = norms_sq
        .iter()
        .enumerate()
        .find(|(_, v)| v.is_nan() || **v <= 0.0)
    {
        return Err(StatsError::NonPositiveNorm { index, value });
    }
    let inv: Vec<f64> = norms_sq.iter().map(|v| v.powf(-p)).collect();
    EstimateWithError::from_samples(&inv)
}

/// Ordinary least squares of `ln err` on `ln eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
    pub residuals: Vec<f64>,
    /// Standard error of the slope; 0 for exact fits or three points on a line.
    pub slope_std_error: f64,
}

pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit, StatsError> {
    if points.len() < 3 {
        return Err(StatsError::TooFew {
            needed: 3,
            got: points.len(),
        });
    }
    for (index, &(eps, err)) in points.iter().enumerate() {
        if !(eps > 0.0 && err > 0.0 && eps.is_finite() && err.is_finite()) {
            return Err(StatsError::NonPositivePoint { index, eps, err });
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(StatsError::DegenerateAbscissae);
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| y - (intercept + slope * x))
        .collect();
    let sse: f64 = residuals.iter().map(|r| r * r).sum();
    let r_squared = if syy > 0.0 {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let slope_std_error = (sse / (n - 2.0) / sxx).sqrt();
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        n_points: points.len(),
        residuals,
        slope_std_error,
    })
}

/// Two-sample KS fluctuation scale used for experiment planning: `1.36 / √n`.
pub fn ks_noise_floor(n: usize) -> f64 {
    1.36 / (n as f64).sqrt()
}
