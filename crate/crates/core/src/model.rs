//! Scalar jump-diffusion models `dX = b dt + σ dB + ∫ c(X-, z) Ñ(dt, dz)`
//! together with their second-order (small-mass) counterparts, the standing
//! Lipschitz/growth assumptions, and the built-in test models.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::noise::{MarkSampler, Purpose, StreamRng};

/// Positivity floor for `1 + ∂ₓc`, required by the logarithm in the
/// closed-form Malliavin derivative.
pub const DELTA_LOG: f64 = 1e-6;

/// Slack on probed inequalities.
pub const TOL_ASSUME: f64 = 1e-9;

/// Relative tolerance when checking supplied derivatives against central
/// differences.
pub const DERIVATIVE_RTOL: f64 = 1e-5;

pub type TimeStateFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type StateMarkFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type StateFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model '{0}' (expected linear_jump_ou, deterministic_relax, pure_brownian or pure_jump)")]
    UnknownModel(String),
    #[error("model '{model}' requires parameter '{param}'")]
    MissingParam { model: String, param: String },
    #[error("parameter '{param}' = {value} is invalid: {reason}")]
    InvalidParam {
        param: String,
        value: f64,
        reason: &'static str,
    },
    #[error("model '{model}' does not take parameter '{param}'")]
    UnexpectedParam { model: String, param: String },
    #[error("1 + dc/dx = {value} at x = {x}, z = {z} is below the floor {DELTA_LOG}")]
    LogFloorViolated { x: f64, z: f64, value: f64 },
    #[error(
        "supplied {name} disagrees with finite differences at ({a}, {b}): {supplied} vs {numeric}"
    )]
    InconsistentDerivative {
        name: &'static str,
        a: f64,
        b: f64,
        supplied: f64,
        numeric: f64,
    },
    #[error("probe box is empty or non-finite")]
    EmptyProbeBox,
    #[error("n_probes must be at least 1")]
    NoProbes,
}

/// Exact mark-law expectations, used in place of Monte Carlo compensators when
/// a model knows them.
#[derive(Clone)]
pub struct AnalyticMeans {
    /// `x ↦ E_μ[c(x, Z)]`
    pub jump: StateFn,
    /// `x ↦ E_μ[∂ₓc(x, Z)]`
    pub dc_dx: StateFn,
    /// `x ↦ E_μ[log(1 + ∂ₓc(x, Z))]`
    pub log1p_dc_dx: StateFn,
}

/// A scalar jump-diffusion model with all coefficient derivatives.
///
/// The intensity measure is `ν = λ·μ` with `μ` sampled by `mark_sampler`.
/// Coefficient closures must be pure.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub b: TimeStateFn,
    pub sigma: TimeStateFn,
    pub c: StateMarkFn,
    pub db_dx: TimeStateFn,
    pub d2b_dx2: TimeStateFn,
    pub dsigma_dx: TimeStateFn,
    pub d2sigma_dx2: TimeStateFn,
    pub dc_dx: StateMarkFn,
    pub dc_dz: StateMarkFn,
    pub jump_intensity: f64,
    pub mark_sampler: Arc<dyn MarkSampler>,
    pub analytic_means: Option<AnalyticMeans>,
    pub lipschitz_k: f64,
    pub x0: f64,
    pub y0: f64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("jump_intensity", &self.jump_intensity)
            .field("lipschitz_k", &self.lipschitz_k)
            .field("x0", &self.x0)
            .field("y0", &self.y0)
            .field("analytic_means", &self.analytic_means.is_some())
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    pub fn has_jumps(&self) -> bool {
        self.jump_intensity > 0.0
    }

    pub fn sample_mark(&self, rng: &mut StreamRng) -> f64 {
        loop {
            let z = self.mark_sampler.sample(rng);
            if z != 0.0 {
                return z;
            }
        }
    }
}

/// Rectangle of probe points for assumption and derivative checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeBox {
    pub t: (f64, f64),
    pub x: (f64, f64),
}

impl ProbeBox {
    pub fn new(t: (f64, f64), x: (f64, f64)) -> Result<Self, ModelError> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(t) || !ok(x) || x.0 == x.1 {
            return Err(ModelError::EmptyProbeBox);
        }
        Ok(Self { t, x })
    }

    fn sample(range: (f64, f64), rng: &mut StreamRng) -> f64 {
        range.0 + (range.1 - range.0) * rng.uniform()
    }
}

/// Finite-sample verdict on the Lipschitz/growth (`h1_*`) and derivative
/// (`h2_*`) conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub h1_lipschitz_ok: bool,
    pub h1_growth_ok: bool,
    pub h2_deriv_bounded_ok: bool,
    pub h2_jump_moments_ok: bool,
    pub worst_ratio: f64,
    pub probe_count: usize,
}

/// Marks drawn per probe point to estimate `∫ · ν(dz)`.
const MARKS_PER_PROBE: usize = 64;

#[derive(Default)]
struct Worst {
    lipschitz: f64,
    growth: f64,
    deriv: f64,
    jump: f64,
}

/// Probes every Lipschitz, growth and derivative inequality at `n_probes` random points of `probe`.
///
/// Each check is expressed as a ratio `lhs / rhs` that must stay below 1;
/// `ν`-integrals are `λ` times a Monte Carlo mark mean.
pub fn validate_assumptions(
    model: &ModelSpec,
    probe: &ProbeBox,
    n_probes: usize,
    rng_seed: u64,
) -> Result<AssumptionReport, ModelError> {
    if n_probes == 0 {
        return Err(ModelError::NoProbes);
    }
    let k = model.lipschitz_k;
    let lam = model.jump_intensity;
    let mut rng = StreamRng::new(rng_seed, Purpose::Probe, 0);
    let mut mark_rng = StreamRng::new(rng_seed, Purpose::Probe, 1);
    let mut worst = Worst::default();
    let mut marks = vec![0.0; MARKS_PER_PROBE];

    for _ in 0..n_probes {
        let t = ProbeBox::sample(probe.t, &mut rng);
        let x = ProbeBox::sample(probe.x, &mut rng);
        let mut y = ProbeBox::sample(probe.x, &mut rng);
        if y == x {
            y = if x == probe.x.0 { probe.x.1 } else { probe.x.0 };
        }
        let dx2 = (x - y).powi(2);

        let db = (model.b)(t, x) - (model.b)(t, y);
        let ds = (model.sigma)(t, x) - (model.sigma)(t, y);
        worst.lipschitz = worst.lipschitz.max((db * db + ds * ds) / (k * dx2));

        let bx = (model.b)(t, x);
        let sx = (model.sigma)(t, x);
        let mut growth_lhs = bx * bx + sx * sx;

        let d1 = (model.db_dx)(t, x).powi(2) + (model.dsigma_dx)(t, x).powi(2);
        let d2 = (model.d2b_dx2)(t, x).powi(2) + (model.d2sigma_dx2)(t, x).powi(2);
        worst.deriv = worst.deriv.max(d1 / k).max(d2 / k);

        if lam > 0.0 {
            for m in marks.iter_mut() {
                *m = model.sample_mark(&mut mark_rng);
            }
            let mean = |f: &dyn Fn(f64) -> f64| {
                marks.iter().map(|&z| f(z)).sum::<f64>() / marks.len() as f64
            };

            for &z in &marks {
                let v = 1.0 + (model.dc_dx)(x, z);
                if v.is_nan() || v < DELTA_LOG {
                    return Err(ModelError::LogFloorViolated { x, z, value: v });
                }
            }

            let lip_c = lam * mean(&|z| ((model.c)(x, z) - (model.c)(y, z)).powi(2));
            worst.lipschitz = worst.lipschitz.max(lip_c / (k * dx2));
            growth_lhs += lam * mean(&|z| (model.c)(x, z).powi(2));

            let h = 1e-5 * x.abs().max(1.0);
            let d2c = |z: f64| ((model.dc_dx)(x + h, z) - (model.dc_dx)(x - h, z)) / (2.0 * h);
            for p in [2, 4] {
                let m1 = lam * mean(&|z| (model.dc_dx)(x, z).abs().powi(p));
                let m2 = lam * mean(&|z| d2c(z).abs().powi(p));
                worst.jump = worst.jump.max(m1 / k).max(m2 / k);
            }
            let lip_dc = lam * mean(&|z| ((model.dc_dx)(x, z) - (model.dc_dx)(y, z)).powi(2));
            worst.jump = worst.jump.max(lip_dc / (k * dx2));
            for &z in &marks {
                let gz = (model.dc_dz)(x, z).abs() / (k * (1.0 + x.abs()));
                let lz = ((model.dc_dz)(x, z) - (model.dc_dz)(y, z)).abs() / (k * (x - y).abs());
                worst.jump = worst.jump.max(gz).max(lz);
            }
        }
        worst.growth = worst.growth.max(growth_lhs / (k * (1.0 + x * x)));
    }

    let ok = |r: f64| r <= 1.0 + TOL_ASSUME;
    Ok(AssumptionReport {
        h1_lipschitz_ok: ok(worst.lipschitz),
        h1_growth_ok: ok(worst.growth),
        h2_deriv_bounded_ok: ok(worst.deriv),
        h2_jump_moments_ok: ok(worst.jump),
        worst_ratio: worst
            .lipschitz
            .max(worst.growth)
            .max(worst.deriv)
            .max(worst.jump),
        probe_count: n_probes,
    })
}

/// Compares each supplied derivative field with a central difference of its
/// parent at `n_points` random points. Relative error is measured against
/// `max(|supplied|, 1)`.
pub fn check_derivatives(
    model: &ModelSpec,
    probe: &ProbeBox,
    n_points: usize,
    seed: u64,
) -> Result<(), ModelError> {
    let mut rng = StreamRng::new(seed, Purpose::Probe, 2);
    let central = |f: &dyn Fn(f64) -> f64, x: f64| {
        let h = 1e-4 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    };
    let compare = |name: &'static str, a: f64, b: f64, supplied: f64, numeric: f64| {
        if (supplied - numeric).abs() <= DERIVATIVE_RTOL * supplied.abs().max(1.0) {
            Ok(())
        } else {
            Err(ModelError::InconsistentDerivative {
                name,
                a,
                b,
                supplied,
                numeric,
            })
        }
    };
    for _ in 0..n_points {
        let t = ProbeBox::sample(probe.t, &mut rng);
        let x = ProbeBox::sample(probe.x, &mut rng);
        compare(
            "db_dx",
            t,
            x,
            (model.db_dx)(t, x),
            central(&|x| (model.b)(t, x), x),
        )?;
        compare(
            "d2b_dx2",
            t,
            x,
            (model.d2b_dx2)(t, x),
            central(&|x| (model.db_dx)(t, x), x),
        )?;
        compare(
            "dsigma_dx",
            t,
            x,
            (model.dsigma_dx)(t, x),
            central(&|x| (model.sigma)(t, x), x),
        )?;
        compare(
            "d2sigma_dx2",
            t,
            x,
            (model.d2sigma_dx2)(t, x),
            central(&|x| (model.dsigma_dx)(t, x), x),
        )?;
        if model.has_jumps() {
            let z = model.sample_mark(&mut rng);
            compare(
                "dc_dx",
                x,
                z,
                (model.dc_dx)(x, z),
                central(&|x| (model.c)(x, z), x),
            )?;
            compare(
                "dc_dz",
                x,
                z,
                (model.dc_dz)(x, z),
                central(&|z| (model.c)(x, z), z),
            )?;
        }
    }
    Ok(())
}

fn constant(v: f64) -> TimeStateFn {
    Arc::new(move |_, _| v)
}

fn zero_jump() -> StateMarkFn {
    Arc::new(|_, _| 0.0)
}

fn zero_means() -> AnalyticMeans {
    AnalyticMeans {
        jump: Arc::new(|_| 0.0),
        dc_dx: Arc::new(|_| 0.0),
        log1p_dc_dx: Arc::new(|_| 0.0),
    }
}

/// Marks uniform on `[-1, 1] \ {0}`: mean 0, second moment 1/3.
pub fn symmetric_uniform_mark(rng: &mut StreamRng) -> f64 {
    2.0 * rng.uniform() - 1.0
}

/// Second moment of [`symmetric_uniform_mark`].
pub const SYMMETRIC_UNIFORM_SECOND_MOMENT: f64 = 1.0 / 3.0;

struct Params<'a> {
    model: &'a str,
    map: &'a BTreeMap<String, f64>,
    allowed: &'static [&'static str],
}

impl Params<'_> {
    fn check_keys(&self) -> Result<(), ModelError> {
        for key in self.map.keys() {
            if !self.allowed.contains(&key.as_str()) {
                return Err(ModelError::UnexpectedParam {
                    model: self.model.into(),
                    param: key.clone(),
                });
            }
        }
        Ok(())
    }

    fn get(&self, key: &str, default: Option<f64>) -> Result<f64, ModelError> {
        let v = match (self.map.get(key), default) {
            (Some(&v), _) => v,
            (None, Some(d)) => d,
            (None, None) => {
                return Err(ModelError::MissingParam {
                    model: self.model.into(),
                    param: key.into(),
                })
            }
        };
        if !v.is_finite() {
            return Err(ModelError::InvalidParam {
                param: key.into(),
                value: v,
                reason: "must be finite",
            });
        }
        Ok(v)
    }

    fn intensity(&self) -> Result<f64, ModelError> {
        let lam = self.get("lambda", None)?;
        if lam < 0.0 {
            return Err(ModelError::InvalidParam {
                param: "lambda".into(),
                value: lam,
                reason: "must be nonnegative",
            });
        }
        Ok(lam)
    }
}

/// Names accepted by [`builtin_model`].
pub const BUILTIN_MODELS: [&str; 4] = [
    "linear_jump_ou",
    "deterministic_relax",
    "pure_brownian",
    "pure_jump",
];

/// Built-in models, selected by name with a parameter map.
///
/// * `linear_jump_ou`: `b = -a x`, `σ = s`, `c = γ z`; needs `a`, `s`, `gamma`, `lambda`.
/// * `deterministic_relax`: `b = σ = c = 0`.
/// * `pure_brownian`: `b = 0`, `σ = 1`, `c = 0`.
/// * `pure_jump`: `b = σ = 0`, `c = z`; needs `lambda`.
///
/// All take optional `x0`, `y0` (default 0). Marks are uniform on
/// `[-1, 1] \ {0}`. `lipschitz_k` is set to the exact smallest constant
/// satisfying the Lipschitz and derivative bounds for the parameters, floored at 1.
pub fn builtin_model(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelSpec, ModelError> {
    let allowed: &'static [&'static str] = match name {
        "linear_jump_ou" => &["a", "s", "gamma", "lambda", "x0", "y0"],
        "pure_jump" => &["lambda", "x0", "y0"],
        "deterministic_relax" | "pure_brownian" => &["x0", "y0"],
        other => return Err(ModelError::UnknownModel(other.into())),
    };
    let p = Params {
        model: name,
        map: params,
        allowed,
    };
    p.check_keys()?;
    let x0 = p.get("x0", Some(0.0))?;
    let y0 = p.get("y0", Some(0.0))?;

    let base = ModelSpec {
        name: name.into(),
        b: constant(0.0),
        sigma: constant(0.0),
        c: zero_jump(),
        db_dx: constant(0.0),
        d2b_dx2: constant(0.0),
        dsigma_dx: constant(0.0),
        d2sigma_dx2: constant(0.0),
        dc_dx: zero_jump(),
        dc_dz: zero_jump(),
        jump_intensity: 0.0,
        mark_sampler: Arc::new(symmetric_uniform_mark),
        analytic_means: Some(zero_means()),
        lipschitz_k: 1.0,
        x0,
        y0,
    };

    Ok(match name {
        "linear_jump_ou" => {
            let a = p.get("a", None)?;
            let s = p.get("s", None)?;
            let gamma = p.get("gamma", None)?;
            let lam = p.intensity()?;
            ModelSpec {
                b: Arc::new(move |_, x| -a * x),
                sigma: constant(s),
                c: Arc::new(move |_, z| gamma * z),
                db_dx: constant(-a),
                dc_dz: Arc::new(move |_, _| gamma),
                jump_intensity: lam,
                lipschitz_k: linear_ou_lipschitz(a, s, gamma, lam).max(1.0),
                ..base
            }
        }
        "pure_brownian" => ModelSpec {
            sigma: constant(1.0),
            ..base
        },
        "pure_jump" => {
            let lam = p.intensity()?;
            ModelSpec {
                c: Arc::new(|_, z| z),
                dc_dz: Arc::new(|_, _| 1.0),
                jump_intensity: lam,
                lipschitz_k: (lam * SYMMETRIC_UNIFORM_SECOND_MOMENT).max(1.0),
                ..base
            }
        }
        _ => base,
    })
}

/// Smallest `K` for which `linear_jump_ou` satisfies every probed inequality:
/// `a²` (Lipschitz and derivative bounds), `s² + λγ²E[z²]` (growth at x = 0),
/// and `|γ|` (bound on `∂_z c`).
pub fn linear_ou_lipschitz(a: f64, s: f64, gamma: f64, lambda: f64) -> f64 {
    (a * a)
        .max(s * s + lambda * gamma * gamma * SYMMETRIC_UNIFORM_SECOND_MOMENT)
        .max(gamma.abs())
}
