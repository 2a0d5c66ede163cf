//! Time stepping for the limit equation, the small-mass system and the linear
//! equations satisfied by their Malliavin derivatives.
//!
//! All schemes use left-point (frozen) coefficients. Within a step the
//! continuous increment is applied first and jumps follow in time order, each
//! seeing the state left by the previous one. Compensators `λ E_μ[·] dt` are
//! evaluated at the left node, exactly when the model ships analytic means and
//! otherwise from [`COMPENSATOR_MARKS`] dedicated mark draws per step.
//!
//! The small-mass exponential scheme and the ε-derivative fields keep two
//! running integrals per quantity: the plain sum `P` and the kernel-weighted
//! sum `W = ∫ e^{-(t-s)/ε} (...)`, so that `X^ε = x0 + ε y0 (1 - e^{-t/ε}) + P - W`.
//! Over a step of length `h` the weighted integral decays by `e^{-h/ε}` and
//! receives the continuous increment times the cell-average kernel
//! `φ = ε (1 - e^{-h/ε}) / h`; a jump at `τ` enters with weight
//! `e^{-(t_{i+1} - τ)/ε}`.

use thiserror::Error;

use crate::model::{ModelSpec, DELTA_LOG};
use crate::noise::{NoisePath, Purpose, StreamRng, TimeGrid};

/// Mark draws per step for Monte Carlo compensators.
pub const COMPENSATOR_MARKS: usize = 32;

/// Marks per perturbation time for the jump-derivative norm.
pub const NORM_MARKS: usize = 16;

/// Largest allowed `dt / ε` for the direct small-mass scheme.
pub const DIRECT_MAX_DT_OVER_EPS: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("non-finite state {value} at step {step}")]
    NonFinite { step: usize, value: f64 },
    #[error("epsilon must lie in (0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("direct scheme needs dt <= eps/10, got dt = {dt}, eps = {epsilon}")]
    StabilityGuard { dt: f64, epsilon: f64 },
    #[error("substep factor {factor} does not divide {n_steps} steps")]
    IndivisibleSubstep { factor: usize, n_steps: usize },
    #[error("noise intensity {path} does not match model intensity {model}")]
    IntensityMismatch { path: f64, model: f64 },
    #[error("trajectory and noise path do not belong together: {0}")]
    Mismatch(&'static str),
    #[error("perturbation index {r_index} out of range for {n_steps} steps")]
    RIndexOutOfRange { r_index: usize, n_steps: usize },
    #[error("jump-kind field needs a mark")]
    MissingMark,
    #[error("closed form is only available for the limit process")]
    NotLimitTrajectory,
    #[error("1 + dc/dx = {value} below floor at jump {jump_index}")]
    LogFloor { jump_index: usize, value: f64 },
    #[error("no Malliavin fields given")]
    EmptyFields,
    #[error("{kind:?} fields do not cover perturbation index {r_index}")]
    IncompleteFields { kind: FieldKind, r_index: usize },
}

/// Discretized path of the limit process (`epsilon == None`) or of `X^ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub x: Vec<f64>,
    /// Velocity, direct scheme only.
    pub y: Option<Vec<f64>>,
    pub epsilon: Option<f64>,
    /// State seen by each jump of the driving path (`X_{τ-}`), aligned with
    /// `path.jumps`.
    pub jump_states: Vec<f64>,
    pub stream_id: u64,
}

impl Trajectory {
    pub fn terminal(&self) -> f64 {
        *self.x.last().expect("trajectory has at least one node")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Brownian,
    Jump,
}

/// `D_r X_t` (or `D_{r,ξ} X_t`) for a fixed perturbation index `r` and all
/// `t_i ≥ t_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinField {
    pub kind: FieldKind,
    pub r_index: usize,
    pub mark: Option<f64>,
    /// `values[k]` is the derivative at node `r_index + k`.
    pub values: Vec<f64>,
    pub epsilon: Option<f64>,
}

impl MalliavinField {
    /// Derivative at node `t_index`; zero before the perturbation.
    pub fn at(&self, t_index: usize) -> f64 {
        if t_index < self.r_index {
            0.0
        } else {
            self.values[t_index - self.r_index]
        }
    }

    pub fn last_index(&self) -> usize {
        self.r_index + self.values.len() - 1
    }
}

/// `λ E_μ[f(x, Z)]` for one step.
struct Compensator<'a> {
    model: &'a ModelSpec,
    seed: u64,
    stream: u64,
}

impl<'a> Compensator<'a> {
    fn new(model: &'a ModelSpec, path: &NoisePath) -> Self {
        Self {
            model,
            seed: path.seed,
            stream: path.stream_id,
        }
    }

    fn monte_carlo(&self, step: usize, f: impl Fn(f64) -> f64) -> f64 {
        let mut rng =
            StreamRng::at_block(self.seed, Purpose::Compensator, self.stream, step as u64);
        let sum: f64 = (0..COMPENSATOR_MARKS)
            .map(|_| f(self.model.sample_mark(&mut rng)))
            .sum();
        self.model.jump_intensity * sum / COMPENSATOR_MARKS as f64
    }

    fn jump(&self, step: usize, x: f64) -> f64 {
        if !self.model.has_jumps() {
            return 0.0;
        }
        match &self.model.analytic_means {
            Some(m) => self.model.jump_intensity * (m.jump)(x),
            None => self.monte_carlo(step, |z| (self.model.c)(x, z)),
        }
    }

    fn dc_dx(&self, step: usize, x: f64) -> f64 {
        if !self.model.has_jumps() {
            return 0.0;
        }
        match &self.model.analytic_means {
            Some(m) => self.model.jump_intensity * (m.dc_dx)(x),
            None => self.monte_carlo(step, |z| (self.model.dc_dx)(x, z)),
        }
    }

    fn log1p_dc_dx(&self, step: usize, x: f64) -> f64 {
        if !self.model.has_jumps() {
            return 0.0;
        }
        match &self.model.analytic_means {
            Some(m) => self.model.jump_intensity * (m.log1p_dc_dx)(x),
            None => self.monte_carlo(step, |z| {
                (1.0 + (self.model.dc_dx)(x, z)).max(DELTA_LOG).ln()
            }),
        }
    }
}

fn check_intensity(model: &ModelSpec, path: &NoisePath) -> Result<(), IntegrateError> {
    if model.jump_intensity != path.intensity {
        return Err(IntegrateError::IntensityMismatch {
            path: path.intensity,
            model: model.jump_intensity,
        });
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<(), IntegrateError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(IntegrateError::InvalidEpsilon(epsilon));
    }
    Ok(())
}

fn finite(step: usize, value: f64) -> Result<f64, IntegrateError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(IntegrateError::NonFinite { step, value })
    }
}

/// Euler–Maruyama for the limit equation
/// `dX = b dt + σ dB + ∫ c(X-, z) Ñ(dt, dz)`.
pub fn simulate_limit(model: &ModelSpec, path: &NoisePath) -> Result<Trajectory, IntegrateError> {
    check_intensity(model, path)?;
    let grid = path.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let comp = Compensator::new(model, path);
    let mut x = Vec::with_capacity(n + 1);
    let mut jump_states = Vec::with_capacity(path.jumps.len());
    x.push(model.x0);

    for i in 0..n {
        let t = grid.time(i);
        let xi = x[i];
        let mut next = xi + (model.b)(t, xi) * dt + (model.sigma)(t, xi) * path.d_b[i];
        if model.has_jumps() {
            next -= comp.jump(i, xi) * dt;
            for jump in path.jumps_in_step(i) {
                jump_states.push(next);
                next += (model.c)(next, jump.mark);
            }
        }
        x.push(finite(i, next)?);
    }

    Ok(Trajectory {
        grid,
        x,
        y: None,
        epsilon: None,
        jump_states,
        stream_id: path.stream_id,
    })
}

/// Euler–Maruyama on the position/velocity system
///
/// ```text
/// dX = Y dt
/// dY = (b(X) - Y)/ε dt + σ(X)/ε dB + 1/ε ∫ c(X-, z) Ñ(dt, dz)
/// ```
///
/// `path` must be sampled on the fine grid; the result is reported every
/// `substep_factor` fine steps, matching `coarsen(path, substep_factor)`.
pub fn simulate_sk_direct(
    model: &ModelSpec,
    path: &NoisePath,
    epsilon: f64,
    substep_factor: usize,
) -> Result<Trajectory, IntegrateError> {
    check_epsilon(epsilon)?;
    check_intensity(model, path)?;
    let fine = path.grid;
    let n = fine.n_steps();
    if substep_factor == 0 || !n.is_multiple_of(substep_factor) {
        return Err(IntegrateError::IndivisibleSubstep {
            factor: substep_factor,
            n_steps: n,
        });
    }
    let dt = fine.dt();
    if dt > DIRECT_MAX_DT_OVER_EPS * epsilon * (1.0 + 1e-12) {
        return Err(IntegrateError::StabilityGuard { dt, epsilon });
    }
    let comp = Compensator::new(model, path);
    let n_out = n / substep_factor;
    let mut xs = Vec::with_capacity(n_out + 1);
    let mut ys = Vec::with_capacity(n_out + 1);
    let mut jump_states = Vec::with_capacity(path.jumps.len());
    let (mut x, mut y) = (model.x0, model.y0);
    xs.push(x);
    ys.push(y);

    for i in 0..n {
        let t = fine.time(i);
        let force = (model.b)(t, x) - y;
        let mut y_next = y + force / epsilon * dt + (model.sigma)(t, x) / epsilon * path.d_b[i];
        if model.has_jumps() {
            y_next -= comp.jump(i, x) / epsilon * dt;
            for jump in path.jumps_in_step(i) {
                jump_states.push(x);
                y_next += (model.c)(x, jump.mark) / epsilon;
            }
        }
        x = finite(i, x + y * dt)?;
        y = finite(i, y_next)?;
        if (i + 1) % substep_factor == 0 {
            xs.push(x);
            ys.push(y);
        }
    }

    Ok(Trajectory {
        grid: TimeGrid::new(fine.t_end(), n_out).expect("coarse grid of a valid grid"),
        x: xs,
        y: Some(ys),
        epsilon: Some(epsilon),
        jump_states,
        stream_id: path.stream_id,
    })
}

/// Kernel weights for one step of length `dt`.
#[derive(Debug, Clone, Copy)]
struct Kernel {
    epsilon: f64,
    decay: f64,
    cell_average: f64,
}

impl Kernel {
    fn new(epsilon: f64, dt: f64) -> Self {
        let one_minus = -(-dt / epsilon).exp_m1();
        Self {
            epsilon,
            decay: 1.0 - one_minus,
            cell_average: epsilon * one_minus / dt,
        }
    }

    /// `1 - e^{-s/ε}`
    fn ramp(&self, s: f64) -> f64 {
        -(-s / self.epsilon).exp_m1()
    }

    fn jump_weight(&self, step_end: f64, tau: f64) -> f64 {
        (-(step_end - tau).max(0.0) / self.epsilon).exp()
    }
}

/// Small-mass scheme based on the variation-of-constants form
///
/// ```text
/// X^ε_t = x0 + ε y0 (1 - e^{-t/ε}) + ∫ (1 - e^{-(t-s)/ε}) [b ds + σ dB + ∫ c Ñ(ds, dz)]
/// ```
///
/// on the grid of `path`. Exact for vanishing coefficients and stable for any
/// `dt/ε`.
pub fn simulate_sk_exponential(
    model: &ModelSpec,
    path: &NoisePath,
    epsilon: f64,
) -> Result<Trajectory, IntegrateError> {
    check_epsilon(epsilon)?;
    check_intensity(model, path)?;
    let grid = path.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let kernel = Kernel::new(epsilon, dt);
    let comp = Compensator::new(model, path);
    let mut x = Vec::with_capacity(n + 1);
    let mut jump_states = Vec::with_capacity(path.jumps.len());
    x.push(model.x0);
    let (mut plain, mut weighted) = (0.0, 0.0);

    for i in 0..n {
        let t = grid.time(i);
        let t_next = grid.time(i + 1);
        let xi = x[i];
        let mut cont = (model.b)(t, xi) * dt + (model.sigma)(t, xi) * path.d_b[i];
        let (mut jump_plain, mut jump_weighted) = (0.0, 0.0);
        if model.has_jumps() {
            cont -= comp.jump(i, xi) * dt;
            for jump in path.jumps_in_step(i) {
                jump_states.push(xi);
                let c = (model.c)(xi, jump.mark);
                jump_plain += c;
                jump_weighted += kernel.jump_weight(t_next, jump.time) * c;
            }
        }
        plain += cont + jump_plain;
        weighted = kernel.decay * weighted + kernel.cell_average * cont + jump_weighted;
        let free = model.x0 + epsilon * model.y0 * kernel.ramp(t_next);
        x.push(finite(i, free + plain - weighted)?);
    }

    Ok(Trajectory {
        grid,
        x,
        y: None,
        epsilon: Some(epsilon),
        jump_states,
        stream_id: path.stream_id,
    })
}

fn check_pair(traj: &Trajectory, path: &NoisePath) -> Result<(), IntegrateError> {
    if traj.grid != path.grid {
        return Err(IntegrateError::Mismatch("grids differ"));
    }
    if traj.stream_id != path.stream_id {
        return Err(IntegrateError::Mismatch("stream ids differ"));
    }
    if traj.jump_states.len() != path.jumps.len() {
        return Err(IntegrateError::Mismatch("jump counts differ"));
    }
    Ok(())
}

fn initial_value(
    model: &ModelSpec,
    traj: &Trajectory,
    kind: FieldKind,
    r_index: usize,
    mark: Option<f64>,
) -> Result<f64, IntegrateError> {
    let n = traj.grid.n_steps();
    if r_index >= n {
        return Err(IntegrateError::RIndexOutOfRange {
            r_index,
            n_steps: n,
        });
    }
    let xr = traj.x[r_index];
    Ok(match kind {
        FieldKind::Brownian => (model.sigma)(traj.grid.time(r_index), xr),
        FieldKind::Jump => (model.dc_dz)(xr, mark.ok_or(IntegrateError::MissingMark)?),
    })
}

/// Index of the first jump in step `i` or later.
fn first_jump_from(path: &NoisePath, i: usize) -> usize {
    path.jumps.partition_point(|j| j.step < i)
}

/// Propagates the linear derivative equation along a stored trajectory.
///
/// For the limit process this is the Euler scheme for
/// `dD = b' D dt + σ' D dB + ∫ ∂ₓc(X-, z) D(s-) Ñ(ds, dz)`, started from `σ(r, X_r)`
/// (Brownian) or `∂_z c(X_r, ξ)` (jump). For `X^ε` the field starts at 0 with
/// the ramp `(1 - e^{-(t-r)/ε})` on the initial value and every integral is
/// paired with its kernel-weighted counter-term.
pub fn propagate_malliavin(
    model: &ModelSpec,
    traj: &Trajectory,
    path: &NoisePath,
    kind: FieldKind,
    r_index: usize,
    mark: Option<f64>,
) -> Result<MalliavinField, IntegrateError> {
    propagate_malliavin_to(model, traj, path, kind, r_index, mark, traj.grid.n_steps())
}

/// As [`propagate_malliavin`], stopping at node `last_index`.
pub fn propagate_malliavin_to(
    model: &ModelSpec,
    traj: &Trajectory,
    path: &NoisePath,
    kind: FieldKind,
    r_index: usize,
    mark: Option<f64>,
    last_index: usize,
) -> Result<MalliavinField, IntegrateError> {
    check_pair(traj, path)?;
    let init = initial_value(model, traj, kind, r_index, mark)?;
    let last = last_index.clamp(r_index, traj.grid.n_steps());
    let grid = traj.grid;
    let dt = grid.dt();
    let comp = Compensator::new(model, path);
    let mut values = Vec::with_capacity(last - r_index + 1);
    let mut jump_idx = first_jump_from(path, r_index);

    match traj.epsilon {
        None => {
            let mut d = init;
            values.push(d);
            for i in r_index..last {
                let t = grid.time(i);
                let xi = traj.x[i];
                let mut next =
                    d + (model.db_dx)(t, xi) * d * dt + (model.dsigma_dx)(t, xi) * d * path.d_b[i];
                if model.has_jumps() {
                    next -= comp.dc_dx(i, xi) * d * dt;
                    while jump_idx < path.jumps.len() && path.jumps[jump_idx].step == i {
                        let state = traj.jump_states[jump_idx];
                        next += (model.dc_dx)(state, path.jumps[jump_idx].mark) * next;
                        jump_idx += 1;
                    }
                }
                d = finite(i, next)?;
                values.push(d);
            }
        }
        Some(epsilon) => {
            let kernel = Kernel::new(epsilon, dt);
            let (mut plain, mut weighted) = (0.0, 0.0);
            let mut d = 0.0;
            values.push(d);
            for i in r_index..last {
                let t = grid.time(i);
                let t_next = grid.time(i + 1);
                let xi = traj.x[i];
                let mut cont =
                    ((model.db_dx)(t, xi) * dt + (model.dsigma_dx)(t, xi) * path.d_b[i]) * d;
                let (mut jump_plain, mut jump_weighted) = (0.0, 0.0);
                if model.has_jumps() {
                    cont -= comp.dc_dx(i, xi) * d * dt;
                    while jump_idx < path.jumps.len() && path.jumps[jump_idx].step == i {
                        let jump = &path.jumps[jump_idx];
                        let inc = (model.dc_dx)(traj.jump_states[jump_idx], jump.mark) * d;
                        jump_plain += inc;
                        jump_weighted += kernel.jump_weight(t_next, jump.time) * inc;
                        jump_idx += 1;
                    }
                }
                plain += cont + jump_plain;
                weighted = kernel.decay * weighted + kernel.cell_average * cont + jump_weighted;
                let elapsed = (i + 1 - r_index) as f64 * dt;
                d = finite(i, kernel.ramp(elapsed) * init + plain - weighted)?;
                values.push(d);
            }
        }
    }

    Ok(MalliavinField {
        kind,
        r_index,
        mark,
        values,
        epsilon: traj.epsilon,
    })
}

/// Evaluates the Doléans-Dade exponential solution of the limit derivative
/// equation on the stored path:
///
/// ```text
/// D_r X_t = D_r X_r · exp( ∫ (b' - σ'²/2) ds + ∫ σ' dB
///                          + ∫∫ log(1 + ∂ₓc) Ñ(ds, dz)
///                          + ∫∫ (log(1 + ∂ₓc) - ∂ₓc) ν(dz) ds )
/// ```
pub fn closed_form_malliavin(
    model: &ModelSpec,
    traj: &Trajectory,
    path: &NoisePath,
    kind: FieldKind,
    r_index: usize,
    mark: Option<f64>,
) -> Result<MalliavinField, IntegrateError> {
    if traj.epsilon.is_some() {
        return Err(IntegrateError::NotLimitTrajectory);
    }
    check_pair(traj, path)?;
    let init = initial_value(model, traj, kind, r_index, mark)?;
    let grid = traj.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let comp = Compensator::new(model, path);
    let mut values = Vec::with_capacity(n - r_index + 1);
    values.push(init);
    let mut exponent = 0.0;
    let mut jump_idx = first_jump_from(path, r_index);

    for i in r_index..n {
        let t = grid.time(i);
        let xi = traj.x[i];
        let s1 = (model.dsigma_dx)(t, xi);
        let mut drift = (model.db_dx)(t, xi) - 0.5 * s1 * s1;
        let mut jumps = 0.0;
        if model.has_jumps() {
            let log_mean = comp.log1p_dc_dx(i, xi);
            drift += log_mean - comp.dc_dx(i, xi);
            jumps -= log_mean * dt;
            while jump_idx < path.jumps.len() && path.jumps[jump_idx].step == i {
                let arg =
                    1.0 + (model.dc_dx)(traj.jump_states[jump_idx], path.jumps[jump_idx].mark);
                if arg.is_nan() || arg < DELTA_LOG {
                    return Err(IntegrateError::LogFloor {
                        jump_index: jump_idx,
                        value: arg,
                    });
                }
                jumps += arg.ln();
                jump_idx += 1;
            }
        }
        exponent += drift * dt + s1 * path.d_b[i] + jumps;
        values.push(finite(i, init * exponent.exp())?);
    }

    Ok(MalliavinField {
        kind,
        r_index,
        mark,
        values,
        epsilon: None,
    })
}

/// Squared L² norms of the derivative fields at node `t_index`:
/// `‖D^B X_t‖² = Σ_r |D_r X_t|² dt` and
/// `‖D^N X_t‖² = Σ_r λ · mean_ξ |D_{r,ξ} X_t|² dt`, both by the left-point
/// rule over `r < t_index`.
///
/// A kind with no fields contributes 0; a kind that is present must cover every
/// `r < t_index`.
pub fn malliavin_norms(
    fields: &[MalliavinField],
    model: &ModelSpec,
    grid: &TimeGrid,
    t_index: usize,
) -> Result<(f64, f64), IntegrateError> {
    if fields.is_empty() {
        return Err(IntegrateError::EmptyFields);
    }
    let mut b_sum = vec![None::<f64>; t_index];
    let mut n_sum = vec![(0.0, 0usize); t_index];
    let (mut any_b, mut any_n) = (false, false);
    for f in fields.iter().filter(|f| f.r_index < t_index) {
        let v = f.at(t_index);
        match f.kind {
            FieldKind::Brownian => {
                any_b = true;
                b_sum[f.r_index] = Some(v * v);
            }
            FieldKind::Jump => {
                any_n = true;
                let slot = &mut n_sum[f.r_index];
                slot.0 += v * v;
                slot.1 += 1;
            }
        }
    }
    let scale = grid.t_end() / grid.n_steps() as f64;
    let mut norm_b = 0.0;
    if any_b {
        for (r, v) in b_sum.iter().enumerate() {
            norm_b += v.ok_or(IntegrateError::IncompleteFields {
                kind: FieldKind::Brownian,
                r_index: r,
            })?;
        }
    }
    let mut norm_n = 0.0;
    if any_n {
        for (r, &(s, count)) in n_sum.iter().enumerate() {
            if count == 0 {
                return Err(IntegrateError::IncompleteFields {
                    kind: FieldKind::Jump,
                    r_index: r,
                });
            }
            norm_n += s / count as f64;
        }
    }
    Ok((norm_b * scale, model.jump_intensity * norm_n * scale))
}

/// Marks used for the jump-derivative norm at perturbation index `r`.
pub fn norm_marks(model: &ModelSpec, path: &NoisePath, r_index: usize) -> Vec<f64> {
    let mut rng = StreamRng::at_block(
        path.seed,
        Purpose::MalliavinMark,
        path.stream_id,
        r_index as u64,
    );
    (0..NORM_MARKS)
        .map(|_| model.sample_mark(&mut rng))
        .collect()
}

/// All fields of `kind` needed for the norm at `t_index`, propagated along
/// `traj` (one per `r < t_index`, or [`NORM_MARKS`] per `r` for jumps).
pub fn fields_for_norm(
    model: &ModelSpec,
    traj: &Trajectory,
    path: &NoisePath,
    kind: FieldKind,
    t_index: usize,
) -> Result<Vec<MalliavinField>, IntegrateError> {
    let mut out = Vec::new();
    for r in 0..t_index {
        match kind {
            FieldKind::Brownian => {
                out.push(propagate_malliavin_to(
                    model, traj, path, kind, r, None, t_index,
                )?);
            }
            FieldKind::Jump => {
                for z in norm_marks(model, path, r) {
                    out.push(propagate_malliavin_to(
                        model,
                        traj,
                        path,
                        kind,
                        r,
                        Some(z),
                        t_index,
                    )?);
                }
            }
        }
    }
    Ok(out)
}

/// `‖D X^ε_t - D X_t‖²` for one kind, with both fields propagated along their
/// own trajectories of the same path and the same norm marks.
pub fn field_gap_norm(
    model: &ModelSpec,
    limit: &Trajectory,
    small_mass: &Trajectory,
    path: &NoisePath,
    kind: FieldKind,
    t_index: usize,
) -> Result<f64, IntegrateError> {
    let a = fields_for_norm(model, limit, path, kind, t_index)?;
    let b = fields_for_norm(model, small_mass, path, kind, t_index)?;
    let sq_gap =
        |fa: &MalliavinField, fb: &MalliavinField| (fb.at(t_index) - fa.at(t_index)).powi(2);
    let scale = limit.grid.t_end() / limit.grid.n_steps() as f64;
    Ok(match kind {
        FieldKind::Brownian => a.iter().zip(&b).map(|(fa, fb)| sq_gap(fa, fb)).sum::<f64>() * scale,
        FieldKind::Jump => {
            let per_r: f64 = a
                .chunks(NORM_MARKS)
                .zip(b.chunks(NORM_MARKS))
                .map(|(ca, cb)| {
                    ca.iter()
                        .zip(cb)
                        .map(|(fa, fb)| sq_gap(fa, fb))
                        .sum::<f64>()
                        / NORM_MARKS as f64
                })
                .sum();
            model.jump_intensity * per_r * scale
        }
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use super::*;
    use crate::model::builtin_model;
    use crate::noise::sample_noise;

    fn model(name: &str, params: &[(&str, f64)]) -> ModelSpec {
        let map: BTreeMap<String, f64> = params.iter().map(|&(k, v)| (k.to_string(), v)).collect();
        builtin_model(name, &map).unwrap()
    }

    fn ou() -> ModelSpec {
        model(
            "linear_jump_ou",
            &[("a", 1.0), ("s", 0.5), ("gamma", 0.3), ("lambda", 2.0)],
        )
    }

    fn noise(m: &ModelSpec, n_steps: usize, k: u64) -> NoisePath {
        sample_noise(
            TimeGrid::new(1.0, n_steps).unwrap(),
            m.jump_intensity,
            &*m.mark_sampler,
            7,
            k,
        )
        .unwrap()
    }

    /// `b = β x`, `σ = ς x`, no jumps.
    fn gbm(beta: f64, vol: f64) -> ModelSpec {
        let mut m = model("pure_brownian", &[("x0", 1.0)]);
        m.b = Arc::new(move |_, x| beta * x);
        m.db_dx = Arc::new(move |_, _| beta);
        m.d2b_dx2 = Arc::new(|_, _| 0.0);
        m.sigma = Arc::new(move |_, x| vol * x);
        m.dsigma_dx = Arc::new(move |_, _| vol);
        m.d2sigma_dx2 = Arc::new(|_, _| 0.0);
        m
    }

    #[test]
    fn pure_brownian_limit_is_the_running_sum() {
        let m = model("pure_brownian", &[]);
        let path = noise(&m, 500, 0);
        let x = simulate_limit(&m, &path).unwrap().x;
        let mut acc = 0.0;
        for (i, db) in path.d_b.iter().enumerate() {
            acc += db;
            assert_eq!(x[i + 1], acc);
        }
    }

    #[test]
    fn deterministic_relax_matches_closed_form() {
        let m = model("deterministic_relax", &[("x0", 1.0), ("y0", 2.0)]);
        let eps = 0.1;
        let exact = 1.0 + eps * 2.0 * -(-1.0f64 / eps).exp_m1();
        let path = noise(&m, 1000, 0);
        let exp = simulate_sk_exponential(&m, &path, eps).unwrap();
        assert!((exp.terminal() - exact).abs() <= 1e-12);
        let fine = noise(&m, 10_000, 0);
        let direct = simulate_sk_direct(&m, &fine, eps, 10).unwrap();
        assert_eq!(direct.x.len(), 1001);
        assert!((direct.terminal() - exact).abs() <= 10.0 * eps * fine.grid.dt());
    }

    #[test]
    fn jump_coefficient_untouched_without_intensity() {
        let mut m = model(
            "linear_jump_ou",
            &[("a", 1.0), ("s", 0.5), ("gamma", 0.3), ("lambda", 0.0)],
        );
        m.c = Arc::new(|_, _| panic!("c evaluated"));
        m.dc_dx = Arc::new(|_, _| panic!("dc/dx evaluated"));
        m.analytic_means = None;
        let path = noise(&m, 200, 3);
        assert!(path.jumps.is_empty());
        let limit = simulate_limit(&m, &path).unwrap();
        let sk = simulate_sk_exponential(&m, &path, 0.05).unwrap();
        propagate_malliavin(&m, &limit, &path, FieldKind::Brownian, 10, None).unwrap();
        propagate_malliavin(&m, &sk, &path, FieldKind::Brownian, 10, None).unwrap();
        closed_form_malliavin(&m, &limit, &path, FieldKind::Brownian, 10, None).unwrap();
    }

    #[test]
    fn ou_variance_matches_second_moment_ode() {
        let m = ou();
        let n = 20_000;
        let xs: Vec<f64> = (0..n)
            .map(|k| simulate_limit(&m, &noise(&m, 200, k)).unwrap().terminal())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (a, s, g, l) = (1.0f64, 0.5f64, 0.3f64, 2.0);
        let oracle = (s * s + l * g * g / 3.0) * (1.0 - (-2.0 * a).exp()) / (2.0 * a);
        assert!(mean.abs() < 4.0 * (oracle / n as f64).sqrt(), "mean {mean}");
        assert!((var / oracle - 1.0).abs() < 0.04, "var {var} vs {oracle}");
    }

    #[test]
    fn direct_and_exponential_schemes_agree() {
        let m = model(
            "linear_jump_ou",
            &[
                ("a", 1.0),
                ("s", 0.5),
                ("gamma", 0.3),
                ("lambda", 2.0),
                ("y0", 1.0),
            ],
        );
        let eps = 0.05;
        let mut worst: f64 = 0.0;
        for k in 0..20 {
            let fine = noise(&m, 20_000, k);
            let coarse = crate::noise::coarsen(&fine, 20).unwrap();
            let d = simulate_sk_direct(&m, &fine, eps, 20).unwrap();
            let e = simulate_sk_exponential(&m, &fine, eps).unwrap();
            assert_eq!(d.grid, coarse.grid);
            for i in 0..=coarse.grid.n_steps() {
                worst = worst.max((d.x[i] - e.x[20 * i]).abs());
            }
        }
        assert!(worst < 0.01, "max gap {worst}");
    }

    #[test]
    fn exponential_scheme_is_stable_for_tiny_mass() {
        let m = ou();
        let path = noise(&m, 100, 1);
        let limit = simulate_limit(&m, &path).unwrap();
        for eps in [1e-4, 1e-5, 1e-6] {
            let sk = simulate_sk_exponential(&m, &path, eps).unwrap();
            let gap =
                sk.x.iter()
                    .zip(&limit.x)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
            assert!(gap < 0.1, "eps {eps}: gap {gap}");
        }
    }

    #[test]
    fn direct_scheme_guards_and_validates() {
        let m = ou();
        let path = noise(&m, 100, 0);
        assert!(matches!(
            simulate_sk_direct(&m, &path, 0.05, 1),
            Err(IntegrateError::StabilityGuard { .. })
        ));
        assert!(matches!(
            simulate_sk_direct(&m, &path, 0.5, 3),
            Err(IntegrateError::IndivisibleSubstep { .. })
        ));
        assert!(matches!(
            simulate_sk_exponential(&m, &path, 0.0),
            Err(IntegrateError::InvalidEpsilon(_))
        ));
        let other = model("pure_brownian", &[]);
        assert!(matches!(
            simulate_limit(&other, &path),
            Err(IntegrateError::IntensityMismatch { .. })
        ));
    }

    #[test]
    fn fields_vanish_before_perturbation() {
        let m = ou();
        let path = noise(&m, 200, 2);
        let limit = simulate_limit(&m, &path).unwrap();
        let sk = simulate_sk_exponential(&m, &path, 0.05).unwrap();
        let r = 80;
        let fields = [
            propagate_malliavin(&m, &limit, &path, FieldKind::Brownian, r, None).unwrap(),
            propagate_malliavin(&m, &limit, &path, FieldKind::Jump, r, Some(0.4)).unwrap(),
            propagate_malliavin(&m, &sk, &path, FieldKind::Brownian, r, None).unwrap(),
            propagate_malliavin(&m, &sk, &path, FieldKind::Jump, r, Some(0.4)).unwrap(),
            closed_form_malliavin(&m, &limit, &path, FieldKind::Brownian, r, None).unwrap(),
            closed_form_malliavin(&m, &limit, &path, FieldKind::Jump, r, Some(0.4)).unwrap(),
        ];
        for f in &fields {
            for t in 0..r {
                assert_eq!(f.at(t), 0.0);
            }
            assert_eq!(f.last_index(), 200);
        }
        assert_eq!(fields[2].at(r), 0.0);
        assert_eq!(fields[0].at(r), 0.5);
        assert!((fields[1].at(r) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn linear_ou_fields_are_exponential_decay() {
        let m = ou();
        let path = noise(&m, 1000, 4);
        let limit = simulate_limit(&m, &path).unwrap();
        for (kind, mark, scale) in [
            (FieldKind::Brownian, None, 0.5),
            (FieldKind::Jump, Some(-0.7), 0.3),
        ] {
            let closed = closed_form_malliavin(&m, &limit, &path, kind, 300, mark).unwrap();
            let prop = propagate_malliavin(&m, &limit, &path, kind, 300, mark).unwrap();
            for t in 300..=1000 {
                let oracle = scale * (-((t - 300) as f64) * 1e-3).exp();
                assert!((closed.at(t) - oracle).abs() < 1e-12);
                assert!((prop.at(t) / oracle - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn gbm_derivative_matches_exponential_oracle() {
        let (beta, vol) = (0.3, 0.4);
        let m = gbm(beta, vol);
        let path = noise(&m, 2000, 5);
        let limit = simulate_limit(&m, &path).unwrap();
        let r = 500;
        let closed =
            closed_form_malliavin(&m, &limit, &path, FieldKind::Brownian, r, None).unwrap();
        let prop = propagate_malliavin(&m, &limit, &path, FieldKind::Brownian, r, None).unwrap();
        let dt = path.grid.dt();
        let mut b_inc = 0.0;
        let mut product = vol * limit.x[r];
        for t in r..2000 {
            b_inc += path.d_b[t];
            product *= 1.0 + beta * dt + vol * path.d_b[t];
            let elapsed = (t + 1 - r) as f64 * dt;
            let oracle =
                vol * limit.x[r] * ((beta - vol * vol / 2.0) * elapsed + vol * b_inc).exp();
            assert!((closed.at(t + 1) / oracle - 1.0).abs() < 1e-10);
            assert!((prop.at(t + 1) / product - 1.0).abs() < 1e-10);
            // Euler derivative of a linear equation equals the state ratio.
            assert!(
                (prop.at(t + 1) - vol * limit.x[t + 1]).abs()
                    < 1e-10 * limit.x[t + 1].abs().max(1.0)
            );
        }
    }

    #[test]
    fn closed_form_rejects_small_mass_and_log_floor() {
        let m = ou();
        let path = noise(&m, 100, 0);
        let sk = simulate_sk_exponential(&m, &path, 0.1).unwrap();
        assert_eq!(
            closed_form_malliavin(&m, &sk, &path, FieldKind::Brownian, 0, None),
            Err(IntegrateError::NotLimitTrajectory)
        );
        let mut bad = m.clone();
        bad.dc_dx = Arc::new(|_, _| -1.0);
        let limit = simulate_limit(&bad, &path).unwrap();
        assert!(!path.jumps.is_empty());
        assert!(matches!(
            closed_form_malliavin(&bad, &limit, &path, FieldKind::Brownian, 0, None),
            Err(IntegrateError::LogFloor { .. })
        ));
    }

    #[test]
    fn small_mass_field_ramps_up() {
        let m = model("pure_brownian", &[]);
        let path = noise(&m, 1000, 0);
        let eps = 0.1;
        let sk = simulate_sk_exponential(&m, &path, eps).unwrap();
        let f = propagate_malliavin(&m, &sk, &path, FieldKind::Brownian, 100, None).unwrap();
        let h = path.grid.dt();
        assert!((f.at(101) / (h / eps) - 1.0).abs() < 0.1);
        assert!((f.at(1000) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn brownian_norm_of_pure_brownian_is_elapsed_time() {
        let m = model("pure_brownian", &[]);
        let path = noise(&m, 400, 0);
        let limit = simulate_limit(&m, &path).unwrap();
        for t in [1, 100, 400] {
            let fields = fields_for_norm(&m, &limit, &path, FieldKind::Brownian, t).unwrap();
            let (nb, nn) = malliavin_norms(&fields, &m, &path.grid, t).unwrap();
            assert!((nb - path.grid.time(t)).abs() < 1e-12);
            assert_eq!(nn, 0.0);
        }
    }

    #[test]
    fn ou_norms_match_integrated_decay() {
        let m = ou();
        let path = noise(&m, 1000, 6);
        let limit = simulate_limit(&m, &path).unwrap();
        let b = fields_for_norm(&m, &limit, &path, FieldKind::Brownian, 1000).unwrap();
        let n = fields_for_norm(&m, &limit, &path, FieldKind::Jump, 1000).unwrap();
        assert_eq!(n.len(), 1000 * NORM_MARKS);
        let (nb, _) = malliavin_norms(&b, &m, &path.grid, 1000).unwrap();
        let oracle = 0.25 * (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((nb / oracle - 1.0).abs() < 2e-3);
        let (_, nn) = malliavin_norms(&n, &m, &path.grid, 1000).unwrap();
        // D_{r,ξ} X_t = γ e^{-a(t-r)} does not depend on the mark.
        let jump_oracle = 2.0 * 0.09 * (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((nn / jump_oracle - 1.0).abs() < 2e-3);
        assert_eq!(
            malliavin_norms(&b[1..], &m, &path.grid, 1000),
            Err(IntegrateError::IncompleteFields {
                kind: FieldKind::Brownian,
                r_index: 0
            })
        );
        assert_eq!(
            malliavin_norms(&[], &m, &path.grid, 1000),
            Err(IntegrateError::EmptyFields)
        );
    }

    #[test]
    fn field_gap_shrinks_with_mass() {
        let m = ou();
        let path = noise(&m, 200, 8);
        let limit = simulate_limit(&m, &path).unwrap();
        let gap = |eps: f64| {
            let sk = simulate_sk_exponential(&m, &path, eps).unwrap();
            field_gap_norm(&m, &limit, &sk, &path, FieldKind::Brownian, 200).unwrap()
        };
        let (g1, g2) = (gap(0.1), gap(0.05));
        assert!(g2 < g1 && g2 > 0.3 * g1, "{g1} {g2}");
    }

    #[test]
    fn small_mass_converges_with_refinement() {
        let m = ou();
        let eps = 0.05;
        let fine = noise(&m, 4096, 9);
        let reference = simulate_sk_exponential(&m, &fine, eps).unwrap().terminal();
        let err = |f: usize| {
            let c = crate::noise::coarsen(&fine, f).unwrap();
            (simulate_sk_exponential(&m, &c, eps).unwrap().terminal() - reference).abs()
        };
        assert!(err(8) < err(64));
        assert!(err(8) < 0.02);
    }
}
