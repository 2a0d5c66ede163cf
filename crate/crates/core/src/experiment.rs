//! Experiment driver: plans, simulates coupled ensembles in parallel and
//! writes `results.csv` plus `manifest.json`.
//!
//! Path `k` always uses noise substream `(seed, k)`, per-path results land in
//! slot `k`, and every reduction walks the slots in index order, so the CSV
//! body does not depend on the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, Experiment, ExperimentConfig, SkScheme, Threads};
use crate::integrate::{
    field_gap_norm, fields_for_norm, malliavin_norms, simulate_limit, simulate_sk_direct,
    simulate_sk_exponential, FieldKind, IntegrateError, Trajectory,
};
use crate::model::{check_derivatives, validate_assumptions, ModelSpec, ProbeBox};
use crate::noise::{coarsen, sample_noise, NoisePath, TimeGrid};
use crate::stats::{fit_rate, ks_distance, ks_noise_floor, EstimateWithError, RateFit};

/// Ratio of predicted signal to KS noise floor required before a
/// `kolmogorov_rate` run is attempted.
pub const SIGNAL_TO_FLOOR: f64 = 5.0;

pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error(
        "noise floor: sqrt(eps_min) = {signal:.4} is below {SIGNAL_TO_FLOOR} x 1.36/sqrt(n_paths) = {floor:.4}; \
         use run.n_paths >= {required_n}"
    )]
    NoiseFloor {
        signal: f64,
        floor: f64,
        required_n: usize,
    },
    #[error("{aborts} path(s) produced non-finite values; results written to {}", out_dir.display())]
    Numerical { aborts: usize, out_dir: PathBuf },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// Process exit code: 2 config, 3 noise floor, 4 numerical abort, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::NoiseFloor { .. } => 3,
            Self::Numerical { .. } => 4,
            Self::Pool(_) | Self::Io { .. } => 1,
        }
    }
}

/// Outcome of [`plan_noise_floor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseFloorPlan {
    Ok,
    RequiredN(usize),
}

/// Checks `√ε_min ≥ 5 · 1.36 / √n_paths`; otherwise returns the smallest
/// adequate path count.
pub fn plan_noise_floor(epsilons: &[f64], n_paths: usize) -> NoiseFloorPlan {
    let eps_min = epsilons.iter().copied().fold(f64::INFINITY, f64::min);
    if eps_min.sqrt() >= SIGNAL_TO_FLOOR * ks_noise_floor(n_paths) {
        return NoiseFloorPlan::Ok;
    }
    let c = SIGNAL_TO_FLOOR * 1.36;
    let mut n = (c * c / eps_min).ceil() as usize;
    while eps_min.sqrt() < SIGNAL_TO_FLOOR * ks_noise_floor(n) {
        n += 1;
    }
    while n > 1 && eps_min.sqrt() >= SIGNAL_TO_FLOOR * ks_noise_floor(n - 1) {
        n -= 1;
    }
    NoiseFloorPlan::RequiredN(n)
}

/// In-memory result of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub csv: String,
    pub aborts: usize,
    pub notes: Vec<String>,
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn rate_row(csv: &mut String, fit: &RateFit) {
    let _ = writeln!(
        csv,
        "RATE,{},{},{}",
        fmt_f(fit.slope),
        fmt_f(fit.slope_std_error),
        fmt_f(fit.r_squared)
    );
}

fn try_rate(csv: &mut String, notes: &mut Vec<String>, label: &str, points: &[(f64, f64)]) {
    if points.len() < 3 {
        return;
    }
    match fit_rate(points) {
        Ok(fit) => rate_row(csv, &fit),
        Err(e) => notes.push(format!("{label}: no rate fitted ({e})")),
    }
}

struct Plan<'a> {
    cfg: &'a ExperimentConfig,
    model: ModelSpec,
    grid: TimeGrid,
    refine: usize,
}

impl Plan<'_> {
    fn noise(&self, k: usize) -> NoisePath {
        sample_noise(
            self.grid.refine(self.refine),
            self.model.jump_intensity,
            &*self.model.mark_sampler,
            self.cfg.seed,
            k as u64,
        )
        .expect("validated model and grid")
    }

    fn t_indices(&self, grid: &TimeGrid) -> Vec<usize> {
        self.cfg
            .t_eval
            .iter()
            .map(|&t| grid.node_index(t).expect("validated t_eval"))
            .collect()
    }

    /// Small-mass trajectory reported on the coarse grid.
    fn small_mass(
        &self,
        fine: &NoisePath,
        coarse: &NoisePath,
        eps: f64,
    ) -> Result<Trajectory, IntegrateError> {
        match self.cfg.sk_scheme {
            SkScheme::Exponential => simulate_sk_exponential(&self.model, coarse, eps),
            SkScheme::Direct => simulate_sk_direct(&self.model, fine, eps, self.refine),
        }
    }

    /// Small-mass trajectory on the grid of `path` itself.
    fn small_mass_full(&self, path: &NoisePath, eps: f64) -> Result<Trajectory, IntegrateError> {
        match self.cfg.sk_scheme {
            SkScheme::Exponential => simulate_sk_exponential(&self.model, path, eps),
            SkScheme::Direct => simulate_sk_direct(&self.model, path, eps, 1),
        }
    }
}

/// `values[0]` holds the limit, `values[1 + e]` the small-mass process at
/// `epsilons[e]`; each entry has one value per `t_eval`, or `None` if the
/// trajectory aborted.
type CoupledValues = Vec<Option<Vec<f64>>>;

fn coupled_values(plan: &Plan<'_>, k: usize) -> CoupledValues {
    let fine = plan.noise(k);
    let coarse = coarsen(&fine, plan.refine).expect("refinement divides fine grid");
    let idx = plan.t_indices(&plan.grid);
    let pick = |tr: Trajectory| idx.iter().map(|&i| tr.x[i]).collect::<Vec<_>>();
    let mut out = Vec::with_capacity(1 + plan.cfg.epsilons.len());
    out.push(simulate_limit(&plan.model, &coarse).ok().map(pick));
    for &eps in &plan.cfg.epsilons {
        out.push(plan.small_mass(&fine, &coarse, eps).ok().map(pick));
    }
    out
}

fn aborted(slot: &Option<Vec<f64>>, limit: &Option<Vec<f64>>) -> bool {
    slot.is_none() || limit.is_none()
}

fn strong_rate(plan: &Plan<'_>, per_path: &[CoupledValues]) -> RunOutput {
    let cfg = plan.cfg;
    let mut csv = String::from("epsilon,t,p,estimate,std_error,n_paths,aborts\n");
    let mut notes = Vec::new();
    let mut total_aborts = 0;
    for (ti, &t) in cfg.t_eval.iter().enumerate() {
        for &p in &cfg.p_values {
            let mut points = Vec::new();
            for (e, &eps) in cfg.epsilons.iter().enumerate() {
                let mut gaps = Vec::with_capacity(per_path.len());
                let mut aborts = 0;
                for v in per_path {
                    if aborted(&v[1 + e], &v[0]) {
                        aborts += 1;
                        continue;
                    }
                    let (xe, x) = (v[1 + e].as_ref().unwrap()[ti], v[0].as_ref().unwrap()[ti]);
                    gaps.push((xe - x).abs().powf(p));
                }
                total_aborts = total_aborts.max(aborts);
                let est = EstimateWithError::from_samples(&gaps).ok();
                let (value, se) = est.map_or((f64::NAN, f64::NAN), |e| (e.value, e.std_error));
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    fmt_f(eps),
                    fmt_f(t),
                    fmt_f(p),
                    fmt_f(value),
                    fmt_f(se),
                    gaps.len(),
                    aborts
                );
                points.push((eps, value));
            }
            try_rate(&mut csv, &mut notes, &format!("t={t}, p={p}"), &points);
        }
    }
    RunOutput {
        csv,
        aborts: total_aborts,
        notes,
    }
}

fn kolmogorov_rate(plan: &Plan<'_>, per_path: &[CoupledValues]) -> RunOutput {
    let cfg = plan.cfg;
    let mut csv = String::from("epsilon,t,ks,noise_floor,n_paths\n");
    let mut notes = Vec::new();
    let mut total_aborts = 0;
    for (ti, &t) in cfg.t_eval.iter().enumerate() {
        let mut points = Vec::new();
        for (e, &eps) in cfg.epsilons.iter().enumerate() {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for v in per_path {
                if aborted(&v[1 + e], &v[0]) {
                    continue;
                }
                a.push(v[1 + e].as_ref().unwrap()[ti]);
                b.push(v[0].as_ref().unwrap()[ti]);
            }
            total_aborts = total_aborts.max(per_path.len() - a.len());
            let ks = ks_distance(&a, &b).unwrap_or(f64::NAN);
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                fmt_f(eps),
                fmt_f(t),
                fmt_f(ks),
                fmt_f(ks_noise_floor(a.len())),
                a.len()
            );
            points.push((eps, ks));
        }
        try_rate(&mut csv, &mut notes, &format!("t={t}"), &points);
    }
    RunOutput {
        csv,
        aborts: total_aborts,
        notes,
    }
}

fn kind_name(kind: FieldKind) -> &'static str {
    match kind {
        FieldKind::Brownian => "brownian",
        FieldKind::Jump => "jump",
    }
}

/// Per path: `[ε][t][kind]` squared field gaps, `None` on abort.
fn malliavin_gaps(plan: &Plan<'_>, k: usize) -> Vec<Option<Vec<f64>>> {
    let path = plan.noise(k);
    let idx: Vec<usize> = plan
        .t_indices(&plan.grid)
        .iter()
        .map(|i| i * plan.refine)
        .collect();
    let Ok(limit) = simulate_limit(&plan.model, &path) else {
        return vec![None; plan.cfg.epsilons.len()];
    };
    plan.cfg
        .epsilons
        .iter()
        .map(|&eps| {
            let sm = plan.small_mass_full(&path, eps).ok()?;
            let mut out = Vec::new();
            for &ti in &idx {
                for &kind in &plan.cfg.kinds {
                    out.push(field_gap_norm(&plan.model, &limit, &sm, &path, kind, ti).ok()?);
                }
            }
            Some(out)
        })
        .collect()
}

fn malliavin_check(plan: &Plan<'_>, per_path: &[Vec<Option<Vec<f64>>>]) -> RunOutput {
    let cfg = plan.cfg;
    let nk = cfg.kinds.len();
    let mut csv = String::from("epsilon,t,kind,estimate,std_error,n_paths,aborts\n");
    let mut notes = Vec::new();
    let mut total_aborts = 0;
    for (ti, &t) in cfg.t_eval.iter().enumerate() {
        for (ki, &kind) in cfg.kinds.iter().enumerate() {
            let mut points = Vec::new();
            for (e, &eps) in cfg.epsilons.iter().enumerate() {
                let samples: Vec<f64> = per_path
                    .iter()
                    .filter_map(|v| v[e].as_ref().map(|g| g[ti * nk + ki]))
                    .collect();
                let aborts = per_path.len() - samples.len();
                total_aborts = total_aborts.max(aborts);
                let est = EstimateWithError::from_samples(&samples).ok();
                let (value, se) = est.map_or((f64::NAN, f64::NAN), |e| (e.value, e.std_error));
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    fmt_f(eps),
                    fmt_f(t),
                    kind_name(kind),
                    fmt_f(value),
                    fmt_f(se),
                    samples.len(),
                    aborts
                );
                points.push((eps, value));
            }
            try_rate(
                &mut csv,
                &mut notes,
                &format!("t={t}, kind={}", kind_name(kind)),
                &points,
            );
        }
    }
    RunOutput {
        csv,
        aborts: total_aborts,
        notes,
    }
}

/// Per path: `[t][kind]` squared norms of the limit derivative.
fn limit_norms(plan: &Plan<'_>, k: usize) -> Option<Vec<f64>> {
    let path = plan.noise(k);
    let idx: Vec<usize> = plan
        .t_indices(&plan.grid)
        .iter()
        .map(|i| i * plan.refine)
        .collect();
    let limit = simulate_limit(&plan.model, &path).ok()?;
    let mut out = Vec::new();
    for &ti in &idx {
        for &kind in &plan.cfg.kinds {
            let fields = fields_for_norm(&plan.model, &limit, &path, kind, ti).ok()?;
            let (nb, nn) = malliavin_norms(&fields, &plan.model, &path.grid, ti).ok()?;
            out.push(match kind {
                FieldKind::Brownian => nb,
                FieldKind::Jump => nn,
            });
        }
    }
    Some(out)
}

fn inverse_norm(plan: &Plan<'_>, per_path: &[Option<Vec<f64>>]) -> RunOutput {
    let cfg = plan.cfg;
    let nk = cfg.kinds.len();
    let mut csv = String::from("t,p,kind,estimate,std_error,scaled,n_paths,aborts\n");
    let mut notes = Vec::new();
    let aborts = per_path.iter().filter(|v| v.is_none()).count();
    for &p in &cfg.p_values {
        for (ki, &kind) in cfg.kinds.iter().enumerate() {
            let mut points = Vec::new();
            for (ti, &t) in cfg.t_eval.iter().enumerate() {
                let norms: Vec<f64> = per_path.iter().flatten().map(|v| v[ti * nk + ki]).collect();
                let (value, se) = match crate::stats::inverse_norm_moment(&norms, p) {
                    Ok(e) => (e.value, e.std_error),
                    Err(e) => {
                        notes.push(format!("t={t}, p={p}, kind={}: {e}", kind_name(kind)));
                        (f64::NAN, f64::NAN)
                    }
                };
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{}",
                    fmt_f(t),
                    fmt_f(p),
                    kind_name(kind),
                    fmt_f(value),
                    fmt_f(se),
                    fmt_f(t.powf(p) * value),
                    norms.len(),
                    aborts
                );
                points.push((t, value));
            }
            try_rate(
                &mut csv,
                &mut notes,
                &format!("p={p}, kind={}", kind_name(kind)),
                &points,
            );
        }
    }
    RunOutput { csv, aborts, notes }
}

fn assumptions(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<RunOutput, RunError> {
    let probe = ProbeBox::new((0.0, cfg.t_end), cfg.probe_x).map_err(ConfigError::from)?;
    let report =
        validate_assumptions(model, &probe, cfg.probe_n, cfg.seed).map_err(ConfigError::from)?;
    let mut csv = String::from(
        "h1_lipschitz_ok,h1_growth_ok,h2_deriv_bounded_ok,h2_jump_moments_ok,worst_ratio,probe_count\n",
    );
    let _ = writeln!(
        csv,
        "{},{},{},{},{},{}",
        report.h1_lipschitz_ok,
        report.h1_growth_ok,
        report.h2_deriv_bounded_ok,
        report.h2_jump_moments_ok,
        fmt_f(report.worst_ratio),
        report.probe_count
    );
    Ok(RunOutput {
        csv,
        aborts: 0,
        notes: Vec::new(),
    })
}

/// Resolves the worker count: explicit value, then `SKJUMP_THREADS`, then
/// the rayon default.
pub fn resolve_threads(cli: Option<usize>, cfg: Threads) -> Option<usize> {
    cli.or(match cfg {
        Threads::Fixed(n) => Some(n),
        Threads::Auto => None,
    })
    .or_else(|| std::env::var("SKJUMP_THREADS").ok()?.trim().parse().ok())
    .filter(|&n| n > 0)
}

/// Runs the experiment in memory.
pub fn execute(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let model = cfg.model()?;
    if cfg.experiment == Experiment::Assumptions {
        return assumptions(cfg, &model);
    }
    if cfg.experiment == Experiment::KolmogorovRate {
        if let NoiseFloorPlan::RequiredN(required_n) = plan_noise_floor(&cfg.epsilons, cfg.n_paths)
        {
            let eps_min = cfg.epsilons.iter().copied().fold(f64::INFINITY, f64::min);
            return Err(RunError::NoiseFloor {
                signal: eps_min.sqrt(),
                floor: SIGNAL_TO_FLOOR * ks_noise_floor(cfg.n_paths),
                required_n,
            });
        }
    }
    let probe = ProbeBox::new((0.0, cfg.t_end), cfg.probe_x).map_err(ConfigError::from)?;
    check_derivatives(&model, &probe, 100, cfg.seed).map_err(ConfigError::from)?;

    let plan = Plan {
        cfg,
        grid: cfg.grid(),
        refine: cfg.noise_refinement(),
        model,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| RunError::Pool(e.to_string()))?;
    let n = cfg.n_paths;

    Ok(pool.install(|| match cfg.experiment {
        Experiment::StrongRate | Experiment::KolmogorovRate => {
            let per_path: Vec<CoupledValues> = (0..n)
                .into_par_iter()
                .map(|k| coupled_values(&plan, k))
                .collect();
            if cfg.experiment == Experiment::StrongRate {
                strong_rate(&plan, &per_path)
            } else {
                kolmogorov_rate(&plan, &per_path)
            }
        }
        Experiment::MalliavinCheck => {
            let per_path: Vec<_> = (0..n)
                .into_par_iter()
                .map(|k| malliavin_gaps(&plan, k))
                .collect();
            malliavin_check(&plan, &per_path)
        }
        Experiment::InverseNorm => {
            let per_path: Vec<_> = (0..n)
                .into_par_iter()
                .map(|k| limit_norms(&plan, k))
                .collect();
            inverse_norm(&plan, &per_path)
        }
        Experiment::Assumptions => unreachable!("handled above"),
    }))
}

/// Runs the experiment and writes `results.csv` and `manifest.json` into
/// `out_dir`. Non-finite paths still produce output files before the
/// [`RunError::Numerical`] is returned.
pub fn run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    threads: Option<usize>,
) -> Result<RunOutput, RunError> {
    let output = execute(cfg, threads)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| RunError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let csv_path = out_dir.join(RESULTS_FILE);
    fs::write(&csv_path, &output.csv).map_err(io(&csv_path))?;
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment.as_str(),
        "model": cfg.model_name,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "n_paths": cfg.n_paths,
        "sk_scheme": cfg.sk_scheme.as_str(),
        "noise_refinement": cfg.noise_refinement(),
        "aborts": output.aborts,
        "notes": output.notes,
        "files": [RESULTS_FILE],
    });
    let man_path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&man_path, text).map_err(io(&man_path))?;
    if output.aborts > 0 {
        return Err(RunError::Numerical {
            aborts: output.aborts,
            out_dir: out_dir.to_path_buf(),
        });
    }
    Ok(output)
}
