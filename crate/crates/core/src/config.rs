//! Experiment configuration: a flat `key = value` text format with dotted keys.
//!
//! ```text
//! # comments and blank lines are ignored
//! model.name = linear_jump_ou
//! model.a = 1
//! run.experiment = strong_rate
//! run.epsilons = 0.0625, 0.03125, 0.015625
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{builtin_model, ModelError, ModelSpec, ProbeBox};
use crate::noise::TimeGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value'")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key '{key}'")]
    Duplicate { line: usize, key: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("missing required key '{0}'")]
    Missing(&'static str),
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("model: {0}")]
    Model(#[from] ModelError),
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    StrongRate,
    KolmogorovRate,
    MalliavinCheck,
    InverseNorm,
    Assumptions,
}

impl Experiment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::StrongRate => "strong_rate",
            Self::KolmogorovRate => "kolmogorov_rate",
            Self::MalliavinCheck => "malliavin_check",
            Self::InverseNorm => "inverse_norm",
            Self::Assumptions => "assumptions",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "strong_rate" => Self::StrongRate,
            "kolmogorov_rate" => Self::KolmogorovRate,
            "malliavin_check" => Self::MalliavinCheck,
            "inverse_norm" => Self::InverseNorm,
            "assumptions" => Self::Assumptions,
            _ => return None,
        })
    }

    fn uses_epsilons(&self) -> bool {
        matches!(
            self,
            Self::StrongRate | Self::KolmogorovRate | Self::MalliavinCheck
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkScheme {
    Direct,
    Exponential,
}

impl SkScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Exponential => "exponential",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threads {
    Auto,
    Fixed(usize),
}

/// Parsed and validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model_name: String,
    pub model_params: BTreeMap<String, f64>,
    pub experiment: Experiment,
    pub t_end: f64,
    pub n_steps: usize,
    pub t_eval: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub n_paths: usize,
    pub p_values: Vec<f64>,
    pub sk_scheme: SkScheme,
    /// Fine-grid refinement for the direct scheme; `None` picks the smallest
    /// factor with `dt ≤ ε_min / 10`.
    pub substep_factor: Option<usize>,
    /// Derivative kinds for `malliavin_check` / `inverse_norm`.
    pub kinds: Vec<crate::integrate::FieldKind>,
    pub seed: u64,
    pub threads: Threads,
    pub probe_n: usize,
    pub probe_x: (f64, f64),
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(_, v)| v)
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.take(key).map(|v| parse_f64(key, &v)).transpose()
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>, ConfigError> {
        self.take(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| invalid(key, format!("'{v}' is not a nonnegative integer")))
            })
            .transpose()
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        self.take(key)
            .map(|v| v.split(',').map(|s| parse_f64(key, s.trim())).collect())
            .transpose()
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = v
        .parse()
        .map_err(|_| invalid(key, format!("'{v}' is not a number")))?;
    if !x.is_finite() {
        return Err(invalid(key, "must be finite"));
    }
    Ok(x)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if map.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: k.into(),
                });
            }
        }
        let mut e = Entries { map };

        let model_name = e
            .take("model.name")
            .ok_or(ConfigError::Missing("model.name"))?;
        let model_keys: Vec<String> = e
            .map
            .keys()
            .filter(|k| k.starts_with("model."))
            .cloned()
            .collect();
        let mut model_params = BTreeMap::new();
        for key in model_keys {
            let v = e.f64(&key)?.expect("key present");
            model_params.insert(key["model.".len()..].to_string(), v);
        }

        let experiment_s = e
            .take("run.experiment")
            .ok_or(ConfigError::Missing("run.experiment"))?;
        let experiment = Experiment::parse(&experiment_s).ok_or_else(|| {
            invalid(
                "run.experiment",
                format!("unknown experiment '{experiment_s}'"),
            )
        })?;

        let t_end = e.f64("run.T")?.unwrap_or(1.0);
        let n_steps = e.usize("run.n_steps")?.unwrap_or(1000);
        let t_eval = e.list("run.t_eval")?.unwrap_or_else(|| vec![t_end]);
        let epsilons = e.list("run.epsilons")?.unwrap_or_default();
        let n_paths = e.usize("run.n_paths")?.unwrap_or(1000);
        let p_values = e.list("run.p_values")?.unwrap_or_else(|| vec![2.0]);
        let sk_scheme = match e.take("run.sk_scheme").as_deref() {
            None | Some("exponential") => SkScheme::Exponential,
            Some("direct") => SkScheme::Direct,
            Some(other) => {
                return Err(invalid(
                    "run.sk_scheme",
                    format!("unknown scheme '{other}'"),
                ))
            }
        };
        let substep_factor = e.usize("run.substep_factor")?;
        let kinds = match e.take("run.kinds") {
            None => vec![crate::integrate::FieldKind::Brownian],
            Some(v) => v
                .split(',')
                .map(|s| match s.trim() {
                    "brownian" => Ok(crate::integrate::FieldKind::Brownian),
                    "jump" => Ok(crate::integrate::FieldKind::Jump),
                    other => Err(invalid("run.kinds", format!("unknown kind '{other}'"))),
                })
                .collect::<Result<_, _>>()?,
        };
        let seed = match e.take("run.seed") {
            None => 0,
            Some(v) => v
                .parse()
                .map_err(|_| invalid("run.seed", format!("'{v}' is not a u64")))?,
        };
        let threads =
            match e.take("run.threads").as_deref() {
                None | Some("auto") => Threads::Auto,
                Some(v) => Threads::Fixed(v.parse().map_err(|_| {
                    invalid("run.threads", format!("'{v}' is not 'auto' or a count"))
                })?),
            };
        let probe_n = e.usize("probe.n_probes")?.unwrap_or(1000);
        let probe_x = (
            e.f64("probe.x_min")?.unwrap_or(-10.0),
            e.f64("probe.x_max")?.unwrap_or(10.0),
        );

        if let Some(key) = e.map.keys().next() {
            return Err(ConfigError::UnknownKey(key.clone()));
        }

        let cfg = Self {
            model_name,
            model_params,
            experiment,
            t_end,
            n_steps,
            t_eval,
            epsilons,
            n_paths,
            p_values,
            sk_scheme,
            substep_factor,
            kinds,
            seed,
            threads,
            probe_n,
            probe_x,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model()?;
        TimeGrid::new(self.t_end, self.n_steps)
            .map_err(|e| invalid("run.n_steps", e.to_string()))?;
        if self.n_paths == 0 {
            return Err(invalid("run.n_paths", "must be at least 1"));
        }
        if self.t_eval.is_empty() {
            return Err(invalid("run.t_eval", "must not be empty"));
        }
        let grid = self.grid();
        for &t in &self.t_eval {
            if !(t > 0.0 && t <= self.t_end) {
                return Err(invalid("run.t_eval", format!("{t} is outside (0, T]")));
            }
            if grid.node_index(t).is_none() {
                return Err(invalid(
                    "run.t_eval",
                    format!("{t} is not a node of the time grid"),
                ));
            }
        }
        if self.experiment.uses_epsilons() {
            if self.epsilons.is_empty() {
                return Err(invalid("run.epsilons", "must not be empty"));
            }
            if let Some(&e) = self.epsilons.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
                return Err(invalid("run.epsilons", format!("{e} is outside (0, 1)")));
            }
            if self.epsilons.windows(2).any(|w| w[0] <= w[1]) {
                return Err(invalid("run.epsilons", "must be strictly descending"));
            }
        }
        let p_min = match self.experiment {
            Experiment::StrongRate => 2.0,
            Experiment::InverseNorm => 1.0,
            _ => 0.0,
        };
        if p_min > 0.0 {
            if self.p_values.is_empty() {
                return Err(invalid("run.p_values", "must not be empty"));
            }
            if let Some(&p) = self.p_values.iter().find(|&&p| p < p_min) {
                return Err(invalid("run.p_values", format!("{p} is below {p_min}")));
            }
        }
        if self.substep_factor == Some(0) {
            return Err(invalid("run.substep_factor", "must be at least 1"));
        }
        if self.kinds.is_empty() {
            return Err(invalid("run.kinds", "must not be empty"));
        }
        if self.threads == Threads::Fixed(0) {
            return Err(invalid("run.threads", "must be at least 1"));
        }
        ProbeBox::new((0.0, self.t_end), self.probe_x)
            .map_err(|_| invalid("probe.x_min", "empty probe box"))?;
        if self.probe_n == 0 {
            return Err(invalid("probe.n_probes", "must be at least 1"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelSpec, ConfigError> {
        Ok(builtin_model(&self.model_name, &self.model_params)?)
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.t_end, self.n_steps).expect("validated grid")
    }

    /// Fine-grid factor used for noise sampling. 1 for the exponential scheme.
    pub fn noise_refinement(&self) -> usize {
        match (self.sk_scheme, self.substep_factor) {
            (SkScheme::Exponential, _) => 1,
            (SkScheme::Direct, Some(f)) => f,
            (SkScheme::Direct, None) => {
                let eps_min = self.epsilons.iter().copied().fold(f64::INFINITY, f64::min);
                if !eps_min.is_finite() {
                    return 1;
                }
                let dt = self.grid().dt();
                let need = (dt / (crate::integrate::DIRECT_MAX_DT_OVER_EPS * eps_min)).ceil();
                (need as usize).max(1)
            }
        }
    }

    /// Canonical text of every field that affects results (everything except
    /// the thread count).
    pub fn canonical(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "model.name={}", self.model_name);
        for (k, v) in &self.model_params {
            let _ = writeln!(s, "model.{k}={v:?}");
        }
        let _ = writeln!(s, "probe.n_probes={}", self.probe_n);
        let _ = writeln!(s, "probe.x={:?},{:?}", self.probe_x.0, self.probe_x.1);
        let _ = writeln!(s, "run.T={:?}", self.t_end);
        let _ = writeln!(s, "run.epsilons={}", list(&self.epsilons));
        let _ = writeln!(s, "run.experiment={}", self.experiment.as_str());
        let _ = writeln!(s, "run.kinds={:?}", self.kinds);
        let _ = writeln!(s, "run.n_paths={}", self.n_paths);
        let _ = writeln!(s, "run.n_steps={}", self.n_steps);
        let _ = writeln!(s, "run.p_values={}", list(&self.p_values));
        let _ = writeln!(s, "run.seed={}", self.seed);
        let _ = writeln!(s, "run.sk_scheme={}", self.sk_scheme.as_str());
        let _ = writeln!(s, "run.substep_factor={}", self.noise_refinement());
        let _ = writeln!(s, "run.t_eval={}", list(&self.t_eval));
        s
    }

    /// Hex SHA-256 of [`ExperimentConfig::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
