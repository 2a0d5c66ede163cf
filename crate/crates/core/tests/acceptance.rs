//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use skjump::config::ExperimentConfig;
use skjump::experiment::execute;
use skjump::integrate::{
    closed_form_malliavin, norm_marks, propagate_malliavin, simulate_limit, simulate_sk_direct,
    simulate_sk_exponential, FieldKind,
};
use skjump::model::{builtin_model, ModelSpec};
use skjump::noise::{coarsen, sample_noise, TimeGrid};
use skjump::stats::ks_distance;

const OU: &str = "model.name = linear_jump_ou
model.a = 1
model.s = 0.5
model.gamma = 0.3
model.lambda = 2
model.x0 = 0
model.y0 = 1
run.T = 1
run.seed = 20240611
";

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cfg(extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!("{OU}{extra}")).expect("acceptance config parses")
}

fn ou_model() -> ModelSpec {
    cfg("run.experiment = assumptions").model().unwrap()
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip(1)
        .filter(|l| !l.starts_with("RATE"))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn rate(csv: &str) -> (f64, f64, f64) {
    let line = csv
        .lines()
        .find(|l| l.starts_with("RATE"))
        .expect("rate row");
    let v: Vec<f64> = line
        .split(',')
        .skip(1)
        .map(|s| s.parse().unwrap())
        .collect();
    (v[0], v[1], v[2])
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

fn strong_rate_config() -> ExperimentConfig {
    cfg("run.experiment = strong_rate
run.n_steps = 1000
run.n_paths = 10000
run.p_values = 2
run.epsilons = 0.0625, 0.03125, 0.015625, 0.0078125, 0.00390625, 0.001953125
")
}

fn inverse_norm_config() -> ExperimentConfig {
    cfg("run.experiment = inverse_norm
run.n_steps = 1000
run.n_paths = 1000
run.t_eval = 0.25, 0.5, 1
run.p_values = 1
run.kinds = brownian
")
}

fn criterion_1() -> Outcome {
    let out = execute(&strong_rate_config(), Some(1)).unwrap();
    let (slope, se, r2) = rate(&out.csv);
    outcome(
        (0.8..=1.2).contains(&slope) && r2 >= 0.98 && out.aborts == 0,
        format!(
            "slope {slope:.4} (se {se:.4}), r^2 {r2:.5}, aborts {}",
            out.aborts
        ),
    )
}

fn criterion_2() -> Outcome {
    let c = cfg("run.experiment = kolmogorov_rate
run.n_steps = 1000
run.n_paths = 200000
run.epsilons = 0.25, 0.125, 0.0625, 0.03125, 0.015625
");
    let out = execute(&c, None).unwrap();
    let (slope, se, r2) = rate(&out.csv);
    let ratios: Vec<f64> = rows(&out.csv)
        .iter()
        .map(|r| num(&r[2]) / num(&r[3]))
        .collect();
    let above = ratios.iter().all(|&q| q >= 5.0);
    let shown: Vec<String> = ratios.iter().map(|q| format!("{q:.1}")).collect();
    outcome(
        (0.35..=0.65).contains(&slope) && above && out.aborts == 0,
        format!(
            "slope {slope:.4} (se {se:.4}), r^2 {r2:.4}, ks/floor [{}]",
            shown.join(", ")
        ),
    )
}

fn criterion_3() -> Outcome {
    let params: BTreeMap<String, f64> = [("x0".to_string(), 1.0), ("y0".to_string(), 2.0)].into();
    let m = builtin_model("deterministic_relax", &params).unwrap();
    let eps = 0.1;
    let exact = 1.0 + eps * 2.0 * (1.0 - (-1.0f64 / eps).exp());
    let grid = TimeGrid::new(1.0, 1000).unwrap();
    let path = sample_noise(grid, 0.0, &*m.mark_sampler, 1, 0).unwrap();
    let e_exp = (simulate_sk_exponential(&m, &path, eps).unwrap().terminal() - exact).abs();
    let e_dir = (simulate_sk_direct(&m, &path, eps, 1).unwrap().terminal() - exact).abs();
    let bound = 10.0 * eps * grid.dt();
    outcome(
        e_exp <= 1e-12 && e_dir <= bound,
        format!(
            "exponential error {e_exp:.2e} (<= 1e-12), direct error {e_dir:.2e} (<= {bound:.0e})"
        ),
    )
}

fn criterion_4() -> Outcome {
    let m = ou_model();
    let steps = [100usize, 200, 400];
    let mut worst = [0.0f64; 3];
    for k in 0..50 {
        let fine = sample_noise(
            TimeGrid::new(1.0, 400).unwrap(),
            m.jump_intensity,
            &*m.mark_sampler,
            4,
            k,
        )
        .unwrap();
        for (slot, &n) in steps.iter().enumerate() {
            let path = coarsen(&fine, 400 / n).unwrap();
            let limit = simulate_limit(&m, &path).unwrap();
            for j in 0..10 {
                let r = j * n / 10;
                let mark = norm_marks(&m, &path, r)[0];
                for (kind, z) in [(FieldKind::Brownian, None), (FieldKind::Jump, Some(mark))] {
                    let p = propagate_malliavin(&m, &limit, &path, kind, r, z).unwrap();
                    let c = closed_form_malliavin(&m, &limit, &path, kind, r, z).unwrap();
                    for t in r..=n {
                        let gap = (p.at(t) - c.at(t)).abs() / c.at(t).abs();
                        worst[slot] = worst[slot].max(gap);
                    }
                }
            }
        }
    }
    let f1 = worst[0] / worst[1];
    let f2 = worst[1] / worst[2];
    outcome(
        f1 >= 1.3 && f2 >= 1.3 && worst[2] <= 5e-2,
        format!(
            "max rel gap {:.3e} / {:.3e} / {:.3e}, halving factors {f1:.3}, {f2:.3}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn criterion_5() -> Outcome {
    let c = cfg("run.experiment = malliavin_check
run.n_steps = 1000
run.n_paths = 1000
run.epsilons = 0.125, 0.0625, 0.03125, 0.015625, 0.0078125
run.kinds = brownian
");
    let out = execute(&c, None).unwrap();
    let (slope, se, r2) = rate(&out.csv);
    outcome(
        (0.7..=1.3).contains(&slope) && out.aborts == 0,
        format!("slope {slope:.4} (se {se:.4}), r^2 {r2:.5}"),
    )
}

fn criterion_6() -> Outcome {
    let brownian = ExperimentConfig::parse(
        "model.name = pure_brownian
run.experiment = inverse_norm
run.n_steps = 1000
run.n_paths = 20
run.t_eval = 0.25, 0.5, 1
run.p_values = 1, 2, 3
run.kinds = brownian
",
    )
    .unwrap();
    let out = execute(&brownian, None).unwrap();
    let exact = rows(&out.csv)
        .iter()
        .map(|r| (num(&r[3]) / num(&r[0]).powf(-num(&r[1])) - 1.0).abs())
        .fold(0.0, f64::max);

    let out = execute(&inverse_norm_config(), None).unwrap();
    let scaled: Vec<f64> = rows(&out.csv).iter().map(|r| num(&r[5])).collect();
    let c_mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let spread = scaled
        .iter()
        .map(|c| (c / c_mean - 1.0).abs())
        .fold(0.0, f64::max);
    let c_max = scaled.iter().copied().fold(0.0, f64::max);
    let shown: Vec<String> = scaled.iter().map(|c| format!("{c:.3}")).collect();
    outcome(
        exact <= 1e-12 && spread <= 0.2 && out.aborts == 0,
        format!(
            "pure_brownian max rel dev from t^-p {exact:.1e}; t*E[1/|DX_t|^2] = [{}] (t = 0.25, 0.5, 1), \
             max deviation from mean {:.1}%, bound C = {c_max:.3}",
            shown.join(", "),
            100.0 * spread
        ),
    )
}

fn criterion_7() -> Outcome {
    let m = ou_model();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let mut adapted = true;
    for k in 0..20 {
        let path = sample_noise(grid, m.jump_intensity, &*m.mark_sampler, 7, k).unwrap();
        let limit = simulate_limit(&m, &path).unwrap();
        let sk = simulate_sk_exponential(&m, &path, 0.05).unwrap();
        for r in [1, 50, 199] {
            for traj in [&limit, &sk] {
                for (kind, z) in [(FieldKind::Brownian, None), (FieldKind::Jump, Some(0.5))] {
                    let f = propagate_malliavin(&m, traj, &path, kind, r, z).unwrap();
                    adapted &= (0..r).all(|t| f.at(t) == 0.0);
                }
            }
        }
    }
    let params: BTreeMap<String, f64> = [("a", 1.0), ("s", 0.5), ("gamma", 0.3), ("lambda", 0.0)]
        .map(|(k, v)| (k.to_string(), v))
        .into();
    let quiet = builtin_model("linear_jump_ou", &params).unwrap();
    let no_jumps = (0..1000).all(|k| {
        sample_noise(grid, 0.0, &*quiet.mark_sampler, 3, k)
            .unwrap()
            .jumps
            .is_empty()
    });
    let sample: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64 - 50.0).collect();
    let ks_zero = ks_distance(&sample, &sample).unwrap() == 0.0;
    outcome(
        adapted && no_jumps && ks_zero,
        format!("adapted {adapted}, zero-intensity paths jump-free {no_jumps}, KS(identical) = 0 {ks_zero}"),
    )
}

fn criterion_8() -> Outcome {
    let mut ok = true;
    let mut sizes = Vec::new();
    for c in [strong_rate_config(), inverse_norm_config()] {
        let a = execute(&c, Some(1)).unwrap().csv;
        let b = execute(&c, Some(1)).unwrap().csv;
        let d = execute(&c, Some(8)).unwrap().csv;
        ok &= a == b && a == d;
        sizes.push(a.len());
    }
    outcome(
        ok,
        format!("strong_rate and inverse_norm CSV bodies identical across runs at 1 and 8 threads ({sizes:?} bytes)"),
    )
}

fn criterion_9() -> Outcome {
    let m = ou_model();
    let (n, n_steps, t_end) = (100_000usize, 10usize, 1.0);
    let grid = TimeGrid::new(t_end, n_steps).unwrap();
    let mut sum = vec![0.0; n_steps];
    let mut sum_sq = vec![0.0; n_steps];
    let mut counts = Vec::with_capacity(n);
    let mut times = Vec::new();
    for k in 0..n {
        let path = sample_noise(grid, m.jump_intensity, &*m.mark_sampler, 9, k as u64).unwrap();
        for (i, db) in path.d_b.iter().enumerate() {
            sum[i] += db;
            sum_sq[i] += db * db;
        }
        counts.push(path.jumps.len() as f64);
        times.extend(path.jumps.iter().map(|j| j.time));
    }
    let nf = n as f64;
    let dt = grid.dt();
    let var_se = dt * (2.0 / (nf - 1.0)).sqrt();
    let var_z = (0..n_steps)
        .map(|i| {
            let var = (sum_sq[i] - sum[i] * sum[i] / nf) / (nf - 1.0);
            (var - dt).abs() / var_se
        })
        .fold(0.0, f64::max);

    let lt = m.jump_intensity * t_end;
    let mean = counts.iter().sum::<f64>() / nf;
    let count_z = (mean - lt).abs() / (lt / nf).sqrt();

    times.sort_by(f64::total_cmp);
    let nt = times.len() as f64;
    let ks = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let u = t / t_end;
            ((i + 1) as f64 / nt - u).max(u - i as f64 / nt)
        })
        .fold(0.0, f64::max);
    let critical = (-(1e-3f64 / 2.0).ln() / 2.0).sqrt() / nt.sqrt();
    outcome(
        var_z <= 5.0 && count_z <= 5.0 && ks <= critical,
        format!(
            "max |var - dt| = {var_z:.2} SE, |mean count - lambda T| = {count_z:.2} SE, \
             jump-time KS {ks:.2e} vs critical {critical:.2e} ({} jumps)",
            times.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("strong-error rate", criterion_1),
        ("Kolmogorov-distance rate", criterion_2),
        ("deterministic closed form", criterion_3),
        ("propagated vs closed-form derivative", criterion_4),
        ("derivative convergence rate", criterion_5),
        ("inverse-norm scaling", criterion_6),
        ("adaptedness and zero cases", criterion_7),
        ("thread-count determinism", criterion_8),
        ("noise statistics", criterion_9),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} [{verdict}] {name}: {} ({:.1}s)",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
