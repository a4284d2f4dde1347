//! Acceptance run: one PASS/FAIL line per criterion, each with its runtime
//! budget. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p bellman-cli --test acceptance -- 3 5`.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use bellman_core::bellman::{
    filter_lg, objective_from_steps, run_scalar, stability_jacobian, update_lg, update_scalar, FilterInit, StateBelief,
    UpdateOptions,
};
use bellman_core::dynamics::LinearGaussianDynamics;
use bellman_core::estimation::{FitOptions, ScalarModel};
use bellman_core::harness::{mode_oracle, run_study, simulate, Method, ModeOptions, StudyConfig};
use bellman_core::kalman::{kalman_filter, LinearGaussianObservation};
use bellman_core::numerics::{fd_derivative, fd_gradient, fd_hessian, fd_second_derivative, SymMatrix};
use bellman_core::numerics::{FD_HESSIAN_STEP, FD_STEP};
use bellman_core::obsmodels::{ObsSeries, ObservationModel, ScalarFamily, ShapeParams};
use bellman_core::svleverage::{
    sv_default_start, sv_filter, sv_fit, sv_obs_eval, sv_simulate, sv_trans_eval, SvLeverageParams,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;
type Criterion = (&'static str, u64, fn() -> Check);

const FAMILIES: [&str; 10] =
    ["poisson", "negbin", "exponential", "gamma", "weibull", "sv-gauss", "sv-t", "dep-gauss", "dep-t", "local-level-t"];

fn family(id: &str) -> ObservationModel {
    ObservationModel::from_id(id, ShapeParams::default()).expect("registered family")
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

fn random_lg(rng: &mut ChaCha8Rng, m: usize, l: usize) -> (LinearGaussianObservation, LinearGaussianDynamics) {
    let mut u = |s: f64| s * (rng.random::<f64>() - 0.5);
    let mut t = DMatrix::from_fn(m, m, |_, _| u(1.2));
    let r = bellman_core::numerics::spectral_radius(&t);
    if r > 0.95 {
        t *= 0.95 / r;
    }
    let a = DMatrix::from_fn(m, m, |_, _| u(1.0));
    let q = SymMatrix::symmetrize(&a * a.transpose() + DMatrix::identity(m, m) * 0.2);
    let c = DVector::from_fn(m, |_, _| u(1.0));
    let z = DMatrix::from_fn(l, m, |_, _| u(2.0));
    let b = DMatrix::from_fn(l, l, |_, _| u(1.0));
    let h = SymMatrix::symmetrize(&b * b.transpose() + DMatrix::identity(l, l) * 0.3);
    let d = DVector::from_fn(l, |_, _| u(1.0));
    (LinearGaussianObservation::new(d, z, h).unwrap(), LinearGaussianDynamics::new(c, t, q).unwrap())
}

fn lg_case(seed: u64, n: usize) -> (LinearGaussianObservation, LinearGaussianDynamics, ObsSeries) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=3);
    let l = rng.random_range(1..=3);
    let (lgo, dynamics) = random_lg(&mut rng, m, l);
    let obs = ObservationModel::LinearGaussian(lgo.clone());
    let sim = simulate(&obs, &dynamics, n, &mut rng).unwrap();
    (lgo, dynamics, sim.data)
}

fn kalman_equivalence() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let (lgo, dynamics, data) = lg_case(seed, 200);
        let obs = ObservationModel::LinearGaussian(lgo.clone());
        let kf = kalman_filter(&lgo, &dynamics, &data, &FilterInit::Unconditional).map_err(e)?;
        let bf = filter_lg(&obs, &dynamics, &data, &UpdateOptions::default(), &FilterInit::Unconditional).map_err(e)?;
        for (b, k) in bf.iter().zip(&kf.steps) {
            for (x, y) in [(&b.predicted, &k.predicted), (&b.updated, &k.updated)] {
                for (p, q) in x.mean.iter().zip(y.mean.iter()) {
                    worst = worst.max(rel_err(*p, *q));
                }
                for (p, q) in x.info.as_matrix().iter().zip(y.info.as_matrix().iter()) {
                    worst = worst.max(rel_err(*p, *q));
                }
            }
        }
    }
    Ok((worst <= 1e-10, format!("max state/information error {worst:.2e} (tol 1e-10)")))
}

fn likelihood_equivalence() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 1000..1100 {
        let (lgo, dynamics, data) = lg_case(seed, 200);
        let obs = ObservationModel::LinearGaussian(lgo.clone());
        let kf = kalman_filter(&lgo, &dynamics, &data, &FilterInit::Unconditional).map_err(e)?;
        let bf = filter_lg(&obs, &dynamics, &data, &UpdateOptions::default(), &FilterInit::Unconditional).map_err(e)?;
        worst = worst.max(rel_err(objective_from_steps(&bf), kf.loglik));
    }
    Ok((worst <= 1e-8, format!("max objective error {worst:.2e} (tol 1e-8)")))
}

/// Maximiser of `ℓ(y|a) − ½ I (a − a_pred)²` by a dense grid and a golden
/// section refinement of the best cell.
fn grid_argmax(fam: &ScalarFamily, y: &[f64], a_pred: f64, i_pred: f64) -> f64 {
    let v = |a: f64| fam.eval_unchecked(y, a).logpdf - 0.5 * i_pred * (a - a_pred).powi(2);
    let h = 1e-3;
    let mut best = (f64::NEG_INFINITY, a_pred);
    for i in -12_000..=12_000 {
        let a = a_pred + i as f64 * h;
        let val = v(a);
        if val > best.0 {
            best = (val, a);
        }
    }
    let (mut lo, mut hi) = (best.1 - h, best.1 + h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-10 {
        let x1 = hi - g * (hi - lo);
        let x2 = lo + g * (hi - lo);
        if v(x1) < v(x2) {
            lo = x1;
        } else {
            hi = x2;
        }
    }
    0.5 * (lo + hi)
}

// The oracle is the exact argmax, so the update runs to a tight stopping rule.
// Fisher scoring (the search for the non-concave families) converges only
// linearly and can stop short under the default 1e-4 / 40-iteration rule;
// that gap is reported alongside.
fn grid_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = (0.0, "");
    let mut worst_default = (0.0, "");
    for id in FAMILIES {
        let obs = family(id);
        let fam = *obs.as_family().unwrap();
        let default = UpdateOptions::for_model(&obs);
        let tight = UpdateOptions { tol: 1e-12, max_iter: 2000, ..default };
        for _ in 0..200 {
            let a_pred: f64 = rng.random_range(-1.0..1.0);
            let i_pred: f64 = rng.random_range(0.5..5.0);
            let alpha = a_pred + rng.random_range(-1.0..1.0) / i_pred.sqrt();
            let y = fam.sample(alpha, &mut rng).map_err(e)?;
            let argmax = grid_argmax(&fam, &y, a_pred, i_pred);
            let pred = StateBelief::scalar(a_pred, i_pred);
            for (opts, w) in [(&tight, &mut worst), (&default, &mut worst_default)] {
                let out = update_lg(&obs, Some(&y), &pred, opts).map_err(e)?;
                let gap = (out.updated.mean[0] - argmax).abs();
                if gap > w.0 {
                    *w = (gap, id);
                }
            }
        }
    }
    Ok((
        worst.0 <= 1e-4,
        format!(
            "max |update − grid argmax| {:.2e} ({}; tol 1e-4); under the default stopping rule {:.2e} ({})",
            worst.0, worst.1, worst_default.0, worst_default.1
        ),
    ))
}

fn random_sv_params(rng: &mut ChaCha8Rng, k: usize) -> SvLeverageParams {
    let dir: Vec<f64> = (0..=k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let radius = rng.random_range(0.0..0.9);
    SvLeverageParams::new(
        rng.random_range(-0.01..0.01),
        rng.random_range(-0.5..0.0),
        rng.random_range(0.8..0.99),
        rng.random_range(0.1..0.4),
        dir.iter().map(|v| v / norm * radius).collect(),
    )
    .unwrap()
}

fn derivative_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut g_worst, mut h_worst): (f64, f64) = (0.0, 0.0);
    for id in FAMILIES {
        let fam = *family(id).as_family().unwrap();
        let mut done = 0;
        while done < 100 {
            let a: f64 = rng.random_range(-1.5..1.5);
            let y = fam.sample(a + rng.random_range(-0.5..0.5), &mut rng).map_err(e)?;
            let Ok(ev) = fam.eval(&y, a) else { continue };
            let lp = |x: f64| fam.eval_unchecked(&y, x).logpdf;
            let g = fd_derivative(lp, a, FD_STEP).map_err(e)?;
            let h = -fd_second_derivative(lp, a, FD_HESSIAN_STEP).map_err(e)?;
            g_worst = g_worst.max((g - ev.score).abs() / ev.score.abs().max(1.0));
            h_worst = h_worst.max((h - ev.realised).abs() / ev.realised.abs().max(1.0));
            done += 1;
        }
    }
    for k in 0..=3 {
        for _ in 0..100 {
            let p = random_sv_params(&mut rng, k);
            let x: Vec<f64> = (0..k + 2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let lags: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = rng.random_range(-2.0..2.0);
            let xv = DVector::from_vec(x.clone());
            let o = sv_obs_eval(&p, &x, y, &lags).map_err(e)?;
            let f = |v: &DVector<f64>| sv_obs_eval(&p, v.as_slice(), y, &lags).map(|r| r.logpdf).unwrap_or(f64::NAN);
            let t = sv_trans_eval(&p, &x, &lags).map_err(e)?;
            let tf = |v: &DVector<f64>| sv_trans_eval(&p, v.as_slice(), &lags).map(|r| r.logpdf).unwrap_or(f64::NAN);
            for (grad, hess, fd_g, fd_h) in [
                (&o.grad, &o.hess, fd_gradient(f, &xv, FD_STEP), fd_hessian(f, &xv, FD_HESSIAN_STEP)),
                (&t.grad, &t.hess, fd_gradient(tf, &xv, FD_STEP), fd_hessian(tf, &xv, FD_HESSIAN_STEP)),
            ] {
                let (fd_g, fd_h) = (fd_g.map_err(e)?, fd_h.map_err(e)?);
                for i in 0..k + 2 {
                    g_worst = g_worst.max((grad[i] - fd_g[i]).abs() / fd_g[i].abs().max(1.0));
                    for j in 0..k + 2 {
                        h_worst = h_worst.max((hess[(i, j)] - fd_h[(i, j)]).abs() / fd_h[(i, j)].abs().max(1.0));
                    }
                }
            }
        }
    }
    Ok((
        g_worst <= 1e-5 && h_worst <= 1e-4,
        format!("max score error {g_worst:.2e} (tol 1e-5), max Hessian error {h_worst:.2e} (tol 1e-4)"),
    ))
}

fn update_properties() -> Check {
    // stability at random points of the concave families
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let concave: Vec<&str> = FAMILIES.iter().copied().filter(|id| family(id).realised_info_nonnegative()).collect();
    let mut eig_range = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..10_000 {
        let obs = family(concave[i % concave.len()]);
        let fam = *obs.as_family().unwrap();
        let a_pred: f64 = rng.random_range(-2.0..2.0);
        let i_pred: f64 = rng.random_range(0.1..10.0);
        let y = fam.sample(a_pred + rng.random_range(-1.0..1.0), &mut rng).map_err(e)?;
        let pred = StateBelief::scalar(a_pred, i_pred);
        let out = update_lg(&obs, Some(&y), &pred, &UpdateOptions::for_model(&obs)).map_err(e)?;
        let (_, eig) = stability_jacobian(&obs, &y, &pred, &out.updated.mean).map_err(e)?;
        eig_range = (eig_range.0.min(eig[0]), eig_range.1.max(eig[eig.len() - 1]));
    }
    let stable = eig_range.0 > 0.0 && eig_range.1 <= 1.0 + 1e-12;

    // boundedness, direction and implicit ≤ explicit along a Poisson run
    let fam = ScalarFamily::Poisson;
    let (c, t, q) = (0.0, 0.98, 0.0225);
    let dynamics = LinearGaussianDynamics::scalar(c, t, q).map_err(e)?;
    let sim = simulate(&ObservationModel::Family(fam), &dynamics, 10_000, &mut rng).map_err(e)?;
    let opts = UpdateOptions::default();
    let mut records = Vec::with_capacity(10_000);
    run_scalar(&fam, c, t, q, &sim.data, &opts, None, |_, r| records.push(*r)).map_err(e)?;
    let (mut bound_gap, mut dir_gap, mut step_gap, mut converged) =
        (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
    for (s, r) in records.iter().enumerate() {
        if !r.update.converged {
            continue;
        }
        converged += 1;
        let y = sim.data.row(s);
        let at_pred = fam.eval_unchecked(y, r.a_pred);
        let at_upd = fam.eval_unchecked(y, r.update.a_upd);
        let d = r.update.a_upd - r.a_pred;
        bound_gap = bound_gap.max(0.5 * r.i_pred * d * d - (at_upd.logpdf - at_pred.logpdf));
        dir_gap = dir_gap.max(-d * at_pred.score);
        step_gap = step_gap.max(r.i_pred.sqrt() * d.abs() - at_pred.score.abs() / r.i_pred.sqrt());
    }
    let tol = 1e-9;
    let inequalities = bound_gap <= tol && dir_gap <= tol && step_gap <= tol;

    // contractivity with predictions pushed 2 units off
    let mut rows = Vec::with_capacity(records.len());
    for (s, r) in records.iter().enumerate() {
        let a_bad = r.a_pred + 2.0;
        let u = update_scalar(&fam, Some(sim.data.row(s)), a_bad, r.i_pred, &opts).map_err(e)?;
        rows.push((sim.states[s][0], a_bad, u.a_upd, r.i_pred));
    }
    // ε: the curvature e^a is smallest at the lowest point any segment
    // [a_upd, α] reaches; σ²: E[score²] = e^α is largest at the highest α
    let eps = rows.iter().map(|&(al, _, up, _)| al.min(up)).fold(f64::INFINITY, f64::min).exp();
    let sigma2 = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max).exp();
    let diffs: Vec<f64> = rows
        .iter()
        .map(|&(al, bad, up, i)| (i + 2.0 * eps) * (up - al).powi(2) - i * (bad - al).powi(2) - sigma2 / i)
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let se = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let contractive = mean <= 3.0 * se;

    Ok((
        stable && inequalities && contractive,
        format!(
            "eigenvalues in [{:.3e}, {:.6}]; {converged} converged steps, worst gaps bound {bound_gap:.1e} \
             direction {dir_gap:.1e} step {step_gap:.1e}; contraction mean {mean:.4} vs 3 SE {:.4} (ε {eps:.3}, σ² {sigma2:.3})",
            eig_range.0,
            eig_range.1,
            3.0 * se
        ),
    ))
}

fn study(model: &str, methods: Vec<Method>, baseline: Option<Method>) -> StudyConfig {
    let mut cfg = StudyConfig::new(model, methods);
    cfg.baseline = baseline;
    cfg.seed = 1;
    cfg
}

fn poisson_mae() -> Check {
    let r = run_study(&study("poisson", vec![Method::Bellman], None)).map_err(e)?;
    let s = r.summary(Method::Bellman).ok_or("no summary")?;
    Ok((
        (0.337..=0.377).contains(&s.mae) && s.failed == 0,
        format!("MAE {:.4} over {} series (band [0.337, 0.377])", s.mae, s.succeeded),
    ))
}

fn local_level_robustness() -> Check {
    let cfg = study("local-level-t", vec![Method::Bellman, Method::KalmanQmle], Some(Method::Bellman));
    let r = run_study(&cfg).map_err(e)?;
    let b = r.summary(Method::Bellman).ok_or("no summary")?;
    let k = r.summary(Method::KalmanQmle).ok_or("no summary")?;
    let ratio = k.mae / b.mae;
    Ok((ratio >= 1.05, format!("QMLE/Bellman MAE {ratio:.4} ({:.4} vs {:.4}; need ≥ 1.05)", k.mae, b.mae)))
}

fn csir_parity() -> Check {
    let cfg = study("sv-gauss", vec![Method::Bellman, Method::Csir], Some(Method::Csir));
    let r = run_study(&cfg).map_err(e)?;
    let b = r.summary(Method::Bellman).ok_or("no summary")?;
    let p = r.summary(Method::Csir).ok_or("no summary")?;
    let gap = (b.mae - p.mae).abs() / p.mae;
    Ok((gap <= 0.02, format!("|Bellman − CSIR| / CSIR MAE {gap:.4} ({:.4} vs {:.4}; tol 0.02)", b.mae, p.mae)))
}

fn parameter_recovery() -> Check {
    let truth = ScalarModel { family: ScalarFamily::Poisson, c: 0.0, t: 0.98, q: 0.0225 };
    let fit_opts = FitOptions { standard_errors: false, ..Default::default() };
    let (mut t_sum, mut q_sum) = (0.0, 0.0);
    let reps = 20;
    for r in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + r);
        let sim = simulate(&truth.observation(), &truth.dynamics().map_err(e)?, 2500, &mut rng).map_err(e)?;
        let start = ScalarModel::default_start(truth.family, &sim.data);
        let (m, _) = start.fit(&sim.data, &UpdateOptions::default(), &fit_opts).map_err(e)?;
        t_sum += m.t;
        q_sum += m.q;
    }
    let (t_hat, q_hat) = (t_sum / reps as f64, q_sum / reps as f64);
    Ok((
        (0.97..=0.99).contains(&t_hat) && (0.015..=0.03).contains(&q_hat),
        format!("mean T̂ {t_hat:.4} (need [0.97, 0.99]), mean Q̂ {q_hat:.4} (need [0.015, 0.03])"),
    ))
}

fn sv_leverage() -> Check {
    let truth = SvLeverageParams::study_set1();
    let (n, half, reps) = (5000, 2500, 20);
    let opts = UpdateOptions::default();
    let (mut mae_sum, mut rho1_sum) = (0.0, 0.0);
    for r in 0..reps {
        let sample = sv_simulate(&truth, n, 7000 + r).map_err(e)?;
        let est = &sample.y[..half];
        let fit = sv_fit(est, &sv_default_start(est, truth.k()), &opts, &FitOptions::default()).map_err(e)?;
        let pred = sv_filter(&fit.params, &sample.y, &opts).map_err(e)?.h_predictions(n, &fit.params);
        let mae = pred[half..].iter().zip(&sample.h[half..]).map(|(p, h)| (p - h).abs()).sum::<f64>() / half as f64;
        mae_sum += mae;
        rho1_sum += fit.params.rho[1];
    }
    let (mae, rho1) = (mae_sum / reps as f64, rho1_sum / reps as f64);
    Ok((
        (0.31..=0.41).contains(&mae) && (rho1 + 0.4384).abs() <= 0.12,
        format!("mean MAE {mae:.4} (need [0.31, 0.41]), mean ρ̂₁ {rho1:.4} (need −0.4384 ± 0.12)"),
    ))
}

fn mode_consistency() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let n = rng.random_range(1..=50);
        let (lgo, dynamics, data) = lg_case(6000 + seed, n);
        let obs = ObservationModel::LinearGaussian(lgo.clone());
        let prior = FilterInit::Unconditional.belief(&dynamics).map_err(e)?;
        let mode = mode_oracle(&obs, &dynamics, &data, &prior, None, &ModeOptions::default()).map_err(e)?;
        let kf = kalman_filter(&lgo, &dynamics, &data, &FilterInit::Unconditional).map_err(e)?;
        let filtered = &kf.steps[n - 1].updated.mean;
        for (a, b) in mode.last().iter().zip(filtered.iter()) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    Ok((worst <= 1e-8, format!("max |last mode − filtered state| {worst:.2e} (tol 1e-8)")))
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_bellman")).args(args).output().map_err(e)?;
    if !out.status.success() {
        return Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn determinism() -> Check {
    let dir = std::env::temp_dir().join(format!("bellman-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(e)?;
    let path = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let write = |name: &str, bytes: &[u8]| std::fs::write(dir.join(name), bytes).map_err(e);

    write("counts.csv", &run_cli(&["simulate", "--model", "poisson", "--n", "200", "--seed", "9"])?)?;
    write("returns.csv", &run_cli(&["sv-simulate", "--set", "1", "--n", "600", "--seed", "9"])?)?;
    write(
        "study.toml",
        b"model = \"poisson\"\nn_series = 3\nlength = 400\nmethods = [\"bellman\", \"csir\", \"mode\"]\nparticles = 100\nmode_window = 50\n",
    )?;
    let (counts, returns, config) = (path("counts.csv"), path("returns.csv"), path("study.toml"));
    let runs: Vec<Vec<&str>> = vec![
        vec!["simulate", "--model", "gamma", "--n", "200"],
        vec!["filter", "--model", "poisson", "--data", &counts],
        vec!["filter", "--model", "poisson", "--data", &counts, "--filter", "csir", "--particles", "200"],
        vec!["estimate", "--model", "poisson", "--data", &counts],
        vec!["study", "--config", &config, "--threads", "2"],
        vec!["sv-simulate", "--set", "2", "--n", "300"],
        vec!["sv-fit", "--data", &returns, "--lags", "1"],
        vec!["mode-oracle", "--model", "poisson", "--data", &counts],
    ];
    let mut differing = vec![];
    for args in &runs {
        let mut full = args.clone();
        full.extend(["--seed", "21"]);
        if run_cli(&full)? != run_cli(&full)? {
            differing.push(args[0]);
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok((
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} invocations repeat byte for byte", runs.len())
        } else {
            format!("output differs for {}", differing.join(", "))
        },
    ))
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 12] = [
        ("Kalman equivalence", 10, kalman_equivalence),
        ("exact likelihood", 10, likelihood_equivalence),
        ("grid-oracle update", 30, grid_oracle),
        ("derivative suite", 30, derivative_suite),
        ("update properties", 60, update_properties),
        ("Poisson desk-scale MAE", 120, poisson_mae),
        ("local-level robustness", 180, local_level_robustness),
        ("CSIR parity", 300, csir_parity),
        ("parameter recovery", 300, parameter_recovery),
        ("SV leverage", 1200, sv_leverage),
        ("mode-oracle consistency", 10, mode_consistency),
        ("determinism", 600, determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(*budget);
        let (ok, detail) = match result {
            Ok((ok, detail)) => (ok && in_time, detail),
            Err(msg) => (false, format!("error: {msg}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail}; {:.1}s (budget {budget}s{})",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            if in_time { "" } else { ", exceeded" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
