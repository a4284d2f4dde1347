//! Study engine: reproducibility across thread counts and the
//! Bellman-versus-CSIR accuracy pattern.

use bellman_core::harness::{run_study, Method, StudyConfig};

fn ratio_check(n_series: usize, length: usize) {
    for model in ["poisson", "negbin", "exponential", "gamma", "weibull", "sv-gauss", "dep-gauss"] {
        let mut cfg = StudyConfig::new(model, vec![Method::Bellman, Method::Csir]);
        cfg.n_series = n_series;
        cfg.length = length;
        cfg.baseline = Some(Method::Csir);
        cfg.seed = 77;
        let r = run_study(&cfg).unwrap();
        let rel = r.summary(Method::Bellman).unwrap().relative_mae;
        assert_eq!(r.common_series, n_series, "{model}: failures");
        assert!((0.98..=1.02).contains(&rel), "{model}: Bellman/CSIR MAE {rel}");
    }
}

#[test]
fn report_does_not_depend_on_thread_count() {
    let mut cfg = StudyConfig::new("gamma", vec![Method::Bellman, Method::Csir, Method::Mode]);
    cfg.n_series = 4;
    cfg.length = 400;
    cfg.particles = 100;
    cfg.mode_window = 50;
    cfg.seed = 3;
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let r = pool.install(|| run_study(&cfg).unwrap());
        serde_json::to_string(&r).unwrap()
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn estimated_parameters_are_reported() {
    let mut cfg = StudyConfig::new("local-level-t", vec![Method::Bellman, Method::KalmanQmle]);
    cfg.n_series = 2;
    cfg.length = 1000;
    cfg.params = bellman_core::harness::ParamSource::Estimated;
    cfg.seed = 5;
    let r = run_study(&cfg).unwrap();
    let b = r.summary(Method::Bellman).unwrap();
    assert_eq!(b.estimate_names, ["c", "T", "Q", "nu", "sigma"]);
    assert_eq!(b.mean_estimates.as_ref().unwrap().len(), 5);
    let k = r.summary(Method::KalmanQmle).unwrap();
    assert_eq!(k.estimate_names, ["c", "T", "Q", "H"]);
    assert!(r.series.iter().all(|s| s.error.is_none()));
}

// Reduced size: 10 series of 2000 steps. Bellman and CSIR see the same data,
// so the ratio is far less noisy than either MAE.
#[test]
fn bellman_matches_csir_on_light_tailed_families() {
    ratio_check(10, 2000);
}

#[test]
#[ignore]
fn bellman_matches_csir_on_light_tailed_families_desk_scale() {
    ratio_check(100, 5000);
}
