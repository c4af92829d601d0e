use balancekit::baselines::ols;
use balancekit::simulation::forest::{fit_forest, Criterion, ForestParams};
use balancekit::simulation::*;
use balancekit::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(dgp: DgpKind, seed: u64) -> SimulationSpec {
    SimulationSpec {
        n_units: 2000,
        d_continuous: 4,
        d_binary: 2,
        n_outcomes: 2,
        dgp,
        seed,
        shard_rows: 256,
        ..SimulationSpec::default()
    }
}

#[test]
fn spec_validation() {
    assert!(SimulationSpec::default().validate().is_ok());
    for bad in [
        SimulationSpec { n_units: 2001, ..small(DgpKind::Linear, 0) },
        SimulationSpec { n_units: 2, ..small(DgpKind::Linear, 0) },
        SimulationSpec { d_binary: 0, ..small(DgpKind::Linear, 0) },
        SimulationSpec { interaction_anchor: 2, ..small(DgpKind::Linear, 0) },
        SimulationSpec { n_outcomes: 0, ..small(DgpKind::Linear, 0) },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert_eq!("random_forest".parse::<DgpKind>().unwrap(), DgpKind::RandomForest);
    assert_eq!("linear_interactions".parse::<DgpKind>().unwrap(), DgpKind::LinearInteractions);
    assert!("tree".parse::<DgpKind>().is_err());
}

#[test]
fn generation_is_deterministic_in_the_seed() {
    let e = Engine::serial();
    let a = simulate_dataset(&small(DgpKind::Linear, 3), &e).unwrap();
    let b = simulate_dataset(&small(DgpKind::Linear, 3), &e).unwrap();
    let c = simulate_dataset(&small(DgpKind::Linear, 4), &e).unwrap();
    assert_eq!(a.units(), b.units());
    assert_ne!(a.units(), c.units());
    assert_eq!(a.n_control() + a.n_treated(), 1000);
    assert_eq!((a.d(), a.m()), (6, 2));
}

#[test]
fn zero_inflation_matches_its_probability() {
    let spec = SimulationSpec { n_units: 100_000, ..small(DgpKind::Linear, 9) };
    let mut params = PopulationParams::draw(&spec);
    params.continuous[1].zero_prob = 1.0;
    let pop = generate_rows(&spec, &params, spec.n_units, 0);
    assert!(pop.rows.iter().all(|r| r[1] == 0.0));
    for (j, c) in params.continuous.iter().enumerate().filter(|(j, _)| *j != 1) {
        let zeros = pop.rows.iter().filter(|r| r[j] == 0.0).count() as f64 / pop.len() as f64;
        assert!((zeros - c.zero_prob).abs() < 0.03, "column {j}: {zeros} vs {}", c.zero_prob);
        // nonzero draws are 1 + Poisson, so never below one
        assert!(pop.rows.iter().all(|r| r[j] == 0.0 || r[j] >= 1.0));
    }
    for r in &pop.rows {
        assert!(r[4..].iter().all(|b| *b == 0.0 || *b == 1.0));
    }
}

#[test]
fn halves_are_disjoint() {
    let spec = small(DgpKind::Linear, 1);
    let pop = generate_base_population(&spec);
    let all = pop.rows.clone();
    let (a, b) = pop.split_halves();
    assert_eq!((a.len(), b.len()), (1000, 1000));
    assert_eq!(a.rows[..], all[..1000]);
    assert_eq!(b.rows[..], all[1000..]);
}

#[test]
fn linear_outcome_model_recovers_exact_coefficients() {
    let spec = small(DgpKind::Linear, 2);
    let mut train = generate_base_population(&spec).split_halves().0;
    let beta = [3.0, 0.5, -0.25, 0.125, 1.0, -2.0, 0.75];
    for (x, y) in train.rows.iter().zip(train.outcomes.iter_mut()) {
        y[0] = beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
    }
    let models = fit_dgp_models(&train, &spec, &Engine::serial()).unwrap();
    let OutcomeDgp::Linear(fit) = &models.outcomes[0] else { panic!("expected a linear model") };
    for (got, want) in fit.coefficients.iter().zip(beta) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert!(models.residuals[0].iter().all(|r| r.abs() < 1e-6));
}

#[test]
fn interaction_models_carry_twice_the_slopes() {
    let spec = small(DgpKind::LinearInteractions, 5);
    let train = generate_base_population(&spec).split_halves().0;
    let models = fit_dgp_models(&train, &spec, &Engine::serial()).unwrap();
    assert_eq!(linear_coefficient_count(DgpKind::LinearInteractions, 6), 13);
    let OutcomeDgp::Linear(fit) = &models.outcomes[1] else { panic!("expected a linear model") };
    assert_eq!(fit.coefficients.len(), 13);
    let SelectionDgp::Logistic(beta) = &models.selection else { panic!("expected a logistic model") };
    assert_eq!(beta.len(), 13);
    let x = [1.0, 2.0, 0.0, 4.0, 1.0, 0.0];
    assert_eq!(model_features(DgpKind::LinearInteractions, 4, &x), [&x[..], &x[..]].concat());
    assert_eq!(model_features(DgpKind::Linear, 4, &x), x);
}

#[test]
fn single_split_tree_predicts_leaf_means() {
    let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
    let y: Vec<f64> = (0..100).map(|i| if i < 40 { 1.0 + (i % 2) as f64 } else { 7.0 }).collect();
    let params = ForestParams {
        bootstrap: false,
        max_features: Some(1),
        ..ForestParams::new(1, 1, 0)
    };
    let f = fit_forest(&rows, &y, Criterion::Variance, &params);
    assert_eq!(f.trees[0].leaves(), 2);
    assert!((f.predict(&[10.0]) - 1.5).abs() < 1e-12);
    assert!((f.predict(&[80.0]) - 7.0).abs() < 1e-12);
}

#[test]
fn empty_residual_pool_gives_model_means() {
    let spec = small(DgpKind::Linear, 6);
    let (train, test) = generate_base_population(&spec).split_halves();
    let mut models = fit_dgp_models(&train, &spec, &Engine::serial()).unwrap();
    models.residuals = vec![Vec::new(); 2];
    let ds = synthesize(&test, &models, &spec, &mut synthesis_rng(&spec, 0)).unwrap();
    for u in ds.units() {
        for j in 0..2 {
            assert!((u.outcomes[j] - models.outcome_mean(j, &u.covariates)).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_selection_probability_sets_the_treated_share() {
    let spec = SimulationSpec { n_units: 20_000, ..small(DgpKind::Linear, 7) };
    let (train, test) = generate_base_population(&spec).split_halves();
    let mut models = fit_dgp_models(&train, &spec, &Engine::serial()).unwrap();
    let mut beta = vec![0.0; 7];
    beta[0] = 0.0;
    models.selection = SelectionDgp::Logistic(beta);
    let ds = synthesize(&test, &models, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let share = ds.n_treated() as f64 / 10_000.0;
    assert!((share - 0.5).abs() < 0.02, "{share}");
}

#[test]
fn synthesized_residuals_keep_their_mean() {
    let spec = SimulationSpec { n_units: 20_000, ..small(DgpKind::RandomForest, 8) };
    let (train, test) = generate_base_population(&spec).split_halves();
    let models = fit_dgp_models(&train, &spec, &Engine::serial()).unwrap();
    let ds = synthesize(&test, &models, &spec, &mut synthesis_rng(&spec, 0)).unwrap();
    for j in 0..2 {
        let pool = &models.residuals[j];
        let n = pool.len() as f64;
        let mu = pool.iter().sum::<f64>() / n;
        let sd = (pool.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / (n - 1.0)).sqrt();
        let draws: Vec<f64> = ds.units().iter().map(|u| u.outcomes[j] - models.outcome_mean(j, &u.covariates)).collect();
        let got = draws.iter().sum::<f64>() / draws.len() as f64;
        let se = sd / (draws.len() as f64).sqrt();
        assert!((got - mu).abs() < 3.0 * se, "outcome {j}: {got} vs {mu} (se {se})");
        // every draw is a member of the pool
        assert!(draws.iter().all(|r| pool.iter().any(|p| (p - r).abs() < 1e-9)));
    }
}

#[test]
fn forest_selection_probabilities_are_clipped() {
    let spec = small(DgpKind::RandomForest, 10);
    let (train, test) = generate_base_population(&spec).split_halves();
    let models = fit_dgp_models(&train, &spec, &Engine::serial()).unwrap();
    for x in &test.rows {
        let p = models.propensity(x);
        assert!((0.0..=1.0).contains(&p));
    }
    let ds = synthesize(&test, &models, &spec, &mut synthesis_rng(&spec, 0)).unwrap();
    assert!(ds.n_treated() > 0 && ds.n_control() > 0);
}

#[test]
fn ols_helper_agrees_with_outcome_models() {
    let spec = small(DgpKind::Linear, 11);
    let train = generate_base_population(&spec).split_halves().0;
    let y: Vec<f64> = train.outcomes.iter().map(|o| o[1]).collect();
    let direct = ols(&train.rows, &y).unwrap();
    let models = fit_dgp_models(&train, &spec, &Engine::serial()).unwrap();
    let OutcomeDgp::Linear(fit) = &models.outcomes[1] else { panic!("expected a linear model") };
    assert_eq!(fit, &direct);
}

#[test]
fn single_replication_benchmark_reports_one_row_per_method() {
    let cfg = BenchmarkConfig::new(small(DgpKind::Linear, 12), vec![BenchMethod::Eb, BenchMethod::EbDr, BenchMethod::Ipw], 1);
    let r = run_benchmark(&cfg, &Engine::serial()).unwrap();
    assert_eq!(r.records.len(), 3);
    assert_eq!(r.methods.len(), 3);
    for m in &r.methods {
        assert_eq!((m.successes, m.failures), (1, 0));
        assert!(m.median_amb.is_finite());
    }
    // residual tolerance 1e-4 over covariate sds of at least ~0.4
    assert!(r.method(BenchMethod::Eb).unwrap().mean_smd < 1e-3);
}

#[test]
fn benchmark_is_deterministic_across_workers() {
    let cfg = BenchmarkConfig::new(small(DgpKind::Linear, 13), vec![BenchMethod::Eb, BenchMethod::Ipw], 4);
    let a = run_benchmark(&cfg, &Engine::serial()).unwrap();
    let b = run_benchmark(&cfg, &Engine::new(balancekit::EngineConfig::with_workers(3)).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn benchmark_fails_when_solves_do_not_converge() {
    let mut cfg = BenchmarkConfig::new(small(DgpKind::Linear, 14), vec![BenchMethod::Eb], 2);
    cfg.solver.max_iterations = 1;
    let err = run_benchmark(&cfg, &Engine::serial()).unwrap_err();
    assert_eq!(err.code(), "simulation");
}
