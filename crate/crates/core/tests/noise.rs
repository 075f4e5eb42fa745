use lclab::noise::{
    compare_interpretations, fit_linear, noise_csv, parse_noise_csv, simulate, Interpretation, NoiseSimConfig,
    NoiseTarget, VectorDist,
};

fn cfg(interpretation: Interpretation) -> NoiseSimConfig {
    NoiseSimConfig {
        t_max: 64,
        sigma: 0.1,
        d_k: 1,
        trials: 4000,
        interpretation,
        vector_dist: VectorDist::StandardScaled,
        noise_target: NoiseTarget::KeysAndValues,
        eval_points: None,
        seed: 9,
    }
}

#[test]
fn per_term_variance_tracks_sigma_squared_t() {
    let c = simulate(&cfg(Interpretation::PerTerm)).unwrap();
    for ((&t, &v), &ci) in c.t.iter().zip(&c.variance).zip(&c.ci_halfwidth) {
        let expect = 0.01 * t as f64;
        assert!((v - expect).abs() <= 3.0 * ci, "t={t}: {v} vs {expect} ± {ci}");
    }
    let fit = fit_linear(&c).unwrap();
    assert!((fit.slope - 0.01).abs() < 0.001);
}

#[test]
fn doubling_sigma_quadruples_per_term_variance() {
    let a = simulate(&cfg(Interpretation::PerTerm)).unwrap();
    let b = simulate(&NoiseSimConfig { sigma: 0.2, ..cfg(Interpretation::PerTerm) }).unwrap();
    for (x, y) in a.variance.iter().zip(&b.variance) {
        assert!((y / x - 4.0).abs() < 1e-9);
    }
}

#[test]
fn uniform_attention_value_noise_averages_out() {
    let c = simulate(&NoiseSimConfig {
        interpretation: Interpretation::FullAttention,
        vector_dist: VectorDist::UniformAttention,
        noise_target: NoiseTarget::ValuesOnly,
        eval_points: Some(vec![1, 4, 16, 64]),
        ..cfg(Interpretation::FullAttention)
    })
    .unwrap();
    for ((&t, &v), &ci) in c.t.iter().zip(&c.variance).zip(&c.ci_halfwidth) {
        let expect = 0.01 / t as f64;
        assert!((v - expect).abs() <= 3.0 * ci, "t={t}: {v} vs {expect} ± {ci}");
    }
}

#[test]
fn value_noise_is_linear_so_first_order_is_exact() {
    let base = NoiseSimConfig {
        noise_target: NoiseTarget::ValuesOnly,
        eval_points: Some(vec![2, 8, 32]),
        ..cfg(Interpretation::FirstOrder)
    };
    let r = compare_interpretations(&base, &[Interpretation::FirstOrder, Interpretation::FullAttention]).unwrap();
    for (a, b) in r[0].curve.variance.iter().zip(&r[1].curve.variance) {
        assert!((a - b).abs() / b < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn thread_count_does_not_change_curves() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| compare_interpretations(&cfg(Interpretation::PerTerm), &Interpretation::ALL).unwrap())
    };
    let curves = |r: Vec<lclab::noise::InterpretationResult>| r.into_iter().map(|x| x.curve).collect::<Vec<_>>();
    let a = noise_csv(&curves(run(1)));
    assert_eq!(a, noise_csv(&curves(run(4))));
    assert_eq!(noise_csv(&parse_noise_csv(&a).unwrap()), a);
}
