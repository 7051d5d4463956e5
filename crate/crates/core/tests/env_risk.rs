use ifm_core::linalg;
use ifm_core::rng::{stream, Purpose};
use ifm_core::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

/// Composite Simpson rule on the standard normal density.
fn phi_quadrature(t: f64) -> f64 {
    let (a, n) = (-40.0f64, 200_000usize);
    let h = (t - a) / n as f64;
    let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) + f(t);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn small_spec(seed: u64, r: usize, d_s: usize) -> ModelSpec {
    let mut g = stream(seed, Purpose::Instance, 0);
    let mu1 = linalg::gaussian_vector(r, &mut g);
    let a = linalg::gaussian_matrix(r, r, &mut g);
    let sigma1 = &a * a.transpose() + DMatrix::identity(r, r);
    ModelSpec::new(r, d_s, mu1, sigma1, None, 0.0, seed).unwrap().with_random_mixing()
}

/// Accuracy by direct simulation of the latent model, without the library sampler.
fn monte_carlo_accuracy(clf: &LinearClassifier, spec: &ModelSpec, env: &EnvParams, n: usize, seed: u64) -> f64 {
    let mut g = stream(seed, Purpose::MonteCarlo, 0);
    let l1 = spec.sigma1.clone().cholesky().unwrap().l();
    let l2 = env.sigma2.clone().cholesky().unwrap().l();
    let sign2 = if env.flipped { -1.0 } else { 1.0 };
    let mut hits = 0usize;
    for _ in 0..n {
        let y: f64 = if g.random::<bool>() { 1.0 } else { -1.0 };
        let e1 = DVector::from_fn(spec.r, |_, _| g.sample::<f64, _>(StandardNormal));
        let e2 = DVector::from_fn(spec.d_s, |_, _| g.sample::<f64, _>(StandardNormal));
        let z1 = &spec.mu1 * y + &l1 * e1;
        let z2 = &env.mu2 * (y * sign2) + &l2 * e2;
        let x = spec.invariant_block() * z1 + spec.spurious_block() * z2;
        if clf.v.dot(&x) * y > 0.0 {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

#[test]
fn cdf_matches_quadrature() {
    for &t in &[-6.0, -3.2, -1.0, -0.25, 0.0, 0.4, 1.0, 1.7320508, 2.5, 5.0] {
        let q = phi_quadrature(t);
        assert!((standard_normal_cdf(t) - q).abs() < 1e-10, "t = {t}: {} vs {q}", standard_normal_cdf(t));
    }
}

#[test]
fn analytic_accuracy_matches_simulation() {
    let n = 40_000;
    let bound = 4.0 * (0.25 / n as f64).sqrt();
    for seed in 0..6u64 {
        let spec = small_spec(seed, 2, 5);
        let envs = sample_environments(&spec, 2, &EnvSampler::gaussian(2.0)).unwrap();
        let mut g = stream(seed, Purpose::Init, 1);
        let clf = LinearClassifier::new(linalg::gaussian_vector(spec.d(), &mut g));
        for env in [envs[0].clone(), flip_test_environment(&envs[1]).unwrap()] {
            let a = zero_one_accuracy(&clf, &spec, &env);
            let m = monte_carlo_accuracy(&clf, &spec, &env, n, seed * 10 + env.index as u64);
            assert!((a - m).abs() <= bound, "seed {seed}: analytic {a} vs simulated {m}");
        }
    }
}

#[test]
fn oracle_accuracy_is_phi_of_margin() {
    let spec = ModelSpec::gaussian_default(1);
    assert!((spec.oracle_accuracy() - standard_normal_cdf(3f64.sqrt())).abs() < 1e-15);
    assert!((spec.oracle_accuracy() - 0.9583677).abs() < 1e-6);
}

#[test]
fn zero_classifier_is_chance() {
    let spec = ModelSpec::gaussian_default(2);
    let env = sample_environments(&spec, 1, &EnvSampler::default()).unwrap().remove(0);
    assert_eq!(zero_one_accuracy(&LinearClassifier::new(DVector::zeros(35)), &spec, &env), 0.5);
}

#[test]
fn flipping_twice_is_rejected() {
    let spec = ModelSpec::gaussian_default(3);
    let env = sample_environments(&spec, 1, &EnvSampler::default()).unwrap().remove(0);
    let f = flip_test_environment(&env).unwrap();
    assert!(f.flipped);
    assert_eq!(f.mu2, env.mu2);
    assert_eq!(flip_test_environment(&f), Err(Error::AlreadyFlipped(0)));
}

#[test]
fn invariant_classifier_sees_no_flip() {
    let spec = small_spec(4, 3, 6);
    let env = sample_environments(&spec, 1, &EnvSampler::default()).unwrap().remove(0);
    let w = oracle_w_star(&spec).unwrap().classifier();
    let a = zero_one_accuracy(&w, &spec, &env);
    let b = zero_one_accuracy(&w, &spec, &flip_test_environment(&env).unwrap());
    assert!((a - b).abs() < 1e-12);
    assert!((a - spec.oracle_accuracy()).abs() < 1e-9);
}

#[test]
fn estimated_moments_approach_population() {
    let spec = small_spec(5, 2, 3);
    let env = sample_environments(&spec, 1, &EnvSampler::gaussian(1.0)).unwrap().remove(0);
    let data = sample_dataset(&spec, &env, 200_000, &mut stream(5, Purpose::TrainData, 0)).unwrap();
    let est = estimate_moments(&data).unwrap();
    let pop = analytic_moments(&spec, &env);
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm();
    assert!((&est.mean_pos - &pop.mean_pos).norm() < 0.05 * pop.mean_pos.norm().max(1.0));
    assert!(rel(&est.second_pos, &pop.second_pos) < 0.03);
    assert!(rel(&est.second_neg, &pop.second_neg) < 0.03);
}

#[test]
fn empirical_accuracy_of_sample_tracks_analytic() {
    let spec = ModelSpec::gaussian_default(6);
    let env = sample_environments(&spec, 1, &EnvSampler::default()).unwrap().remove(0);
    let clf = oracle_w_star(&spec).unwrap().classifier();
    let data = sample_dataset(&spec, &env, 100_000, &mut stream(6, Purpose::TestData, 0)).unwrap();
    let emp = empirical_accuracy(&clf, &data).unwrap();
    assert!((emp - spec.oracle_accuracy()).abs() < 3.0 * (0.25f64 / 1e5).sqrt());
}

#[test]
fn missing_class_is_reported() {
    let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let data = Dataset { x, y: DVector::from_vec(vec![1.0, 1.0]) };
    assert_eq!(estimate_moments(&data).unwrap_err(), Error::MissingClass(-1));
}

#[test]
fn environments_are_reproducible_and_distinct() {
    let spec = ModelSpec::gaussian_default(11);
    let a = sample_environments(&spec, 4, &EnvSampler::default()).unwrap();
    let b = sample_environments(&spec, 4, &EnvSampler::default()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].mu2, a[1].mu2);
    let longer = sample_environments(&spec, 6, &EnvSampler::default()).unwrap();
    assert_eq!(&longer[..4], &a[..]);
}

#[test]
fn fixed_norm_mean_has_that_norm() {
    let spec = ModelSpec::gaussian_default(12);
    let sampler = EnvSampler { mean: SpuriousMean::FixedNorm { norm: 3.0 }, ..Default::default() };
    for env in sample_environments(&spec, 5, &sampler).unwrap() {
        assert!((env.mu2.norm() - 3.0).abs() < 1e-12);
    }
}

#[test]
fn bias_above_bound_is_rejected() {
    let spec = ModelSpec::new(1, 2, DVector::from_element(1, 1.0), DMatrix::identity(1, 1), None, 1.0, 0).unwrap();
    let sampler = EnvSampler { bias: Some(DMatrix::identity(2, 2) * 2.0), ..Default::default() };
    let err = sample_environment(&spec, 0, &sampler, &mut stream(0, Purpose::EnvParams, 0)).unwrap_err();
    assert!(matches!(err, Error::BiasBound { .. }));
    let asym = EnvSampler { bias: Some(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.5])), ..Default::default() };
    assert!(matches!(sample_environment(&spec, 0, &asym, &mut stream(0, Purpose::EnvParams, 0)), Err(Error::NotSymmetric(_))));
}

#[test]
fn spec_rejects_bad_shapes() {
    let err = ModelSpec::new(2, 3, DVector::zeros(3), DMatrix::identity(2, 2), None, 0.0, 0).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch(_)));
    let err = ModelSpec::new(2, 3, DVector::zeros(2), -DMatrix::identity(2, 2), None, 0.0, 0).unwrap_err();
    assert!(matches!(err, Error::NotSpd(_)));
    let singular = DMatrix::zeros(5, 5);
    assert!(ModelSpec::new(2, 3, DVector::zeros(2), DMatrix::identity(2, 2), Some(singular), 0.0, 0).is_err());
}

#[test]
fn json_and_csv_roundtrips() {
    let spec = small_spec(13, 2, 4);
    let envs = sample_environments(&spec, 3, &EnvSampler::default()).unwrap();
    let set = EnvironmentSet { spec: spec.clone(), environments: envs.clone() };
    assert_eq!(EnvironmentSet::from_json(&set.to_json().unwrap()).unwrap(), set);

    let data = sample_dataset(&spec, &envs[0], 50, &mut stream(13, Purpose::TrainData, 0)).unwrap();
    let mut buf = Vec::new();
    data.write_csv(&mut buf).unwrap();
    let back = Dataset::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accuracy_is_invariant_to_positive_scale(seed in 0u64..500, scale in 1e-6f64..1e6) {
        let spec = small_spec(seed, 2, 4);
        let env = sample_environments(&spec, 1, &EnvSampler::default()).unwrap().remove(0);
        let v = linalg::gaussian_vector(spec.d(), &mut stream(seed, Purpose::Init, 0));
        let a = zero_one_accuracy(&LinearClassifier::new(v.clone()), &spec, &env);
        let b = zero_one_accuracy(&LinearClassifier::new(v * scale), &spec, &env);
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn negating_classifier_mirrors_accuracy(seed in 0u64..500) {
        let spec = small_spec(seed, 2, 3);
        let env = sample_environments(&spec, 1, &EnvSampler::default()).unwrap().remove(0);
        let v = linalg::gaussian_vector(spec.d(), &mut stream(seed, Purpose::Init, 0));
        let a = zero_one_accuracy(&LinearClassifier::new(v.clone()), &spec, &env);
        let b = zero_one_accuracy(&LinearClassifier::new(-v), &spec, &env);
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn cdf_is_monotone_and_symmetric(t in -8.0f64..8.0, dt in 1e-6f64..1.0) {
        prop_assert!(standard_normal_cdf(t + dt) >= standard_normal_cdf(t));
        prop_assert!((standard_normal_cdf(t) + standard_normal_cdf(-t) - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn sampled_covariances_are_spd(seed in 0u64..200) {
        let spec = small_spec(seed, 1, 4);
        for env in sample_environments(&spec, 2, &EnvSampler::default()).unwrap() {
            prop_assert!(linalg::min_eigenvalue(&env.sigma2) > 0.0);
            prop_assert!(linalg::symmetry_error(&env.sigma2) <= 1e-12 * env.sigma2.amax());
        }
    }
}
