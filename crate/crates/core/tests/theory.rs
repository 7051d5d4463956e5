use ifm_core::experiments::{erm_instance, ErmBattery};
use ifm_core::linalg;
use ifm_core::rng::{derive_seed, stream, Purpose};
use ifm_core::theory_checks::*;
use ifm_core::*;
use nalgebra::{DMatrix, DVector};

fn ellipsoids(seed: u64, dim: usize) -> EllipsoidSystem {
    let spec = ModelSpec::new(1, dim, DVector::from_element(1, 1.0), DMatrix::identity(1, 1), None, 0.0, seed).unwrap();
    EllipsoidSystem::from_envs(&sample_environments(&spec, dim, &EnvSampler::default()).unwrap()).unwrap()
}

/// Walks the first ellipse at angular resolution `1e-4` and reports whether the
/// second equation changes sign away from the origin.
fn grid_has_nontrivial_root(sys: &EllipsoidSystem) -> bool {
    let steps = (2.0 * std::f64::consts::PI / 1e-4) as usize;
    let mut prev: Option<f64> = None;
    for i in 0..=steps {
        let t = i as f64 * 1e-4;
        let x = sys.ellipsoid_point(&DVector::from_vec(vec![t.cos(), t.sin()]));
        if x.norm() < 1e-3 {
            prev = None;
            continue;
        }
        let g = x.dot(&(&sys.a_list[1] * &x)) - sys.b_list[1].dot(&x);
        if let Some(p) = prev {
            if p * g < 0.0 {
                return true;
            }
        }
        prev = Some(g);
    }
    false
}

#[test]
fn ellipsoid_points_lie_on_the_first_ellipsoid() {
    let sys = ellipsoids(1, 3);
    let mut g = stream(1, Purpose::Init, 0);
    for _ in 0..50 {
        let c = linalg::gaussian_vector(3, &mut g).normalize();
        let x = sys.ellipsoid_point(&c);
        let e0 = x.dot(&(&sys.a_list[0] * &x)) - sys.b_list[0].dot(&x);
        assert!(e0.abs() < 1e-10 * (1.0 + x.norm_squared()));
    }
}

#[test]
fn two_dimensional_roots_agree_with_grid_oracle() {
    let mut disagreements = 0;
    for i in 0..150u64 {
        let sys = ellipsoids(derive_seed(77, &[i]), 2);
        let sol = irm_spurious_solution_find(&sys, &RootSearchConfig::default(), &mut stream(i, Purpose::Restart, 0));
        let grid = grid_has_nontrivial_root(&sys);
        if sol.success {
            assert!(sol.residual <= 1e-8 && sol.u.norm() >= 1e-4);
        }
        if sol.success != grid {
            disagreements += 1;
        }
    }
    assert!(disagreements <= 2, "{disagreements} disagreements with the grid");
}

#[test]
fn solutions_are_isolated_and_give_invariant_weights() {
    let mut solved = 0;
    for i in 0..40u64 {
        let sys = ellipsoids(derive_seed(78, &[i]), 3);
        let sol = irm_spurious_solution_find(&sys, &RootSearchConfig::default(), &mut stream(i, Purpose::Restart, 0));
        if !sol.success {
            continue;
        }
        solved += 1;
        for c in [0.5, 0.9, 1.1, 2.0] {
            assert!(sys.residual(&(&sol.u * c)) > 1e-6, "scaled root still solves");
        }
        let w = sys.induced_weights(&sol.u);
        assert!(w.iter().all(|x| (x - 1.0).abs() < 1e-6), "{w:?}");
        assert!(sol.weight_spread < 1e-6);
    }
    assert!(solved >= 38);
}

#[test]
fn curve_tracing_alone_finds_roots() {
    let cfg = RootSearchConfig { starts: 0, ..Default::default() };
    for dim in [2, 3, 4] {
        let solved = (0..200u64)
            .filter(|&i| irm_spurious_solution_find(&ellipsoids(derive_seed(79, &[dim as u64, i]), dim), &cfg, &mut stream(i, Purpose::Restart, 0)).success)
            .count();
        assert!(solved >= 196, "d={dim}: {solved}/200");
    }
}

#[test]
fn fewer_ellipsoids_than_dimensions() {
    let mut g = stream(80, Purpose::Init, 0);
    for _ in 0..20 {
        let a: Vec<_> = (0..2)
            .map(|_| {
                let m = DMatrix::from_fn(4, 4, |_, _| linalg::gaussian_vector(1, &mut g)[0]);
                &m * m.transpose() + DMatrix::identity(4, 4)
            })
            .collect();
        let b: Vec<_> = (0..2).map(|_| linalg::gaussian_vector(4, &mut g)).collect();
        let sys = EllipsoidSystem::new(a, b).unwrap();
        let sol = irm_spurious_solution_find(&sys, &RootSearchConfig { starts: 0, ..Default::default() }, &mut g);
        assert!(sol.success && sol.residual <= 1e-8 && sol.u.norm() >= 1e-4, "{sol:?}");
    }
}

#[test]
fn dependent_means_are_rejected() {
    let a = DMatrix::identity(2, 2);
    let b1 = DVector::from_vec(vec![1.0, 0.5]);
    let err = EllipsoidSystem::new(vec![a.clone(), a.clone() * 2.0], vec![b1.clone(), b1 * 2.0]).unwrap_err();
    assert!(matches!(err, Error::RankDeficient(_)));
    let not_spd = EllipsoidSystem::new(vec![a.clone(), -a.clone()], vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])]);
    assert!(not_spd.is_err());
    let too_many = EllipsoidSystem::new(vec![a.clone(); 3], vec![DVector::from_vec(vec![1.0, 0.0]); 3]);
    assert!(too_many.is_err());
}

fn isotropic_instance(seed: u64, noise: f64) -> (ModelSpec, Vec<EnvParams>) {
    let (spec, sampler) = erm_instance(&ErmBattery::default(), noise, seed).unwrap();
    let envs = sample_environments(&spec, 5, &sampler).unwrap();
    (spec, envs)
}

#[test]
fn invariant_predictor_never_violates() {
    let (spec, envs) = isotropic_instance(5, 0.0);
    let w = oracle_w_star(&spec).unwrap().classifier();
    let v = erm_lower_bound_check(&w, &spec, &envs).unwrap();
    assert!(v.hypotheses_hold);
    assert!(!v.applicable);
    assert!(!v.violated);
    assert!((v.threshold - standard_normal_cdf(0.6)).abs() < 1e-15);
}

#[test]
fn spurious_classifier_fails_every_flipped_environment() {
    let (spec, envs) = isotropic_instance(6, 0.0);
    // beta2 = sum of the spurious means has positive margin on each (they are nearly orthogonal in 32 dimensions).
    let mut beta = DVector::zeros(spec.d());
    let sum: DVector<f64> = envs.iter().fold(DVector::zeros(spec.d_s), |acc, e| acc + &e.mu2);
    assert!(envs.iter().all(|e| sum.dot(&e.mu2) > 0.0));
    beta.rows_mut(spec.r, spec.d_s).copy_from(&sum);
    beta.rows_mut(0, spec.r).copy_from(&spec.mu1);
    let clf = LinearClassifier::new(spec.s.clone() * beta);
    let v = erm_lower_bound_check(&clf, &spec, &envs).unwrap();
    assert!(v.applicable, "gamma_min {} threshold {}", v.gamma_min, v.threshold);
    assert!(v.test_accuracies.iter().all(|&a| a < 0.5));
    assert!(!v.violated);
}

#[test]
fn unflipped_evaluation_is_flagged() {
    let (spec, envs) = isotropic_instance(7, 0.0);
    let mut beta = DVector::zeros(spec.d());
    let sum: DVector<f64> = envs.iter().fold(DVector::zeros(spec.d_s), |acc, e| acc + &e.mu2);
    beta.rows_mut(spec.r, spec.d_s).copy_from(&sum);
    let clf = LinearClassifier::new(spec.s.clone() * beta);
    let v = erm_lower_bound_check_against(&clf, &spec, &envs, &envs).unwrap();
    assert!(v.violated);
}

#[test]
fn non_isotropic_inputs_are_not_applicable() {
    let spec = ModelSpec::gaussian_default(8);
    let envs = sample_environments(&spec, 3, &EnvSampler::default()).unwrap();
    let w = oracle_w_star(&spec).unwrap().classifier();
    let v = erm_lower_bound_check(&w, &spec, &envs).unwrap();
    assert!(!v.hypotheses_hold);
    assert!(v.reason.is_some());
    assert!(!v.violated);
}

#[test]
fn shrink_inequality_arithmetic() {
    assert!(shrink_check_dims(&[35, 3], 3, 2.0).unwrap().passed);
    let stall = shrink_check_dims(&[35, 35, 3], 3, 2.0).unwrap();
    assert_eq!(stall.first_violation, Some(1));
    let slow = shrink_check_dims(&[35, 20, 3], 3, 2.0).unwrap();
    assert_eq!(slow.first_violation, Some(1));
    assert!(shrink_check_dims(&[35, 18, 10, 6, 4, 3], 3, 2.0).unwrap().passed);
    assert!(shrink_check_dims(&[35], 3, 1.0).is_err());
}

#[test]
fn isotropic_ifm_rounds_satisfy_the_shrink_rate() {
    for seed in 0..5 {
        let spec = ModelSpec::gaussian_default(seed).with_random_mixing();
        let envs = sample_environments(&spec, 14, &EnvSampler::default()).unwrap();
        let m: Vec<_> = envs.iter().map(|e| analytic_moments(&spec, e)).collect();
        let cfg = IfmConfig { matcher: MatcherConfig { method: MatchMethod::Isotropic, ..Default::default() }, ..Default::default() };
        let pred = ifm_run(IfmInput::Moments(&m), &cfg, &mut stream(seed, Purpose::Init, 0)).unwrap();
        let stack = pred.stack.as_ref().unwrap();
        let v = ifm_shrink_check(stack, 3, 2.0).unwrap();
        assert!(v.passed, "{:?}", v.dims);
        // Every round keeps the invariant block at full rank.
        assert_eq!(linalg::numerical_rank(&(&stack.composed * spec.invariant_block()), 1e-8), 3);
        assert!(spurious_leak(&stack.composed, &spec).unwrap() < 1e-6);
    }
}

#[test]
fn random_directions_leak_like_the_uniform_sphere() {
    let spec = ModelSpec::gaussian_default(9).with_random_mixing();
    let mut g = stream(9, Purpose::MonteCarlo, 0);
    let n = 4000;
    let mean: f64 = (0..n).map(|_| spurious_leak_vector(&linalg::gaussian_vector(35, &mut g).normalize(), &spec).unwrap()).sum::<f64>() / n as f64;
    // E sqrt(B) for B ~ Beta(16, 3/2), by a separate simulation of chi-square ratios.
    let mut h = stream(10, Purpose::MonteCarlo, 0);
    let oracle: f64 = (0..20_000)
        .map(|_| {
            let z = linalg::gaussian_vector(35, &mut h);
            let tail: f64 = z.rows(3, 32).norm_squared();
            (tail / z.norm_squared()).sqrt()
        })
        .sum::<f64>()
        / 20_000.0;
    assert!((mean - oracle).abs() < 0.01, "{mean} vs {oracle}");
    assert!((oracle - (32f64 / 35.0).sqrt()).abs() < 0.01);
}

#[test]
fn leak_checks_dimensions() {
    let spec = ModelSpec::gaussian_default(1);
    assert!(spurious_leak(&DMatrix::zeros(2, 5), &spec).is_err());
    assert_eq!(spurious_leak_vector(&oracle_w_star(&spec).unwrap().v, &spec).unwrap(), 0.0);
}
