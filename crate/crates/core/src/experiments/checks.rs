//! Batteries over the theory checks, reported as one JSON document.

use crate::algorithms::{erm_fit, ifm_run, IfmConfig, IfmInput, PartitionPolicy, RankMode};
use crate::env_model::{analytic_moments, sample_dataset, sample_environments, EnvSampler, ModelSpec, SpuriousMean};
use crate::error::{Error, Result};
use crate::optim::OptSettings;
use crate::rng::{derive_seed, stream, Purpose};
use crate::subspace_matcher::{MatchMethod, MatcherConfig};
use crate::theory_checks::{
    erm_lower_bound_check_against, irm_spurious_solution_find, shrink_check_dims, EllipsoidSystem, RootSearchConfig,
};
use crate::{Mat, Vector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Deliberate defects used to confirm the harness can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultInjection {
    /// Score ERM on the training environments instead of their flipped copies.
    UnflippedTest,
    /// Replace every IFM dimension trace by one whose first round does not shrink.
    NonShrinkingStack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErmBattery {
    pub seeds: usize,
    pub envs: usize,
    pub samples: usize,
    pub r: usize,
    pub d_s: usize,
    pub mu1_norm: f64,
    pub mu2_norm: f64,
    /// Each value is one run of the battery with `G` scaled by it; `0` is the isotropic model.
    pub noise_scales: Vec<f64>,
    pub optimizer: OptSettings,
}

impl Default for ErmBattery {
    fn default() -> Self {
        ErmBattery {
            seeds: 100,
            envs: 5,
            samples: 10_000,
            r: 3,
            d_s: 32,
            mu1_norm: 0.3,
            mu2_norm: 3.0,
            noise_scales: vec![0.0, 1.0],
            optimizer: OptSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrmBattery {
    pub dims: Vec<usize>,
    pub instances: usize,
    pub root: RootSearchConfig,
    pub min_success_rate: f64,
    pub max_weight_spread: f64,
}

impl Default for IrmBattery {
    fn default() -> Self {
        IrmBattery { dims: vec![2, 3], instances: 1000, root: RootSearchConfig::default(), min_success_rate: 0.99, max_weight_spread: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShrinkBattery {
    pub seeds: usize,
    pub c: f64,
    /// Environments for the null-space matcher runs.
    pub spectral_envs: usize,
    /// Environments for the exact isotropic matcher runs, which shrink more slowly.
    pub isotropic_envs: usize,
}

impl Default for ShrinkBattery {
    fn default() -> Self {
        ShrinkBattery { seeds: 20, c: 2.0, spectral_envs: 6, isotropic_envs: 14 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckConfig {
    pub seed: u64,
    pub erm: Option<ErmBattery>,
    pub irm: Option<IrmBattery>,
    pub shrink: Option<ShrinkBattery>,
    pub fault: Option<FaultInjection>,
}

impl CheckConfig {
    /// All three batteries with their default sizes.
    pub fn full(seed: u64) -> Self {
        CheckConfig { seed, erm: Some(ErmBattery::default()), irm: Some(IrmBattery::default()), shrink: Some(ShrinkBattery::default()), fault: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmReport {
    pub noise_scale: f64,
    pub instances: usize,
    pub hypotheses_hold: usize,
    pub applicable: usize,
    pub violated: usize,
    pub max_test_accuracy: f64,
    pub min_train_accuracy: f64,
    pub errors: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrmReport {
    pub dim: usize,
    pub instances: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub max_weight_spread: f64,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkReport {
    pub method: MatchMethod,
    pub envs: usize,
    pub runs: usize,
    pub violations: usize,
    pub max_rounds: usize,
    pub round_bound: usize,
    pub errors: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub seed: u64,
    pub fault: Option<FaultInjection>,
    pub erm: Vec<ErmReport>,
    pub irm: Vec<IrmReport>,
    pub shrink: Vec<ShrinkReport>,
}

impl CheckReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn run_checks(cfg: &CheckConfig) -> Result<CheckReport> {
    if cfg.erm.is_none() && cfg.irm.is_none() && cfg.shrink.is_none() {
        return Err(Error::NoChecksSelected);
    }
    let erm = match &cfg.erm {
        Some(b) => b.noise_scales.iter().map(|&s| erm_battery(b, s, derive_seed(cfg.seed, &[1, s.to_bits()]), cfg.fault)).collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let irm = match &cfg.irm {
        Some(b) => b.dims.iter().map(|&d| irm_battery(b, d, derive_seed(cfg.seed, &[2, d as u64]))).collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let shrink = match &cfg.shrink {
        Some(b) => vec![
            shrink_battery(b, MatchMethod::Spectral, b.spectral_envs, derive_seed(cfg.seed, &[3, 0]), cfg.fault)?,
            shrink_battery(b, MatchMethod::Isotropic, b.isotropic_envs, derive_seed(cfg.seed, &[3, 1]), cfg.fault)?,
        ],
        None => Vec::new(),
    };
    let passed = erm.iter().all(|r| r.passed) && irm.iter().all(|r| r.passed) && shrink.iter().all(|r| r.passed);
    Ok(CheckReport { passed, seed: cfg.seed, fault: cfg.fault, erm, irm, shrink })
}

/// Isotropic instance: `Sigma1 = I`, `Sigma2 = I + (noise G)(noise G)'`, identity mixing.
pub fn erm_instance(b: &ErmBattery, noise_scale: f64, seed: u64) -> Result<(ModelSpec, EnvSampler)> {
    let mu1 = Vector::from_element(b.r, b.mu1_norm / (b.r as f64).sqrt());
    let spec = ModelSpec::new(b.r, b.d_s, mu1, Mat::identity(b.r, b.r), None, 1.0, seed)?;
    let sampler = EnvSampler { mean: SpuriousMean::FixedNorm { norm: b.mu2_norm }, bias: Some(Mat::identity(b.d_s, b.d_s)), noise_scale };
    Ok((spec, sampler))
}

fn erm_battery(b: &ErmBattery, noise_scale: f64, seed: u64, fault: Option<FaultInjection>) -> Result<ErmReport> {
    let verdicts: Vec<Result<_>> = (0..b.seeds)
        .into_par_iter()
        .map(|i| {
            let (spec, sampler) = erm_instance(b, noise_scale, derive_seed(seed, &[i as u64]))?;
            let train = sample_environments(&spec, b.envs, &sampler)?;
            let data = train
                .iter()
                .enumerate()
                .map(|(j, env)| sample_dataset(&spec, env, b.samples, &mut stream(spec.seed, Purpose::TrainData, j as u64)))
                .collect::<Result<Vec<_>>>()?;
            let clf = erm_fit(&data, &b.optimizer)?.classifier();
            let tests = match fault {
                Some(FaultInjection::UnflippedTest) => train.clone(),
                _ => train.iter().map(crate::env_model::flip_test_environment).collect::<Result<Vec<_>>>()?,
            };
            erm_lower_bound_check_against(&clf, &spec, &train, &tests)
        })
        .collect();
    let mut report = ErmReport {
        noise_scale,
        instances: b.seeds,
        hypotheses_hold: 0,
        applicable: 0,
        violated: 0,
        max_test_accuracy: f64::NEG_INFINITY,
        min_train_accuracy: f64::INFINITY,
        errors: Vec::new(),
        passed: false,
    };
    for v in verdicts {
        match v {
            Ok(v) => {
                report.hypotheses_hold += usize::from(v.hypotheses_hold);
                report.applicable += usize::from(v.applicable);
                report.violated += usize::from(v.violated);
                report.min_train_accuracy = report.min_train_accuracy.min(v.gamma_min);
                report.max_test_accuracy = v.test_accuracies.iter().copied().fold(report.max_test_accuracy, f64::max);
            }
            Err(e) => report.errors.push(e.to_string()),
        }
    }
    report.passed = report.violated == 0 && report.errors.is_empty();
    Ok(report)
}

fn irm_battery(b: &IrmBattery, dim: usize, seed: u64) -> Result<IrmReport> {
    if dim == 0 {
        return Err(Error::InvalidParameter("ellipsoid dimension must be at least 1".into()));
    }
    let outcomes: Vec<Option<(bool, f64)>> = (0..b.instances)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, &[i as u64]);
            let spec = ModelSpec::new(1, dim, Vector::from_element(1, 1.0), Mat::identity(1, 1), None, 0.0, s).ok()?;
            let envs = sample_environments(&spec, dim, &EnvSampler::default()).ok()?;
            let system = EllipsoidSystem::from_envs(&envs).ok()?;
            let sol = irm_spurious_solution_find(&system, &b.root, &mut stream(s, Purpose::Restart, 0));
            Some((sol.success, sol.weight_spread))
        })
        .collect();
    let skipped = outcomes.iter().filter(|o| o.is_none()).count();
    let solved: Vec<f64> = outcomes.iter().flatten().filter(|(ok, _)| *ok).map(|(_, s)| *s).collect();
    let tried = b.instances - skipped;
    let rate = if tried == 0 { 0.0 } else { solved.len() as f64 / tried as f64 };
    let spread = solved.iter().copied().fold(0.0, f64::max);
    Ok(IrmReport {
        dim,
        instances: b.instances,
        successes: solved.len(),
        success_rate: rate,
        max_weight_spread: spread,
        skipped,
        passed: tried > 0 && rate >= b.min_success_rate && spread <= b.max_weight_spread,
    })
}

fn shrink_battery(b: &ShrinkBattery, method: MatchMethod, envs: usize, seed: u64, fault: Option<FaultInjection>) -> Result<ShrinkReport> {
    let outcomes: Vec<Result<Vec<usize>>> = (0..b.seeds)
        .into_par_iter()
        .map(|i| {
            let spec = ModelSpec::gaussian_default(derive_seed(seed, &[i as u64]));
            let train = sample_environments(&spec, envs, &EnvSampler::default())?;
            let moments: Vec<_> = train.iter().map(|e| analytic_moments(&spec, e)).collect();
            let cfg = IfmConfig {
                rank: RankMode::Known { r: spec.r },
                partition: PartitionPolicy::Consecutive { group_size: 2 },
                matcher: MatcherConfig { method, ..Default::default() },
                ..Default::default()
            };
            let pred = ifm_run(IfmInput::Moments(&moments), &cfg, &mut stream(spec.seed, Purpose::Cell, 0))?;
            let mut dims = pred.diagnostics.round_dims;
            if fault == Some(FaultInjection::NonShrinkingStack) {
                dims.insert(1, dims[0]);
            }
            Ok(dims)
        })
        .collect();
    let mut report = ShrinkReport { method, envs, runs: b.seeds, violations: 0, max_rounds: 0, round_bound: 0, errors: Vec::new(), passed: false };
    for o in outcomes {
        match o.and_then(|dims| shrink_check_dims(&dims, 3, b.c)) {
            Ok(v) => {
                report.violations += usize::from(!v.passed);
                report.max_rounds = report.max_rounds.max(v.rounds);
                report.round_bound = v.round_bound;
            }
            Err(e) => report.errors.push(e.to_string()),
        }
    }
    report.passed = report.violations == 0 && report.errors.is_empty();
    Ok(report)
}
