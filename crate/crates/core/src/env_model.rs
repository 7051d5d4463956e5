//! Problem instances for the two-block Gaussian model.
//!
//! Latents are `Z = [Z1; Z2]` with `Z1 | Y ~ N(Y mu1, Sigma1)` shared by every
//! environment and `Z2 | Y ~ N(Y mu2_e, Sigma2_e)` specific to environment `e`.
//! Observations are `X = S Z`. A test environment is a training environment with
//! the sign of its spurious mean flipped.

use crate::error::{Error, Result};
use crate::gaussian_risk::standard_normal_cdf;
use crate::linalg::{self, serde_rows, serde_vec};
use crate::rng::{self, Purpose};
use crate::{Mat, Vector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub r: usize,
    pub d_s: usize,
    #[serde(with = "serde_vec")]
    pub mu1: Vector,
    #[serde(with = "serde_rows")]
    pub sigma1: Mat,
    /// Mixing matrix, `d x d`.
    #[serde(with = "serde_rows")]
    pub s: Mat,
    /// Bound on the squared spectral norm of every bias matrix.
    pub d_bound: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(r: usize, d_s: usize, mu1: Vector, sigma1: Mat, s: Option<Mat>, d_bound: f64, seed: u64) -> Result<Self> {
        let d = r + d_s;
        let spec = ModelSpec { r, d_s, mu1, sigma1, s: s.unwrap_or_else(|| Mat::identity(d, d)), d_bound, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// `r = 3`, `d_s = 32`, `mu1 = 1`, `Sigma1 = I`, identity mixing, no bias allowance.
    pub fn gaussian_default(seed: u64) -> Self {
        Self::new(3, 32, Vector::from_element(3, 1.0), Mat::identity(3, 3), None, 0.0, seed)
            .expect("default spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let (r, d) = (self.r, self.d());
        if r == 0 {
            return Err(Error::InvalidParameter("r must be at least 1".into()));
        }
        if self.mu1.len() != r {
            return Err(Error::DimensionMismatch(format!("mu1 has length {}, expected {r}", self.mu1.len())));
        }
        if self.sigma1.shape() != (r, r) {
            return Err(Error::DimensionMismatch(format!("Sigma1 is {:?}, expected {r}x{r}", self.sigma1.shape())));
        }
        linalg::require_spd(&self.sigma1, "Sigma1")?;
        if self.s.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!("S is {:?}, expected {d}x{d}", self.s.shape())));
        }
        if linalg::numerical_rank(&self.invariant_block(), 1e-12) < r {
            return Err(Error::RankDeficient("left r columns of S".into()));
        }
        if !(self.d_bound >= 0.0) {
            return Err(Error::InvalidParameter("D must be non-negative".into()));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.r + self.d_s
    }

    /// Replace `S` by a Haar-random orthogonal matrix drawn from the spec's seed.
    pub fn with_random_mixing(mut self) -> Self {
        let mut g = rng::stream(self.seed, Purpose::Mixing, 0);
        self.s = linalg::random_orthogonal(self.d(), &mut g);
        self
    }

    /// `A`: the left `r` columns of `S`.
    pub fn invariant_block(&self) -> Mat {
        self.s.columns(0, self.r).clone_owned()
    }

    /// `B`: the right `d_s` columns of `S`.
    pub fn spurious_block(&self) -> Mat {
        self.s.columns(self.r, self.d_s).clone_owned()
    }

    /// `sqrt(mu1' Sigma1^-1 mu1)`, the margin of the best invariant classifier.
    pub fn invariant_margin(&self) -> f64 {
        let sol = self.sigma1.clone().cholesky().expect("validated SPD").solve(&self.mu1);
        self.mu1.dot(&sol).max(0.0).sqrt()
    }

    /// Accuracy of the invariant predictor on every environment.
    pub fn oracle_accuracy(&self) -> f64 {
        standard_normal_cdf(self.invariant_margin())
    }
}

/// Law of the spurious class mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum SpuriousMean {
    /// `mu2 ~ N(0, scale * I)`.
    Gaussian { scale: f64 },
    /// Uniformly random direction with a fixed norm.
    FixedNorm { norm: f64 },
}

/// How environments are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSampler {
    pub mean: SpuriousMean,
    /// Deterministic bias `Sigma2_bar`; `None` means zero.
    pub bias: Option<Mat>,
    /// Multiplier on `G`. Zero turns the model into a pure-bias one.
    pub noise_scale: f64,
}

impl Default for EnvSampler {
    fn default() -> Self {
        EnvSampler { mean: SpuriousMean::Gaussian { scale: 10.0 }, bias: None, noise_scale: 1.0 }
    }
}

impl EnvSampler {
    pub fn gaussian(mu2_scale: f64) -> Self {
        EnvSampler { mean: SpuriousMean::Gaussian { scale: mu2_scale }, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub index: usize,
    #[serde(with = "serde_vec")]
    pub mu2: Vector,
    #[serde(with = "serde_rows")]
    pub sigma2_bar: Mat,
    #[serde(with = "serde_rows")]
    pub g: Mat,
    #[serde(with = "serde_rows")]
    pub sigma2: Mat,
    pub flipped: bool,
}

impl EnvParams {
    /// `-1` for test environments, `+1` otherwise.
    pub fn spurious_sign(&self) -> f64 {
        if self.flipped {
            -1.0
        } else {
            1.0
        }
    }
}

pub fn sample_environment<R: Rng + ?Sized>(spec: &ModelSpec, index: usize, sampler: &EnvSampler, rng: &mut R) -> Result<EnvParams> {
    let ds = spec.d_s;
    let mu2 = match sampler.mean {
        SpuriousMean::Gaussian { scale } => {
            if !(scale > 0.0) {
                return Err(Error::InvalidParameter("mu2_scale must be positive".into()));
            }
            linalg::gaussian_vector(ds, rng) * scale.sqrt()
        }
        SpuriousMean::FixedNorm { norm } => {
            let mut v = linalg::gaussian_vector(ds, rng);
            while v.norm() == 0.0 {
                v = linalg::gaussian_vector(ds, rng);
            }
            v.normalize() * norm
        }
    };
    let g = linalg::gaussian_matrix(ds, ds, rng) * sampler.noise_scale;
    let sigma2_bar = match &sampler.bias {
        None => Mat::zeros(ds, ds),
        Some(b) => {
            if b.shape() != (ds, ds) {
                return Err(Error::DimensionMismatch(format!("bias is {:?}, expected {ds}x{ds}", b.shape())));
            }
            if linalg::symmetry_error(b) > 1e-12 * b.amax().max(1.0) {
                return Err(Error::NotSymmetric("bias matrix".into()));
            }
            if linalg::min_eigenvalue(b) < -1e-12 * b.amax().max(1.0) {
                return Err(Error::NotSpd("bias matrix is not positive semidefinite".into()));
            }
            let norm = linalg::sym_spectral_norm(b);
            if norm * norm > spec.d_bound * (1.0 + 1e-12) {
                return Err(Error::BiasBound { norm_sq: norm * norm, bound: spec.d_bound });
            }
            b.clone()
        }
    };
    let sigma2 = &sigma2_bar + &g * g.transpose();
    if !(linalg::min_eigenvalue(&sigma2) > 0.0) {
        return Err(Error::NotSpd(format!("Sigma2 of environment {index}")));
    }
    Ok(EnvParams { index, mu2, sigma2_bar, g, sigma2, flipped: false })
}

/// Environments `0..count`, each from its own stream under `spec.seed`.
pub fn sample_environments(spec: &ModelSpec, count: usize, sampler: &EnvSampler) -> Result<Vec<EnvParams>> {
    (0..count)
        .map(|i| sample_environment(spec, i, sampler, &mut rng::stream(spec.seed, Purpose::EnvParams, i as u64)))
        .collect()
}

pub fn flip_test_environment(env: &EnvParams) -> Result<EnvParams> {
    if env.flipped {
        return Err(Error::AlreadyFlipped(env.index));
    }
    Ok(EnvParams { flipped: true, ..env.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MomentSource {
    Analytic,
    Estimated { n: usize },
}

/// Class-conditional first and uncentered second moments in observation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    #[serde(with = "serde_vec")]
    pub mean_pos: Vector,
    #[serde(with = "serde_rows")]
    pub second_pos: Mat,
    #[serde(with = "serde_vec")]
    pub mean_neg: Vector,
    #[serde(with = "serde_rows")]
    pub second_neg: Mat,
    pub source: MomentSource,
}

impl MomentSet {
    pub fn dim(&self) -> usize {
        self.mean_pos.len()
    }

    pub fn cov_pos(&self) -> Mat {
        &self.second_pos - &self.mean_pos * self.mean_pos.transpose()
    }

    pub fn cov_neg(&self) -> Mat {
        &self.second_neg - &self.mean_neg * self.mean_neg.transpose()
    }

    /// Moments of `U X`.
    pub fn project(&self, u: &Mat) -> MomentSet {
        MomentSet {
            mean_pos: u * &self.mean_pos,
            second_pos: u * &self.second_pos * u.transpose(),
            mean_neg: u * &self.mean_neg,
            second_neg: u * &self.second_neg * u.transpose(),
            source: self.source,
        }
    }
}

pub fn analytic_moments(spec: &ModelSpec, env: &EnvParams) -> MomentSet {
    let (r, d) = (spec.r, spec.d());
    let mut latent_mean = Vector::zeros(d);
    latent_mean.rows_mut(0, r).copy_from(&spec.mu1);
    latent_mean.rows_mut(r, spec.d_s).copy_from(&(&env.mu2 * env.spurious_sign()));
    let mut latent_cov = Mat::zeros(d, d);
    latent_cov.view_mut((0, 0), (r, r)).copy_from(&spec.sigma1);
    latent_cov.view_mut((r, r), (spec.d_s, spec.d_s)).copy_from(&env.sigma2);
    let mean_pos = &spec.s * latent_mean;
    let cov = linalg::symmetrize(&(&spec.s * latent_cov * spec.s.transpose()));
    let second = &cov + &mean_pos * mean_pos.transpose();
    MomentSet { mean_neg: -&mean_pos, second_neg: second.clone(), mean_pos, second_pos: second, source: MomentSource::Analytic }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Pos,
    Neg,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    pub fn from_sign(y: f64) -> Result<Self> {
        if y == 1.0 {
            Ok(Label::Pos)
        } else if y == -1.0 {
            Ok(Label::Neg)
        } else {
            Err(Error::Parse(format!("label must be +1 or -1, got {y}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: Vector,
    pub y: Label,
}

/// Samples from one environment; rows of `x` are observations, `y` holds +/-1.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Mat,
    pub y: Vector,
}

impl Dataset {
    pub fn from_samples(samples: &[LabeledSample]) -> Result<Self> {
        let d = samples.first().map_or(0, |s| s.x.len());
        if samples.iter().any(|s| s.x.len() != d) {
            return Err(Error::DimensionMismatch("samples of different lengths".into()));
        }
        let x = Mat::from_fn(samples.len(), d, |i, j| samples[i].x[j]);
        let y = Vector::from_iterator(samples.len(), samples.iter().map(|s| s.y.sign()));
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn sample(&self, i: usize) -> LabeledSample {
        LabeledSample { x: self.x.row(i).transpose(), y: if self.y[i] > 0.0 { Label::Pos } else { Label::Neg } }
    }

    /// Features mapped through `u` (rows of the result are `u x_i`).
    pub fn project(&self, u: &Mat) -> Dataset {
        Dataset { x: &self.x * u.transpose(), y: self.y.clone() }
    }

    /// CSV with columns `x_0..x_{d-1}, y`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x_{j}")).collect();
        header.push("y".into());
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(format!("{}", self.y[i] as i64));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut samples = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec.iter().map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| Error::Parse(e.to_string()))?;
            let (y, x) = vals.split_last().ok_or_else(|| Error::Parse("empty record".into()))?;
            samples.push(LabeledSample { x: Vector::from_column_slice(x), y: Label::from_sign(*y)? });
        }
        Dataset::from_samples(&samples)
    }
}

pub fn sample_dataset<R: Rng + ?Sized>(spec: &ModelSpec, env: &EnvParams, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    let (r, ds, d) = (spec.r, spec.d_s, spec.d());
    let l1 = spec.sigma1.clone().cholesky().ok_or_else(|| Error::NotSpd("Sigma1".into()))?.l();
    let l2 = env.sigma2.clone().cholesky().ok_or_else(|| Error::NotSpd(format!("Sigma2 of environment {}", env.index)))?.l();
    let mu2 = &env.mu2 * env.spurious_sign();
    let mut z = Mat::zeros(n, d);
    let mut y = Vector::zeros(n);
    let mut xi1 = Vector::zeros(r);
    let mut xi2 = Vector::zeros(ds);
    for i in 0..n {
        let yi = if rng.random::<bool>() { 1.0 } else { -1.0 };
        y[i] = yi;
        xi1.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        xi2.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let z1 = &spec.mu1 * yi + &l1 * &xi1;
        let z2 = &mu2 * yi + &l2 * &xi2;
        for j in 0..r {
            z[(i, j)] = z1[j];
        }
        for j in 0..ds {
            z[(i, r + j)] = z2[j];
        }
    }
    Ok(Dataset { x: z * spec.s.transpose(), y })
}

/// A spec together with a list of environments, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSet {
    pub spec: ModelSpec,
    pub environments: Vec<EnvParams>,
}

impl EnvironmentSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: EnvironmentSet = serde_json::from_str(s)?;
        set.spec.validate()?;
        for e in &set.environments {
            if e.mu2.len() != set.spec.d_s || e.sigma2.shape() != (set.spec.d_s, set.spec.d_s) {
                return Err(Error::DimensionMismatch(format!("environment {}", e.index)));
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        let s = ModelSpec::gaussian_default(0);
        assert_eq!(s.d(), 35);
        assert!((s.invariant_margin() - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_sigma1_is_rejected() {
        let e = ModelSpec::new(1, 1, Vector::from_element(1, 0.0), Mat::zeros(1, 1), None, 0.0, 0);
        assert!(matches!(e, Err(Error::NotSpd(_))));
    }

    #[test]
    fn zero_signal_spec_is_valid() {
        assert!(ModelSpec::new(1, 1, Vector::from_element(1, 0.0), Mat::identity(1, 1), None, 0.0, 0).is_ok());
    }

    #[test]
    fn rank_deficient_mixing_is_rejected() {
        let mut s = Mat::identity(3, 3);
        s[(0, 0)] = 0.0;
        let e = ModelSpec::new(1, 2, Vector::from_element(1, 1.0), Mat::identity(1, 1), Some(s), 0.0, 0);
        assert!(matches!(e, Err(Error::RankDeficient(_))));
    }

    #[test]
    fn default_environments_have_sigma2_equal_ggt() {
        let spec = ModelSpec::gaussian_default(1);
        let envs = sample_environments(&spec, 2, &EnvSampler::default()).unwrap();
        for e in &envs {
            assert_eq!(e.sigma2, &e.g * e.g.transpose());
            assert!(linalg::min_eigenvalue(&e.sigma2) > 0.0);
        }
    }

    #[test]
    fn bias_bound_is_enforced() {
        let spec = ModelSpec::new(1, 2, Vector::from_element(1, 1.0), Mat::identity(1, 1), None, 3.0, 0).unwrap();
        let mut rng = rng::stream(0, Purpose::EnvParams, 0);
        let ok = EnvSampler { bias: Some(Mat::identity(2, 2) * 1.5), ..Default::default() };
        assert!(sample_environment(&spec, 0, &ok, &mut rng).is_ok());
        let bad = EnvSampler { bias: Some(Mat::identity(2, 2) * 2.0), ..Default::default() };
        assert!(matches!(sample_environment(&spec, 0, &bad, &mut rng), Err(Error::BiasBound { .. })));
        let asym = EnvSampler { bias: Some(Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])), ..Default::default() };
        assert!(matches!(sample_environment(&spec, 0, &asym, &mut rng), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn environments_are_reproducible() {
        let spec = ModelSpec::new(1, 2, Vector::from_element(1, 1.0), Mat::identity(1, 1), None, 0.0, 7).unwrap();
        let a = sample_environments(&spec, 3, &EnvSampler::default()).unwrap();
        let b = sample_environments(&spec, 3, &EnvSampler::default()).unwrap();
        assert_eq!(a, b);
        let longer = sample_environments(&spec, 5, &EnvSampler::default()).unwrap();
        assert_eq!(&longer[..3], &a[..]);
    }

    #[test]
    fn flipping_keeps_covariance_and_rejects_double_flip() {
        let spec = ModelSpec::gaussian_default(2);
        let e = sample_environments(&spec, 1, &EnvSampler::default()).unwrap().remove(0);
        let t = flip_test_environment(&e).unwrap();
        assert!(t.flipped);
        assert_eq!(t.sigma2, e.sigma2);
        let m = analytic_moments(&spec, &e);
        let mt = analytic_moments(&spec, &t);
        assert_eq!(m.cov_pos(), mt.cov_pos());
        for j in 0..3 {
            assert_eq!(m.mean_pos[j], mt.mean_pos[j]);
        }
        for j in 3..35 {
            assert_eq!(m.mean_pos[j], -mt.mean_pos[j]);
        }
        assert!(matches!(flip_test_environment(&t), Err(Error::AlreadyFlipped(0))));
    }

    #[test]
    fn identity_mixing_means_are_latent_means() {
        let spec = ModelSpec::gaussian_default(3);
        let e = sample_environments(&spec, 1, &EnvSampler::default()).unwrap().remove(0);
        let m = analytic_moments(&spec, &e);
        assert_eq!(m.mean_pos.rows(0, 3).clone_owned(), Vector::from_element(3, 1.0));
        assert_eq!(m.mean_pos.rows(3, 32).clone_owned(), e.mu2);
        assert_eq!(m.mean_neg, -&m.mean_pos);
        assert_eq!(m.second_neg, m.second_pos);
    }

    #[test]
    fn single_sample_is_deterministic() {
        let spec = ModelSpec::gaussian_default(4);
        let e = sample_environments(&spec, 1, &EnvSampler::default()).unwrap().remove(0);
        let a = sample_dataset(&spec, &e, 1, &mut rng::stream(4, Purpose::TrainData, 0)).unwrap();
        let b = sample_dataset(&spec, &e, 1, &mut rng::stream(4, Purpose::TrainData, 0)).unwrap();
        assert_eq!(a, b);
        assert!(sample_dataset(&spec, &e, 0, &mut rng::stream(4, Purpose::TrainData, 0)).is_err());
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let spec = ModelSpec::new(1, 2, Vector::from_element(1, 1.0), Mat::identity(1, 1), None, 0.0, 5).unwrap();
        let e = sample_environments(&spec, 1, &EnvSampler::default()).unwrap().remove(0);
        let ds = sample_dataset(&spec, &e, 20, &mut rng::stream(5, Purpose::TrainData, 0)).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x_0,x_1,x_2,y\n"));
        assert_eq!(Dataset::read_csv(&buf[..]).unwrap(), ds);
    }

    #[test]
    fn environment_set_json_roundtrip() {
        let spec = ModelSpec::gaussian_default(6).with_random_mixing();
        let envs = sample_environments(&spec, 2, &EnvSampler::default()).unwrap();
        let set = EnvironmentSet { spec, environments: envs };
        let back = EnvironmentSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
    }
}
