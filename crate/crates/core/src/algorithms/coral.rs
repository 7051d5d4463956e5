use super::logistic::LogisticObjective;
use super::{Algorithm, Diagnostics, Partition, TrainedPredictor};
use crate::env_model::Dataset;
use crate::error::{Error, Result};
use crate::gaussian_risk::estimate_moments;
use crate::linalg;
use crate::optim::{self, Objective, OptSettings};
use crate::subspace_matcher::{moment_differences, MomentDifference, MomentForm, Pairing};
use crate::{Mat, Vector};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoralMode {
    /// Every layer matches all training environments.
    MatchAll,
    /// Layer `l` matches only the `l`-th group of a partition.
    MatchDisjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoralConfig {
    pub mode: CoralMode,
    /// Output width of each linear layer; depth is `widths.len()`.
    pub widths: Vec<usize>,
    pub lambda_coral: f64,
    pub lambda_on: f64,
}

impl Default for CoralConfig {
    fn default() -> Self {
        CoralConfig { mode: CoralMode::MatchAll, widths: vec![3], lambda_coral: 100.0, lambda_on: 1.0 }
    }
}

struct CoralObjective<'a> {
    envs: &'a [Dataset],
    /// Moment differences matched at each layer's output.
    layer_diffs: Vec<Vec<MomentDifference>>,
    /// `d, w_1, .., w_L`
    shape: Vec<usize>,
    lambda_coral: f64,
    lambda_on: f64,
}

impl CoralObjective<'_> {
    fn layers(&self, x: &[f64]) -> (Vec<Mat>, Vector) {
        let mut off = 0;
        let mut us = Vec::with_capacity(self.shape.len() - 1);
        for l in 1..self.shape.len() {
            let (rows, cols) = (self.shape[l], self.shape[l - 1]);
            us.push(Mat::from_column_slice(rows, cols, &x[off..off + rows * cols]));
            off += rows * cols;
        }
        (us, Vector::from_column_slice(&x[off..]))
    }
}

impl Objective for CoralObjective<'_> {
    fn dim(&self) -> usize {
        self.shape.windows(2).map(|w| w[0] * w[1]).sum::<usize>() + self.shape.last().copied().unwrap_or(0)
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (us, w) = self.layers(x);
        let depth = us.len();
        let d = self.shape[0];
        // prefix[l] maps inputs to the output of layer l (prefix[0] = I).
        let mut prefix = vec![Mat::identity(d, d)];
        for u in &us {
            let next = u * prefix.last().unwrap();
            prefix.push(next);
        }
        let v = prefix[depth].transpose() * &w;
        let sup = LogisticObjective { envs: self.envs, penalty_weight: 0.0 };
        let mut gv = vec![0.0; d];
        let mut loss = sup.value_grad(v.as_slice(), &mut gv);
        let gv = Vector::from_vec(gv);
        let grad_w = &prefix[depth] * &gv;
        // Gradients with respect to each prefix map.
        let mut gp: Vec<Mat> = (0..=depth).map(|l| Mat::zeros(self.shape[l], d)).collect();
        gp[depth] += &w * gv.transpose();
        for l in 1..=depth {
            let diffs = &self.layer_diffs[l - 1];
            if diffs.is_empty() || self.lambda_coral == 0.0 {
                continue;
            }
            let c = self.lambda_coral / diffs.len() as f64;
            let p = &prefix[l];
            for diff in diffs {
                for q in &diff.quadratic {
                    let pq = p * q;
                    let a = &pq * p.transpose();
                    loss += c * a.norm_squared();
                    gp[l] += (&a * &pq) * (4.0 * c);
                }
                for m in &diff.linear {
                    let pm = p * m;
                    loss += c * pm.norm_squared();
                    gp[l] += (&pm * m.transpose()) * (2.0 * c);
                }
            }
        }
        let mut grads_u: Vec<Mat> = us.iter().map(|u| Mat::zeros(u.nrows(), u.ncols())).collect();
        for l in (1..=depth).rev() {
            let u = &us[l - 1];
            grads_u[l - 1] += &gp[l] * prefix[l - 1].transpose();
            let back = u.transpose() * &gp[l];
            gp[l - 1] += back;
            let e = u * u.transpose() - Mat::identity(u.nrows(), u.nrows());
            loss += self.lambda_on * e.norm_squared();
            grads_u[l - 1] += (&e * u) * (4.0 * self.lambda_on);
        }
        let mut off = 0;
        for g in &grads_u {
            grad[off..off + g.len()].copy_from_slice(g.as_slice());
            off += g.len();
        }
        grad[off..].copy_from_slice(grad_w.as_slice());
        loss
    }
}

/// Linear CORAL: supervised logistic loss plus mean and covariance matching of
/// class-conditional features at every layer, plus a soft orthonormality penalty.
///
/// Inputs are divided by their RMS coordinate before fitting so that the
/// matching weight does not depend on the data scale.
pub fn coral_fit<R: Rng + ?Sized>(envs: &[Dataset], config: &CoralConfig, opt: &OptSettings, rng: &mut R) -> Result<TrainedPredictor> {
    if envs.len() < 2 {
        return Err(Error::InvalidParameter("CORAL needs at least two environments".into()));
    }
    let d = envs[0].dim();
    if envs.iter().any(|e| e.dim() != d) {
        return Err(Error::DimensionMismatch("environments have different dimensions".into()));
    }
    if config.widths.is_empty() {
        return Err(Error::InvalidParameter("depth must be at least 1".into()));
    }
    let mut shape = vec![d];
    shape.extend(&config.widths);
    if shape.windows(2).any(|w| w[1] == 0 || w[1] > w[0]) {
        return Err(Error::InvalidParameter(format!("widths {:?} must be non-increasing from {d} and positive", config.widths)));
    }
    let depth = config.widths.len();

    let total: f64 = envs.iter().map(|e| e.x.norm_squared()).sum();
    let count: usize = envs.iter().map(|e| e.len()).sum();
    let s = (total / (count * d) as f64).sqrt();
    let s = if s > 0.0 { s } else { 1.0 };
    let scaled: Vec<Dataset> = envs.iter().map(|e| Dataset { x: &e.x / s, y: e.y.clone() }).collect();
    let moments = scaled.iter().map(estimate_moments).collect::<Result<Vec<_>>>()?;

    let groups: Vec<Vec<usize>> = match config.mode {
        CoralMode::MatchAll => vec![(0..envs.len()).collect(); depth],
        CoralMode::MatchDisjoint => Partition::even(envs.len(), depth)?.groups,
    };
    let layer_diffs = groups
        .iter()
        .map(|g| {
            let ms: Vec<_> = g.iter().map(|&i| moments[i].clone()).collect();
            moment_differences(&ms, Pairing::Chain, MomentForm::Centered)
        })
        .collect::<Result<Vec<_>>>()?;

    let obj = CoralObjective { envs: &scaled, layer_diffs, shape: shape.clone(), lambda_coral: config.lambda_coral, lambda_on: config.lambda_on };
    let mut x0 = Vec::with_capacity(obj.dim());
    for l in 1..shape.len() {
        let u = linalg::random_orthonormal_rows(shape[l], shape[l - 1], rng);
        x0.extend_from_slice(u.as_slice());
    }
    x0.extend(std::iter::repeat_n(0.0, shape[depth]));
    let out = optim::minimize(&obj, x0, opt)?;
    let (us, w) = obj.layers(&out.x);
    let mut p = Mat::identity(d, d);
    for u in &us {
        p = u * p;
    }
    let v = p.transpose() * w;
    let algorithm = match config.mode {
        CoralMode::MatchAll => Algorithm::Coral,
        CoralMode::MatchDisjoint => Algorithm::CoralDisjoint,
    };
    TrainedPredictor::new(v, algorithm, Diagnostics { final_loss: Some(out.value), iterations: out.iterations, ..Default::default() })
}
