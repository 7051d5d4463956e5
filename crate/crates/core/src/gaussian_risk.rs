//! Accuracy of linear classifiers: closed form on the Gaussian model, and
//! empirical on finite samples.

use crate::env_model::{Dataset, EnvParams, ModelSpec, MomentSet, MomentSource};
use crate::error::{Error, Result};
use crate::linalg::serde_vec;
use crate::{Mat, Vector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    #[serde(with = "serde_vec")]
    pub v: Vector,
    pub normalized: bool,
}

impl LinearClassifier {
    pub fn new(v: Vector) -> Self {
        LinearClassifier { v, normalized: false }
    }

    pub fn normalized(v: Vector) -> Result<Self> {
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroPredictor);
        }
        Ok(LinearClassifier { v: v / n, normalized: true })
    }
}

/// Standard normal CDF via the complementary error function (statrs), accurate
/// to about 1e-16 absolute over the whole line.
pub fn standard_normal_cdf(t: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-t / std::f64::consts::SQRT_2)
}

/// Signed margin and standard deviation of `v' X` given `Y = +1`.
pub fn margin_and_scale(v: &Vector, spec: &ModelSpec, env: &EnvParams) -> (f64, f64) {
    let beta = spec.s.transpose() * v;
    let b1 = beta.rows(0, spec.r);
    let b2 = beta.rows(spec.r, spec.d_s);
    let num = b1.dot(&spec.mu1) + env.spurious_sign() * b2.dot(&env.mu2);
    let var = (b1.transpose() * &spec.sigma1 * b1)[(0, 0)] + (b2.transpose() * &env.sigma2 * b2)[(0, 0)];
    (num, var.max(0.0).sqrt())
}

/// Population accuracy `Phi(margin / scale)`; a classifier with no variance returns 0.5.
pub fn zero_one_accuracy(clf: &LinearClassifier, spec: &ModelSpec, env: &EnvParams) -> f64 {
    let (num, den) = margin_and_scale(&clf.v, spec, env);
    if den <= 0.0 {
        return 0.5;
    }
    standard_normal_cdf(num / den)
}

pub fn zero_one_risk(clf: &LinearClassifier, spec: &ModelSpec, env: &EnvParams) -> f64 {
    1.0 - zero_one_accuracy(clf, spec, env)
}

/// Fraction of samples with `sign(v'x) = y`; a zero score counts as a mistake.
pub fn empirical_accuracy(clf: &LinearClassifier, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.dim() != clf.v.len() {
        return Err(Error::DimensionMismatch(format!("classifier {} vs data {}", clf.v.len(), data.dim())));
    }
    let scores = &data.x * &clf.v;
    let hits = scores.iter().zip(data.y.iter()).filter(|(s, y)| **s * **y > 0.0).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Per-class empirical means and uncentered second moments.
pub fn estimate_moments(data: &Dataset) -> Result<MomentSet> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = data.dim();
    let class = |sign: f64| -> Result<(Vector, Mat)> {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] == sign).collect();
        if idx.is_empty() {
            return Err(Error::MissingClass(sign as i8));
        }
        let x = data.x.select_rows(idx.iter());
        let n = idx.len() as f64;
        let mean = Vector::from_iterator(d, x.column_iter().map(|c| c.sum() / n));
        let second = (x.transpose() * &x) / n;
        Ok((mean, crate::linalg::symmetrize(&second)))
    };
    let (mean_pos, second_pos) = class(1.0)?;
    let (mean_neg, second_neg) = class(-1.0)?;
    Ok(MomentSet { mean_pos, second_pos, mean_neg, second_neg, source: MomentSource::Estimated { n: data.len() } })
}
