use super::{Algorithm, Diagnostics, TrainedPredictor};
use crate::env_model::Dataset;
use crate::error::{Error, Result};
use crate::optim::{self, Objective, OptSettings};
use crate::Vector;

/// `log(1 + exp(-m))`
pub(crate) fn logistic_loss(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Average over environments of the mean logistic loss, plus an optional IRMv1 penalty.
pub(crate) struct LogisticObjective<'a> {
    pub envs: &'a [Dataset],
    pub penalty_weight: f64,
}

impl Objective for LogisticObjective<'_> {
    fn dim(&self) -> usize {
        self.envs[0].dim()
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let v = Vector::from_column_slice(x);
        let inv_e = 1.0 / self.envs.len() as f64;
        let mut total = 0.0;
        let mut g = Vector::zeros(v.len());
        for env in self.envs {
            let n = env.len() as f64;
            let scores = &env.x * &v;
            let mut risk = 0.0;
            let mut w_risk = Vector::zeros(env.len());
            let mut dummy = 0.0;
            let mut w_pen = Vector::zeros(env.len());
            for i in 0..env.len() {
                let y = env.y[i];
                let m = y * scores[i];
                risk += logistic_loss(m);
                let d1 = -sigmoid(-m);
                w_risk[i] = d1 * y;
                if self.penalty_weight > 0.0 {
                    let d2 = sigmoid(m) * sigmoid(-m);
                    dummy += d1 * m;
                    w_pen[i] = (d2 * m + d1) * y;
                }
            }
            total += risk / n * inv_e;
            g += env.x.tr_mul(&w_risk) * (inv_e / n);
            if self.penalty_weight > 0.0 {
                // d/ds of the risk of s*v at s = 1, and its gradient in v.
                let ge = dummy / n;
                total += self.penalty_weight * ge * ge;
                g += env.x.tr_mul(&w_pen) * (2.0 * self.penalty_weight * ge / n);
            }
        }
        grad.copy_from_slice(g.as_slice());
        total
    }
}

pub fn pooled_logistic_loss(envs: &[Dataset], v: &Vector) -> f64 {
    let obj = LogisticObjective { envs, penalty_weight: 0.0 };
    let mut g = vec![0.0; v.len()];
    obj.value_grad(v.as_slice(), &mut g)
}

fn check_envs(envs: &[Dataset], min: usize) -> Result<()> {
    if envs.len() < min {
        return Err(Error::InvalidParameter(format!("need at least {min} environments, got {}", envs.len())));
    }
    let d = envs[0].dim();
    if envs.iter().any(|e| e.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    if envs.iter().any(|e| e.dim() != d) {
        return Err(Error::DimensionMismatch("environments have different dimensions".into()));
    }
    Ok(())
}

pub(crate) fn fit_logistic(envs: &[Dataset], penalty_weight: f64, opt: &OptSettings) -> Result<(Vector, f64, u64)> {
    let obj = LogisticObjective { envs, penalty_weight };
    let out = optim::minimize(&obj, vec![0.0; obj.dim()], opt)?;
    Ok((Vector::from_vec(out.x), out.value, out.iterations))
}

/// Minimises the environment-averaged logistic loss.
pub fn erm_fit(envs: &[Dataset], opt: &OptSettings) -> Result<TrainedPredictor> {
    check_envs(envs, 1)?;
    let (v, loss, iterations) = fit_logistic(envs, 0.0, opt)?;
    TrainedPredictor::new(v, Algorithm::Erm, Diagnostics { final_loss: Some(loss), iterations, ..Default::default() })
}

/// IRMv1: average logistic loss plus `penalty_weight * sum_e (d/ds R_e(s v) at s=1)^2`.
pub fn irm_fit(envs: &[Dataset], penalty_weight: f64, opt: &OptSettings) -> Result<TrainedPredictor> {
    check_envs(envs, 2)?;
    if !(penalty_weight >= 0.0) {
        return Err(Error::InvalidParameter("penalty weight must be non-negative".into()));
    }
    let (v, loss, iterations) = fit_logistic(envs, penalty_weight, opt)?;
    TrainedPredictor::new(v, Algorithm::Irm, Diagnostics { final_loss: Some(loss), iterations, ..Default::default() })
}
