use super::logistic::fit_logistic;
use super::{Algorithm, Diagnostics, FeaturizerStack, PartitionPolicy, TrainedPredictor};
use crate::env_model::{Dataset, MomentSet};
use crate::error::{Error, Result};
use crate::gaussian_risk::{estimate_moments, LinearClassifier};
use crate::optim::OptSettings;
use crate::subspace_matcher::{max_dim_match, MatcherConfig};
use crate::{Mat, Vector};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Population moments (analytic mode) or samples (finite-sample mode).
#[derive(Debug, Clone, Copy)]
pub enum IfmInput<'a> {
    Moments(&'a [MomentSet]),
    Datasets(&'a [Dataset]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RankMode {
    Known { r: usize },
    /// Experimental: stop once a round no longer shrinks the feature dimension.
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IfmConfig {
    pub rank: RankMode,
    pub partition: PartitionPolicy,
    pub matcher: MatcherConfig,
    /// Optimizer for the final logistic fit in finite-sample mode.
    pub final_fit: OptSettings,
}

impl Default for IfmConfig {
    fn default() -> Self {
        IfmConfig {
            rank: RankMode::Known { r: 3 },
            partition: PartitionPolicy::default(),
            matcher: MatcherConfig::default(),
            final_fit: OptSettings::default(),
        }
    }
}

/// Iterative feature matching.
///
/// Each round takes the next environment group, projects its moments through
/// the current stack and keeps the largest subspace on which they agree. The
/// loop stops at dimension `r`; the classifier is then fit on the projected
/// features of every training environment.
pub fn ifm_run<R: Rng + ?Sized>(input: IfmInput<'_>, config: &IfmConfig, rng: &mut R) -> Result<TrainedPredictor> {
    let moments: Vec<MomentSet> = match input {
        IfmInput::Moments(m) => m.to_vec(),
        IfmInput::Datasets(ds) => ds.iter().map(estimate_moments).collect::<Result<_>>()?,
    };
    let n_envs = moments.len();
    if n_envs == 0 {
        return Err(Error::InvalidParameter("no training environments".into()));
    }
    let d = moments[0].dim();
    if moments.iter().any(|m| m.dim() != d) {
        return Err(Error::DimensionMismatch("environments have different dimensions".into()));
    }
    let target = match config.rank {
        RankMode::Known { r } => {
            if r == 0 || r > d {
                return Err(Error::InvalidParameter(format!("invariant dimension {r} outside 1..={d}")));
            }
            r
        }
        RankMode::Estimate => 1,
    };

    let mut composed = Mat::identity(d, d);
    let mut steps = Vec::new();
    let mut diag = Diagnostics { round_dims: vec![d], consumed: vec![0; n_envs], ..Default::default() };
    let mut cur = d;
    if cur > target {
        let partition = config.partition.partition(n_envs)?;
        let mut matcher = config.matcher.clone();
        matcher.floor_dim = target;
        for group in &partition.groups {
            if cur <= target {
                break;
            }
            let group_moments: Vec<MomentSet> = group.iter().map(|&i| moments[i].project(&composed)).collect();
            let step = max_dim_match(&group_moments, &matcher, rng)?;
            for &i in group {
                diag.consumed[i] += 1;
            }
            if config.rank == RankMode::Estimate && step.r_out == cur {
                diag.round_groups.push(group.clone());
                break;
            }
            composed = &step.u * &composed;
            cur = step.r_out;
            diag.round_dims.push(cur);
            diag.residuals.push(step.residual);
            diag.round_groups.push(group.clone());
            steps.push(step);
        }
        if let RankMode::Known { r } = config.rank {
            if cur > r {
                return Err(Error::EnvironmentsExhausted { rounds: steps.len(), dim: cur, target: r });
            }
        }
    }

    let w = match input {
        IfmInput::Moments(_) => gaussian_direction(&moments, &composed)?,
        IfmInput::Datasets(ds) => {
            let projected: Vec<Dataset> = ds.iter().map(|e| e.project(&composed)).collect();
            let (w, loss, iterations) = fit_logistic(&projected, 0.0, &config.final_fit)?;
            diag.final_loss = Some(loss);
            diag.iterations = iterations;
            w
        }
    };
    let v = composed.transpose() * &w;
    let mut pred = TrainedPredictor::new(v, Algorithm::Ifm, diag)?;
    pred.stack = Some(FeaturizerStack { steps, composed, classifier: LinearClassifier::new(w) });
    Ok(pred)
}

/// `C^-1 m` from the environment-averaged projected class-+1 mean and covariance.
fn gaussian_direction(moments: &[MomentSet], composed: &Mat) -> Result<Vector> {
    let k = composed.nrows();
    let mut mean = Vector::zeros(k);
    let mut cov = Mat::zeros(k, k);
    for m in moments {
        let p = m.project(composed);
        mean += &p.mean_pos - &p.mean_neg;
        cov += p.cov_pos() + p.cov_neg();
    }
    mean /= 2.0 * moments.len() as f64;
    cov /= 2.0 * moments.len() as f64;
    let cov = crate::linalg::symmetrize(&cov);
    match cov.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&mean)),
        None => cov.pseudo_inverse(1e-12).map(|p| p * mean).map_err(|e| Error::RankDeficient(e.to_string())),
    }
}
