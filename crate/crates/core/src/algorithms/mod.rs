//! Learners: iterative feature matching, ERM, IRMv1, CORAL, the two-environment
//! closed form and the invariant oracle.

mod closed_form;
mod coral;
mod ifm;
mod logistic;

pub use closed_form::{oracle_w_star, simple_algo};
pub use coral::{coral_fit, CoralConfig, CoralMode};
pub use ifm::{ifm_run, IfmConfig, IfmInput, RankMode};
pub use logistic::{erm_fit, irm_fit, pooled_logistic_loss};

use crate::error::{Error, Result};
use crate::gaussian_risk::LinearClassifier;
use crate::linalg::{serde_rows, serde_vec};
use crate::subspace_matcher::ProjectionStep;
use crate::{Mat, Vector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ifm,
    Erm,
    Irm,
    Coral,
    CoralDisjoint,
    Simple,
    Oracle,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Ifm,
        Algorithm::Erm,
        Algorithm::Irm,
        Algorithm::Coral,
        Algorithm::CoralDisjoint,
        Algorithm::Simple,
        Algorithm::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ifm => "ifm",
            Algorithm::Erm => "erm",
            Algorithm::Irm => "irm",
            Algorithm::Coral => "coral",
            Algorithm::CoralDisjoint => "coral_disjoint",
            Algorithm::Simple => "simple",
            Algorithm::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown algorithm `{s}`")))
    }
}

/// Environment groups consumed by successive matching rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(groups: Vec<Vec<usize>>, n_envs: usize) -> Result<Self> {
        let mut seen = vec![false; n_envs];
        for g in &groups {
            if g.len() < 2 {
                return Err(Error::InvalidParameter("every group needs at least two environments".into()));
            }
            for &i in g {
                if i >= n_envs || seen[i] {
                    return Err(Error::InvalidParameter(format!("environment {i} is out of range or repeated")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidParameter("partition does not cover every environment".into()));
        }
        Ok(Partition { groups })
    }

    /// Consecutive groups of `size`; a leftover single environment joins the last group.
    pub fn consecutive(n_envs: usize, size: usize) -> Result<Self> {
        if size < 2 || n_envs < 2 {
            return Err(Error::InvalidParameter(format!("cannot form groups of {size} from {n_envs} environments")));
        }
        let mut groups: Vec<Vec<usize>> = (0..n_envs).collect::<Vec<_>>().chunks(size).map(|c| c.to_vec()).collect();
        if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < 2) {
            let tail = groups.pop().unwrap();
            groups.last_mut().unwrap().extend(tail);
        }
        Partition::new(groups, n_envs)
    }

    /// `k` consecutive groups of near-equal size.
    pub fn even(n_envs: usize, k: usize) -> Result<Self> {
        if k == 0 || n_envs < 2 * k {
            return Err(Error::InvalidParameter(format!("{n_envs} environments cannot fill {k} groups of two")));
        }
        let mut groups = Vec::with_capacity(k);
        let mut start = 0;
        for g in 0..k {
            let len = n_envs / k + usize::from(g < n_envs % k);
            groups.push((start..start + len).collect());
            start += len;
        }
        Partition::new(groups, n_envs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionPolicy {
    Consecutive { group_size: usize },
    Explicit { partition: Partition },
}

impl Default for PartitionPolicy {
    fn default() -> Self {
        PartitionPolicy::Consecutive { group_size: 2 }
    }
}

impl PartitionPolicy {
    pub fn partition(&self, n_envs: usize) -> Result<Partition> {
        match self {
            PartitionPolicy::Consecutive { group_size } => Partition::consecutive(n_envs, *group_size),
            PartitionPolicy::Explicit { partition } => Partition::new(partition.groups.clone(), n_envs),
        }
    }
}

/// Projections `U_1 .. U_T`, their product and the classifier on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerStack {
    pub steps: Vec<ProjectionStep>,
    #[serde(with = "serde_rows")]
    pub composed: Mat,
    pub classifier: LinearClassifier,
}

impl FeaturizerStack {
    /// Dimensions `r_0, r_1, .., r_T`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.composed.ncols()];
        dims.extend(self.steps.iter().map(|s| s.r_out));
        dims
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `r_0, r_1, ..` for IFM; empty otherwise.
    pub round_dims: Vec<usize>,
    pub residuals: Vec<f64>,
    /// Environment groups consumed per round.
    pub round_groups: Vec<Vec<usize>>,
    /// How many matching rounds consumed each environment.
    pub consumed: Vec<usize>,
    pub final_loss: Option<f64>,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPredictor {
    #[serde(with = "serde_vec")]
    pub v: Vector,
    pub algorithm: Algorithm,
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack: Option<FeaturizerStack>,
}

impl TrainedPredictor {
    pub fn new(v: Vector, algorithm: Algorithm, diagnostics: Diagnostics) -> Result<Self> {
        let clf = LinearClassifier::normalized(v)?;
        Ok(TrainedPredictor { v: clf.v, algorithm, diagnostics, stack: None })
    }

    pub fn classifier(&self) -> LinearClassifier {
        LinearClassifier { v: self.v.clone(), normalized: true }
    }

    pub fn rounds(&self) -> usize {
        self.stack.as_ref().map_or(0, |s| s.steps.len())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
