use crate::algorithms::{Algorithm, CoralConfig, CoralMode, IfmConfig, PartitionPolicy, RankMode};
use crate::env_model::{EnvSampler, ModelSpec};
use crate::error::{Error, Result};
use crate::optim::OptSettings;
use crate::subspace_matcher::MatcherConfig;
use crate::{Mat, Vector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

/// Population moments, or `n` samples per environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Analytic,
    Sampled { n: usize },
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Analytic => f.write_str("analytic"),
            Mode::Sampled { n } => write!(f, "sampled:{n}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "analytic" {
            return Ok(Mode::Analytic);
        }
        let n = s
            .strip_prefix("sampled:")
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| Error::Parse(format!("mode `{s}` is neither `analytic` nor `sampled:<n>`")))?;
        if n < 2 {
            return Err(Error::InvalidParameter("sampled mode needs at least 2 samples".into()));
        }
        Ok(Mode::Sampled { n })
    }
}

impl Serialize for Mode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    #[default]
    Identity,
    RandomOrthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub r: usize,
    pub d_s: usize,
    /// Defaults to the all-ones vector.
    pub mu1: Option<Vec<f64>>,
    /// Row-major; defaults to the identity.
    pub sigma1: Option<Vec<Vec<f64>>>,
    pub mu2_scale: f64,
    pub d_bound: f64,
    pub mixing: Mixing,
    pub e_values: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub trials: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Defaults depend on the mode, see [`SweepConfig::matcher_config`].
    pub matcher: Option<MatcherConfig>,
    pub group_size: Option<usize>,
    pub optimizer: OptSettings,
    pub irm_penalty: f64,
    pub coral: CoralConfig,
    pub coral_disjoint: CoralConfig,
    /// Samples per environment for the data-driven baselines in analytic mode.
    pub baseline_samples: usize,
    pub record_timing: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            r: 3,
            d_s: 32,
            mu1: None,
            sigma1: None,
            mu2_scale: 10.0,
            d_bound: 0.0,
            mixing: Mixing::Identity,
            e_values: (3..=15).collect(),
            algorithms: Algorithm::ALL.to_vec(),
            trials: 5,
            mode: Mode::Analytic,
            seed: 0,
            matcher: None,
            group_size: None,
            optimizer: OptSettings::default(),
            irm_penalty: 10.0,
            coral: CoralConfig { mode: CoralMode::MatchAll, widths: vec![3], lambda_coral: 1.0, lambda_on: 1.0 },
            coral_disjoint: CoralConfig { mode: CoralMode::MatchDisjoint, widths: vec![16, 8, 3], lambda_coral: 1.0, lambda_on: 1.0 },
            baseline_samples: 10_000,
            record_timing: false,
            output_dir: None,
        }
    }
}

impl SweepConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.e_values.is_empty() {
            return Err(Error::InvalidParameter("no environment counts given".into()));
        }
        if let Some(&e) = self.e_values.iter().find(|&&e| e < 2) {
            return Err(Error::InvalidParameter(format!("E = {e}; every sweep cell needs at least 2 environments")));
        }
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::InvalidParameter("no algorithms selected".into()));
        }
        if self.group_size == Some(0) || self.group_size == Some(1) {
            return Err(Error::InvalidParameter("group_size must be at least 2".into()));
        }
        if let Mode::Sampled { n } = self.mode {
            if n < 2 {
                return Err(Error::InvalidParameter("sampled mode needs at least 2 samples".into()));
            }
        }
        if self.baseline_samples < 2 {
            return Err(Error::InvalidParameter("baseline_samples must be at least 2".into()));
        }
        if let Some(m) = &self.matcher {
            m.validate()?;
        }
        self.spec(self.seed)?;
        Ok(())
    }

    /// Problem instance of one sweep cell.
    pub fn spec(&self, seed: u64) -> Result<ModelSpec> {
        let r = self.r;
        let mu1 = match &self.mu1 {
            Some(v) => Vector::from_column_slice(v),
            None => Vector::from_element(r, 1.0),
        };
        let sigma1 = match &self.sigma1 {
            Some(rows) => {
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                if rows.len() != r || flat.len() != r * r {
                    return Err(Error::DimensionMismatch(format!("Sigma1 must be {r}x{r}")));
                }
                Mat::from_row_slice(r, r, &flat)
            }
            None => Mat::identity(r, r),
        };
        let spec = ModelSpec::new(r, self.d_s, mu1, sigma1, None, self.d_bound, seed)?;
        Ok(match self.mixing {
            Mixing::Identity => spec,
            Mixing::RandomOrthogonal => spec.with_random_mixing(),
        })
    }

    pub fn sampler(&self) -> EnvSampler {
        EnvSampler::gaussian(self.mu2_scale)
    }

    /// Tolerance 1e-8 for population moments, 1e-2 for estimated ones.
    pub fn matcher_config(&self) -> MatcherConfig {
        self.matcher.clone().unwrap_or_else(|| match self.mode {
            Mode::Analytic => MatcherConfig::default(),
            Mode::Sampled { .. } => MatcherConfig { tol_rel: 1e-2, ..Default::default() },
        })
    }

    /// Environments per IFM round: 2 in analytic mode, 3 in sampled mode.
    pub fn ifm_group_size(&self) -> usize {
        self.group_size.unwrap_or(match self.mode {
            Mode::Analytic => 2,
            Mode::Sampled { .. } => 3,
        })
    }

    pub fn ifm_config(&self) -> IfmConfig {
        IfmConfig {
            rank: RankMode::Known { r: self.r },
            partition: PartitionPolicy::Consecutive { group_size: self.ifm_group_size() },
            matcher: self.matcher_config(),
            final_fit: self.optimizer,
        }
    }

    /// Samples per environment handed to the data-driven algorithms.
    pub fn data_samples(&self) -> usize {
        match self.mode {
            Mode::Analytic => self.baseline_samples,
            Mode::Sampled { n } => n,
        }
    }
}
