//! Orthonormal projections under which class-conditional moments agree across
//! environments.
//!
//! Three solvers are available:
//!
//! - `Spectral`: common null space of all moment differences, from the
//!   eigenvectors of `M = sum D' D` with small eigenvalues. Exact for population moments.
//! - `Penalty`: minimises `l1 * L_coral(U) + l2 * ||U U' - I||^2` from random
//!   orthonormal starts, then re-orthonormalises.
//! - `Isotropic`: for a single pair, the largest subspace on which the quadratic
//!   form of the difference vanishes (null space plus paired positive/negative
//!   eigendirections). This is the exact maximiser of the matching constraint.

use crate::env_model::MomentSet;
use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows};
use crate::optim::{self, Descent, Objective, OptSettings};
use crate::rng::{self, Purpose};
use crate::{Mat, Vector};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    Spectral,
    Penalty,
    Isotropic,
}

/// Which environment pairs are differenced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// `(0,1), (1,2), ...`
    Chain,
    /// `(0,1), (2,3), ...`; a trailing odd environment is paired with its predecessor.
    Disjoint,
}

/// Which moments are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentForm {
    /// Conditional covariances and conditional means.
    Centered,
    /// Uncentered conditional second moments only.
    Uncentered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimSearch {
    Binary,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    pub tol_rel: f64,
    pub max_iters: u64,
    /// Fixed step for the penalty solver; `None` uses L-BFGS.
    pub step_size: Option<f64>,
    pub lambda_coral: f64,
    pub lambda_on: f64,
    pub restarts: usize,
    /// Never project below this dimension.
    pub floor_dim: usize,
    pub method: MatchMethod,
    pub pairing: Pairing,
    pub form: MomentForm,
    pub search: DimSearch,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            tol_rel: 1e-8,
            max_iters: 1000,
            step_size: None,
            lambda_coral: 1.0,
            lambda_on: 1.0,
            restarts: 3,
            floor_dim: 1,
            method: MatchMethod::Spectral,
            pairing: Pairing::Chain,
            form: MomentForm::Centered,
            search: DimSearch::Binary,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_rel >= 0.0) || !self.tol_rel.is_finite() {
            return Err(Error::InvalidParameter("tol_rel must be a non-negative number".into()));
        }
        if self.floor_dim == 0 {
            return Err(Error::InvalidParameter("floor_dim must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Differences between two environments' moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentDifference {
    pub pair: (usize, usize),
    /// Symmetric `d x d` differences, one per class.
    pub quadratic: Vec<Mat>,
    /// Mean differences, one per class; empty for the uncentered form.
    pub linear: Vec<Vector>,
}

impl MomentDifference {
    pub fn dim(&self) -> usize {
        self.quadratic[0].nrows()
    }

    /// `sum Q'Q + sum l l'`; its null space is where the difference vanishes.
    pub fn gram(&self) -> Mat {
        let d = self.dim();
        let mut m = Mat::zeros(d, d);
        for q in &self.quadratic {
            m += q.transpose() * q;
        }
        for l in &self.linear {
            m += l * l.transpose();
        }
        m
    }

    /// Mismatch after projecting by `u`.
    pub fn residual(&self, u: &Mat) -> f64 {
        let mut s = 0.0;
        for q in &self.quadratic {
            s += (u * q * u.transpose()).norm_squared();
        }
        for l in &self.linear {
            s += (u * l).norm_squared();
        }
        s.sqrt()
    }

    /// Mismatch without projection.
    pub fn magnitude(&self) -> f64 {
        let s: f64 = self.quadratic.iter().map(|q| q.norm_squared()).sum::<f64>()
            + self.linear.iter().map(|l| l.norm_squared()).sum::<f64>();
        s.sqrt()
    }
}

/// Index pairs for `n` environments under a pairing convention.
pub fn pair_indices(n: usize, pairing: Pairing) -> Vec<(usize, usize)> {
    match pairing {
        Pairing::Chain => (1..n).map(|i| (i - 1, i)).collect(),
        Pairing::Disjoint => {
            let mut p: Vec<(usize, usize)> = (0..n / 2).map(|k| (2 * k, 2 * k + 1)).collect();
            if n % 2 == 1 && n >= 3 {
                p.push((n - 2, n - 1));
            }
            p
        }
    }
}

pub fn moment_differences(moments: &[MomentSet], pairing: Pairing, form: MomentForm) -> Result<Vec<MomentDifference>> {
    if moments.len() < 2 {
        return Err(Error::InvalidParameter("at least two moment sets are needed".into()));
    }
    let d = moments[0].dim();
    if let Some(m) = moments.iter().find(|m| m.dim() != d || m.second_pos.shape() != (d, d)) {
        return Err(Error::DimensionMismatch(format!("moment set of dimension {} vs {d}", m.dim())));
    }
    let diffs = pair_indices(moments.len(), pairing)
        .into_iter()
        .map(|(a, b)| {
            let (ma, mb) = (&moments[a], &moments[b]);
            match form {
                MomentForm::Centered => MomentDifference {
                    pair: (a, b),
                    quadratic: vec![linalg::symmetrize(&(ma.cov_pos() - mb.cov_pos())), linalg::symmetrize(&(ma.cov_neg() - mb.cov_neg()))],
                    linear: vec![&ma.mean_pos - &mb.mean_pos, &ma.mean_neg - &mb.mean_neg],
                },
                MomentForm::Uncentered => MomentDifference {
                    pair: (a, b),
                    quadratic: vec![linalg::symmetrize(&(&ma.second_pos - &mb.second_pos)), linalg::symmetrize(&(&ma.second_neg - &mb.second_neg))],
                    linear: vec![],
                },
            }
        })
        .collect();
    Ok(diffs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStep {
    /// `r_out x r_in`, orthonormal rows.
    #[serde(with = "serde_rows")]
    pub u: Mat,
    pub r_in: usize,
    pub r_out: usize,
    /// Largest per-pair mismatch after projection.
    pub residual: f64,
    /// Largest per-pair mismatch before projection.
    pub scale: f64,
    pub method: MatchMethod,
    pub feasible: bool,
    /// True when fewer directions qualified than `floor_dim` and the rest were filled in.
    pub padded: bool,
    /// Eigenvalues used to select directions, ascending (empty for the penalty solver).
    pub spectrum: Vec<f64>,
    pub pair_residuals: Vec<f64>,
}

impl ProjectionStep {
    pub fn diagnostics_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Diag<'a> {
            r_in: usize,
            r_out: usize,
            residual: f64,
            scale: f64,
            feasible: bool,
            spectrum: &'a [f64],
            pair_residuals: &'a [f64],
        }
        Ok(serde_json::to_string(&Diag {
            r_in: self.r_in,
            r_out: self.r_out,
            residual: self.residual,
            scale: self.scale,
            feasible: self.feasible,
            spectrum: &self.spectrum,
            pair_residuals: &self.pair_residuals,
        })?)
    }
}

fn scale_of(diffs: &[MomentDifference]) -> f64 {
    diffs.iter().map(|d| d.magnitude()).fold(0.0, f64::max)
}

fn finish(u: Mat, diffs: &[MomentDifference], tol_rel: f64, method: MatchMethod, padded: bool, spectrum: Vec<f64>) -> ProjectionStep {
    let pair_residuals: Vec<f64> = diffs.iter().map(|d| d.residual(&u)).collect();
    let residual = pair_residuals.iter().copied().fold(0.0, f64::max);
    let scale = scale_of(diffs);
    ProjectionStep {
        r_in: u.ncols(),
        r_out: u.nrows(),
        feasible: residual <= tol_rel * scale,
        u,
        residual,
        scale,
        method,
        padded,
        spectrum,
        pair_residuals,
    }
}

fn rows_of(vectors: &Mat, cols: impl Iterator<Item = usize>) -> Mat {
    let cols: Vec<usize> = cols.collect();
    let n = vectors.nrows();
    Mat::from_fn(cols.len(), n, |i, j| vectors[(j, cols[i])])
}

/// Directions with `M v ~ 0`, floored at `floor_dim`.
pub fn spectral_match(diffs: &[MomentDifference], config: &MatcherConfig) -> Result<ProjectionStep> {
    let first = diffs.first().ok_or_else(|| Error::InvalidParameter("no differences given".into()))?;
    let n = first.dim();
    let mut m = Mat::zeros(n, n);
    for d in diffs {
        m += d.gram();
    }
    let trace = m.trace();
    if trace <= 0.0 {
        return Ok(finish(Mat::identity(n, n), diffs, config.tol_rel, MatchMethod::Spectral, false, vec![0.0; n]));
    }
    let (values, vectors) = linalg::sym_eigen_sorted(&m);
    let thr = config.tol_rel * trace / n as f64;
    let count = values.iter().filter(|&&v| v <= thr).count();
    let floor = config.floor_dim.min(n);
    let k = count.max(floor);
    let u = rows_of(&vectors, 0..k);
    Ok(finish(u, diffs, config.tol_rel, MatchMethod::Spectral, count < floor, values))
}

/// Maximum isotropic subspace of a single pair's difference.
pub fn isotropic_match(diffs: &[MomentDifference], config: &MatcherConfig) -> Result<ProjectionStep> {
    if diffs.len() != 1 {
        return Err(Error::InvalidParameter(format!("isotropic matching takes one pair, got {}", diffs.len())));
    }
    let diff = &diffs[0];
    let n = diff.dim();
    let scale = diff.magnitude();
    if scale == 0.0 {
        return Ok(finish(Mat::identity(n, n), diffs, config.tol_rel, MatchMethod::Isotropic, false, vec![0.0; n]));
    }
    // Complement of the mean differences.
    let mut lin = Mat::zeros(n, n);
    for l in &diff.linear {
        lin += l * l.transpose();
    }
    let (lvals, lvecs) = linalg::sym_eigen_sorted(&lin);
    let lthr = config.tol_rel * scale * scale;
    let keep: Vec<usize> = (0..n).filter(|&i| lvals[i] <= lthr).collect();
    let w = Mat::from_fn(n, keep.len(), |i, j| lvecs[(i, keep[j])]);
    // Class-averaged quadratic form restricted to that complement.
    let mut q = Mat::zeros(n, n);
    for qq in &diff.quadratic {
        q += qq;
    }
    q /= diff.quadratic.len() as f64;
    let qw = linalg::symmetrize(&(w.transpose() * q * &w));
    let (vals, vecs) = linalg::sym_eigen_sorted(&qw);
    let thr = config.tol_rel * scale;
    let zero: Vec<usize> = (0..vals.len()).filter(|&i| vals[i].abs() <= thr).collect();
    let mut pos: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > thr).collect();
    let neg: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] < -thr).collect();
    pos.reverse();
    let mut rows: Vec<Vector> = zero.iter().map(|&i| &w * vecs.column(i)).collect();
    for (&p, &m) in pos.iter().zip(neg.iter()) {
        let v = vecs.column(p) / vals[p].sqrt() + vecs.column(m) / (-vals[m]).sqrt();
        rows.push(&w * v.normalize());
    }
    let floor = config.floor_dim.min(n);
    let padded = rows.len() < floor;
    if padded {
        // Fill with unpaired directions of smallest curvature, then with mean directions.
        let paired = pos.len().min(neg.len());
        let mut rest: Vec<usize> = pos.iter().skip(paired).chain(neg.iter().skip(paired)).copied().collect();
        rest.sort_by(|&a, &b| vals[a].abs().total_cmp(&vals[b].abs()));
        let need = floor - rows.len();
        rows.extend(rest.into_iter().take(need).map(|i| &w * vecs.column(i)));
        let need = floor.saturating_sub(rows.len());
        rows.extend((0..n).filter(|&i| lvals[i] > lthr).take(need).map(|i| lvecs.column(i).clone_owned()));
    }
    let mut u = Mat::zeros(rows.len(), n);
    for (i, r) in rows.iter().enumerate() {
        u.set_row(i, &r.transpose());
    }
    let u = linalg::orthonormalize_rows(&u);
    let mut spectrum = vals;
    spectrum.sort_by(f64::total_cmp);
    Ok(finish(u, diffs, config.tol_rel, MatchMethod::Isotropic, padded, spectrum))
}

struct PenaltyObjective<'a> {
    diffs: &'a [MomentDifference],
    k: usize,
    n: usize,
    inv_scale: f64,
    lambda_coral: f64,
    lambda_on: f64,
}

impl Objective for PenaltyObjective<'_> {
    fn dim(&self) -> usize {
        self.k * self.n
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let u = Mat::from_column_slice(self.k, self.n, x);
        let mut g = Mat::zeros(self.k, self.n);
        let mut coral = 0.0;
        let w = self.lambda_coral / self.diffs.len() as f64;
        let s2 = self.inv_scale * self.inv_scale;
        for d in self.diffs {
            for q in &d.quadratic {
                let uq = &u * q;
                let p = &uq * u.transpose();
                coral += p.norm_squared() * s2;
                g += (&p * &uq) * (4.0 * w * s2);
            }
            for l in &d.linear {
                let ul = &u * l;
                coral += ul.norm_squared() * s2;
                g += (&ul * l.transpose()) * (2.0 * w * s2);
            }
        }
        let e = &u * u.transpose() - Mat::identity(self.k, self.k);
        g += (&e * &u) * (4.0 * self.lambda_on);
        grad.copy_from_slice(g.as_slice());
        w * coral + self.lambda_on * e.norm_squared()
    }
}

/// Penalty solver at a fixed target dimension.
pub fn penalty_match<R: Rng + ?Sized>(moments: &[MomentSet], target_dim: usize, config: &MatcherConfig, rng: &mut R) -> Result<ProjectionStep> {
    config.validate()?;
    let diffs = moment_differences(moments, config.pairing, config.form)?;
    penalty_match_diffs(&diffs, target_dim, config, rng.random())
}

fn penalty_match_diffs(diffs: &[MomentDifference], k: usize, config: &MatcherConfig, base_seed: u64) -> Result<ProjectionStep> {
    let n = diffs[0].dim();
    if k > n {
        return Err(Error::InvalidParameter(format!("target dimension {k} exceeds input dimension {n}")));
    }
    if k == 0 {
        return Ok(finish(Mat::zeros(0, n), diffs, config.tol_rel, MatchMethod::Penalty, false, vec![]));
    }
    let scale = scale_of(diffs);
    let obj = PenaltyObjective {
        diffs,
        k,
        n,
        inv_scale: if scale > 0.0 { 1.0 / scale } else { 1.0 },
        lambda_coral: config.lambda_coral,
        lambda_on: config.lambda_on,
    };
    let settings = OptSettings {
        descent: config.step_size.map_or(Descent::Lbfgs { memory: 10 }, |step| Descent::FixedStep { step }),
        max_iters: config.max_iters,
        grad_tol: 1e-13,
        patience: 50,
    };
    let mut best: Option<ProjectionStep> = None;
    for i in 0..config.restarts {
        let mut g = rng::stream(base_seed, Purpose::Restart, i as u64);
        let u0 = linalg::random_orthonormal_rows(k, n, &mut g);
        let mut x = u0.as_slice().to_vec();
        // Two passes: re-orthonormalising between them removes the drift the soft penalty allows.
        for _ in 0..2 {
            let out = optim::minimize(&obj, x, &settings)?;
            let u = linalg::orthonormalize_rows(&Mat::from_column_slice(k, n, &out.x));
            x = u.as_slice().to_vec();
        }
        let u = Mat::from_column_slice(k, n, &x);
        let step = finish(u, diffs, config.tol_rel, MatchMethod::Penalty, false, vec![]);
        if best.as_ref().is_none_or(|b| step.residual < b.residual) {
            best = Some(step);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Keep the leading rows while the residual exceeds tolerance.
fn shrink_to_feasible(step: ProjectionStep, diffs: &[MomentDifference], floor: usize, tol_rel: f64) -> ProjectionStep {
    let mut k = step.r_out;
    let mut cur = step;
    while !cur.feasible && k > floor {
        k -= 1;
        let u = cur.u.rows(0, k).clone_owned();
        cur = ProjectionStep { padded: cur.padded, spectrum: cur.spectrum.clone(), ..finish(u, diffs, tol_rel, cur.method, false, vec![]) };
    }
    cur
}

/// Largest feasible projection, never below `floor_dim`.
pub fn max_dim_match<R: Rng + ?Sized>(moments: &[MomentSet], config: &MatcherConfig, rng: &mut R) -> Result<ProjectionStep> {
    config.validate()?;
    let diffs = moment_differences(moments, config.pairing, config.form)?;
    let n = diffs[0].dim();
    let floor = config.floor_dim.min(n);
    let step = match config.method {
        MatchMethod::Spectral => shrink_to_feasible(spectral_match(&diffs, config)?, &diffs, floor, config.tol_rel),
        MatchMethod::Isotropic => isotropic_match(&diffs, config)?,
        MatchMethod::Penalty => {
            let base: u64 = rng.random();
            let probe = |k: usize| penalty_match_diffs(&diffs, k, config, rng::derive_seed(base, &[k as u64]));
            match config.search {
                DimSearch::Linear => {
                    let mut found = None;
                    for k in (floor..=n).rev() {
                        let s = probe(k)?;
                        if s.feasible || k == floor {
                            found = Some(s);
                            break;
                        }
                    }
                    found.expect("loop reaches the floor")
                }
                DimSearch::Binary => {
                    let low = probe(floor)?;
                    if !low.feasible {
                        low
                    } else {
                        let (mut lo, mut hi) = (floor, n);
                        let mut best = low;
                        while lo < hi {
                            let mid = (lo + hi).div_ceil(2);
                            let s = probe(mid)?;
                            if s.feasible {
                                lo = mid;
                                best = s;
                            } else {
                                hi = mid - 1;
                            }
                        }
                        best
                    }
                }
            }
        }
    };
    if !step.feasible {
        return Err(Error::InfeasibleFloor { floor, residual: step.residual });
    }
    Ok(step)
}

/// Whether the first `k` rows of a step's projection meet the tolerance.
pub fn feasible_at(step: &ProjectionStep, moments: &[MomentSet], config: &MatcherConfig, k: usize) -> Result<bool> {
    let diffs = moment_differences(moments, config.pairing, config.form)?;
    let u = step.u.rows(0, k.min(step.r_out)).clone_owned();
    Ok(finish(u, &diffs, config.tol_rel, step.method, false, vec![]).feasible)
}
