use super::{Algorithm, Diagnostics, TrainedPredictor};
use crate::env_model::{ModelSpec, MomentSet};
use crate::error::{Error, Result};
use crate::linalg;
use crate::{Mat, Vector};

/// Two-environment closed form.
///
/// The difference of class-+1 covariances spans the spurious directions. After
/// projecting them out, `w = Sigma'^+ mu'`, with the pseudo-inverse truncated
/// at the known rank `d - d_s`.
pub fn simple_algo(m_e: &MomentSet, m_f: &MomentSet, d_s: usize) -> Result<TrainedPredictor> {
    let d = m_e.dim();
    if m_f.dim() != d {
        return Err(Error::DimensionMismatch("moment sets differ in dimension".into()));
    }
    if d_s == 0 || d_s >= d {
        return Err(Error::InvalidParameter(format!("spurious dimension {d_s} outside 1..{d}")));
    }
    let cov_e = m_e.cov_pos();
    let b = linalg::symmetrize(&(&cov_e - m_f.cov_pos()));
    let svd = b.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
    let top = svd.singular_values[order[0]];
    let last = svd.singular_values[order[d_s - 1]];
    if !(top > 0.0) || last <= 1e-9 * top {
        return Err(Error::RankDeficient(format!("covariance difference has fewer than {d_s} significant singular values")));
    }
    let q = Mat::from_fn(d, d_s, |i, j| u[(i, order[j])]);
    let p = Mat::identity(d, d) - &q * q.transpose();
    let mu = &p * &m_e.mean_pos;
    let sigma = linalg::symmetrize(&(&p * cov_e * &p));
    let (vals, vecs) = linalg::sym_eigen_sorted(&sigma);
    let mut w = Vector::zeros(d);
    for k in d_s..d {
        let col = vecs.column(k);
        w += col * (col.dot(&mu) / vals[k]);
    }
    TrainedPredictor::new(w, Algorithm::Simple, Diagnostics::default())
}

/// The invariant predictor: `A' w = Sigma1^-1 mu1` with `w` orthogonal to the columns of `B`.
pub fn oracle_w_star(spec: &ModelSpec) -> Result<TrainedPredictor> {
    let a = spec.invariant_block();
    let b = spec.spurious_block();
    let d = spec.d();
    let target = spec.sigma1.clone().cholesky().ok_or_else(|| Error::NotSpd("Sigma1".into()))?.solve(&spec.mu1);
    let (vals, vecs) = linalg::sym_eigen_sorted(&(&b * b.transpose()));
    let top = vals.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..d).filter(|&i| vals[i] <= 1e-12 * top).collect();
    let n = Mat::from_fn(d, keep.len(), |i, j| vecs[(i, keep[j])]);
    let an = a.transpose() * &n;
    let y = an.pseudo_inverse(1e-13).map_err(|e| Error::RankDeficient(e.to_string()))? * target;
    let w = n * y;
    TrainedPredictor::new(w, Algorithm::Oracle, Diagnostics::default())
}
