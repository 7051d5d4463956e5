//! Small dense linear-algebra helpers on top of nalgebra.

use crate::error::{Error, Result};
use crate::{Mat, Vector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    // Filled row by row so the draw order matches the row-major serialization.
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

pub fn gaussian_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vector {
    Vector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with sign correction).
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Mat {
    let g = gaussian_matrix(d, d, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    q
}

/// Matrix with `k` orthonormal rows drawn uniformly from the Stiefel manifold.
pub fn random_orthonormal_rows<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> Mat {
    let g = gaussian_matrix(k, n, rng);
    orthonormalize_rows(&g)
}

/// Orthonormal basis of the row space of `u`, preserving the row count.
pub fn orthonormalize_rows(u: &Mat) -> Mat {
    let qr = u.transpose().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    q.transpose()
}

pub fn orthonormality_error(u: &Mat) -> f64 {
    let k = u.nrows();
    (u * u.transpose() - Mat::identity(k, k)).norm()
}

pub fn symmetry_error(m: &Mat) -> f64 {
    (m - m.transpose()).norm()
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eigen_sorted(m: &Mat) -> (Vec<f64>, Mat) {
    let n = m.nrows();
    if n == 0 {
        return (vec![], Mat::zeros(0, 0));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        // Deterministic sign: largest-magnitude entry positive.
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(k, &col);
    }
    (values, vectors)
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

/// Spectral norm of a symmetric matrix.
pub fn sym_spectral_norm(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().amax()
}

pub fn require_spd(m: &Mat, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!("{what} is {}x{}", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    if symmetry_error(m) > 1e-10 * scale {
        return Err(Error::NotSymmetric(what.to_string()));
    }
    if !(min_eigenvalue(m) > 0.0) {
        return Err(Error::NotSpd(what.to_string()));
    }
    Ok(())
}

/// Numerical rank from singular values relative to the largest one.
pub fn numerical_rank(m: &Mat, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Angle between two vectors in radians, accurate for tiny angles.
pub fn vector_angle(a: &Vector, b: &Vector) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    let a = a / na;
    let b = b / nb;
    let cos = a.dot(&b);
    let sin = (&a - &b * cos).norm();
    sin.atan2(cos)
}

/// Largest principal angle between the row spaces of two row-orthonormal matrices.
pub fn max_principal_angle(u1: &Mat, u2: &Mat) -> f64 {
    if u1.nrows() != u2.nrows() {
        return std::f64::consts::FRAC_PI_2;
    }
    if u1.nrows() == 0 {
        return 0.0;
    }
    let proj = u2.transpose() * (u2 * u1.transpose());
    let resid = u1.transpose() - proj;
    let s = resid.singular_values().max().min(1.0);
    s.asin()
}

/// Row-major (de)serialization of matrices as arrays of rows.
pub mod serde_rows {
    use crate::Mat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Vectors as flat arrays.
pub mod serde_vec {
    use crate::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Ok(Vector::from_vec(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = stream(3, Purpose::Mixing, 0);
        let q = random_orthogonal(12, &mut rng);
        assert!(orthonormality_error(&q) < 1e-12);
    }

    #[test]
    fn principal_angle_of_same_space_is_zero() {
        let mut rng = stream(4, Purpose::Mixing, 0);
        let u = random_orthonormal_rows(3, 9, &mut rng);
        let q = random_orthogonal(3, &mut rng);
        let v = &q * &u;
        assert!(max_principal_angle(&u, &v) < 1e-7);
    }

    #[test]
    fn small_vector_angles_are_resolved() {
        let a = Vector::from_vec(vec![1.0, 0.0]);
        let b = Vector::from_vec(vec![1.0, 1e-10]);
        let ang = vector_angle(&a, &b);
        assert!((ang - 1e-10).abs() < 1e-20);
    }

    #[test]
    fn rows_roundtrip() {
        let m = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = serde_rows::to_rows(&m);
        assert_eq!(rows[0], vec![1.0, 2.0, 3.0]);
        assert_eq!(serde_rows::from_rows(&rows).unwrap(), m);
    }
}
