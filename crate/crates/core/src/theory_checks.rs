//! Executable checks of the lower bounds and of the shrink-rate lemma.

use crate::algorithms::FeaturizerStack;
use crate::env_model::{flip_test_environment, EnvParams, ModelSpec};
use crate::error::{Error, Result};
use crate::gaussian_risk::{standard_normal_cdf, zero_one_accuracy, LinearClassifier};
use crate::linalg;
use crate::{Mat, Vector};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Outcome of the ERM lower-bound check on one classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmVerdict {
    /// False when the instance is not isotropic (the check then says nothing).
    pub hypotheses_hold: bool,
    pub reason: Option<String>,
    pub gamma_min: f64,
    pub threshold: f64,
    /// `gamma_min >= threshold`
    pub applicable: bool,
    /// Applicable and some flipped environment is classified better than chance.
    pub violated: bool,
    pub test_accuracies: Vec<f64>,
}

fn isotropic_scale(m: &Mat, tol: f64) -> Option<f64> {
    let s = m[(0, 0)];
    let iso = Mat::identity(m.nrows(), m.ncols()) * s;
    ((m - iso).amax() <= tol * s.abs().max(1.0) && s > 0.0).then(|| s.sqrt())
}

fn hypotheses(spec: &ModelSpec, envs: &[EnvParams]) -> std::result::Result<(f64, f64), String> {
    if envs.is_empty() {
        return Err("no training environments".into());
    }
    if envs.len() > spec.d_s {
        return Err(format!("E = {} exceeds d_s = {}", envs.len(), spec.d_s));
    }
    let d = spec.d();
    if (spec.s.transpose() * &spec.s - Mat::identity(d, d)).amax() > 1e-10 {
        return Err("mixing matrix is not orthogonal".into());
    }
    let s1 = isotropic_scale(&spec.sigma1, 1e-12).ok_or("Sigma1 is not isotropic")?;
    let s2 = isotropic_scale(&envs[0].sigma2_bar, 1e-12).ok_or("bias is not a positive multiple of the identity")?;
    for e in envs {
        match isotropic_scale(&e.sigma2_bar, 1e-12) {
            Some(s) if (s - s2).abs() <= 1e-12 * s2 => {}
            _ => return Err(format!("environment {} has a different bias", e.index)),
        }
        if e.flipped {
            return Err(format!("environment {} is a test environment", e.index));
        }
    }
    Ok((s1, s2))
}

/// Checks that a classifier accurate on every training environment fails on every flipped one.
pub fn erm_lower_bound_check(clf: &LinearClassifier, spec: &ModelSpec, train: &[EnvParams]) -> Result<ErmVerdict> {
    let tests = train.iter().map(flip_test_environment).collect::<Result<Vec<_>>>()?;
    erm_lower_bound_check_against(clf, spec, train, &tests)
}

/// Same check against explicitly supplied test environments.
pub fn erm_lower_bound_check_against(clf: &LinearClassifier, spec: &ModelSpec, train: &[EnvParams], tests: &[EnvParams]) -> Result<ErmVerdict> {
    if clf.v.len() != spec.d() {
        return Err(Error::DimensionMismatch(format!("classifier {} vs model {}", clf.v.len(), spec.d())));
    }
    let unit = LinearClassifier::normalized(clf.v.clone())?;
    let gamma_min = train.iter().map(|e| zero_one_accuracy(&unit, spec, e)).fold(f64::INFINITY, f64::min);
    let test_accuracies: Vec<f64> = tests.iter().map(|e| zero_one_accuracy(&unit, spec, e)).collect();
    match hypotheses(spec, train) {
        Err(reason) => Ok(ErmVerdict {
            hypotheses_hold: false,
            reason: Some(reason),
            gamma_min,
            threshold: f64::NAN,
            applicable: false,
            violated: false,
            test_accuracies,
        }),
        Ok((s1, s2)) => {
            let threshold = standard_normal_cdf(2.0 * spec.mu1.norm() / s1.min(s2));
            let applicable = gamma_min >= threshold;
            let violated = applicable && test_accuracies.iter().any(|&a| a > 0.5 + 1e-9);
            Ok(ErmVerdict { hypotheses_hold: true, reason: None, gamma_min, threshold, applicable, violated, test_accuracies })
        }
    }
}

/// `E` ellipsoids `u' A_e u = b_e' u`, all passing through the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidSystem {
    pub a_list: Vec<Mat>,
    pub b_list: Vec<Vector>,
}

impl EllipsoidSystem {
    pub fn new(a_list: Vec<Mat>, b_list: Vec<Vector>) -> Result<Self> {
        let e = a_list.len();
        if e == 0 || b_list.len() != e {
            return Err(Error::DimensionMismatch(format!("{} matrices and {} vectors", e, b_list.len())));
        }
        let n = a_list[0].nrows();
        for a in &a_list {
            if a.shape() != (n, n) {
                return Err(Error::DimensionMismatch("matrices differ in size".into()));
            }
            linalg::require_spd(a, "ellipsoid matrix")?;
        }
        if b_list.iter().any(|b| b.len() != n) {
            return Err(Error::DimensionMismatch("vectors differ in length".into()));
        }
        if e > n {
            return Err(Error::InvalidParameter(format!("{e} ellipsoids in dimension {n}")));
        }
        let b = Mat::from_fn(n, e, |i, j| b_list[j][i]);
        if linalg::numerical_rank(&b, 1e-10) < e {
            return Err(Error::RankDeficient("ellipsoid centres are linearly dependent".into()));
        }
        Ok(EllipsoidSystem { a_list, b_list })
    }

    /// Built from the spurious covariances and means of training environments.
    pub fn from_envs(envs: &[EnvParams]) -> Result<Self> {
        Self::new(envs.iter().map(|e| e.sigma2.clone()).collect(), envs.iter().map(|e| e.mu2.clone()).collect())
    }

    pub fn dim(&self) -> usize {
        self.b_list[0].len()
    }

    pub fn equations(&self, u: &Vector) -> Vector {
        Vector::from_iterator(self.a_list.len(), self.a_list.iter().zip(&self.b_list).map(|(a, b)| u.dot(&(a * u)) - b.dot(u)))
    }

    /// Largest absolute equation value.
    pub fn residual(&self, u: &Vector) -> f64 {
        self.equations(u).amax()
    }

    fn jacobian(&self, u: &Vector) -> Mat {
        let n = self.dim();
        let mut j = Mat::zeros(self.a_list.len(), n);
        for (e, (a, b)) in self.a_list.iter().zip(&self.b_list).enumerate() {
            let row = a * u * 2.0 - b;
            j.set_row(e, &row.transpose());
        }
        j
    }

    /// Per-environment least-squares weight on the feature `u' x`: `(u' A u)^-1 u' b`.
    pub fn induced_weights(&self, u: &Vector) -> Vec<f64> {
        self.a_list.iter().zip(&self.b_list).map(|(a, b)| b.dot(u) / u.dot(&(a * u))).collect()
    }

    /// Point on the first ellipsoid indexed by a unit vector `c`.
    pub fn ellipsoid_point(&self, c: &Vector) -> Vector {
        let (a, b) = (&self.a_list[0], &self.b_list[0]);
        let centre = a.clone().cholesky().expect("validated SPD").solve(b) / 2.0;
        let radius = (b.dot(&centre) * 2.0).max(0.0).sqrt() / 2.0;
        let (vals, vecs) = linalg::sym_eigen_sorted(a);
        let mut x = centre;
        for i in 0..vals.len() {
            x += vecs.column(i) * (radius * c[i] / vals[i].sqrt());
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RootSearchConfig {
    /// Random Newton starts, used only when curve tracing does not end at a root.
    pub starts: usize,
    pub max_newton: usize,
    pub tol: f64,
    pub min_norm: f64,
    /// Continuation steps allowed along the curve through the origin.
    pub max_trace_steps: usize,
}

impl Default for RootSearchConfig {
    fn default() -> Self {
        RootSearchConfig { starts: 64, max_newton: 100, tol: 1e-8, min_norm: 1e-4, max_trace_steps: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrmSolution {
    #[serde(with = "crate::linalg::serde_vec")]
    pub u: Vector,
    pub residual: f64,
    pub success: bool,
    /// Random restarts consumed; 0 when the traced curve gave the root.
    pub starts_used: usize,
    /// Spread (max - min) of the induced per-environment weights.
    pub weight_spread: f64,
}

fn newton(system: &EllipsoidSystem, mut u: Vector, cfg: &RootSearchConfig) -> Vector {
    let mut f = system.equations(&u);
    for _ in 0..cfg.max_newton {
        let fnorm = f.norm();
        if fnorm <= cfg.tol * 1e-4 {
            break;
        }
        let j = system.jacobian(&u);
        let Ok(jp) = j.pseudo_inverse(1e-14) else { break };
        let step = -(jp * &f);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &u + &step * alpha;
            let fc = system.equations(&cand);
            if fc.norm() < fnorm {
                u = cand;
                f = fc;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    u
}

impl EllipsoidSystem {
    /// Restriction to `span(b)`, where the system is square. `None` when already square.
    fn restricted(&self) -> Option<(EllipsoidSystem, Mat)> {
        let (n, e) = (self.dim(), self.a_list.len());
        if e == n {
            return None;
        }
        let b = Mat::from_fn(n, e, |i, j| self.b_list[j][i]);
        let q = b.qr().q();
        let a_list = self.a_list.iter().map(|a| linalg::symmetrize(&(q.transpose() * a * &q))).collect();
        let b_list = self.b_list.iter().map(|v| q.transpose() * v).collect();
        Some((EllipsoidSystem { a_list, b_list }, q))
    }

    /// Radius of a ball holding the common points of all but the last ellipsoid.
    fn curve_extent(&self) -> f64 {
        let k = self.a_list.len() - 1;
        self.a_list[..k].iter().zip(&self.b_list).map(|(a, b)| b.norm() / linalg::min_eigenvalue(a)).fold(f64::INFINITY, f64::min)
    }
}

/// Unit null vector of the first `n - 1` Jacobian rows, oriented along `prev`.
fn curve_tangent(system: &EllipsoidSystem, x: &Vector, prev: Option<&Vector>) -> Vector {
    let n = system.dim();
    let j = system.jacobian(x).rows(0, n - 1).clone_owned();
    let (_, vecs) = linalg::sym_eigen_sorted(&(j.transpose() * j));
    let t = vecs.column(0).clone_owned();
    match prev {
        Some(p) if t.dot(p) < 0.0 => -t,
        _ => t,
    }
}

/// Newton onto the curve inside the hyperplane through `xp` normal to `t`.
fn curve_correct(system: &EllipsoidSystem, xp: &Vector, t: &Vector, step_tol: f64) -> Option<Vector> {
    let n = system.dim();
    let mut y = xp.clone();
    let mut last = f64::INFINITY;
    for _ in 0..12 {
        let f = system.equations(&y);
        let mut r = Vector::zeros(n);
        r.rows_mut(0, n - 1).copy_from(&f.rows(0, n - 1));
        r[n - 1] = t.dot(&(&y - xp));
        let mut j = system.jacobian(&y);
        j.set_row(n - 1, &t.transpose());
        let dy = j.lu().solve(&(-r))?;
        let size = dy.norm();
        if !size.is_finite() || size > last {
            return None;
        }
        y += dy;
        if size <= step_tol {
            return Some(y);
        }
        last = size;
    }
    None
}

/// Follows the curve cut out by all but the last ellipsoid, starting at the
/// origin, until the last equation changes sign away from it. On a generic
/// square system that curve is a closed loop crossing the last ellipsoid
/// transversally at the origin, so it has to cross it once more. A loop that
/// closes without a detected crossing is retried with shorter steps.
fn trace_root(system: &EllipsoidSystem, cfg: &RootSearchConfig) -> Option<Vector> {
    let n = system.dim();
    if n == 1 {
        return Some(Vector::from_element(1, system.b_list[0][0] / system.a_list[0][(0, 0)]));
    }
    let scale = system.curve_extent();
    if !(scale.is_finite() && scale > 0.0) {
        return None;
    }
    let mut budget = cfg.max_trace_steps;
    for h_max in [0.05, 0.005, 0.0005] {
        match trace_loop(system, cfg, scale, h_max * scale, &mut budget) {
            Trace::Root(u) => return Some(u),
            Trace::Closed => continue,
            Trace::Stuck => return None,
        }
    }
    None
}

enum Trace {
    Root(Vector),
    Closed,
    Stuck,
}

fn trace_loop(system: &EllipsoidSystem, cfg: &RootSearchConfig, scale: f64, h_max: f64, budget: &mut usize) -> Trace {
    let n = system.dim();
    let h_min = 1e-12 * scale;
    let floor = 1e-9 * scale;
    let mut h = floor;
    let mut x = Vector::zeros(n);
    let mut t = curve_tangent(system, &x, None);
    let mut g: f64 = 0.0;
    let mut far = 0.0f64;
    while *budget > 0 {
        *budget -= 1;
        let xp = &x + &t * h;
        let next = curve_correct(system, &xp, &t, 1e-13 * scale).and_then(|y| {
            let ty = curve_tangent(system, &y, Some(&t));
            ((&y - &xp).norm() <= 0.5 * h && ty.dot(&t) > 0.98 && (&y - &x).dot(&t) > 0.0).then_some((y, ty))
        });
        let Some((y, ty)) = next else {
            h *= 0.5;
            if h < h_min {
                return Trace::Stuck;
            }
            continue;
        };
        let gy = system.equations(&y)[n - 1];
        if g != 0.0 && gy.signum() != g.signum() {
            if let Some(u) = locate_crossing(system, &x, &y, g, gy, scale, cfg) {
                return Trace::Root(u);
            }
        }
        far = far.max(y.norm());
        if far > 4.0 * h_max && y.norm() < 4.0 * floor {
            return Trace::Closed;
        }
        x = y;
        t = ty;
        g = gy;
        // Short steps near the origin keep a nearby root from sharing a step with it.
        h = (h * 1.5).min(h_max).min((0.25 * x.norm()).max(floor));
    }
    Trace::Stuck
}

/// Regula falsi (Illinois) on the last equation between two curve points, then a Newton polish.
fn locate_crossing(system: &EllipsoidSystem, x: &Vector, y: &Vector, gx: f64, gy: f64, scale: f64, cfg: &RootSearchConfig) -> Option<Vector> {
    let n = system.dim();
    let chord = y - x;
    let dir = chord.normalize();
    let (mut lo, mut hi, mut g_lo, mut g_hi) = (0.0, 1.0, gx, gy);
    let mut p = y.clone();
    for _ in 0..100 {
        let s = (lo * g_hi - hi * g_lo) / (g_hi - g_lo);
        p = curve_correct(system, &(x + &chord * s), &dir, 1e-14 * scale)?;
        let gp = system.equations(&p)[n - 1];
        if gp == 0.0 || hi - lo <= 1e-15 {
            break;
        }
        if gp.signum() == g_lo.signum() {
            lo = s;
            g_lo = gp;
            g_hi *= 0.5;
        } else {
            hi = s;
            g_hi = gp;
            g_lo *= 0.5;
        }
    }
    let u = newton(system, p.clone(), cfg);
    [u, p].into_iter().find(|u| u.norm() >= cfg.min_norm && system.residual(u) <= cfg.tol)
}

fn solution(system: &EllipsoidSystem, u: Vector, success: bool, starts_used: usize) -> IrmSolution {
    let residual = system.residual(&u);
    let w = system.induced_weights(&u);
    let spread = w.iter().copied().fold(f64::NEG_INFINITY, f64::max) - w.iter().copied().fold(f64::INFINITY, f64::min);
    IrmSolution { u, residual, success, starts_used, weight_spread: spread }
}

/// Searches for a nonzero common point of the ellipsoids.
///
/// Curve tracing from the origin first; random-start Newton on the first
/// ellipsoid if that does not produce a root.
pub fn irm_spurious_solution_find<R: Rng + ?Sized>(system: &EllipsoidSystem, cfg: &RootSearchConfig, rng: &mut R) -> IrmSolution {
    let n = system.dim();
    let traced = match system.restricted() {
        Some((sq, q)) => trace_root(&sq, cfg).map(|y| newton(system, q * y, cfg)),
        None => trace_root(system, cfg),
    };
    if let Some(u) = traced {
        if u.norm() >= cfg.min_norm && system.residual(&u) <= cfg.tol {
            return solution(system, u, true, 0);
        }
    }
    let mut best: Option<(Vector, f64)> = None;
    for start in 0..cfg.starts {
        let mut c = linalg::gaussian_vector(n, rng);
        while c.norm() == 0.0 {
            c = linalg::gaussian_vector(n, rng);
        }
        let u = newton(system, system.ellipsoid_point(&c.normalize()), cfg);
        if u.norm() < cfg.min_norm {
            continue;
        }
        let res = system.residual(&u);
        if res <= cfg.tol {
            return solution(system, u, true, start + 1);
        }
        if best.as_ref().is_none_or(|(_, r)| res < *r) {
            best = Some((u, res));
        }
    }
    match best {
        Some((u, _)) => solution(system, u, false, cfg.starts),
        None => IrmSolution { u: Vector::zeros(n), residual: 0.0, success: false, starts_used: cfg.starts, weight_spread: f64::NAN },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkVerdict {
    pub passed: bool,
    /// 1-based index of the first round breaking the inequality.
    pub first_violation: Option<usize>,
    pub rounds: usize,
    pub round_bound: usize,
    pub dims: Vec<usize>,
}

/// Smallest `k` with `c^k >= x`.
fn ceil_log(c: f64, x: usize) -> usize {
    let mut k = 0;
    let mut p = 1.0;
    while p < x as f64 {
        p *= c;
        k += 1;
    }
    k
}

/// `r_t - r < (r_{t-1} - r + 1) / c` on every round and at most `ceil(log_c d_s) + 2` rounds.
pub fn shrink_check_dims(dims: &[usize], r: usize, c: f64) -> Result<ShrinkVerdict> {
    if !(c > 1.0) {
        return Err(Error::InvalidParameter("shrink factor must exceed 1".into()));
    }
    let first = *dims.first().ok_or_else(|| Error::InvalidParameter("no dimensions recorded".into()))?;
    if dims.iter().any(|&k| k < r) {
        return Err(Error::InvalidParameter("a round went below the invariant dimension".into()));
    }
    let d_s = first - r;
    let round_bound = ceil_log(c, d_s.max(1)) + 2;
    let first_violation = dims
        .windows(2)
        .position(|w| ((w[1] - r) as f64) >= (w[0] - r + 1) as f64 / c)
        .map(|i| i + 1);
    let rounds = dims.len() - 1;
    Ok(ShrinkVerdict { passed: first_violation.is_none() && rounds <= round_bound, first_violation, rounds, round_bound, dims: dims.to_vec() })
}

pub fn ifm_shrink_check(stack: &FeaturizerStack, r: usize, c: f64) -> Result<ShrinkVerdict> {
    shrink_check_dims(&stack.dims(), r, c)
}

/// Frobenius norm of the spurious columns of `m S`; `m` is a featurizer (`k x d`) or a predictor row.
pub fn spurious_leak(m: &Mat, spec: &ModelSpec) -> Result<f64> {
    if m.ncols() != spec.d() {
        return Err(Error::DimensionMismatch(format!("{} columns vs model dimension {}", m.ncols(), spec.d())));
    }
    Ok((m * spec.spurious_block()).norm())
}

pub fn spurious_leak_vector(v: &Vector, spec: &ModelSpec) -> Result<f64> {
    spurious_leak(&Mat::from_row_slice(1, v.len(), v.as_slice()), spec)
}
