//! Brute-force reference computations for validating the fast scores.
//!
//! Nothing in here runs inside the active-learning loop. The direct
//! summations and the `ndarray` matrix forms are kept as separate code paths
//! so they can check each other.

use ndarray::{Array1, Array2, Axis};

use crate::bayes_mlp::{posterior_mean, PredictiveMatrix};
use crate::datasets::ItemId;
use crate::error::{Error, Result};
use crate::scoring::DIVISION_FLOOR;

/// Joint entries below this are dropped from log sums (`0 ln 0 = 0`).
pub const JOINT_SKIP: f64 = 1e-15;

/// Upper bound on `T · J²` per call.
pub const MAX_WORK: usize = 10_000_000;

/// `P(A = a, A'_t = a')` for one pool item and one test item, row-major `J × J`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMatrix {
    pub pool: ItemId,
    pub test: ItemId,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl JointMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.classes + b]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values
            .chunks_exact(self.classes)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|b| (0..self.classes).map(|a| self.get(a, b)).sum())
            .collect()
    }
}

fn check_pair(pool: &PredictiveMatrix, test: &PredictiveMatrix) -> Result<()> {
    if pool.samples() != test.samples() || pool.draws() != test.draws() {
        return Err(Error::invalid(format!(
            "pool item {} ({:?}) and test item {} ({:?}) do not share parameter draws",
            pool.item(),
            pool.draws(),
            test.item(),
            test.draws()
        )));
    }
    if pool.classes() != test.classes() {
        return Err(Error::shape(
            "pool and test items have different class counts",
        ));
    }
    Ok(())
}

fn check_work(tests: &[PredictiveMatrix], classes: usize) -> Result<()> {
    if tests.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let work = tests.len() * classes * classes;
    assert!(
        work <= MAX_WORK,
        "exact oracle call too large: T·J² = {work}"
    );
    Ok(())
}

/// `(1/M) Σ_m P_m(a) Q_m(a')` by direct summation.
pub fn joint_exact(pool: &PredictiveMatrix, test: &PredictiveMatrix) -> Result<JointMatrix> {
    check_pair(pool, test)?;
    let j = pool.classes();
    let m = pool.samples();
    let mut values = vec![0.0; j * j];
    for s in 0..m {
        let (p, q) = (pool.row(s), test.row(s));
        for a in 0..j {
            for b in 0..j {
                values[a * j + b] += p[a] * q[b];
            }
        }
    }
    values.iter_mut().for_each(|v| *v /= m as f64);
    Ok(JointMatrix {
        pool: pool.item(),
        test: test.item(),
        classes: j,
        values,
    })
}

/// Total mutual information `Σ_t I(A; A'_t)` by direct summation.
pub fn mi_exact(pool: &PredictiveMatrix, tests: &[PredictiveMatrix]) -> Result<f64> {
    check_work(tests, pool.classes())?;
    let p = posterior_mean(pool);
    let mut total = 0.0;
    for test in tests {
        let joint = joint_exact(pool, test)?;
        let q = posterior_mean(test);
        for a in 0..joint.classes {
            for b in 0..joint.classes {
                let pab = joint.get(a, b);
                if pab > JOINT_SKIP {
                    total += pab * (pab / (p[a] * q[b])).ln();
                }
            }
        }
    }
    Ok(total)
}

fn as_array(pm: &PredictiveMatrix) -> Array2<f64> {
    Array2::from_shape_vec((pm.samples(), pm.classes()), pm.as_slice().to_vec())
        .expect("validated shape")
}

fn inverse_marginal(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0))
        .expect("at least one sample")
        .mapv(|p| 1.0 / p.max(DIVISION_FLOOR))
}

/// Joint and marginal-normalised ratio matrices `(P, D₁⁻¹ P D₂⁻¹)` with
/// `P = (1/M) M₁ᵀ M₂`.
fn matrix_terms(
    m1: &Array2<f64>,
    d1_inv: &Array1<f64>,
    test: &PredictiveMatrix,
) -> (Array2<f64>, Array2<f64>) {
    let m2 = as_array(test);
    let joint = m1.t().dot(&m2) / m1.nrows() as f64;
    let d2_inv = inverse_marginal(&m2);
    let d1 = Array2::from_diag(d1_inv);
    let d2 = Array2::from_diag(&d2_inv);
    let ratio = d1.dot(&joint).dot(&d2);
    (joint, ratio)
}

/// Total mutual information via the matrix form
/// `Σ_t Sum{P_t ∘ log(D₁⁻¹ P_t D₂(t)⁻¹)}`; algebraically identical to
/// [`mi_exact`].
pub fn mi_matrix_form(pool: &PredictiveMatrix, tests: &[PredictiveMatrix]) -> Result<f64> {
    check_work(tests, pool.classes())?;
    let m1 = as_array(pool);
    let d1_inv = inverse_marginal(&m1);
    let mut total = 0.0;
    for test in tests {
        check_pair(pool, test)?;
        let (joint, ratio) = matrix_terms(&m1, &d1_inv, test);
        total += ndarray::Zip::from(&joint)
            .and(&ratio)
            .fold(0.0, |acc, &p, &r| {
                if p > JOINT_SKIP {
                    acc + p * r.ln()
                } else {
                    acc
                }
            });
    }
    Ok(total)
}

/// The goal score after substituting `x ln x ≈ ½(x² − x)` but before the
/// trace rearrangement: `Σ_t ½ Sum{−P_t + P_t ∘ (D₁⁻¹ P_t D₂(t)⁻¹)}`.
///
/// Equal to the fast dot-product score up to rounding.
pub fn goal_taylor_matrix_form(pool: &PredictiveMatrix, tests: &[PredictiveMatrix]) -> Result<f64> {
    check_work(tests, pool.classes())?;
    let m1 = as_array(pool);
    let d1_inv = inverse_marginal(&m1);
    let mut total = 0.0;
    for test in tests {
        check_pair(pool, test)?;
        let (joint, ratio) = matrix_terms(&m1, &d1_inv, test);
        total += 0.5 * (-joint.sum() + (&joint * &ratio).sum());
    }
    Ok(total)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks. `None` when either
/// input is constant.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("need at least two observations"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in rank correlation input"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0)))
}
