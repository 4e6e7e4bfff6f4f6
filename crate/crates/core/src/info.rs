//! Closed-form Gaussian information quantities and discrete mutual
//! information. All values are in nats.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on the total mass of a [`JointPmf`].
pub const PMF_MASS_TOL: f64 = 1e-12;

/// Isotropic Gaussian `N(mean, variance * I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag {
    mean: Vec<f64>,
    variance: f64,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::NonPositiveVariance(variance));
        }
        Ok(Self { mean, variance })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(p || q)` for isotropic Gaussians:
/// `½ [‖μp − μq‖² / σq² + n σp² / σq² − n + n ln(σq² / σp²)]`.
pub fn kl_gaussian(p: &GaussianDiag, q: &GaussianDiag) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape {
            op: "kl_gaussian",
            detail: format!("dims {} vs {}", p.dim(), q.dim()),
        });
    }
    let n = p.dim() as f64;
    let mahalanobis: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / q.variance;
    let ratio = p.variance / q.variance;
    Ok(0.5 * (mahalanobis + n * ratio - n - n * ratio.ln()))
}

/// Per-dimension `KL(N(m, s²) || N(0, σ²))` written via `t = s²/σ²`, clamped
/// at zero against rounding.
pub fn kl_to_isotropic_prior(mean: f64, variance: f64, prior_variance: f64) -> f64 {
    let t = variance / prior_variance;
    let kl = 0.5 * (mean * mean / prior_variance + t - 1.0 - t.ln());
    kl.max(0.0)
}

fn check_sup_args(lambda: f64, variance: f64) -> Result<()> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::NonPositiveVariance(variance));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Upper bound on `I(z̃(λ), x)` for `z̃ = λ z + ε`, `ε ~ N(0, σ² I)`:
/// `½ λ² ‖z‖² / σ²`.
pub fn sup_mi_bound(z: &Tensor, lambda: f64, variance: f64) -> Result<f64> {
    check_sup_args(lambda, variance)?;
    let sq: f64 = z.data().iter().map(|v| v * v).sum();
    Ok(0.5 * lambda * lambda * sq / variance)
}

/// Empirical expectation of [`sup_mi_bound`] over samples.
pub fn sup_mi_bound_batch(zs: &[Tensor], lambda: f64, variance: f64) -> Result<f64> {
    if zs.is_empty() {
        return Err(Error::Empty("sup_mi_bound_batch samples"));
    }
    let mut total = 0.0;
    for z in zs {
        total += sup_mi_bound(z, lambda, variance)?;
    }
    Ok(total / zs.len() as f64)
}

/// `{0, 0.1, ..., 1.0}` computed as `k / 10`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct NarrowingCase {
    pub variance: f64,
    pub bounds: Vec<f64>,
    pub strictly_increasing: bool,
    pub zero_at_zero: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct NarrowingReport {
    pub lambdas: Vec<f64>,
    pub cases: Vec<NarrowingCase>,
    /// `z` had zero norm, so every bound is 0; reported, not failed.
    pub degenerate: bool,
}

impl NarrowingReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| {
            let zero_ok = !self.lambdas.first().is_some_and(|&l| l == 0.0) || c.zero_at_zero;
            zero_ok && (self.degenerate || c.strictly_increasing)
        })
    }
}

/// Evaluates the bound along `lambdas` (ascending) for each variance and
/// checks strict monotonicity and an exact zero at `λ = 0`.
pub fn verify_narrowing(z: &Tensor, lambdas: &[f64], variances: &[f64]) -> Result<NarrowingReport> {
    if lambdas.is_empty() || variances.is_empty() {
        return Err(Error::Empty("narrowing grid"));
    }
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Parameter(
            "lambda grid must be strictly ascending".into(),
        ));
    }
    let degenerate = z.data().iter().all(|v| *v == 0.0);
    let mut cases = Vec::with_capacity(variances.len());
    for &variance in variances {
        let bounds = lambdas
            .iter()
            .map(|&l| sup_mi_bound(z, l, variance))
            .collect::<Result<Vec<_>>>()?;
        let strictly_increasing = bounds.windows(2).all(|w| w[0] < w[1]);
        let zero_at_zero = lambdas
            .iter()
            .zip(&bounds)
            .filter(|(l, _)| **l == 0.0)
            .all(|(_, b)| *b == 0.0);
        cases.push(NarrowingCase {
            variance,
            bounds,
            strictly_increasing,
            zero_at_zero,
        });
    }
    Ok(NarrowingReport {
        lambdas: lambdas.to_vec(),
        cases,
        degenerate,
    })
}

/// Joint distribution `p(x, y)` over a finite grid (rows index `x`).
#[derive(Clone, Debug, PartialEq)]
pub struct JointPmf {
    rows: usize,
    cols: usize,
    p: Vec<f64>,
}

fn xlogx_ratio(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

fn entropy(probs: impl IntoIterator<Item = f64>) -> f64 {
    -probs
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

impl JointPmf {
    pub fn new(rows: usize, cols: usize, p: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || p.len() != rows * cols {
            return Err(Error::Distribution(format!(
                "{rows}x{cols} grid with {} entries",
                p.len()
            )));
        }
        if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Distribution(format!(
                "entry {v} is negative or non-finite"
            )));
        }
        let mass: f64 = p.iter().sum();
        if (mass - 1.0).abs() > PMF_MASS_TOL {
            return Err(Error::Distribution(format!("total mass {mass} != 1")));
        }
        Ok(Self { rows, cols, p })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.p[x * self.cols + y]
    }

    pub fn transpose(&self) -> Self {
        let mut p = vec![0.0; self.p.len()];
        for x in 0..self.rows {
            for y in 0..self.cols {
                p[y * self.rows + x] = self.get(x, y);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            p,
        }
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|x| (0..self.cols).map(|y| self.get(x, y)).sum())
            .collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|y| (0..self.rows).map(|x| self.get(x, y)).sum())
            .collect()
    }

    pub fn entropy_x(&self) -> f64 {
        entropy(self.marginal_x())
    }

    pub fn entropy_y(&self) -> f64 {
        entropy(self.marginal_y())
    }

    pub fn joint_entropy(&self) -> f64 {
        entropy(self.p.iter().copied())
    }

    /// `H(X|Y) = -Σ p(x,y) ln p(x|y)`.
    pub fn conditional_entropy_x_given_y(&self) -> f64 {
        let py = self.marginal_y();
        let mut h = 0.0;
        for x in 0..self.rows {
            for (y, &pyv) in py.iter().enumerate() {
                let pxy = self.get(x, y);
                if pxy > 0.0 {
                    h -= pxy * (pxy / pyv).ln();
                }
            }
        }
        h
    }

    pub fn conditional_entropy_y_given_x(&self) -> f64 {
        self.transpose().conditional_entropy_x_given_y()
    }

    /// `E_Y[KL(p(x|y) || p(x))]`.
    pub fn expected_conditional_kl(&self) -> f64 {
        let (px, py) = (self.marginal_x(), self.marginal_y());
        let mut total = 0.0;
        for (y, &pyv) in py.iter().enumerate() {
            if pyv == 0.0 {
                continue;
            }
            let kl: f64 = (0..self.rows)
                .map(|x| xlogx_ratio(self.get(x, y) / pyv, px[x]))
                .sum();
            total += pyv * kl;
        }
        total
    }
}

/// `I(X;Y) = Σ p(x,y) ln[p(x,y) / (p(x) p(y))]`, with `0 ln 0 = 0`.
pub fn mutual_info_discrete(j: &JointPmf) -> f64 {
    let (px, py) = (j.marginal_x(), j.marginal_y());
    let mut total = 0.0;
    for (x, &pxv) in px.iter().enumerate() {
        for (y, &pyv) in py.iter().enumerate() {
            total += xlogx_ratio(j.get(x, y), pxv * pyv);
        }
    }
    total
}
