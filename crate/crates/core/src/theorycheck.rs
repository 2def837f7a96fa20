//! Numerical check that optimizing two convex losses jointly ends no worse
//! than optimizing them one after the other.
//!
//! Both optimizers run plain gradient descent from zero on quadratics
//! `(x - c)^T A (x - c)` with `A` positive semi-definite. At convergence the
//! joint optimum minimizes `L_A + L_B`, so its total can never exceed the
//! total at the sequential optimum.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const SYMMETRY_TOL: f64 = 1e-9;
pub const PSD_TOL: f64 = 1e-9;
/// A trial counts only if every optimizer ended below this gradient norm.
pub const CONVERGED_GRAD_NORM: f64 = 1e-6;
/// Slack allowed on the inequality.
pub const MARGIN_TOL: f64 = 1e-9;
const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    a: DMatrix<f64>,
    center: DVector<f64>,
}

impl QuadraticLoss {
    pub fn new(a: DMatrix<f64>, center: DVector<f64>) -> Result<Self> {
        let d = center.len();
        if a.nrows() != d || a.ncols() != d {
            return Err(Error::Argument(format!(
                "matrix is {}x{}, center has dim {d}",
                a.nrows(),
                a.ncols()
            )));
        }
        if (&a - a.transpose()).amax() > SYMMETRY_TOL {
            return Err(Error::Argument("matrix is not symmetric".into()));
        }
        let min_eig = a.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -PSD_TOL {
            return Err(Error::Argument(format!(
                "matrix is not positive semi-definite (eigenvalue {min_eig})"
            )));
        }
        Ok(Self { a, center })
    }

    /// One-dimensional `scale * (x - c)^2`.
    pub fn scalar(scale: f64, c: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, scale),
            DVector::from_element(1, c),
        )
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn loss(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.center;
        r.dot(&(&self.a * &r))
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        2.0 * (&self.a * (x - &self.center))
    }

    pub fn largest_eigenvalue(&self) -> f64 {
        self.a.clone().symmetric_eigen().eigenvalues.max()
    }
}

fn check_pair(la: &QuadraticLoss, lb: &QuadraticLoss) -> Result<()> {
    if la.dim() != lb.dim() {
        return Err(Error::Argument(format!(
            "loss dimensions differ: {} vs {}",
            la.dim(),
            lb.dim()
        )));
    }
    Ok(())
}

fn descend(
    x: &mut DVector<f64>,
    steps: usize,
    lr: f64,
    objective: impl Fn(&DVector<f64>) -> f64,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> Result<()> {
    let start = objective(x);
    for k in 0..steps {
        *x -= lr * grad(x);
        let now = objective(x);
        if !now.is_finite() || now - start > DIVERGENCE_LIMIT {
            return Err(Error::Numerical(format!(
                "gradient descent diverged at step {k} (loss {now}); lower the learning rate"
            )));
        }
    }
    Ok(())
}

/// `steps` iterations on `la`, then `steps` on `lb`, starting at zero.
pub fn stepwise_optimize(
    la: &QuadraticLoss,
    lb: &QuadraticLoss,
    steps: usize,
    lr: f64,
) -> Result<DVector<f64>> {
    check_pair(la, lb)?;
    let mut x = DVector::zeros(la.dim());
    descend(&mut x, steps, lr, |v| la.loss(v), |v| la.grad(v))?;
    descend(&mut x, steps, lr, |v| lb.loss(v), |v| lb.grad(v))?;
    Ok(x)
}

/// `steps` iterations on `la + lb`, starting at zero.
pub fn aggregated_optimize(
    la: &QuadraticLoss,
    lb: &QuadraticLoss,
    steps: usize,
    lr: f64,
) -> Result<DVector<f64>> {
    check_pair(la, lb)?;
    let mut x = DVector::zeros(la.dim());
    descend(
        &mut x,
        steps,
        lr,
        |v| la.loss(v) + lb.loss(v),
        |v| la.grad(v) + lb.grad(v),
    )?;
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub stepwise_total: f64,
    pub aggregated_total: f64,
    /// `stepwise_total - aggregated_total`.
    pub margin: f64,
    pub converged: bool,
}

impl TrialOutcome {
    pub fn satisfied(&self) -> bool {
        self.converged && self.margin >= -MARGIN_TOL
    }
}

/// Runs both optimizers on one pair and compares total losses.
pub fn compare_pair(
    la: &QuadraticLoss,
    lb: &QuadraticLoss,
    steps: usize,
    lr: f64,
) -> Result<TrialOutcome> {
    let xs = stepwise_optimize(la, lb, steps, lr)?;
    let xa = aggregated_optimize(la, lb, steps, lr)?;
    let stepwise_total = la.loss(&xs) + lb.loss(&xs);
    let aggregated_total = la.loss(&xa) + lb.loss(&xa);
    // The stepwise run ends at a minimizer of its last objective, `lb`.
    let converged = lb.grad(&xs).norm() < CONVERGED_GRAD_NORM
        && (la.grad(&xa) + lb.grad(&xa)).norm() < CONVERGED_GRAD_NORM;
    Ok(TrialOutcome {
        stepwise_total,
        aggregated_total,
        margin: stepwise_total - aggregated_total,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperiorityReport {
    pub trials: usize,
    pub dim: usize,
    pub satisfied: usize,
    pub converged: usize,
    pub min_margin: f64,
    pub median_margin: f64,
    pub fraction: f64,
    pub seed: u64,
}

/// `A = M^T M / rows` with Gaussian `M` of `4 * dim` rows, centers standard
/// normal.
pub fn random_quadratic(dim: usize, rng: &mut SeededRng) -> Result<QuadraticLoss> {
    let rows = 4 * dim;
    let m = DMatrix::from_fn(rows, dim, |_, _| rng.normal());
    let mut a = m.transpose() * &m / rows as f64;
    // Exact symmetry; the product is symmetric only up to rounding.
    a = (&a + a.transpose()) * 0.5;
    let c = DVector::from_fn(dim, |_, _| rng.normal());
    QuadraticLoss::new(a, c)
}

/// Fraction of random convex pairs on which the joint optimum's total loss
/// is no worse than the sequential one's (within [`MARGIN_TOL`]).
pub fn verify_superiority(
    trials: usize,
    dim: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<SuperiorityReport> {
    if trials == 0 || dim == 0 {
        return Err(Error::Argument("trials and dim must be at least 1".into()));
    }
    let root = SeededRng::new(seed);
    let outcomes: Vec<TrialOutcome> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.split(&format!("trial-{i}"));
            let la = random_quadratic(dim, &mut rng)?;
            let lb = random_quadratic(dim, &mut rng)?;
            compare_pair(&la, &lb, steps, lr)
        })
        .collect::<Result<_>>()?;

    let satisfied = outcomes.iter().filter(|o| o.satisfied()).count();
    let converged = outcomes.iter().filter(|o| o.converged).count();
    let mut margins: Vec<f64> = outcomes.iter().map(|o| o.margin).collect();
    margins.sort_by(f64::total_cmp);
    let n = margins.len();
    let median_margin = if n % 2 == 1 {
        margins[n / 2]
    } else {
        0.5 * (margins[n / 2 - 1] + margins[n / 2])
    };
    Ok(SuperiorityReport {
        trials,
        dim,
        satisfied,
        converged,
        min_margin: margins[0],
        median_margin,
        fraction: satisfied as f64 / trials as f64,
        seed,
    })
}
