//! Monte Carlo simulation of diffusion scenarios in arbitrary dimension:
//! Euler paths `X_{k+1} = X_k + sqrt(A_k) * sqrt(dt) * Z_k` where the
//! volatility matrix `A_k` is chosen adaptively by a deterministic policy.
//! Each member policy's estimate is a statistical lower bound on the
//! worst-case price, complementing the tree engine from the continuum side.
//!
//! Per-path generators are counter-based substreams of one seed (stream id =
//! path index), and the reduction runs in path order, so estimates are
//! bit-identical whatever the worker count.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::lattice::TimeGrid;
use crate::scenario::VolBand;

#[derive(Debug, Error)]
pub enum McError {
    #[error("volatility matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("volatility matrix must be symmetric, |a[{i}][{j}] - a[{j}][{i}]| = {diff}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("volatility matrix must be positive definite, offending eigenvalue {eigenvalue}")]
    NotPositiveDefinite { eigenvalue: f64 },
    #[error("eigenvalue {eigenvalue} escapes the configured band [{lo}, {hi}]")]
    OutsideBand { eigenvalue: f64, lo: f64, hi: f64 },
    #[error("policy matrices must share one dimension, got {a} and {b}")]
    MixedDimensions { a: usize, b: usize },
}

const SYMMETRY_TOL: f64 = 1e-12;

fn eigenvalues_checked(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>), McError> {
    if a.nrows() != a.ncols() {
        return Err(McError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    for i in 0..a.nrows() {
        for j in i + 1..a.ncols() {
            let diff = (a[(i, j)] - a[(j, i)]).abs();
            if diff > SYMMETRY_TOL {
                return Err(McError::NotSymmetric { i, j, diff });
            }
        }
    }
    let eigen = a.clone().symmetric_eigen();
    if let Some(min) = eigen
        .eigenvalues
        .iter()
        .copied()
        .min_by(|x, y| x.partial_cmp(y).unwrap())
    {
        if min <= 0.0 {
            return Err(McError::NotPositiveDefinite { eigenvalue: min });
        }
    }
    Ok((eigen.eigenvectors, eigen.eigenvalues))
}

/// The unique symmetric positive-definite square root, via spectral
/// decomposition; `psd_sqrt(a) * psd_sqrt(a)` reproduces `a` to 1e-10 per
/// entry. Non-positive-definite input is rejected with the offending
/// eigenvalue.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>, McError> {
    let (q, lambda) = eigenvalues_checked(a)?;
    let sqrt_lambda = DMatrix::from_diagonal(&lambda.map(f64::sqrt));
    let root = &q * sqrt_lambda * q.transpose();
    // enforce exact symmetry against rounding in the triple product
    Ok(0.5 * (&root + root.transpose()))
}

/// A validated volatility matrix (symmetric positive definite, variance per
/// unit time) carrying its square root.
#[derive(Debug, Clone)]
pub struct VolMatrix {
    matrix: DMatrix<f64>,
    sqrt: DMatrix<f64>,
}

impl VolMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, McError> {
        let sqrt = psd_sqrt(&matrix)?;
        Ok(VolMatrix { matrix, sqrt })
    }

    pub fn scalar(variance: f64) -> Result<Self, McError> {
        Self::new(DMatrix::from_element(1, 1, variance))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn sqrt_matrix(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    fn check_band(&self, band: &VolBand) -> Result<(), McError> {
        let (_, lambda) = eigenvalues_checked(&self.matrix).expect("validated at construction");
        for &eigenvalue in lambda.iter() {
            if eigenvalue < band.lo() - SYMMETRY_TOL || eigenvalue > band.hi() + SYMMETRY_TOL {
                return Err(McError::OutsideBand {
                    eigenvalue,
                    lo: band.lo(),
                    hi: band.hi(),
                });
            }
        }
        Ok(())
    }

    fn describe(&self) -> String {
        if self.dim() == 1 {
            format!("{}", self.matrix[(0, 0)])
        } else {
            let rows: Vec<String> = (0..self.dim())
                .map(|i| {
                    let cells: Vec<String> =
                        (0..self.dim()).map(|j| format!("{}", self.matrix[(i, j)])).collect();
                    format!("[{}]", cells.join(","))
                })
                .collect();
            format!("[{}]", rows.join(","))
        }
    }
}

/// Deterministic volatility controls for the simulator. Every matrix a
/// policy can emit has its eigenvalues confined to the configured band,
/// checked at construction.
#[derive(Debug, Clone)]
pub enum MatrixPolicy {
    Constant(VolMatrix),
    /// `below` while `|X_k| <= threshold`, `above` beyond.
    ThresholdSwitch {
        threshold: f64,
        below: VolMatrix,
        above: VolMatrix,
    },
}

impl MatrixPolicy {
    pub fn constant(matrix: VolMatrix, band: &VolBand) -> Result<Self, McError> {
        matrix.check_band(band)?;
        Ok(MatrixPolicy::Constant(matrix))
    }

    pub fn threshold_switch(
        threshold: f64,
        below: VolMatrix,
        above: VolMatrix,
        band: &VolBand,
    ) -> Result<Self, McError> {
        below.check_band(band)?;
        above.check_band(band)?;
        if below.dim() != above.dim() {
            return Err(McError::MixedDimensions {
                a: below.dim(),
                b: above.dim(),
            });
        }
        Ok(MatrixPolicy::ThresholdSwitch {
            threshold,
            below,
            above,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            MatrixPolicy::Constant(a) => a.dim(),
            MatrixPolicy::ThresholdSwitch { below, .. } => below.dim(),
        }
    }

    fn matrix_at(&self, _step: usize, state: &DVector<f64>) -> &VolMatrix {
        match self {
            MatrixPolicy::Constant(a) => a,
            MatrixPolicy::ThresholdSwitch {
                threshold,
                below,
                above,
            } => {
                if state.norm() <= *threshold {
                    below
                } else {
                    above
                }
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            MatrixPolicy::Constant(a) => format!("constant({})", a.describe()),
            MatrixPolicy::ThresholdSwitch {
                threshold,
                below,
                above,
            } => format!(
                "threshold(|x|<={}: {}, else {})",
                threshold,
                below.describe(),
                above.describe()
            ),
        }
    }
}

/// One simulated path: states `X_0 = 0, ..., X_n`, step width `dt`.
#[derive(Debug, Clone)]
pub struct McPath {
    pub dt: f64,
    pub states: Vec<DVector<f64>>,
}

impl McPath {
    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().expect("paths have at least one state")
    }

    /// Terminal value of the first coordinate (the whole state in d = 1).
    pub fn terminal_scalar(&self) -> f64 {
        self.terminal()[0]
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    #[serde(rename = "stderr")]
    pub std_err: f64,
    pub paths: usize,
    pub seed: u64,
}

/// Simulates `paths` Euler paths over the grid and averages the payoff.
/// Deterministic for a given seed: path `i` draws from stream `i` of the
/// seeded generator and the average runs in path order, independent of the
/// rayon worker count.
pub fn simulate_price<F>(
    payoff: F,
    policy: &MatrixPolicy,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> McEstimate
where
    F: Fn(&McPath) -> f64 + Sync,
{
    assert!(paths >= 1, "need at least one path");
    let d = policy.dim();
    let n = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut values = vec![0.0f64; paths];
    values.par_iter_mut().enumerate().for_each(|(i, slot)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut states = Vec::with_capacity(n + 1);
        states.push(DVector::zeros(d));
        let mut z = DVector::zeros(d);
        for k in 0..n {
            let a = policy.matrix_at(k, states.last().expect("nonempty"));
            for zi in z.iter_mut() {
                *zi = rng.sample::<f64, _>(StandardNormal) * sqrt_dt;
            }
            let next = states.last().expect("nonempty") + a.sqrt_matrix() * &z;
            states.push(next);
        }
        *slot = payoff(&McPath { dt, states });
    });
    let mean = values.iter().sum::<f64>() / paths as f64;
    let std_err = if paths > 1 {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (paths as f64 - 1.0)).sqrt() / (paths as f64).sqrt()
    } else {
        0.0
    };
    McEstimate {
        mean,
        std_err,
        paths,
        seed,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyEstimate {
    pub policy: String,
    #[serde(flatten)]
    pub estimate: McEstimate,
    /// `mean <= reference + 3 * stderr`: the statistical lower-bound property
    /// against the tree engine's price.
    pub within_bound: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LowerBoundReport {
    pub reference: f64,
    pub entries: Vec<PolicyEstimate>,
    /// Index of the best (highest-mean) policy.
    pub best: usize,
}

impl LowerBoundReport {
    pub fn ok(&self) -> bool {
        self.entries.iter().all(|e| e.within_bound)
    }

    pub fn best_entry(&self) -> &PolicyEstimate {
        &self.entries[self.best]
    }
}

/// Runs every policy against the same payoff and flags any estimate that
/// exceeds `reference + 3 * stderr`. A flag indicates a bug in one of the
/// two engines, not a statistical fluke budgeted for.
pub fn lower_bound_report<F>(
    payoff: F,
    policies: &[MatrixPolicy],
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    reference: f64,
) -> LowerBoundReport
where
    F: Fn(&McPath) -> f64 + Sync,
{
    let mut entries = Vec::with_capacity(policies.len());
    for (i, policy) in policies.iter().enumerate() {
        let estimate = simulate_price(
            &payoff,
            policy,
            grid,
            paths,
            seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15_u64 | 1),
        );
        entries.push(PolicyEstimate {
            policy: policy.describe(),
            estimate,
            within_bound: estimate.mean <= reference + 3.0 * estimate.std_err,
        });
    }
    let best = entries
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.estimate.mean.partial_cmp(&b.estimate.mean).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    LowerBoundReport {
        reference,
        entries,
        best,
    }
}
