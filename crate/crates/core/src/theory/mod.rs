//! Separation `D(α) = Σ_ij |2α_ij − 1|` between an attention subgraph and its
//! complement, its lower bound, and executable checks of how it relates to
//! attention entropy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::Tensor;
use crate::seeds::derive_seed;

const ROW_SUM_TOL: f64 = 1e-6;
const CHECK_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("matrix must be square, got {0:?}")]
    NotSquare([usize; 2]),
    #[error("row {row} sums to {sum}")]
    RowSum { row: usize, sum: f64 },
    #[error("entry ({row}, {col}) = {value} is outside [0, 1]")]
    Entry { row: usize, col: usize, value: f64 },
    #[error("team size must be at least 2, got {0}")]
    TeamSize(usize),
    #[error("sample count must be positive")]
    Samples,
}

fn check_row_stochastic(alpha: &Tensor, tol: f64) -> Result<(), TheoryError> {
    let [r, c] = alpha.shape();
    if r != c {
        return Err(TheoryError::NotSquare(alpha.shape()));
    }
    for row in 0..r {
        for col in 0..c {
            let value = alpha.get(row, col);
            if !(-tol..=1.0 + tol).contains(&value) {
                return Err(TheoryError::Entry { row, col, value });
            }
        }
        let sum: f64 = alpha.row(row).iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(TheoryError::RowSum { row, sum });
        }
    }
    Ok(())
}

/// Square matrix whose rows are probability vectors (±1e-9).
#[derive(Debug, Clone, PartialEq)]
pub struct RowStochasticMatrix(Tensor);

impl RowStochasticMatrix {
    pub fn new(values: Tensor) -> Result<Self, TheoryError> {
        check_row_stochastic(&values, 1e-9)?;
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        Self(Tensor::full(n, n, 1.0 / n as f64))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }
}

fn separation(alpha: &Tensor) -> f64 {
    alpha.data().iter().map(|a| (2.0 * a - 1.0).abs()).sum()
}

fn total_entropy(alpha: &Tensor) -> f64 {
    alpha
        .data()
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| -a * a.ln())
        .sum()
}

/// `Σ_ij |2α_ij − 1|`.
pub fn d_alpha(alpha: &Tensor) -> Result<f64, TheoryError> {
    check_row_stochastic(alpha, ROW_SUM_TOL)?;
    Ok(separation(alpha))
}

/// `|2N − N²|`, attained by uniform attention.
pub fn d_lower_bound(n: usize) -> Result<f64, TheoryError> {
    if n < 2 {
        return Err(TheoryError::TeamSize(n));
    }
    let n = n as f64;
    Ok((2.0 * n - n * n).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    LowerBound,
    UniformValue,
    OneHotValue,
    Flatness,
    MonotonePath,
    Convexity,
    EntropyMaximum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub check: Check,
    pub n: usize,
    pub detail: String,
    /// row-major offending matrix
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub n: usize,
    pub samples: usize,
    pub flatness_checks: usize,
    pub path_checks: usize,
    pub min_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub sizes: Vec<SizeReport>,
    pub violations: Vec<Violation>,
}

impl BoundsReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.sizes.iter().map(|s| s.samples).sum()
    }
}

/// Random row-stochastic matrix; each row is a softmax of Gaussian logits at
/// a random temperature, so both near-uniform and near-one-hot rows occur.
fn sample_alpha(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = rng.random_range(0.0..6.0);
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        let row: Vec<f64> = (0..n)
            .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let s: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|x| x / s));
    }
    Tensor::new(n, n, data).expect("square sample")
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut p = Tensor::zeros(n, n);
    for (i, &j) in perm.iter().enumerate() {
        p.set(i, j, 1.0);
    }
    p
}

const FLATNESS_TRIALS: usize = 100;
const FLATNESS_STEP: f64 = 1e-4;
const PATH_TARGETS: usize = 100;
const PATH_POINTS: usize = 101;

/// Runs every check for each team size in `sizes`; violations carry the
/// offending matrix.
pub fn verify_bounds(samples: usize, sizes: std::ops::RangeInclusive<usize>, seed: u64) -> Result<BoundsReport, TheoryError> {
    if samples == 0 {
        return Err(TheoryError::Samples);
    }
    let mut report = BoundsReport {
        sizes: Vec::new(),
        violations: Vec::new(),
    };
    for n in sizes {
        let bound = d_lower_bound(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[n as u64]));
        let mut fail = |check, detail: String, alpha: &Tensor| {
            report.violations.push(Violation {
                check,
                n,
                detail,
                alpha: alpha.data().to_vec(),
            })
        };
        let uniform = RowStochasticMatrix::uniform(n).0;
        let d_uniform = separation(&uniform);
        let h_uniform = total_entropy(&uniform);
        if (d_uniform - bound).abs() > CHECK_TOL {
            fail(Check::UniformValue, format!("D = {d_uniform}, bound {bound}"), &uniform);
        }
        let one_hot = Tensor::eye(n);
        let d_one_hot = separation(&one_hot);
        if d_one_hot != (n * n) as f64 {
            fail(Check::OneHotValue, format!("D = {d_one_hot}"), &one_hot);
        }

        let mut min_gap = f64::INFINITY;
        let mut previous = sample_alpha(n, &mut rng);
        for _ in 0..samples {
            let alpha = sample_alpha(n, &mut rng);
            let d = separation(&alpha);
            min_gap = min_gap.min(d - bound);
            if d < bound - CHECK_TOL {
                fail(Check::LowerBound, format!("D = {d} < {bound}"), &alpha);
            }
            let t: f64 = rng.random_range(0.0..=1.0);
            let mix = Tensor::new(
                n,
                n,
                alpha.data().iter().zip(previous.data()).map(|(a, b)| t * a + (1.0 - t) * b).collect(),
            )
            .expect("same shape");
            let rhs = t * d + (1.0 - t) * separation(&previous);
            if separation(&mix) > rhs + CHECK_TOL {
                fail(Check::Convexity, format!("D(mix) = {} > {rhs} at t = {t}", separation(&mix)), &mix);
            }
            if alpha.max_abs_diff(&uniform) > 1e-6 && total_entropy(&alpha) >= h_uniform {
                fail(Check::EntropyMaximum, format!("H = {} >= {h_uniform}", total_entropy(&alpha)), &alpha);
            }
            previous = alpha;
        }

        let mut flatness_checks = 0;
        if n >= 3 {
            for _ in 0..FLATNESS_TRIALS {
                // zero row sums keep the perturbed matrix on the simplex
                let mut delta: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
                for row in delta.chunks_mut(n) {
                    let m = row.iter().sum::<f64>() / n as f64;
                    row.iter_mut().for_each(|x| *x -= m);
                }
                let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
                let moved = Tensor::new(
                    n,
                    n,
                    uniform.data().iter().zip(&delta).map(|(u, d)| u + FLATNESS_STEP * d / norm).collect(),
                )
                .expect("same shape");
                let change = (separation(&moved) - d_uniform).abs();
                if change >= CHECK_TOL {
                    fail(Check::Flatness, format!("|ΔD| = {change}"), &moved);
                }
                flatness_checks += 1;
            }
        }

        for _ in 0..PATH_TARGETS {
            let p = permutation(n, &mut rng);
            let (mut last_h, mut last_d) = (f64::INFINITY, f64::NEG_INFINITY);
            for k in 0..PATH_POINTS {
                let t = k as f64 / (PATH_POINTS - 1) as f64;
                let a = Tensor::new(
                    n,
                    n,
                    uniform.data().iter().zip(p.data()).map(|(u, q)| (1.0 - t) * u + t * q).collect(),
                )
                .expect("same shape");
                let (h, d) = (total_entropy(&a), separation(&a));
                if h > last_h + CHECK_TOL || d < last_d - CHECK_TOL {
                    fail(Check::MonotonePath, format!("t = {t}: H {last_h} -> {h}, D {last_d} -> {d}"), &a);
                }
                last_h = h;
                last_d = d;
            }
        }
        report.sizes.push(SizeReport {
            n,
            samples,
            flatness_checks,
            path_checks: PATH_TARGETS,
            min_gap,
        });
    }
    Ok(report)
}
