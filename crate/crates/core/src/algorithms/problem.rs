//! Synthetic decentralized least-squares problems and gradient oracles.
//!
//! Every rank holds a local pair `(A_i, b_i)` of the global objective
//! `(1/2n) * sum_i ||A_i x - b_i||^2`. The generator replicates the full
//! dataset deterministically from a seed so each rank can slice out its
//! own share and tests can consult the exact solution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Solves `a x = b` for a dense square system by Gaussian elimination
/// with partial pivoting. `a` is row-major `n x n`.
pub fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(Error::Dimension("solve_dense: non-square system".into()));
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a[i * n + col]
                    .abs()
                    .partial_cmp(&a[j * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(Error::Degeneracy(
                "solve_dense: singular normal equations".into(),
            ));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// Per-rank linear regression data with the global optimum precomputed
/// from the normal equations `(sum_i A_i^T A_i) x* = sum_i A_i^T b_i`.
#[derive(Debug, Clone)]
pub struct LeastSquaresProblem {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    /// Row-major `m x d` blocks, one per rank.
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    pub x_star: Vec<f64>,
}

impl LeastSquaresProblem {
    /// `A_i` entries standard normal; `b_i = A_i x_gen + noise`, with
    /// per-rank noise of the given scale. Larger noise means more
    /// heterogeneous local optima.
    pub fn synthesize(n: usize, m: usize, d: usize, noise: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        let x_gen: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let block: Vec<f64> = (0..m * d).map(|_| normal.sample(&mut rng)).collect();
            let rhs: Vec<f64> = (0..m)
                .map(|row| {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += block[row * d + k] * x_gen[k];
                    }
                    let eps: f64 = normal.sample(&mut rng);
                    acc + noise * eps
                })
                .collect();
            a.push(block);
            b.push(rhs);
        }
        // Normal equations over the pooled data.
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for i in 0..n {
            for row in 0..m {
                for p in 0..d {
                    let apv = a[i][row * d + p];
                    rhs[p] += apv * b[i][row];
                    for q in 0..d {
                        gram[p * d + q] += apv * a[i][row * d + q];
                    }
                }
            }
        }
        let x_star = solve_dense(gram, rhs)?;
        Ok(LeastSquaresProblem {
            n,
            m,
            d,
            a,
            b,
            x_star,
        })
    }

    pub fn initial_iterate(&self) -> Tensor {
        Tensor::zeros(&[self.d])
    }

    /// Local gradient `A_i^T (A_i x - b_i)`.
    pub fn local_gradient(&self, rank: usize, x: &Tensor) -> Tensor {
        let a = &self.a[rank];
        let b = &self.b[rank];
        let xv = x.data();
        let mut residual = vec![0.0; self.m];
        for row in 0..self.m {
            let mut acc = -b[row];
            for k in 0..self.d {
                acc += a[row * self.d + k] * xv[k];
            }
            residual[row] = acc;
        }
        let mut grad = vec![0.0; self.d];
        for row in 0..self.m {
            let r = residual[row];
            for k in 0..self.d {
                grad[k] += a[row * self.d + k] * r;
            }
        }
        Tensor::vector(grad)
    }

    /// Largest eigenvalue of the average Gram matrix `(1/n) sum A_i^T A_i`
    /// by power iteration; the usual step-size scale `gamma = c / L`.
    pub fn lipschitz_estimate(&self) -> f64 {
        let d = self.d;
        let mut gram = vec![0.0; d * d];
        for i in 0..self.n {
            for row in 0..self.m {
                for p in 0..d {
                    let apv = self.a[i][row * d + p];
                    for q in 0..d {
                        gram[p * d + q] += apv * self.a[i][row * d + q];
                    }
                }
            }
        }
        let scale = 1.0 / self.n as f64;
        let mut v = vec![1.0; d];
        let mut lambda = 0.0;
        for _ in 0..200 {
            let mut next = vec![0.0; d];
            for p in 0..d {
                for q in 0..d {
                    next[p] += gram[p * d + q] * scale * v[q];
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 1.0;
            }
            lambda = norm;
            for x in next.iter_mut() {
                *x /= norm;
            }
            v = next;
        }
        lambda
    }

    pub fn distance_to_opt(&self, x: &Tensor) -> f64 {
        x.data()
            .iter()
            .zip(self.x_star.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Layer-wise gradient source: the driver asks for layer gradients in
/// reverse layer order, the way backpropagation produces them, and may
/// charge a per-layer computation delay to the virtual clock.
pub trait LayeredGradientOracle: Send + Sync {
    fn num_layers(&self) -> usize;
    fn layer_shape(&self, layer: usize) -> Vec<usize>;
    /// Deterministic in `(params, seed)`.
    fn gradient(&self, layer: usize, params: &[Tensor], seed: u64) -> Tensor;
    fn comp_delay_secs(&self) -> f64 {
        0.0
    }
}

/// Single-layer adapter for a least-squares rank share.
pub struct LeastSquaresOracle<'a> {
    pub problem: &'a LeastSquaresProblem,
    pub rank: usize,
}

impl LayeredGradientOracle for LeastSquaresOracle<'_> {
    fn num_layers(&self) -> usize {
        1
    }

    fn layer_shape(&self, _layer: usize) -> Vec<usize> {
        vec![self.problem.d]
    }

    fn gradient(&self, _layer: usize, params: &[Tensor], _seed: u64) -> Tensor {
        self.problem.local_gradient(self.rank, &params[0])
    }
}

/// Quadratic per-layer oracle `grad_l = x_l - target_l`, with a
/// configurable per-layer computation delay. Stands in for layer-wise
/// backpropagation when exercising communication/computation overlap.
pub struct QuadraticLayeredOracle {
    pub targets: Vec<Tensor>,
    pub delay_secs: f64,
}

impl QuadraticLayeredOracle {
    pub fn new(targets: Vec<Tensor>, delay_secs: f64) -> Self {
        QuadraticLayeredOracle {
            targets,
            delay_secs,
        }
    }
}

impl LayeredGradientOracle for QuadraticLayeredOracle {
    fn num_layers(&self) -> usize {
        self.targets.len()
    }

    fn layer_shape(&self, layer: usize) -> Vec<usize> {
        self.targets[layer].shape().to_vec()
    }

    fn gradient(&self, layer: usize, params: &[Tensor], _seed: u64) -> Tensor {
        let mut g = params[layer].clone();
        g.sub(&self.targets[layer]);
        g
    }

    fn comp_delay_secs(&self) -> f64 {
        self.delay_secs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_dense_recovers_known_solution() {
        // 3x3 system with known answer [1, -2, 3].
        let a = vec![4.0, 1.0, 0.0, 1.0, 3.0, -1.0, 0.0, -1.0, 2.0];
        let x_true = [1.0, -2.0, 3.0];
        let b: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| a[i * 3 + j] * x_true[j]).sum())
            .collect();
        let x = solve_dense(a, b).unwrap();
        for (xi, ti) in x.iter().zip(x_true.iter()) {
            assert!((xi - ti).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_dense_rejects_singular() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(solve_dense(a, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn x_star_zeroes_the_pooled_gradient() {
        let p = LeastSquaresProblem::synthesize(4, 12, 6, 0.3, 42).unwrap();
        let x = Tensor::vector(p.x_star.clone());
        let mut pooled = Tensor::zeros(&[p.d]);
        for rank in 0..p.n {
            pooled.add(&p.local_gradient(rank, &x));
        }
        assert!(
            pooled.norm2() < 1e-8,
            "pooled gradient at x* is {}",
            pooled.norm2()
        );
    }

    #[test]
    fn noiseless_problem_recovers_generator() {
        let p = LeastSquaresProblem::synthesize(3, 10, 4, 0.0, 7).unwrap();
        // With zero noise the pooled solution interpolates: residuals are 0
        // at x*, so every local gradient vanishes there too.
        let x = Tensor::vector(p.x_star.clone());
        for rank in 0..p.n {
            assert!(p.local_gradient(rank, &x).norm2() < 1e-9);
        }
    }

    #[test]
    fn lipschitz_bounds_gradient_growth() {
        let p = LeastSquaresProblem::synthesize(2, 8, 3, 0.1, 9).unwrap();
        let l = p.lipschitz_estimate();
        assert!(l > 0.0);
        // One gradient step with gamma = 1/L from x* stays near x*.
        let x = Tensor::vector(p.x_star.clone());
        let g = p.local_gradient(0, &x);
        assert!(g.norm2() < 10.0 * l);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = LeastSquaresProblem::synthesize(2, 5, 3, 0.2, 11).unwrap();
        let b = LeastSquaresProblem::synthesize(2, 5, 3, 0.2, 11).unwrap();
        assert_eq!(a.x_star, b.x_star);
        assert_eq!(a.a, b.a);
    }
}
