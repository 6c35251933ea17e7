//! Adaptive multi-scale kernel MMD.
//!
//! The kernel is a softmax-weighted mixture of Gaussians,
//! `K(x, y) = Σ_m α_m exp(−‖x − y‖² / (2σ_m²))`, and the discrepancy is the
//! estimator that drops the diagonal of the within-set kernel blocks while
//! keeping every pair in the cross block:
//!
//! ```text
//! MMD² = 1/(ns(ns−1)) Σ_{i≠j} K(xi, xj) + 1/(nt(nt−1)) Σ_{i≠j} K(yi, yj)
//!        − 2/(ns·nt) Σ_{i,j} K(xi, yj)
//! ```
//!
//! Bandwidths come from the median heuristic on the pooled sample followed by
//! a centered geometric ladder. They are constants for differentiation; only
//! the inputs and the weight logits receive gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{dot, Matrix};

/// Default number of kernels in the ladder.
pub const DEFAULT_KERNELS: usize = 5;
/// Default ratio between adjacent bandwidths.
pub const DEFAULT_GAMMA: f64 = 2.0;

/// Bandwidth ladder and mixture logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    bandwidths: Vec<f64>,
    weight_logits: Vec<f64>,
}

impl KernelParams {
    pub fn new(bandwidths: Vec<f64>, weight_logits: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::InvalidArgument("at least one kernel is required".into()));
        }
        if bandwidths.len() != weight_logits.len() {
            return Err(Error::Shape(format!(
                "{} bandwidths but {} weight logits",
                bandwidths.len(),
                weight_logits.len()
            )));
        }
        if let Some(s) = bandwidths.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidArgument(format!("bandwidth {s} must be positive")));
        }
        if weight_logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument("weight logits must be finite".into()));
        }
        Ok(Self { bandwidths, weight_logits })
    }

    /// Equal weights over the given bandwidths.
    pub fn uniform(bandwidths: Vec<f64>) -> Result<Self> {
        let m = bandwidths.len();
        Self::new(bandwidths, vec![0.0; m])
    }

    /// Median-heuristic ladder on the pooled sample `[x; y]`.
    pub fn adaptive(
        x: &Matrix,
        y: &Matrix,
        kernels: usize,
        gamma: f64,
        weight_logits: Option<Vec<f64>>,
    ) -> Result<Self> {
        let z = x.vstack(y)?;
        let base = median_bandwidth(&pairwise_sq_dists(&z)?)?;
        let ladder = bandwidth_ladder(base, kernels, gamma)?;
        Self::new(ladder, weight_logits.unwrap_or_else(|| vec![0.0; kernels]))
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weight_logits(&self) -> &[f64] {
        &self.weight_logits
    }

    pub fn set_weight_logits(&mut self, logits: Vec<f64>) -> Result<()> {
        *self = Self::new(std::mem::take(&mut self.bandwidths), logits)?;
        Ok(())
    }

    pub fn kernels(&self) -> usize {
        self.bandwidths.len()
    }

    /// Mixture weights `α = softmax(logits)`.
    pub fn weights(&self) -> Vec<f64> {
        weights_from_logits(&self.weight_logits)
    }
}

/// Symmetric matrix of squared Euclidean distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    d2: Matrix,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.d2.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.d2
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d2[(i, j)]
    }
}

/// Input and logit gradients of MMD².
#[derive(Debug, Clone, PartialEq)]
pub struct MmdGradients {
    pub d_x: Matrix,
    pub d_y: Matrix,
    pub d_logits: Vec<f64>,
}

/// Numerically stable softmax.
pub fn weights_from_logits(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn pairwise_sq_dists(z: &Matrix) -> Result<DistanceMatrix> {
    pairwise_sq_dists_with(z, Exec::default())
}

/// `D_ij = ‖z_i − z_j‖²` through `‖a‖² + ‖b‖² − 2a·b`, clamped at zero.
///
/// Only `j > i` is evaluated; the lower triangle is mirrored. Rows are
/// independent, so the result is identical for every [`Exec`].
pub fn pairwise_sq_dists_with(z: &Matrix, exec: Exec) -> Result<DistanceMatrix> {
    if z.rows() == 0 {
        return Err(Error::InvalidArgument("distance matrix needs at least one row".into()));
    }
    if !z.is_finite() {
        return Err(Error::InvalidArgument("non-finite feature value".into()));
    }
    let n = z.rows();
    let norms: Vec<f64> = z.iter_rows().map(|r| dot(r, r)).collect();
    let upper: Vec<Vec<f64>> = exec.map(n, |i| {
        let zi = z.row(i);
        ((i + 1)..n)
            .map(|j| (norms[i] + norms[j] - 2.0 * dot(zi, z.row(j))).max(0.0))
            .collect()
    });
    let mut d2 = Matrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let j = i + 1 + k;
            d2[(i, j)] = v;
            d2[(j, i)] = v;
        }
    }
    Ok(DistanceMatrix { d2 })
}

/// `sqrt(median(off-diagonal D) / 2)`; an even count averages the two middle values.
pub fn median_bandwidth(d: &DistanceMatrix) -> Result<f64> {
    let n = d.n();
    if n < 2 {
        return Err(Error::InsufficientSamples("median bandwidth needs n ≥ 2".into()));
    }
    let mut vals: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d.get(i, j))
        .collect();
    if vals.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("all pairwise distances are zero".into()));
    }
    vals.sort_by(f64::total_cmp);
    let m = vals.len();
    let median = if m % 2 == 1 { vals[m / 2] } else { 0.5 * (vals[m / 2 - 1] + vals[m / 2]) };
    if median == 0.0 {
        // More than half the pairs coincide; fall back to the mean of the positive ones.
        let pos: Vec<f64> = vals.into_iter().filter(|&v| v > 0.0).collect();
        let mean = pos.iter().sum::<f64>() / pos.len() as f64;
        return Ok((mean / 2.0).sqrt());
    }
    Ok((median / 2.0).sqrt())
}

/// `σ_m = base · γ^(m − ceil(M/2))` for `m = 1..=M`.
pub fn bandwidth_ladder(base: f64, kernels: usize, gamma: f64) -> Result<Vec<f64>> {
    if !(base.is_finite() && base > 0.0) {
        return Err(Error::InvalidArgument(format!("base bandwidth {base} must be positive")));
    }
    if kernels == 0 {
        return Err(Error::InvalidArgument("kernel count must be at least 1".into()));
    }
    if kernels == 1 {
        return Ok(vec![base]);
    }
    if !(gamma.is_finite() && gamma > 1.0) {
        return Err(Error::InvalidArgument(format!("ladder ratio {gamma} must exceed 1")));
    }
    let center = kernels.div_ceil(2) as i32;
    Ok((1..=kernels as i32).map(|m| base * gamma.powi(m - center)).collect())
}

#[inline]
fn kernel_terms(d2: f64, bandwidths: &[f64], weights: &[f64]) -> (f64, f64) {
    // Returns K(d2) and dK/d(d2).
    let mut k = 0.0;
    let mut dk = 0.0;
    for (&s, &a) in bandwidths.iter().zip(weights) {
        let inv = 1.0 / (2.0 * s * s);
        let e = a * (-d2 * inv).exp();
        k += e;
        dk -= inv * e;
    }
    (k, dk)
}

/// The fused multi-scale kernel evaluated at squared distance `d2`.
pub fn fused_kernel(d2: f64, params: &KernelParams) -> Result<f64> {
    if !(d2 >= 0.0) || !d2.is_finite() {
        return Err(Error::InvalidArgument(format!("squared distance {d2} must be ≥ 0")));
    }
    Ok(kernel_terms(d2, &params.bandwidths, &params.weights()).0)
}

fn check_pair(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "MMD needs at least 2 samples per set, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!("feature widths {} and {}", x.cols(), y.cols())));
    }
    Ok(())
}

/// Block sums over the pooled distance matrix for a per-entry kernel value.
fn block_sums(d: &DistanceMatrix, ns: usize, f: impl Fn(f64) -> f64) -> (f64, f64, f64) {
    let n = d.n();
    let mut ss = 0.0;
    let mut tt = 0.0;
    let mut st = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let k = f(d.get(i, j));
            match (i < ns, j < ns) {
                (true, true) => ss += k,
                (false, false) => tt += k,
                _ => st += k,
            }
        }
    }
    (2.0 * ss, 2.0 * tt, st)
}

fn combine(ns: usize, nt: usize, ss: f64, tt: f64, st: f64) -> f64 {
    let ns = ns as f64;
    let nt = nt as f64;
    ss / (ns * (ns - 1.0)) + tt / (nt * (nt - 1.0)) - 2.0 * st / (ns * nt)
}

/// Multi-kernel MMD² between the rows of `x` and `y`.
pub fn mmd2_unbiased(x: &Matrix, y: &Matrix, params: &KernelParams) -> Result<f64> {
    check_pair(x, y)?;
    let d = pairwise_sq_dists(&x.vstack(y)?)?;
    let w = params.weights();
    let (ss, tt, st) = block_sums(&d, x.rows(), |v| kernel_terms(v, &params.bandwidths, &w).0);
    Ok(combine(x.rows(), y.rows(), ss, tt, st))
}

/// Single-kernel MMD² at each bandwidth of `params`.
pub fn mmd2_per_kernel(x: &Matrix, y: &Matrix, params: &KernelParams) -> Result<Vec<f64>> {
    check_pair(x, y)?;
    let d = pairwise_sq_dists(&x.vstack(y)?)?;
    Ok(params
        .bandwidths
        .iter()
        .map(|&s| {
            let inv = 1.0 / (2.0 * s * s);
            let (ss, tt, st) = block_sums(&d, x.rows(), |v| (-v * inv).exp());
            combine(x.rows(), y.rows(), ss, tt, st)
        })
        .collect())
}

/// MMD² with exact gradients in `x`, `y` and the weight logits.
pub fn mmd2_grad(x: &Matrix, y: &Matrix, params: &KernelParams) -> Result<(f64, MmdGradients)> {
    check_pair(x, y)?;
    let (ns, nt, dim) = (x.rows(), y.rows(), x.cols());
    let d = pairwise_sq_dists(&x.vstack(y)?)?;
    let w = params.weights();
    let bw = &params.bandwidths;

    let a = 2.0 / (ns as f64 * (ns as f64 - 1.0));
    let b = 2.0 / (nt as f64 * (nt as f64 - 1.0));
    let c = 2.0 / (ns as f64 * nt as f64);

    let mut d_x = Matrix::zeros(ns, dim);
    let mut d_y = Matrix::zeros(nt, dim);
    let (mut ss, mut tt, mut st) = (0.0, 0.0, 0.0);
    // Per-kernel block sums for the logit gradient.
    let m = bw.len();
    let mut per = vec![(0.0, 0.0, 0.0); m];

    let row = |i: usize| if i < ns { x.row(i) } else { y.row(i - ns) };
    for i in 0..ns + nt {
        for j in (i + 1)..ns + nt {
            let dij = d.get(i, j);
            let (k, dk) = kernel_terms(dij, bw, &w);
            for (mi, &s) in bw.iter().enumerate() {
                let e = (-dij / (2.0 * s * s)).exp();
                match (i < ns, j < ns) {
                    (true, true) => per[mi].0 += e,
                    (false, false) => per[mi].1 += e,
                    _ => per[mi].2 += e,
                }
            }
            // Coefficient on (z_i − z_j) in ∂/∂z_i; ∂/∂z_j gets its negation.
            let coef = match (i < ns, j < ns) {
                (true, true) => {
                    ss += k;
                    a * 2.0 * dk
                }
                (false, false) => {
                    tt += k;
                    b * 2.0 * dk
                }
                _ => {
                    st += k;
                    -c * 2.0 * dk
                }
            };
            let (zi, zj) = (row(i), row(j));
            let diff: Vec<f64> = zi.iter().zip(zj).map(|(p, q)| coef * (p - q)).collect();
            {
                let gi = if i < ns { d_x.row_mut(i) } else { d_y.row_mut(i - ns) };
                gi.iter_mut().zip(&diff).for_each(|(g, v)| *g += v);
            }
            let gj = if j < ns { d_x.row_mut(j) } else { d_y.row_mut(j - ns) };
            gj.iter_mut().zip(&diff).for_each(|(g, v)| *g -= v);
        }
    }
    let value = combine(ns, nt, 2.0 * ss, 2.0 * tt, st);
    let per_kernel: Vec<f64> =
        per.iter().map(|&(s1, s2, s3)| combine(ns, nt, 2.0 * s1, 2.0 * s2, s3)).collect();
    let d_logits = w.iter().zip(&per_kernel).map(|(&wk, &mk)| wk * (mk - value)).collect();
    Ok((value, MmdGradients { d_x, d_y, d_logits }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_abs_diff_eq;

    fn col(vals: &[f64]) -> Matrix {
        Matrix::new(vals.len(), 1, vals.to_vec()).unwrap()
    }

    fn random(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        Matrix::new(n, d, rng.normal_vec(n * d)).unwrap()
    }

    /// Direct evaluation of the estimator over every index pair.
    fn naive_mmd2(x: &Matrix, y: &Matrix, p: &KernelParams) -> f64 {
        let w = p.weights();
        let k = |a: &[f64], b: &[f64]| {
            let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum();
            p.bandwidths().iter().zip(&w).map(|(s, a)| a * (-d2 / (2.0 * s * s)).exp()).sum::<f64>()
        };
        let (ns, nt) = (x.rows() as f64, y.rows() as f64);
        let mut ss = 0.0;
        for i in 0..x.rows() {
            for j in 0..x.rows() {
                if i != j {
                    ss += k(x.row(i), x.row(j));
                }
            }
        }
        let mut tt = 0.0;
        for i in 0..y.rows() {
            for j in 0..y.rows() {
                if i != j {
                    tt += k(y.row(i), y.row(j));
                }
            }
        }
        let mut st = 0.0;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                st += k(x.row(i), y.row(j));
            }
        }
        ss / (ns * (ns - 1.0)) + tt / (nt * (nt - 1.0)) - 2.0 * st / (ns * nt)
    }

    #[test]
    fn pairwise_small_line() {
        let d = pairwise_sq_dists(&col(&[0.0, 1.0, 3.0])).unwrap();
        let expect = Matrix::from_rows(&[[0.0, 1.0, 9.0], [1.0, 0.0, 4.0], [9.0, 4.0, 0.0]]).unwrap();
        assert_eq!(d.matrix(), &expect);
    }

    #[test]
    fn pairwise_identical_rows_are_exactly_zero() {
        let z = Matrix::from_rows(&[[0.3, -1.7, 2.2], [5.0, 1.0, 0.0], [0.3, -1.7, 2.2]]).unwrap();
        let d = pairwise_sq_dists(&z).unwrap();
        assert_eq!(d.get(0, 2), 0.0);
        assert_eq!(d.get(2, 0), 0.0);
    }

    #[test]
    fn pairwise_matches_double_loop() {
        let mut rng = Rng::new(11);
        let z = random(&mut rng, 16, 8);
        let d = pairwise_sq_dists(&z).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let want: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                assert_abs_diff_eq!(d.get(i, j), want, epsilon = 1e-12);
                assert_eq!(d.get(i, j), d.get(j, i));
            }
        }
    }

    #[test]
    fn pairwise_is_execution_independent() {
        let mut rng = Rng::new(5);
        let z = random(&mut rng, 40, 7);
        let a = pairwise_sq_dists_with(&z, Exec::Sequential).unwrap();
        let b = pairwise_sq_dists_with(&z, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pairwise_rejects_non_finite() {
        let mut z = Matrix::zeros(2, 2);
        z[(0, 1)] = f64::NAN;
        assert!(matches!(pairwise_sq_dists(&z), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn median_cases() {
        // off-diagonals {1, 4, 9}
        let d = pairwise_sq_dists(&col(&[0.0, 1.0, 3.0])).unwrap();
        assert_abs_diff_eq!(median_bandwidth(&d).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        let d = pairwise_sq_dists(&col(&[0.0, 2.0])).unwrap();
        assert_abs_diff_eq!(median_bandwidth(&d).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        // equilateral triangle: all d² = 1
        let z = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]]).unwrap();
        let d = pairwise_sq_dists(&z).unwrap();
        assert_abs_diff_eq!(median_bandwidth(&d).unwrap(), 0.5f64.sqrt(), epsilon = 1e-12);
        // even count: {1, 4, 9, 16, 25, 49}... use points 0,1,3,7 → {1,9,49,4,36,16}
        let d = pairwise_sq_dists(&col(&[0.0, 1.0, 3.0, 7.0])).unwrap();
        assert_abs_diff_eq!(median_bandwidth(&d).unwrap(), (12.5f64 / 2.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn median_degenerate() {
        let d = pairwise_sq_dists(&col(&[1.0, 1.0, 1.0])).unwrap();
        assert!(matches!(median_bandwidth(&d), Err(Error::Degenerate(_))));
        let d = pairwise_sq_dists(&col(&[1.0])).unwrap();
        assert!(median_bandwidth(&d).is_err());
    }

    #[test]
    fn ladder_cases() {
        assert_eq!(bandwidth_ladder(1.0, 1, 2.0).unwrap(), vec![1.0]);
        assert_eq!(bandwidth_ladder(1.0, 5, 2.0).unwrap(), vec![0.25, 0.5, 1.0, 2.0, 4.0]);
        assert_eq!(bandwidth_ladder(2.0, 3, 2.0).unwrap(), vec![1.0, 2.0, 4.0]);
        assert_eq!(bandwidth_ladder(1.0, 4, 2.0).unwrap(), vec![0.5, 1.0, 2.0, 4.0]);
        assert!(bandwidth_ladder(1.0, 3, 1.0).is_err());
        assert!(bandwidth_ladder(1.0, 0, 2.0).is_err());
        assert!(bandwidth_ladder(0.0, 3, 2.0).is_err());
    }

    #[test]
    fn kernel_values() {
        let p = KernelParams::uniform(vec![1.0]).unwrap();
        assert_eq!(fused_kernel(0.0, &p).unwrap(), 1.0);
        assert_abs_diff_eq!(fused_kernel(2.0, &p).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        let p = KernelParams::uniform(vec![1.0, 2.0]).unwrap();
        let want = 0.5 * (-1.0f64).exp() + 0.5 * (-0.25f64).exp();
        assert_abs_diff_eq!(fused_kernel(2.0, &p).unwrap(), want, epsilon = 1e-15);
        assert_abs_diff_eq!(want, 0.573340, epsilon = 1e-6);
        let p = KernelParams::new(vec![0.3, 1.0, 7.0], vec![1.0, -2.0, 0.5]).unwrap();
        assert_abs_diff_eq!(fused_kernel(0.0, &p).unwrap(), 1.0, epsilon = 1e-15);
        assert!(fused_kernel(-1e-3, &p).is_err());
    }

    #[test]
    fn kernel_is_monotone_in_range() {
        let p = KernelParams::new(vec![0.5, 1.0, 4.0], vec![0.2, 0.0, -1.0]).unwrap();
        let mut prev = fused_kernel(0.0, &p).unwrap();
        for i in 1..200 {
            let v = fused_kernel(i as f64 * 0.25, &p).unwrap();
            assert!(v > 0.0 && v <= 1.0 && v < prev);
            prev = v;
        }
    }

    #[test]
    fn softmax_cases() {
        let w = weights_from_logits(&[0.0, 0.0, 0.0]);
        w.iter().for_each(|&v| assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15));
        let w = weights_from_logits(&[2f64.ln(), 0.0]);
        assert_abs_diff_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 1.0 / 3.0, epsilon = 1e-15);
        let w = weights_from_logits(&[1000.0, 0.0]);
        assert!(w.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-15);
        assert!(w[1] < 1e-300 || w[1] == 0.0);
    }

    #[test]
    fn mmd_identical_clouds_is_zero() {
        let x = Matrix::from_rows(&[[1.5, -2.0], [1.5, -2.0]]).unwrap();
        let p = KernelParams::uniform(vec![0.5, 1.0, 2.0]).unwrap();
        assert_eq!(mmd2_unbiased(&x, &x, &p).unwrap(), 0.0);
    }

    #[test]
    fn mmd_two_point_clouds() {
        let p = KernelParams::uniform(vec![1.0]).unwrap();
        let v = mmd2_unbiased(&col(&[0.0, 0.0]), &col(&[1.0, 1.0]), &p).unwrap();
        assert_abs_diff_eq!(v, 2.0 - 2.0 * (-0.5f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(v, 0.786939, epsilon = 1e-6);
    }

    #[test]
    fn mmd_matches_naive_on_random() {
        let mut rng = Rng::new(99);
        let x = random(&mut rng, 13, 5);
        let y = random(&mut rng, 17, 5);
        let p = KernelParams::new(vec![0.7, 1.4, 2.8], vec![0.3, -0.1, 0.8]).unwrap();
        let v = mmd2_unbiased(&x, &y, &p).unwrap();
        assert_abs_diff_eq!(v, naive_mmd2(&x, &y, &p), epsilon = 1e-12);
        let (g, _) = mmd2_grad(&x, &y, &p).unwrap();
        assert_abs_diff_eq!(g, v, epsilon = 1e-12);
    }

    #[test]
    fn mmd_errors() {
        let p = KernelParams::uniform(vec![1.0]).unwrap();
        assert!(matches!(
            mmd2_unbiased(&col(&[0.0]), &col(&[1.0, 2.0]), &p),
            Err(Error::InsufficientSamples(_))
        ));
        let y = Matrix::zeros(3, 2);
        assert!(matches!(mmd2_unbiased(&col(&[0.0, 1.0]), &y, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_swap_symmetry() {
        let mut rng = Rng::new(3);
        let x = random(&mut rng, 6, 3);
        let y = random(&mut rng, 6, 3);
        let p = KernelParams::new(vec![0.5, 1.0, 2.0], vec![0.0, 0.4, -0.2]).unwrap();
        let (_, gxy) = mmd2_grad(&x, &y, &p).unwrap();
        let (_, gyx) = mmd2_grad(&y, &x, &p).unwrap();
        assert!(gxy.d_x.max_abs_diff(&gyx.d_y) < 1e-14);
        assert!(gxy.d_y.max_abs_diff(&gyx.d_x) < 1e-14);
    }

    #[test]
    fn grad_logits_vanish_for_identical_clouds() {
        // Every row is the same point, so each kernel block is all ones.
        let x = Matrix::from_rows(&[[0.4, -1.1]; 5]).unwrap();
        let p = KernelParams::uniform(vec![0.5, 1.0, 2.0]).unwrap();
        let (v, g) = mmd2_grad(&x, &x, &p).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        g.d_logits.iter().for_each(|&d| assert_abs_diff_eq!(d, 0.0, epsilon = 1e-15));
    }

    #[test]
    fn adaptive_params_use_pooled_median() {
        let p = KernelParams::adaptive(&col(&[0.0, 1.0]), &col(&[3.0, 3.5]), 3, 2.0, None).unwrap();
        // pooled {0,1,3,3.5}: d² = {1,9,12.25,4,6.25,0.25} → median (4+6.25)/2
        let base = (5.125f64 / 2.0).sqrt();
        assert_abs_diff_eq!(p.bandwidths()[1], base, epsilon = 1e-12);
        assert_abs_diff_eq!(p.bandwidths()[0], base / 2.0, epsilon = 1e-12);
    }
}
