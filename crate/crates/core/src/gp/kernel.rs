//! Squared-exponential kernels with shared (RBF) or per-dimension (ARD)
//! length scales.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Rbf,
    Ard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub signal_sigma: f64,
    pub length_scales: Vec<f64>,
    /// Observation noise; used by regression only.
    #[serde(default)]
    pub noise_sigma: f64,
}

impl KernelSpec {
    pub fn rbf(signal_sigma: f64, length_scale: f64) -> Self {
        KernelSpec { kind: KernelKind::Rbf, signal_sigma, length_scales: vec![length_scale], noise_sigma: 0.0 }
    }

    pub fn ard(signal_sigma: f64, length_scales: Vec<f64>) -> Self {
        KernelSpec { kind: KernelKind::Ard, signal_sigma, length_scales, noise_sigma: 0.0 }
    }

    pub fn with_noise(mut self, noise_sigma: f64) -> Self {
        self.noise_sigma = noise_sigma;
        self
    }

    /// Check the scales and, when `dim` is given, the ARD length.
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.signal_sigma) {
            return Err(Error::invalid(format!("signal sigma must be positive, got {}", self.signal_sigma)));
        }
        if !self.length_scales.iter().all(|&l| pos(l)) || self.length_scales.is_empty() {
            return Err(Error::invalid("length scales must be positive"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        match (self.kind, dim) {
            (KernelKind::Rbf, _) if self.length_scales.len() != 1 => {
                Err(Error::invalid("an RBF kernel takes exactly one length scale"))
            }
            (KernelKind::Ard, Some(d)) if self.length_scales.len() != d => Err(Error::invalid(format!(
                "ARD kernel has {} length scales for {d}-dimensional inputs",
                self.length_scales.len()
            ))),
            _ => Ok(()),
        }
    }

    fn inv_sq_scales(&self, dim: usize) -> Vec<f64> {
        match self.kind {
            KernelKind::Rbf => vec![1.0 / (self.length_scales[0] * self.length_scales[0]); dim],
            KernelKind::Ard => self.length_scales.iter().map(|l| 1.0 / (l * l)).collect(),
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let inv = self.inv_sq_scales(a.len());
        self.eval_with(&inv, a, b)
    }

    #[inline]
    fn eval_with(&self, inv: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((x, y), s) in a.iter().zip(b).zip(inv) {
            let d = x - y;
            r2 += d * d * s;
        }
        self.signal_sigma * self.signal_sigma * (-0.5 * r2).exp()
    }

    /// Number of kernel log-parameters (signal then length scales).
    pub fn n_params(&self) -> usize {
        1 + self.length_scales.len()
    }

    /// `[ln σ, ln l…]`, followed by `ln σ_n` when `with_noise`.
    pub fn log_params(&self, with_noise: bool) -> Vec<f64> {
        let mut p = vec![self.signal_sigma.ln()];
        p.extend(self.length_scales.iter().map(|l| l.ln()));
        if with_noise {
            p.push(self.noise_sigma.ln());
        }
        p
    }

    pub fn from_log_params(&self, p: &[f64], with_noise: bool) -> KernelSpec {
        let n = self.length_scales.len();
        KernelSpec {
            kind: self.kind,
            signal_sigma: p[0].exp(),
            length_scales: p[1..1 + n].iter().map(|v| v.exp()).collect(),
            noise_sigma: if with_noise { p[1 + n].exp() } else { self.noise_sigma },
        }
    }
}

fn check_dims(spec: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    let dim = a.first().or(b.first()).map_or(0, |r| r.len());
    if a.iter().chain(b).any(|r| r.len() != dim) {
        return Err(Error::invalid("inputs have inconsistent dimensions"));
    }
    spec.validate(Some(dim))?;
    Ok(dim)
}

/// Cross-covariance matrix between the rows of `a` and `b`.
pub fn kernel_matrix(spec: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let dim = check_dims(spec, a, b)?;
    let inv = spec.inv_sq_scales(dim);
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| spec.eval_with(&inv, &a[i], &b[j])))
}

/// Symmetric covariance matrix of `x` with itself.
pub fn gram(spec: &KernelSpec, x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let dim = check_dims(spec, x, &[])?;
    let inv = spec.inv_sq_scales(dim);
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval_with(&inv, &x[i], &x[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Covariance vector between `x` and one query point.
pub fn cross_vector(spec: &KernelSpec, x: &[Vec<f64>], q: &[f64]) -> Vec<f64> {
    let inv = spec.inv_sq_scales(q.len());
    x.iter().map(|r| spec.eval_with(&inv, r, q)).collect()
}

/// Derivatives of the Gram matrix with respect to each kernel log-parameter.
pub fn gram_gradients(spec: &KernelSpec, x: &[Vec<f64>], k: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let n = x.len();
    let dim = x.first().map_or(0, |r| r.len());
    let mut out = vec![k * 2.0];
    match spec.kind {
        KernelKind::Rbf => {
            let inv = 1.0 / (spec.length_scales[0] * spec.length_scales[0]);
            out.push(DMatrix::from_fn(n, n, |i, j| {
                let r2: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                k[(i, j)] * r2 * inv
            }));
        }
        KernelKind::Ard => {
            for d in 0..dim {
                let inv = 1.0 / (spec.length_scales[d] * spec.length_scales[d]);
                out.push(DMatrix::from_fn(n, n, |i, j| {
                    let diff = x[i][d] - x[j][d];
                    k[(i, j)] * diff * diff * inv
                }));
            }
        }
    }
    out
}

/// Cholesky factor of `m`, adding `1e-10·σ²·10^j` to the diagonal for
/// `j = 0..=6` until the factorization succeeds. Returns the jitter used.
pub fn cholesky_with_jitter(m: &DMatrix<f64>, sigma2: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("matrix has non-finite entries"));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    for j in 0..=6 {
        let jitter = 1e-10 * sigma2 * 10f64.powi(j);
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            log::debug!("cholesky needed jitter {jitter:e}");
            return Ok((c, jitter));
        }
    }
    Err(Error::numerical("matrix is not positive definite even with maximum jitter"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        let k = KernelSpec::rbf(1.0, 1.0);
        assert_eq!(k.eval(&[0.3, 0.1], &[0.3, 0.1]), 1.0);
        assert!((k.eval(&[0.0, 0.0], &[1.0, 1.0]) - (-1.0f64).exp()).abs() < 1e-15);
        let k2 = KernelSpec::rbf(2.0, 0.5);
        assert!((k2.eval(&[0.0], &[0.0]) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn huge_ard_scale_ignores_that_coordinate() {
        let k = KernelSpec::ard(1.3, vec![0.7, 1e6]);
        let a = k.eval(&[0.2, 0.0], &[0.5, 0.0]);
        let b = k.eval(&[0.2, 1.0], &[0.5, 0.0]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dimension_checks() {
        let x = vec![vec![0.0, 1.0], vec![1.0]];
        assert!(gram(&KernelSpec::rbf(1.0, 1.0), &x).is_err());
        let x = vec![vec![0.0, 1.0]];
        assert!(gram(&KernelSpec::ard(1.0, vec![1.0]), &x).is_err());
        assert!(KernelSpec::rbf(0.0, 1.0).validate(None).is_err());
        assert!(KernelSpec::rbf(1.0, -1.0).validate(None).is_err());
        assert!(KernelSpec::rbf(1.0, 1.0).with_noise(-0.1).validate(None).is_err());
    }

    #[test]
    fn jitter_rescues_singular_gram() {
        let x = vec![vec![0.5]; 4];
        let k = gram(&KernelSpec::rbf(1.0, 1.0), &x).unwrap();
        let (_, jitter) = cholesky_with_jitter(&k, 1.0).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-4);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_with_jitter(&bad, 1.0).unwrap_err().is_numerical());
    }

    #[test]
    fn log_params_round_trip() {
        let k = KernelSpec::ard(1.5, vec![0.3, 2.0]).with_noise(0.1);
        let p = k.log_params(true);
        assert_eq!(p.len(), 4);
        let back = k.from_log_params(&p, true);
        assert!((back.signal_sigma - 1.5).abs() < 1e-12 && (back.noise_sigma - 0.1).abs() < 1e-12);
        assert_eq!(k.from_log_params(&k.log_params(false), false).noise_sigma, 0.1);
    }

    #[test]
    fn gram_gradients_match_finite_differences() {
        let x = vec![vec![0.1, 0.9], vec![0.4, 0.2], vec![0.8, 0.5]];
        for spec in [KernelSpec::rbf(1.2, 0.6), KernelSpec::ard(0.8, vec![0.5, 1.7])] {
            let k = gram(&spec, &x).unwrap();
            let grads = gram_gradients(&spec, &x, &k);
            let p = spec.log_params(false);
            for (j, g) in grads.iter().enumerate() {
                let h = 1e-6;
                let mut up = p.clone();
                up[j] += h;
                let mut dn = p.clone();
                dn[j] -= h;
                let fd = (gram(&spec.from_log_params(&up, false), &x).unwrap()
                    - gram(&spec.from_log_params(&dn, false), &x).unwrap())
                    / (2.0 * h);
                assert!((fd - g).amax() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_and_factorizable(
            pts in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..15),
            sigma in 0.1f64..3.0,
            l in 0.05f64..2.0,
        ) {
            let spec = KernelSpec::ard(sigma, vec![l, 2.0 * l, 0.5 * l]);
            let k = gram(&spec, &pts).unwrap();
            prop_assert!((&k - k.transpose()).amax() <= 1e-12);
            prop_assert!(cholesky_with_jitter(&k, sigma * sigma).is_ok());
            let cross = kernel_matrix(&spec, &pts, &pts).unwrap();
            prop_assert!((&cross - &k).amax() == 0.0);
        }
    }
}
