//! Binary GP classification with a logistic likelihood and the Laplace
//! approximation.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::cg::{minimize, CgOptions};
use super::kernel::{cholesky_with_jitter, cross_vector, gram, gram_gradients, KernelSpec};
use crate::error::{Error, Result};

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 100;
const N_QUADRATURE: usize = 32;

/// Logistic sigmoid, evaluated without overflow.
pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln p(y | f)` for a label in {−1, +1}.
pub fn log_likelihood(y: f64, f: f64) -> f64 {
    -softplus(-y * f)
}

/// Gauss–Hermite nodes and weights for `∫ e^{-x²} g(x) dx`, from the
/// eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(N_QUADRATURE))
}

/// `∫ sigmoid(f) N(f | mu, sigma²) df` by 32-point Gauss–Hermite quadrature.
pub fn expected_sigmoid(mu: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return sigmoid(mu);
    }
    let (x, w) = rule();
    let s = std::f64::consts::SQRT_2 * sigma;
    let total: f64 = x.iter().zip(w).map(|(&xi, &wi)| wi * sigmoid(mu + s * xi)).sum();
    (total / std::f64::consts::PI.sqrt()).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// Laplace mode and the quantities derived from it.
#[derive(Debug, Clone)]
pub(crate) struct Mode {
    pub f: DVector<f64>,
    /// `K⁻¹ f`, carried through the iteration so `K` is never inverted.
    pub a: DVector<f64>,
    pub grad: DVector<f64>,
    pub sqrt_w: DVector<f64>,
    /// Lower Cholesky factor of `I + W^½ K W^½`.
    pub l: DMatrix<f64>,
    pub log_marginal: f64,
    pub iterations: usize,
}

struct Local {
    grad: DVector<f64>,
    w: DVector<f64>,
    loglik: f64,
}

fn local(y: &[f64], f: &DVector<f64>) -> Local {
    let n = y.len();
    let mut grad = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    let mut loglik = 0.0;
    for i in 0..n {
        let pi = sigmoid(f[i]);
        grad[i] = (y[i] + 1.0) / 2.0 - pi;
        w[i] = pi * (1.0 - pi);
        loglik += log_likelihood(y[i], f[i]);
    }
    Local { grad, w, loglik }
}

fn factor_b(k: &DMatrix<f64>, sqrt_w: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let mut b = DMatrix::from_fn(n, n, |i, j| sqrt_w[i] * k[(i, j)] * sqrt_w[j]);
    for i in 0..n {
        b[(i, i)] += 1.0;
    }
    let (chol, _) = cholesky_with_jitter(&b, 1.0)?;
    Ok(chol.unpack())
}

fn lower_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("factor has a positive diagonal")
}

fn upper_solve_t(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b).expect("factor has a positive diagonal")
}

/// Newton iteration for the posterior mode, started from `a0 = K⁻¹ f0`.
pub(crate) fn find_mode(k: &DMatrix<f64>, y: &[f64], a0: Option<&DVector<f64>>) -> Result<Mode> {
    let n = y.len();
    let mut a = a0.cloned().unwrap_or_else(|| DVector::zeros(n));
    let mut f = k * &a;
    let mut loc = local(y, &f);
    let mut psi = -0.5 * a.dot(&f) + loc.loglik;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < NEWTON_MAX_ITER {
        iterations += 1;
        let sqrt_w = loc.w.map(f64::sqrt);
        let l = factor_b(k, &sqrt_w)?;
        let b = loc.w.component_mul(&f) + &loc.grad;
        let kb = k * &b;
        let c = upper_solve_t(&l, &lower_solve(&l, &sqrt_w.component_mul(&kb)));
        let a_new = &b - sqrt_w.component_mul(&c);
        let da = &a_new - &a;
        let mut t = 1.0;
        let (a_try, f_try, loc_try, psi_try) = loop {
            let a_try = &a + &da * t;
            let f_try = k * &a_try;
            let loc_try = local(y, &f_try);
            let psi_try = -0.5 * a_try.dot(&f_try) + loc_try.loglik;
            if psi_try >= psi - 1e-12 * psi.abs().max(1.0) || t < 1e-4 {
                break (a_try, f_try, loc_try, psi_try);
            }
            t *= 0.5;
        };
        let step = (&f_try - &f).amax();
        a = a_try;
        f = f_try;
        loc = loc_try;
        psi = psi_try;
        if !psi.is_finite() {
            return Err(Error::numerical("Laplace objective became non-finite"));
        }
        if step < NEWTON_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("Laplace Newton iteration stopped after {NEWTON_MAX_ITER} steps without converging");
    }
    let sqrt_w = loc.w.map(f64::sqrt);
    let l = factor_b(k, &sqrt_w)?;
    let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
    Ok(Mode { log_marginal: psi - log_det, f, a, grad: loc.grad, sqrt_w, l, iterations })
}

fn check_labels(x: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("{} inputs but {} labels", x.len(), y.len())));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::invalid("binary labels must be -1 or +1"));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::invalid("binary classification needs at least one example of each label"));
    }
    Ok(())
}

/// Predictive summary at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryPrediction {
    pub p_plus: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// A trained binary classifier.
#[derive(Debug, Clone)]
pub struct GpBinaryClassifier {
    pub kernel: KernelSpec,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    mode: Mode,
}

impl PartialEq for GpBinaryClassifier {
    fn eq(&self, other: &Self) -> bool {
        self.kernel == other.kernel && self.x == other.x && self.y == other.y && self.mode.f == other.mode.f
    }
}

impl GpBinaryClassifier {
    /// Fit the Laplace approximation; labels are −1 or +1.
    pub fn fit(x: Vec<Vec<f64>>, y: Vec<f64>, kernel: KernelSpec) -> Result<Self> {
        check_labels(&x, &y)?;
        let k = gram(&kernel, &x)?;
        let mode = find_mode(&k, &y, None)?;
        Ok(GpBinaryClassifier { kernel, x, y, mode })
    }

    /// Rebuild a classifier from a stored mode without iterating.
    pub fn from_mode(x: Vec<Vec<f64>>, y: Vec<f64>, kernel: KernelSpec, f_tilde: Vec<f64>) -> Result<Self> {
        check_labels(&x, &y)?;
        if f_tilde.len() != y.len() || f_tilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("stored mode must be finite with one entry per training point"));
        }
        let k = gram(&kernel, &x)?;
        let f = DVector::from_vec(f_tilde);
        let loc = local(&y, &f);
        let sqrt_w = loc.w.map(f64::sqrt);
        let l = factor_b(&k, &sqrt_w)?;
        let a = loc.grad.clone();
        let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
        let log_marginal = -0.5 * a.dot(&f) + loc.loglik - log_det;
        let mode = Mode { f, a, grad: loc.grad, sqrt_w, l, log_marginal, iterations: 0 };
        Ok(GpBinaryClassifier { kernel, x, y, mode })
    }

    pub fn f_tilde(&self) -> &[f64] {
        self.mode.f.as_slice()
    }

    /// Diagonal of the negative log-likelihood Hessian at the mode.
    pub fn w(&self) -> Vec<f64> {
        self.mode.sqrt_w.iter().map(|s| s * s).collect()
    }

    pub fn newton_iterations(&self) -> usize {
        self.mode.iterations
    }

    /// Approximate log marginal likelihood `ln q(y | X, θ)`.
    pub fn log_marginal(&self) -> f64 {
        self.mode.log_marginal
    }

    /// `‖∇ ln p(y|f̃) − K⁻¹ f̃‖_∞`, using the iteration's `K⁻¹ f̃`.
    pub fn stationarity_residual(&self) -> f64 {
        (&self.mode.grad - &self.mode.a).amax()
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn predict(&self, q: &[f64]) -> Result<BinaryPrediction> {
        if q.len() != self.dim() {
            return Err(Error::invalid(format!("query has {} dimensions, model expects {}", q.len(), self.dim())));
        }
        let ks = DVector::from_vec(cross_vector(&self.kernel, &self.x, q));
        let mu = ks.dot(&self.mode.grad);
        let v = lower_solve(&self.mode.l, &self.mode.sqrt_w.component_mul(&ks));
        let var = self.kernel.eval(q, q) - v.dot(&v);
        if var < -1e-9 {
            return Err(Error::numerical(format!("negative predictive variance {var:e}")));
        }
        let sigma = var.max(0.0).sqrt();
        Ok(BinaryPrediction { p_plus: expected_sigmoid(mu, sigma), mu, sigma })
    }
}

/// Laplace log marginal likelihood and its gradient with respect to the
/// kernel log-parameters, plus the mode for warm starts.
pub(crate) fn evidence_and_gradient(
    kernel: &KernelSpec,
    x: &[Vec<f64>],
    y: &[f64],
    a0: Option<&DVector<f64>>,
) -> Result<(f64, Vec<f64>, Mode)> {
    let k = gram(kernel, x)?;
    let mode = find_mode(&k, y, a0)?;
    let n = y.len();
    let l = &mode.l;
    let sw = &mode.sqrt_w;
    // R = W^½ B⁻¹ W^½ and C = L⁻¹ W^½ K.
    let z = l.solve_lower_triangular(&DMatrix::from_diagonal(sw)).expect("factor has a positive diagonal");
    let r = z.transpose() * &z;
    let swk = DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)]);
    let c = l.solve_lower_triangular(&swk).expect("factor has a positive diagonal");
    let mut s2 = DVector::zeros(n);
    for i in 0..n {
        let pi = sigmoid(mode.f[i]);
        let third = -pi * (1.0 - pi) * (1.0 - 2.0 * pi);
        let cc: f64 = c.column(i).norm_squared();
        s2[i] = 0.5 * (k[(i, i)] - cc) * third;
    }
    let grads = gram_gradients(kernel, x, &k);
    let mut out = Vec::with_capacity(grads.len());
    for cj in &grads {
        let ca = cj * &mode.a;
        let s1 = 0.5 * mode.a.dot(&ca) - 0.5 * r.component_mul(cj).sum();
        let b = cj * &mode.grad;
        let s3 = &b - &k * (&r * &b);
        out.push(s1 + s2.dot(&s3));
    }
    Ok((mode.log_marginal, out, mode))
}

/// Maximize the Laplace marginal likelihood over the kernel log-parameters
/// by Polak–Ribière conjugate gradients.
pub fn optimize_hyperparams(x: &[Vec<f64>], y: &[f64], init: &KernelSpec, opts: &CgOptions) -> Result<KernelSpec> {
    check_labels(x, y)?;
    init.validate(x.first().map(|r| r.len()))?;
    let mut warm: Option<DVector<f64>> = None;
    let objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let spec = init.from_log_params(p, false);
        let (lml, g, mode) = evidence_and_gradient(&spec, x, y, warm.as_ref())?;
        warm = Some(mode.a);
        Ok((-lml, g.into_iter().map(|v| -v).collect()))
    };
    let res = minimize(objective, &init.log_params(false), opts)
        .map_err(|e| Error::numerical(format!("{e}; try rescaling the initial kernel")))?;
    Ok(init.from_log_params(&res.x, false))
}
