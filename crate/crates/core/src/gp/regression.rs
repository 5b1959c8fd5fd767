//! Exact GP regression and the per-activity regressors used to flag
//! conflicting activities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cg::{minimize, CgOptions};
use super::kernel::{cholesky_with_jitter, cross_vector, gram, gram_gradients, KernelSpec};
use crate::error::{Error, Result};

pub const GPR_SCHEMA: &str = "gpr/1";

/// A fitted regressor with its factor of `K + σ_n² I`.
#[derive(Debug, Clone)]
pub struct GpRegressor {
    pub kernel: KernelSpec,
    pub x: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    alpha: DVector<f64>,
    l: DMatrix<f64>,
    jitter: f64,
}

impl PartialEq for GpRegressor {
    fn eq(&self, other: &Self) -> bool {
        self.kernel == other.kernel && self.x == other.x && self.targets == other.targets
    }
}

fn noisy_gram(kernel: &KernelSpec, x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let mut k = gram(kernel, x)?;
    let noise = kernel.noise_sigma * kernel.noise_sigma;
    for i in 0..x.len() {
        k[(i, i)] += noise;
    }
    Ok(k)
}

impl GpRegressor {
    pub fn fit(x: Vec<Vec<f64>>, targets: Vec<f64>, kernel: KernelSpec) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::invalid("regression needs at least one training point"));
        }
        if x.len() != targets.len() {
            return Err(Error::invalid(format!("{} inputs but {} targets", x.len(), targets.len())));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("regression targets must be finite"));
        }
        let ky = noisy_gram(&kernel, &x)?;
        let (chol, jitter) = cholesky_with_jitter(&ky, kernel.signal_sigma * kernel.signal_sigma)?;
        let alpha = chol.solve(&DVector::from_column_slice(&targets));
        Ok(GpRegressor { kernel, x, targets, alpha, l: chol.unpack(), jitter })
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    /// Diagonal jitter the factorization needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Predictive mean and standard deviation of the latent function.
    pub fn predict(&self, q: &[f64]) -> Result<(f64, f64)> {
        if q.len() != self.dim() {
            return Err(Error::invalid(format!("query has {} dimensions, model expects {}", q.len(), self.dim())));
        }
        let ks = DVector::from_vec(cross_vector(&self.kernel, &self.x, q));
        let mu = ks.dot(&self.alpha);
        let v = self.l.solve_lower_triangular(&ks).expect("factor has a positive diagonal");
        let var = self.kernel.eval(q, q) - v.dot(&v);
        if var < -1e-9 {
            return Err(Error::numerical(format!("negative predictive variance {var:e}")));
        }
        Ok((mu, var.max(0.0).sqrt()))
    }

    /// Mean and standard deviation of a new noisy observation.
    pub fn predict_observation(&self, q: &[f64]) -> Result<(f64, f64)> {
        let (mu, s) = self.predict(q)?;
        Ok((mu, (s * s + self.kernel.noise_sigma * self.kernel.noise_sigma).sqrt()))
    }

    /// Exact log marginal likelihood of the targets.
    pub fn log_marginal(&self) -> f64 {
        let y = DVector::from_column_slice(&self.targets);
        let log_det: f64 = self.l.diagonal().iter().map(|v| v.ln()).sum();
        -0.5 * y.dot(&self.alpha) - log_det - 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Log marginal likelihood and its gradient over `[ln σ, ln l…, ln σ_n]`.
pub fn regression_evidence(kernel: &KernelSpec, x: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let reg = GpRegressor::fit(x.to_vec(), targets.to_vec(), kernel.clone())?;
    let n = x.len();
    let k = gram(kernel, x)?;
    let l_inv = reg.l.solve_lower_triangular(&DMatrix::identity(n, n)).expect("factor has a positive diagonal");
    let ky_inv = l_inv.transpose() * &l_inv;
    let inner = &reg.alpha * reg.alpha.transpose() - ky_inv;
    let mut grads: Vec<f64> = gram_gradients(kernel, x, &k).iter().map(|c| 0.5 * inner.component_mul(c).sum()).collect();
    grads.push(inner.trace() * kernel.noise_sigma * kernel.noise_sigma);
    Ok((reg.log_marginal(), grads))
}

/// Maximize the regression evidence over all kernel log-parameters,
/// including the noise level (which must start positive).
pub fn optimize_regression(x: &[Vec<f64>], targets: &[f64], init: &KernelSpec, opts: &CgOptions) -> Result<KernelSpec> {
    init.validate(x.first().map(|r| r.len()))?;
    if init.noise_sigma <= 0.0 {
        return Err(Error::invalid("noise sigma must start positive to be optimized"));
    }
    let objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, g) = regression_evidence(&init.from_log_params(p, true), x, targets)?;
        Ok((-v, g.into_iter().map(|v| -v).collect()))
    };
    let res = minimize(objective, &init.log_params(true), opts)
        .map_err(|e| Error::numerical(format!("{e}; try rescaling the initial kernel")))?;
    Ok(init.from_log_params(&res.x, true))
}

fn drop_coordinate(c: &[f64], i: usize) -> Vec<f64> {
    c.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).collect()
}

/// One regressor per feature coordinate, each predicting that coordinate
/// from the remaining ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictRegressors {
    pub regressors: Vec<GpRegressor>,
}

/// How to choose regressor kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorTraining {
    pub init: KernelSpec,
    pub optimize: bool,
    pub cg: CgOptions,
}

impl ConflictRegressors {
    /// Fit one regressor per coordinate of `features`. An ARD kernel in
    /// `init` supplies one length scale per remaining coordinate.
    pub fn fit(features: &[Vec<f64>], training: &RegressorTraining) -> Result<Self> {
        let dim = features.first().map_or(0, |r| r.len());
        if dim < 2 {
            return Err(Error::invalid("conflict regressors need features with at least two coordinates"));
        }
        let regressors = (0..dim)
            .map(|i| {
                let x: Vec<Vec<f64>> = features.iter().map(|c| drop_coordinate(c, i)).collect();
                let y: Vec<f64> = features.iter().map(|c| c[i]).collect();
                let kernel =
                    if training.optimize { optimize_regression(&x, &y, &training.init, &training.cg)? } else { training.init.clone() };
                GpRegressor::fit(x, y, kernel)
            })
            .collect::<Result<_>>()?;
        Ok(ConflictRegressors { regressors })
    }

    pub fn dim(&self) -> usize {
        self.regressors.len()
    }

    /// Observation mean and standard deviation of coordinate `i` given the rest.
    pub fn predict(&self, c: &[f64], i: usize) -> Result<(f64, f64)> {
        if c.len() != self.dim() {
            return Err(Error::invalid(format!("feature has {} entries, regressors expect {}", c.len(), self.dim())));
        }
        if i >= self.dim() {
            return Err(Error::invalid(format!("coordinate {i} out of range for {} regressors", self.dim())));
        }
        self.regressors[i].predict_observation(&drop_coordinate(c, i))
    }

    pub fn to_json(&self, config_hash: Option<&str>) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file(config_hash))?)
    }

    fn to_file(&self, config_hash: Option<&str>) -> RegressorFile {
        RegressorFile {
            schema: GPR_SCHEMA.into(),
            regressors: self
                .regressors
                .iter()
                .enumerate()
                .map(|(i, r)| RegressorEntry {
                    target_index: i,
                    kernel: r.kernel.clone(),
                    x: r.x.clone(),
                    targets: r.targets.clone(),
                })
                .collect(),
            config_hash: config_hash.map(str::to_string),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RegressorFile = serde_json::from_str(text)?;
        if file.schema != GPR_SCHEMA {
            return Err(Error::Schema { expected: GPR_SCHEMA.into(), found: file.schema });
        }
        let dim = file.regressors.len();
        if dim < 2 {
            return Err(Error::invalid("regressor file needs at least two regressors"));
        }
        let mut regressors = Vec::with_capacity(dim);
        for (i, e) in file.regressors.into_iter().enumerate() {
            if e.target_index != i {
                return Err(Error::invalid(format!("regressor {i} has target index {}", e.target_index)));
            }
            if e.x.iter().any(|r| r.len() != dim - 1) {
                return Err(Error::invalid(format!("regressor {i} inputs must have {} entries", dim - 1)));
            }
            regressors.push(GpRegressor::fit(e.x, e.targets, e.kernel)?);
        }
        Ok(ConflictRegressors { regressors })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, config_hash: Option<&str>) -> Result<()> {
        crate::io::write_json(path, &self.to_file(config_hash))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&crate::io::read_text(path.as_ref())?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegressorFile {
    schema: String,
    regressors: Vec<RegressorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegressorEntry {
    target_index: usize,
    kernel: KernelSpec,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_closed_form() {
        let (sf, sn, y0) = (1.3, 0.4, 2.0);
        let r = GpRegressor::fit(vec![vec![0.2, 0.7]], vec![y0], KernelSpec::rbf(sf, 0.5).with_noise(sn)).unwrap();
        let (mu, _) = r.predict(&[0.2, 0.7]).unwrap();
        assert!((mu - sf * sf * y0 / (sf * sf + sn * sn)).abs() < 1e-12);
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let r = GpRegressor::fit(vec![vec![0.0], vec![1.0]], vec![1.0, -2.0], KernelSpec::rbf(0.8, 0.3).with_noise(0.1)).unwrap();
        let (mu, s) = r.predict(&[100.0]).unwrap();
        assert!(mu.abs() < 1e-12 && (s * s - 0.64).abs() < 1e-12);
        let (_, so) = r.predict_observation(&[100.0]).unwrap();
        assert!((so * so - 0.65).abs() < 1e-12);
    }

    #[test]
    fn interpolates_with_tiny_noise() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.4]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0].sin()).collect();
        let r = GpRegressor::fit(x.clone(), y.clone(), KernelSpec::rbf(1.0, 0.7).with_noise(1e-6)).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((r.predict(xi).unwrap().0 - yi).abs() < 1e-4);
        }
        let exact = GpRegressor::fit(vec![vec![0.0], vec![0.0]], vec![1.0, 1.0], KernelSpec::rbf(1.0, 1.0)).unwrap();
        assert!(exact.jitter() > 0.0);
    }

    #[test]
    fn evidence_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let y: Vec<f64> = x.iter().map(|r| (3.0 * r[0]).sin() + 0.1 * rng.random::<f64>()).collect();
        let spec = KernelSpec::ard(0.9, vec![0.4, 1.3]).with_noise(0.2);
        let (_, g) = regression_evidence(&spec, &x, &y).unwrap();
        let p = spec.log_params(true);
        for j in 0..p.len() {
            let h = 1e-5;
            let mut up = p.clone();
            up[j] += h;
            let mut dn = p.clone();
            dn[j] -= h;
            let num = (regression_evidence(&spec.from_log_params(&up, true), &x, &y).unwrap().0
                - regression_evidence(&spec.from_log_params(&dn, true), &x, &y).unwrap().0)
                / (2.0 * h);
            assert!((num - g[j]).abs() <= 1e-5 * num.abs().max(1e-3), "{j}: {num} vs {}", g[j]);
        }
        let tuned = optimize_regression(&x, &y, &spec, &CgOptions::default()).unwrap();
        assert!(regression_evidence(&tuned, &x, &y).unwrap().0 > regression_evidence(&spec, &x, &y).unwrap().0);
    }

    #[test]
    fn conflict_regressors_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let a: f64 = rng.random();
                vec![a, 1.0 - a, 0.5 * a]
            })
            .collect();
        let training = RegressorTraining { init: KernelSpec::rbf(0.5, 0.5).with_noise(0.05), optimize: false, cg: CgOptions::default() };
        let regs = ConflictRegressors::fit(&feats, &training).unwrap();
        let (mu, sigma) = regs.predict(&[0.3, 0.7, 0.15], 1).unwrap();
        assert!((mu - 0.7).abs() < 0.1 && sigma > 0.05);
        let back = ConflictRegressors::from_json(&regs.to_json(None).unwrap()).unwrap();
        assert_eq!(back, regs);
        assert_eq!(back.predict(&[0.3, 0.7, 0.15], 1).unwrap(), (mu, sigma));
        assert!(regs.predict(&[0.3, 0.7], 1).is_err());
        assert!(ConflictRegressors::fit(&[vec![0.5]], &training).is_err());
    }
}
