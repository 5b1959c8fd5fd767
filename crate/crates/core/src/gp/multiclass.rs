//! One-vs-all multiclass classification over binary Laplace classifiers.

use serde::{Deserialize, Serialize};

use super::cg::CgOptions;
use super::kernel::KernelSpec;
use super::laplace::{optimize_hyperparams, GpBinaryClassifier};
use crate::error::{Error, Result};

pub const GP_SCHEMA: &str = "gp/1";

/// Classifier training options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpTraining {
    pub init: KernelSpec,
    pub optimize: bool,
    #[serde(default)]
    pub cg: CgOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpMulticlass {
    /// Class ids in ascending order.
    pub classes: Vec<usize>,
    pub binaries: Vec<GpBinaryClassifier>,
}

impl GpMulticlass {
    /// Train one classifier per class, each against all other classes.
    pub fn fit(x: &[Vec<f64>], labels: &[usize], training: &GpTraining) -> Result<Self> {
        if x.len() != labels.len() {
            return Err(Error::invalid(format!("{} inputs but {} labels", x.len(), labels.len())));
        }
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::invalid("multiclass training needs at least two classes"));
        }
        let binaries = classes
            .iter()
            .map(|&c| {
                let y: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
                let kernel =
                    if training.optimize { optimize_hyperparams(x, &y, &training.init, &training.cg)? } else { training.init.clone() };
                log::debug!("class {c}: kernel {kernel:?}");
                GpBinaryClassifier::fit(x.to_vec(), y, kernel)
            })
            .collect::<Result<_>>()?;
        Ok(GpMulticlass { classes, binaries })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.binaries[0].dim()
    }

    /// Raw one-vs-all probabilities, one per class.
    pub fn scores(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.binaries.iter().map(|b| b.predict(q).map(|p| p.p_plus)).collect()
    }

    /// Normalized class distribution.
    pub fn predict(&self, q: &[f64]) -> Result<Vec<f64>> {
        let s = self.scores(q)?;
        let total: f64 = s.iter().sum();
        Ok(s.iter().map(|v| v / total).collect())
    }

    /// Index into `classes` of the most probable class, first on ties.
    pub fn argmax(p: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        best
    }

    pub fn position(&self, class: usize) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    pub fn to_json(&self, config_hash: Option<&str>) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file(config_hash))?)
    }

    fn to_file(&self, config_hash: Option<&str>) -> GpFile {
        GpFile {
            schema: GP_SCHEMA.into(),
            classes: self.classes.clone(),
            binaries: self
                .classes
                .iter()
                .zip(&self.binaries)
                .map(|(&class, b)| BinaryEntry {
                    class,
                    kernel: b.kernel.clone(),
                    x: b.x.clone(),
                    y: b.y.clone(),
                    f_tilde: b.f_tilde().to_vec(),
                })
                .collect(),
            config_hash: config_hash.map(str::to_string),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GpFile = serde_json::from_str(text)?;
        if file.schema != GP_SCHEMA {
            return Err(Error::Schema { expected: GP_SCHEMA.into(), found: file.schema });
        }
        if file.classes.len() < 2 || file.classes.len() != file.binaries.len() {
            return Err(Error::invalid("gp file needs one binary classifier per class and at least two classes"));
        }
        if file.classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("gp classes must be strictly ascending"));
        }
        let mut binaries = Vec::with_capacity(file.binaries.len());
        let mut dim = None;
        for (&c, e) in file.classes.iter().zip(file.binaries) {
            if e.class != c {
                return Err(Error::invalid(format!("binary classifier for class {} listed under {c}", e.class)));
            }
            let d = e.x.first().map(|r| r.len());
            if dim.is_some() && d != dim {
                return Err(Error::invalid("binary classifiers disagree on input dimension"));
            }
            dim = d;
            binaries.push(GpBinaryClassifier::from_mode(e.x, e.y, e.kernel, e.f_tilde)?);
        }
        Ok(GpMulticlass { classes: file.classes, binaries })
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
struct GpFile {
    schema: String,
    classes: Vec<usize>,
    binaries: Vec<BinaryEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BinaryEntry {
    class: usize,
    kernel: KernelSpec,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    f_tilde: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clusters(seed: u64, per: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let centers = [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, ctr) in centers.iter().enumerate() {
            for _ in 0..per {
                x.push(ctr.iter().map(|v| v + 0.05 * (rng.random::<f64>() - 0.5)).collect());
                y.push(c * 2 + 1);
            }
        }
        (x, y)
    }

    fn training() -> GpTraining {
        GpTraining { init: KernelSpec::ard(2.0, vec![0.3; 3]), optimize: false, cg: CgOptions::default() }
    }

    #[test]
    fn separable_clusters_are_classified() {
        let (x, y) = clusters(3, 10);
        let m = GpMulticlass::fit(&x, &y, &training()).unwrap();
        assert_eq!(m.classes, vec![1, 3, 5]);
        for (xi, &yi) in x.iter().zip(&y) {
            let p = m.predict(xi).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(m.classes[GpMulticlass::argmax(&p)], yi);
        }
    }

    #[test]
    fn file_round_trip_preserves_predictions() {
        let (x, y) = clusters(4, 6);
        let m = GpMulticlass::fit(&x, &y, &training()).unwrap();
        let back = GpMulticlass::from_json(&m.to_json(Some("h")).unwrap()).unwrap();
        for q in [[0.5, 0.3, 0.2], [0.2, 0.2, 0.6]] {
            let (a, b) = (m.predict(&q).unwrap(), back.predict(&q).unwrap());
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-9);
            }
        }
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json(None).unwrap()).unwrap();
        v["schema"] = "gp/0".into();
        assert!(GpMulticlass::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn single_class_rejected() {
        assert!(GpMulticlass::fit(&[vec![0.0], vec![1.0]], &[2, 2], &training()).is_err());
    }

    proptest! {
        #[test]
        fn normalization_keeps_argmax(q in prop::collection::vec(0.0f64..1.0, 3)) {
            let (x, y) = clusters(5, 5);
            let m = GpMulticlass::fit(&x, &y, &training()).unwrap();
            let raw = m.scores(&q).unwrap();
            let p = m.predict(&q).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(GpMulticlass::argmax(&raw), GpMulticlass::argmax(&p));
        }
    }
}
