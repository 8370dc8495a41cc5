//! Synthetic specialization tasks.
//!
//! Cluster `c` draws `x ~ N(μ_c, I)` and targets `y = A_c·x + noise` with
//! its own random `A_c`. For classification the label is `argmax(A_c·x)`.
//! A model that routes each cluster to its own expert can fit every
//! cluster; a single linear map cannot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ClusterRegression,
    ClusterClassification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_clusters: usize,
    pub d_model: usize,
    /// Target dimension, or the number of classes.
    pub d_out: usize,
    pub samples_per_cluster: usize,
    /// Target noise std (regression only).
    pub noise_std: f64,
    /// Cluster means are `separation · g_c` with `g_c ~ N(0, I/d_model)`.
    pub separation: f64,
    /// Cluster `c` gets a share of samples proportional to `(c + 1)^-skew`.
    pub skew: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::ClusterRegression,
            n_clusters: 8,
            d_model: 8,
            d_out: 4,
            samples_per_cluster: 256,
            noise_std: 0.05,
            separation: 6.0,
            skew: 0.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Checks the fields. A single cluster is allowed for smoke runs.
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.d_model == 0 || self.d_out == 0 || self.samples_per_cluster == 0 {
            return Err(Error::Config("task sizes must be positive".into()));
        }
        if self.kind == TaskKind::ClusterClassification && self.d_out < 2 {
            return Err(Error::Config("classification needs at least 2 classes".into()));
        }
        if !(self.noise_std >= 0.0) || !self.separation.is_finite() || !self.skew.is_finite() {
            return Err(Error::Config("noise_std, separation and skew must be finite, noise_std >= 0".into()));
        }
        Ok(())
    }

    /// Samples per cluster after skewing; the total stays
    /// `n_clusters · samples_per_cluster` up to rounding, each at least 1.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let w: Vec<f64> = (0..self.n_clusters)
            .map(|c| ((c + 1) as f64).powf(-self.skew))
            .collect();
        let total: f64 = w.iter().sum();
        let budget = (self.n_clusters * self.samples_per_cluster) as f64;
        w.iter()
            .map(|v| ((v / total * budget).round() as usize).max(1))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(Vec<Vec<f64>>),
    Classification(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Targets,
    pub clusters: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// The samples belonging to the listed clusters, in order.
    pub fn restrict(&self, clusters: &[usize]) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| clusters.contains(&self.clusters[i])).collect();
        Dataset {
            inputs: keep.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: match &self.targets {
                Targets::Regression(t) => Targets::Regression(keep.iter().map(|&i| t[i].clone()).collect()),
                Targets::Classification(t) => Targets::Classification(keep.iter().map(|&i| t[i]).collect()),
            },
            clusters: keep.iter().map(|&i| self.clusters[i]).collect(),
            means: self.means.clone(),
        }
    }
}

pub fn make_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.d_model;
    let root = SplitRng::new(spec.seed);
    let mut prm = root.fork(0);
    let scale = 1.0 / (d as f64).sqrt();
    let means: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| (0..d).map(|_| prm.normal() * scale * spec.separation).collect())
        .collect();
    let maps: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| (0..spec.d_out * d).map(|_| prm.normal() * scale).collect())
        .collect();

    let mut data = root.fork(1);
    let mut inputs = Vec::new();
    let mut clusters = Vec::new();
    let mut reg = Vec::new();
    let mut cls = Vec::new();
    for (c, &size) in spec.cluster_sizes().iter().enumerate() {
        for _ in 0..size {
            let x: Vec<f64> = means[c].iter().map(|m| m + data.normal()).collect();
            let y: Vec<f64> = (0..spec.d_out)
                .map(|k| maps[c][k * d..(k + 1) * d].iter().zip(&x).map(|(a, b)| a * b).sum())
                .collect();
            match spec.kind {
                TaskKind::ClusterRegression => {
                    reg.push(y.iter().map(|v| v + spec.noise_std * data.normal()).collect());
                }
                TaskKind::ClusterClassification => {
                    cls.push(crate::routing::argmax(&y).expect("finite targets"));
                }
            }
            inputs.push(x);
            clusters.push(c);
        }
    }
    let targets = match spec.kind {
        TaskKind::ClusterRegression => Targets::Regression(reg),
        TaskKind::ClusterClassification => Targets::Classification(cls),
    };
    Ok(Dataset {
        inputs,
        targets,
        clusters,
        means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = TaskSpec {
            noise_std: 0.0,
            ..TaskSpec::default()
        };
        assert_eq!(make_task(&spec).unwrap(), make_task(&spec).unwrap());
        let other = TaskSpec { seed: 1, ..spec.clone() };
        assert_ne!(make_task(&spec).unwrap().inputs, make_task(&other).unwrap().inputs);
    }

    #[test]
    fn well_separated_clusters_are_recovered_by_nearest_mean() {
        let spec = TaskSpec {
            separation: 30.0,
            ..TaskSpec::default()
        };
        let data = make_task(&spec).unwrap();
        let mut min_gap = f64::INFINITY;
        for a in 0..spec.n_clusters {
            for b in 0..a {
                let d: f64 = data.means[a].iter().zip(&data.means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                min_gap = min_gap.min(d.sqrt());
            }
        }
        assert!(min_gap >= 6.0, "{min_gap}");
        for (x, &c) in data.inputs.iter().zip(&data.clusters) {
            let nearest = (0..spec.n_clusters)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(&data.means[a]).map(|(u, v)| (u - v).powi(2)).sum();
                    let db: f64 = x.iter().zip(&data.means[b]).map(|(u, v)| (u - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, c);
        }
    }

    #[test]
    fn skew_shrinks_later_clusters() {
        let spec = TaskSpec {
            skew: 1.5,
            ..TaskSpec::default()
        };
        let sizes = spec.cluster_sizes();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        assert!(sizes[0] > 4 * sizes[7]);
        let flat = TaskSpec::default().cluster_sizes();
        assert!(flat.iter().all(|&s| s == 256));
    }

    #[test]
    fn classification_labels_in_range() {
        let spec = TaskSpec {
            kind: TaskKind::ClusterClassification,
            ..TaskSpec::default()
        };
        match make_task(&spec).unwrap().targets {
            Targets::Classification(l) => assert!(l.iter().all(|&v| v < spec.d_out)),
            _ => panic!("expected labels"),
        }
    }

    #[test]
    fn restrict_keeps_only_listed_clusters() {
        let data = make_task(&TaskSpec::default()).unwrap();
        let sub = data.restrict(&[1, 3]);
        assert_eq!(sub.len(), 512);
        assert!(sub.clusters.iter().all(|c| *c == 1 || *c == 3));
    }

    #[test]
    fn serde_names() {
        let s = serde_json::to_string(&TaskKind::ClusterRegression).unwrap();
        assert_eq!(s, "\"cluster-regression\"");
        assert!(TaskSpec {
            d_out: 1,
            kind: TaskKind::ClusterClassification,
            ..TaskSpec::default()
        }
        .validate()
        .is_err());
    }
}
