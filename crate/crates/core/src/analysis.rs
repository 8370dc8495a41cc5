//! Routing distributions and their cosine similarities across datasets.
//!
//! Distributions are flattened layer-major, then by expert, before
//! comparing; keep that order when comparing files from different runs.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::estimators::TokenTrace;

/// Expert selection counts per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDistribution {
    /// `counts[layer][expert]`
    pub counts: Vec<Vec<u64>>,
    /// Tokens routed through each layer.
    pub tokens: usize,
}

impl RoutingDistribution {
    pub fn from_counts(counts: Vec<Vec<u64>>, tokens: usize) -> Result<Self> {
        if counts.is_empty() || counts.iter().any(|r| r.is_empty() || r.len() != counts[0].len()) {
            return Err(Error::InconsistentStats("counts must be a non-empty rectangle".into()));
        }
        Ok(Self { counts, tokens })
    }

    /// Counts every routing decision in `traces[layer][token]`.
    pub fn from_traces(traces: &[Vec<TokenTrace>], n_expert: usize) -> Result<Self> {
        let tokens = traces.first().map_or(0, Vec::len);
        let mut counts = vec![vec![0u64; n_expert]; traces.len()];
        for (row, layer) in counts.iter_mut().zip(traces) {
            if layer.len() != tokens {
                return Err(Error::InconsistentStats("layers saw different token counts".into()));
            }
            for d in layer.iter().flat_map(|t| &t.decisions) {
                *row.get_mut(d.expert).ok_or(Error::IndexOutOfRange {
                    index: d.expert,
                    len: n_expert,
                })? += 1;
            }
        }
        Self::from_counts(counts, tokens)
    }

    pub fn n_layers(&self) -> usize {
        self.counts.len()
    }

    pub fn n_expert(&self) -> usize {
        self.counts[0].len()
    }

    /// Each row divided by its total (rows of zeros stay zero).
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }

    /// Layer-major flattening of the normalized rows.
    pub fn flatten(&self) -> Vec<f64> {
        self.normalized().into_iter().flatten().collect()
    }

    /// Header `layer,expert,count,fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,expert,count,fraction\n");
        for (l, (row, norm)) in self.counts.iter().zip(self.normalized()).enumerate() {
            for (e, (c, f)) in row.iter().zip(norm).enumerate() {
                let _ = writeln!(out, "{l},{e},{c},{f}");
            }
        }
        out
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// Cosine similarity between every pair of flattened distributions.
    /// The diagonal is set to exactly 1 for nonzero distributions.
    pub fn new(labels: Vec<String>, dists: &[RoutingDistribution]) -> Result<Self> {
        if labels.len() != dists.len() || dists.is_empty() {
            return Err(Error::InconsistentStats("one label per distribution required".into()));
        }
        let shape = (dists[0].n_layers(), dists[0].n_expert());
        if dists.iter().any(|d| (d.n_layers(), d.n_expert()) != shape) {
            return Err(Error::InconsistentStats("distributions have different shapes".into()));
        }
        let flat: Vec<Vec<f64>> = dists.iter().map(RoutingDistribution::flatten).collect();
        let k = flat.len();
        let mut values = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..=i {
                let v = if i == j {
                    if flat[i].iter().any(|&x| x != 0.0) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    cosine(&flat[i], &flat[j])
                };
                values[i][j] = v;
                values[j][i] = v;
            }
        }
        Ok(Self { labels, values })
    }

    /// Header `label,<label_1>,...,<label_k>`, one row per label.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            out.push_str(l);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_sixteen_experts() {
        let d = RoutingDistribution::from_counts(vec![vec![25; 16]; 3], 200).unwrap();
        for row in d.normalized() {
            assert!(row.iter().all(|&v| v == 0.0625));
        }
        assert!(d.to_csv().starts_with("layer,expert,count,fraction\n0,0,25,0.0625\n"));
    }

    #[test]
    fn single_dataset_is_one() {
        let d = RoutingDistribution::from_counts(vec![vec![3, 1]], 4).unwrap();
        let s = SimilarityMatrix::new(vec!["a".into()], &[d]).unwrap();
        assert_eq!(s.values, vec![vec![1.0]]);
        assert_eq!(s.to_csv(), "label,a\na,1\n");
    }

    #[test]
    fn disjoint_routing_is_orthogonal() {
        let a = RoutingDistribution::from_counts(vec![vec![4, 0]], 4).unwrap();
        let b = RoutingDistribution::from_counts(vec![vec![0, 4]], 4).unwrap();
        let s = SimilarityMatrix::new(vec!["a".into(), "b".into()], &[a, b]).unwrap();
        assert_eq!(s.values[0][1], 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = RoutingDistribution::from_counts(vec![vec![1, 1]], 2).unwrap();
        let b = RoutingDistribution::from_counts(vec![vec![1, 1, 1]], 3).unwrap();
        assert!(SimilarityMatrix::new(vec!["a".into(), "b".into()], &[a, b]).is_err());
        assert!(RoutingDistribution::from_counts(vec![vec![1], vec![1, 2]], 2).is_err());
    }

    proptest! {
        #[test]
        fn rows_normalize_and_matrix_is_symmetric(
            rows in prop::collection::vec(prop::collection::vec(0u64..50, 5), 1..4),
            shift in 0u64..10,
        ) {
            let layers = rows.len();
            let a = RoutingDistribution::from_counts(rows.clone(), 10).unwrap();
            for row in a.normalized() {
                let s: f64 = row.iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            }
            let shifted: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|c| c + shift).collect()).collect();
            let b = RoutingDistribution::from_counts(shifted, 10).unwrap();
            let c = RoutingDistribution::from_counts(vec![vec![1; 5]; layers], 10).unwrap();
            let m = SimilarityMatrix::new(vec!["a".into(), "b".into(), "c".into()], &[a, b, c]).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert_eq!(m.values[i][j], m.values[j][i]);
                    prop_assert!((0.0..=1.0).contains(&m.values[i][j]));
                }
            }
            prop_assert_eq!(m.values[1][1], 1.0);
            prop_assert_eq!(m.values[2][2], 1.0);
        }
    }
}
