//! Load-balance auxiliary loss.
//!
//! ```text
//! loss = α · n · Σ_i f_i · ḡ_i
//! ```
//!
//! `f_i = c_i / T` is the fraction of tokens dispatched to expert `i` and
//! `ḡ_i` the mean full-softmax probability of expert `i` over the same
//! tokens. `f` is a constant in backward; gradient reaches the router only
//! through `ḡ`. With top-k routing `Σ f_i = k`.
//!
//! In the global scope `f` is computed over every data shard (counts summed)
//! while `ḡ` stays per shard; in the local scope each shard uses its own `f`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::estimators::TokenTrace;

pub const DEFAULT_ALPHA: f64 = 1e-2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceScope {
    Local,
    #[default]
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsScope {
    Shard(usize),
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub alpha: f64,
    pub scope: BalanceScope,
    pub n: usize,
}

impl BalanceConfig {
    pub fn new(n: usize) -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            scope: BalanceScope::Global,
            n,
        }
    }
}

/// Dispatch counts and mean gate probabilities over a set of tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub counts: Vec<u64>,
    pub tokens: usize,
    pub top_k: usize,
    /// `ḡ_i`: token-averaged full-softmax probability.
    pub mean_gate: Vec<f64>,
    pub scope: StatsScope,
}

impl LoadStats {
    pub fn n(&self) -> usize {
        self.counts.len()
    }

    /// `f_i = c_i / T`; sums to `top_k`.
    pub fn fractions(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.tokens as f64)
            .collect()
    }

    /// Fractions divided by `top_k`, so they sum to one.
    pub fn normalized_fractions(&self) -> Vec<f64> {
        let k = self.top_k as f64;
        self.fractions().into_iter().map(|f| f / k).collect()
    }

    pub fn max_normalized_fraction(&self) -> f64 {
        self.normalized_fractions().into_iter().fold(0.0, f64::max)
    }
}

fn plain_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Counts the experts each token was dispatched to and averages the full
/// softmax of the raw router logits.
pub fn accumulate_stats(
    records: &[TokenTrace],
    logits: &[Vec<f64>],
    scope: StatsScope,
) -> Result<LoadStats> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if records.len() != logits.len() {
        return Err(Error::InconsistentStats(format!(
            "{} records for {} logit rows",
            records.len(),
            logits.len()
        )));
    }
    let n = logits[0].len();
    let top_k = records[0].decisions.len();
    let mut counts = vec![0u64; n];
    let mut mean_gate = vec![0.0; n];
    for (rec, z) in records.iter().zip(logits) {
        if z.len() != n || rec.decisions.len() != top_k {
            return Err(Error::InconsistentStats("ragged batch".into()));
        }
        for d in &rec.decisions {
            if d.expert >= n {
                return Err(Error::IndexOutOfRange {
                    index: d.expert,
                    len: n,
                });
            }
            counts[d.expert] += 1;
        }
        for (m, p) in mean_gate.iter_mut().zip(plain_softmax(z)) {
            *m += p;
        }
    }
    let t = records.len();
    mean_gate.iter_mut().for_each(|m| *m /= t as f64);
    Ok(LoadStats {
        counts,
        tokens: t,
        top_k,
        mean_gate,
        scope,
    })
}

/// Sums counts and tokens and token-weights the mean gates, in shard order.
pub fn global_reduce(shards: &[LoadStats]) -> Result<LoadStats> {
    let first = shards.first().ok_or(Error::EmptyBatch)?;
    let n = first.n();
    let top_k = first.top_k;
    let mut counts = vec![0u64; n];
    let mut weighted = vec![0.0; n];
    let mut tokens = 0;
    for s in shards {
        if s.n() != n || s.mean_gate.len() != n {
            return Err(Error::InconsistentStats(format!(
                "shard has {} experts, expected {n}",
                s.n()
            )));
        }
        if s.top_k != top_k {
            return Err(Error::InconsistentStats(format!(
                "shard has top_k {}, expected {top_k}",
                s.top_k
            )));
        }
        for i in 0..n {
            counts[i] += s.counts[i];
            weighted[i] += s.mean_gate[i] * s.tokens as f64;
        }
        tokens += s.tokens;
    }
    Ok(LoadStats {
        counts,
        tokens,
        top_k,
        mean_gate: weighted.into_iter().map(|w| w / tokens as f64).collect(),
        scope: StatsScope::Global,
    })
}

/// `α · n · Σ f_i · ḡ_i` with `f` from `stats` (constant) and `ḡ` on the tape.
pub fn balance_loss(stats: &LoadStats, cfg: &BalanceConfig, mean_gate: &Tensor) -> Result<Tensor> {
    if stats.n() != cfg.n || mean_gate.len() != cfg.n {
        return Err(Error::InconsistentStats(format!(
            "balance config expects {} experts, stats have {} and gates {}",
            cfg.n,
            stats.n(),
            mean_gate.len()
        )));
    }
    let f = Tensor::vector(stats.fractions());
    Ok(mean_gate.dot(&f)?.scale(cfg.alpha * cfg.n as f64))
}

/// Scalar evaluation of the loss from stats alone.
pub fn balance_loss_value(stats: &LoadStats, cfg: &BalanceConfig) -> f64 {
    let dot: f64 = stats
        .fractions()
        .iter()
        .zip(&stats.mean_gate)
        .map(|(f, g)| f * g)
        .sum();
    cfg.alpha * cfg.n as f64 * dot
}

/// CSV with header `layer,expert,count,fraction,mean_gate`, one row per
/// (layer, expert).
pub fn load_stats_csv(layers: &[LoadStats]) -> String {
    let mut out = String::from("layer,expert,count,fraction,mean_gate\n");
    for (layer, s) in layers.iter().enumerate() {
        for (i, f) in s.fractions().iter().enumerate() {
            let _ = writeln!(out, "{layer},{i},{},{f},{}", s.counts[i], s.mean_gate[i]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::estimators::RoutingDecision;
    use crate::rng::SplitRng;

    fn trace(experts: &[usize]) -> TokenTrace {
        TokenTrace {
            decisions: experts
                .iter()
                .map(|&e| RoutingDecision {
                    expert: e,
                    gate_prob: 0.5,
                    is_argmax: false,
                    bernoulli: None,
                    scale: 1.0,
                    logits: Vec::new(),
                })
                .collect(),
            jitter: None,
        }
    }

    fn stats(counts: Vec<u64>, tokens: usize, top_k: usize, mean_gate: Vec<f64>) -> LoadStats {
        LoadStats {
            counts,
            tokens,
            top_k,
            mean_gate,
            scope: StatsScope::Global,
        }
    }

    #[test]
    fn all_to_one_expert() {
        let recs = vec![trace(&[0]); 4];
        let z = vec![vec![0.0, 0.0, 0.0]; 4];
        let s = accumulate_stats(&recs, &z, StatsScope::Global).unwrap();
        assert_eq!(s.fractions(), vec![1.0, 0.0, 0.0]);
        assert_eq!(s.mean_gate, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn half_and_half() {
        let recs = vec![trace(&[0]), trace(&[1])];
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = accumulate_stats(&recs, &z, StatsScope::Global).unwrap();
        assert_eq!(s.fractions(), vec![0.5, 0.5]);
        assert!(matches!(
            accumulate_stats(&[], &[], StatsScope::Global),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn counts_match_naive_recount() {
        let mut rng = SplitRng::new(4);
        let (n, k) = (6, 2);
        let mut recs = Vec::new();
        let mut z = Vec::new();
        for _ in 0..50 {
            let a = rng.below(n);
            let mut b = rng.below(n);
            while b == a {
                b = rng.below(n);
            }
            recs.push(trace(&[a, b]));
            z.push((0..n).map(|_| rng.normal()).collect::<Vec<f64>>());
        }
        let s = accumulate_stats(&recs, &z, StatsScope::Global).unwrap();
        for e in 0..n {
            let naive = recs
                .iter()
                .map(|r| r.decisions.iter().filter(|d| d.expert == e).count())
                .sum::<usize>();
            assert_eq!(s.counts[e] as usize, naive);
        }
        assert_eq!(s.counts.iter().sum::<u64>() as usize, k * 50);
        assert!((s.fractions().iter().sum::<f64>() - k as f64).abs() < 1e-12);
        assert!((s.mean_gate.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_loss_equals_alpha() {
        for n in [2usize, 4, 8, 16] {
            let s = stats(vec![1; n], n, 1, vec![1.0 / n as f64; n]);
            let cfg = BalanceConfig { alpha: 0.37, ..BalanceConfig::new(n) };
            let loss = balance_loss(&s, &cfg, &Tensor::vector(s.mean_gate.clone())).unwrap();
            assert!((loss.item() - 0.37).abs() <= 4.0 * f64::EPSILON * 0.37);
        }
    }

    #[test]
    fn concentrated_loss_equals_alpha_n() {
        let n = 5;
        let mut g = vec![0.0; n];
        g[2] = 1.0;
        let s = stats(vec![0, 0, 7, 0, 0], 7, 1, g.clone());
        let cfg = BalanceConfig { alpha: 0.1, ..BalanceConfig::new(n) };
        let loss = balance_loss(&s, &cfg, &Tensor::vector(g)).unwrap();
        assert!((loss.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_scalar_recomputation() {
        let mut rng = SplitRng::new(8);
        for _ in 0..10 {
            let n = 4;
            let counts: Vec<u64> = (0..n).map(|_| rng.below(10) as u64).collect();
            let t = counts.iter().sum::<u64>().max(1) as usize;
            let raw: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let total: f64 = raw.iter().sum();
            let g: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let s = stats(counts.clone(), t, 1, g.clone());
            let cfg = BalanceConfig { alpha: 0.3, ..BalanceConfig::new(n) };
            let mut expected = 0.0;
            for i in 0..n {
                expected += counts[i] as f64 / t as f64 * g[i];
            }
            expected *= 0.3 * n as f64;
            let got = balance_loss(&s, &cfg, &Tensor::vector(g)).unwrap().item();
            assert!((got - expected).abs() < 1e-14);
            assert!((balance_loss_value(&s, &cfg) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_flows_only_through_mean_gate() {
        let g = vec![0.1, 0.6, 0.3];
        let cfg = BalanceConfig { alpha: 0.5, ..BalanceConfig::new(3) };
        let grad_for = |counts: Vec<u64>| {
            let tape = Tape::new();
            let gt = tape.leaf(&[3], g.clone()).unwrap();
            let t = counts.iter().sum::<u64>() as usize;
            let s = stats(counts, t, 1, g.clone());
            let loss = balance_loss(&s, &cfg, &gt).unwrap();
            (loss.item(), loss.backward().unwrap().wrt(&gt))
        };
        let (v1, g1) = grad_for(vec![1, 1, 1]);
        let (v2, g2) = grad_for(vec![2, 1, 1]);
        assert_ne!(v1, v2);
        // d loss / d ḡ = α n f, which is what changes with the counts
        let expected: Vec<f64> = [1.0 / 3.0; 3].iter().map(|f| 0.5 * 3.0 * f).collect();
        for (a, b) in g1.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_ne!(g1, g2);
    }

    #[test]
    fn uniform_f_minimizes_for_uniform_gate() {
        let n = 4;
        let cfg = BalanceConfig::new(n);
        let uniform = stats(vec![5; n], 20, 1, vec![0.25; n]);
        let skewed = stats(vec![8, 4, 4, 4], 20, 1, vec![0.25; n]);
        assert!(balance_loss_value(&uniform, &cfg) <= balance_loss_value(&skewed, &cfg) + 1e-15);
        assert!((balance_loss_value(&uniform, &cfg) - cfg.alpha).abs() < 1e-15);
    }

    #[test]
    fn global_reduce_examples() {
        let a = stats(vec![4, 0], 4, 1, vec![0.9, 0.1]);
        let b = stats(vec![0, 4], 4, 1, vec![0.2, 0.8]);
        assert_eq!(global_reduce(std::slice::from_ref(&a)).unwrap().counts, a.counts);
        let g = global_reduce(&[a.clone(), b]).unwrap();
        assert_eq!(g.fractions(), vec![0.5, 0.5]);
        assert_eq!(g.scope, StatsScope::Global);
        assert!((g.mean_gate[0] - 0.55).abs() < 1e-15);
        let c = stats(vec![1, 1, 1], 3, 1, vec![1.0 / 3.0; 3]);
        assert!(matches!(global_reduce(&[a, c]), Err(Error::InconsistentStats(_))));
    }

    #[test]
    fn csv_layout() {
        let s = stats(vec![1, 3], 4, 1, vec![0.25, 0.75]);
        let csv = load_stats_csv(&[s]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("layer,expert,count,fraction,mean_gate"));
        assert_eq!(lines.next(), Some("0,0,1,0.25,0.25"));
        assert_eq!(lines.next(), Some("0,1,3,0.75,0.75"));
    }
}
