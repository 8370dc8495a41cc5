//! Router logits, the TopK indicator, `MaskedSoftmax`, and categorical
//! sampling.
//!
//! `MaskedSoftmax` keeps only experts whose logit lies within a relative
//! threshold of the best one:
//!
//! ```text
//! δ_i = [ z* − z_i ≤ r · (|z_i| + |z*|) ],   z* = max_k z_k
//! p_i = δ_i · exp(z_i / τ) / Σ_j δ_j · exp(z_j / τ)
//! ```
//!
//! The mask is computed on the raw logits. Dividing by a positive
//! temperature does not change it because both sides scale by `1/τ`.
//! Entries equal to `-inf` (experts already taken in an earlier round) are
//! never in the support.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::SplitRng;

/// Default `MaskedSoftmax` threshold. Not a validated value; see the guide.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

/// Linear router weight, `n_expert × d_model`.
#[derive(Clone, Debug)]
pub struct RouterParams {
    pub weight: Tensor,
}

impl RouterParams {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "router",
                lhs: weight.shape().to_vec(),
                rhs: Vec::new(),
            });
        }
        Ok(Self { weight })
    }

    pub fn n_expert(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `z = R · x`.
pub fn router_logits(x: &Tensor, params: &RouterParams) -> Result<Tensor> {
    params.weight.matvec(x)
}

/// Index of the largest finite entry; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in z.iter().enumerate() {
        if v.is_nan() || v == f64::NEG_INFINITY {
            continue;
        }
        match best {
            Some(b) if z[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Indices of the `k` largest entries in descending order, ties broken
/// toward the lowest index.
pub fn topk_indices(z: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = z.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    if z.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { op: "topk" });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Boolean mask of the `k` largest entries of `z`.
pub fn topk_indicator(z: &[f64], k: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; z.len()];
    for i in topk_indices(z, k)? {
        mask[i] = true;
    }
    Ok(mask)
}

/// The support `δ` of `MaskedSoftmax` for threshold `r`.
pub fn support_mask(z: &[f64], r_thresh: f64) -> Result<Vec<bool>> {
    if !(r_thresh >= 0.0) {
        return Err(Error::Config(format!("threshold must be >= 0, got {r_thresh}")));
    }
    if z.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite {
            op: "masked_softmax",
        });
    }
    let best = argmax(z).ok_or(Error::AllMasked)?;
    let top = z[best];
    Ok(z.iter()
        .map(|&v| v.is_finite() && top - v <= r_thresh * (v.abs() + top.abs()))
        .collect())
}

/// A `MaskedSoftmax` distribution over experts.
#[derive(Clone, Debug)]
pub struct GateDistribution {
    /// Probabilities; tracked when the logits were.
    pub probs: Tensor,
    /// `δ`: which experts are eligible.
    pub support: Vec<bool>,
    pub threshold: f64,
    pub temperature: f64,
}

impl GateDistribution {
    pub fn p(&self) -> &[f64] {
        self.probs.values()
    }

    pub fn n(&self) -> usize {
        self.support.len()
    }

    pub fn support_size(&self) -> usize {
        self.support.iter().filter(|&&s| s).count()
    }

    /// The most probable expert (argmax of the logits over the support).
    pub fn mode(&self) -> usize {
        argmax(self.p()).expect("support is never empty")
    }
}

/// `MaskedSoftmax(z / τ)` with the mask computed on raw `z`.
///
/// The mask is piecewise constant in `z` and is treated as a constant by
/// backward.
pub fn masked_softmax(z: &Tensor, r_thresh: f64, temperature: f64) -> Result<GateDistribution> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let support = support_mask(z.values(), r_thresh)?;
    let off: Vec<bool> = support.iter().map(|s| !s).collect();
    let probs = z
        .scale(1.0 / temperature)
        .mask_fill(&off, f64::NEG_INFINITY)?
        .softmax()?;
    Ok(GateDistribution {
        probs,
        support,
        threshold: r_thresh,
        temperature,
    })
}

/// Draws an expert by inverse CDF over the support in index order.
pub fn sample_categorical(dist: &GateDistribution, rng: &mut SplitRng) -> usize {
    sample_index(dist.p(), &dist.support, rng)
}

pub(crate) fn sample_index(p: &[f64], support: &[bool], rng: &mut SplitRng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = None;
    for (i, (&pi, &s)) in p.iter().zip(support).enumerate() {
        if !s {
            continue;
        }
        acc += pi;
        last = Some(i);
        if u < acc {
            return i;
        }
    }
    last.expect("support is never empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    #[test]
    fn router_logits_linear() {
        let r = RouterParams::new(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let x = Tensor::vector(vec![0.3, -0.2]);
        assert_eq!(router_logits(&x, &r).unwrap().values(), x.values());
        let zero = router_logits(&Tensor::zeros(&[2]), &r).unwrap();
        assert_eq!(zero.values(), &[0.0, 0.0]);
        assert!(router_logits(&Tensor::zeros(&[3]), &r).is_err());
    }

    #[test]
    fn router_logits_match_naive_loop() {
        let mut rng = SplitRng::new(11);
        let (n, d) = (5, 7);
        let w: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let params = RouterParams::new(Tensor::new(&[n, d], w.clone()).unwrap()).unwrap();
        let z = router_logits(&Tensor::vector(x.clone()), &params).unwrap();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                acc += w[i * d + j] * x[j];
            }
            assert!((acc - z.values()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indicator(&[3.0, 1.0, 2.0], 2).unwrap(), vec![true, false, true]);
        assert_eq!(topk_indicator(&[1.0; 4], 2).unwrap(), vec![true, true, false, false]);
        assert!(matches!(topk_indicator(&[1.0], 0), Err(Error::InvalidK { .. })));
        assert!(matches!(topk_indicator(&[1.0], 2), Err(Error::InvalidK { .. })));
    }

    #[test]
    fn masked_softmax_worked_example() {
        // z* = 1; coordinate 2 is out because 1.5 > 0.5 * 1.5
        let d = masked_softmax(&Tensor::vector(vec![1.0, 0.5, -0.5]), 0.5, 1.0).unwrap();
        assert_eq!(d.support, vec![true, true, false]);
        let e = (-0.5f64).exp();
        let p0 = 1.0 / (1.0 + e);
        assert!((d.p()[0] - p0).abs() < 1e-15);
        assert!((d.p()[0] - 0.6225).abs() < 5e-5);
        assert!((d.p()[1] - 0.3775).abs() < 5e-5);
        assert_eq!(d.p()[2], 0.0);
    }

    #[test]
    fn masked_softmax_uniform_and_one_hot() {
        let d = masked_softmax(&Tensor::vector(vec![0.7; 4]), 0.0, 1.0).unwrap();
        for &p in d.p() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let d = masked_softmax(&Tensor::vector(vec![0.1, 0.9, 0.3]), 0.0, 1.0).unwrap();
        assert_eq!(d.p(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_errors() {
        let z = Tensor::vector(vec![f64::NEG_INFINITY; 3]);
        assert!(matches!(masked_softmax(&z, 0.1, 1.0), Err(Error::AllMasked)));
        let z = Tensor::vector(vec![1.0, 2.0]);
        assert!(masked_softmax(&z, 0.1, 0.0).is_err());
        assert!(masked_softmax(&z, -1.0, 1.0).is_err());
    }

    #[test]
    fn neg_inf_never_in_support() {
        for r in [0.0, 0.1, 10.0, f64::MAX] {
            let d = masked_softmax(&Tensor::vector(vec![f64::NEG_INFINITY, 1.0, 0.5]), r, 1.0).unwrap();
            assert!(!d.support[0]);
            assert_eq!(d.p()[0], 0.0);
        }
    }

    #[test]
    fn temperature_scales_logits_not_mask() {
        let z = Tensor::vector(vec![2.0, 1.6, -3.0]);
        let d1 = masked_softmax(&z, 0.2, 1.0).unwrap();
        let d2 = masked_softmax(&z, 0.2, 2.0).unwrap();
        assert_eq!(d1.support, d2.support);
        let e = (-0.4f64 / 2.0).exp();
        assert!((d2.p()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_gradient_matches_fd() {
        let zv = vec![1.2, 1.0, -0.3, 0.9];
        let w = [0.3, -1.0, 2.0, 0.5];
        let f = |z: &[f64]| -> f64 {
            let d = masked_softmax(&Tensor::vector(z.to_vec()), 0.3, 2.0).unwrap();
            d.p().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let tape = Tape::new();
        let z = tape.leaf(&[4], zv.clone()).unwrap();
        let d = masked_softmax(&z, 0.3, 2.0).unwrap();
        assert_eq!(d.support, vec![true, true, false, true]);
        let loss = d.probs.dot(&Tensor::vector(w.to_vec())).unwrap();
        let g = loss.backward().unwrap().wrt(&z);
        let h = 1e-6;
        for j in 0..4 {
            let mut up = zv.clone();
            let mut dn = zv.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-9, "{j}: {fd} vs {}", g[j]);
        }
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn sampling_one_hot_and_determinism() {
        let d = masked_softmax(&Tensor::vector(vec![0.0, 5.0, 1.0]), 0.0, 1.0).unwrap();
        let mut rng = SplitRng::new(0);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&d, &mut rng), 1);
        }
        let d = masked_softmax(&Tensor::vector(vec![1.0, 0.9, 0.8]), 1.0, 1.0).unwrap();
        let a: Vec<usize> = {
            let mut r = SplitRng::new(42);
            (0..50).map(|_| sample_categorical(&d, &mut r)).collect()
        };
        let b: Vec<usize> = {
            let mut r = SplitRng::new(42);
            (0..50).map(|_| sample_categorical(&d, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_frequencies() {
        let d = masked_softmax(&Tensor::vector(vec![0.0, 0.0]), 0.1, 1.0).unwrap();
        let mut rng = SplitRng::new(5);
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_categorical(&d, &mut rng) == 0).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "{freq}");
    }

    fn logits() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 1..9)
    }

    proptest! {
        #[test]
        fn argmax_always_in_support(z in logits(), r in 0.0f64..3.0) {
            let d = masked_softmax(&Tensor::vector(z.clone()), r, 1.0).unwrap();
            let best = argmax(&z).unwrap();
            prop_assert!(d.support[best]);
            let total: f64 = d.p().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (p, s) in d.p().iter().zip(&d.support) {
                if !s { prop_assert_eq!(*p, 0.0); }
            }
        }

        #[test]
        fn support_monotone_in_threshold(z in logits(), r in 0.0f64..2.0, extra in 0.0f64..2.0) {
            let a = support_mask(&z, r).unwrap();
            let b = support_mask(&z, r + extra).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(!x || *y);
            }
        }

        #[test]
        fn topk_agrees_with_sort(z in logits(), k in 1usize..9) {
            let k = k.min(z.len());
            let mask = topk_indicator(&z, k).unwrap();
            prop_assert_eq!(mask.iter().filter(|&&m| m).count(), k);
            let mut sorted: Vec<(f64, usize)> = z.iter().cloned().zip(0..).collect();
            sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, i) in &sorted[..k] {
                prop_assert!(mask[i]);
            }
            prop_assert!(topk_indicator(&z, z.len()).unwrap().iter().all(|&m| m));
            let one = topk_indicator(&z, 1).unwrap();
            prop_assert!(one[argmax(&z).unwrap()]);
        }
    }
}
