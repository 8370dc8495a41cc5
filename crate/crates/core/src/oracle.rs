//! Exact references for the estimators.
//!
//! Everything here works on small instances (at most [`MAX_ENUM_EXPERTS`]
//! experts) where the sampling measure can be enumerated outright. Two
//! independent routes compute each estimator's expected router gradient:
//!
//! - [`enumerate_estimator_expectation`] runs the training layer with every
//!   forced outcome `(D, B)` through the tape and weights the per-sample
//!   gradients by `p_D · P(B)`.
//! - [`closed_form_estimator`] evaluates
//!   `E_D E_B [ c · f'(s · p_D E_D) · ∂(p_D E_D)/∂z ]` with plain arrays,
//!   an analytic softmax Jacobian and an analytic `f'`, where `c` is 1 for
//!   v2 and 2 for v2* and `s = (1 + 2·max(B, δ_D)) / 3`.
//!
//! Gradients are taken with respect to the router weight `R` (`z = R·x`).
//! [`expected_loss_value`] and [`fd_gradient`] give the true gradient of the
//! expected objective `Σ_i f(p_i E_i) p_i` for comparison.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::estimators::{self, Draws, EstimatorConfig, EstimatorKind, FnExperts, ForcedRound, ForcedToken};
use crate::model::{expert_forward, ExpertParams};
use crate::routing;
use crate::rng::SplitRng;

pub const MAX_ENUM_EXPERTS: usize = 8;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// `max_j |a_j − b_j| / max(‖a‖∞, ‖b‖∞)`, and 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences `(f(θ + h e_j) − f(θ − h e_j)) / 2h`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("step must be > 0, got {h}")));
    }
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        work[j] = theta[j] + h;
        let up = f(&work);
        work[j] = theta[j] - h;
        let down = f(&work);
        work[j] = theta[j];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "fd_gradient" });
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// A differentiable function of the layer output.
#[derive(Clone, Debug)]
pub enum Downstream {
    /// `c · y + b`
    Linear { c: Vec<f64>, b: f64 },
    /// Softmax cross-entropy of `A · y` (`A`: classes × d) against `label`.
    CrossEntropy {
        a: Vec<f64>,
        classes: usize,
        label: usize,
    },
}

impl Downstream {
    pub fn on_tape(&self, y: &Tensor) -> Result<Tensor> {
        match self {
            Downstream::Linear { c, b } => y.dot(&Tensor::vector(c.clone()))?.add(&Tensor::scalar(*b)),
            Downstream::CrossEntropy { a, classes, label } => {
                let m = Tensor::new(&[*classes, y.len()], a.clone())?;
                m.matvec(y)?.cross_entropy(&[*label])
            }
        }
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        match self {
            Downstream::Linear { c, b } => dot(c, y) + b,
            Downstream::CrossEntropy { a, classes, label } => {
                let logits = matvec(a, *classes, y);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - logits[*label]
            }
        }
    }

    /// `f'(y)`.
    pub fn grad(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Downstream::Linear { c, .. } => c.clone(),
            Downstream::CrossEntropy { a, classes, label } => {
                let d = y.len();
                let mut p = softmax(&matvec(a, *classes, y));
                p[*label] -= 1.0;
                (0..d).map(|j| (0..*classes).map(|k| a[k * d + j] * p[k]).sum()).collect()
            }
        }
    }
}

/// Plain-array SwiGLU expert.
#[derive(Clone, Debug)]
pub struct DenseExpert {
    pub d_model: usize,
    pub d_inner: usize,
    pub w_gate: Vec<f64>,
    pub w_up: Vec<f64>,
    pub w_down: Vec<f64>,
}

impl DenseExpert {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let g = matvec(&self.w_gate, self.d_inner, x);
        let u = matvec(&self.w_up, self.d_inner, x);
        let inner: Vec<f64> = g.iter().zip(&u).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
        matvec(&self.w_down, self.d_model, &inner)
    }

    pub fn to_params(&self) -> ExpertParams {
        ExpertParams {
            w_gate: Tensor::new(&[self.d_inner, self.d_model], self.w_gate.clone()).expect("dims"),
            w_up: Tensor::new(&[self.d_inner, self.d_model], self.w_up.clone()).expect("dims"),
            w_down: Tensor::new(&[self.d_model, self.d_inner], self.w_down.clone()).expect("dims"),
        }
    }
}

/// One token, one router, a bank of experts and a downstream function.
#[derive(Clone, Debug)]
pub struct Instance {
    pub x: Vec<f64>,
    /// Router weight, `n × d` row-major.
    pub router: Vec<f64>,
    pub experts: Vec<DenseExpert>,
    pub downstream: Downstream,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownstreamKind {
    Linear,
    CrossEntropy,
}

impl Instance {
    pub fn n(&self) -> usize {
        self.experts.len()
    }

    pub fn d(&self) -> usize {
        self.x.len()
    }

    pub fn logits_with(&self, router: &[f64]) -> Vec<f64> {
        matvec(router, self.n(), &self.x)
    }

    pub fn logits(&self) -> Vec<f64> {
        self.logits_with(&self.router)
    }

    pub fn expert_outputs(&self) -> Vec<Vec<f64>> {
        self.experts.iter().map(|e| e.forward(&self.x)).collect()
    }

    /// Draws a random instance whose `MaskedSoftmax` support (at threshold
    /// `r_thresh`) has at least two experts when `n ≥ 2` and whose mask and
    /// argmax are at least `1e-4` away from switching.
    pub fn random(
        rng: &mut SplitRng,
        n: usize,
        d_model: usize,
        d_inner: usize,
        kind: DownstreamKind,
        r_thresh: f64,
    ) -> Instance {
        loop {
            let x: Vec<f64> = (0..d_model).map(|_| rng.normal()).collect();
            let router: Vec<f64> = (0..n * d_model).map(|_| rng.normal()).collect();
            let z = matvec(&router, n, &x);
            if n >= 2 && !well_separated(&z, r_thresh) {
                continue;
            }
            let s = 1.0 / (d_model as f64).sqrt();
            let label = rng.below(3);
            let mut gauss = |len: usize, scale: f64| (0..len).map(|_| rng.normal() * scale).collect::<Vec<f64>>();
            let experts = (0..n)
                .map(|_| DenseExpert {
                    d_model,
                    d_inner,
                    w_gate: gauss(d_inner * d_model, 1.5 * s),
                    w_up: gauss(d_inner * d_model, 1.5 * s),
                    w_down: gauss(d_model * d_inner, 1.5 / (d_inner as f64).sqrt()),
                })
                .collect();
            let downstream = match kind {
                DownstreamKind::Linear => Downstream::Linear {
                    c: gauss(d_model, 1.0),
                    b: gauss(1, 1.0)[0],
                },
                DownstreamKind::CrossEntropy => {
                    let classes = 3;
                    Downstream::CrossEntropy {
                        a: gauss(classes * d_model, 1.5),
                        classes,
                        label,
                    }
                }
            };
            return Instance {
                x,
                router,
                experts,
                downstream,
            };
        }
    }
}

fn well_separated(z: &[f64], r: f64) -> bool {
    let best = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
    let top = z[best];
    let mut support = 0;
    for (i, &v) in z.iter().enumerate() {
        if i == best {
            support += 1;
            continue;
        }
        if top - v < 1e-4 {
            return false;
        }
        let slack = r * (v.abs() + top.abs()) - (top - v);
        if slack.abs() < 1e-4 {
            return false;
        }
        if slack > 0.0 {
            support += 1;
        }
    }
    support >= 2
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let k = x.len();
    (0..rows).map(|i| dot(&w[i * k..(i + 1) * k], x)).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Plain `MaskedSoftmax(z/τ)`: probabilities and support.
fn dense_masked_softmax(z: &[f64], r: f64, tau: f64) -> (Vec<f64>, Vec<bool>) {
    let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let support: Vec<bool> = z
        .iter()
        .map(|&v| v.is_finite() && top - v <= r * (v.abs() + top.abs()))
        .collect();
    let w: Vec<f64> = z
        .iter()
        .zip(&support)
        .map(|(&v, &s)| if s { ((v - top) / tau).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    (w.into_iter().map(|v| v / total).collect(), support)
}

/// `∂p_i/∂z` on the support (the mask is constant).
fn softmax_jacobian_row(p: &[f64], support: &[bool], i: usize, tau: f64) -> Vec<f64> {
    (0..p.len())
        .map(|j| {
            if !support[j] {
                0.0
            } else {
                let kron = if i == j { 1.0 } else { 0.0 };
                p[i] * (kron - p[j]) / tau
            }
        })
        .collect()
}

fn z_grad_to_router(gz: &[f64], x: &[f64]) -> Vec<f64> {
    gz.iter().flat_map(|g| x.iter().map(move |xv| g * xv)).collect()
}

fn check_size(n: usize) -> Result<()> {
    if n > MAX_ENUM_EXPERTS {
        return Err(Error::TooLarge {
            n,
            limit: MAX_ENUM_EXPERTS,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `Σ_i f(p_i E_i) p_i`.
    Expected,
    /// Same value, but the `p_i` inside `f` is detached.
    DetachedGate,
}

/// Scalar value of `Σ_i f(p_i E_i) p_i` at router weight `router`.
pub fn expected_loss_value(inst: &Instance, router: &[f64], r_thresh: f64, temperature: f64) -> Result<f64> {
    check_size(inst.n())?;
    let (p, support) = dense_masked_softmax(&inst.logits_with(router), r_thresh, temperature);
    let outs = inst.expert_outputs();
    let mut total = 0.0;
    for i in 0..inst.n() {
        if !support[i] {
            continue;
        }
        let h: Vec<f64> = outs[i].iter().map(|v| v * p[i]).collect();
        total += inst.downstream.value(&h) * p[i];
    }
    Ok(total)
}

/// The expected objective built on a tape, differentiable in `router`.
pub fn expected_loss(
    objective: Objective,
    inst: &Instance,
    router: &Tensor,
    r_thresh: f64,
    temperature: f64,
) -> Result<Tensor> {
    check_size(inst.n())?;
    let x = Tensor::vector(inst.x.clone());
    let z = router.matvec(&x)?;
    let dist = routing::masked_softmax(&z, r_thresh, temperature)?;
    let mut total = Tensor::scalar(0.0);
    for i in 0..inst.n() {
        if !dist.support[i] {
            continue;
        }
        let e = expert_forward(&x, &inst.experts[i].to_params())?;
        let p = dist.probs.gather(i)?;
        let inner = match objective {
            Objective::Expected => p.clone(),
            Objective::DetachedGate => p.detach(),
        };
        let term = inst.downstream.on_tape(&e.mul(&inner)?)?.mul(&p)?;
        total = total.add(&term)?;
    }
    Ok(total)
}

/// Analytic gradient of `Σ_i f(p_i E_i) p_i` with respect to the router,
/// with `baseline` subtracted from `f` in the score term.
pub fn expected_loss_gradient(inst: &Instance, r_thresh: f64, temperature: f64, baseline: f64) -> Result<Vec<f64>> {
    check_size(inst.n())?;
    let n = inst.n();
    let (p, support) = dense_masked_softmax(&inst.logits(), r_thresh, temperature);
    let outs = inst.expert_outputs();
    let mut gz = vec![0.0; n];
    for i in 0..n {
        if !support[i] {
            continue;
        }
        let h: Vec<f64> = outs[i].iter().map(|v| v * p[i]).collect();
        let jac = softmax_jacobian_row(&p, &support, i, temperature);
        // pathwise: p_i · f'(h)·E_i · ∂p_i/∂z ; score: (f(h) − b) · ∂p_i/∂z
        let coef = p[i] * dot(&inst.downstream.grad(&h), &outs[i]) + inst.downstream.value(&h) - baseline;
        for j in 0..n {
            gz[j] += coef * jac[j];
        }
    }
    Ok(z_grad_to_router(&gz, &inst.x))
}

/// One point of the `(D, B)` sampling measure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutcomeWeight {
    pub expert: usize,
    pub bernoulli: bool,
    pub mass: f64,
}

/// All `(D, B)` outcomes in lexicographic order with `D` in the support.
pub fn outcome_weights(p: &[f64], support: &[bool], bernoulli_p: f64) -> Vec<OutcomeWeight> {
    let mut out = Vec::new();
    for (d, (&pd, &s)) in p.iter().zip(support).enumerate() {
        if !s {
            continue;
        }
        for b in [false, true] {
            let pb = if b { bernoulli_p } else { 1.0 - bernoulli_p };
            out.push(OutcomeWeight {
                expert: d,
                bernoulli: b,
                mass: pd * pb,
            });
        }
    }
    out
}

fn require_sparsemixer(kind: EstimatorKind) -> Result<()> {
    if kind.is_sparsemixer() {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "{} has no (D, B) sampling measure",
            kind.name()
        )))
    }
}

fn experts_of(inst: &Instance) -> Vec<ExpertParams> {
    inst.experts.iter().map(DenseExpert::to_params).collect()
}

/// Router gradient and output of one forced training step.
fn forced_step(
    inst: &Instance,
    cfg: &EstimatorConfig,
    params: &[ExpertParams],
    forced: &ForcedToken,
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let router = tape.leaf(&[inst.n(), inst.d()], inst.router.clone())?;
    let x = Tensor::vector(inst.x.clone());
    let z = router.matvec(&x)?;
    let bank = FnExperts {
        n: params.len(),
        f: |i: usize, x: &Tensor| expert_forward(x, &params[i]),
    };
    let (y, _) = estimators::sparsemixer_topk_train(&x, &z, k, cfg, &bank, Draws::Forced(forced))?;
    let loss = inst.downstream.on_tape(&y)?;
    let g = loss.backward()?.wrt(&router);
    Ok((g, y.values().to_vec()))
}

/// Expected per-sample router gradient of the SparseMixer training layer,
/// by running every forced outcome through the tape.
pub fn enumerate_estimator_expectation(inst: &Instance, cfg: &EstimatorConfig) -> Result<Vec<f64>> {
    require_sparsemixer(cfg.kind)?;
    check_size(inst.n())?;
    let z = Tensor::vector(inst.logits());
    let dist = routing::masked_softmax(&z, cfg.r_thresh, cfg.temperature)?;
    let params = experts_of(inst);
    let mut total = vec![0.0; inst.n() * inst.d()];
    for w in outcome_weights(dist.p(), &dist.support, cfg.bernoulli_p) {
        if w.mass == 0.0 {
            continue;
        }
        let (g, _) = forced_step(inst, cfg, &params, &ForcedToken::single(w.expert, w.bernoulli), 1)?;
        for (t, v) in total.iter_mut().zip(g) {
            *t += w.mass * v;
        }
    }
    Ok(total)
}

/// The estimator's expectation evaluated directly from its formula.
pub fn closed_form_estimator(inst: &Instance, cfg: &EstimatorConfig) -> Result<Vec<f64>> {
    require_sparsemixer(cfg.kind)?;
    check_size(inst.n())?;
    let n = inst.n();
    let z = inst.logits();
    let (p, support) = dense_masked_softmax(&z, cfg.r_thresh, cfg.temperature);
    let top = (0..n).fold(0, |b, i| if z[i] > z[b] { i } else { b });
    let coefficient = match cfg.kind {
        EstimatorKind::SparseMixerV2Star => 2.0,
        _ => 1.0,
    };
    let outs = inst.expert_outputs();
    let mut gz = vec![0.0; n];
    for d in 0..n {
        if !support[d] {
            continue;
        }
        let delta = d == top;
        let jac = softmax_jacobian_row(&p, &support, d, cfg.temperature);
        for (b, pb) in [(false, 1.0 - cfg.bernoulli_p), (true, cfg.bernoulli_p)] {
            let s = if b || delta { 1.0 } else { 1.0 / 3.0 };
            let point: Vec<f64> = outs[d].iter().map(|v| s * p[d] * v).collect();
            // ∂(p_D E_D)/∂z = E_D ⊗ ∂p_D/∂z
            let fe = dot(&inst.downstream.grad(&point), &outs[d]);
            let w = p[d] * pb * coefficient * fe;
            for j in 0..n {
                gz[j] += w * jac[j];
            }
        }
    }
    Ok(z_grad_to_router(&gz, &inst.x))
}

/// Result of enumerating every TopK trace.
#[derive(Clone, Debug)]
pub struct TraceExpectation {
    pub output: Vec<f64>,
    pub router_grad: Vec<f64>,
    pub total_mass: f64,
    pub traces: usize,
}

/// Enumerates every ordered sequence of `k` distinct experts (with their
/// Bernoulli draws) of the TopK SparseMixer layer.
pub fn enumerate_topk_traces(inst: &Instance, cfg: &EstimatorConfig, k: usize) -> Result<TraceExpectation> {
    require_sparsemixer(cfg.kind)?;
    check_size(inst.n())?;
    let n = inst.n();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let params = experts_of(inst);
    let mut acc = TraceExpectation {
        output: vec![0.0; inst.d()],
        router_grad: vec![0.0; n * inst.d()],
        total_mass: 0.0,
        traces: 0,
    };
    let mut prefix = Vec::new();
    walk_traces(inst, cfg, &params, k, &mut prefix, 1.0, &mut acc)?;
    Ok(acc)
}

fn walk_traces(
    inst: &Instance,
    cfg: &EstimatorConfig,
    params: &[ExpertParams],
    k: usize,
    prefix: &mut Vec<ForcedRound>,
    mass: f64,
    acc: &mut TraceExpectation,
) -> Result<()> {
    if prefix.len() == k {
        let forced = ForcedToken {
            rounds: prefix.clone(),
            jitter: None,
        };
        let (g, y) = forced_step(inst, cfg, params, &forced, k)?;
        for (a, v) in acc.router_grad.iter_mut().zip(g) {
            *a += mass * v;
        }
        for (a, v) in acc.output.iter_mut().zip(y) {
            *a += mass * v;
        }
        acc.total_mass += mass;
        acc.traces += 1;
        return Ok(());
    }
    let mut z = inst.logits();
    for r in prefix.iter() {
        z[r.expert] = f64::NEG_INFINITY;
    }
    let (p, support) = dense_masked_softmax(&z, cfg.r_thresh, cfg.temperature);
    for w in outcome_weights(&p, &support, cfg.bernoulli_p) {
        if w.mass == 0.0 {
            continue;
        }
        prefix.push(ForcedRound {
            expert: w.expert,
            bernoulli: w.bernoulli,
        });
        walk_traces(inst, cfg, params, k, prefix, mass * w.mass, acc)?;
        prefix.pop();
    }
    Ok(())
}
