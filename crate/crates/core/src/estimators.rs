//! Routing strategies and their gradient estimators.
//!
//! Three strategies are provided:
//!
//! - [`EstimatorKind::GShard`]: `y = Σ_i softmax(z)_i · TopK(z)_i · E_i(x)`,
//!   with the TopK indicator held constant in backward so the router only
//!   learns through the gate values.
//! - [`EstimatorKind::SparseMixerV2`]: sample `D ~ MaskedSoftmax(z)`, form
//!   `h = p_D · E_D(x)`, draw `B ~ Bernoulli(1/4)` and return
//!   `h + detach(s·h − h)` with `s = max(δ_D, (1 + 2B)/3)`.
//! - [`EstimatorKind::SparseMixerV2Star`]: as above with `MaskedSoftmax(z/2)`,
//!   `B ~ Bernoulli(5/8)` and `2h + detach(s·h − 2h)`.
//!
//! In both SparseMixer variants the forward value is `s·h`; only the
//! coefficient seen by backward differs (1 versus 2). `δ_D` is 1 when `D` is
//! the argmax of the (round's) raw logits.
//!
//! TopK routing runs `K` Top1 rounds; after each round the chosen expert's
//! logit is set to `-inf` so the next `MaskedSoftmax` renormalizes over the
//! remaining experts. Outcomes can be injected through [`Draws::Forced`]:
//! forced execution is identical to sampled execution with the same draws.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::routing::{self, DEFAULT_THRESHOLD};
use crate::rng::SplitRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "gshard")]
    GShard,
    #[serde(rename = "sparsemixer_v2")]
    SparseMixerV2,
    #[serde(rename = "sparsemixer_v2_star")]
    SparseMixerV2Star,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::GShard => "gshard",
            EstimatorKind::SparseMixerV2 => "sparsemixer_v2",
            EstimatorKind::SparseMixerV2Star => "sparsemixer_v2_star",
        }
    }

    pub fn is_sparsemixer(self) -> bool {
        !matches!(self, EstimatorKind::GShard)
    }

    /// Coefficient on `h` seen by backward.
    fn backward_coefficient(self) -> f64 {
        match self {
            EstimatorKind::SparseMixerV2Star => 2.0,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceMode {
    #[default]
    #[serde(rename = "det")]
    Deterministic,
    #[serde(rename = "sampled")]
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// `MaskedSoftmax` threshold `r`.
    pub r_thresh: f64,
    /// Router temperature `τ`.
    pub temperature: f64,
    /// `P(B = 1)`.
    pub bernoulli_p: f64,
    /// Multiplicative jitter half-width for GShard training; 0 disables it.
    pub jitter_epsilon: f64,
    /// GShard only: renormalize the gate over the selected experts.
    pub renormalize_topk: bool,
    pub inference_mode: InferenceMode,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        let (temperature, bernoulli_p, jitter_epsilon) = match kind {
            EstimatorKind::GShard => (1.0, 0.0, 0.01),
            EstimatorKind::SparseMixerV2 => (1.0, 0.25, 0.0),
            EstimatorKind::SparseMixerV2Star => (2.0, 0.625, 0.0),
        };
        Self {
            kind,
            r_thresh: DEFAULT_THRESHOLD,
            temperature,
            bernoulli_p,
            jitter_epsilon,
            renormalize_topk: false,
            inference_mode: InferenceMode::Deterministic,
        }
    }

    pub fn gshard() -> Self {
        Self::new(EstimatorKind::GShard)
    }

    pub fn sparsemixer_v2() -> Self {
        Self::new(EstimatorKind::SparseMixerV2)
    }

    pub fn sparsemixer_v2_star() -> Self {
        Self::new(EstimatorKind::SparseMixerV2Star)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bernoulli_p) {
            return Err(Error::Config(format!(
                "bernoulli_p must lie in [0, 1], got {}",
                self.bernoulli_p
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.r_thresh >= 0.0) {
            return Err(Error::Config(format!("r_thresh must be >= 0, got {}", self.r_thresh)));
        }
        if !(0.0..1.0).contains(&self.jitter_epsilon) {
            return Err(Error::Config(format!(
                "jitter_epsilon must lie in [0, 1), got {}",
                self.jitter_epsilon
            )));
        }
        Ok(())
    }
}

/// One routing round for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub expert: usize,
    pub gate_prob: f64,
    /// `δ_D`: the expert is the argmax of this round's logits.
    pub is_argmax: bool,
    /// Bernoulli draw; absent for GShard and inference.
    pub bernoulli: Option<bool>,
    /// Forward scale `max(δ_D, (1 + 2B)/3)`, 1 where no scale applies.
    pub scale: f64,
    /// Logits seen by this round (jittered for GShard, earlier winners at
    /// `-inf` for later SparseMixer rounds).
    pub logits: Vec<f64>,
}

/// All routing rounds for one token at one layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub decisions: Vec<RoutingDecision>,
    /// Jitter factors `1 + u` applied to the logits, when any.
    pub jitter: Option<Vec<f64>>,
}

impl TokenTrace {
    pub fn experts(&self) -> Vec<usize> {
        self.decisions.iter().map(|d| d.expert).collect()
    }

    /// Outcomes that replay this trace exactly.
    pub fn to_forced(&self) -> ForcedToken {
        ForcedToken {
            rounds: self
                .decisions
                .iter()
                .map(|d| ForcedRound {
                    expert: d.expert,
                    bernoulli: d.bernoulli.unwrap_or(false),
                })
                .collect(),
            jitter: self.jitter.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForcedRound {
    pub expert: usize,
    pub bernoulli: bool,
}

/// Injected outcomes for one token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForcedToken {
    pub rounds: Vec<ForcedRound>,
    pub jitter: Option<Vec<f64>>,
}

impl ForcedToken {
    pub fn single(expert: usize, bernoulli: bool) -> Self {
        Self {
            rounds: vec![ForcedRound { expert, bernoulli }],
            jitter: None,
        }
    }
}

/// Source of discrete outcomes. Sampling draws `D` first, then `B`, per
/// round, from the same stream.
pub enum Draws<'a> {
    Sample(&'a mut SplitRng),
    Forced(&'a ForcedToken),
}

impl Draws<'_> {
    fn forced_round(&self, round: usize) -> Result<Option<ForcedRound>> {
        match self {
            Draws::Sample(_) => Ok(None),
            Draws::Forced(f) => f
                .rounds
                .get(round)
                .copied()
                .map(Some)
                .ok_or_else(|| Error::Config(format!("no forced outcome for round {round}"))),
        }
    }
}

/// A set of experts that can be evaluated on one token.
pub trait ExpertBank {
    fn n_experts(&self) -> usize;
    fn expert_forward(&self, index: usize, x: &Tensor) -> Result<Tensor>;
}

/// Experts given by a closure, handy for tests and oracles.
pub struct FnExperts<F> {
    pub n: usize,
    pub f: F,
}

impl<F: Fn(usize, &Tensor) -> Result<Tensor>> ExpertBank for FnExperts<F> {
    fn n_experts(&self) -> usize {
        self.n
    }

    fn expert_forward(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        (self.f)(index, x)
    }
}

fn check_bank(z: &Tensor, experts: &dyn ExpertBank) -> Result<()> {
    if z.shape().len() != 1 || z.len() != experts.n_experts() {
        return Err(Error::ShapeMismatch {
            op: "routing",
            lhs: z.shape().to_vec(),
            rhs: vec![experts.n_experts()],
        });
    }
    Ok(())
}

fn accumulate(acc: Option<Tensor>, term: Tensor) -> Result<Tensor> {
    match acc {
        None => Ok(term),
        Some(a) => a.add(&term),
    }
}

/// GShard-style routing: softmax gate times TopK indicator.
pub fn gshard_forward(
    x: &Tensor,
    z: &Tensor,
    k: usize,
    cfg: &EstimatorConfig,
    experts: &dyn ExpertBank,
    mut draws: Draws<'_>,
    training: bool,
) -> Result<(Tensor, TokenTrace)> {
    check_bank(z, experts)?;
    let n = z.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let jitter = match &mut draws {
        Draws::Forced(f) => f.jitter.clone(),
        Draws::Sample(rng) if training && cfg.jitter_epsilon > 0.0 => Some(
            (0..n)
                .map(|_| 1.0 + rng.uniform_range(-cfg.jitter_epsilon, cfg.jitter_epsilon))
                .collect(),
        ),
        Draws::Sample(_) => None,
    };
    let logits = match &jitter {
        Some(j) => z.mul(&Tensor::vector(j.clone()))?,
        None => z.clone(),
    };
    let selected = match &draws {
        Draws::Forced(f) => {
            let chosen: Vec<usize> = f.rounds.iter().map(|r| r.expert).collect();
            if chosen.len() != k || chosen.iter().any(|&e| e >= n) {
                return Err(Error::Config(format!("forced selection {chosen:?} invalid for k = {k}")));
            }
            chosen
        }
        Draws::Sample(_) => routing::topk_indices(logits.values(), k)?,
    };
    let gates = if cfg.renormalize_topk {
        let mut off = vec![true; n];
        for &e in &selected {
            off[e] = false;
        }
        logits.mask_fill(&off, f64::NEG_INFINITY)?.softmax()?
    } else {
        logits.softmax()?
    };
    let best = routing::argmax(logits.values());
    let mut y = None;
    let mut decisions = Vec::with_capacity(k);
    for &e in &selected {
        let gate = gates.gather(e)?;
        let out = experts.expert_forward(e, x)?.mul(&gate)?;
        y = Some(accumulate(y, out)?);
        decisions.push(RoutingDecision {
            expert: e,
            gate_prob: gate.item(),
            is_argmax: best == Some(e),
            bernoulli: None,
            scale: 1.0,
            logits: logits.values().to_vec(),
        });
    }
    Ok((y.expect("k >= 1"), TokenTrace { decisions, jitter }))
}

/// One SparseMixer Top1 round, v2 or v2* depending on `cfg.kind`.
pub fn sparsemixer_top1(
    x: &Tensor,
    z: &Tensor,
    cfg: &EstimatorConfig,
    experts: &dyn ExpertBank,
    draws: &mut Draws<'_>,
    round: usize,
) -> Result<(Tensor, RoutingDecision)> {
    if !cfg.kind.is_sparsemixer() {
        return Err(Error::Unsupported(format!("{} in a SparseMixer round", cfg.kind.name())));
    }
    check_bank(z, experts)?;
    let dist = routing::masked_softmax(z, cfg.r_thresh, cfg.temperature)?;
    let forced = draws.forced_round(round)?;
    let expert = match (&forced, &mut *draws) {
        (Some(f), _) => f.expert,
        (None, Draws::Sample(rng)) => routing::sample_categorical(&dist, rng),
        (None, Draws::Forced(_)) => unreachable!(),
    };
    if expert >= dist.n() || !dist.support[expert] {
        return Err(Error::Config(format!("expert {expert} is outside the support")));
    }
    let bernoulli = match (&forced, &mut *draws) {
        (Some(f), _) => f.bernoulli,
        (None, Draws::Sample(rng)) => rng.bernoulli(cfg.bernoulli_p),
        (None, Draws::Forced(_)) => unreachable!(),
    };
    let is_argmax = routing::argmax(z.values()) == Some(expert);
    let scale = if is_argmax || bernoulli { 1.0 } else { 1.0 / 3.0 };

    let gate = dist.probs.gather(expert)?;
    let h = experts.expert_forward(expert, x)?.mul(&gate)?;
    let c = cfg.kind.backward_coefficient();
    let kept = if c == 1.0 { h.clone() } else { h.scale(c) };
    let shift = h.scale(scale).sub(&kept)?.detach();
    let y = kept.add(&shift)?;
    Ok((
        y,
        RoutingDecision {
            expert,
            gate_prob: gate.item(),
            is_argmax,
            bernoulli: Some(bernoulli),
            scale,
            logits: z.values().to_vec(),
        },
    ))
}

fn top1_of_kind(
    kind: EstimatorKind,
    x: &Tensor,
    z: &Tensor,
    cfg: &EstimatorConfig,
    experts: &dyn ExpertBank,
    mut draws: Draws<'_>,
) -> Result<(Tensor, RoutingDecision)> {
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "expected a {} configuration, got {}",
            kind.name(),
            cfg.kind.name()
        )));
    }
    sparsemixer_top1(x, z, cfg, experts, &mut draws, 0)
}

/// Top1 SparseMixer-v2 layer in training.
pub fn sparsemixer_v2_top1_train(
    x: &Tensor,
    z: &Tensor,
    cfg: &EstimatorConfig,
    experts: &dyn ExpertBank,
    draws: Draws<'_>,
) -> Result<(Tensor, RoutingDecision)> {
    top1_of_kind(EstimatorKind::SparseMixerV2, x, z, cfg, experts, draws)
}

/// Top1 SparseMixer-v2* layer in training.
pub fn sparsemixer_v2star_top1_train(
    x: &Tensor,
    z: &Tensor,
    cfg: &EstimatorConfig,
    experts: &dyn ExpertBank,
    draws: Draws<'_>,
) -> Result<(Tensor, RoutingDecision)> {
    top1_of_kind(EstimatorKind::SparseMixerV2Star, x, z, cfg, experts, draws)
}

fn mask_taken(z: &Tensor, taken: &[bool]) -> Result<Tensor> {
    if taken.iter().any(|&t| t) {
        z.mask_fill(taken, f64::NEG_INFINITY)
    } else {
        Ok(z.clone())
    }
}

/// TopK SparseMixer: `k` Top1 rounds, sampling without replacement.
pub fn sparsemixer_topk_train(
    x: &Tensor,
    z: &Tensor,
    k: usize,
    cfg: &EstimatorConfig,
    experts: &dyn ExpertBank,
    mut draws: Draws<'_>,
) -> Result<(Tensor, TokenTrace)> {
    check_bank(z, experts)?;
    let n = z.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let mut taken = vec![false; n];
    let mut y = None;
    let mut decisions = Vec::with_capacity(k);
    for round in 0..k {
        let zr = mask_taken(z, &taken)?;
        let (yk, d) = sparsemixer_top1(x, &zr, cfg, experts, &mut draws, round)?;
        taken[d.expert] = true;
        y = Some(accumulate(y, yk)?);
        decisions.push(d);
    }
    Ok((
        y.expect("k >= 1"),
        TokenTrace {
            decisions,
            jitter: None,
        },
    ))
}

/// Training-time routing for any kind.
pub fn train_forward(
    x: &Tensor,
    z: &Tensor,
    k: usize,
    cfg: &EstimatorConfig,
    experts: &dyn ExpertBank,
    draws: Draws<'_>,
) -> Result<(Tensor, TokenTrace)> {
    match cfg.kind {
        EstimatorKind::GShard => gshard_forward(x, z, k, cfg, experts, draws, true),
        _ => sparsemixer_topk_train(x, z, k, cfg, experts, draws),
    }
}

/// Inference-time routing.
///
/// GShard is deterministic. SparseMixer kinds either take the most probable
/// remaining expert each round (`Deterministic`) or sample it (`Sampled`);
/// the gate is the `MaskedSoftmax` probability and no straight-through
/// scale is applied.
pub fn inference(
    x: &Tensor,
    z: &Tensor,
    k: usize,
    cfg: &EstimatorConfig,
    experts: &dyn ExpertBank,
    rng: Option<&mut SplitRng>,
) -> Result<(Tensor, TokenTrace)> {
    if cfg.kind == EstimatorKind::GShard {
        if cfg.inference_mode == InferenceMode::Sampled {
            return Err(Error::Unsupported(
                "sampled inference for gshard (its routing is deterministic)".into(),
            ));
        }
        // no rng is consumed: jitter is training-only
        let mut unused = SplitRng::new(0);
        return gshard_forward(x, z, k, cfg, experts, Draws::Sample(&mut unused), false);
    }
    check_bank(z, experts)?;
    let n = z.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let mut rng = match cfg.inference_mode {
        InferenceMode::Sampled => Some(rng.ok_or(Error::MissingRng)?),
        InferenceMode::Deterministic => None,
    };
    let mut taken = vec![false; n];
    let mut y = None;
    let mut decisions = Vec::with_capacity(k);
    for _ in 0..k {
        let zr = mask_taken(z, &taken)?;
        let dist = routing::masked_softmax(&zr, cfg.r_thresh, cfg.temperature)?;
        let expert = match rng.as_deref_mut() {
            Some(r) => routing::sample_categorical(&dist, r),
            None => dist.mode(),
        };
        taken[expert] = true;
        let gate = dist.probs.gather(expert)?;
        y = Some(accumulate(y, experts.expert_forward(expert, x)?.mul(&gate)?)?);
        decisions.push(RoutingDecision {
            expert,
            gate_prob: gate.item(),
            is_argmax: routing::argmax(zr.values()) == Some(expert),
            bernoulli: None,
            scale: 1.0,
            logits: zr.values().to_vec(),
        });
    }
    Ok((
        y.expect("k >= 1"),
        TokenTrace {
            decisions,
            jitter: None,
        },
    ))
}
