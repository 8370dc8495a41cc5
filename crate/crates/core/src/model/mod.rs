//! SwiGLU experts, the pre-LN MoE block, and a small stacked model.
//!
//! A block computes `x + MoE(LayerNorm(x))` per token: the normalized token
//! feeds both the router and the selected experts. The model stacks blocks
//! and ends with an affine head.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor};
use crate::balance::{self, BalanceConfig, BalanceScope, LoadStats, StatsScope};
use crate::error::{Error, Result};
use crate::estimators::{self, Draws, EstimatorConfig, ExpertBank, ForcedToken, TokenTrace};
use crate::rng::SplitRng;
use crate::routing::{self, RouterParams};

#[derive(Clone, Debug)]
pub struct ExpertParams {
    /// `d_inner × d_model`
    pub w_gate: Tensor,
    /// `d_inner × d_model`
    pub w_up: Tensor,
    /// `d_model × d_inner`
    pub w_down: Tensor,
}

/// `W_down · (silu(W_gate · x) ⊙ (W_up · x))`
pub fn expert_forward(x: &Tensor, w: &ExpertParams) -> Result<Tensor> {
    let gate = w.w_gate.matvec(x)?.silu()?;
    let up = w.w_up.matvec(x)?;
    w.w_down.matvec(&gate.mul(&up)?)
}

impl ExpertParams {
    pub fn init(d_model: usize, d_inner: usize, std: f64, rng: &mut SplitRng) -> Self {
        let mut gaussian = |rows: usize, cols: usize| {
            let v = (0..rows * cols).map(|_| rng.normal() * std).collect();
            Tensor::new(&[rows, cols], v).expect("positive dims")
        };
        let w_gate = gaussian(d_inner, d_model);
        let w_up = gaussian(d_inner, d_model);
        let w_down = gaussian(d_model, d_inner);
        Self { w_gate, w_up, w_down }
    }
}

/// Adapts a slice of experts to the estimators' [`ExpertBank`].
pub struct SwiGluBank<'a>(pub &'a [ExpertParams]);

impl ExpertBank for SwiGluBank<'_> {
    fn n_experts(&self) -> usize {
        self.0.len()
    }

    fn expert_forward(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        expert_forward(x, &self.0[index])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoELayerSpec {
    pub n_expert: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub estimator: EstimatorConfig,
    pub balance: BalanceConfig,
}

impl MoELayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_expert == 0 || self.d_model == 0 || self.d_inner == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.n_expert {
            return Err(Error::InvalidK {
                k: self.top_k,
                n: self.n_expert,
            });
        }
        if self.balance.n != self.n_expert {
            return Err(Error::Config("balance expert count differs from n_expert".into()));
        }
        if !(self.balance.alpha >= 0.0) {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        self.estimator.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub d_model: usize,
    pub d_out: usize,
    /// One entry per block; the depth is `blocks.len()`.
    pub blocks: Vec<MoELayerSpec>,
}

impl ToyModelSpec {
    /// `depth` identical blocks.
    pub fn uniform(depth: usize, block: MoELayerSpec, d_out: usize) -> Self {
        Self {
            d_model: block.d_model,
            d_out,
            blocks: vec![block; depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.d_out == 0 {
            return Err(Error::Config("d_out must be positive".into()));
        }
        for b in &self.blocks {
            b.validate()?;
            if b.d_model != self.d_model {
                return Err(Error::Config("block d_model differs from model d_model".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub router: RouterParams,
    pub experts: Vec<ExpertParams>,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub blocks: Vec<BlockParams>,
    /// `d_out × d_model`
    pub head_weight: Tensor,
    /// `d_out`
    pub head_bias: Tensor,
}

/// Expert init std `0.02 / sqrt(2 · depth)`.
pub fn expert_init_std(depth: usize) -> f64 {
    0.02 / (2.0 * depth as f64).sqrt()
}

impl ModelParams {
    pub fn init(spec: &ToyModelSpec, rng: &mut SplitRng) -> Self {
        let depth = spec.depth();
        let expert_std = expert_init_std(depth);
        let blocks = spec
            .blocks
            .iter()
            .map(|b| {
                let r: Vec<f64> = (0..b.n_expert * b.d_model).map(|_| rng.normal() * 0.02).collect();
                let router = RouterParams::new(Tensor::new(&[b.n_expert, b.d_model], r).expect("dims"))
                    .expect("2-d");
                let experts = (0..b.n_expert)
                    .map(|_| ExpertParams::init(b.d_model, b.d_inner, expert_std, rng))
                    .collect();
                BlockParams { router, experts }
            })
            .collect();
        let head_std = 1.0 / (spec.d_model as f64).sqrt();
        let hw = (0..spec.d_out * spec.d_model).map(|_| rng.normal() * head_std).collect();
        Self {
            blocks,
            head_weight: Tensor::new(&[spec.d_out, spec.d_model], hw).expect("dims"),
            head_bias: Tensor::zeros(&[spec.d_out]),
        }
    }

    /// Parameter names in declared order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            names.push(format!("blocks.{b}.router"));
            for e in 0..block.experts.len() {
                for part in ["w_gate", "w_up", "w_down"] {
                    names.push(format!("blocks.{b}.experts.{e}.{part}"));
                }
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Parameters in declared order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for block in &self.blocks {
            out.push(&block.router.weight);
            for e in &block.experts {
                out.extend([&e.w_gate, &e.w_up, &e.w_down]);
            }
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.router.weight);
            for e in &mut block.experts {
                out.push(&mut e.w_gate);
                out.push(&mut e.w_up);
                out.push(&mut e.w_down);
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Copies every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &Tape) -> ModelParams {
        let mut bound = self.clone();
        for t in bound.tensors_mut() {
            *t = tape.param(t);
        }
        bound
    }

    /// Untracked copy.
    pub fn detached(&self) -> ModelParams {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            *t = t.detach();
        }
        out
    }

    /// Gradients of bound parameters in declared order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.tensors().into_iter().map(|t| grads.wrt(t)).collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// How routing decisions are made during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// Training-time estimators (sampling, straight-through scales, jitter).
    Train,
    /// Inference routing per the estimator's configured inference mode.
    Inference,
}

pub struct ForwardOptions<'a> {
    pub mode: RoutingMode,
    /// Simulated data-parallel shards for the balance loss.
    pub shards: usize,
    /// Injected outcomes indexed `[layer][token]`.
    pub forced: Option<&'a [Vec<ForcedToken>]>,
    /// Skip the balance loss terms (they are still reported as zeros).
    pub skip_balance: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            mode: RoutingMode::Train,
            shards: 1,
            forced: None,
            skip_balance: false,
        }
    }
}

pub struct BlockOutput {
    pub outputs: Vec<Tensor>,
    pub traces: Vec<TokenTrace>,
    /// Raw router logits per token.
    pub logits: Vec<Tensor>,
}

fn token_rng(rng: &SplitRng, layer: usize, token: usize) -> SplitRng {
    rng.fork(layer as u64).fork(token as u64)
}

/// One pre-LN MoE block over a batch of tokens.
///
/// Each token draws from its own stream derived from `rng`, `layer` and its
/// index, so results do not depend on processing order.
pub fn moe_block_forward(
    xs: &[Tensor],
    spec: &MoELayerSpec,
    params: &BlockParams,
    layer: usize,
    rng: &SplitRng,
    opts: &ForwardOptions<'_>,
) -> Result<BlockOutput> {
    let bank = SwiGluBank(&params.experts);
    let mut outputs = Vec::with_capacity(xs.len());
    let mut traces = Vec::with_capacity(xs.len());
    let mut logits = Vec::with_capacity(xs.len());
    for (t, x) in xs.iter().enumerate() {
        if x.shape() != [spec.d_model] {
            return Err(Error::ShapeMismatch {
                op: "moe_block",
                lhs: x.shape().to_vec(),
                rhs: vec![spec.d_model],
            });
        }
        let u = x.layer_norm()?;
        let z = routing::router_logits(&u, &params.router)?;
        let mut trng = token_rng(rng, layer, t);
        let forced = opts.forced.map(|f| &f[layer][t]);
        let (moe, trace) = match opts.mode {
            RoutingMode::Train => {
                let draws = match forced {
                    Some(f) => Draws::Forced(f),
                    None => Draws::Sample(&mut trng),
                };
                estimators::train_forward(&u, &z, spec.top_k, &spec.estimator, &bank, draws)?
            }
            RoutingMode::Inference => {
                estimators::inference(&u, &z, spec.top_k, &spec.estimator, &bank, Some(&mut trng))?
            }
        };
        outputs.push(x.add(&moe)?);
        traces.push(trace);
        logits.push(z);
    }
    Ok(BlockOutput {
        outputs,
        traces,
        logits,
    })
}

/// Contiguous, near-equal shard boundaries.
pub fn shard_ranges(tokens: usize, shards: usize) -> Vec<std::ops::Range<usize>> {
    let s = shards.clamp(1, tokens.max(1));
    (0..s)
        .map(|i| (i * tokens / s)..((i + 1) * tokens / s))
        .filter(|r| !r.is_empty())
        .collect()
}

/// Balance loss for one layer, averaged over shards by token count.
pub fn layer_balance_loss(
    traces: &[TokenTrace],
    logits: &[Tensor],
    cfg: &BalanceConfig,
    shards: usize,
) -> Result<(Tensor, LoadStats)> {
    let raw: Vec<Vec<f64>> = logits.iter().map(|z| z.values().to_vec()).collect();
    let ranges = shard_ranges(traces.len(), shards);
    let shard_stats = ranges
        .iter()
        .enumerate()
        .map(|(i, r)| balance::accumulate_stats(&traces[r.clone()], &raw[r.clone()], StatsScope::Shard(i)))
        .collect::<Result<Vec<_>>>()?;
    let global = balance::global_reduce(&shard_stats)?;
    let total = traces.len() as f64;
    let mut loss: Option<Tensor> = None;
    for (r, local) in ranges.iter().zip(&shard_stats) {
        let probs = logits[r.clone()]
            .iter()
            .map(|z| z.softmax())
            .collect::<Result<Vec<_>>>()?;
        let mean_gate = Tensor::stack(&probs)?.mean_rows()?;
        let f = match cfg.scope {
            BalanceScope::Local => local,
            BalanceScope::Global => &global,
        };
        let term = balance::balance_loss(f, cfg, &mean_gate)?.scale(r.len() as f64 / total);
        loss = Some(match loss {
            None => term,
            Some(l) => l.add(&term)?,
        });
    }
    Ok((loss.expect("at least one shard"), global))
}

pub struct ModelOutput {
    /// Head outputs per token.
    pub outputs: Vec<Tensor>,
    /// Routing traces indexed `[layer][token]`.
    pub traces: Vec<Vec<TokenTrace>>,
    /// Per-layer balance terms, already weighted by `α`.
    pub balance_terms: Vec<Tensor>,
    /// Batch-wide load statistics per layer.
    pub layer_stats: Vec<LoadStats>,
}

impl ModelOutput {
    pub fn balance_total(&self) -> Result<Tensor> {
        let mut acc = Tensor::scalar(0.0);
        for t in &self.balance_terms {
            acc = acc.add(t)?;
        }
        Ok(acc)
    }

    /// `task + Σ_layers balance`.
    pub fn total_loss(&self, task_loss: &Tensor) -> Result<Tensor> {
        task_loss.add(&self.balance_total()?)
    }

    /// `[layer][token]` outcomes that replay this pass exactly.
    pub fn forced(&self) -> Vec<Vec<ForcedToken>> {
        self.traces
            .iter()
            .map(|layer| layer.iter().map(TokenTrace::to_forced).collect())
            .collect()
    }
}

/// Runs the whole stack over a batch of input vectors.
pub fn model_forward(
    inputs: &[Tensor],
    spec: &ToyModelSpec,
    params: &ModelParams,
    rng: &SplitRng,
    opts: &ForwardOptions<'_>,
) -> Result<ModelOutput> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut h = inputs.to_vec();
    let mut traces = Vec::with_capacity(spec.depth());
    let mut balance_terms = Vec::with_capacity(spec.depth());
    let mut layer_stats = Vec::with_capacity(spec.depth());
    for (layer, (bspec, bparams)) in spec.blocks.iter().zip(&params.blocks).enumerate() {
        let out = moe_block_forward(&h, bspec, bparams, layer, rng, opts)?;
        if opts.skip_balance || bspec.balance.alpha == 0.0 {
            let raw: Vec<Vec<f64>> = out.logits.iter().map(|z| z.values().to_vec()).collect();
            layer_stats.push(balance::accumulate_stats(&out.traces, &raw, StatsScope::Global)?);
            balance_terms.push(Tensor::scalar(0.0));
        } else {
            let (term, stats) = layer_balance_loss(&out.traces, &out.logits, &bspec.balance, opts.shards)?;
            layer_stats.push(stats);
            balance_terms.push(term);
        }
        traces.push(out.traces);
        h = out.outputs;
    }
    let outputs = h
        .iter()
        .map(|x| params.head_weight.matvec(x)?.add(&params.head_bias))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelOutput {
        outputs,
        traces,
        balance_terms,
        layer_stats,
    })
}
