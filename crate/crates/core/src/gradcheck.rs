//! Named gradient checks with a PASS/FAIL table.
//!
//! Each [`Check`] is a name plus a function of the [`Level`]; a suite is a
//! plain `Vec<Check>`, so tests can swap one entry for a corrupted variant
//! and see exactly that row fail.

use std::fmt::Write as _;

use crate::autodiff::{Tape, Tensor};
use crate::balance::{self, BalanceConfig, LoadStats, StatsScope};
use crate::error::{Error, Result};
use crate::estimators::{self, Draws, EstimatorConfig, EstimatorKind, RoutingDecision, TokenTrace};
use crate::model::{self, ExpertParams, ForwardOptions, ModelParams, MoELayerSpec, RoutingMode, ToyModelSpec};
use crate::oracle::{self, DownstreamKind, Instance};
use crate::rng::SplitRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl Level {
    /// Instances per configuration.
    pub fn instances(self, full: usize, fast: usize) -> usize {
        match self {
            Level::Fast => fast,
            Level::Full => full,
        }
    }
}

/// Measured error against its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl Measurement {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tolerance
    }
}

pub type CheckFn = Box<dyn Fn(Level) -> Result<Measurement>>;

pub struct Check {
    pub name: String,
    pub run: CheckFn,
}

impl Check {
    pub fn new(name: impl Into<String>, run: impl Fn(Level) -> Result<Measurement> + 'static) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub outcome: std::result::Result<Measurement, String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        matches!(&self.outcome, Ok(m) if m.passed())
    }
}

pub struct Report {
    pub results: Vec<CheckResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name.as_str())
            .collect()
    }

    pub fn table(&self) -> String {
        let width = self.results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:width$}  STATUS  DETAIL\n", "CHECK");
        for r in &self.results {
            let status = if r.passed() { "PASS" } else { "FAIL" };
            let detail = match &r.outcome {
                Ok(m) => format!("max err {:.3e} < {:.0e} over {} cases", m.error, m.tolerance, m.cases),
                Err(e) => format!("error: {e}"),
            };
            let _ = writeln!(out, "{:width$}  {status:6}  {detail}", r.name);
        }
        out
    }
}

pub fn run_checks(checks: &[Check], level: Level) -> Report {
    Report {
        results: checks
            .iter()
            .map(|c| CheckResult {
                name: c.name.clone(),
                outcome: (c.run)(level).map_err(|e| e.to_string()),
            })
            .collect(),
    }
}

type Op = fn(&[Tensor]) -> Result<Tensor>;

/// A primitive under test: input shapes, whether inputs must be positive,
/// and the op itself.
#[derive(Clone)]
pub struct Primitive {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub positive: bool,
    pub op: Op,
}

impl Primitive {
    fn new(name: &'static str, shapes: &[&[usize]], op: Op) -> Self {
        Self {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            positive: false,
            op,
        }
    }
}

pub const PRIMITIVE_SEEDS: usize = 20;
pub const PRIMITIVE_TOL: f64 = 1e-6;

pub fn primitives() -> Vec<Primitive> {
    let mut log = Primitive::new("log", &[&[2, 3]], |t| t[0].log());
    log.positive = true;
    vec![
        Primitive::new("add", &[&[2, 3], &[2, 3]], |t| t[0].add(&t[1])),
        Primitive::new("add_broadcast_row", &[&[2, 3], &[3]], |t| t[0].add(&t[1])),
        Primitive::new("add_broadcast_scalar", &[&[2, 3], &[]], |t| t[0].add(&t[1])),
        Primitive::new("sub", &[&[2, 3], &[3]], |t| t[0].sub(&t[1])),
        Primitive::new("mul", &[&[2, 3], &[2, 3]], |t| t[0].mul(&t[1])),
        Primitive::new("mul_broadcast_scalar", &[&[4], &[]], |t| t[0].mul(&t[1])),
        Primitive::new("scale", &[&[3]], |t| Ok(t[0].scale(-1.7))),
        Primitive::new("matmul", &[&[2, 3], &[3, 4]], |t| t[0].matmul(&t[1])),
        Primitive::new("matvec", &[&[3, 4], &[4]], |t| t[0].matvec(&t[1])),
        Primitive::new("sum", &[&[2, 3]], |t| Ok(t[0].sum())),
        Primitive::new("mean", &[&[2, 3]], |t| Ok(t[0].mean())),
        Primitive::new("dot", &[&[5], &[5]], |t| t[0].dot(&t[1])),
        Primitive::new("exp", &[&[2, 3]], |t| t[0].exp()),
        log,
        Primitive::new("silu", &[&[2, 3]], |t| t[0].silu()),
        Primitive::new("softmax", &[&[2, 4]], |t| t[0].softmax()),
        Primitive::new("masked_softmax", &[&[5]], |t| {
            t[0].mask_fill(&[false, true, false, false, true], f64::NEG_INFINITY)?
                .softmax()
        }),
        Primitive::new("layer_norm", &[&[2, 4]], |t| t[0].layer_norm()),
        Primitive::new("cross_entropy", &[&[3, 4]], |t| t[0].cross_entropy(&[0, 3, 1])),
        Primitive::new("gather", &[&[4]], |t| t[0].gather(2)),
        Primitive::new("mask_fill", &[&[4]], |t| t[0].mask_fill(&[false, true, false, true], 0.7)),
        Primitive::new("stack", &[&[3], &[3]], |t| Tensor::stack(&[t[0].clone(), t[1].clone()])),
        Primitive::new("mean_rows", &[&[3, 2]], |t| t[0].mean_rows()),
        Primitive::new("expert_forward", &[&[3], &[4, 3], &[4, 3], &[3, 4]], |t| {
            model::expert_forward(
                &t[0],
                &ExpertParams {
                    w_gate: t[1].clone(),
                    w_up: t[2].clone(),
                    w_down: t[3].clone(),
                },
            )
        }),
        Primitive::new("detach_straight_through", &[&[3]], |t| {
            // forward 3x, backward identity
            t[0].add(&t[0].scale(2.0).detach())
        }),
    ]
}

fn random_values(rng: &mut SplitRng, len: usize, positive: bool) -> Vec<f64> {
    (0..len)
        .map(|_| {
            if positive {
                rng.uniform_range(0.5, 2.0)
            } else {
                rng.normal()
            }
        })
        .collect()
}

fn projection(out: &Tensor, w: &[f64]) -> Result<Tensor> {
    Ok(out.mul(&Tensor::new(out.shape(), w.to_vec())?)?.sum())
}

/// Worst relative error of the tape gradient of `Σ w · op(inputs)` against
/// central differences, over `seeds` random draws.
pub fn check_primitive(p: &Primitive, seeds: usize) -> Result<Measurement> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = SplitRng::new(seed as u64).fork(0x9e1);
        let values: Vec<Vec<f64>> = p
            .shapes
            .iter()
            .map(|s| random_values(&mut rng, s.iter().product(), p.positive))
            .collect();
        let tape = Tape::new();
        let leaves = p
            .shapes
            .iter()
            .zip(&values)
            .map(|(s, v)| tape.leaf(s, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = (p.op)(&leaves)?;
        let w = random_values(&mut rng, out.len(), false);
        let grads = projection(&out, &w)?.backward()?;
        // the expected-through-`detach` gradient is identity, which FD can't see
        let straight_through = p.name == "detach_straight_through";
        for (k, leaf) in leaves.iter().enumerate() {
            let tape_grad = grads.wrt(leaf);
            let reference = if straight_through {
                w.clone()
            } else {
                let eval = |theta: &[f64]| {
                    let inputs: Vec<Tensor> = p
                        .shapes
                        .iter()
                        .enumerate()
                        .map(|(j, s)| {
                            let v = if j == k { theta.to_vec() } else { values[j].clone() };
                            Tensor::new(s, v).expect("shape")
                        })
                        .collect();
                    (p.op)(&inputs)
                        .and_then(|o| projection(&o, &w))
                        .map(|t| t.item())
                        .unwrap_or(f64::NAN)
                };
                oracle::fd_gradient(eval, &values[k], oracle::FD_STEP)?
            };
            worst = worst.max(oracle::relative_error(&tape_grad, &reference));
        }
    }
    Ok(Measurement {
        error: worst,
        tolerance: PRIMITIVE_TOL,
        cases: seeds,
    })
}

/// GShard router gradient against FD of the layer with its TopK selection
/// (and jitter) frozen.
pub fn check_gshard_proxy(seeds: usize) -> Result<Measurement> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = SplitRng::new(seed as u64).fork(0x65);
        let n = 4;
        let k = 1 + seed % 2;
        let inst = Instance::random(&mut rng, n, 3, 4, DownstreamKind::CrossEntropy, 1.0);
        let cfg = EstimatorConfig::gshard();
        let params: Vec<ExpertParams> = inst.experts.iter().map(|e| e.to_params()).collect();
        let bank = model::SwiGluBank(&params);
        let tape = Tape::new();
        let router = tape.leaf(&[n, 3], inst.router.clone())?;
        let z = router.matvec(&Tensor::vector(inst.x.clone()))?;
        let x = Tensor::vector(inst.x.clone());
        let (y, trace) = estimators::gshard_forward(&x, &z, k, &cfg, &bank, Draws::Sample(&mut rng), true)?;
        let g = inst.downstream.on_tape(&y)?.backward()?.wrt(&router);

        let selected = trace.experts();
        let jitter = trace.jitter.clone().unwrap_or_else(|| vec![1.0; n]);
        let outs = inst.expert_outputs();
        let frozen = |r: &[f64]| {
            let zj: Vec<f64> = inst.logits_with(r).iter().zip(&jitter).map(|(a, b)| a * b).collect();
            let max = zj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = zj.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            let mut y = vec![0.0; 3];
            for &i in &selected {
                for j in 0..3 {
                    y[j] += e[i] / s * outs[i][j];
                }
            }
            inst.downstream.value(&y)
        };
        let fd = oracle::fd_gradient(frozen, &inst.router, oracle::FD_STEP)?;
        worst = worst.max(oracle::relative_error(&g, &fd));
    }
    Ok(Measurement {
        error: worst,
        tolerance: 1e-6,
        cases: seeds,
    })
}

fn end_to_end_spec() -> ToyModelSpec {
    ToyModelSpec::uniform(
        1,
        MoELayerSpec {
            n_expert: 3,
            top_k: 1,
            d_model: 3,
            d_inner: 4,
            estimator: EstimatorConfig::gshard(),
            balance: BalanceConfig::new(3),
        },
        2,
    )
}

/// Depth-1 GShard model, every parameter, against FD with routing frozen.
/// Errors are relative per parameter tensor.
pub fn check_end_to_end(seeds: usize) -> Result<Measurement> {
    let spec = end_to_end_spec();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = SplitRng::new(seed as u64).fork(0xe2e);
        let mut params = ModelParams::init(&spec, &mut rng);
        for t in params.tensors_mut() {
            for v in t.values_mut() {
                *v = rng.normal() * 0.7;
            }
        }
        let tokens = 4;
        let inputs: Vec<Tensor> = (0..tokens)
            .map(|_| Tensor::vector((0..3).map(|_| rng.normal() * 2.0).collect()))
            .collect();
        let targets: Vec<f64> = (0..tokens * 2).map(|_| rng.normal()).collect();
        let loss_of = |out: &model::ModelOutput| -> Result<Tensor> {
            let stacked = Tensor::stack(&out.outputs)?;
            let diff = stacked.sub(&Tensor::new(stacked.shape(), targets.clone())?)?;
            out.total_loss(&diff.mul(&diff)?.mean())
        };
        let route = rng.fork(1);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let opts = ForwardOptions {
            mode: RoutingMode::Train,
            shards: 2,
            forced: None,
            skip_balance: false,
        };
        let out = model::model_forward(&inputs, &spec, &bound, &route, &opts)?;
        let grads = bound.gradients(&loss_of(&out)?.backward()?);
        let forced = out.forced();

        let count = params.tensors().len();
        for ti in 0..count {
            let base = params.tensors()[ti].values().to_vec();
            let shape = params.tensors()[ti].shape().to_vec();
            let eval = |theta: &[f64]| {
                let mut p = params.clone();
                *p.tensors_mut()[ti] = Tensor::new(&shape, theta.to_vec()).expect("shape");
                let opts = ForwardOptions {
                    mode: RoutingMode::Train,
                    shards: 2,
                    forced: Some(&forced),
                    skip_balance: false,
                };
                model::model_forward(&inputs, &spec, &p, &route, &opts)
                    .and_then(|o| loss_of(&o))
                    .map(|t| t.item())
                    .unwrap_or(f64::NAN)
            };
            let fd = oracle::fd_gradient(eval, &base, oracle::FD_STEP)?;
            worst = worst.max(oracle::relative_error(&grads[ti], &fd));
        }
    }
    Ok(Measurement {
        error: worst,
        tolerance: 1e-5,
        cases: seeds,
    })
}

fn sparsemixer(kind: EstimatorKind, r: f64) -> EstimatorConfig {
    EstimatorConfig {
        r_thresh: r,
        ..EstimatorConfig::new(kind)
    }
}

/// Threshold used for oracle instances: wide enough that supports of two or
/// more experts are common, narrow enough that some experts are masked.
pub const ORACLE_THRESHOLD: f64 = 0.5;

/// Enumerated estimator expectation against the closed form, for both
/// SparseMixer kinds and `n ∈ {2, 3, 4}`.
pub fn check_duality(instances: usize) -> Result<Measurement> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 2..=4 {
        let mut rng = SplitRng::new(n as u64).fork(0xd0a1);
        for _ in 0..instances {
            let inst = Instance::random(&mut rng, n, 3, 4, DownstreamKind::CrossEntropy, ORACLE_THRESHOLD);
            for kind in [EstimatorKind::SparseMixerV2, EstimatorKind::SparseMixerV2Star] {
                let cfg = sparsemixer(kind, ORACLE_THRESHOLD);
                let a = oracle::enumerate_estimator_expectation(&inst, &cfg)?;
                let b = oracle::closed_form_estimator(&inst, &cfg)?;
                worst = worst.max(oracle::relative_error(&a, &b));
                cases += 1;
            }
        }
    }
    Ok(Measurement {
        error: worst,
        tolerance: 1e-8,
        cases,
    })
}

/// v2* at `τ = 1` with a linear downstream map against FD of the expected
/// objective.
pub fn check_linear_exactness(instances: usize) -> Result<Measurement> {
    let mut worst = 0.0f64;
    let mut rng = SplitRng::new(0).fork(0x11e);
    for i in 0..instances {
        let n = 2 + i % 3;
        let inst = Instance::random(&mut rng, n, 3, 4, DownstreamKind::Linear, ORACLE_THRESHOLD);
        let cfg = EstimatorConfig {
            temperature: 1.0,
            ..sparsemixer(EstimatorKind::SparseMixerV2Star, ORACLE_THRESHOLD)
        };
        let est = oracle::enumerate_estimator_expectation(&inst, &cfg)?;
        let fd = oracle::fd_gradient(
            |r| oracle::expected_loss_value(&inst, r, ORACLE_THRESHOLD, 1.0).unwrap_or(f64::NAN),
            &inst.router,
            oracle::FD_STEP,
        )?;
        worst = worst.max(oracle::relative_error(&est, &fd));
    }
    Ok(Measurement {
        error: worst,
        tolerance: 1e-6,
        cases: instances,
    })
}

/// Relative gap between the v2 expectation and the exact gradient of the
/// expected objective, for linear downstream maps. Reported, not checked.
pub fn v2_linear_discrepancy(instances: usize) -> Result<Vec<f64>> {
    let mut rng = SplitRng::new(0).fork(0x11e);
    (0..instances)
        .map(|i| {
            let n = 2 + i % 3;
            let inst = Instance::random(&mut rng, n, 3, 4, DownstreamKind::Linear, ORACLE_THRESHOLD);
            let est = oracle::enumerate_estimator_expectation(
                &inst,
                &sparsemixer(EstimatorKind::SparseMixerV2, ORACLE_THRESHOLD),
            )?;
            let exact = oracle::expected_loss_gradient(&inst, ORACLE_THRESHOLD, 1.0, 0.0)?;
            Ok(oracle::relative_error(&est, &exact))
        })
        .collect()
}

/// Exact gradient of the expected objective with and without `f(0)`
/// subtracted from the score term.
pub fn check_baseline(instances: usize) -> Result<Measurement> {
    let mut worst = 0.0f64;
    let mut rng = SplitRng::new(0).fork(0xba5e);
    for i in 0..instances {
        let inst = Instance::random(&mut rng, 2 + i % 3, 3, 4, DownstreamKind::CrossEntropy, ORACLE_THRESHOLD);
        let f0 = inst.downstream.value(&[0.0; 3]);
        let a = oracle::expected_loss_gradient(&inst, ORACLE_THRESHOLD, 1.0, 0.0)?;
        let b = oracle::expected_loss_gradient(&inst, ORACLE_THRESHOLD, 1.0, f0)?;
        worst = worst.max(oracle::relative_error(&a, &b));
    }
    Ok(Measurement {
        error: worst,
        tolerance: 1e-10,
        cases: instances,
    })
}

/// TopK with one round against the Top1 expectation.
pub fn check_topk_k1(instances: usize) -> Result<Measurement> {
    let mut worst = 0.0f64;
    let mut rng = SplitRng::new(0).fork(0x7c1);
    for i in 0..instances {
        let inst = Instance::random(&mut rng, 2 + i % 3, 3, 4, DownstreamKind::CrossEntropy, ORACLE_THRESHOLD);
        for kind in [EstimatorKind::SparseMixerV2, EstimatorKind::SparseMixerV2Star] {
            let cfg = sparsemixer(kind, ORACLE_THRESHOLD);
            let t = oracle::enumerate_topk_traces(&inst, &cfg, 1)?;
            let top1 = oracle::enumerate_estimator_expectation(&inst, &cfg)?;
            worst = worst
                .max(oracle::relative_error(&t.router_grad, &top1))
                .max((t.total_mass - 1.0).abs());
        }
    }
    Ok(Measurement {
        error: worst,
        tolerance: 1e-12,
        cases: instances,
    })
}

/// `α` exactly when both `f` and `ḡ` are uniform.
pub fn check_balance_uniform() -> Result<Measurement> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in [2usize, 4, 8, 16, 64] {
        let cfg = BalanceConfig::new(n);
        let stats = LoadStats {
            counts: vec![5; n],
            tokens: 5 * n,
            top_k: 1,
            mean_gate: vec![1.0 / n as f64; n],
            scope: StatsScope::Global,
        };
        let gate = Tensor::vector(stats.mean_gate.clone());
        let loss = balance::balance_loss(&stats, &cfg, &gate)?.item();
        worst = worst.max((loss - cfg.alpha).abs() / cfg.alpha);
        worst = worst.max((balance::balance_loss_value(&stats, &cfg) - cfg.alpha).abs() / cfg.alpha);
        cases += 1;
    }
    Ok(Measurement {
        error: worst,
        tolerance: 8.0 * f64::EPSILON,
        cases,
    })
}

/// Four shard reductions against stats of the concatenated batch.
pub fn check_global_reduce(seeds: usize) -> Result<Measurement> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = SplitRng::new(seed as u64).fork(0x4ed);
        let n = 6;
        let k = 2;
        let tokens = 37;
        let mut traces = Vec::new();
        let mut logits = Vec::new();
        for _ in 0..tokens {
            let z: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0).collect();
            let first = rng.below(n);
            let second = (first + 1 + rng.below(n - 1)) % n;
            traces.push(TokenTrace {
                decisions: [first, second]
                    .iter()
                    .map(|&e| RoutingDecision {
                        expert: e,
                        gate_prob: 0.0,
                        is_argmax: false,
                        bernoulli: None,
                        scale: 1.0,
                        logits: Vec::new(),
                    })
                    .collect(),
                jitter: None,
            });
            logits.push(z);
        }
        let shards: Vec<LoadStats> = model::shard_ranges(tokens, 4)
            .into_iter()
            .enumerate()
            .map(|(i, r)| balance::accumulate_stats(&traces[r.clone()], &logits[r], StatsScope::Shard(i)))
            .collect::<Result<_>>()?;
        let reduced = balance::global_reduce(&shards)?;
        let whole = balance::accumulate_stats(&traces, &logits, StatsScope::Global)?;
        if reduced.counts != whole.counts || reduced.tokens != whole.tokens || reduced.top_k != k {
            return Err(Error::InconsistentStats("reduced counts differ".into()));
        }
        for (a, b) in reduced.mean_gate.iter().zip(&whole.mean_gate) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(Measurement {
        error: worst,
        tolerance: 1e-12,
        cases: seeds,
    })
}

/// The standard suite.
pub fn standard_checks() -> Vec<Check> {
    let mut checks: Vec<Check> = primitives()
        .into_iter()
        .map(|p| {
            let name = format!("primitive/{}", p.name);
            Check::new(name, move |_| check_primitive(&p, PRIMITIVE_SEEDS))
        })
        .collect();
    checks.push(Check::new("gshard/proxy_frozen_mask", |_| check_gshard_proxy(20)));
    checks.push(Check::new("gshard/end_to_end_depth1", |_| check_end_to_end(20)));
    checks.push(Check::new("estimator/duality", |l| check_duality(l.instances(50, 10))));
    checks.push(Check::new("estimator/linear_exactness", |l| {
        check_linear_exactness(l.instances(20, 20))
    }));
    checks.push(Check::new("estimator/topk_k1_consistency", |l| check_topk_k1(l.instances(20, 5))));
    checks.push(Check::new("oracle/baseline_subtraction", |l| check_baseline(l.instances(50, 20))));
    checks.push(Check::new("balance/uniform_equals_alpha", |_| check_balance_uniform()));
    checks.push(Check::new("balance/global_reduce", |_| check_global_reduce(20)));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lists_every_check() {
        let checks = vec![
            Check::new("ok", |_| {
                Ok(Measurement {
                    error: 0.0,
                    tolerance: 1.0,
                    cases: 1,
                })
            }),
            Check::new("bad", |_| Err(Error::EmptyBatch)),
            Check::new("nan", |_| {
                Ok(Measurement {
                    error: f64::NAN,
                    tolerance: 1.0,
                    cases: 1,
                })
            }),
        ];
        let r = run_checks(&checks, Level::Fast);
        assert_eq!(r.failures(), vec!["bad", "nan"]);
        let t = r.table();
        assert!(t.starts_with("CHECK  STATUS  DETAIL\n"));
        assert!(t.contains("ok     PASS"));
        assert!(t.contains("bad    FAIL    error: "));
    }

    #[test]
    fn primitives_pass() {
        for p in primitives() {
            let m = check_primitive(&p, 3).unwrap();
            assert!(m.passed(), "{}: {:e}", p.name, m.error);
        }
    }

    #[test]
    fn corrupted_silu_is_caught() {
        let mut p = primitives().into_iter().find(|p| p.name == "silu").unwrap();
        p.op = |t| {
            // correct forward, backward missing the x·σ'(x) term
            let v: Vec<f64> = t[0].values().iter().map(|x| x * crate::autodiff::sigmoid(*x)).collect();
            let s: Vec<f64> = t[0].values().iter().map(|x| crate::autodiff::sigmoid(*x)).collect();
            Tape::record(&[&t[0]], t[0].shape().to_vec(), v, Box::new(move |g| {
                vec![g.iter().zip(&s).map(|(g, s)| g * s).collect()]
            }))
        };
        assert!(!check_primitive(&p, 2).unwrap().passed());
    }
}
