//! MMOT-DC: multi-marginal OT with a KL penalty pulling the coupling towards
//! the tensor product of its block marginals,
//!
//! ```text
//! min_{P in U(mu)} <C, P> + eps KL(P | P_{#T})
//!   = <C, P> + eps H(P) - eps sum_m H(P_{#m}),
//! ```
//!
//! a difference of convex functions. Each DC iteration linearises the concave
//! part `-eps sum_m H(P_{#m})` at the current iterate and solves the resulting
//! entropic MMOT problem with Sinkhorn, warm-started from the previous duals.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::sinkhorn::{
    self, BlockProduct, DenseLogKernel, DualPotentials, LogKernel, SinkhornConfig, SinkhornResult,
};
use crate::tensor::{
    block_marginals, marginalize, neg_entropy, neg_entropy_slice, strides, tensor_sum,
    DenseTensor, MarginalFamily, ProbabilityTensor, TuplePartition,
};

/// Block-marginal entries that underflowed are read as this value inside the solver.
const MARGINAL_FLOOR: f64 = f64::MIN_POSITIVE;

/// Which (sub)gradient of `sum_m H(P_{#m})` drives the linearisation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// `⊕_m (log P_{#m} + 1)`, the exact gradient.
    #[default]
    Corrected,
    /// `sum_m (log P_{#m} + P / P_{#m})` broadcast entrywise.
    FullTensor,
    /// `⊕_m (log P_{#m} + P_{#m})`, never materialising the N-D gradient.
    V1,
    /// `⊕_m log P_{#m}`, also lazy.
    V1Corrected,
}

impl GradientMode {
    /// Whether `G` is a sum of per-block terms (everything but `FullTensor`).
    fn is_block_sum(self) -> bool {
        self != GradientMode::FullTensor
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcConfig {
    /// Weight of the KL penalty, also the entropic weight of every inner solve.
    pub epsilon: f64,
    /// First rung of the warm-start ladder; `min(0.1, epsilon)` when unset.
    pub epsilon0: Option<f64>,
    /// Ladder growth factor.
    pub step: f64,
    pub max_outer: usize,
    /// Relative objective change below which the DC loop stops.
    pub outer_tol: f64,
    /// Inner Sinkhorn settings; its `epsilon` is overwritten per solve.
    pub inner: SinkhornConfig,
    pub gradient_mode: GradientMode,
}

impl Default for DcConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            epsilon0: None,
            step: 2.0,
            max_outer: 200,
            outer_tol: 1e-7,
            inner: SinkhornConfig {
                check_every: 1,
                ..SinkhornConfig::default()
            },
            gradient_mode: GradientMode::Corrected,
        }
    }
}

impl DcConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn epsilon0(&self) -> f64 {
        self.epsilon0.unwrap_or(self.epsilon.min(0.1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return config(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.max_outer == 0 {
            return config("max_outer must be at least 1");
        }
        if !(self.outer_tol >= 0.0) {
            return config(format!("outer_tol must be nonnegative, got {}", self.outer_tol));
        }
        self.inner.with_epsilon(self.epsilon).validate()
    }

    fn validate_warm_start(&self) -> Result<()> {
        self.validate()?;
        let e0 = self.epsilon0();
        if !(e0 > 0.0) {
            return config(format!("epsilon0 must be positive, got {e0}"));
        }
        if e0 > self.epsilon {
            return config(format!(
                "epsilon0 = {e0} exceeds epsilon = {}",
                self.epsilon
            ));
        }
        if !(self.step > 1.0 && self.step.is_finite()) {
            return config(format!("warm-start step must exceed 1, got {}", self.step));
        }
        Ok(())
    }
}

/// One rung of a (possibly single-rung) solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub epsilon: f64,
    /// Index into the traces of this stage's starting point.
    pub trace_start: usize,
    pub outer_iters: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct DcReport {
    pub plan: ProbabilityTensor,
    pub duals: DualPotentials,
    /// MMOT-DC objective at the starting point of each stage and after every DC iteration.
    pub objective_trace: Vec<f64>,
    /// `KL(P | P_{#T})` at the same points.
    pub kl_trace: Vec<f64>,
    /// `<C, P>` at the same points.
    pub linear_trace: Vec<f64>,
    pub outer_iters: usize,
    /// Whether the final stage met `outer_tol` before `max_outer`.
    pub converged: bool,
    /// False if any inner Sinkhorn solve ran out of iterations.
    pub inner_converged: bool,
    pub inner_iters: usize,
    pub stages: Vec<Stage>,
    pub elapsed_secs: f64,
}

impl DcReport {
    /// Largest increase between consecutive objective values within a stage (0 if none).
    pub fn max_ascent(&self) -> f64 {
        let mut worst = 0.0f64;
        for (s, stage) in self.stages.iter().enumerate() {
            let end = self
                .stages
                .get(s + 1)
                .map_or(self.objective_trace.len(), |n| n.trace_start);
            for w in self.objective_trace[stage.trace_start..end].windows(2) {
                worst = worst.max(w[1] - w[0]);
            }
        }
        worst
    }
}

/// `<C, P> + eps KL(P | P_{#T})`, with the KL term evaluated as
/// `H(P) - sum_m H(P_{#m})`.
pub fn mmotdc_objective(
    cost: &DenseTensor,
    p: &ProbabilityTensor,
    partition: &TuplePartition,
    epsilon: f64,
) -> Result<f64> {
    let marg = block_marginals(p, partition)?;
    let (obj, _, _) = evaluate(cost, p, &marg, epsilon)?;
    Ok(obj)
}

/// Returns `(objective, kl, linear)`.
fn evaluate(
    cost: &DenseTensor,
    p: &DenseTensor,
    marg: &[DenseTensor],
    epsilon: f64,
) -> Result<(f64, f64, f64)> {
    let linear = cost.dot(p)?;
    let mut kl = neg_entropy(p)?;
    for m in marg {
        kl -= neg_entropy(m)?;
    }
    Ok((linear + epsilon * kl, kl, linear))
}

/// [`evaluate`] for a plan of the form `exp(-C / eps + ⊕_m b_m + ⊕_n f_n / eps)`,
/// where `H(P) = -<C, P> / eps + sum_m <P_{#m}, b_m> + sum_n <P_{#n}, f_n> / eps`
/// needs no logarithm over the full tensor.
fn evaluate_gibbs(
    cost: &DenseTensor,
    p: &DenseTensor,
    marg: &[DenseTensor],
    terms: &[DenseTensor],
    duals: &DualPotentials,
    partition: &TuplePartition,
    epsilon: f64,
) -> Result<(f64, f64, f64)> {
    let linear = cost.dot(p)?;
    let mut h = -linear / epsilon;
    for (m, t) in marg.iter().zip(terms) {
        h += m.dot(t)?;
    }
    for ((block, m), _) in partition.blocks().iter().zip(marg).zip(terms) {
        for (j, axis) in block.clone().enumerate() {
            let axis_marg = marginalize(m, j..j + 1)?;
            h += axis_marg
                .data()
                .iter()
                .zip(duals.get(axis))
                .filter(|(&w, _)| w > 0.0)
                .map(|(&w, &f)| w * f)
                .sum::<f64>()
                / epsilon;
        }
    }
    let mut kl = h;
    for m in marg {
        kl -= neg_entropy(m)?;
    }
    Ok((linear + epsilon * kl, kl, linear))
}

fn check_positive(marg: &[DenseTensor]) -> Result<()> {
    for (m, t) in marg.iter().enumerate() {
        if let Some(v) = t.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!(
                "block marginal {m} has non-positive entry {v}; the gradient needs log of it"
            )));
        }
    }
    Ok(())
}

/// Per-block gradient terms `g_m` with `G = ⊕_m g_m` (lazy modes and `Corrected`).
fn block_terms(marg: &[DenseTensor], mode: GradientMode) -> Vec<DenseTensor> {
    marg.iter()
        .map(|m| {
            let data = m
                .data()
                .iter()
                .map(|&v| v.max(MARGINAL_FLOOR))
                .map(|v| match mode {
                    GradientMode::Corrected => v.ln() + 1.0,
                    GradientMode::V1 => v.ln() + v,
                    GradientMode::V1Corrected => v.ln(),
                    GradientMode::FullTensor => unreachable!("not a block-sum mode"),
                })
                .collect();
            DenseTensor::from_parts(m.shape().to_vec(), data)
        })
        .collect()
}

/// Flat block sub-index helpers: entry `idx` lies at `(idx / stride) % len` in block `m`.
fn block_layout(partition: &TuplePartition, shape: &[usize]) -> Vec<(usize, usize)> {
    let lens: Vec<usize> = partition
        .blocks()
        .iter()
        .map(|b| shape[b.clone()].iter().product())
        .collect();
    let st = strides(&lens);
    st.into_iter().zip(lens).collect()
}

/// The gradient of `sum_m H(P_{#m})` (or its stand-in, per `mode`) at `p`.
pub fn concave_gradient(
    p: &DenseTensor,
    partition: &TuplePartition,
    mode: GradientMode,
) -> Result<DenseTensor> {
    let marg = block_marginals(p, partition)?;
    check_positive(&marg)?;
    gradient_from_marginals(p, partition, &marg, mode)
}

fn gradient_from_marginals(
    p: &DenseTensor,
    partition: &TuplePartition,
    marg: &[DenseTensor],
    mode: GradientMode,
) -> Result<DenseTensor> {
    if mode != GradientMode::FullTensor {
        return tensor_sum(&block_terms(marg, mode), p.shape());
    }
    let layout = block_layout(partition, p.shape());
    let data = p
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            layout
                .iter()
                .zip(marg)
                .map(|(&(stride, len), m)| {
                    let q = m.data()[(idx / stride) % len].max(MARGINAL_FLOOR);
                    q.ln() + v / q
                })
                .sum()
        })
        .collect();
    Ok(DenseTensor::from_parts(p.shape().to_vec(), data))
}

/// `log K = -C / eps + ⊕_m g_m`, assembled one fibre at a time.
struct BlockSumKernel<'a> {
    cost: &'a DenseTensor,
    inv_eps: f64,
    /// (stride, len, values) per block.
    terms: Vec<(usize, usize, Vec<f64>)>,
}

impl LogKernel for BlockSumKernel<'_> {
    fn shape(&self) -> &[usize] {
        self.cost.shape()
    }

    fn fill_row(&self, row: usize, out: &mut [f64]) {
        let n = out.len();
        let start = row * n;
        let src = &self.cost.data()[start..start + n];
        let (last, rest) = self.terms.split_last().expect("at least one block");
        let constant: f64 = rest
            .iter()
            .map(|(stride, len, vals)| vals[(start / stride) % len])
            .sum();
        // the last block has stride 1 and contains whole fibres
        let base = start % last.1;
        for ((o, &c), &g) in out.iter_mut().zip(src).zip(&last.2[base..base + n]) {
            *o = -c * self.inv_eps + constant + g;
        }
    }
}

struct Iterate {
    plan: ProbabilityTensor,
    duals: DualPotentials,
}

struct Traces<'r> {
    report: &'r mut DcReport,
}

impl Traces<'_> {
    fn push(&mut self, (obj, kl, lin): (f64, f64, f64)) {
        self.report.objective_trace.push(obj);
        self.report.kl_trace.push(kl);
        self.report.linear_trace.push(lin);
    }
}

fn run_stage(
    cost: &DenseTensor,
    mu: &MarginalFamily,
    partition: &TuplePartition,
    cfg: &DcConfig,
    epsilon: f64,
    start: Iterate,
    report: &mut DcReport,
) -> Result<Iterate> {
    let inner = cfg.inner.with_epsilon(epsilon);
    let mut it = start;
    let mut marg = block_marginals(&it.plan, partition)?;
    let mut current = evaluate(cost, &it.plan, &marg, epsilon)?;
    let trace_start = report.objective_trace.len();
    Traces { report }.push(current);

    let block_sum = cfg.gradient_mode.is_block_sum();
    let mut dense_kernel: Vec<f64> = if block_sum { Vec::new() } else { vec![0.0; cost.len()] };
    let layout = block_layout(partition, cost.shape());
    let inv_eps = 1.0 / epsilon;
    // exp(-C / eps) is shared by every DC iteration of the stage
    let (gibbs, gibbs_shift) = if block_sum {
        let log_e: Vec<f64> = cost.data().iter().map(|&c| -c * inv_eps).collect();
        sinkhorn::exp_shifted(&log_e)
    } else {
        (Vec::new(), 0.0)
    };

    let mut outer = 0;
    let mut converged = false;
    while outer < cfg.max_outer {
        let mut terms: Vec<DenseTensor> = Vec::new();
        let res = if block_sum {
            terms = block_terms(&marg, cfg.gradient_mode);
            let kernel = BlockSumKernel {
                cost,
                inv_eps,
                terms: terms
                    .iter()
                    .zip(&layout)
                    .map(|(t, &(stride, len))| (stride, len, t.data().to_vec()))
                    .collect(),
            };
            let blocks = partition
                .blocks()
                .iter()
                .zip(&terms)
                .map(|(b, t)| (b.clone(), cost.shape()[b.clone()].to_vec(), t.data().to_vec()))
                .collect();
            match BlockProduct::new(&gibbs, gibbs_shift, blocks) {
                Some(builder) => sinkhorn::solve_with(&kernel, &builder, mu, &inner, Some(&it.duals))?,
                None => sinkhorn::solve(&kernel, mu, &inner, Some(&it.duals))?,
            }
        } else {
            let grad = gradient_from_marginals(&it.plan, partition, &marg, cfg.gradient_mode)?;
            for ((k, &c), &g) in dense_kernel.iter_mut().zip(cost.data()).zip(grad.data()) {
                *k = g - c * inv_eps;
            }
            let kernel = DenseLogKernel {
                shape: cost.shape(),
                data: &dense_kernel,
            };
            sinkhorn::solve(&kernel, mu, &inner, Some(&it.duals))?
        };
        report.inner_iters += res.iters;
        report.inner_converged &= res.converged;
        let SinkhornResult { plan, duals, .. } = res;
        it = Iterate { plan, duals };
        outer += 1;
        marg = block_marginals(&it.plan, partition)?;
        let next = if block_sum {
            evaluate_gibbs(cost, &it.plan, &marg, &terms, &it.duals, partition, epsilon)?
        } else {
            evaluate(cost, &it.plan, &marg, epsilon)?
        };
        Traces { report }.push(next);
        let change = (next.0 - current.0).abs() / current.0.abs().max(f64::MIN_POSITIVE);
        current = next;
        if change < cfg.outer_tol {
            converged = true;
            break;
        }
    }
    report.outer_iters += outer;
    report.converged = converged;
    report.stages.push(Stage {
        epsilon,
        trace_start,
        outer_iters: outer,
        converged,
    });
    Ok(it)
}

fn initial_iterate(
    cost: &DenseTensor,
    mu: &MarginalFamily,
    partition: &TuplePartition,
    init_plan: Option<&ProbabilityTensor>,
    init_duals: Option<&DualPotentials>,
) -> Result<Iterate> {
    mu.check_shape(cost.shape())?;
    partition.check_shape(cost.shape())?;
    let plan = match init_plan {
        Some(p) if p.shape() != cost.shape() => {
            return config(format!(
                "initial plan has shape {:?}, expected {:?}",
                p.shape(),
                cost.shape()
            ))
        }
        Some(p) => p.clone(),
        None => mu.product(),
    };
    let duals = match init_duals {
        Some(d) if d.extents() != cost.shape() => {
            return config("initial duals do not match the cost shape")
        }
        Some(d) => d.clone(),
        None => DualPotentials::zeros(cost.shape()),
    };
    Ok(Iterate { plan, duals })
}

fn empty_report(it: &Iterate) -> DcReport {
    DcReport {
        plan: it.plan.clone(),
        duals: it.duals.clone(),
        objective_trace: Vec::new(),
        kl_trace: Vec::new(),
        linear_trace: Vec::new(),
        outer_iters: 0,
        converged: false,
        inner_converged: true,
        inner_iters: 0,
        stages: Vec::new(),
        elapsed_secs: 0.0,
    }
}

/// DC iterations at a fixed `cfg.epsilon`. Defaults: `P^(0) = mu_1 ⊗ ... ⊗ mu_N`, zero duals.
pub fn dc_solve(
    cost: &DenseTensor,
    mu: &MarginalFamily,
    partition: &TuplePartition,
    cfg: &DcConfig,
    init_plan: Option<&ProbabilityTensor>,
    init_duals: Option<&DualPotentials>,
) -> Result<DcReport> {
    cfg.validate()?;
    let clock = Instant::now();
    let start = initial_iterate(cost, mu, partition, init_plan, init_duals)?;
    let mut report = empty_report(&start);
    let it = run_stage(cost, mu, partition, cfg, cfg.epsilon, start, &mut report)?;
    report.plan = it.plan;
    report.duals = it.duals;
    report.elapsed_secs = clock.elapsed().as_secs_f64();
    Ok(report)
}

/// Penalty weights visited by the warm start: `e0, e0*s, e0*s^2, ...` while below
/// `epsilon`, then `epsilon` itself.
pub fn warm_start_schedule(epsilon0: f64, step: f64, epsilon: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut e = epsilon0;
    while e < epsilon {
        out.push(e);
        e *= step;
    }
    out.push(epsilon);
    out
}

/// Continuation over [`warm_start_schedule`], each rung initialised from the previous
/// rung's plan and duals.
pub fn dc_solve_warmstart(
    cost: &DenseTensor,
    mu: &MarginalFamily,
    partition: &TuplePartition,
    cfg: &DcConfig,
    init_plan: Option<&ProbabilityTensor>,
    init_duals: Option<&DualPotentials>,
) -> Result<DcReport> {
    cfg.validate_warm_start()?;
    let clock = Instant::now();
    let mut it = initial_iterate(cost, mu, partition, init_plan, init_duals)?;
    let mut report = empty_report(&it);
    for e in warm_start_schedule(cfg.epsilon0(), cfg.step, cfg.epsilon) {
        it = run_stage(cost, mu, partition, cfg, e, it, &mut report)?;
    }
    report.plan = it.plan;
    report.duals = it.duals;
    report.elapsed_secs = clock.elapsed().as_secs_f64();
    Ok(report)
}

/// Column of the largest entry in each row of a matrix; ties go to the lowest index.
pub fn row_argmax(m: &DenseTensor) -> Result<Vec<usize>> {
    let [rows, cols] = m.shape()[..] else {
        return config(format!("row_argmax needs a matrix, got shape {:?}", m.shape()));
    };
    Ok((0..rows)
        .map(|i| {
            let row = &m.data()[i * cols..(i + 1) * cols];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// `sum_m H(P_{#m})` for a plan, used by the finite-difference checks.
pub fn block_entropy_sum(p: &DenseTensor, partition: &TuplePartition) -> Result<f64> {
    block_marginals(p, partition)?
        .iter()
        .map(|m| neg_entropy_slice(m.data()))
        .sum()
}
