//! Log-domain Sinkhorn for entropic multi-marginal optimal transport.
//!
//! Solves `min <C, P> + eps * H(P)` over couplings `P` whose axis marginals are
//! `mu_1, ..., mu_N`, where `H(P) = <P, log P>`. The dual potentials are
//! updated one axis at a time in order `0, 1, ..., N-1`, each update using the
//! potentials already refreshed in the current sweep:
//!
//! ```text
//! f_n = eps log mu_n - eps logsumexp_{i_-n} ( (sum_{j != n} f_j - C) / eps )
//! ```
//!
//! and the plan is read back as `P = exp((f_1 ⊕ ... ⊕ f_N - C) / eps)`.
//!
//! Every reduction subtracts its running maximum. Reductions are split into
//! fixed-size chunks of the tensor that are evaluated in parallel and merged in
//! chunk order, so results do not depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::tensor::{increment, DenseTensor, MarginalFamily, ProbabilityTensor};

/// Value of a scaled potential `f / eps` on an atom with zero mass.
const DEAD_POTENTIAL: f64 = -1e30;

/// Target number of tensor entries processed by one reduction chunk.
const CHUNK_ELEMS: usize = 1 << 13;

/// The dual state `(f_1, ..., f_N)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    f: Vec<Vec<f64>>,
}

impl DualPotentials {
    pub fn new(f: Vec<Vec<f64>>) -> Result<Self> {
        if f.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dual potentials must be finite".into()));
        }
        Ok(Self { f })
    }

    pub fn zeros(extents: &[usize]) -> Self {
        Self {
            f: extents.iter().map(|&a| vec![0.0; a]).collect(),
        }
    }

    pub fn get(&self, n: usize) -> &[f64] {
        &self.f[n]
    }

    pub fn as_slice(&self) -> &[Vec<f64>] {
        &self.f
    }

    pub fn extents(&self) -> Vec<usize> {
        self.f.iter().map(Vec::len).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Entropic weight.
    pub epsilon: f64,
    /// Maximum number of full sweeps over the axes.
    pub max_iters: usize,
    /// Stop once the max-norm marginal residual falls to this value.
    pub tol: f64,
    /// Sweeps between residual checks.
    pub check_every: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            max_iters: 10_000,
            tol: 1e-7,
            check_every: 10,
        }
    }
}

impl SinkhornConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return config(format!("sinkhorn epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.tol > 0.0) {
            return config(format!("sinkhorn tol must be positive, got {}", self.tol));
        }
        if self.max_iters == 0 || self.check_every == 0 {
            return config("sinkhorn max_iters and check_every must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    pub plan: ProbabilityTensor,
    pub duals: DualPotentials,
    /// Full sweeps performed.
    pub iters: usize,
    /// Max-norm marginal residual of the returned plan.
    pub residual: f64,
    pub dual_objective: f64,
    /// False when `max_iters` ran out first; the lowest-residual iterate is returned then.
    pub converged: bool,
    /// Dual objective at every residual check.
    pub dual_trace: Vec<f64>,
}

/// Source of log-kernel values `log K = -C_eff / eps`, one last-axis fibre at a time.
pub(crate) trait LogKernel: Sync {
    fn shape(&self) -> &[usize];

    /// Writes the values of fibre `row` (flat entries `row*last .. (row+1)*last`) into `out`.
    fn fill_row(&self, row: usize, out: &mut [f64]);
}

/// `log K = -C / eps`, evaluated on the fly.
pub(crate) struct ScaledCost<'a> {
    cost: &'a DenseTensor,
    inv_eps: f64,
}

impl<'a> ScaledCost<'a> {
    pub(crate) fn new(cost: &'a DenseTensor, epsilon: f64) -> Self {
        Self {
            cost,
            inv_eps: 1.0 / epsilon,
        }
    }
}

impl LogKernel for ScaledCost<'_> {
    fn shape(&self) -> &[usize] {
        self.cost.shape()
    }

    fn fill_row(&self, row: usize, out: &mut [f64]) {
        let n = out.len();
        let src = &self.cost.data()[row * n..(row + 1) * n];
        for (o, &c) in out.iter_mut().zip(src) {
            *o = -c * self.inv_eps;
        }
    }
}

/// A materialised log kernel.
pub(crate) struct DenseLogKernel<'a> {
    pub(crate) shape: &'a [usize],
    pub(crate) data: &'a [f64],
}

impl LogKernel for DenseLogKernel<'_> {
    fn shape(&self) -> &[usize] {
        self.shape
    }

    fn fill_row(&self, row: usize, out: &mut [f64]) {
        let n = out.len();
        out.copy_from_slice(&self.data[row * n..(row + 1) * n]);
    }
}

/// Solves the entropic MMOT problem `min <C, P> + eps H(P)` over `U(mu)`.
///
/// `init` warm-starts the potentials; zeros are used otherwise. Zero entries in
/// a marginal are allowed: their potentials are pinned to a large negative
/// sentinel and they are ignored in the residual.
pub fn sinkhorn_mmot(
    cost: &DenseTensor,
    mu: &MarginalFamily,
    cfg: &SinkhornConfig,
    init: Option<&DualPotentials>,
) -> Result<SinkhornResult> {
    cfg.validate()?;
    mu.check_shape(cost.shape())?;
    solve(&ScaledCost::new(cost, cfg.epsilon), mu, cfg, init)
}

/// Solves `min <C, P> + eps KL(P | mu_1 ⊗ ... ⊗ mu_N)` over `U(mu)`.
///
/// The KL reference only adds `-eps ⊕_n log mu_n` to the cost, which is a
/// separable shift; this is [`sinkhorn_mmot`] on the shifted cost.
pub fn sinkhorn_mmot_kl(
    cost: &DenseTensor,
    mu: &MarginalFamily,
    cfg: &SinkhornConfig,
    init: Option<&DualPotentials>,
) -> Result<SinkhornResult> {
    cfg.validate()?;
    mu.check_shape(cost.shape())?;
    let logs: Vec<DenseTensor> = mu
        .as_slice()
        .iter()
        .map(|m| {
            let v = m
                .iter()
                .map(|&x| if x > 0.0 { x.ln() } else { 0.0 })
                .collect();
            DenseTensor::from_parts(vec![m.len()], v)
        })
        .collect();
    let shift = crate::tensor::tensor_sum(&logs, cost.shape())?;
    let shifted: Vec<f64> = cost
        .data()
        .iter()
        .zip(shift.data())
        .map(|(&c, &s)| c - cfg.epsilon * s)
        .collect();
    let shifted = DenseTensor::from_parts(cost.shape().to_vec(), shifted);
    solve(&ScaledCost::new(&shifted, cfg.epsilon), mu, cfg, init)
}

/// The entropic dual objective
/// `sum_n <f_n, mu_n> - eps sum exp((⊕ f_n - C) / eps) + eps`.
pub fn dual_objective(
    cost: &DenseTensor,
    mu: &MarginalFamily,
    duals: &DualPotentials,
    epsilon: f64,
) -> Result<f64> {
    mu.check_shape(cost.shape())?;
    if duals.extents() != cost.shape() {
        return config("dual potentials do not match the cost shape");
    }
    let kernel = ScaledCost::new(cost, epsilon);
    let layout = Layout::new(cost.shape());
    let g = scale(duals, epsilon);
    let (_, mass) = marginals(&kernel, &layout, &g);
    Ok(linear_dual_term(mu, duals.as_slice()) - epsilon * mass + epsilon)
}

fn linear_dual_term(mu: &MarginalFamily, f: &[Vec<f64>]) -> f64 {
    mu.as_slice()
        .iter()
        .zip(f)
        .map(|(m, fv)| {
            m.iter()
                .zip(fv)
                .filter(|(&w, _)| w > 0.0)
                .map(|(&w, &v)| w * v)
                .sum::<f64>()
        })
        .sum()
}

fn scale(duals: &DualPotentials, epsilon: f64) -> Vec<Vec<f64>> {
    duals
        .as_slice()
        .iter()
        .map(|f| f.iter().map(|&v| v / epsilon).collect())
        .collect()
}

/// Generic solver over any log kernel. Potentials are kept scaled by `1/eps`.
///
/// Sweeps run in the scaling domain while the scaled kernel can represent the
/// iterate and in the log domain otherwise; both perform the same updates.
pub(crate) fn solve<K: LogKernel>(
    kernel: &K,
    mu: &MarginalFamily,
    cfg: &SinkhornConfig,
    init: Option<&DualPotentials>,
) -> Result<SinkhornResult> {
    let start = Start::new(kernel, mu, cfg, init)?;
    if start.shape.len() < 2 {
        return run::<K, ExpBuilder>(kernel, None, mu, cfg, &start);
    }
    let builder = ExpBuilder::new(kernel, &start.layout);
    run(kernel, Some(&builder), mu, cfg, &start)
}

/// Like [`solve`], with a caller-supplied way of building the scaled kernel.
pub(crate) fn solve_with<K: LogKernel, B: KernelBuilder>(
    kernel: &K,
    builder: &B,
    mu: &MarginalFamily,
    cfg: &SinkhornConfig,
    init: Option<&DualPotentials>,
) -> Result<SinkhornResult> {
    let start = Start::new(kernel, mu, cfg, init)?;
    if start.shape.len() < 2 {
        return run::<K, B>(kernel, None, mu, cfg, &start);
    }
    run(kernel, Some(builder), mu, cfg, &start)
}

/// Forces the log-domain iteration; used to cross-check [`solve`].
#[cfg(test)]
pub(crate) fn solve_log_only<K: LogKernel>(
    kernel: &K,
    mu: &MarginalFamily,
    cfg: &SinkhornConfig,
    init: Option<&DualPotentials>,
) -> Result<SinkhornResult> {
    let start = Start::new(kernel, mu, cfg, init)?;
    run::<K, ExpBuilder>(kernel, None, mu, cfg, &start)
}

/// Validated inputs shared by both iterations.
struct Start {
    shape: Vec<usize>,
    layout: Layout,
    g: Vec<Vec<f64>>,
    log_mu: Vec<Vec<Option<f64>>>,
}

impl Start {
    fn new<K: LogKernel>(
        kernel: &K,
        mu: &MarginalFamily,
        cfg: &SinkhornConfig,
        init: Option<&DualPotentials>,
    ) -> Result<Self> {
        cfg.validate()?;
        let shape = kernel.shape().to_vec();
        mu.check_shape(&shape)?;
        let g = match init {
            Some(d) => {
                if d.extents() != shape {
                    return config(format!(
                        "initial duals have extents {:?}, expected {:?}",
                        d.extents(),
                        shape
                    ));
                }
                scale(d, cfg.epsilon)
            }
            None => shape.iter().map(|&a| vec![0.0; a]).collect(),
        };
        let log_mu = mu
            .as_slice()
            .iter()
            .map(|m| m.iter().map(|&w| (w > 0.0).then(|| w.ln())).collect())
            .collect();
        Ok(Self {
            layout: Layout::new(&shape),
            shape,
            g,
            log_mu,
        })
    }

    fn live(&self) -> Vec<Vec<bool>> {
        self.log_mu
            .iter()
            .map(|v| v.iter().map(Option::is_some).collect())
            .collect()
    }
}

fn is_check(iters: usize, cfg: &SinkhornConfig) -> bool {
    iters % cfg.check_every == 0 || iters == cfg.max_iters
}

fn unscale(g: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    g.iter().map(|v| v.iter().map(|x| x * eps).collect()).collect()
}

fn log_update<K: LogKernel>(kernel: &K, start: &Start, g: &mut [Vec<f64>], axis: usize) {
    let lse = axis_logsumexp(kernel, &start.layout, g, axis);
    for ((gi, l), lm) in g[axis].iter_mut().zip(&lse).zip(&start.log_mu[axis]) {
        *gi = match lm {
            Some(lm) => lm - l,
            None => DEAD_POTENTIAL,
        };
    }
}

fn run<K: LogKernel, B: KernelBuilder>(
    kernel: &K,
    builder: Option<&B>,
    mu: &MarginalFamily,
    cfg: &SinkhornConfig,
    start: &Start,
) -> Result<SinkhornResult> {
    let eps = cfg.epsilon;
    let nd = start.shape.len();
    let layout = &start.layout;
    let live = start.live();
    let mut g = start.g.clone();
    let mut scaled = builder.and_then(|b| Scaled::new(b, layout, &g, &live));
    let mut s_cache: Option<Vec<f64>> = None;

    let mut best: Option<(f64, Vec<Vec<f64>>, f64)> = None;
    let mut dual_trace = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    while iters < cfg.max_iters {
        let mut first_log_axis = 0;
        let mut r_last = None;
        if let Some(st) = scaled.as_mut() {
            match st.sweep(mu, s_cache.take()) {
                Ok(r) => {
                    first_log_axis = nd;
                    r_last = Some(r);
                }
                Err(axis) => {
                    g = st.potentials();
                    scaled = None;
                    first_log_axis = axis;
                }
            }
        }
        for axis in first_log_axis..nd {
            log_update(kernel, start, &mut g, axis);
        }
        iters += 1;
        if is_check(iters, cfg) {
            let (marg, mass) = match (scaled.as_ref(), r_last) {
                (Some(st), Some(r_last)) => {
                    g = st.potentials();
                    let (marg, s) = st.marginals(&r_last);
                    s_cache = Some(s);
                    let mass = marg[0].iter().sum();
                    (marg, mass)
                }
                _ => marginals(kernel, layout, &g),
            };
            let dual = linear_dual_term(mu, &unscale(&g, eps)) - eps * mass + eps;
            let residual = residual(&marg, mu);
            dual_trace.push(dual);
            if best.as_ref().map_or(true, |(r, _, _)| residual < *r) {
                best = Some((residual, g.clone(), dual));
            }
            if residual <= cfg.tol {
                converged = true;
                break;
            }
        }
        match (scaled.as_mut(), builder) {
            (Some(st), _) if st.needs_absorb() => {
                g = st.potentials();
                s_cache = None;
                if !st.rebuild(&g) {
                    scaled = None;
                }
            }
            (None, Some(b)) => {
                scaled = Scaled::new(b, layout, &g, &live);
                s_cache = None;
            }
            _ => {}
        }
    }

    let (residual, g, dual) = best.expect("at least one residual check");
    let plan = match builder {
        Some(b) => {
            let mut k = Vec::new();
            match b.build(layout, &g, &mut k) {
                Some(c) if c.is_finite() => {
                    let scale = c.exp();
                    k.iter_mut().for_each(|v| *v *= scale);
                    k
                }
                _ => materialize(kernel, layout, &g),
            }
        }
        None => materialize(kernel, layout, &g),
    };
    let plan = ProbabilityTensor::new(DenseTensor::new(start.shape.clone(), plan)?)?;
    Ok(SinkhornResult {
        plan,
        duals: DualPotentials { f: unscale(&g, eps) },
        iters,
        residual,
        dual_objective: dual,
        converged,
        dual_trace,
    })
}

/// Builds `K = exp(log K + ⊕ g - c)` for scaled potentials `g`.
pub(crate) trait KernelBuilder: Sync {
    /// Overwrites `out` with the kernel and returns the shift `c`, chosen so that
    /// the largest entry is 1. `None` when no entry is finite.
    fn build(&self, layout: &Layout, g: &[Vec<f64>], out: &mut Vec<f64>) -> Option<f64>;
}

/// Keeps a materialised copy of `log K` and exponentiates it on every build.
pub(crate) struct ExpBuilder {
    log_k: Vec<f64>,
}

impl ExpBuilder {
    fn new<K: LogKernel>(kernel: &K, layout: &Layout) -> Self {
        let last = layout.last;
        let log_k = layout
            .map_chunks(|range| {
                let mut out = vec![0.0; range.len() * last];
                for (r, row) in range.enumerate() {
                    kernel.fill_row(row, &mut out[r * last..(r + 1) * last]);
                }
                out
            })
            .concat();
        Self { log_k }
    }
}

impl KernelBuilder for ExpBuilder {
    fn build(&self, layout: &Layout, g: &[Vec<f64>], out: &mut Vec<f64>) -> Option<f64> {
        let last = layout.last;
        let nd = layout.shape.len();
        let row_pot = prefix_values(layout, |idx| {
            idx.iter().enumerate().map(|(j, &i)| g[j][i]).sum()
        });
        let gl = &g[nd - 1];
        let log_k = &self.log_k;
        let c = layout
            .map_chunks(|range| {
                let mut m = f64::NEG_INFINITY;
                for row in range {
                    let lk = &log_k[row * last..(row + 1) * last];
                    for (&v, &gv) in lk.iter().zip(gl) {
                        m = m.max(v + row_pot[row] + gv);
                    }
                }
                m
            })
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        if !c.is_finite() {
            return None;
        }
        let parts = layout.map_chunks(|range| {
            let mut part = Vec::with_capacity(range.len() * last);
            for row in range {
                let lk = &log_k[row * last..(row + 1) * last];
                part.extend(lk.iter().zip(gl).map(|(&v, &gv)| (v + row_pot[row] + gv - c).exp()));
            }
            part
        });
        out.clear();
        for p in parts {
            out.extend(p);
        }
        Some(c)
    }
}

/// `log K = log E + ⊕_m b_m` over contiguous axis blocks, with `E` stored
/// already exponentiated. Builds need exponentials only on block-sized arrays.
pub(crate) struct BlockProduct<'a> {
    /// `exp(log E - e_shift)`.
    e: &'a [f64],
    e_shift: f64,
    /// Per block: axes, extents and `b_m` in row-major order over the block.
    blocks: Vec<(std::ops::Range<usize>, Vec<usize>, Vec<f64>)>,
}

impl<'a> BlockProduct<'a> {
    /// `None` if some entry of `e` underflowed, in which case the generic
    /// builder should be used instead.
    pub(crate) fn new(
        e: &'a [f64],
        e_shift: f64,
        blocks: Vec<(std::ops::Range<usize>, Vec<usize>, Vec<f64>)>,
    ) -> Option<Self> {
        e.iter().all(|&v| v > 0.0).then_some(Self { e, e_shift, blocks })
    }
}

/// `(exp(log x - log_shift), log_shift)` with `log_shift = max log x`.
pub(crate) fn exp_shifted(log_x: &[f64]) -> (Vec<f64>, f64) {
    let c = log_x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (log_x.iter().map(|&v| (v - c).exp()).collect(), c)
}

impl KernelBuilder for BlockProduct<'_> {
    fn build(&self, layout: &Layout, g: &[Vec<f64>], out: &mut Vec<f64>) -> Option<f64> {
        let mut total = self.e_shift;
        let mut factors = Vec::with_capacity(self.blocks.len());
        for (axes, extents, b) in &self.blocks {
            let mut idx = vec![0; extents.len()];
            let vals: Vec<f64> = b
                .iter()
                .map(|&bv| {
                    let v = bv + idx.iter().zip(axes.clone()).map(|(&i, n)| g[n][i]).sum::<f64>();
                    increment(&mut idx, extents);
                    v
                })
                .collect();
            let (a, c) = exp_shifted(&vals);
            if !c.is_finite() {
                return None;
            }
            total += c;
            factors.push(a);
        }
        let (last, rest) = factors.split_last().expect("at least one block");
        let run = last.len();
        let strides: Vec<usize> = {
            let mut st = Vec::with_capacity(rest.len());
            let mut acc = run;
            for f in rest.iter().rev() {
                st.push(acc);
                acc *= f.len();
            }
            st.reverse();
            st
        };
        let e = self.e;
        let chunk = (layout.chunk_rows * layout.last).div_ceil(run).max(1) * run;
        out.clear();
        out.resize(e.len(), 0.0);
        let work = |(c, dst): (usize, &mut [f64])| {
            let base = c * chunk;
            for (r, seg) in dst.chunks_mut(run).enumerate() {
                let start = base + r * run;
                let w: f64 = rest
                    .iter()
                    .zip(&strides)
                    .map(|(f, &st)| f[(start / st) % f.len()])
                    .product();
                for ((o, &ev), &lv) in seg.iter_mut().zip(&e[start..start + run]).zip(last) {
                    *o = ev * w * lv;
                }
            }
        };
        if e.len() <= chunk {
            work((0, &mut out[..]));
        } else {
            out.par_chunks_mut(chunk).enumerate().for_each(work);
        }
        Some(total)
    }
}

/// Above this `|log u|` the scalings are folded back into the kernel.
const ABSORB_THRESHOLD: f64 = 200.0;

/// Kernel `K = exp(log K + ⊕ g_abs)` and the scalings `u` applied on top of it,
/// so that the current plan is `K ⊙ (u_1 ⊗ ... ⊗ u_N)` and `g = g_abs + log u`.
struct Scaled<'a, B> {
    builder: &'a B,
    layout: &'a Layout,
    k: Vec<f64>,
    g_abs: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    live: &'a [Vec<bool>],
}

impl<'a, B: KernelBuilder> Scaled<'a, B> {
    fn new(builder: &'a B, layout: &'a Layout, g: &[Vec<f64>], live: &'a [Vec<bool>]) -> Option<Self> {
        let mut st = Self {
            builder,
            layout,
            k: Vec::new(),
            g_abs: Vec::new(),
            u: Vec::new(),
            live,
        };
        st.rebuild(g).then_some(st)
    }

    /// Absorbs `g` into the kernel and resets the scalings.
    fn rebuild(&mut self, g: &[Vec<f64>]) -> bool {
        let Some(c) = self.builder.build(self.layout, g, &mut self.k) else {
            return false;
        };
        self.g_abs = g.to_vec();
        for v in self.g_abs[0].iter_mut() {
            *v -= c;
        }
        self.u = self
            .live
            .iter()
            .map(|l| l.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect())
            .collect();
        true
    }

    /// One Gauss-Seidel sweep. On failure returns the axis whose update could not
    /// be represented; the scalings of earlier axes are already applied.
    fn sweep(&mut self, mu: &MarginalFamily, s: Option<Vec<f64>>) -> std::result::Result<Vec<f64>, usize> {
        let nd = self.layout.shape.len();
        let s = s.unwrap_or_else(|| self.row_sums());
        for axis in 0..nd - 1 {
            let r = self.reduced_marginal(&s, axis);
            self.update(axis, &r, mu.get(axis))?;
        }
        let r_last = self.last_marginal();
        self.update(nd - 1, &r_last, mu.get(nd - 1))?;
        Ok(r_last)
    }

    /// Axis marginals of the current plan after a sweep that produced `r_last`,
    /// and the row sums for the next sweep.
    fn marginals(&self, r_last: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let nd = self.layout.shape.len();
        let s = self.row_sums();
        let mut marg: Vec<Vec<f64>> = (0..nd - 1)
            .map(|axis| {
                let r = self.reduced_marginal(&s, axis);
                r.iter().zip(&self.u[axis]).map(|(a, b)| a * b).collect()
            })
            .collect();
        marg.push(r_last.iter().zip(&self.u[nd - 1]).map(|(a, b)| a * b).collect());
        (marg, s)
    }

    /// `s[row] = sum_l k[row, l] u_last[l]`.
    fn row_sums(&self) -> Vec<f64> {
        let last = self.layout.last;
        let ul = self.u.last().expect("at least two axes");
        let k = &self.k;
        self.layout
            .map_chunks(|range| {
                range
                    .map(|row| {
                        k[row * last..(row + 1) * last]
                            .iter()
                            .zip(ul)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                    })
                    .collect::<Vec<f64>>()
            })
            .concat()
    }

    /// Marginal of `s ⊙ (u_1 ⊗ ... ⊗ u_{N-1})` on `axis`, leaving out `u_axis`.
    fn reduced_marginal(&self, s: &[f64], axis: usize) -> Vec<f64> {
        let prefix = self.layout.prefix_shape();
        let mut out = vec![0.0; prefix[axis]];
        let mut idx = vec![0; prefix.len()];
        for &sv in s {
            let mut w = sv;
            for (j, &i) in idx.iter().enumerate() {
                if j != axis {
                    w *= self.u[j][i];
                }
            }
            out[idx[axis]] += w;
            increment(&mut idx, prefix);
        }
        out
    }

    /// Marginal on the last axis, leaving out `u_last`.
    fn last_marginal(&self) -> Vec<f64> {
        let layout = self.layout;
        let last = layout.last;
        let prefix = layout.prefix_shape();
        let partials = layout.map_chunks(|range| {
            let mut acc = vec![0.0; last];
            let mut idx = layout.prefix_index(range.start);
            for row in range {
                let w: f64 = idx.iter().enumerate().map(|(j, &i)| self.u[j][i]).product();
                if w != 0.0 {
                    for (a, &v) in acc.iter_mut().zip(&self.k[row * last..(row + 1) * last]) {
                        *a += w * v;
                    }
                }
                increment(&mut idx, prefix);
            }
            acc
        });
        let mut acc = vec![0.0; last];
        for p in partials {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        acc
    }

    /// Sets `u_axis = mu_axis / r`, leaving `u_axis` untouched if a live atom
    /// would receive no or infinite scaling.
    fn update(&mut self, axis: usize, r: &[f64], mu: &[f64]) -> std::result::Result<(), usize> {
        let mut next = self.u[axis].clone();
        for ((x, &ri), (&w, &l)) in next.iter_mut().zip(r).zip(mu.iter().zip(&self.live[axis])) {
            if l {
                *x = w / ri;
                if !(x.is_finite() && *x > 0.0) {
                    return Err(axis);
                }
            }
        }
        self.u[axis] = next;
        Ok(())
    }

    fn potentials(&self) -> Vec<Vec<f64>> {
        self.g_abs
            .iter()
            .zip(&self.u)
            .zip(self.live)
            .map(|((ga, u), live)| {
                ga.iter()
                    .zip(u)
                    .zip(live)
                    .map(|((&g, &x), &l)| if l { g + x.ln() } else { DEAD_POTENTIAL })
                    .collect()
            })
            .collect()
    }

    fn needs_absorb(&self) -> bool {
        self.u
            .iter()
            .zip(self.live)
            .flat_map(|(u, live)| u.iter().zip(live))
            .any(|(&x, &l)| l && x.ln().abs() > ABSORB_THRESHOLD)
    }
}

/// Values of `f(prefix multi-index)` for every last-axis fibre.
fn prefix_values(layout: &Layout, f: impl Fn(&[usize]) -> f64) -> Vec<f64> {
    let prefix = layout.prefix_shape();
    let mut idx = vec![0; prefix.len()];
    (0..layout.rows)
        .map(|_| {
            let v = f(&idx);
            increment(&mut idx, prefix);
            v
        })
        .collect()
}

fn residual(marg: &[Vec<f64>], mu: &MarginalFamily) -> f64 {
    marg.iter()
        .zip(mu.as_slice())
        .flat_map(|(p, m)| p.iter().zip(m))
        .filter(|(_, &w)| w > 0.0)
        .map(|(p, w)| (p - w).abs())
        .fold(0.0, f64::max)
}

/// How the tensor is cut into last-axis fibres ("rows") and chunks of rows.
pub(crate) struct Layout {
    shape: Vec<usize>,
    last: usize,
    rows: usize,
    chunk_rows: usize,
}

impl Layout {
    fn new(shape: &[usize]) -> Self {
        let last = shape.last().copied().unwrap_or(1);
        let rows = shape.iter().product::<usize>() / last;
        let chunk_rows = (CHUNK_ELEMS / last).max(1);
        Self {
            shape: shape.to_vec(),
            last,
            rows,
            chunk_rows,
        }
    }

    fn prefix_shape(&self) -> &[usize] {
        &self.shape[..self.shape.len().saturating_sub(1)]
    }

    fn chunks(&self) -> usize {
        self.rows.div_ceil(self.chunk_rows)
    }

    fn chunk_range(&self, c: usize) -> std::ops::Range<usize> {
        c * self.chunk_rows..((c + 1) * self.chunk_rows).min(self.rows)
    }

    /// Multi-index over all axes but the last for fibre `row`.
    fn prefix_index(&self, row: usize) -> Vec<usize> {
        let prefix = self.prefix_shape();
        let mut idx = vec![0; prefix.len()];
        let mut r = row;
        for n in (0..prefix.len()).rev() {
            idx[n] = r % prefix[n];
            r /= prefix[n];
        }
        idx
    }

    /// Maps `f` over chunks, in parallel when there is more than one, keeping chunk order.
    fn map_chunks<T: Send>(&self, f: impl Fn(std::ops::Range<usize>) -> T + Sync) -> Vec<T> {
        let n = self.chunks();
        if n == 1 {
            vec![f(self.chunk_range(0))]
        } else {
            (0..n).into_par_iter().map(|c| f(self.chunk_range(c))).collect()
        }
    }
}

/// Fills `buf` with `log K + sum_{j != skip} g_j` for the rows in `range`.
/// Returns, per row, the prefix multi-index value on axis `bin_axis` (0 if none).
fn fill_chunk<K: LogKernel>(
    kernel: &K,
    layout: &Layout,
    g: &[Vec<f64>],
    skip: Option<usize>,
    range: std::ops::Range<usize>,
    buf: &mut [f64],
    bins: &mut Vec<usize>,
) {
    let nd = layout.shape.len();
    let last = layout.last;
    let prefix_shape = layout.prefix_shape();
    let mut idx = layout.prefix_index(range.start);
    bins.clear();
    for (r, row) in range.enumerate() {
        let out = &mut buf[r * last..(r + 1) * last];
        kernel.fill_row(row, out);
        let p: f64 = idx
            .iter()
            .enumerate()
            .filter(|&(j, _)| Some(j) != skip)
            .map(|(j, &i)| g[j][i])
            .sum();
        if nd == 0 || skip == Some(nd - 1) {
            for v in out.iter_mut() {
                *v += p;
            }
        } else {
            for (v, &gl) in out.iter_mut().zip(&g[nd - 1]) {
                *v += p + gl;
            }
        }
        bins.push(match skip {
            Some(a) if a + 1 < nd => idx[a],
            _ => 0,
        });
        increment(&mut idx, prefix_shape);
    }
}

/// `lse[i] = log sum_{i_-axis} exp(log K + sum_{j != axis} g_j)` for every `i` on `axis`.
fn axis_logsumexp<K: LogKernel>(
    kernel: &K,
    layout: &Layout,
    g: &[Vec<f64>],
    axis: usize,
) -> Vec<f64> {
    let nd = layout.shape.len();
    let extent = layout.shape[axis];
    let last = layout.last;
    let partials = layout.map_chunks(|range| {
        let nrows = range.len();
        let mut buf = vec![0.0; nrows * last];
        let mut bins = Vec::with_capacity(nrows);
        fill_chunk(kernel, layout, g, Some(axis), range, &mut buf, &mut bins);
        let mut mx = vec![f64::NEG_INFINITY; extent];
        let mut sm = vec![0.0; extent];
        if axis + 1 == nd {
            for row in buf.chunks_exact(last) {
                for (m, &v) in mx.iter_mut().zip(row) {
                    *m = m.max(v);
                }
            }
            for row in buf.chunks_exact(last) {
                for ((s, &m), &v) in sm.iter_mut().zip(&mx).zip(row) {
                    *s += (v - m).exp();
                }
            }
        } else {
            for (row, &b) in buf.chunks_exact(last).zip(&bins) {
                mx[b] = row.iter().copied().fold(mx[b], f64::max);
            }
            for (row, &b) in buf.chunks_exact(last).zip(&bins) {
                let m = mx[b];
                sm[b] += row.iter().map(|&v| (v - m).exp()).sum::<f64>();
            }
        }
        (mx, sm)
    });
    let mut mx = vec![f64::NEG_INFINITY; extent];
    let mut sm = vec![0.0; extent];
    for (pm, ps) in partials {
        for i in 0..extent {
            if ps[i] == 0.0 {
                continue;
            }
            if pm[i] > mx[i] {
                sm[i] = sm[i] * (mx[i] - pm[i]).exp() + ps[i];
                mx[i] = pm[i];
            } else {
                sm[i] += ps[i] * (pm[i] - mx[i]).exp();
            }
        }
    }
    mx.iter().zip(&sm).map(|(&m, &s)| m + s.ln()).collect()
}

/// All axis marginals of the current plan, and its total mass.
fn marginals<K: LogKernel>(kernel: &K, layout: &Layout, g: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let nd = layout.shape.len();
    let last = layout.last;
    let partials = layout.map_chunks(|range| {
        let nrows = range.len();
        let start = range.start;
        let mut buf = vec![0.0; nrows * last];
        let mut bins = Vec::new();
        fill_chunk(kernel, layout, g, None, range, &mut buf, &mut bins);
        let mut marg: Vec<Vec<f64>> = layout.shape.iter().map(|&a| vec![0.0; a]).collect();
        let mut mass = 0.0;
        let mut idx = layout.prefix_index(start);
        for row in buf.chunks_exact(last) {
            let mut row_sum = 0.0;
            for (t, &v) in row.iter().enumerate() {
                let e = v.exp();
                row_sum += e;
                if nd > 0 {
                    marg[nd - 1][t] += e;
                }
            }
            for (j, &i) in idx.iter().enumerate() {
                marg[j][i] += row_sum;
            }
            mass += row_sum;
            increment(&mut idx, layout.prefix_shape());
        }
        (marg, mass)
    });
    let mut marg: Vec<Vec<f64>> = layout.shape.iter().map(|&a| vec![0.0; a]).collect();
    let mut mass = 0.0;
    for (pm, ps) in partials {
        for (acc, part) in marg.iter_mut().zip(&pm) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
        mass += ps;
    }
    (marg, mass)
}

fn materialize<K: LogKernel>(kernel: &K, layout: &Layout, g: &[Vec<f64>]) -> Vec<f64> {
    let total = layout.rows * layout.last;
    let mut out = vec![0.0; total];
    let chunk_len = layout.chunk_rows * layout.last;
    let work = |(c, chunk): (usize, &mut [f64])| {
        let start = c * layout.chunk_rows;
        let range = start..start + chunk.len() / layout.last;
        let mut bins = Vec::new();
        fill_chunk(kernel, layout, g, None, range, chunk, &mut bins);
        for v in chunk.iter_mut() {
            *v = v.exp();
        }
    };
    if total <= chunk_len {
        work((0, &mut out[..]));
    } else {
        out.par_chunks_mut(chunk_len).enumerate().for_each(work);
    }
    out
}
