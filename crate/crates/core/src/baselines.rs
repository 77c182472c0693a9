//! Cost builders and the entropic COOT / Gromov-Wasserstein baselines.
//!
//! All 4-D costs here have the form `C[i, j, k, l] = (X[i, k] - Y[j, l])^2`.
//! Collapsing such a cost against one coupling never needs the 4-D tensor:
//!
//! ```text
//! sum_{k,l} C[i,j,k,l] Q[k,l] = sum_k X[i,k]^2 (Q 1)_k + sum_l Y[j,l]^2 (Q^T 1)_l - 2 (X Q Y^T)[i,j]
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::sinkhorn::{self, DualPotentials, ScaledCost, SinkhornConfig};
use crate::tensor::{neg_entropy, DenseTensor, MarginalFamily, ProbabilityTensor};

/// Two data matrices `X` (m×p) and `Y` (n×q) defining the squared-difference cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSpec {
    pub x: DenseTensor,
    pub y: DenseTensor,
}

impl CostSpec {
    pub fn new(x: DenseTensor, y: DenseTensor) -> Result<Self> {
        if x.ndim() != 2 || y.ndim() != 2 {
            return config(format!(
                "cost spec needs two matrices, got shapes {:?} and {:?}",
                x.shape(),
                y.shape()
            ));
        }
        Ok(Self { x, y })
    }

    /// `(m, n, p, q)`.
    pub fn dims(&self) -> [usize; 4] {
        let (xs, ys) = (self.x.shape(), self.y.shape());
        [xs[0], ys[0], xs[1], ys[1]]
    }
}

/// A sample coupling `p` (m×n) and a feature coupling `q` (p×q).
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPair {
    pub p: DenseTensor,
    pub q: DenseTensor,
}

/// `C[i, j, k, l] = (X[i, k] - Y[j, l])^2`, shape m×n×p×q.
pub fn build_cost_4d(spec: &CostSpec) -> DenseTensor {
    let [m, n, p, q] = spec.dims();
    let (x, y) = (spec.x.data(), spec.y.data());
    let mut data = Vec::with_capacity(m * n * p * q);
    for i in 0..m {
        for j in 0..n {
            for k in 0..p {
                let a = x[i * p + k];
                data.extend(y[j * q..(j + 1) * q].iter().map(|&b| (a - b) * (a - b)));
            }
        }
    }
    DenseTensor::from_parts(vec![m, n, p, q], data)
}

/// Squared Euclidean distance matrix between the rows of `x`.
pub fn sq_euclidean_distances(x: &DenseTensor) -> Result<DenseTensor> {
    let [rows, cols] = x.shape()[..] else {
        return config(format!("expected a matrix, got shape {:?}", x.shape()));
    };
    let d = x.data();
    let mut out = vec![0.0; rows * rows];
    for i in 0..rows {
        for k in 0..rows {
            out[i * rows + k] = (0..cols)
                .map(|c| {
                    let t = d[i * cols + c] - d[k * cols + c];
                    t * t
                })
                .sum();
        }
    }
    DenseTensor::new(vec![rows, rows], out)
}

/// `<C, P ⊗ Q>` for a dense 4-D cost, contracting `Q` first so `P ⊗ Q` is never formed.
pub fn coot_loss(cost: &DenseTensor, pair: &CouplingPair) -> Result<f64> {
    let [m, n, p, q] = cost.shape()[..] else {
        return config(format!("coot_loss needs a 4-D cost, got shape {:?}", cost.shape()));
    };
    if pair.p.shape() != [m, n] || pair.q.shape() != [p, q] {
        return config(format!(
            "couplings of shapes {:?} and {:?} do not match cost shape {:?}",
            pair.p.shape(),
            pair.q.shape(),
            cost.shape()
        ));
    }
    let block = p * q;
    let qd = pair.q.data();
    Ok(pair
        .p
        .data()
        .iter()
        .enumerate()
        .map(|(ij, &w)| {
            let c = &cost.data()[ij * block..(ij + 1) * block];
            w * c.iter().zip(qd).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum())
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for t in 0..k {
            let v = a[i * k + t];
            for (o, &bv) in row.iter_mut().zip(&b[t * m..(t + 1) * m]) {
                *o += v * bv;
            }
        }
    }
    out
}

fn row_sums(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows).map(|i| a[i * cols..(i + 1) * cols].iter().sum()).collect()
}

fn col_sums(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for (o, &v) in out.iter_mut().zip(&a[i * cols..(i + 1) * cols]) {
            *o += v;
        }
    }
    out
}

/// `M(Q)[i, j] = sum_{k,l} (X[i,k] - Y[j,l])^2 Q[k,l]`, the cost seen by the sample coupling.
pub fn collapse_features(spec: &CostSpec, q_coupling: &DenseTensor) -> Result<DenseTensor> {
    let [m, n, p, q] = spec.dims();
    if q_coupling.shape() != [p, q] {
        return config(format!(
            "feature coupling has shape {:?}, expected [{p}, {q}]",
            q_coupling.shape()
        ));
    }
    let (x, y, qc) = (spec.x.data(), spec.y.data(), q_coupling.data());
    let q1 = row_sums(qc, p, q);
    let q2 = col_sums(qc, p, q);
    let xq = matmul(x, qc, m, p, q); // m×q
    let yt = spec.y.transpose()?; // q×n
    let xqyt = matmul(&xq, yt.data(), m, q, n); // m×n
    let ax: Vec<f64> = (0..m)
        .map(|i| (0..p).map(|k| x[i * p + k] * x[i * p + k] * q1[k]).sum())
        .collect();
    let by: Vec<f64> = (0..n)
        .map(|j| (0..q).map(|l| y[j * q + l] * y[j * q + l] * q2[l]).sum())
        .collect();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = ax[i] + by[j] - 2.0 * xqyt[i * n + j];
        }
    }
    DenseTensor::new(vec![m, n], out)
}

/// `M(P)[k, l] = sum_{i,j} (X[i,k] - Y[j,l])^2 P[i,j]`, the cost seen by the feature coupling.
pub fn collapse_samples(spec: &CostSpec, p_coupling: &DenseTensor) -> Result<DenseTensor> {
    let transposed = CostSpec {
        x: spec.x.transpose()?,
        y: spec.y.transpose()?,
    };
    collapse_features(&transposed, p_coupling)
}

/// `<C, P ⊗ Q>` from the data matrices, in `O(mpq + mnq)`.
pub fn coot_loss_structured(spec: &CostSpec, pair: &CouplingPair) -> Result<f64> {
    collapse_features(spec, &pair.q)?.dot(&pair.p)
}

/// Settings shared by the two alternating baselines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlternatingConfig {
    pub max_sweeps: usize,
    /// Stop once the relative change of the loss falls below this.
    pub tol: f64,
    /// Inner 2-marginal Sinkhorn settings; `epsilon` is set per block.
    pub inner: SinkhornConfig,
}

impl Default for AlternatingConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 1000,
            tol: 1e-9,
            inner: SinkhornConfig {
                epsilon: 1.0,
                max_iters: 10_000,
                tol: 1e-9,
                check_every: 10,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct BcdResult {
    pub pair: CouplingPair,
    /// `<C, P ⊗ Q>` at the start and after every sweep.
    pub loss_trace: Vec<f64>,
    /// `<C, P ⊗ Q> + eps_p H(P) + eps_q H(Q)`, the objective each block step minimises.
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub inner_converged: bool,
}

impl BcdResult {
    pub fn loss(&self) -> f64 {
        *self.loss_trace.last().expect("nonempty trace")
    }
}

fn two_marginal(a: &[f64], b: &[f64]) -> Result<MarginalFamily> {
    MarginalFamily::new(vec![a.to_vec(), b.to_vec()])
}

fn relative_change(prev: f64, next: f64) -> f64 {
    (next - prev).abs() / prev.abs().max(f64::MIN_POSITIVE)
}

/// Block coordinate descent for entropic COOT: alternately solves the 2-marginal
/// entropic problem for the sample coupling (features fixed) and for the feature
/// coupling (samples fixed). `mu` holds `(mu_1, mu_2, mu_3, mu_4)` for the axes of
/// `build_cost_4d(spec)`. `init` defaults to the product couplings.
pub fn coot_bcd(
    spec: &CostSpec,
    mu: &MarginalFamily,
    eps_p: f64,
    eps_q: f64,
    cfg: &AlternatingConfig,
    init: Option<&CouplingPair>,
) -> Result<BcdResult> {
    if !(eps_p > 0.0 && eps_q > 0.0) {
        return config(format!(
            "BCD regularisation must be positive, got ({eps_p}, {eps_q})"
        ));
    }
    let dims = spec.dims();
    mu.check_shape(&dims)?;
    let mu_p = two_marginal(mu.get(0), mu.get(1))?;
    let mu_q = two_marginal(mu.get(2), mu.get(3))?;
    let mut pair = match init {
        Some(pair) => pair.clone(),
        None => CouplingPair {
            p: mu_p.product().into_inner(),
            q: mu_q.product().into_inner(),
        },
    };
    let cfg_p = cfg.inner.with_epsilon(eps_p);
    let cfg_q = cfg.inner.with_epsilon(eps_q);
    cfg_p.validate()?;
    cfg_q.validate()?;

    let objective = |pair: &CouplingPair, loss: f64| -> Result<f64> {
        Ok(loss + eps_p * neg_entropy(&pair.p)? + eps_q * neg_entropy(&pair.q)?)
    };
    let mut loss = coot_loss_structured(spec, &pair)?;
    let mut loss_trace = vec![loss];
    let mut objective_trace = vec![objective(&pair, loss)?];
    let mut duals_p: Option<DualPotentials> = None;
    let mut duals_q: Option<DualPotentials> = None;
    let mut inner_converged = true;
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        let cost_p = collapse_features(spec, &pair.q)?;
        let res = sinkhorn::solve(&ScaledCost::new(&cost_p, eps_p), &mu_p, &cfg_p, duals_p.as_ref())?;
        inner_converged &= res.converged;
        pair.p = res.plan.into_inner();
        duals_p = Some(res.duals);

        let cost_q = collapse_samples(spec, &pair.p)?;
        let res = sinkhorn::solve(&ScaledCost::new(&cost_q, eps_q), &mu_q, &cfg_q, duals_q.as_ref())?;
        inner_converged &= res.converged;
        pair.q = res.plan.into_inner();
        duals_q = Some(res.duals);
        sweeps += 1;

        let next = cost_q.dot(&pair.q)?;
        loss_trace.push(next);
        objective_trace.push(objective(&pair, next)?);
        let change = relative_change(loss, next);
        loss = next;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(BcdResult {
        pair,
        loss_trace,
        objective_trace,
        sweeps,
        converged,
        inner_converged,
    })
}

#[derive(Clone, Debug)]
pub struct GwResult {
    pub coupling: ProbabilityTensor,
    /// `<L, P ⊗ P>` at the start and after every sweep.
    pub loss_trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub inner_converged: bool,
}

impl GwResult {
    pub fn loss(&self) -> f64 {
        *self.loss_trace.last().expect("nonempty trace")
    }
}

/// Entropic Gromov-Wasserstein by projected gradient: `P <- Sinkhorn(mu_x, mu_y, M(P), eps)`
/// with `M(P)[i, j] = sum_{k,l} (Cx[i,k] - Cy[j,l])^2 P[k, l]`. Starts from `mu_x ⊗ mu_y`
/// unless `init` is given.
pub fn egw_pg(
    cx: &DenseTensor,
    cy: &DenseTensor,
    mu_x: &[f64],
    mu_y: &[f64],
    eps: f64,
    cfg: &AlternatingConfig,
    init: Option<&ProbabilityTensor>,
) -> Result<GwResult> {
    let (m, n) = (mu_x.len(), mu_y.len());
    if cx.shape() != [m, m] || cy.shape() != [n, n] {
        return config(format!(
            "similarity matrices {:?} and {:?} do not match marginals of lengths {m} and {n}",
            cx.shape(),
            cy.shape()
        ));
    }
    let spec = CostSpec::new(cx.clone(), cy.clone())?;
    let mu = two_marginal(mu_x, mu_y)?;
    let inner = cfg.inner.with_epsilon(eps);
    inner.validate()?;
    let mut coupling = match init {
        Some(p) => p.clone(),
        None => mu.product(),
    };
    let mut cost = collapse_features(&spec, &coupling)?;
    let mut loss = cost.dot(&coupling)?;
    let mut loss_trace = vec![loss];
    let mut duals: Option<DualPotentials> = None;
    let mut inner_converged = true;
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        let res = sinkhorn::solve(&ScaledCost::new(&cost, eps), &mu, &inner, duals.as_ref())?;
        inner_converged &= res.converged;
        coupling = res.plan;
        duals = Some(res.duals);
        sweeps += 1;
        cost = collapse_features(&spec, &coupling)?;
        let next = cost.dot(&coupling)?;
        loss_trace.push(next);
        let change = relative_change(loss, next);
        loss = next;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(GwResult {
        coupling,
        loss_trace,
        sweeps,
        converged,
        inner_converged,
    })
}
