//! Acceptance checks for the solvers and the three studies.
//!
//! Runs as a plain binary (no libtest harness) so that every criterion prints
//! exactly one PASS/FAIL line whether or not output capture is on. The process
//! exits nonzero if any criterion fails. Every reference value below is
//! computed here with naive loops, or is a published target.

use std::fmt::Display;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmot_core::dc::{concave_gradient, dc_solve, mmotdc_objective, DcConfig, DcReport, GradientMode};
use mmot_core::experiments::{
    planted_instance, run_gw_quality_study, run_permutation_study, run_v1_comparison,
    write_gw_study, write_permutation_study, ExperimentConfig, GwStudy, PermutationStudy,
    labels,
};
use mmot_core::sinkhorn::{sinkhorn_mmot, SinkhornConfig};
use mmot_core::tensor::{
    factored_projection, kl_divergence, marginalize, matricize, vectorize, DenseTensor,
    MarginalFamily, ProbabilityTensor, TuplePartition,
};

// ---------------------------------------------------------------------------
// tolerances and targets

const PERM_LOSS_MAX: f64 = 1e-2;
const CROSS_DEVIATION_MAX: f64 = 5e-4;
/// Mean COOT losses over trials, published for EGW-PG, EGW-BCD, GW-BCD and MMOT-DC.
const TABLE_TARGETS: [(&str, f64); 4] = [
    (labels::EGW_PG, 0.079),
    (labels::EGW_BCD, 0.080),
    (labels::GW_BCD, 0.083),
    (labels::MMOT_DC, 0.082),
];
const TABLE_BAND: f64 = 0.015;
const V1_GAP_MAX: f64 = 0.005;
const LOSS_FLOOR: f64 = -1e-12;
const KL_IDENTITY_TOL: f64 = 1e-10;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;
const DESCENT_SLACK: f64 = 1e-9;
const DUAL_ASCENT_SLACK: f64 = 1e-12;
const SMALL_EPS: f64 = 1e-3;
const SMALL_EPS_REL: f64 = 0.02;
const GRID_STEP: f64 = 1e-2;
const SYMMETRY_TOL: f64 = 1e-4;

struct Outcome {
    failed: Vec<String>,
}

impl Outcome {
    fn record(&mut self, id: &str, pass: bool, detail: impl Display) {
        println!("{} criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

// ---------------------------------------------------------------------------
// naive oracles

fn multi_index(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = flat % shape[a];
        flat /= shape[a];
    }
    idx
}

/// Sum of `t` over every axis not in `axes`, row-major over the kept axes.
fn naive_marginal(t: &DenseTensor, axes: &[usize]) -> Vec<f64> {
    let shape = t.shape();
    let kept: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; kept.iter().product()];
    for (flat, &v) in t.data().iter().enumerate() {
        let idx = multi_index(flat, shape);
        let mut pos = 0;
        for (&a, &n) in axes.iter().zip(&kept) {
            pos = pos * n + idx[a];
        }
        out[pos] += v;
    }
    out
}

fn plogp(values: &[f64]) -> f64 {
    values.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry of each row; ties go to the lowest index.
fn argmax_rows(m: &[f64], cols: usize) -> Vec<usize> {
    m.chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn blocks_of(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let b: Vec<usize> = (start..start + s).collect();
            start += s;
            b
        })
        .collect()
}

/// `sum_m H(P_{#m})` for the blocks given by `sizes`.
fn block_entropy(t: &DenseTensor, sizes: &[usize]) -> f64 {
    blocks_of(sizes).iter().map(|b| plogp(&naive_marginal(t, b))).sum()
}

/// `<C, mu_1 ⊗ ... ⊗ mu_N>`.
fn cost_against_product(cost: &DenseTensor, mu: &[Vec<f64>]) -> f64 {
    cost.data()
        .iter()
        .enumerate()
        .map(|(flat, &c)| {
            let idx = multi_index(flat, cost.shape());
            c * idx.iter().enumerate().map(|(n, &i)| mu[n][i]).product::<f64>()
        })
        .sum()
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn random_composition(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut left = n;
    while left > 0 {
        let s = rng.gen_range(1..=left);
        sizes.push(s);
        left -= s;
    }
    sizes
}

fn sq_dist(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|a| points.iter().map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// criteria 1 and 2

fn permutation_criteria(out: &mut Outcome, ascents: &mut Vec<f64>) -> PermutationStudy {
    let cfg = ExperimentConfig::default();
    let (rows, cols) = (cfg.permutation.rows, cfg.permutation.cols);
    let clock = Instant::now();
    let study = run_permutation_study(&cfg).expect("permutation study runs");
    let secs = clock.elapsed().as_secs_f64();

    let inst = planted_instance(cfg.master_seed, 0, rows, cols);
    let planted_ok = (0..rows * cols).all(|f| {
        let (j, l) = (f / cols, f % cols);
        inst.y.get(&[j, l]) == inst.x.get(&[inst.sigma[j], inst.tau[l]])
    });

    let uniform = 1.0 / (rows * cols) as f64;
    let mut first_hit: Option<(f64, f64)> = None;
    let mut consistent = planted_ok;
    let mut lines = Vec::new();
    for run in &study.runs {
        ascents.push(run.row.max_ascent);
        let p01 = naive_marginal(&run.plan, &[0, 1]);
        let p23 = naive_marginal(&run.plan, &[2, 3]);
        let acc = |m: &[f64], n: usize, perm: &[usize]| {
            let am = argmax_rows(m, n);
            am.iter().enumerate().filter(|&(i, &j)| perm[j] == i).count() as f64 / n as f64
        };
        let row_acc = acc(&p01, rows, &inst.sigma);
        let col_acc = acc(&p23, cols, &inst.tau);
        let mut loss = 0.0;
        for i in 0..rows {
            for j in 0..rows {
                for k in 0..cols {
                    for l in 0..cols {
                        let d = inst.x.get(&[i, k]) - inst.y.get(&[j, l]);
                        loss += d * d * p01[i * rows + j] * p23[k * cols + l];
                    }
                }
            }
        }
        let cross = [[0, 2], [0, 3], [1, 2], [1, 3]]
            .iter()
            .flat_map(|ax| naive_marginal(&run.plan, ax))
            .fold(0.0f64, |m, v| m.max((v - uniform).abs()));
        consistent &= run.row.row_accuracy == row_acc
            && run.row.col_accuracy == col_acc
            && (run.row.coot_loss - loss).abs() <= 1e-12 + 1e-9 * loss
            && (run.row.max_cross_deviation - cross).abs() <= 1e-15;
        lines.push(format!(
            "eps {} acc {:.3}/{:.3} loss {:.2e} cross {:.1e}",
            run.row.epsilon, row_acc, col_acc, loss, cross
        ));
        if first_hit.is_none() && row_acc == 1.0 && col_acc == 1.0 && loss > 0.0 && loss <= PERM_LOSS_MAX {
            first_hit = Some((run.row.epsilon, cross));
        }
    }
    out.record(
        "1 (permutation recovery)",
        first_hit.is_some() && consistent,
        format!(
            "{}; recovering eps {:?}; reports match oracle {consistent}; {secs:.1}s wall",
            lines.join(", "),
            first_hit.map(|h| h.0)
        ),
    );
    match first_hit {
        Some((eps, cross)) => out.record(
            "2 (cross-marginal uniformity)",
            cross <= CROSS_DEVIATION_MAX,
            format!("eps {eps}: max |P_(a,b) - 1/{}| = {cross:.3e} (limit {CROSS_DEVIATION_MAX:e})", rows * cols),
        ),
        None => out.record("2 (cross-marginal uniformity)", false, "no recovering run to inspect"),
    }
    study
}

// ---------------------------------------------------------------------------
// criteria 3 and 4

fn grid_is_honest(study: &GwStudy) -> bool {
    study.records.iter().filter(|r| r.error.is_none()).all(|r| {
        [labels::EGW_PG, labels::EGW_BCD, labels::MMOT_DC, labels::MMOT_DC_V1]
            .iter()
            .all(|&label| {
                let min = study
                    .grid
                    .iter()
                    .filter(|p| p.trial == r.trial && p.solver == label)
                    .map(|p| p.loss)
                    .fold(f64::INFINITY, f64::min);
                match r.get(label) {
                    Some(b) => b.loss == min,
                    None => min == f64::INFINITY,
                }
            })
    })
}

fn table_criteria(out: &mut Outcome, ascents: &mut Vec<f64>) {
    let mut cfg = ExperimentConfig::default();
    cfg.solvers.mmot_dc_v1 = true;
    let clock = Instant::now();
    let study = run_gw_quality_study(&cfg).expect("gw study runs");
    let secs = clock.elapsed().as_secs_f64();
    ascents.extend(
        study
            .grid
            .iter()
            .filter(|p| p.solver == labels::MMOT_DC)
            .filter_map(|p| p.max_ascent),
    );
    let v1_ascent = study
        .grid
        .iter()
        .filter(|p| p.solver == labels::MMOT_DC_V1)
        .filter_map(|p| p.max_ascent)
        .fold(0.0f64, f64::max);

    let mean = |l: &str| study.stats(l).mean.unwrap_or(f64::NAN);
    let mut pass = study.excluded() == 0 && study.records.len() == cfg.trials;
    let mut parts = Vec::new();
    for (label, target) in TABLE_TARGETS {
        let s = study.stats(label);
        let m = s.mean.unwrap_or(f64::NAN);
        let ok = (m - target).abs() <= TABLE_BAND;
        pass &= ok;
        parts.push(format!(
            "{label} {m:.4} ± {:.4} (target {target}{})",
            s.std.unwrap_or(f64::NAN),
            if ok { "" } else { ", OUT OF BAND" }
        ));
    }
    let ordered = mean(labels::EGW_PG) <= mean(labels::MMOT_DC);
    let nonneg = study.grid.iter().all(|p| p.loss >= LOSS_FLOOR);
    let honest = grid_is_honest(&study);
    pass &= ordered && nonneg && honest;
    out.record(
        "3 (GW-quality table)",
        pass,
        format!(
            "{} trials, {} excluded; {}; EGW-PG <= MMOT-DC {ordered}; losses >= 0 {nonneg}; best = grid min {honest}; {secs:.0}s wall",
            study.records.len(),
            study.excluded(),
            parts.join(", ")
        ),
    );

    let gap = (mean(labels::MMOT_DC) - mean(labels::MMOT_DC_V1)).abs();
    out.record(
        "4 (v1 comparison)",
        gap <= V1_GAP_MAX,
        format!(
            "MMOT-DC {:.4} vs MMOT-DC-v1 {:.4}, gap {gap:.4} (limit {V1_GAP_MAX}); v1 max ascent {v1_ascent:.1e}",
            mean(labels::MMOT_DC),
            mean(labels::MMOT_DC_V1)
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 5

fn kl_identity(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..=4);
        let shape: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
        let len: usize = shape.iter().product();
        let mut w: Vec<f64> = (0..len)
            .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen::<f64>() })
            .collect();
        if w.iter().all(|&v| v == 0.0) {
            w[0] = 1.0;
        }
        let s: f64 = w.iter().sum();
        let t = DenseTensor::new(shape.clone(), w.iter().map(|v| v / s).collect()).unwrap();
        let sizes = random_composition(rng, n);
        let partition = TuplePartition::from_sizes(&sizes).unwrap();
        let p = ProbabilityTensor::new(t.clone()).unwrap();
        let lhs = kl_divergence(&t, &factored_projection(&p, &partition).unwrap()).unwrap();
        let rhs = plogp(t.data()) - block_entropy(&t, &sizes);
        worst = worst.max((lhs - rhs).abs());
    }
    (worst <= KL_IDENTITY_TOL, format!("KL identity worst {worst:.1e}"))
}

fn gradient_fd(rng: &mut ChaCha8Rng) -> (bool, String) {
    let choices: [&[usize]; 5] = [&[2, 2], &[1, 3], &[3, 1], &[1, 1, 2], &[1, 1, 1, 1]];
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let sizes = choices[rng.gen_range(0..choices.len())];
        let w: Vec<f64> = (0..16).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        let t = DenseTensor::new(vec![2; 4], w.iter().map(|v| v / s).collect()).unwrap();
        let g = concave_gradient(&t, &TuplePartition::from_sizes(sizes).unwrap(), GradientMode::Corrected).unwrap();
        for e in 0..16 {
            let bumped = |h: f64| {
                let mut d = t.data().to_vec();
                d[e] += h;
                block_entropy(&DenseTensor::new(vec![2; 4], d).unwrap(), sizes)
            };
            let fd = (bumped(FD_STEP) - bumped(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max((fd - g.data()[e]).abs());
        }
    }
    (worst <= FD_TOL, format!("gradient vs finite differences worst {worst:.1e}"))
}

fn sinkhorn_suite(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut ok = true;
    let mut worst_res = 0.0f64;
    let mut worst_drop = 0.0f64;
    for case in 0..50 {
        let n = 2 + case % 3;
        let shape: Vec<usize> = (0..n).map(|_| rng.gen_range(2..=5)).collect();
        let len: usize = shape.iter().product();
        let cost = DenseTensor::new(shape.clone(), (0..len).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mu: Vec<Vec<f64>> = shape.iter().map(|&a| random_simplex(rng, a)).collect();
        let eps = [0.05, 0.2, 1.0][rng.gen_range(0..3)];
        let cfg = SinkhornConfig {
            epsilon: eps,
            check_every: 1,
            ..SinkhornConfig::default()
        };
        let res = sinkhorn_mmot(&cost, &MarginalFamily::new(mu.clone()).unwrap(), &cfg, None).unwrap();
        let residual = (0..n)
            .flat_map(|a| {
                naive_marginal(&res.plan, &[a])
                    .into_iter()
                    .zip(mu[a].clone())
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0f64, f64::max);
        worst_res = worst_res.max(residual);
        for w in res.dual_trace.windows(2) {
            worst_drop = worst_drop.max((w[0] - w[1]) / w[0].abs().max(1.0));
        }
        ok &= res.converged && residual <= cfg.tol;
    }
    ok &= worst_drop <= DUAL_ASCENT_SLACK;
    (
        ok,
        format!("sinkhorn worst residual {worst_res:.1e}, worst dual decrease {worst_drop:.1e}"),
    )
}

fn dc_run(cost: &DenseTensor, mu: &[Vec<f64>], sizes: &[usize], cfg: &DcConfig, ascents: &mut Vec<f64>) -> DcReport {
    let report = dc_solve(
        cost,
        &MarginalFamily::new(mu.to_vec()).unwrap(),
        &TuplePartition::from_sizes(sizes).unwrap(),
        cfg,
        None,
        None,
    )
    .unwrap();
    ascents.push(report.max_ascent());
    report
}

fn interpolation_bound(rng: &mut ChaCha8Rng, ascents: &mut Vec<f64>) -> (bool, String) {
    let mut ok = true;
    let mut tightest = f64::INFINITY;
    for _ in 0..10 {
        let shape = vec![3, 2, 3, 2];
        let cost = DenseTensor::new(shape.clone(), (0..36).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mu: Vec<Vec<f64>> = shape.iter().map(|&a| random_simplex(rng, a)).collect();
        let bound_num = cost_against_product(&cost, &mu);
        for eps in [1.0, 10.0, 100.0, 1000.0] {
            let report = dc_run(&cost, &mu, &[2, 2], &DcConfig::new(eps), ascents);
            let plan = &report.plan;
            let kl = plogp(plan.data()) - block_entropy(plan, &[2, 2]);
            let bound = bound_num / eps;
            let reported = *report.kl_trace.last().unwrap();
            ok &= kl <= bound && reported <= bound;
            tightest = tightest.min(bound - kl.max(reported));
        }
    }
    (ok, format!("KL <= <C,mu_T>/eps, smallest margin {tightest:.2e}"))
}

/// Minimum of `<C, P>` over the 2×2×2 couplings of `mu`, by grid search on the
/// four free entries `P000, P001, P010, P100`.
fn grid_mmot(cost: &DenseTensor, mu: &[Vec<f64>]) -> f64 {
    let c = |i, j, k| cost.get(&[i, j, k]);
    let steps = (1.0 / GRID_STEP).round() as usize;
    let at = |s: usize| s as f64 * GRID_STEP;
    let (m1, m2, m3) = (mu[0][0], mu[1][0], mu[2][0]);
    let slack = 1e-12;
    let mut best = f64::INFINITY;
    for sa in 0..=steps {
        let a = at(sa);
        for sb in 0..=steps {
            let b = at(sb);
            if a + b > m1.min(m2) + slack {
                break;
            }
            for sc in 0..=steps {
                let cc = at(sc);
                let p011 = m1 - a - b - cc;
                if p011 < -slack {
                    break;
                }
                for sd in 0..=steps {
                    let d = at(sd);
                    let p101 = m2 - a - b - d;
                    let p110 = m3 - a - cc - d;
                    if p101 < -slack || p110 < -slack {
                        break;
                    }
                    let p111 = 1.0 - m1 - m2 - m3 + 2.0 * a + b + cc + d;
                    if p111 < -slack {
                        continue;
                    }
                    let v = a * c(0, 0, 0)
                        + b * c(0, 0, 1)
                        + cc * c(0, 1, 0)
                        + d * c(1, 0, 0)
                        + p011 * c(0, 1, 1)
                        + p101 * c(1, 0, 1)
                        + p110 * c(1, 1, 0)
                        + p111 * c(1, 1, 1);
                    best = best.min(v);
                }
            }
        }
    }
    best
}

fn small_epsilon(rng: &mut ChaCha8Rng, ascents: &mut Vec<f64>) -> (bool, String) {
    let mut ok = true;
    let mut worst_rel = 0.0f64;
    let mut sandwich = true;
    for case in 0..5 {
        let cost = DenseTensor::new(vec![2, 2, 2], (0..8).map(|_| rng.gen::<f64>()).collect()).unwrap();
        // marginals on the 0.02 lattice: vertices of this polytope are half-integral
        // combinations of the marginal entries, so all of them lie on the 0.01 grid
        let mu: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let x = rng.gen_range(10..=40) as f64 * 0.02;
                vec![x, 1.0 - x]
            })
            .collect();
        let opt = grid_mmot(&cost, &mu);
        let sizes: &[usize] = if case % 2 == 0 { &[2, 1] } else { &[1, 2] };
        let cfg = DcConfig {
            inner: SinkhornConfig {
                tol: 1e-10,
                max_iters: 100_000,
                check_every: 1,
                ..SinkhornConfig::default()
            },
            ..DcConfig::new(SMALL_EPS)
        };
        let report = dc_run(&cost, &mu, sizes, &cfg, ascents);
        let linear = dot(cost.data(), report.plan.data());
        let rel = (linear - opt).abs() / opt;
        worst_rel = worst_rel.max(rel);
        let objective = mmotdc_objective(&cost, &report.plan, &TuplePartition::from_sizes(sizes).unwrap(), SMALL_EPS).unwrap();
        sandwich &= linear >= opt - 1e-8 && objective <= cost_against_product(&cost, &mu) + 1e-12;
        ok &= rel <= SMALL_EPS_REL;
    }
    (
        ok && sandwich,
        format!("eps {SMALL_EPS}: worst relative gap to grid MMOT {worst_rel:.1e}; sandwich holds {sandwich}"),
    )
}

fn corollary(rng: &mut ChaCha8Rng, ascents: &mut Vec<f64>) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (m, n) = (4, 5);
        let x: Vec<Vec<f64>> = (0..m).map(|_| (0..2).map(|_| rng.gen::<f64>()).collect()).collect();
        let y: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.gen::<f64>()).collect()).collect();
        let (cx, cy) = (sq_dist(&x), sq_dist(&y));
        let cost = DenseTensor::from_fn(vec![m, n, m, n], |i| {
            let d = cx[i[0]][i[2]] - cy[i[1]][i[3]];
            d * d
        })
        .unwrap();
        let (a, b) = (random_simplex(rng, m), random_simplex(rng, n));
        let mu = vec![a.clone(), b.clone(), a, b];
        let cfg = DcConfig {
            max_outer: 2000,
            outer_tol: 1e-12,
            inner: SinkhornConfig {
                tol: 1e-10,
                check_every: 1,
                ..SinkhornConfig::default()
            },
            ..DcConfig::new(1.0)
        };
        let report = dc_run(&cost, &mu, &[2, 2], &cfg, ascents);
        let p1 = naive_marginal(&report.plan, &[0, 1]);
        let p2 = naive_marginal(&report.plan, &[2, 3]);
        worst = worst.max(p1.iter().zip(&p2).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
    }
    (worst <= SYMMETRY_TOL, format!("max |P_#1 - P_#2| worst {worst:.1e}"))
}

fn lemma(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut ok = true;
    for _ in 0..20 {
        let shape: Vec<usize> = (0..4).map(|_| rng.gen_range(1..=4)).collect();
        let len: usize = shape.iter().product();
        let pi = DenseTensor::new(shape.clone(), (0..len).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let lhs = vectorize(&marginalize(&pi, 0..2).unwrap()).unwrap();
        let a = matricize(&pi).unwrap();
        let cols = shape[2] * shape[3];
        let rhs: Vec<f64> = a
            .data()
            .chunks(cols)
            .map(|row| row.iter().fold(0.0, |acc, v| acc + v))
            .collect();
        ok &= lhs.data().len() == rhs.len()
            && lhs.data().iter().zip(&rhs).all(|(u, v)| u.to_bits() == v.to_bits());
    }
    (ok, format!("vec(sum_kl pi) == mat(pi) 1 bit-exact {ok}"))
}

fn property_criteria(out: &mut Outcome, ascents: &mut Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut parts = Vec::new();
    let mut pass = true;
    let mut note = |(ok, msg): (bool, String)| {
        pass &= ok;
        parts.push(if ok { msg } else { format!("{msg} [failed]") });
    };
    note(kl_identity(&mut rng));
    note(gradient_fd(&mut rng));
    note(sinkhorn_suite(&mut rng));
    note(interpolation_bound(&mut rng, ascents));
    note(small_epsilon(&mut rng, ascents));
    note(corollary(&mut rng, ascents));
    note(lemma(&mut rng));
    let worst = ascents.iter().copied().fold(0.0f64, f64::max);
    note((
        worst <= DESCENT_SLACK,
        format!("DC descent over {} runs, worst ascent {worst:.1e}", ascents.len()),
    ));
    out.record("5 (property suite)", pass, parts.join("; "));
}

// ---------------------------------------------------------------------------
// criterion 6

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        master_seed: 11,
        trials: 3,
        ..ExperimentConfig::default()
    };
    cfg.permutation.rows = 7;
    cfg.permutation.cols = 5;
    cfg.permutation.trials = 2;
    cfg.gw.x_shape = [6, 2];
    cfg.gw.y_shape = [7, 2];
    cfg.gw.egw_epsilons = vec![0.01, 0.05];
    cfg.gw.bcd_epsilons = vec![0.01, 0.1];
    cfg.gw.dc_epsilons = vec![1.0, 2.0];
    cfg.gw.dc.max_outer = 60;
    cfg.solvers.mmot_dc_v1 = true;
    cfg
}

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

fn determinism_criterion(out: &mut Outcome, full_permutation: &PermutationStudy) {
    let dir = tempfile::tempdir().unwrap();
    let read = |sub: &str, file: &str| std::fs::read(dir.path().join(sub).join(file)).unwrap();
    let mut same = Vec::new();

    let cfg = ExperimentConfig::default();
    write_permutation_study(&cfg, full_permutation, &dir.path().join("perm_a")).unwrap();
    let again = with_threads(2, || run_permutation_study(&cfg).unwrap());
    write_permutation_study(&cfg, &again, &dir.path().join("perm_b")).unwrap();
    same.push(("permutation", read("perm_a", "trials.csv") == read("perm_b", "trials.csv")));

    let small = small_config();
    for (name, threads) in [("small_perm_1", 1), ("small_perm_3", 3)] {
        let s = with_threads(threads, || run_permutation_study(&small).unwrap());
        write_permutation_study(&small, &s, &dir.path().join(name)).unwrap();
    }
    same.push(("small permutation", read("small_perm_1", "trials.csv") == read("small_perm_3", "trials.csv")));
    for (name, threads) in [("gw_1", 1), ("gw_3", 3)] {
        let s = with_threads(threads, || run_gw_quality_study(&small).unwrap());
        write_gw_study(&small, &s, &dir.path().join(name)).unwrap();
    }
    same.push((
        "gw-quality",
        read("gw_1", "trials.csv") == read("gw_3", "trials.csv") && read("gw_1", "grid.csv") == read("gw_3", "grid.csv"),
    ));
    for (name, threads) in [("v1_1", 1), ("v1_3", 3)] {
        let s = with_threads(threads, || run_v1_comparison(&small).unwrap());
        write_gw_study(&small, &s, &dir.path().join(name)).unwrap();
    }
    same.push(("v1-compare", read("v1_1", "trials.csv") == read("v1_3", "trials.csv")));

    let pass = same.iter().all(|s| s.1);
    let detail: Vec<String> = same.iter().map(|(n, ok)| format!("{n} identical {ok}")).collect();
    out.record("6 (determinism)", pass, detail.join(", "));
}

fn main() -> ExitCode {
    let mut out = Outcome { failed: Vec::new() };
    // DC runs of every criterion feed the descent check in the property suite
    let mut ascents = Vec::new();
    let permutation = permutation_criteria(&mut out, &mut ascents);
    table_criteria(&mut out, &mut ascents);
    property_criteria(&mut out, &mut ascents);
    determinism_criterion(&mut out, &permutation);
    if out.failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", out.failed.join(", "));
        ExitCode::FAILURE
    }
}
