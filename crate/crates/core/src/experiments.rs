//! Seeded data generation and the three benchmark studies.
//!
//! * `permutation`: plant a sample and a feature permutation, `Y = P X Q`, and
//!   check whether the block marginals of the MMOT-DC plan recover them.
//! * `gw-quality`: COOT loss reached by entropic GW, COOT block coordinate
//!   descent and MMOT-DC on random squared-distance matrices, each tuned over
//!   its grid.
//! * `v1-compare`: MMOT-DC against its lazy-gradient variant on the same
//!   instances.
//!
//! Every random draw comes from a ChaCha8 stream keyed by the master seed, the
//! trial index and a purpose tag, so trials can run in any order and on any
//! number of threads. Wall-clock times go to `timings.csv`; everything in
//! `trials.csv` is a pure function of the configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    build_cost_4d, coot_bcd, coot_loss, egw_pg, sq_euclidean_distances, AlternatingConfig,
    CostSpec, CouplingPair,
};
use crate::dc::{dc_solve, dc_solve_warmstart, mmotdc_objective, row_argmax, DcConfig, DcReport, GradientMode};
use crate::error::{config, Result};
use crate::io::{fmt_f64, write_atomic, write_json, write_tensor};
use crate::tensor::{marginalize, marginalize_axes, DenseTensor, MarginalFamily, TuplePartition};

/// Purpose tags mixed into the stream id.
pub mod purpose {
    pub const X: u64 = 1;
    pub const Y: u64 = 2;
    pub const SAMPLE_PERMUTATION: u64 = 3;
    pub const FEATURE_PERMUTATION: u64 = 4;
}

/// Independent generator for `(master_seed, trial, purpose)`.
pub fn stream(master_seed: u64, trial: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((trial << 8) | (purpose & 0xff));
    rng
}

/// Matrix with i.i.d. entries uniform on `[0, 1)`.
pub fn gen_uniform_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
    let data = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
    DenseTensor::new(vec![rows, cols], data).expect("uniform draws are finite")
}

/// Uniformly random permutation of `0..n` (Fisher-Yates).
pub fn gen_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PermutationSettings {
    pub trials: usize,
    pub rows: usize,
    pub cols: usize,
    pub epsilons: Vec<f64>,
    pub warm_start: bool,
    /// DC settings; `epsilon` is replaced by each grid value.
    pub dc: DcConfig,
    pub histogram_bins: usize,
    /// Write the two block-marginal matrices of every run as tensor files.
    pub write_marginals: bool,
}

impl Default for PermutationSettings {
    fn default() -> Self {
        Self {
            trials: 1,
            rows: 30,
            cols: 25,
            epsilons: vec![1.0, 1.4, 1.8, 2.2, 2.6],
            warm_start: true,
            dc: DcConfig::default(),
            histogram_bins: 20,
            write_marginals: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GwSettings {
    /// Shape of the first point cloud (points × dimension).
    pub x_shape: [usize; 2],
    pub y_shape: [usize; 2],
    pub egw_epsilons: Vec<f64>,
    /// Used for both couplings; every pair is tried.
    pub bcd_epsilons: Vec<f64>,
    pub dc_epsilons: Vec<f64>,
    pub warm_start: bool,
    /// DC settings; `epsilon` is replaced by each grid value.
    pub dc: DcConfig,
}

impl Default for GwSettings {
    fn default() -> Self {
        Self {
            x_shape: [20, 3],
            y_shape: [30, 2],
            egw_epsilons: vec![0.0008, 0.0016, 0.0032, 0.0064, 0.0128, 0.0256],
            bcd_epsilons: vec![0.0005, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0],
            dc_epsilons: vec![1.0, 1.4, 1.8, 2.2, 2.6],
            warm_start: false,
            dc: DcConfig {
                max_outer: 800,
                ..DcConfig::default()
            },
        }
    }
}

/// Which solvers the GW-quality study runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverFlags {
    pub egw_pg: bool,
    pub bcd: bool,
    pub mmot_dc: bool,
    pub mmot_dc_v1: bool,
}

impl Default for SolverFlags {
    fn default() -> Self {
        Self {
            egw_pg: true,
            bcd: true,
            mmot_dc: true,
            mmot_dc_v1: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Trials of the GW-quality and v1 studies.
    pub trials: usize,
    pub output_dir: PathBuf,
    /// Also render SVG figures next to the CSV files.
    pub svg: bool,
    pub permutation: PermutationSettings,
    pub gw: GwSettings,
    pub baselines: AlternatingConfig,
    pub solvers: SolverFlags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            trials: 30,
            output_dir: PathBuf::from("results"),
            svg: false,
            permutation: PermutationSettings::default(),
            gw: GwSettings::default(),
            baselines: AlternatingConfig::default(),
            solvers: SolverFlags::default(),
        }
    }
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return config(format!("{name} grid is empty"));
    }
    if let Some(v) = grid.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return config(format!("{name} grid holds {v}; values must be positive and finite"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.permutation.trials == 0 {
            return config("trials must be at least 1");
        }
        let p = &self.permutation;
        if p.rows == 0 || p.cols == 0 || p.histogram_bins == 0 {
            return config("permutation shapes and histogram_bins must be positive");
        }
        let g = &self.gw;
        if g.x_shape.contains(&0) || g.y_shape.contains(&0) {
            return config("gw shapes must be positive");
        }
        check_grid("permutation.epsilons", &p.epsilons)?;
        check_grid("gw.egw_epsilons", &g.egw_epsilons)?;
        check_grid("gw.bcd_epsilons", &g.bcd_epsilons)?;
        check_grid("gw.dc_epsilons", &g.dc_epsilons)?;
        for (eps, dc, warm) in p
            .epsilons
            .iter()
            .map(|&e| (e, &p.dc, p.warm_start))
            .chain(g.dc_epsilons.iter().map(|&e| (e, &g.dc, g.warm_start)))
        {
            let mut cfg = dc.clone();
            cfg.epsilon = eps;
            cfg.validate()?;
            if warm && !(cfg.step > 1.0) {
                return config(format!("warm-start step must exceed 1, got {}", cfg.step));
            }
        }
        self.baselines.inner.validate()
    }
}

fn run_dc(
    cost: &DenseTensor,
    mu: &MarginalFamily,
    partition: &TuplePartition,
    base: &DcConfig,
    epsilon: f64,
    warm_start: bool,
    mode: GradientMode,
) -> Result<DcReport> {
    let mut cfg = base.clone();
    cfg.epsilon = epsilon;
    cfg.gradient_mode = mode;
    if warm_start {
        if cfg.epsilon0.is_some_and(|e0| e0 > epsilon) {
            cfg.epsilon0 = Some(epsilon);
        }
        dc_solve_warmstart(cost, mu, partition, &cfg, None, None)
    } else {
        dc_solve(cost, mu, partition, &cfg, None, None)
    }
}

/// `(P_{#(0,1)}, P_{#(2,3)})` of a 4-way plan.
fn block_pair(plan: &DenseTensor) -> Result<CouplingPair> {
    Ok(CouplingPair {
        p: marginalize(plan, 0..2)?,
        q: marginalize(plan, 2..4)?,
    })
}

/// Sample mean and unbiased standard deviation (`None` below two values).
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Stats {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            mean,
            std,
            n: values.len(),
        }
    }
}

/// One wall-clock measurement.
#[derive(Clone, Debug)]
pub struct Timing {
    pub trial: usize,
    pub label: String,
    pub secs: f64,
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| crate::Error::Config(format!("csv: {e}"));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(&row).map_err(to_err)?;
    }
    w.into_inner()
        .map_err(|e| crate::Error::Config(format!("csv: {e}")))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_timings(dir: &Path, timings: &[Timing]) -> Result<()> {
    let rows = timings
        .iter()
        .map(|t| vec![t.trial.to_string(), t.label.clone(), format!("{:.3}", t.secs)]);
    write_atomic(&dir.join("timings.csv"), &csv_bytes(&["trial", "run", "seconds"], rows)?)
}

// ---------------------------------------------------------------------------
// permutation recovery

/// A planted instance: `Y[j, l] = X[sigma[j], tau[l]]`.
#[derive(Clone, Debug)]
pub struct PlantedInstance {
    pub x: DenseTensor,
    pub y: DenseTensor,
    pub sigma: Vec<usize>,
    pub tau: Vec<usize>,
}

pub fn planted_instance(master_seed: u64, trial: u64, rows: usize, cols: usize) -> PlantedInstance {
    let x = gen_uniform_matrix(rows, cols, &mut stream(master_seed, trial, purpose::X));
    let sigma = gen_permutation(rows, &mut stream(master_seed, trial, purpose::SAMPLE_PERMUTATION));
    let tau = gen_permutation(cols, &mut stream(master_seed, trial, purpose::FEATURE_PERMUTATION));
    let y = DenseTensor::from_fn(vec![rows, cols], |i| x.get(&[sigma[i[0]], tau[i[1]]]))
        .expect("entries copied from x");
    PlantedInstance { x, y, sigma, tau }
}

/// Fraction of rows `i` of a coupling whose argmax column `j` satisfies `perm[j] == i`.
pub fn recovery_accuracy(coupling: &DenseTensor, perm: &[usize]) -> Result<f64> {
    let am = row_argmax(coupling)?;
    let hits = am.iter().enumerate().filter(|&(i, &j)| perm[j] == i).count();
    Ok(hits as f64 / am.len() as f64)
}

/// The axis pairs whose marginals are uniform for a factored plan.
pub const CROSS_PAIRS: [[usize; 2]; 4] = [[0, 2], [0, 3], [1, 2], [1, 3]];

#[derive(Clone, Debug)]
pub struct PermutationRow {
    pub trial: usize,
    pub epsilon: f64,
    pub row_accuracy: f64,
    pub col_accuracy: f64,
    pub coot_loss: f64,
    pub max_cross_deviation: f64,
    pub objective: f64,
    /// Largest objective increase between consecutive DC iterates of one stage.
    pub max_ascent: f64,
    pub outer_iters: usize,
    pub converged: bool,
    pub inner_converged: bool,
}

impl PermutationRow {
    pub fn recovered(&self) -> bool {
        self.row_accuracy == 1.0 && self.col_accuracy == 1.0
    }
}

#[derive(Clone, Debug)]
pub struct HistogramRow {
    pub trial: usize,
    pub epsilon: f64,
    pub pair: [usize; 2],
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct PermutationRun {
    pub row: PermutationRow,
    /// The full 4-way plan.
    pub plan: DenseTensor,
    pub p12: DenseTensor,
    pub p34: DenseTensor,
    /// Entries of each cross marginal minus the uniform value, per [`CROSS_PAIRS`].
    pub deviations: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct PermutationStudy {
    pub runs: Vec<PermutationRun>,
    pub histograms: Vec<HistogramRow>,
    pub timings: Vec<Timing>,
}

fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

fn permutation_run(
    cfg: &ExperimentConfig,
    trial: usize,
    inst: &PlantedInstance,
    cost: &DenseTensor,
    epsilon: f64,
) -> Result<PermutationRun> {
    let p = &cfg.permutation;
    let mu = MarginalFamily::uniform(&[p.rows, p.rows, p.cols, p.cols])?;
    let partition = TuplePartition::from_sizes(&[2, 2])?;
    let report = run_dc(cost, &mu, &partition, &p.dc, epsilon, p.warm_start, p.dc.gradient_mode)?;
    let pair = block_pair(&report.plan)?;
    let uniform = 1.0 / (p.rows * p.cols) as f64;
    let deviations: Vec<Vec<f64>> = CROSS_PAIRS
        .iter()
        .map(|ax| {
            Ok(marginalize_axes(&report.plan, ax)?
                .data()
                .iter()
                .map(|v| v - uniform)
                .collect())
        })
        .collect::<Result<_>>()?;
    let max_cross_deviation = deviations.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let row = PermutationRow {
        trial,
        epsilon,
        row_accuracy: recovery_accuracy(&pair.p, &inst.sigma)?,
        col_accuracy: recovery_accuracy(&pair.q, &inst.tau)?,
        coot_loss: coot_loss(cost, &pair)?,
        max_cross_deviation,
        objective: *report.objective_trace.last().expect("nonempty trace"),
        max_ascent: report.max_ascent(),
        outer_iters: report.outer_iters,
        converged: report.converged,
        inner_converged: report.inner_converged,
    };
    Ok(PermutationRun {
        row,
        plan: report.plan.into_inner(),
        p12: pair.p,
        p34: pair.q,
        deviations,
    })
}

pub fn run_permutation_study(cfg: &ExperimentConfig) -> Result<PermutationStudy> {
    cfg.validate()?;
    let p = &cfg.permutation;
    let jobs: Vec<(usize, f64)> = (0..p.trials)
        .flat_map(|t| p.epsilons.iter().map(move |&e| (t, e)))
        .collect();
    let instances: Vec<(PlantedInstance, DenseTensor)> = (0..p.trials)
        .map(|t| {
            let inst = planted_instance(cfg.master_seed, t as u64, p.rows, p.cols);
            let cost = build_cost_4d(&CostSpec::new(inst.x.clone(), inst.y.clone())?);
            Ok((inst, cost))
        })
        .collect::<Result<_>>()?;
    let results: Vec<Result<(PermutationRun, Timing)>> = jobs
        .par_iter()
        .map(|&(t, e)| {
            let clock = Instant::now();
            let (inst, cost) = &instances[t];
            let run = permutation_run(cfg, t, inst, cost, e)?;
            let timing = Timing {
                trial: t,
                label: format!("mmot-dc eps={e}"),
                secs: clock.elapsed().as_secs_f64(),
            };
            Ok((run, timing))
        })
        .collect();
    let mut runs = Vec::new();
    let mut timings = Vec::new();
    for r in results {
        let (run, timing) = r?;
        runs.push(run);
        timings.push(timing);
    }
    let mut histograms = Vec::new();
    for run in &runs {
        let span = run
            .deviations
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-16);
        for (pair, dev) in CROSS_PAIRS.iter().zip(&run.deviations) {
            let counts = histogram(dev, -span, span, p.histogram_bins);
            let width = 2.0 * span / p.histogram_bins as f64;
            for (b, count) in counts.into_iter().enumerate() {
                histograms.push(HistogramRow {
                    trial: run.row.trial,
                    epsilon: run.row.epsilon,
                    pair: *pair,
                    lo: -span + b as f64 * width,
                    hi: -span + (b + 1) as f64 * width,
                    count,
                });
            }
        }
    }
    Ok(PermutationStudy {
        runs,
        histograms,
        timings,
    })
}

#[derive(Serialize)]
struct PermutationSummary {
    study: &'static str,
    master_seed: u64,
    trials: usize,
    per_epsilon: Vec<PermutationEpsilonSummary>,
    recovered_any: bool,
    solver_warnings: usize,
}

#[derive(Serialize)]
struct PermutationEpsilonSummary {
    epsilon: f64,
    recovered_trials: usize,
    row_accuracy: Stats,
    col_accuracy: Stats,
    coot_loss: Stats,
    max_cross_deviation: Stats,
}

pub fn write_permutation_study(cfg: &ExperimentConfig, study: &PermutationStudy, dir: &Path) -> Result<()> {
    let header = [
        "trial",
        "epsilon",
        "row_accuracy",
        "col_accuracy",
        "recovered",
        "coot_loss",
        "max_cross_deviation",
        "objective",
        "max_ascent",
        "outer_iters",
        "converged",
        "inner_converged",
    ];
    let rows = study.runs.iter().map(|r| {
        let r = &r.row;
        vec![
            r.trial.to_string(),
            fmt_f64(r.epsilon),
            fmt_f64(r.row_accuracy),
            fmt_f64(r.col_accuracy),
            r.recovered().to_string(),
            fmt_f64(r.coot_loss),
            fmt_f64(r.max_cross_deviation),
            fmt_f64(r.objective),
            fmt_f64(r.max_ascent),
            r.outer_iters.to_string(),
            r.converged.to_string(),
            r.inner_converged.to_string(),
        ]
    });
    write_atomic(&dir.join("trials.csv"), &csv_bytes(&header, rows)?)?;

    let hist = study.histograms.iter().map(|h| {
        vec![
            h.trial.to_string(),
            fmt_f64(h.epsilon),
            format!("{}-{}", h.pair[0], h.pair[1]),
            fmt_f64(h.lo),
            fmt_f64(h.hi),
            h.count.to_string(),
        ]
    });
    write_atomic(
        &dir.join("histograms.csv"),
        &csv_bytes(&["trial", "epsilon", "axes", "bin_lo", "bin_hi", "count"], hist)?,
    )?;

    if cfg.permutation.write_marginals {
        for run in &study.runs {
            let stem = format!("trial{}_eps{}", run.row.trial, run.row.epsilon);
            write_tensor(&dir.join("marginals").join(format!("{stem}_p01.json")), &run.p12)?;
            write_tensor(&dir.join("marginals").join(format!("{stem}_p23.json")), &run.p34)?;
        }
    }

    let per_epsilon = cfg
        .permutation
        .epsilons
        .iter()
        .map(|&e| {
            let rows: Vec<&PermutationRow> =
                study.runs.iter().map(|r| &r.row).filter(|r| r.epsilon == e).collect();
            let col = |f: fn(&PermutationRow) -> f64| Stats::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            PermutationEpsilonSummary {
                epsilon: e,
                recovered_trials: rows.iter().filter(|r| r.recovered()).count(),
                row_accuracy: col(|r| r.row_accuracy),
                col_accuracy: col(|r| r.col_accuracy),
                coot_loss: col(|r| r.coot_loss),
                max_cross_deviation: col(|r| r.max_cross_deviation),
            }
        })
        .collect();
    let summary = PermutationSummary {
        study: "permutation",
        master_seed: cfg.master_seed,
        trials: cfg.permutation.trials,
        per_epsilon,
        recovered_any: study.runs.iter().any(|r| r.row.recovered()),
        solver_warnings: study
            .runs
            .iter()
            .filter(|r| !(r.row.converged && r.row.inner_converged))
            .count(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_timings(dir, &study.timings)?;
    if cfg.svg {
        write_atomic(&dir.join("histograms.svg"), histogram_svg(study).as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// GW quality and the v1 comparison

/// Solver labels used in reports.
pub mod labels {
    pub const EGW_PG: &str = "EGW-PG";
    pub const GW_BCD: &str = "GW-BCD";
    pub const EGW_BCD: &str = "EGW-BCD";
    pub const MMOT_DC: &str = "MMOT-DC";
    pub const MMOT_DC_V1: &str = "MMOT-DC-v1";
}

/// Loss of one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub trial: usize,
    pub solver: &'static str,
    pub params: Vec<f64>,
    pub loss: f64,
    pub converged: bool,
    /// DC runs only: largest objective increase between consecutive iterates.
    pub max_ascent: Option<f64>,
}

/// Best grid point of one solver in one trial; ties keep the earlier (smaller) value.
#[derive(Clone, Debug, PartialEq)]
pub struct Best {
    pub loss: f64,
    pub params: Vec<f64>,
    /// Every run of the grid converged.
    pub converged: bool,
}

fn best_of(points: &[GridPoint]) -> Option<Best> {
    let mut best: Option<&GridPoint> = None;
    for p in points {
        if best.is_none_or(|b| p.loss < b.loss) {
            best = Some(p);
        }
    }
    best.map(|b| Best {
        loss: b.loss,
        params: b.params.clone(),
        converged: points.iter().all(|p| p.converged),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GwTrialRecord {
    pub trial: usize,
    pub egw_pg: Option<Best>,
    pub gw_bcd: Option<Best>,
    pub egw_bcd: Option<Best>,
    pub mmot_dc: Option<Best>,
    pub mmot_dc_v1: Option<Best>,
    /// Set when a solver failed; the trial is then left out of the aggregates.
    pub error: Option<String>,
}

impl GwTrialRecord {
    pub fn get(&self, label: &str) -> Option<&Best> {
        match label {
            labels::EGW_PG => self.egw_pg.as_ref(),
            labels::GW_BCD => self.gw_bcd.as_ref(),
            labels::EGW_BCD => self.egw_bcd.as_ref(),
            labels::MMOT_DC => self.mmot_dc.as_ref(),
            labels::MMOT_DC_V1 => self.mmot_dc_v1.as_ref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GwStudy {
    pub study: &'static str,
    pub flags: SolverFlags,
    pub records: Vec<GwTrialRecord>,
    pub grid: Vec<GridPoint>,
    pub timings: Vec<Timing>,
}

impl GwStudy {
    pub fn labels(&self) -> Vec<&'static str> {
        let f = self.flags;
        [
            (f.egw_pg, labels::EGW_PG),
            (f.bcd, labels::GW_BCD),
            (f.bcd, labels::EGW_BCD),
            (f.mmot_dc, labels::MMOT_DC),
            (f.mmot_dc_v1, labels::MMOT_DC_V1),
        ]
        .into_iter()
        .filter_map(|(on, l)| on.then_some(l))
        .collect()
    }

    pub fn included(&self) -> impl Iterator<Item = &GwTrialRecord> {
        self.records.iter().filter(|r| r.error.is_none())
    }

    pub fn losses(&self, label: &str) -> Vec<f64> {
        self.included().filter_map(|r| r.get(label).map(|b| b.loss)).collect()
    }

    pub fn stats(&self, label: &str) -> Stats {
        Stats::of(&self.losses(label))
    }

    pub fn excluded(&self) -> usize {
        self.records.len() - self.included().count()
    }
}

/// The random instance of a GW-quality trial: squared-distance matrices of two
/// uniform point clouds.
pub fn gw_instance(cfg: &ExperimentConfig, trial: u64) -> Result<CostSpec> {
    let [xr, xc] = cfg.gw.x_shape;
    let [yr, yc] = cfg.gw.y_shape;
    let x = gen_uniform_matrix(xr, xc, &mut stream(cfg.master_seed, trial, purpose::X));
    let y = gen_uniform_matrix(yr, yc, &mut stream(cfg.master_seed, trial, purpose::Y));
    CostSpec::new(sq_euclidean_distances(&x)?, sq_euclidean_distances(&y)?)
}

type TrialOutput = (Vec<GridPoint>, Vec<Timing>);

fn gw_trial(
    cfg: &ExperimentConfig,
    flags: SolverFlags,
    trial: usize,
) -> Result<TrialOutput> {
    let spec = gw_instance(cfg, trial as u64)?;
    let cost = build_cost_4d(&spec);
    let mu = MarginalFamily::uniform(&spec.dims())?;
    let g = &cfg.gw;
    let mut points = Vec::new();
    let mut timings = Vec::new();
    let mut timed = |label: &str, clock: Instant| {
        timings.push(Timing {
            trial,
            label: label.to_string(),
            secs: clock.elapsed().as_secs_f64(),
        })
    };

    if flags.egw_pg {
        let clock = Instant::now();
        for &e in &g.egw_epsilons {
            let res = egw_pg(&spec.x, &spec.y, mu.get(0), mu.get(1), e, &cfg.baselines, None)?;
            let p = res.coupling.into_inner();
            let pair = CouplingPair { p: p.clone(), q: p };
            points.push(GridPoint {
                trial,
                solver: labels::EGW_PG,
                params: vec![e],
                loss: coot_loss(&cost, &pair)?,
                converged: res.converged && res.inner_converged,
                max_ascent: None,
            });
        }
        timed(labels::EGW_PG, clock);
    }
    if flags.bcd {
        let clock = Instant::now();
        for &a in &g.bcd_epsilons {
            for &b in &g.bcd_epsilons {
                let res = coot_bcd(&spec, &mu, a, b, &cfg.baselines, None)?;
                points.push(GridPoint {
                    trial,
                    solver: labels::EGW_BCD,
                    params: vec![a, b],
                    loss: coot_loss(&cost, &res.pair)?,
                    converged: res.converged && res.inner_converged,
                    max_ascent: None,
                });
            }
        }
        timed(labels::EGW_BCD, clock);
    }
    let partition = TuplePartition::from_sizes(&[2, 2])?;
    for (on, label, mode) in [
        (flags.mmot_dc, labels::MMOT_DC, GradientMode::Corrected),
        (flags.mmot_dc_v1, labels::MMOT_DC_V1, GradientMode::V1),
    ] {
        if !on {
            continue;
        }
        let clock = Instant::now();
        for &e in &g.dc_epsilons {
            let report = run_dc(&cost, &mu, &partition, &g.dc, e, g.warm_start, mode)?;
            points.push(GridPoint {
                trial,
                solver: label,
                params: vec![e],
                loss: coot_loss(&cost, &block_pair(&report.plan)?)?,
                converged: report.converged && report.inner_converged,
                max_ascent: Some(report.max_ascent()),
            });
        }
        timed(label, clock);
    }
    Ok((points, timings))
}

fn gw_record(trial: usize, points: &[GridPoint], bcd_min: Option<f64>) -> GwTrialRecord {
    let pick = |label: &str| {
        let sel: Vec<GridPoint> = points.iter().filter(|p| p.solver == label).cloned().collect();
        best_of(&sel)
    };
    // the least regularised pair of the BCD grid stands in for unregularised BCD
    let gw_bcd = bcd_min.and_then(|m| {
        let sel: Vec<GridPoint> = points
            .iter()
            .filter(|p| p.solver == labels::EGW_BCD && p.params == [m, m])
            .cloned()
            .collect();
        best_of(&sel)
    });
    GwTrialRecord {
        trial,
        egw_pg: pick(labels::EGW_PG),
        gw_bcd,
        egw_bcd: pick(labels::EGW_BCD),
        mmot_dc: pick(labels::MMOT_DC),
        mmot_dc_v1: pick(labels::MMOT_DC_V1),
        error: None,
    }
}

fn run_gw_with(cfg: &ExperimentConfig, flags: SolverFlags, study: &'static str) -> Result<GwStudy> {
    cfg.validate()?;
    let outcomes: Vec<(usize, Result<TrialOutput>)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| (t, gw_trial(cfg, flags, t)))
        .collect();
    let bcd_min = flags
        .bcd
        .then(|| cfg.gw.bcd_epsilons.iter().copied().fold(f64::INFINITY, f64::min));
    let mut records = Vec::new();
    let mut grid = Vec::new();
    let mut timings = Vec::new();
    for (t, out) in outcomes {
        match out {
            Ok((points, times)) => {
                records.push(gw_record(t, &points, bcd_min));
                grid.extend(points);
                timings.extend(times);
            }
            Err(e) => records.push(GwTrialRecord {
                trial: t,
                error: Some(e.to_string()),
                ..GwTrialRecord::default()
            }),
        }
    }
    Ok(GwStudy {
        study,
        flags,
        records,
        grid,
        timings,
    })
}

/// Each enabled solver tuned over its grid, per trial.
pub fn run_gw_quality_study(cfg: &ExperimentConfig) -> Result<GwStudy> {
    run_gw_with(cfg, cfg.solvers, "gw-quality")
}

/// MMOT-DC against MMOT-DC-v1 on the GW-quality instances.
pub fn run_v1_comparison(cfg: &ExperimentConfig) -> Result<GwStudy> {
    let flags = SolverFlags {
        egw_pg: false,
        bcd: false,
        mmot_dc: true,
        mmot_dc_v1: true,
    };
    run_gw_with(cfg, flags, "v1-compare")
}

/// Pearson correlation of paired samples.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let (Some(ma), Some(mb)) = (mean_std(a).0, mean_std(b).0) else {
        return None;
    };
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

const RECORD_COLUMNS: [(&str, &str); 5] = [
    (labels::EGW_PG, "egw_pg"),
    (labels::GW_BCD, "gw_bcd"),
    (labels::EGW_BCD, "egw_bcd"),
    (labels::MMOT_DC, "mmot_dc"),
    (labels::MMOT_DC_V1, "mmot_dc_v1"),
];

pub fn write_gw_study(cfg: &ExperimentConfig, study: &GwStudy, dir: &Path) -> Result<()> {
    let mut header = vec!["trial".to_string()];
    for (_, key) in RECORD_COLUMNS {
        for suffix in ["loss", "param1", "param2", "converged"] {
            header.push(format!("{key}_{suffix}"));
        }
    }
    header.push("error".into());
    let rows = study.records.iter().map(|r| {
        let mut row = vec![r.trial.to_string()];
        for (label, _) in RECORD_COLUMNS {
            match r.get(label) {
                Some(b) => {
                    row.push(fmt_f64(b.loss));
                    row.push(opt(b.params.first().copied()));
                    row.push(opt(b.params.get(1).copied()));
                    row.push(b.converged.to_string());
                }
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        row.push(r.error.clone().unwrap_or_default());
        row
    });
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_atomic(&dir.join("trials.csv"), &csv_bytes(&header_refs, rows)?)?;

    let grid_rows = study.grid.iter().map(|p| {
        vec![
            p.trial.to_string(),
            p.solver.to_string(),
            opt(p.params.first().copied()),
            opt(p.params.get(1).copied()),
            fmt_f64(p.loss),
            p.converged.to_string(),
            opt(p.max_ascent),
        ]
    });
    write_atomic(
        &dir.join("grid.csv"),
        &csv_bytes(&["trial", "solver", "param1", "param2", "loss", "converged", "max_ascent"], grid_rows)?,
    )?;

    let labels_on = study.labels();
    let reference = if labels_on.contains(&labels::MMOT_DC) {
        Some(labels::MMOT_DC)
    } else {
        None
    };
    if let Some(reference) = reference {
        let others: Vec<&str> = labels_on.iter().copied().filter(|l| *l != reference).collect();
        let rows = study.included().filter_map(|r| {
            let y = r.get(reference)?.loss;
            let mut row = vec![r.trial.to_string(), fmt_f64(y)];
            for l in &others {
                row.push(opt(r.get(l).map(|b| b.loss)));
            }
            Some(row)
        });
        let mut header = vec!["trial".to_string(), reference.to_string()];
        header.extend(others.iter().map(|s| s.to_string()));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        write_atomic(&dir.join("scatter.csv"), &csv_bytes(&header_refs, rows)?)?;
        if cfg.svg {
            write_atomic(&dir.join("scatter.svg"), scatter_svg(study, reference, &others).as_bytes())?;
        }
    }

    let mut solvers = serde_json::Map::new();
    for l in &labels_on {
        let value = serde_json::to_value(study.stats(l))
            .map_err(|e| crate::Error::Config(format!("summary: {e}")))?;
        solvers.insert(l.to_string(), value);
    }
    let mut summary = serde_json::json!({
        "study": study.study,
        "master_seed": cfg.master_seed,
        "trials": study.records.len(),
        "excluded_trials": study.excluded(),
        "solvers": solvers,
    });
    if study.flags.mmot_dc && study.flags.mmot_dc_v1 {
        let pairs: Vec<(f64, f64)> = study
            .included()
            .filter_map(|r| Some((r.mmot_dc.as_ref()?.loss, r.mmot_dc_v1.as_ref()?.loss)))
            .collect();
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let diff = match (mean_std(&a).0, mean_std(&b).0) {
            (Some(x), Some(y)) => Some(x - y),
            _ => None,
        };
        summary["paired"] = serde_json::json!({
            "mean_difference": diff,
            "correlation": correlation(&a, &b),
        });
    }
    write_json(&dir.join("summary.json"), &summary)?;
    write_timings(dir, &study.timings)
}

// ---------------------------------------------------------------------------
// static figures

const SVG_SIZE: f64 = 320.0;
const SVG_PAD: f64 = 36.0;

fn svg_open(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
}

fn scatter_svg(study: &GwStudy, reference: &str, others: &[&str]) -> String {
    let mut out = String::new();
    let width = SVG_SIZE * others.len().max(1) as f64;
    svg_open(&mut out, width, SVG_SIZE);
    for (k, other) in others.iter().enumerate() {
        let pts: Vec<(f64, f64)> = study
            .included()
            .filter_map(|r| Some((r.get(other)?.loss, r.get(reference)?.loss)))
            .collect();
        let hi = pts.iter().flat_map(|&(x, y)| [x, y]).fold(1e-12, f64::max);
        let x0 = k as f64 * SVG_SIZE;
        let span = SVG_SIZE - 2.0 * SVG_PAD;
        let map = |v: f64| v / hi * span;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{SVG_PAD}" width="{span}" height="{span}" fill="none" stroke="black"/>"#,
            x0 + SVG_PAD
        );
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{SVG_PAD}" stroke="gray" stroke-dasharray="4"/>"#,
            x0 + SVG_PAD,
            SVG_PAD + span,
            x0 + SVG_PAD + span
        );
        for (x, y) in pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="steelblue"/>"#,
                x0 + SVG_PAD + map(x),
                SVG_PAD + span - map(y)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{other} (x) vs {reference} (y)</text>"#,
            x0 + SVG_SIZE / 2.0,
            SVG_PAD / 2.0
        );
    }
    out.push_str("</svg>\n");
    out
}

fn histogram_svg(study: &PermutationStudy) -> String {
    let mut out = String::new();
    let panels: Vec<(&PermutationRun, [usize; 2])> = study
        .runs
        .iter()
        .flat_map(|r| CROSS_PAIRS.iter().map(move |p| (r, *p)))
        .collect();
    let cols = CROSS_PAIRS.len();
    let rows = panels.len().div_ceil(cols).max(1);
    svg_open(&mut out, SVG_SIZE * cols as f64, SVG_SIZE * rows as f64);
    for (n, (run, pair)) in panels.iter().enumerate() {
        let bins: Vec<&HistogramRow> = study
            .histograms
            .iter()
            .filter(|h| h.trial == run.row.trial && h.epsilon == run.row.epsilon && h.pair == *pair)
            .collect();
        let top = bins.iter().map(|h| h.count).max().unwrap_or(1).max(1) as f64;
        let (x0, y0) = ((n % cols) as f64 * SVG_SIZE, (n / cols) as f64 * SVG_SIZE);
        let span = SVG_SIZE - 2.0 * SVG_PAD;
        let w = span / bins.len().max(1) as f64;
        for (b, h) in bins.iter().enumerate() {
            let hgt = h.count as f64 / top * span;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="steelblue"/>"#,
                x0 + SVG_PAD + b as f64 * w,
                y0 + SVG_PAD + span - hgt,
                w * 0.9,
                hgt
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">axes {}-{}, eps {}</text>"#,
            x0 + SVG_SIZE / 2.0,
            y0 + SVG_PAD / 2.0,
            pair[0],
            pair[1],
            run.row.epsilon
        );
    }
    out.push_str("</svg>\n");
    out
}

/// The objective of a plan, re-exported for report consumers.
pub fn plan_objective(
    cost: &DenseTensor,
    plan: &crate::tensor::ProbabilityTensor,
    epsilon: f64,
) -> Result<f64> {
    mmotdc_objective(cost, plan, &TuplePartition::from_sizes(&[2, 2])?, epsilon)
}
