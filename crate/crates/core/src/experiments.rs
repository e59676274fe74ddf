//! Monte Carlo drivers and the Gaussian oracle for the leading error term.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::ensembles::{simulate_trial, stream_rng, Case, EnsembleConfig, Level, Truth};
use crate::error::{Error, Result};
use crate::estimator::{estimate_four_block, estimate_staggered, noise_variance_estimate};
use crate::inference::{
    confidence_interval, local_minimax_bound, noise_functional, normal_cdf, variance_theoretical,
    VarianceModel,
};
use crate::io::fmt_num;
use crate::linalg::{regress_columns, ThinQr, REGRESSION_RANK_TOL};
use crate::panel::{block_partition, build_four_block};

/// Outcome of one simulated panel at one target entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial_index: u64,
    /// 0-based `(unit, period)`.
    pub entry: (usize, usize),
    pub estimate: f64,
    pub truth: f64,
    pub error: f64,
    pub gamma_hat: f64,
    pub gamma_star: f64,
    /// `error/√gamma_hat`; zero for degenerate (noiseless) trials.
    pub rescaled: f64,
    pub covered: bool,
    /// Seconds spent estimating, excluding simulation.
    pub wall_time: f64,
}

/// Flat CSV form of a [`TrialRecord`] with 1-based unit and period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial_index: u64,
    pub unit: usize,
    pub period: usize,
    pub estimate: f64,
    pub truth: f64,
    pub error: f64,
    pub gamma_hat: f64,
    pub gamma_star: f64,
    pub rescaled: f64,
    pub covered: bool,
    pub wall_time: f64,
}

impl From<&TrialRecord> for TrialRow {
    fn from(r: &TrialRecord) -> Self {
        TrialRow {
            trial_index: r.trial_index,
            unit: r.entry.0 + 1,
            period: r.entry.1 + 1,
            estimate: r.estimate,
            truth: r.truth,
            error: r.error,
            gamma_hat: r.gamma_hat,
            gamma_star: r.gamma_star,
            rescaled: r.rescaled,
            covered: r.covered,
            wall_time: r.wall_time,
        }
    }
}

/// Shared knobs for the Monte Carlo drivers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub trials: usize,
    /// 0-based target; `None` means the bottom-right entry.
    pub entry: Option<(usize, usize)>,
    pub alpha: f64,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
}

impl RunOptions {
    pub fn new(trials: usize) -> Self {
        RunOptions {
            trials,
            entry: None,
            alpha: 0.05,
            workers: 0,
        }
    }

    pub fn entry_for(&self, cfg: &EnsembleConfig) -> (usize, usize) {
        self.entry.unwrap_or((cfg.n - 1, cfg.t - 1))
    }
}

/// Simulates trial `trial` of `cfg` and evaluates the estimator at `entry`.
pub fn run_trial(
    cfg: &EnsembleConfig,
    trial: u64,
    entry: (usize, usize),
    alpha: f64,
) -> Result<TrialRecord> {
    let (unit, period) = entry;
    if unit >= cfg.n {
        return Err(Error::IndexOutOfRange {
            what: "unit",
            index: unit,
            max: cfg.n,
        });
    }
    if period >= cfg.t {
        return Err(Error::IndexOutOfRange {
            what: "period",
            index: period,
            max: cfg.t,
        });
    }
    let pattern = cfg.pattern()?;
    let (i0, j0) = (
        pattern.group_of_sorted_row(unit),
        pattern.stage_of_period(period),
    );
    if !pattern.is_unobserved_block(i0, j0) {
        return Err(Error::EntryObserved { unit, period });
    }
    let (panel, truth) = simulate_trial(cfg, trial)?;

    let start = Instant::now();
    let inst = build_four_block(&panel, &pattern, i0, j0)?;
    let fb = estimate_four_block(&inst, cfg.r)?;
    let (n1, t1) = (inst.n1(), inst.t1());
    let estimate = fb.mhat_d[(unit - n1, period - t1)];
    let omega_hat_sq = noise_variance_estimate(&fb, &inst);
    let gamma_hat = VarianceModel::from_fit(&fb, omega_hat_sq)?.gamma(unit, period);
    let wall_time = start.elapsed().as_secs_f64();

    let gamma_star = variance_theoretical(
        &truth.u_star,
        &truth.v_star,
        n1,
        t1,
        cfg.omega,
        unit,
        period,
    )?;
    let mstar = truth.m_star[(unit, period)];
    let error = estimate - mstar;
    let degenerate = cfg.omega == 0.0;
    let rescaled = if degenerate || gamma_hat <= 0.0 {
        0.0
    } else {
        error / gamma_hat.sqrt()
    };
    let (lo, hi) = confidence_interval(estimate, gamma_hat.max(0.0), alpha)?;
    let exact = degenerate && error.abs() <= 1e-8 * mstar.abs().max(1.0);
    Ok(TrialRecord {
        trial_index: trial,
        entry,
        estimate,
        truth: mstar,
        error,
        gamma_hat,
        gamma_star,
        rescaled,
        covered: (lo <= mstar && mstar <= hi) || exact,
        wall_time,
    })
}

/// Runs `f` for every trial index, in parallel, keeping index order.
pub fn run_parallel<T, F>(trials: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let job = || {
        (0..trials as u64)
            .into_par_iter()
            .map(&f)
            .collect::<Result<Vec<T>>>()
    };
    if workers == 0 {
        return job();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Io(e.to_string()))?;
    pool.install(job)
}

/// All trials of `cfg` at the option's target entry.
pub fn run_trials(cfg: &EnsembleConfig, opts: &RunOptions) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    let entry = opts.entry_for(cfg);
    run_parallel(opts.trials, opts.workers, |i| {
        run_trial(cfg, i, entry, opts.alpha)
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Summary of one MSE grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseRow {
    /// Incoherence level or rank, depending on the driver.
    pub level: f64,
    pub trials: usize,
    pub mse: f64,
    pub gamma_star: f64,
    pub ratio: f64,
    pub minimax_bound: f64,
    pub noise_functional: f64,
}

fn summarize_mse(level: f64, cfg: &EnsembleConfig, records: &[TrialRecord]) -> Result<MseRow> {
    let mse = mean(records.iter().map(|r| r.error * r.error));
    let gamma_star = mean(records.iter().map(|r| r.gamma_star));
    let pattern = cfg.pattern()?;
    let (unit, period) = records
        .first()
        .map(|r| r.entry)
        .unwrap_or((cfg.n - 1, cfg.t - 1));
    let (k1, k2) = block_partition(
        pattern.k(),
        pattern.group_of_sorted_row(unit),
        pattern.stage_of_period(period),
    )?;
    let n1: usize = pattern.group_sizes()[..k1].iter().sum();
    let t1: usize = pattern.stage_lengths()[..k2].iter().sum();
    // Truths in every ensemble have unit singular values.
    let e = noise_functional(cfg.omega, 1.0, n1, t1)?;
    let minimax_bound = local_minimax_bound(gamma_star, e, 2.0, 0.5)?;
    let ratio = if gamma_star > 0.0 {
        mse / gamma_star
    } else {
        f64::NAN
    };
    Ok(MseRow {
        level,
        trials: records.len(),
        mse,
        gamma_star,
        ratio,
        minimax_bound,
        noise_functional: e,
    })
}

/// MSE and `γ*` across incoherence levels. Case 2 ties `ν` to `μ`; Case 1 keeps `V` Haar.
pub fn run_mse_vs_incoherence(
    base: &EnsembleConfig,
    levels: &[f64],
    opts: &RunOptions,
) -> Result<Vec<MseRow>> {
    levels
        .iter()
        .map(|&level| {
            let mut cfg = base.clone();
            cfg.mu = Level::Value(level);
            if cfg.case == Case::Custom {
                cfg.nu = Some(Level::Value(level));
            }
            let records = run_trials(&cfg, opts)?;
            summarize_mse(level, &cfg, &records)
        })
        .collect()
}

/// Rank sweep with its fitted log-log slope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankSweep {
    pub rows: Vec<MseRow>,
    pub slope: f64,
}

/// Case 1 uses `U(1)V(1)ᵀ`; Case 2 uses `U(r^{1/4})V(r^{1/4})ᵀ`.
pub fn run_mse_vs_rank(
    base: &EnsembleConfig,
    ranks: &[usize],
    opts: &RunOptions,
) -> Result<RankSweep> {
    let mut rows = Vec::with_capacity(ranks.len());
    for &r in ranks {
        let mut cfg = base.clone();
        cfg.r = r;
        match base.case {
            Case::Case1 => {
                cfg.case = Case::Custom;
                cfg.mu = Level::Value(1.0);
                cfg.nu = Some(Level::Value(1.0));
            }
            Case::Case2 => {
                cfg.mu = Level::ROOT_RANK;
                cfg.nu = None;
            }
            Case::Custom => {}
        }
        let records = run_trials(&cfg, opts)?;
        rows.push(summarize_mse(r as f64, &cfg, &records)?);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.level.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mse.ln()).collect();
    Ok(RankSweep {
        slope: ols_slope(&xs, &ys),
        rows,
    })
}

/// Least-squares slope of `ys` on `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs.iter().copied());
    let my = mean(ys.iter().copied());
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Kolmogorov–Smirnov distance of a sample to the standard normal.
pub fn ks_normal(sample: &[f64]) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = normal_cdf(x);
            ((k + 1) as f64 / n - f).max(f - k as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqRow {
    pub rank: usize,
    pub normal_quantile: f64,
    pub rescaled_hat: f64,
    pub rescaled_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqResult {
    pub rows: Vec<QqRow>,
    /// KS distance using `γ̂`.
    pub ks: f64,
    /// KS distance using `γ*`.
    pub ks_star: f64,
    pub degenerate: bool,
}

/// Sorted rescaled errors against normal quantiles at `(k − 1/2)/n`.
pub fn run_qq(cfg: &EnsembleConfig, opts: &RunOptions) -> Result<QqResult> {
    let records = run_trials(cfg, opts)?;
    Ok(qq_from_records(&records, cfg.omega == 0.0))
}

pub fn qq_from_records(records: &[TrialRecord], degenerate: bool) -> QqResult {
    let mut hat: Vec<f64> = records.iter().map(|r| r.rescaled).collect();
    let mut star: Vec<f64> = records
        .iter()
        .map(|r| {
            if degenerate || r.gamma_star <= 0.0 {
                0.0
            } else {
                r.error / r.gamma_star.sqrt()
            }
        })
        .collect();
    let (ks, ks_star) = if degenerate {
        (f64::NAN, f64::NAN)
    } else {
        (ks_normal(&hat), ks_normal(&star))
    };
    hat.sort_by(f64::total_cmp);
    star.sort_by(f64::total_cmp);
    let n = hat.len() as f64;
    let rows = hat
        .iter()
        .zip(&star)
        .enumerate()
        .map(|(k, (&h, &s))| QqRow {
            rank: k + 1,
            normal_quantile: crate::inference::normal_quantile((k as f64 + 0.5) / n),
            rescaled_hat: h,
            rescaled_star: s,
        })
        .collect();
    QqResult {
        rows,
        ks,
        ks_star,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageResult {
    pub entry: (usize, usize),
    pub alpha: f64,
    pub trials: usize,
    pub covered: usize,
    pub coverage: f64,
}

pub fn run_coverage(cfg: &EnsembleConfig, opts: &RunOptions) -> Result<CoverageResult> {
    let records = run_trials(cfg, opts)?;
    Ok(coverage_from_records(
        &records,
        opts.entry_for(cfg),
        opts.alpha,
    ))
}

pub fn coverage_from_records(
    records: &[TrialRecord],
    entry: (usize, usize),
    alpha: f64,
) -> CoverageResult {
    let covered = records.iter().filter(|r| r.covered).count();
    CoverageResult {
        entry,
        alpha,
        trials: records.len(),
        covered,
        coverage: covered as f64 / records.len().max(1) as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuntimeRow {
    pub n: usize,
    pub median_seconds: f64,
    pub repeats: usize,
    /// Set when the median is too small for the clock to resolve reliably.
    pub below_resolution: bool,
}

/// Three groups and stages of sizes `⌊0.4n⌋, ⌊0.4n⌋, n − 2⌊0.4n⌋`, rank 3, Haar factors.
pub fn runtime_config(n: usize, seed: u64) -> EnsembleConfig {
    let big = (2 * n) / 5;
    let sizes = vec![big, big, n - 2 * big];
    EnsembleConfig {
        n,
        t: n,
        r: 3,
        mu: Level::HAAR,
        nu: None,
        omega: 1.0,
        groups: sizes.clone(),
        stages: sizes,
        seed,
        case: Case::Case1,
        freeze_truth: false,
    }
}

/// Median wall time of the full estimator over `repeats` runs after one warm-up.
pub fn run_runtime(sizes: &[usize], repeats: usize, seed: u64) -> Result<Vec<RuntimeRow>> {
    sizes
        .iter()
        .map(|&n| {
            let cfg = runtime_config(n, seed);
            cfg.validate()?;
            let (panel, _) = simulate_trial(&cfg, 0)?;
            estimate_staggered(&panel, cfg.r)?;
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                let est = estimate_staggered(&panel, cfg.r)?;
                times.push(start.elapsed().as_secs_f64());
                drop(est);
            }
            times.sort_by(f64::total_cmp);
            let median_seconds = times[times.len() / 2];
            Ok(RuntimeRow {
                n,
                median_seconds,
                repeats: times.len(),
                below_resolution: n < 64 || median_seconds < 1e-3,
            })
        })
        .collect()
}

/// `U2 G⁻¹U1ᵀE_b + E_c V1 H⁻¹V2ᵀ + E_c V1 H⁻¹Σ⁻¹G⁻¹U1ᵀE_b` with `G = U1ᵀU1`, `H = V1ᵀV1`.
///
/// `ustar` is `N̄ x r` and `vstar` is `T̄ x r`; the first `n1`/`t1` rows form `U1`/`V1`.
pub fn oracle_z(
    ustar: &DMatrix<f64>,
    vstar: &DMatrix<f64>,
    sigma: &DVector<f64>,
    e_b: &DMatrix<f64>,
    e_c: &DMatrix<f64>,
    n1: usize,
    t1: usize,
) -> Result<DMatrix<f64>> {
    let (n_bar, r) = ustar.shape();
    let t_bar = vstar.nrows();
    if vstar.ncols() != r || sigma.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "factors have {} and {} columns, sigma has {} entries",
            r,
            vstar.ncols(),
            sigma.len()
        )));
    }
    if e_b.shape() != (n1, t_bar - t1) || e_c.shape() != (n_bar - n1, t1) {
        return Err(Error::DimensionMismatch(format!(
            "E_b is {:?} and E_c is {:?} for a {n_bar} x {t_bar} instance split at ({n1}, {t1})",
            e_b.shape(),
            e_c.shape()
        )));
    }
    let u1 = ustar.rows(0, n1).into_owned();
    let u2 = ustar.rows(n1, n_bar - n1).into_owned();
    let v1 = vstar.rows(0, t1).into_owned();
    let v2 = vstar.rows(t1, t_bar - t1).into_owned();
    let a = regress_columns(&u1, e_b)?;
    let b = regress_columns(&v1, &e_c.transpose())?.transpose();
    let sinv = DMatrix::from_diagonal(&sigma.map(|s| 1.0 / s));
    Ok(&u2 * &a + &b * v2.transpose() + &b * sinv * &a)
}

/// Closed-form variance of each entry of [`oracle_z`] when noise entries have variance `s2`.
pub fn oracle_z_variance(
    ustar: &DMatrix<f64>,
    vstar: &DMatrix<f64>,
    sigma: &DVector<f64>,
    n1: usize,
    t1: usize,
    s2: f64,
) -> Result<DMatrix<f64>> {
    let n_bar = ustar.nrows();
    let t_bar = vstar.nrows();
    let qu = ThinQr::new(&ustar.rows(0, n1).into_owned(), REGRESSION_RANK_TOL)?;
    let qv = ThinQr::new(&vstar.rows(0, t1).into_owned(), REGRESSION_RANK_TOL)?;
    let row_forms = qu.gram_quadratic_forms(&ustar.rows(n1, n_bar - n1).into_owned());
    let col_forms = qv.gram_quadratic_forms(&vstar.rows(t1, t_bar - t1).into_owned());
    // tr(Σ⁻¹G⁻¹Σ⁻¹H⁻¹) = ‖R_v⁻ᵀ Σ⁻¹ R_u⁻¹‖_F².
    let ginv_half = qu.inverse_r();
    let hinv_half = qv.inverse_r();
    let sinv = DMatrix::from_diagonal(&sigma.map(|s| 1.0 / s));
    let cross = (hinv_half.transpose() * sinv * ginv_half).norm_squared();
    Ok(DMatrix::from_fn(n_bar - n1, t_bar - t1, |i, t| {
        s2 * (row_forms[i] + col_forms[t]) + s2 * s2 * cross
    }))
}

/// Structure of the generated instance used by [`run_oracle_trial`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleDesign {
    pub n: usize,
    pub t: usize,
    pub n1: usize,
    pub t1: usize,
    pub r: usize,
    pub omega: f64,
    pub seed: u64,
}

/// Per-trial comparison of the actual error at one entry of `M_d` against `Z`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRecord {
    pub trial_index: u64,
    pub error: f64,
    pub z: f64,
    pub sd_z: f64,
}

/// Four-block truth with Haar factors and unit spectrum; error at the bottom-right entry.
pub fn run_oracle_trial(design: &OracleDesign, trial: u64) -> Result<OracleRecord> {
    let OracleDesign {
        n,
        t,
        n1,
        t1,
        r,
        omega,
        seed,
    } = *design;
    let mut rng = stream_rng(seed, 2 * trial);
    let u = crate::ensembles::haar_with(&mut rng, n, r)?;
    let v = crate::ensembles::haar_with(&mut rng, t, r)?;
    let truth = Truth::from_factors(u, v)?;
    let noise = crate::ensembles::noise_with(&mut stream_rng(seed, 2 * trial + 1), n, t, omega);
    let observed = &truth.m_star + &noise;
    let inst = crate::panel::FourBlockInstance::split(&observed, n1, t1)?;
    let fb = estimate_four_block(&inst, r)?;
    let e_b = noise.view((0, t1), (n1, t - t1)).into_owned();
    let e_c = noise.view((n1, 0), (n - n1, t1)).into_owned();
    let z = oracle_z(
        &truth.u_star,
        &truth.v_star,
        &truth.sigma_star,
        &e_b,
        &e_c,
        n1,
        t1,
    )?;
    let s2 = omega * omega / (n * t) as f64;
    let var = oracle_z_variance(&truth.u_star, &truth.v_star, &truth.sigma_star, n1, t1, s2)?;
    let (i, j) = (n - n1 - 1, t - t1 - 1);
    Ok(OracleRecord {
        trial_index: trial,
        error: fb.mhat_d[(i, j)] - truth.m_star[(n - 1, t - 1)],
        z: z[(i, j)],
        sd_z: var[(i, j)].sqrt(),
    })
}

/// Writes flat serializable rows as CSV with a header, floats at 17 significant digits.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_csv_to(file, rows)
}

pub fn write_csv_to<W: Write, T: Serialize>(sink: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Error::Io(e.to_string());
    for (i, row) in rows.iter().enumerate() {
        let value = serde_json::to_value(row).map_err(|e| Error::Io(e.to_string()))?;
        let serde_json::Value::Object(map) = value else {
            return Err(Error::Io("CSV rows must serialize as flat records".into()));
        };
        if i == 0 {
            w.write_record(map.keys()).map_err(io)?;
        }
        let cells = map.values().map(|v| match v {
            serde_json::Value::Null => "NaN".to_string(),
            serde_json::Value::Number(n) if n.is_f64() => fmt_num(n.as_f64().unwrap_or(f64::NAN)),
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        });
        w.write_record(cells).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Driver summary: the config, seed, aggregates and band checks.
#[derive(Debug, Clone, Serialize)]
pub struct Summary<'a, T: Serialize> {
    pub driver: &'a str,
    pub config: &'a EnsembleConfig,
    pub seed: u64,
    pub result: T,
    pub checks: Vec<BandCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandCheck {
    pub name: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub pass: bool,
}

impl BandCheck {
    pub fn new(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        BandCheck {
            name: name.into(),
            value,
            lo,
            hi,
            pass: value >= lo && value <= hi,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(f)?;
    Ok(())
}
