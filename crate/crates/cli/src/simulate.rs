use std::path::Path;

use serde::Serialize;
use stagcomp::ensembles::{Case, EnsembleConfig};
use stagcomp::experiments::{
    coverage_from_records, run_mse_vs_incoherence, run_mse_vs_rank, run_qq, run_runtime,
    run_trials, runtime_config, write_csv, write_json, BandCheck, RunOptions, Summary, TrialRow,
};
use stagcomp::{Error, Result};

use crate::manifest::Context;
use crate::{BenchArgs, Driver, SimulateArgs};

fn invalid(pointer: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

fn parse_entry(text: &str, cfg: &EnsembleConfig) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let parse = |s: &str, max: usize| -> Option<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v >= 1 && v <= max)
            .map(|v| v - 1)
    };
    match parts.as_slice() {
        [i, t] => match (parse(i, cfg.n), parse(t, cfg.t)) {
            (Some(i), Some(t)) => Ok((i, t)),
            _ => Err(invalid(
                "/entry",
                format!("{text:?} is outside 1..={},1..={}", cfg.n, cfg.t),
            )),
        },
        _ => Err(invalid(
            "/entry",
            format!("expected unit,period, got {text:?}"),
        )),
    }
}

fn load_config(args: &SimulateArgs, seed: Option<u64>) -> Result<EnsembleConfig> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| invalid("/config", "the driver needs --config"))?;
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut cfg = EnsembleConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn finish<T: Serialize>(
    ctx: &Context,
    args: &impl Serialize,
    out: &Path,
    driver: &str,
    cfg: &EnsembleConfig,
    result: T,
    checks: Vec<BandCheck>,
) -> Result<()> {
    let summary = Summary {
        driver,
        config: cfg,
        seed: cfg.seed,
        result,
        checks,
    };
    write_json(&out.join(format!("{driver}_summary.json")), &summary)?;
    ctx.write_manifest(&out.join("manifest.json"), driver, args, cfg.seed)
}

fn runtime_checks(rows: &[stagcomp::experiments::RuntimeRow]) -> Vec<BandCheck> {
    rows.windows(2)
        .filter(|w| w[1].n == 2 * w[0].n)
        .map(|w| {
            BandCheck::new(
                format!("time ratio {} -> {}", w[0].n, w[1].n),
                w[1].median_seconds / w[0].median_seconds,
                2.5,
                6.0,
            )
        })
        .collect()
}

fn run_runtime_driver(
    ctx: &Context,
    args: &impl Serialize,
    out: &Path,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<()> {
    if sizes.is_empty() {
        return Err(invalid("/sizes", "at least one size is required"));
    }
    if let Some(&bad) = sizes.iter().find(|&&n| n < 5) {
        return Err(invalid(
            "/sizes",
            format!("size {bad} is too small for three groups"),
        ));
    }
    if repeats == 0 {
        return Err(invalid("/repeats", "must be at least 1"));
    }
    ensure_dir(out)?;
    let rows = run_runtime(sizes, repeats, seed)?;
    write_csv(&out.join("runtime.csv"), &rows)?;
    let checks = runtime_checks(&rows);
    finish(
        ctx,
        args,
        out,
        "runtime",
        &runtime_config(sizes[0], seed),
        &rows,
        checks,
    )
}

pub fn simulate(ctx: &Context, args: &SimulateArgs) -> Result<()> {
    if args.driver == Driver::Runtime {
        return run_runtime_driver(
            ctx,
            args,
            &args.out,
            &args.sizes,
            args.repeats,
            ctx.seed.unwrap_or(0),
        );
    }
    let cfg = load_config(args, ctx.seed)?;
    if args.trials == 0 {
        return Err(invalid("/trials", "must be at least 1"));
    }
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Error::BadAlpha(args.alpha));
    }
    let opts = RunOptions {
        trials: args.trials,
        entry: args
            .entry
            .as_deref()
            .map(|e| parse_entry(e, &cfg))
            .transpose()?,
        alpha: args.alpha,
        workers: ctx.workers,
    };
    let out = &args.out;
    ensure_dir(out)?;

    match args.driver {
        Driver::Incoherence => {
            let rows = run_mse_vs_incoherence(&cfg, &args.levels, &opts)?;
            write_csv(&out.join("incoherence.csv"), &rows)?;
            let checks = rows
                .iter()
                .filter(|r| !(cfg.case == Case::Case2 && r.level < 1e-2))
                .map(|r| {
                    BandCheck::new(
                        format!("mse/gamma* at level {}", r.level),
                        r.ratio,
                        0.85,
                        1.15,
                    )
                })
                .collect();
            finish(ctx, args, out, "incoherence", &cfg, &rows, checks)
        }
        Driver::Rank => {
            let sweep = run_mse_vs_rank(&cfg, &args.ranks, &opts)?;
            write_csv(&out.join("rank.csv"), &sweep.rows)?;
            let checks = match cfg.case {
                Case::Case1 => vec![BandCheck::new("log-log slope", sweep.slope, 0.75, 1.25)],
                Case::Case2 => vec![BandCheck::new("log-log slope", sweep.slope, 1.2, 1.8)],
                Case::Custom => vec![],
            };
            finish(ctx, args, out, "rank", &cfg, &sweep, checks)
        }
        Driver::Qq => {
            if args.trials < 50 {
                return Err(invalid("/trials", "the qq driver needs at least 50 trials"));
            }
            let qq = run_qq(&cfg, &opts)?;
            write_csv(&out.join("qq.csv"), &qq.rows)?;
            let checks = if qq.degenerate {
                vec![]
            } else {
                vec![
                    BandCheck::new("KS distance, plug-in variance", qq.ks, 0.0, 0.08),
                    BandCheck::new("KS distance, true variance", qq.ks_star, 0.0, 0.08),
                ]
            };
            let summary = serde_json::json!({ "ks": qq.ks, "ks_star": qq.ks_star, "degenerate": qq.degenerate });
            finish(ctx, args, out, "qq", &cfg, summary, checks)
        }
        Driver::Coverage => {
            let records = run_trials(&cfg, &opts)?;
            let rows: Vec<TrialRow> = records.iter().map(TrialRow::from).collect();
            write_csv(&out.join("coverage.csv"), &rows)?;
            let cov = coverage_from_records(&records, opts.entry_for(&cfg), opts.alpha);
            let target = 1.0 - args.alpha;
            let checks = vec![BandCheck::new(
                "coverage",
                cov.coverage,
                target - 0.02,
                target + 0.02,
            )];
            finish(ctx, args, out, "coverage", &cfg, &cov, checks)
        }
        Driver::Runtime => unreachable!("handled above"),
    }
}

pub fn bench(ctx: &Context, args: &BenchArgs) -> Result<()> {
    run_runtime_driver(
        ctx,
        args,
        &args.out,
        &args.sizes,
        args.repeats,
        ctx.seed.unwrap_or(0),
    )
}
