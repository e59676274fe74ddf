use std::fs::File;
use std::io::{self, Write};

use nalgebra::DMatrix;
use stagcomp::estimator::{estimate_with_pattern, StaggeredEstimate};
use stagcomp::inference::infer_staggered;
use stagcomp::io::{
    fmt_num, panel_from_table, panel_with_adoption_times, read_adoption_times, read_table_file,
    write_table, Table,
};
use stagcomp::panel::{detect_pattern, PanelObservation};
use stagcomp::{Error, Result};

use crate::manifest::{sibling, Context};
use crate::{InferArgs, PanelArgs};

fn load(args: &PanelArgs) -> Result<(Table, PanelObservation, StaggeredEstimate)> {
    let has_header = !args.no_header;
    let table = read_table_file(&args.input, has_header)?;
    let (panel, pattern) = match &args.adoption_times {
        Some(path) => {
            let f = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            let times = read_adoption_times(f, table.values.ncols(), has_header)?;
            panel_with_adoption_times(&table, times)?
        }
        None => {
            let panel = panel_from_table(&table)?;
            let pattern = detect_pattern(&panel)?;
            (panel, pattern)
        }
    };
    let est = estimate_with_pattern(&panel, pattern, args.rank)?;
    if let Some(err) = est.failures.values().next() {
        return Err(err.clone());
    }
    Ok((table, panel, est))
}

fn sink(path: Option<&std::path::Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            Box::new(File::create(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

pub fn estimate(ctx: &Context, args: &PanelArgs) -> Result<()> {
    let (table, panel, est) = load(args)?;
    let completed = est.completed(&panel);
    write_table(
        sink(args.out.as_deref())?,
        &completed,
        table.header.as_deref(),
    )?;

    if let Some(out) = &args.out {
        write_source(
            &sibling(out, "_source.csv"),
            panel.mask(),
            table.header.as_deref(),
        )?;
        ctx.write_manifest(
            &sibling(out, ".manifest.json"),
            "estimate",
            args,
            ctx.seed.unwrap_or(0),
        )?;
    }
    Ok(())
}

fn write_source(
    path: &std::path::Path,
    observed: &DMatrix<bool>,
    header: Option<&[String]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(
        File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
    );
    let io = |e: csv::Error| Error::Io(e.to_string());
    if let Some(h) = header {
        w.write_record(h).map_err(io)?;
    }
    for row in observed.row_iter() {
        w.write_record(
            row.iter()
                .map(|&obs| if obs { "observed" } else { "imputed" }),
        )
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn infer(ctx: &Context, args: &InferArgs) -> Result<()> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Error::BadAlpha(args.alpha));
    }
    let (_, panel, est) = load(&args.panel)?;
    let results = infer_staggered(&panel, &est, args.alpha)?;
    let treated = match &args.treated_outcomes {
        Some(path) => {
            let t = read_table_file(path, !args.panel.no_header)?;
            if t.values.shape() != (panel.n(), panel.t()) {
                return Err(Error::DimensionMismatch(format!(
                    "treated outcomes are {} x {} but the panel is {} x {}",
                    t.values.nrows(),
                    t.values.ncols(),
                    panel.n(),
                    panel.t()
                )));
            }
            Some(t.values)
        }
        None => None,
    };

    let mut w = csv::Writer::from_writer(sink(args.panel.out.as_deref())?);
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header = vec!["unit", "period", "estimate", "gamma_hat", "ci_lo", "ci_hi"];
    if treated.is_some() {
        header.extend(["tau_hat", "tau_ci_lo", "tau_ci_hi"]);
    }
    w.write_record(&header).map_err(io)?;
    for r in &results {
        let mut row = vec![
            (r.unit + 1).to_string(),
            (r.period + 1).to_string(),
            fmt_num(r.estimate),
            fmt_num(r.gamma_hat),
            fmt_num(r.ci_lo),
            fmt_num(r.ci_hi),
        ];
        if let Some(y) = &treated {
            let y = y[(r.unit, r.period)];
            if y.is_finite() {
                row.extend([
                    fmt_num(y - r.estimate),
                    fmt_num(y - r.ci_hi),
                    fmt_num(y - r.ci_lo),
                ]);
            } else {
                row.extend([String::new(), String::new(), String::new()]);
            }
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;

    if let Some(out) = &args.panel.out {
        ctx.write_manifest(
            &sibling(out, ".manifest.json"),
            "infer",
            args,
            ctx.seed.unwrap_or(0),
        )?;
    }
    Ok(())
}
