//! Implementations of the subcommands.

use std::path::Path;

use matseg::forecasting::{baseline_forecasts, rolling_backtest, ForecastReport, Truth};
use matseg::segmentation::{CorrelationTable, SegmentationResult};
use matseg::simgen::{generate, run_replications, Design};
use matseg::transform::{fit_transform, from_latent, to_latent, TransformPair};
use matseg::WEstimate;
use serde::Serialize;

use crate::config::RunConfig;
use crate::io::{fmt_f64, json_document, read_matrix_series, read_series, write_series, write_text};
use crate::CliError;

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.output()?;
    let design = cfg.design()?;
    let (x, truth) = generate(design, cfg.t, cfg.p, cfg.q, cfg.seed)?;
    write_series(&out.join("x.csv"), x.as_slice(), 0, cfg)?;
    if let Some(mu) = &truth.cond_mean {
        write_series(&out.join("cond_mean.csv"), mu, 0, cfg)?;
    }
    if cfg.with_truth {
        write_text(&out.join("truth.json"), &json_document(cfg, "truth", &truth))?;
        if let Some(u) = &truth.u {
            write_series(&out.join("u.csv"), u.as_slice(), 0, cfg)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ModeReport<'a> {
    eigenvalues: Vec<f64>,
    eigengaps: &'a [f64],
    r_hat: usize,
    n_groups: usize,
    /// 1-based column indices of the transformed series in each group.
    groups: Vec<Vec<usize>>,
    ratios: &'a [f64],
    floor_triggered: bool,
    prewhiten_orders: &'a [usize],
    rho_table: &'a CorrelationTable,
}

impl<'a> ModeReport<'a> {
    fn new(w: &'a WEstimate, seg: &'a SegmentationResult) -> Self {
        Self {
            eigenvalues: w.eig.eigenvalues.iter().copied().collect(),
            eigengaps: &w.eigengaps,
            r_hat: seg.r_hat,
            n_groups: seg.n_groups,
            groups: seg.groups.iter().map(|g| g.iter().map(|k| k + 1).collect()).collect(),
            ratios: &seg.ratios,
            floor_triggered: seg.floor_triggered,
            prewhiten_orders: &seg.prewhiten_orders,
            rho_table: &seg.table,
        }
    }
}

#[derive(Serialize)]
struct SegmentReport<'a> {
    dims: (usize, usize, usize),
    columns: ModeReport<'a>,
    rows: ModeReport<'a>,
    transform: &'a TransformPair,
}

pub fn segment(cfg: &RunConfig) -> Result<(), CliError> {
    let x = read_matrix_series(cfg.input()?)?;
    let fitted = fit_transform(&x, &cfg.pipeline()?)?;
    let report = SegmentReport {
        dims: x.dims(),
        columns: ModeReport::new(&fitted.col_w, &fitted.col_segmentation),
        rows: ModeReport::new(&fitted.row_w, &fitted.row_segmentation),
        transform: &fitted.pair,
    };
    write_text(cfg.output()?, &json_document(cfg, "segmentation", &report))
}

fn read_transform(path: &Path) -> Result<TransformPair, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let pair: TransformPair = serde_json::from_value(doc.get("transform").cloned().unwrap_or(doc))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    pair.validate()?;
    Ok(pair)
}

/// Writes `latent.csv` (or `observed.csv` with `--inverse`) and `transform.json`.
///
/// The latent series is computed from the centred data; the inverse adds the mean back.
pub fn transform(cfg: &RunConfig) -> Result<(), CliError> {
    let x = read_matrix_series(cfg.input()?)?;
    let out = cfg.output()?;
    let pair = match &cfg.transform {
        Some(path) => read_transform(path)?,
        None if cfg.inverse => {
            return Err(CliError::Validation("--inverse needs a saved transform via --apply".into()));
        }
        None => fit_transform(&x, &cfg.pipeline()?)?.pair,
    };
    if cfg.inverse {
        let back = from_latent(&x, &pair)?.map(|m| m + &pair.mean)?;
        write_series(&out.join("observed.csv"), back.as_slice(), 0, cfg)?;
    } else {
        let u = to_latent(&x.map(|m| m - &pair.mean)?, &pair)?;
        write_series(&out.join("latent.csv"), u.as_slice(), 0, cfg)?;
    }
    write_text(&out.join("transform.json"), &json_document(cfg, "transform", &pair))
}

#[derive(Serialize)]
struct ForecastBundle<'a> {
    segmentation: &'a ForecastReport,
    baselines: &'a [ForecastReport],
}

/// `method,window,first_target,last_target,mspe` rows averaging `step_mse` over blocks of `week` targets.
fn windowed_mspe(reports: &[&ForecastReport], week: usize) -> String {
    let mut out = String::from("method,window,first_target,last_target,mspe\n");
    for r in reports {
        for (w, chunk) in r.step_mse.chunks(week).enumerate() {
            let first = r.target_index[w * week] + 1;
            let last = first + chunk.len() - 1;
            let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
            out.push_str(&format!("{},{},{first},{last},{}\n", r.method, w + 1, fmt_f64(mean)));
        }
    }
    out
}

pub fn forecast(cfg: &RunConfig) -> Result<(), CliError> {
    let x = read_matrix_series(cfg.input()?)?;
    let out = cfg.output()?;
    let (m, h) = (cfg.holdout, cfg.horizon);
    if m + h >= x.len() {
        return Err(CliError::Validation(format!("holdout {m} with horizon {h} needs T > {}, got {}", m + h, x.len())));
    }
    let mu = match &cfg.truth {
        Some(path) => {
            if h != 1 {
                return Err(CliError::Validation("a conditional-mean truth file scores one-step forecasts only".into()));
            }
            let mu = read_series(path)?;
            if mu.len() != x.len() || mu[0].shape() != x.get(0).shape() {
                return Err(CliError::Data(format!("{} does not align with the input series", path.display())));
            }
            Some(mu[x.len() - m..].to_vec())
        }
        None => None,
    };
    let truth = || match &mu {
        Some(v) => Truth::ConditionalMean(v),
        None => Truth::Realized,
    };
    let main = rolling_backtest(&x, m, h, cfg.scheme(false)?, &cfg.pipeline()?, truth())?;
    let baselines = cfg
        .baselines()?
        .into_iter()
        .map(|b| baseline_forecasts(&x, m, h, b, truth()))
        .collect::<matseg::Result<Vec<_>>>()?;
    let all: Vec<&ForecastReport> = std::iter::once(&main).chain(&baselines).collect();

    let bundle = ForecastBundle { segmentation: &main, baselines: &baselines };
    write_text(&out.join("forecast.json"), &json_document(cfg, "forecast", &bundle))?;

    let mut steps = crate::io::csv_preamble(cfg);
    steps.push_str("method,target,step_mse\n");
    for r in &all {
        for (s, v) in r.target_index.iter().zip(&r.step_mse) {
            steps.push_str(&format!("{},{},{}\n", r.method, s + 1, fmt_f64(*v)));
        }
    }
    write_text(&out.join("steps.csv"), &steps)?;

    let mut preds = crate::io::csv_preamble(cfg);
    preds.push_str("method,t,row,col,prediction,target\n");
    for r in &all {
        for ((s, p), tg) in r.target_index.iter().zip(&r.predictions).zip(&r.targets) {
            for i in 0..p.nrows() {
                for j in 0..p.ncols() {
                    preds.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        r.method,
                        s + 1,
                        i + 1,
                        j + 1,
                        fmt_f64(p[(i, j)]),
                        fmt_f64(tg[(i, j)])
                    ));
                }
            }
        }
    }
    write_text(&out.join("predictions.csv"), &preds)?;

    let mut weekly = crate::io::csv_preamble(cfg);
    weekly.push_str(&windowed_mspe(&all, cfg.week));
    write_text(&out.join("weekly_mspe.csv"), &weekly)?;
    for r in &all {
        println!("{:<16} mse {}", r.method, fmt_f64(r.mse));
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.output()?;
    let bench = cfg.bench()?;
    let report = run_replications(&bench, cfg.reps, cfg.seed)?;
    write_text(&out.join("report.json"), &json_document(cfg, "report", &report))?;
    let mut summary = crate::io::csv_preamble(cfg);
    summary.push_str(&report.summary_csv());
    write_text(&out.join("summary.csv"), &summary)?;
    for (k, s) in &report.summaries {
        println!("{k:<20} n {:>4}  mean {:.4}  sd {:.4}", s.n, s.mean, s.sd);
    }
    if bench.design != Design::Example1 {
        for (c, f) in &report.class_frequencies {
            println!("{:<20} {f:.3}", c.name());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn weekly_windows() {
        let r = ForecastReport {
            method: "m".into(),
            horizon: 1,
            holdout: 5,
            scheme: None,
            truth_kind: matseg::forecasting::TruthKind::Realized,
            target_index: vec![10, 11, 12, 13, 14],
            predictions: vec![DMatrix::zeros(1, 1); 5],
            targets: vec![DMatrix::zeros(1, 1); 5],
            errors: vec![DMatrix::zeros(1, 1); 5],
            step_mse: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            per_cell_mse: DMatrix::zeros(1, 1),
            mse: 3.0,
        };
        let csv = windowed_mspe(&[&r], 2);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("m,1,11,12,1.5"));
        assert!(lines[3].starts_with("m,3,15,15,5.0"));
    }
}
