use std::path::Path;

use super::run::ExperimentResult;
use crate::dataset::format_real;
use crate::error::{Error, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

/// `estimator,c,grouping,n,replicate,mse,ratio`, one row per successful
/// replicate and estimator.
pub fn write_results_csv(experiments: &[ExperimentResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["estimator", "c", "grouping", "n", "replicate", "mse", "ratio"])
        .map_err(csv_err(path))?;
    for exp in experiments {
        let cfg = &exp.config;
        for rep in exp.successes() {
            for r in &rep.results {
                w.write_record([
                    r.estimator.name().to_string(),
                    format_real(cfg.c),
                    cfg.grouping.name().to_string(),
                    cfg.n1().to_string(),
                    rep.replicate.to_string(),
                    format_real(r.mse),
                    format_real(r.ratio),
                ])
                .map_err(csv_err(path))?;
            }
        }
    }
    finish(w, path)
}

/// `estimator,c,grouping,n,mean_ratio,sd_ratio,n_ok,n_failed,ratio_of_means`.
pub fn write_summary_csv(experiments: &[ExperimentResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record([
        "estimator",
        "c",
        "grouping",
        "n",
        "mean_ratio",
        "sd_ratio",
        "n_ok",
        "n_failed",
        "ratio_of_means",
    ])
    .map_err(csv_err(path))?;
    for exp in experiments {
        let cfg = &exp.config;
        let failed = exp.failure_count();
        for s in exp.summary() {
            w.write_record([
                s.estimator.name().to_string(),
                format_real(cfg.c),
                cfg.grouping.name().to_string(),
                cfg.n1().to_string(),
                format_real(s.mean_ratio),
                format_real(s.sd_ratio),
                s.n_ok.to_string(),
                failed.to_string(),
                format_real(s.ratio_of_means),
            ])
            .map_err(csv_err(path))?;
        }
    }
    finish(w, path)
}

/// Long format for box plots of the ratios: one panel per grouping and
/// site size, the heterogeneity scale on the x axis, one box per estimator.
/// LOC is omitted since its ratio is identically one.
pub fn write_plot_csv(experiments: &[ExperimentResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["panel", "x_c", "box", "replicate", "ratio", "log10_ratio"])
        .map_err(csv_err(path))?;
    for exp in experiments {
        let cfg = &exp.config;
        let panel = format!("{}_n{}", cfg.grouping.name(), cfg.n1());
        for rep in exp.successes() {
            for r in rep.results.iter().skip(1) {
                w.write_record([
                    panel.clone(),
                    format_real(cfg.c),
                    r.estimator.name().to_string(),
                    rep.replicate.to_string(),
                    format_real(r.ratio),
                    format_real(r.ratio.log10()),
                ])
                .map_err(csv_err(path))?;
            }
        }
    }
    finish(w, path)
}
