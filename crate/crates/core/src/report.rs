//! Fixed-schema CSV outputs.
//!
//! Floats are written in Rust's shortest round-trip form. Terms a mode never
//! evaluates are left empty rather than written as zero.

use std::fmt::Write as _;

use crate::metrics::{std_dev, EvalResult};
use crate::train::{ExperimentReport, Mode, RunRecord};

pub const TRAIN_LOG_HEADER: &str = "mode,seed,epoch,l_seg,l_ufd,l_ifd,l_upd,l_ipd,l_h";
pub const SUMMARY_HEADER: &str = "mode,seed,dsc_mean,dsc_std,rvd_mean,rvd_std";
pub const SWEEP_HEADER: &str = "beta,lambda,mode,seed,dsc,rvd";
pub const PER_SAMPLE_HEADER: &str = "id,dsc,rvd";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn train_log_csv(records: &[&RunRecord]) -> String {
    let mut out = format!("{TRAIN_LOG_HEADER}\n");
    for r in records {
        for e in &r.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.mode.as_str(),
                r.seed,
                e.epoch,
                e.l_seg,
                opt(e.l_ufd),
                opt(e.l_ifd),
                opt(e.l_upd),
                opt(e.l_ipd),
                e.l_h
            );
        }
    }
    out
}

/// Per-sample mean and sample standard deviation of one evaluated run.
pub fn summary_row(label: &str, seed: &str, eval: &EvalResult) -> String {
    let d: Vec<f64> = eval.per_sample.iter().map(|s| s.dsc).collect();
    let v: Vec<f64> = eval.per_sample.iter().filter_map(|s| s.rvd).collect();
    format!(
        "{label},{seed},{},{},{},{}",
        eval.dsc,
        std_dev(&d),
        eval.rvd,
        std_dev(&v)
    )
}

/// One row per evaluated run, then one `all` row per mode carrying the mean
/// and standard deviation of the per-run means.
pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    let mut modes: Vec<Mode> = Vec::new();
    for row in report.teacher_evals.iter().chain(&report.rows) {
        let _ = writeln!(out, "{}", summary_row(row.mode.as_str(), &row.seed.to_string(), &row.eval));
        if !modes.contains(&row.mode) {
            modes.push(row.mode);
        }
    }
    for m in modes {
        if let Some(s) = report.summary(m) {
            let _ = writeln!(
                out,
                "{},all,{},{},{},{}",
                m.as_str(),
                s.dsc_mean,
                s.dsc_std,
                s.rvd_mean,
                s.rvd_std
            );
        }
    }
    out
}

pub fn sweep_csv(report: &ExperimentReport) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in &report.sweep {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.beta,
            r.lambda,
            Mode::Hlfd.as_str(),
            r.seed,
            r.eval.dsc,
            r.eval.rvd
        );
    }
    out
}

pub fn per_sample_csv(eval: &EvalResult) -> String {
    let mut out = format!("{PER_SAMPLE_HEADER}\n");
    for s in &eval.per_sample {
        let _ = writeln!(out, "{},{},{}", s.id, s.dsc, opt(s.rvd));
    }
    out
}
