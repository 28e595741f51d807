use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use hlfd_core::checkpoint::{load_checkpoint, save_checkpoint};
use hlfd_core::config::ExperimentConfig;
use hlfd_core::data::{split, synth_generate, SegSample};
use hlfd_core::gradcam::{gradcam, inside_outside, TapSelector};
use hlfd_core::gradcheck::{standard_suite, SUITE_TOLERANCE};
use hlfd_core::metrics::FOREGROUND;
use hlfd_core::nets::{NetKind, SegNet};
use hlfd_core::pnm::{encode_overlay_ppm, encode_pgm};
use hlfd_core::report::{per_sample_csv, summary_csv, summary_row, sweep_csv, train_log_csv, SUMMARY_HEADER};
use hlfd_core::segv::{load_segv, save_segv};
use hlfd_core::train::{
    distill_student, evaluate, run_experiment, train_teacher, EpochLosses, ExperimentPlan, Mode,
};
use hlfd_core::HlfdError;

use crate::{Cli, Cmd, Split};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Core(HlfdError),
    GradcheckFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::GradcheckFailed(_) => EXIT_NUMERIC,
            CliError::Core(e) => match e {
                HlfdError::Config(_) | HlfdError::InvalidArgument(_) | HlfdError::Shape { .. } => EXIT_CONFIG,
                HlfdError::Io(_)
                | HlfdError::BadMagic { .. }
                | HlfdError::Truncated { .. }
                | HlfdError::TruncatedCheckpoint(_)
                | HlfdError::InvalidLabel { .. }
                | HlfdError::Malformed(_) => EXIT_IO,
                HlfdError::NonFinite { .. } | HlfdError::Diverged { .. } | HlfdError::EmptyGroundTruth => EXIT_NUMERIC,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::GradcheckFailed(n) => write!(f, "{n} gradient check(s) above {SUITE_TOLERANCE:e}"),
        }
    }
}

impl From<HlfdError> for CliError {
    fn from(e: HlfdError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(HlfdError::Io(e))
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn summary(line: impl fmt::Display) {
    println!("{} {line}", chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ"));
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| HlfdError::Config(format!("cannot read config {}: {e}", p.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        // Only `synth` draws new data; elsewhere the split must stay put.
        if matches!(cli.cmd, Cmd::Synth) {
            cfg.synth.seed = seed;
        }
        cfg.train.seeds = vec![seed];
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn data_path(cli: &Cli, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| cli.out.join("dataset.segv"))
}

/// Loads the dataset, makes the network input size follow it, and splits.
fn load_data(cfg: &mut ExperimentConfig, path: &Path) -> Result<(Vec<SegSample>, Vec<SegSample>, Vec<SegSample>)> {
    let all = load_segv(path)?;
    let first = all
        .first()
        .ok_or_else(|| HlfdError::Config(format!("{} holds no samples", path.display())))?;
    cfg.synth.size = first.size();
    cfg.sync_sizes();
    cfg.validate()?;
    let (train, test) = split(&all, cfg.train_fraction, cfg.synth.seed)?;
    Ok((all, train, test))
}

fn pick(split: Split, all: Vec<SegSample>, train: Vec<SegSample>, test: Vec<SegSample>) -> Vec<SegSample> {
    match split {
        Split::Train => train,
        Split::Test => test,
        Split::All => all,
    }
}

fn progress(verbose: bool) -> impl FnMut(Mode, u64, &EpochLosses) {
    move |mode, seed, e| {
        if verbose {
            eprintln!(
                "{} seed {seed} epoch {}: l_seg {:.5} l_h {:.5}",
                mode.as_str(),
                e.epoch,
                e.l_seg,
                e.l_h
            );
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Synth => synth(cli),
        Cmd::TrainTeacher { data } => train_teacher_cmd(cli, data),
        Cmd::Distill { data, teacher, mode } => distill(cli, data, teacher, mode),
        Cmd::Eval {
            data,
            checkpoint,
            split,
            label,
        } => eval(cli, data, checkpoint, *split, label),
        Cmd::Sweep { data, teacher } => experiment(cli, data, Some(teacher), true, false),
        Cmd::Gradcheck => gradcheck(cli),
        Cmd::Gradcam {
            data,
            checkpoint,
            split,
            count,
        } => gradcam_cmd(cli, data, checkpoint, *split, *count),
        Cmd::Experiment { data, teacher, sweep } => experiment(cli, data, teacher.as_ref(), *sweep, true),
    }
}

fn synth(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let samples = synth_generate(&cfg.synth)?;
    let path = cli.out.join("dataset.segv");
    fs::create_dir_all(&cli.out)?;
    save_segv(&path, &samples)?;
    let fg: Vec<f64> = samples.iter().map(|s| s.mask.foreground_fraction()).collect();
    let mean = fg.iter().sum::<f64>() / fg.len().max(1) as f64;
    let (lo, hi) = fg
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    summary(format_args!(
        "synth samples={} size={}x{} foreground_mean={mean:.4} foreground_range=[{lo:.4},{hi:.4}] out={}",
        samples.len(),
        cfg.synth.size.0,
        cfg.synth.size.1,
        path.display()
    ));
    Ok(())
}

fn train_teacher_cmd(cli: &Cli, data: &Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let (_, train, test) = load_data(&mut cfg, &data_path(cli, data))?;
    let seed = cfg.train.seeds[0];
    let (teacher, mut rec) = train_teacher(&cfg.train, seed, &train, &mut progress(cli.verbose))?;
    let ev = evaluate(&teacher, &test)?;
    rec.eval = Some(ev.clone());
    let ckpt = cli.out.join("teacher.ckpt");
    fs::create_dir_all(&cli.out)?;
    save_checkpoint(&ckpt, &teacher)?;
    write(&cli.out.join("teacher_log.csv"), train_log_csv(&[&rec]))?;
    summary(format_args!(
        "train-teacher seed={seed} epochs={} params={} test_dsc={:.4} test_rvd={:.4} seconds={:.1} out={}",
        rec.epochs.len(),
        teacher.params().count(),
        ev.dsc,
        ev.rvd,
        rec.wall_seconds,
        ckpt.display()
    ));
    Ok(())
}

fn load_teacher(path: &Path) -> Result<hlfd_core::nets::TeacherNet> {
    let net = load_checkpoint(path)?;
    Ok(net
        .into_teacher()
        .map_err(|e| HlfdError::Config(format!("{}: {e}", path.display())))?)
}

fn distill(cli: &Cli, data: &Option<PathBuf>, teacher: &Path, mode: &str) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let mode = Mode::parse(mode)?;
    if mode == Mode::Teacher {
        return Err(HlfdError::invalid("distill needs a student mode: hlfd, no_kd or late_only_ablation").into());
    }
    let (_, train, test) = load_data(&mut cfg, &data_path(cli, data))?;
    let teacher = load_teacher(teacher)?;
    let seed = cfg.train.seeds[0];
    let (student, mut rec) = distill_student(&cfg.train, mode, seed, &teacher, &train, &mut progress(cli.verbose))?;
    let ev = evaluate(&student, &test)?;
    rec.eval = Some(ev.clone());
    fs::create_dir_all(&cli.out)?;
    let ckpt = cli.out.join(format!("student_{}.ckpt", mode.as_str()));
    save_checkpoint(&ckpt, &student)?;
    write(&cli.out.join(format!("train_log_{}.csv", mode.as_str())), train_log_csv(&[&rec]))?;
    summary(format_args!(
        "distill mode={} seed={seed} epochs={} params={} test_dsc={:.4} test_rvd={:.4} seconds={:.1} out={}",
        mode.as_str(),
        rec.epochs.len(),
        student.params().count(),
        ev.dsc,
        ev.rvd,
        rec.wall_seconds,
        ckpt.display()
    ));
    Ok(())
}

fn eval(cli: &Cli, data: &Option<PathBuf>, checkpoint: &Path, which: Split, label: &Option<String>) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let (all, train, test) = load_data(&mut cfg, &data_path(cli, data))?;
    let samples = pick(which, all, train, test);
    let net = load_checkpoint(checkpoint)?;
    let ev = evaluate(net.as_net(), &samples)?;
    let label = label.clone().unwrap_or_else(|| match net.as_net().kind() {
        NetKind::Teacher => "teacher".into(),
        NetKind::Student => "student".into(),
    });
    let seed = net.as_net().config().seed.to_string();
    fs::create_dir_all(&cli.out)?;
    write(&cli.out.join("eval.csv"), per_sample_csv(&ev))?;
    write(
        &cli.out.join("eval_summary.csv"),
        format!("{SUMMARY_HEADER}\n{}\n", summary_row(&label, &seed, &ev)),
    )?;
    summary(format_args!(
        "eval checkpoint={} samples={} dsc={:.4} rvd={:.4} rvd_excluded={}",
        checkpoint.display(),
        samples.len(),
        ev.dsc,
        ev.rvd,
        ev.rvd_excluded
    ));
    Ok(())
}

fn gradcheck(_cli: &Cli) -> Result<()> {
    let results = standard_suite(0)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        eprintln!("{:<24} {:>10.3e} {status}", r.name, r.max_rel_err);
    }
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    summary(format_args!(
        "gradcheck checks={} failed={failed} max_rel_err={worst:.3e} tolerance={SUITE_TOLERANCE:e}",
        results.len()
    ));
    if failed > 0 {
        return Err(CliError::GradcheckFailed(failed));
    }
    Ok(())
}

fn gradcam_cmd(cli: &Cli, data: &Option<PathBuf>, checkpoint: &Path, which: Split, count: usize) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let (all, train, test) = load_data(&mut cfg, &data_path(cli, data))?;
    let samples = pick(which, all, train, test);
    let net = load_checkpoint(checkpoint)?;
    let take = if count == 0 { samples.len() } else { count.min(samples.len()) };
    let dir = cli.out.join("gradcam");
    fs::create_dir_all(&dir)?;
    let mut csv = String::from("id,tap,mean_inside,mean_outside\n");
    let mut focused = 0;
    let mut scored = 0;
    for s in &samples[..take] {
        let (h, w) = s.size();
        let x = s.image.clone().reshape(vec![1, s.image.shape()[0], h, w])?;
        for tap in [TapSelector::Early, TapSelector::Late] {
            let heat = gradcam(net.as_net(), &x, tap, FOREGROUND)?;
            write(&dir.join(format!("{}_{}.pgm", s.id, tap.as_str())), encode_pgm(&heat)?)?;
            let (inside, outside) = inside_outside(&heat, &s.mask)?;
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            csv.push_str(&format!("{},{},{},{}\n", s.id, tap.as_str(), fmt(inside), fmt(outside)));
            if let (TapSelector::Early, Some(i), Some(o)) = (tap, inside, outside) {
                scored += 1;
                if i > o {
                    focused += 1;
                }
            }
        }
        write(&dir.join(format!("{}_overlay.ppm", s.id)), encode_overlay_ppm(&s.image, &s.mask)?)?;
    }
    write(&cli.out.join("gradcam.csv"), csv)?;
    summary(format_args!(
        "gradcam samples={take} early_focused={focused}/{scored} out={}",
        dir.display()
    ));
    Ok(())
}

fn experiment(cli: &Cli, data: &Option<PathBuf>, teacher: Option<&PathBuf>, sweep: bool, all_modes: bool) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let (_, train, test) = load_data(&mut cfg, &data_path(cli, data))?;
    let plan = ExperimentPlan {
        modes: if all_modes { Mode::STUDENT_MODES.to_vec() } else { Vec::new() },
        sweep,
        teacher: teacher.map(|p| load_teacher(p)).transpose()?,
        ..ExperimentPlan::default()
    };
    let report = run_experiment(&cfg.train, &plan, &train, &test, &mut progress(cli.verbose))?;
    fs::create_dir_all(&cli.out)?;
    if sweep {
        write(&cli.out.join("sweep.csv"), sweep_csv(&report))?;
    }
    if all_modes {
        let recs: Vec<_> = report.teacher_records.iter().chain(&report.records).collect();
        write(&cli.out.join("train_log.csv"), train_log_csv(&recs))?;
        write(&cli.out.join("summary.csv"), summary_csv(&report))?;
        let parts: Vec<String> = Mode::STUDENT_MODES
            .iter()
            .chain(&[Mode::Teacher])
            .filter_map(|&m| report.summary(m))
            .map(|s| format!("{}={:.4}±{:.4}", s.mode.as_str(), s.dsc_mean, s.dsc_std))
            .collect();
        summary(format_args!("experiment seeds={} dsc {}", cfg.train.seeds.len(), parts.join(" ")));
    } else {
        let parts: Vec<String> = report
            .sweep_means()
            .iter()
            .map(|((b, l), d)| format!("({b},{l})={d:.4}"))
            .collect();
        summary(format_args!("sweep seeds={} dsc {}", cfg.train.seeds.len(), parts.join(" ")));
    }
    Ok(())
}
