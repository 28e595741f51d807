//! Teacher pretraining, student distillation, evaluation and multi-seed
//! experiments.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, Mask, SegSample};
use crate::error::{HlfdError, Result};
use crate::graph::{Graph, Var};
use crate::losses::{attention_loss, hlfd_total, DistillConfig};
use crate::metrics::{binarize, dsc, focal_dice_loss, mean, rvd, std_dev, EvalResult, FocalDiceConfig, SampleScore};
use crate::nets::{build_student, build_teacher, forward_taps, NetConfig, ParamMode, SegNet, StudentNet, TeacherNet};
use crate::optim::{adam_step, cosine_lr, AdamConfig, AdamState, DEFAULT_LR_MAX, DEFAULT_LR_MIN};
use crate::tensor::Tensor;

/// The three (β, λ) settings of the sensitivity study.
pub const SENSITIVITY_GRID: [(f64, f64); 3] = [(0.9, 0.1), (1.8, 0.1), (0.9, 0.2)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Teacher,
    Hlfd,
    NoKd,
    LateOnly,
}

impl Mode {
    pub const STUDENT_MODES: [Mode; 3] = [Mode::Hlfd, Mode::NoKd, Mode::LateOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Teacher => "teacher",
            Mode::Hlfd => "hlfd",
            Mode::NoKd => "no_kd",
            Mode::LateOnly => "late_only_ablation",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "teacher" => Ok(Mode::Teacher),
            "hlfd" => Ok(Mode::Hlfd),
            "no_kd" => Ok(Mode::NoKd),
            "late_only_ablation" | "late_only" => Ok(Mode::LateOnly),
            _ => Err(HlfdError::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Student epochs.
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub seeds: Vec<u64>,
    pub distill: DistillConfig,
    pub loss: FocalDiceConfig,
    /// Weight of the focal-dice terms on the teacher's non-final stage heads.
    pub deep_supervision: f64,
    pub augment: bool,
    pub teacher_net: NetConfig,
    pub student_net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            teacher_epochs: 40,
            batch_size: 8,
            lr_max: DEFAULT_LR_MAX,
            lr_min: DEFAULT_LR_MIN,
            adam: AdamConfig::default(),
            seeds: vec![0, 1, 2],
            distill: DistillConfig::default(),
            loss: FocalDiceConfig::default(),
            deep_supervision: 0.3,
            augment: true,
            teacher_net: NetConfig::teacher(),
            student_net: NetConfig::student(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.teacher_epochs == 0 || self.batch_size == 0 {
            return Err(HlfdError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(HlfdError::Config(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.seeds.is_empty() {
            return Err(HlfdError::Config("at least one seed is required".into()));
        }
        if !(self.deep_supervision >= 0.0) {
            return Err(HlfdError::Config("deep_supervision must be >= 0".into()));
        }
        self.distill.validate().map_err(|e| HlfdError::Config(e.to_string()))?;
        self.teacher_net.validate().map_err(|e| HlfdError::Config(format!("teacher: {e}")))?;
        self.student_net.validate().map_err(|e| HlfdError::Config(format!("student: {e}")))?;
        if self.teacher_net.input_size != self.student_net.input_size
            || self.teacher_net.num_mid != self.student_net.num_mid
            || self.teacher_net.num_classes != self.student_net.num_classes
        {
            return Err(HlfdError::Config(
                "teacher and student must share input size, num_mid and num_classes".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch mean of each loss term. Distillation terms a mode never
/// evaluates are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_seg: f64,
    pub l_ufd: Option<f64>,
    pub l_ifd: Option<f64>,
    pub l_upd: Option<f64>,
    pub l_ipd: Option<f64>,
    pub l_h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: Vec<EpochLosses>,
    pub eval: Option<EvalResult>,
    pub wall_seconds: f64,
    pub config_hash: String,
}

/// Called after each epoch with the run's mode and seed.
pub type Progress<'a> = &'a mut dyn FnMut(Mode, u64, &EpochLosses);

/// Images as N×C×H×W and masks of the listed samples.
pub fn batch_of<'a>(samples: &'a [SegSample], idx: &[usize]) -> Result<(Tensor, Vec<&'a Mask>)> {
    let images = idx
        .iter()
        .map(|&i| {
            let img = &samples[i].image;
            let mut shape = vec![1];
            shape.extend_from_slice(img.shape());
            img.clone().reshape(shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack_batch(&images)?, idx.iter().map(|&i| &samples[i].mask).collect()))
}

fn check_dataset(samples: &[SegSample], net: &NetConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(HlfdError::invalid("empty dataset"));
    }
    for s in samples {
        if s.size() != net.input_size || s.image.shape()[0] != net.in_channels {
            return Err(HlfdError::shape(
                "dataset",
                format!(
                    "sample {} is {:?}, network expects {} channel(s) at {:?}",
                    s.id,
                    s.image.shape(),
                    net.in_channels,
                    net.input_size
                ),
            ));
        }
    }
    Ok(())
}

/// Shared mini-batch loop: shuffling, augmentation, the cosine schedule and
/// the Adam update. `step` builds the loss on `g` and returns it along with
/// the trainable parameter vars and the per-term values to average.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    epochs: usize,
    mode: Mode,
    seed: u64,
}

const TERMS: usize = 6;

impl Loop<'_> {
    fn run<N, F>(&self, net: &mut N, train: &[SegSample], mut step: F, progress: Progress) -> Result<Vec<EpochLosses>>
    where
        N: SegNet + ?Sized,
        F: FnMut(&mut Graph, &N, Var, &[&Mask]) -> Result<(Var, Vec<Var>, [Option<f64>; TERMS])>,
    {
        let cfg = self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut adam = AdamState::new(&net.params().tensors.iter().collect::<Vec<_>>());
        let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
        let total = self.epochs * steps_per_epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut records = Vec::with_capacity(self.epochs);
        for epoch in 0..self.epochs {
            order.shuffle(&mut rng);
            let mut sums = [0.0; TERMS];
            let mut seen = [false; TERMS];
            for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let diverged = |_| HlfdError::Diverged { epoch, step: i };
                let batch: Vec<SegSample> = if cfg.augment {
                    chunk.iter().map(|&j| augment(&train[j], &mut rng)).collect::<Result<_>>()?
                } else {
                    chunk.iter().map(|&j| train[j].clone()).collect()
                };
                let idx: Vec<usize> = (0..batch.len()).collect();
                let (x, masks) = batch_of(&batch, &idx)?;
                let mut g = Graph::new();
                let xv = g.constant(x);
                let (loss, params, terms) = match step(&mut g, net, xv, &masks) {
                    Err(HlfdError::NonFinite { .. }) => return Err(HlfdError::Diverged { epoch, step: i }),
                    other => other?,
                };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(HlfdError::Diverged { epoch, step: i });
                }
                g.backward(loss).map_err(diverged)?;
                let grads: Vec<Option<Tensor>> = params.iter().map(|&p| g.grad(p)).collect();
                let lr = cosine_lr(epoch * steps_per_epoch + i, total, cfg.lr_max, cfg.lr_min)?;
                let mut tensors: Vec<&mut Tensor> = net.params_mut().tensors.iter_mut().collect();
                adam_step(&mut tensors, &grads, &mut adam, lr, &cfg.adam)?;
                if tensors.iter().any(|t| !t.all_finite()) {
                    return Err(HlfdError::Diverged { epoch, step: i });
                }
                for (k, t) in terms.iter().enumerate() {
                    if let Some(v) = t {
                        sums[k] += v;
                        seen[k] = true;
                    }
                }
            }
            let avg = |k: usize| seen[k].then(|| sums[k] / steps_per_epoch as f64);
            let rec = EpochLosses {
                epoch,
                l_seg: avg(0).unwrap_or(0.0),
                l_ufd: avg(1),
                l_ifd: avg(2),
                l_upd: avg(3),
                l_ipd: avg(4),
                l_h: avg(5).unwrap_or(0.0),
            };
            progress(self.mode, self.seed, &rec);
            records.push(rec);
        }
        Ok(records)
    }
}

/// Teacher with the seed substituted into its network config.
pub fn fresh_teacher(cfg: &TrainConfig, seed: u64) -> Result<TeacherNet> {
    build_teacher(&NetConfig { seed, ..cfg.teacher_net.clone() })
}

pub fn fresh_student(cfg: &TrainConfig, seed: u64) -> Result<StudentNet> {
    build_student(&NetConfig { seed, ..cfg.student_net.clone() })
}

/// Focal-dice on the final logits plus `deep_supervision`-weighted focal-dice
/// on every earlier stage head against majority-downsampled masks.
pub fn train_teacher(
    cfg: &TrainConfig,
    seed: u64,
    train: &[SegSample],
    progress: Progress,
) -> Result<(TeacherNet, RunRecord)> {
    cfg.validate()?;
    check_dataset(train, &cfg.teacher_net)?;
    let started = Instant::now();
    let mut net = fresh_teacher(cfg, seed)?;
    let (h, _) = cfg.teacher_net.input_size;
    let step = |g: &mut Graph, net: &TeacherNet, x: Var, masks: &[&Mask]| {
        let (out, params) = forward_taps(net, g, x, ParamMode::Trainable)?;
        let mut loss = focal_dice_loss(g, out.logits, masks, &cfg.loss)?;
        let last = out.stage_logits.len() - 1;
        for &sl in &out.stage_logits[..last] {
            let sh = g.value(sl).shape()[2];
            let small: Vec<Mask> = masks.iter().map(|m| m.downsample(h / sh)).collect::<Result<_>>()?;
            let refs: Vec<&Mask> = small.iter().collect();
            let l = focal_dice_loss(g, sl, &refs, &cfg.loss)?;
            let l = g.scale(l, cfg.deep_supervision)?;
            loss = g.add(loss, l)?;
        }
        let v = g.value(loss).item();
        Ok((loss, params, [Some(v), None, None, None, None, Some(v)]))
    };
    let lp = Loop {
        cfg,
        epochs: cfg.teacher_epochs,
        mode: Mode::Teacher,
        seed,
    };
    let epochs = lp.run(&mut net, train, step, progress)?;
    let record = RunRecord {
        mode: Mode::Teacher,
        seed,
        epochs,
        eval: None,
        wall_seconds: started.elapsed().as_secs_f64(),
        config_hash: crate::config::config_hash(cfg),
    };
    Ok((net, record))
}

/// Trains a fresh student against the frozen teacher. `hlfd` minimizes the
/// full combined objective, `no_kd` only the supervised term, and
/// `late_only_ablation` the supervised term plus β times the attention loss
/// between the two late taps.
pub fn distill_student(
    cfg: &TrainConfig,
    mode: Mode,
    seed: u64,
    teacher: &TeacherNet,
    train: &[SegSample],
    progress: Progress,
) -> Result<(StudentNet, RunRecord)> {
    if mode == Mode::Teacher {
        return Err(HlfdError::Config("distill needs mode hlfd, no_kd or late_only_ablation".into()));
    }
    cfg.validate()?;
    let tcfg = teacher.config();
    let scfg = &cfg.student_net;
    if tcfg.input_size != scfg.input_size || tcfg.num_mid != scfg.num_mid || tcfg.num_classes != scfg.num_classes {
        return Err(HlfdError::Config(
            "teacher checkpoint does not match the student's input size, num_mid or num_classes".into(),
        ));
    }
    check_dataset(train, scfg)?;
    let started = Instant::now();
    let mut net = fresh_student(cfg, seed)?;
    let dcfg = cfg.distill;
    let step = |g: &mut Graph, net: &StudentNet, x: Var, masks: &[&Mask]| {
        let (s, params) = forward_taps(net, g, x, ParamMode::Trainable)?;
        let l_seg = focal_dice_loss(g, s.logits, masks, &cfg.loss)?;
        let seg = g.value(l_seg).item();
        match mode {
            Mode::NoKd => Ok((l_seg, params, [Some(seg), None, None, None, None, Some(seg)])),
            Mode::LateOnly => {
                let (t, _) = forward_taps(teacher, g, x, ParamMode::Frozen)?;
                let l = attention_loss(g, s.features.z_late, t.features.z_late, &dcfg)?;
                let lv = g.value(l).item();
                let wl = g.scale(l, dcfg.beta)?;
                let total = g.add(l_seg, wl)?;
                let h = g.value(total).item();
                Ok((total, params, [Some(seg), None, Some(lv), None, None, Some(h)]))
            }
            Mode::Hlfd => {
                let (t, _) = forward_taps(teacher, g, x, ParamMode::Frozen)?;
                let (vars, b) = hlfd_total(
                    g,
                    l_seg,
                    (&s.features, &s.predictions),
                    (&t.features, &t.predictions),
                    &dcfg,
                )?;
                Ok((
                    vars.l_h,
                    params,
                    [Some(b.l_seg), Some(b.l_ufd), Some(b.l_ifd), Some(b.l_upd), Some(b.l_ipd), Some(b.l_h)],
                ))
            }
            Mode::Teacher => unreachable!(),
        }
    };
    let lp = Loop {
        cfg,
        epochs: cfg.epochs,
        mode,
        seed,
    };
    let epochs = lp.run(&mut net, train, step, progress)?;
    let record = RunRecord {
        mode,
        seed,
        epochs,
        eval: None,
        wall_seconds: started.elapsed().as_secs_f64(),
        config_hash: crate::config::config_hash(cfg),
    };
    Ok((net, record))
}

const EVAL_BATCH: usize = 16;

fn score_range<N: SegNet + ?Sized>(net: &N, samples: &[SegSample]) -> Result<Vec<SampleScore>> {
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, masks) = batch_of(samples, chunk)?;
        let logits = crate::nets::predict_logits(net, &x)?;
        for (b, (&i, gt)) in chunk.iter().zip(masks).enumerate() {
            let pred = binarize(&logits.batch_item(b)?)?;
            let r = match rvd(&pred, gt) {
                Ok(v) => Some(v),
                Err(HlfdError::EmptyGroundTruth) => None,
                Err(e) => return Err(e),
            };
            out.push(SampleScore {
                id: samples[i].id.clone(),
                dsc: dsc(&pred, gt)?,
                rvd: r,
            });
        }
    }
    Ok(out)
}

/// Worker count from `HLFD_THREADS`, default 1.
pub fn eval_threads() -> usize {
    std::env::var("HLFD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Binarized final prediction per sample, scored by DSC and RVD. Samples are
/// spread over `HLFD_THREADS` workers; results do not depend on the count.
pub fn evaluate<N: SegNet + ?Sized>(net: &N, test: &[SegSample]) -> Result<EvalResult> {
    check_dataset(test, net.config())?;
    let threads = eval_threads().min(test.len());
    let scores = if threads <= 1 {
        score_range(net, test)?
    } else {
        let per = test.len().div_ceil(threads);
        let parts: Vec<Result<Vec<SampleScore>>> = std::thread::scope(|s| {
            let handles: Vec<_> = test.chunks(per).map(|c| s.spawn(move || score_range(net, c))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(test.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    EvalResult::from_scores(scores)
}

/// One evaluated run of the report.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub mode: Mode,
    pub seed: u64,
    pub eval: EvalResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub eval: EvalResult,
}

/// Across-run statistics of one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSummary {
    pub mode: Mode,
    pub runs: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub rvd_mean: f64,
    pub rvd_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub teacher_records: Vec<RunRecord>,
    pub teacher_evals: Vec<RunRow>,
    pub records: Vec<RunRecord>,
    pub rows: Vec<RunRow>,
    pub sweep: Vec<SweepRow>,
}

impl ExperimentReport {
    pub fn summary(&self, mode: Mode) -> Option<ModeSummary> {
        let rows: Vec<&RunRow> = self
            .rows
            .iter()
            .chain(&self.teacher_evals)
            .filter(|r| r.mode == mode)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let d: Vec<f64> = rows.iter().map(|r| r.eval.dsc).collect();
        let v: Vec<f64> = rows.iter().map(|r| r.eval.rvd).collect();
        Some(ModeSummary {
            mode,
            runs: rows.len(),
            dsc_mean: mean(d.iter().copied()),
            dsc_std: std_dev(&d),
            rvd_mean: mean(v.iter().copied()),
            rvd_std: std_dev(&v),
        })
    }

    /// Mean DSC of each (β, λ) setting over its seeds, in grid order.
    pub fn sweep_means(&self) -> Vec<((f64, f64), f64)> {
        SENSITIVITY_GRID
            .iter()
            .filter_map(|&(b, l)| {
                let d: Vec<f64> = self
                    .sweep
                    .iter()
                    .filter(|r| r.beta == b && r.lambda == l)
                    .map(|r| r.eval.dsc)
                    .collect();
                (!d.is_empty()).then(|| ((b, l), mean(d.into_iter())))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub modes: Vec<Mode>,
    pub sweep: bool,
    /// Train one teacher per seed; otherwise a single teacher trained with
    /// the first seed serves every run.
    pub teacher_per_seed: bool,
    /// Use this teacher instead of training one.
    pub teacher: Option<TeacherNet>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            modes: Mode::STUDENT_MODES.to_vec(),
            sweep: false,
            teacher_per_seed: false,
            teacher: None,
        }
    }
}

/// For each seed: obtain the teacher, distill every requested mode, evaluate
/// on `test`; optionally run the β/λ grid with `hlfd`.
pub fn run_experiment(
    cfg: &TrainConfig,
    plan: &ExperimentPlan,
    train: &[SegSample],
    test: &[SegSample],
    progress: Progress,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut report = ExperimentReport::default();
    let mut shared = plan.teacher.clone();
    if let Some(t) = &plan.teacher {
        report.teacher_evals.push(RunRow {
            mode: Mode::Teacher,
            seed: t.config().seed,
            eval: evaluate(t, test)?,
        });
    }
    for &seed in &cfg.seeds {
        let teacher = match (&shared, plan.teacher_per_seed && plan.teacher.is_none()) {
            (Some(t), false) => t.clone(),
            _ => {
                let (t, mut rec) = train_teacher(cfg, seed, train, progress)?;
                let eval = evaluate(&t, test)?;
                rec.eval = Some(eval.clone());
                report.teacher_records.push(rec);
                report.teacher_evals.push(RunRow {
                    mode: Mode::Teacher,
                    seed,
                    eval,
                });
                if !plan.teacher_per_seed {
                    shared = Some(t.clone());
                }
                t
            }
        };
        for &mode in &plan.modes {
            let (s, mut rec) = distill_student(cfg, mode, seed, &teacher, train, progress)?;
            let eval = evaluate(&s, test)?;
            rec.eval = Some(eval.clone());
            report.records.push(rec);
            report.rows.push(RunRow { mode, seed, eval });
        }
        if plan.sweep {
            for &(beta, lambda) in &SENSITIVITY_GRID {
                let c = TrainConfig {
                    distill: DistillConfig { beta, lambda, ..cfg.distill },
                    ..cfg.clone()
                };
                // the default setting was already trained above
                let existing = (c.distill == cfg.distill)
                    .then(|| report.rows.iter().find(|r| r.mode == Mode::Hlfd && r.seed == seed))
                    .flatten();
                let eval = match existing {
                    Some(r) => r.eval.clone(),
                    None => {
                        let (s, _) = distill_student(&c, Mode::Hlfd, seed, &teacher, train, progress)?;
                        evaluate(&s, test)?
                    }
                };
                report.sweep.push(SweepRow { beta, lambda, seed, eval });
            }
        }
    }
    Ok(report)
}
