use hlfd_core::checkpoint::{encode_checkpoint, param_hash};
use hlfd_core::data::{split, synth_generate, SegSample, SynthConfig};
use hlfd_core::losses::DistillConfig;
use hlfd_core::nets::{NetConfig, SegNet, StudentNet};
use hlfd_core::optim::cosine_lr;
use hlfd_core::train::*;
use hlfd_core::HlfdError;

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        teacher_epochs: 2,
        batch_size: 4,
        seeds: vec![0],
        teacher_net: NetConfig {
            encoder_channels: vec![4, 6, 8, 8],
            input_size: (16, 16),
            ..NetConfig::teacher()
        },
        student_net: NetConfig {
            encoder_channels: vec![2, 3, 4, 4],
            input_size: (16, 16),
            ..NetConfig::student()
        },
        ..TrainConfig::default()
    }
}

fn tiny_data(count: usize) -> (Vec<SegSample>, Vec<SegSample>) {
    let d = synth_generate(&SynthConfig {
        count,
        size: (16, 16),
        blob_radius: (2.0, 4.0),
        ..SynthConfig::default()
    })
    .unwrap();
    split(&d, 0.75, 0).unwrap()
}

fn quiet() -> impl FnMut(Mode, u64, &EpochLosses) {
    |_, _, _| {}
}

#[test]
fn teacher_training_is_deterministic_and_learns() {
    let mut cfg = tiny_cfg();
    cfg.teacher_epochs = 5;
    let (train, _) = tiny_data(32);
    let (a, ra) = train_teacher(&cfg, 7, &train, &mut quiet()).unwrap();
    let (b, rb) = train_teacher(&cfg, 7, &train, &mut quiet()).unwrap();
    assert_eq!(encode_checkpoint(&a).unwrap(), encode_checkpoint(&b).unwrap());
    assert_eq!(ra.epochs, rb.epochs);
    assert_eq!(ra.epochs.len(), 5);
    assert_eq!(ra.config_hash, rb.config_hash);
    let losses: Vec<f64> = ra.epochs.iter().map(|e| e.l_seg).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn schedule_starts_at_lr_max() {
    let cfg = TrainConfig::default();
    assert_eq!(cosine_lr(0, 100, cfg.lr_max, cfg.lr_min).unwrap(), 0.001);
    assert!((cosine_lr(100, 100, cfg.lr_max, cfg.lr_min).unwrap() - 1e-6).abs() < 1e-18);
}

#[test]
fn distillation_contracts() {
    let cfg = tiny_cfg();
    let (train, test) = tiny_data(24);
    let (teacher, _) = train_teacher(&cfg, 1, &train, &mut quiet()).unwrap();
    let before = param_hash(&teacher).unwrap();

    let (h1, r1) = distill_student(&cfg, Mode::Hlfd, 3, &teacher, &train, &mut quiet()).unwrap();
    let (h2, r2) = distill_student(&cfg, Mode::Hlfd, 3, &teacher, &train, &mut quiet()).unwrap();
    assert_eq!(param_hash(&teacher).unwrap(), before);
    assert_eq!(encode_checkpoint(&h1).unwrap(), encode_checkpoint(&h2).unwrap());
    assert_eq!(r1.epochs, r2.epochs);
    for e in &r1.epochs {
        let l_f = e.l_ufd.unwrap() + e.l_ifd.unwrap();
        let l_p = e.l_upd.unwrap() + e.l_ipd.unwrap();
        assert!((e.l_h - (e.l_seg + 0.9 * l_f + 0.1 * l_p)).abs() < 1e-12);
    }

    let (nk, rn) = distill_student(&cfg, Mode::NoKd, 3, &teacher, &train, &mut quiet()).unwrap();
    assert!(rn
        .epochs
        .iter()
        .all(|e| e.l_ufd.is_none() && e.l_ifd.is_none() && e.l_upd.is_none() && e.l_ipd.is_none()));

    let zero = TrainConfig {
        distill: DistillConfig { beta: 0.0, lambda: 0.0, ..cfg.distill },
        ..cfg.clone()
    };
    let (h0, r0) = distill_student(&zero, Mode::Hlfd, 3, &teacher, &train, &mut quiet()).unwrap();
    assert_eq!(nk.params(), h0.params());
    let seg = |r: &RunRecord| r.epochs.iter().map(|e| e.l_seg).collect::<Vec<_>>();
    assert_eq!(seg(&rn), seg(&r0));

    let (_, rl) = distill_student(&cfg, Mode::LateOnly, 3, &teacher, &train, &mut quiet()).unwrap();
    assert!(rl.epochs.iter().all(|e| e.l_ifd.is_some() && e.l_ufd.is_none()));

    // the student never reads teacher state at inference
    let eval_before = evaluate(&h1, &test).unwrap();
    drop(teacher);
    assert_eq!(evaluate(&h1, &test).unwrap(), eval_before);
}

#[test]
fn distill_rejects_teacher_mode_and_mismatch() {
    let cfg = tiny_cfg();
    let (train, _) = tiny_data(12);
    let teacher = fresh_teacher(&cfg, 0).unwrap();
    assert!(matches!(
        distill_student(&cfg, Mode::Teacher, 0, &teacher, &train, &mut quiet()),
        Err(HlfdError::Config(_))
    ));
    let other = fresh_teacher(
        &TrainConfig {
            teacher_net: NetConfig { input_size: (32, 32), ..cfg.teacher_net.clone() },
            ..cfg.clone()
        },
        0,
    )
    .unwrap();
    assert!(distill_student(&cfg, Mode::Hlfd, 0, &other, &train, &mut quiet()).is_err());
    assert!(train_teacher(&cfg, 0, &[], &mut quiet()).is_err());
}

fn constant_background(cfg: &TrainConfig) -> StudentNet {
    let mut s = fresh_student(cfg, 0).unwrap();
    let last = format!("head{}.bias", cfg.student_net.num_blocks() - 1);
    let params = s.params_mut();
    for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        t.data_mut().fill(0.0);
        if *name == last {
            t.data_mut()[0] = 1.0;
        }
    }
    s
}

#[test]
fn evaluation_properties() {
    let cfg = tiny_cfg();
    let (_, test) = tiny_data(40);
    let bg = constant_background(&cfg);
    let e = evaluate(&bg, &test).unwrap();
    assert_eq!(e.dsc, 0.0);
    assert!(e.per_sample.iter().all(|s| s.dsc == 0.0 && s.rvd == Some(-1.0)));
    assert!(evaluate(&bg, &[]).is_err());

    let net = fresh_student(&cfg, 5).unwrap();
    let a = evaluate(&net, &test).unwrap();
    let mut rev = test.clone();
    rev.reverse();
    let b = evaluate(&net, &rev).unwrap();
    assert_eq!(a.dsc.to_bits(), b.dsc.to_bits());
    assert_eq!(a.rvd.to_bits(), b.rvd.to_bits());
}

#[test]
fn experiment_report_shape() {
    let mut cfg = tiny_cfg();
    cfg.epochs = 1;
    cfg.teacher_epochs = 1;
    cfg.seeds = vec![0, 1];
    let (train, test) = tiny_data(16);
    let plan = ExperimentPlan {
        sweep: true,
        ..ExperimentPlan::default()
    };
    let r = run_experiment(&cfg, &plan, &train, &test, &mut quiet()).unwrap();
    assert_eq!(r.rows.len(), 2 * 3);
    assert_eq!(r.teacher_evals.len(), 1);
    assert_eq!(r.sweep.len(), 2 * 3);
    let pairs: Vec<(f64, f64)> = r.sweep_means().iter().map(|p| p.0).collect();
    assert_eq!(pairs, SENSITIVITY_GRID.to_vec());
    assert_eq!(r.summary(Mode::Hlfd).unwrap().runs, 2);

    cfg.seeds = vec![4, 4, 4];
    let r = run_experiment(&cfg, &ExperimentPlan { modes: vec![Mode::NoKd], ..Default::default() }, &train, &test, &mut quiet()).unwrap();
    assert_eq!(r.summary(Mode::NoKd).unwrap().dsc_std, 0.0);

    // A provided teacher is scored but not retrained.
    let (teacher, _) = train_teacher(&cfg, 7, &train, &mut quiet()).unwrap();
    let plan = ExperimentPlan { modes: vec![Mode::NoKd], teacher: Some(teacher.clone()), ..Default::default() };
    let r = run_experiment(&cfg, &plan, &train, &test, &mut quiet()).unwrap();
    assert!(r.teacher_records.is_empty());
    assert_eq!(r.teacher_evals.len(), 1);
    assert_eq!(r.teacher_evals[0].seed, 7);
    assert_eq!(r.summary(Mode::Teacher).unwrap().dsc_mean, evaluate(&teacher, &test).unwrap().dsc);
}
