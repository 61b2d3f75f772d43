//! One function per subcommand. Each builds a [`Run`], does its work through
//! the library, and finishes by writing the run record.

use crate::cli::{
    BaselineArg, DistillArgs, EstimateHrArgs, EvaluateArgs, InferArgs, OracleCheckArgs,
    PreprocessArgs, SynthArgs, TrainTeacherArgs,
};
use crate::run::{load_dataset, read_hr, write_hr, Run};
use kdphys::dataio::{
    frame_diff, prepare_label, read_checkpoint, read_tensor, synth_video, write_ppg, write_tensor,
    FrameSequence, SynthConfig,
};
use kdphys::diffcore::{Graph, Tensor};
use kdphys::losses::oracle::{soft_dtw_brute, temporal_brute};
use kdphys::losses::{cost_matrix, soft_dtw, temporal_term};
use kdphys::models::{
    train_student, train_teacher, Sample, StudentNet, TeacherNet, TrainConfig, TrainLog,
};
use kdphys::signal::{
    chrom_baseline, estimate_hr, metrics, metrics_with_signals, pos_baseline, HrOptions,
    MetricReport, PpgSignal,
};
use kdphys::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut run = Run::new("synth", args, Some(args.seed))?;
    let cfg = SynthConfig {
        hr_hz: args.hr,
        pulse_amp: args.pulse_amp,
        harmonic_amp: args.harmonic_amp,
        noise_sd: args.noise_sd,
        illum_drift_hz: args.drift_hz,
        illum_drift_amp: args.drift_amp,
        motion_amp_px: args.motion_amp,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let frames = (args.seconds * args.fps).round() as usize;
    let (video, truth) = synth_video(&cfg, frames, args.size, args.size, args.fps)?;
    let video_tensor = Tensor::new(
        video.data().to_vec(),
        vec![video.t(), video.height(), video.width(), 3],
    )?;
    let video_path = run.output(&args.out_video)?;
    let truth_path = run.output(&args.out_truth)?;
    write_tensor(&video_path, &video_tensor)?;
    write_ppg(&truth_path, &truth)?;
    println!(
        "wrote {} frames at {} fps ({} bpm ground truth) to {}",
        video.t(),
        args.fps,
        60.0 * args.hr,
        video_path.display()
    );
    run.finish()
}

/// Interprets a rank-4 tensor file as a frames x height x width x 3 video.
fn sequence_from_tensor(tensor: &Tensor, fps: f64) -> Result<FrameSequence> {
    match *tensor.shape.as_slice() {
        [frames, height, width, 3] => {
            FrameSequence::new(tensor.data.clone(), frames, height, width, fps)
        }
        ref other => Err(Error::Dimension(format!(
            "expected a frames x height x width x 3 video tensor, got {other:?}"
        ))),
    }
}

pub fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let mut run = Run::new("preprocess", args, None)?;
    if args.ppg.is_some() != args.out_label.is_some() {
        return Err(Error::Parameter(
            "--ppg and --out-label must be given together".into(),
        ));
    }
    run.input(&args.video)?;
    let video = read_tensor(&args.video)?;
    let seq = sequence_from_tensor(&video, args.fps)?;
    let clip = frame_diff(&seq)?;
    let frames = clip.shape[0];
    let clip_path = run.output(&args.out_clip)?;
    write_tensor(&clip_path, &clip)?;
    if let (Some(ppg), Some(out_label)) = (&args.ppg, &args.out_label) {
        run.input(ppg)?;
        let raw = kdphys::dataio::read_ppg(ppg)?;
        let label = prepare_label(&raw)?;
        if label.len() < frames {
            return Err(Error::Parameter(format!(
                "label holds {} samples after preparation but the clip has {frames} frames",
                label.len()
            )));
        }
        let label = PpgSignal::new(label.samples()[..frames].to_vec(), label.fs())?;
        let label_path = run.output(out_label)?;
        write_ppg(&label_path, &label)?;
    }
    println!("wrote {frames}-frame clip to {}", clip_path.display());
    run.finish()
}

/// Training geometry comes from the data itself; everything else from flags.
fn shape_config(base: TrainConfig, train: &[Sample]) -> Result<TrainConfig> {
    let shape = &train[0].clip.shape;
    Ok(TrainConfig { seq_len: shape[0], input_hw: shape[2], ..base })
}

fn write_log(run: &mut Run, path: &Option<std::path::PathBuf>, log: &TrainLog) -> Result<()> {
    if let Some(path) = path {
        let full = run.output(path)?;
        std::fs::write(&full, log.to_csv())?;
    }
    Ok(())
}

fn report_training(what: &str, log: &TrainLog, out: &Path) {
    let last = log.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN);
    match log.best_epoch {
        Some(best) => println!(
            "{what}: {} epoch(s), final train loss {last:.6}, best validation at epoch {best}; saved {}",
            log.epochs.len(),
            out.display()
        ),
        None => println!(
            "{what}: {} epoch(s), final train loss {last:.6}; saved {}",
            log.epochs.len(),
            out.display()
        ),
    }
}

pub fn train_teacher_cmd(args: &TrainTeacherArgs) -> Result<()> {
    let mut run = Run::new("train-teacher", args, Some(args.seed))?;
    let train = load_dataset(&mut run, &args.data)?;
    let val = load_dataset(&mut run, &args.val)?;
    let cfg = shape_config(
        TrainConfig {
            seed: args.seed,
            epochs: args.epochs,
            lr: args.lr,
            batch: args.batch,
            patience: args.patience,
            ..TrainConfig::default()
        },
        &train,
    )?;
    let (net, log) = train_teacher(&train, &val, &cfg)?;
    let out = run.output(&args.out)?;
    net.save(&out, args.seed, log.best_epoch.unwrap_or(log.epochs.len()))?;
    write_log(&mut run, &args.log, &log)?;
    report_training("teacher", &log, &out);
    run.finish()
}

pub fn distill(args: &DistillArgs) -> Result<()> {
    let mut run = Run::new("distill", args, Some(args.seed))?;
    let train = load_dataset(&mut run, &args.data)?;
    let teacher = match &args.teacher {
        Some(path) => {
            run.input(path)?;
            let (net, _, _) = TeacherNet::load(path)?;
            Some(net)
        }
        None => None,
    };
    let cfg = shape_config(
        TrainConfig {
            alpha: args.alpha,
            beta: args.beta,
            eta: args.eta,
            gamma: args.gamma,
            lambda_afd: args.lambda_afd,
            lr: args.lr,
            batch: args.batch,
            epochs: args.epochs,
            seed: args.seed,
            tsm: args.tsm_config()?,
            head: args.head.into(),
            ..TrainConfig::default()
        },
        &train,
    )?;
    let (net, log) = train_student(&train, &cfg, teacher.as_ref())?;
    let out = run.output(&args.out)?;
    net.save(&out, args.seed, log.epochs.len())?;
    write_log(&mut run, &args.log, &log)?;
    report_training("student", &log, &out);
    run.finish()
}

/// Runs whichever network the checkpoint holds on a preprocessed clip.
fn predict_checkpoint(path: &Path, clip: &Tensor) -> Result<Vec<f64>> {
    let (header, _) = read_checkpoint(path)?;
    match header.architecture.get("kind").and_then(|k| k.as_str()) {
        Some("student") => StudentNet::load(path)?.0.predict(clip),
        Some("teacher") => Ok(TeacherNet::load(path)?.0.predict_with_features(clip)?.0),
        other => Err(Error::Architecture(format!(
            "checkpoint {} holds an unknown network kind {other:?}",
            path.display()
        ))),
    }
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let mut run = Run::new("infer", args, None)?;
    let signal = match args.baseline {
        BaselineArg::None => {
            let (model, clip) = match (&args.model, &args.clip) {
                (Some(m), Some(c)) => (m, c),
                _ => {
                    return Err(Error::Parameter(
                        "pass --model and --clip, or pick --baseline pos|chrom with --video".into(),
                    ))
                }
            };
            run.input(model)?;
            run.input(clip)?;
            let clip = read_tensor(clip)?;
            PpgSignal::new(predict_checkpoint(model, &clip)?, args.fps)?
        }
        kind => {
            let video = args.video.as_ref().ok_or_else(|| {
                Error::Parameter("--baseline needs --video with the raw frames".into())
            })?;
            run.input(video)?;
            let seq = sequence_from_tensor(&read_tensor(video)?, args.fps)?;
            match kind {
                BaselineArg::Pos => pos_baseline(&seq)?,
                BaselineArg::Chrom => chrom_baseline(&seq)?,
                BaselineArg::None => unreachable!(),
            }
        }
    };
    let out = run.output(&args.out)?;
    write_ppg(&out, &signal)?;
    println!("wrote {}-sample pulse trace to {}", signal.len(), out.display());
    run.finish()
}

pub fn estimate_hr_cmd(args: &EstimateHrArgs) -> Result<()> {
    let mut run = Run::new("estimate-hr", args, None)?;
    run.input(&args.ppg)?;
    let sig = kdphys::dataio::read_ppg(&args.ppg)?;
    let opts = HrOptions {
        window_seconds: args.window_seconds,
        stride_seconds: args.stride_seconds,
        band: args.band,
    };
    let series = estimate_hr(&sig, &opts)?;
    let out = run.output(&args.out)?;
    write_hr(&out, &series)?;
    let mean = series.values.iter().sum::<f64>() / series.values.len() as f64;
    println!(
        "{} window(s), mean {mean:.1} bpm, spectral resolution {:.2} bpm; wrote {}",
        series.values.len(),
        series.bin_bpm,
        out.display()
    );
    run.finish()
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let mut run = Run::new("evaluate", args, None)?;
    run.input(&args.pred)?;
    run.input(&args.truth)?;
    let pred = read_hr(&args.pred)?;
    let truth = read_hr(&args.truth)?;
    let report = match (&args.pred_ppg, &args.truth_ppg) {
        (Some(p), Some(t)) => {
            run.input(p)?;
            run.input(t)?;
            metrics_with_signals(
                &pred,
                &truth,
                &kdphys::dataio::read_ppg(p)?,
                &kdphys::dataio::read_ppg(t)?,
            )?
        }
        _ => metrics(&pred, &truth)?,
    };
    let out = run.output(&args.out_report)?;
    std::fs::write(&out, format!("{}\n{}\n", MetricReport::csv_header(), report.to_csv_row()))?;
    if let Some(path) = &args.out_ba {
        let mut table = String::from("mean_bpm,diff_bpm\n");
        for (p, t) in pred.values.iter().zip(&truth.values) {
            table.push_str(&format!("{},{}\n", 0.5 * (p + t), p - t));
        }
        let full = run.output(path)?;
        std::fs::write(&full, table)?;
    }
    if let Some(path) = &args.out_corr {
        let mut table = String::from("truth_bpm,pred_bpm\n");
        for (p, t) in pred.values.iter().zip(&truth.values) {
            table.push_str(&format!("{t},{p}\n"));
        }
        let full = run.output(path)?;
        std::fs::write(&full, table)?;
    }
    print!("{}", report.to_text());
    run.finish()
}

pub fn oracle_check(args: &OracleCheckArgs) -> Result<()> {
    let run = Run::new("oracle-check", args, Some(args.seed))?;
    if !(2..=8).contains(&args.k) {
        return Err(Error::Parameter(format!(
            "path enumeration is tractable for k in 2-8, got {}",
            args.k
        )));
    }
    if args.gammas.iter().any(|&g| g <= 0.0) {
        return Err(Error::Parameter("every gamma must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (mut worst_shape, mut worst_temporal) = (0.0f64, 0.0f64);
    for _ in 0..args.trials {
        let pred: Vec<f64> = (0..args.k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let truth: Vec<f64> = (0..args.k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for &gamma in &args.gammas {
            let mut g = Graph::new();
            let p = g.constant(pred.clone(), vec![args.k])?;
            let cost = cost_matrix(&mut g, p, &truth, gamma)?;
            let fast_shape = {
                let id = soft_dtw(&mut g, &cost)?;
                g.value(id)
            };
            let fast_temporal = {
                let id = temporal_term(&mut g, &cost)?;
                g.value(id)
            };
            let delta = g.data(cost.delta).to_vec();
            let rel = |fast: f64, slow: f64| (fast - slow).abs() / slow.abs().max(1e-12);
            worst_shape = worst_shape.max(rel(fast_shape, soft_dtw_brute(&delta, args.k, gamma)?));
            worst_temporal =
                worst_temporal.max(rel(fast_temporal, temporal_brute(&delta, args.k, gamma)?));
        }
    }
    println!(
        "soft-dtw dynamic program vs enumeration over {} trial(s), k={}: max relative error {worst_shape:.3e} (tolerance 1e-9)",
        args.trials, args.k
    );
    println!(
        "temporal term vs brute-force expectation: max relative error {worst_temporal:.3e} (tolerance 1e-7)"
    );
    if worst_shape >= 1e-9 || worst_temporal >= 1e-7 {
        return Err(Error::Training(
            "alignment losses disagree with their brute-force references".into(),
        ));
    }
    println!("oracle check passed");
    run.finish()
}
