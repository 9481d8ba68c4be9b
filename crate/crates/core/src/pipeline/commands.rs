use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{export_grid, load_checkpoint, save_checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{compression_ratio, MetricsReport, ReportRow};
use crate::models::{Network, NetworkSpec, Role};
use crate::pipeline::ExperimentConfig;
use crate::training::{
    accuracy, sample_images, select_teacher, train_adversarial, train_classifier, train_distill,
    ClassifierConfig, Evaluator, LossKind, RunLog, SelectionMetric, Snapshot, TrainConfig,
};

/// Environment variable capping the number of cells trained in parallel.
pub const THREADS_ENV: &str = "DISTILLGAN_THREADS";
const GRID_SAMPLES: usize = 64;
const GRID_COLS: usize = 8;
const SNAPSHOT_SAMPLES: usize = 256;

/// Size the global worker pool from `DISTILLGAN_THREADS` (all cores when
/// unset). Returns the pool size.
pub fn configure_threads() -> Result<usize> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    // a pool built earlier in the process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(rayon::current_num_threads())
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let train = cfg.dataset.load()?;
    let reference = match &cfg.reference {
        Some(r) => r.load()?,
        None => train.clone(),
    };
    if reference.image_shape() != train.image_shape() {
        return Err(Error::Config(format!(
            "reference images {:?} differ from training images {:?}",
            reference.image_shape(),
            train.image_shape()
        )));
    }
    Ok((train, reference))
}

fn generator_spec(data: &Dataset, d: usize) -> Result<NetworkSpec> {
    let [c, h, w] = data.image_shape();
    if h != w {
        return Err(Error::Config(format!("images must be square, got {h}x{w}")));
    }
    let spec = NetworkSpec::generator(h, c, d);
    spec.validate()?;
    Ok(spec)
}

fn adversarial_config(cfg: &ExperimentConfig, steps: usize, seed: u64) -> TrainConfig {
    let mut t = match cfg.teacher.loss {
        LossKind::Wgan => TrainConfig::wgan(steps, seed),
        _ => TrainConfig::gan(steps, seed),
    };
    if let Some(o) = cfg.optimizers.generator {
        t.gen_optimizer = o;
    }
    if let Some(o) = cfg.optimizers.discriminator {
        t.disc_optimizer = o;
    }
    t.batch = cfg.batch;
    t.eval_interval = cfg.eval_interval;
    t
}

fn student_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    let steps = cfg.students.steps;
    let mut t = match (cfg.students.loss, cfg.students.alpha) {
        (LossKind::DistillJoint, Some(a)) => TrainConfig::distill_joint(a, steps, seed),
        _ => TrainConfig::distill_mse(steps, seed),
    };
    if let Some(o) = cfg.optimizers.distill {
        t.gen_optimizer = o;
    }
    if let Some(o) = cfg.optimizers.discriminator {
        t.disc_optimizer = o;
    }
    t.batch = cfg.batch;
    t.eval_interval = cfg.eval_interval;
    t
}

fn load_classifier(cfg: &ExperimentConfig) -> Result<Network> {
    let path = cfg.classifier_path();
    if !path.exists() {
        return Err(Error::Config(format!(
            "no classifier at {}; run train-classifier first",
            path.display()
        )));
    }
    let net = load_checkpoint(&path)?;
    if net.role() != Role::Classifier {
        return Err(Error::Config(format!("{} is not a classifier checkpoint", path.display())));
    }
    Ok(net)
}

fn load_teacher(cfg: &ExperimentConfig) -> Result<Network> {
    let path = cfg.teacher_path();
    if !path.exists() {
        return Err(Error::Config(format!(
            "no teacher at {}; run train-teacher first",
            path.display()
        )));
    }
    let net = load_checkpoint(&path)?;
    if net.role() != Role::Generator {
        return Err(Error::Config(format!("{} is not a generator checkpoint", path.display())));
    }
    Ok(net)
}

fn evaluator(cfg: &ExperimentConfig, reference: &Dataset) -> Result<Evaluator> {
    let mut ev = Evaluator::new(load_classifier(cfg)?, reference, cfg.eval.samples, cfg.eval.seed)?;
    ev.splits = cfg.eval.splits;
    Ok(ev)
}

fn fid_snapshot(ev: &Evaluator) -> Snapshot<'_> {
    Snapshot {
        names: vec!["fid_snapshot".into()],
        measure: Box::new(move |g: &Network| {
            let imgs = sample_images(g, SNAPSHOT_SAMPLES, ev.seed)?;
            let stats = crate::metrics::feature_stats(&imgs, ev.classifier())?;
            Ok(vec![crate::metrics::fid(ev.reference_stats(), &stats)?])
        }),
    }
}

fn write_run(out: &Path, id: &str, gen: &Network, log: &RunLog, grid_seed: u64) -> Result<PathBuf> {
    let ckpt = out.join(format!("{id}.ckpt"));
    save_checkpoint(gen, &ckpt)?;
    log.write(&out.join(format!("{id}_loss.csv")), &out.join(format!("{id}_log.csv")))?;
    export_grid(&sample_images(gen, GRID_SAMPLES, grid_seed)?, GRID_COLS, out.join(format!("{id}.png")))?;
    Ok(ckpt)
}

fn create_out(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

pub fn teacher_id(d: usize) -> String {
    format!("teacher_d{d}")
}

pub fn student_id(loss: LossKind, d: usize, seed: u64) -> String {
    let tag = if loss == LossKind::DistillJoint { "joint" } else { "mse" };
    format!("student_{tag}_d{d}_s{seed}")
}

pub fn control_id(d: usize, seed: u64) -> String {
    format!("control_d{d}_s{seed}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSummary {
    pub path: PathBuf,
    pub train_accuracy: f64,
    pub reference_accuracy: f64,
}

pub fn cmd_train_classifier(cfg: &ExperimentConfig) -> Result<ClassifierSummary> {
    cfg.validate()?;
    let (train, reference) = load_data(cfg)?;
    if train.labels().is_none() {
        return Err(Error::Config("classifier training needs a labeled dataset".into()));
    }
    let [c, h, _] = train.image_shape();
    let spec = NetworkSpec::classifier(h, c, cfg.classifier.d, train.num_classes());
    spec.validate()?;
    create_out(cfg)?;
    let mut ccfg = ClassifierConfig::new(cfg.classifier.steps, cfg.classifier.seed);
    ccfg.batch = cfg.classifier.batch;
    let net = train_classifier(&spec, &train, &ccfg)?;
    let path = cfg.classifier_path();
    save_checkpoint(&net, &path)?;
    let train_accuracy = accuracy(&net, &train)?;
    let reference_accuracy = match reference.labels() {
        Some(_) => accuracy(&net, &reference)?,
        None => f64::NAN,
    };
    let csv = format!("split,accuracy\ntrain,{train_accuracy}\nreference,{reference_accuracy}\n");
    let csv_path = cfg.out.join("classifier.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(ClassifierSummary {
        path,
        train_accuracy,
        reference_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSummary {
    pub best_d: usize,
    pub path: PathBuf,
    pub selection_csv: String,
}

pub fn cmd_train_teacher(cfg: &ExperimentConfig) -> Result<TeacherSummary> {
    cfg.validate()?;
    let (train, reference) = load_data(cfg)?;
    if cfg.teacher.metric == SelectionMetric::Is && train.labels().is_none() {
        return Err(Error::Config("metric is needs a labeled dataset".into()));
    }
    let template = generator_spec(&train, cfg.teacher.grid[0])?;
    for &d in &cfg.teacher.grid {
        template.with_depth(d).validate()?;
    }
    let ev = evaluator(cfg, &reference)?;
    create_out(cfg)?;
    let base = adversarial_config(cfg, cfg.teacher.steps, cfg.teacher.seed);
    let sel = select_teacher(&cfg.teacher.grid, &template, &train, &base, cfg.teacher.metric, &ev)?;
    let mut csv = String::from("d,seed,is_mean,is_std,fid,vol,status,selected\n");
    for (i, c) in sel.candidates.iter().enumerate() {
        if let Some(run) = &c.run {
            write_run(&cfg.out, &teacher_id(c.d), &run.generator, &run.log, cfg.eval.seed)?;
        }
        let (is_mean, is_std, fid, vol) = c
            .scores
            .map(|s| (s.is_mean.to_string(), s.is_std.to_string(), s.fid.to_string(), s.vol.to_string()))
            .unwrap_or_default();
        let status = c.failure.as_deref().map_or("ok".to_string(), |f| format!("failed: {}", f.replace(',', ";")));
        writeln!(csv, "{},{},{is_mean},{is_std},{fid},{vol},{status},{}", c.d, c.seed, i == sel.best)
            .expect("string write");
    }
    let sel_path = cfg.out.join("selection.csv");
    fs::write(&sel_path, &csv).map_err(|e| Error::io(&sel_path, e))?;
    let winner = sel.winner();
    let path = cfg.teacher_path();
    save_checkpoint(&winner.run.as_ref().expect("winner trained").generator, &path)?;
    Ok(TeacherSummary {
        best_d: winner.d,
        path,
        selection_csv: csv,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub id: String,
    pub d: usize,
    pub seed: u64,
    pub control: bool,
    /// Distillation MSE at the first and last logged step (students only).
    pub mse: Option<(f64, f64)>,
    pub path: PathBuf,
}

pub fn cmd_distill(cfg: &ExperimentConfig) -> Result<Vec<CellSummary>> {
    cfg.validate()?;
    let (train, reference) = load_data(cfg)?;
    let teacher = load_teacher(cfg)?;
    let tspec = *teacher.spec().expect("loaded checkpoints carry a spec");
    let mut specs = Vec::new();
    for &d in &cfg.students.d {
        let s = NetworkSpec {
            latent_dim: tspec.latent_dim,
            ..generator_spec(&train, d)?
        };
        if s.image_shape() != tspec.image_shape() {
            return Err(Error::Config(format!(
                "student images {:?} differ from teacher images {:?}",
                s.image_shape(),
                tspec.image_shape()
            )));
        }
        specs.push(s);
    }
    let ev = evaluator(cfg, &reference)?;
    create_out(cfg)?;
    let mut cells = Vec::new();
    for spec in &specs {
        for &seed in &cfg.seeds {
            cells.push((*spec, seed, false));
            if cfg.students.controls {
                cells.push((*spec, seed, true));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(spec, seed, control)| {
            let d = spec.depth_scale;
            if control {
                let steps = cfg.students.control_steps.unwrap_or(cfg.students.steps);
                let run = train_adversarial(&spec, &train, &adversarial_config(cfg, steps, seed), Some(fid_snapshot(&ev)))?;
                let id = control_id(d, seed);
                let path = write_run(&cfg.out, &id, &run.generator, &run.log, cfg.eval.seed)?;
                Ok(CellSummary {
                    id,
                    d,
                    seed,
                    control,
                    mse: None,
                    path,
                })
            } else {
                let tc = student_config(cfg, seed);
                let run = train_distill(&teacher, &spec, Some(&train), &tc, Some(fid_snapshot(&ev)))?;
                let id = student_id(cfg.students.loss, d, seed);
                let path = write_run(&cfg.out, &id, &run.student, &run.log, cfg.eval.seed)?;
                let mse = run.log.first_loss("mse").zip(run.log.last_loss("mse"));
                Ok(CellSummary {
                    id,
                    d,
                    seed,
                    control,
                    mse,
                    path,
                })
            }
        })
        .collect()
}

/// Model ids in report order: teacher, then per d and seed the MSE student,
/// joint student and control, whichever checkpoints exist.
fn report_models(cfg: &ExperimentConfig) -> Vec<String> {
    let mut ids = Vec::new();
    for &d in &cfg.students.d {
        for &seed in &cfg.seeds {
            ids.push(student_id(LossKind::DistillMse, d, seed));
            ids.push(student_id(LossKind::DistillJoint, d, seed));
            ids.push(control_id(d, seed));
        }
    }
    ids.retain(|id| cfg.out.join(format!("{id}.ckpt")).exists());
    ids
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let (_, reference) = load_data(cfg)?;
    let ev = evaluator(cfg, &reference)?;
    let teacher = load_teacher(cfg)?;
    let tparams = teacher.param_count();
    let tscores = ev.score(&teacher)?;
    let tid = teacher_id(teacher.spec().expect("spec").depth_scale);
    let models = report_models(cfg);
    let rows: Vec<(String, Network)> = models
        .into_iter()
        .map(|id| {
            let net = load_checkpoint(cfg.out.join(format!("{id}.ckpt")))?;
            Ok((id, net))
        })
        .collect::<Result<_>>()?;
    let scored: Vec<_> = rows
        .par_iter()
        .map(|(id, net)| ev.score(net).map(|s| (id.clone(), net, s)))
        .collect::<Result<_>>()?;
    let mut report = MetricsReport::default();
    let row = |id: String, net: &Network, s: crate::training::GeneratorScores| -> Result<ReportRow> {
        Ok(ReportRow {
            model_id: id,
            d: net.spec().expect("spec").depth_scale,
            params: net.param_count(),
            is_mean: Some(s.is_mean),
            is_std: Some(s.is_std),
            fid: Some(s.fid),
            vol: s.vol,
            ratio: compression_ratio(tparams, net.param_count())?.label,
            vol_ratio: (tscores.vol > 0.0).then(|| s.vol / tscores.vol),
        })
    };
    report.push(row(tid, &teacher, tscores)?)?;
    for (id, net, s) in scored {
        report.push(row(id, net, s)?)?;
    }
    create_out(cfg)?;
    report.write(&cfg.out.join("report.csv"), &cfg.out.join("vol_ratio.csv"))?;
    Ok(report)
}

/// Classifier, teacher selection, distillation and evaluation in sequence.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    cmd_train_classifier(cfg)?;
    cmd_train_teacher(cfg)?;
    cmd_distill(cfg)?;
    cmd_evaluate(cfg)
}
