use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use distillgan::pipeline::{self, ExperimentConfig};
use distillgan::training::{LossKind, SelectionMetric};
use distillgan::{Error, Result};

#[derive(Parser)]
#[command(name = "distillgan", version, about = "Train, distill and evaluate small GAN generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the feature classifier used by the metrics.
    TrainClassifier(Common),
    /// Train teacher candidates over the d grid and keep the best.
    TrainTeacher(Common),
    /// Distill students (and optional controls) from the teacher.
    Distill(Common),
    /// Score teacher, students and controls into report.csv.
    Evaluate(Common),
    /// Render teacher and student along a latent interpolation path.
    Interpolate(InterpolateArgs),
    /// Classifier, teacher, distillation and evaluation in one go.
    Run(Common),
    /// Print the default configuration as JSON.
    InitConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Gan,
    Wgan,
    Mse,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Is,
    Fid,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Comma-separated d values (teacher grid for train-teacher, student sizes otherwise).
    #[arg(long, value_delimiter = ',')]
    d: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for interpolation.png and interpolation.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Classifier,
    Teacher,
    Students,
    All,
}

impl Common {
    fn config(&self, stage: Stage) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seeds) = &self.seed {
            cfg.seeds = seeds.clone();
        }
        if let Some(d) = &self.d {
            match stage {
                Stage::Teacher => cfg.teacher.grid = d.clone(),
                Stage::Classifier => {
                    let [d] = d[..] else {
                        return Err(Error::Config("train-classifier takes a single --d".into()));
                    };
                    cfg.classifier.d = d;
                }
                _ => cfg.students.d = d.clone(),
            }
        }
        match self.loss {
            Some(LossArg::Gan) => cfg.teacher.loss = LossKind::Gan,
            Some(LossArg::Wgan) => cfg.teacher.loss = LossKind::Wgan,
            Some(LossArg::Mse) => cfg.use_student_loss(LossKind::DistillMse, None),
            Some(LossArg::Joint) => cfg.use_student_loss(LossKind::DistillJoint, self.alpha),
            None => {}
        }
        if let Some(a) = self.alpha {
            if cfg.students.loss != LossKind::DistillJoint {
                return Err(Error::Config("--alpha needs the joint loss".into()));
            }
            cfg.students.alpha = Some(a);
        }
        if let Some(s) = self.steps {
            match stage {
                Stage::Classifier => cfg.classifier.steps = s,
                Stage::Teacher => cfg.teacher.steps = s,
                Stage::Students => cfg.students.steps = s,
                Stage::All => {
                    cfg.teacher.steps = s;
                    cfg.students.steps = s;
                }
            }
        }
        if let Some(m) = self.metric {
            cfg.teacher.metric = match m {
                MetricArg::Is => SelectionMetric::Is,
                MetricArg::Fid => SelectionMetric::Fid,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn print_report(report: &distillgan::metrics::MetricsReport) {
    println!("{:<28} {:>3} {:>9} {:>8} {:>8} {:>9} {:>9} {:>8}", "model", "d", "params", "is", "is_std", "fid", "vol", "ratio");
    for r in &report.rows {
        println!(
            "{:<28} {:>3} {:>9} {:>8} {:>8} {:>9} {:>9.4} {:>8}",
            r.model_id,
            r.d,
            r.params,
            fmt_opt(r.is_mean),
            fmt_opt(r.is_std),
            fmt_opt(r.fid),
            r.vol,
            r.ratio
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = pipeline::configure_threads()?;
    match cli.command {
        Command::InitConfig => println!("{}", ExperimentConfig::desk().to_json()),
        Command::TrainClassifier(c) => {
            let s = pipeline::cmd_train_classifier(&c.config(Stage::Classifier)?)?;
            println!(
                "classifier {} train accuracy {:.4} reference accuracy {:.4}",
                s.path.display(),
                s.train_accuracy,
                s.reference_accuracy
            );
        }
        Command::TrainTeacher(c) => {
            let s = pipeline::cmd_train_teacher(&c.config(Stage::Teacher)?)?;
            print!("{}", s.selection_csv);
            println!("selected d={} -> {}", s.best_d, s.path.display());
        }
        Command::Distill(c) => {
            let cfg = c.config(Stage::Students)?;
            eprintln!("training {} cells on {threads} threads", cfg.students.d.len() * cfg.seeds.len());
            for cell in pipeline::cmd_distill(&cfg)? {
                match cell.mse {
                    Some((first, last)) => println!("{} mse {first:.5} -> {last:.5}", cell.id),
                    None => println!("{}", cell.id),
                }
            }
        }
        Command::Evaluate(c) => print_report(&pipeline::cmd_evaluate(&c.config(Stage::All)?)?),
        Command::Run(c) => print_report(&pipeline::cmd_run(&c.config(Stage::All)?)?),
        Command::Interpolate(a) => {
            std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            let png = a.out.join("interpolation.png");
            let it = pipeline::cmd_interpolate(&a.teacher, &a.student, a.k, a.seed, &png)?;
            let mut csv = String::from("t,mse\n");
            for (t, m) in it.ts.iter().zip(it.column_mse()) {
                csv.push_str(&format!("{t},{m}\n"));
            }
            let path = a.out.join("interpolation.csv");
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            print!("{csv}");
            println!("wrote {}", png.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
