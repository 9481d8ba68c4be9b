use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub losses: Vec<f64>,
    pub metrics: Vec<Option<f64>>,
    pub elapsed: Duration,
}

/// Per-snapshot loss and metric trace of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub seed: u64,
    pub loss_names: Vec<String>,
    pub metric_names: Vec<String>,
    records: Vec<LogRecord>,
}

impl RunLog {
    pub fn new(seed: u64, loss_names: &[&str], metric_names: &[String]) -> Self {
        RunLog {
            seed,
            loss_names: loss_names.iter().map(|s| s.to_string()).collect(),
            metric_names: metric_names.to_vec(),
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    /// Append a record. Steps must increase; elapsed times are nudged
    /// forward by a nanosecond when the clock did not advance.
    pub fn push(&mut self, step: usize, losses: Vec<f64>, metrics: Vec<Option<f64>>, elapsed: Duration) -> Result<()> {
        if losses.len() != self.loss_names.len() || metrics.len() != self.metric_names.len() {
            return Err(Error::Contract("log record does not match the log columns".into()));
        }
        let mut elapsed = elapsed;
        if let Some(last) = self.records.last() {
            if step <= last.step {
                return Err(Error::Contract(format!("log step {step} after {}", last.step)));
            }
            if elapsed <= last.elapsed {
                elapsed = last.elapsed + Duration::from_nanos(1);
            }
        }
        self.records.push(LogRecord {
            step,
            losses,
            metrics,
            elapsed,
        });
        Ok(())
    }

    pub fn first_loss(&self, name: &str) -> Option<f64> {
        let i = self.loss_names.iter().position(|n| n == name)?;
        self.records.first().map(|r| r.losses[i])
    }

    pub fn last_loss(&self, name: &str) -> Option<f64> {
        let i = self.loss_names.iter().position(|n| n == name)?;
        self.records.last().map(|r| r.losses[i])
    }

    fn render(&self, with_metrics: bool) -> String {
        let mut out = String::from("seed,step");
        for n in &self.loss_names {
            out.push(',');
            out.push_str(n);
        }
        if with_metrics {
            for n in &self.metric_names {
                out.push(',');
                out.push_str(n);
            }
            out.push_str(",elapsed_s");
        }
        out.push('\n');
        for r in &self.records {
            write!(out, "{},{}", self.seed, r.step).expect("string write");
            for l in &r.losses {
                write!(out, ",{l:e}").expect("string write");
            }
            if with_metrics {
                for m in &r.metrics {
                    match m {
                        Some(v) => write!(out, ",{v:e}"),
                        None => write!(out, ","),
                    }
                    .expect("string write");
                }
                write!(out, ",{:.6}", r.elapsed.as_secs_f64()).expect("string write");
            }
            out.push('\n');
        }
        out
    }

    /// Losses only; identical across reruns with the same seed.
    pub fn loss_csv(&self) -> String {
        self.render(false)
    }

    /// Losses, metric snapshots and wall-clock seconds.
    pub fn full_csv(&self) -> String {
        self.render(true)
    }

    pub fn write(&self, loss_path: &Path, full_path: &Path) -> Result<()> {
        std::fs::write(loss_path, self.loss_csv()).map_err(|e| Error::io(loss_path, e))?;
        std::fs::write(full_path, self.full_csv()).map_err(|e| Error::io(full_path, e))
    }
}
