use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{class_probs, feature_stats, fid, inception_score, mean_vol, FeatureStats};
use crate::models::{Network, NetworkSpec, Role};
use crate::training::loops::{sample_images, train_adversarial, AdversarialRun};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    Is,
    Fid,
}

impl SelectionMetric {
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            SelectionMetric::Is => a > b,
            SelectionMetric::Fid => a < b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorScores {
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub vol: f64,
}

impl GeneratorScores {
    pub fn get(&self, metric: SelectionMetric) -> f64 {
        match metric {
            SelectionMetric::Is => self.is_mean,
            SelectionMetric::Fid => self.fid,
        }
    }
}

/// Scores generators against a reference dataset through a trained
/// classifier.
pub struct Evaluator {
    classifier: Network,
    real: FeatureStats,
    pub samples: usize,
    pub splits: usize,
    pub seed: u64,
}

impl Evaluator {
    pub fn new(classifier: Network, reference: &Dataset, samples: usize, seed: u64) -> Result<Self> {
        if classifier.role() != Role::Classifier {
            return Err(Error::Contract("evaluator needs a trained classifier".into()));
        }
        if samples < 2 {
            return Err(Error::Config("evaluation needs at least two samples".into()));
        }
        let real = feature_stats(reference.images(), &classifier)?;
        Ok(Evaluator {
            classifier,
            real,
            samples,
            splits: 10.min(samples),
            seed,
        })
    }

    pub fn classifier(&self) -> &Network {
        &self.classifier
    }

    pub fn reference_stats(&self) -> &FeatureStats {
        &self.real
    }

    pub fn score_images(&self, images: &Tensor<f32>) -> Result<GeneratorScores> {
        let (is_mean, is_std) = inception_score(&class_probs(images, &self.classifier)?, self.splits)?;
        let fid = fid(&self.real, &feature_stats(images, &self.classifier)?)?;
        Ok(GeneratorScores {
            is_mean,
            is_std,
            fid,
            vol: mean_vol(images)?,
        })
    }

    /// Scores of `samples` images drawn from the evaluator's fixed latents.
    pub fn score(&self, gen: &Network) -> Result<GeneratorScores> {
        self.score_images(&sample_images(gen, self.samples, self.seed)?)
    }
}

/// Index of the best scored candidate; failed candidates (`None` or
/// non-finite) are skipped and ties go to the smaller depth scale.
pub fn pick_best(scores: &[(usize, Option<f64>)], metric: SelectionMetric) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (d, s)) in scores.iter().enumerate() {
        let Some(s) = s.filter(|v| v.is_finite()) else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let (bd, bs) = (scores[b].0, scores[b].1.expect("kept only scored"));
                if metric.better(s, bs) || (s == bs && *d < bd) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

pub struct Candidate {
    pub d: usize,
    pub seed: u64,
    pub scores: Option<GeneratorScores>,
    pub failure: Option<String>,
    pub run: Option<AdversarialRun>,
}

pub struct Selection {
    pub metric: SelectionMetric,
    pub best: usize,
    pub candidates: Vec<Candidate>,
}

impl Selection {
    pub fn winner(&self) -> &Candidate {
        &self.candidates[self.best]
    }
}

/// Train one generator per depth scale (candidate `i` seeded `seed + i`),
/// score each, and pick the best.
pub fn select_teacher(
    grid: &[usize],
    template: &NetworkSpec,
    data: &Dataset,
    base: &TrainConfig,
    metric: SelectionMetric,
    evaluator: &Evaluator,
) -> Result<Selection> {
    if grid.is_empty() {
        return Err(Error::Config("teacher grid is empty".into()));
    }
    if metric == SelectionMetric::Is && data.labels().is_none() {
        return Err(Error::Config("the IS metric needs a labeled dataset".into()));
    }
    base.validate()?;
    for &d in grid {
        template.with_depth(d).validate()?;
    }
    let candidates: Vec<Candidate> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            let mut cfg = base.clone();
            cfg.seed = base.seed.wrapping_add(i as u64);
            let outcome = train_adversarial(&template.with_depth(d), data, &cfg, None)
                .and_then(|run| evaluator.score(&run.generator).map(|s| (run, s)));
            match outcome {
                Ok((run, s)) if s.get(metric).is_finite() => Candidate {
                    d,
                    seed: cfg.seed,
                    scores: Some(s),
                    failure: None,
                    run: Some(run),
                },
                Ok((run, s)) => Candidate {
                    d,
                    seed: cfg.seed,
                    scores: Some(s),
                    failure: Some("non-finite score".into()),
                    run: Some(run),
                },
                Err(e) => Candidate {
                    d,
                    seed: cfg.seed,
                    scores: None,
                    failure: Some(e.to_string()),
                    run: None,
                },
            }
        })
        .collect();
    let scored: Vec<(usize, Option<f64>)> = candidates
        .iter()
        .map(|c| (c.d, c.failure.is_none().then(|| c.scores.map(|s| s.get(metric))).flatten()))
        .collect();
    let best = pick_best(&scored, metric)
        .ok_or_else(|| Error::Metric("every teacher candidate failed".into()))?;
    Ok(Selection {
        metric,
        best,
        candidates,
    })
}
