use std::time::Instant;

use crate::autodiff::{Tape, Tensor};
use crate::data::{BatchSampler, Dataset, LatentSampler};
use crate::error::{Error, Result};
use crate::models::{Network, NetworkSpec, Role};
use crate::training::steps::{distill_joint_step, distill_mse_step, gan_step, wgan_step};
use crate::training::{ClassifierConfig, LossKind, RunLog, TrainConfig};

const INIT_STREAM_GEN: u64 = 1;
const INIT_STREAM_DISC: u64 = 2;
const LATENT_STREAM: u64 = 3;
const BATCH_STREAM: u64 = 4;

/// Independent sub-seed for one consumer of a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Metric snapshot taken on the generator every eval interval.
pub struct Snapshot<'a> {
    pub names: Vec<String>,
    #[allow(clippy::type_complexity)]
    pub measure: Box<dyn FnMut(&Network) -> Result<Vec<f64>> + 'a>,
}

fn snapshot_names(s: &Option<Snapshot>) -> Vec<String> {
    s.as_ref().map(|s| s.names.clone()).unwrap_or_default()
}

fn due(step: usize, cfg: &TrainConfig) -> bool {
    step == 1 || step.is_multiple_of(cfg.eval_interval) || step == cfg.steps
}

/// Tag numeric failures with the step they happened at.
fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(what) => Error::NonFinite { what, step },
        other => other,
    }
}

fn record(
    log: &mut RunLog,
    step: usize,
    losses: Vec<f64>,
    gen: &Network,
    snapshot: &mut Option<Snapshot>,
    start: Instant,
) -> Result<()> {
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("loss {l}"),
            step,
        });
    }
    let metrics = match snapshot {
        Some(s) => s.measure.as_mut()(gen)?.into_iter().map(Some).collect(),
        None => Vec::new(),
    };
    log.push(step, losses, metrics, start.elapsed())
}

pub struct AdversarialRun {
    pub generator: Network,
    pub discriminator: Network,
    pub log: RunLog,
}

pub struct DistillRun {
    pub student: Network,
    pub discriminator: Option<Network>,
    pub log: RunLog,
}

fn check_dataset(spec: &NetworkSpec, data: &Dataset) -> Result<()> {
    let want = spec.image_shape();
    if data.image_shape() != want {
        return Err(Error::Contract(format!(
            "dataset images {:?} do not match network images {want:?}",
            data.image_shape()
        )));
    }
    if data.len() < 2 {
        return Err(Error::Contract("dataset needs at least two images".into()));
    }
    Ok(())
}

/// Regular (GAN or WGAN) training of a generator from scratch. The
/// discriminator uses the generator's depth scale.
pub fn train_adversarial(
    gen_spec: &NetworkSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    mut snapshot: Option<Snapshot>,
) -> Result<AdversarialRun> {
    cfg.validate()?;
    gen_spec.validate()?;
    if gen_spec.role != Role::Generator {
        return Err(Error::Contract("adversarial training needs a generator spec".into()));
    }
    check_dataset(gen_spec, data)?;
    let critic = match cfg.loss_kind {
        LossKind::Gan => false,
        LossKind::Wgan => true,
        other => return Err(Error::Config(format!("{} is not an adversarial loss", other.name()))),
    };
    let disc_spec = NetworkSpec::discriminator(gen_spec.image_size, gen_spec.image_channels, gen_spec.depth_scale);
    let mut gen = Network::build(gen_spec, false, derive_seed(cfg.seed, INIT_STREAM_GEN))?;
    let mut disc = Network::build(&disc_spec, critic, derive_seed(cfg.seed, INIT_STREAM_DISC))?;
    let mut go = cfg.gen_optimizer.build();
    let mut dopt = cfg.critic_optimizer().build();
    let mut latents = LatentSampler::with_stream(cfg.seed, LATENT_STREAM, gen_spec.latent_dim);
    let mut batches = BatchSampler::new(data.len(), cfg.batch.min(data.len()), cfg.seed, BATCH_STREAM)?;
    let loss_names: &[&str] = if critic { &["wasserstein", "g_loss"] } else { &["d_loss", "g_loss"] };
    let mut log = RunLog::new(cfg.seed, loss_names, &snapshot_names(&snapshot));
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let losses = if critic {
            let pairs = (0..cfg.critic_steps)
                .map(|_| Ok((data.gather(&batches.next_indices())?, latents.sample(cfg.batch))))
                .collect::<Result<Vec<_>>>()?;
            let z = latents.sample(cfg.batch);
            let l = wgan_step(&mut gen, &mut disc, &pairs, &z, &mut go, &mut dopt).map_err(at_step(step))?;
            vec![l.wasserstein, l.gen]
        } else {
            let real = data.gather(&batches.next_indices())?;
            let z = latents.sample(cfg.batch);
            let l = gan_step(&mut gen, &mut disc, &real, &z, &mut go, &mut dopt, cfg.gen_loss)
                .map_err(at_step(step))?;
            vec![l.disc, l.gen]
        };
        if due(step, cfg) {
            record(&mut log, step, losses, &gen, &mut snapshot, start)?;
        }
    }
    Ok(AdversarialRun {
        generator: gen,
        discriminator: disc,
        log,
    })
}

/// Distill a student generator from a frozen teacher. Joint distillation
/// also trains a discriminator of the student's depth scale on `data`.
pub fn train_distill(
    teacher: &Network,
    student_spec: &NetworkSpec,
    data: Option<&Dataset>,
    cfg: &TrainConfig,
    mut snapshot: Option<Snapshot>,
) -> Result<DistillRun> {
    cfg.validate()?;
    student_spec.validate()?;
    let tspec = teacher
        .spec()
        .ok_or_else(|| Error::Contract("teacher must be built from a spec".into()))?;
    if tspec.role != Role::Generator || student_spec.role != Role::Generator {
        return Err(Error::Contract("teacher and student must both be generators".into()));
    }
    if tspec.image_shape() != student_spec.image_shape() {
        return Err(Error::Contract(format!(
            "student images {:?} differ from teacher images {:?}",
            student_spec.image_shape(),
            tspec.image_shape()
        )));
    }
    if tspec.latent_dim != student_spec.latent_dim {
        return Err(Error::Contract(format!(
            "student latent dim {} differs from teacher latent dim {}",
            student_spec.latent_dim, tspec.latent_dim
        )));
    }
    let alpha = match cfg.loss_kind {
        LossKind::DistillMse => None,
        LossKind::DistillJoint => Some(cfg.alpha.expect("validated")),
        other => return Err(Error::Config(format!("{} is not a distillation loss", other.name()))),
    };
    let joint = match alpha {
        Some(a) => {
            let data = data.ok_or_else(|| Error::Config("joint distillation needs a dataset".into()))?;
            check_dataset(student_spec, data)?;
            let dspec = NetworkSpec::discriminator(
                student_spec.image_size,
                student_spec.image_channels,
                student_spec.depth_scale,
            );
            let disc = Network::build(&dspec, false, derive_seed(cfg.seed, INIT_STREAM_DISC))?;
            let sampler = BatchSampler::new(data.len(), cfg.batch.min(data.len()), cfg.seed, BATCH_STREAM)?;
            Some((a, data, disc, sampler, cfg.disc_optimizer.build()))
        }
        None => None,
    };
    let mut joint = joint;
    let mut student = Network::build(student_spec, false, derive_seed(cfg.seed, INIT_STREAM_GEN))?;
    let mut go = cfg.gen_optimizer.build();
    let mut latents = LatentSampler::with_stream(cfg.seed, LATENT_STREAM, student_spec.latent_dim);
    let loss_names: &[&str] = if joint.is_some() { &["d_loss", "adv", "mse"] } else { &["mse"] };
    let mut log = RunLog::new(cfg.seed, loss_names, &snapshot_names(&snapshot));
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let z = latents.sample(cfg.batch);
        let losses = match &mut joint {
            None => vec![distill_mse_step(teacher, &mut student, &z, &mut go).map_err(at_step(step))?],
            Some((a, data, disc, sampler, dopt)) => {
                let real = data.gather(&sampler.next_indices())?;
                let l = distill_joint_step(teacher, &mut student, disc, &real, &z, *a, &mut go, dopt, cfg.gen_loss)
                    .map_err(at_step(step))?;
                vec![l.disc, l.adv, l.mse]
            }
        };
        if due(step, cfg) {
            record(&mut log, step, losses, &student, &mut snapshot, start)?;
        }
    }
    Ok(DistillRun {
        student,
        discriminator: joint.map(|j| j.2),
        log,
    })
}

/// Cross-entropy training of the evaluation classifier on a labeled dataset.
pub fn train_classifier(spec: &NetworkSpec, data: &Dataset, cfg: &ClassifierConfig) -> Result<Network> {
    spec.validate()?;
    if spec.role != Role::Classifier {
        return Err(Error::Contract("train_classifier needs a classifier spec".into()));
    }
    check_dataset(spec, data)?;
    let labels = data
        .labels()
        .ok_or_else(|| Error::Config("classifier training needs a labeled dataset".into()))?;
    if labels.iter().any(|&l| l >= spec.num_classes) {
        return Err(Error::Contract(format!("dataset labels exceed {} classes", spec.num_classes)));
    }
    if cfg.batch < 2 || cfg.steps == 0 {
        return Err(Error::Config("classifier needs batch >= 2 and steps >= 1".into()));
    }
    let mut net = Network::build(spec, false, derive_seed(cfg.seed, INIT_STREAM_DISC))?;
    let mut opt = cfg.optimizer.build();
    let mut batches = BatchSampler::new(data.len(), cfg.batch.min(data.len()), cfg.seed, BATCH_STREAM)?;
    for step in 1..=cfg.steps {
        let idx = batches.next_indices();
        let x = data.gather(&idx)?;
        let y = data.gather_labels(&idx).expect("labeled");
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true)?;
        let xv = tape.constant(x)?;
        let fwd = net.forward_train(&mut tape, &bound, xv)?;
        let logits = fwd.logits.expect("classifier has a softmax head");
        let loss = tape.cross_entropy(logits, &y).map_err(at_step(step))?;
        let grads = tape.backward(loss).map_err(at_step(step))?;
        net.store_grads(&grads, &bound)?;
        opt.step(net.params_mut()).map_err(at_step(step))?;
    }
    Ok(net)
}

/// Fraction of `data` the classifier labels correctly (eval mode).
pub fn accuracy(classifier: &Network, data: &Dataset) -> Result<f64> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Config("accuracy needs a labeled dataset".into()))?;
    let probs = crate::metrics::class_probs(data.images(), classifier)?;
    let correct = (0..probs.rows())
        .filter(|&i| {
            let row = probs.row(i);
            let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            arg == labels[i]
        })
        .count();
    Ok(correct as f64 / probs.rows() as f64)
}

/// `n` generator samples in eval mode, drawn in chunks from `seed`.
pub fn sample_images(gen: &Network, n: usize, seed: u64) -> Result<Tensor<f32>> {
    let spec = gen
        .spec()
        .ok_or_else(|| Error::Contract("sampling needs a spec-built generator".into()))?;
    let mut latents = LatentSampler::new(seed, spec.latent_dim);
    let mut parts = Vec::new();
    let mut left = n;
    while left > 0 {
        let b = left.min(crate::metrics::EVAL_BATCH);
        parts.push(gen.generate(&latents.sample(b))?);
        left -= b;
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::concat_batch(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_shapes;

    #[test]
    fn seeds_are_spread() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
    }

    #[test]
    fn short_gan_run_logs_and_is_reproducible() {
        let data = synth_shapes(64, 8, 0).unwrap();
        let spec = NetworkSpec::generator(8, 1, 2);
        let mut cfg = TrainConfig::gan(5, 3);
        cfg.batch = 8;
        cfg.eval_interval = 2;
        let a = train_adversarial(&spec, &data, &cfg, None).unwrap();
        let steps: Vec<usize> = a.log.records().iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 2, 4, 5]);
        let b = train_adversarial(&spec, &data, &cfg, None).unwrap();
        assert_eq!(a.log.loss_csv(), b.log.loss_csv());
        assert_eq!(a.generator.flat_params(), b.generator.flat_params());
    }

    #[test]
    fn distill_rejects_shape_mismatch_before_training() {
        let teacher = Network::build(&NetworkSpec::generator(8, 1, 2), false, 0).unwrap();
        let cfg = TrainConfig::distill_mse(1, 0);
        assert!(train_distill(&teacher, &NetworkSpec::generator(16, 1, 1), None, &cfg, None).is_err());
    }

    #[test]
    fn joint_without_data_is_config_error() {
        let teacher = Network::build(&NetworkSpec::generator(8, 1, 2), false, 0).unwrap();
        let cfg = TrainConfig::distill_joint(1e-4, 1, 0);
        assert!(matches!(
            train_distill(&teacher, &NetworkSpec::generator(8, 1, 1), None, &cfg, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn classifier_learns_shapes() {
        let data = synth_shapes(300, 16, 1).unwrap();
        let spec = NetworkSpec::classifier(16, 1, 4, 3);
        let mut cfg = ClassifierConfig::new(200, 0);
        cfg.batch = 32;
        let net = train_classifier(&spec, &data, &cfg).unwrap();
        let acc = accuracy(&net, &data).unwrap();
        assert!(acc > 0.9, "accuracy {acc}");
    }
}
