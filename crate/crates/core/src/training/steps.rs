use crate::autodiff::{OptimizerState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{Forward, Mode, Network, Role};
use crate::training::GenLoss;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    /// Discriminator binary cross-entropy (the negated maximization objective).
    pub disc: f64,
    pub gen: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WganLosses {
    /// E[f(x)] - E[f(G(z))] at the last critic update.
    pub wasserstein: f64,
    pub gen: f64,
    pub critic_updates: usize,
    /// max |critic parameter| after each critic update.
    pub max_abs_after_update: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLosses {
    pub disc: f64,
    pub adv: f64,
    pub mse: f64,
}

/// E[log D(x)] + E[log(1 - D(G(z)))] from discriminator probabilities.
pub fn discriminator_objective(real: &[f64], fake: &[f64]) -> f64 {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&p| f(p)).sum::<f64>() / v.len() as f64;
    mean(real, &|p| p.ln()) + mean(fake, &|p| (1.0 - p).ln())
}

/// E[f(x)] - E[f(G(z))] from critic scores.
pub fn critic_objective(real: &[f64], fake: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    mean(real) - mean(fake)
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

fn logits(fwd: &Forward, net: &Network) -> Result<Var> {
    fwd.logits.ok_or_else(|| {
        Error::Contract(format!(
            "{:?} has no sigmoid head; use the critic objective",
            net.role()
        ))
    })
}

fn require_discriminator(disc: &Network, critic: bool) -> Result<()> {
    if disc.role() != Role::Discriminator {
        return Err(Error::Contract(format!("expected a discriminator, got {:?}", disc.role())));
    }
    if disc.is_critic() != critic {
        let want = if critic { "a linear-head critic" } else { "a sigmoid-head discriminator" };
        return Err(Error::Contract(format!("this step needs {want}")));
    }
    Ok(())
}

fn require_generator(net: &Network) -> Result<()> {
    if net.role() != Role::Generator {
        return Err(Error::Contract(format!("expected a generator, got {:?}", net.role())));
    }
    Ok(())
}

fn targets(tape: &mut Tape, like: Var, value: f32) -> Result<Var> {
    let t = Tensor::filled(tape.shape(like), value)?;
    tape.constant(t)
}

fn apply(net: &mut Network, tape: &Tape, loss: Var, bound: &[Var], opt: &mut OptimizerState) -> Result<()> {
    let grads = tape.backward(loss)?;
    net.store_grads(&grads, bound)?;
    opt.step(net.params_mut())
}

fn flat_grad(tape: &Tape, loss: Var, bound: &[Var], net: &Network) -> Result<Vec<f32>> {
    let grads = tape.backward(loss)?;
    let mut out = Vec::with_capacity(net.param_count());
    for (v, p) in bound.iter().zip(net.params()) {
        match grads.get(*v) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat_n(0.0, p.numel())),
        }
    }
    Ok(out)
}

/// One discriminator update on a real and a (detached) fake batch; returns
/// the binary cross-entropy it minimized.
fn disc_update(disc: &mut Network, real: &Tensor<f32>, fake: &Tensor<f32>, opt: &mut OptimizerState) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = disc.bind(&mut tape, true)?;
    let xr = tape.constant(real.clone())?;
    let fr = disc.forward_train(&mut tape, &bound, xr)?;
    let xf = tape.constant(fake.clone())?;
    let ff = disc.forward_train(&mut tape, &bound, xf)?;
    let (lr, lf) = (logits(&fr, disc)?, logits(&ff, disc)?);
    let ones = targets(&mut tape, lr, 1.0)?;
    let zeros = targets(&mut tape, lf, 0.0)?;
    let real_loss = tape.bce_with_logits(lr, ones)?;
    let fake_loss = tape.bce_with_logits(lf, zeros)?;
    let loss = tape.add(real_loss, fake_loss)?;
    let value = scalar(&tape, loss);
    apply(disc, &tape, loss, &bound, opt)?;
    Ok(value)
}

/// One critic update; returns E[f(x)] - E[f(G(z))] before the update.
fn critic_update(critic: &mut Network, real: &Tensor<f32>, fake: &Tensor<f32>, opt: &mut OptimizerState) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = critic.bind(&mut tape, true)?;
    let xr = tape.constant(real.clone())?;
    let fr = critic.forward_train(&mut tape, &bound, xr)?;
    let xf = tape.constant(fake.clone())?;
    let ff = critic.forward_train(&mut tape, &bound, xf)?;
    let mr = tape.mean(fr.output)?;
    let mf = tape.mean(ff.output)?;
    let loss = tape.sub(mf, mr)?;
    let value = -scalar(&tape, loss);
    apply(critic, &tape, loss, &bound, opt)?;
    Ok(value)
}

/// Generator-side adversarial loss of `fake` against a frozen discriminator
/// or critic.
fn adversarial_term(tape: &mut Tape, disc: &Network, fake: Var, form: GenLoss) -> Result<Var> {
    let bound = disc.bind(tape, false)?;
    let fwd = disc.forward(tape, &bound, fake, Mode::BatchStats)?;
    if disc.is_critic() {
        let m = tape.mean(fwd.output)?;
        return tape.scale(m, -1.0);
    }
    let l = logits(&fwd, disc)?;
    match form {
        GenLoss::NonSaturating => {
            let ones = targets(tape, l, 1.0)?;
            tape.bce_with_logits(l, ones)
        }
        GenLoss::Saturating => {
            let zeros = targets(tape, l, 0.0)?;
            let b = tape.bce_with_logits(l, zeros)?;
            tape.scale(b, -1.0)
        }
    }
}

struct StudentPass {
    tape: Tape,
    bound: Vec<Var>,
    fwd: Forward,
}

fn student_pass(student: &Network, z: &Tensor<f32>, mode: Mode) -> Result<StudentPass> {
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, true)?;
    let zv = tape.constant(z.clone())?;
    let fwd = student.forward(&mut tape, &bound, zv, mode)?;
    Ok(StudentPass { tape, bound, fwd })
}

/// Teacher images for `z`, computed with batch statistics so that a student
/// identical to the teacher reproduces them exactly.
fn teacher_target(teacher: &Network, student_out: &Tensor<f32>, z: &Tensor<f32>) -> Result<Tensor<f32>> {
    require_generator(teacher)?;
    let target = teacher.run(z, Mode::BatchStats)?;
    if target.shape() != student_out.shape() {
        return Err(Error::Contract(format!(
            "teacher images {:?} and student images {:?} differ in shape",
            target.shape(),
            student_out.shape()
        )));
    }
    Ok(target)
}

fn mse_term(tape: &mut Tape, teacher: &Network, out: Var, z: &Tensor<f32>) -> Result<Var> {
    let target = teacher_target(teacher, tape.value(out), z)?;
    let t = tape.constant(target)?;
    tape.mse_loss(out, t)
}

fn joint_total(tape: &mut Tape, adv: Var, mse: Var, alpha: f64) -> Result<Var> {
    let a = tape.scale(adv, alpha as f32)?;
    let m = tape.scale(mse, (1.0 - alpha) as f32)?;
    tape.add(a, m)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// One discriminator update followed by one generator update.
pub fn gan_step(
    gen: &mut Network,
    disc: &mut Network,
    real: &Tensor<f32>,
    z: &Tensor<f32>,
    gen_opt: &mut OptimizerState,
    disc_opt: &mut OptimizerState,
    form: GenLoss,
) -> Result<GanLosses> {
    require_generator(gen)?;
    require_discriminator(disc, false)?;
    let mut pass = student_pass(gen, z, Mode::Train)?;
    let fake = pass.tape.value(pass.fwd.output).clone();
    let d = disc_update(disc, real, &fake, disc_opt)?;
    let adv = adversarial_term(&mut pass.tape, disc, pass.fwd.output, form)?;
    let g = scalar(&pass.tape, adv);
    gen.absorb(&pass.fwd);
    apply(gen, &pass.tape, adv, &pass.bound, gen_opt)?;
    Ok(GanLosses { disc: d, gen: g })
}

/// `critic_batches.len()` critic updates (each on its own real batch and
/// latent batch), then one generator update on `gen_z`.
pub fn wgan_step(
    gen: &mut Network,
    critic: &mut Network,
    critic_batches: &[(Tensor<f32>, Tensor<f32>)],
    gen_z: &Tensor<f32>,
    gen_opt: &mut OptimizerState,
    critic_opt: &mut OptimizerState,
) -> Result<WganLosses> {
    require_generator(gen)?;
    require_discriminator(critic, true)?;
    if critic_batches.is_empty() {
        return Err(Error::Config("wgan_step needs at least one critic batch".into()));
    }
    let mut wasserstein = 0.0;
    let mut max_abs_after_update = Vec::with_capacity(critic_batches.len());
    for (real, z) in critic_batches {
        let fake = gen.run(z, Mode::BatchStats)?;
        wasserstein = critic_update(critic, real, &fake, critic_opt)?;
        max_abs_after_update.push(critic.max_abs_param());
    }
    let mut pass = student_pass(gen, gen_z, Mode::Train)?;
    let adv = adversarial_term(&mut pass.tape, critic, pass.fwd.output, GenLoss::NonSaturating)?;
    let g = scalar(&pass.tape, adv);
    gen.absorb(&pass.fwd);
    apply(gen, &pass.tape, adv, &pass.bound, gen_opt)?;
    Ok(WganLosses {
        wasserstein,
        gen: g,
        critic_updates: critic_batches.len(),
        max_abs_after_update,
    })
}

/// One student update on the pixel MSE against the frozen teacher.
pub fn distill_mse_step(
    teacher: &Network,
    student: &mut Network,
    z: &Tensor<f32>,
    opt: &mut OptimizerState,
) -> Result<f64> {
    require_generator(student)?;
    let mut pass = student_pass(student, z, Mode::Train)?;
    let loss = mse_term(&mut pass.tape, teacher, pass.fwd.output, z)?;
    let value = scalar(&pass.tape, loss);
    student.absorb(&pass.fwd);
    apply(student, &pass.tape, loss, &pass.bound, opt)?;
    Ok(value)
}

/// Discriminator update as in [`gan_step`], then one student update on
/// `alpha * adversarial + (1 - alpha) * mse`.
#[allow(clippy::too_many_arguments)]
pub fn distill_joint_step(
    teacher: &Network,
    student: &mut Network,
    disc: &mut Network,
    real: &Tensor<f32>,
    z: &Tensor<f32>,
    alpha: f64,
    gen_opt: &mut OptimizerState,
    disc_opt: &mut OptimizerState,
    form: GenLoss,
) -> Result<JointLosses> {
    check_alpha(alpha)?;
    require_generator(student)?;
    require_discriminator(disc, false)?;
    let mut pass = student_pass(student, z, Mode::Train)?;
    let mse = mse_term(&mut pass.tape, teacher, pass.fwd.output, z)?;
    let fake = pass.tape.value(pass.fwd.output).clone();
    let d = disc_update(disc, real, &fake, disc_opt)?;
    let adv = adversarial_term(&mut pass.tape, disc, pass.fwd.output, form)?;
    let total = joint_total(&mut pass.tape, adv, mse, alpha)?;
    let losses = JointLosses {
        disc: d,
        adv: scalar(&pass.tape, adv),
        mse: scalar(&pass.tape, mse),
    };
    student.absorb(&pass.fwd);
    apply(student, &pass.tape, total, &pass.bound, gen_opt)?;
    Ok(losses)
}

/// Student gradient of the adversarial loss alone, nothing updated.
pub fn adversarial_gradient(student: &Network, disc: &Network, z: &Tensor<f32>, form: GenLoss) -> Result<(f64, Vec<f32>)> {
    require_generator(student)?;
    let mut pass = student_pass(student, z, Mode::BatchStats)?;
    let adv = adversarial_term(&mut pass.tape, disc, pass.fwd.output, form)?;
    Ok((scalar(&pass.tape, adv), flat_grad(&pass.tape, adv, &pass.bound, student)?))
}

/// Student gradient of the distillation MSE alone, nothing updated.
pub fn mse_gradient(teacher: &Network, student: &Network, z: &Tensor<f32>) -> Result<(f64, Vec<f32>)> {
    require_generator(student)?;
    let mut pass = student_pass(student, z, Mode::BatchStats)?;
    let mse = mse_term(&mut pass.tape, teacher, pass.fwd.output, z)?;
    Ok((scalar(&pass.tape, mse), flat_grad(&pass.tape, mse, &pass.bound, student)?))
}

/// Student gradient of the joint loss through a single backward pass.
pub fn joint_gradient(
    teacher: &Network,
    student: &Network,
    disc: &Network,
    z: &Tensor<f32>,
    alpha: f64,
    form: GenLoss,
) -> Result<(JointLosses, Vec<f32>)> {
    check_alpha(alpha)?;
    require_generator(student)?;
    let mut pass = student_pass(student, z, Mode::BatchStats)?;
    let mse = mse_term(&mut pass.tape, teacher, pass.fwd.output, z)?;
    let adv = adversarial_term(&mut pass.tape, disc, pass.fwd.output, form)?;
    let total = joint_total(&mut pass.tape, adv, mse, alpha)?;
    let losses = JointLosses {
        disc: f64::NAN,
        adv: scalar(&pass.tape, adv),
        mse: scalar(&pass.tape, mse),
    };
    Ok((losses, flat_grad(&pass.tape, total, &pass.bound, student)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OptimizerConfig;
    use crate::data::LatentSampler;
    use crate::models::NetworkSpec;

    fn pair() -> (Network, Network) {
        let g = Network::build(&NetworkSpec::generator(8, 1, 2), false, 1).unwrap();
        let d = Network::build(&NetworkSpec::discriminator(8, 1, 2), false, 2).unwrap();
        (g, d)
    }

    #[test]
    fn objective_reference_values() {
        assert_eq!(discriminator_objective(&[1.0, 1.0], &[0.0, 0.0]), 0.0);
        let eq = discriminator_objective(&[0.5; 4], &[0.5; 4]);
        assert!((eq - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((eq + 1.386).abs() < 1e-3);
        assert_eq!(critic_objective(&[0.3, -0.1], &[0.3, -0.1]), 0.0);
    }

    #[test]
    fn gan_step_updates_both_networks() {
        let (mut g, mut d) = pair();
        let (g0, d0) = (g.flat_params(), d.flat_params());
        let z = LatentSampler::new(0, 100).sample(4);
        let real = Tensor::filled(&[4, 1, 8, 8], 0.5).unwrap();
        let mut go = OptimizerConfig::gan_default().build();
        let mut dopt = OptimizerConfig::gan_default().build();
        let l = gan_step(&mut g, &mut d, &real, &z, &mut go, &mut dopt, GenLoss::NonSaturating).unwrap();
        assert!(l.disc.is_finite() && l.gen.is_finite());
        assert_ne!(g.flat_params(), g0);
        assert_ne!(d.flat_params(), d0);
        assert_eq!((go.steps(), dopt.steps()), (1, 1));
    }

    #[test]
    fn gan_step_rejects_critic() {
        let (mut g, _) = pair();
        let mut c = Network::build(&NetworkSpec::discriminator(8, 1, 2), true, 2).unwrap();
        let z = LatentSampler::new(0, 100).sample(2);
        let real = Tensor::zeros(&[2, 1, 8, 8]).unwrap();
        let mut o1 = OptimizerConfig::gan_default().build();
        let mut o2 = OptimizerConfig::gan_default().build();
        assert!(gan_step(&mut g, &mut c, &real, &z, &mut o1, &mut o2, GenLoss::NonSaturating).is_err());
    }

    #[test]
    fn wgan_step_counts_and_clips() {
        let (mut g, _) = pair();
        let mut c = Network::build(&NetworkSpec::discriminator(8, 1, 2), true, 2).unwrap();
        let mut zs = LatentSampler::new(3, 100);
        let batches: Vec<_> = (0..5)
            .map(|_| (Tensor::filled(&[4, 1, 8, 8], 0.2).unwrap(), zs.sample(4)))
            .collect();
        let mut go = OptimizerConfig::wgan_generator_default().build();
        let mut co = OptimizerConfig::wgan_critic_default().build();
        let l = wgan_step(&mut g, &mut c, &batches, &zs.sample(4), &mut go, &mut co).unwrap();
        assert_eq!(l.critic_updates, 5);
        assert_eq!(co.steps(), 5);
        assert_eq!(go.steps(), 1);
        assert!(l.max_abs_after_update.iter().all(|&m| m <= 0.01));
    }

    #[test]
    fn identical_student_has_zero_loss_and_gradient() {
        let (teacher, _) = pair();
        let mut student = teacher.clone();
        let z = LatentSampler::new(5, 100).sample(8);
        let (loss, grad) = mse_gradient(&teacher, &student, &z).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        let before = teacher.flat_params();
        let mut opt = OptimizerConfig::gan_default().build();
        assert_eq!(distill_mse_step(&teacher, &mut student, &z, &mut opt).unwrap(), 0.0);
        assert_eq!(teacher.flat_params(), before);
    }

    #[test]
    fn mismatched_image_shapes() {
        let (teacher, _) = pair();
        let mut student = Network::build(&NetworkSpec::generator(16, 1, 2), false, 1).unwrap();
        let z = LatentSampler::new(5, 100).sample(2);
        let mut opt = OptimizerConfig::gan_default().build();
        assert!(matches!(
            distill_mse_step(&teacher, &mut student, &z, &mut opt),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn joint_boundaries() {
        let (teacher, disc) = pair();
        let student = Network::build(&NetworkSpec::generator(8, 1, 1), false, 9).unwrap();
        let z = LatentSampler::new(6, 100).sample(4);
        let (_, g_adv) = adversarial_gradient(&student, &disc, &z, GenLoss::NonSaturating).unwrap();
        let (_, g_mse) = mse_gradient(&teacher, &student, &z).unwrap();
        let (_, g1) = joint_gradient(&teacher, &student, &disc, &z, 1.0, GenLoss::NonSaturating).unwrap();
        let (_, g0) = joint_gradient(&teacher, &student, &disc, &z, 0.0, GenLoss::NonSaturating).unwrap();
        assert_eq!(g1, g_adv);
        assert_eq!(g0, g_mse);
        assert!(joint_gradient(&teacher, &student, &disc, &z, 1.5, GenLoss::NonSaturating).is_err());
    }
}
