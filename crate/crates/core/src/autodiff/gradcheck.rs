//! Tape gradients versus central finite differences.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Element, LayerKind, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator `max(|a|, |n|, floor)`,
    /// so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many elements per input (evenly strided).
    pub max_elems_per_input: usize,
    /// Seeds the random projection used for non-scalar outputs.
    pub seed: u64,
}

impl GradCheckConfig {
    /// 32-bit setting: eps 1e-3, tolerance 1e-3.
    pub fn f32_default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            tolerance: 1e-3,
            floor: 1.0,
            max_elems_per_input: 256,
            seed: 0,
        }
    }

    /// 64-bit verification setting: eps 1e-5, tolerance 1e-5.
    pub fn f64_default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-5,
            floor: 1e-3,
            max_elems_per_input: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input index, flat element)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

fn projection<E: Element>(n: usize, seed: u64) -> Vec<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n)
        .map(|_| E::lit((rng.next_u32() as f64 / u32::MAX as f64) * 2.0 - 1.0))
        .collect()
}

/// Compare tape gradients of `fragment` with central differences for every
/// input. Scalar outputs are used as the loss directly; other outputs are
/// reduced with a fixed random projection `sum(r * y)`.
pub fn grad_check<E, F>(inputs: &[Tensor<E>], fragment: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = fragment(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let scalar = out_shape == [1];
    let r: Vec<E> = projection(tape.value(out).numel(), cfg.seed);
    let loss = if scalar {
        out
    } else {
        let rv = tape.constant(Tensor::new(out_shape, r.clone())?)?;
        let prod = tape.mul(out, rv)?;
        tape.sum(prod)?
    };
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<E>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs = perturbed
            .iter()
            .map(|x| t.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = fragment(&mut t, &vs)?;
        let yd = t.value(y).data();
        Ok(if scalar {
            yd[0].f64()
        } else {
            yd.iter().zip(&r).map(|(a, b)| a.f64() * b.f64()).sum()
        })
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        passed: true,
    };
    let mut work: Vec<Tensor<E>> = inputs.to_vec();
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(g) => g,
            None => {
                zeros = vec![E::zero(); input.numel()];
                &zeros
            }
        };
        let stride = input.numel().div_ceil(cfg.max_elems_per_input.max(1));
        for j in (0..input.numel()).step_by(stride.max(1)) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = E::lit(orig.f64() + cfg.eps);
            let plus = eval(&work)?;
            work[i].data_mut()[j] = E::lit(orig.f64() - cfg.eps);
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            // divide by the realized step, which differs from 2 * eps in f32
            let h = E::lit(orig.f64() + cfg.eps).f64() - E::lit(orig.f64() - cfg.eps).f64();
            let numeric = (plus - minus) / h;
            let a = analytic[j].f64();
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.max_rel_err < cfg.tolerance;
    Ok(report)
}

/// Names of every layer kind the tape records.
pub const LAYER_KINDS: [&str; 13] = [
    "dense",
    "conv2d",
    "conv_transpose2d",
    "batchnorm2d",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "softmax",
    "reshape",
    "mse_loss",
    "bce_loss",
    "mean",
];

/// A randomly shaped single-layer fragment and its operands.
#[derive(Clone, Debug)]
pub struct LayerCase<E> {
    pub kind: LayerKind,
    pub inputs: Vec<Tensor<E>>,
}

struct CaseRng(ChaCha8Rng);

impl CaseRng {
    fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.0.next_u32() as usize) % (hi - lo + 1)
    }

    fn unit(&mut self) -> f64 {
        self.0.next_u32() as f64 / u32::MAX as f64
    }

    fn tensor<E: Element>(&mut self, shape: &[usize], f: impl Fn(f64) -> f64) -> Tensor<E> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| E::lit(f(self.unit()))).collect();
        Tensor::new(shape.to_vec(), data).expect("positive dims")
    }

    fn normalish<E: Element>(&mut self, shape: &[usize], scale: f64) -> Tensor<E> {
        self.tensor(shape, |u| (u * 2.0 - 1.0) * scale)
    }
}

/// Random small instance of `kind` (one of [`LAYER_KINDS`]) for `seed`.
/// Inputs to kinked activations keep away from the kink so that central
/// differences are meaningful.
pub fn layer_case<E: Element>(kind: &str, seed: u64) -> Option<LayerCase<E>> {
    let mut r = CaseRng(ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x51));
    let away = |u: f64| {
        let m = 0.05 + 0.95 * (u * 2.0 - 1.0).abs();
        if u < 0.5 {
            -m
        } else {
            m
        }
    };
    let case = match kind {
        "dense" => {
            let (n, fin, fout) = (r.int(1, 4), r.int(1, 6), r.int(1, 5));
            LayerCase {
                kind: LayerKind::Dense,
                inputs: vec![
                    r.normalish(&[n, fin], 1.0),
                    r.normalish(&[fout, fin], 0.5),
                    r.normalish(&[fout], 0.5),
                ],
            }
        }
        "conv2d" => {
            let (n, cin, cout) = (r.int(1, 2), r.int(1, 3), r.int(1, 3));
            let (k, s) = (r.int(1, 4), r.int(1, 2));
            let p = r.int(0, k - 1);
            let oh = r.int(1, 3);
            let h = ((oh - 1) * s + k).saturating_sub(2 * p).max(1);
            let h = if super::conv_out(h, k, s, p).is_some() { h } else { (oh - 1) * s + k };
            let p = if super::conv_out(h, k, s, p).is_some() { p } else { 0 };
            LayerCase {
                kind: LayerKind::Conv2d { stride: s, pad: p },
                inputs: vec![
                    {
                        let w = h + r.int(0, 1) * s;
                        r.normalish(&[n, cin, h, w], 1.0)
                    },
                    r.normalish(&[cout, cin, k, k], 0.5),
                    r.normalish(&[cout], 0.5),
                ],
            }
        }
        "conv_transpose2d" => {
            let (n, cin, cout) = (r.int(1, 2), r.int(1, 3), r.int(1, 3));
            let (k, s) = (r.int(1, 4), r.int(1, 2));
            let p = r.int(0, (k - 1) / 2);
            let (h, w) = (r.int(1, 3), r.int(1, 3));
            LayerCase {
                kind: LayerKind::ConvTranspose2d { stride: s, pad: p },
                inputs: vec![
                    r.normalish(&[n, cin, h, w], 1.0),
                    r.normalish(&[cin, cout, k, k], 0.5),
                    r.normalish(&[cout], 0.5),
                ],
            }
        }
        "batchnorm2d" => {
            let (n, c, h, w) = (r.int(2, 3), r.int(1, 3), r.int(1, 4), r.int(1, 4));
            LayerCase {
                kind: LayerKind::BatchNorm2d,
                inputs: vec![
                    r.normalish(&[n, c, h, w], 1.0),
                    r.tensor(&[c], |u| 0.5 + u),
                    r.normalish(&[c], 0.5),
                ],
            }
        }
        "relu" | "leaky_relu" => {
            let shape = [r.int(1, 4), r.int(1, 6)];
            LayerCase {
                kind: if kind == "relu" {
                    LayerKind::Relu
                } else {
                    LayerKind::LeakyRelu
                },
                inputs: vec![r.tensor(&shape, away)],
            }
        }
        "tanh" | "sigmoid" | "softmax" | "mean" => {
            let shape = [r.int(1, 4), r.int(1, 6)];
            LayerCase {
                kind: match kind {
                    "tanh" => LayerKind::Tanh,
                    "sigmoid" => LayerKind::Sigmoid,
                    "softmax" => LayerKind::Softmax,
                    _ => LayerKind::Mean,
                },
                inputs: vec![r.normalish(&shape, 2.0)],
            }
        }
        "reshape" => {
            let (a, b, c) = (r.int(1, 3), r.int(1, 3), r.int(1, 3));
            LayerCase {
                kind: LayerKind::Reshape(vec![c * b, a]),
                inputs: vec![r.normalish(&[a, b, c], 1.0)],
            }
        }
        "mse_loss" => {
            let shape = [r.int(1, 4), r.int(1, 6)];
            LayerCase {
                kind: LayerKind::MseLoss,
                inputs: vec![r.normalish(&shape, 1.0), r.normalish(&shape, 1.0)],
            }
        }
        "bce_loss" => {
            let shape = [r.int(1, 4), r.int(1, 3)];
            LayerCase {
                kind: LayerKind::BceLoss,
                inputs: vec![r.tensor(&shape, |u| 0.05 + 0.9 * u), r.tensor(&shape, |u| u)],
            }
        }
        _ => return None,
    };
    Some(case)
}

/// Run [`grad_check`] on one random instance of a layer kind.
pub fn check_layer_kind<E: Element>(kind: &str, seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let case = layer_case::<E>(kind, seed)
        .ok_or_else(|| crate::error::Error::Contract(format!("unknown layer kind {kind}")))?;
    let k = case.kind.clone();
    grad_check(&case.inputs, move |t, v| t.forward_op(&k, v), GradCheckConfig { seed, ..cfg })
}
