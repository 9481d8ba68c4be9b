use crate::autodiff::{BatchStats, Gradients, Tape, Tensor, Var};
use crate::data::SeededRng;
use crate::error::{Error, Result};
use crate::models::spec::{NetworkSpec, Role, FEATURE_WIDTH};

/// Running-average update weight of the previous value.
pub const BN_MOMENTUM: f64 = 0.9;
const INIT_STD: f64 = 0.02;
const KERNEL: usize = 4;

/// One step of a network. Parameter-carrying layers refer into the
/// network's flat parameter registry by index.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { w: usize, b: usize },
    Conv { w: usize, b: usize, stride: usize, pad: usize },
    ConvTranspose { w: usize, b: usize, stride: usize, pad: usize },
    BatchNorm { gamma: usize, beta: usize, stats: usize },
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Softmax,
    /// Reshape each sample; the batch axis is kept.
    Reshape(Vec<usize>),
    Flatten,
    /// Marks the exposed feature activations (classifier penultimate layer).
    Features,
}

/// How batchnorm layers normalize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Batch statistics; running averages left untouched.
    BatchStats,
    /// Running averages.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Result of a recorded forward pass.
pub struct Forward {
    pub output: Var,
    /// Input of the final sigmoid/softmax head, if any.
    pub logits: Option<Var>,
    pub features: Option<Var>,
    stats: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: Option<NetworkSpec>,
    role: Role,
    critic: bool,
    layers: Vec<Layer>,
    params: Vec<Tensor<f32>>,
    running: Vec<RunningStats>,
    input_shape: Vec<usize>,
}

struct Builder<'r> {
    layers: Vec<Layer>,
    params: Vec<Tensor<f32>>,
    running: Vec<RunningStats>,
    rng: &'r mut SeededRng,
}

impl Builder<'_> {
    fn gaussian(&mut self, shape: &[usize], mean: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| (mean + INIT_STD * self.rng.normal()) as f32)
            .collect();
        self.params
            .push(Tensor::new(shape.to_vec(), data).expect("positive dims"));
        self.params.len() - 1
    }

    fn zeros(&mut self, n: usize) -> usize {
        self.params.push(Tensor::zeros(&[n]).expect("positive dims"));
        self.params.len() - 1
    }

    fn dense(&mut self, fin: usize, fout: usize) {
        let w = self.gaussian(&[fout, fin], 0.0);
        let b = self.zeros(fout);
        self.layers.push(Layer::Dense { w, b });
    }

    fn conv(&mut self, cin: usize, cout: usize) {
        let w = self.gaussian(&[cout, cin, KERNEL, KERNEL], 0.0);
        let b = self.zeros(cout);
        self.layers.push(Layer::Conv {
            w,
            b,
            stride: 2,
            pad: 1,
        });
    }

    fn conv_t(&mut self, cin: usize, cout: usize) {
        let w = self.gaussian(&[cin, cout, KERNEL, KERNEL], 0.0);
        let b = self.zeros(cout);
        self.layers.push(Layer::ConvTranspose {
            w,
            b,
            stride: 2,
            pad: 1,
        });
    }

    fn batch_norm(&mut self, c: usize) {
        let gamma = self.gaussian(&[c], 1.0);
        let beta = self.zeros(c);
        self.running.push(RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        self.layers.push(Layer::BatchNorm {
            gamma,
            beta,
            stats: self.running.len() - 1,
        });
    }

    /// Stride-2 conv trunk shared by discriminator and classifier; ends at
    /// `top_width x 4 x 4`.
    fn down_trunk(&mut self, spec: &NetworkSpec) {
        let mut width = spec.depth_scale;
        self.conv(spec.image_channels, width);
        self.layers.push(Layer::LeakyRelu);
        for _ in 1..spec.blocks() {
            self.conv(width, width * 2);
            width *= 2;
            self.batch_norm(width);
            self.layers.push(Layer::LeakyRelu);
        }
        self.layers.push(Layer::Flatten);
    }
}

impl Network {
    /// Construct the DCGAN-style network described by `spec`, initialized from
    /// `seed`. `critic` drops the discriminator's sigmoid head.
    pub fn build(spec: &NetworkSpec, critic: bool, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(seed, 0x5eed);
        let mut b = Builder {
            layers: Vec::new(),
            params: Vec::new(),
            running: Vec::new(),
            rng: &mut rng,
        };
        let top = spec.top_width();
        let input_shape = match spec.role {
            Role::Generator => {
                b.dense(spec.latent_dim, top * 16);
                b.layers.push(Layer::Reshape(vec![top, 4, 4]));
                b.batch_norm(top);
                b.layers.push(Layer::Relu);
                let mut width = top;
                for _ in 1..spec.blocks() {
                    b.conv_t(width, width / 2);
                    width /= 2;
                    b.batch_norm(width);
                    b.layers.push(Layer::Relu);
                }
                b.conv_t(width, spec.image_channels);
                b.layers.push(Layer::Tanh);
                vec![spec.latent_dim]
            }
            Role::Discriminator => {
                b.down_trunk(spec);
                b.dense(top * 16, 1);
                if !critic {
                    b.layers.push(Layer::Sigmoid);
                }
                spec.image_shape().to_vec()
            }
            Role::Classifier => {
                b.down_trunk(spec);
                b.dense(top * 16, FEATURE_WIDTH);
                b.layers.push(Layer::LeakyRelu);
                b.layers.push(Layer::Features);
                b.dense(FEATURE_WIDTH, spec.num_classes);
                b.layers.push(Layer::Softmax);
                spec.image_shape().to_vec()
            }
        };
        let Builder {
            layers,
            params,
            running,
            ..
        } = b;
        Ok(Network {
            spec: Some(*spec),
            role: spec.role,
            critic: critic && spec.role == Role::Discriminator,
            layers,
            params,
            running,
            input_shape,
        })
    }

    /// Network from explicit layers and parameters, for small hand-built
    /// models. `input_shape` excludes the batch axis.
    pub fn from_layers(
        role: Role,
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        params: Vec<Tensor<f32>>,
        running: Vec<RunningStats>,
    ) -> Result<Self> {
        for layer in &layers {
            let refs: &[usize] = match layer {
                Layer::Dense { w, b } | Layer::Conv { w, b, .. } | Layer::ConvTranspose { w, b, .. } => {
                    &[*w, *b]
                }
                Layer::BatchNorm { gamma, beta, .. } => &[*gamma, *beta],
                _ => &[],
            };
            if refs.iter().any(|&i| i >= params.len()) {
                return Err(Error::Spec(format!("{layer:?} refers past the parameter list")));
            }
            if let Layer::BatchNorm { stats, .. } = layer {
                if *stats >= running.len() {
                    return Err(Error::Spec("batchnorm refers past running stats".into()));
                }
            }
        }
        let critic = role == Role::Discriminator && !layers.contains(&Layer::Sigmoid);
        Ok(Network {
            spec: None,
            role,
            critic,
            layers,
            params,
            running,
            input_shape,
        })
    }

    pub fn spec(&self) -> Option<&NetworkSpec> {
        self.spec.as_ref()
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_critic(&self) -> bool {
        self.critic
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Total scalar parameters, batchnorm affine terms included.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn max_abs_param(&self) -> f32 {
        self.params.iter().map(Tensor::max_abs).fold(0.0, f32::max)
    }

    pub fn flat_params(&self) -> Vec<f32> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn load_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Checkpoint(format!(
                "weight vector holds {} values, network needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Running means then variances of every batchnorm, in layer order.
    pub fn flat_buffers(&self) -> Vec<f32> {
        self.running
            .iter()
            .flat_map(|r| r.mean.iter().chain(&r.var).copied())
            .collect()
    }

    pub fn load_flat_buffers(&mut self, flat: &[f32]) -> Result<()> {
        let want: usize = self.running.iter().map(|r| r.mean.len() * 2).sum();
        if flat.len() != want {
            return Err(Error::Checkpoint(format!(
                "buffer vector holds {} values, network needs {want}",
                flat.len()
            )));
        }
        let mut off = 0;
        for r in &mut self.running {
            let c = r.mean.len();
            r.mean.copy_from_slice(&flat[off..off + c]);
            r.var.copy_from_slice(&flat[off + c..off + 2 * c]);
            off += 2 * c;
        }
        Ok(())
    }

    /// Place every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.clear_grad();
                if trainable {
                    tape.param(p)
                } else {
                    tape.constant(p)
                }
            })
            .collect()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::Contract(format!(
                "{:?} network expects [batch, {:?}] input, got {s:?}",
                self.role, self.input_shape
            )));
        }
        Ok(())
    }

    /// Record a forward pass. Batch statistics gathered in [`Mode::Train`] are
    /// returned in the [`Forward`] and folded in by [`Network::absorb`].
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var, mode: Mode) -> Result<Forward> {
        if bound.len() != self.params.len() {
            return Err(Error::Contract("parameter binding from another network".into()));
        }
        self.check_input(tape, x)?;
        let mut h = x;
        let mut features = None;
        let mut logits = None;
        let mut stats = Vec::new();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { w, b } => tape.dense(h, bound[*w], Some(bound[*b]))?,
                Layer::Conv { w, b, stride, pad } => {
                    tape.conv2d(h, bound[*w], Some(bound[*b]), *stride, *pad)?
                }
                Layer::ConvTranspose { w, b, stride, pad } => {
                    tape.conv_transpose2d(h, bound[*w], Some(bound[*b]), *stride, *pad)?
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    stats: s,
                } => match mode {
                    Mode::Eval => {
                        let r = &self.running[*s];
                        let mean: Vec<f64> = r.mean.iter().map(|&v| v as f64).collect();
                        let var: Vec<f64> = r.var.iter().map(|&v| v as f64).collect();
                        tape.batch_norm2d_fixed(h, bound[*gamma], bound[*beta], &mean, &var)?
                    }
                    Mode::Train | Mode::BatchStats => {
                        let (v, st) = tape.batch_norm2d(h, bound[*gamma], bound[*beta])?;
                        if mode == Mode::Train {
                            stats.push((*s, st));
                        }
                        v
                    }
                },
                Layer::Relu => tape.relu(h)?,
                Layer::LeakyRelu => tape.leaky_relu(h)?,
                Layer::Tanh => tape.tanh(h)?,
                Layer::Sigmoid => {
                    logits = Some(h);
                    tape.sigmoid(h)?
                }
                Layer::Softmax => {
                    logits = Some(h);
                    tape.softmax(h)?
                }
                Layer::Reshape(shape) => {
                    let mut full = vec![tape.shape(h)[0]];
                    full.extend(shape);
                    tape.reshape(h, &full)?
                }
                Layer::Flatten => tape.flatten(h)?,
                Layer::Features => {
                    features = Some(h);
                    h
                }
            };
        }
        Ok(Forward {
            output: h,
            logits,
            features,
            stats,
        })
    }

    /// Fold batch statistics into the running averages.
    pub fn absorb(&mut self, fwd: &Forward) {
        for (idx, st) in &fwd.stats {
            let r = &mut self.running[*idx];
            for c in 0..r.mean.len() {
                r.mean[c] = (BN_MOMENTUM * r.mean[c] as f64 + (1.0 - BN_MOMENTUM) * st.mean[c]) as f32;
                r.var[c] = (BN_MOMENTUM * r.var[c] as f64 + (1.0 - BN_MOMENTUM) * st.var[c]) as f32;
            }
        }
    }

    /// Training-mode forward that also updates running statistics.
    pub fn forward_train(&mut self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Forward> {
        let fwd = self.forward(tape, bound, x, Mode::Train)?;
        self.absorb(&fwd);
        Ok(fwd)
    }

    /// Copy tape gradients into the parameters' gradient buffers.
    pub fn store_grads(&mut self, grads: &Gradients<f32>, bound: &[Var]) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(bound) {
            let g = grads
                .get(*v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()]);
            p.set_grad(g)?;
        }
        Ok(())
    }

    /// Untaped evaluation in the given mode (never updates running stats).
    pub fn run(&self, x: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        Ok(self.run_with_features(x, mode)?.0)
    }

    /// Untaped evaluation returning the output and the feature activations.
    pub fn run_with_features(
        &self,
        x: &Tensor<f32>,
        mode: Mode,
    ) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
        let mode = if mode == Mode::Train { Mode::BatchStats } else { mode };
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let fwd = self.forward(&mut tape, &bound, xv, mode)?;
        let features = fwd.features.map(|f| tape.value(f).clone());
        Ok((tape.value(fwd.output).clone(), features))
    }

    /// Eval-mode forward pass.
    pub fn infer(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.run(x, Mode::Eval)
    }

    /// Generator images for latents `z: [batch, latent_dim]`, eval mode.
    pub fn generate(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        if self.role != Role::Generator {
            return Err(Error::Contract(format!("generate on a {:?}", self.role)));
        }
        self.infer(z)
    }

    /// Classifier penultimate-layer activations, eval mode.
    pub fn features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.run_with_features(x, Mode::Eval)?
            .1
            .ok_or_else(|| Error::Contract(format!("{:?} exposes no feature layer", self.role)))
    }

    /// Width of the exposed feature layer, if any.
    pub fn feature_width(&self) -> Option<usize> {
        let pos = self.layers.iter().position(|l| *l == Layer::Features)?;
        self.layers[..pos].iter().rev().find_map(|l| match l {
            Layer::Dense { w, .. } => Some(self.params[*w].shape()[0]),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LatentSampler;

    #[test]
    fn generator_channel_sequence() {
        let net = Network::build(&NetworkSpec::generator(16, 1, 2), false, 0).unwrap();
        let widths: Vec<(usize, usize)> = net
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::ConvTranspose { w, .. } => {
                    let s = net.params()[*w].shape();
                    Some((s[0], s[1]))
                }
                _ => None,
            })
            .collect();
        assert_eq!(widths, vec![(4, 2), (2, 1)]);
        assert!(net
            .layers()
            .contains(&Layer::Reshape(vec![4, 4, 4])));
    }

    #[test]
    fn output_shapes_and_ranges() {
        let g = Network::build(&NetworkSpec::generator(16, 1, 2), false, 1).unwrap();
        let d = Network::build(&NetworkSpec::discriminator(16, 1, 2), false, 2).unwrap();
        let mut s = LatentSampler::new(3, 100);
        let img = g.generate(&s.sample(5)).unwrap();
        assert_eq!(img.shape(), &[5, 1, 16, 16]);
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let p = d.infer(&img).unwrap();
        assert_eq!(p.shape(), &[5, 1]);
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generate_checks_latent_shape_and_role() {
        let g = Network::build(&NetworkSpec::generator(8, 1, 2), false, 1).unwrap();
        assert!(matches!(
            g.generate(&Tensor::zeros(&[2, 7]).unwrap()),
            Err(Error::Contract(_))
        ));
        let d = Network::build(&NetworkSpec::discriminator(8, 1, 2), false, 1).unwrap();
        assert!(d.generate(&Tensor::zeros(&[2, 100]).unwrap()).is_err());
    }

    #[test]
    fn classifier_exposes_feature_layer() {
        let c = Network::build(&NetworkSpec::classifier(16, 1, 2, 3), false, 0).unwrap();
        assert_eq!(c.feature_width(), Some(FEATURE_WIDTH));
        let x = Tensor::zeros(&[4, 1, 16, 16]).unwrap();
        assert_eq!(c.features(&x).unwrap().shape(), &[4, FEATURE_WIDTH]);
        let p = c.infer(&x).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn critic_has_no_sigmoid() {
        let d = Network::build(&NetworkSpec::discriminator(16, 1, 2), true, 0).unwrap();
        assert!(d.is_critic());
        assert!(!d.layers().contains(&Layer::Sigmoid));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut a = Network::build(&NetworkSpec::generator(8, 3, 3), false, 4).unwrap();
        let b = Network::build(&NetworkSpec::generator(8, 3, 3), false, 5).unwrap();
        a.load_flat_params(&b.flat_params()).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert!(a.load_flat_params(&[0.0; 3]).is_err());
    }
}
