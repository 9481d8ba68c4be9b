use distillgan::models::{Network, NetworkSpec, Role};
use distillgan::Tensor;

const K: usize = 4 * 4;

/// Parameter count of the DCGAN recipe, summed layer by layer.
fn summed(spec: &NetworkSpec) -> usize {
    let blocks = spec.image_size.trailing_zeros() as usize - 2;
    let top = spec.depth_scale << (blocks - 1);
    let conv = |cin: usize, cout: usize| K * cin * cout + cout;
    let bn = |c: usize| 2 * c;
    let dense = |fin: usize, fout: usize| fin * fout + fout;
    match spec.role {
        Role::Generator => {
            let mut n = dense(spec.latent_dim, top * 16) + bn(top);
            let mut w = top;
            for _ in 1..blocks {
                n += conv(w, w / 2) + bn(w / 2);
                w /= 2;
            }
            n + conv(w, spec.image_channels)
        }
        Role::Discriminator | Role::Classifier => {
            let mut w = spec.depth_scale;
            let mut n = conv(spec.image_channels, w);
            for _ in 1..blocks {
                n += conv(w, 2 * w) + bn(2 * w);
                w *= 2;
            }
            if spec.role == Role::Discriminator {
                n + dense(top * 16, 1)
            } else {
                n + dense(top * 16, 64) + dense(64, spec.num_classes)
            }
        }
    }
}

#[test]
fn param_counts_match_layer_summation() {
    for size in [8, 16, 32, 64] {
        for c in [1, 3] {
            for d in [1, 2, 3, 8] {
                for spec in [
                    NetworkSpec::generator(size, c, d),
                    NetworkSpec::discriminator(size, c, d),
                    NetworkSpec::classifier(size, c, d, 10),
                ] {
                    let net = Network::build(&spec, false, 0).unwrap();
                    assert_eq!(net.param_count(), summed(&spec), "{spec:?}");
                }
            }
        }
    }
}

#[test]
fn golden_generator_count() {
    let spec = NetworkSpec::generator(16, 1, 2);
    assert_eq!(Network::build(&spec, false, 0).unwrap().param_count(), 6639);
}

#[test]
fn critic_drops_only_the_sigmoid() {
    let spec = NetworkSpec::discriminator(16, 3, 2);
    let a = Network::build(&spec, false, 4).unwrap();
    let b = Network::build(&spec, true, 4).unwrap();
    assert_eq!(a.flat_params(), b.flat_params());
    assert!(b.is_critic() && !a.is_critic());
}

#[test]
fn zero_latent_replays_bias_path() {
    let spec = NetworkSpec::generator(16, 1, 2);
    let z = Tensor::zeros(&[3, spec.latent_dim]).unwrap();
    let a = Network::build(&spec, false, 11).unwrap().generate(&z).unwrap();
    let b = Network::build(&spec, false, 11).unwrap().generate(&z).unwrap();
    assert_eq!(a, b);
    let n = a.numel() / 3;
    assert_eq!(a.data()[..n], a.data()[n..2 * n]);
    assert_eq!(a.data()[..n], a.data()[2 * n..]);
}
