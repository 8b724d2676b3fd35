use scae_core::gradcheck::{self, Report};
use scae_core::Head;

const SEEDS: std::ops::Range<u64> = 0..20;

fn all_seeds(name: &str, check: impl Fn(u64) -> scae_core::Result<Report>) {
    let mut total = Report::default();
    for seed in SEEDS {
        let r = check(seed).unwrap();
        assert!(r.passes(), "{name} seed {seed}: {r}");
        total = total.merge(r);
    }
    eprintln!("{name}: {total}");
}

#[test]
fn conv_gradients() {
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 2, 0)] {
        all_seeds(&format!("conv {k}/{s}/{p}"), |seed| gradcheck::conv(seed, k, s, p));
    }
}

#[test]
fn deconv_gradients() {
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 2, 0)] {
        all_seeds(&format!("deconv {k}/{s}/{p}"), |seed| gradcheck::deconv(seed, k, s, p));
    }
}

#[test]
fn batchnorm_gradients() {
    all_seeds("batchnorm", gradcheck::batchnorm);
}

#[test]
fn relu_gradients() {
    all_seeds("relu", gradcheck::relu);
}

#[test]
fn softmax_cross_entropy_gradients() {
    all_seeds("softmax-ce", gradcheck::softmax_ce);
}

#[test]
fn pooled_linear_gradients() {
    all_seeds("pool+linear", gradcheck::pooled_linear);
}

#[test]
fn toy_autoencoder_gradients() {
    all_seeds("autoencoder", |seed| gradcheck::toy_network(seed, Head::Autoencoder));
}

#[test]
fn toy_classifier_gradients() {
    all_seeds("classifier", |seed| gradcheck::toy_network(seed, Head::Classifier { classes: 4 }));
}

#[test]
fn autoencoder_without_shortcuts() {
    let mut spec = scae_core::NetworkSpec::from_layer_counts(&[2, 1], 3, [2, 7, 7], Head::Autoencoder);
    spec.shortcut_spacing = 0;
    spec.input_output_shortcut = false;
    all_seeds("plain autoencoder", |seed| gradcheck::network(&spec, seed));
}

#[test]
fn deconv_is_adjoint_of_conv() {
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        for seed in SEEDS {
            let gap = gradcheck::adjoint_gap(seed, k, s, p).unwrap();
            assert!(gap < 1e-10, "{k}/{s}/{p} seed {seed}: {gap:e}");
        }
    }
}

#[test]
fn input_gradient_carries_the_identity_term() {
    use scae_core::{Mode, Network, NetworkSpec, Rng, Tensor};
    let spec = NetworkSpec::from_layer_counts(&[2, 1], 3, [2, 7, 7], Head::Autoencoder);
    let net = Network::new(spec).unwrap();
    let mut store = net.init_params::<f64>(&mut Rng::new(8), 0.5).unwrap();
    // With the first convolution silenced the encoder output no longer
    // depends on the input, leaving only the input→output path.
    store.get_mut("enc.1.conv.weight").unwrap().fill(0.0);
    let x: Tensor<f64> = Rng::new(9).gaussian(&[2, 2, 7, 7], 0.0, 1.0).unwrap();
    let trace = net.forward(&store, &x, Mode::Train).unwrap();
    let r: Tensor<f64> = Rng::new(10).gaussian(x.shape(), 0.0, 1.0).unwrap();
    let grads = net.backward(&store, &trace, &r).unwrap();
    assert_eq!(grads.input.unwrap(), r);
}
