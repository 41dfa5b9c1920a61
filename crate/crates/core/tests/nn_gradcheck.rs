use metricopt::nn::{Activation, MlpSpec, Mode, ModelWeights, Tensor};
use metricopt::oracle::{central_difference, max_relative_error};
use metricopt::selfcheck::{autodiff_suite, gradient_check_trial};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_networks_match_finite_differences() {
    let report = autodiff_suite(40, 11).unwrap();
    assert!(report.passed, "{}", report.line());
}

#[test]
fn individual_trials_are_reproducible() {
    let a = gradient_check_trial(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = gradient_check_trial(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn hidden_upstream_gradient_matches_finite_differences() {
    // loss = sum(output) + sum(c ⊙ penultimate), batchnorm in train mode
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let spec = MlpSpec::new(vec![3, 6, 4, 1], Activation::LeakyRelu(0.2)).with_batchnorm(true);
    let w = ModelWeights::<f64>::init(spec, &mut rng).unwrap();
    let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap();
    let c: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).cos()).collect();
    let loss = |w: &ModelWeights<f64>| {
        let cache = w.forward_cached(&x, Mode::Train, None).unwrap();
        let out: f64 = cache.output().data().iter().sum();
        let emb: f64 = cache.penultimate().data().iter().zip(&c).map(|(a, b)| a * b).sum();
        out + emb
    };
    let cache = w.forward_cached(&x, Mode::Train, None).unwrap();
    let up = Tensor::matrix(4, 1, vec![1.0; 4]).unwrap();
    let hidden = Tensor::matrix(4, 4, c.clone()).unwrap();
    let back = w.backward(&cache, &up, &[(1, &hidden)]).unwrap();
    let mut probe = w.clone();
    let fd = central_difference(
        |p| {
            probe.set_params(p).unwrap();
            loss(&probe)
        },
        &w.params(),
        1e-5,
    );
    assert!(max_relative_error(&back.weights.flat(), &fd) < 1e-4);
}
