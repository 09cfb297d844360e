use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bbh::data::{toy_regression, BatchTargets};
use bbh::divergence::Discriminator;
use bbh::nets::build_mlp;
use bbh::posterior::{Architecture, NoiseMode, Posterior};
use bbh::training::{elbo_on_tape, init_posterior, Method, TrainConfig};
use bbh::{gradient_check, Tape, Tensor};

fn toy_batch() -> (Tensor, BatchTargets) {
    let data = toy_regression(6, -4.0, 4.0, 3.0, 0).unwrap();
    data.batch(&[0, 1, 2, 3, 4, 5]).unwrap()
}

/// Moves every parameter off the init point: zero biases sit on ReLU kinks and
/// near-identical posterior draws make the finite differences meaningless.
fn jittered(cfg: &TrainConfig, spec: &bbh::nets::NetworkSpec, seed: u64) -> Posterior {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut post = init_posterior(cfg, spec, &mut rng).unwrap();
    for t in post.parameters_mut().unwrap().values_mut() {
        let noise = Tensor::randn(t.shape().to_vec(), 0.0, 0.5, &mut rng);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    post
}

fn small_config(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig::for_method(method);
    cfg.kl_samples = 4;
    cfg.prior_samples = 6;
    cfg.hypernet.hidden = vec![5, 4];
    cfg.hypernet.noise_dim = 2;
    cfg
}

/// Worst relative finite-difference error of the full loss over every parameter tensor.
fn loss_gradient_error(cfg: &TrainConfig, post: &Posterior) -> f64 {
    let (x, y) = toy_batch();
    let params = post.parameters().unwrap();
    let mut worst: f64 = 0.0;
    for (i, target) in params.values().iter().enumerate() {
        let err = gradient_check(
            |t, v| {
                let mut vars = params.register_constants(t);
                vars[i] = v;
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                Ok(elbo_on_tape(t, post, &vars, cfg, (&x, &y), 0.3, None, &mut rng)?.loss)
            },
            target,
            1e-6,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

#[test]
fn hypernet_loss_matches_finite_differences() {
    let spec = build_mlp(&[1, 3, 1]).unwrap();
    for arch in [Architecture::Single, Architecture::LayerWise, Architecture::SlicedLayerWise] {
        for mode in [NoiseMode::Shared, NoiseMode::Independent] {
            let mut cfg = small_config(Method::Bbh);
            cfg.hypernet.architecture = arch;
            cfg.hypernet.noise_mode = mode;
            let post = jittered(&cfg, &spec, 3);
            let err = loss_gradient_error(&cfg, &post);
            assert!(err < 1e-4, "{arch:?}/{mode:?}: {err}");
        }
    }
}

#[test]
fn gaussian_losses_match_finite_differences() {
    let spec = build_mlp(&[1, 4, 1]).unwrap();
    for method in [Method::Bbb, Method::BbbKernel, Method::Map, Method::Dropout] {
        let cfg = small_config(method);
        let post = jittered(&cfg, &spec, 4);
        let err = loss_gradient_error(&cfg, &post);
        assert!(err < 1e-4, "{method}: {err}");
    }
}

#[test]
fn every_family_passes_gradient_to_every_tensor() {
    let spec = build_mlp(&[1, 8, 1]).unwrap();
    let (x, y) = toy_batch();
    for method in [Method::Bbh, Method::Bbb, Method::BbbKernel, Method::BbbAvb, Method::Dropout, Method::Map] {
        let mut cfg = small_config(method);
        cfg.hypernet.hidden = vec![16, 16];
        cfg.dropout_rate = 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let post = init_posterior(&cfg, &spec, &mut rng).unwrap();
        let mut disc = Discriminator::new(cfg.discriminator.clone(), &mut rng);
        let tape = Tape::new();
        let params = post.parameters().unwrap().register(&tape);
        let terms = elbo_on_tape(&tape, &post, &params, &cfg, (&x, &y), 1.0, Some(&mut disc), &mut rng).unwrap();
        assert!(tape.item(terms.loss).is_finite());
        let grads = tape.backward(terms.loss).unwrap();
        for (name, p) in post.parameters().unwrap().names().iter().zip(&params) {
            let g = grads.get(*p).unwrap_or_else(|| panic!("{method}: {name} is off the graph"));
            assert!(g.all_finite());
            assert!(g.data().iter().any(|v| *v != 0.0), "{method}: {name} has a zero gradient");
        }
    }
}

#[test]
fn avb_without_a_discriminator_is_a_contract_error() {
    let spec = build_mlp(&[1, 2, 1]).unwrap();
    let cfg = small_config(Method::BbbAvb);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let post = init_posterior(&cfg, &spec, &mut rng).unwrap();
    let (x, y) = toy_batch();
    let tape = Tape::new();
    let params = post.parameters().unwrap().register(&tape);
    assert!(elbo_on_tape(&tape, &post, &params, &cfg, (&x, &y), 1.0, None, &mut rng).is_err());
}

#[test]
fn conditioned_generators_start_with_distinct_units_at_fan_in_scale() {
    let spec = build_mlp(&[100, 32, 10]).unwrap();
    for arch in [Architecture::SlicedLayerWise, Architecture::Single] {
        let mut cfg = TrainConfig::for_method(Method::Bbh);
        cfg.hypernet.architecture = arch;
        cfg.hypernet.hidden = vec![16, 32];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let post = init_posterior(&cfg, &spec, &mut rng).unwrap();
        let w = post.sample_weights(&mut rng, 1).unwrap().remove(0);
        let k = w.get("layer0.kernel").unwrap();
        let (fi, fo) = (k.shape()[0], k.shape()[1]);
        let col = |j: usize| (0..fi).map(|i| k.data()[i * fo + j]).collect::<Vec<_>>();
        let mut cos = 0.0;
        for a in 0..fo {
            for b in a + 1..fo {
                let (x, y) = (col(a), col(b));
                let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
                let norm = |v: &[f64]| v.iter().map(|p| p * p).sum::<f64>().sqrt();
                cos += dot / (norm(&x) * norm(&y));
            }
        }
        cos /= (fo * (fo - 1) / 2) as f64;
        assert!(cos.abs() < 0.1, "{arch}: mean cosine {cos}");
        let rms = (k.data().iter().map(|v| v * v).sum::<f64>() / k.data().len() as f64).sqrt();
        let he = (2.0 / fi as f64).sqrt();
        assert!((rms / he - 1.0).abs() < 0.3, "{arch}: rms {rms} vs {he}");
    }
}
