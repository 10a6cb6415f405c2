mod common;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::gradcheck::{generator_probes, miniature};
use mvrecon_core::model::{frame_to_tensor, DiscriminatorSpec, GeneratorSpec};
use mvrecon_core::nn::Param;
use mvrecon_core::training::{
    discriminator_loss, CganTrainer, ModelConfig, TrainConfig, TrainingPair,
};
use mvrecon_core::Frame;

fn snapshot(params: Vec<&Param>) -> Vec<Array2<f64>> {
    params.into_iter().map(|p| p.value.clone()).collect()
}

#[test]
fn generator_gradients_match_finite_differences_for_other_seeds() {
    for seed in [3, 8] {
        for probe in generator_probes(seed, 40) {
            assert!(
                probe.relative_error() <= 1e-3,
                "seed {seed}, {}: {} vs {}",
                probe.name,
                probe.analytic,
                probe.numeric
            );
        }
    }
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let (g, mut d, cond, _) = miniature(21);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fake = g.forward(&cond, &mut rng, Default::default()).unwrap().0;
    let real = cond.mapv(|v| -v * 0.5);
    let loss = |d: &mvrecon_core::model::Discriminator| {
        let (r, _) = d.forward(&cond, &real).unwrap();
        let (f, _) = d.forward(&cond, &fake).unwrap();
        discriminator_loss(&r, &f)
    };
    // analytic gradient of the halved cross-entropy, derived by hand
    d.zero_grad();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (r, rt) = d.forward(&cond, &real).unwrap();
    let (f, ft) = d.forward(&cond, &fake).unwrap();
    let n = r.len() as f64;
    d.backward(&rt, &r.mapv(|v| 0.5 * (sig(v) - 1.0) / n));
    d.backward(&ft, &f.mapv(|v| 0.5 * sig(v) / n));
    let sizes: Vec<usize> = d.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    for flat in sample(&mut rng, total, 60).into_vec() {
        let (mut p, mut e) = (0, flat);
        while e >= sizes[p] {
            e -= sizes[p];
            p += 1;
        }
        let analytic = d.params()[p].grad.as_slice().unwrap()[e];
        let shifted = |delta: f64| {
            let mut h = d.clone();
            h.params_mut()[p].value.as_slice_mut().unwrap()[e] += delta;
            loss(&h)
        };
        let numeric = (shifted(1e-5) - shifted(-1e-5)) / 2e-5;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel <= 1e-3, "param {p}[{e}]: {analytic} vs {numeric}");
    }
}

fn tiny_trainer() -> (CganTrainer, Vec<TrainingPair>) {
    let model = ModelConfig {
        generator: GeneratorSpec::with_depth(4, 4),
        discriminator: DiscriminatorSpec {
            in_channels: 6,
            base_filters: 4,
            n_layers: 2,
        },
    };
    let trainer = CganTrainer::new(&model, &TrainConfig::default(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = common::random_frame(&mut rng, 16, 16);
    let b = common::random_frame(&mut rng, 16, 16);
    let pair = TrainingPair {
        condition: frame_to_tensor(&a),
        target: frame_to_tensor(&b),
    };
    (trainer, vec![pair])
}

#[test]
fn each_update_touches_only_its_own_network() {
    let (mut t, batch) = tiny_trainer();
    for _ in 0..3 {
        let fakes = t.generate(&batch).unwrap();
        let g_before = snapshot(t.generator.params());
        let d_before = snapshot(t.discriminator.params());
        t.discriminator_step(&batch, &fakes).unwrap();
        assert_eq!(snapshot(t.generator.params()), g_before, "D step moved G");
        assert_ne!(snapshot(t.discriminator.params()), d_before, "D step did nothing");

        let d_mid = snapshot(t.discriminator.params());
        t.generator_step(&batch, fakes).unwrap();
        assert_eq!(snapshot(t.discriminator.params()), d_mid, "G step moved D");
        assert_ne!(snapshot(t.generator.params()), g_before, "G step did nothing");
    }
}

#[test]
fn recorded_losses_stay_finite() {
    let (mut t, batch) = tiny_trainer();
    for step in 0..30 {
        let rec = t.step(&batch, step).unwrap();
        assert!(rec.d_loss.is_finite() && rec.g_loss.is_finite() && rec.l1.is_finite());
        assert!(rec.d_loss > 0.0 && rec.l1 >= 0.0);
    }
}

#[test]
fn generated_frames_are_valid_frames() {
    let (t, _) = tiny_trainer();
    let cond = Frame::constant(16, 16, 0.3, 1, 4).unwrap();
    let out = t
        .generator
        .generate(&cond, &mut ChaCha8Rng::seed_from_u64(0), 5)
        .unwrap();
    assert_eq!(out.dims(), (16, 16));
    assert_eq!(out.index(), 5);
}
