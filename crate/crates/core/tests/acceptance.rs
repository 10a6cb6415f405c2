//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2 6`.

mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{brute_bce, brute_psnr, brute_ssim, gradcheck, perturbed, random_frame, PlantedSource};
use mvrecon_core::data::{synthesize, Split, SynthConfig};
use mvrecon_core::eval::{
    calibrate, emit_report, run_sweep, validation_tasks, GapSweepReport, Gating, Mode, ReportFormat, DEFAULT_GAPS,
};
use mvrecon_core::fusion::calibrate_weights;
use mvrecon_core::metrics::{psnr, ssim};
use mvrecon_core::model::{
    frame_to_tensor, Discriminator, DiscriminatorSpec, ForwardOptions, Generator, GeneratorSpec,
};
use mvrecon_core::training::{
    gan_losses, loss_history_csv, train_bank, CganTrainer, ModelConfig, TrainConfig, TrainingPair,
};
use mvrecon_core::{Config, SourceTag};

struct Criterion {
    id: u32,
    title: &'static str,
    budget: Option<Duration>,
    run: fn() -> String,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: 1,
        title: "metric oracles",
        budget: Some(Duration::from_secs(5)),
        run: metric_oracles,
    },
    Criterion {
        id: 2,
        title: "loss closed forms",
        budget: None,
        run: loss_closed_forms,
    },
    Criterion {
        id: 3,
        title: "generator gradient check",
        budget: Some(Duration::from_secs(120)),
        run: gradient_check,
    },
    Criterion {
        id: 4,
        title: "architecture contracts",
        budget: None,
        run: architecture_contracts,
    },
    Criterion {
        id: 5,
        title: "single-pair overfit probe",
        budget: Some(Duration::from_secs(600)),
        run: overfit_probe,
    },
    Criterion {
        id: 6,
        title: "calibration oracle",
        budget: Some(Duration::from_secs(60)),
        run: calibration_oracle,
    },
    Criterion {
        id: 7,
        title: "end-to-end trends on synthetic data",
        budget: Some(Duration::from_secs(3600)),
        run: end_to_end_trends,
    },
    Criterion {
        id: 8,
        title: "determinism",
        budget: None,
        run: determinism,
    },
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for c in CRITERIA.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run));
        let elapsed = start.elapsed();
        let over_budget = c.budget.filter(|b| elapsed > *b);
        match (outcome, over_budget) {
            (Ok(detail), None) => {
                println!("PASS [{}] {} ({:.1}s): {detail}", c.id, c.title, elapsed.as_secs_f64());
            }
            (Ok(detail), Some(budget)) => {
                failures += 1;
                println!(
                    "FAIL [{}] {}: took {:.1}s, budget {}s ({detail})",
                    c.id,
                    c.title,
                    elapsed.as_secs_f64(),
                    budget.as_secs()
                );
            }
            (Err(payload), _) => {
                failures += 1;
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                println!("FAIL [{}] {} ({:.1}s): {msg}", c.id, c.title, elapsed.as_secs_f64());
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn metric_oracles() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = (0.0f64, 0.0f64);
    for n in 0..20 {
        let a = random_frame(&mut rng, 16, 16);
        // half independent pairs, half increasingly similar ones
        let b = if n % 2 == 0 {
            random_frame(&mut rng, 16, 16)
        } else {
            perturbed(&a, 0.05 * n as f32, &mut rng)
        };
        let dp = (psnr(&a, &b).unwrap() - brute_psnr(&a, &b)).abs();
        let ds = (ssim(&a, &b).unwrap() - brute_ssim(&a, &b)).abs();
        assert!(dp <= 1e-6, "pair {n}: psnr off by {dp:e}");
        assert!(ds <= 1e-6, "pair {n}: ssim off by {ds:e}");
        worst = (worst.0.max(dp), worst.1.max(ds));
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
    format!("max |psnr diff| {:.1e}, max |ssim diff| {:.1e}", worst.0, worst.1)
}

fn loss_closed_forms() -> String {
    let zeros = Array2::<f64>::zeros((30, 30));
    let frame = Array3::<f64>::zeros((3, 8, 8));
    let at_zero = gan_losses(&zeros, &zeros, &frame, &frame, 100.0).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((at_zero.d_loss - ln2).abs() <= 1e-9, "d_loss {} at zero", at_zero.d_loss);
    assert!((at_zero.g_loss - ln2).abs() <= 1e-9, "g_loss {} at zero", at_zero.g_loss);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let scale = rng.gen_range(0.1..4.0);
        let mut logits = || Array2::from_shape_fn((6, 6), |_| scale * rng.sample::<f64, _>(StandardNormal));
        let (real, fake) = (logits(), logits());
        let f = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let t = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let losses = gan_losses(&real, &fake, &f, &t, 100.0).unwrap();
        let expected = 0.5 * brute_bce(&real, &fake);
        let diff = (losses.d_loss - expected).abs();
        assert!(diff <= 1e-9, "d_loss {} vs half cross-entropy {expected}", losses.d_loss);
        let l1 = (&f - &t).mapv(f64::abs).mean().unwrap();
        let adv = fake.iter().map(|&v| -(1.0 / (1.0 + (-v).exp())).ln()).sum::<f64>() / fake.len() as f64;
        assert!((losses.g_loss - (adv + 100.0 * l1)).abs() <= 1e-9 * losses.g_loss.abs().max(1.0));
        worst = worst.max(diff);
    }
    format!("d_loss(0) = ln 2, max |d_loss - bce/2| {worst:.1e} over 10 inputs")
}

fn gradient_check() -> String {
    let probes = gradcheck::generator_probes(17, 128);
    assert!(probes.len() >= 100);
    let worst = probes
        .iter()
        .max_by(|a, b| a.relative_error().total_cmp(&b.relative_error()))
        .unwrap();
    assert!(
        worst.relative_error() <= 1e-3,
        "{}: analytic {:e} vs numeric {:e}",
        worst.name,
        worst.analytic,
        worst.numeric
    );
    format!("{} parameters, max relative error {:.1e}", probes.len(), worst.relative_error())
}

fn architecture_contracts() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Generator::new(GeneratorSpec::default(), &mut rng).unwrap();
    let x = Array3::from_shape_fn((3, 256, 256), |_| rng.gen_range(-1.0..1.0));
    let (y, _) = g.forward(&x, &mut rng, ForwardOptions::default()).unwrap();
    assert_eq!(y.dim(), (3, 256, 256));
    assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)), "generator output leaves [-1, 1]");

    let d = Discriminator::new(DiscriminatorSpec::default(), &mut rng).unwrap();
    let cond = Array3::from_shape_fn((3, 256, 256), |_| rng.gen_range(-1.0..1.0));
    let cand = Array3::from_shape_fn((3, 256, 256), |_| rng.gen_range(-1.0..1.0));
    let (map, _) = d.forward(&cond, &cand).unwrap();
    assert_eq!(map.dim(), (30, 30));

    // cell (0, 0) sees at most the top-left 70x70 corner
    let probe = |image: usize, y: usize, x: usize| {
        let (mut c, mut k) = (cond.clone(), cand.clone());
        let target = if image == 0 { &mut c } else { &mut k };
        for ch in 0..3 {
            target[[ch, y, x]] = -target[[ch, y, x]] + 0.5;
        }
        d.forward(&c, &k).unwrap().0
    };
    for (image, y, x) in [(1, 255, 255), (1, 0, 120), (0, 90, 3), (1, 70, 70)] {
        let moved = probe(image, y, x);
        assert_eq!(moved[[0, 0]], map[[0, 0]], "pixel ({y}, {x}) reached cell (0, 0)");
        assert!(moved != map, "perturbing ({y}, {x}) changed nothing at all");
    }
    let near = probe(1, 20, 20);
    assert_ne!(near[[0, 0]], map[[0, 0]], "cell (0, 0) ignores its own patch");
    format!(
        "256x256 -> 256x256 in [-1, 1], map 30x30, receptive field {}",
        DiscriminatorSpec::default().receptive_field()
    )
}

fn overfit_probe() -> String {
    let cfg = Config::default();
    let store = cfg.load_store().unwrap();
    let target = store.rig().target();
    let i = store.indices_in(Split::Train).nth(40).unwrap();
    let pair = TrainingPair {
        condition: frame_to_tensor(store.frame(target, i - 1).unwrap()),
        target: frame_to_tensor(store.frame(target, i).unwrap()),
    };
    let mut trainer = CganTrainer::new(&cfg.model, &cfg.train, 1).unwrap();
    let batch = [pair];
    let mut best = f64::INFINITY;
    for step in 0..2000 {
        let rec = trainer.step(&batch, step).unwrap();
        assert!(
            rec.d_loss.is_finite() && rec.g_loss.is_finite() && rec.l1.is_finite(),
            "non-finite loss at step {step}"
        );
        best = best.min(rec.l1);
        if rec.l1 < 0.05 {
            return format!("L1 {:.4} at step {step}", rec.l1);
        }
    }
    panic!("best L1 {best:.4} after 2000 steps");
}

fn calibration_oracle() -> String {
    let cfg = Config::default();
    let store = cfg.load_store().unwrap();
    let tags = store.rig().source_tags();
    let tasks = validation_tasks(&store, &DEFAULT_GAPS, &Gating::disabled(&store)).unwrap();
    for &planted in &tags {
        let source = PlantedSource {
            planted,
            tags: tags.clone(),
        };
        let weights = calibrate_weights(&source, &tasks, &tags, 0.05).unwrap();
        for &gap in &DEFAULT_GAPS {
            let vector = weights.vector(gap).unwrap();
            for (tag, w) in vector {
                let expected = if *tag == planted { 1.0 } else { 0.0 };
                assert_eq!(*w, expected, "gap {gap}, planted {planted}: weight of {tag} is {w}");
            }
        }
    }
    format!("one-hot for each of {} planted sources at {} gaps", tags.len(), DEFAULT_GAPS.len())
}

fn psnr_at(report: &GapSweepReport, gap: usize) -> f64 {
    report.row(gap).unwrap().mean_psnr
}

fn end_to_end_trends() -> String {
    let cfg = Config::default();
    let store = cfg.load_store().unwrap();
    assert_eq!(store.rig().cameras().len(), 3);
    assert_eq!(store.rig().frame_size(), (64, 64));
    assert_eq!(cfg.model.generator.depth, 6);
    let trained = train_bank(&store, store.rig(), &cfg.model, &cfg.train, None).unwrap();
    for (tag, history) in &trained.histories {
        assert_eq!(history.len(), cfg.train.steps, "{tag}");
    }
    let gating = cfg.gating(&store);
    let gaps = &cfg.eval.gaps;
    let weights = calibrate(&trained.bank, &store, gaps, &gating, cfg.eval.grid_step).unwrap();
    let sweep = |mode| {
        run_sweep(&trained.bank, &weights, &store, gaps, mode, &gating, &cfg.dataset_id(), &cfg.digest()).unwrap()
    };
    let single = sweep(Mode::SingleView);
    let multi = sweep(Mode::MultiView);
    let (first, last) = (gaps[0], *gaps.last().unwrap());
    let intra = |gap| weights.intra_mass(gap).unwrap();

    let mut detail = String::new();
    detail.push_str(&format!("\n{}", emit_report(&single, ReportFormat::Markdown)));
    detail.push_str(&emit_report(&multi, ReportFormat::Markdown));
    detail.push_str(&weights.to_csv());

    let drop = psnr_at(&multi, first) - psnr_at(&multi, last);
    assert!(drop >= 2.0, "gap {first} vs {last}: only {drop:.2} dB apart{detail}");
    let far_gain = psnr_at(&multi, last) - psnr_at(&single, last);
    assert!(far_gain >= 0.3, "multi-view gains {far_gain:.2} dB at gap {last}{detail}");
    for &gap in gaps {
        let lead = psnr_at(&multi, gap) - psnr_at(&single, gap);
        assert!(lead >= -0.1, "multi-view trails by {:.2} dB at gap {gap}{detail}", -lead);
    }
    let near_gap = (psnr_at(&multi, first) - psnr_at(&single, first)).abs();
    assert!(near_gap <= 0.3, "modes differ by {near_gap:.2} dB at gap {first}{detail}");
    assert!(
        intra(first) >= intra(last),
        "intra mass {} at gap {first} < {} at gap {last}{detail}",
        intra(first),
        intra(last)
    );
    format!(
        "drop {drop:.2} dB, far gain {far_gain:.2} dB, near diff {near_gap:.2} dB, intra mass {:.2} -> {:.2}{detail}",
        intra(first),
        intra(last)
    )
}

fn determinism() -> String {
    let synth = SynthConfig {
        sequence_length: 120,
        ..SynthConfig::default()
    };
    let a = synthesize(&synth).unwrap();
    let b = synthesize(&synth).unwrap();
    assert_eq!(a.len(), b.len());
    assert!(a.all_frames().zip(b.all_frames()).all(|(x, y)| x.same_pixels(y)));

    let model = ModelConfig {
        generator: GeneratorSpec::with_depth(4, 6),
        discriminator: DiscriminatorSpec {
            in_channels: 6,
            base_filters: 4,
            n_layers: 3,
        },
    };
    let train = TrainConfig {
        steps: 25,
        seed: 5,
        ..TrainConfig::default()
    };
    let gaps = [1, 3, 7];
    let gating = Gating::from_store(&a, 0.95, 0.02);
    let run = || {
        let trained = train_bank(&a, a.rig(), &model, &train, None).unwrap();
        let histories: BTreeMap<SourceTag, String> =
            trained.histories.iter().map(|(t, h)| (*t, loss_history_csv(h))).collect();
        let weights = calibrate(&trained.bank, &a, &gaps, &gating, 0.05).unwrap();
        let reports: Vec<String> = [Mode::SingleView, Mode::MultiView]
            .into_iter()
            .map(|mode| {
                let r = run_sweep(&trained.bank, &weights, &a, &gaps, mode, &gating, "synthetic", "cfg").unwrap();
                emit_report(&r, ReportFormat::Csv) + &emit_report(&r, ReportFormat::Markdown)
            })
            .collect();
        (histories, trained.bank.fingerprints(), weights.to_csv(), reports)
    };
    let first = run();
    let second = run();
    assert_eq!(first.0, second.0, "loss histories differ");
    assert_eq!(first.1, second.1, "checkpoints differ");
    assert_eq!(first.2, second.2, "weights differ");
    assert_eq!(first.3, second.3, "reports differ");
    format!(
        "{} frames, {} loss histories, weights and {} reports bit-identical",
        a.len() * a.rig().cameras().len(),
        first.0.len(),
        first.3.len()
    )
}
