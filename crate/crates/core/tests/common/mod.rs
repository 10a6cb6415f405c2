//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvrecon_core::fusion::CandidateSource;
use mvrecon_core::{CandidateSet, Frame, ReconstructionTask, Result, SourceTag};

pub fn random_frame(rng: &mut impl Rng, h: usize, w: usize) -> Frame {
    let px = Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(-1.0f32..=1.0));
    Frame::new(px, 1, 0).unwrap()
}

/// `frame` plus uniform noise of the given amplitude, clipped to the pixel range.
pub fn perturbed(frame: &Frame, amplitude: f32, rng: &mut impl Rng) -> Frame {
    let px = frame
        .pixels()
        .mapv(|v| (v + rng.gen_range(-amplitude..=amplitude)).clamp(-1.0, 1.0));
    Frame::new(px, frame.camera(), frame.index()).unwrap()
}

fn unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

/// Textbook PSNR: 10 log10(1 / mse) over every sample on [0, 1] data.
pub fn brute_psnr(a: &Frame, b: &Frame) -> f64 {
    let (h, w) = a.dims();
    let mut se = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let d = unit(a.pixels()[[y, x, c]]) - unit(b.pixels()[[y, x, c]]);
                se += d * d;
            }
        }
    }
    let mse = se / (h * w * 3) as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

/// Textbook SSIM: for every fully contained 11x11 window, Gaussian-weighted
/// statistics computed directly from a normalized 2-D kernel.
pub fn brute_ssim(a: &Frame, b: &Frame) -> f64 {
    const WIN: usize = 11;
    let sigma = 1.5f64;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut kernel = Array2::<f64>::zeros((WIN, WIN));
    for i in 0..WIN {
        for j in 0..WIN {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            kernel[[i, j]] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = kernel.sum();
    kernel /= total;
    let (h, w) = a.dims();
    let mut channel_means = Vec::new();
    for c in 0..3 {
        let mut acc = 0.0;
        let mut windows = 0;
        for y0 in 0..=h - WIN {
            for x0 in 0..=w - WIN {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let k = kernel[[i, j]];
                        mx += k * unit(a.pixels()[[y0 + i, x0 + j, c]]);
                        my += k * unit(b.pixels()[[y0 + i, x0 + j, c]]);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let k = kernel[[i, j]];
                        let dx = unit(a.pixels()[[y0 + i, x0 + j, c]]) - mx;
                        let dy = unit(b.pixels()[[y0 + i, x0 + j, c]]) - my;
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cov += k * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
        channel_means.push(acc / windows as f64);
    }
    channel_means.iter().sum::<f64>() / 3.0
}

/// Unhalved binary cross-entropy of a discriminator, straight from the definition.
pub fn brute_bce(real: &Array2<f64>, fake: &Array2<f64>) -> f64 {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let r = real.iter().map(|&v| -sig(v).ln()).sum::<f64>() / real.len() as f64;
    let f = fake.iter().map(|&v| -(1.0 - sig(v)).ln()).sum::<f64>() / fake.len() as f64;
    r + f
}

/// Candidate source whose `planted` tag returns the exact ground truth and
/// whose other tags return the conditioning frame itself.
pub struct PlantedSource {
    pub planted: SourceTag,
    pub tags: Vec<SourceTag>,
}

impl CandidateSource for PlantedSource {
    fn candidates(&self, task: &ReconstructionTask) -> Result<CandidateSet> {
        let truth = task.ground_truth.as_ref().expect("validation task");
        let conditioning = task.conditioning();
        let items = self
            .tags
            .iter()
            .filter_map(|tag| {
                if *tag == self.planted {
                    return Some((*tag, truth.clone()));
                }
                conditioning
                    .iter()
                    .find(|(t, _)| t == tag)
                    .map(|(t, f)| (*t, f.relabel(truth.camera(), truth.index())))
            })
            .collect();
        CandidateSet::new(items, task.gap)
    }
}

/// Candidate source returning fixed noisy copies of the ground truth, one
/// noise level per tag.
pub struct NoisySource {
    pub levels: Vec<(SourceTag, f32)>,
}

impl CandidateSource for NoisySource {
    fn candidates(&self, task: &ReconstructionTask) -> Result<CandidateSet> {
        let truth = task.ground_truth.as_ref().expect("validation task");
        let items = self
            .levels
            .iter()
            .enumerate()
            .map(|(n, (tag, amp))| {
                let seed = (task.missing_index as u64) * 97 + task.gap as u64 * 13 + n as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (*tag, perturbed(truth, *amp, &mut rng))
            })
            .collect();
        CandidateSet::new(items, task.gap)
    }
}

pub mod gradcheck {
    use ndarray::Array3;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use mvrecon_core::model::{Discriminator, DiscriminatorSpec, ForwardOptions, Generator, GeneratorSpec};
    use mvrecon_core::training::{gan_losses, generator_objective_backward};

    pub const LAMBDA: f64 = 100.0;
    pub const STEP: f64 = 1e-5;

    pub struct Probe {
        pub name: String,
        pub analytic: f64,
        pub numeric: f64,
    }

    impl Probe {
        pub fn relative_error(&self) -> f64 {
            (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
        }
    }

    /// Two-level, four-filter generator on 8x8 input with a one-layer discriminator.
    pub fn miniature(seed: u64) -> (Generator, Discriminator, Array3<f64>, Array3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Generator::new(GeneratorSpec::with_depth(4, 2), &mut rng).unwrap();
        let d = Discriminator::new(
            DiscriminatorSpec {
                in_channels: 6,
                base_filters: 4,
                n_layers: 1,
            },
            &mut rng,
        )
        .unwrap();
        let cond = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let target = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(-1.0..1.0));
        (g, d, cond, target)
    }

    fn no_noise() -> ForwardOptions {
        ForwardOptions {
            dropout: false,
            disabled_skip: None,
        }
    }

    fn objective(g: &Generator, d: &Discriminator, cond: &Array3<f64>, target: &Array3<f64>) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (fake, _) = g.forward(cond, &mut rng, no_noise()).unwrap();
        let (map, _) = d.forward(cond, &fake).unwrap();
        gan_losses(&map, &map, &fake, target, LAMBDA).unwrap().g_loss
    }

    /// Compares backpropagated generator gradients of the full objective
    /// with central differences on `count` randomly chosen parameters.
    pub fn generator_probes(seed: u64, count: usize) -> Vec<Probe> {
        let (mut g, mut d, cond, target) = miniature(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        g.zero_grad();
        let (fake, tape) = g.forward(&cond, &mut rng, no_noise()).unwrap();
        generator_objective_backward(&mut g, &mut d, &cond, &target, &fake, &tape, LAMBDA, 1.0).unwrap();
        let sizes: Vec<usize> = g.params().iter().map(|p| p.value.len()).collect();
        let total: usize = sizes.iter().sum();
        let picks = sample(&mut rng, total, count.min(total)).into_vec();
        picks
            .into_iter()
            .map(|flat| {
                let (mut p, mut e) = (0, flat);
                while e >= sizes[p] {
                    e -= sizes[p];
                    p += 1;
                }
                let (name, analytic) = {
                    let param = &g.params()[p];
                    (param.name.clone(), param.grad.as_slice().unwrap()[e])
                };
                let shifted = |delta: f64| {
                    let mut h = g.clone();
                    h.params_mut()[p].value.as_slice_mut().unwrap()[e] += delta;
                    objective(&h, &d, &cond, &target)
                };
                let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
                Probe {
                    name: format!("{name}[{e}]"),
                    analytic,
                    numeric,
                }
            })
            .collect()
    }
}
