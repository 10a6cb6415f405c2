//! Conditional-GAN objective and per-source alternating training.
//!
//! Each conditioning source (past frame, future frame, each reference
//! camera) gets its own generator/discriminator pair. One training step is a
//! discriminator update on the halved objective followed by a generator
//! update on the non-saturating adversarial term plus a weighted L1 term.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{SequenceStore, Split};
use crate::error::{Error, Result};
use crate::model::{
    frame_to_tensor, Discriminator, DiscriminatorSpec, ForwardOptions, Generator, GeneratorSpec,
    GeneratorTape,
};
use crate::nn::Adam;
use crate::types::{CameraRig, SourceTag};

/// Gaps sampled for intra-camera training when none are configured.
pub const DEFAULT_GAP_SCHEDULE: [usize; 6] = [1, 3, 5, 7, 15, 30];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_l1: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Values of `k` drawn uniformly per step for the past/future sources.
    pub gap_schedule: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 100.0,
            learning_rate: 0.0002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 1,
            steps: 5000,
            seed: 0,
            gap_schedule: DEFAULT_GAP_SCHEDULE.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::Config(format!("lambda_l1 must be >= 0, got {}", self.lambda_l1)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.gap_schedule.is_empty() || self.gap_schedule.contains(&0) {
            return Err(Error::Config("gap_schedule must hold positive gaps".into()));
        }
        Ok(())
    }
}

/// Architecture pair trained for every source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    pub d_loss: f64,
    pub g_loss: f64,
    pub l1: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-1/2 * mean[log s(real) + log(1 - s(fake))]` on logit maps.
pub fn discriminator_loss(d_real: &Array2<f64>, d_fake: &Array2<f64>) -> f64 {
    let real = d_real.iter().map(|&r| softplus(-r)).sum::<f64>() / d_real.len() as f64;
    let fake = d_fake.iter().map(|&f| softplus(f)).sum::<f64>() / d_fake.len() as f64;
    0.5 * (real + fake)
}

/// Non-saturating adversarial term `-mean[log s(fake)]`.
pub fn generator_adversarial_loss(d_fake: &Array2<f64>) -> f64 {
    d_fake.iter().map(|&f| softplus(-f)).sum::<f64>() / d_fake.len() as f64
}

pub fn l1_loss(fake: &Array3<f64>, target: &Array3<f64>) -> f64 {
    fake.iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / fake.len() as f64
}

fn check_finite(values: &[f64], step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

/// All three objective terms for one `(real, fake)` evaluation.
pub fn gan_losses(
    d_real: &Array2<f64>,
    d_fake: &Array2<f64>,
    fake: &Array3<f64>,
    target: &Array3<f64>,
    lambda_l1: f64,
) -> Result<GanLosses> {
    if d_real.dim() != d_fake.dim() || fake.dim() != target.dim() {
        return Err(Error::DimensionMismatch(format!(
            "maps {:?}/{:?}, frames {:?}/{:?}",
            d_real.dim(),
            d_fake.dim(),
            fake.dim(),
            target.dim()
        )));
    }
    let l1 = l1_loss(fake, target);
    let losses = GanLosses {
        d_loss: discriminator_loss(d_real, d_fake),
        g_loss: generator_adversarial_loss(d_fake) + lambda_l1 * l1,
        l1,
    };
    check_finite(&[losses.d_loss, losses.g_loss, losses.l1], 0)?;
    Ok(losses)
}

/// Generator objective at `(condition, target)` with gradients accumulated
/// into the generator. The discriminator's own gradients are polluted and
/// must be zeroed before its next update. Returns `(g_loss, l1)`.
pub fn generator_objective_backward(
    generator: &mut Generator,
    discriminator: &mut Discriminator,
    condition: &Array3<f64>,
    target: &Array3<f64>,
    fake: &Array3<f64>,
    tape: &GeneratorTape,
    lambda_l1: f64,
    scale: f64,
) -> Result<(f64, f64)> {
    let (map, d_tape) = discriminator.forward(condition, fake)?;
    let n = map.len() as f64;
    let d_map = map.mapv(|f| scale * (sigmoid(f) - 1.0) / n);
    let mut d_fake = discriminator.backward(&d_tape, &d_map);
    let npx = fake.len() as f64;
    ndarray::Zip::from(&mut d_fake)
        .and(fake)
        .and(target)
        .for_each(|g, &a, &b| {
            let sign = if a > b {
                1.0
            } else if a < b {
                -1.0
            } else {
                0.0
            };
            *g += scale * lambda_l1 * sign / npx;
        });
    generator.backward(tape, &d_fake);
    let l1 = l1_loss(fake, target);
    Ok((generator_adversarial_loss(&map) + lambda_l1 * l1, l1))
}

/// One `(condition, target)` training example as model tensors.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub condition: Array3<f64>,
    pub target: Array3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub l1: f64,
}

pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,d_loss,g_loss,l1\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.d_loss, r.g_loss, r.l1);
    }
    out
}

/// A generated batch awaiting the two update steps.
pub struct FakeBatch {
    fakes: Vec<(Array3<f64>, GeneratorTape)>,
}

impl FakeBatch {
    pub fn images(&self) -> impl Iterator<Item = &Array3<f64>> {
        self.fakes.iter().map(|(f, _)| f)
    }
}

/// Generator/discriminator pair with their optimizers.
pub struct CganTrainer {
    pub generator: Generator,
    pub discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    lambda_l1: f64,
    noise: ChaCha8Rng,
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CganTrainer {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let generator = Generator::new(model.generator.clone(), &mut init)?;
        let discriminator = Discriminator::new(model.discriminator.clone(), &mut init)?;
        Ok(Self {
            generator,
            discriminator,
            opt_g: Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2),
            opt_d: Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2),
            lambda_l1: cfg.lambda_l1,
            noise: ChaCha8Rng::seed_from_u64(derive_seed(seed, 2)),
        })
    }

    pub fn generate(&mut self, batch: &[TrainingPair]) -> Result<FakeBatch> {
        let fakes = batch
            .iter()
            .map(|p| {
                self.generator
                    .forward(&p.condition, &mut self.noise, ForwardOptions::default())
            })
            .collect::<Result<_>>()?;
        Ok(FakeBatch { fakes })
    }

    /// Updates the discriminator only. Returns the mean halved loss.
    pub fn discriminator_step(&mut self, batch: &[TrainingPair], fakes: &FakeBatch) -> Result<f64> {
        self.discriminator.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (pair, (fake, _)) in batch.iter().zip(&fakes.fakes) {
            let (real_map, real_tape) = self.discriminator.forward(&pair.condition, &pair.target)?;
            let (fake_map, fake_tape) = self.discriminator.forward(&pair.condition, fake)?;
            total += discriminator_loss(&real_map, &fake_map);
            let nr = real_map.len() as f64;
            let nf = fake_map.len() as f64;
            let d_real = real_map.mapv(|r| scale * 0.5 * (sigmoid(r) - 1.0) / nr);
            let d_fake = fake_map.mapv(|f| scale * 0.5 * sigmoid(f) / nf);
            self.discriminator.backward(&real_tape, &d_real);
            self.discriminator.backward(&fake_tape, &d_fake);
        }
        self.opt_d.update(self.discriminator.params_mut());
        Ok(total * scale)
    }

    /// Updates the generator only. Returns mean `(g_loss, l1)`.
    pub fn generator_step(&mut self, batch: &[TrainingPair], fakes: FakeBatch) -> Result<(f64, f64)> {
        self.generator.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let (mut g_total, mut l1_total) = (0.0, 0.0);
        for (pair, (fake, tape)) in batch.iter().zip(&fakes.fakes) {
            let (g, l1) = generator_objective_backward(
                &mut self.generator,
                &mut self.discriminator,
                &pair.condition,
                &pair.target,
                fake,
                tape,
                self.lambda_l1,
                scale,
            )?;
            g_total += g;
            l1_total += l1;
        }
        self.discriminator.zero_grad();
        self.opt_g.update(self.generator.params_mut());
        Ok((g_total * scale, l1_total * scale))
    }

    pub fn step(&mut self, batch: &[TrainingPair], step: usize) -> Result<LossRecord> {
        let fakes = self.generate(batch)?;
        let d_loss = self.discriminator_step(batch, &fakes)?;
        let (g_loss, l1) = self.generator_step(batch, fakes)?;
        check_finite(&[d_loss, g_loss, l1], step)?;
        Ok(LossRecord {
            step,
            d_loss,
            g_loss,
            l1,
        })
    }
}

/// Valid training pairs of one source, drawn from the train split.
pub struct PairSampler<'a> {
    store: &'a SequenceStore,
    tag: SourceTag,
    /// `(k, centers)` for intra sources; a single `(0, centers)` for references.
    pools: Vec<(usize, Vec<i64>)>,
}

impl<'a> PairSampler<'a> {
    pub fn new(store: &'a SequenceStore, tag: SourceTag, gap_schedule: &[usize]) -> Result<Self> {
        let target = store.rig().target();
        let train: Vec<i64> = store.indices_in(Split::Train).collect();
        let in_train = |i: i64| store.split_of(i) == Some(Split::Train);
        let pools: Vec<(usize, Vec<i64>)> = match tag {
            SourceTag::Past | SourceTag::Future => {
                let sign = if tag == SourceTag::Past { -1 } else { 1 };
                let mut gaps = gap_schedule.to_vec();
                gaps.sort_unstable();
                gaps.dedup();
                gaps.into_iter()
                    .map(|k| {
                        let centers = train
                            .iter()
                            .copied()
                            .filter(|&i| {
                                let c = i + sign * k as i64;
                                in_train(c) && store.frame(target, c).is_some()
                            })
                            .collect();
                        (k, centers)
                    })
                    .filter(|(_, c): &(usize, Vec<i64>)| !c.is_empty())
                    .collect()
            }
            SourceTag::Reference(cam) => {
                if store.rig().camera(cam).is_none() || cam == target {
                    return Err(Error::MissingModel(tag));
                }
                let centers: Vec<i64> = train
                    .iter()
                    .copied()
                    .filter(|&i| store.frame(cam, i).is_some())
                    .collect();
                if centers.is_empty() {
                    vec![]
                } else {
                    vec![(0, centers)]
                }
            }
        };
        if pools.is_empty() {
            return Err(Error::EmptySplit(format!("train (no pairs for {tag})")));
        }
        Ok(Self { store, tag, pools })
    }

    pub fn pair_count(&self) -> usize {
        self.pools.iter().map(|(_, c)| c.len()).sum()
    }

    pub fn pair(&self, k: usize, center: i64) -> TrainingPair {
        let target = self.store.rig().target();
        let cond = match self.tag {
            SourceTag::Past => self.store.frame(target, center - k as i64),
            SourceTag::Future => self.store.frame(target, center + k as i64),
            SourceTag::Reference(cam) => self.store.frame(cam, center),
        }
        .expect("pool holds valid centers");
        TrainingPair {
            condition: frame_to_tensor(cond),
            target: frame_to_tensor(self.store.frame(target, center).unwrap()),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> TrainingPair {
        let (k, centers) = &self.pools[rng.gen_range(0..self.pools.len())];
        let center = centers[rng.gen_range(0..centers.len())];
        self.pair(*k, center)
    }
}

/// Result of training one source.
pub struct TrainedSource {
    pub tag: SourceTag,
    pub generator: Generator,
    pub history: Vec<LossRecord>,
}

fn tag_salt(tag: SourceTag) -> u64 {
    match tag {
        SourceTag::Past => 11,
        SourceTag::Future => 13,
        SourceTag::Reference(id) => 1000 + id as u64,
    }
}

/// Trains the model of one source for `cfg.steps` alternating steps.
pub fn train_source(
    tag: SourceTag,
    store: &SequenceStore,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainedSource> {
    cfg.validate()?;
    let sampler = PairSampler::new(store, tag, &cfg.gap_schedule)?;
    let (h, w) = store.rig().frame_size();
    model.generator.check_resolution(h, w)?;
    model.discriminator.check_resolution(h, w)?;
    let seed = derive_seed(cfg.seed, tag_salt(tag));
    let mut trainer = CganTrainer::new(model, cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<TrainingPair> = (0..cfg.batch_size).map(|_| sampler.sample(&mut rng)).collect();
        history.push(trainer.step(&batch, step)?);
    }
    Ok(TrainedSource {
        tag,
        generator: trainer.generator,
        history,
    })
}

/// Frozen per-source generators.
#[derive(Clone, Debug, Default)]
pub struct SourceModelBank {
    models: BTreeMap<SourceTag, Generator>,
}

impl SourceModelBank {
    pub fn new(models: BTreeMap<SourceTag, Generator>) -> Self {
        Self { models }
    }

    pub fn get(&self, tag: SourceTag) -> Option<&Generator> {
        self.models.get(&tag)
    }

    pub fn tags(&self) -> Vec<SourceTag> {
        self.models.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Checks that the bank covers exactly the rig's sources.
    pub fn matches_rig(&self, rig: &CameraRig) -> bool {
        self.tags() == rig.source_tags()
    }

    /// Writes `<dir>/<tag>.ckpt` for every source.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::UnwritablePath {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        for (tag, g) in &self.models {
            checkpoint::save_generator(&dir.join(format!("{tag}.ckpt")), g)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut models = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        for entry in entries {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("ckpt") {
                continue;
            }
            let Some(tag) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok())
            else {
                continue;
            };
            models.insert(tag, checkpoint::load_generator(&path)?);
        }
        if models.is_empty() {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                reason: "no checkpoints found".into(),
            });
        }
        Ok(Self { models })
    }

    /// SHA-256 of every checkpoint, keyed by tag.
    pub fn fingerprints(&self) -> BTreeMap<SourceTag, String> {
        self.models
            .iter()
            .map(|(t, g)| (*t, checkpoint::generator_digest(g)))
            .collect()
    }
}

/// Trained bank plus the loss history of every source.
pub struct TrainedBank {
    pub bank: SourceModelBank,
    pub histories: BTreeMap<SourceTag, Vec<LossRecord>>,
}

/// Trains `sources` (all of the rig's sources when `None`) independently, in parallel.
pub fn train_bank(
    store: &SequenceStore,
    rig: &CameraRig,
    model: &ModelConfig,
    cfg: &TrainConfig,
    sources: Option<&[SourceTag]>,
) -> Result<TrainedBank> {
    let all = rig.source_tags();
    let tags: Vec<SourceTag> = match sources {
        Some(s) => {
            if let Some(bad) = s.iter().find(|t| !all.contains(t)) {
                return Err(Error::MissingModel(*bad));
            }
            s.to_vec()
        }
        None => all,
    };
    let trained: Vec<TrainedSource> = tags
        .par_iter()
        .map(|&tag| {
            train_source(tag, store, model, cfg).map_err(|e| Error::Source {
                tag,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let mut models = BTreeMap::new();
    let mut histories = BTreeMap::new();
    for t in trained {
        models.insert(t.tag, t.generator);
        histories.insert(t.tag, t.history);
    }
    Ok(TrainedBank {
        bank: SourceModelBank::new(models),
        histories,
    })
}
