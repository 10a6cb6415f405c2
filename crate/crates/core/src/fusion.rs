//! Weighted-average fusion of per-source candidates and per-gap weight
//! calibration by exhaustive search over a discretized simplex.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::psnr_from_mse;
use crate::types::{CandidateSet, Frame, FusionWeights, ReconstructionTask, SourceTag};
use crate::training::SourceModelBank;

/// Anything that can turn a task into per-source candidates.
pub trait CandidateSource: Sync {
    fn candidates(&self, task: &ReconstructionTask) -> Result<CandidateSet>;
}

impl CandidateSource for SourceModelBank {
    fn candidates(&self, task: &ReconstructionTask) -> Result<CandidateSet> {
        generate_candidates(task, self)
    }
}

/// Noise seed of one generator call; fixed per (task, source).
fn inference_seed(task: &ReconstructionTask, tag: SourceTag) -> u64 {
    let t = match tag {
        SourceTag::Past => 1u64,
        SourceTag::Future => 2,
        SourceTag::Reference(id) => 16 + id as u64,
    };
    (task.missing_index as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((task.gap as u64) << 20)
        .wrapping_add(t)
}

/// Runs the bank's generator of every source present in the task.
pub fn generate_candidates(task: &ReconstructionTask, bank: &SourceModelBank) -> Result<CandidateSet> {
    let cond = task.conditioning();
    if let Some((tag, _)) = cond.iter().find(|(t, _)| bank.get(*t).is_none()) {
        return Err(Error::MissingModel(*tag));
    }
    let candidates = cond
        .into_iter()
        .map(|(tag, frame)| {
            let mut rng = ChaCha8Rng::seed_from_u64(inference_seed(task, tag));
            let g = bank.get(tag).expect("checked above");
            let out = g.generate(frame, &mut rng, task.missing_index)?;
            Ok((tag, out.relabel(task.past.camera(), task.missing_index)))
        })
        .collect::<Result<Vec<_>>>()?;
    CandidateSet::new(candidates, task.gap)
}

/// Pixel-wise weighted sum with explicit per-candidate weights.
pub fn fuse_with(candidates: &CandidateSet, weights: &[f64]) -> Result<Frame> {
    let items = candidates.candidates();
    let Some((_, first)) = items.first() else {
        return Err(Error::NoCandidates);
    };
    if weights.len() != items.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} candidates",
            weights.len(),
            items.len()
        )));
    }
    let (h, w) = first.dims();
    let n = h * w * 3;
    let slices: Vec<&[f32]> = items
        .iter()
        .map(|(_, f)| f.pixels().as_slice().expect("standard layout"))
        .collect();
    let mut out = vec![0f32; n];
    for (p, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for (s, wt) in slices.iter().zip(weights) {
            let v = s[p];
            acc += wt * v as f64;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        // rounding may step a hair outside the candidates' envelope
        *o = (acc as f32).clamp(lo, hi);
    }
    let px = Array3::from_shape_vec((h, w, 3), out).unwrap();
    Frame::new(px, first.camera(), first.index())
}

/// Weighted average of the candidates using the gap's weight vector,
/// renormalized over the tags actually present.
pub fn fuse(candidates: &CandidateSet, weights: &FusionWeights) -> Result<Frame> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let w = weights.renormalized(candidates.gap(), &candidates.tags())?;
    fuse_with(candidates, &w)
}

/// All points of the simplex over `dims` coordinates whose entries are
/// multiples of `1 / parts`, in lexicographic order of the integer parts.
pub fn simplex_grid(dims: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, left: usize, dims: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() + 1 == dims {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for v in (0..=left).rev() {
            prefix.push(v);
            rec(prefix, left - v, dims, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if dims > 0 {
        rec(&mut Vec::with_capacity(dims), parts, dims, &mut out);
    }
    out
}

/// Number of grid divisions for a step that must divide 1.
pub fn grid_parts(grid_step: f64) -> Result<usize> {
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::InvalidValue(format!("grid_step {grid_step} not in (0, 1]")));
    }
    let parts = (1.0 / grid_step).round();
    if (parts * grid_step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidValue(format!("grid_step {grid_step} does not divide 1")));
    }
    Ok(parts as usize)
}

/// Error Gram matrix of one validation task: `G[s][t] = mean((c_s - y)(c_t - y))`
/// on `[0, 1]` data, over the tags present in that task.
struct TaskErrors {
    /// Position of each present tag in the global tag list.
    present: Vec<usize>,
    gram: Vec<Vec<f64>>,
}

impl TaskErrors {
    fn new(set: &CandidateSet, truth: &Frame, tags: &[SourceTag]) -> Result<Self> {
        let mut present = Vec::new();
        let mut residuals: Vec<Vec<f64>> = Vec::new();
        let y = truth.pixels().as_slice().unwrap();
        for (tag, frame) in set.candidates() {
            let pos = tags
                .iter()
                .position(|t| t == tag)
                .ok_or(Error::MissingModel(*tag))?;
            if frame.dims() != truth.dims() {
                return Err(Error::DimensionMismatch("candidate vs ground truth".into()));
            }
            present.push(pos);
            let c = frame.pixels().as_slice().unwrap();
            residuals.push(c.iter().zip(y).map(|(a, b)| 0.5 * (*a as f64 - *b as f64)).collect());
        }
        let n = y.len() as f64;
        let k = residuals.len();
        let mut gram = vec![vec![0.0; k]; k];
        for s in 0..k {
            for t in s..k {
                let v = residuals[s].iter().zip(&residuals[t]).map(|(a, b)| a * b).sum::<f64>() / n;
                gram[s][t] = v;
                gram[t][s] = v;
            }
        }
        Ok(Self { present, gram })
    }

    fn psnr(&self, weights: &[f64]) -> f64 {
        let mut w: Vec<f64> = self.present.iter().map(|&p| weights[p]).collect();
        let sum: f64 = w.iter().sum();
        if sum > 0.0 {
            w.iter_mut().for_each(|v| *v /= sum);
        } else {
            let u = 1.0 / w.len() as f64;
            w.iter_mut().for_each(|v| *v = u);
        }
        let mut mse = 0.0;
        for (s, ws) in w.iter().enumerate() {
            for (t, wt) in w.iter().enumerate() {
                mse += ws * wt * self.gram[s][t];
            }
        }
        psnr_from_mse(mse.max(0.0))
    }
}

/// Chooses, for every gap, the grid weight vector over `tags` with the
/// highest mean validation PSNR. Ties go to the vector with more weight on
/// past + future, then to the earlier grid point.
pub fn calibrate_weights<S: CandidateSource + ?Sized>(
    source: &S,
    tasks_by_gap: &BTreeMap<usize, Vec<ReconstructionTask>>,
    tags: &[SourceTag],
    grid_step: f64,
) -> Result<FusionWeights> {
    let parts = grid_parts(grid_step)?;
    let grid = simplex_grid(tags.len(), parts);
    let mut table = BTreeMap::new();
    for (&gap, tasks) in tasks_by_gap {
        if tasks.is_empty() {
            return Err(Error::EmptyValidation(gap));
        }
        let errors: Vec<TaskErrors> = tasks
            .par_iter()
            .map(|task| {
                let truth = task
                    .ground_truth
                    .as_ref()
                    .ok_or_else(|| Error::InvalidValue("validation task lacks ground truth".into()))?;
                let set = source.candidates(task)?;
                if set.is_empty() {
                    return Err(Error::NoCandidates);
                }
                TaskErrors::new(&set, truth, tags)
            })
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<(f64, f64)> = grid
            .par_iter()
            .map(|point| {
                let w: Vec<f64> = point.iter().map(|&v| v as f64 / parts as f64).collect();
                let mean = errors.iter().map(|e| e.psnr(&w)).sum::<f64>() / errors.len() as f64;
                let intra: usize = point
                    .iter()
                    .zip(tags)
                    .filter(|(_, t)| t.is_intra())
                    .map(|(v, _)| *v)
                    .sum();
                (mean, intra as f64)
            })
            .collect();
        let mut best = 0;
        for (i, s) in scores.iter().enumerate().skip(1) {
            let b = scores[best];
            if s.0 > b.0 || (s.0 == b.0 && s.1 > b.1) {
                best = i;
            }
        }
        let vector = grid[best]
            .iter()
            .zip(tags)
            .map(|(&v, t)| (*t, v as f64 / parts as f64))
            .collect();
        table.insert(gap, vector);
    }
    FusionWeights::new(table)
}

/// Mean validation PSNR of one weight vector, fusing frames directly.
pub fn mean_fused_psnr<S: CandidateSource + ?Sized>(
    source: &S,
    tasks: &[ReconstructionTask],
    tags: &[SourceTag],
    weights: &[f64],
    gap: usize,
) -> Result<f64> {
    let vector = tags.iter().copied().zip(weights.iter().copied()).collect();
    let fw = FusionWeights::new(BTreeMap::from([(gap, vector)]))?;
    let mut total = 0.0;
    for t in tasks {
        let fused = fuse(&source.candidates(t)?, &fw)?;
        total += crate::metrics::psnr(&fused, t.ground_truth.as_ref().unwrap())?;
    }
    Ok(total / tasks.len() as f64)
}
