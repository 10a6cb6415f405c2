//! Overlap-zone activity gating for reference cameras.

use std::collections::BTreeMap;

use ndarray::{s, Array3, ArrayView3};

use super::SequenceStore;
use crate::types::{CameraId, CameraRig, Frame, ReconstructionTask, Rect};

pub const DEFAULT_BACKGROUND_DECAY: f64 = 0.95;

fn zone_of(rig: &CameraRig, frame: &Frame) -> Rect {
    let (h, w) = frame.dims();
    rig.overlap_zone(frame.camera())
        .unwrap_or(Rect::new(0, 0, w, h))
}

fn crop<'a>(frame: &'a Frame, z: &Rect) -> ArrayView3<'a, f32> {
    frame.pixels().slice(s![z.y0..z.y1, z.x0..z.x1, ..])
}

/// Mean absolute difference between a frame's overlap zone and a background crop.
pub fn mean_abs_zone_difference(frame: &Frame, zone: &Rect, background: &Array3<f32>) -> f64 {
    let view = crop(frame, zone);
    let n = view.len() as f64;
    view.iter()
        .zip(background.iter())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum::<f64>()
        / n
}

/// Running per-zone background of every reference camera.
///
/// The estimate at index `i` is an exponential moving average of the zone
/// over the camera's frames strictly before `i`, seeded with the first frame.
#[derive(Clone, Debug)]
pub struct BackgroundModel {
    decay: f64,
    history: BTreeMap<CameraId, BTreeMap<i64, Array3<f32>>>,
}

impl BackgroundModel {
    pub fn from_store(store: &SequenceStore, decay: f64) -> Self {
        let rig = store.rig();
        let mut history = BTreeMap::new();
        for cam in rig.references() {
            let mut per_index = BTreeMap::new();
            let mut ema: Option<Array3<f64>> = None;
            for f in store.camera_frames(cam.id) {
                let zone = zone_of(rig, f);
                let current = crop(f, &zone).mapv(|v| v as f64);
                let estimate = ema.get_or_insert_with(|| current.clone());
                per_index.insert(f.index(), estimate.mapv(|v| v as f32));
                estimate.zip_mut_with(&current, |e, c| *e = decay * *e + (1.0 - decay) * c);
            }
            history.insert(cam.id, per_index);
        }
        Self { decay, history }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn background(&self, camera: CameraId, index: i64) -> Option<&Array3<f32>> {
        self.history.get(&camera)?.get(&index)
    }

    /// Activity score of a reference frame; `None` without a background estimate.
    pub fn activity(&self, rig: &CameraRig, frame: &Frame) -> Option<f64> {
        let bg = self.background(frame.camera(), frame.index())?;
        Some(mean_abs_zone_difference(frame, &zone_of(rig, frame), bg))
    }
}

/// Keeps only the reference frames whose overlap zone shows activity of at
/// least `threshold` against the running background. Frames without a
/// background estimate count as inactive unless the threshold is zero.
pub fn gate_references(
    task: ReconstructionTask,
    rig: &CameraRig,
    background: &BackgroundModel,
    threshold: f64,
) -> ReconstructionTask {
    let references = task
        .references
        .iter()
        .filter(|f| background.activity(rig, f).unwrap_or(0.0) >= threshold)
        .cloned()
        .collect();
    ReconstructionTask { references, ..task }
}
