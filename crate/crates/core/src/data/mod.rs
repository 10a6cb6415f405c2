//! Frame storage, cross-camera synchronization, splitting and task sampling.

mod gate;
mod synth;

pub use gate::{gate_references, mean_abs_zone_difference, BackgroundModel, DEFAULT_BACKGROUND_DECAY};
pub use synth::{synthesize, SynthCamera, SynthConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CameraId, CameraRig, Frame, ReconstructionTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Parse(format!("unknown split {s:?}"))),
        }
    }
}

/// Contiguous-in-time split: train, then validation, then test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Fraction of the timeline held out for testing (the tail).
    pub test_fraction: f64,
    /// Fraction of the non-test portion used for validation (its tail).
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            val_fraction: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("test_fraction", self.test_fraction), ("val_fraction", self.val_fraction)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// `(train, val, test)` counts for `n` frames.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let test = (n as f64 * self.test_fraction).round() as usize;
        let rest = n - test.min(n);
        let val = (rest as f64 * self.val_fraction).round() as usize;
        (rest - val, val, test.min(n))
    }
}

/// Synchronized per-camera frames with a split assignment over target indices.
#[derive(Clone, Debug)]
pub struct SequenceStore {
    rig: CameraRig,
    frames: BTreeMap<CameraId, BTreeMap<i64, Frame>>,
    split: BTreeMap<i64, Split>,
}

impl SequenceStore {
    /// Builds a store from already-synchronized frame lists.
    pub fn new(
        rig: CameraRig,
        frames: BTreeMap<CameraId, Vec<Frame>>,
        split: &SplitConfig,
    ) -> Result<Self> {
        split.validate()?;
        let size = rig.frame_size();
        let mut by_camera = BTreeMap::new();
        for spec in rig.cameras() {
            let list = frames.get(&spec.id).ok_or(Error::EmptyCamera(spec.id))?;
            if list.is_empty() {
                return Err(Error::EmptyCamera(spec.id));
            }
            let mut map = BTreeMap::new();
            let mut last = None;
            for f in list {
                if f.camera() != spec.id {
                    return Err(Error::IndexMismatch(format!(
                        "frame of camera {} listed under camera {}",
                        f.camera(),
                        spec.id
                    )));
                }
                if last.is_some_and(|l| f.index() <= l) {
                    return Err(Error::IndexMismatch(format!(
                        "camera {} frames not strictly ordered at index {}",
                        spec.id,
                        f.index()
                    )));
                }
                if f.dims() != size {
                    return Err(Error::DimensionMismatch(format!(
                        "camera {} frame {} is {:?}, rig expects {:?}",
                        spec.id,
                        f.index(),
                        f.dims(),
                        size
                    )));
                }
                last = Some(f.index());
                map.insert(f.index(), f.clone());
            }
            by_camera.insert(spec.id, map);
        }
        if let Some(extra) = frames.keys().find(|id| rig.camera(**id).is_none()) {
            return Err(Error::Config(format!("frames for camera {extra} not in rig")));
        }
        let target: Vec<i64> = by_camera[&rig.target()].keys().copied().collect();
        let (n_train, n_val, _) = split.counts(target.len());
        let assignment = target
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                let s = if pos < n_train {
                    Split::Train
                } else if pos < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                (i, s)
            })
            .collect();
        Ok(Self {
            rig,
            frames: by_camera,
            split: assignment,
        })
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn frame(&self, camera: CameraId, index: i64) -> Option<&Frame> {
        self.frames.get(&camera)?.get(&index)
    }

    pub fn camera_frames(&self, camera: CameraId) -> impl Iterator<Item = &Frame> {
        self.frames.get(&camera).into_iter().flat_map(|m| m.values())
    }

    pub fn target_indices(&self) -> impl Iterator<Item = i64> + '_ {
        self.frames[&self.rig.target()].keys().copied()
    }

    pub fn split_of(&self, index: i64) -> Option<Split> {
        self.split.get(&index).copied()
    }

    pub fn indices_in(&self, split: Split) -> impl Iterator<Item = i64> + '_ {
        self.split
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(i, _)| *i)
    }

    pub fn len(&self) -> usize {
        self.split.len()
    }

    pub fn is_empty(&self) -> bool {
        self.split.is_empty()
    }

    /// Every frame in camera-major, index order; used for fingerprints and equality checks.
    pub fn all_frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.values().flat_map(|m| m.values())
    }

    /// Writes each camera to `<dir>/cam<id>/%06d.png`. Reference frames are
    /// written at their raw (unsynchronized) indices so that [`ingest`]
    /// with the same rig restores this store.
    pub fn write_png_dirs(&self, dir: &Path) -> Result<BTreeMap<CameraId, PathBuf>> {
        let mut out = BTreeMap::new();
        for (cam, frames) in &self.frames {
            let shift = self.rig.frame_shift(*cam).unwrap_or(0);
            let cdir = dir.join(format!("cam{cam}"));
            fs::create_dir_all(&cdir).map_err(|e| Error::UnwritablePath {
                path: cdir.clone(),
                reason: e.to_string(),
            })?;
            for (idx, f) in frames {
                let raw = idx + shift;
                if raw < 0 {
                    return Err(Error::IndexMismatch(format!(
                        "camera {cam} raw index {raw} would be negative"
                    )));
                }
                let path = cdir.join(format!("{raw:06}.png"));
                f.to_rgb8().save(&path).map_err(|e| Error::UnwritablePath {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            }
            out.insert(*cam, cdir);
        }
        Ok(out)
    }
}

fn parse_frame_index(path: &Path) -> Option<i64> {
    path.file_stem()?.to_str()?.parse().ok()
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn load_frame(path: &Path, camera: CameraId, index: i64, size: (usize, usize)) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    let (h, w) = size;
    if rgb.dimensions() != (w as u32, h as u32) {
        rgb = image::imageops::resize(&rgb, w as u32, h as u32, image::imageops::FilterType::Triangle);
    }
    Ok(Frame::from_rgb8(&rgb, camera, index)?.with_source_path(path))
}

/// Reads per-camera frame directories and synchronizes them.
///
/// A reference camera's raw frame `r` is placed at index `r - shift` where
/// `shift = round(offset_seconds * fps)`. Only the time span covered by
/// every camera is kept.
pub fn ingest(
    dirs: &BTreeMap<CameraId, PathBuf>,
    rig: &CameraRig,
    split: &SplitConfig,
) -> Result<SequenceStore> {
    let mut listed: BTreeMap<CameraId, Vec<(i64, PathBuf)>> = BTreeMap::new();
    for spec in rig.cameras() {
        let dir = dirs
            .get(&spec.id)
            .ok_or_else(|| Error::Config(format!("no directory given for camera {}", spec.id)))?;
        let entries = fs::read_dir(dir).map_err(|e| Error::UnreadableImage {
            path: dir.clone(),
            reason: e.to_string(),
        })?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry?.path();
            if !is_image(&path) {
                continue;
            }
            let raw = parse_frame_index(&path).ok_or_else(|| Error::UnreadableImage {
                path: path.clone(),
                reason: "file name is not a frame number".into(),
            })?;
            files.push((raw, path));
        }
        if files.is_empty() {
            return Err(Error::EmptyCamera(spec.id));
        }
        files.sort();
        if let Some(w) = files.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::IndexMismatch(format!(
                "camera {} has two files for frame {}: {:?}",
                spec.id, w[0].0, w[1].1
            )));
        }
        let shift = rig.frame_shift(spec.id).unwrap_or(0);
        listed.insert(
            spec.id,
            files.into_iter().map(|(raw, p)| (raw - shift, p)).collect(),
        );
    }
    let lo = listed.values().map(|v| v[0].0).max().unwrap();
    let hi = listed.values().map(|v| v[v.len() - 1].0).min().unwrap();
    if lo > hi {
        return Err(Error::IndexMismatch(
            "cameras share no synchronous time span".into(),
        ));
    }
    let mut frames = BTreeMap::new();
    for (cam, files) in listed {
        let list = files
            .into_iter()
            .filter(|(i, _)| (lo..=hi).contains(i))
            .map(|(i, p)| load_frame(&p, cam, i, rig.frame_size()))
            .collect::<Result<Vec<_>>>()?;
        frames.insert(cam, list);
    }
    SequenceStore::new(rig.clone(), frames, split)
}

fn build_task(store: &SequenceStore, i: i64, gap: usize) -> Option<ReconstructionTask> {
    let rig = store.rig();
    let target = rig.target();
    let k = gap as i64;
    let past = store.frame(target, i - k)?;
    let future = store.frame(target, i + k)?;
    let references = rig
        .references()
        .filter_map(|c| store.frame(c.id, i).cloned())
        .collect();
    Some(ReconstructionTask {
        missing_index: i,
        gap,
        past: past.clone(),
        future: future.clone(),
        references,
        ground_truth: store.frame(target, i).cloned(),
    })
}

/// The single task centered on `index`, with ground truth when the store has it.
pub fn task_at(store: &SequenceStore, index: i64, gap: usize) -> Result<ReconstructionTask> {
    if gap == 0 {
        return Err(Error::InvalidValue("gap must be at least 1".into()));
    }
    build_task(store, index, gap).ok_or_else(|| {
        Error::IndexMismatch(format!(
            "frames {} and {} of the target camera are not both available",
            index - gap as i64,
            index + gap as i64
        ))
    })
}

/// Every reconstruction task with center in `split` (or anywhere, for `None`)
/// whose `i - gap` and `i + gap` target frames exist.
pub fn sample_tasks(
    store: &SequenceStore,
    gap: usize,
    split: Option<Split>,
) -> Result<Vec<ReconstructionTask>> {
    if gap == 0 {
        return Err(Error::InvalidValue("gap must be at least 1".into()));
    }
    let tasks: Vec<ReconstructionTask> = store
        .target_indices()
        .filter(|i| split.is_none() || store.split_of(*i) == split)
        .filter_map(|i| build_task(store, i, gap))
        .collect();
    if tasks.is_empty() {
        return Err(Error::GapTooLarge { gap });
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::CameraSpec;

    fn frames(camera: CameraId, n: usize, size: usize) -> Vec<Frame> {
        (0..n as i64)
            .map(|i| Frame::constant(size, size, 0.0, camera, i).unwrap())
            .collect()
    }

    fn store_1cam(n: usize) -> SequenceStore {
        let rig = CameraRig::single(1, 10.0, (4, 4));
        SequenceStore::new(rig, BTreeMap::from([(1, frames(1, n, 4))]), &SplitConfig::default())
            .unwrap()
    }

    #[test]
    fn sliding_window_counts() {
        let store = store_1cam(100);
        assert_eq!(sample_tasks(&store, 1, None).unwrap().len(), 98);
        let brute = (0..100).filter(|i| *i >= 30 && i + 30 < 100).count();
        assert_eq!(brute, 40);
        assert_eq!(sample_tasks(&store, 30, None).unwrap().len(), brute);
    }

    #[test]
    fn gap_too_large_for_short_camera() {
        let store = store_1cam(3);
        assert!(matches!(
            sample_tasks(&store, 5, None),
            Err(Error::GapTooLarge { gap: 5 })
        ));
    }

    #[test]
    fn split_is_contiguous_and_disjoint() {
        let store = store_1cam(100);
        let train: Vec<_> = store.indices_in(Split::Train).collect();
        let val: Vec<_> = store.indices_in(Split::Val).collect();
        let test: Vec<_> = store.indices_in(Split::Test).collect();
        assert_eq!((train.len(), val.len(), test.len()), (72, 8, 20));
        assert!(train.last() < val.first() && val.last() < test.first());
        let tasks = sample_tasks(&store, 3, Some(Split::Test)).unwrap();
        assert!(tasks.iter().all(|t| store.split_of(t.missing_index) == Some(Split::Test)));
    }

    #[test]
    fn unordered_frames_are_rejected() {
        let rig = CameraRig::single(1, 10.0, (4, 4));
        let mut f = frames(1, 3, 4);
        f.swap(0, 1);
        assert!(SequenceStore::new(rig, BTreeMap::from([(1, f)]), &SplitConfig::default()).is_err());
    }

    #[test]
    fn tasks_attach_references_and_truth() {
        let cams = (1..=3)
            .map(|id| CameraSpec {
                id,
                offset_seconds: 0.0,
                overlap_zone: None,
            })
            .collect();
        let rig = CameraRig::new(1, 10.0, (4, 4), cams).unwrap();
        let all = (1..=3).map(|c| (c, frames(c, 20, 4))).collect();
        let store = SequenceStore::new(rig.clone(), all, &SplitConfig::default()).unwrap();
        for t in sample_tasks(&store, 2, None).unwrap() {
            assert_eq!(t.references.len(), 2);
            assert_eq!(t.ground_truth.as_ref().unwrap().index(), t.missing_index);
            crate::types::validate_task(t, &rig).unwrap();
        }
    }
}
