//! Domain types shared by every stage of the pipeline.
//!
//! All types validate their invariants on construction and are immutable
//! afterwards. Pixel data lives behind an `Arc`, so cloning a [`Frame`] is
//! cheap and frames can be shared freely across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CameraId = u16;

/// Maps an 8-bit channel value onto the model domain `[-1, 1]`.
pub fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`u8_to_unit`], rounding to the nearest 8-bit level.
pub fn unit_to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// One image of a camera's timeline. Pixels are `H x W x 3`, values in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Frame {
    pixels: Arc<Array3<f32>>,
    camera: CameraId,
    index: i64,
    source_path: Option<PathBuf>,
}

impl Frame {
    pub fn new(pixels: Array3<f32>, camera: CameraId, index: i64) -> Result<Self> {
        let shape = pixels.shape();
        if shape[2] != 3 {
            return Err(Error::DimensionMismatch(format!(
                "frame must have 3 channels, got {}",
                shape[2]
            )));
        }
        if shape[0] == 0 || shape[1] == 0 {
            return Err(Error::DimensionMismatch("frame has zero area".into()));
        }
        if let Some(bad) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!(
                "pixel value {bad} outside [-1, 1] (camera {camera}, index {index})"
            )));
        }
        let pixels = if pixels.is_standard_layout() {
            pixels
        } else {
            pixels.as_standard_layout().to_owned()
        };
        Ok(Self {
            pixels: Arc::new(pixels),
            camera,
            index,
            source_path: None,
        })
    }

    /// A frame filled with one value per channel.
    pub fn constant(
        height: usize,
        width: usize,
        value: f32,
        camera: CameraId,
        index: i64,
    ) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, 3), value), camera, index)
    }

    pub fn from_rgb8(img: &image::RgbImage, camera: CameraId, index: i64) -> Result<Self> {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            u8_to_unit(img.get_pixel(x as u32, y as u32)[c])
        });
        Self::new(pixels, camera, index)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = self.dims();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([
                unit_to_u8(self.pixels[[y, x, 0]]),
                unit_to_u8(self.pixels[[y, x, 1]]),
                unit_to_u8(self.pixels[[y, x, 2]]),
            ])
        })
    }

    pub fn with_source_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.source_path = Some(path.into());
        self
    }

    /// Same pixels, different timeline coordinates.
    pub fn relabel(&self, camera: CameraId, index: i64) -> Self {
        Self {
            pixels: Arc::clone(&self.pixels),
            camera,
            index,
            source_path: self.source_path.clone(),
        }
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn camera(&self) -> CameraId {
        self.camera
    }

    pub fn index(&self) -> i64 {
        self.index
    }

    pub fn source_path(&self) -> Option<&PathBuf> {
        self.source_path.as_ref()
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1])
    }

    pub fn same_pixels(&self, other: &Frame) -> bool {
        Arc::ptr_eq(&self.pixels, &other.pixels) || *self.pixels == *other.pixels
    }
}

/// Axis-aligned pixel rectangle, half-open: `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        self.x1.saturating_sub(self.x0) * self.y1.saturating_sub(self.y0)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

/// Per-camera entry of a rig description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub id: CameraId,
    #[serde(default)]
    pub offset_seconds: f64,
    /// Region of this (reference) camera's image that sees the target's field of view.
    #[serde(default)]
    pub overlap_zone: Option<Rect>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RigDescription {
    target: CameraId,
    fps: f64,
    frame_size: [usize; 2],
    cameras: Vec<CameraSpec>,
}

/// Camera set with temporal offsets and overlap zones.
///
/// Offsets are relative to the target camera: a camera with offset `o`
/// captured its raw frame `r` at target time `r / fps - o`, so target index
/// `i` pairs with raw index `i + round(o * fps)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigDescription", into = "RigDescription")]
pub struct CameraRig {
    target: CameraId,
    fps: f64,
    frame_size: (usize, usize),
    cameras: Vec<CameraSpec>,
}

impl TryFrom<RigDescription> for CameraRig {
    type Error = Error;

    fn try_from(d: RigDescription) -> Result<Self> {
        CameraRig::new(d.target, d.fps, (d.frame_size[0], d.frame_size[1]), d.cameras)
    }
}

impl From<CameraRig> for RigDescription {
    fn from(r: CameraRig) -> Self {
        RigDescription {
            target: r.target,
            fps: r.fps,
            frame_size: [r.frame_size.0, r.frame_size.1],
            cameras: r.cameras,
        }
    }
}

impl CameraRig {
    /// `frame_size` is `(height, width)`.
    pub fn new(
        target: CameraId,
        fps: f64,
        frame_size: (usize, usize),
        mut cameras: Vec<CameraSpec>,
    ) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::Config("rig needs at least one camera".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        cameras.sort_by_key(|c| c.id);
        if cameras.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Config("duplicate camera id in rig".into()));
        }
        let Some(t) = cameras.iter().find(|c| c.id == target) else {
            return Err(Error::Config(format!("target camera {target} not in rig")));
        };
        if t.offset_seconds != 0.0 {
            return Err(Error::Config(format!(
                "target camera offset must be 0, got {}",
                t.offset_seconds
            )));
        }
        let (h, w) = frame_size;
        for c in &cameras {
            if !c.offset_seconds.is_finite() {
                return Err(Error::Config(format!("camera {} offset is not finite", c.id)));
            }
            if let Some(z) = c.overlap_zone {
                if z.area() == 0 || !z.fits(h, w) {
                    return Err(Error::Config(format!(
                        "overlap zone {z:?} of camera {} is empty or outside {h}x{w}",
                        c.id
                    )));
                }
            }
        }
        Ok(Self {
            target,
            fps,
            frame_size,
            cameras,
        })
    }

    /// Single-camera rig with no references.
    pub fn single(target: CameraId, fps: f64, frame_size: (usize, usize)) -> Self {
        Self::new(
            target,
            fps,
            frame_size,
            vec![CameraSpec {
                id: target,
                offset_seconds: 0.0,
                overlap_zone: None,
            }],
        )
        .expect("single-camera rig is always valid")
    }

    pub fn n_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn target(&self) -> CameraId {
        self.target
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// `(height, width)`.
    pub fn frame_size(&self) -> (usize, usize) {
        self.frame_size
    }

    pub fn cameras(&self) -> &[CameraSpec] {
        &self.cameras
    }

    pub fn camera(&self, id: CameraId) -> Option<&CameraSpec> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn references(&self) -> impl Iterator<Item = &CameraSpec> {
        self.cameras.iter().filter(move |c| c.id != self.target)
    }

    /// Whole-frame shift applied to a camera's raw indices.
    pub fn frame_shift(&self, id: CameraId) -> Option<i64> {
        self.camera(id)
            .map(|c| (c.offset_seconds * self.fps).round() as i64)
    }

    pub fn overlap_zone(&self, id: CameraId) -> Option<Rect> {
        self.camera(id).and_then(|c| c.overlap_zone)
    }

    /// Conditioning sources this rig supports, in canonical order.
    pub fn source_tags(&self) -> Vec<SourceTag> {
        let mut tags = vec![SourceTag::Past, SourceTag::Future];
        tags.extend(self.references().map(|c| SourceTag::Reference(c.id)));
        tags
    }

    pub fn with_frame_size(mut self, frame_size: (usize, usize)) -> Result<Self> {
        self.frame_size = frame_size;
        Self::new(self.target, self.fps, frame_size, self.cameras)
    }
}

/// Identity of one conditioning stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SourceTag {
    Past,
    Future,
    Reference(CameraId),
}

impl SourceTag {
    pub fn is_intra(&self) -> bool {
        matches!(self, SourceTag::Past | SourceTag::Future)
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceTag::Past => f.write_str("past"),
            SourceTag::Future => f.write_str("future"),
            SourceTag::Reference(id) => write!(f, "ref_{id}"),
        }
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "past" => Ok(SourceTag::Past),
            "future" => Ok(SourceTag::Future),
            _ => s
                .strip_prefix("ref_")
                .and_then(|id| id.parse().ok())
                .map(SourceTag::Reference)
                .ok_or_else(|| Error::Parse(format!("unknown source tag {s:?}"))),
        }
    }
}

impl Serialize for SourceTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SourceTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A missing target frame plus everything available to reconstruct it.
#[derive(Clone, Debug)]
pub struct ReconstructionTask {
    pub missing_index: i64,
    pub gap: usize,
    pub past: Frame,
    pub future: Frame,
    pub references: Vec<Frame>,
    pub ground_truth: Option<Frame>,
}

impl ReconstructionTask {
    /// The conditioning frame for each available source, in canonical order.
    pub fn conditioning(&self) -> Vec<(SourceTag, &Frame)> {
        let mut out = vec![(SourceTag::Past, &self.past), (SourceTag::Future, &self.future)];
        let mut refs: Vec<_> = self
            .references
            .iter()
            .map(|f| (SourceTag::Reference(f.camera()), f))
            .collect();
        refs.sort_by_key(|(t, _)| *t);
        out.extend(refs);
        out
    }

    pub fn without_references(&self) -> Self {
        Self {
            references: Vec::new(),
            ..self.clone()
        }
    }
}

/// Checks a task against the index arithmetic and shape invariants.
pub fn validate_task(task: ReconstructionTask, rig: &CameraRig) -> Result<ReconstructionTask> {
    if task.gap == 0 {
        return Err(Error::IndexMismatch("gap must be at least 1".into()));
    }
    let k = task.gap as i64;
    let i = task.missing_index;
    if task.past.index() != i - k {
        return Err(Error::IndexMismatch(format!(
            "past frame index {} != {i} - {k}",
            task.past.index()
        )));
    }
    if task.future.index() != i + k {
        return Err(Error::IndexMismatch(format!(
            "future frame index {} != {i} + {k}",
            task.future.index()
        )));
    }
    for f in [&task.past, &task.future].into_iter().chain(&task.ground_truth) {
        if f.camera() != rig.target() {
            return Err(Error::IndexMismatch(format!(
                "intra-camera frame from camera {} but target is {}",
                f.camera(),
                rig.target()
            )));
        }
    }
    if let Some(gt) = &task.ground_truth {
        if gt.index() != i {
            return Err(Error::IndexMismatch(format!(
                "ground truth index {} != {i}",
                gt.index()
            )));
        }
    }
    let mut seen = BTreeSet::new();
    for r in &task.references {
        if r.camera() == rig.target() || rig.camera(r.camera()).is_none() {
            return Err(Error::IndexMismatch(format!(
                "camera {} is not a reference camera of the rig",
                r.camera()
            )));
        }
        if !seen.insert(r.camera()) {
            return Err(Error::IndexMismatch(format!(
                "camera {} appears twice among references",
                r.camera()
            )));
        }
        if r.index() != i {
            return Err(Error::IndexMismatch(format!(
                "reference camera {} frame index {} is not aligned with {i}",
                r.camera(),
                r.index()
            )));
        }
    }
    let dims = task.past.dims();
    let all = [&task.future]
        .into_iter()
        .chain(&task.references)
        .chain(&task.ground_truth);
    for f in all {
        if f.dims() != dims {
            return Err(Error::DimensionMismatch(format!(
                "camera {} frame {} is {:?}, expected {:?}",
                f.camera(),
                f.index(),
                f.dims(),
                dims
            )));
        }
    }
    Ok(task)
}

/// Per-source reconstructions of one missing frame.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    candidates: Vec<(SourceTag, Frame)>,
    gap: usize,
}

impl CandidateSet {
    pub fn new(candidates: Vec<(SourceTag, Frame)>, gap: usize) -> Result<Self> {
        let mut tags = BTreeSet::new();
        for (t, _) in &candidates {
            if !tags.insert(*t) {
                return Err(Error::InvalidValue(format!("duplicate candidate tag {t}")));
            }
        }
        if let Some((_, first)) = candidates.first() {
            if let Some((t, f)) = candidates.iter().find(|(_, f)| f.dims() != first.dims()) {
                return Err(Error::DimensionMismatch(format!(
                    "candidate {t} is {:?}, expected {:?}",
                    f.dims(),
                    first.dims()
                )));
            }
        }
        Ok(Self { candidates, gap })
    }

    pub fn candidates(&self) -> &[(SourceTag, Frame)] {
        &self.candidates
    }

    pub fn gap(&self) -> usize {
        self.gap
    }

    pub fn tags(&self) -> Vec<SourceTag> {
        self.candidates.iter().map(|(t, _)| *t).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Tolerance on the sum of each weight vector.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Per-gap convex weights over source tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionWeights {
    table: BTreeMap<usize, BTreeMap<SourceTag, f64>>,
}

impl FusionWeights {
    pub fn new(table: BTreeMap<usize, BTreeMap<SourceTag, f64>>) -> Result<Self> {
        for (gap, vector) in &table {
            if vector.is_empty() {
                return Err(Error::InvalidValue(format!("empty weight vector for gap {gap}")));
            }
            for (tag, w) in vector {
                if !(w.is_finite() && (0.0..=1.0).contains(w)) {
                    return Err(Error::InvalidValue(format!(
                        "weight {w} for gap {gap} tag {tag} outside [0, 1]"
                    )));
                }
            }
            let sum: f64 = vector.values().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::InvalidValue(format!(
                    "weights for gap {gap} sum to {sum}, not 1"
                )));
            }
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &BTreeMap<usize, BTreeMap<SourceTag, f64>> {
        &self.table
    }

    pub fn vector(&self, gap: usize) -> Option<&BTreeMap<SourceTag, f64>> {
        self.table.get(&gap)
    }

    /// Weights restricted to `present` and renormalized to sum to 1.
    ///
    /// If every present tag has zero weight the result is uniform over `present`.
    pub fn renormalized(&self, gap: usize, present: &[SourceTag]) -> Result<Vec<f64>> {
        let vector = self.vector(gap).ok_or(Error::MissingGap(gap))?;
        let raw: Vec<f64> = present
            .iter()
            .map(|t| vector.get(t).copied().unwrap_or(0.0))
            .collect();
        let sum: f64 = raw.iter().sum();
        if present.is_empty() {
            return Ok(raw);
        }
        if sum <= 0.0 {
            return Ok(vec![1.0 / present.len() as f64; present.len()]);
        }
        Ok(raw.into_iter().map(|w| w / sum).collect())
    }

    /// Total weight on past and future for a gap.
    pub fn intra_mass(&self, gap: usize) -> Option<f64> {
        self.vector(gap)
            .map(|v| v.iter().filter(|(t, _)| t.is_intra()).map(|(_, w)| w).sum())
    }

    /// Serializes as `gap,source_tag,weight` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (gap, vector) in &self.table {
            for (tag, weight) in vector {
                w.serialize(WeightRow {
                    gap: *gap,
                    source_tag: *tag,
                    weight: *weight,
                })
                .expect("in-memory write");
            }
        }
        let bytes = w.into_inner().expect("in-memory write");
        let text = String::from_utf8(bytes).expect("utf-8 rows");
        if text.is_empty() {
            format!("{WEIGHTS_HEADER}\n")
        } else {
            text
        }
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Parse(e.to_string()))?;
        if header.iter().collect::<Vec<_>>().join(",") != WEIGHTS_HEADER {
            return Err(Error::Parse(format!("bad weights header {header:?}")));
        }
        let mut table: BTreeMap<usize, BTreeMap<SourceTag, f64>> = BTreeMap::new();
        for row in reader.deserialize::<WeightRow>() {
            let row = row.map_err(|e| Error::Parse(format!("bad weights row: {e}")))?;
            if table.entry(row.gap).or_default().insert(row.source_tag, row.weight).is_some() {
                return Err(Error::Parse(format!(
                    "duplicate row for gap {} / {}",
                    row.gap, row.source_tag
                )));
            }
        }
        Self::new(table)
    }
}

const WEIGHTS_HEADER: &str = "gap,source_tag,weight";

#[derive(Serialize, Deserialize)]
struct WeightRow {
    gap: usize,
    source_tag: SourceTag,
    weight: f64,
}
