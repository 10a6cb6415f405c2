//! Deterministic multi-camera scenes: colored objects moving over a static
//! textured canvas, seen through per-camera scale/translate views with
//! per-camera brightness.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SequenceStore, SplitConfig};
use crate::error::{Error, Result};
use crate::types::{u8_to_unit, CameraId, CameraRig, CameraSpec, Frame, Rect};

/// View of one synthetic camera: canvas point = `(tx, ty) + scale * pixel`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCamera {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    #[serde(default = "one")]
    pub brightness: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Side of each rendered (square) camera frame.
    pub frame_size: usize,
    /// Side of the square world canvas objects move on.
    pub canvas_size: usize,
    /// First camera is the target; camera ids are 1-based in order.
    pub cameras: Vec<SynthCamera>,
    pub n_objects: usize,
    /// Object speed in canvas pixels per frame.
    pub object_speed: f64,
    pub object_radius: [f64; 2],
    pub sequence_length: usize,
    pub fps: f64,
    pub seed: u64,
    pub split: SplitConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frame_size: 64,
            canvas_size: 96,
            cameras: vec![
                SynthCamera {
                    scale: 1.0,
                    tx: 16.0,
                    ty: 16.0,
                    brightness: 1.0,
                },
                SynthCamera {
                    scale: 1.25,
                    tx: 0.0,
                    ty: 4.0,
                    brightness: 0.8,
                },
                SynthCamera {
                    scale: 1.0,
                    tx: 32.0,
                    ty: 28.0,
                    brightness: 1.15,
                },
            ],
            n_objects: 3,
            object_speed: 0.3,
            object_radius: [5.0, 8.0],
            sequence_length: 400,
            fps: 10.0,
            seed: 7,
            split: SplitConfig::default(),
        }
    }
}

/// Canvas-space rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Footprint {
    fn of(cam: &SynthCamera, size: usize) -> Self {
        let ext = cam.scale * size as f64;
        Self {
            x0: cam.tx,
            y0: cam.ty,
            x1: cam.tx + ext,
            y1: cam.ty + ext,
        }
    }

    fn intersect(&self, o: &Footprint) -> Option<Footprint> {
        let f = Footprint {
            x0: self.x0.max(o.x0),
            y0: self.y0.max(o.y0),
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
        };
        (f.x1 > f.x0 && f.y1 > f.y0).then_some(f)
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() || self.frame_size == 0 || self.canvas_size == 0 {
            return Err(Error::Config("synthetic config needs cameras and nonzero sizes".into()));
        }
        if self.sequence_length == 0 {
            return Err(Error::Config("sequence_length must be positive".into()));
        }
        if self.object_radius[0] <= 0.0 || self.object_radius[1] < self.object_radius[0] {
            return Err(Error::Config(format!("bad object_radius {:?}", self.object_radius)));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            if !(c.scale > 0.0 && c.brightness > 0.0) {
                return Err(Error::Config(format!("camera {} has non-positive scale or brightness", i + 1)));
            }
        }
        let prints: Vec<_> = self
            .cameras
            .iter()
            .map(|c| Footprint::of(c, self.frame_size))
            .collect();
        for a in 0..prints.len() {
            for b in a + 1..prints.len() {
                if prints[a].intersect(&prints[b]).is_none() {
                    return Err(Error::NonOverlappingViews(format!(
                        "cameras {} and {}",
                        a + 1,
                        b + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Region of each reference camera's image that sees the target's footprint.
    pub fn overlap_zones(&self) -> Result<BTreeMap<CameraId, Rect>> {
        self.validate()?;
        let n = self.frame_size;
        let target = Footprint::of(&self.cameras[0], n);
        let mut zones = BTreeMap::new();
        for (i, cam) in self.cameras.iter().enumerate().skip(1) {
            let shared = Footprint::of(cam, n).intersect(&target).ok_or_else(|| {
                Error::NonOverlappingViews(format!("camera {} and target", i + 1))
            })?;
            let to_px = |v: f64, t: f64| (v - t) / cam.scale;
            let x0 = to_px(shared.x0, cam.tx).floor().max(0.0) as usize;
            let y0 = to_px(shared.y0, cam.ty).floor().max(0.0) as usize;
            let x1 = (to_px(shared.x1, cam.tx).ceil() as usize).min(n);
            let y1 = (to_px(shared.y1, cam.ty).ceil() as usize).min(n);
            zones.insert((i + 1) as CameraId, Rect::new(x0, y0, x1.max(x0 + 1), y1.max(y0 + 1)));
        }
        Ok(zones)
    }

    pub fn rig(&self) -> Result<CameraRig> {
        let zones = self.overlap_zones()?;
        let cams = (1..=self.cameras.len() as CameraId)
            .map(|id| CameraSpec {
                id,
                offset_seconds: 0.0,
                overlap_zone: zones.get(&id).copied(),
            })
            .collect();
        CameraRig::new(1, self.fps, (self.frame_size, self.frame_size), cams)
    }
}

#[derive(Clone, Debug)]
struct MovingObject {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    color: [f64; 3],
    square: bool,
}

#[derive(Clone, Debug)]
struct StaticBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    color: [f64; 3],
}

struct Scene {
    boxes: Vec<StaticBox>,
    objects: Vec<MovingObject>,
    canvas: f64,
}

impl Scene {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let canvas = cfg.canvas_size as f64;
        let boxes = (0..4)
            .map(|_| {
                let w = rng.gen_range(0.1..0.25) * canvas;
                let h = rng.gen_range(0.1..0.25) * canvas;
                let x0 = rng.gen_range(0.0..canvas - w);
                let y0 = rng.gen_range(0.0..canvas - h);
                let shade = rng.gen_range(0.15..0.35);
                StaticBox {
                    x0,
                    y0,
                    x1: x0 + w,
                    y1: y0 + h,
                    color: [shade, shade * 0.9, shade * 1.1],
                }
            })
            .collect();
        let objects = (0..cfg.n_objects)
            .map(|_| {
                let radius = rng.gen_range(cfg.object_radius[0]..=cfg.object_radius[1]);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let hue = rng.gen_range(0..3);
                let mut color = [0.15, 0.15, 0.15];
                color[hue] = 0.95;
                color[(hue + 1) % 3] = rng.gen_range(0.2..0.8);
                MovingObject {
                    x: rng.gen_range(radius..canvas - radius),
                    y: rng.gen_range(radius..canvas - radius),
                    vx: cfg.object_speed * angle.cos(),
                    vy: cfg.object_speed * angle.sin(),
                    radius,
                    color,
                    square: rng.gen(),
                }
            })
            .collect();
        Self {
            boxes,
            objects,
            canvas,
        }
    }

    fn advance(&mut self) {
        let c = self.canvas;
        for o in &mut self.objects {
            o.x += o.vx;
            o.y += o.vy;
            if o.x < o.radius || o.x > c - o.radius {
                o.vx = -o.vx;
                o.x = o.x.clamp(o.radius, c - o.radius);
            }
            if o.y < o.radius || o.y > c - o.radius {
                o.vy = -o.vy;
                o.y = o.y.clamp(o.radius, c - o.radius);
            }
        }
    }

    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        for o in self.objects.iter().rev() {
            let (dx, dy) = (x - o.x, y - o.y);
            let inside = if o.square {
                dx.abs() <= o.radius && dy.abs() <= o.radius
            } else {
                dx * dx + dy * dy <= o.radius * o.radius
            };
            if inside {
                return o.color;
            }
        }
        for b in self.boxes.iter().rev() {
            if x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1 {
                return b.color;
            }
        }
        [
            0.5 + 0.2 * (x / 9.0).sin(),
            0.45 + 0.2 * (y / 7.0).cos(),
            0.5 + 0.15 * ((x + y) / 13.0).sin(),
        ]
    }

    fn render(&self, cam: &SynthCamera, size: usize, camera: CameraId, index: i64) -> Result<Frame> {
        let px = Array3::from_shape_fn((size, size, 3), |(v, u, ch)| {
            let x = cam.tx + cam.scale * (u as f64 + 0.5);
            let y = cam.ty + cam.scale * (v as f64 + 0.5);
            let c = (self.color_at(x, y)[ch] * cam.brightness).clamp(0.0, 1.0);
            u8_to_unit((c * 255.0).round() as u8)
        });
        Frame::new(px, camera, index)
    }
}

/// Renders a synchronized synthetic store. Identical configs give identical stores.
pub fn synthesize(cfg: &SynthConfig) -> Result<SequenceStore> {
    let rig = cfg.rig()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scene = Scene::new(cfg, &mut rng);
    let mut frames: BTreeMap<CameraId, Vec<Frame>> = BTreeMap::new();
    for t in 0..cfg.sequence_length as i64 {
        for (i, cam) in cfg.cameras.iter().enumerate() {
            let id = (i + 1) as CameraId;
            frames
                .entry(id)
                .or_default()
                .push(scene.render(cam, cfg.frame_size, id, t)?);
        }
        scene.advance();
    }
    SequenceStore::new(rig, frames, &cfg.split)
}
