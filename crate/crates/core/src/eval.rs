//! Gap sweeps, single- vs. multi-view ablation and report rendering.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{gate_references, sample_tasks, BackgroundModel, SequenceStore, Split};
use crate::error::{Error, Result};
use crate::fusion::{calibrate_weights, fuse, generate_candidates};
use crate::metrics::{psnr, ssim};
use crate::training::SourceModelBank;
use crate::types::{CandidateSet, Frame, FusionWeights, ReconstructionTask};

pub const DEFAULT_GAPS: [usize; 6] = [1, 3, 5, 7, 15, 30];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleView,
    MultiView,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::SingleView => "single_view",
            Mode::MultiView => "multi_view",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_view" => Ok(Mode::SingleView),
            "multi" | "multi_view" => Ok(Mode::MultiView),
            _ => Err(Error::Parse(format!("unknown mode {s:?}"))),
        }
    }
}

/// Reference gating applied in multi-view mode.
#[derive(Clone, Debug)]
pub struct Gating {
    pub background: BackgroundModel,
    pub threshold: f64,
}

impl Gating {
    pub fn from_store(store: &SequenceStore, decay: f64, threshold: f64) -> Self {
        Self {
            background: BackgroundModel::from_store(store, decay),
            threshold,
        }
    }

    /// Keeps every reference.
    pub fn disabled(store: &SequenceStore) -> Self {
        Self::from_store(store, crate::data::DEFAULT_BACKGROUND_DECAY, 0.0)
    }
}

/// Prepares a task for the given mode: strips references (single view) or
/// gates them on overlap-zone activity (multi view).
pub fn prepare_task(
    task: ReconstructionTask,
    store: &SequenceStore,
    mode: Mode,
    gating: &Gating,
) -> ReconstructionTask {
    match mode {
        Mode::SingleView => task.without_references(),
        Mode::MultiView => gate_references(task, store.rig(), &gating.background, gating.threshold),
    }
}

/// Validation tasks per gap, prepared exactly as at multi-view inference.
pub fn validation_tasks(
    store: &SequenceStore,
    gaps: &[usize],
    gating: &Gating,
) -> Result<BTreeMap<usize, Vec<ReconstructionTask>>> {
    gaps.iter()
        .map(|&gap| {
            let tasks = sample_tasks(store, gap, Some(Split::Val))?
                .into_iter()
                .map(|t| prepare_task(t, store, Mode::MultiView, gating))
                .collect();
            Ok((gap, tasks))
        })
        .collect()
}

/// Per-gap fusion weights over the bank's sources, fit on the validation split.
pub fn calibrate(
    bank: &SourceModelBank,
    store: &SequenceStore,
    gaps: &[usize],
    gating: &Gating,
    grid_step: f64,
) -> Result<FusionWeights> {
    let tasks = validation_tasks(store, gaps, gating)?;
    calibrate_weights(bank, &tasks, &bank.tags(), grid_step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub gap: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSweepReport {
    pub rows: Vec<GapRow>,
    pub mode: Mode,
    pub dataset_id: String,
    pub fingerprint: String,
}

impl GapSweepReport {
    pub fn row(&self, gap: usize) -> Option<&GapRow> {
        self.rows.iter().find(|r| r.gap == gap)
    }
}

/// One reconstructed test task.
pub struct Reconstruction {
    pub task: ReconstructionTask,
    pub candidates: CandidateSet,
    pub fused: Frame,
}

/// Candidates and fused output for one prepared task.
pub fn reconstruct(
    task: ReconstructionTask,
    bank: &SourceModelBank,
    weights: &FusionWeights,
) -> Result<Reconstruction> {
    let (i, k) = (task.missing_index, task.gap);
    let candidates = generate_candidates(&task, bank).map_err(|e| e.for_task(i, k))?;
    let fused = fuse(&candidates, weights).map_err(|e| e.for_task(i, k))?;
    Ok(Reconstruction {
        task,
        candidates,
        fused,
    })
}

/// SHA-256 over the configuration digest, every checkpoint digest and the weights table.
pub fn sweep_fingerprint(config_digest: &str, bank: &SourceModelBank, weights: &FusionWeights) -> String {
    let mut h = Sha256::new();
    h.update(config_digest.as_bytes());
    for (tag, digest) in bank.fingerprints() {
        h.update(tag.to_string().as_bytes());
        h.update(digest.as_bytes());
    }
    h.update(weights.to_csv().as_bytes());
    hex::encode(h.finalize())
}

/// Reconstructs every test task at each gap and averages PSNR/SSIM.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    bank: &SourceModelBank,
    weights: &FusionWeights,
    store: &SequenceStore,
    gaps: &[usize],
    mode: Mode,
    gating: &Gating,
    dataset_id: &str,
    config_digest: &str,
) -> Result<GapSweepReport> {
    let mut rows = Vec::with_capacity(gaps.len());
    for &gap in gaps {
        let tasks = sample_tasks(store, gap, Some(Split::Test))?;
        let scores: Vec<(f64, f64)> = tasks
            .into_par_iter()
            .map(|task| {
                let (i, k) = (task.missing_index, task.gap);
                let task = prepare_task(task, store, mode, gating);
                let truth = task
                    .ground_truth
                    .clone()
                    .ok_or_else(|| Error::InvalidValue("test task lacks ground truth".into()).for_task(i, k))?;
                let rec = reconstruct(task, bank, weights)?;
                let p = psnr(&rec.fused, &truth).map_err(|e| e.for_task(i, k))?;
                let s = ssim(&rec.fused, &truth).map_err(|e| e.for_task(i, k))?;
                Ok((p, s))
            })
            .collect::<Result<_>>()?;
        let n = scores.len();
        let (sp, ss) = scores.iter().fold((0.0, 0.0), |(a, b), (p, s)| (a + p, b + s));
        rows.push(GapRow {
            gap,
            mean_psnr: sp / n as f64,
            mean_ssim: ss / n as f64,
            tasks: n,
        });
    }
    Ok(GapSweepReport {
        rows,
        mode,
        dataset_id: dataset_id.to_string(),
        fingerprint: sweep_fingerprint(config_digest, bank, weights),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub const REPORT_CSV_HEADER: &str = "gap,mode,mean_psnr,mean_ssim,tasks";

/// Deterministic rendering. CSV keeps full precision; markdown follows a
/// gap-per-column layout with PSNR and SSIM rows.
pub fn emit_report(report: &GapSweepReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(REPORT_CSV_HEADER);
            out.push('\n');
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.gap, report.mode, r.mean_psnr, r.mean_ssim, r.tasks
                );
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "<!-- {} {} {} -->", report.dataset_id, report.mode, report.fingerprint);
            let mut header = String::from("| Gap (frames) |");
            let mut rule = String::from("|---|");
            let mut p = String::from("| PSNR |");
            let mut s = String::from("| SSIM |");
            for r in &report.rows {
                let _ = write!(header, " {} |", r.gap);
                rule.push_str("---|");
                let _ = write!(p, " {:.2} |", r.mean_psnr);
                let _ = write!(s, " {:.3} |", r.mean_ssim);
            }
            for line in [header, rule] {
                out.push_str(&line);
                out.push('\n');
            }
            if !report.rows.is_empty() {
                for line in [p, s] {
                    out.push_str(&line);
                    out.push('\n');
                }
            }
        }
    }
    out
}

#[derive(Deserialize)]
struct ReportRow {
    gap: usize,
    mode: Mode,
    mean_psnr: f64,
    mean_ssim: f64,
    tasks: usize,
}

/// Parses the CSV produced by [`emit_report`] back into rows.
pub fn parse_report_csv(text: &str) -> Result<Vec<(Mode, GapRow)>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != REPORT_CSV_HEADER {
        return Err(Error::Parse(format!("bad report header {header:?}")));
    }
    reader
        .deserialize::<ReportRow>()
        .map(|row| {
            let r = row.map_err(|e| Error::Parse(format!("bad report row: {e}")))?;
            Ok((
                r.mode,
                GapRow {
                    gap: r.gap,
                    mean_psnr: r.mean_psnr,
                    mean_ssim: r.mean_ssim,
                    tasks: r.tasks,
                },
            ))
        })
        .collect()
}

/// Single-view vs. multi-view table with a delta row.
pub fn ablation_table(single: &GapSweepReport, multi: &GapSweepReport) -> String {
    let mut header = String::from("| Gap (frames) |");
    let mut rule = String::from("|---|");
    let mut rs = String::from("| Single |");
    let mut rm = String::from("| Multi |");
    let mut rd = String::from("| Delta |");
    let by_gap: BTreeMap<usize, &GapRow> = multi.rows.iter().map(|r| (r.gap, r)).collect();
    for s in &single.rows {
        let Some(m) = by_gap.get(&s.gap) else { continue };
        let _ = write!(header, " {} |", s.gap);
        rule.push_str("---|");
        let _ = write!(rs, " {:.2} |", s.mean_psnr);
        let _ = write!(rm, " {:.2} |", m.mean_psnr);
        let _ = write!(rd, " {:+.2} |", m.mean_psnr - s.mean_psnr);
    }
    [header, rule, rs, rm, rd].join("\n") + "\n"
}

// 3x5 glyphs, one row per string, '#' marks a lit pixel.
fn glyph(c: char) -> [&'static str; 5] {
    match c {
        'a' => [".#.", "#.#", "###", "#.#", "#.#"],
        'b' => ["##.", "#.#", "##.", "#.#", "##."],
        'c' => [".##", "#..", "#..", "#..", ".##"],
        'd' => ["##.", "#.#", "#.#", "#.#", "##."],
        'e' => ["###", "#..", "##.", "#..", "###"],
        'f' => ["###", "#..", "##.", "#..", "#.."],
        'g' => [".##", "#..", "#.#", "#.#", ".##"],
        'h' => ["#.#", "#.#", "###", "#.#", "#.#"],
        'i' => ["###", ".#.", ".#.", ".#.", "###"],
        'j' => ["..#", "..#", "..#", "#.#", ".#."],
        'k' => ["#.#", "#.#", "##.", "#.#", "#.#"],
        'l' => ["#..", "#..", "#..", "#..", "###"],
        'm' => ["#.#", "###", "###", "#.#", "#.#"],
        'n' => ["##.", "#.#", "#.#", "#.#", "#.#"],
        'o' => [".#.", "#.#", "#.#", "#.#", ".#."],
        'p' => ["##.", "#.#", "##.", "#..", "#.."],
        'q' => [".#.", "#.#", "#.#", "##.", ".##"],
        'r' => ["##.", "#.#", "##.", "#.#", "#.#"],
        's' => [".##", "#..", ".#.", "..#", "##."],
        't' => ["###", ".#.", ".#.", ".#.", ".#."],
        'u' => ["#.#", "#.#", "#.#", "#.#", "###"],
        'v' => ["#.#", "#.#", "#.#", "#.#", ".#."],
        'w' => ["#.#", "#.#", "###", "###", "#.#"],
        'x' => ["#.#", "#.#", ".#.", "#.#", "#.#"],
        'y' => ["#.#", "#.#", ".#.", ".#.", ".#."],
        'z' => ["###", "..#", ".#.", "#..", "###"],
        '0' => ["###", "#.#", "#.#", "#.#", "###"],
        '1' => [".#.", "##.", ".#.", ".#.", "###"],
        '2' => ["##.", "..#", ".#.", "#..", "###"],
        '3' => ["##.", "..#", ".#.", "..#", "##."],
        '4' => ["#.#", "#.#", "###", "..#", "..#"],
        '5' => ["###", "#..", "##.", "..#", "##."],
        '6' => [".##", "#..", "###", "#.#", "###"],
        '7' => ["###", "..#", ".#.", ".#.", ".#."],
        '8' => ["###", "#.#", "###", "#.#", "###"],
        '9' => ["###", "#.#", "###", "..#", "##."],
        '_' => ["...", "...", "...", "...", "###"],
        '=' => ["...", "###", "...", "###", "..."],
        _ => ["...", "...", "...", "...", "..."],
    }
}

fn draw_label(img: &mut image::RgbImage, x0: u32, y0: u32, text: &str, scale: u32, max_w: u32) {
    let mut x = x0;
    for c in text.chars().flat_map(char::to_lowercase) {
        if x + 3 * scale > x0 + max_w {
            break;
        }
        for (row, bits) in glyph(c).iter().enumerate() {
            for (col, b) in bits.chars().enumerate() {
                if b != '#' {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(
                            x + col as u32 * scale + dx,
                            y0 + row as u32 * scale + dy,
                            image::Rgb([255, 255, 255]),
                        );
                    }
                }
            }
        }
        x += 4 * scale;
    }
}

/// Tile geometry of a comparison grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub tiles: usize,
    pub tile_width: u32,
    pub tile_height: u32,
    pub label_height: u32,
    pub spacing: u32,
}

impl GridLayout {
    /// Top-left corner of tile `i`'s image area (below its label).
    pub fn image_origin(&self, i: usize) -> (u32, u32) {
        (i as u32 * (self.tile_width + self.spacing), self.label_height)
    }
}

/// Writes one labeled row: conditioning inputs, each candidate, fused output, ground truth.
pub fn emit_comparison_grid(
    task: &ReconstructionTask,
    candidates: &CandidateSet,
    fused: &Frame,
    ground_truth: &Frame,
    out_path: &Path,
) -> Result<GridLayout> {
    let mut tiles: Vec<(String, &Frame)> = task
        .conditioning()
        .into_iter()
        .map(|(t, f)| (format!("in {t}"), f))
        .collect();
    tiles.extend(candidates.candidates().iter().map(|(t, f)| (format!("gen {t}"), f)));
    tiles.push(("fused".into(), fused));
    tiles.push(("truth".into(), ground_truth));
    let (h, w) = fused.dims();
    if let Some((label, f)) = tiles.iter().find(|(_, f)| f.dims() != (h, w)) {
        return Err(Error::DimensionMismatch(format!(
            "tile {label} is {:?}, expected {:?}",
            f.dims(),
            (h, w)
        )));
    }
    let scale = (w as u32 / 64).max(1);
    let layout = GridLayout {
        tiles: tiles.len(),
        tile_width: w as u32,
        tile_height: h as u32,
        label_height: 7 * scale + 2,
        spacing: 2,
    };
    let width = layout.tiles as u32 * (layout.tile_width + layout.spacing) - layout.spacing;
    let height = layout.label_height + layout.tile_height;
    let mut img = image::RgbImage::new(width, height);
    for (i, (label, frame)) in tiles.iter().enumerate() {
        let (x0, y0) = layout.image_origin(i);
        draw_label(&mut img, x0 + 1, 1 + scale, label, scale, layout.tile_width - 1);
        image::imageops::replace(&mut img, &frame.to_rgb8(), x0 as i64, y0 as i64);
    }
    img.save(out_path).map_err(|e| Error::UnwritablePath {
        path: out_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(layout)
}
