//! Localization evaluation: grid thresholding, pixel IoU against boxes,
//! T(IoU) accuracy tables and heatmap overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{BoxAnnotation, Dataset, ImageSample};
use crate::error::{invalid, Result};
use crate::model::CcgModel;

pub const IOU_THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

/// `probs > tau` per cell.
pub fn threshold_grid(probs: ArrayView2<f64>, tau: f64) -> Array2<bool> {
    probs.mapv(|p| p > tau)
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

/// Pixel footprint of grid cell `(i, j)` on a `width × height` image.
pub fn cell_rect(i: usize, j: usize, grid: (usize, usize), image: (usize, usize)) -> PixelRect {
    let (rows, cols) = grid;
    let (w, h) = image;
    PixelRect {
        x0: j * w / cols,
        x1: (j + 1) * w / cols,
        y0: i * h / rows,
        y1: (i + 1) * h / rows,
    }
}

/// Pixels a box overlaps with positive area.
pub fn box_rect(b: &BoxAnnotation, image: (usize, usize)) -> PixelRect {
    let (w, h) = image;
    let lo = |v: f64, max: usize| (v.floor().max(0.0) as usize).min(max);
    let hi = |v: f64, max: usize| (v.ceil().max(0.0) as usize).min(max);
    PixelRect {
        x0: lo(b.x, w),
        x1: hi(b.x + b.w, w),
        y0: lo(b.y, h),
        y1: hi(b.y + b.h, h),
    }
}

/// Exact `(|A ∩ B|, |A ∪ B|)` in pixels for unions of rectangles, via
/// coordinate compression.
fn overlap_areas(a: &[PixelRect], b: &[PixelRect]) -> (u64, u64) {
    let mut xs: Vec<usize> = a.iter().chain(b).flat_map(|r| [r.x0, r.x1]).collect();
    let mut ys: Vec<usize> = a.iter().chain(b).flat_map(|r| [r.y0, r.y1]).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    let (mut inter, mut union) = (0u64, 0u64);
    for yw in ys.windows(2) {
        for xw in xs.windows(2) {
            let (x, y) = (xw[0], yw[0]);
            let in_a = a.iter().any(|r| r.contains(x, y));
            let in_b = b.iter().any(|r| r.contains(x, y));
            let area = ((xw[1] - xw[0]) * (yw[1] - yw[0])) as u64;
            if in_a && in_b {
                inter += area;
            }
            if in_a || in_b {
                union += area;
            }
        }
    }
    (inter, union)
}

/// IoU between the footprint of the positive cells of `mask` and the union
/// of `boxes`. Both empty counts as 0.
pub fn iou_discrete(mask: ArrayView2<bool>, boxes: &[BoxAnnotation], image: (usize, usize)) -> f64 {
    let grid = mask.dim();
    let pred: Vec<PixelRect> = mask
        .indexed_iter()
        .filter(|(_, &on)| on)
        .map(|((i, j), _)| cell_rect(i, j, grid, image))
        .filter(|r| !r.is_empty())
        .collect();
    let gt: Vec<PixelRect> = boxes
        .iter()
        .map(|b| box_rect(b, image))
        .filter(|r| !r.is_empty())
        .collect();
    let (inter, union) = overlap_areas(&pred, &gt);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// One evaluated `(sample, class)` pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationResult {
    pub sample_id: String,
    pub class: usize,
    pub iou: f64,
    #[serde(skip)]
    pub mask: Array2<bool>,
}

impl LocalizationResult {
    pub fn correct(&self, t: f64) -> bool {
        self.iou > t
    }
}

/// Evaluates every `(sample, class)` pair where the sample is positive for
/// the class and has ground-truth boxes of it.
pub fn evaluate(
    model: &CcgModel,
    dataset: &Dataset,
    indices: &[usize],
    threshold: f64,
    upsample: usize,
) -> Result<Vec<LocalizationResult>> {
    let per_sample: Vec<Vec<LocalizationResult>> = indices
        .par_iter()
        .map(|&i| {
            let s = dataset
                .samples
                .get(i)
                .ok_or_else(|| invalid(format!("sample index {i} out of range")))?;
            let probs = model.predict(&s.pixels, upsample)?;
            let size = (s.size(), s.size());
            Ok((0..s.num_classes())
                .filter_map(|k| {
                    let boxes: Vec<BoxAnnotation> = s.boxes_of(k).copied().collect();
                    if !s.image_labels[k] || boxes.is_empty() {
                        return None;
                    }
                    let mask = threshold_grid(probs.class(k), threshold);
                    let iou = iou_discrete(mask.view(), &boxes, size);
                    Some(LocalizationResult {
                        sample_id: s.id.clone(),
                        class: k,
                        iou,
                        mask,
                    })
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

/// Accuracy per threshold and class, with the mean over evaluable classes.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub thresholds: Vec<f64>,
    pub classes: Vec<String>,
    /// `[threshold][class]`, `None` when the class has no evaluable pairs.
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub counts: Vec<usize>,
    pub mean: Vec<Option<f64>>,
}

pub fn accuracy_table(
    results: &[LocalizationResult],
    thresholds: &[f64],
    classes: &[String],
) -> AccuracyTable {
    let mut counts = vec![0usize; classes.len()];
    for r in results {
        counts[r.class] += 1;
    }
    let accuracy: Vec<Vec<Option<f64>>> = thresholds
        .iter()
        .map(|&t| {
            (0..classes.len())
                .map(|k| {
                    (counts[k] > 0).then(|| {
                        let hits = results
                            .iter()
                            .filter(|r| r.class == k && r.correct(t))
                            .count();
                        hits as f64 / counts[k] as f64
                    })
                })
                .collect()
        })
        .collect();
    let mean = accuracy
        .iter()
        .map(|row| {
            let vals: Vec<f64> = row.iter().flatten().copied().collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    AccuracyTable {
        thresholds: thresholds.to_vec(),
        classes: classes.to_vec(),
        accuracy,
        counts,
        mean,
    }
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |a| format!("{a:.4}"))
}

impl AccuracyTable {
    /// Accuracy of `class` at threshold `t`, if both exist and are evaluable.
    pub fn get(&self, t: f64, class: usize) -> Option<f64> {
        let row = self.thresholds.iter().position(|&x| x == t)?;
        self.accuracy[row].get(class).copied().flatten()
    }

    pub fn mean_at(&self, t: f64) -> Option<f64> {
        let row = self.thresholds.iter().position(|&x| x == t)?;
        self.mean[row]
    }

    /// Columns `T,class,accuracy,n`; the mean row uses class `Mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,class,accuracy,n\n");
        let total: usize = self.counts.iter().sum();
        for (row, &t) in self.thresholds.iter().enumerate() {
            for (k, name) in self.classes.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{t},{name},{},{}",
                    fmt_acc(self.accuracy[row][k]),
                    self.counts[k]
                );
            }
            let _ = writeln!(out, "{t},Mean,{},{total}", fmt_acc(self.mean[row]));
        }
        out
    }

    /// One row per threshold, one column per class plus the mean.
    pub fn to_text(&self) -> String {
        let mut header = vec!["T(IoU)".to_string()];
        header.extend(self.classes.iter().cloned());
        header.push("Mean".into());
        let mut rows = vec![header];
        for (row, &t) in self.thresholds.iter().enumerate() {
            let mut cells = vec![format!("{t}")];
            cells.extend(self.accuracy[row].iter().map(|&a| fmt_acc(a)));
            cells.push(fmt_acc(self.mean[row]));
            rows.push(cells);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:>w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("accuracy.csv"), self.to_csv())?;
        fs::write(dir.join("accuracy.txt"), self.to_text())?;
        Ok(())
    }
}

const PRED_ALPHA: f64 = 0.4;

/// Grayscale image with predicted cells tinted red and boxes outlined in
/// green.
pub fn render_heatmap(
    sample: &ImageSample,
    mask: ArrayView2<bool>,
    boxes: &[BoxAnnotation],
) -> RgbImage {
    let intensity = sample.intensity();
    let (h, w) = intensity.dim();
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (intensity[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    let grid = mask.dim();
    for ((i, j), _) in mask.indexed_iter().filter(|(_, &on)| on) {
        let r = cell_rect(i, j, grid, (w, h));
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let p = img.get_pixel_mut(x as u32, y as u32);
                let blend = |c: u8, target: f64| {
                    ((1.0 - PRED_ALPHA) * c as f64 + PRED_ALPHA * target).round() as u8
                };
                *p = Rgb([blend(p[0], 255.0), blend(p[1], 0.0), blend(p[2], 0.0)]);
            }
        }
    }
    for b in boxes {
        let r = box_rect(b, (w, h));
        if r.is_empty() {
            continue;
        }
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                if x == r.x0 || x + 1 == r.x1 || y == r.y0 || y + 1 == r.y1 {
                    img.put_pixel(x as u32, y as u32, Rgb([0, 255, 0]));
                }
            }
        }
    }
    img
}

pub fn export_heatmap(
    sample: &ImageSample,
    mask: ArrayView2<bool>,
    boxes: &[BoxAnnotation],
    path: &Path,
) -> Result<()> {
    render_heatmap(sample, mask, boxes).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// `<sample_id>_<class>.png`, with the id's extension dropped.
pub fn heatmap_file_name(sample_id: &str, class: &str) -> String {
    let stem = Path::new(sample_id)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(sample_id);
    let clean = |s: &str| {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect::<String>()
    };
    format!("{}_{}.png", clean(stem), clean(class))
}
