//! Deterministic synthetic chest-like images with geometric "lesions".
//!
//! The background is a dim body with two brighter rectangular lung fields.
//! Each class draws one primitive kind inside a square whose side spans
//! `extent_cells` grid cells; squares are placed on cell boundaries so that
//! the recorded box can be recovered exactly at grid resolution.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BoxAnnotation, ClassVocabulary, Dataset, ImageSample};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LesionKind {
    BrightDisc,
    DarkBars,
    Ring,
    Cross,
}

impl LesionKind {
    const CYCLE: [LesionKind; 4] = [Self::BrightDisc, Self::DarkBars, Self::Ring, Self::Cross];

    pub fn name(&self) -> &'static str {
        match self {
            Self::BrightDisc => "BrightDisc",
            Self::DarkBars => "DarkBars",
            Self::Ring => "Ring",
            Self::Cross => "Cross",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionSpec {
    /// Primitive drawn for each class.
    pub kinds: Vec<LesionKind>,
    /// Side of the placement square, in grid cells.
    pub extent_cells: usize,
    /// Inset of the primitive from the placement square, in pixels.
    pub margin: usize,
}

impl LesionSpec {
    pub fn cycled(num_classes: usize) -> Self {
        Self {
            kinds: (0..num_classes).map(|k| LesionKind::CYCLE[k % 4]).collect(),
            extent_cells: 2,
            margin: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_images: usize,
    pub image_size: usize,
    /// Grid rows/cols the lesion placement snaps to.
    pub grid: usize,
    pub lesion: LesionSpec,
    pub fraction_annotated: f64,
    /// Probability that a class is present in an image.
    pub prevalence: f64,
    pub noise_std: f64,
}

impl SyntheticConfig {
    pub fn new(seed: u64, n_images: usize, num_classes: usize) -> Self {
        Self {
            seed,
            n_images,
            image_size: 64,
            grid: 4,
            lesion: LesionSpec::cycled(num_classes),
            fraction_annotated: 0.2,
            prevalence: 0.5,
            noise_std: 0.03,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.lesion.kinds.len()
    }
}

const BODY: f64 = 0.25;
const LUNG: f64 = 0.45;

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn draw(plane: &mut ndarray::Array2<f64>, kind: LesionKind, b: &BoxAnnotation, contrast: f64) {
    let (x0, y0) = (b.x as usize, b.y as usize);
    let (w, h) = (b.w as usize, b.h as usize);
    let (cx, cy) = (b.x + b.w / 2.0, b.y + b.h / 2.0);
    let r = b.w.min(b.h) / 2.0;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let d = (dx * dx + dy * dy).sqrt();
            let (lx, ly) = (x - x0, y - y0);
            let hit = match kind {
                LesionKind::BrightDisc => d <= r,
                LesionKind::DarkBars => (lx / 4) % 2 == 0,
                LesionKind::Ring => d <= r && d >= r * 0.55,
                LesionKind::Cross => {
                    let band = w / 3;
                    (lx >= band && lx < w - band) || (ly >= band && ly < h - band)
                }
            };
            if hit {
                plane[[y, x]] = match kind {
                    LesionKind::DarkBars => 0.05,
                    _ => contrast,
                };
            }
        }
    }
}

fn overlaps(a: &BoxAnnotation, b: &BoxAnnotation) -> bool {
    a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}

/// Generates `cfg.n_images` samples; identical configs give identical data.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    let c = cfg.num_classes();
    if cfg.n_images == 0 {
        return Err(invalid("n_images must be positive"));
    }
    if c == 0 {
        return Err(invalid("at least one lesion class is required"));
    }
    if cfg.grid == 0 || !cfg.image_size.is_multiple_of(cfg.grid) {
        return Err(invalid("grid must divide image size"));
    }
    if cfg.lesion.extent_cells == 0 || cfg.lesion.extent_cells > cfg.grid {
        return Err(invalid("lesion extent must fit the grid"));
    }
    if !(0.0..=1.0).contains(&cfg.fraction_annotated) {
        return Err(invalid("fraction_annotated outside [0, 1]"));
    }
    let cell = cfg.image_size / cfg.grid;
    let side = cfg.lesion.extent_cells * cell;
    if 2 * cfg.lesion.margin >= side {
        return Err(invalid("lesion margin swallows the primitive"));
    }
    let positions = cfg.grid - cfg.lesion.extent_cells + 1;
    let s = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // lung fields as fractions of the image side
    let lung_rows = (s / 8, s - s / 8);
    let lungs = [(s / 8, s / 2 - s / 16), (s / 2 + s / 16, s - s / 8)];

    let mut samples = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let lung_level = LUNG + rng.gen_range(-0.05..0.05);
        let mut plane = ndarray::Array2::from_shape_fn((s, s), |(y, x)| {
            let in_lung =
                y >= lung_rows.0 && y < lung_rows.1 && lungs.iter().any(|&(a, b)| x >= a && x < b);
            if in_lung {
                lung_level
            } else {
                BODY
            }
        });

        let mut labels = vec![false; c];
        let mut boxes: Vec<BoxAnnotation> = Vec::new();
        #[allow(clippy::needless_range_loop)]
        for k in 0..c {
            if !rng.gen_bool(cfg.prevalence.clamp(0.0, 1.0)) {
                continue;
            }
            for _ in 0..64 {
                let px = rng.gen_range(0..positions) * cell;
                let py = rng.gen_range(0..positions) * cell;
                let m = cfg.lesion.margin;
                let b = BoxAnnotation::new(
                    k,
                    (px + m) as f64,
                    (py + m) as f64,
                    (side - 2 * m) as f64,
                    (side - 2 * m) as f64,
                )?;
                if boxes.iter().any(|o| overlaps(o, &b)) {
                    continue;
                }
                let contrast = 0.9 + rng.gen_range(-0.05..0.05);
                draw(&mut plane, cfg.lesion.kinds[k], &b, contrast);
                labels[k] = true;
                boxes.push(b);
                break;
            }
        }

        for v in plane.iter_mut() {
            *v += noise.sample(&mut rng);
        }
        let pixels = Array3::from_shape_fn((3, s, s), |(_, y, x)| quantize(plane[[y, x]]));
        samples.push(ImageSample {
            id: format!("synth_{i:05}.png"),
            pixels,
            image_labels: labels,
            boxes,
            annotated: vec![false; c],
        });
    }

    let n_annotated = (cfg.fraction_annotated * cfg.n_images as f64).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_images).collect();
    order.shuffle(&mut rng);
    for &i in &order[..n_annotated] {
        let s = &mut samples[i];
        for b in &s.boxes {
            s.annotated[b.class_index] = true;
        }
    }

    let vocab = ClassVocabulary::new(cfg.lesion.kinds.iter().map(|k| k.name()))?;
    Ok(Dataset {
        vocab,
        image_size: cfg.image_size,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::project_box_to_grid;

    #[test]
    fn same_seed_same_data() {
        let cfg = SyntheticConfig::new(7, 12, 2);
        let a = generate_synthetic_dataset(&cfg).unwrap();
        let b = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic_dataset(&SyntheticConfig::new(8, 12, 2)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn annotation_fraction_extremes() {
        let mut cfg = SyntheticConfig::new(3, 20, 2);
        cfg.fraction_annotated = 0.0;
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert!(ds.samples.iter().all(|s| s.annotated.iter().all(|&a| !a)));

        cfg.fraction_annotated = 1.0;
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        for s in &ds.samples {
            for k in 0..2 {
                assert_eq!(s.annotated[k], s.image_labels[k]);
            }
        }
    }

    #[test]
    fn zero_images_is_error() {
        assert!(generate_synthetic_dataset(&SyntheticConfig::new(1, 0, 2)).is_err());
    }

    #[test]
    fn samples_are_valid_and_boxes_project() {
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(11, 40, 3)).unwrap();
        for s in &ds.samples {
            s.validate().unwrap();
            assert_eq!(s.boxes.len(), s.image_labels.iter().filter(|&&l| l).count());
            for b in &s.boxes {
                assert!(!project_box_to_grid(b, (64, 64), (4, 4)).unwrap().is_empty());
            }
        }
    }
}
