//! Reader and writer for NIH-style dataset directories.
//!
//! Layout: a directory of image files plus two CSVs with a header row.
//!
//! * labels CSV: `Image Index, Finding Labels, ...` with labels separated by
//!   `|` and `No Finding` meaning an all-zero label vector. Extra columns are
//!   ignored, so the public `Data_Entry_2017.csv` reads as-is.
//! * box CSV: `Image Index, Finding Label, x, y, w, h[, Annotated]` in
//!   original-image pixels. The optional seventh column (`0`/`1`, empty means
//!   `1`) marks boxes that are known but withheld from training supervision.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use log::warn;
use ndarray::Array3;
use rayon::prelude::*;

use super::{preprocess, BoxAnnotation, ClassVocabulary, Dataset, ImageSample, NO_FINDING};
use crate::error::{Error, Result};

/// File names inside a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub image_dir: PathBuf,
    pub labels_csv: PathBuf,
    pub bbox_csv: Option<PathBuf>,
    /// Optional one-name-per-line class list; NIH-14 when absent.
    pub classes_txt: Option<PathBuf>,
}

impl DatasetFiles {
    pub const IMAGES: &'static str = "images";
    pub const LABELS: &'static str = "Data_Entry.csv";
    pub const BOXES: &'static str = "BBox_List.csv";
    pub const CLASSES: &'static str = "classes.txt";

    /// Standard layout under `dir`; the box CSV and class list are optional.
    pub fn in_dir(dir: &Path) -> Self {
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        Self {
            image_dir: dir.join(Self::IMAGES),
            labels_csv: dir.join(Self::LABELS),
            bbox_csv: opt(Self::BOXES),
            classes_txt: opt(Self::CLASSES),
        }
    }

    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        match &self.classes_txt {
            None => Ok(ClassVocabulary::nih()),
            Some(p) => {
                let text = fs::read_to_string(p)?;
                ClassVocabulary::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
            }
        }
    }

    pub fn load(&self, image_size: usize) -> Result<Dataset> {
        load_dataset(
            &self.image_dir,
            &self.labels_csv,
            self.bbox_csv.as_deref(),
            self.vocabulary()?,
            image_size,
        )
    }
}

struct BoxRow {
    line: u64,
    class_index: usize,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    annotated: bool,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_labels(row: usize, field: &str, vocab: &ClassVocabulary) -> Result<Vec<bool>> {
    let mut labels = vec![false; vocab.len()];
    for label in field.split('|').map(str::trim).filter(|l| !l.is_empty()) {
        if label == NO_FINDING {
            continue;
        }
        let k = vocab.index_of(label).ok_or_else(|| Error::UnknownLabel {
            row,
            label: label.to_string(),
        })?;
        labels[k] = true;
    }
    Ok(labels)
}

fn read_box_rows(path: &Path, vocab: &ClassVocabulary) -> Result<HashMap<String, Vec<BoxRow>>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let mut out: HashMap<String, Vec<BoxRow>> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        let id = record.get(0).unwrap_or("").trim().to_string();
        let label = record.get(1).unwrap_or("").trim();
        let class_index = vocab.index_of(label).ok_or_else(|| Error::UnknownLabel {
            row: line as usize,
            label: label.to_string(),
        })?;
        let num = |i: usize| -> Option<f64> { record.get(i)?.trim().parse::<f64>().ok() };
        let (Some(x), Some(y), Some(w), Some(h)) = (num(2), num(3), num(4), num(5)) else {
            warn!("box row {line}: unparseable coordinates, row rejected");
            continue;
        };
        let annotated = match record.get(6).map(str::trim) {
            None | Some("") | Some("1") => true,
            Some("0") => false,
            Some(other) => {
                warn!("box row {line}: bad annotated flag {other:?}, row rejected");
                continue;
            }
        };
        out.entry(id).or_default().push(BoxRow {
            line,
            class_index,
            x,
            y,
            w,
            h,
            annotated,
        });
    }
    Ok(out)
}

fn decode_rgb(img: &DynamicImage) -> Array3<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let rgb = img.to_rgb16();
            Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f32 / 65535.0
            })
        }
        _ => {
            let rgb = img.to_rgb8();
            Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
            })
        }
    }
}

/// Loads, resizes and labels every image listed in `labels_csv`.
///
/// Sample order follows the labels CSV. Box rows outside the source image,
/// with degenerate size, or naming a class the image is not labelled with
/// are rejected with a warning.
pub fn load_dataset(
    image_dir: &Path,
    labels_csv: &Path,
    bbox_csv: Option<&Path>,
    vocab: ClassVocabulary,
    image_size: usize,
) -> Result<Dataset> {
    require(image_dir)?;
    require(labels_csv)?;
    if let Some(p) = bbox_csv {
        require(p)?;
    }

    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(labels_csv)?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record) as usize;
        let id = record.get(0).unwrap_or("").trim().to_string();
        let labels = parse_labels(line, record.get(1).unwrap_or(""), &vocab)?;
        rows.push((id, labels));
    }

    let mut box_rows = match bbox_csv {
        Some(p) => read_box_rows(p, &vocab)?,
        None => HashMap::new(),
    };
    for id in box_rows.keys() {
        if !rows.iter().any(|(rid, _)| rid == id) {
            warn!("box rows for unknown image {id:?} ignored");
        }
    }
    let jobs: Vec<_> = rows
        .into_iter()
        .map(|(id, labels)| {
            let boxes = box_rows.remove(&id).unwrap_or_default();
            (id, labels, boxes)
        })
        .collect();

    let samples = jobs
        .into_par_iter()
        .map(|(id, labels, rows)| {
            let path = image_dir.join(&id);
            require(&path)?;
            let img = image::open(&path)?;
            let (src_w, src_h) = (img.width() as f64, img.height() as f64);
            let pixels = preprocess(&decode_rgb(&img), image_size);
            let (sx, sy) = (image_size as f64 / src_w, image_size as f64 / src_h);

            let mut boxes = Vec::new();
            let mut annotated = vec![false; labels.len()];
            for r in rows {
                let b = BoxAnnotation {
                    class_index: r.class_index,
                    x: r.x,
                    y: r.y,
                    w: r.w,
                    h: r.h,
                };
                if b.validate().is_err() || !b.fits_within(src_w, src_h) {
                    warn!(
                        "box row {}: {b:?} outside {src_w}x{src_h} image {id}, row rejected",
                        r.line
                    );
                    continue;
                }
                if !labels[r.class_index] {
                    warn!(
                        "box row {}: class not among labels of {id}, row rejected",
                        r.line
                    );
                    continue;
                }
                annotated[r.class_index] |= r.annotated;
                boxes.push(b.scaled(sx, sy));
            }
            Ok(ImageSample {
                id,
                pixels,
                image_labels: labels,
                boxes,
                annotated,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        vocab,
        image_size,
        samples,
    })
}

/// Writes `dataset` in the layout read by [`DatasetFiles::in_dir`]: PNGs
/// under `images/`, both CSVs and `classes.txt`.
///
/// Pixels are quantized to 8 bits; datasets whose values are already
/// multiples of 1/255 round-trip exactly.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let image_dir = dir.join(DatasetFiles::IMAGES);
    fs::create_dir_all(&image_dir)?;

    dataset.samples.par_iter().try_for_each(|s| -> Result<()> {
        let (_, h, w) = s.pixels.dim();
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                (s.pixels[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        });
        img.save_with_format(image_dir.join(&s.id), image::ImageFormat::Png)?;
        Ok(())
    })?;

    let mut labels = csv::Writer::from_path(dir.join(DatasetFiles::LABELS))?;
    labels.write_record(["Image Index", "Finding Labels"])?;
    for s in &dataset.samples {
        let names: Vec<&str> = (0..s.num_classes())
            .filter(|&k| s.image_labels[k])
            .map(|k| dataset.vocab.name(k))
            .collect();
        let field = if names.is_empty() {
            NO_FINDING.to_string()
        } else {
            names.join("|")
        };
        labels.write_record([s.id.as_str(), field.as_str()])?;
    }
    labels.flush()?;

    let mut boxes = csv::Writer::from_path(dir.join(DatasetFiles::BOXES))?;
    boxes.write_record([
        "Image Index",
        "Finding Label",
        "Bbox [x",
        "y",
        "w",
        "h]",
        "Annotated",
    ])?;
    for s in &dataset.samples {
        for b in &s.boxes {
            let flag = if s.annotated[b.class_index] { "1" } else { "0" };
            boxes.write_record([
                s.id.clone(),
                dataset.vocab.name(b.class_index).to_string(),
                b.x.to_string(),
                b.y.to_string(),
                b.w.to_string(),
                b.h.to_string(),
                flag.to_string(),
            ])?;
        }
    }
    boxes.flush()?;

    let classes: String = dataset
        .vocab
        .names()
        .iter()
        .map(|n| format!("{n}\n"))
        .collect();
    fs::write(dir.join(DatasetFiles::CLASSES), classes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(dir: &Path, name: &str, w: u32, h: u32) {
        let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([((x + y) % 256) as u8]));
        img.save(dir.join(name)).unwrap();
    }

    fn fixture(labels: &str, boxes: Option<&str>) -> (tempfile::TempDir, Result<Dataset>) {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        fs::create_dir_all(&images).unwrap();
        write_png(&images, "img1.png", 1024, 1024);
        write_png(&images, "img2.png", 1024, 1024);
        fs::write(dir.path().join("labels.csv"), labels).unwrap();
        let bbox = boxes.map(|b| {
            let p = dir.path().join("boxes.csv");
            fs::write(&p, b).unwrap();
            p
        });
        let ds = load_dataset(
            &images,
            &dir.path().join("labels.csv"),
            bbox.as_deref(),
            ClassVocabulary::nih(),
            512,
        );
        (dir, ds)
    }

    #[test]
    fn label_mapping() {
        let (_d, ds) = fixture(
            "Image Index,Finding Labels\nimg1.png,Cardiomegaly|Effusion\nimg2.png,No Finding\n",
            None,
        );
        let ds = ds.unwrap();
        assert_eq!(ds.samples[0].image_labels.iter().filter(|&&b| b).count(), 2);
        assert!(ds.samples[0].image_labels[1] && ds.samples[0].image_labels[2]);
        assert!(ds.samples[1].image_labels.iter().all(|&b| !b));
        assert_eq!(ds.samples[0].pixels.shape(), &[3, 512, 512]);
    }

    #[test]
    fn boxes_scaled_to_target_size() {
        let (_d, ds) = fixture(
            "Image Index,Finding Labels\nimg1.png,Mass\nimg2.png,No Finding\n",
            Some("Image Index,Finding Label,Bbox [x,y,w,h],,,\nimg1.png,Mass,100,100,50,50,,,\n"),
        );
        let s = &ds.unwrap().samples[0];
        assert_eq!(s.boxes.len(), 1);
        let b = s.boxes[0];
        assert_eq!((b.x, b.y, b.w, b.h), (50.0, 50.0, 25.0, 25.0));
        assert!(s.annotated[4]);
        s.validate().unwrap();
    }

    #[test]
    fn unknown_label_reports_row() {
        let (_d, ds) = fixture(
            "Image Index,Finding Labels\nimg1.png,Mass\nimg2.png,Dragonpox\n",
            None,
        );
        match ds {
            Err(Error::UnknownLabel { row, label }) => {
                assert_eq!(row, 3);
                assert_eq!(label, "Dragonpox");
            }
            other => panic!("expected unknown label error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let (_d, ds) = fixture(
            "Image Index,Finding Labels\nimg1.png,Mass\nimg2.png,No Finding\n",
            Some("Image Index,Finding Label,x,y,w,h\nimg1.png,Mass,1000,100,50,50\n"),
        );
        let s = &ds.unwrap().samples[0];
        assert!(s.boxes.is_empty());
        assert!(!s.annotated[4]);
    }

    #[test]
    fn missing_file_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let r = load_dataset(
            dir.path(),
            &dir.path().join("nope.csv"),
            None,
            ClassVocabulary::nih(),
            64,
        );
        assert!(matches!(r, Err(Error::MissingFile(_))));
    }
}
