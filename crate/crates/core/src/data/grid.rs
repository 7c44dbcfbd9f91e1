use ndarray::{Array3, ArrayView2};

use super::{BoxAnnotation, ImageSample};
use crate::error::{invalid, Result};

/// Per-class binary grid targets `[C, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLabelMap {
    pub labels: Array3<u8>,
}

impl GridLabelMap {
    pub fn grid_size(&self) -> (usize, usize) {
        let s = self.labels.shape();
        (s[1], s[2])
    }

    pub fn class(&self, k: usize) -> ArrayView2<'_, u8> {
        self.labels.index_axis(ndarray::Axis(0), k)
    }
}

/// Grid cells `(row, col)` whose footprint overlaps `bbox` with positive area.
///
/// `image_size` is `(width, height)`, `grid_size` is `(rows, cols)`. Cells
/// that only touch the box along an edge are excluded.
pub fn project_box_to_grid(
    bbox: &BoxAnnotation,
    image_size: (usize, usize),
    grid_size: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    bbox.validate()?;
    let (rows, cols) = grid_size;
    if rows == 0 || cols == 0 || image_size.0 == 0 || image_size.1 == 0 {
        return Err(invalid("empty grid or image"));
    }
    let cell_w = image_size.0 as f64 / cols as f64;
    let cell_h = image_size.1 as f64 / rows as f64;
    let span = |lo: f64, len: f64, cell: f64, n: usize| {
        let start = ((lo / cell).floor().max(0.0) as usize).min(n);
        let end = (((lo + len) / cell).ceil().max(0.0) as usize).min(n);
        start..end
    };
    let row_range = span(bbox.y, bbox.h, cell_h, rows);
    let col_range = span(bbox.x, bbox.w, cell_w, cols);
    Ok(row_range
        .flat_map(|i| col_range.clone().map(move |j| (i, j)))
        .collect())
}

/// Union of every box's projection, per class.
pub fn make_grid_labels(sample: &ImageSample, grid_size: (usize, usize)) -> Result<GridLabelMap> {
    let size = sample.size();
    let mut labels = Array3::<u8>::zeros((sample.num_classes(), grid_size.0, grid_size.1));
    for b in &sample.boxes {
        for (i, j) in project_box_to_grid(b, (size, size), grid_size)? {
            labels[[b.class_index, i, j]] = 1;
        }
    }
    Ok(GridLabelMap { labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoxAnnotation {
        BoxAnnotation::new(0, x, y, w, h).unwrap()
    }

    #[test]
    fn full_cover() {
        let cells = project_box_to_grid(&bx(0.0, 0.0, 512.0, 512.0), (512, 512), (16, 16)).unwrap();
        assert_eq!(cells.len(), 256);
    }

    #[test]
    fn single_cell() {
        let cells = project_box_to_grid(&bx(0.0, 0.0, 32.0, 32.0), (512, 512), (16, 16)).unwrap();
        assert_eq!(cells, vec![(0, 0)]);
    }

    #[test]
    fn two_by_two() {
        let cells = project_box_to_grid(&bx(0.0, 0.0, 64.0, 64.0), (512, 512), (16, 16)).unwrap();
        assert_eq!(cells, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn edge_touching_excluded() {
        // right edge at x=32 touches cell column 1 only along its boundary
        let cells = project_box_to_grid(&bx(31.5, 0.0, 0.5, 1.0), (512, 512), (16, 16)).unwrap();
        assert_eq!(cells, vec![(0, 0)]);
    }

    #[test]
    fn degenerate_box_is_error() {
        let b = BoxAnnotation {
            class_index: 0,
            x: 0.0,
            y: 0.0,
            w: 0.0,
            h: 3.0,
        };
        assert!(project_box_to_grid(&b, (64, 64), (4, 4)).is_err());
    }

    fn sample_with(boxes: Vec<BoxAnnotation>) -> ImageSample {
        ImageSample {
            id: "s".into(),
            pixels: Array3::zeros((3, 64, 64)),
            image_labels: vec![true, true],
            annotated: vec![false, false],
            boxes,
        }
    }

    #[test]
    fn grid_labels_union_and_channels() {
        let empty = make_grid_labels(&sample_with(vec![]), (4, 4)).unwrap();
        assert_eq!(empty.labels.sum(), 0);

        let a = BoxAnnotation::new(0, 0.0, 0.0, 32.0, 32.0).unwrap();
        let b = BoxAnnotation::new(0, 16.0, 16.0, 32.0, 16.0).unwrap();
        let m = make_grid_labels(&sample_with(vec![a, b]), (4, 4)).unwrap();
        // {(0,0),(0,1),(1,0),(1,1)} ∪ {(1,1),(1,2)}
        assert_eq!(m.labels.sum(), 5);
        assert_eq!(m.labels[[0, 1, 2]], 1);
        assert_eq!(m.class(1).sum(), 0);

        let c = BoxAnnotation::new(1, 48.0, 48.0, 16.0, 16.0).unwrap();
        let m = make_grid_labels(&sample_with(vec![a, c]), (4, 4)).unwrap();
        assert_eq!(m.class(0).sum(), 4);
        assert_eq!(m.class(1).sum(), 1);
        assert_eq!(m.labels[[1, 3, 3]], 1);
    }
}
