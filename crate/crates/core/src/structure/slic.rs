//! Simple linear iterative clustering on a single intensity plane.
//!
//! Grid-seeded centers (moved to the lowest-gradient pixel of their 3×3
//! neighbourhood) are refined by k-means over `(intensity, y, x)` with each
//! center only searching a `2S × 2S` window, `S = sqrt(N / m)`. Orphaned
//! fragments are absorbed by a neighbour, and the result is merged/split to
//! exactly `m` patches ordered by centroid (row-major).

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use crate::error::{invalid, Result};

/// Intensities in `[0, 1]` are scaled to `[0, 100]`, the lightness range the
/// usual compactness values are tuned for.
const INTENSITY_SCALE: f64 = 100.0;

/// A partition of the image into `count` labelled patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSet {
    pub label_map: Array2<usize>,
    pub count: usize,
}

impl PatchSet {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.label_map {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn mask(&self, label: usize) -> Array2<bool> {
        self.label_map.mapv(|l| l == label)
    }

    /// Every label in `0..count` is used and nothing else appears.
    pub fn is_partition(&self) -> bool {
        let sizes = self.sizes_checked();
        sizes.is_some_and(|s| s.iter().all(|&n| n > 0))
    }

    fn sizes_checked(&self) -> Option<Vec<usize>> {
        let mut sizes = vec![0; self.count];
        for &l in &self.label_map {
            *sizes.get_mut(l)? += 1;
        }
        Some(sizes)
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    i: f64,
    y: f64,
    x: f64,
}

fn gradient(img: &ArrayView2<f64>, y: usize, x: usize) -> f64 {
    let (h, w) = img.dim();
    let at = |yy: usize, xx: usize| img[[yy.min(h - 1), xx.min(w - 1)]];
    let dx = at(y, x + 1) - at(y, x.saturating_sub(1));
    let dy = at(y + 1, x) - at(y.saturating_sub(1), x);
    dx * dx + dy * dy
}

fn seed_centers(img: &ArrayView2<f64>, m: usize) -> Vec<Center> {
    let (h, w) = img.dim();
    let rows = ((m as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h.min(m));
    let cols = ((m as f64 / rows as f64).round() as usize).clamp(1, w);
    let mut centers = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let cy = (r as f64 + 0.5) * h as f64 / rows as f64;
            let cx = (c as f64 + 0.5) * w as f64 / cols as f64;
            let (py, px) = ((cy as usize).min(h - 1), (cx as usize).min(w - 1));
            let mut best = (gradient(img, py, px), py, px);
            let mut moved = false;
            for yy in py.saturating_sub(1)..=(py + 1).min(h - 1) {
                for xx in px.saturating_sub(1)..=(px + 1).min(w - 1) {
                    let g = gradient(img, yy, xx);
                    if g < best.0 {
                        best = (g, yy, xx);
                        moved = true;
                    }
                }
            }
            let (y, x) = if moved {
                (best.1 as f64 + 0.5, best.2 as f64 + 0.5)
            } else {
                (cy, cx)
            };
            centers.push(Center {
                i: img[[best.1, best.2]] * INTENSITY_SCALE,
                y,
                x,
            });
        }
    }
    centers
}

fn cluster(img: &ArrayView2<f64>, m: usize, compactness: f64, iterations: usize) -> Array2<usize> {
    let (h, w) = img.dim();
    let step = ((h * w) as f64 / m as f64).sqrt();
    let reach = step.ceil() as isize;
    let spatial = (compactness / step).powi(2);
    let mut centers = seed_centers(img, m);
    let mut labels = Array2::<usize>::from_elem((h, w), usize::MAX);
    let mut dist = Array2::<f64>::from_elem((h, w), f64::INFINITY);

    for _ in 0..iterations.max(1) {
        labels.fill(usize::MAX);
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cy, cx) = (c.y.floor() as isize, c.x.floor() as isize);
            let y0 = (cy - reach).max(0) as usize;
            let y1 = ((cy + reach + 1).max(0) as usize).min(h);
            let x0 = (cx - reach).max(0) as usize;
            let x1 = ((cx + reach + 1).max(0) as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let di = img[[y, x]] * INTENSITY_SCALE - c.i;
                    let dy = y as f64 + 0.5 - c.y;
                    let dx = x as f64 + 0.5 - c.x;
                    let d = di * di + (dy * dy + dx * dx) * spatial;
                    if d < dist[[y, x]] {
                        dist[[y, x]] = d;
                        labels[[y, x]] = k;
                    }
                }
            }
        }
        // pixels outside every window fall back to the nearest center
        for ((y, x), l) in labels.indexed_iter_mut() {
            if *l == usize::MAX {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                *l = (0..centers.len())
                    .min_by(|&a, &b| {
                        let da = (centers[a].y - py).powi(2) + (centers[a].x - px).powi(2);
                        let db = (centers[b].y - py).powi(2) + (centers[b].x - px).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("at least one center");
            }
        }
        let mut sums = vec![(0.0, 0.0, 0.0, 0usize); centers.len()];
        for ((y, x), &l) in labels.indexed_iter() {
            let s = &mut sums[l];
            s.0 += img[[y, x]] * INTENSITY_SCALE;
            s.1 += y as f64 + 0.5;
            s.2 += x as f64 + 0.5;
            s.3 += 1;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s.3 > 0 {
                let n = s.3 as f64;
                *c = Center {
                    i: s.0 / n,
                    y: s.1 / n,
                    x: s.2 / n,
                };
            }
        }
    }
    labels
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (0, -1), (1, 0), (0, 1)];

fn neighbours(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBOURS.iter().filter_map(move |&(dy, dx)| {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w)
            .then_some((ny as usize, nx as usize))
    })
}

/// Relabels 4-connected components; fragments below `min_size` join the
/// component adjacent to their first (scan-order) pixel.
fn enforce_connectivity(labels: &Array2<usize>, min_size: usize) -> (Array2<usize>, usize) {
    let (h, w) = labels.dim();
    let mut out = Array2::<usize>::from_elem((h, w), usize::MAX);
    let mut next = 0;
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if out[[y, x]] != usize::MAX {
                continue;
            }
            let adjacent = neighbours(y, x, h, w)
                .map(|(ny, nx)| out[[ny, nx]])
                .find(|&l| l != usize::MAX);
            let source = labels[[y, x]];
            component.clear();
            out[[y, x]] = next;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                component.push((cy, cx));
                for (ny, nx) in neighbours(cy, cx, h, w) {
                    if out[[ny, nx]] == usize::MAX && labels[[ny, nx]] == source {
                        out[[ny, nx]] = next;
                        queue.push_back((ny, nx));
                    }
                }
            }
            match adjacent {
                Some(a) if component.len() < min_size => {
                    for &(py, px) in &component {
                        out[[py, px]] = a;
                    }
                }
                _ => next += 1,
            }
        }
    }
    (out, next)
}

fn sizes(labels: &Array2<usize>, count: usize) -> Vec<usize> {
    let mut s = vec![0; count];
    for &l in labels {
        s[l] += 1;
    }
    s
}

/// Merges the smallest region into its most-bordering neighbour, or splits
/// the largest region in half along its longer extent, until `m` remain.
fn rebalance(labels: &mut Array2<usize>, mut count: usize, m: usize) -> usize {
    let (h, w) = labels.dim();
    while count > m {
        let s = sizes(labels, count);
        let small = (0..count).min_by_key(|&l| (s[l], l)).expect("non-empty");
        let mut border = vec![0usize; count];
        for ((y, x), &l) in labels.indexed_iter() {
            if l != small {
                continue;
            }
            for (ny, nx) in neighbours(y, x, h, w) {
                let o = labels[[ny, nx]];
                if o != small {
                    border[o] += 1;
                }
            }
        }
        let target = (0..count)
            .filter(|&l| l != small)
            .max_by_key(|&l| (border[l], std::cmp::Reverse(l)))
            .expect("another region exists");
        let last = count - 1;
        labels.mapv_inplace(|l| {
            let l = if l == small { target } else { l };
            if l == last {
                small
            } else {
                l
            }
        });
        count -= 1;
    }
    while count < m {
        let s = sizes(labels, count);
        let big = (0..count)
            .max_by_key(|&l| (s[l], std::cmp::Reverse(l)))
            .expect("non-empty");
        let mut pixels: Vec<(usize, usize)> = labels
            .indexed_iter()
            .filter(|(_, &l)| l == big)
            .map(|(p, _)| p)
            .collect();
        let (ymin, ymax) = pixels
            .iter()
            .fold((usize::MAX, 0), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (xmin, xmax) = pixels
            .iter()
            .fold((usize::MAX, 0), |(a, b), p| (a.min(p.1), b.max(p.1)));
        if xmax - xmin > ymax - ymin {
            pixels.sort_by_key(|&(y, x)| (x, y));
        } else {
            pixels.sort_by_key(|&(y, x)| (y, x));
        }
        for &(y, x) in &pixels[pixels.len() / 2..] {
            labels[[y, x]] = count;
        }
        count += 1;
    }
    count
}

fn order_by_centroid(labels: &mut Array2<usize>, count: usize) {
    let mut acc = vec![(0.0, 0.0, 0usize); count];
    for ((y, x), &l) in labels.indexed_iter() {
        acc[l].0 += y as f64;
        acc[l].1 += x as f64;
        acc[l].2 += 1;
    }
    let mut order: Vec<usize> = (0..count).collect();
    let centroid = |l: usize| (acc[l].0 / acc[l].2 as f64, acc[l].1 / acc[l].2 as f64);
    order.sort_by(|&a, &b| {
        let (ay, ax) = centroid(a);
        let (by, bx) = centroid(b);
        ay.total_cmp(&by).then(ax.total_cmp(&bx)).then(a.cmp(&b))
    });
    let mut rank = vec![0; count];
    for (r, &l) in order.iter().enumerate() {
        rank[l] = r;
    }
    labels.mapv_inplace(|l| rank[l]);
}

/// Partitions `intensity` into exactly `m` patches.
pub fn slic_superpixels(
    intensity: ArrayView2<f64>,
    m: usize,
    compactness: f64,
    iterations: usize,
) -> Result<PatchSet> {
    let (h, w) = intensity.dim();
    let n = h * w;
    if m == 0 || m > n {
        return Err(invalid(format!("cannot make {m} patches from {n} pixels")));
    }
    if m == 1 {
        return Ok(PatchSet {
            label_map: Array2::zeros((h, w)),
            count: 1,
        });
    }
    let raw = cluster(&intensity, m, compactness, iterations);
    let min_size = (n / m / 4).max(1);
    let (mut labels, count) = enforce_connectivity(&raw, min_size);
    let count = rebalance(&mut labels, count, m);
    order_by_centroid(&mut labels, count);
    Ok(PatchSet {
        label_map: labels,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_patch() {
        let img = Array2::from_elem((8, 8), 0.3);
        let p = slic_superpixels(img.view(), 1, 10.0, 10).unwrap();
        assert_eq!(p.count, 1);
        assert!(p.label_map.iter().all(|&l| l == 0));
    }

    #[test]
    fn uniform_image_four_quadrants() {
        // reference SLIC (scikit-image, n_segments=4) gives areas 1089/1023/1023/961
        let img = Array2::from_elem((64, 64), 0.5);
        let p = slic_superpixels(img.view(), 4, 10.0, 10).unwrap();
        assert_eq!(p.count, 4);
        for s in p.sizes() {
            assert!((s as f64 - 1024.0).abs() <= 0.2 * 1024.0, "area {s}");
        }
        // row-major centroid order
        assert_eq!(p.label_map[[0, 0]], 0);
        assert_eq!(p.label_map[[0, 63]], 1);
        assert_eq!(p.label_map[[63, 0]], 2);
        assert_eq!(p.label_map[[63, 63]], 3);
    }

    #[test]
    fn deterministic_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Array2::from_shape_simple_fn((40, 48), || rng.gen_range(0.0..1.0));
        let a = slic_superpixels(img.view(), 16, 10.0, 10).unwrap();
        let b = slic_superpixels(img.view(), 16, 10.0, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count, 16);
        assert!(a.is_partition());
    }

    #[test]
    fn too_many_patches() {
        let img = Array2::from_elem((3, 3), 0.0);
        assert!(slic_superpixels(img.view(), 10, 10.0, 5).is_err());
        assert!(slic_superpixels(img.view(), 9, 10.0, 5)
            .unwrap()
            .is_partition());
    }

    #[test]
    fn follows_intensity_edges() {
        // left half dark, right half bright: no patch should straddle the edge
        let img = Array2::from_shape_fn((32, 32), |(_, x)| if x < 16 { 0.1 } else { 0.9 });
        let p = slic_superpixels(img.view(), 4, 10.0, 10).unwrap();
        for l in 0..p.count {
            let cols: Vec<usize> = p
                .label_map
                .indexed_iter()
                .filter(|(_, &v)| v == l)
                .map(|((_, x), _)| x)
                .collect();
            let left = cols.iter().all(|&x| x < 16);
            let right = cols.iter().all(|&x| x >= 16);
            assert!(left || right);
        }
    }
}
