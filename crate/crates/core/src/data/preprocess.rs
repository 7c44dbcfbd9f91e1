use ndarray::{Array2, Array3, ArrayView2, Axis};

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
///
/// Returns an exact copy when the size is unchanged and reproduces constant
/// inputs exactly.
pub fn resize_bilinear(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    if in_h == out_h && in_w == out_w {
        return src.to_owned();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = taps(out_h, in_h);
    let xs = taps(out_w, in_w);
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let (y0, y1, fy) = ys[oy];
        let (x0, x1, fx) = xs[ox];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Resizes a `[3, h, w]` image to `[3, size, size]` and clamps to `[0, 1]`.
pub fn preprocess(image: &Array3<f32>, size: usize) -> Array3<f32> {
    let channels = image.shape()[0];
    let mut out = Array3::<f32>::zeros((channels, size, size));
    for (c, plane) in image.axis_iter(Axis(0)).enumerate() {
        let plane = plane.mapv(f64::from);
        let resized = resize_bilinear(plane.view(), size, size);
        out.index_axis_mut(Axis(0), c)
            .zip_mut_with(&resized, |o, &v| *o = v.clamp(0.0, 1.0) as f32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn halving_averages_pairs() {
        let src = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64);
        let out = resize_bilinear(src.view(), 2, 2);
        assert!((out[[0, 0]] - (0.0 + 1.0 + 4.0 + 5.0) / 4.0).abs() < 1e-12);
        assert!((out[[1, 1]] - (10.0 + 11.0 + 14.0 + 15.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn constant_survives_upsampling() {
        let src = Array2::from_elem((3, 5), 0.25);
        let out = resize_bilinear(src.view(), 9, 15);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn preprocess_is_idempotent(seed in 0u64..1000, h in 3usize..20, w in 3usize..20, size in 2usize..12) {
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let img = Array3::from_shape_fn((3, h, w), |_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f32 / (1u64 << 31) as f32) * 1.2 - 0.1
            });
            let once = preprocess(&img, size);
            let twice = preprocess(&once, size);
            prop_assert_eq!(once, twice);
        }
    }
}
