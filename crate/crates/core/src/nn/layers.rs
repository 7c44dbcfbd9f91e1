//! Convolutional building blocks with explicit backward passes.
//!
//! Each layer is stateless: `forward` returns the output plus a cache, and
//! `backward` consumes that cache, accumulates parameter gradients into a
//! [`GradStore`] and returns the gradient with respect to the input.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView4, Axis, Ix1, Ix4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{dyn_shape, GradStore, ParamId, ParamKind, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Registers a He-normal initialized convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("std");
        let w = Array4::from_shape_simple_fn((out_channels, in_channels, kernel, kernel), || {
            normal.sample(rng)
        });
        let weight = store.add(format!("{name}.weight"), w.into_dyn(), ParamKind::Weight);
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Array1::<f64>::zeros(out_channels).into_dyn(),
                ParamKind::Bias,
            )
        });
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = 2 * self.padding;
        ((h + p - k) / self.stride + 1, (w + p - k) / self.stride + 1)
    }

    fn weight_matrix<'a>(&self, store: &'a ParamStore) -> ndarray::ArrayView2<'a, f64> {
        let w: ArrayView4<f64> = store
            .get(self.weight)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight");
        w.into_shape_with_order((
            self.out_channels,
            self.in_channels * self.kernel * self.kernel,
        ))
        .expect("contiguous conv weight")
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.padding == 0 {
            return x
                .to_owned()
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
        }
        let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.padding == 0 {
            return cols
                .to_owned()
                .into_shape_with_order((c, h, w))
                .expect("contiguous");
        }
        let mut x = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let src = cols.row((ci * k + ky) * k + kx);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                x[[ci, iy as usize, ix as usize]] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let cols = self.im2col(x);
        let mut y = self.weight_matrix(store).dot(&cols);
        if let Some(b) = self.bias {
            let b = store
                .get(b)
                .view()
                .into_dimensionality::<Ix1>()
                .expect("bias");
            y += &b.insert_axis(Axis(1));
        }
        let y = y
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("conv output");
        (
            y,
            ConvCache {
                cols,
                input_hw: (h, w),
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvCache,
        gy: &Array3<f64>,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let (h, w) = cache.input_hw;
        let (co, oh, ow) = gy.dim();
        let gy = gy
            .view()
            .into_shape_with_order((co, oh * ow))
            .expect("contiguous grad");
        let gw = gy.dot(&cache.cols.t());
        grads.accumulate(
            self.weight,
            gw.into_shape_with_order(dyn_shape(&[co, self.in_channels, self.kernel, self.kernel]))
                .expect("weight grad")
                .view(),
        );
        if let Some(b) = self.bias {
            grads.accumulate(b, gy.sum_axis(Axis(1)).into_dyn().view());
        }
        let gcols = self.weight_matrix(store).t().dot(&gy);
        self.col2im(&gcols, self.in_channels, h, w)
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    input_hw: (usize, usize),
}

/// Per-channel affine map with fixed statistics (inference-mode batch norm).
#[derive(Debug, Clone)]
pub struct FrozenBatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl FrozenBatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let scale = store.add(
            format!("{name}.scale"),
            Array1::<f64>::ones(channels).into_dyn(),
            ParamKind::Frozen,
        );
        let shift = store.add(
            format!("{name}.shift"),
            Array1::<f64>::zeros(channels).into_dyn(),
            ParamKind::Frozen,
        );
        Self { scale, shift }
    }

    fn vectors<'a>(
        &self,
        store: &'a ParamStore,
    ) -> (ndarray::ArrayView1<'a, f64>, ndarray::ArrayView1<'a, f64>) {
        let a = store
            .get(self.scale)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bn scale");
        let b = store
            .get(self.shift)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bn shift");
        (a, b)
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> Array3<f64> {
        let (a, b) = self.vectors(store);
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            plane.mapv_inplace(|v| v * a[c] + b[c]);
        }
        y
    }

    pub fn backward(&self, store: &ParamStore, gy: &Array3<f64>) -> Array3<f64> {
        let (a, _) = self.vectors(store);
        let mut gx = gy.clone();
        for (c, mut plane) in gx.axis_iter_mut(Axis(0)).enumerate() {
            plane.mapv_inplace(|v| v * a[c]);
        }
        gx
    }
}

/// 3×3, stride 2, padding 1 max pooling (ResNet stem).
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = 2 * self.padding;
        (
            (h + p - self.kernel) / self.stride + 1,
            (w + p - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Vec<usize>) {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let mut y = Array3::<f64>::zeros((c, oh, ow));
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let v = x[[ci, iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                at = (ci * h + iy as usize) * w + ix as usize;
                            }
                        }
                    }
                    y[[ci, oy, ox]] = best;
                    argmax.push(at);
                }
            }
        }
        (y, argmax)
    }

    pub fn backward(
        &self,
        argmax: &[usize],
        input_dim: (usize, usize, usize),
        gy: &Array3<f64>,
    ) -> Array3<f64> {
        let mut gx = Array3::<f64>::zeros(input_dim);
        let flat = gx.as_slice_mut().expect("contiguous");
        for (g, &at) in gy.iter().zip(argmax) {
            flat[at] += g;
        }
        gx
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Norm(FrozenBatchNorm),
    Relu,
    MaxPool(MaxPool2d),
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv(ConvCache),
    Norm,
    Relu(Array3<f64>),
    MaxPool(Vec<usize>, (usize, usize, usize)),
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu_backward(output: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
    let mut g = gy.clone();
    g.zip_mut_with(output, |g, &y| {
        if y <= 0.0 {
            *g = 0.0
        }
    });
    g
}

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, Vec<LayerCache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Conv(c) => {
                    let (y, cache) = c.forward(store, &cur);
                    (y, LayerCache::Conv(cache))
                }
                Layer::Norm(n) => (n.forward(store, &cur), LayerCache::Norm),
                Layer::Relu => {
                    let y = relu(&cur);
                    (y.clone(), LayerCache::Relu(y))
                }
                Layer::MaxPool(p) => {
                    let dim = cur.dim();
                    let (y, idx) = p.forward(&cur);
                    (y, LayerCache::MaxPool(idx, dim))
                }
            };
            caches.push(cache);
            cur = next;
        }
        (cur, caches)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        caches: &[LayerCache],
        gy: &Array3<f64>,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let mut g = gy.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            g = match (layer, cache) {
                (Layer::Conv(c), LayerCache::Conv(cc)) => c.backward(store, cc, &g, grads),
                (Layer::Norm(n), LayerCache::Norm) => n.backward(store, &g),
                (Layer::Relu, LayerCache::Relu(y)) => relu_backward(y, &g),
                (Layer::MaxPool(p), LayerCache::MaxPool(idx, dim)) => p.backward(idx, *dim, &g),
                _ => unreachable!("cache does not match layer"),
            };
        }
        g
    }
}

/// ResNet bottleneck: 1×1 → 3×3 (strided) → 1×1 with a residual connection.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub main: Sequential,
    pub shortcut: Option<Sequential>,
}

#[derive(Debug, Clone)]
pub struct BottleneckCache {
    main: Vec<LayerCache>,
    shortcut: Option<Vec<LayerCache>>,
    output: Array3<f64>,
}

impl Bottleneck {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        width: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv = |store: &mut ParamStore, n: &str, i, o, k, s, p, rng: &mut R| {
            Layer::Conv(Conv2d::new(
                store,
                &format!("{name}.{n}"),
                i,
                o,
                k,
                s,
                p,
                false,
                rng,
            ))
        };
        let c1 = conv(store, "conv1", in_channels, width, 1, 1, 0, rng);
        let n1 = Layer::Norm(FrozenBatchNorm::new(store, &format!("{name}.bn1"), width));
        let c2 = conv(store, "conv2", width, width, 3, stride, 1, rng);
        let n2 = Layer::Norm(FrozenBatchNorm::new(store, &format!("{name}.bn2"), width));
        let c3 = conv(store, "conv3", width, out_channels, 1, 1, 0, rng);
        let n3 = Layer::Norm(FrozenBatchNorm::new(
            store,
            &format!("{name}.bn3"),
            out_channels,
        ));
        let main = Sequential::new(vec![c1, n1, Layer::Relu, c2, n2, Layer::Relu, c3, n3]);
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| {
            let c = conv(
                store,
                "downsample.conv",
                in_channels,
                out_channels,
                1,
                stride,
                0,
                rng,
            );
            let n = Layer::Norm(FrozenBatchNorm::new(
                store,
                &format!("{name}.downsample.bn"),
                out_channels,
            ));
            Sequential::new(vec![c, n])
        });
        Self { main, shortcut }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, BottleneckCache) {
        let (a, main) = self.main.forward(store, x);
        let (skip, shortcut) = match &self.shortcut {
            Some(s) => {
                let (y, c) = s.forward(store, x);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let output = relu(&(a + skip));
        (
            output.clone(),
            BottleneckCache {
                main,
                shortcut,
                output,
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BottleneckCache,
        gy: &Array3<f64>,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let g = relu_backward(&cache.output, gy);
        let mut gx = self.main.backward(store, &cache.main, &g, grads);
        match (&self.shortcut, &cache.shortcut) {
            (Some(s), Some(c)) => gx += &s.backward(store, c, &g, grads),
            _ => gx += &g,
        }
        gx
    }
}
