use ndarray::{Array3, Axis};
use rand::Rng;

use super::layers::{
    Bottleneck, BottleneckCache, Conv2d, FrozenBatchNorm, Layer, LayerCache, MaxPool2d, Sequential,
};
use super::params::{GradStore, ParamStore};
use crate::data::resize_bilinear;
use crate::error::{invalid, shape_err, Result};

/// Backbone output: `[c, h, w]` with `stride` input pixels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.values.shape();
        (s[1], s[2])
    }
}

/// Bilinear up-sampling of a feature map by an integer factor.
///
/// The stride must be divisible by `factor` so the cell geometry stays in
/// whole pixels.
pub fn upsample_features(f: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor < 1 {
        return Err(invalid("up-sampling factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(f.clone());
    }
    if !f.stride.is_multiple_of(factor) {
        return Err(invalid(format!(
            "stride {} not divisible by {factor}",
            f.stride
        )));
    }
    let (c, h, w) = f.values.dim();
    let mut out = Array3::<f64>::zeros((c, h * factor, w * factor));
    for (plane, mut dst) in f.values.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        dst.assign(&resize_bilinear(plane, h * factor, w * factor));
    }
    Ok(FeatureMap {
        values: out,
        stride: f.stride / factor,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneSpec {
    /// Stride-2 3×3 conv + ReLU blocks, one per entry of `channels`.
    Tiny { channels: Vec<usize> },
    /// Bottleneck ResNet; `base_width = 64, blocks = [3, 4, 6, 3]` is ResNet-50.
    ResNet {
        base_width: usize,
        blocks: [usize; 4],
    },
}

impl BackboneSpec {
    pub fn tiny() -> Self {
        Self::Tiny {
            channels: vec![16, 32, 64, 64],
        }
    }

    pub fn resnet50() -> Self {
        Self::ResNet {
            base_width: 64,
            blocks: [3, 4, 6, 3],
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            Self::Tiny { channels } => 1 << channels.len(),
            Self::ResNet { .. } => 32,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Self::Tiny { channels } => *channels.last().unwrap_or(&3),
            Self::ResNet { base_width, .. } => base_width * 8 * 4,
        }
    }
}

#[derive(Debug, Clone)]
enum Net {
    Tiny(Sequential),
    ResNet {
        stem: Sequential,
        blocks: Vec<Bottleneck>,
    },
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub input_size: usize,
    net: Net,
}

#[derive(Debug, Clone)]
pub enum BackboneCache {
    Tiny(Vec<LayerCache>),
    ResNet {
        stem: Vec<LayerCache>,
        blocks: Vec<BottleneckCache>,
    },
}

impl Backbone {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        spec: BackboneSpec,
        input_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_size == 0 || !input_size.is_multiple_of(spec.stride()) {
            return Err(invalid(format!(
                "input size {input_size} is not a multiple of stride {}",
                spec.stride()
            )));
        }
        let net = match &spec {
            BackboneSpec::Tiny { channels } => {
                if channels.is_empty() {
                    return Err(invalid("tiny backbone needs at least one block"));
                }
                let mut layers = Vec::new();
                let mut cin = 3;
                for (i, &cout) in channels.iter().enumerate() {
                    let conv = Conv2d::new(
                        store,
                        &format!("backbone.block{i}.conv"),
                        cin,
                        cout,
                        3,
                        2,
                        1,
                        true,
                        rng,
                    );
                    layers.push(Layer::Conv(conv));
                    layers.push(Layer::Relu);
                    cin = cout;
                }
                Net::Tiny(Sequential::new(layers))
            }
            BackboneSpec::ResNet { base_width, blocks } => {
                let w = *base_width;
                let stem = Sequential::new(vec![
                    Layer::Conv(Conv2d::new(
                        store,
                        "backbone.conv1",
                        3,
                        w,
                        7,
                        2,
                        3,
                        false,
                        rng,
                    )),
                    Layer::Norm(FrozenBatchNorm::new(store, "backbone.bn1", w)),
                    Layer::Relu,
                    Layer::MaxPool(MaxPool2d {
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    }),
                ]);
                let mut list = Vec::new();
                let mut cin = w;
                for (stage, &count) in blocks.iter().enumerate() {
                    let width = w << stage;
                    let cout = width * 4;
                    for b in 0..count {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        let name = format!("backbone.layer{}.{b}", stage + 1);
                        list.push(Bottleneck::new(store, &name, cin, width, cout, stride, rng));
                        cin = cout;
                    }
                }
                Net::ResNet { stem, blocks: list }
            }
        };
        Ok(Self {
            spec,
            input_size,
            net,
        })
    }

    pub fn stride(&self) -> usize {
        self.spec.stride()
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels()
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / self.stride()
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Array3<f64>,
    ) -> Result<(FeatureMap, BackboneCache)> {
        let (c, h, w) = x.dim();
        if c != 3 || h != w || h != self.input_size {
            return Err(shape_err(format!(
                "backbone expects [3, {s}, {s}] input, got [{c}, {h}, {w}]",
                s = self.input_size
            )));
        }
        let (values, cache) = match &self.net {
            Net::Tiny(seq) => {
                let (y, c) = seq.forward(store, x);
                (y, BackboneCache::Tiny(c))
            }
            Net::ResNet { stem, blocks } => {
                let (mut y, sc) = stem.forward(store, x);
                let mut caches = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (next, c) = b.forward(store, &y);
                    caches.push(c);
                    y = next;
                }
                (
                    y,
                    BackboneCache::ResNet {
                        stem: sc,
                        blocks: caches,
                    },
                )
            }
        };
        Ok((
            FeatureMap {
                values,
                stride: self.stride(),
            },
            cache,
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BackboneCache,
        gy: &Array3<f64>,
        grads: &mut GradStore,
    ) {
        match (&self.net, cache) {
            (Net::Tiny(seq), BackboneCache::Tiny(c)) => {
                seq.backward(store, c, gy, grads);
            }
            (
                Net::ResNet { stem, blocks },
                BackboneCache::ResNet {
                    stem: sc,
                    blocks: bc,
                },
            ) => {
                let mut g = gy.clone();
                for (b, c) in blocks.iter().zip(bc).rev() {
                    g = b.backward(store, c, &g, grads);
                }
                stem.backward(store, sc, &g, grads);
            }
            _ => unreachable!("cache does not match backbone"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_backbone_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let spec = BackboneSpec::Tiny {
            channels: vec![4, 8, 8],
        };
        let bb = Backbone::new(&mut store, spec, 64, &mut rng).unwrap();
        let x = Array3::from_elem((3, 64, 64), 0.1);
        let (f, _) = bb.forward(&store, &x).unwrap();
        assert_eq!(f.values.dim(), (8, 8, 8));
        assert_eq!(f.stride, 8);
        let (again, _) = bb.forward(&store, &x).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn default_tiny_is_stride_16() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, BackboneSpec::tiny(), 64, &mut rng).unwrap();
        let (f, _) = bb.forward(&store, &Array3::zeros((3, 64, 64))).unwrap();
        assert_eq!(f.grid(), (4, 4));
        assert_eq!(f.stride * 4, 64);
    }

    #[test]
    fn rejects_wrong_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, BackboneSpec::tiny(), 64, &mut rng).unwrap();
        assert!(bb.forward(&store, &Array3::zeros((3, 64, 32))).is_err());
        assert!(bb.forward(&store, &Array3::zeros((3, 32, 32))).is_err());
    }

    #[test]
    fn small_resnet_stride_32() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let spec = BackboneSpec::ResNet {
            base_width: 2,
            blocks: [1, 1, 1, 1],
        };
        let bb = Backbone::new(&mut store, spec, 64, &mut rng).unwrap();
        let (f, _) = bb
            .forward(&store, &Array3::from_elem((3, 64, 64), 0.5))
            .unwrap();
        assert_eq!(f.values.dim(), (64, 2, 2));
        assert_eq!(f.stride, 32);
    }

    #[test]
    fn resnet50_parameter_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, BackboneSpec::resnet50(), 512, &mut rng).unwrap();
        assert_eq!(bb.out_channels(), 2048);
        assert_eq!(bb.grid_size(), 16);
        let trainable: usize = store
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum();
        // torchvision resnet50 conv weights without fc: 23,454,912
        assert_eq!(trainable, 23_454_912);
    }

    #[test]
    fn upsampling() {
        let f = FeatureMap {
            values: Array3::from_elem((2, 16, 16), 1.5),
            stride: 32,
        };
        assert_eq!(upsample_features(&f, 1).unwrap(), f);
        let up = upsample_features(&f, 2).unwrap();
        assert_eq!(up.values.dim(), (2, 32, 32));
        assert_eq!(up.stride, 16);
        assert!(up.values.iter().all(|&v| (v - 1.5).abs() < 1e-15));
        assert!(upsample_features(&f, 0).is_err());
    }
}
