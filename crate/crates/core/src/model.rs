//! The full network: backbone, class-aware head and the parameters of the
//! three relational branches, all living in one [`ParamStore`].

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{
    upsample_features, Backbone, BackboneCache, BackboneSpec, ClassHead, ClassProbMap, FeatureMap,
    GradStore, HeadCache, ParamId, ParamKind, ParamStore,
};
use crate::reasoning::block_layout;

/// Per-channel input standardization (ImageNet statistics).
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const G_NAME: &str = "relation.G";
pub const IK_WEIGHT: &str = "structure.W_l.weight";
pub const IK_BIAS: &str = "structure.W_l.bias";
pub const KR_AFFINITY: &str = "reasoning.W_P";
pub const KR_WEIGHT: &str = "reasoning.W_l.weight";
pub const KR_BIAS: &str = "reasoning.W_l.bias";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub input_size: usize,
    pub num_classes: usize,
    pub head_hidden: usize,
    pub head_out_bias: f64,
    /// Size `n` of the relation graph, the training batch size.
    pub batch_size: usize,
    /// Superpixel patches per image.
    pub patches: usize,
    /// Feature blocks per enhanced map.
    pub kr_blocks: usize,
}

impl ModelConfig {
    pub fn from_train(cfg: &TrainConfig, num_classes: usize) -> Self {
        Self {
            backbone: cfg.backbone.spec(),
            input_size: cfg.input_size,
            num_classes,
            head_hidden: cfg.head_hidden,
            head_out_bias: cfg.head_out_bias,
            batch_size: cfg.batch_size,
            patches: cfg.patches,
            kr_blocks: cfg.kr_blocks,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct RelationalIds {
    g: ParamId,
    ik_w: ParamId,
    ik_b: ParamId,
    w_p: ParamId,
    kr_w: ParamId,
    kr_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct CcgModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    head: ClassHead,
    ids: RelationalIds,
}

/// Everything one image's forward pass leaves behind for backward.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub features: FeatureMap,
    pub probs: ClassProbMap,
    backbone: BackboneCache,
    head: HeadCache,
}

impl CcgModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.num_classes == 0 || config.batch_size == 0 || config.patches == 0 {
            return Err(invalid(
                "model needs at least one class, batch slot and patch",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(
            &mut store,
            config.backbone.clone(),
            config.input_size,
            &mut rng,
        )?;
        let grid = backbone.grid_size();
        block_layout(config.kr_blocks, grid, grid)?;
        let c = backbone.out_channels();
        let head = ClassHead::new(
            &mut store,
            c,
            config.head_hidden,
            config.num_classes,
            config.head_out_bias,
            &mut rng,
        );
        let n = config.batch_size;
        let (m2, b2) = (
            config.patches * config.patches,
            config.kr_blocks * config.kr_blocks,
        );
        let rel = ParamKind::Relational;
        let ids = RelationalIds {
            g: store.add(
                G_NAME,
                Array2::from_elem((n, n), 1.0 / n as f64).into_dyn(),
                rel,
            ),
            ik_w: store.add(IK_WEIGHT, Array1::<f64>::zeros(m2).into_dyn(), rel),
            ik_b: store.add(IK_BIAS, Array1::<f64>::zeros(1).into_dyn(), rel),
            w_p: store.add(KR_AFFINITY, Array2::<f64>::eye(c).into_dyn(), rel),
            kr_w: store.add(KR_WEIGHT, Array1::<f64>::zeros(b2).into_dyn(), rel),
            kr_b: store.add(KR_BIAS, Array1::<f64>::zeros(1).into_dyn(), rel),
        };
        Ok(Self {
            config,
            store,
            backbone,
            head,
            ids,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.backbone.grid_size()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.out_channels()
    }

    /// `[3, S, S]` pixels in `[0, 1]` to the standardized network input.
    pub fn standardize(&self, pixels: &Array3<f32>) -> Result<Array3<f64>> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h != self.config.input_size || w != self.config.input_size {
            return Err(shape_err(format!(
                "expected [3, {s}, {s}] pixels, got [{c}, {h}, {w}]",
                s = self.config.input_size
            )));
        }
        Ok(Array3::from_shape_fn((c, h, w), |(k, y, x)| {
            (pixels[[k, y, x]] as f64 - INPUT_MEAN[k]) / INPUT_STD[k]
        }))
    }

    pub fn forward(&self, pixels: &Array3<f32>) -> Result<SampleForward> {
        let x = self.standardize(pixels)?;
        self.forward_input(&x)
    }

    /// Forward from an already standardized input.
    pub fn forward_input(&self, x: &Array3<f64>) -> Result<SampleForward> {
        let (features, backbone) = self.backbone.forward(&self.store, x)?;
        let (probs, head) = self.head.forward(&self.store, &features)?;
        Ok(SampleForward {
            features,
            probs,
            backbone,
            head,
        })
    }

    /// Inference, optionally up-sampling the features before the head.
    pub fn predict(&self, pixels: &Array3<f32>, upsample: usize) -> Result<ClassProbMap> {
        let x = self.standardize(pixels)?;
        let (features, _) = self.backbone.forward(&self.store, &x)?;
        let features = if upsample == 1 {
            features
        } else {
            upsample_features(&features, upsample)?
        };
        Ok(self.head.forward(&self.store, &features)?.0)
    }

    /// Back-propagates `∂L/∂probs` and a direct `∂L/∂features` term into
    /// the backbone and head parameters.
    pub fn backward(
        &self,
        fwd: &SampleForward,
        grad_probs: &Array3<f64>,
        grad_features: Option<&Array3<f64>>,
        grads: &mut GradStore,
    ) {
        let mut g = self
            .head
            .backward(&self.store, &fwd.head, grad_probs, grads);
        if let Some(extra) = grad_features {
            g += extra;
        }
        self.backbone
            .backward(&self.store, &fwd.backbone, &g, grads);
    }

    fn matrix(&self, id: ParamId) -> ArrayView2<'_, f64> {
        self.store
            .get(id)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("stored as a matrix")
    }

    fn vector(&self, id: ParamId) -> ArrayView1<'_, f64> {
        self.store
            .get(id)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("stored as a vector")
    }

    pub fn relation_graph(&self) -> ArrayView2<'_, f64> {
        self.matrix(self.ids.g)
    }

    pub fn ik_weight(&self) -> ArrayView1<'_, f64> {
        self.vector(self.ids.ik_w)
    }

    pub fn ik_bias(&self) -> f64 {
        self.store.get(self.ids.ik_b)[[0]]
    }

    pub fn kr_affinity(&self) -> ArrayView2<'_, f64> {
        self.matrix(self.ids.w_p)
    }

    pub fn kr_weight(&self) -> ArrayView1<'_, f64> {
        self.vector(self.ids.kr_w)
    }

    pub fn kr_bias(&self) -> f64 {
        self.store.get(self.ids.kr_b)[[0]]
    }

    pub fn relation_graph_id(&self) -> ParamId {
        self.ids.g
    }

    pub fn ik_ids(&self) -> (ParamId, ParamId) {
        (self.ids.ik_w, self.ids.ik_b)
    }

    pub fn kr_ids(&self) -> (ParamId, ParamId, ParamId) {
        (self.ids.w_p, self.ids.kr_w, self.ids.kr_b)
    }

    /// Copies every parameter of `other` whose name starts with `prefix`
    /// and whose shape matches; returns how many were copied.
    pub fn copy_params_from(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut copied = 0;
        for p in self.store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            if let Some(src) = other.id(&p.name).map(|id| other.get(id)) {
                if src.shape() == p.value.shape() {
                    p.value.assign(src);
                    copied += 1;
                }
            }
        }
        copied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(c: usize) -> ModelConfig {
        ModelConfig::from_train(&TrainConfig::default(), c)
    }

    #[test]
    fn shapes_and_init() {
        let m = CcgModel::new(tiny(2), 0).unwrap();
        assert_eq!(m.grid_size(), 4);
        assert_eq!(m.relation_graph(), Array2::from_elem((2, 2), 0.5));
        assert_eq!(m.kr_affinity(), Array2::<f64>::eye(64));
        assert!(m.ik_weight().iter().all(|&w| w == 0.0) && m.ik_weight().len() == 256);
        let px = Array3::from_elem((3, 64, 64), 0.5f32);
        let f = m.forward(&px).unwrap();
        assert_eq!(f.features.values.dim(), (64, 4, 4));
        assert_eq!(f.probs.probs.dim(), (2, 4, 4));
        assert_eq!(m.predict(&px, 2).unwrap().probs.dim(), (2, 8, 8));
        assert!(m.forward(&Array3::zeros((3, 32, 32))).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = CcgModel::new(tiny(3), 5).unwrap();
        let b = CcgModel::new(tiny(3), 5).unwrap();
        assert_eq!(a.store, b.store);
        let c = CcgModel::new(tiny(3), 6).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn kr_blocks_must_tile() {
        let mut cfg = tiny(2);
        cfg.kr_blocks = 3;
        assert!(CcgModel::new(cfg, 0).is_err());
    }
}
