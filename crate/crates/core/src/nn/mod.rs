//! Feature extractor, class-aware head and their parameter registry.

mod backbone;
mod head;
mod layers;
mod params;

pub use backbone::{upsample_features, Backbone, BackboneCache, BackboneSpec, FeatureMap};
pub use head::{clamped_sigmoid, ClassHead, ClassProbMap, HeadCache, LOGIT_CLAMP};
pub use layers::{Bottleneck, Conv2d, FrozenBatchNorm, Layer, MaxPool2d, Sequential};
pub use params::{GradStore, Param, ParamId, ParamKind, ParamStore};
