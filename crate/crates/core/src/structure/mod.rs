//! Intra-image structure: superpixel patches, patch hash codes and the
//! structure graph they induce between images of a batch.

mod cache;
mod graph;
mod hash;
mod slic;

pub use cache::{PatchCache, StructureParams};
pub use graph::{
    aggregate_patch_graph, hamming, intra_image_loss, patch_graph, PairInputs, PatchGraph,
    HASH_BITS,
};
pub use hash::{hash_patches, patch_hash, PatchHashes};
pub use slic::{slic_superpixels, PatchSet};
