//! Encoder-decoder segmentation network.
//!
//! Point embedding, then per stage a stack of transformer blocks over
//! stratified window pairs, with farthest-point downsampling between stages.
//! The decoder interpolates back up with skip connections and a linear head
//! produces per-point class logits.

mod config;
mod model;
mod ops;
mod plan;

pub use config::{EmbeddingVariant, ModelConfig};
pub use model::{unpermute_rows, DownLayer, ForwardVars, LinearLayer, Model, NormLayer, TransformerBlock, UpLayer, IGNORE_LABEL};
pub use ops::{group_max, neighbor_aggregate, KernelPointSet, NeighborWeights};
pub use plan::{DownPlan, EmbedPlan, Plan, StagePlan};
