//! Face-model stand-in: mesh decoding, expression categorization,
//! landmarks, similarity alignment and landmark distances.

mod proxy;
mod split;
mod umeyama;

pub use proxy::{
    generate_proxy, BlendshapeProxy, DEFAULT_PARAMS, DEFAULT_PROXY_SEED, DEFAULT_STRONG, DEFAULT_VERTICES,
};
pub use split::{categorize_expressions, ExpressionSplit};
pub use umeyama::{lmd, umeyama_align, SimilarityTransform};
