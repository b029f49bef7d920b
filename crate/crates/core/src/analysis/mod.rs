//! Artifact analysis: feature and attention maps, token-norm statistics,
//! outlier thresholds, neighbor redundancy and map rendering.

mod cosine;
mod maps;
mod render;
mod stats;

use serde::{Deserialize, Serialize};

pub use cosine::{
    background_patches, mean_neighbor_cosine, neighbor_cosine, CosineDiagnostics, CosineSplit,
    NeighborCosine, Summary,
};
pub use maps::{
    attention_map_cls, attention_map_pooled, feature_map, pooled_attention, qkv_block_maps,
    row_norms, AttentionMap, MapGrid, MapKind, QkvSelect,
};
pub use render::{map_from_csv, map_to_csv, render_map, write_token_csv, TokenRecord, TOKEN_CSV_HEADER};
pub use stats::{
    bimodality_coefficient, histogram, norm_distribution, outlier_threshold, percentile,
    token_norms, Bimodality, Histogram, TokenStats, BIMODAL_THRESHOLD,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Images drawn for the pooled norm statistics.
    pub sample_n: usize,
    /// Outlier percentile, in (0, 100).
    pub percentile: f64,
    pub histogram_bins: usize,
    /// Threshold each image separately instead of the pooled sample.
    pub per_image: bool,
    /// Leave border patches out of neighbor-cosine statistics.
    pub exclude_edges: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            sample_n: 5000,
            percentile: 98.0,
            histogram_bins: 256,
            per_image: false,
            exclude_edges: false,
        }
    }
}
