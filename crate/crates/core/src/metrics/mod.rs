pub mod clustering;
pub mod coherence;

pub use clustering::{kmeans, kmeans_pp_seed, nmi, purity, ClusterAssignment, KmeansResult};
pub use coherence::{
    npmi_coherence, npmi_from_counts, topic_diversity, topic_quality, CoherenceReport, TopicSet, DEFAULT_NPMI_TOP,
    DIVERSITY_TOP, NPMI_EPS,
};
