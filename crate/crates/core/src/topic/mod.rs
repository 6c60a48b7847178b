//! Topic model over conceptual codes with a bag-of-words generation head.

mod file;
mod model;
mod train;

pub use file::{TopicFile, TopicHeader, TOPIC_MAGIC};
pub use model::{
    laplace_dirichlet_prior, rank_desc, GeneratedDocument, LossTerms, TapedTheta, ThetaMode, ThetaSample, TopicModel,
    TopicVars, INFERENCE_HIDDEN,
};
pub use train::{train_topic_model, BowPair, TopicConfig, TopicTraining};
pub(crate) use train::{check_rate, noise};
