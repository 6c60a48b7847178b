//! VQ autoencoder, codebook quantization and the conceptual vocabulary.

mod autoencoder;
mod codebook;
mod conceptual;
mod model;
pub mod network;
mod train;

pub use autoencoder::{VqAutoencoder, DEFAULT_HIDDEN, DEFAULT_LATENT};
pub use codebook::{Codebook, MultiHot, Quantized};
pub use conceptual::{build_conceptual_vocab, doc_code_histogram, ConceptualVocab, ConceptualWord, DocumentCodeHistogram};
pub use model::{VqHeader, VqModel, VQ_MAGIC};
pub use network::{Activation, Linear, Mlp};
pub use train::{train_vqvae, VqConfig, VqEpoch, VqTraining};
