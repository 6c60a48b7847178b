//! Topic-conditioned autoregressive prior over codebook index sequences.

mod file;
mod prior;
mod train;

pub use file::{ArFile, ArHeader, SequenceDataset, AR_MAGIC};
pub use prior::{decode_sequence, CodeSequence, PriorVars, SampledSequence, SequencePrior, DEFAULT_WIDTH, DEFAULT_WINDOW};
pub use train::{
    ar_batch_loss_and_grads, positional_histogram, train_ar, ArBatchGrads, ArConfig, ArEpoch, ArMode, ArTraining, SeqPair,
};
