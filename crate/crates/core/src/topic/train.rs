use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LossTerms, TopicModel};
use crate::corpus::WordHistogram;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, Tensor};
use crate::vq::DocumentCodeHistogram;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopicConfig {
    pub n_topics: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Symmetric Dirichlet concentration behind the prior; `None` means `1/K_t`.
    pub prior_concentration: Option<f64>,
    pub seed: u64,
}

impl Default for TopicConfig {
    fn default() -> Self {
        TopicConfig {
            n_topics: 20,
            epochs: 200,
            lr: 5e-3,
            batch_size: 256,
            prior_concentration: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TopicTraining {
    /// Final model, or the last finite one when training diverged.
    pub model: TopicModel,
    /// Mean per-document loss terms for each completed epoch.
    pub trace: Vec<LossTerms>,
    pub diverged: Option<String>,
}

/// One training document: its code histogram and word counts.
pub type BowPair = (DocumentCodeHistogram, WordHistogram);

pub(crate) fn check_rate(lr: f64, batch: usize) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) || batch == 0 {
        return Err(Error::param(format!("lr {lr}, batch size {batch}")));
    }
    Ok(())
}

pub(crate) fn noise(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, rng)
}

/// Adam on the mean negative ELBO over mini-batches. Documents with an empty
/// code or word histogram are skipped.
pub fn train_topic_model(data: &[BowPair], rho_hat: &Tensor, n_words: usize, cfg: &TopicConfig) -> Result<TopicTraining> {
    check_rate(cfg.lr, cfg.batch_size)?;
    let usable: Vec<usize> = (0..data.len())
        .filter(|&i| data[i].0.total() > 0 && data[i].1.total() > 0)
        .collect();
    if usable.len() < data.len() {
        log::warn!("skipping {} empty documents", data.len() - usable.len());
    }
    if usable.is_empty() {
        return Err(Error::input("no non-empty documents to train on"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TopicModel::new(cfg.n_topics, rho_hat, n_words, cfg.prior_concentration, &mut rng)?;
    let mut adam = AdamState::new(&model.params());
    let mut order = usable;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let k = cfg.n_topics;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        let good = model.clone();
        for (b, ids) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&DocumentCodeHistogram, &WordHistogram)> =
                ids.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
            let eps = noise(ids.len(), k, &mut rng);
            let (terms, grads) = model.batch_loss_and_grads(&batch, eps)?;
            if !terms.total().is_finite() || grads.iter().any(|g| !g.is_finite()) {
                let msg = format!("topic training diverged at epoch {epoch}, batch {b}: loss = {}", terms.total());
                log::error!("{msg}");
                return Ok(TopicTraining {
                    model: good,
                    trace,
                    diverged: Some(msg),
                });
            }
            let w = ids.len() as f64;
            sums.kl += w * terms.kl;
            sums.codes += w * terms.codes;
            sums.words += w * terms.words;
            adam_step(&mut model.params_mut(), &grads, &mut adam, cfg.lr)?;
        }
        let n = order.len() as f64;
        let ep = LossTerms {
            kl: sums.kl / n,
            codes: sums.codes / n,
            words: sums.words / n,
        };
        log::info!(
            "topic epoch {epoch}: total {:.5} (kl {:.5}, codes {:.5}, words {:.5})",
            ep.total(),
            ep.kl,
            ep.codes,
            ep.words
        );
        trace.push(ep);
    }
    model.round_f32();
    Ok(TopicTraining {
        model,
        trace,
        diverged: None,
    })
}
