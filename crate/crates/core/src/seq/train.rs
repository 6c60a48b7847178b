use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prior::{CodeSequence, SequencePrior, DEFAULT_WIDTH, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, Tape, Tensor};
use crate::topic::{check_rate, noise, TopicModel};
use crate::vq::{DocumentCodeHistogram, Mlp};

/// How the topic model takes part in prior training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArMode {
    /// Prior and topic model trained together on `l_KL + l_c + CE`, with `θ`
    /// re-sampled for every batch.
    Joint,
    /// Topic model fixed; the prior sees the deterministic `θ`.
    Frozen,
    /// No topic input at all.
    Unconditioned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArConfig {
    pub window: usize,
    pub width: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate for the topic model in joint mode.
    pub topic_lr: f64,
    pub batch_size: usize,
    pub mode: ArMode,
    pub seed: u64,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            window: DEFAULT_WINDOW,
            width: DEFAULT_WIDTH,
            epochs: 30,
            lr: 1e-3,
            topic_lr: 5e-3,
            batch_size: 64,
            mode: ArMode::Joint,
            seed: 0,
        }
    }
}

/// Per-epoch means: `kl` and `codes` per document, `ar` per position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArEpoch {
    pub kl: f64,
    pub codes: f64,
    pub ar: f64,
}

#[derive(Clone, Debug)]
pub struct ArTraining {
    pub prior: SequencePrior,
    /// The topic model after training; updated only in joint mode.
    pub topic: Option<TopicModel>,
    pub trace: Vec<ArEpoch>,
}

/// A training sequence with its code-count histogram.
pub type SeqPair = (CodeSequence, DocumentCodeHistogram);

/// Count of each index over the sequence's positions.
pub fn positional_histogram(seq: &CodeSequence, n_codes: usize) -> Result<DocumentCodeHistogram> {
    let mut counts = vec![0u32; n_codes];
    for &i in &seq.indices {
        if i >= n_codes {
            return Err(Error::input(format!("code index {i} out of range for {n_codes} codes")));
        }
        counts[i] += 1;
    }
    Ok(DocumentCodeHistogram { counts })
}

/// Gradients of one batch: prior tensors, then topic tensors (joint mode).
#[derive(Clone, Debug)]
pub struct ArBatchGrads {
    /// The scalar that was differentiated.
    pub loss: f64,
    pub prior: Vec<Tensor>,
    pub topic: Vec<Tensor>,
}

/// Batch loss `(Σ l_KL + Σ l_c + Σ CE)/B` and its gradients.
///
/// The returned terms are batch means, with `ar` per position. In frozen mode
/// `eps` is ignored and `θ` is the deterministic posterior mean.
pub fn ar_batch_loss_and_grads(
    prior: &SequencePrior,
    topic: Option<&TopicModel>,
    mode: ArMode,
    batch: &[&SeqPair],
    eps: Tensor,
) -> Result<(ArEpoch, ArBatchGrads)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let mut tape = Tape::new();
    let pv = prior.register(&mut tape);
    let seqs: Vec<&[usize]> = batch.iter().map(|p| p.0.indices.as_slice()).collect();
    let mut terms = ArEpoch::default();
    let inv = 1.0 / batch.len() as f64;
    let mut topic_vars = None;
    let (ce, extra) = match mode {
        ArMode::Unconditioned => {
            if prior.is_conditioned() {
                return Err(Error::param("unconditioned training of a topic-conditioned prior"));
            }
            (prior.tape_nll(&mut tape, &pv, &seqs, None)?, None)
        }
        ArMode::Joint | ArMode::Frozen => {
            let model = topic.ok_or_else(|| Error::param("topic-conditioned training needs a topic model"))?;
            if !prior.is_conditioned() {
                return Err(Error::param("topic-conditioned training of an unconditioned prior"));
            }
            let joint = mode == ArMode::Joint;
            let tv = model.register(&mut tape, joint);
            let codes: Vec<&DocumentCodeHistogram> = batch.iter().map(|p| &p.1).collect();
            let eps = if joint { eps } else { Tensor::zeros(&[batch.len(), model.n_topics()]) };
            let (th, kl, lc) = model.tape_kl_codes(&mut tape, &tv, &codes, eps)?;
            let br = tape.matmul(tv.beta_hat, tv.rho_hat)?;
            let rho_theta = tape.matmul(th.theta, br)?;
            let ce = prior.tape_nll(&mut tape, &pv, &seqs, Some(rho_theta))?;
            terms.kl = tape.scalar(kl) * inv;
            terms.codes = tape.scalar(lc) * inv;
            topic_vars = joint.then_some(tv);
            let extra = tape.add(kl, lc)?;
            (ce, Some(extra))
        }
    };
    terms.ar = tape.scalar(ce) * inv / prior.length() as f64;
    let total = match extra {
        Some(e) => tape.add(ce, e)?,
        None => ce,
    };
    let loss = tape.scale(total, inv);
    if !tape.scalar(loss).is_finite() {
        return Err(Error::numeric(format!("sequence prior loss is {}", tape.scalar(loss))));
    }
    let mut g = tape.backward(loss)?;
    let prior_grads = SequencePrior::collect_grads(&pv, &mut g);
    let topic_grads = match topic_vars {
        Some(tv) => {
            let mut t = vec![g.take(tv.beta_hat), g.take(tv.alpha)];
            t.extend(Mlp::collect_grads(&tv.inference, &mut g));
            t
        }
        None => Vec::new(),
    };
    Ok((
        terms,
        ArBatchGrads {
            loss: tape.scalar(loss),
            prior: prior_grads,
            topic: topic_grads,
        },
    ))
}

/// Adam on the teacher-forced prior loss; see [`ArMode`] for the topic model's role.
///
/// All sequences must share one length. Non-finite losses abort with a
/// numeric error.
pub fn train_ar(data: &[SeqPair], n_codes: usize, topic: Option<TopicModel>, cfg: &ArConfig) -> Result<ArTraining> {
    check_rate(cfg.lr, cfg.batch_size)?;
    check_rate(cfg.topic_lr, cfg.batch_size)?;
    let length = data.first().ok_or_else(|| Error::input("no sequences to train on"))?.0.len();
    for (i, (s, c)) in data.iter().enumerate() {
        if s.len() != length {
            return Err(Error::input(format!("sequence {i} has length {}, expected {length}", s.len())));
        }
        if c.counts.len() != n_codes {
            return Err(Error::dim(format!("histogram {i} has {} codes, expected {n_codes}", c.counts.len())));
        }
    }
    let mut topic = match (cfg.mode, topic) {
        (ArMode::Unconditioned, _) => None,
        (_, None) => return Err(Error::param("topic-conditioned training needs a topic model")),
        (_, Some(m)) => {
            if m.n_codes() != n_codes {
                return Err(Error::dim(format!("topic model over {} codes, data over {n_codes}", m.n_codes())));
            }
            Some(m)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topic_dim = topic.as_ref().map(TopicModel::latent_dim);
    let mut prior = SequencePrior::new(n_codes, length, cfg.window, cfg.width, topic_dim, &mut rng)?;
    let mut prior_adam = AdamState::new(&prior.params());
    let mut topic_adam = topic.as_ref().map(|m| AdamState::new(&m.params()));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = ArEpoch::default();
        for ids in order.chunks(cfg.batch_size) {
            let batch: Vec<&SeqPair> = ids.iter().map(|&i| &data[i]).collect();
            let k = topic.as_ref().map_or(1, TopicModel::n_topics);
            let eps = noise(ids.len(), k, &mut rng);
            let (terms, grads) = ar_batch_loss_and_grads(&prior, topic.as_ref(), cfg.mode, &batch, eps)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::numeric(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
            let w = ids.len() as f64;
            sums.kl += w * terms.kl;
            sums.codes += w * terms.codes;
            sums.ar += w * terms.ar;
            adam_step(&mut prior.params_mut(), &grads.prior, &mut prior_adam, cfg.lr)?;
            if cfg.mode == ArMode::Joint {
                if let (Some(m), Some(state)) = (topic.as_mut(), topic_adam.as_mut()) {
                    adam_step(&mut m.params_mut(), &grads.topic, state, cfg.topic_lr)?;
                }
            }
        }
        let n = data.len() as f64;
        let ep = ArEpoch {
            kl: sums.kl / n,
            codes: sums.codes / n,
            ar: sums.ar / n,
        };
        log::info!("ar epoch {epoch}: nll/position {:.5} (kl {:.5}, codes {:.5})", ep.ar, ep.kl, ep.codes);
        trace.push(ep);
    }
    prior.round_f32();
    if cfg.mode == ArMode::Joint {
        if let Some(m) = topic.as_mut() {
            m.round_f32();
        }
    }
    Ok(ArTraining { prior, topic, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheck};
    use rand::distr::weighted::WeightedIndex;
    use rand::distr::Distribution;
    use rand::Rng;

    fn pairs(seqs: Vec<Vec<usize>>, n_codes: usize) -> Vec<SeqPair> {
        seqs.into_iter()
            .map(|s| {
                let s = CodeSequence::new(s, n_codes).unwrap();
                let c = positional_histogram(&s, n_codes).unwrap();
                (s, c)
            })
            .collect()
    }

    fn unconditioned(epochs: usize, lr: f64) -> ArConfig {
        ArConfig {
            epochs,
            lr,
            width: 16,
            mode: ArMode::Unconditioned,
            seed: 3,
            ..ArConfig::default()
        }
    }

    fn topic(n_codes: usize, dim: usize, seed: u64) -> TopicModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = Tensor::randn(&[n_codes, dim], 1.0, &mut rng);
        TopicModel::new(3, &rho, 0, None, &mut rng).unwrap()
    }

    #[test]
    fn zero_epochs_leaves_a_uniform_prior() {
        let data = pairs(vec![vec![0, 1, 2, 3]; 4], 5);
        let out = train_ar(&data, 5, None, &unconditioned(0, 1e-3)).unwrap();
        assert!(out.trace.is_empty());
        let nll = out.prior.ar_nll(&data[0].0, None).unwrap();
        assert!((nll - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_position_prior_learns_the_marginal_entropy() {
        let p = [0.5, 0.25, 0.15, 0.1];
        let dist = WeightedIndex::new(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seqs: Vec<Vec<usize>> = (0..2000).map(|_| vec![dist.sample(&mut rng)]).collect();
        let mut counts = [0f64; 4];
        for s in &seqs {
            counts[s[0]] += 1.0;
        }
        let entropy: f64 = -counts.iter().map(|c| c / 2000.0).filter(|&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
        let data = pairs(seqs, 4);
        let out = train_ar(&data, 4, None, &unconditioned(60, 1e-2)).unwrap();
        let nll = data.iter().map(|(s, _)| out.prior.ar_nll(s, None).unwrap()).sum::<f64>() / data.len() as f64;
        assert!((nll - entropy).abs() < 0.01 * entropy, "nll {nll} vs entropy {entropy}");
    }

    #[test]
    fn constant_sequences_are_learned_and_resampled() {
        let k = 3;
        let data = pairs(vec![vec![k; 8]; 200], 6);
        let out = train_ar(&data, 6, None, &unconditioned(30, 1e-2)).unwrap();
        let logits = out.prior.sequence_logits(&data[0].0, None).unwrap();
        for n in 0..8 {
            let p = crate::numerics::softmax(logits.row(n)).unwrap();
            assert!(p[k] >= 0.99, "position {n}: {}", p[k]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = out.prior.sample_sequence(None, &mut rng).unwrap();
        assert_eq!(s.sequence.indices, vec![k; 8]);
    }

    #[test]
    fn joint_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n_codes = 5;
        let seqs: Vec<Vec<usize>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(0..n_codes)).collect()).collect();
        let data = pairs(seqs, n_codes);
        let batch: Vec<&SeqPair> = data.iter().collect();
        let model = topic(n_codes, 3, 13);
        let mut prior = SequencePrior::new(n_codes, 6, 3, 6, Some(3), &mut rng).unwrap();
        for t in prior.params_mut() {
            *t = Tensor::randn(t.shape(), 0.5, &mut rng);
        }
        let eps = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let n_prior = prior.params().len();
        let mut params: Vec<Tensor> = prior.params().into_iter().cloned().collect();
        params.extend(model.params().into_iter().cloned());
        let worst = grad_check(
            |p| {
                let mut pr = prior.clone();
                pr.set_params(&p[..n_prior])?;
                let mut m = model.clone();
                m.set_params(&p[n_prior..])?;
                let (_, g) = ar_batch_loss_and_grads(&pr, Some(&m), ArMode::Joint, &batch, eps.clone())?;
                let mut grads = g.prior;
                grads.extend(g.topic);
                Ok((g.loss, grads))
            },
            &params,
            &GradCheck {
                eps: 1e-3,
                five_point: true,
                ..GradCheck::default()
            },
        )
        .unwrap();
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn joint_training_is_deterministic_and_moves_the_topic_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seqs: Vec<Vec<usize>> = (0..40).map(|_| (0..5).map(|_| rng.random_range(0..4)).collect()).collect();
        let data = pairs(seqs, 4);
        let m = topic(4, 2, 5);
        let cfg = ArConfig {
            epochs: 3,
            width: 8,
            batch_size: 16,
            ..ArConfig::default()
        };
        let a = train_ar(&data, 4, Some(m.clone()), &cfg).unwrap();
        let b = train_ar(&data, 4, Some(m.clone()), &cfg).unwrap();
        assert_eq!(a.prior, b.prior);
        assert_eq!(a.topic, b.topic);
        assert_ne!(a.topic.as_ref().unwrap().beta_hat, m.beta_hat);
        let frozen = train_ar(&data, 4, Some(m.clone()), &ArConfig { mode: ArMode::Frozen, ..cfg.clone() }).unwrap();
        assert_eq!(frozen.topic.as_ref(), Some(&m));
        assert!(matches!(train_ar(&data, 4, None, &cfg), Err(Error::Parameter(_))));
    }
}
