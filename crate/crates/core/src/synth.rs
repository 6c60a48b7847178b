//! Seeded synthetic data with known ground truth: planted topic corpora,
//! two-regime code sequences and clustered embeddings.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{softmax, Tensor};
use crate::seq::CodeSequence;
use crate::topic::rank_desc;
use crate::vq::{Activation, Codebook, Linear, Mlp, VqAutoencoder};

/// How word embeddings relate to the planted codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordPlacement {
    /// Each word sits next to one code owned by its topic.
    Single,
    /// Each word is a blend of a hub code (its nearest) and two codes owned
    /// by its topic. Hubs are shared by all topics and assigned by the
    /// word's frequency rank, so nearest-code histograms look alike across
    /// topics and only a multi-code expansion recovers the topic signal.
    /// Needs a dimension of about 128 for the random centres to be close to
    /// orthogonal.
    Blend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub n_topics: usize,
    pub n_codes: usize,
    pub n_words: usize,
    pub n_docs: usize,
    pub doc_len: usize,
    pub dim: usize,
    /// Probability that a token comes from the document's own topic.
    pub label_weight: f64,
    /// Zipf exponent of the within-topic word distribution.
    pub zipf: f64,
    pub placement: WordPlacement,
    /// Hub codes for blended placement; they are the first codes of the book.
    pub n_hubs: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_topics: 5,
            n_codes: 50,
            n_words: 300,
            n_docs: 2000,
            doc_len: 40,
            dim: 16,
            label_weight: 0.8,
            zipf: 1.0,
            placement: WordPlacement::Single,
            n_hubs: 5,
            seed: 0,
        }
    }
}

/// A planted corpus with its generating distributions.
#[derive(Clone, Debug)]
pub struct PlantedCorpus {
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub embeddings: EmbeddingTable,
    /// The code centres the embeddings were built around.
    pub codebook: Codebook,
    /// `K_t × N_w` planted `p(w | k)`.
    pub word_probs: Tensor,
    pub word_topic: Vec<usize>,
}

impl PlantedCorpus {
    /// The `n` most probable words of each planted topic.
    pub fn top_words(&self, n: usize) -> Vec<Vec<usize>> {
        (0..self.word_probs.rows()).map(|k| rank_desc(self.word_probs.row(k), n)).collect()
    }
}

fn hubs(cfg: &PlantedConfig) -> usize {
    match cfg.placement {
        WordPlacement::Single => 0,
        WordPlacement::Blend => cfg.n_hubs,
    }
}

fn check_planted(cfg: &PlantedConfig) -> Result<()> {
    let owned = cfg.n_codes.saturating_sub(hubs(cfg));
    if cfg.n_topics < 2 || owned % cfg.n_topics != 0 || cfg.n_words % cfg.n_topics != 0 {
        return Err(Error::param(format!(
            "{} topics must divide {owned} topic codes and {} words",
            cfg.n_topics, cfg.n_words
        )));
    }
    if cfg.placement == WordPlacement::Blend && (owned / cfg.n_topics < 2 || cfg.n_hubs == 0) {
        return Err(Error::param("blended placement needs hubs and at least 2 codes per topic"));
    }
    if cfg.dim == 0 || cfg.n_docs == 0 || cfg.doc_len == 0 || !(0.0..=1.0).contains(&cfg.label_weight) {
        return Err(Error::param("planted corpus needs positive sizes and a label weight in [0, 1]"));
    }
    Ok(())
}

/// Topic `k` owns words `k·N_w/K_t ..` and an equal block of the non-hub
/// codes. Its word
/// distribution is Zipf over a shuffled order of its words. Each document has
/// one label topic; a token comes from it with probability `label_weight`,
/// otherwise from a uniformly chosen topic.
pub fn planted_corpus(cfg: &PlantedConfig) -> Result<PlantedCorpus> {
    check_planted(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k_t, n_w, n_c) = (cfg.n_topics, cfg.n_words, cfg.n_codes);
    let words_per_topic = n_w / k_t;
    let n_hubs = hubs(cfg);
    let codes_per_topic = (n_c - n_hubs) / k_t;

    let centres = Tensor::randn(&[n_c, cfg.dim], 1.0, &mut rng);
    let word_topic: Vec<usize> = (0..n_w).map(|w| w / words_per_topic).collect();
    let mut word_probs = Tensor::zeros(&[k_t, n_w]);
    let mut rank = vec![0; n_w];
    for k in 0..k_t {
        let mut order: Vec<usize> = (k * words_per_topic..(k + 1) * words_per_topic).collect();
        order.shuffle(&mut rng);
        let weights: Vec<f64> = (0..words_per_topic).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf)).collect();
        let z: f64 = weights.iter().sum();
        for (r, &w) in order.iter().enumerate() {
            word_probs.set(k, w, weights[r] / z);
            rank[w] = r;
        }
    }

    let mut emb = Tensor::zeros(&[n_w, cfg.dim]);
    for w in 0..n_w {
        let k = word_topic[w];
        let own = |j: usize| n_hubs + k * codes_per_topic + j;
        let row: Vec<f64> = match cfg.placement {
            WordPlacement::Single => {
                let c = own((w % words_per_topic) % codes_per_topic);
                centres.row(c).iter().map(|&x| x + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
            }
            WordPlacement::Blend => {
                let shared = rank[w] % n_hubs;
                let picks = rand::seq::index::sample(&mut rng, codes_per_topic, 2);
                let (b, c) = (own(picks.index(0)), own(picks.index(1)));
                (0..cfg.dim)
                    .map(|d| 0.45 * centres.get(shared, d) + 0.275 * centres.get(b, d) + 0.275 * centres.get(c, d))
                    .collect()
            }
        };
        emb.row_mut(w).copy_from_slice(&row);
    }

    let dists = (0..k_t)
        .map(|k| WeightedIndex::new(word_probs.row(k)).map_err(|e| Error::numeric(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut documents = Vec::with_capacity(cfg.n_docs);
    for d in 0..cfg.n_docs {
        let label = rng.random_range(0..k_t);
        let tokens = (0..cfg.doc_len)
            .map(|_| {
                let z = if rng.random::<f64>() < cfg.label_weight {
                    label
                } else {
                    rng.random_range(0..k_t)
                };
                dists[z].sample(&mut rng)
            })
            .collect();
        documents.push(Document {
            id: format!("doc{d}"),
            tokens,
            label: Some(label),
        });
    }
    let vocab = Vocabulary::new((0..n_w).map(|w| format!("w{w}")).collect())?;
    Ok(PlantedCorpus {
        vocab,
        corpus: Corpus {
            documents,
            label_names: Some((0..k_t).map(|k| format!("topic{k}")).collect()),
        },
        embeddings: EmbeddingTable::new(emb.round_f32())?,
        codebook: Codebook::new(centres.round_f32())?,
        word_probs,
        word_topic,
    })
}

/// Autoencoder whose encoder and decoder are both the identity on `dim`.
pub fn identity_autoencoder(dim: usize) -> VqAutoencoder {
    let layer = || {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.set(i, i, 1.0);
        }
        Linear::new(w, Tensor::zeros(&[dim]), Activation::Identity).expect("square identity layer")
    };
    let enc = Mlp::new(vec![layer()]).expect("single layer");
    let dec = Mlp::new(vec![layer()]).expect("single layer");
    VqAutoencoder::from_parts(enc, dec).expect("matching identity layers")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeConfig {
    pub n_regimes: usize,
    pub n_codes: usize,
    pub length: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Scale of the random per-position logits; larger is more peaked.
    pub sharpness: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        RegimeConfig {
            n_regimes: 2,
            n_codes: 20,
            length: 16,
            n_train: 2000,
            n_test: 500,
            sharpness: 2.0,
            dim: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RegimeData {
    pub train: Vec<CodeSequence>,
    pub train_regimes: Vec<usize>,
    pub test: Vec<CodeSequence>,
    pub test_regimes: Vec<usize>,
    /// `[regime][position]` index distributions.
    pub probs: Vec<Vec<Vec<f64>>>,
    /// A random codebook to embed the indices in.
    pub codebook: Codebook,
}

/// Each regime has its own independent index distribution at every
/// position; a sequence draws one regime uniformly and then its positions.
pub fn regime_sequences(cfg: &RegimeConfig) -> Result<RegimeData> {
    if cfg.n_regimes == 0 || cfg.n_codes == 0 || cfg.length == 0 || cfg.dim == 0 {
        return Err(Error::param("regime data needs positive sizes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probs = Vec::with_capacity(cfg.n_regimes);
    for _ in 0..cfg.n_regimes {
        let mut per_pos = Vec::with_capacity(cfg.length);
        for _ in 0..cfg.length {
            let logits = Tensor::randn(&[cfg.n_codes], cfg.sharpness, &mut rng);
            per_pos.push(softmax(logits.values())?);
        }
        probs.push(per_pos);
    }
    let dists = probs
        .iter()
        .map(|r| {
            r.iter()
                .map(|p| WeightedIndex::new(p).map_err(|e| Error::numeric(e.to_string())))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let draw = |n: usize, rng: &mut ChaCha8Rng| {
        let mut seqs = Vec::with_capacity(n);
        let mut regimes = Vec::with_capacity(n);
        for _ in 0..n {
            let r = rng.random_range(0..cfg.n_regimes);
            let indices = dists[r].iter().map(|d| d.sample(rng)).collect();
            seqs.push(CodeSequence { indices });
            regimes.push(r);
        }
        (seqs, regimes)
    };
    let (train, train_regimes) = draw(cfg.n_train, &mut rng);
    let (test, test_regimes) = draw(cfg.n_test, &mut rng);
    let codebook = Codebook::new(Tensor::randn(&[cfg.n_codes, cfg.dim], 1.0, &mut rng).round_f32())?;
    Ok(RegimeData {
        train,
        train_regimes,
        test,
        test_regimes,
        probs,
        codebook,
    })
}

/// `n_clusters` Gaussian blobs with centres `separation` apart on average;
/// returns points and their cluster ids.
pub fn clustered_points(
    n_clusters: usize,
    per_cluster: usize,
    dim: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = Tensor::randn(&[n_clusters, dim], separation / (2.0 * dim as f64).sqrt(), &mut rng);
    let mut pts = Tensor::zeros(&[n_clusters * per_cluster, dim]);
    let mut labels = Vec::with_capacity(n_clusters * per_cluster);
    for c in 0..n_clusters {
        for i in 0..per_cluster {
            let r = c * per_cluster + i;
            for d in 0..dim {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                pts.set(r, d, centres.get(c, d) + noise * z);
            }
            labels.push(c);
        }
    }
    (pts, labels)
}
