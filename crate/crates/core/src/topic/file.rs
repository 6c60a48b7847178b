//! The `TVQT` model file. The codebook itself is not stored; loading takes
//! the codebook and vocabulary and checks both against recorded hashes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::TopicModel;
use super::train::TopicConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::format::{content_hash, hex, Container};
use crate::numerics::Tensor;
use crate::vq::{Codebook, Mlp};

pub const TOPIC_MAGIC: [u8; 4] = *b"TVQT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicHeader {
    pub n_topics: usize,
    pub n_codes: usize,
    pub n_words: usize,
    pub latent_dim: usize,
    pub config: TopicConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicFile {
    pub model: TopicModel,
    pub header: TopicHeader,
    /// Absent for models trained on code sequences without a word vocabulary.
    pub vocab_hash: Option<[u8; 32]>,
    pub codebook_hash: [u8; 32],
}

impl TopicModel {
    /// SHA-256 over the stored tensors, prior included.
    pub fn hash(&self) -> [u8; 32] {
        let pm = Tensor::from_vec(self.prior_mean.clone());
        let pl = Tensor::from_vec(self.prior_logvar.clone());
        let mut ts = self.params();
        ts.push(&pm);
        ts.push(&pl);
        content_hash(ts)
    }
}

impl TopicFile {
    pub fn new(model: TopicModel, config: TopicConfig, vocab: Option<&Vocabulary>, codebook: &Codebook) -> Self {
        TopicFile {
            header: TopicHeader {
                n_topics: model.n_topics(),
                n_codes: model.n_codes(),
                n_words: model.n_words(),
                latent_dim: model.latent_dim(),
                config,
            },
            model,
            vocab_hash: vocab.map(Vocabulary::hash),
            codebook_hash: codebook.hash(),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(TOPIC_MAGIC);
        c.push_json("header", &self.header);
        c.push_bytes("vocab_hash", self.vocab_hash.map(|h| h.to_vec()).unwrap_or_default());
        c.push_bytes("codebook_hash", self.codebook_hash.to_vec());
        c.push_tensor("beta_hat", &self.model.beta_hat);
        c.push_tensor("alpha", &self.model.alpha);
        c.push_tensor("prior_mean", &Tensor::from_vec(self.model.prior_mean.clone()));
        c.push_tensor("prior_logvar", &Tensor::from_vec(self.model.prior_logvar.clone()));
        self.model.inference.write_to(&mut c, "inference");
        c
    }

    pub fn from_container(c: &Container, vocab: Option<&Vocabulary>, codebook: &Codebook) -> Result<Self> {
        let header: TopicHeader = c.json("header")?;
        let vocab_hash = match c.bytes("vocab_hash")? {
            [] => None,
            _ => Some(c.hash32("vocab_hash")?),
        };
        let codebook_hash = c.hash32("codebook_hash")?;
        if codebook.hash() != codebook_hash {
            return Err(Error::Compatibility(format!(
                "topic model expects codebook {}, supplied codebook hashes to {}",
                hex(&codebook_hash),
                hex(&codebook.hash())
            )));
        }
        match (vocab, vocab_hash) {
            (Some(v), Some(h)) if v.hash() != h => {
                return Err(Error::Compatibility(format!(
                    "topic model expects vocabulary {}, supplied vocabulary hashes to {}",
                    hex(&h),
                    hex(&v.hash())
                )))
            }
            (Some(_), None) => {
                return Err(Error::Compatibility("topic model has no word vocabulary".into()));
            }
            _ => {}
        }
        let model = TopicModel {
            beta_hat: c.tensor("beta_hat")?,
            alpha: c.tensor("alpha")?,
            rho_hat: codebook.rho_hat().clone(),
            inference: Mlp::read_from(c, "inference")?,
            prior_mean: c.tensor("prior_mean")?.into_values(),
            prior_logvar: c.tensor("prior_logvar")?.into_values(),
        };
        if model.n_topics() != header.n_topics
            || model.n_codes() != codebook.n_codes()
            || model.alpha.cols() != codebook.dim()
            || model.inference.input_dim() != model.n_codes()
            || model.inference.output_dim() != 2 * model.n_topics()
        {
            return Err(Error::format("<TVQT>", 0, "stored tensors disagree with header or codebook"));
        }
        Ok(TopicFile {
            model,
            header,
            vocab_hash,
            codebook_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path, vocab: Option<&Vocabulary>, codebook: &Codebook) -> Result<Self> {
        TopicFile::from_container(&Container::load(path, TOPIC_MAGIC)?, vocab, codebook)
    }
}
