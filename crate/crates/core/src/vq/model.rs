//! The `TVQM` model file: autoencoder, codebook and provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::autoencoder::VqAutoencoder;
use super::codebook::Codebook;
use super::network::Mlp;
use super::train::VqConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::format::{hex, Container};
use crate::numerics::Tensor;

pub const VQ_MAGIC: [u8; 4] = *b"TVQM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqHeader {
    pub n_codes: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    /// Expansion suggested for downstream encoding.
    pub expansion: usize,
    pub config: VqConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqModel {
    pub autoencoder: VqAutoencoder,
    pub codebook: Codebook,
    pub header: VqHeader,
    pub vocab_hash: [u8; 32],
}

impl VqModel {
    pub fn new(autoencoder: VqAutoencoder, codebook: Codebook, config: VqConfig, expansion: usize, vocab: &Vocabulary) -> Self {
        VqModel {
            header: VqHeader {
                n_codes: codebook.n_codes(),
                latent_dim: codebook.dim(),
                input_dim: autoencoder.input_dim(),
                expansion,
                config,
            },
            autoencoder,
            codebook,
            vocab_hash: vocab.hash(),
        }
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.hash() != self.vocab_hash {
            return Err(Error::Compatibility(format!(
                "VQ model was trained against vocabulary {}, supplied vocabulary hashes to {}",
                hex(&self.vocab_hash),
                hex(&vocab.hash())
            )));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(VQ_MAGIC);
        c.push_json("header", &self.header);
        c.push_bytes("vocab_hash", self.vocab_hash.to_vec());
        c.push_tensor("codebook", self.codebook.rho_hat());
        c.push_bytes("codebook_hash", self.codebook.hash().to_vec());
        let usage: Vec<f64> = self.codebook.usage.iter().map(|&u| u as f64).collect();
        c.push_tensor("usage", &Tensor::from_vec(usage));
        self.autoencoder.encoder.write_to(&mut c, "encoder");
        self.autoencoder.decoder.write_to(&mut c, "decoder");
        c
    }

    pub fn from_container(c: &Container, origin: &str) -> Result<Self> {
        let header: VqHeader = c.json("header")?;
        let vocab_hash = c.hash32("vocab_hash")?;
        let mut codebook = Codebook::new(c.tensor("codebook")?)?;
        if codebook.hash() != c.hash32("codebook_hash")? {
            return Err(Error::format(origin, 0, "codebook content does not match its stored hash"));
        }
        codebook.usage = c.tensor("usage")?.values().iter().map(|&u| u as u64).collect();
        let autoencoder = VqAutoencoder::from_parts(Mlp::read_from(c, "encoder")?, Mlp::read_from(c, "decoder")?)?;
        if autoencoder.latent_dim() != codebook.dim() || header.n_codes != codebook.n_codes() {
            return Err(Error::format(origin, 0, "header disagrees with stored tensors"));
        }
        Ok(VqModel {
            autoencoder,
            codebook,
            header,
            vocab_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path, VQ_MAGIC)?;
        VqModel::from_container(&c, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (VqModel, Vocabulary) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ae = VqAutoencoder::new(6, &[5], 3, &mut rng);
        ae.round_f32();
        let cb = Codebook::new(Tensor::randn(&[4, 3], 1.0, &mut rng).round_f32()).unwrap();
        let vocab = Vocabulary::new(vec!["x".into(), "y".into()]).unwrap();
        (VqModel::new(ae, cb, VqConfig::default(), 5, &vocab), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, _) = model();
        let bytes = m.to_container().to_bytes();
        let back = VqModel::from_container(&Container::parse(&bytes, VQ_MAGIC, "m").unwrap(), "m").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_container().to_bytes(), bytes);
    }

    #[test]
    fn vocabulary_mismatch_is_a_compatibility_error() {
        let (m, vocab) = model();
        m.check_vocab(&vocab).unwrap();
        let other = Vocabulary::new(vec!["x".into(), "z".into()]).unwrap();
        let err = m.check_vocab(&other).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
