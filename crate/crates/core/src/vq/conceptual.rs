//! Words re-expressed as multi-hot codes over the codebook.

use super::autoencoder::VqAutoencoder;
use super::codebook::Codebook;
use crate::corpus::{Document, EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptualWord {
    pub word: usize,
    /// The K selected codebook rows, nearest first.
    pub codes: Vec<usize>,
    /// Sum of the selected codebook rows.
    pub rho: Vec<f64>,
}

impl ConceptualWord {
    /// Dense 0/1 indicator over the codebook.
    pub fn code(&self, n_codes: usize) -> Vec<f64> {
        let mut c = vec![0.0; n_codes];
        for &i in &self.codes {
            c[i] = 1.0;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptualVocab {
    pub words: Vec<ConceptualWord>,
    pub expansion: usize,
    pub n_codes: usize,
    pub codebook_hash: [u8; 32],
}

impl ConceptualVocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Per-code counts summed over a document's tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocumentCodeHistogram {
    pub counts: Vec<u32>,
}

impl DocumentCodeHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Encode every vocabulary word with the frozen encoder and take its `k`
/// nearest codebook rows.
pub fn build_conceptual_vocab(
    vocab: &Vocabulary,
    emb: &EmbeddingTable,
    ae: &VqAutoencoder,
    cb: &Codebook,
    k: usize,
) -> Result<ConceptualVocab> {
    if emb.len() != vocab.len() {
        return Err(Error::dim(format!(
            "{} embedding rows for {} vocabulary words",
            emb.len(),
            vocab.len()
        )));
    }
    if k == 0 || k > cb.n_codes() {
        return Err(Error::param(format!("expansion {k} outside 1..={}", cb.n_codes())));
    }
    if ae.latent_dim() != cb.dim() {
        return Err(Error::dim(format!(
            "encoder latent {} vs codebook dim {}",
            ae.latent_dim(),
            cb.dim()
        )));
    }
    let latents = ae.encode_batch(emb.as_tensor())?;
    let mut words = Vec::with_capacity(vocab.len());
    for w in 0..vocab.len() {
        let m = cb.quantize_topk(latents.row(w), k)?;
        words.push(ConceptualWord {
            word: w,
            codes: m.indices,
            rho: m.rho,
        });
    }
    Ok(ConceptualVocab {
        words,
        expansion: k,
        n_codes: cb.n_codes(),
        codebook_hash: cb.hash(),
    })
}

pub fn doc_code_histogram(doc: &Document, cvocab: &ConceptualVocab) -> Result<DocumentCodeHistogram> {
    let mut counts = vec![0u32; cvocab.n_codes];
    for &t in &doc.tokens {
        let w = cvocab
            .words
            .get(t)
            .ok_or_else(|| Error::input(format!("document {}: token id {t} outside conceptual vocabulary", doc.id)))?;
        for &c in &w.codes {
            counts[c] += 1;
        }
    }
    Ok(DocumentCodeHistogram { counts })
}
