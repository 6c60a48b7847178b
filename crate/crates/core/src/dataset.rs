//! The JSON-lines conceptual bag-of-words file written by `encode`.
//!
//! Line 1 is a header; every further line is one document with sparse code
//! counts `c` and word counts `v` as `[index, count]` pairs.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{word_histogram, Corpus, Vocabulary, WordHistogram};
use crate::error::{Error, Result};
use crate::format::hex;
use crate::topic::BowPair;
use crate::vq::{doc_code_histogram, ConceptualVocab, DocumentCodeHistogram};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BowHeader {
    pub n_codes: usize,
    pub n_words: usize,
    pub expansion: usize,
    pub vocab_hash: String,
    pub codebook_hash: String,
    /// Resolved configuration of the producing run.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowRecord {
    pub id: String,
    pub c: Vec<(usize, u32)>,
    pub v: Vec<(usize, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Set for documents without tokens; such lines carry no counts.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BowDataset {
    pub header: BowHeader,
    pub records: Vec<BowRecord>,
}

fn sparse(counts: &[u32]) -> Vec<(usize, u32)> {
    counts.iter().enumerate().filter(|(_, &n)| n > 0).map(|(i, &n)| (i, n)).collect()
}

fn dense(pairs: &[(usize, u32)], len: usize) -> Vec<u32> {
    let mut out = vec![0; len];
    for &(i, n) in pairs {
        out[i] += n;
    }
    out
}

impl BowDataset {
    /// Histograms for every document of `corpus` under `cvocab`.
    pub fn encode(corpus: &Corpus, vocab: &Vocabulary, cvocab: &ConceptualVocab, config: serde_json::Value) -> Result<Self> {
        let mut records = Vec::with_capacity(corpus.len());
        for d in &corpus.documents {
            let label = match (d.label, &corpus.label_names) {
                (Some(l), Some(names)) => Some(names[l].clone()),
                _ => None,
            };
            if d.is_empty() {
                log::warn!("document {} has no tokens; marked skipped", d.id);
                records.push(BowRecord {
                    id: d.id.clone(),
                    c: Vec::new(),
                    v: Vec::new(),
                    label,
                    skipped: true,
                });
                continue;
            }
            records.push(BowRecord {
                id: d.id.clone(),
                c: sparse(&doc_code_histogram(d, cvocab)?.counts),
                v: sparse(&word_histogram(d, vocab).counts),
                label,
                skipped: false,
            });
        }
        Ok(BowDataset {
            header: BowHeader {
                n_codes: cvocab.n_codes,
                n_words: vocab.len(),
                expansion: cvocab.expansion,
                vocab_hash: hex(&vocab.hash()),
                codebook_hash: hex(&cvocab.codebook_hash),
                config,
            },
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let h = hex(&vocab.hash());
        if h != self.header.vocab_hash {
            return Err(Error::Compatibility(format!(
                "dataset was encoded against vocabulary {}, supplied vocabulary hashes to {h}",
                self.header.vocab_hash
            )));
        }
        Ok(())
    }

    pub fn check_codebook(&self, codebook_hash: &[u8; 32]) -> Result<()> {
        let h = hex(codebook_hash);
        if h != self.header.codebook_hash {
            return Err(Error::Compatibility(format!(
                "dataset was encoded against codebook {}, supplied codebook hashes to {h}",
                self.header.codebook_hash
            )));
        }
        Ok(())
    }

    /// Indices of the records not marked skipped.
    pub fn usable(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.records[i].skipped).collect()
    }

    pub fn codes(&self, i: usize) -> DocumentCodeHistogram {
        DocumentCodeHistogram {
            counts: dense(&self.records[i].c, self.header.n_codes),
        }
    }

    pub fn words(&self, i: usize) -> WordHistogram {
        WordHistogram {
            counts: dense(&self.records[i].v, self.header.n_words),
        }
    }

    /// Training pairs for the usable records, in file order.
    pub fn pairs(&self) -> Vec<BowPair> {
        self.usable().into_iter().map(|i| (self.codes(i), self.words(i))).collect()
    }

    /// Dense label ids (first-appearance order) for the usable records, if
    /// every one of them is labelled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        let mut ids: HashMap<&str, usize> = HashMap::new();
        self.usable()
            .into_iter()
            .map(|i| {
                let name = self.records[i].label.as_deref()?;
                let next = ids.len();
                Some(*ids.entry(name).or_insert(next))
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &self.header).expect("in-memory write");
        out.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("in-memory write");
            out.push(b'\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let p = path.display().to_string();
        let mut lines = BufReader::new(file)
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let (_, first) = lines.next().ok_or_else(|| Error::format(&p, 0, "dataset file is empty"))?;
        let first = first.map_err(|e| Error::io(path, e))?;
        let header: BowHeader =
            serde_json::from_str(&first).map_err(|e| Error::format(&p, 1, format!("malformed header: {e}")))?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            let r: BowRecord =
                serde_json::from_str(&line).map_err(|e| Error::format(&p, i + 1, format!("malformed record: {e}")))?;
            if let Some(&(j, _)) = r.c.iter().find(|(j, _)| *j >= header.n_codes) {
                return Err(Error::format(&p, i + 1, format!("code index {j} outside {}", header.n_codes)));
            }
            if let Some(&(j, _)) = r.v.iter().find(|(j, _)| *j >= header.n_words) {
                return Err(Error::format(&p, i + 1, format!("word index {j} outside {}", header.n_words)));
            }
            records.push(r);
        }
        Ok(BowDataset { header, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::vq::ConceptualWord;

    fn setup(k: usize) -> (Vocabulary, Corpus, ConceptualVocab) {
        let vocab = Vocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let corpus = Corpus {
            documents: vec![
                Document {
                    id: "d0".into(),
                    tokens: vec![0, 1, 0],
                    label: Some(0),
                },
                Document {
                    id: "d1".into(),
                    tokens: vec![],
                    label: Some(1),
                },
                Document {
                    id: "d2".into(),
                    tokens: vec![2],
                    label: Some(1),
                },
            ],
            label_names: Some(vec!["x".into(), "y".into()]),
        };
        let codes = [[0, 1, 2], [1, 2, 3], [3, 0, 1]];
        let cv = ConceptualVocab {
            words: (0..3)
                .map(|w| ConceptualWord {
                    word: w,
                    codes: codes[w][..k].to_vec(),
                    rho: vec![0.0],
                })
                .collect(),
            expansion: k,
            n_codes: 4,
            codebook_hash: [7; 32],
        };
        (vocab, corpus, cv)
    }

    #[test]
    fn counts_skips_and_round_trip() {
        let (vocab, corpus, cv) = setup(2);
        let ds = BowDataset::encode(&corpus, &vocab, &cv, serde_json::json!({"k": 2})).unwrap();
        assert_eq!(ds.records[0].c, vec![(0, 2), (1, 3), (2, 1)]);
        assert_eq!(ds.records[0].v, vec![(0, 2), (1, 1)]);
        assert!(ds.records[1].skipped);
        assert_eq!(ds.usable(), vec![0, 2]);
        assert_eq!(ds.labels(), Some(vec![0, 1]));
        for i in ds.usable() {
            assert_eq!(ds.codes(i).total(), 2 * corpus.documents[i].tokens.len() as u64);
        }
        let text = String::from_utf8(ds.to_jsonl()).unwrap();
        assert!(text.lines().nth(2).unwrap().contains("\"skipped\":true"));
        assert!(!text.lines().nth(1).unwrap().contains("skipped"));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bow.jsonl");
        ds.save(&p).unwrap();
        let back = BowDataset::load(&p).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl(), ds.to_jsonl());
    }

    #[test]
    fn hash_checks_and_bad_lines() {
        let (vocab, corpus, cv) = setup(1);
        let ds = BowDataset::encode(&corpus, &vocab, &cv, serde_json::Value::Null).unwrap();
        ds.check_vocab(&vocab).unwrap();
        ds.check_codebook(&[7; 32]).unwrap();
        assert_eq!(ds.check_codebook(&[8; 32]).unwrap_err().exit_code(), 3);
        let other = Vocabulary::new(vec!["a".into()]).unwrap();
        assert_eq!(ds.check_vocab(&other).unwrap_err().exit_code(), 3);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bow.jsonl");
        let mut text = String::from_utf8(ds.to_jsonl()).unwrap();
        text.push_str("{\"id\":\"z\",\"c\":[[9,1]],\"v\":[[0,1]]}\n");
        std::fs::write(&p, text).unwrap();
        match BowDataset::load(&p) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }
}
