//! The `TVQA` prior file and the JSON-lines sequence dataset.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prior::{CodeSequence, SequencePrior};
use super::train::ArConfig;
use crate::error::{Error, Result};
use crate::format::{hex, Container};
use crate::topic::TopicModel;

pub const AR_MAGIC: [u8; 4] = *b"TVQA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArHeader {
    pub window: usize,
    pub length: usize,
    pub n_codes: usize,
    pub width: usize,
    /// Hex SHA-256 of the topic model the prior was trained against.
    pub topic_hash: Option<String>,
    pub config: ArConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArFile {
    pub prior: SequencePrior,
    pub header: ArHeader,
}

impl ArFile {
    pub fn new(prior: SequencePrior, config: ArConfig, topic: Option<&TopicModel>) -> Self {
        ArFile {
            header: ArHeader {
                window: prior.window,
                length: prior.length(),
                n_codes: prior.n_codes(),
                width: prior.width(),
                topic_hash: topic.map(|m| hex(&m.hash())),
                config,
            },
            prior,
        }
    }

    /// Errors with a compatibility failure if `topic` is not the model
    /// recorded at training time.
    pub fn check_topic(&self, topic: Option<&TopicModel>) -> Result<()> {
        match (&self.header.topic_hash, topic) {
            (Some(h), Some(m)) if *h != hex(&m.hash()) => Err(Error::Compatibility(format!(
                "sequence prior expects topic model {h}, supplied model hashes to {}",
                hex(&m.hash())
            ))),
            (Some(_), None) => Err(Error::Compatibility("sequence prior is topic-conditioned; no topic model supplied".into())),
            _ => Ok(()),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(AR_MAGIC);
        c.push_json("header", &self.header);
        let p = &self.prior;
        c.push_tensor("code_emb", &p.code_emb);
        c.push_tensor("pos_emb", &p.pos_emb);
        c.push_tensor("w1", &p.w1);
        c.push_tensor("b1", &p.b1);
        if let Some(w) = &p.w_topic {
            c.push_tensor("w_topic", w);
        }
        c.push_tensor("w2", &p.w2);
        c.push_tensor("b2", &p.b2);
        c
    }

    pub fn from_container(c: &Container, origin: &str) -> Result<Self> {
        let header: ArHeader = c.json("header")?;
        let prior = SequencePrior {
            code_emb: c.tensor("code_emb")?,
            pos_emb: c.tensor("pos_emb")?,
            w1: c.tensor("w1")?,
            b1: c.tensor("b1")?,
            w_topic: if header.topic_hash.is_some() {
                Some(c.tensor("w_topic")?)
            } else {
                None
            },
            w2: c.tensor("w2")?,
            b2: c.tensor("b2")?,
            window: header.window,
        };
        let d = prior.width();
        if prior.n_codes() != header.n_codes
            || prior.length() != header.length
            || d != header.width
            || prior.code_emb.rows() != header.n_codes + 1
            || prior.code_emb.cols() != d
            || prior.pos_emb.cols() != d
            || prior.w1.rows() != header.window * d
            || prior.w1.cols() != d
            || prior.w_topic.as_ref().is_some_and(|w| w.cols() != d)
        {
            return Err(Error::format(origin, 0, "stored tensors disagree with header"));
        }
        Ok(ArFile { prior, header })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path, AR_MAGIC)?;
        ArFile::from_container(&c, &path.display().to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceDataset {
    pub n_codes: usize,
    pub length: usize,
    pub ids: Vec<String>,
    pub sequences: Vec<CodeSequence>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    n_codes: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    id: String,
    indices: Vec<usize>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let header = DatasetHeader {
            n_codes: self.n_codes,
            length: self.length,
        };
        serde_json::to_writer(&mut out, &header).expect("in-memory write");
        out.push(b'\n');
        for (id, s) in self.ids.iter().zip(&self.sequences) {
            let line = SequenceLine {
                id: id.clone(),
                indices: s.indices.clone(),
            };
            serde_json::to_writer(&mut out, &line).expect("in-memory write");
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
        let mut lines = BufReader::new(file).lines().enumerate().filter(|(_, l)| match l {
            Ok(s) => !s.trim().is_empty(),
            Err(_) => true,
        });
        let (_, first) = lines.next().ok_or_else(|| Error::format(&p, 0, "sequence file is empty"))?;
        let first = first.map_err(|e| Error::io(path, e))?;
        let header: DatasetHeader = serde_json::from_str(&first)
            .map_err(|e| Error::format(&p, 1, format!("malformed header: {e}")))?;
        if header.n_codes == 0 || header.length == 0 {
            return Err(Error::format(&p, 1, "header needs positive n_codes and length"));
        }
        let mut ds = SequenceDataset {
            n_codes: header.n_codes,
            length: header.length,
            ids: Vec::new(),
            sequences: Vec::new(),
        };
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            let parsed: SequenceLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(&p, i + 1, format!("malformed sequence: {e}")))?;
            if parsed.indices.len() != header.length {
                return Err(Error::format(
                    &p,
                    i + 1,
                    format!("sequence of length {}, header says {}", parsed.indices.len(), header.length),
                ));
            }
            let seq = CodeSequence::new(parsed.indices, header.n_codes).map_err(|e| Error::format(&p, i + 1, e.to_string()))?;
            ds.ids.push(parsed.id);
            ds.sequences.push(seq);
        }
        if ds.is_empty() {
            return Err(Error::format(&p, 0, "sequence file has no sequences"));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn parts() -> (ArFile, TopicModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rho = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let mut m = TopicModel::new(2, &rho, 0, None, &mut rng).unwrap();
        m.round_f32();
        let mut p = SequencePrior::new(4, 5, 3, 6, Some(2), &mut rng).unwrap();
        for t in p.params_mut() {
            *t = Tensor::randn(t.shape(), 1.0, &mut rng);
        }
        p.round_f32();
        (ArFile::new(p, ArConfig::default(), Some(&m)), m)
    }

    #[test]
    fn prior_file_round_trips_bit_exactly() {
        let (f, m) = parts();
        let bytes = f.to_container().to_bytes();
        let back = ArFile::from_container(&Container::parse(&bytes, AR_MAGIC, "a").unwrap(), "a").unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_container().to_bytes(), bytes);
        back.check_topic(Some(&m)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut plain = SequencePrior::new(4, 5, 3, 6, None, &mut rng).unwrap();
        plain.round_f32();
        let pf = ArFile::new(plain, ArConfig::default(), None);
        let bytes = pf.to_container().to_bytes();
        let back = ArFile::from_container(&Container::parse(&bytes, AR_MAGIC, "a").unwrap(), "a").unwrap();
        assert_eq!(back, pf);
        back.check_topic(None).unwrap();
    }

    #[test]
    fn different_topic_model_is_a_compatibility_error() {
        let (f, mut m) = parts();
        m.beta_hat.values_mut()[0] += 1.0;
        assert_eq!(f.check_topic(Some(&m)).unwrap_err().exit_code(), 3);
        assert_eq!(f.check_topic(None).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn dataset_round_trips_and_validates() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("s.jsonl");
        let ds = SequenceDataset {
            n_codes: 3,
            length: 2,
            ids: vec!["a".into(), "b".into()],
            sequences: vec![CodeSequence { indices: vec![0, 2] }, CodeSequence { indices: vec![1, 1] }],
        };
        ds.save(&p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "{\"n_codes\":3,\"length\":2}\n{\"id\":\"a\",\"indices\":[0,2]}\n{\"id\":\"b\",\"indices\":[1,1]}\n"
        );
        assert_eq!(SequenceDataset::load(&p).unwrap(), ds);

        for (body, line) in [
            ("{\"n_codes\":3,\"length\":2}\n{\"id\":\"a\",\"indices\":[0,3]}\n", 2),
            ("{\"n_codes\":3,\"length\":2}\n{\"id\":\"a\",\"indices\":[0]}\n", 2),
            ("{\"n_codes\":3,\"length\":2}\nnot json\n", 2),
        ] {
            std::fs::write(&p, body).unwrap();
            match SequenceDataset::load(&p) {
                Err(Error::Format { line: l, .. }) => assert_eq!(l, line),
                other => panic!("{other:?}"),
            }
        }
    }
}
