//! Vocabularies, JSON-lines corpora, and binary embedding tables.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"TVQE";
pub const EMBEDDING_VERSION: u32 = 1;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Ordered set of distinct tokens; a token's id is its position.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::format("<memory>", 0, "vocabulary is empty"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format(
                    "<memory>",
                    i + 1,
                    format!("duplicate token {t:?}"),
                ));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the tokens, each terminated by `\n`.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// One token per line; line `i` (0-based) becomes id `i`.
pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p = path_str(path);
    let mut tokens = Vec::new();
    let mut index = HashMap::new();
    for (i, line) in text.split('\n').enumerate() {
        // A trailing newline leaves one empty final piece.
        if line.is_empty() && i + 1 == text.split('\n').count() {
            break;
        }
        if line.is_empty() {
            return Err(Error::format(&p, i + 1, "empty token"));
        }
        if let Some(first) = index.insert(line.to_string(), tokens.len()) {
            return Err(Error::format(
                &p,
                i + 1,
                format!("duplicate token {line:?} (first on line {})", first + 1),
            ));
        }
        tokens.push(line.to_string());
    }
    if tokens.is_empty() {
        return Err(Error::format(&p, 0, "vocabulary file is empty"));
    }
    Ok(Vocabulary { tokens, index })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<usize>,
    pub label: Option<usize>,
}

impl Document {
    /// Documents without tokens are kept but skipped by the trainers.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub label_names: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct DocLine {
    id: String,
    tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Label ids per document, if every document carries one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.documents.iter().map(|d| d.label).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for d in &self.documents {
            let label = match (d.label, &self.label_names) {
                (Some(l), Some(names)) => Some(names[l].clone()),
                _ => None,
            };
            let line = DocLine {
                id: d.id.clone(),
                tokens: d.tokens.clone(),
                label,
            };
            serde_json::to_writer(&mut out, &line).expect("in-memory write");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSON-lines corpus, validating token ids against `vocab`.
///
/// Labels are mapped to dense ids in order of first appearance.
pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let p = path_str(path);
    let mut documents = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    let mut label_names = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DocLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(&p, i + 1, format!("malformed document: {e}")))?;
        if let Some(&bad) = parsed.tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::format(
                &p,
                i + 1,
                format!("token id {bad} out of range for vocabulary of {}", vocab.len()),
            ));
        }
        let label = parsed.label.map(|name| {
            let next = label_names.len();
            *label_ids.entry(name.clone()).or_insert_with(|| {
                label_names.push(name);
                next
            })
        });
        documents.push(Document {
            id: parsed.id,
            tokens: parsed.tokens,
            label,
        });
    }
    if documents.is_empty() {
        return Err(Error::format(&p, 0, "corpus has no documents"));
    }
    let empty = documents.iter().filter(|d| d.is_empty()).count();
    if empty > 0 {
        log::warn!("{p}: {empty} document(s) have no tokens");
    }
    Ok(Corpus {
        documents,
        label_names: (!label_names.is_empty()).then_some(label_names),
    })
}

/// One embedding row per vocabulary token.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: Tensor,
}

impl EmbeddingTable {
    pub fn new(rows: Tensor) -> Result<Self> {
        if !rows.is_finite() {
            return Err(Error::input("embedding table has non-finite entries"));
        }
        Ok(EmbeddingTable { rows })
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.rows
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.rows.len());
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.rows.values() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Parses the `TVQE` binary layout; `expected_rows` enforces the vocabulary size.
pub fn parse_embeddings(bytes: &[u8], expected_rows: Option<usize>, origin: &str) -> Result<EmbeddingTable> {
    let truncated = |msg: &str| Error::Truncated {
        path: origin.to_string(),
        message: msg.to_string(),
    };
    if bytes.len() < 16 {
        if bytes.len() >= 4 && bytes[..4] != EMBEDDING_MAGIC {
            return Err(Error::BadMagic {
                path: origin.to_string(),
                expected: EMBEDDING_MAGIC,
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(truncated("header shorter than 16 bytes"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != EMBEDDING_MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_string(),
            expected: EMBEDDING_MAGIC,
            found: magic,
        });
    }
    let version = word(4);
    if version != EMBEDDING_VERSION {
        return Err(Error::Version {
            path: origin.to_string(),
            found: version,
        });
    }
    let (count, dim) = (word(8) as usize, word(12) as usize);
    if let Some(n) = expected_rows {
        if count != n {
            return Err(Error::CountMismatch {
                path: origin.to_string(),
                expected: n,
                found: count,
            });
        }
    }
    let need = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| truncated("size overflow"))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(truncated(&format!(
            "expected {need} payload bytes, found {}",
            body.len()
        )));
    }
    if body.len() > need {
        return Err(Error::format(origin, 0, "trailing bytes after embedding payload"));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EmbeddingTable::new(Tensor::matrix(count, dim, values)?)
}

pub fn load_embeddings(path: &Path, vocab: &Vocabulary) -> Result<EmbeddingTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&bytes, Some(vocab.len()), &path_str(path))
}

/// Per-word occurrence counts of one document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordHistogram {
    pub counts: Vec<u32>,
}

impl WordHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

pub fn word_histogram(doc: &Document, vocab: &Vocabulary) -> WordHistogram {
    let mut counts = vec![0u32; vocab.len()];
    for &t in &doc.tokens {
        counts[t] += 1;
    }
    WordHistogram { counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::time::Instant;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn vocab_ids_follow_line_order() {
        let d = tmp();
        let p = d.path().join("v.txt");
        fs::write(&p, "apple\nbee\n").unwrap();
        let v = load_vocab(&p).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.id("bee"), Some(1));
        assert_eq!(v.token(0), Some("apple"));
    }

    #[test]
    fn duplicate_token_names_its_line() {
        let d = tmp();
        let p = d.path().join("v.txt");
        fs::write(&p, "apple\nbee\napple\n").unwrap();
        match load_vocab(&p) {
            Err(Error::Format { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("apple"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_vocab_file_is_rejected() {
        let d = tmp();
        let p = d.path().join("v.txt");
        fs::write(&p, "").unwrap();
        assert!(matches!(load_vocab(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn twenty_news_scale_vocab_loads_quickly() {
        let d = tmp();
        let p = d.path().join("v.txt");
        let text: String = (0..1600).map(|i| format!("word{i}\n")).collect();
        fs::write(&p, text).unwrap();
        let start = Instant::now();
        let v = load_vocab(&p).unwrap();
        assert_eq!(v.len(), 1600);
        assert!(start.elapsed().as_millis() < 50);
    }

    #[test]
    fn corpus_line_gives_histogram() {
        let d = tmp();
        let p = d.path().join("c.jsonl");
        fs::write(&p, "{\"id\":\"d0\",\"tokens\":[0,1,0]}\n").unwrap();
        let vocab = Vocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let c = load_corpus(&p, &vocab).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(word_histogram(&c.documents[0], &vocab).counts, vec![2, 1]);
        assert!(c.label_names.is_none());
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let d = tmp();
        let p = d.path().join("c.jsonl");
        fs::write(&p, "{\"id\":\"d0\",\"tokens\":[5]}\n").unwrap();
        let vocab = Vocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        assert!(matches!(load_corpus(&p, &vocab), Err(Error::Format { line: 1, .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let d = tmp();
        let p = d.path().join("c.jsonl");
        fs::write(&p, "{\"id\":\"d0\",\"tokens\":[0]}\n{\"id\": 3}\n").unwrap();
        let vocab = Vocabulary::new(vec!["a".into()]).unwrap();
        assert!(matches!(load_corpus(&p, &vocab), Err(Error::Format { line: 2, .. })));
    }

    #[test]
    fn twenty_labels_map_to_dense_ids() {
        let d = tmp();
        let p = d.path().join("c.jsonl");
        let text: String = (0..60)
            .map(|i| format!("{{\"id\":\"d{i}\",\"tokens\":[0],\"label\":\"group{}\"}}\n", i % 20))
            .collect();
        fs::write(&p, text).unwrap();
        let vocab = Vocabulary::new(vec!["a".into()]).unwrap();
        let c = load_corpus(&p, &vocab).unwrap();
        assert_eq!(c.label_names.as_ref().unwrap().len(), 20);
        assert_eq!(c.documents[21].label, Some(1));
        assert_eq!(c.documents[21].id, "d21");
    }

    #[test]
    fn empty_document_loads_and_gives_zero_histogram() {
        let d = tmp();
        let p = d.path().join("c.jsonl");
        fs::write(&p, "{\"id\":\"e\",\"tokens\":[]}\n").unwrap();
        let vocab = Vocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let c = load_corpus(&p, &vocab).unwrap();
        assert!(c.documents[0].is_empty());
        assert_eq!(word_histogram(&c.documents[0], &vocab).counts, vec![0, 0, 0]);
    }

    #[test]
    fn embeddings_decode_known_bytes() {
        let mut bytes = b"TVQE".to_vec();
        for w in [1u32, 2, 3] {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        for v in [1.0f32, -2.5, 0.125, 3.0, 0.0, -0.75] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let t = parse_embeddings(&bytes, Some(2), "mem").unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.row(0), &[1.0, -2.5, 0.125]);
        assert_eq!(t.row(1), &[3.0, 0.0, -0.75]);
        assert_eq!(t.to_bytes(), bytes);
    }

    #[test]
    fn embedding_errors_are_distinct() {
        let table = EmbeddingTable::new(Tensor::zeros(&[5, 2])).unwrap();
        let bytes = table.to_bytes();
        assert!(matches!(
            parse_embeddings(&bytes, Some(2), "m"),
            Err(Error::CountMismatch { expected: 2, found: 5, .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_embeddings(&bad, None, "m"), Err(Error::BadMagic { .. })));
        assert!(matches!(
            parse_embeddings(&bytes[..bytes.len() - 3], None, "m"),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(parse_embeddings(&bytes[..7], None, "m"), Err(Error::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn embedding_bytes_round_trip(
            rows in 1usize..6,
            dim in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values = (0..rows * dim).map(|_| rng.random::<f32>() as f64 * 8.0 - 4.0).collect();
            let table = EmbeddingTable::new(Tensor::matrix(rows, dim, values).unwrap()).unwrap();
            let bytes = table.to_bytes();
            let back = parse_embeddings(&bytes, Some(rows), "m").unwrap();
            prop_assert_eq!(&back, &table);
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn histogram_sums_to_document_length(tokens in proptest::collection::vec(0usize..7, 0..50)) {
            let vocab = Vocabulary::new((0..7).map(|i| format!("w{i}")).collect()).unwrap();
            let doc = Document { id: "d".into(), tokens: tokens.clone(), label: None };
            let h = word_histogram(&doc, &vocab);
            prop_assert_eq!(h.total(), tokens.len() as u64);
            for (w, &c) in h.counts.iter().enumerate() {
                prop_assert_eq!(c as usize, tokens.iter().filter(|&&t| t == w).count());
            }
        }
    }

    #[test]
    fn corpus_and_vocab_files_round_trip_bytewise() {
        let d = tmp();
        let (vp, cp) = (d.path().join("v.txt"), d.path().join("c.jsonl"));
        let vtext = "alpha\nbeta\ngamma\n";
        let ctext = "{\"id\":\"a\",\"tokens\":[0,2],\"label\":\"x\"}\n{\"id\":\"b\",\"tokens\":[1],\"label\":\"y\"}\n{\"id\":\"c\",\"tokens\":[]}\n";
        fs::write(&vp, vtext).unwrap();
        fs::write(&cp, ctext).unwrap();
        let v = load_vocab(&vp).unwrap();
        let c = load_corpus(&cp, &v).unwrap();
        let (vp2, cp2) = (d.path().join("v2.txt"), d.path().join("c2.jsonl"));
        v.save(&vp2).unwrap();
        c.save(&cp2).unwrap();
        assert_eq!(fs::read(&vp2).unwrap(), vtext.as_bytes());
        assert_eq!(fs::read(&cp2).unwrap(), ctext.as_bytes());
    }
}
