//! Topic coherence (NPMI over document co-occurrence), diversity and quality.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const NPMI_EPS: f64 = 1e-12;
pub const DEFAULT_NPMI_TOP: usize = 10;
pub const DIVERSITY_TOP: usize = 25;

/// Ranked word ids per topic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSet {
    topics: Vec<Vec<usize>>,
}

impl TopicSet {
    pub fn new(topics: Vec<Vec<usize>>, n_words: usize) -> Result<Self> {
        for (k, t) in topics.iter().enumerate() {
            let mut seen = HashSet::with_capacity(t.len());
            for &w in t {
                if w >= n_words {
                    return Err(Error::input(format!("topic {k}: word id {w} outside vocabulary of {n_words}")));
                }
                if !seen.insert(w) {
                    return Err(Error::input(format!("topic {k}: word id {w} listed twice")));
                }
            }
        }
        Ok(TopicSet { topics })
    }

    pub fn topics(&self) -> &[Vec<usize>] {
        &self.topics
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    fn shortest(&self) -> usize {
        self.topics.iter().map(Vec::len).min().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub per_topic: Vec<f64>,
    pub mean: f64,
    /// Top words that never occur in the reference corpus.
    pub missing_words: Vec<usize>,
}

/// Boolean document-occurrence index over the words of interest.
struct Occurrence {
    n_docs: usize,
    docs_of: Vec<Vec<u32>>,
}

impl Occurrence {
    fn build(corpus: &Corpus, words: &BTreeSet<usize>, n_words: usize) -> Self {
        let mut slot = vec![usize::MAX; n_words];
        for (i, &w) in words.iter().enumerate() {
            slot[w] = i;
        }
        let mut docs_of = vec![Vec::new(); words.len()];
        for (d, doc) in corpus.documents.iter().enumerate() {
            let mut seen = HashSet::new();
            for &t in &doc.tokens {
                if t < n_words && slot[t] != usize::MAX && seen.insert(t) {
                    docs_of[slot[t]].push(d as u32);
                }
            }
        }
        Occurrence {
            n_docs: corpus.documents.len(),
            docs_of,
        }
    }

    fn count(&self, i: usize) -> usize {
        self.docs_of[i].len()
    }

    fn joint(&self, i: usize, j: usize) -> usize {
        let (a, b) = (&self.docs_of[i], &self.docs_of[j]);
        let (mut x, mut y, mut n) = (0, 0, 0);
        while x < a.len() && y < b.len() {
            match a[x].cmp(&b[y]) {
                std::cmp::Ordering::Less => x += 1,
                std::cmp::Ordering::Greater => y += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    x += 1;
                    y += 1;
                }
            }
        }
        n
    }
}

/// NPMI of one pair from document frequencies, clamped to [-1, 1].
///
/// Absent words count as probability `NPMI_EPS`. A pair present in every
/// document has zero self-information; it is scored 1.
pub fn npmi_from_counts(df_i: usize, df_j: usize, df_ij: usize, n_docs: usize) -> f64 {
    if df_ij == n_docs && n_docs > 0 {
        return 1.0;
    }
    let n = n_docs as f64;
    let p = |c: usize| if c == 0 { NPMI_EPS } else { c as f64 / n };
    let p_ij = df_ij as f64 / n + NPMI_EPS;
    let v = (p_ij / (p(df_i) * p(df_j))).ln() / -p_ij.ln();
    v.clamp(-1.0, 1.0)
}

pub fn npmi_coherence(topics: &TopicSet, corpus: &Corpus, top_n: usize, n_words: usize) -> Result<CoherenceReport> {
    if corpus.documents.is_empty() {
        return Err(Error::input("coherence needs a non-empty reference corpus"));
    }
    if top_n < 2 {
        return Err(Error::param(format!("top_n = {top_n}; at least two words are needed for a pair")));
    }
    if topics.is_empty() || top_n > topics.shortest() {
        return Err(Error::param(format!(
            "top_n = {top_n} exceeds the shortest topic list ({})",
            topics.shortest()
        )));
    }
    let words: BTreeSet<usize> = topics.topics.iter().flat_map(|t| t[..top_n].iter().copied()).collect();
    let occ = Occurrence::build(corpus, &words, n_words);
    let slot: Vec<usize> = {
        let mut s = vec![usize::MAX; n_words];
        for (i, &w) in words.iter().enumerate() {
            s[w] = i;
        }
        s
    };
    let missing_words: Vec<usize> = words.iter().copied().filter(|&w| occ.count(slot[w]) == 0).collect();
    if !missing_words.is_empty() {
        log::warn!("{} top words never occur in the reference corpus", missing_words.len());
    }

    let mut per_topic = Vec::with_capacity(topics.len());
    for t in &topics.topics {
        let ids: Vec<usize> = t[..top_n].iter().map(|&w| slot[w]).collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                let (i, j) = (ids[a], ids[b]);
                total += npmi_from_counts(occ.count(i), occ.count(j), occ.joint(i, j), occ.n_docs);
                pairs += 1;
            }
        }
        per_topic.push(total / pairs as f64);
    }
    let mean = per_topic.iter().sum::<f64>() / per_topic.len() as f64;
    Ok(CoherenceReport {
        per_topic,
        mean,
        missing_words,
    })
}

/// Fraction of distinct words among the pooled top-25 lists.
pub fn topic_diversity(topics: &TopicSet) -> Result<f64> {
    if topics.is_empty() {
        return Err(Error::param("diversity of an empty topic set"));
    }
    if topics.shortest() < DIVERSITY_TOP {
        return Err(Error::param(format!(
            "diversity needs {DIVERSITY_TOP} words per topic, shortest list has {}",
            topics.shortest()
        )));
    }
    let unique: HashSet<usize> = topics
        .topics
        .iter()
        .flat_map(|t| t[..DIVERSITY_TOP].iter().copied())
        .collect();
    Ok(unique.len() as f64 / (DIVERSITY_TOP * topics.len()) as f64)
}

pub fn topic_quality(tc_mean: f64, td: f64) -> f64 {
    tc_mean * td
}
