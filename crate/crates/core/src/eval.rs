//! Topic-quality and clustering evaluation of a trained topic model.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{
    kmeans, nmi, npmi_coherence, purity, topic_diversity, topic_quality, TopicSet, DEFAULT_NPMI_TOP, DIVERSITY_TOP,
};
use crate::topic::{ThetaMode, TopicModel};
use crate::vq::DocumentCodeHistogram;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub npmi_top: usize,
    pub kmeans_restarts: usize,
    /// Cluster count for the Km metrics; `None` uses the number of labels.
    pub clusters: Option<usize>,
    pub coherence: bool,
    pub clustering: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            npmi_top: DEFAULT_NPMI_TOP,
            kmeans_restarts: 10,
            clusters: None,
            coherence: true,
            clustering: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_topic_npmi: Vec<f64>,
    pub tc: f64,
    pub td: f64,
    pub tq: f64,
    pub km_nmi: Option<f64>,
    pub km_purity: Option<f64>,
    pub missing_words: Vec<usize>,
    pub top_words: Vec<Vec<usize>>,
    pub n_docs: usize,
    pub seed: u64,
}

/// Top `max(25, npmi_top)` words of every topic.
pub fn topic_set(model: &TopicModel, npmi_top: usize) -> Result<TopicSet> {
    let n = DIVERSITY_TOP.max(npmi_top);
    if model.n_words() < n {
        return Err(Error::param(format!(
            "evaluation needs {n} words per topic, vocabulary has {}",
            model.n_words()
        )));
    }
    let lists = (0..model.n_topics()).map(|k| model.top_words(k, n)).collect::<Result<Vec<_>>>()?;
    TopicSet::new(lists, model.n_words())
}

/// Deterministic `θ` for every histogram.
pub fn thetas(model: &TopicModel, hists: &[DocumentCodeHistogram]) -> Result<Vec<Vec<f64>>> {
    hists
        .iter()
        .map(|c| Ok(model.infer_theta(c, ThetaMode::Deterministic)?.theta))
        .collect()
}

/// Mean over `truth` of the best precision@n achieved by any learned list.
pub fn best_match_precision(learned: &[Vec<usize>], truth: &[Vec<usize>], n: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let total: f64 = truth
        .iter()
        .map(|t| {
            let t = &t[..n.min(t.len())];
            learned
                .iter()
                .map(|l| l[..n.min(l.len())].iter().filter(|w| t.contains(w)).count() as f64 / n as f64)
                .fold(0.0, f64::max)
        })
        .sum();
    total / truth.len() as f64
}

/// NPMI coherence against `reference`, diversity, quality, and k-means
/// NMI/purity of deterministic `θ` against `labels` when given.
pub fn evaluate(
    model: &TopicModel,
    reference: &Corpus,
    hists: &[DocumentCodeHistogram],
    labels: Option<&[usize]>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let ts = topic_set(model, cfg.npmi_top)?;
    let td = topic_diversity(&ts)?;
    let (per_topic, tc, missing) = if cfg.coherence {
        let r = npmi_coherence(&ts, reference, cfg.npmi_top, model.n_words())?;
        (r.per_topic, r.mean, r.missing_words)
    } else {
        (Vec::new(), 0.0, Vec::new())
    };
    let (mut km_nmi, mut km_purity) = (None, None);
    if let (true, Some(labels)) = (cfg.clustering, labels) {
        if labels.len() != hists.len() {
            return Err(Error::dim(format!("{} labels for {} documents", labels.len(), hists.len())));
        }
        let k = match cfg.clusters {
            Some(k) => k,
            None => labels.iter().max().map_or(1, |m| m + 1),
        };
        let km = kmeans(&thetas(model, hists)?, k, seed, cfg.kmeans_restarts)?;
        km_nmi = Some(nmi(&km.assignment, labels)?);
        km_purity = Some(purity(&km.assignment, labels)?);
    }
    Ok(EvalReport {
        per_topic_npmi: per_topic,
        tc,
        td,
        tq: topic_quality(tc, td),
        km_nmi,
        km_purity,
        missing_words: missing,
        top_words: ts.topics().to_vec(),
        n_docs: hists.len(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_matches_hand_count() {
        let truth = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]];
        let learned = vec![vec![4, 5, 9, 8], vec![0, 1, 2, 9], vec![7, 6, 5, 4]];
        assert_eq!(best_match_precision(&learned, &truth, 4), (0.75 + 1.0) / 2.0);
        assert_eq!(best_match_precision(&learned, &[], 4), 0.0);
    }
}
