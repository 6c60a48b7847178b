//! The topic model over codebook histograms and its BoW generation head.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::WordHistogram;
use crate::error::{Error, Result};
use crate::numerics::{
    gaussian_kl, log_softmax, reparameterize, softmax, Tape, Tensor, Var, VariationalParams, LOGVAR_MAX,
    LOGVAR_MIN,
};
use crate::vq::{Activation, DocumentCodeHistogram, Mlp};

pub const INFERENCE_HIDDEN: usize = 100;

/// Diagonal-Gaussian approximation of a symmetric Dirichlet in softmax
/// coordinates: zero mean, variance `(1 − 1/K)/a` per topic.
pub fn laplace_dirichlet_prior(n_topics: usize, concentration: f64) -> (Vec<f64>, Vec<f64>) {
    let k = n_topics as f64;
    let var = (1.0 - 1.0 / k) / concentration;
    (vec![0.0; n_topics], vec![var.ln(); n_topics])
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicModel {
    /// `K_t × N_ρ` topic weights over codes.
    pub beta_hat: Tensor,
    /// `N_w × D_ρ` projection from code-embedding space to word logits.
    pub alpha: Tensor,
    /// Frozen codebook `N_ρ × D_ρ`.
    pub rho_hat: Tensor,
    /// `N_ρ → 100 → 100 → 2·K_t`, tanh on the two hidden layers.
    pub inference: Mlp,
    pub prior_mean: Vec<f64>,
    pub prior_logvar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaSample {
    pub theta: Vec<f64>,
    pub params: VariationalParams,
    pub epsilon: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThetaMode<'a> {
    /// `θ = softmax(γ_m)`.
    Deterministic,
    Noise(&'a [f64]),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub kl: f64,
    pub codes: f64,
    pub words: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.kl + self.codes + self.words
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedDocument {
    pub words: Vec<usize>,
    pub topics: Vec<usize>,
}

/// Tape handles for the trainable tensors of a [`TopicModel`].
#[derive(Clone, Debug)]
pub struct TopicVars {
    pub beta_hat: Var,
    pub alpha: Var,
    pub rho_hat: Var,
    pub inference: Vec<Var>,
}

/// Handles produced by the taped encoder for a batch.
#[derive(Clone, Copy, Debug)]
pub struct TapedTheta {
    pub mean: Var,
    pub logvar: Var,
    pub theta: Var,
}

fn proportions(c: &DocumentCodeHistogram) -> Result<Vec<f64>> {
    let total = c.total();
    if total == 0 {
        return Err(Error::input("empty document: code histogram is all zeros"));
    }
    Ok(c.counts.iter().map(|&v| v as f64 / total as f64).collect())
}

impl TopicModel {
    /// Glorot-initialised model over a fixed codebook.
    pub fn new<R: Rng + ?Sized>(
        n_topics: usize,
        rho_hat: &Tensor,
        n_words: usize,
        prior_concentration: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if n_topics < 2 {
            return Err(Error::param(format!("need at least 2 topics, got {n_topics}")));
        }
        let (n_codes, d) = (rho_hat.rows(), rho_hat.cols());
        if n_codes == 0 || d == 0 {
            return Err(Error::param("empty codebook"));
        }
        let a = prior_concentration.unwrap_or(1.0 / n_topics as f64);
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::param(format!("prior concentration {a}")));
        }
        let (prior_mean, prior_logvar) = laplace_dirichlet_prior(n_topics, a);
        let inference = Mlp::build(
            &[n_codes, INFERENCE_HIDDEN, INFERENCE_HIDDEN, 2 * n_topics],
            Activation::Tanh,
            Activation::Identity,
            rng,
        );
        Ok(TopicModel {
            beta_hat: Tensor::glorot(n_topics, n_codes, rng),
            alpha: Tensor::glorot(n_words, d, rng),
            rho_hat: rho_hat.clone(),
            inference,
            prior_mean,
            prior_logvar,
        })
    }

    pub fn n_topics(&self) -> usize {
        self.beta_hat.rows()
    }

    pub fn n_codes(&self) -> usize {
        self.beta_hat.cols()
    }

    pub fn n_words(&self) -> usize {
        self.alpha.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.rho_hat.cols()
    }

    /// Trainable tensors: `β̂`, `α`, then the inference network.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.beta_hat, &self.alpha];
        p.extend(self.inference.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.beta_hat, &mut self.alpha];
        p.extend(self.inference.params_mut());
        p
    }

    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::dim(format!("{} tensors for {} parameters", values.len(), slots.len())));
        }
        for (dst, src) in slots.into_iter().zip(values) {
            if dst.shape() != src.shape() {
                return Err(Error::dim(format!("parameter shape {:?} vs {:?}", dst.shape(), src.shape())));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    pub fn round_f32(&mut self) {
        for p in self.params_mut() {
            *p = p.round_f32();
        }
    }

    pub fn variational_params(&self, c: &DocumentCodeHistogram) -> Result<VariationalParams> {
        if c.counts.len() != self.n_codes() {
            return Err(Error::dim(format!(
                "code histogram of length {} for {} codes",
                c.counts.len(),
                self.n_codes()
            )));
        }
        let x = Tensor::from_vec(proportions(c)?);
        let h = self.inference.forward(&x)?.into_values();
        let k = self.n_topics();
        VariationalParams::new(h[..k].to_vec(), h[k..].to_vec())
    }

    pub fn infer_theta(&self, c: &DocumentCodeHistogram, mode: ThetaMode) -> Result<ThetaSample> {
        let params = self.variational_params(c)?;
        let epsilon = match mode {
            ThetaMode::Deterministic => vec![0.0; self.n_topics()],
            ThetaMode::Noise(e) => e.to_vec(),
        };
        let z = reparameterize(&params, &epsilon)?;
        Ok(ThetaSample {
            theta: softmax(&z)?,
            params,
            epsilon,
        })
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_topics() {
            return Err(Error::dim(format!("theta of length {} for {} topics", theta.len(), self.n_topics())));
        }
        Ok(())
    }

    /// `θ·β̂·ρ̂`, the document's point in code-embedding space.
    pub fn topic_vector(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let mixed = Tensor::from_vec(theta.to_vec()).matmul(&self.beta_hat)?;
        Ok(mixed.matmul(&self.rho_hat)?.into_values())
    }

    /// `α·(ρ̂ᵀ·(β̂ᵀ·θ))`.
    pub fn doc_word_logits(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::from_vec(self.topic_vector(theta)?);
        Ok(t.matmul_t(&self.alpha, false, true)?.into_values())
    }

    /// Row `k` is `α·(ρ̂ᵀ·β_k)`.
    pub fn topic_word_logits(&self) -> Result<Tensor> {
        self.beta_hat.matmul(&self.rho_hat)?.matmul_t(&self.alpha, false, true)
    }

    /// Per-document `(l_KL, l_c, l_v)` as negative log-likelihoods.
    pub fn loss_terms(&self, c: &DocumentCodeHistogram, v: &WordHistogram, epsilon: &[f64]) -> Result<LossTerms> {
        if v.counts.len() != self.n_words() {
            return Err(Error::dim(format!(
                "word histogram of length {} for {} words",
                v.counts.len(),
                self.n_words()
            )));
        }
        if v.total() == 0 {
            return Err(Error::input("empty document: word histogram is all zeros"));
        }
        let s = self.infer_theta(c, ThetaMode::Noise(epsilon))?;
        let kl = gaussian_kl(&s.params, &self.prior_mean, &self.prior_logvar)?;
        let code_logits = Tensor::from_vec(s.theta.clone()).matmul(&self.beta_hat)?;
        let lc = log_softmax(code_logits.values())?;
        let codes = -c.counts.iter().zip(&lc).map(|(&n, l)| n as f64 * l).sum::<f64>();
        let lv = log_softmax(&self.doc_word_logits(&s.theta)?)?;
        let words = -v.counts.iter().zip(&lv).map(|(&n, l)| n as f64 * l).sum::<f64>();
        Ok(LossTerms { kl, codes, words })
    }

    /// Put the model's tensors on `tape`; `trainable` selects leaves vs constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> TopicVars {
        let put = |tape: &mut Tape, t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        TopicVars {
            beta_hat: put(tape, &self.beta_hat),
            alpha: put(tape, &self.alpha),
            rho_hat: tape.constant(self.rho_hat.clone()),
            inference: if trainable {
                self.inference.register(tape)
            } else {
                self.inference.register_frozen(tape)
            },
        }
    }

    /// Taped encoder for a batch of normalised code proportions (`B × N_ρ`)
    /// with reparameterisation noise `B × K_t`.
    pub fn tape_theta(&self, tape: &mut Tape, vars: &TopicVars, props: Tensor, eps: Tensor) -> Result<TapedTheta> {
        let k = self.n_topics();
        let x = tape.constant(props);
        let h = self.inference.tape_forward(tape, x, &vars.inference)?;
        let mean = tape.slice_cols(h, 0, k)?;
        let raw_lv = tape.slice_cols(h, k, 2 * k)?;
        let logvar = tape.clamp(raw_lv, LOGVAR_MIN, LOGVAR_MAX);
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let e = tape.constant(eps);
        let noise = tape.mul(sigma, e)?;
        let z = tape.add(mean, noise)?;
        let theta = tape.softmax_rows(z);
        Ok(TapedTheta { mean, logvar, theta })
    }

    /// Summed batch losses `(l_KL, l_c)` plus `θ` handles; `l_v` is left to
    /// the caller so the same encoder serves both generation heads.
    pub fn tape_kl_codes(
        &self,
        tape: &mut Tape,
        vars: &TopicVars,
        codes: &[&DocumentCodeHistogram],
        eps: Tensor,
    ) -> Result<(TapedTheta, Var, Var)> {
        let mut props = Vec::with_capacity(codes.len() * self.n_codes());
        let mut counts = Vec::with_capacity(codes.len() * self.n_codes());
        for c in codes {
            if c.counts.len() != self.n_codes() {
                return Err(Error::dim(format!("code histogram of length {}", c.counts.len())));
            }
            props.extend(proportions(c)?);
            counts.extend(c.as_f64());
        }
        let b = codes.len();
        let th = self.tape_theta(tape, vars, Tensor::matrix(b, self.n_codes(), props)?, eps)?;
        let kl = tape.gaussian_kl(th.mean, th.logvar, &self.prior_mean, &self.prior_logvar)?;
        let code_logits = tape.matmul(th.theta, vars.beta_hat)?;
        let lc = tape.softmax_cross_entropy(code_logits, Tensor::matrix(b, self.n_codes(), counts)?)?;
        Ok((th, kl, lc))
    }

    /// Summed `l_v` for a batch under the marginalised word head.
    pub fn tape_words(&self, tape: &mut Tape, vars: &TopicVars, theta: Var, words: &[&WordHistogram]) -> Result<Var> {
        let mut counts = Vec::with_capacity(words.len() * self.n_words());
        for v in words {
            if v.counts.len() != self.n_words() {
                return Err(Error::dim(format!("word histogram of length {}", v.counts.len())));
            }
            counts.extend(v.counts.iter().map(|&n| n as f64));
        }
        let br = tape.matmul(vars.beta_hat, vars.rho_hat)?;
        let tw = tape.matmul_t(br, vars.alpha, false, true)?;
        let logits = tape.matmul(theta, tw)?;
        tape.softmax_cross_entropy(logits, Tensor::matrix(words.len(), self.n_words(), counts)?)
    }

    /// Mean total loss over a batch and its gradients in [`TopicModel::params`] order.
    pub fn batch_loss_and_grads(
        &self,
        batch: &[(&DocumentCodeHistogram, &WordHistogram)],
        eps: Tensor,
    ) -> Result<(LossTerms, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, true);
        let codes: Vec<&DocumentCodeHistogram> = batch.iter().map(|p| p.0).collect();
        let words: Vec<&WordHistogram> = batch.iter().map(|p| p.1).collect();
        let (th, kl, lc) = self.tape_kl_codes(&mut tape, &vars, &codes, eps)?;
        let lv = self.tape_words(&mut tape, &vars, th.theta, &words)?;
        let s = tape.add(kl, lc)?;
        let s = tape.add(s, lv)?;
        let inv = 1.0 / batch.len() as f64;
        let loss = tape.scale(s, inv);
        let terms = LossTerms {
            kl: tape.scalar(kl) * inv,
            codes: tape.scalar(lc) * inv,
            words: tape.scalar(lv) * inv,
        };
        if !tape.scalar(loss).is_finite() {
            return Ok((terms, Vec::new()));
        }
        let mut g = tape.backward(loss)?;
        let mut grads = vec![g.take(vars.beta_hat), g.take(vars.alpha)];
        grads.extend(Mlp::collect_grads(&vars.inference, &mut g));
        Ok((terms, grads))
    }

    /// Ancestral BoW sampling: `z ~ Cat(θ)`, then `v ~ softmax(topic row z)`.
    pub fn sample_bow<R: Rng + ?Sized>(&self, theta: &[f64], n_words: usize, rng: &mut R) -> Result<GeneratedDocument> {
        self.check_theta(theta)?;
        let tw = self.topic_word_logits()?;
        let topic_dist = WeightedIndex::new(theta).map_err(|e| Error::input(format!("theta: {e}")))?;
        let word_dists = (0..self.n_topics())
            .map(|k| {
                let p = softmax(tw.row(k))?;
                WeightedIndex::new(&p).map_err(|e| Error::numeric(format!("topic {k} word distribution: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut doc = GeneratedDocument {
            words: Vec::with_capacity(n_words),
            topics: Vec::with_capacity(n_words),
        };
        for _ in 0..n_words {
            let z = topic_dist.sample(rng);
            doc.topics.push(z);
            doc.words.push(word_dists[z].sample(rng));
        }
        Ok(doc)
    }

    /// The `n` highest-logit words of topic `k`, lowest id first on ties.
    pub fn top_words(&self, k: usize, n: usize) -> Result<Vec<usize>> {
        if k >= self.n_topics() {
            return Err(Error::param(format!("topic {k} of {}", self.n_topics())));
        }
        let n = if n > self.n_words() {
            log::warn!("asked for {n} top words of a {}-word vocabulary", self.n_words());
            self.n_words()
        } else {
            n
        };
        let tw = self.topic_word_logits()?;
        Ok(rank_desc(tw.row(k), n))
    }
}

/// Indices of the `n` largest values, ties by lowest index.
pub fn rank_desc(values: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(k: usize, n_codes: usize, d: usize, n_words: usize, seed: u64) -> TopicModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = Tensor::randn(&[n_codes, d], 1.0, &mut rng);
        TopicModel::new(k, &rho, n_words, None, &mut rng).unwrap()
    }

    fn hist(counts: Vec<u32>) -> DocumentCodeHistogram {
        DocumentCodeHistogram { counts }
    }

    fn words(counts: Vec<u32>) -> WordHistogram {
        WordHistogram { counts }
    }

    #[test]
    fn dirichlet_prior_variance_is_k_minus_one() {
        let (m, lv) = laplace_dirichlet_prior(5, 0.2);
        assert_eq!(m, vec![0.0; 5]);
        for v in lv {
            assert!((v.exp() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_final_layer_gives_uniform_theta() {
        let mut m = model(4, 6, 3, 5, 0);
        let last = m.inference.layers.last_mut().unwrap();
        last.weight = Tensor::zeros(last.weight.shape());
        let s = m.infer_theta(&hist(vec![1, 0, 2, 0, 0, 1]), ThetaMode::Deterministic).unwrap();
        for t in &s.theta {
            assert!((t - 0.25).abs() < 1e-15);
        }
        let again = m.infer_theta(&hist(vec![1, 0, 2, 0, 0, 1]), ThetaMode::Deterministic).unwrap();
        assert_eq!(s, again);
        assert!(matches!(
            m.infer_theta(&hist(vec![0; 6]), ThetaMode::Deterministic),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn sampled_theta_mean_matches_independent_sampler() {
        use rand_distr::StandardNormal;
        let m = model(3, 5, 4, 6, 1);
        let c = hist(vec![3, 1, 0, 2, 1]);
        let p = m.variational_params(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mut mean = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut oracle = [0.0; 3];
        let mut orng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..n {
            let e: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let t = m.infer_theta(&c, ThetaMode::Noise(&e)).unwrap().theta;
            // Oracle: draw the Gaussian directly from mean and sd, then softmax.
            let z: Vec<f64> = (0..3)
                .map(|j| p.mean()[j] + (0.5 * p.log_var()[j]).exp() * orng.sample::<f64, _>(StandardNormal))
                .collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ez: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = ez.iter().sum();
            for j in 0..3 {
                mean[j] += t[j] / n as f64;
                sq[j] += t[j] * t[j] / n as f64;
                oracle[j] += ez[j] / s / n as f64;
            }
        }
        for j in 0..3 {
            let se = ((sq[j] - mean[j] * mean[j]) / n as f64).sqrt();
            // Two independent estimates: their difference has sd ≈ √2·se.
            assert!((mean[j] - oracle[j]).abs() < 3.0 * std::f64::consts::SQRT_2 * se, "topic {j}");
        }
    }

    #[test]
    fn one_hot_theta_collapses_to_topic_row() {
        let m = model(3, 5, 4, 7, 3);
        let tw = m.topic_word_logits().unwrap();
        for k in 0..3 {
            let mut th = vec![0.0; 3];
            th[k] = 1.0;
            assert_eq!(m.doc_word_logits(&th).unwrap(), tw.row(k));
        }
    }

    #[test]
    fn logits_match_three_step_products() {
        let m = model(3, 5, 4, 7, 4);
        let theta = [0.2, 0.5, 0.3];
        let got = m.doc_word_logits(&theta).unwrap();
        // β̂ᵀθ, then ρ̂ᵀ·that, then α·that, by explicit loops.
        let mut bt = vec![0.0; 5];
        for (n, b) in bt.iter_mut().enumerate() {
            for k in 0..3 {
                *b += m.beta_hat.get(k, n) * theta[k];
            }
        }
        let mut r = vec![0.0; 4];
        for (d, rv) in r.iter_mut().enumerate() {
            for n in 0..5 {
                *rv += m.rho_hat.get(n, d) * bt[n];
            }
        }
        for w in 0..7 {
            let e: f64 = (0..4).map(|d| m.alpha.get(w, d) * r[d]).sum();
            assert!((got[w] - e).abs() < 1e-10);
        }
        let tw = m.topic_word_logits().unwrap();
        for k in 0..3 {
            for w in 0..7 {
                let mut e = 0.0;
                for d in 0..4 {
                    let rb: f64 = (0..5).map(|n| m.beta_hat.get(k, n) * m.rho_hat.get(n, d)).sum();
                    e += m.alpha.get(w, d) * rb;
                }
                assert!((tw.get(k, w) - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn duplicated_topic_rows_give_duplicated_logits() {
        let mut m = model(3, 5, 4, 7, 5);
        let row0 = m.beta_hat.row(0).to_vec();
        m.beta_hat.row_mut(2).copy_from_slice(&row0);
        let tw = m.topic_word_logits().unwrap();
        assert_eq!(tw.row(0), tw.row(2));
    }

    #[test]
    fn uniform_model_single_token_costs_log_vocab() {
        let mut m = model(3, 5, 4, 12, 6);
        m.alpha = Tensor::zeros(&[12, 4]);
        let mut v = vec![0; 12];
        v[4] = 1;
        let l = m.loss_terms(&hist(vec![1, 0, 0, 0, 0]), &words(v), &[0.3, -0.1, 0.5]).unwrap();
        assert!((l.words - (12f64).ln()).abs() < 1e-10);
        let logits = m.doc_word_logits(&[0.2, 0.3, 0.5]).unwrap();
        assert!(logits.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kl_vanishes_at_the_prior() {
        let mut m = model(3, 5, 4, 6, 7);
        // Final layer outputs exactly (prior mean, prior logvar) via its bias.
        let last = m.inference.layers.last_mut().unwrap();
        last.weight = Tensor::zeros(last.weight.shape());
        let mut b = m.prior_mean.clone();
        b.extend(m.prior_logvar.clone());
        last.bias = Tensor::from_vec(b);
        let l = m.loss_terms(&hist(vec![1, 2, 0, 0, 1]), &words(vec![1, 0, 0, 0, 0, 2]), &[0.0; 3]).unwrap();
        assert_eq!(l.kl, 0.0);
        assert!(l.codes >= 0.0 && l.words >= 0.0);
    }

    #[test]
    fn loss_terms_match_scalar_recomputation() {
        let m = model(3, 5, 4, 6, 8);
        let c = hist(vec![2, 0, 1, 3, 0]);
        let v = words(vec![1, 0, 2, 0, 0, 1]);
        let eps = [0.4, -1.2, 0.7];
        let l = m.loss_terms(&c, &v, &eps).unwrap();

        let props: Vec<f64> = c.counts.iter().map(|&x| x as f64 / 6.0).collect();
        let mut h = props.clone();
        for layer in &m.inference.layers {
            let mut out = vec![0.0; layer.fan_out()];
            for (j, o) in out.iter_mut().enumerate() {
                let mut s = layer.bias.values()[j];
                for (i, x) in h.iter().enumerate() {
                    s += x * layer.weight.get(i, j);
                }
                *o = if layer.activation == Activation::Tanh { s.tanh() } else { s };
            }
            h = out;
        }
        let (mu, lv) = (&h[..3], &h[3..]);
        let mut kl = 0.0;
        for j in 0..3 {
            let (pm, plv) = (m.prior_mean[j], m.prior_logvar[j]);
            kl += 0.5 * (plv - lv[j] + (lv[j].exp() + (mu[j] - pm).powi(2)) / plv.exp() - 1.0);
        }
        let z: Vec<f64> = (0..3).map(|j| mu[j] + (0.5 * lv[j]).exp() * eps[j]).collect();
        let ez: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let theta: Vec<f64> = ez.iter().map(|v| v / ez.iter().sum::<f64>()).collect();
        let cl: Vec<f64> = (0..5).map(|n| (0..3).map(|k| theta[k] * m.beta_hat.get(k, n)).sum()).collect();
        let lse_c = cl.iter().map(|v| v.exp()).sum::<f64>().ln();
        let codes: f64 = -(0..5).map(|n| c.counts[n] as f64 * (cl[n] - lse_c)).sum::<f64>();
        let wl = m.doc_word_logits(&theta).unwrap();
        let lse_w = wl.iter().map(|v| v.exp()).sum::<f64>().ln();
        let wd: f64 = -(0..6).map(|w| v.counts[w] as f64 * (wl[w] - lse_w)).sum::<f64>();
        assert!((l.kl - kl).abs() < 1e-10);
        assert!((l.codes - codes).abs() < 1e-10);
        assert!((l.words - wd).abs() < 1e-10);
    }

    #[test]
    fn taped_batch_loss_equals_per_document_terms() {
        let m = model(3, 5, 4, 6, 9);
        let cs = [hist(vec![2, 0, 1, 3, 0]), hist(vec![0, 1, 0, 0, 4])];
        let vs = [words(vec![1, 0, 2, 0, 0, 1]), words(vec![0, 3, 0, 1, 0, 0])];
        let eps = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 1.0, -0.5, 0.0]).unwrap();
        let batch: Vec<_> = cs.iter().zip(&vs).collect();
        let (t, _) = m.batch_loss_and_grads(&batch, eps.clone()).unwrap();
        let a = m.loss_terms(&cs[0], &vs[0], eps.row(0)).unwrap();
        let b = m.loss_terms(&cs[1], &vs[1], eps.row(1)).unwrap();
        assert!((t.total() - (a.total() + b.total()) / 2.0).abs() < 1e-10);
        assert!((t.kl - (a.kl + b.kl) / 2.0).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = model(3, 8, 4, 12, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cs: Vec<_> = (0..5).map(|_| hist((0..8).map(|_| rng.random_range(0..4)).collect())).collect();
        let vs: Vec<_> = (0..5).map(|_| words((0..12).map(|_| rng.random_range(0..3)).collect())).collect();
        let cs: Vec<_> = cs
            .into_iter()
            .map(|mut c| {
                c.counts[0] += 1;
                c
            })
            .collect();
        let eps = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let batch: Vec<_> = cs.iter().zip(&vs).collect();
        let params: Vec<Tensor> = m.params().into_iter().cloned().collect();
        let err = grad_check(
            |p| {
                let mut mm = m.clone();
                mm.set_params(p)?;
                let (t, g) = mm.batch_loss_and_grads(&batch, eps.clone())?;
                Ok((t.total(), g))
            },
            &params,
            &GradCheck {
                eps: 1e-3,
                five_point: true,
                ..GradCheck::default()
            },
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn one_hot_theta_samples_only_that_topic() {
        let m = model(3, 5, 4, 7, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = m.sample_bow(&[0.0, 0.0, 1.0], 200, &mut rng).unwrap();
        assert!(d.topics.iter().all(|&z| z == 2));
        assert_eq!(d.words.len(), 200);
    }

    #[test]
    fn dominant_word_is_always_sampled() {
        let mut m = model(2, 3, 2, 5, 13);
        m.alpha = Tensor::zeros(&[5, 2]);
        m.alpha.set(3, 0, 1e4);
        m.rho_hat = Tensor::matrix(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        m.beta_hat = Tensor::filled(&[2, 3], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = m.sample_bow(&[0.5, 0.5], 500, &mut rng).unwrap();
        assert!(d.words.iter().all(|&w| w == 3));
    }

    #[test]
    fn word_frequencies_match_softmax_within_three_se() {
        let m = model(2, 4, 3, 6, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let d = m.sample_bow(&[1.0, 0.0], n, &mut rng).unwrap();
        let p = softmax(m.topic_word_logits().unwrap().row(0)).unwrap();
        let mut freq = vec![0usize; 6];
        for &w in &d.words {
            freq[w] += 1;
        }
        for w in 0..6 {
            let se = (p[w] * (1.0 - p[w]) / n as f64).sqrt();
            assert!((freq[w] as f64 / n as f64 - p[w]).abs() < 3.0 * se + 1e-12, "word {w}");
        }
    }

    #[test]
    fn top_words_match_full_sort_and_break_ties_by_id() {
        assert_eq!(rank_desc(&[1.0, 3.0, 3.0, 0.0], 3), vec![1, 2, 0]);
        let m = model(3, 5, 4, 9, 15);
        let all = m.top_words(1, 9).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..9).collect::<Vec<_>>());
        let row = m.topic_word_logits().unwrap().row(1).to_vec();
        let mut oracle: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(m.top_words(1, 4).unwrap(), oracle[..4].iter().map(|p| p.1).collect::<Vec<_>>());
        assert_eq!(m.top_words(1, 50).unwrap().len(), 9);
        assert!(m.top_words(3, 2).is_err());
    }

    #[test]
    fn theta_lies_on_the_simplex() {
        let m = model(4, 6, 3, 5, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = hist((0..6).map(|_| rng.random_range(0..5) + 1).collect());
            let e: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = m.infer_theta(&c, ThetaMode::Noise(&e)).unwrap().theta;
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(t.iter().all(|&x| x >= 0.0));
        }
    }
}
