//! Fixed-window causal MLP over codebook indices, optionally conditioned on a
//! document's topic vector `θ·β̂·ρ̂`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, softmax, Tape, Tensor, Var};
use crate::topic::TopicModel;
use crate::vq::{Codebook, VqAutoencoder};

pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_WIDTH: usize = 64;

/// Ordered code indices of one document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeSequence {
    pub indices: Vec<usize>,
}

impl CodeSequence {
    pub fn new(indices: Vec<usize>, n_codes: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_codes) {
            return Err(Error::input(format!("code index {bad} out of range for {n_codes} codes")));
        }
        Ok(CodeSequence { indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Position `n` sees indices `n−H..n`, padded on the left with a start row,
/// plus a learned position embedding and the projected topic vector:
///
/// `h_n = relu(concat(E[c_{n−H}], …, E[c_{n−1}])·W1 + b1 + P[n] + ρ_θ·W_θ)`,
/// `logits_n = h_n·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePrior {
    /// `(N_ρ + 1) × D`; the last row is the start/pad token.
    pub code_emb: Tensor,
    /// `N × D`.
    pub pos_emb: Tensor,
    /// `(H·D) × D`.
    pub w1: Tensor,
    pub b1: Tensor,
    /// `D_ρ × D`, present for topic-conditioned priors.
    pub w_topic: Option<Tensor>,
    /// `D × N_ρ`, zero at initialisation so the untrained prior is uniform.
    pub w2: Tensor,
    pub b2: Tensor,
    pub window: usize,
}

/// Tape handles for a prior's tensors, in [`SequencePrior::params`] order.
#[derive(Clone, Debug)]
pub struct PriorVars {
    pub code_emb: Var,
    pub pos_emb: Var,
    pub w1: Var,
    pub b1: Var,
    pub w_topic: Option<Var>,
    pub w2: Var,
    pub b2: Var,
}

/// A sampled sequence with the log-probability of each drawn index.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSequence {
    pub sequence: CodeSequence,
    pub log_probs: Vec<f64>,
}

impl SequencePrior {
    /// `topic_dim` is `D_ρ` for a conditioned prior, `None` otherwise.
    pub fn new<R: Rng + ?Sized>(
        n_codes: usize,
        length: usize,
        window: usize,
        width: usize,
        topic_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if n_codes == 0 || length == 0 || window == 0 || width == 0 {
            return Err(Error::param(format!(
                "sequence prior needs positive sizes: codes {n_codes}, length {length}, window {window}, width {width}"
            )));
        }
        if topic_dim == Some(0) {
            return Err(Error::param("topic dimension 0"));
        }
        Ok(SequencePrior {
            code_emb: Tensor::randn(&[n_codes + 1, width], 0.1, rng),
            pos_emb: Tensor::randn(&[length, width], 0.1, rng),
            w1: Tensor::glorot(window * width, width, rng),
            b1: Tensor::zeros(&[1, width]),
            w_topic: topic_dim.map(|d| Tensor::glorot(d, width, rng)),
            w2: Tensor::zeros(&[width, n_codes]),
            b2: Tensor::zeros(&[1, n_codes]),
            window,
        })
    }

    pub fn n_codes(&self) -> usize {
        self.w2.cols()
    }

    pub fn length(&self) -> usize {
        self.pos_emb.rows()
    }

    pub fn width(&self) -> usize {
        self.w2.rows()
    }

    pub fn is_conditioned(&self) -> bool {
        self.w_topic.is_some()
    }

    pub fn topic_dim(&self) -> Option<usize> {
        self.w_topic.as_ref().map(Tensor::rows)
    }

    fn pad(&self) -> usize {
        self.n_codes()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.code_emb, &self.pos_emb, &self.w1, &self.b1];
        p.extend(self.w_topic.as_ref());
        p.push(&self.w2);
        p.push(&self.b2);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.code_emb, &mut self.pos_emb, &mut self.w1, &mut self.b1];
        p.extend(self.w_topic.as_mut());
        p.push(&mut self.w2);
        p.push(&mut self.b2);
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

    pub fn register(&self, tape: &mut Tape) -> PriorVars {
        PriorVars {
            code_emb: tape.leaf(self.code_emb.clone()),
            pos_emb: tape.leaf(self.pos_emb.clone()),
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w_topic: self.w_topic.as_ref().map(|w| tape.leaf(w.clone())),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    pub fn collect_grads(vars: &PriorVars, g: &mut crate::numerics::Gradients) -> Vec<Tensor> {
        let mut out = vec![g.take(vars.code_emb), g.take(vars.pos_emb), g.take(vars.w1), g.take(vars.b1)];
        if let Some(w) = vars.w_topic {
            out.push(g.take(w));
        }
        out.push(g.take(vars.w2));
        out.push(g.take(vars.b2));
        out
    }

    fn check_sequence(&self, seq: &[usize]) -> Result<()> {
        if seq.len() != self.length() {
            return Err(Error::dim(format!(
                "sequence of length {} for a prior over length {}",
                seq.len(),
                self.length()
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&i| i >= self.n_codes()) {
            return Err(Error::input(format!("code index {bad} out of range for {} codes", self.n_codes())));
        }
        Ok(())
    }

    /// Embedding-table rows visible at position `n`, oldest first.
    fn window_rows<'a>(&self, history: &'a [usize], n: usize) -> impl Iterator<Item = usize> + 'a {
        let h = self.window;
        let start = n as isize - h as isize;
        let pad = self.pad();
        let hist = &history[..n];
        (0..h).map(move |j| {
            let p = start + j as isize;
            if p < 0 {
                pad
            } else {
                hist[p as usize]
            }
        })
    }

    /// `ρ_θ = θ·β̂·ρ̂` for a conditioned prior; `None` for an unconditioned one.
    pub fn condition(&self, cond: Option<(&TopicModel, &[f64])>) -> Result<Option<Vec<f64>>> {
        match (&self.w_topic, cond) {
            (None, None) => Ok(None),
            (None, Some(_)) => Err(Error::param("unconditioned prior given a topic vector")),
            (Some(_), None) => Err(Error::param("topic-conditioned prior needs a topic model and theta")),
            (Some(w), Some((model, theta))) => {
                let v = model.topic_vector(theta)?;
                if v.len() != w.rows() {
                    return Err(Error::dim(format!(
                        "topic vector of length {} for a prior expecting {}",
                        v.len(),
                        w.rows()
                    )));
                }
                Ok(Some(v))
            }
        }
    }

    /// Logits for position `n` given `history[..n]`; `topic` is `ρ_θ`.
    pub fn step_logits(&self, history: &[usize], n: usize, topic: Option<&[f64]>) -> Result<Vec<f64>> {
        if n >= self.length() || history.len() < n {
            return Err(Error::dim(format!(
                "position {n} with {} known indices, sequence length {}",
                history.len(),
                self.length()
            )));
        }
        if topic.is_some() != self.is_conditioned() {
            return Err(Error::param("topic vector presence does not match the prior"));
        }
        if let Some(&bad) = history[..n].iter().find(|&&c| c >= self.n_codes()) {
            return Err(Error::input(format!("code index {bad} out of range for {} codes", self.n_codes())));
        }
        let d = self.width();
        let mut h: Vec<f64> = self.b1.values().iter().zip(self.pos_emb.row(n)).map(|(b, p)| b + p).collect();
        if let (Some(w), Some(t)) = (&self.w_topic, topic) {
            let proj = Tensor::from_vec(t.to_vec()).matmul(w)?;
            h.iter_mut().zip(proj.values()).for_each(|(a, b)| *a += b);
        }
        for (j, row) in self.window_rows(history, n).enumerate() {
            let e = self.code_emb.row(row);
            for (i, &ei) in e.iter().enumerate() {
                if ei == 0.0 {
                    continue;
                }
                let w = self.w1.row(j * d + i);
                h.iter_mut().zip(w).for_each(|(a, b)| *a += ei * b);
            }
        }
        let mut logits = self.b2.values().to_vec();
        for (i, &hi) in h.iter().enumerate() {
            let hi = hi.max(0.0);
            if hi == 0.0 {
                continue;
            }
            logits.iter_mut().zip(self.w2.row(i)).for_each(|(a, b)| *a += hi * b);
        }
        Ok(logits)
    }

    /// `N × N_ρ` teacher-forced logits.
    pub fn sequence_logits(&self, seq: &CodeSequence, cond: Option<(&TopicModel, &[f64])>) -> Result<Tensor> {
        self.check_sequence(&seq.indices)?;
        let topic = self.condition(cond)?;
        let mut values = Vec::with_capacity(self.length() * self.n_codes());
        for n in 0..self.length() {
            values.extend(self.step_logits(&seq.indices, n, topic.as_deref())?);
        }
        Tensor::matrix(self.length(), self.n_codes(), values)
    }

    /// Mean negative log-likelihood per position, in nats.
    pub fn ar_nll(&self, seq: &CodeSequence, cond: Option<(&TopicModel, &[f64])>) -> Result<f64> {
        let logits = self.sequence_logits(seq, cond)?;
        let mut total = 0.0;
        for (n, &c) in seq.indices.iter().enumerate() {
            total -= log_softmax(logits.row(n))?[c];
        }
        Ok(total / self.length() as f64)
    }

    /// Taped teacher-forced logits for a batch, `(B·N) × N_ρ` with rows in
    /// document-major order. `topic` is the `B × D_ρ` matrix of `ρ_θ` rows.
    pub fn tape_logits(&self, tape: &mut Tape, vars: &PriorVars, seqs: &[&[usize]], topic: Option<Var>) -> Result<Var> {
        let n_pos = self.length();
        let mut rows = Vec::with_capacity(seqs.len() * n_pos * self.window);
        for s in seqs {
            self.check_sequence(s)?;
            for n in 0..n_pos {
                rows.extend(self.window_rows(s, n));
            }
        }
        let ctx = tape.gather(vars.code_emb, rows, self.window)?;
        let z = tape.matmul(ctx, vars.w1)?;
        let z = tape.add_row(z, vars.b1)?;
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..n_pos).collect();
        let pos = tape.gather(vars.pos_emb, positions, 1)?;
        let mut z = tape.add(z, pos)?;
        match (vars.w_topic, topic) {
            (Some(w), Some(t)) => {
                let proj = tape.matmul(t, w)?;
                let doc_of_row: Vec<usize> = (0..seqs.len()).flat_map(|b| std::iter::repeat_n(b, n_pos)).collect();
                let per_row = tape.gather(proj, doc_of_row, 1)?;
                z = tape.add(z, per_row)?;
            }
            (None, None) => {}
            _ => return Err(Error::param("topic input does not match the prior")),
        }
        let h = tape.relu(z);
        let logits = tape.matmul(h, vars.w2)?;
        tape.add_row(logits, vars.b2)
    }

    /// Summed teacher-forced cross-entropy over every position of the batch.
    pub fn tape_nll(&self, tape: &mut Tape, vars: &PriorVars, seqs: &[&[usize]], topic: Option<Var>) -> Result<Var> {
        let logits = self.tape_logits(tape, vars, seqs, topic)?;
        let k = self.n_codes();
        let mut targets = Tensor::zeros(&[seqs.len() * self.length(), k]);
        for (r, &c) in seqs.iter().flat_map(|s| s.iter()).enumerate() {
            targets.set(r, c, 1.0);
        }
        tape.softmax_cross_entropy(logits, targets)
    }

    /// Ancestral sampling, one position at a time.
    pub fn sample_sequence<R: Rng + ?Sized>(
        &self,
        cond: Option<(&TopicModel, &[f64])>,
        rng: &mut R,
    ) -> Result<SampledSequence> {
        let topic = self.condition(cond)?;
        let mut indices = Vec::with_capacity(self.length());
        let mut log_probs = Vec::with_capacity(self.length());
        for n in 0..self.length() {
            let logits = self.step_logits(&indices, n, topic.as_deref())?;
            let p = softmax(&logits)?;
            let dist = WeightedIndex::new(&p).map_err(|e| Error::numeric(format!("position {n}: {e}")))?;
            let c = dist.sample(rng);
            log_probs.push(log_softmax(&logits)?[c]);
            indices.push(c);
        }
        Ok(SampledSequence {
            sequence: CodeSequence { indices },
            log_probs,
        })
    }
}

/// Decoder output for each position's codebook row.
pub fn decode_sequence(seq: &CodeSequence, cb: &Codebook, ae: &VqAutoencoder) -> Result<Vec<Vec<f64>>> {
    if cb.dim() != ae.latent_dim() {
        return Err(Error::dim(format!(
            "codebook rows of dimension {} for a decoder expecting {}",
            cb.dim(),
            ae.latent_dim()
        )));
    }
    seq.indices
        .iter()
        .map(|&i| {
            if i >= cb.n_codes() {
                return Err(Error::input(format!("code index {i} out of range for {} codes", cb.n_codes())));
            }
            ae.decode(cb.row(i))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vq::{Activation, Linear, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A prior with every tensor randomised, so no logit is trivially zero.
    fn random_prior(n_codes: usize, length: usize, window: usize, topic_dim: Option<usize>, seed: u64) -> SequencePrior {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SequencePrior::new(n_codes, length, window, 6, topic_dim, &mut rng).unwrap();
        for t in p.params_mut() {
            *t = Tensor::randn(t.shape(), 0.7, &mut rng);
        }
        p
    }

    fn topic(n_codes: usize, dim: usize) -> TopicModel {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rho = Tensor::randn(&[n_codes, dim], 1.0, &mut rng);
        TopicModel::new(3, &rho, 0, None, &mut rng).unwrap()
    }

    #[test]
    fn untrained_prior_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SequencePrior::new(20, 16, 8, 32, None, &mut rng).unwrap();
        let seq = CodeSequence::new((0..16).map(|i| (i * 7) % 20).collect(), 20).unwrap();
        let nll = p.ar_nll(&seq, None).unwrap();
        assert!((nll - 20f64.ln()).abs() < 1e-12, "{nll}");
    }

    #[test]
    fn logits_never_see_the_future() {
        let (n_codes, length) = (3, 5);
        let m = topic(n_codes, 4);
        let theta = [0.2, 0.5, 0.3];
        for (window, cond) in [(2, false), (8, true)] {
            let p = random_prior(n_codes, length, window, cond.then_some(4), 1);
            let c = cond.then_some((&m, &theta[..]));
            let base = CodeSequence::new(vec![0, 2, 1, 1, 0], n_codes).unwrap();
            let ref_logits = p.sequence_logits(&base, c).unwrap();
            for pos in 0..length {
                for v in 0..n_codes {
                    let mut s = base.clone();
                    s.indices[pos] = v;
                    let l = p.sequence_logits(&s, c).unwrap();
                    for n in 0..=pos {
                        assert_eq!(l.row(n), ref_logits.row(n), "perturbing {pos} moved position {n}");
                    }
                }
            }
        }
    }

    #[test]
    fn taped_logits_match_stepwise_logits() {
        let m = topic(5, 3);
        let thetas = [[0.1, 0.6, 0.3], [0.7, 0.2, 0.1]];
        let p = random_prior(5, 7, 3, Some(3), 2);
        let seqs = [vec![0, 1, 2, 3, 4, 0, 1], vec![4, 4, 3, 3, 2, 2, 1]];
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let rows: Vec<Vec<f64>> = thetas.iter().map(|t| m.topic_vector(t).unwrap()).collect();
        let tv = tape.constant(Tensor::from_rows(&rows).unwrap());
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let l = p.tape_logits(&mut tape, &vars, &refs, Some(tv)).unwrap();
        let taped = tape.value(l).clone();
        for (b, s) in seqs.iter().enumerate() {
            let direct = p
                .sequence_logits(&CodeSequence::new(s.clone(), 5).unwrap(), Some((&m, &thetas[b])))
                .unwrap();
            for n in 0..7 {
                for (x, y) in taped.row(b * 7 + n).iter().zip(direct.row(n)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sampled_log_probs_replay_under_teacher_forcing() {
        let m = topic(6, 3);
        let theta = [0.3, 0.3, 0.4];
        let p = random_prior(6, 10, 4, Some(3), 3);
        let mut total = 0.0;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = p.sample_sequence(Some((&m, &theta)), &mut rng).unwrap();
            let replay = p.ar_nll(&s.sequence, Some((&m, &theta))).unwrap() * 10.0;
            let sampled: f64 = -s.log_probs.iter().sum::<f64>();
            assert!((replay - sampled).abs() < 1e-10, "{replay} vs {sampled}");
            assert!(replay.is_finite());
            total += replay / 10.0;
            let mut again = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(p.sample_sequence(Some((&m, &theta)), &mut again).unwrap(), s);
        }
        assert!(total / 50.0 <= 6f64.ln() + 1e-9);
    }

    #[test]
    fn first_position_frequencies_match_softmax() {
        let p = random_prior(5, 2, 2, None, 4);
        let probs = softmax(&p.step_logits(&[], 0, None).unwrap()).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..n {
            counts[p.sample_sequence(None, &mut rng).unwrap().sequence.indices[0]] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let f = c as f64 / n as f64;
            let se = (probs[k] * (1.0 - probs[k]) / n as f64).sqrt();
            assert!((f - probs[k]).abs() < 3.0 * se, "code {k}: {f} vs {}", probs[k]);
        }
    }

    #[test]
    fn conditioning_and_ranges_are_checked() {
        let m = topic(4, 2);
        let cond = random_prior(4, 3, 2, Some(2), 6);
        let plain = random_prior(4, 3, 2, None, 6);
        let s = CodeSequence::new(vec![0, 1, 2], 4).unwrap();
        assert!(cond.ar_nll(&s, None).is_err());
        assert!(plain.ar_nll(&s, Some((&m, &[0.2, 0.3, 0.5]))).is_err());
        assert!(matches!(CodeSequence::new(vec![4], 4), Err(Error::Input(_))));
        let bad = CodeSequence { indices: vec![0, 9, 1] };
        assert!(matches!(plain.ar_nll(&bad, None), Err(Error::Input(_))));
        let short = CodeSequence { indices: vec![0, 1] };
        assert!(matches!(plain.ar_nll(&short, None), Err(Error::Dimension(_))));
    }

    fn identity(d: usize) -> Linear {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        Linear::new(w, Tensor::zeros(&[d]), Activation::Identity).unwrap()
    }

    #[test]
    fn identity_decoder_returns_codebook_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cb = Codebook::new(Tensor::randn(&[5, 3], 1.0, &mut rng)).unwrap();
        let ae = VqAutoencoder::from_parts(Mlp::new(vec![identity(3)]).unwrap(), Mlp::new(vec![identity(3)]).unwrap())
            .unwrap();
        let seq = CodeSequence::new(vec![4, 0, 0, 2], 5).unwrap();
        let out = decode_sequence(&seq, &cb, &ae).unwrap();
        for (o, &i) in out.iter().zip(&seq.indices) {
            assert_eq!(o.as_slice(), cb.row(i));
        }
        assert_eq!(decode_sequence(&seq, &cb, &ae).unwrap(), out);
    }

    #[test]
    fn decoding_matches_a_hand_forward_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ae = VqAutoencoder::new(4, &[5], 3, &mut rng);
        let cb = Codebook::new(Tensor::randn(&[6, 3], 1.0, &mut rng)).unwrap();
        let seq = CodeSequence::new(vec![1, 5, 3], 6).unwrap();
        let out = decode_sequence(&seq, &cb, &ae).unwrap();
        for (o, &i) in out.iter().zip(&seq.indices) {
            let mut x = cb.row(i).to_vec();
            for l in &ae.decoder.layers {
                let mut y = l.bias.values().to_vec();
                for (r, xr) in x.iter().enumerate() {
                    for (c, yc) in y.iter_mut().enumerate() {
                        *yc += xr * l.weight.get(r, c);
                    }
                }
                if l.activation == Activation::Relu {
                    y.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                x = y;
            }
            for (a, b) in o.iter().zip(&x) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let wrong = Codebook::new(Tensor::randn(&[6, 2], 1.0, &mut rng)).unwrap();
        assert!(matches!(decode_sequence(&seq, &wrong, &ae), Err(Error::Dimension(_))));
    }
}
