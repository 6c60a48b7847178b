//! VQ-VAE pretraining over an embedding table.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autoencoder::{VqAutoencoder, DEFAULT_HIDDEN, DEFAULT_LATENT};
use super::codebook::Codebook;
use super::network::Mlp;
use crate::corpus::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics::kmeans_pp_seed;
use crate::numerics::{adam_step, AdamState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    pub n_codes: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Adam step size for the codebook rows.
    pub codebook_lr: f64,
    pub commitment: f64,
    /// Reconstruction-only epochs before the codebook is seeded.
    pub warmup_epochs: usize,
    /// Encoder outputs sampled for k-means++ codebook seeding.
    pub init_sample: usize,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            n_codes: 300,
            latent_dim: DEFAULT_LATENT,
            hidden: DEFAULT_HIDDEN.to_vec(),
            epochs: 20,
            batch_size: 256,
            lr: 1e-3,
            codebook_lr: 1e-2,
            commitment: 0.25,
            warmup_epochs: 1,
            init_sample: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqEpoch {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
    /// Codes that received no assignment during the epoch.
    pub dead_codes: usize,
}

#[derive(Clone, Debug)]
pub struct VqTraining {
    pub autoencoder: VqAutoencoder,
    pub codebook: Codebook,
    pub trace: Vec<VqEpoch>,
}

fn batch_tensor(emb: &EmbeddingTable, ids: &[usize]) -> Tensor {
    let mut values = Vec::with_capacity(ids.len() * emb.dim());
    for &i in ids {
        values.extend_from_slice(emb.row(i));
    }
    Tensor::matrix(ids.len(), emb.dim(), values).expect("rows share the table width")
}

fn diverged(stage: &str, epoch: usize, batch: usize, loss: f64) -> Error {
    Error::numeric(format!("VQ-VAE {stage} diverged at epoch {epoch}, batch {batch}: loss = {loss}"))
}

/// Squared error summed over columns, averaged over rows.
fn mean_sq(tape: &mut Tape, a: Var, b: Var, rows: usize) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.mul(d, d)?;
    let s = tape.sum(d2);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

fn warmup_epoch(
    ae: &mut VqAutoencoder,
    emb: &EmbeddingTable,
    order: &[usize],
    cfg: &VqConfig,
    adam: &mut AdamState,
    epoch: usize,
) -> Result<()> {
    for (b, ids) in order.chunks(cfg.batch_size).enumerate() {
        let x = batch_tensor(emb, ids);
        let mut tape = Tape::new();
        let ev = ae.encoder.register(&mut tape);
        let dv = ae.decoder.register(&mut tape);
        let xv = tape.constant(x);
        let f = ae.encoder.tape_forward(&mut tape, xv, &ev)?;
        let xh = ae.decoder.tape_forward(&mut tape, f, &dv)?;
        let loss = mean_sq(&mut tape, xh, xv, ids.len())?;
        let l = tape.scalar(loss);
        if !l.is_finite() {
            return Err(diverged("warmup", epoch, b, l));
        }
        let mut g = tape.backward(loss)?;
        let mut grads = Mlp::collect_grads(&ev, &mut g);
        grads.extend(Mlp::collect_grads(&dv, &mut g));
        let mut params: Vec<&mut Tensor> = ae.encoder.params_mut();
        params.extend(ae.decoder.params_mut());
        adam_step(&mut params, &grads, adam, cfg.lr)?;
    }
    Ok(())
}

/// Distinct encoder outputs used to seed the codebook with k-means++.
fn seed_codebook<R: Rng + ?Sized>(ae: &VqAutoencoder, emb: &EmbeddingTable, cfg: &VqConfig, rng: &mut R) -> Result<Tensor> {
    let mut ids: Vec<usize> = (0..emb.len()).collect();
    ids.shuffle(rng);
    ids.truncate(cfg.init_sample.max(cfg.n_codes));
    let f = ae.encode_batch(&batch_tensor(emb, &ids))?;
    let points: Vec<&[f64]> = (0..f.rows()).map(|r| f.row(r)).collect();
    let picks = kmeans_pp_seed(&points, cfg.n_codes, rng);
    let mut rows: Vec<Vec<f64>> = picks.iter().map(|&p| points[p].to_vec()).collect();
    // Too few distinct outputs: nudge repeats apart so every row is unique.
    let scale = f.values().iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1.0) * 1e-3;
    for i in 1..rows.len() {
        while rows[..i].contains(&rows[i]) {
            for v in rows[i].iter_mut() {
                *v += scale * rng.random_range(-1.0..1.0);
            }
        }
    }
    Tensor::from_rows(&rows)
}

/// Train the autoencoder and codebook.
///
/// Loss per batch, averaged over rows: `‖x − Dec(ρ_x)‖² + ‖sg(f) − ρ_x‖² +
/// β‖f − sg(ρ_x)‖²`, with gradients passed straight through the quantizer.
pub fn train_vqvae(emb: &EmbeddingTable, cfg: &VqConfig) -> Result<VqTraining> {
    if emb.is_empty() {
        return Err(Error::input("empty embedding table"));
    }
    if cfg.n_codes == 0 || cfg.latent_dim == 0 || cfg.batch_size == 0 {
        return Err(Error::param("n_codes, latent_dim and batch_size must be positive"));
    }
    let positive = |v: f64| v > 0.0 && v.is_finite();
    if !positive(cfg.lr) || !positive(cfg.codebook_lr) || !(cfg.commitment >= 0.0) {
        return Err(Error::param(format!(
            "lr {} / codebook_lr {} / commitment {}",
            cfg.lr, cfg.codebook_lr, cfg.commitment
        )));
    }
    if emb.len() < cfg.n_codes {
        log::warn!("{} embeddings for {} codes; some codes will share points", emb.len(), cfg.n_codes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ae = VqAutoencoder::new(emb.dim(), &cfg.hidden, cfg.latent_dim, &mut rng);
    let mut order: Vec<usize> = (0..emb.len()).collect();

    if cfg.epochs > 0 {
        let mut params: Vec<&Tensor> = ae.encoder.params();
        params.extend(ae.decoder.params());
        let mut warm = AdamState::new(&params);
        for w in 0..cfg.warmup_epochs {
            order.shuffle(&mut rng);
            warmup_epoch(&mut ae, emb, &order, cfg, &mut warm, w)?;
        }
    }
    let mut codebook = Codebook::new(seed_codebook(&ae, emb, cfg, &mut rng)?)?;
    let mut adam = {
        let mut params: Vec<&Tensor> = ae.encoder.params();
        params.extend(ae.decoder.params());
        AdamState::new(&params)
    };
    let mut adam_cb = AdamState::new(&[codebook.rho_hat()]);

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut usage = vec![0u64; cfg.n_codes];
        let mut sums = [0.0f64; 3];
        for (b, ids) in order.chunks(cfg.batch_size).enumerate() {
            let x = batch_tensor(emb, ids);
            let mut tape = Tape::new();
            let ev = ae.encoder.register(&mut tape);
            let dv = ae.decoder.register(&mut tape);
            let cbv = tape.leaf(codebook.rho_hat().clone());
            let xv = tape.constant(x);
            let f = ae.encoder.tape_forward(&mut tape, xv, &ev)?;
            let fval = tape.value(f).clone();
            let mut idx = Vec::with_capacity(ids.len());
            for r in 0..fval.rows() {
                let q = codebook.quantize(fval.row(r))?;
                usage[q.index] += 1;
                idx.push(q.index);
            }
            let rho = tape.gather(cbv, idx, 1)?;
            let rho_val = tape.value(rho).clone();
            let z = tape.straight_through(f, rho_val.clone())?;
            let xh = ae.decoder.tape_forward(&mut tape, z, &dv)?;
            let rec = mean_sq(&mut tape, xh, xv, ids.len())?;
            let f_stop = tape.constant(fval);
            let cb_term = mean_sq(&mut tape, f_stop, rho, ids.len())?;
            let rho_stop = tape.constant(rho_val);
            let commit = mean_sq(&mut tape, f, rho_stop, ids.len())?;
            let commit_w = tape.scale(commit, cfg.commitment);
            let partial = tape.add(rec, cb_term)?;
            let loss = tape.add(partial, commit_w)?;
            let l = tape.scalar(loss);
            if !l.is_finite() {
                return Err(diverged("training", epoch, b, l));
            }
            let w = ids.len() as f64;
            sums[0] += w * tape.scalar(rec);
            sums[1] += w * tape.scalar(cb_term);
            sums[2] += w * tape.scalar(commit);
            let mut g = tape.backward(loss)?;
            let mut grads = Mlp::collect_grads(&ev, &mut g);
            grads.extend(Mlp::collect_grads(&dv, &mut g));
            let mut params: Vec<&mut Tensor> = ae.encoder.params_mut();
            params.extend(ae.decoder.params_mut());
            adam_step(&mut params, &grads, &mut adam, cfg.lr)?;
            adam_step(&mut [codebook.rho_hat_mut()], &[g.take(cbv)], &mut adam_cb, cfg.codebook_lr)?;
        }
        let n = emb.len() as f64;
        let dead: Vec<usize> = (0..cfg.n_codes).filter(|&i| usage[i] == 0).collect();
        let ep = VqEpoch {
            reconstruction: sums[0] / n,
            codebook: sums[1] / n,
            commitment: sums[2] / n,
            total: (sums[0] + sums[1] + cfg.commitment * sums[2]) / n,
            dead_codes: dead.len(),
        };
        log::info!(
            "vq epoch {epoch}: total {:.6} rec {:.6} dead {}",
            ep.total,
            ep.reconstruction,
            ep.dead_codes
        );
        trace.push(ep);
        codebook.usage = usage;
        if !dead.is_empty() && epoch + 1 < cfg.epochs {
            reseed(&mut codebook, &dead, &ae, emb, &mut rng)?;
            adam_cb.reset_rows(0, &dead);
        }
    }
    if !ae.is_finite() || !codebook.rho_hat().is_finite() {
        return Err(Error::numeric("VQ-VAE parameters became non-finite"));
    }
    ae.round_f32();
    *codebook.rho_hat_mut() = codebook.rho_hat().round_f32();
    Ok(VqTraining {
        autoencoder: ae,
        codebook,
        trace,
    })
}

/// Move unused codes onto encoder outputs of randomly drawn words.
fn reseed<R: Rng + ?Sized>(
    codebook: &mut Codebook,
    dead: &[usize],
    ae: &VqAutoencoder,
    emb: &EmbeddingTable,
    rng: &mut R,
) -> Result<()> {
    let ids: Vec<usize> = (0..dead.len()).map(|_| rng.random_range(0..emb.len())).collect();
    let f = ae.encode_batch(&batch_tensor(emb, &ids))?;
    let scale = f.values().iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1.0) * 1e-3;
    let cb = codebook.rho_hat_mut();
    for (r, &code) in dead.iter().enumerate() {
        for (dst, src) in cb.row_mut(code).iter_mut().zip(f.row(r)) {
            *dst = src + scale * rng.random_range(-1.0..1.0);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_clusters: usize, per: usize, dim: usize, seed: u64) -> (EmbeddingTable, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = Tensor::randn(&[n_clusters, dim], 3.0, &mut rng);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..n_clusters {
            for _ in 0..per {
                let noise = Tensor::randn(&[dim], 0.01, &mut rng);
                rows.push(centers.row(c).iter().zip(noise.values()).map(|(a, b)| a + b).collect());
                labels.push(c);
            }
        }
        (EmbeddingTable::new(Tensor::from_rows(&rows).unwrap()).unwrap(), labels)
    }

    fn small(n_codes: usize, epochs: usize, seed: u64) -> VqConfig {
        VqConfig {
            n_codes,
            latent_dim: 8,
            hidden: vec![32, 32],
            epochs,
            batch_size: 32,
            lr: 2e-3,
            seed,
            ..VqConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model_and_empty_trace() {
        let (emb, _) = blobs(4, 5, 6, 0);
        let out = train_vqvae(&emb, &small(4, 0, 1)).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.codebook.n_codes(), 4);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (emb, _) = blobs(4, 10, 6, 0);
        let a = train_vqvae(&emb, &small(4, 3, 9)).unwrap();
        let b = train_vqvae(&emb, &small(4, 3, 9)).unwrap();
        assert_eq!(a.codebook, b.codebook);
        assert_eq!(a.autoencoder, b.autoencoder);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn planted_clusters_use_every_code_and_quantize_tightly() {
        let (emb, labels) = blobs(6, 20, 10, 3);
        let out = train_vqvae(&emb, &small(6, 150, 6)).unwrap();
        assert!(out.codebook.usage.iter().all(|&u| u > 0), "usage {:?}", out.codebook.usage);
        let ae = &out.autoencoder;
        let f: Vec<Vec<f64>> = (0..emb.len()).map(|i| ae.encode(emb.row(i)).unwrap()).collect();
        let codes: Vec<usize> = f.iter().map(|v| out.codebook.quantize(v).unwrap().index).collect();
        // Each planted cluster maps to a single code.
        for c in 0..6 {
            let mine: Vec<usize> = (0..emb.len()).filter(|&i| labels[i] == c).map(|i| codes[i]).collect();
            assert!(mine.iter().all(|&k| k == mine[0]));
        }
        // Quantization error relative to the spread between cluster means in latent space.
        let mut means = vec![vec![0.0; 8]; 6];
        for (i, v) in f.iter().enumerate() {
            for (m, x) in means[labels[i]].iter_mut().zip(v) {
                *m += x / 20.0;
            }
        }
        let mut min_sep = f64::INFINITY;
        for a in 0..6 {
            for b in a + 1..6 {
                let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                min_sep = min_sep.min(d);
            }
        }
        let mean_err: f64 = f
            .iter()
            .map(|v| out.codebook.quantize(v).unwrap().distance_sq.sqrt())
            .sum::<f64>()
            / f.len() as f64;
        assert!(mean_err < 0.05 * min_sep, "err {mean_err} sep {min_sep}");
    }
}
