use super::tape::{kl_row, softmax_in_place};
use crate::error::{Error, Result};

/// Bounds applied to the log-variance before it is exponentiated.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("softmax of non-finite logits"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `log softmax(logits)`, computed without forming the probabilities.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::dim("log_softmax of an empty vector"));
    }
    let lse = super::tape::log_sum_exp(logits);
    Ok(logits.iter().map(|l| l - lse).collect())
}

/// Mean and log-variance of a diagonal Gaussian over topic logits.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    gamma_m: Vec<f64>,
    log_gamma_sigma: Vec<f64>,
}

impl VariationalParams {
    /// Log-variances are clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new(gamma_m: Vec<f64>, log_gamma_sigma: Vec<f64>) -> Result<Self> {
        if gamma_m.len() != log_gamma_sigma.len() {
            return Err(Error::dim(format!(
                "mean has {} entries, log-variance {}",
                gamma_m.len(),
                log_gamma_sigma.len()
            )));
        }
        let log_gamma_sigma = log_gamma_sigma
            .into_iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Ok(VariationalParams {
            gamma_m,
            log_gamma_sigma,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.gamma_m
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_gamma_sigma
    }

    pub fn len(&self) -> usize {
        self.gamma_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma_m.is_empty()
    }
}

/// `gamma_m + exp(0.5·log_gamma_sigma) ⊙ epsilon`.
pub fn reparameterize(params: &VariationalParams, epsilon: &[f64]) -> Result<Vec<f64>> {
    if epsilon.len() != params.len() {
        return Err(Error::dim(format!(
            "noise of length {} for {} topics",
            epsilon.len(),
            params.len()
        )));
    }
    Ok(params
        .gamma_m
        .iter()
        .zip(&params.log_gamma_sigma)
        .zip(epsilon)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn gaussian_kl(params: &VariationalParams, prior_m: &[f64], prior_logvar: &[f64]) -> Result<f64> {
    if prior_m.len() != params.len() || prior_logvar.len() != params.len() {
        return Err(Error::dim(format!(
            "posterior of {} dims vs prior {}/{}",
            params.len(),
            prior_m.len(),
            prior_logvar.len()
        )));
    }
    let kl = kl_row(&params.gamma_m, &params.log_gamma_sigma, prior_m, prior_logvar);
    // Rounding can leave a tiny negative residue when q == p.
    Ok(kl.max(0.0))
}
