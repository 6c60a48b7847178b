use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors on near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates probed per tensor; `None` probes all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Use the fourth-order five-point central stencil instead of the
    /// two-point one. Its O(h⁴) truncation permits a larger step, which
    /// keeps roundoff from swamping very small gradient entries.
    pub five_point: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
            five_point: false,
        }
    }
}

/// Worst relative error between analytic gradients and central differences.
///
/// `loss_and_grad` evaluates the loss and its analytic gradients (one tensor
/// per parameter) at the supplied parameters; it must be deterministic.
pub fn grad_check<F>(mut loss_and_grad: F, params: &[Tensor], cfg: &GradCheck) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(Error::param(format!("finite-difference step {} outside [1e-6, 1e-3]", cfg.eps)));
    }
    let (loss, grads) = loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("loss is {loss}")));
    }
    if grads.len() != params.len() {
        return Err(Error::dim(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (t, grad) in grads.iter().enumerate() {
        if grad.len() != params[t].len() {
            return Err(Error::dim(format!("gradient {t} has wrong size")));
        }
        let n = params[t].len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work[t].values()[i];
            let mut at = |d: f64| -> Result<f64> {
                work[t].values_mut()[i] = orig + d;
                let (l, _) = loss_and_grad(&work)?;
                if !l.is_finite() {
                    return Err(Error::numeric("non-finite loss during finite differences"));
                }
                Ok(l)
            };
            let h = cfg.eps;
            let numeric = if cfg.five_point {
                (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            work[t].values_mut()[i] = orig;
            let analytic = grad.values()[i];
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
