//! Central finite-difference verification of analytic gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamSet, TensorError};

/// Controls for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor (all of them when larger).
    pub max_coords_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_param: 24,
        }
    }
}

/// Compare analytic gradients of `loss_fn` against central finite
/// differences over randomly sampled coordinates of `params`.
///
/// Returns the max over sampled coordinates of
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &ParamSet,
    cfg: GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TensorError>
where
    F: FnMut(&ParamSet) -> Result<(f64, Gradients), TensorError>,
{
    assert!(cfg.epsilon > 0.0, "epsilon must be positive");
    let (base, analytic) = loss_fn(params)?;
    if !base.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }

    let mut max_rel = 0.0f64;
    for pid in params.ids() {
        let len = params.get(pid).len();
        let coords: Vec<usize> = if len <= cfg.max_coords_per_param {
            (0..len).collect()
        } else {
            let mut picked = Vec::with_capacity(cfg.max_coords_per_param);
            while picked.len() < cfg.max_coords_per_param {
                let c = rng.gen_range(0..len);
                if !picked.contains(&c) {
                    picked.push(c);
                }
            }
            picked
        };
        for c in coords {
            let mut plus = params.clone();
            plus.get_mut(pid).data_mut()[c] += cfg.epsilon;
            let (f_plus, _) = loss_fn(&plus)?;
            let mut minus = params.clone();
            minus.get_mut(pid).data_mut()[c] -= cfg.epsilon;
            let (f_minus, _) = loss_fn(&minus)?;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let numeric = (f_plus - f_minus) / (2.0 * cfg.epsilon);
            let exact = analytic.get(pid).data()[c];
            let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
