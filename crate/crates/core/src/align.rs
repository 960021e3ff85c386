//! Least-squares scale/offset registration of predicted depth onto clue depth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::DepthMap;
use crate::numeric::pairwise_mean;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("need at least 2 co-located samples, got {0}")]
    TooFewSamples(usize),
    #[error("regressor variance {variance:e} is below {eps:e}")]
    SingularFit { variance: f64, eps: f64 },
    #[error("input lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

impl AlignError {
    pub fn code(&self) -> &'static str {
        match self {
            AlignError::TooFewSamples(_) => "TOO_FEW_SAMPLES",
            AlignError::SingularFit { .. } => "SINGULAR_FIT",
            AlignError::LengthMismatch(..) => "LENGTH_MISMATCH",
        }
    }
}

/// Which way the affine map points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitDirection {
    /// Solve `min ‖d_p − scale·d̂_p − offset‖²`: the fitted map takes
    /// predicted depth into the clue frame, so `scale·d̂ + offset` lands in
    /// the existing scene's units.
    #[default]
    PredictedToClue,
    /// Solve `min ‖d̂_p − scale·d_p − offset‖²`, the map from clue depth to
    /// predicted depth.
    ClueToPredicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub scale: f64,
    pub offset: f64,
    pub n_samples: usize,
    pub residual_rms: f64,
}

impl AffineFit {
    pub const IDENTITY: AffineFit = AffineFit {
        scale: 1.0,
        offset: 0.0,
        n_samples: 2,
        residual_rms: 0.0,
    };

    pub fn apply(&self, d: f64) -> f64 {
        self.scale * d + self.offset
    }
}

fn variance_epsilon(mean: f64) -> f64 {
    1e-12 * mean * mean
}

/// Fits `y ≈ scale·x + offset` by the closed-form normal equations in
/// centred form: `scale = cov(x, y) / var(x)`.
pub fn fit_affine(x: &[f64], y: &[f64]) -> Result<AffineFit, AlignError> {
    if x.len() != y.len() {
        return Err(AlignError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(AlignError::TooFewSamples(n));
    }
    let mx = pairwise_mean(x);
    let my = pairwise_mean(y);
    let dx: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let var: Vec<f64> = dx.iter().map(|d| d * d).collect();
    let cov: Vec<f64> = dx.iter().zip(y).map(|(d, v)| d * (v - my)).collect();
    let var_x = pairwise_mean(&var);
    let eps = variance_epsilon(mx);
    if !(var_x > eps) {
        return Err(AlignError::SingularFit { variance: var_x, eps });
    }
    let scale = pairwise_mean(&cov) / var_x;
    let offset = my - scale * mx;
    let sq: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - scale * a - offset;
            r * r
        })
        .collect();
    Ok(AffineFit {
        scale,
        offset,
        n_samples: n,
        residual_rms: pairwise_mean(&sq).sqrt(),
    })
}

fn masked_pairs(d_p: &[f64], d_hat_p: &[f64], mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>), AlignError> {
    if d_p.len() != d_hat_p.len() {
        return Err(AlignError::LengthMismatch(d_p.len(), d_hat_p.len()));
    }
    if d_p.len() != mask.len() {
        return Err(AlignError::LengthMismatch(d_p.len(), mask.len()));
    }
    Ok(d_p
        .iter()
        .zip(d_hat_p)
        .zip(mask)
        .filter_map(|((&c, &p), &m)| m.then_some((c, p)))
        .unzip())
}

/// Scale/offset between clue depths `d_p` and co-located predictions
/// `d_hat_p` over `mask`.
///
/// The clue depths must vary over the mask in either direction; with
/// [`FitDirection::PredictedToClue`] the predictions must vary as well,
/// since they are the regressor.
pub fn fit_scale_offset(
    d_p: &[f64],
    d_hat_p: &[f64],
    mask: &[bool],
    direction: FitDirection,
) -> Result<AffineFit, AlignError> {
    let (clue, pred) = masked_pairs(d_p, d_hat_p, mask)?;
    if clue.len() < 2 {
        return Err(AlignError::TooFewSamples(clue.len()));
    }
    match direction {
        FitDirection::ClueToPredicted => fit_affine(&clue, &pred),
        FitDirection::PredictedToClue => {
            let mc = pairwise_mean(&clue);
            let dev: Vec<f64> = clue.iter().map(|c| (c - mc) * (c - mc)).collect();
            let var_c = pairwise_mean(&dev);
            let eps = variance_epsilon(mc);
            if !(var_c > eps) {
                return Err(AlignError::SingularFit { variance: var_c, eps });
            }
            fit_affine(&pred, &clue)
        }
    }
}

/// Fits on the pixels valid in both maps (and in `mask`).
pub fn fit_depth_maps(
    clue: &DepthMap,
    predicted: &DepthMap,
    direction: FitDirection,
) -> Result<AffineFit, AlignError> {
    let mask: Vec<bool> = clue.valid.iter().zip(&predicted.valid).map(|(a, b)| *a && *b).collect();
    fit_scale_offset(&clue.z, &predicted.z, &mask, direction)
}

/// `scale·d̂ + offset` per valid pixel; results that are not strictly
/// positive become invalid.
pub fn apply_alignment(fit: &AffineFit, d_hat: &DepthMap) -> DepthMap {
    let mut out = DepthMap::empty(d_hat.width, d_hat.height);
    for i in 0..d_hat.z.len() {
        if d_hat.valid[i] {
            let d = fit.apply(d_hat.z[i]);
            if d > 0.0 && d.is_finite() {
                out.z[i] = d;
                out.valid[i] = true;
            }
        }
    }
    out
}
