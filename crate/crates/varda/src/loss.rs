//! Training objectives for the two domain branches.
//!
//! The source branch maximizes an evidence lower bound with labels: KL of the
//! posterior against the standard-normal prior, squared reconstruction error
//! with the decoder conditioned on the true label maps, and cross-entropy of
//! the segmentor's prediction against those labels. The target branch has no
//! labels, so its prediction term degenerates into the conditional entropy of
//! the segmentor's own output, and its decoder is conditioned on the current
//! soft predictions with gradients flowing through them. The total objective
//! adds a weighted latent-distribution discrepancy between the two encoded
//! batches.
//!
//! Normalization: each branch loss is the per-sample evidence bound divided
//! by the pixel count, averaged over the batch and noise samples. The data
//! terms are then ordinary per-pixel means and the KL arrives as its closed
//! form over the pixel count, so the likelihood-to-prior balance inside the
//! bound is untouched while overall magnitudes stay O(1) regardless of image
//! size. This scaling is load-bearing twice over: an unscaled per-sample KL
//! outweighs the per-pixel data terms by the pixel count and collapses the
//! posteriors onto the prior (the segmentor then sees noise), while leaving
//! the data terms as per-sample sums drowns the weighted discrepancy term,
//! which has no pixel dimension to grow with.

use crate::gaussian::{
    kl_to_standard_normal, mixture_l2_distance, sliced_l2_distance, DiagGaussianBatch,
};
use crate::nets::{decode, encode, segment, Domain, NetConfig, NetError, ParameterSet};
use crate::tensor::{Tape, Tensor};
use crate::Real;

/// Probability floor inside logarithms; keeps `p log p` and cross-entropy
/// finite with exactly zero probabilities.
pub const PROB_FLOOR: Real = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Source ELBO weight.
    pub alpha1: Real,
    /// Target ELBO weight.
    pub alpha2: Real,
    /// Latent discrepancy weight.
    pub alpha3: Real,
    /// Weight on the conditional-entropy sub-term inside the target bound.
    ///
    /// The target branch has no labels, so its prediction term is the
    /// segmentor's own entropy. At full strength that term rewards confident
    /// nonsense: the shared segmentor can zero it by predicting one class
    /// everywhere, and the data terms cannot pull it back because the
    /// decoder still reconstructs fine from z alone. Keeping the weight at
    /// zero drops the term (the bound stays valid; a perfectly confident
    /// prediction term contributes nothing), any small positive value keeps
    /// a sharpening pressure once the latents are aligned.
    pub entropy: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha1: 1.0, alpha2: 1.0, alpha3: 1e-2, entropy: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), NetError> {
        let all = [self.alpha1, self.alpha2, self.alpha3];
        if all.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(NetError::BadConfig(format!(
                "loss weights must be finite and nonnegative, got {all:?}"
            )));
        }
        if all.iter().all(|a| *a == 0.0) {
            return Err(NetError::BadConfig("at least one loss weight must be positive".into()));
        }
        if !self.entropy.is_finite() || self.entropy < 0.0 {
            return Err(NetError::BadConfig(format!(
                "entropy weight must be finite and nonnegative, got {}",
                self.entropy
            )));
        }
        Ok(())
    }
}

/// Which mixture distance regularizes the latent spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscrepancyMode {
    /// Coordinatewise distance (sum of 1-D marginal distances); the default.
    Sliced,
    /// Full n-dimensional mixture distance.
    Full,
}

impl DiscrepancyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DiscrepancyMode::Sliced => "sliced",
            DiscrepancyMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<DiscrepancyMode> {
        match s {
            "sliced" => Some(DiscrepancyMode::Sliced),
            "full" => Some(DiscrepancyMode::Full),
            _ => None,
        }
    }
}

/// Scalar values of one optimization step, in loss-log column order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Source segmentation cross-entropy.
    pub seg_loss: Real,
    /// Source KL plus reconstruction (the non-segmentation ELBO remainder).
    pub remainder_s: Real,
    /// Full target negative ELBO (KL + reconstruction + entropy).
    pub target_loss: Real,
    /// Latent mixture discrepancy.
    pub discrepancy: Real,
    /// Weighted total that gradients are taken of.
    pub total: Real,
}

/// Source-branch terms as scalar tensors, plus the encoded batch.
pub struct SourceTerms {
    pub kl: Tensor,
    pub recon: Tensor,
    pub ce: Tensor,
    pub gaussians: DiagGaussianBatch,
}

/// Target-branch terms as scalar tensors, plus the encoded batch.
pub struct TargetTerms {
    pub kl: Tensor,
    pub recon: Tensor,
    pub entropy: Tensor,
    pub gaussians: DiagGaussianBatch,
}

/// Per-pixel mean cross-entropy between one-hot (or soft) references `y` and
/// predicted probabilities `p`, both [R x K x H x W].
fn cross_entropy(tape: &Tape, y: &Tensor, p: &Tensor) -> Result<Tensor, NetError> {
    let logp = tape.log(&tape.clamp(p, PROB_FLOOR, 1.0)?)?;
    let weighted = tape.mul(y, &logp)?;
    let per_pixel = tape.sum_axis(&weighted, 1)?;
    Ok(tape.neg(&tape.mean(&per_pixel)?)?)
}

/// Per-pixel mean squared error between reconstruction and reference.
fn mse(tape: &Tape, recon: &Tensor, x: &Tensor) -> Result<Tensor, NetError> {
    Ok(tape.mean(&tape.square(&tape.sub(recon, x)?)?)?)
}

/// Closed-form KL against the standard-normal prior per pixel of the image
/// it encodes, averaged over the batch.
fn kl_term(tape: &Tape, g: &DiagGaussianBatch, cfg: &NetConfig) -> Result<Tensor, NetError> {
    let pixels = (cfg.image_hw * cfg.image_hw) as Real;
    let per_sample = kl_to_standard_normal(tape, g)?;
    Ok(tape.mul_scalar(&tape.mean(&per_sample)?, 1.0 / pixels)?)
}

/// Negative source ELBO, split into its three terms. `x` is [M x C x H x W],
/// `y` one-hot [M x K x H x W], `eps` noise [M x L x n].
pub fn source_elbo_terms(
    tape: &Tape,
    params: &ParameterSet,
    cfg: &NetConfig,
    x: &Tensor,
    y: &Tensor,
    eps: &Tensor,
) -> Result<SourceTerms, NetError> {
    let g = encode(tape, params, cfg, Domain::Source, x)?;
    let kl = kl_term(tape, &g, cfg)?;

    let l = eps.shape()[1];
    let z = crate::nets::reparameterize(tape, &g, eps)?;
    let rows = tape.reshape(&z, &[g.count() * l, g.dim()])?;
    let probs = segment(tape, params, cfg, &rows)?;

    let y_rep = tape.repeat_rows(y, l)?;
    let ce = cross_entropy(tape, &y_rep, &probs)?;

    let cond = if cfg.label_conditioned { Some(&y_rep) } else { None };
    let recon = decode(tape, params, cfg, Domain::Source, &rows, cond)?;
    let x_rep = tape.repeat_rows(x, l)?;
    let recon = mse(tape, &recon, &x_rep)?;

    Ok(SourceTerms { kl, recon, ce, gaussians: g })
}

/// Negative target ELBO, split into its three terms. The prediction term is
/// the conditional entropy of the segmentor's own output (cross-entropy of
/// the predictions against themselves), returned unweighted; `total_loss`
/// scales it by `LossWeights::entropy`. The decoder sees those soft
/// predictions as its conditioning input.
pub fn target_elbo_terms(
    tape: &Tape,
    params: &ParameterSet,
    cfg: &NetConfig,
    x: &Tensor,
    eps: &Tensor,
) -> Result<TargetTerms, NetError> {
    let g = encode(tape, params, cfg, Domain::Target, x)?;
    let kl = kl_term(tape, &g, cfg)?;

    let l = eps.shape()[1];
    let z = crate::nets::reparameterize(tape, &g, eps)?;
    let rows = tape.reshape(&z, &[g.count() * l, g.dim()])?;
    let probs = segment(tape, params, cfg, &rows)?;

    let entropy = cross_entropy(tape, &probs, &probs)?;

    let cond = if cfg.label_conditioned { Some(&probs) } else { None };
    let recon = decode(tape, params, cfg, Domain::Target, &rows, cond)?;
    let x_rep = tape.repeat_rows(x, l)?;
    let recon = mse(tape, &recon, &x_rep)?;

    Ok(TargetTerms { kl, recon, entropy, gaussians: g })
}

/// Assemble the weighted total loss for one step. Branches with zero weight
/// are skipped entirely (their encoders never run and their breakdown
/// columns read zero), except that a positive discrepancy weight forces both
/// encoders. Returns the loss tensor to differentiate plus the scalar
/// breakdown for logging.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &Tape,
    params: &ParameterSet,
    cfg: &NetConfig,
    weights: &LossWeights,
    mode: DiscrepancyMode,
    x_s: &Tensor,
    y_s: &Tensor,
    x_t: &Tensor,
    eps_s: &Tensor,
    eps_t: &Tensor,
) -> Result<(Tensor, LossBreakdown), NetError> {
    weights.validate()?;

    let mut g_s: Option<DiagGaussianBatch> = None;
    let mut g_t: Option<DiagGaussianBatch> = None;
    let mut total: Option<Tensor> = None;
    let mut add_term = |tape: &Tape, term: &Tensor, alpha: Real| -> Result<(), NetError> {
        let weighted = tape.mul_scalar(term, alpha)?;
        total = Some(match total.take() {
            Some(acc) => tape.add(&acc, &weighted)?,
            None => weighted,
        });
        Ok(())
    };

    let mut breakdown =
        LossBreakdown { seg_loss: 0.0, remainder_s: 0.0, target_loss: 0.0, discrepancy: 0.0, total: 0.0 };

    if weights.alpha1 > 0.0 {
        let terms = source_elbo_terms(tape, params, cfg, x_s, y_s, eps_s)?;
        breakdown.seg_loss = terms.ce.item();
        breakdown.remainder_s = terms.kl.item() + terms.recon.item();
        let elbo = tape.add(&tape.add(&terms.kl, &terms.recon)?, &terms.ce)?;
        add_term(tape, &elbo, weights.alpha1)?;
        g_s = Some(terms.gaussians);
    }

    if weights.alpha2 > 0.0 {
        let terms = target_elbo_terms(tape, params, cfg, x_t, eps_t)?;
        let data = tape.add(&terms.kl, &terms.recon)?;
        let elbo = if weights.entropy > 0.0 {
            tape.add(&data, &tape.mul_scalar(&terms.entropy, weights.entropy)?)?
        } else {
            data
        };
        breakdown.target_loss = elbo.item();
        add_term(tape, &elbo, weights.alpha2)?;
        g_t = Some(terms.gaussians);
    }

    if weights.alpha3 > 0.0 {
        let gs = match &g_s {
            Some(g) => g.clone(),
            None => encode(tape, params, cfg, Domain::Source, x_s)?,
        };
        let gt = match &g_t {
            Some(g) => g.clone(),
            None => encode(tape, params, cfg, Domain::Target, x_t)?,
        };
        let disc = match mode {
            DiscrepancyMode::Sliced => sliced_l2_distance(tape, &gs, &gt)?,
            DiscrepancyMode::Full => mixture_l2_distance(tape, &gs, &gt)?,
        };
        breakdown.discrepancy = disc.item();
        add_term(tape, &disc, weights.alpha3)?;
    }

    let total = total.expect("validate() guarantees at least one active term");
    breakdown.total = total.item();
    Ok((total, breakdown))
}
