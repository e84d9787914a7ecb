//! Closed-form quantities over batches of diagonal Gaussians.
//!
//! A batch of M diagonal Gaussians in n dimensions (one per encoded image)
//! approximates a latent distribution as a uniform mixture. Everything here
//! is built by composing tape primitives, so every formula is differentiable
//! without any hand-written adjoint: the KL of each component against the
//! standard-normal prior, the inner product of two Gaussian densities (the
//! pair kernel), the squared L2 distance between two mixtures, and its
//! coordinatewise variant that sums 1-D marginal distances instead of
//! multiplying hundreds of per-dimension factors inside one exponential.
//!
//! The pair kernel is evaluated in log space throughout: its normalizer is a
//! product of n per-dimension factors, which over- or underflows for n in the
//! hundreds if multiplied out literally (see `oracle::naive_pair_kernel` for
//! the cautionary version), while the log-space sum stays small and exact.

use crate::tensor::{Tape, Tensor, TensorError};
use crate::{Real, LN_2PI};

/// M diagonal Gaussians over an n-dimensional latent space, stored as means
/// and log-variances, both [M x n]. Log storage keeps variances positive by
/// construction; encoders clamp log-variances into [-10, 10] before building
/// a batch, which bounds each variance into [e^-10, e^10].
#[derive(Debug, Clone)]
pub struct DiagGaussianBatch {
    means: Tensor,
    log_vars: Tensor,
}

impl DiagGaussianBatch {
    pub fn new(means: Tensor, log_vars: Tensor) -> Result<DiagGaussianBatch, TensorError> {
        let (sm, sv) = (means.shape().to_vec(), log_vars.shape().to_vec());
        if sm.len() != 2 || sv != sm {
            return Err(TensorError::ShapeMismatch {
                op: "diag_gaussian_batch",
                detail: format!("want matching [m x n] means and log-variances, got {sm:?} and {sv:?}"),
            });
        }
        Ok(DiagGaussianBatch { means, log_vars })
    }

    /// Single Gaussian from plain vectors (constant, for tests and oracles).
    pub fn single(mean: Vec<Real>, log_var: Vec<Real>) -> Result<DiagGaussianBatch, TensorError> {
        let n = mean.len();
        DiagGaussianBatch::new(
            Tensor::from_vec(&[1, n], mean)?,
            Tensor::from_vec(&[1, n], log_var)?,
        )
    }

    /// Number of component Gaussians (the batch size M).
    pub fn count(&self) -> usize {
        self.means.shape()[0]
    }

    /// Latent dimensionality n.
    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn log_vars(&self) -> &Tensor {
        &self.log_vars
    }
}

/// KL divergence of each component against the standard normal prior,
/// returned as an [M] tensor:
/// `0.5 * sum_l (var + mean^2 - log var - 1)`.
pub fn kl_to_standard_normal(
    tape: &Tape,
    g: &DiagGaussianBatch,
) -> Result<Tensor, TensorError> {
    let var = tape.exp(g.log_vars())?;
    let mean_sq = tape.square(g.means())?;
    let sum = tape.add(&var, &mean_sq)?;
    let sum = tape.sub(&sum, g.log_vars())?;
    let sum = tape.add_scalar(&sum, -1.0)?;
    let reduced = tape.sum_axis(&sum, 1)?;
    tape.mul_scalar(&reduced, 0.5)
}

/// Pairwise tensors shared by both distance variants. For batches of Ma and
/// Mb components, returns `diff_sq[i,j,l] = (ua[i,l] - ub[j,l])^2` and
/// `lam[i,j,l] = var_a[i,l] + var_b[j,l]`, both [Ma x Mb x n].
fn pairwise_terms(
    tape: &Tape,
    a: &DiagGaussianBatch,
    b: &DiagGaussianBatch,
) -> Result<(Tensor, Tensor), TensorError> {
    let mb = b.count();
    // Lift a's rows to the leading pair axis: [Mb, Ma, n] -> [Ma, Mb, n].
    let ua = tape.transpose01(&tape.tile_leading(a.means(), mb)?)?;
    let diff = tape.sub(&ua, b.means())?;
    let diff_sq = tape.square(&diff)?;

    let va = tape.exp(a.log_vars())?;
    let vb = tape.exp(b.log_vars())?;
    let va_lift = tape.transpose01(&tape.tile_leading(&va, mb)?)?;
    let lam = tape.add(&va_lift, &vb)?;
    Ok((diff_sq, lam))
}

/// Inner product of two diagonal Gaussian densities (each batch must hold
/// exactly one component), as a scalar tensor:
///
/// `k = exp(-0.5 * sum_l d_l^2/L_l) / ((2 pi)^(n/2) * prod_l sqrt(L_l))`
///
/// with `d = ua - ub` and `L = var_a + var_b`, evaluated as
/// `exp(-0.5 * (sum d^2/L + sum log L + n log 2 pi))`.
pub fn pair_kernel(
    tape: &Tape,
    a: &DiagGaussianBatch,
    b: &DiagGaussianBatch,
) -> Result<Tensor, TensorError> {
    if a.count() != 1 || b.count() != 1 {
        return Err(TensorError::InvalidArgument {
            op: "pair_kernel",
            detail: format!("want single Gaussians, got batches of {} and {}", a.count(), b.count()),
        });
    }
    if a.dim() != b.dim() {
        return Err(TensorError::ShapeMismatch {
            op: "pair_kernel",
            detail: format!("dimension mismatch: {} vs {}", a.dim(), b.dim()),
        });
    }
    let n = a.dim() as Real;
    let (diff_sq, lam) = pairwise_terms(tape, a, b)?;
    let quad = tape.sum(&tape.div(&diff_sq, &lam)?)?;
    let log_norm = tape.sum(&tape.log(&lam)?)?;
    let log_k = tape.add_scalar(
        &tape.mul_scalar(&tape.add(&quad, &log_norm)?, -0.5)?,
        -0.5 * n * LN_2PI,
    )?;
    tape.exp(&log_k)
}

/// Mean pair kernel over all (i, j) component pairs of two batches, [scalar],
/// plus the same mean accumulated in transposed order (needed to keep the
/// mixture distance exactly symmetric in its arguments).
fn block_mean(
    tape: &Tape,
    a: &DiagGaussianBatch,
    b: &DiagGaussianBatch,
) -> Result<(Tensor, Tensor), TensorError> {
    let n = a.dim() as Real;
    let (diff_sq, lam) = pairwise_terms(tape, a, b)?;
    let quad = tape.sum_axis(&tape.div(&diff_sq, &lam)?, 2)?;
    let log_norm = tape.sum_axis(&tape.log(&lam)?, 2)?;
    let log_k = tape.add_scalar(
        &tape.mul_scalar(&tape.add(&quad, &log_norm)?, -0.5)?,
        -0.5 * n * LN_2PI,
    )?;
    let k = tape.exp(&log_k)?;
    let fwd = tape.mean(&k)?;
    let rev = tape.mean(&tape.transpose01(&k)?)?;
    Ok((fwd, rev))
}

/// Squared L2 distance between the two uniform mixtures defined by the
/// batches, expanded into mean pair kernels:
///
/// `D = mean k(s_i, s_j) + mean k(t_i, t_j) - 2 mean k(s_i, t_j)`
///
/// The cross term is evaluated once in each accumulation order and the two
/// halves added, which makes `D(s, t)` and `D(t, s)` bit-identical.
pub fn mixture_l2_distance(
    tape: &Tape,
    s: &DiagGaussianBatch,
    t: &DiagGaussianBatch,
) -> Result<Tensor, TensorError> {
    check_dims("mixture_l2_distance", s, t)?;
    let (ss, _) = block_mean(tape, s, s)?;
    let (tt, _) = block_mean(tape, t, t)?;
    let (st, ts) = block_mean(tape, s, t)?;
    let self_terms = tape.add(&ss, &tt)?;
    let cross_terms = tape.add(&st, &ts)?;
    tape.sub(&self_terms, &cross_terms)
}

/// Mean 1-D pair kernel per coordinate over all component pairs: [n], plus
/// the transposed-order accumulation.
fn block_mean_sliced(
    tape: &Tape,
    a: &DiagGaussianBatch,
    b: &DiagGaussianBatch,
) -> Result<(Tensor, Tensor), TensorError> {
    let (ma, mb) = (a.count(), b.count());
    let n = a.dim();
    let (diff_sq, lam) = pairwise_terms(tape, a, b)?;
    let quad = tape.div(&diff_sq, &lam)?;
    let log_k = tape.add_scalar(
        &tape.mul_scalar(&tape.add(&quad, &tape.log(&lam)?)?, -0.5)?,
        -0.5 * LN_2PI,
    )?;
    let k = tape.exp(&log_k)?;
    let fwd = tape.mean_axis(&tape.reshape(&k, &[ma * mb, n])?, 0)?;
    let rev = tape.mean_axis(&tape.reshape(&tape.transpose01(&k)?, &[mb * ma, n])?, 0)?;
    Ok((fwd, rev))
}

/// Coordinatewise mixture distance: the sum over latent coordinates of the
/// squared L2 distance between the 1-D marginal mixtures,
///
/// `D~ = sum_l [ mean k_l(s_i, s_j) + mean k_l(t_i, t_j) - 2 mean k_l(s_i, t_j) ]`
///
/// where `k_l` is the 1-D pair kernel on coordinate l. Each coordinate's
/// kernel stands alone instead of contributing one factor to an n-fold
/// product, so no single exponential ever aggregates hundreds of factors;
/// this is the default training regularizer. Same symmetry construction as
/// [`mixture_l2_distance`].
pub fn sliced_l2_distance(
    tape: &Tape,
    s: &DiagGaussianBatch,
    t: &DiagGaussianBatch,
) -> Result<Tensor, TensorError> {
    check_dims("sliced_l2_distance", s, t)?;
    let (ss, _) = block_mean_sliced(tape, s, s)?;
    let (tt, _) = block_mean_sliced(tape, t, t)?;
    let (st, ts) = block_mean_sliced(tape, s, t)?;
    let self_terms = tape.add(&ss, &tt)?;
    let cross_terms = tape.add(&st, &ts)?;
    tape.sum(&tape.sub(&self_terms, &cross_terms)?)
}

fn check_dims(
    op: &'static str,
    s: &DiagGaussianBatch,
    t: &DiagGaussianBatch,
) -> Result<(), TensorError> {
    if s.dim() != t.dim() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("latent dimension mismatch: {} vs {}", s.dim(), t.dim()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn batch(means: &[&[Real]], log_vars: &[&[Real]]) -> DiagGaussianBatch {
        let m = means.len();
        let n = means[0].len();
        let flat_m: Vec<Real> = means.iter().flat_map(|r| r.iter().copied()).collect();
        let flat_v: Vec<Real> = log_vars.iter().flat_map(|r| r.iter().copied()).collect();
        DiagGaussianBatch::new(
            Tensor::from_vec(&[m, n], flat_m).unwrap(),
            Tensor::from_vec(&[m, n], flat_v).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn kl_matches_hand_value() {
        // Zero mean, variance 2 in both coordinates:
        // per dim 0.5 * (2 + 0 - ln 2 - 1); ln 2 = 0.6931471805599453.
        let tape = Tape::no_grad();
        let g = batch(&[&[0.0, 0.0]], &[&[2.0f64.ln(), 2.0f64.ln()]]);
        let kl = kl_to_standard_normal(&tape, &g).unwrap();
        assert!((kl.item() - 0.306_852_819_440_054_7).abs() < 1e-15, "got {}", kl.item());

        // Standard normal against itself.
        let g0 = batch(&[&[0.0, 0.0, 0.0]], &[&[0.0, 0.0, 0.0]]);
        let kl0 = kl_to_standard_normal(&tape, &g0).unwrap();
        assert_eq!(kl0.item(), 0.0);
    }

    #[test]
    fn pair_kernel_matches_frozen_values() {
        let tape = Tape::no_grad();
        // Two standard normals: 1 / (2 sqrt(pi)).
        let a = DiagGaussianBatch::single(vec![0.0], vec![0.0]).unwrap();
        let k = pair_kernel(&tape, &a, &a).unwrap();
        assert!((k.item() - 0.282_094_791_773_878_14).abs() < 1e-15, "got {}", k.item());

        // Unit means two apart: same normalizer scaled by exp(-1).
        let b = DiagGaussianBatch::single(vec![2.0], vec![0.0]).unwrap();
        let k2 = pair_kernel(&tape, &a, &b).unwrap();
        assert!((k2.item() - 0.103_776_874_355_148_68).abs() < 1e-15, "got {}", k2.item());
    }

    #[test]
    fn pair_kernel_agrees_with_quadrature_and_naive_form_at_small_n() {
        let tape = Tape::no_grad();
        let (ua, lva) = (vec![0.4, -1.2], vec![-0.3, 0.8]);
        let (ub, lvb) = (vec![-0.9, 0.5], vec![0.2, -1.0]);
        let a = DiagGaussianBatch::single(ua.clone(), lva.clone()).unwrap();
        let b = DiagGaussianBatch::single(ub.clone(), lvb.clone()).unwrap();
        let k = pair_kernel(&tape, &a, &b).unwrap().item();

        let va: Vec<Real> = lva.iter().map(|v| v.exp()).collect();
        let vb: Vec<Real> = lvb.iter().map(|v| v.exp()).collect();
        let quad = oracle::pair_kernel_quadrature(&ua, &va, &ub, &vb, 2001);
        assert!((k - quad).abs() < 1e-10, "kernel {k} quadrature {quad}");

        let naive = oracle::naive_pair_kernel(&ua, &va, &ub, &vb);
        assert!((k - naive).abs() < 1e-15, "kernel {k} naive {naive}");
    }

    #[test]
    fn log_space_kernel_survives_high_dimension_where_naive_form_dies() {
        // Variances near 23 give per-dimension normalizer factors around
        // sqrt(2 pi * 46) ~ 17; 256 of them multiply past the f64 range, so
        // the naive normalizer overflows and its kernel collapses to zero.
        // The log-space path sums 256 small logs instead and comes back with
        // a subnormal but positive value.
        let n = 256;
        let mut state = 0x9e37_79b9_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as Real / (1u64 << 31) as Real
        };
        let ua: Vec<Real> = (0..n).map(|_| 0.1 * next() - 0.05).collect();
        let ub: Vec<Real> = (0..n).map(|_| 0.1 * next() - 0.05).collect();
        let la: Vec<Real> = (0..n).map(|_| (21.0 + 5.0 * next()).ln()).collect();
        let lb: Vec<Real> = (0..n).map(|_| (21.0 + 5.0 * next()).ln()).collect();

        let va: Vec<Real> = la.iter().map(|v| v.exp()).collect();
        let vb: Vec<Real> = lb.iter().map(|v| v.exp()).collect();
        let naive = oracle::naive_pair_kernel(&ua, &va, &ub, &vb);
        assert_eq!(naive, 0.0, "naive form was expected to underflow");

        let tape = Tape::no_grad();
        let a = DiagGaussianBatch::single(ua, la).unwrap();
        let b = DiagGaussianBatch::single(ub, lb).unwrap();
        let k = pair_kernel(&tape, &a, &b).unwrap().item();
        assert!(k > 0.0 && k.is_finite(), "log-space kernel gave {k}");
    }

    #[test]
    fn full_distance_expands_into_pair_kernels() {
        let tape = Tape::no_grad();
        let s = batch(&[&[0.0, 0.5], &[1.0, -0.5]], &[&[0.1, -0.2], &[0.0, 0.3]]);
        let t = batch(&[&[-0.3, 0.2]], &[&[0.4, 0.0]]);

        let d = mixture_l2_distance(&tape, &s, &t).unwrap().item();

        // Expand by hand from single-pair kernels.
        let comp = |m: &DiagGaussianBatch, i: usize| -> DiagGaussianBatch {
            let n = m.dim();
            let means = m.means().to_vec()[i * n..(i + 1) * n].to_vec();
            let lvs = m.log_vars().to_vec()[i * n..(i + 1) * n].to_vec();
            DiagGaussianBatch::single(means, lvs).unwrap()
        };
        let k = |a: &DiagGaussianBatch, b: &DiagGaussianBatch| -> Real {
            pair_kernel(&tape, a, b).unwrap().item()
        };
        let (ms, mt) = (s.count() as Real, t.count() as Real);
        let mut ss = 0.0;
        for i in 0..s.count() {
            for j in 0..s.count() {
                ss += k(&comp(&s, i), &comp(&s, j));
            }
        }
        let mut st = 0.0;
        for i in 0..s.count() {
            for j in 0..t.count() {
                st += k(&comp(&s, i), &comp(&t, j));
            }
        }
        let mut tt = 0.0;
        for i in 0..t.count() {
            for j in 0..t.count() {
                tt += k(&comp(&t, i), &comp(&t, j));
            }
        }
        let expanded = ss / (ms * ms) + tt / (mt * mt) - 2.0 * st / (ms * mt);
        assert!((d - expanded).abs() < 1e-14, "distance {d} expansion {expanded}");
    }

    #[test]
    fn distances_are_exactly_symmetric_and_vanish_on_identical_batches() {
        let tape = Tape::no_grad();
        let s = batch(
            &[&[0.3, -0.8, 1.2], &[-0.1, 0.4, 0.0]],
            &[&[0.2, -0.5, 0.1], &[-0.3, 0.0, 0.6]],
        );
        let t = batch(
            &[&[1.0, 0.0, -0.4], &[0.2, -0.2, 0.9]],
            &[&[0.0, 0.3, -0.2], &[0.5, -0.1, 0.0]],
        );

        let full_st = mixture_l2_distance(&tape, &s, &t).unwrap().item();
        let full_ts = mixture_l2_distance(&tape, &t, &s).unwrap().item();
        assert_eq!(full_st.to_bits(), full_ts.to_bits());

        let sl_st = sliced_l2_distance(&tape, &s, &t).unwrap().item();
        let sl_ts = sliced_l2_distance(&tape, &t, &s).unwrap().item();
        assert_eq!(sl_st.to_bits(), sl_ts.to_bits());

        assert!(mixture_l2_distance(&tape, &s, &s).unwrap().item().abs() < 1e-15);
        assert!(sliced_l2_distance(&tape, &t, &t).unwrap().item().abs() < 1e-14);

        // Distances are nonnegative and positive for distinct mixtures.
        assert!(full_st > 0.0 && sl_st > 0.0);
    }

    #[test]
    fn sliced_distance_matches_full_distance_at_n_1() {
        // In one dimension the coordinatewise sum has a single term equal to
        // the full distance.
        let tape = Tape::no_grad();
        let s = batch(&[&[0.2], &[-0.7]], &[&[0.1], &[-0.4]]);
        let t = batch(&[&[0.9], &[0.0]], &[&[0.3], &[0.2]]);
        let full = mixture_l2_distance(&tape, &s, &t).unwrap().item();
        let sliced = sliced_l2_distance(&tape, &s, &t).unwrap().item();
        assert!((full - sliced).abs() < 1e-15, "full {full} sliced {sliced}");
    }
}
