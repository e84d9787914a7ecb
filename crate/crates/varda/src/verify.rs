//! Built-in self checks: every closed-form quantity in the crate is compared
//! against an independent route (quadrature, Monte Carlo, finite differences,
//! or brute force) at reduced scale. The `verify` CLI subcommand runs these;
//! the full-scale sweeps live in the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{generate, SynthSpec};
use crate::gaussian::{
    kl_to_standard_normal, mixture_l2_distance, pair_kernel, sliced_l2_distance, DiagGaussianBatch,
};
use crate::loss::{total_loss, LossWeights};
use crate::metrics::{assd, dice};
use crate::nets::{init_params, NetConfig};
use crate::oracle::{
    brute_assd, brute_dice, mc_kl_to_standard_normal, mixture_l2_quadrature, pair_kernel_quadrature,
    sliced_l2_quadrature, MixtureRef,
};
use crate::tensor::{grad_check, Tape, Tensor};
use crate::train::{train, TrainConfig};
use crate::Real;

/// Outcome of one self check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error or a short failure description.
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        let status = if self.passed { "ok  " } else { "FAIL" };
        format!("{status}  {:<38} {} ({:.1}s)", self.name, self.detail, self.seconds)
    }
}

fn run(name: &'static str, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let t0 = std::time::Instant::now();
    let (passed, detail) = f();
    CheckResult { name, passed, detail, seconds: t0.elapsed().as_secs_f64() }
}

fn random_gaussian(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Real>, Vec<Real>) {
    let means: Vec<Real> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let log_vars: Vec<Real> = (0..n).map(|_| rng.gen_range(-2.0..1.5)).collect();
    (means, log_vars)
}

fn batch_from(means: &[Vec<Real>], log_vars: &[Vec<Real>]) -> DiagGaussianBatch {
    let (m, n) = (means.len(), means[0].len());
    let flat_m: Vec<Real> = means.iter().flatten().copied().collect();
    let flat_v: Vec<Real> = log_vars.iter().flatten().copied().collect();
    DiagGaussianBatch::new(
        Tensor::from_vec(&[m, n], flat_m).unwrap(),
        Tensor::from_vec(&[m, n], flat_v).unwrap(),
    )
    .unwrap()
}

fn random_mixture(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (MixtureRef, DiagGaussianBatch) {
    let mut means = Vec::with_capacity(m);
    let mut log_vars = Vec::with_capacity(m);
    for _ in 0..m {
        let (u, lv) = random_gaussian(rng, n);
        means.push(u);
        log_vars.push(lv);
    }
    let vars: Vec<Vec<Real>> =
        log_vars.iter().map(|row| row.iter().map(|lv| lv.exp()).collect()).collect();
    (MixtureRef { means: means.clone(), vars }, batch_from(&means, &log_vars))
}

/// Closed-form Gaussian inner product against 1-D and 2-D quadrature.
pub fn check_pair_kernel(cases: usize, tol: Real) -> CheckResult {
    run("pair kernel vs quadrature", || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst: Real = 0.0;
        for case in 0..cases {
            let n = 1 + case % 2;
            let (ua, la) = random_gaussian(&mut rng, n);
            let (ub, lb) = random_gaussian(&mut rng, n);
            let va: Vec<Real> = la.iter().map(|v| v.exp()).collect();
            let vb: Vec<Real> = lb.iter().map(|v| v.exp()).collect();
            // 2001 Simpson nodes per axis: error well under the tolerance.
            let reference = pair_kernel_quadrature(&ua, &va, &ub, &vb, 2001);
            let a = batch_from(&[ua], &[la]);
            let b = batch_from(&[ub], &[lb]);
            let got = pair_kernel(&Tape::no_grad(), &a, &b).unwrap().item();
            worst = worst.max((got - reference).abs());
        }
        (worst < tol, format!("worst abs err {worst:.2e} over {cases} cases"))
    })
}

/// Mixture distance (both modes) against density quadrature.
pub fn check_mixture_distance(cases: usize, tol: Real) -> CheckResult {
    run("mixture distance vs quadrature", || {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut worst: Real = 0.0;
        for case in 0..cases {
            let n = 1 + case % 2;
            let m_s = 1 + case % 3;
            let m_t = 1 + (case / 2) % 3;
            let (ref_s, batch_s) = random_mixture(&mut rng, m_s, n);
            let (ref_t, batch_t) = random_mixture(&mut rng, m_t, n);
            let tape = Tape::no_grad();
            // 2-D grids get fewer nodes per axis to bound the sweep's cost.
            let nodes = if n == 1 { 4001 } else { 801 };

            let full = mixture_l2_distance(&tape, &batch_s, &batch_t).unwrap().item();
            worst = worst.max((full - mixture_l2_quadrature(&ref_s, &ref_t, nodes)).abs());

            let sliced = sliced_l2_distance(&tape, &batch_s, &batch_t).unwrap().item();
            worst = worst.max((sliced - sliced_l2_quadrature(&ref_s, &ref_t, nodes)).abs());
        }
        (worst < tol, format!("worst abs err {worst:.2e} over {cases} cases, both modes"))
    })
}

/// Closed-form KL to the standard normal against Monte Carlo.
pub fn check_kl_monte_carlo(samples: usize, rel_tol: Real) -> CheckResult {
    run("gaussian KL vs monte carlo", || {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let mut worst: Real = 0.0;
        for case in 0..4 {
            let n = 3 + case;
            let (u, lv) = random_gaussian(&mut rng, n);
            let batch = batch_from(&[u.clone()], &[lv.clone()]);
            let exact =
                kl_to_standard_normal(&Tape::no_grad(), &batch).unwrap().item();
            let mc = mc_kl_to_standard_normal(&u, &lv, samples, 404 + case as u64);
            worst = worst.max((exact - mc).abs() / exact.abs().max(1e-12));
        }
        (worst < rel_tol, format!("worst rel err {worst:.2e} at {samples} samples"))
    })
}

/// Tape gradients of the full training loss against central differences on a
/// small network.
pub fn check_loss_gradients(rel_tol: Real) -> CheckResult {
    run("loss gradients vs finite differences", || {
        let cfg = NetConfig {
            image_hw: 8,
            in_channels: 1,
            num_classes: 3,
            latent_dim: 8,
            decoder_convs: 3,
            label_conditioned: true,
            enc_width: 3,
            seg_width: 3,
            dec_width: 3,
        };
        let params = init_params(&cfg, 11).unwrap();
        let weights = LossWeights { alpha1: 1.0, alpha2: 1.0, alpha3: 0.5, entropy: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        let m = 2;
        let rand_t = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap()
        };
        let x_s = rand_t(&[m, 1, 8, 8], &mut rng);
        let x_t = rand_t(&[m, 1, 8, 8], &mut rng);
        let mut y = vec![0.0; m * 3 * 64];
        for img in 0..m {
            for px in 0..64 {
                let k = rng.gen_range(0..3usize);
                y[(img * 3 + k) * 64 + px] = 1.0;
            }
        }
        let y_s = Tensor::from_vec(&[m, 3, 8, 8], y).unwrap();
        let eps_s = rand_normal(&[m, 1, 8], &mut rng);
        let eps_t = rand_normal(&[m, 1, 8], &mut rng);

        let targets: Vec<(String, Tensor)> = params
            .iter()
            .map(|(name, _, t)| (name.to_string(), t.clone()))
            .collect();
        let refs: Vec<(&str, &Tensor)> = targets.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let report = grad_check(&refs, 1e-5, Some(6), |tape| {
            let (loss, _) = total_loss(
                tape,
                &params,
                &cfg,
                &weights,
                crate::loss::DiscrepancyMode::Sliced,
                &x_s,
                &y_s,
                &x_t,
                &eps_s,
                &eps_t,
            )
            .map_err(|e| crate::tensor::TensorError::InvalidArgument {
                op: "total_loss",
                detail: e.to_string(),
            })?;
            Ok(loss)
        });
        match report {
            Ok(r) => (
                r.max_rel_err < rel_tol,
                format!(
                    "worst rel err {:.2e} ({} at [{}], analytic {:.3e} vs numeric {:.3e}), {} probes",
                    r.max_rel_err, r.worst_tensor, r.worst_index, r.worst_analytic, r.worst_numeric, r.probed
                ),
            ),
            Err(e) => (false, format!("gradient check failed to run: {e}")),
        }
    })
}

fn rand_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Distance is zero exactly when the mixtures coincide: identical batches hit
/// numerical zero, perturbed ones are strictly positive. Both modes.
pub fn check_zero_iff_equal(cases: usize, zero_tol: Real) -> CheckResult {
    run("distance zero iff mixtures equal", || {
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let tape = Tape::no_grad();
        let mut worst_zero: Real = 0.0;
        let mut min_positive = Real::INFINITY;
        for case in 0..cases {
            let n = 1 + case % 4;
            let m = 1 + case % 3;
            let (_, s) = random_mixture(&mut rng, m, n);
            let means: Vec<Vec<Real>> =
                (0..m).map(|i| s.means().data()[i * n..(i + 1) * n].to_vec()).collect();
            let lvs: Vec<Vec<Real>> =
                (0..m).map(|i| s.log_vars().data()[i * n..(i + 1) * n].to_vec()).collect();

            let s_copy = batch_from(&means, &lvs);
            for d in [
                mixture_l2_distance(&tape, &s, &s_copy).unwrap().item(),
                sliced_l2_distance(&tape, &s, &s_copy).unwrap().item(),
            ] {
                worst_zero = worst_zero.max(d.abs());
            }

            // One nudged mean must give a strictly positive distance.
            let mut means = means;
            means[case % m][case % n] += 0.05;
            let t = batch_from(&means, &lvs);
            for d in [
                mixture_l2_distance(&tape, &s, &t).unwrap().item(),
                sliced_l2_distance(&tape, &s, &t).unwrap().item(),
            ] {
                min_positive = min_positive.min(d);
            }
        }
        (
            worst_zero <= zero_tol && min_positive > 0.0,
            format!("identical pairs <= {worst_zero:.2e}, perturbed pairs >= {min_positive:.2e}"),
        )
    })
}

/// High-dimensional distances stay finite and positive where a naive
/// product-form normalizer underflows to zero.
pub fn check_log_space_stability(n: usize) -> CheckResult {
    run("kernel stays finite at high dimension", || {
        let mut rng = ChaCha8Rng::seed_from_u64(707);
        let (ua, la) = random_gaussian(&mut rng, n);
        let (ub, lb) = random_gaussian(&mut rng, n);
        let va: Vec<Real> = la.iter().map(|v| v.exp()).collect();
        let vb: Vec<Real> = lb.iter().map(|v| v.exp()).collect();
        let naive = crate::oracle::naive_pair_kernel(&ua, &va, &ub, &vb);
        let a = batch_from(&[ua], &[la]);
        let b = batch_from(&[ub], &[lb]);
        let tape = Tape::no_grad();
        let stable = pair_kernel(&tape, &a, &b).unwrap().item();
        let sliced = sliced_l2_distance(&tape, &a, &b).unwrap().item();
        let ok = naive == 0.0 && stable.is_finite() && sliced.is_finite() && sliced > 0.0;
        (
            ok,
            format!("n = {n}: naive normalizer {naive:.1e}, log-space kernel {stable:.3e}"),
        )
    })
}

/// Dice and boundary distance against brute-force reference implementations
/// on random masks.
pub fn check_metric_oracles(masks: usize) -> CheckResult {
    run("metrics vs brute force", || {
        let mut rng = ChaCha8Rng::seed_from_u64(808);
        let (h, w) = (16, 16);
        let mut compared = 0usize;
        for _ in 0..masks {
            let k = 3u8;
            let pred: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..k)).collect();
            let truth: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..k)).collect();
            for class in 0..k {
                let pb: Vec<bool> = pred.iter().map(|&v| v == class).collect();
                let tb: Vec<bool> = truth.iter().map(|&v| v == class).collect();
                let d = dice(&pred, &truth, class);
                if d.value.to_bits() != brute_dice(&pb, &tb).to_bits() {
                    return (false, format!("dice mismatch on class {class}"));
                }
                let got = assd(&pred, &truth, class, h, w);
                let reference = brute_assd(&pb, &tb, h, w);
                match (got, reference) {
                    (None, None) => {}
                    (Some(a), Some(b)) if a.to_bits() == b.to_bits() => {}
                    other => return (false, format!("assd mismatch on class {class}: {other:?}")),
                }
                compared += 1;
            }
        }
        (true, format!("{compared} mask/class pairs bit-identical"))
    })
}

/// Two short training runs from the same seed must produce identical logs.
pub fn check_training_determinism() -> CheckResult {
    run("training is deterministic", || {
        let spec = SynthSpec { n_source: 6, n_target_train: 6, n_target_test: 2, ..SynthSpec::default() };
        let data = match generate(&spec) {
            Ok(d) => d,
            Err(e) => return (false, format!("dataset generation failed: {e}")),
        };
        let net = NetConfig {
            latent_dim: 64,
            decoder_convs: 0,
            enc_width: 4,
            seg_width: 4,
            dec_width: 3,
            ..NetConfig::default()
        };
        let cfg = TrainConfig { batch: 3, iterations: 8, seed: 5, ..TrainConfig::default() };
        let (a, b) = match (train(&cfg, &net, &data), train(&cfg, &net, &data)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return (false, format!("training failed: {e}")),
        };
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            if ra.to_csv_line() != rb.to_csv_line() {
                return (false, format!("rows differ at iteration {}", ra.iter));
            }
        }
        (true, format!("{} iterations, logs byte-identical", a.rows.len()))
    })
}

/// The full reduced suite, in fixed order.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check_pair_kernel(60, 1e-8),
        check_mixture_distance(20, 1e-6),
        check_kl_monte_carlo(1_000_000, 0.01),
        check_loss_gradients(1e-4),
        check_zero_iff_equal(40, 1e-12),
        check_log_space_stability(256),
        check_metric_oracles(60),
        check_training_determinism(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_suite_passes() {
        for result in run_all() {
            println!("{}", result.line());
            assert!(result.passed, "{}", result.line());
        }
    }

    #[test]
    fn result_line_formats_status() {
        let ok = CheckResult { name: "x", passed: true, detail: "fine".into(), seconds: 0.51 };
        assert!(ok.line().starts_with("ok  "));
        let bad = CheckResult { name: "x", passed: false, detail: "off".into(), seconds: 0.0 };
        assert!(bad.line().starts_with("FAIL"));
    }
}
