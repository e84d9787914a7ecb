//! Independent numerical references for every closed-form quantity.
//!
//! The distribution math elsewhere in the crate is analytic; the functions
//! here recompute the same quantities by composite Simpson quadrature, Monte
//! Carlo sampling, or exhaustive enumeration, sharing no code with the
//! implementations they check. Integration ranges adapt to the component
//! spread so node budgets translate into accuracy: the product of two normal
//! densities is itself proportional to a normal density, so a range that
//! covers that product's support to twelve standard deviations leaves
//! truncation error far below the quadrature error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Real, PI};

/// Normal density, evaluated literally.
pub fn normal_pdf(x: Real, mean: Real, var: Real) -> Real {
    let d = x - mean;
    (-0.5 * d * d / var).exp() / (2.0 * PI * var).sqrt()
}

/// Composite Simpson rule with an odd number of nodes.
pub fn simpson(f: impl Fn(Real) -> Real, a: Real, b: Real, nodes: usize) -> Real {
    assert!(nodes >= 3 && nodes % 2 == 1, "simpson wants an odd node count >= 3");
    let h = (b - a) / (nodes - 1) as Real;
    let mut s = f(a) + f(b);
    for i in 1..nodes - 1 {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as Real * h);
    }
    s * h / 3.0
}

/// Composite Simpson rule on a 2-D product grid.
pub fn simpson_2d(
    f: impl Fn(Real, Real) -> Real,
    (ax, bx, nx): (Real, Real, usize),
    (ay, by, ny): (Real, Real, usize),
) -> Real {
    assert!(nx >= 3 && nx % 2 == 1 && ny >= 3 && ny % 2 == 1);
    let hx = (bx - ax) / (nx - 1) as Real;
    let hy = (by - ay) / (ny - 1) as Real;
    let wt = |i: usize, n: usize| -> Real {
        if i == 0 || i == n - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let mut total = 0.0;
    for iy in 0..ny {
        let y = ay + iy as Real * hy;
        let wy = wt(iy, ny);
        let mut row = 0.0;
        for ix in 0..nx {
            row += wt(ix, nx) * f(ax + ix as Real * hx, y);
        }
        total += wy * row;
    }
    total * hx * hy / 9.0
}

/// Integration range covering the product of two normal densities: the
/// product is proportional to a normal with mean `(ua*vb + ub*va)/(va+vb)`
/// and variance `va*vb/(va+vb)`; twelve of its standard deviations out, the
/// truncated mass is negligible against quadrature error.
fn product_range(ua: Real, va: Real, ub: Real, vb: Real) -> (Real, Real) {
    let c = (ua * vb + ub * va) / (va + vb);
    let sd = (va * vb / (va + vb)).sqrt();
    (c - 12.0 * sd, c + 12.0 * sd)
}

/// Quadrature value of the inner product of two diagonal Gaussian densities
/// (the integral of their pointwise product) for one or two dimensions.
pub fn pair_kernel_quadrature(
    u_a: &[Real],
    var_a: &[Real],
    u_b: &[Real],
    var_b: &[Real],
    nodes: usize,
) -> Real {
    assert_eq!(u_a.len(), var_a.len());
    assert_eq!(u_b.len(), var_b.len());
    assert_eq!(u_a.len(), u_b.len());
    match u_a.len() {
        1 => {
            let (lo, hi) = product_range(u_a[0], var_a[0], u_b[0], var_b[0]);
            simpson(
                |x| normal_pdf(x, u_a[0], var_a[0]) * normal_pdf(x, u_b[0], var_b[0]),
                lo,
                hi,
                nodes,
            )
        }
        2 => {
            let (lo0, hi0) = product_range(u_a[0], var_a[0], u_b[0], var_b[0]);
            let (lo1, hi1) = product_range(u_a[1], var_a[1], u_b[1], var_b[1]);
            simpson_2d(
                |x, y| {
                    normal_pdf(x, u_a[0], var_a[0])
                        * normal_pdf(x, u_b[0], var_b[0])
                        * normal_pdf(y, u_a[1], var_a[1])
                        * normal_pdf(y, u_b[1], var_b[1])
                },
                (lo0, hi0, nodes),
                (lo1, hi1, nodes),
            )
        }
        n => panic!("pair kernel quadrature supports n in {{1, 2}}, got {n}"),
    }
}

/// Deliberately naive kernel evaluation: the normalizer is accumulated as a
/// consecutive product of per-dimension factors, exactly as the closed form
/// reads on paper. For a few hundred dimensions that running product leaves
/// the representable range and the result collapses to zero or worse; the
/// log-space implementation in `gaussian` exists because of this.
pub fn naive_pair_kernel(u_a: &[Real], var_a: &[Real], u_b: &[Real], var_b: &[Real]) -> Real {
    let mut quad = 0.0;
    let mut denom = 1.0;
    for l in 0..u_a.len() {
        let lam = var_a[l] + var_b[l];
        let d = u_a[l] - u_b[l];
        quad += d * d / lam;
        denom *= (2.0 * PI * lam).sqrt();
    }
    (-0.5 * quad).exp() / denom
}

/// One mixture of diagonal Gaussians with uniform component weights.
#[derive(Debug, Clone)]
pub struct MixtureRef {
    pub means: Vec<Vec<Real>>,
    pub vars: Vec<Vec<Real>>,
}

impl MixtureRef {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn density(&self, z: &[Real]) -> Real {
        let m = self.means.len() as Real;
        let mut q = 0.0;
        for (u, v) in self.means.iter().zip(&self.vars) {
            let mut p = 1.0;
            for l in 0..z.len() {
                p *= normal_pdf(z[l], u[l], v[l]);
            }
            q += p;
        }
        q / m
    }

    fn density_1d(&self, axis: usize, z: Real) -> Real {
        let m = self.means.len() as Real;
        let mut q = 0.0;
        for (u, v) in self.means.iter().zip(&self.vars) {
            q += normal_pdf(z, u[axis], v[axis]);
        }
        q / m
    }

    fn axis_range(&self, other: &MixtureRef, axis: usize) -> (Real, Real) {
        let mut lo = Real::INFINITY;
        let mut hi = Real::NEG_INFINITY;
        for mix in [self, other] {
            for (u, v) in mix.means.iter().zip(&mix.vars) {
                let sd = v[axis].sqrt();
                lo = lo.min(u[axis] - 12.0 * sd);
                hi = hi.max(u[axis] + 12.0 * sd);
            }
        }
        (lo, hi)
    }
}

/// Quadrature value of the squared L2 distance between two Gaussian-mixture
/// densities, for one or two dimensions.
pub fn mixture_l2_quadrature(s: &MixtureRef, t: &MixtureRef, nodes: usize) -> Real {
    assert_eq!(s.dim(), t.dim());
    match s.dim() {
        1 => {
            let (lo, hi) = s.axis_range(t, 0);
            simpson(
                |x| {
                    let d = s.density(&[x]) - t.density(&[x]);
                    d * d
                },
                lo,
                hi,
                nodes,
            )
        }
        2 => {
            let (lo0, hi0) = s.axis_range(t, 0);
            let (lo1, hi1) = s.axis_range(t, 1);
            simpson_2d(
                |x, y| {
                    let d = s.density(&[x, y]) - t.density(&[x, y]);
                    d * d
                },
                (lo0, hi0, nodes),
                (lo1, hi1, nodes),
            )
        }
        n => panic!("mixture quadrature supports n in {{1, 2}}, got {n}"),
    }
}

/// Quadrature value of the coordinatewise distance: the sum over axes of the
/// squared L2 distance between the 1-D marginal mixtures. Works for any
/// dimension because each axis is an independent 1-D integral.
pub fn sliced_l2_quadrature(s: &MixtureRef, t: &MixtureRef, nodes: usize) -> Real {
    assert_eq!(s.dim(), t.dim());
    let mut total = 0.0;
    for axis in 0..s.dim() {
        let (lo, hi) = s.axis_range(t, axis);
        total += simpson(
            |x| {
                let d = s.density_1d(axis, x) - t.density_1d(axis, x);
                d * d
            },
            lo,
            hi,
            nodes,
        );
    }
    total
}

/// Monte Carlo estimate of KL(q || standard normal) for a diagonal Gaussian
/// q, by sampling from q and averaging the log-density ratio.
pub fn mc_kl_to_standard_normal(u: &[Real], log_var: &[Real], samples: usize, seed: u64) -> Real {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = u.len();
    let sd: Vec<Real> = log_var.iter().map(|&lv| (0.5 * lv).exp()).collect();
    let var: Vec<Real> = log_var.iter().map(|&lv| lv.exp()).collect();
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut ratio = 0.0;
        for l in 0..n {
            let eps: Real = StandardNormal.sample(&mut rng);
            let z = u[l] + sd[l] * eps;
            let zc = z - u[l];
            // log q(z) - log p(z), per coordinate, constants cancelled.
            ratio += 0.5 * (z * z - zc * zc / var[l] - log_var[l]);
        }
        acc += ratio;
    }
    acc / samples as Real
}

/// Dice overlap recomputed from coordinate sets.
pub fn brute_dice(pred: &[bool], truth: &[bool]) -> Real {
    assert_eq!(pred.len(), truth.len());
    let p: std::collections::HashSet<usize> =
        pred.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    let t: std::collections::HashSet<usize> =
        truth.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    let inter = p.intersection(&t).count();
    2.0 * inter as Real / (p.len() + t.len()) as Real
}

/// Boundary pixels of a mask: set pixels with a 4-neighbor outside the mask,
/// counting the image edge as outside. Row-major order.
fn brute_boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
            let exposed = edge
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
            if exposed {
                out.push((y, x));
            }
        }
    }
    out
}

/// Average symmetric surface distance recomputed by scanning every boundary
/// pair. `None` when either mask has no boundary (empty mask).
pub fn brute_assd(pred: &[bool], truth: &[bool], h: usize, w: usize) -> Option<Real> {
    assert_eq!(pred.len(), h * w);
    assert_eq!(truth.len(), h * w);
    let bp = brute_boundary(pred, h, w);
    let bt = brute_boundary(truth, h, w);
    if bp.is_empty() || bt.is_empty() {
        return None;
    }
    let nearest = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Real {
        let mut sum = 0.0;
        for &(ay, ax) in from {
            let mut best = Real::INFINITY;
            for &(by, bx) in to {
                let dy = ay as Real - by as Real;
                let dx = ax as Real - bx as Real;
                let d = (dy * dy + dx * dx).sqrt();
                if d < best {
                    best = d;
                }
            }
            sum += best;
        }
        sum
    };
    let total = nearest(&bp, &bt) + nearest(&bt, &bp);
    Some(total / (bp.len() + bt.len()) as Real)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_a_normal_density_to_one() {
        let v = simpson(|x| normal_pdf(x, 0.3, 0.8), 0.3 - 12.0, 0.3 + 12.0, 4001);
        assert!((v - 1.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn simpson_2d_integrates_a_product_density_to_one() {
        let v = simpson_2d(
            |x, y| normal_pdf(x, -0.5, 0.5) * normal_pdf(y, 1.0, 2.0),
            (-0.5 - 10.0, -0.5 + 10.0, 801),
            (1.0 - 18.0, 1.0 + 18.0, 801),
        );
        assert!((v - 1.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn kernel_quadrature_matches_hand_value_for_standard_normals() {
        // Integral of the squared standard normal density: 1 / (2 sqrt(pi)).
        let v = pair_kernel_quadrature(&[0.0], &[1.0], &[0.0], &[1.0], 4001);
        assert!((v - 0.282_094_791_773_878_14).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn kernel_quadrature_is_stable_under_refinement() {
        let (ua, va) = ([0.7, -1.1], [0.3, 1.9]);
        let (ub, vb) = ([-0.2, 0.4], [2.2, 0.6]);
        let coarse = pair_kernel_quadrature(&ua, &va, &ub, &vb, 1001);
        let fine = pair_kernel_quadrature(&ua, &va, &ub, &vb, 2001);
        assert!((coarse - fine).abs() < 1e-11, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn mixture_quadrature_vanishes_for_identical_mixtures() {
        let m = MixtureRef {
            means: vec![vec![0.0, 1.0], vec![-1.5, 0.5]],
            vars: vec![vec![0.5, 1.0], vec![1.5, 0.7]],
        };
        let v = mixture_l2_quadrature(&m, &m, 801);
        assert!(v.abs() < 1e-15, "got {v}");
        let s = sliced_l2_quadrature(&m, &m, 4001);
        assert!(s.abs() < 1e-15, "got {s}");
    }

    #[test]
    fn mc_kl_is_zero_for_the_prior_itself() {
        let v = mc_kl_to_standard_normal(&[0.0, 0.0], &[0.0, 0.0], 200_000, 7);
        assert!(v.abs() < 0.01, "got {v}");
    }

    #[test]
    fn brute_metrics_on_hand_masks() {
        // 4x4: pred is the left 2-wide column block, truth the top 2-tall row
        // block; overlap is the 2x2 corner.
        let (h, w) = (4, 4);
        let mut pred = vec![false; 16];
        let mut truth = vec![false; 16];
        for y in 0..4 {
            for x in 0..2 {
                pred[y * w + x] = true;
            }
        }
        for y in 0..2 {
            for x in 0..4 {
                truth[y * w + x] = true;
            }
        }
        let d = brute_dice(&pred, &truth);
        assert!((d - 2.0 * 4.0 / 16.0).abs() < 1e-15);

        // Every pixel of both masks is boundary (blocks are 2 wide/tall), and
        // identical masks give distance zero.
        assert_eq!(brute_assd(&pred, &pred, h, w), Some(0.0));
        // Empty against nonempty is undefined.
        assert_eq!(brute_assd(&vec![false; 16], &truth, h, w), None);

        // Single pixels at distance 5 (3-4-5 triangle).
        let mut a = vec![false; 8 * 8];
        let mut b = vec![false; 8 * 8];
        a[1 * 8 + 1] = true;
        b[4 * 8 + 5] = true;
        let v = brute_assd(&a, &b, 8, 8).unwrap();
        assert!((v - 5.0).abs() < 1e-15, "got {v}");
    }
}
