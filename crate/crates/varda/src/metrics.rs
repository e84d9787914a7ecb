//! Segmentation quality metrics (Dice overlap, average symmetric surface
//! distance) and whole-split evaluation.
//!
//! The implementations here are the production path: counting loops, integer
//! squared distances with an early exit, and a single square root per
//! boundary pixel. [`crate::oracle`] recomputes both metrics by brute force
//! (hash-set intersections, all-pairs float distances); tests require exact
//! agreement, which holds because `sqrt` is correctly rounded and both sides
//! accumulate in row-major order.

use std::env;

use thiserror::Error;

use crate::data::LabeledImage;
use crate::nets::{predict, Domain, NetConfig, NetError, ParameterSet};
use crate::tensor::Tensor;
use crate::Real;

/// Environment variable bounding evaluation parallelism. Default 1.
pub const THREADS_ENV: &str = "VARDA_THREADS";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("record {index} has no label; evaluation needs ground truth")]
    Unlabeled { index: usize },
    #[error("nothing to evaluate")]
    NoItems,
    #[error("{THREADS_ENV} must be a positive integer, got {0:?}")]
    BadThreads(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Dice overlap for one class. `vacuous` marks the empty-vs-empty case,
/// which scores 1.0 (perfect agreement about absence) but is flagged so
/// aggregation can tell it apart from a real match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dice {
    pub value: Real,
    pub vacuous: bool,
}

/// Dice = 2|P∩T| / (|P| + |T|) over pixels of `class`.
pub fn dice(pred: &[u8], truth: &[u8], class: u8) -> Dice {
    assert_eq!(pred.len(), truth.len(), "dice needs equal-size masks");
    let mut p = 0usize;
    let mut t = 0usize;
    let mut inter = 0usize;
    for (&a, &b) in pred.iter().zip(truth) {
        let in_p = a == class;
        let in_t = b == class;
        p += in_p as usize;
        t += in_t as usize;
        inter += (in_p && in_t) as usize;
    }
    if p + t == 0 {
        return Dice { value: 1.0, vacuous: true };
    }
    Dice { value: 2.0 * inter as Real / (p + t) as Real, vacuous: false }
}

/// Boundary pixels of `class` in a row-major class grid: class pixels with a
/// 4-neighbor of another class, counting the image edge as outside.
fn boundary(grid: &[u8], class: u8, h: usize, w: usize) -> Vec<(usize, usize)> {
    debug_assert_eq!(grid.len(), h * w);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if grid[y * w + x] != class {
                continue;
            }
            let exposed = y == 0
                || y == h - 1
                || x == 0
                || x == w - 1
                || grid[(y - 1) * w + x] != class
                || grid[(y + 1) * w + x] != class
                || grid[y * w + x - 1] != class
                || grid[y * w + x + 1] != class;
            if exposed {
                out.push((y, x));
            }
        }
    }
    out
}

/// Sum over `from` boundary pixels of the distance to the nearest `to`
/// boundary pixel. Distances are minimized as integer squares; `to` is
/// row-major, so once the row gap alone reaches the best square every later
/// pixel is farther and the scan stops.
fn nearest_sum(from: &[(usize, usize)], to: &[(usize, usize)]) -> Real {
    let mut sum = 0.0;
    for &(ay, ax) in from {
        let mut best = usize::MAX;
        for &(by, bx) in to {
            let dy2 = ay.abs_diff(by).pow(2);
            if by > ay && dy2 >= best {
                break;
            }
            let d2 = dy2 + ax.abs_diff(bx).pow(2);
            if d2 < best {
                best = d2;
            }
        }
        sum += (best as Real).sqrt();
    }
    sum
}

/// Average symmetric surface distance between the `class` regions of two
/// grids: mean over both boundaries of the nearest-boundary distance to the
/// other mask. `None` when either region is empty.
pub fn assd(pred: &[u8], truth: &[u8], class: u8, h: usize, w: usize) -> Option<Real> {
    assert_eq!(pred.len(), h * w, "assd needs h*w pred pixels");
    assert_eq!(truth.len(), h * w, "assd needs h*w truth pixels");
    let bp = boundary(pred, class, h, w);
    let bt = boundary(truth, class, h, w);
    if bp.is_empty() || bt.is_empty() {
        return None;
    }
    let total = nearest_sum(&bp, &bt) + nearest_sum(&bt, &bp);
    Some(total / (bp.len() + bt.len()) as Real)
}

/// Per-class aggregate over one evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class: usize,
    pub dice_mean: Real,
    pub dice_sd: Real,
    /// `None` when no image had a defined ASSD for this class.
    pub assd_mean: Option<Real>,
    pub assd_sd: Option<Real>,
    /// Images where ASSD was undefined (either mask empty).
    pub n_undefined: usize,
    /// Images where Dice was the flagged empty-vs-empty 1.0.
    pub n_vacuous: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassStats>,
    /// Mean of per-class Dice means over foreground classes (1..K);
    /// background overlap is easy and would dilute the signal.
    pub foreground_dice_mean: Real,
    pub n_images: usize,
}

fn mean_sd(values: &[Real]) -> (Real, Real) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as Real;
    let mean = values.iter().sum::<Real>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Collapses per-image `(dice, assd)` scores into a report. `scores[i][k]`
/// holds image i, class k.
fn aggregate(scores: &[Vec<(Dice, Option<Real>)>], num_classes: usize) -> MetricsReport {
    let mut per_class = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let mut dices = Vec::with_capacity(scores.len());
        let mut assds = Vec::new();
        let mut n_undefined = 0;
        let mut n_vacuous = 0;
        for row in scores {
            let (d, a) = &row[k];
            dices.push(d.value);
            n_vacuous += d.vacuous as usize;
            match a {
                Some(v) => assds.push(*v),
                None => n_undefined += 1,
            }
        }
        let (dice_mean, dice_sd) = mean_sd(&dices);
        let (assd_mean, assd_sd) = if assds.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_sd(&assds);
            (Some(m), Some(s))
        };
        per_class.push(ClassStats { class: k, dice_mean, dice_sd, assd_mean, assd_sd, n_undefined, n_vacuous });
    }
    let fg: Vec<Real> = per_class.iter().skip(1).map(|c| c.dice_mean).collect();
    let foreground_dice_mean = if fg.is_empty() { 0.0 } else { fg.iter().sum::<Real>() / fg.len() as Real };
    MetricsReport { per_class, foreground_dice_mean, n_images: scores.len() }
}

/// Class ids from a one-hot `[K, H, W]` label tensor.
pub fn one_hot_to_grid(label: &Tensor) -> Vec<u8> {
    let s = label.shape();
    let (k, npx) = (s[0], s[1] * s[2]);
    let data = label.data();
    let mut grid = vec![0u8; npx];
    for px in 0..npx {
        for c in 0..k {
            if data[c * npx + px] == 1.0 {
                grid[px] = c as u8;
                break;
            }
        }
    }
    grid
}

fn thread_budget(n_items: usize) -> Result<usize, EvalError> {
    let requested = match env::var(THREADS_ENV) {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).ok_or(EvalError::BadThreads(v))?,
        Err(_) => 1,
    };
    Ok(requested.min(n_items).max(1))
}

/// Plain-data copy of one evaluation record (tensors are not Send).
struct EvalJob {
    shape: Vec<usize>,
    image: Vec<Real>,
    truth: Vec<u8>,
}

fn score_one(
    params: &ParameterSet,
    cfg: &NetConfig,
    encoder: Domain,
    job: &EvalJob,
) -> Result<Vec<(Dice, Option<Real>)>, NetError> {
    let mut shape = vec![1];
    shape.extend_from_slice(&job.shape);
    let x = Tensor::from_vec(&shape, job.image.clone())?;
    let (_, pred) = predict(params, cfg, encoder, &x)?;
    let (h, w) = (job.shape[1], job.shape[2]);
    let scores = (0..cfg.num_classes)
        .map(|k| {
            let d = dice(&pred, &job.truth, k as u8);
            let a = assd(&pred, &job.truth, k as u8, h, w);
            (d, a)
        })
        .collect();
    Ok(scores)
}

/// Scores every labeled record with the given encoder branch and aggregates
/// per class. `VARDA_THREADS` bounds worker threads (default 1); results are
/// joined in chunk order, so the report does not depend on scheduling.
pub fn evaluate(
    params: &ParameterSet,
    cfg: &NetConfig,
    encoder: Domain,
    items: &[LabeledImage],
) -> Result<MetricsReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::NoItems);
    }
    let jobs: Vec<EvalJob> = items
        .iter()
        .enumerate()
        .map(|(index, item)| {
            let label = item.label.as_ref().ok_or(EvalError::Unlabeled { index })?;
            Ok(EvalJob {
                shape: item.image.shape().to_vec(),
                image: item.image.to_vec(),
                truth: one_hot_to_grid(label),
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let threads = thread_budget(jobs.len())?;

    let mut scores = Vec::with_capacity(jobs.len());
    if threads == 1 {
        for job in &jobs {
            scores.push(score_one(params, cfg, encoder, job)?);
        }
    } else {
        let raw = params.to_raw();
        let chunk = jobs.len().div_ceil(threads);
        let results: Vec<Result<Vec<Vec<(Dice, Option<Real>)>>, NetError>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = jobs
                    .chunks(chunk)
                    .map(|part| {
                        let raw = &raw;
                        scope.spawn(move || {
                            let local = ParameterSet::from_raw(raw)?;
                            part.iter().map(|job| score_one(&local, cfg, encoder, job)).collect()
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
            });
        for part in results {
            scores.extend(part?);
        }
    }
    Ok(aggregate(&scores, cfg.num_classes))
}

/// CSV rows matching the evaluation output contract: one row per class plus
/// a foreground-mean summary row; undefined distances print as `NA`.
pub fn report_to_csv(report: &MetricsReport) -> String {
    let mut out = String::from("class, dice_mean, dice_sd, assd_mean, assd_sd, n_undefined\n");
    let na = |v: Option<Real>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
    for c in &report.per_class {
        out.push_str(&format!(
            "{}, {:.6}, {:.6}, {}, {}, {}\n",
            c.class,
            c.dice_mean,
            c.dice_sd,
            na(c.assd_mean),
            na(c.assd_sd),
            c.n_undefined
        ));
    }
    out.push_str(&format!(
        "foreground_mean, {:.6}, , , , \n",
        report.foreground_dice_mean
    ));
    out
}

/// Fixed-width table of the same numbers for terminal output.
pub fn report_to_table(report: &MetricsReport) -> String {
    let mut out = format!(
        "{:>5} {:>10} {:>10} {:>10} {:>10} {:>6}\n",
        "class", "dice_mean", "dice_sd", "assd_mean", "assd_sd", "undef"
    );
    let na = |v: Option<Real>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    for c in &report.per_class {
        out.push_str(&format!(
            "{:>5} {:>10.4} {:>10.4} {:>10} {:>10} {:>6}\n",
            c.class,
            c.dice_mean,
            c.dice_sd,
            na(c.assd_mean),
            na(c.assd_sd),
            c.n_undefined
        ));
    }
    out.push_str(&format!(
        "foreground mean dice over {} images: {:.4}\n",
        report.n_images, report.foreground_dice_mean
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{brute_assd, brute_dice};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dice_hand_values() {
        // P = {0, 1}, T = {1, 2} as class-1 pixels on a 4-pixel row.
        let pred = [1u8, 1, 0, 0];
        let truth = [0u8, 1, 1, 0];
        let d = dice(&pred, &truth, 1);
        assert_eq!(d.value, 0.5);
        assert!(!d.vacuous);
        assert_eq!(dice(&pred, &pred, 1).value, 1.0);
        let other = [0u8, 0, 0, 1];
        assert_eq!(dice(&pred, &other, 2).value, 1.0);
        assert!(dice(&pred, &other, 2).vacuous);
        assert_eq!(dice(&[1, 0], &[0, 1], 1).value, 0.0);
    }

    #[test]
    fn dice_is_symmetric() {
        let pred = [1u8, 1, 0, 2, 2, 0];
        let truth = [1u8, 0, 0, 2, 0, 2];
        for k in 0..3 {
            assert_eq!(dice(&pred, &truth, k).value, dice(&truth, &pred, k).value);
        }
    }

    #[test]
    fn assd_hand_values() {
        // Two single pixels 3 apart on one row.
        let mut a = vec![0u8; 5 * 5];
        let mut b = vec![0u8; 5 * 5];
        a[2 * 5] = 1;
        b[2 * 5 + 3] = 1;
        assert_eq!(assd(&a, &b, 1, 5, 5), Some(3.0));
        assert_eq!(assd(&a, &a, 1, 5, 5), Some(0.0));
        assert_eq!(assd(&a, &b, 2, 5, 5), None, "empty masks are undefined");
        // 3-4-5 diagonal.
        let mut c = vec![0u8; 8 * 8];
        c[0] = 1;
        let mut d = vec![0u8; 8 * 8];
        d[3 * 8 + 4] = 1;
        assert_eq!(assd(&c, &d, 1, 8, 8), Some(5.0));
    }

    #[test]
    fn metrics_match_brute_force_oracles_exactly() {
        // The acceptance suite runs 200 instances; this is the fast smoke
        // version of the same exactness claim.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (16, 16);
        for _ in 0..40 {
            let pred: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..3)).collect();
            let truth: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..3)).collect();
            for k in 0..3u8 {
                let pb: Vec<bool> = pred.iter().map(|&v| v == k).collect();
                let tb: Vec<bool> = truth.iter().map(|&v| v == k).collect();
                let d = dice(&pred, &truth, k).value;
                let od = brute_dice(&pb, &tb);
                assert_eq!(d.to_bits(), od.to_bits(), "dice mismatch");
                let a = assd(&pred, &truth, k, h, w);
                let oa = brute_assd(&pb, &tb, h, w);
                match (a, oa) {
                    (None, None) => {}
                    (Some(x), Some(y)) => assert_eq!(x.to_bits(), y.to_bits(), "assd mismatch"),
                    other => panic!("definedness mismatch: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn aggregation_counts_undefined_and_vacuous() {
        let scores = vec![
            vec![(Dice { value: 1.0, vacuous: false }, Some(0.0)), (Dice { value: 1.0, vacuous: true }, None)],
            vec![(Dice { value: 0.5, vacuous: false }, Some(2.0)), (Dice { value: 0.0, vacuous: false }, None)],
        ];
        let report = aggregate(&scores, 2);
        assert_eq!(report.per_class[0].n_undefined, 0);
        assert_eq!(report.per_class[1].n_undefined, 2);
        assert_eq!(report.per_class[1].n_vacuous, 1);
        assert_eq!(report.per_class[1].assd_mean, None);
        assert!((report.per_class[0].dice_mean - 0.75).abs() < 1e-15);
        assert!((report.per_class[0].assd_mean.unwrap() - 1.0).abs() < 1e-15);
        // sd of {1.0, 0.5} = sqrt(0.125)
        assert!((report.per_class[0].dice_sd - 0.125f64.sqrt()).abs() < 1e-15);
        assert_eq!(report.foreground_dice_mean, 0.5);
    }

    #[test]
    fn csv_has_contract_columns_and_na_markers() {
        let scores = vec![vec![
            (Dice { value: 1.0, vacuous: false }, Some(0.0)),
            (Dice { value: 1.0, vacuous: true }, None),
        ]];
        let report = aggregate(&scores, 2);
        let csv = report_to_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "class, dice_mean, dice_sd, assd_mean, assd_sd, n_undefined"
        );
        assert!(lines.next().unwrap().starts_with("0, 1.000000"));
        let row1 = lines.next().unwrap();
        assert!(row1.contains("NA, NA, 1"), "got {row1}");
        assert!(lines.next().unwrap().starts_with("foreground_mean"));
    }

    #[test]
    fn evaluate_runs_end_to_end_and_ignores_thread_count() {
        use crate::data::{generate, SynthSpec};
        use crate::nets::init_params;

        let spec = SynthSpec { n_source: 3, n_target_train: 3, n_target_test: 3, ..SynthSpec::default() };
        let ds = generate(&spec).unwrap();
        let cfg = NetConfig::default();
        let params = init_params(&cfg, 1).unwrap();
        let a = evaluate(&params, &cfg, Domain::Target, &ds.target_test).unwrap();
        assert_eq!(a.per_class.len(), 4);
        assert_eq!(a.n_images, 3);
        // Same report regardless of the thread budget.
        env::set_var(THREADS_ENV, "3");
        let b = evaluate(&params, &cfg, Domain::Target, &ds.target_test).unwrap();
        env::remove_var(THREADS_ENV);
        assert_eq!(a, b);
        let err = evaluate(&params, &cfg, Domain::Target, &ds.target_train).unwrap_err();
        assert!(matches!(err, EvalError::Unlabeled { index: 0 }));
    }
}
