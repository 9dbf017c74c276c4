//! Deliberately naive reference computations used to check the fast paths.
//!
//! Nothing here calls into the modules it verifies: the Monte-Carlo KL estimator
//! draws its own Gaussian noise and evaluates densities directly, the dense
//! convolution is a six-deep loop, and the metrics are recounted pixel by pixel.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToleranceKind {
    Absolute,
    Relative,
}

/// Outcome of comparing a tested value against an oracle.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: String,
    pub reference: f64,
    pub tested: f64,
    pub tolerance: f64,
    pub kind: ToleranceKind,
    /// Sample count or finite-difference step, whichever applies.
    pub resolution: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, reference: f64, tested: f64, tolerance: f64, kind: ToleranceKind, resolution: f64) -> Self {
        let err = match kind {
            ToleranceKind::Absolute => (tested - reference).abs(),
            ToleranceKind::Relative => (tested - reference).abs() / reference.abs().max(f64::MIN_POSITIVE),
        };
        Self { name: name.into(), reference, tested, tolerance, kind, resolution, pass: err <= tolerance }
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}: tested={:.9} reference={:.9} tol={:e} ({:?})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.tested,
            self.reference,
            self.tolerance,
            self.kind
        )
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest elementwise `|a-b| / max(|a|,|b|)` over entries where either side
/// exceeds `floor` in magnitude.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, b)| a.abs().max(b.abs()) > floor)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()))
        .fold(0.0, f64::max)
}

/// Direct-summation convolution. Weights are `(cout, cin, k, k)` row-major.
pub fn dense_conv_reference(
    x: &Tensor,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += weights[((co * cin + ci) * k + ky) * k + kx]
                                        * x.at(b, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(b, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Diagonal-Gaussian posterior and per-element prior parameters, flattened.
///
/// Element `e` of the posterior is scored against prior `(prior_mean[e], prior_var[e])`,
/// i.e. the caller resolves the (category, illumination) lookup up front.
pub struct FlatKlProblem {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub prior_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

fn log_normal_pdf(z: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (z - mean) * (z - mean) / var)
}

/// Monte-Carlo estimate of `(1/D) sum_e KL(q_e || p_e)` as the sample mean of
/// `(1/D) sum_e [log q_e(z_e) - log p_e(z_e)]` with `z_e ~ q_e`.
pub fn mc_kl(problem: &FlatKlProblem, n_samples: usize, seed: u64) -> McEstimate {
    let d = problem.mean.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let std: Vec<f64> = problem.var.iter().map(|v| v.sqrt()).collect();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let mut total = 0.0;
        for e in 0..d {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let z = problem.mean[e] + std[e] * eps;
            total += log_normal_pdf(z, problem.mean[e], problem.var[e])
                - log_normal_pdf(z, problem.prior_mean[e], problem.prior_var[e]);
        }
        let v = total / d as f64;
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    McEstimate { mean, std_err: (var / n).sqrt(), samples: n_samples }
}

/// Mean of ratios over one common denominator (the product of all of them),
/// reduced once at the end. Exact when that fraction fits in 53 bits.
fn exact_mean(ratios: &[(u64, u64)]) -> f64 {
    let k = ratios.len() as u128;
    let common = ratios.iter().try_fold(k, |d, r| d.checked_mul(r.1 as u128));
    let exact = common.and_then(|den| {
        let scaled = |r: &(u64, u64)| (r.0 as u128).checked_mul(den / k / r.1 as u128);
        let num = ratios.iter().try_fold(0u128, |n, r| n.checked_add(scaled(r)?))?;
        let (mut a, mut b) = (num, den);
        while b != 0 {
            (a, b) = (b, a % b);
        }
        let g = a.max(1);
        let (num, den) = (num / g, den / g);
        (num <= 1 << 53 && den <= 1 << 53).then(|| num as f64 / den as f64)
    });
    exact.unwrap_or_else(|| ratios.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / ratios.len() as f64)
}

/// Per-class accuracy and IoU recounted directly from pixel pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct BruteMetrics {
    pub acc: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub macc: Option<f64>,
    pub miou: Option<f64>,
}

pub fn brute_force_metrics(preds: &[&[u8]], gts: &[&[u8]], classes: usize, exclude_background: bool) -> BruteMetrics {
    let mut acc = Vec::with_capacity(classes);
    let mut iou = Vec::with_capacity(classes);
    for c in 0..classes {
        let (mut tp, mut gt_count, mut pred_count) = (0u64, 0u64, 0u64);
        for (p, g) in preds.iter().zip(gts) {
            for (&pv, &gv) in p.iter().zip(g.iter()) {
                let (pv, gv) = (pv as usize, gv as usize);
                if pv == c && gv == c {
                    tp += 1;
                }
                if gv == c {
                    gt_count += 1;
                }
                if pv == c {
                    pred_count += 1;
                }
            }
        }
        let union = gt_count + pred_count - tp;
        acc.push((tp, gt_count));
        iou.push((tp, union));
    }
    let mean = |ratios: &[(u64, u64)]| {
        let picked: Vec<(u64, u64)> = ratios
            .iter()
            .enumerate()
            .filter(|(c, r)| !(exclude_background && *c == 0) && r.1 > 0)
            .map(|(_, r)| *r)
            .collect();
        (!picked.is_empty()).then(|| exact_mean(&picked))
    };
    let each = |v: &[(u64, u64)]| v.iter().map(|&(a, b)| (b > 0).then(|| a as f64 / b as f64)).collect();
    BruteMetrics { macc: mean(&acc), miou: mean(&iou), acc: each(&acc), iou: each(&iou) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_square() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-3);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_fn([1, 1, 4, 5], |_, _, y, x| (y * 5 + x) as f64);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = dense_conv_reference(&x, &k, &[0.0], 1, 3, 1, 1);
        assert_eq!(y, x);
        let y = dense_conv_reference(&x, &k, &[0.0], 1, 3, 2, 1);
        assert_eq!(y.shape(), [1, 1, 2, 3]);
    }

    #[test]
    fn mc_kl_identical_distributions_is_near_zero() {
        let p = FlatKlProblem { mean: vec![0.3], var: vec![2.0], prior_mean: vec![0.3], prior_var: vec![2.0] };
        let est = mc_kl(&p, 10_000, 1);
        assert!(est.mean.abs() <= 3.0 * est.std_err + 1e-12);
    }

    #[test]
    fn mc_kl_unit_shift_is_one_half() {
        let p = FlatKlProblem { mean: vec![0.0], var: vec![1.0], prior_mean: vec![1.0], prior_var: vec![1.0] };
        let est = mc_kl(&p, 1_000_000, 2);
        assert!((est.mean - 0.5).abs() / 0.5 < 0.01, "{est:?}");
    }

    #[test]
    fn brute_metrics_single_class_case() {
        let p: &[u8] = &[0, 0, 0];
        let m = brute_force_metrics(&[p], &[p], 3, false);
        assert_eq!(m.miou, Some(1.0));
        assert_eq!(m.acc[1], None);
    }
}
