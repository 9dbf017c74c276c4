//! Class-weighted cross-entropy, class-weight estimation and the combined
//! segmentation + KL objective.

use std::fs;
use std::path::Path;

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::fusion::LatentPosterior;
use crate::priors::{conditional_kl, downsample_labels, GmmPrior, PixelConditionMap};
use crate::tensor::Tensor;

/// Offset inside the logarithm of the class weighting `1 / ln(k + p_c)`.
pub const ENET_K: f64 = 1.02;

/// Number of fusion levels whose KL terms are averaged.
pub const FUSION_LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self { w: vec![1.0; classes] }
    }

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidArgument("class weights must be finite and positive".into()));
        }
        Ok(Self { w })
    }

    pub fn classes(&self) -> usize {
        self.w.len()
    }

    /// Plain text, one weight per line in class order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.w.iter().map(|v| format!("{v:e}\n")).collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(w)
    }
}

/// `w_c = 1 / ln(k + p_c)` with `p_c` the class frequency.
pub fn compute_class_weights(histogram: &[u64], k: f64) -> Result<ClassWeights> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("label histogram is empty".into()));
    }
    if k <= 1.0 {
        return Err(Error::Config(format!("class weight offset must exceed 1, got {k}")));
    }
    ClassWeights::new(histogram.iter().map(|&c| 1.0 / (k + c as f64 / total as f64).ln()).collect())
}

fn check_logits(logits: &Tensor, labels: &[LabelMap], weights: &ClassWeights) -> Result<()> {
    let [n, c, h, w] = logits.shape();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} label maps for a batch of {n}", labels.len())));
    }
    if c != weights.classes() {
        return Err(Error::Shape(format!("{c} logit channels but {} class weights", weights.classes())));
    }
    for l in labels {
        if (l.height, l.width) != (h, w) {
            return Err(Error::Shape(format!("label map {}x{} vs logits {h}x{w}", l.height, l.width)));
        }
        l.check_range(c)?;
    }
    Ok(())
}

/// Max-shifted log-sum-exp over the channels of pixel `p` in one sample.
#[inline]
fn log_partition(s: &[f64], classes: usize, plane: usize, p: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for c in 0..classes {
        m = m.max(s[c * plane + p]);
    }
    let mut acc = 0.0;
    for c in 0..classes {
        acc += (s[c * plane + p] - m).exp();
    }
    m + acc.ln()
}

/// Weighted cross-entropy per image, normalized by the sum of the pixel weights.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[LabelMap], weights: &ClassWeights) -> Result<Vec<f64>> {
    check_logits(logits, labels, weights)?;
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    Ok((0..n)
        .map(|b| {
            let s = logits.sample(b);
            let (mut num, mut den) = (0.0, 0.0);
            for (p, &y) in labels[b].data.iter().enumerate() {
                let wy = weights.w[y as usize];
                num += wy * (log_partition(s, c, plane, p) - s[y as usize * plane + p]);
                den += wy;
            }
            num / den
        })
        .collect())
}

/// Unweighted cross-entropy, averaged over pixels.
pub fn cross_entropy(logits: &Tensor, labels: &[LabelMap]) -> Result<Vec<f64>> {
    weighted_cross_entropy(logits, labels, &ClassWeights::uniform(logits.c()))
}

/// Gradient of `sum_b upstream[b] * WCE_b` with respect to the logits.
pub fn weighted_cross_entropy_backward(
    logits: &Tensor,
    labels: &[LabelMap],
    weights: &ClassWeights,
    upstream: &[f64],
) -> Result<Tensor> {
    check_logits(logits, labels, weights)?;
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let mut grad = Tensor::zeros(logits.shape());
    for b in 0..n {
        let s = logits.sample(b);
        let den: f64 = labels[b].data.iter().map(|&y| weights.w[y as usize]).sum();
        let g = grad.sample_mut(b);
        for (p, &y) in labels[b].data.iter().enumerate() {
            let scale = upstream[b] * weights.w[y as usize] / den;
            let lz = log_partition(s, c, plane, p);
            for k in 0..c {
                g[k * plane + p] = scale * (s[k * plane + p] - lz).exp();
            }
            g[y as usize * plane + p] -= scale;
        }
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Batch mean of the per-image weighted cross-entropy.
    pub wce: f64,
    /// Batch mean of the level-averaged KL.
    pub kl_mean: f64,
    pub beta: f64,
    /// Batch-mean KL of each fusion level.
    pub kl_levels: Vec<f64>,
}

impl LossBreakdown {
    /// `total = wce + beta * kl_mean` for already reduced terms.
    pub fn combine(wce: f64, kl_mean: f64, beta: f64) -> Self {
        Self { total: wce + beta * kl_mean, wce, kl_mean, beta, kl_levels: Vec::new() }
    }
}

/// Condition maps for one level: labels downsampled to the latent grid (or
/// all zero for a category-free prior) plus each image's illumination.
pub fn level_conditions(
    labels: &[LabelMap],
    illumination: &[usize],
    grid: (usize, usize),
    prior: &GmmPrior,
) -> Result<Vec<PixelConditionMap>> {
    if labels.len() != illumination.len() {
        return Err(Error::Shape(format!("{} label maps but {} illumination tags", labels.len(), illumination.len())));
    }
    labels
        .iter()
        .zip(illumination)
        .map(|(l, &ill)| {
            let category =
                if prior.categories == 1 { LabelMap::filled(grid.0, grid.1, 0) } else { downsample_labels(l, grid)? };
            Ok(PixelConditionMap { category, illumination: ill })
        })
        .collect()
}

/// `mean_b [WCE_b + beta * mean_levels KL_b]`. With no posteriors (a
/// non-probabilistic fusion) the KL term is zero; otherwise all five levels
/// must be present.
pub fn total_loss(
    logits: &Tensor,
    labels: &[LabelMap],
    illumination: &[usize],
    posteriors: &[&LatentPosterior],
    prior: &GmmPrior,
    weights: &ClassWeights,
    beta: f64,
) -> Result<LossBreakdown> {
    let wce = weighted_cross_entropy(logits, labels, weights)?;
    let n = wce.len() as f64;
    let mut per_image = wce.clone();
    let mut kl_levels = Vec::new();
    if !posteriors.is_empty() {
        if posteriors.len() != FUSION_LEVELS {
            return Err(Error::InvalidArgument(format!(
                "expected posteriors for {FUSION_LEVELS} fusion levels, got {}",
                posteriors.len()
            )));
        }
        let mut kl_per_image = vec![0.0; labels.len()];
        for post in posteriors {
            let [_, _, h, w] = post.shape();
            let conds = level_conditions(labels, illumination, (h, w), prior)?;
            let kl = conditional_kl(post, &conds, prior)?;
            kl_levels.push(kl.iter().sum::<f64>() / n);
            for (acc, v) in kl_per_image.iter_mut().zip(kl) {
                *acc += v / FUSION_LEVELS as f64;
            }
        }
        for (t, k) in per_image.iter_mut().zip(&kl_per_image) {
            *t += beta * k;
        }
    }
    let wce_mean = wce.iter().sum::<f64>() / n;
    let kl_mean = kl_levels.iter().sum::<f64>() / FUSION_LEVELS as f64;
    Ok(LossBreakdown { total: per_image.iter().sum::<f64>() / n, wce: wce_mean, kl_mean, beta, kl_levels })
}
