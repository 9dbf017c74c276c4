//! Learnable Gaussian-mixture prior over the latent grid and the closed-form
//! KL divergence between the per-pixel posterior and the prior component
//! selected by that pixel's (category, illumination) condition.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::fusion::{LatentPosterior, LatentSample};
use crate::nn::Param;
use crate::tensor::Tensor;

/// One Gaussian per (category, illumination, latent channel), stored as
/// `(C, L, d)` arrays of means and log-variances. Mixture weights are fixed
/// at `1 / (C * L)`.
#[derive(Clone, Debug)]
pub struct GmmPrior {
    pub mean: Param,
    pub log_variance: Param,
    pub categories: usize,
    pub illuminations: usize,
    pub latent_dim: usize,
}
crate::impl_module!(GmmPrior { mean, log_variance });

impl GmmPrior {
    /// Means drawn from `N(0, 0.1^2)`, unit variances.
    pub fn new(rng: &mut impl Rng, categories: usize, illuminations: usize, latent_dim: usize) -> Result<Self> {
        if categories == 0 || illuminations == 0 || latent_dim == 0 {
            return Err(Error::Config("prior needs at least one category, illumination and latent channel".into()));
        }
        let n = categories * illuminations * latent_dim;
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let shape = vec![categories, illuminations, latent_dim];
        Ok(Self {
            mean: Param::new(shape.clone(), (0..n).map(|_| normal.sample(rng)).collect()),
            log_variance: Param::constant(shape, 0.0),
            categories,
            illuminations,
            latent_dim,
        })
    }

    #[inline]
    pub fn index(&self, category: usize, illumination: usize, k: usize) -> usize {
        (category * self.illuminations + illumination) * self.latent_dim + k
    }

    pub fn gamma(&self) -> Vec<f64> {
        let n = self.categories * self.illuminations;
        vec![1.0 / n as f64; n]
    }

    /// Illumination index actually used for lookups: a single-illumination
    /// prior ignores the image's tag.
    #[inline]
    pub fn illumination_slot(&self, illumination: usize) -> usize {
        if self.illuminations == 1 {
            0
        } else {
            illumination
        }
    }
}

/// Per-pixel category on the latent grid plus the image's illumination tag.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelConditionMap {
    pub category: LabelMap,
    pub illumination: usize,
}

/// Nearest-neighbour label downsampling with `src = floor(dst * scale)`.
pub fn downsample_labels(labels: &LabelMap, target: (usize, usize)) -> Result<LabelMap> {
    let (th, tw) = target;
    if th > labels.height || tw > labels.width || th == 0 || tw == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resample labels from {}x{} to {th}x{tw}",
            labels.height, labels.width
        )));
    }
    if (th, tw) == (labels.height, labels.width) {
        return Ok(labels.clone());
    }
    let (sy, sx) = (labels.height as f64 / th as f64, labels.width as f64 / tw as f64);
    let mut data = Vec::with_capacity(th * tw);
    for y in 0..th {
        let src_y = ((y as f64 * sy).floor() as usize).min(labels.height - 1);
        for x in 0..tw {
            let src_x = ((x as f64 * sx).floor() as usize).min(labels.width - 1);
            data.push(labels.get(src_y, src_x));
        }
    }
    LabelMap::new(th, tw, data)
}

fn check_conditions(post: &LatentPosterior, conds: &[PixelConditionMap], prior: &GmmPrior) -> Result<()> {
    let [n, d, h, w] = post.shape();
    if conds.len() != n {
        return Err(Error::Shape(format!("{} condition maps for a batch of {n}", conds.len())));
    }
    if d != prior.latent_dim {
        return Err(Error::Shape(format!("posterior has {d} latent channels, prior has {}", prior.latent_dim)));
    }
    for cond in conds {
        if (cond.category.height, cond.category.width) != (h, w) {
            return Err(Error::Shape(format!(
                "condition map {}x{} does not match latent grid {h}x{w}",
                cond.category.height, cond.category.width
            )));
        }
        if prior.illumination_slot(cond.illumination) >= prior.illuminations {
            return Err(Error::InvalidArgument(format!(
                "illumination {} outside 0..{}",
                cond.illumination, prior.illuminations
            )));
        }
        if let Some(&bad) = cond.category.data.iter().find(|&&c| c as usize >= prior.categories) {
            return Err(Error::LabelOutOfRange { label: bad as usize, classes: prior.categories });
        }
    }
    Ok(())
}

/// KL between the posterior and the selected prior component, averaged over
/// the `D = d * H * W` latent elements of each sample. Returns one value per
/// batch sample.
pub fn conditional_kl(post: &LatentPosterior, conds: &[PixelConditionMap], prior: &GmmPrior) -> Result<Vec<f64>> {
    check_conditions(post, conds, prior)?;
    let [n, d, h, w] = post.shape();
    let plane = h * w;
    let denom = (d * plane) as f64;
    let mut out = Vec::with_capacity(n);
    for (b, cond) in conds.iter().enumerate() {
        let (m, lv) = (post.mean.sample(b), post.log_variance.sample(b));
        let l = prior.illumination_slot(cond.illumination);
        let mut total = 0.0;
        for k in 0..d {
            for p in 0..plane {
                let i = prior.index(cond.category.data[p] as usize, l, k);
                let (pm, plv) = (prior.mean.value[i], prior.log_variance.value[i]);
                let (qm, qlv) = (m[k * plane + p], lv[k * plane + p]);
                let ratio = (qlv - plv).exp();
                total += 0.5 * (plv - qlv + ratio - 1.0 + (pm - qm).powi(2) * (-plv).exp());
            }
        }
        out.push(total / denom);
    }
    Ok(out)
}

/// Gradient of `sum_b upstream[b] * KL_b`. Returns `(dM, dlogV)` and
/// accumulates the prior parameter gradients.
pub fn conditional_kl_backward(
    post: &LatentPosterior,
    conds: &[PixelConditionMap],
    prior: &mut GmmPrior,
    upstream: &[f64],
) -> Result<(Tensor, Tensor)> {
    check_conditions(post, conds, prior)?;
    let [_, d, h, w] = post.shape();
    let plane = h * w;
    let denom = (d * plane) as f64;
    let mut dmean = Tensor::zeros(post.shape());
    let mut dlogvar = Tensor::zeros(post.shape());
    for (b, cond) in conds.iter().enumerate() {
        let scale = upstream[b] / denom;
        let l = prior.illumination_slot(cond.illumination);
        let off = b * d * plane;
        for k in 0..d {
            for p in 0..plane {
                let e = off + k * plane + p;
                let i = prior.index(cond.category.data[p] as usize, l, k);
                let (pm, plv) = (prior.mean.value[i], prior.log_variance.value[i]);
                let (qm, qlv) = (post.mean.data()[e], post.log_variance.data()[e]);
                let inv_pv = (-plv).exp();
                let ratio = (qlv - plv).exp();
                let diff = pm - qm;
                dmean.data_mut()[e] = scale * (qm - pm) * inv_pv;
                dlogvar.data_mut()[e] = scale * 0.5 * (ratio - 1.0);
                prior.mean.grad[i] += scale * diff * inv_pv;
                prior.log_variance.grad[i] += scale * 0.5 * (1.0 - ratio - diff * diff * inv_pv);
            }
        }
    }
    Ok((dmean, dlogvar))
}

/// Mean over latent elements of the log marginal mixture density, evaluated
/// with log-sum-exp.
pub fn prior_log_likelihood(z: &LatentSample, prior: &GmmPrior) -> Result<f64> {
    let [n, d, h, w] = z.values.shape();
    if d != prior.latent_dim {
        return Err(Error::Shape(format!("sample has {d} latent channels, prior has {}", prior.latent_dim)));
    }
    let plane = h * w;
    let comps = prior.categories * prior.illuminations;
    let log_gamma = -(comps as f64).ln();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut terms = vec![0.0; comps];
    let mut total = 0.0;
    for b in 0..n {
        let s = z.values.sample(b);
        for k in 0..d {
            for &v in &s[k * plane..(k + 1) * plane] {
                for c in 0..prior.categories {
                    for l in 0..prior.illuminations {
                        let i = prior.index(c, l, k);
                        let (pm, plv) = (prior.mean.value[i], prior.log_variance.value[i]);
                        terms[c * prior.illuminations + l] =
                            log_gamma - half_log_2pi - 0.5 * plv - 0.5 * (v - pm).powi(2) * (-plv).exp();
                    }
                }
                let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                total += max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
            }
        }
    }
    Ok(total / (n * d * plane) as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::fusion::{sample_latent, SampleMode};

    fn labels(h: usize, w: usize, data: &[u8]) -> LabelMap {
        LabelMap::new(h, w, data.to_vec()).unwrap()
    }

    fn scalar_prior(mean: f64, var: f64) -> GmmPrior {
        let mut p = GmmPrior::new(&mut ChaCha8Rng::seed_from_u64(0), 1, 1, 1).unwrap();
        p.mean.value = vec![mean];
        p.log_variance.value = vec![var.ln()];
        p
    }

    fn scalar_post(mean: f64, var: f64) -> LatentPosterior {
        LatentPosterior::new(Tensor::full([1, 1, 1, 1], mean), Tensor::full([1, 1, 1, 1], var.ln())).unwrap()
    }

    fn cond0(h: usize, w: usize) -> PixelConditionMap {
        PixelConditionMap { category: LabelMap::filled(h, w, 0), illumination: 0 }
    }

    #[test]
    fn downsample_two_by_two_picks_top_left() {
        let y = labels(2, 2, &[0, 0, 1, 1]);
        assert_eq!(downsample_labels(&y, (1, 1)).unwrap().data, vec![0]);
    }

    #[test]
    fn downsample_identity_and_constant() {
        let y = labels(2, 3, &[0, 1, 2, 3, 4, 5]);
        assert_eq!(downsample_labels(&y, (2, 3)).unwrap(), y);
        let c = LabelMap::filled(8, 8, 3);
        for t in [(1, 1), (2, 4), (4, 4), (8, 8)] {
            assert!(downsample_labels(&c, t).unwrap().data.iter().all(|&v| v == 3));
        }
        assert!(downsample_labels(&y, (4, 3)).is_err());
    }

    #[test]
    fn kl_of_matching_component_is_zero() {
        let prior = scalar_prior(0.3, 2.0);
        let kl = conditional_kl(&scalar_post(0.3, 2.0), &[cond0(1, 1)], &prior).unwrap();
        assert!(kl[0].abs() < 1e-15);
    }

    #[test]
    fn kl_analytic_anchors() {
        let kl = conditional_kl(&scalar_post(0.0, 1.0), &[cond0(1, 1)], &scalar_prior(1.0, 1.0)).unwrap();
        assert!((kl[0] - 0.5).abs() < 1e-12);
        let kl = conditional_kl(&scalar_post(0.0, 0.25), &[cond0(1, 1)], &scalar_prior(0.0, 1.0)).unwrap();
        let expect = 0.5 * (4f64.ln() + 0.25 - 1.0);
        assert!((kl[0] - expect).abs() < 1e-12);
        assert!((kl[0] - 0.318147).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_category_is_rejected() {
        let prior = scalar_prior(0.0, 1.0);
        let cond = PixelConditionMap { category: LabelMap::filled(1, 1, 1), illumination: 0 };
        let err = conditional_kl(&scalar_post(0.0, 1.0), &[cond], &prior).unwrap_err();
        assert!(err.to_string().contains("label out of range"));
    }

    #[test]
    fn single_illumination_prior_ignores_tag() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = GmmPrior::new(&mut rng, 3, 1, 2).unwrap();
        let post = LatentPosterior::new(
            Tensor::from_fn([1, 2, 2, 2], |_, k, y, x| (k + y + x) as f64 * 0.3),
            Tensor::full([1, 2, 2, 2], -0.4),
        )
        .unwrap();
        let cat = labels(2, 2, &[0, 1, 2, 1]);
        let day = conditional_kl(&post, &[PixelConditionMap { category: cat.clone(), illumination: 0 }], &prior).unwrap();
        let night = conditional_kl(&post, &[PixelConditionMap { category: cat, illumination: 1 }], &prior).unwrap();
        assert_eq!(day, night);
    }

    #[test]
    fn single_component_log_likelihood() {
        let prior = scalar_prior(0.7, 1.0);
        let post = scalar_post(0.7, 1.0);
        let ll = prior_log_likelihood(&sample_latent(&post, SampleMode::PosteriorMean), &prior).unwrap();
        assert!((ll + 0.918939).abs() < 1e-6);
    }

    #[test]
    fn identical_components_match_single_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let single = GmmPrior::new(&mut rng, 1, 1, 3).unwrap();
        let mut double = GmmPrior::new(&mut rng, 2, 1, 3).unwrap();
        double.mean.value = [single.mean.value.clone(), single.mean.value.clone()].concat();
        let post = LatentPosterior::new(Tensor::from_fn([1, 3, 2, 2], |_, k, y, x| (k as f64 - y as f64 + x as f64) * 0.4), Tensor::zeros([1, 3, 2, 2])).unwrap();
        let z = sample_latent(&post, SampleMode::PosteriorMean);
        let a = prior_log_likelihood(&z, &single).unwrap();
        let b = prior_log_likelihood(&z, &double).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prior = GmmPrior::new(&mut rng, 3, 2, 2).unwrap();
        prior.log_variance.value.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        let post = LatentPosterior::new(Tensor::from_fn([2, 2, 2, 3], |n, k, y, x| ((n + 2 * k + 3 * y + x) as f64).cos()), Tensor::zeros([2, 2, 2, 3])).unwrap();
        let z = sample_latent(&post, SampleMode::PosteriorMean);
        let mut direct = 0.0;
        for (e, &v) in z.values.data().iter().enumerate() {
            let k = (e / 6) % 2;
            let mut dens = 0.0;
            for c in 0..3 {
                for l in 0..2 {
                    let i = prior.index(c, l, k);
                    let var = prior.log_variance.value[i].exp();
                    dens += (1.0 / 6.0) * (-(v - prior.mean.value[i]).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
                }
            }
            direct += dens.ln();
        }
        direct /= z.values.numel() as f64;
        assert!((prior_log_likelihood(&z, &prior).unwrap() - direct).abs() < 1e-12);
    }
}
