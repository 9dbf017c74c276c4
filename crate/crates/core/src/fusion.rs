//! Variational feature fusion.
//!
//! Two same-shaped modality features are blended pixel by pixel,
//! `fused = W * rgb + (1 - W) * thermal`, where the fusion-factor map `W` is
//! generated from a latent Gaussian grid:
//!
//! ```text
//! Ff  = LeakyReLU_0.2(BN(Conv_s(cat(rgb, thermal)) -> R/r channels))
//! M   = Conv_1x1(Ff) -> d channels          logV = Conv_1x1'(Ff) -> d channels
//! Z   = M + exp(logV / 2) * eps,  eps ~ N(0, 1)
//! W   = sigmoid(Conv_1x1(Z) -> 1 channel)
//! ```
//!
//! Tensors carry a leading batch axis; each sample is one `C x H x W` map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Conv2d, ConvBnAct, Module, Param, Phase};
use crate::tensor::Tensor;

/// Log-variances are clamped to this range before exponentiation.
pub const LOG_VARIANCE_LIMIT: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VffmConfig {
    /// Squeeze convolution kernel size `s` (odd).
    pub kernel: usize,
    /// Squeeze ratio `r`: the intermediate feature has `2*C/r` channels.
    pub squeeze_ratio: usize,
    /// Latent channels `d`.
    pub latent_dim: usize,
}

impl Default for VffmConfig {
    fn default() -> Self {
        Self { kernel: 7, squeeze_ratio: 16, latent_dim: 8 }
    }
}

/// A modality's feature map at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeature {
    pub values: Tensor,
    pub level: usize,
}

impl ModalityFeature {
    pub fn new(values: Tensor, level: usize) -> Self {
        Self { values, level }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntermediateFusionFeature {
    pub values: Tensor,
}

/// Per-element isotropic Gaussian over the latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

impl LatentPosterior {
    pub fn new(mean: Tensor, log_variance: Tensor) -> Result<Self> {
        if mean.shape() != log_variance.shape() {
            return Err(Error::Shape(format!(
                "posterior mean {:?} and log-variance {:?} differ",
                mean.shape(),
                log_variance.shape()
            )));
        }
        Ok(Self { mean, log_variance })
    }

    pub fn variance(&self) -> Tensor {
        self.log_variance.map(|v| v.clamp(-LOG_VARIANCE_LIMIT, LOG_VARIANCE_LIMIT).exp())
    }

    pub fn shape(&self) -> [usize; 4] {
        self.mean.shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Reparameterized draw with noise from a generator seeded by `seed`.
    Random { seed: u64 },
    /// Use the posterior mean as the sample.
    PosteriorMean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub values: Tensor,
    pub provenance: SampleMode,
    noise: Option<Tensor>,
}

impl LatentSample {
    /// Standard-normal noise used for the draw, if any.
    pub fn noise(&self) -> Option<&Tensor> {
        self.noise.as_ref()
    }
}

/// Single-channel map of fusion factors, shape `N x 1 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionFactorMap {
    pub values: Tensor,
}

impl FusionFactorMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.c() != 1 {
            return Err(Error::Shape(format!("fusion factor map must have one channel, got {}", values.c())));
        }
        if let Some(bad) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidFusionFactor(format!("{bad} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn constant(shape: [usize; 4], w: f64) -> Result<Self> {
        Self::new(Tensor::full([shape[0], 1, shape[2], shape[3]], w))
    }
}

/// Learnable parameters of one fusion module.
#[derive(Clone, Debug)]
pub struct VffmParams {
    pub squeeze: ConvBnAct,
    pub mean_head: Conv2d,
    pub logvar_head: Conv2d,
    pub factor_head: Conv2d,
    pub config: VffmConfig,
}
crate::impl_module!(VffmParams { squeeze, mean_head, logvar_head, factor_head });

impl VffmParams {
    /// `feature_channels` is the channel count of each modality's input.
    pub fn new(rng: &mut impl rand::Rng, feature_channels: usize, config: VffmConfig) -> Result<Self> {
        let cat = 2 * feature_channels;
        if config.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("fusion kernel size must be odd, got {}", config.kernel)));
        }
        if config.squeeze_ratio == 0 || !cat.is_multiple_of(config.squeeze_ratio) || cat < config.squeeze_ratio {
            return Err(Error::Config(format!(
                "squeeze ratio {} does not divide concatenated channel count {cat}",
                config.squeeze_ratio
            )));
        }
        if config.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        let squeezed = cat / config.squeeze_ratio;
        let squeeze = ConvBnAct::new(Conv2d::same(rng, cat, squeezed, config.kernel));
        let mean_head = Conv2d::pointwise(rng, squeezed, config.latent_dim);
        let logvar_head = Conv2d::pointwise(rng, squeezed, config.latent_dim);
        let factor_head = Conv2d::pointwise(rng, config.latent_dim, 1);
        Ok(Self { squeeze, mean_head, logvar_head, factor_head, config })
    }

    pub fn feature_channels(&self) -> usize {
        self.squeeze.conv.in_channels / 2
    }

    pub fn squeezed_channels(&self) -> usize {
        self.squeeze.conv.out_channels
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_pair(rgb: &ModalityFeature, thermal: &ModalityFeature) -> Result<()> {
    if rgb.values.shape() != thermal.values.shape() || rgb.level != thermal.level {
        return Err(Error::ModalityShapeMismatch { rgb: rgb.values.shape(), thermal: thermal.values.shape() });
    }
    check_finite(&rgb.values, "rgb feature")?;
    check_finite(&thermal.values, "thermal feature")
}

/// Squeezed joint feature of both modalities.
pub fn compute_intermediate(
    rgb: &ModalityFeature,
    thermal: &ModalityFeature,
    params: &VffmParams,
    phase: Phase,
) -> Result<IntermediateFusionFeature> {
    check_pair(rgb, thermal)?;
    let cat = Tensor::cat_channels(&rgb.values, &thermal.values)?;
    let (values, _) = params.squeeze.forward(&cat, phase)?;
    Ok(IntermediateFusionFeature { values })
}

/// Mean and log-variance heads. Log-variances are clamped to `[-40, 40]`.
pub fn posterior_params(ff: &IntermediateFusionFeature, params: &VffmParams) -> Result<LatentPosterior> {
    posterior_traced(ff, params).map(|(p, _)| p)
}

struct PosteriorTrace {
    mean: crate::nn::conv::ConvCache,
    logvar: crate::nn::conv::ConvCache,
    clamped: Vec<bool>,
}

fn posterior_traced(ff: &IntermediateFusionFeature, params: &VffmParams) -> Result<(LatentPosterior, PosteriorTrace)> {
    check_finite(&ff.values, "intermediate fusion feature")?;
    let (mean, mean_cache) = params.mean_head.forward(&ff.values)?;
    let (raw, logvar_cache) = params.logvar_head.forward(&ff.values)?;
    check_finite(&mean, "posterior mean")?;
    check_finite(&raw, "posterior log-variance")?;
    let clamped = raw.data().iter().map(|v| v.abs() > LOG_VARIANCE_LIMIT).collect();
    let log_variance = raw.map(|v| v.clamp(-LOG_VARIANCE_LIMIT, LOG_VARIANCE_LIMIT));
    Ok((LatentPosterior { mean, log_variance }, PosteriorTrace { mean: mean_cache, logvar: logvar_cache, clamped }))
}

pub fn sample_latent(post: &LatentPosterior, mode: SampleMode) -> LatentSample {
    match mode {
        SampleMode::PosteriorMean => LatentSample { values: post.mean.clone(), provenance: mode, noise: None },
        SampleMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Tensor::from_fn(post.shape(), |_, _, _, _| StandardNormal.sample(&mut rng));
            let mut values = post.mean.clone();
            for ((z, &lv), &e) in values.data_mut().iter_mut().zip(post.log_variance.data()).zip(noise.data()) {
                *z += (0.5 * lv.clamp(-LOG_VARIANCE_LIMIT, LOG_VARIANCE_LIMIT)).exp() * e;
            }
            LatentSample { values, provenance: mode, noise: Some(noise) }
        }
    }
}

/// Reparameterization gradient: maps `dL/dz` to `(dL/dM, dL/dlogV)`.
pub fn sample_latent_backward(post: &LatentPosterior, sample: &LatentSample, dz: &Tensor) -> (Tensor, Tensor) {
    let dmean = dz.clone();
    let mut dlogvar = Tensor::zeros(dz.shape());
    if let Some(noise) = &sample.noise {
        for (((g, &d), &lv), &e) in dlogvar.data_mut().iter_mut().zip(dz.data()).zip(post.log_variance.data()).zip(noise.data()) {
            if lv.abs() < LOG_VARIANCE_LIMIT {
                *g = d * 0.5 * (0.5 * lv).exp() * e;
            }
        }
    }
    (dmean, dlogvar)
}

pub fn fusion_factor(z: &LatentSample, params: &VffmParams) -> Result<FusionFactorMap> {
    factor_traced(&z.values, params).map(|(w, _)| w)
}

fn factor_traced(z: &Tensor, params: &VffmParams) -> Result<(FusionFactorMap, crate::nn::conv::ConvCache)> {
    if z.c() != params.factor_head.in_channels {
        return Err(Error::Shape(format!(
            "latent sample has {} channels, fusion head expects {}",
            z.c(),
            params.factor_head.in_channels
        )));
    }
    let (logits, cache) = params.factor_head.forward(z)?;
    Ok((FusionFactorMap { values: logits.map(sigmoid) }, cache))
}

/// Pixelwise convex combination `W * rgb + (1 - W) * thermal`, with `W`
/// broadcast over channels.
pub fn fuse(rgb: &ModalityFeature, thermal: &ModalityFeature, w: &FusionFactorMap) -> Result<ModalityFeature> {
    if rgb.values.shape() != thermal.values.shape() {
        return Err(Error::ModalityShapeMismatch { rgb: rgb.values.shape(), thermal: thermal.values.shape() });
    }
    let [n, c, h, wd] = rgb.values.shape();
    if w.values.shape() != [n, 1, h, wd] {
        return Err(Error::Shape(format!("fusion factor map {:?} does not match features {:?}", w.values.shape(), rgb.values.shape())));
    }
    if let Some(bad) = w.values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidFusionFactor(format!("{bad} outside [0, 1]")));
    }
    let plane = h * wd;
    let mut out = Tensor::zeros(rgb.values.shape());
    for b in 0..n {
        let wp = &w.values.sample(b)[..plane];
        let (r, t) = (rgb.values.sample(b), thermal.values.sample(b));
        let o = out.sample_mut(b);
        for ch in 0..c {
            for p in 0..plane {
                let i = ch * plane + p;
                o[i] = blend(wp[p], r[i], t[i]);
            }
        }
    }
    Ok(ModalityFeature { values: out, level: rgb.level })
}

#[inline]
fn blend(w: f64, r: f64, t: f64) -> f64 {
    if w == 1.0 {
        r
    } else if w == 0.0 {
        t
    } else {
        // rounding can push the affine form a hair outside the segment
        (w * r + (1.0 - w) * t).clamp(r.min(t), r.max(t))
    }
}

/// Gradients of [`fuse`]: `(d rgb, d thermal, d W)`.
pub fn fuse_backward(rgb: &Tensor, thermal: &Tensor, w: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, wd] = rgb.shape();
    let plane = h * wd;
    let mut dr = Tensor::zeros(rgb.shape());
    let mut dt = Tensor::zeros(rgb.shape());
    let mut dw = Tensor::zeros(w.shape());
    for b in 0..n {
        let wp = w.sample(b);
        let (r, t, g) = (rgb.sample(b), thermal.sample(b), dout.sample(b));
        let off = b * c * plane;
        for ch in 0..c {
            for p in 0..plane {
                let i = ch * plane + p;
                dr.data_mut()[off + i] = wp[p] * g[i];
                dt.data_mut()[off + i] = (1.0 - wp[p]) * g[i];
                dw.data_mut()[b * plane + p] += g[i] * (r[i] - t[i]);
            }
        }
    }
    (dr, dt, dw)
}

/// Everything a fusion pass produces.
#[derive(Clone, Debug)]
pub struct VffmOutput {
    pub fused: ModalityFeature,
    pub posterior: LatentPosterior,
    pub factor: FusionFactorMap,
    pub sample: LatentSample,
}

pub fn vffm_forward(
    rgb: &ModalityFeature,
    thermal: &ModalityFeature,
    params: &VffmParams,
    mode: SampleMode,
    phase: Phase,
) -> Result<VffmOutput> {
    params.forward(rgb, thermal, mode, phase).map(|(o, _)| o)
}

pub struct VffmCache {
    squeeze: crate::nn::ConvBnActCache,
    posterior: PosteriorTrace,
    factor: crate::nn::conv::ConvCache,
    rgb: Tensor,
    thermal: Tensor,
    /// Attention-only pass: `z = M` and the variance head is unused.
    deterministic: bool,
}

impl VffmParams {
    pub fn forward(
        &self,
        rgb: &ModalityFeature,
        thermal: &ModalityFeature,
        mode: SampleMode,
        phase: Phase,
    ) -> Result<(VffmOutput, VffmCache)> {
        self.forward_impl(rgb, thermal, mode, phase, false)
    }

    /// Non-probabilistic attention: the fusion factor is generated from the
    /// posterior mean and the variance head does not participate.
    pub fn forward_attention(
        &self,
        rgb: &ModalityFeature,
        thermal: &ModalityFeature,
        phase: Phase,
    ) -> Result<(VffmOutput, VffmCache)> {
        self.forward_impl(rgb, thermal, SampleMode::PosteriorMean, phase, true)
    }

    fn forward_impl(
        &self,
        rgb: &ModalityFeature,
        thermal: &ModalityFeature,
        mode: SampleMode,
        phase: Phase,
        deterministic: bool,
    ) -> Result<(VffmOutput, VffmCache)> {
        check_pair(rgb, thermal)?;
        let cat = Tensor::cat_channels(&rgb.values, &thermal.values)?;
        let (ff, squeeze) = self.squeeze.forward(&cat, phase)?;
        let (posterior, post_trace) = posterior_traced(&IntermediateFusionFeature { values: ff }, self)?;
        let sample = sample_latent(&posterior, mode);
        let (factor, factor_cache) = factor_traced(&sample.values, self)?;
        let fused = fuse(rgb, thermal, &factor)?;
        let cache = VffmCache {
            squeeze,
            posterior: post_trace,
            factor: factor_cache,
            rgb: rgb.values.clone(),
            thermal: thermal.values.clone(),
            deterministic,
        };
        Ok((VffmOutput { fused, posterior, factor, sample }, cache))
    }

    /// Backpropagates `d_fused` plus any direct loss gradients on the
    /// posterior (`d_mean`, `d_logvar`, e.g. from a KL term). Returns the
    /// gradients with respect to the rgb and thermal inputs.
    pub fn backward(
        &mut self,
        cache: &VffmCache,
        out: &VffmOutput,
        d_fused: &Tensor,
        d_mean: Option<&Tensor>,
        d_logvar: Option<&Tensor>,
    ) -> (Tensor, Tensor) {
        let (mut d_rgb, mut d_thermal, dw) = fuse_backward(&cache.rgb, &cache.thermal, &out.factor.values, d_fused);
        let mut dlogit = dw;
        for (g, &w) in dlogit.data_mut().iter_mut().zip(out.factor.values.data()) {
            *g *= w * (1.0 - w);
        }
        let dz = self.factor_head.backward(&cache.factor, &dlogit);
        let (mut dmean, mut dlogvar) = sample_latent_backward(&out.posterior, &out.sample, &dz);
        if let Some(d) = d_mean {
            dmean.add_assign(d).expect("posterior gradient shape");
        }
        if let Some(d) = d_logvar {
            dlogvar.add_assign(d).expect("posterior gradient shape");
        }
        for (g, &c) in dlogvar.data_mut().iter_mut().zip(&cache.posterior.clamped) {
            if c {
                *g = 0.0;
            }
        }
        let mut dff = self.mean_head.backward(&cache.posterior.mean, &dmean);
        if !cache.deterministic {
            let d = self.logvar_head.backward(&cache.posterior.logvar, &dlogvar);
            dff.add_assign(&d).expect("head gradient shape");
        }
        let dcat = self.squeeze.backward(&cache.squeeze, &dff);
        let (dr, dt) = dcat.split_channels(self.feature_channels());
        d_rgb.add_assign(&dr).expect("rgb gradient shape");
        d_thermal.add_assign(&dt).expect("thermal gradient shape");
        (d_rgb, d_thermal)
    }

    pub fn update_running(&mut self, cache: &VffmCache) {
        self.squeeze.update_running(&cache.squeeze);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p: &Param| n += p.len());
        n
    }
}

/// SplitMix64 step, used to derive independent stream seeds from one run seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
