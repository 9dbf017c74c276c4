//! Two symmetric encoders, one fusion block per pyramid level, an additive
//! skip decoder, and confidence-averaged sampled inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LabelMap, SamplePair};
use crate::error::{Error, Result};
use crate::fusion::{derive_seed, FusionFactorMap, LatentPosterior, ModalityFeature, SampleMode, VffmCache, VffmConfig, VffmOutput, VffmParams};
use crate::losses::{level_conditions, total_loss, weighted_cross_entropy_backward, ClassWeights, LossBreakdown, FUSION_LEVELS};
use crate::nn::conv::{nearest_up2, nearest_up2_backward, ConvCache, UpsampleCache};
use crate::nn::norm::BatchNormCache;
use crate::nn::{leaky_relu, leaky_relu_backward, BatchNorm, Conv2d, ConvBnAct, ConvBnActCache, Module, Phase, Upsample2x};
use crate::priors::{conditional_kl_backward, GmmPrior};
use crate::tensor::Tensor;

pub const LEVELS: usize = FUSION_LEVELS;
/// Spatial sizes must be multiples of the deepest stride.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneVariant {
    /// One stride-2 conv and one residual 3x3 conv per stage.
    Tiny,
    /// Bottleneck stages with the channel widths of a ResNet-50.
    Resnet50Shaped,
}

impl BackboneVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "resnet50-shaped" | "resnet50" => Ok(Self::Resnet50Shaped),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tiny => "tiny",
            Self::Resnet50Shaped => "resnet50-shaped",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub channels: [usize; LEVELS],
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self { variant: BackboneVariant::Tiny, channels: [16, 32, 64, 128, 256] }
    }

    pub fn resnet50_shaped() -> Self {
        Self { variant: BackboneVariant::Resnet50Shaped, channels: [64, 256, 512, 1024, 2048] }
    }

    pub fn new(variant: BackboneVariant, channels: [usize; LEVELS]) -> Result<Self> {
        if channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        if variant == BackboneVariant::Resnet50Shaped && channels.iter().any(|c| c % 4 != 0) {
            return Err(Error::Config("resnet50-shaped channel counts must be multiples of 4".into()));
        }
        Ok(Self { variant, channels })
    }

    /// Cumulative stride of each level.
    pub fn strides() -> [usize; LEVELS] {
        [2, 4, 8, 16, 32]
    }
}

/// How the two modality features are combined at each level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Elementwise sum, no fusion parameters.
    Addition,
    /// Fusion factor from the posterior mean only; no KL term.
    Attention,
    /// Sampled fusion factor regularized by the conditional prior.
    Probabilistic,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "addition" => Ok(Self::Addition),
            "attention" => Ok(Self::Attention),
            "probabilistic" => Ok(Self::Probabilistic),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Addition => "addition",
            Self::Attention => "attention",
            Self::Probabilistic => "probabilistic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    pub classes: usize,
    pub fusion: VffmConfig,
    pub fusion_mode: FusionMode,
    /// Condition prior components on the pixel category.
    pub prior_category: bool,
    /// Condition prior components on the image illumination.
    pub prior_illumination: bool,
    pub illuminations: usize,
    /// Add the level-0 skip after the last upsampling block (nearest-upsampled)
    /// instead of before it.
    pub skip0_after_final_upsample: bool,
}

impl NetworkConfig {
    pub fn new(backbone: BackboneConfig, classes: usize) -> Self {
        Self {
            backbone,
            classes,
            fusion: VffmConfig::default(),
            fusion_mode: FusionMode::Probabilistic,
            prior_category: true,
            prior_illumination: true,
            illuminations: 2,
            skip0_after_final_upsample: false,
        }
    }

    pub fn prior_shape(&self) -> (usize, usize) {
        (
            if self.prior_category { self.classes } else { 1 },
            if self.prior_illumination { self.illuminations } else { 1 },
        )
    }
}

/// Stride-2 downsampling layers followed by a residual branch:
/// `out = leaky(a + bn(last(branch(a))))` with `a` the downsampled input.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub layers: Vec<ConvBnAct>,
    pub branch: Vec<ConvBnAct>,
    pub last: Conv2d,
    pub last_bn: BatchNorm,
}
crate::impl_module!(EncoderStage { layers, branch, last, last_bn });

pub struct StageCache {
    layers: Vec<ConvBnActCache>,
    branch: Vec<ConvBnActCache>,
    last: ConvCache,
    last_bn: BatchNormCache,
    out: Tensor,
}

impl EncoderStage {
    fn new(rng: &mut ChaCha8Rng, variant: BackboneVariant, cin: usize, c: usize) -> Self {
        match variant {
            BackboneVariant::Tiny => Self {
                layers: vec![ConvBnAct::new(Conv2d::new(rng, cin, c, 3, 2, 1))],
                branch: Vec::new(),
                last: Conv2d::same(rng, c, c, 3),
                last_bn: BatchNorm::new(c),
            },
            BackboneVariant::Resnet50Shaped => {
                let mid = c / 4;
                Self {
                    layers: vec![
                        ConvBnAct::new(Conv2d::new(rng, cin, mid, 3, 2, 1)),
                        ConvBnAct::new(Conv2d::pointwise(rng, mid, c)),
                    ],
                    branch: vec![
                        ConvBnAct::new(Conv2d::pointwise(rng, c, mid)),
                        ConvBnAct::new(Conv2d::same(rng, mid, mid, 3)),
                    ],
                    last: Conv2d::pointwise(rng, mid, c),
                    last_bn: BatchNorm::new(c),
                }
            }
        }
    }

    fn forward(&self, x: &Tensor, phase: Phase) -> Result<(Tensor, StageCache)> {
        let mut a = x.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, c) = l.forward(&a, phase)?;
            a = y;
            layers.push(c);
        }
        let mut b = a.clone();
        let mut branch = Vec::with_capacity(self.branch.len());
        for l in &self.branch {
            let (y, c) = l.forward(&b, phase)?;
            b = y;
            branch.push(c);
        }
        let (r, last) = self.last.forward(&b)?;
        let (mut r, last_bn) = self.last_bn.forward(&r, phase);
        r.add_assign(&a)?;
        let out = leaky_relu(&r);
        Ok((out.clone(), StageCache { layers, branch, last, last_bn, out }))
    }

    fn backward(&mut self, cache: &StageCache, dy: &Tensor) -> Tensor {
        let dsum = leaky_relu_backward(&cache.out, dy);
        let d = self.last_bn.backward(&cache.last_bn, &dsum);
        let mut d = self.last.backward(&cache.last, &d);
        for (l, c) in self.branch.iter_mut().zip(&cache.branch).rev() {
            d = l.backward(c, &d);
        }
        d.add_assign(&dsum).expect("residual gradient shape");
        for (l, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            d = l.backward(c, &d);
        }
        d
    }

    fn update_running(&mut self, cache: &StageCache) {
        for (l, c) in self.layers.iter_mut().zip(&cache.layers) {
            l.update_running(c);
        }
        for (l, c) in self.branch.iter_mut().zip(&cache.branch) {
            l.update_running(c);
        }
        self.last_bn.update_running(&cache.last_bn);
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<EncoderStage>,
}
crate::impl_module!(Encoder { stages });

impl Encoder {
    fn new(rng: &mut ChaCha8Rng, backbone: &BackboneConfig) -> Self {
        let mut cin = 3;
        let stages = backbone
            .channels
            .iter()
            .map(|&c| {
                let s = EncoderStage::new(rng, backbone.variant, cin, c);
                cin = c;
                s
            })
            .collect();
        Self { stages }
    }

    /// Feature pyramid at strides 2..32 for a 3-channel input.
    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<(Vec<Tensor>, Vec<StageCache>)> {
        check_divisible(x)?;
        if x.c() != 3 {
            return Err(Error::Shape(format!("encoder expects 3 input channels, got {}", x.c())));
        }
        let mut feats = Vec::with_capacity(LEVELS);
        let mut caches = Vec::with_capacity(LEVELS);
        let mut h = x.clone();
        for s in &self.stages {
            let (y, c) = s.forward(&h, phase)?;
            feats.push(y.clone());
            caches.push(c);
            h = y;
        }
        Ok((feats, caches))
    }

    fn backward(&mut self, caches: &[StageCache], mut d_levels: Vec<Tensor>) {
        let mut d = d_levels.pop().expect("five level gradients");
        for i in (0..LEVELS).rev() {
            if i < LEVELS - 1 {
                d.add_assign(&d_levels[i]).expect("level gradient shape");
            }
            // the input gradient of the first stage is not needed
            d = self.stages[i].backward(&caches[i], &d);
        }
    }

    fn update_running(&mut self, caches: &[StageCache]) {
        for (s, c) in self.stages.iter_mut().zip(caches) {
            s.update_running(c);
        }
    }
}

fn check_divisible(x: &Tensor) -> Result<()> {
    let (h, w) = x.spatial();
    if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::IndivisibleInput { height: h, width: w });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct UpBlock {
    pub up: Upsample2x,
    pub bn: BatchNorm,
}
crate::impl_module!(UpBlock { up, bn });

/// Five `upsample -> BN -> leaky` blocks with additive skips, then a 1x1
/// classifier.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<UpBlock>,
    pub head: Conv2d,
    pub skip0_after_final: bool,
}
crate::impl_module!(Decoder { blocks, head });

pub struct DecoderCache {
    blocks: Vec<(UpsampleCache, BatchNormCache, Tensor)>,
    head: ConvCache,
}

impl Decoder {
    fn new(rng: &mut ChaCha8Rng, channels: &[usize; LEVELS], classes: usize, skip0_after_final: bool) -> Self {
        let blocks = (0..LEVELS)
            .map(|i| {
                let cin = channels[LEVELS - 1 - i];
                let cout = channels[(LEVELS - 2).saturating_sub(i)];
                UpBlock { up: Upsample2x::new(rng, cin, cout), bn: BatchNorm::new(cout) }
            })
            .collect();
        Self { blocks, head: Conv2d::pointwise(rng, channels[0], classes), skip0_after_final }
    }

    /// Level whose fused feature is added after block `i`, if any.
    fn skip_after(&self, i: usize) -> Option<usize> {
        match i {
            0..=2 => Some(LEVELS - 2 - i),
            3 if !self.skip0_after_final => Some(0),
            _ => None,
        }
    }

    pub fn forward(&self, levels: &[Tensor], phase: Phase) -> Result<(Tensor, DecoderCache)> {
        if levels.len() != LEVELS {
            return Err(Error::Shape(format!("decoder needs {LEVELS} levels, got {}", levels.len())));
        }
        let mut x = levels[LEVELS - 1].clone();
        let mut blocks = Vec::with_capacity(LEVELS);
        for (i, b) in self.blocks.iter().enumerate() {
            let (u, uc) = b.up.forward(&x)?;
            let (n, bc) = b.bn.forward(&u, phase);
            let act = leaky_relu(&n);
            x = act.clone();
            blocks.push((uc, bc, act));
            if let Some(l) = self.skip_after(i) {
                add_skip(&mut x, &levels[l])?;
            }
        }
        if self.skip0_after_final {
            add_skip(&mut x, &nearest_up2(&levels[0]))?;
        }
        let (logits, head) = self.head.forward(&x)?;
        Ok((logits, DecoderCache { blocks, head }))
    }

    fn backward(&mut self, cache: &DecoderCache, dlogits: &Tensor) -> Vec<Tensor> {
        let mut d_levels: Vec<Option<Tensor>> = (0..LEVELS).map(|_| None).collect();
        let mut d = self.head.backward(&cache.head, dlogits);
        if self.skip0_after_final {
            d_levels[0] = Some(nearest_up2_backward(&d));
        }
        for i in (0..LEVELS).rev() {
            if let Some(l) = self.skip_after(i) {
                d_levels[l] = Some(d.clone());
            }
            let (uc, bc, act) = &cache.blocks[i];
            let b = &mut self.blocks[i];
            let dn = leaky_relu_backward(act, &d);
            let du = b.bn.backward(bc, &dn);
            d = b.up.backward(uc, &du);
        }
        d_levels[LEVELS - 1] = Some(d);
        d_levels.into_iter().map(|t| t.expect("every level receives a gradient")).collect()
    }

    fn update_running(&mut self, cache: &DecoderCache) {
        for (b, (_, bc, _)) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.bn.update_running(bc);
        }
    }
}

fn add_skip(x: &mut Tensor, skip: &Tensor) -> Result<()> {
    if x.shape() != skip.shape() {
        return Err(Error::Shape(format!("skip {:?} does not match decoder feature {:?}", skip.shape(), x.shape())));
    }
    x.add_assign(skip)
}

/// Per-pixel class distribution and its argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    /// `N x C x H x W`, summing to one over channels.
    pub confidence: Tensor,
    pub labels: Vec<LabelMap>,
}

impl SegmentationOutput {
    pub fn from_confidence(confidence: Tensor) -> Self {
        let labels = argmax_labels(&confidence);
        Self { confidence, labels }
    }

    pub fn from_logits(logits: &Tensor) -> Self {
        Self::from_confidence(softmax_channels(logits))
    }
}

pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for b in 0..n {
        let s = logits.sample(b);
        let o = out.sample_mut(b);
        for p in 0..plane {
            let m = (0..c).map(|k| s[k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (s[k * plane + p] - m).exp();
                o[k * plane + p] = e;
                z += e;
            }
            for k in 0..c {
                o[k * plane + p] /= z;
            }
        }
    }
    out
}

/// Channel argmax; ties go to the smallest class id.
pub fn argmax_labels(scores: &Tensor) -> Vec<LabelMap> {
    let [n, c, h, w] = scores.shape();
    let plane = h * w;
    (0..n)
        .map(|b| {
            let s = scores.sample(b);
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if s[k * plane + p] > s[best * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap { height: h, width: w, data }
        })
        .collect()
}

/// A training or evaluation batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rgb: Tensor,
    pub thermal: Tensor,
    pub labels: Vec<LabelMap>,
    pub illumination: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[SamplePair]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let rgb: Vec<Tensor> = samples.iter().map(|s| s.rgb.clone()).collect();
        let thermal: Vec<Tensor> = samples.iter().map(|s| s.thermal.clone()).collect();
        Ok(Self {
            rgb: Tensor::stack(&rgb)?,
            thermal: Tensor::stack(&thermal)?,
            labels: samples.iter().map(|s| s.label.clone()).collect(),
            illumination: samples.iter().map(|s| s.illumination.index()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Fusion result of one level.
#[derive(Clone, Debug)]
pub struct FusedLevel {
    pub fused: Tensor,
    /// Posterior, sample and fusion factor; absent for additive fusion.
    pub vffm: Option<VffmOutput>,
}

/// Everything recorded by a forward pass that backward needs.
pub struct ForwardTrace {
    pub logits: Tensor,
    pub levels: Vec<FusedLevel>,
    rgb: Vec<StageCache>,
    thermal: Vec<StageCache>,
    vffm: Vec<Option<VffmCache>>,
    decoder: DecoderCache,
}

impl ForwardTrace {
    pub fn posteriors(&self) -> Vec<&LatentPosterior> {
        self.levels.iter().filter_map(|l| l.vffm.as_ref().map(|o| &o.posterior)).collect()
    }
}

/// Output of one stochastic inference pass.
#[derive(Clone, Debug)]
pub struct StochasticOutput {
    pub segmentation: SegmentationOutput,
    pub posteriors: Vec<LatentPosterior>,
    pub factors: Vec<FusionFactorMap>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Thermal,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub rgb_encoder: Encoder,
    pub thermal_encoder: Encoder,
    /// One block per level; empty for additive fusion.
    pub fusion: Vec<VffmParams>,
    pub decoder: Decoder,
    pub prior: GmmPrior,
}
crate::impl_module!(Network { rgb_encoder, thermal_encoder, fusion, decoder, prior });

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        if config.classes < 2 || config.classes > 256 {
            return Err(Error::Config(format!("class count must be in 2..=256, got {}", config.classes)));
        }
        if config.illuminations == 0 {
            return Err(Error::Config("illumination count must be positive".into()));
        }
        let backbone = BackboneConfig::new(config.backbone.variant, config.backbone.channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb_encoder = Encoder::new(&mut rng, &backbone);
        let thermal_encoder = Encoder::new(&mut rng, &backbone);
        let fusion = match config.fusion_mode {
            FusionMode::Addition => Vec::new(),
            _ => backbone
                .channels
                .iter()
                .map(|&c| VffmParams::new(&mut rng, c, config.fusion))
                .collect::<Result<_>>()?,
        };
        let decoder = Decoder::new(&mut rng, &backbone.channels, config.classes, config.skip0_after_final_upsample);
        let (pc, pl) = config.prior_shape();
        let prior = GmmPrior::new(&mut rng, pc, pl, config.fusion.latent_dim)?;
        Ok(Self { config, rgb_encoder, thermal_encoder, fusion, decoder, prior })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Validates a modality pair and replicates single-channel thermal to 3 channels.
    pub fn prepare_inputs(rgb: &Tensor, thermal: &Tensor) -> Result<(Tensor, Tensor)> {
        if rgb.c() != 3 {
            return Err(Error::Shape(format!("rgb input needs 3 channels, got {}", rgb.c())));
        }
        let thermal = match thermal.c() {
            3 => thermal.clone(),
            1 => Tensor::from_fn([thermal.n(), 3, thermal.h(), thermal.w()], |n, _, y, x| thermal.at(n, 0, y, x)),
            c => return Err(Error::Shape(format!("thermal input needs 1 or 3 channels, got {c}"))),
        };
        if rgb.shape() != thermal.shape() {
            return Err(Error::ModalityShapeMismatch { rgb: rgb.shape(), thermal: thermal.shape() });
        }
        check_divisible(rgb)?;
        Ok((rgb.clone(), thermal))
    }

    /// RGB and thermal feature pyramids.
    pub fn encode(&self, rgb: &Tensor, thermal: &Tensor, phase: Phase) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let (rgb, thermal) = Self::prepare_inputs(rgb, thermal)?;
        let (r, _) = self.rgb_encoder.forward(&rgb, phase)?;
        let (t, _) = self.thermal_encoder.forward(&thermal, phase)?;
        Ok((r, t))
    }

    fn level_mode(mode: SampleMode, level: usize) -> SampleMode {
        match mode {
            SampleMode::Random { seed } => SampleMode::Random { seed: derive_seed(seed, level as u64) },
            m => m,
        }
    }

    fn fuse_levels(
        &self,
        r: &[Tensor],
        t: &[Tensor],
        mode: SampleMode,
        phase: Phase,
    ) -> Result<(Vec<FusedLevel>, Vec<Option<VffmCache>>)> {
        let mut levels = Vec::with_capacity(LEVELS);
        let mut caches = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            match self.config.fusion_mode {
                FusionMode::Addition => {
                    let mut fused = r[i].clone();
                    fused.add_assign(&t[i])?;
                    levels.push(FusedLevel { fused, vffm: None });
                    caches.push(None);
                }
                m => {
                    let (rf, tf) = (ModalityFeature::new(r[i].clone(), i), ModalityFeature::new(t[i].clone(), i));
                    let (out, cache) = if m == FusionMode::Attention {
                        self.fusion[i].forward_attention(&rf, &tf, phase)?
                    } else {
                        self.fusion[i].forward(&rf, &tf, Self::level_mode(mode, i), phase)?
                    };
                    levels.push(FusedLevel { fused: out.fused.values.clone(), vffm: Some(out) });
                    caches.push(Some(cache));
                }
            }
        }
        Ok((levels, caches))
    }

    /// Full pass recording what backward needs. `mode` selects the latent
    /// draw; each level derives its own stream from a random seed.
    pub fn forward_trace(&self, rgb: &Tensor, thermal: &Tensor, mode: SampleMode, phase: Phase) -> Result<ForwardTrace> {
        let (rgb, thermal) = Self::prepare_inputs(rgb, thermal)?;
        let (r, rgb_cache) = self.rgb_encoder.forward(&rgb, phase)?;
        let (t, thermal_cache) = self.thermal_encoder.forward(&thermal, phase)?;
        let (levels, vffm) = self.fuse_levels(&r, &t, mode, phase)?;
        let fused: Vec<Tensor> = levels.iter().map(|l| l.fused.clone()).collect();
        let (logits, decoder) = self.decoder.forward(&fused, phase)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite("segmentation logits".into()));
        }
        Ok(ForwardTrace { logits, levels, rgb: rgb_cache, thermal: thermal_cache, vffm, decoder })
    }

    /// Loss of a recorded pass.
    pub fn loss(&self, trace: &ForwardTrace, batch: &Batch, weights: &ClassWeights, beta: f64) -> Result<LossBreakdown> {
        let posteriors = match self.config.fusion_mode {
            FusionMode::Probabilistic => trace.posteriors(),
            _ => Vec::new(),
        };
        total_loss(&trace.logits, &batch.labels, &batch.illumination, &posteriors, &self.prior, weights, beta)
    }

    /// Accumulates the gradient of [`Network::loss`] into every parameter.
    pub fn backward(&mut self, trace: &ForwardTrace, batch: &Batch, weights: &ClassWeights, beta: f64) -> Result<()> {
        let n = batch.len() as f64;
        let dlogits = weighted_cross_entropy_backward(&trace.logits, &batch.labels, weights, &vec![1.0 / n; batch.len()])?;
        let d_fused = self.decoder.backward(&trace.decoder, &dlogits);
        let mut d_rgb = Vec::with_capacity(LEVELS);
        let mut d_thermal = Vec::with_capacity(LEVELS);
        let kl_upstream = vec![beta / (n * LEVELS as f64); batch.len()];
        for (i, d) in d_fused.into_iter().enumerate() {
            match (&trace.levels[i].vffm, &trace.vffm[i]) {
                (Some(out), Some(cache)) => {
                    let (dm, dlv) = if self.config.fusion_mode == FusionMode::Probabilistic {
                        let [_, _, h, w] = out.posterior.shape();
                        let conds = level_conditions(&batch.labels, &batch.illumination, (h, w), &self.prior)?;
                        let (dm, dlv) = conditional_kl_backward(&out.posterior, &conds, &mut self.prior, &kl_upstream)?;
                        (Some(dm), Some(dlv))
                    } else {
                        (None, None)
                    };
                    let (dr, dt) = self.fusion[i].backward(cache, out, &d, dm.as_ref(), dlv.as_ref());
                    d_rgb.push(dr);
                    d_thermal.push(dt);
                }
                _ => {
                    d_rgb.push(d.clone());
                    d_thermal.push(d);
                }
            }
        }
        self.rgb_encoder.backward(&trace.rgb, d_rgb);
        self.thermal_encoder.backward(&trace.thermal, d_thermal);
        Ok(())
    }

    /// Folds the batch statistics of a training pass into the running estimates.
    pub fn update_running(&mut self, trace: &ForwardTrace) {
        self.rgb_encoder.update_running(&trace.rgb);
        self.thermal_encoder.update_running(&trace.thermal);
        for (f, c) in self.fusion.iter_mut().zip(&trace.vffm) {
            if let Some(c) = c {
                f.update_running(c);
            }
        }
        self.decoder.update_running(&trace.decoder);
    }

    /// Zeroes gradients, runs forward and backward in training mode, and
    /// updates normalization statistics. Returns the loss of the pass.
    pub fn train_step(&mut self, batch: &Batch, weights: &ClassWeights, beta: f64, seed: u64) -> Result<(LossBreakdown, ForwardTrace)> {
        self.zero_grad();
        let trace = self.forward_trace(&batch.rgb, &batch.thermal, SampleMode::Random { seed }, Phase::Train)?;
        let loss = self.loss(&trace, batch, weights, beta)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {}", loss.total)));
        }
        self.backward(&trace, batch, weights, beta)?;
        self.update_running(&trace);
        Ok((loss, trace))
    }

    /// One evaluation-mode pass with one latent draw per level.
    pub fn forward_stochastic(&self, rgb: &Tensor, thermal: &Tensor, seed: u64) -> Result<StochasticOutput> {
        self.forward_mode(rgb, thermal, SampleMode::Random { seed })
    }

    pub fn forward_mode(&self, rgb: &Tensor, thermal: &Tensor, mode: SampleMode) -> Result<StochasticOutput> {
        let trace = self.forward_trace(rgb, thermal, mode, Phase::Eval)?;
        let mut posteriors = Vec::new();
        let mut factors = Vec::new();
        for l in trace.levels {
            if let Some(o) = l.vffm {
                posteriors.push(o.posterior);
                factors.push(o.factor);
            }
        }
        Ok(StochasticOutput { segmentation: SegmentationOutput::from_logits(&trace.logits), posteriors, factors })
    }

    /// `samples == 1` runs a single posterior-mean pass. Larger counts average
    /// the softmax maps of independently seeded passes; the encoders run once.
    pub fn infer_averaged(&self, rgb: &Tensor, thermal: &Tensor, samples: usize, seed: u64) -> Result<SegmentationOutput> {
        if samples == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        if samples == 1 || self.config.fusion_mode != FusionMode::Probabilistic {
            return Ok(self.forward_mode(rgb, thermal, SampleMode::PosteriorMean)?.segmentation);
        }
        let (r, t) = self.encode(rgb, thermal, Phase::Eval)?;
        let mut acc: Option<Tensor> = None;
        for s in 0..samples {
            let mode = SampleMode::Random { seed: derive_seed(seed, s as u64) };
            let (levels, _) = self.fuse_levels(&r, &t, mode, Phase::Eval)?;
            let fused: Vec<Tensor> = levels.into_iter().map(|l| l.fused).collect();
            let (logits, _) = self.decoder.forward(&fused, Phase::Eval)?;
            let conf = softmax_channels(&logits);
            match &mut acc {
                Some(a) => a.add_assign(&conf)?,
                None => acc = Some(conf),
            }
        }
        let mut conf = acc.expect("at least one sample");
        conf.scale(1.0 / samples as f64);
        Ok(SegmentationOutput::from_confidence(conf))
    }

    /// Inference with one modality optionally missing; the missing input is
    /// replaced by zeros.
    pub fn infer_with_modalities(
        &self,
        rgb: Option<&Tensor>,
        thermal: Option<&Tensor>,
        samples: usize,
        seed: u64,
    ) -> Result<SegmentationOutput> {
        match (rgb, thermal) {
            (Some(r), Some(t)) => self.infer_averaged(r, t, samples, seed),
            (Some(r), None) => self.infer_averaged(r, &Tensor::zeros([r.n(), 1, r.h(), r.w()]), samples, seed),
            (None, Some(t)) => self.infer_averaged(&Tensor::zeros([t.n(), 3, t.h(), t.w()]), t, samples, seed),
            (None, None) => Err(Error::InvalidArgument("both modalities are missing".into())),
        }
    }

    /// Inference with `missing` zeroed out, if set.
    pub fn infer_missing(
        &self,
        rgb: &Tensor,
        thermal: &Tensor,
        missing: Option<Modality>,
        samples: usize,
        seed: u64,
    ) -> Result<SegmentationOutput> {
        match missing {
            None => self.infer_with_modalities(Some(rgb), Some(thermal), samples, seed),
            Some(Modality::Rgb) => self.infer_with_modalities(None, Some(thermal), samples, seed),
            Some(Modality::Thermal) => self.infer_with_modalities(Some(rgb), None, samples, seed),
        }
    }
}
