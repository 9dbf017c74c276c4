//! Gradient-check suites shared by the integration tests and the acceptance
//! runner. Each suite compares analytic gradients against central finite
//! differences and reports the worst relative error.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use varfuse::data::LabelMap;
use varfuse::fusion::{LatentPosterior, ModalityFeature, SampleMode, VffmConfig, VffmParams};
use varfuse::losses::{level_conditions, total_loss, weighted_cross_entropy, weighted_cross_entropy_backward, ClassWeights};
use varfuse::network::{BackboneConfig, BackboneVariant, Batch, Network, NetworkConfig};
use varfuse::nn::{Module, Phase};
use varfuse::oracles::{finite_diff_grad, max_relative_error};
use varfuse::priors::{conditional_kl, conditional_kl_backward, GmmPrior, PixelConditionMap};
use varfuse::tensor::Tensor;

/// Central differences are taken at every step and each entry keeps the
/// closest estimate: larger steps can straddle a LeakyReLU kink, smaller ones
/// lose digits to roundoff. A wrong gradient disagrees at all of them.
pub const FD_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
/// Entries where both gradients are below this magnitude are not compared.
pub const FD_FLOOR: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Location of the worst entry, when it is a parameter.
    pub worst: String,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE && self.checked > 0
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-scale..scale))
}

fn entry_error(analytic: f64, numeric: &[f64]) -> f64 {
    numeric.iter().map(|&n| max_relative_error(&[analytic], &[n], FD_FLOOR)).fold(f64::INFINITY, f64::min)
}

/// Worst per-entry error of `analytic` against finite differences of `f` at `x`.
pub fn fd_check(analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> f64 {
    let numeric: Vec<Vec<f64>> = FD_STEPS.iter().map(|&h| finite_diff_grad(&mut f, x, h)).collect();
    analytic
        .iter()
        .enumerate()
        .map(|(i, &a)| entry_error(a, &numeric.iter().map(|n| n[i]).collect::<Vec<_>>()))
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flat list of every trainable parameter value, in visit order.
fn trainable_values(m: &dyn Module) -> Vec<(String, Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |name, p| {
        if p.trainable {
            out.push((name.to_string(), p.value.clone(), p.grad.clone()));
        }
    });
    out
}

fn set_entry(m: &mut dyn Module, target: &str, index: usize, value: f64) {
    m.visit_params_mut("", &mut |name, p| {
        if name == target {
            p.value[index] = value;
        }
    });
}

/// Compares the analytic gradient held by `model` against finite differences
/// of `loss`, on at most `per_param` evenly spaced entries of every trainable
/// parameter. Returns `(max relative error, entries checked)`.
fn check_params<M: Module + Clone>(model: &M, per_param: usize, loss: &dyn Fn(&M) -> f64) -> (f64, usize, String) {
    let mut worst = 0.0f64;
    let mut at = String::new();
    let mut checked = 0;
    let mut probe = model.clone();
    for (name, value, grad) in trainable_values(model) {
        let stride = value.len().div_ceil(per_param).max(1);
        for i in (0..value.len()).step_by(stride) {
            let fd: Vec<f64> = FD_STEPS
                .iter()
                .map(|&h| {
                    set_entry(&mut probe, &name, i, value[i] + h);
                    let up = loss(&probe);
                    set_entry(&mut probe, &name, i, value[i] - h);
                    let down = loss(&probe);
                    set_entry(&mut probe, &name, i, value[i]);
                    (up - down) / (2.0 * h)
                })
                .collect();
            let err = entry_error(grad[i], &fd);
            if err > worst {
                worst = err;
                at = format!("{name}[{i}] analytic={:e} numeric={fd:?}", grad[i]);
            }
            checked += 1;
        }
    }
    (worst, checked, at)
}

/// Full fusion module: inputs, all parameters, the fused-feature path and
/// direct posterior gradients (as a KL term would supply).
pub fn vffm_suite(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = VffmConfig { kernel: 3, squeeze_ratio: 2, latent_dim: 3 };
    let mut params = VffmParams::new(&mut rng, 4, cfg).unwrap();
    let shape = [2, 4, 5, 5];
    let rgb = random_tensor(&mut rng, shape, 1.0);
    let thermal = random_tensor(&mut rng, shape, 1.0);
    let g_fused = random_tensor(&mut rng, shape, 1.0);
    let g_mean = random_tensor(&mut rng, [2, 3, 5, 5], 1.0);
    let g_logvar = random_tensor(&mut rng, [2, 3, 5, 5], 1.0);
    let mode = SampleMode::Random { seed: seed ^ 0x55 };

    let loss = |p: &VffmParams, r: &Tensor, t: &Tensor| {
        let (out, _) = p.forward(&ModalityFeature::new(r.clone(), 0), &ModalityFeature::new(t.clone(), 0), mode, Phase::Train).unwrap();
        dot(out.fused.values.data(), g_fused.data())
            + dot(out.posterior.mean.data(), g_mean.data())
            + dot(out.posterior.log_variance.data(), g_logvar.data())
    };

    params.zero_grad();
    let (out, cache) = params
        .forward(&ModalityFeature::new(rgb.clone(), 0), &ModalityFeature::new(thermal.clone(), 0), mode, Phase::Train)
        .unwrap();
    let (d_rgb, d_thermal) = params.backward(&cache, &out, &g_fused, Some(&g_mean), Some(&g_logvar));

    let mut worst = fd_check(d_rgb.data(), |v| loss(&params, &Tensor::from_vec(shape, v.to_vec()).unwrap(), &thermal), rgb.data())
        .max(fd_check(d_thermal.data(), |v| loss(&params, &rgb, &Tensor::from_vec(shape, v.to_vec()).unwrap()), thermal.data()));
    let (pw, pc, at) = check_params(&params, usize::MAX, &|p| loss(p, &rgb, &thermal));
    worst = worst.max(pw);
    GradReport { name: "fusion module", max_rel_err: worst, checked: pc + 2 * rgb.numel(), worst: at }
}

fn random_conditions(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, categories: usize, illuminations: usize) -> Vec<PixelConditionMap> {
    (0..n)
        .map(|_| PixelConditionMap {
            category: LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..categories) as u8).collect()).unwrap(),
            illumination: rng.gen_range(0..illuminations),
        })
        .collect()
}

/// Conditional KL against posterior and prior parameters.
pub fn prior_suite(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, l, d) = (3, 2, 3);
    let mut prior = GmmPrior::new(&mut rng, c, l, d).unwrap();
    prior.log_variance.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    let shape = [2, d, 4, 4];
    let mean = random_tensor(&mut rng, shape, 1.0);
    let logvar = random_tensor(&mut rng, shape, 1.0);
    let conds = random_conditions(&mut rng, 2, 4, 4, c, l);
    let upstream = [0.7, -1.3];

    let loss = |m: &Tensor, lv: &Tensor, p: &GmmPrior| {
        let post = LatentPosterior::new(m.clone(), lv.clone()).unwrap();
        dot(&conditional_kl(&post, &conds, p).unwrap(), &upstream)
    };
    let post = LatentPosterior::new(mean.clone(), logvar.clone()).unwrap();
    prior.zero_grad();
    let (dm, dlv) = conditional_kl_backward(&post, &conds, &mut prior, &upstream).unwrap();
    let mut worst = fd_check(dm.data(), |v| loss(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &logvar, &prior), mean.data())
        .max(fd_check(dlv.data(), |v| loss(&mean, &Tensor::from_vec(shape, v.to_vec()).unwrap(), &prior), logvar.data()));
    let (pw, pc, at) = check_params(&prior, usize::MAX, &|p| loss(&mean, &logvar, p));
    worst = worst.max(pw);
    GradReport { name: "prior", max_rel_err: worst, checked: pc + 2 * mean.numel(), worst: at }
}

/// Total loss against logits and all five posteriors.
pub fn loss_suite(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (classes, n, size) = (4, 2, 8);
    let beta = 0.7;
    let logits = random_tensor(&mut rng, [n, classes, size, size], 2.0);
    let labels: Vec<LabelMap> = (0..n)
        .map(|_| LabelMap::new(size, size, (0..size * size).map(|_| rng.gen_range(0..classes) as u8).collect()).unwrap())
        .collect();
    let illum = vec![0, 1];
    let weights = ClassWeights::new(vec![0.5, 1.5, 2.0, 3.0]).unwrap();
    let prior = GmmPrior::new(&mut rng, classes, 2, 2).unwrap();
    let grids = [(8, 8), (4, 4), (2, 2), (2, 2), (1, 1)];
    let posteriors: Vec<LatentPosterior> = grids
        .iter()
        .map(|&(h, w)| LatentPosterior::new(random_tensor(&mut rng, [n, 2, h, w], 1.0), random_tensor(&mut rng, [n, 2, h, w], 1.0)).unwrap())
        .collect();

    let total = |lg: &Tensor, posts: &[LatentPosterior]| {
        let refs: Vec<&LatentPosterior> = posts.iter().collect();
        total_loss(lg, &labels, &illum, &refs, &prior, &weights, beta).unwrap().total
    };

    // analytic: mean over the batch of WCE plus beta times the level-mean KL
    let dlogits = weighted_cross_entropy_backward(&logits, &labels, &weights, &vec![1.0 / n as f64; n]).unwrap();
    let mut worst = fd_check(dlogits.data(), |v| total(&Tensor::from_vec(logits.shape(), v.to_vec()).unwrap(), &posteriors), logits.data());
    let mut checked = logits.numel();
    let upstream = vec![beta / (n as f64 * posteriors.len() as f64); n];
    for (i, post) in posteriors.iter().enumerate() {
        let (h, w) = post.mean.spatial();
        let conds = level_conditions(&labels, &illum, (h, w), &prior).unwrap();
        let (dm, dlv) = conditional_kl_backward(post, &conds, &mut prior.clone(), &upstream).unwrap();
        let em = fd_check(
            dm.data(),
            |v| {
                let mut p = posteriors.clone();
                p[i] = LatentPosterior::new(Tensor::from_vec(post.shape(), v.to_vec()).unwrap(), post.log_variance.clone()).unwrap();
                total(&logits, &p)
            },
            post.mean.data(),
        );
        let elv = fd_check(
            dlv.data(),
            |v| {
                let mut p = posteriors.clone();
                p[i] = LatentPosterior::new(post.mean.clone(), Tensor::from_vec(post.shape(), v.to_vec()).unwrap()).unwrap();
                total(&logits, &p)
            },
            post.log_variance.data(),
        );
        worst = worst.max(em).max(elv);
        checked += 2 * post.mean.numel();
    }
    // the weighted CE on its own, against per-image upstream weights
    let up = [0.3, 1.9];
    let d = weighted_cross_entropy_backward(&logits, &labels, &weights, &up).unwrap();
    worst = worst.max(fd_check(
        d.data(),
        |v| dot(&weighted_cross_entropy(&Tensor::from_vec(logits.shape(), v.to_vec()).unwrap(), &labels, &weights).unwrap(), &up),
        logits.data(),
    ));
    GradReport { name: "losses", max_rel_err: worst, checked: checked + logits.numel(), worst: String::new() }
}

/// Smallest network the geometry allows: few channels, 32x32 inputs.
pub fn tiny_network(seed: u64, classes: usize) -> Network {
    let mut cfg = NetworkConfig::new(BackboneConfig::new(BackboneVariant::Tiny, [4, 4, 8, 8, 16]).unwrap(), classes);
    cfg.fusion = VffmConfig { kernel: 3, squeeze_ratio: 4, latent_dim: 2 };
    Network::new(cfg, seed).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, size: usize, classes: usize) -> Batch {
    Batch {
        rgb: Tensor::from_fn([n, 3, size, size], |_, _, _, _| rng.gen_range(0.0..1.0)),
        thermal: Tensor::from_fn([n, 1, size, size], |_, _, _, _| rng.gen_range(0.0..1.0)),
        labels: (0..n)
            .map(|_| LabelMap::new(size, size, (0..size * size).map(|_| rng.gen_range(0..classes) as u8).collect()).unwrap())
            .collect(),
        illumination: (0..n).map(|i| i % 2).collect(),
    }
}

/// End-to-end training loss of a tiny network against up to `per_param`
/// entries of every trainable parameter.
pub fn network_suite(seed: u64, per_param: usize) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 3;
    let mut net = tiny_network(seed, classes);
    let batch = random_batch(&mut rng, 2, 32, classes);
    let weights = ClassWeights::new(vec![0.8, 1.2, 2.0]).unwrap();
    let beta = 0.5;
    let mode = SampleMode::Random { seed: seed ^ 0xABC };
    let loss = |n: &Network| {
        let trace = n.forward_trace(&batch.rgb, &batch.thermal, mode, Phase::Train).unwrap();
        n.loss(&trace, &batch, &weights, beta).unwrap().total
    };
    net.zero_grad();
    let trace = net.forward_trace(&batch.rgb, &batch.thermal, mode, Phase::Train).unwrap();
    net.backward(&trace, &batch, &weights, beta).unwrap();
    let (worst, checked, at) = check_params(&net, per_param, &loss);
    GradReport { name: "end-to-end network", max_rel_err: worst, checked, worst: at }
}
