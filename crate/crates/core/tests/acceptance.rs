//! Acceptance run. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any fails.
//!
//! `cargo test --release --test acceptance` runs everything (about an hour on
//! one core); numeric arguments select criteria, e.g.
//! `cargo test --release --test acceptance -- 1 2 7`.

mod common;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use varfuse::config::RunConfig;
use varfuse::data::{generate_synthetic, LabelMap, SyntheticConfig};
use varfuse::fusion::{
    derive_seed, fuse, sample_latent, FusionFactorMap, LatentPosterior, ModalityFeature, SampleMode, VffmConfig,
    VffmParams,
};
use varfuse::losses::{level_conditions, total_loss, weighted_cross_entropy, ClassWeights};
use varfuse::metrics::ConfusionMatrix;
use varfuse::network::{FusionMode, Modality};
use varfuse::nn::{Module, Phase};
use varfuse::oracles::{brute_force_metrics, mc_kl, FlatKlProblem};
use varfuse::priors::{conditional_kl, GmmPrior, PixelConditionMap};
use varfuse::tensor::Tensor;
use varfuse::train::{build_network, evaluate, open_dataset, train, EvalOptions, TrainOptions};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn work_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn single_pixel_kl(post: (f64, f64), prior: (f64, f64)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut gmm = GmmPrior::new(&mut rng, 1, 1, 1).unwrap();
    gmm.mean.value[0] = prior.0;
    gmm.log_variance.value[0] = prior.1;
    let q = LatentPosterior::new(Tensor::from_vec([1, 1, 1, 1], vec![post.0]).unwrap(), Tensor::from_vec([1, 1, 1, 1], vec![post.1]).unwrap())
        .unwrap();
    let conds = [PixelConditionMap { category: LabelMap::filled(1, 1, 0), illumination: 0 }];
    conditional_kl(&q, &conds, &gmm).unwrap()[0]
}

/// Closed-form KL against the Monte-Carlo estimator on random mixtures.
fn kl_oracle() -> Outcome {
    const N: usize = 1_000_000;
    let shapes = [(1, 1, 1), (2, 3, 1), (3, 2, 2), (4, 9, 2), (1, 5, 2), (2, 9, 1), (3, 4, 2), (4, 6, 2), (2, 7, 2), (1, 9, 2)];
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for (i, &(d, c, l)) in shapes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let mut prior = GmmPrior::new(&mut rng, c, l, d).unwrap();
        prior.mean.value.iter_mut().for_each(|v| *v = normal(&mut rng));
        prior.log_variance.value.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let shape = [1, d, 3, 3];
        let mean = Tensor::from_fn(shape, |_, _, _, _| normal(&mut rng));
        let logvar = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let category = LabelMap::new(3, 3, (0..9).map(|_| rng.gen_range(0..c) as u8).collect()).unwrap();
        let cond = PixelConditionMap { category, illumination: rng.gen_range(0..l) };
        let post = LatentPosterior::new(mean.clone(), logvar.clone()).unwrap();
        let closed = conditional_kl(&post, std::slice::from_ref(&cond), &prior).unwrap()[0];

        let mut problem = FlatKlProblem { mean: vec![], var: vec![], prior_mean: vec![], prior_var: vec![] };
        for k in 0..d {
            for p in 0..9 {
                let j = prior.index(cond.category.data[p] as usize, cond.illumination, k);
                problem.mean.push(mean.data()[k * 9 + p]);
                problem.var.push(logvar.data()[k * 9 + p].exp());
                problem.prior_mean.push(prior.mean.value[j]);
                problem.prior_var.push(prior.log_variance.value[j].exp());
            }
        }
        let est = mc_kl(&problem, N, 7 + i as u64);
        let rel = (closed - est.mean).abs() / closed.abs();
        worst = worst.max(rel);
        let _ = write!(detail, " [d={d} C*L={} kl={closed:.4} mc={:.4}±{:.1e}]", c * l, est.mean, est.std_err);
    }
    Outcome::new(worst < 0.01, format!("worst relative error {worst:.2e} (limit 1e-2), n=1e6;{detail}"))
}

fn kl_anchors() -> Outcome {
    let a = single_pixel_kl((0.0, 0.0), (1.0, 0.0));
    let b = single_pixel_kl((0.0, 0.25f64.ln()), (0.0, 0.0));
    let (ea, eb) = ((a - 0.5).abs(), (b - 0.318147).abs());
    Outcome::new(ea <= 1e-6 && eb <= 1e-6, format!("KL(N(0,1)||N(1,1))={a:.9} KL(N(0,0.25)||N(0,1))={b:.9} errors {ea:.1e}, {eb:.1e} (limit 1e-6)"))
}

fn gradient_suite() -> Outcome {
    let mut reports = Vec::new();
    for seed in 0..3 {
        reports.push(common::vffm_suite(seed));
        reports.push(common::prior_suite(seed));
    }
    reports.push(common::loss_suite(0));
    reports.push(common::loss_suite(1));
    reports.push(common::network_suite(0, 12));
    let pass = reports.iter().all(|r| r.pass());
    let mut detail = format!("tolerance {:e}, steps {:?};", common::GRAD_TOLERANCE, common::FD_STEPS);
    for name in ["fusion module", "prior", "losses", "end-to-end network"] {
        let rs: Vec<_> = reports.iter().filter(|r| r.name == name).collect();
        let worst = rs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        let checked: usize = rs.iter().map(|r| r.checked).sum();
        let _ = write!(detail, " {name} max {worst:.1e} over {checked} entries;");
    }
    Outcome::new(pass, detail)
}

fn fusion_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut envelope_err, mut identity_failures, mut range_failures) = (0.0f64, 0usize, 0usize);
    for i in 0..1000 {
        let (c, h, w) = (rng.gen_range(1..6), rng.gen_range(1..7), rng.gen_range(1..7));
        let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
        let shape = [2, c, h, w];
        let rgb = ModalityFeature::new(common::random_tensor(&mut rng, shape, scale), 0);
        let thermal = ModalityFeature::new(common::random_tensor(&mut rng, shape, scale), 0);
        let factor = FusionFactorMap::new(Tensor::from_fn([2, 1, h, w], |_, _, _, _| rng.gen_range(0.0..=1.0))).unwrap();
        let fused = fuse(&rgb, &thermal, &factor).unwrap().values;
        for ((f, a), b) in fused.data().iter().zip(rgb.values.data()).zip(thermal.values.data()) {
            envelope_err = envelope_err.max(a.min(*b) - f).max(f - a.max(*b));
        }
        let zero = fuse(&rgb, &thermal, &FusionFactorMap::constant(shape, 0.0).unwrap()).unwrap().values;
        let one = fuse(&rgb, &thermal, &FusionFactorMap::constant(shape, 1.0).unwrap()).unwrap().values;
        identity_failures += usize::from(zero != thermal.values) + usize::from(one != rgb.values);

        // factors produced by a randomly initialized module
        let cfg = VffmConfig { kernel: 3, squeeze_ratio: 2, latent_dim: rng.gen_range(1..4) };
        let params = VffmParams::new(&mut rng, c.max(2), cfg).unwrap();
        let fshape = [1, c.max(2), h, w];
        let r = ModalityFeature::new(common::random_tensor(&mut rng, fshape, scale), 0);
        let t = ModalityFeature::new(common::random_tensor(&mut rng, fshape, scale), 0);
        let mode = if i % 2 == 0 { SampleMode::PosteriorMean } else { SampleMode::Random { seed: i as u64 } };
        let (out, _) = params.forward(&r, &t, mode, Phase::Eval).unwrap();
        range_failures += out.factor.values.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    }
    let pass = envelope_err <= 1e-6 && identity_failures == 0 && range_failures == 0;
    Outcome::new(
        pass,
        format!("1000 instances: max envelope violation {envelope_err:.1e} (limit 1e-6), W=0/W=1 identity failures {identity_failures}, W outside [0,1] {range_failures}"),
    )
}

fn reparameterization() -> Outcome {
    const N: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [1, 4, 5, 5];
    let mut mean = Tensor::from_fn(shape, |_, _, _, _| normal(&mut rng));
    let mut logvar = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-3.0..3.0));
    // the standard-normal anchor
    mean.data_mut()[0] = 0.0;
    logvar.data_mut()[0] = 0.0;
    let post = LatentPosterior::new(mean.clone(), logvar.clone()).unwrap();
    let m = mean.data().len();
    let (mut s1, mut s2) = (vec![0.0; m], vec![0.0; m]);
    for i in 0..N {
        let z = sample_latent(&post, SampleMode::Random { seed: derive_seed(55, i as u64) });
        for (e, &v) in z.values.data().iter().enumerate() {
            let dv = v - mean.data()[e];
            s1[e] += dv;
            s2[e] += dv * dv;
        }
    }
    let n = N as f64;
    let (mut worst_sigma, mut worst_var) = (0.0f64, 0.0f64);
    for e in 0..m {
        let var = logvar.data()[e].exp();
        let offset = s1[e] / n;
        let sample_var = (s2[e] / n - offset * offset) * n / (n - 1.0);
        worst_sigma = worst_sigma.max(offset.abs() / (var.sqrt() / n.sqrt()));
        worst_var = worst_var.max((sample_var / var - 1.0).abs());
    }
    let anchor_mean = s1[0] / n;
    let anchor_var = s2[0] / n - anchor_mean * anchor_mean;
    let pass = worst_sigma <= 5.0 && worst_var <= 0.01 && anchor_mean.abs() <= 4e-3 && (anchor_var - 1.0).abs() <= 0.01;
    Outcome::new(
        pass,
        format!(
            "{m} positions x 1e6 draws: worst mean offset {worst_sigma:.2} sigma/sqrt(n) (limit 5), worst variance error {worst_var:.2e} (limit 1e-2); N(0,1) anchor mean {anchor_mean:.1e} var {anchor_var:.5}"
        ),
    )
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..200 {
        let classes = rng.gen_range(2..9);
        let present: Vec<u8> = (0..classes as u8).filter(|_| rng.gen_bool(0.7)).collect();
        let present = if present.is_empty() { vec![0] } else { present };
        let images = rng.gen_range(1..4);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..images {
            let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
            let gt: Vec<u8> = (0..h * w).map(|_| present[rng.gen_range(0..present.len())]).collect();
            let pred: Vec<u8> =
                gt.iter().map(|&g| if rng.gen_bool(0.6) { g } else { rng.gen_range(0..classes as u8) }).collect();
            preds.push(LabelMap::new(h, w, pred).unwrap());
            gts.push(LabelMap::new(h, w, gt).unwrap());
        }
        let exclude = rng.gen_bool(0.5);
        let mut cm = ConfusionMatrix::new(classes);
        for (p, g) in preds.iter().zip(&gts) {
            cm.accumulate(p, g).unwrap();
        }
        let s = cm.summarize(exclude);
        let p: Vec<&[u8]> = preds.iter().map(|m| m.data.as_slice()).collect();
        let g: Vec<&[u8]> = gts.iter().map(|m| m.data.as_slice()).collect();
        let b = brute_force_metrics(&p, &g, classes, exclude);
        if s.acc != b.acc || s.iou != b.iou || s.macc != b.macc || s.miou != b.miou {
            mismatches += 1;
        }
    }
    let mut hand = ConfusionMatrix::new(2);
    let map = |v: &[u8]| LabelMap::new(1, v.len(), v.to_vec()).unwrap();
    hand.accumulate(&map(&[0, 0, 1]), &map(&[0, 0, 0])).unwrap();
    hand.accumulate(&map(&[1]), &map(&[1])).unwrap();
    let counts_ok = hand.counts == vec![2, 1, 0, 1];
    let miou = hand.summarize(false).miou;
    let pass = mismatches == 0 && counts_ok && miou == Some(7.0 / 12.0);
    Outcome::new(pass, format!("200 random cases, {mismatches} mismatches; hand case counts {:?} mIoU {miou:?} (7/12 = {:?})", hand.counts, 7.0 / 12.0))
}

/// Plain cross-entropy written out directly.
fn naive_ce(logits: &Tensor, labels: &[LabelMap]) -> Vec<f64> {
    let [n, c, h, w] = logits.shape();
    (0..n)
        .map(|b| {
            let mut total = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let max = (0..c).map(|k| logits.at(b, k, y, x)).fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + (0..c).map(|k| (logits.at(b, k, y, x) - max).exp()).sum::<f64>().ln();
                    total += lse - logits.at(b, labels[b].get(y, x) as usize, y, x);
                }
            }
            total / (h * w) as f64
        })
        .collect()
}

fn loss_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ce_err = 0.0f64;
    for _ in 0..50 {
        let (c, n, h, w) = (rng.gen_range(2..7), rng.gen_range(1..4), rng.gen_range(1..9), rng.gen_range(1..9));
        let logits = common::random_tensor(&mut rng, [n, c, h, w], 8.0);
        let labels: Vec<LabelMap> =
            (0..n).map(|_| LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..c) as u8).collect()).unwrap()).collect();
        let a = weighted_cross_entropy(&logits, &labels, &ClassWeights::uniform(c)).unwrap();
        for (x, y) in a.iter().zip(naive_ce(&logits, &labels)) {
            ce_err = ce_err.max((x - y).abs());
        }
    }

    let mut total_err = 0.0f64;
    for _ in 0..20 {
        let (c, n, d) = (rng.gen_range(2..6), rng.gen_range(1..4), rng.gen_range(1..5));
        let logits = common::random_tensor(&mut rng, [n, c, 16, 16], 4.0);
        let labels: Vec<LabelMap> =
            (0..n).map(|_| LabelMap::new(16, 16, (0..256).map(|_| rng.gen_range(0..c) as u8).collect()).unwrap()).collect();
        let illumination: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let prior = GmmPrior::new(&mut rng, c, 2, d).unwrap();
        let posts: Vec<LatentPosterior> = [16, 8, 4, 2, 1]
            .iter()
            .map(|&g| {
                let m = common::random_tensor(&mut rng, [n, d, g, g], 2.0);
                let lv = common::random_tensor(&mut rng, [n, d, g, g], 2.0);
                LatentPosterior::new(m, lv).unwrap()
            })
            .collect();
        let refs: Vec<&LatentPosterior> = posts.iter().collect();
        let weights = ClassWeights { w: (0..c).map(|_| rng.gen_range(0.5..5.0)).collect() };
        let beta = rng.gen_range(0.0..2.0);
        let loss = total_loss(&logits, &labels, &illumination, &refs, &prior, &weights, beta).unwrap();
        let wce = weighted_cross_entropy(&logits, &labels, &weights).unwrap().iter().sum::<f64>() / n as f64;
        let mut kl = 0.0;
        for p in &posts {
            let [_, _, h, w] = p.shape();
            let conds = level_conditions(&labels, &illumination, (h, w), &prior).unwrap();
            kl += conditional_kl(p, &conds, &prior).unwrap().iter().sum::<f64>() / n as f64 / posts.len() as f64;
        }
        total_err = total_err
            .max((loss.total - (loss.wce + beta * loss.kl_mean)).abs())
            .max((loss.total - (wce + beta * kl)).abs());
    }

    // the KL-free probabilistic variant comes from configuration text alone
    let mut cfg = RunConfig::from_text("beta=0\nfusion=probabilistic\nchannels=4,4,8,8,16\nkernel=3\nsqueeze_ratio=2\nlatent_dim=2\n").unwrap();
    cfg.classes = 3;
    let mut net = build_network(&cfg, 3).unwrap();
    let batch = common::random_batch(&mut rng, 2, 32, 3);
    let (loss, _) = net.train_step(&batch, &ClassWeights::uniform(3), cfg.beta, 1).unwrap();
    let mut prior_grad = 0.0f64;
    net.prior.visit_params("prior", &mut |_, p| prior_grad = p.grad.iter().fold(prior_grad, |a, g| a.max(g.abs())));
    let mut fusion_grad = 0.0f64;
    for f in &net.fusion {
        f.visit_params("", &mut |_, p| fusion_grad = p.grad.iter().fold(fusion_grad, |a, g| a.max(g.abs())));
    }
    let beta0_ok = loss.total == loss.wce && loss.kl_mean > 0.0 && prior_grad == 0.0 && fusion_grad > 0.0;

    let pass = ce_err <= 1e-7 && total_err <= 1e-6 && beta0_ok;
    Outcome::new(
        pass,
        format!(
            "unit-weight WCE vs CE max diff {ce_err:.1e} (limit 1e-7); total vs wce+beta*kl max diff {total_err:.1e} (limit 1e-6); beta=0 total==wce {}, kl still reported {:.4}, prior grad max {prior_grad:e}, fusion grad max {fusion_grad:.1e}",
            loss.total == loss.wce,
            loss.kl_mean
        ),
    )
}

fn synthetic_dataset(root: &Path) -> PathBuf {
    let data = root.join("syn");
    if !data.join("classes.txt").exists() {
        generate_synthetic(&data, &SyntheticConfig::default(), true).unwrap();
    }
    data
}

fn run_config(data: &Path, fusion: FusionMode, seed: u64, epochs: usize, max_train: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data_root = data.to_path_buf();
    cfg.lr = 1e-3;
    cfg.epochs = epochs;
    cfg.fusion = fusion;
    cfg.seed = seed;
    cfg.max_train = max_train;
    cfg
}

fn fresh(dir: &Path) -> &Path {
    let _ = fs::remove_dir_all(dir);
    dir
}

fn synthetic_end_to_end() -> Outcome {
    let root = work_dir();
    let data = synthetic_dataset(&root);
    let cfg = run_config(&data, FusionMode::Probabilistic, 0, 40, 0);
    let out = train(&cfg, fresh(&root.join("c8")), &TrainOptions::default()).unwrap();
    let both = out.final_eval.miou(false);
    let (spec, _) = open_dataset(&cfg).unwrap();
    let single = |m: Modality| {
        let opts = EvalOptions { samples: 1, seed: cfg.seed, missing: Some(m), exclude_background: false };
        evaluate(&out.network, &spec, spec.test.as_slice(), &opts).unwrap().miou(false)
    };
    let (no_rgb, no_thermal) = (single(Modality::Rgb), single(Modality::Thermal));
    let pass = both >= 0.85 && no_rgb <= both - 0.15 && no_thermal <= both - 0.15;
    Outcome::new(
        pass,
        format!(
            "40 epochs, lr 1e-3: test mIoU both {both:.4} (>= 0.85), rgb zeroed {no_rgb:.4}, thermal zeroed {no_thermal:.4} (each <= {:.4})",
            both - 0.15
        ),
    )
}

fn ablation_directions() -> Outcome {
    const EPOCHS: usize = 15;
    const MAX_TRAIN: usize = 200;
    let root = work_dir();
    let data = synthetic_dataset(&root);
    let (mut prob, mut att, mut ns1, mut ns20) = (vec![], vec![], vec![], vec![]);
    for seed in 0..3 {
        for mode in [FusionMode::Probabilistic, FusionMode::Attention] {
            let cfg = run_config(&data, mode, seed, EPOCHS, MAX_TRAIN);
            let dir = root.join(format!("c9/{}-s{seed}", mode.name()));
            let out = train(&cfg, fresh(&dir), &TrainOptions::default()).unwrap();
            let miou = out.final_eval.miou(false);
            if mode == FusionMode::Attention {
                att.push(miou);
                continue;
            }
            prob.push(miou);
            let (spec, _) = open_dataset(&cfg).unwrap();
            let eval = |samples| {
                let opts = EvalOptions { samples, seed, missing: None, exclude_background: false };
                evaluate(&out.network, &spec, spec.test.as_slice(), &opts).unwrap().miou(false)
            };
            ns1.push(eval(1));
            ns20.push(eval(20));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = ns1.iter().zip(&ns20).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let pass = mean(&prob) >= mean(&att) - 0.01 && gap <= 0.005;
    Outcome::new(
        pass,
        format!(
            "{MAX_TRAIN} train images, {EPOCHS} epochs, seeds 0-2: probabilistic {prob:.4?} mean {:.4} vs attention {att:.4?} mean {:.4} (need >= mean - 0.01); N_s=1 {ns1:.4?} vs N_s=20 {ns20:.4?}, max per-seed gap {gap:.4} (limit 0.005)",
            mean(&prob),
            mean(&att)
        ),
    )
}

fn determinism() -> Outcome {
    let root = work_dir().join("c10");
    let _ = fs::remove_dir_all(&root);
    let cfg = SyntheticConfig { size: (64, 64), train: 24, val: 6, test: 10, classes: 4, seed: 5 };
    generate_synthetic(root.join("data"), &cfg, true).unwrap();
    let run = |name: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_varfuse"))
            .current_dir(&root)
            .args(["train", "--run-dir", name, "--data-root", "data", "--epochs", "2", "--lr", "1e-3", "--seed", "7", "--quiet"])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let metrics = fs::read_to_string(root.join(name).join("metrics.txt")).unwrap();
        let miou: f64 = metrics.lines().find_map(|l| l.strip_prefix("overall.mIoU=")).unwrap().parse().unwrap();
        (metrics, miou, fs::read(root.join(name).join("last.ckpt")).unwrap())
    };
    let (ma, a, ca) = run("run_a");
    let (mb, b, cb) = run("run_b");
    let pass = ma == mb && a.to_bits() == b.to_bits() && ca == cb;
    Outcome::new(pass, format!("two CLI runs: mIoU {a:?} vs {b:?}, metrics files identical {}, checkpoints identical {}", ma == mb, ca == cb))
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("KL oracle agreement", kl_oracle),
        ("analytic KL anchors", kl_anchors),
        ("gradient suite", gradient_suite),
        ("fusion invariants", fusion_invariants),
        ("reparameterization statistics", reparameterization),
        ("metrics oracle", metrics_oracle),
        ("loss equivalences", loss_equivalences),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("ablation directions", ablation_directions),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        eprintln!("running {n}. {name}");
        let start = Instant::now();
        let outcome = check();
        failed += usize::from(!outcome.pass);
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {n}. {name}: {} ({:.1}s)", outcome.detail, start.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
