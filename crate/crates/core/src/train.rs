//! Training loop, evaluation and ablation sweeps over a run directory.
//!
//! A run directory holds:
//!
//! ```text
//! config.txt          config echo
//! class_weights.txt   one weight per class
//! train.log           one line per epoch
//! last.ckpt best.ckpt
//! metrics.txt         key=value report of the final evaluation
//! metrics.csv         per-class table of the same
//! STATUS              running | completed | failed: <reason>
//! nan_dump.txt        written when training hits a non-finite loss
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{ClassWeighting, RunConfig};
use crate::data::{augment, label_histogram, load_sample, DatasetSpec, Illumination, SamplePair, Split};
use crate::error::{Error, Result};
use crate::fusion::derive_seed;
use crate::losses::{compute_class_weights, ClassWeights, LossBreakdown};
use crate::metrics::{ConfusionMatrix, MetricsSummary, CSV_HEADER};
use crate::network::{Batch, ForwardTrace, Modality, Network};
use crate::nn::Module;
use crate::optim::build_optimizer;

pub const LOG_VERSION: &str = concat!("varfuse ", env!("CARGO_PKG_VERSION"), " train-log v1");

// stream ids for derive_seed
const INIT_STREAM: u64 = 0x1;
const SHUFFLE_STREAM: u64 = 0x2;
const STEP_STREAM: u64 = 0x3;
const EVAL_STREAM: u64 = 0x4;

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_file(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Opens the dataset named by the config and reconciles the class count.
pub fn open_dataset(cfg: &RunConfig) -> Result<(DatasetSpec, usize)> {
    let spec = DatasetSpec::open(&cfg.data_root, cfg.resize, cfg.include_flipped)?;
    let classes = match cfg.classes {
        0 => spec.classes(),
        c if c == spec.classes() => c,
        c => return Err(Error::Config(format!("config says {c} classes, dataset lists {}", spec.classes()))),
    };
    Ok((spec, classes))
}

pub fn build_network(cfg: &RunConfig, classes: usize) -> Result<Network> {
    Network::new(cfg.network_config(classes)?, derive_seed(cfg.seed, INIT_STREAM))
}

/// Reads a checkpoint and rebuilds the network from its config echo.
pub fn load_network(path: &Path) -> Result<(Network, RunConfig, Checkpoint)> {
    let ck = Checkpoint::read(path)?;
    let cfg = RunConfig::from_text(&ck.config)?;
    let classes = ck.meta_u64("classes")? as usize;
    let mut net = build_network(&cfg, classes)?;
    ck.apply_to(&mut net, true)?;
    Ok((net, cfg, ck))
}

fn class_weights(cfg: &RunConfig, spec: &DatasetSpec, train_ids: &[String], cache: &Path) -> Result<ClassWeights> {
    if cache.exists() {
        let w = ClassWeights::load(cache)?;
        if w.classes() != spec.classes() {
            return Err(Error::Data(format!("{} lists {} weights for {} classes", cache.display(), w.classes(), spec.classes())));
        }
        return Ok(w);
    }
    let w = match cfg.class_weighting {
        ClassWeighting::Uniform => ClassWeights::uniform(spec.classes()),
        ClassWeighting::Enet => compute_class_weights(&label_histogram(spec, train_ids)?, cfg.enet_k)?,
    };
    w.save(cache)?;
    Ok(w)
}

/// Summary statistics of one level's posterior and fusion factor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentStats {
    pub level: usize,
    pub mean_avg: f64,
    pub mean_abs_max: f64,
    pub logvar_min: f64,
    pub logvar_max: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub w_avg: f64,
}

pub fn latent_stats(trace: &ForwardTrace) -> Vec<LatentStats> {
    trace
        .levels
        .iter()
        .enumerate()
        .filter_map(|(level, l)| {
            let o = l.vffm.as_ref()?;
            let m = o.posterior.mean.data();
            let lv = o.posterior.log_variance.data();
            let w = o.factor.values.data();
            Some(LatentStats {
                level,
                mean_avg: m.iter().sum::<f64>() / m.len() as f64,
                mean_abs_max: m.iter().fold(0.0, |a, v| a.max(v.abs())),
                logvar_min: lv.iter().copied().fold(f64::INFINITY, f64::min),
                logvar_max: lv.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                w_min: w.iter().copied().fold(f64::INFINITY, f64::min),
                w_max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                w_avg: w.iter().sum::<f64>() / w.len() as f64,
            })
        })
        .collect()
}

fn nan_dump(net: &Network, last_good: &[LatentStats], step: u64, err: &Error) -> String {
    let mut out = format!("step={step}\nerror={err}\n# latent statistics of the last finite step\n");
    for s in last_good {
        let _ = writeln!(
            out,
            "level={} mean_avg={:e} mean_abs_max={:e} logvar_min={:e} logvar_max={:e} w_min={:e} w_max={:e} w_avg={:e}",
            s.level, s.mean_avg, s.mean_abs_max, s.logvar_min, s.logvar_max, s.w_min, s.w_max, s.w_avg
        );
    }
    out.push_str("# parameters: name max_abs non_finite\n");
    net.visit_params("", &mut |name, p| {
        let max = p.value.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let bad = p.value.iter().filter(|v| !v.is_finite()).count();
        let _ = writeln!(out, "{name} {max:e} {bad}");
    });
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
    pub val_miou: Option<f64>,
}

impl EpochRecord {
    fn log_line(&self) -> String {
        let mut s = format!(
            "epoch={} step={} loss={:.8} wce={:.8} kl_mean={:.8} beta={}",
            self.epoch, self.step, self.loss.total, self.loss.wce, self.loss.kl_mean, self.loss.beta
        );
        for (i, k) in self.loss.kl_levels.iter().enumerate() {
            let _ = write!(s, " kl{i}={k:.6}");
        }
        let _ = write!(s, " val_mIoU={}", self.val_miou.map_or("none".into(), |v| format!("{v:.6}")));
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from `last.ckpt` in the run directory.
    pub resume: bool,
    /// Echo epoch lines to stderr.
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub network: Network,
    pub epochs: Vec<EpochRecord>,
    pub best_val_miou: Option<f64>,
    pub final_eval: EvalReport,
}

fn mean_breakdown(acc: &[LossBreakdown], beta: f64) -> LossBreakdown {
    let n = acc.len().max(1) as f64;
    let levels = acc.first().map_or(0, |b| b.kl_levels.len());
    LossBreakdown {
        total: acc.iter().map(|b| b.total).sum::<f64>() / n,
        wce: acc.iter().map(|b| b.wce).sum::<f64>() / n,
        kl_mean: acc.iter().map(|b| b.kl_mean).sum::<f64>() / n,
        beta,
        kl_levels: (0..levels).map(|i| acc.iter().map(|b| b.kl_levels[i]).sum::<f64>() / n).collect(),
    }
}

fn load_batch(spec: &DatasetSpec, ids: &[String], augment_with: Option<(u64, f64)>) -> Result<Batch> {
    let samples = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let s = load_sample(spec, id)?;
            Ok(match augment_with {
                Some((seed, frac)) => augment(&s, derive_seed(seed, i as u64), frac),
                None => s,
            })
        })
        .collect::<Result<Vec<SamplePair>>>()?;
    Batch::from_samples(&samples)
}

/// Trains per `cfg` into `run_dir`, then evaluates the final network on
/// `cfg.eval_split`. Deterministic given the config.
pub fn train(cfg: &RunConfig, run_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (spec, classes) = open_dataset(cfg)?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let status = run_dir.join("STATUS");
    let log = run_dir.join("train.log");
    let last_path = run_dir.join("last.ckpt");
    let best_path = run_dir.join("best.ckpt");
    let echo = cfg.to_text();

    let mut train_ids: Vec<String> = spec.ids(Split::Train).to_vec();
    if cfg.max_train > 0 {
        train_ids.truncate(cfg.max_train);
    }
    if train_ids.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let val_ids = spec.ids(Split::Val).to_vec();

    let mut net = build_network(cfg, classes)?;
    let mut optimizer = build_optimizer(&cfg.optimizer, cfg.adamw())?;
    let (mut start_epoch, mut step, mut best) = (0usize, 0u64, None::<f64>);

    if opts.resume && last_path.exists() {
        let ck = Checkpoint::read(&last_path)?;
        let saved = RunConfig::from_text(&ck.config)?;
        let mut a = saved.clone();
        a.epochs = cfg.epochs;
        if a != *cfg {
            return Err(Error::Config("resume config differs from the run's config (only epochs may change)".into()));
        }
        ck.apply_to(&mut net, true)?;
        optimizer.load_state(&ck.optimizer_state())?;
        start_epoch = ck.meta_u64("epoch")? as usize;
        step = ck.meta_u64("step")?;
        best = ck.meta.get("best_val_miou").and_then(|v| v.parse().ok());
    } else {
        write_file(&log, &format!("# {LOG_VERSION}\n"))?;
    }
    write_file(&run_dir.join("config.txt"), &echo)?;
    write_file(&status, "running\n")?;
    let weights = class_weights(cfg, &spec, &train_ids, &run_dir.join("class_weights.txt"))?;

    let mut records = Vec::new();
    let mut last_stats = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ SHUFFLE_STREAM, epoch as u64)));
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let step_seed = derive_seed(cfg.seed ^ STEP_STREAM, step);
            let batch = load_batch(&spec, chunk, cfg.augment.then_some((step_seed, cfg.crop_fraction)))?;
            match net.train_step(&batch, &weights, cfg.beta, step_seed) {
                Ok((loss, trace)) => {
                    last_stats = latent_stats(&trace);
                    losses.push(loss);
                }
                Err(e @ Error::NonFinite(_)) => {
                    write_file(&run_dir.join("nan_dump.txt"), &nan_dump(&net, &last_stats, step, &e))?;
                    write_file(&status, &format!("failed: {e}\n"))?;
                    return Err(e);
                }
                Err(e) => {
                    write_file(&status, &format!("failed: {e}\n"))?;
                    return Err(e);
                }
            }
            optimizer.step(&mut net);
            step += 1;
        }
        let val_miou = if val_ids.is_empty() {
            None
        } else {
            let opts = EvalOptions { samples: 1, seed: cfg.seed, missing: None, exclude_background: cfg.exclude_background };
            evaluate(&net, &spec, &val_ids, &opts)?.overall.summarize(cfg.exclude_background).miou
        };
        let record = EpochRecord { epoch: epoch + 1, step, loss: mean_breakdown(&losses, cfg.beta), val_miou };
        append_file(&log, &(record.log_line() + "\n"))?;
        if opts.verbose {
            eprintln!("{}", record.log_line());
        }
        let improved = match (val_miou, best) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best = val_miou;
        }
        let mut ck = Checkpoint::from_model(&net, &echo);
        ck.set_meta("classes", classes);
        ck.set_meta("epoch", epoch + 1);
        ck.set_meta("step", step);
        if let Some(b) = best {
            ck.set_meta("best_val_miou", b);
        }
        ck.set_optimizer_state(&optimizer.state());
        ck.write(&last_path)?;
        if improved || !best_path.exists() {
            ck.write(&best_path)?;
        }
        records.push(record);
    }
    if !last_path.exists() {
        let mut ck = Checkpoint::from_model(&net, &echo);
        ck.set_meta("classes", classes);
        ck.set_meta("epoch", 0);
        ck.set_meta("step", 0);
        ck.write(&last_path)?;
        ck.write(&best_path)?;
    }

    let eval_opts = EvalOptions {
        samples: cfg.samples,
        seed: cfg.seed,
        missing: cfg.missing_modality,
        exclude_background: cfg.exclude_background,
    };
    let report = evaluate(&net, &spec, spec.ids(cfg.eval_split), &eval_opts)?;
    report.write(run_dir, cfg.eval_split.name(), &spec.class_names, cfg.exclude_background)?;
    write_file(&status, "completed\n")?;
    Ok(TrainOutcome { run_dir: run_dir.to_path_buf(), network: net, epochs: records, best_val_miou: best, final_eval: report })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub samples: usize,
    pub seed: u64,
    pub missing: Option<Modality>,
    pub exclude_background: bool,
}

/// Overall and per-illumination confusion matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: ConfusionMatrix,
    pub day: ConfusionMatrix,
    pub night: ConfusionMatrix,
    pub images: usize,
}

impl EvalReport {
    pub fn summaries(&self, exclude_background: bool) -> [(&'static str, MetricsSummary); 3] {
        [
            ("overall", self.overall.summarize(exclude_background)),
            ("day", self.day.summarize(exclude_background)),
            ("night", self.night.summarize(exclude_background)),
        ]
    }

    pub fn miou(&self, exclude_background: bool) -> f64 {
        self.overall.summarize(exclude_background).miou.unwrap_or(0.0)
    }

    pub fn write(&self, dir: &Path, split: &str, class_names: &[String], exclude_background: bool) -> Result<()> {
        let mut kv = format!("split={split}\nimages={}\nexclude_background={exclude_background}\n", self.images);
        let mut csv = String::from(CSV_HEADER);
        for (part, s) in self.summaries(exclude_background) {
            kv.push_str(&s.to_key_values(part, class_names));
            csv.push_str(&s.to_csv_rows(part, class_names));
        }
        write_file(&dir.join("metrics.txt"), &kv)?;
        write_file(&dir.join("metrics.csv"), &csv)
    }
}

/// Evaluates `ids` one image at a time; image `i` uses seed
/// `derive_seed(seed, i)` for its latent draws.
pub fn evaluate(net: &Network, spec: &DatasetSpec, ids: &[String], opts: &EvalOptions) -> Result<EvalReport> {
    let c = net.classes();
    let mut report = EvalReport {
        overall: ConfusionMatrix::new(c),
        day: ConfusionMatrix::new(c),
        night: ConfusionMatrix::new(c),
        images: 0,
    };
    for (i, id) in ids.iter().enumerate() {
        let s = load_sample(spec, id)?;
        let seed = derive_seed(opts.seed ^ EVAL_STREAM, i as u64);
        let out = net.infer_missing(&s.rgb, &s.thermal, opts.missing, opts.samples, seed)?;
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&out.labels[0], &s.label)?;
        report.overall.merge(&cm)?;
        match s.illumination {
            Illumination::Day => report.day.merge(&cm)?,
            Illumination::Night => report.night.merge(&cm)?,
        }
        report.images += 1;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Beta,
    Samples,
    Prior,
    Loss,
    Fusion,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Self::Beta),
            "ns" => Ok(Self::Samples),
            "prior" => Ok(Self::Prior),
            "loss" => Ok(Self::Loss),
            "fusion" => Ok(Self::Fusion),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Samples => "ns",
            Self::Prior => "prior",
            Self::Loss => "loss",
            Self::Fusion => "fusion",
        }
    }

    /// Grid points as (label, config overrides).
    pub fn grid(self) -> Vec<(&'static str, Vec<(&'static str, &'static str)>)> {
        match self {
            Self::Beta => ["0", "0.3", "0.5", "0.7", "1"].iter().map(|b| (*b, vec![("beta", *b)])).collect(),
            Self::Samples => ["1", "5", "10", "20", "50"].iter().map(|n| (*n, vec![("samples", *n)])).collect(),
            Self::Prior => vec![
                ("none", vec![("prior_category", "false"), ("prior_illumination", "false")]),
                ("illumination", vec![("prior_category", "false"), ("prior_illumination", "true")]),
                ("category", vec![("prior_category", "true"), ("prior_illumination", "false")]),
                ("both", vec![("prior_category", "true"), ("prior_illumination", "true")]),
            ],
            Self::Loss => vec![
                ("ce", vec![("class_weighting", "uniform"), ("beta", "0")]),
                ("weightce", vec![("class_weighting", "enet"), ("beta", "0")]),
                ("ce+kl", vec![("class_weighting", "uniform")]),
                ("weightce+kl", vec![("class_weighting", "enet")]),
            ],
            Self::Fusion => vec![
                ("addition", vec![("fusion", "addition")]),
                ("attention", vec![("fusion", "attention")]),
                ("probabilistic", vec![("fusion", "probabilistic")]),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub setting: String,
    pub seed: u64,
    pub miou: f64,
    pub macc: f64,
    pub day_miou: Option<f64>,
    pub night_miou: Option<f64>,
}

pub const ABLATION_HEADER: &str = "axis,setting,seed,mIoU,mAcc,day_mIoU,night_mIoU\n";

impl AblationRow {
    pub fn csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or("absent".into(), |x| format!("{x:.6}"));
        format!(
            "{},{},{},{:.6},{:.6},{},{}\n",
            self.axis.name(),
            self.setting,
            self.seed,
            self.miou,
            self.macc,
            f(self.day_miou),
            f(self.night_miou)
        )
    }

    fn from_report(axis: AblationAxis, setting: &str, seed: u64, r: &EvalReport, exclude_background: bool) -> Self {
        let [(_, o), (_, d), (_, n)] = r.summaries(exclude_background);
        Self {
            axis,
            setting: setting.to_string(),
            seed,
            miou: o.miou.unwrap_or(0.0),
            macc: o.macc.unwrap_or(0.0),
            day_miou: d.miou,
            night_miou: n.miou,
        }
    }
}

/// Runs one axis of the ablation grid for each seed under `out_dir` and
/// writes `ablation_<axis>.csv` there. The sample-count axis trains once per
/// seed and re-evaluates the same network.
pub fn ablate(base: &RunConfig, axis: AblationAxis, seeds: &[u64], out_dir: &Path, opts: &TrainOptions) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join(format!("ablation_{}.csv", axis.name()));
    write_file(&csv_path, ABLATION_HEADER)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        if axis == AblationAxis::Samples {
            let outcome = train(&cfg, &out_dir.join(format!("seed{seed}")), opts)?;
            let (spec, _) = open_dataset(&cfg)?;
            for (label, overrides) in axis.grid() {
                let mut c = cfg.clone();
                for (k, v) in overrides {
                    c.set(k, v)?;
                }
                let eo = EvalOptions { samples: c.samples, seed, missing: c.missing_modality, exclude_background: c.exclude_background };
                let report = evaluate(&outcome.network, &spec, spec.ids(c.eval_split), &eo)?;
                let row = AblationRow::from_report(axis, label, seed, &report, c.exclude_background);
                append_file(&csv_path, &row.csv())?;
                rows.push(row);
            }
            continue;
        }
        for (label, overrides) in axis.grid() {
            let mut c = cfg.clone();
            for (k, v) in overrides {
                c.set(k, v)?;
            }
            let dir = out_dir.join(format!("{}-{}-seed{seed}", axis.name(), label.replace('+', "_")));
            let outcome = train(&c, &dir, opts)?;
            let row = AblationRow::from_report(axis, label, seed, &outcome.final_eval, c.exclude_background);
            append_file(&csv_path, &row.csv())?;
            rows.push(row);
        }
    }
    Ok(rows)
}
