//! Command-line front end: dataset generation and import, training,
//! evaluation, inference diagnostics and ablation sweeps.
//!
//! Every [`RunConfig`] key is accepted as a `--key-name VALUE` flag. Values
//! are layered as defaults, then `--config FILE`, then flags. Errors surface
//! as a single `error[<category>]: <message>` line and a nonzero exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use image::{GrayImage, Luma};
use ndarray::Array3;

use crate::config::{RunConfig, KEYS};
use crate::data::{self, generate_synthetic, load_image_pair, resize_bilinear, SyntheticConfig};
use crate::error::{Error, Result};
use crate::fusion::SampleMode;
use crate::network::Modality;
use crate::tensor::Tensor;
use crate::train::{self, AblationAxis, EvalOptions, TrainOptions};

const BOOL_KEYS: &[&str] = &[
    "include_flipped",
    "prior_category",
    "prior_illumination",
    "skip0_after_final_upsample",
    "augment",
    "exclude_background",
];

/// Config keys that may override a checkpoint's config at evaluation time.
const EVAL_KEYS: &[&str] = &["data_root", "resize", "samples", "seed", "missing_modality", "exclude_background", "eval_split"];

pub const MFNET_CLASSES: &[&str] =
    &["unlabeled", "car", "person", "bike", "curve", "car_stop", "guardrail", "color_cone", "bump"];
pub const PST900_CLASSES: &[&str] = &["background", "fire_extinguisher", "backpack", "hand_drill", "survivor"];

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args(keys: &[&'static str]) -> Vec<Arg> {
    keys.iter()
        .map(|&k| {
            let arg = Arg::new(k).long(flag_name(k)).value_name("VALUE").help(format!("config key {k}"));
            if BOOL_KEYS.contains(&k) {
                arg.num_args(0..=1).default_missing_value("true")
            } else {
                arg.num_args(1)
            }
        })
        .collect()
}

fn config_file_arg() -> Arg {
    Arg::new("config").long("config").value_name("FILE").help("key=value config file applied before flags")
}

pub fn command() -> Command {
    Command::new("varfuse")
        .about("Variational RGB-thermal fusion segmentation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .subcommand(
            Command::new("generate")
                .about("Write the synthetic complementary-modality dataset")
                .arg(Arg::new("data_root").long("data-root").default_value("data"))
                .arg(Arg::new("train").long("train").default_value("600"))
                .arg(Arg::new("val").long("val").default_value("100"))
                .arg(Arg::new("test").long("test").default_value("100"))
                .arg(Arg::new("classes").long("classes").default_value("4"))
                .arg(Arg::new("size").long("size").default_value("64x64").help("HxW"))
                .arg(Arg::new("seed").long("seed").default_value("0"))
                .arg(Arg::new("force").long("force").action(ArgAction::SetTrue).help("overwrite a non-empty target")),
        )
        .subcommand(
            Command::new("import")
                .about("Convert an MFNet or PST900 directory into the dataset layout")
                .arg(Arg::new("format").long("format").required(true).value_parser(["mfnet", "pst900"]))
                .arg(Arg::new("src").long("src").required(true))
                .arg(Arg::new("dst").long("dst").required(true))
                .arg(Arg::new("val_every").long("val-every").default_value("10").help("PST900: move every n-th train id to val")),
        )
        .subcommand(
            Command::new("train")
                .about("Train a network into a run directory")
                .arg(Arg::new("run_dir").long("run-dir").required(true))
                .arg(config_file_arg())
                .arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("continue from last.ckpt"))
                .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue).help("do not echo epoch lines"))
                .args(config_args(KEYS)),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint")
                .arg(Arg::new("checkpoint").long("checkpoint").required(true))
                .arg(Arg::new("out").long("out").help("output directory (default: <checkpoint dir>/eval)"))
                .args(config_args(EVAL_KEYS)),
        )
        .subcommand(
            Command::new("infer")
                .about("Segment one image pair and dump diagnostics")
                .arg(Arg::new("checkpoint").long("checkpoint").required(true))
                .arg(Arg::new("rgb").long("rgb").required(true))
                .arg(Arg::new("thermal").long("thermal").required(true))
                .arg(Arg::new("out").long("out").required(true))
                .arg(Arg::new("no_w_maps").long("no-w-maps").action(ArgAction::SetTrue))
                .args(config_args(&["resize", "samples", "seed", "missing_modality"])),
        )
        .subcommand(
            Command::new("ablate")
                .about("Run one ablation axis over several seeds")
                .arg(Arg::new("axis").long("axis").required(true).value_parser(["beta", "ns", "prior", "loss", "fusion"]))
                .arg(Arg::new("seeds").long("seeds").default_value("0,1,2"))
                .arg(Arg::new("out").long("out").required(true))
                .arg(config_file_arg())
                .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue))
                .args(config_args(KEYS)),
        )
}

fn arg<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a String> {
    m.try_get_one::<String>(name).ok().flatten()
}

fn required<'a>(m: &'a ArgMatches, name: &str) -> &'a String {
    arg(m, name).expect("clap enforces required arguments")
}

fn parsed<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> Result<T> {
    let v = required(m, name);
    v.parse().map_err(|_| Error::InvalidArgument(format!("--{} expects a number, got {v:?}", flag_name(name))))
}

fn apply_flags(cfg: &mut RunConfig, m: &ArgMatches, keys: &[&str]) -> Result<()> {
    for &k in keys {
        if let Some(v) = arg(m, k) {
            cfg.set(k, v)?;
        }
    }
    Ok(())
}

/// Builds the run config for `train` and `ablate`: `base`, then the config
/// file, then flags.
fn layered_config(base: RunConfig, m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = arg(m, "config") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    apply_flags(&mut cfg, m, KEYS)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("size must look like 64x64, got {s:?}"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `args` (including the program name) and runs the chosen command.
/// Human-readable results go to `out`.
pub fn run(args: impl IntoIterator<Item = OsString>, out: &mut dyn std::io::Write) -> Result<()> {
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return Err(Error::InvalidArgument(line));
        }
    };
    let report = match matches.subcommand() {
        Some(("generate", m)) => cmd_generate(m)?,
        Some(("import", m)) => cmd_import(m)?,
        Some(("train", m)) => cmd_train(m)?,
        Some(("eval", m)) => cmd_eval(m)?,
        Some(("infer", m)) => cmd_infer(m)?,
        Some(("ablate", m)) => cmd_ablate(m)?,
        _ => unreachable!("subcommand_required"),
    };
    out.write_all(report.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn cmd_generate(m: &ArgMatches) -> Result<String> {
    let cfg = SyntheticConfig {
        size: parse_size(required(m, "size"))?,
        train: parsed(m, "train")?,
        val: parsed(m, "val")?,
        test: parsed(m, "test")?,
        classes: parsed(m, "classes")?,
        seed: parsed(m, "seed")?,
    };
    let ds = generate_synthetic(required(m, "data_root"), &cfg, m.get_flag("force"))?;
    let total: u64 = ds.histogram.iter().sum();
    let mut s = format!(
        "dataset={}\ntrain={}\nval={}\ntest={}\n",
        ds.root.display(),
        ds.counts[0],
        ds.counts[1],
        ds.counts[2]
    );
    for (c, n) in ds.histogram.iter().enumerate() {
        let _ = writeln!(s, "class{c}.pixels={n} fraction={:.6}", *n as f64 / total.max(1) as f64);
    }
    Ok(s)
}

fn cmd_import(m: &ArgMatches) -> Result<String> {
    let (src, dst) = (PathBuf::from(required(m, "src")), PathBuf::from(required(m, "dst")));
    let n = match required(m, "format").as_str() {
        "mfnet" => data::import_mfnet(&src, &dst, MFNET_CLASSES)?,
        _ => data::import_pst900(&src, &dst, PST900_CLASSES, parsed(m, "val_every")?)?,
    };
    Ok(format!("imported={n}\ndataset={}\n", dst.display()))
}

fn cmd_train(m: &ArgMatches) -> Result<String> {
    let run_dir = PathBuf::from(required(m, "run_dir"));
    let resume = m.get_flag("resume");
    // a resumed run starts from its own config echo so only changed keys need repeating
    let echo = run_dir.join("config.txt");
    let base = if resume && echo.exists() { RunConfig::load(&echo)? } else { RunConfig::default() };
    let cfg = layered_config(base, m)?;
    let opts = TrainOptions { resume, verbose: !m.get_flag("quiet") };
    let outcome = train::train(&cfg, &run_dir, &opts)?;
    let mut s = format!("run_dir={}\nepochs={}\n", run_dir.display(), outcome.epochs.len());
    if let Some(b) = outcome.best_val_miou {
        let _ = writeln!(s, "best_val_mIoU={b:.6}");
    }
    let _ = writeln!(s, "{}_mIoU={:.6}", cfg.eval_split.name(), outcome.final_eval.miou(cfg.exclude_background));
    Ok(s)
}

fn cmd_eval(m: &ArgMatches) -> Result<String> {
    let ck_path = PathBuf::from(required(m, "checkpoint"));
    let (net, mut cfg, _) = train::load_network(&ck_path)?;
    apply_flags(&mut cfg, m, EVAL_KEYS)?;
    cfg.validate()?;
    let (spec, _) = train::open_dataset(&cfg)?;
    let opts = EvalOptions {
        samples: cfg.samples,
        seed: cfg.seed,
        missing: cfg.missing_modality,
        exclude_background: cfg.exclude_background,
    };
    let report = train::evaluate(&net, &spec, spec.ids(cfg.eval_split), &opts)?;
    let out_dir = match arg(m, "out") {
        Some(d) => PathBuf::from(d),
        None => ck_path.parent().unwrap_or(Path::new(".")).join("eval"),
    };
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    report.write(&out_dir, cfg.eval_split.name(), &spec.class_names, cfg.exclude_background)?;
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    let mut s = format!("out={}\n", out_dir.display());
    for (part, summary) in report.summaries(cfg.exclude_background) {
        let _ = writeln!(s, "{part}.mIoU={}", summary.miou.map_or("none".into(), |v| format!("{v:.6}")));
        let _ = writeln!(s, "{part}.mAcc={}", summary.macc.map_or("none".into(), |v| format!("{v:.6}")));
    }
    Ok(s)
}

fn gray_png(t: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(t[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn save_npy(t: &Tensor, path: &Path) -> Result<()> {
    let [_, c, h, w] = t.shape();
    let arr = Array3::from_shape_vec((c, h, w), t.sample(0).to_vec())
        .map_err(|e| Error::Shape(format!("npy export: {e}")))?;
    ndarray_npy::write_npy(path, &arr).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

fn cmd_infer(m: &ArgMatches) -> Result<String> {
    let (net, mut cfg, _) = train::load_network(Path::new(required(m, "checkpoint")))?;
    apply_flags(&mut cfg, m, &["resize", "samples", "seed", "missing_modality"])?;
    cfg.validate()?;
    let (mut rgb, mut thermal) = load_image_pair(Path::new(required(m, "rgb")), Path::new(required(m, "thermal")))?;
    if let Some(target) = cfg.resize {
        rgb = resize_bilinear(&rgb, target);
        thermal = resize_bilinear(&thermal, target);
    }
    match cfg.missing_modality {
        Some(Modality::Rgb) => rgb = Tensor::zeros(rgb.shape()),
        Some(Modality::Thermal) => thermal = Tensor::zeros(thermal.shape()),
        None => {}
    }
    let out_dir = PathBuf::from(required(m, "out"));
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let seg = net.infer_averaged(&rgb, &thermal, cfg.samples, cfg.seed)?;
    let labels = &seg.labels[0];
    let label_path = out_dir.join("labels.png");
    GrayImage::from_raw(labels.width as u32, labels.height as u32, labels.data.clone())
        .expect("label buffer size")
        .save(&label_path)
        .map_err(|source| Error::Image { path: label_path.clone(), source })?;
    save_npy(&seg.confidence, &out_dir.join("confidence.npy"))?;

    let mut s = format!("out={}\nlabels={}\nsamples={}\n", out_dir.display(), label_path.display(), cfg.samples);
    if !m.get_flag("no_w_maps") {
        // diagnostics come from the posterior-mean pass
        let diag = net.forward_mode(&rgb, &thermal, SampleMode::PosteriorMean)?;
        for (level, (post, factor)) in diag.posteriors.iter().zip(&diag.factors).enumerate() {
            let (h, w) = factor.values.spatial();
            gray_png(factor.values.sample(0), h, w, &out_dir.join(format!("w_level{level}.png")))?;
            save_npy(&factor.values, &out_dir.join(format!("w_level{level}.npy")))?;
            save_npy(&post.mean, &out_dir.join(format!("latent_mean_level{level}.npy")))?;
            save_npy(&post.log_variance, &out_dir.join(format!("latent_logvar_level{level}.npy")))?;
            let wv = factor.values.data();
            let _ = writeln!(
                s,
                "w_level{level}: min={:.6} max={:.6} mean={:.6}",
                wv.iter().cloned().fold(f64::INFINITY, f64::min),
                wv.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                wv.iter().sum::<f64>() / wv.len() as f64
            );
        }
    }
    Ok(s)
}

fn cmd_ablate(m: &ArgMatches) -> Result<String> {
    let cfg = layered_config(RunConfig::default(), m)?;
    let axis = AblationAxis::parse(required(m, "axis"))?;
    let seeds = required(m, "seeds")
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad seed {s:?}"))))
        .collect::<Result<Vec<u64>>>()?;
    let out_dir = PathBuf::from(required(m, "out"));
    let opts = TrainOptions { resume: false, verbose: !m.get_flag("quiet") };
    let rows = train::ablate(&cfg, axis, &seeds, &out_dir, &opts)?;
    let mut s = String::from(train::ABLATION_HEADER);
    for r in &rows {
        s.push_str(&r.csv());
    }
    Ok(s)
}

/// `error[<category>]: <message>` on one line.
pub fn error_line(e: &Error) -> String {
    format!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "))
}

