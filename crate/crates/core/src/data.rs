//! Dataset layout, loading, augmentation and the synthetic complementary-modality generator.
//!
//! On-disk layout (shared by real datasets after import and by the generator):
//!
//! ```text
//! root/classes.txt            one class name per line, line index = class id
//! root/{train,val,test}.txt   one sample id per line
//! root/illumination.txt       "<id> day|night" per line
//! root/rgb/<id>.png           8-bit RGB
//! root/thermal/<id>.png       8- or 16-bit grayscale
//! root/labels/<id>.png        8-bit grayscale class ids
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} map", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    pub fn check_range(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= classes) {
            Some(&v) => Err(Error::LabelOutOfRange { label: v as usize, classes }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Illumination {
    Day = 0,
    Night = 1,
}

impl Illumination {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(Self::Day),
            "night" => Ok(Self::Night),
            other => Err(Error::Data(format!("unknown illumination tag {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Day => "day",
            Self::Night => "night",
        }
    }
}

/// One aligned RGB/thermal/label triple. Images are `1 x C x H x W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub rgb: Tensor,
    pub thermal: Tensor,
    pub label: LabelMap,
    pub illumination: Illumination,
    pub id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub illumination: BTreeMap<String, Illumination>,
    /// Target `(height, width)`; `None` keeps the native resolution.
    pub resize: Option<(usize, usize)>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

impl DatasetSpec {
    /// Reads manifests under `root`. Ids containing `flip` (pre-flipped copies
    /// shipped with some datasets) are dropped unless `include_flipped`.
    pub fn open(root: impl AsRef<Path>, resize: Option<(usize, usize)>, include_flipped: bool) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let class_names = read_lines(&root.join("classes.txt"))?;
        if class_names.is_empty() {
            return Err(Error::Data("classes.txt lists no classes".into()));
        }
        let keep = |ids: Vec<String>| -> Vec<String> {
            ids.into_iter().filter(|id| include_flipped || !id.contains("flip")).collect()
        };
        let train = keep(read_lines(&root.join("train.txt"))?);
        let val = keep(read_lines(&root.join("val.txt"))?);
        let test = keep(read_lines(&root.join("test.txt"))?);
        let mut illumination = BTreeMap::new();
        for line in read_lines(&root.join("illumination.txt"))? {
            let (id, tag) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Data(format!("malformed illumination line {line:?}")))?;
            illumination.insert(id.to_string(), Illumination::parse(tag.trim())?);
        }
        let spec = Self { root, class_names, train, val, test, illumination, resize };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for id in self.ids(split) {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Data(format!("id {id} appears in more than one split")));
                }
                if !self.illumination.contains_key(id) {
                    return Err(Error::Data(format!("id {id} has no illumination tag")));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn path(&self, kind: &str, id: &str) -> PathBuf {
        self.root.join(kind).join(format!("{id}.png"))
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::Data(format!("missing file {}", path.display())));
    }
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn gray_plane(img: &DynamicImage) -> (usize, usize, Vec<f64>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma16(buf) => buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        DynamicImage::ImageLuma8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        other => other.to_luma8().pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
    };
    (h, w, data)
}

/// Reads an RGB PNG as `[1,3,H,W]` and an 8- or 16-bit thermal PNG as
/// `[1,1,H,W]`, both scaled to [0, 1].
pub fn load_image_pair(rgb_path: &Path, thermal_path: &Path) -> Result<(Tensor, Tensor)> {
    let rgb_img = open_image(rgb_path)?.to_rgb8();
    let (w, h) = (rgb_img.width() as usize, rgb_img.height() as usize);
    let rgb = Tensor::from_fn([1, 3, h, w], |_, c, y, x| rgb_img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0);
    let (th, tw, tdata) = gray_plane(&open_image(thermal_path)?);
    if (th, tw) != (h, w) {
        return Err(Error::Data(format!(
            "{} is {th}x{tw} but {} is {h}x{w}",
            thermal_path.display(),
            rgb_path.display()
        )));
    }
    Ok((rgb, Tensor::from_vec([1, 1, h, w], tdata)?))
}

pub fn load_sample(spec: &DatasetSpec, id: &str) -> Result<SamplePair> {
    let illumination = *spec
        .illumination
        .get(id)
        .ok_or_else(|| Error::Data(format!("id {id} has no illumination tag")))?;
    let (rgb, thermal) = load_image_pair(&spec.path("rgb", id), &spec.path("thermal", id))?;
    let (h, w) = rgb.spatial();
    let label_img = open_image(&spec.path("labels", id))?.to_luma8();
    if (label_img.height() as usize, label_img.width() as usize) != (h, w) {
        return Err(Error::Data(format!("sample {id}: label size differs from the images")));
    }
    let label = LabelMap::new(h, w, label_img.into_raw())?;
    label.check_range(spec.classes())?;
    let mut sample = SamplePair { rgb, thermal, label, illumination, id: id.to_string() };
    if let Some(target) = spec.resize {
        if target != (h, w) {
            sample = resize_sample(&sample, target);
        }
    }
    Ok(sample)
}

/// Bilinear resampling (half-pixel centres) of every plane.
pub fn resize_bilinear(t: &Tensor, (oh, ow): (usize, usize)) -> Tensor {
    let [n, c, h, w] = t.shape();
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let coord = |dst: usize, scale: f64, size: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(size - 1);
        (lo, hi, src - lo as f64)
    };
    let ys: Vec<_> = (0..oh).map(|y| coord(y, sy, h)).collect();
    let xs: Vec<_> = (0..ow).map(|x| coord(x, sx, w)).collect();
    Tensor::from_fn([n, c, oh, ow], |b, ch, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = t.at(b, ch, y0, x0) * (1.0 - fx) + t.at(b, ch, y0, x1) * fx;
        let bottom = t.at(b, ch, y1, x0) * (1.0 - fx) + t.at(b, ch, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resampling with `src = floor(dst * scale)`.
pub fn resize_labels_nearest(labels: &LabelMap, (oh, ow): (usize, usize)) -> LabelMap {
    let (sy, sx) = (labels.height as f64 / oh as f64, labels.width as f64 / ow as f64);
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let src_y = ((y as f64 * sy) as usize).min(labels.height - 1);
        for x in 0..ow {
            let src_x = ((x as f64 * sx) as usize).min(labels.width - 1);
            data.push(labels.get(src_y, src_x));
        }
    }
    LabelMap { height: oh, width: ow, data }
}

fn resize_sample(s: &SamplePair, target: (usize, usize)) -> SamplePair {
    SamplePair {
        rgb: resize_bilinear(&s.rgb, target),
        thermal: resize_bilinear(&s.thermal, target),
        label: resize_labels_nearest(&s.label, target),
        illumination: s.illumination,
        id: s.id.clone(),
    }
}

/// Mirror left-right; applied identically to all three arrays.
pub fn hflip(s: &SamplePair) -> SamplePair {
    let flip = |t: &Tensor| Tensor::from_fn(t.shape(), |n, c, y, x| t.at(n, c, y, t.w() - 1 - x));
    let l = &s.label;
    let mut data = Vec::with_capacity(l.data.len());
    for y in 0..l.height {
        for x in 0..l.width {
            data.push(l.get(y, l.width - 1 - x));
        }
    }
    SamplePair {
        rgb: flip(&s.rgb),
        thermal: flip(&s.thermal),
        label: LabelMap { height: l.height, width: l.width, data },
        illumination: s.illumination,
        id: s.id.clone(),
    }
}

/// Random crop window `(top, left, height, width)` covering `fraction` of each side.
pub fn crop_window(height: usize, width: usize, fraction: f64, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let ch = ((height as f64 * fraction).round() as usize).clamp(1, height);
    let cw = ((width as f64 * fraction).round() as usize).clamp(1, width);
    let top = rng.gen_range(0..=height - ch);
    let left = rng.gen_range(0..=width - cw);
    (top, left, ch, cw)
}

fn crop(s: &SamplePair, (top, left, ch, cw): (usize, usize, usize, usize)) -> SamplePair {
    let cut = |t: &Tensor| Tensor::from_fn([t.n(), t.c(), ch, cw], |n, c, y, x| t.at(n, c, top + y, left + x));
    let mut data = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        for x in 0..cw {
            data.push(s.label.get(top + y, left + x));
        }
    }
    SamplePair {
        rgb: cut(&s.rgb),
        thermal: cut(&s.thermal),
        label: LabelMap { height: ch, width: cw, data },
        illumination: s.illumination,
        id: s.id.clone(),
    }
}

/// Random horizontal flip (p = 0.5) then a random crop of `crop_fraction`
/// resized back to the original size. Fully determined by `seed`.
pub fn augment(s: &SamplePair, seed: u64, crop_fraction: f64) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flipped = if rng.gen_bool(0.5) { hflip(s) } else { s.clone() };
    if crop_fraction >= 1.0 {
        return flipped;
    }
    let (h, w) = flipped.rgb.spatial();
    let window = crop_window(h, w, crop_fraction, &mut rng);
    resize_sample(&crop(&flipped, window), (h, w))
}

/// Label counts per class over the given ids.
pub fn label_histogram(spec: &DatasetSpec, ids: &[String]) -> Result<Vec<u64>> {
    let mut hist = vec![0u64; spec.classes()];
    for id in ids {
        let path = spec.path("labels", id);
        let labels = open_image(&path)?.to_luma8();
        for p in labels.pixels() {
            let v = p.0[0] as usize;
            if v >= hist.len() {
                return Err(Error::LabelOutOfRange { label: v, classes: hist.len() });
            }
            hist[v] += 1;
        }
    }
    Ok(hist)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub size: (usize, usize),
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { size: (64, 64), train: 600, val: 100, test: 100, classes: 4, seed: 0 }
    }
}

/// In-memory synthetic sample, quantized exactly as it is written to disk.
#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub rgb: RgbImage,
    pub thermal: GrayImage,
    pub label: GrayImage,
    pub illumination: Illumination,
}

fn class_name(c: usize) -> String {
    match c {
        0 => "background".into(),
        c if c % 2 == 1 => format!("thermal_{c}"),
        c => format!("rgb_{c}"),
    }
}

/// Thermal intensity of an odd (thermal-only) class.
fn thermal_level(c: usize, classes: usize) -> f64 {
    let odd: Vec<usize> = (1..classes).filter(|c| c % 2 == 1).collect();
    let rank = odd.iter().position(|&o| o == c).unwrap_or(0);
    0.95 - 0.5 * rank as f64 / odd.len().max(1) as f64
}

/// Colour of an even (rgb-only) class.
fn rgb_colour(c: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.95, 0.15, 0.1],
        [0.1, 0.85, 0.2],
        [0.15, 0.2, 0.95],
        [0.95, 0.9, 0.1],
        [0.9, 0.1, 0.9],
        [0.1, 0.9, 0.9],
    ];
    PALETTE[(c / 2 - 1) % PALETTE.len()]
}

fn inside(shape: usize, cy: f64, cx: f64, r: f64, y: f64, x: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    match shape % 3 {
        0 => dy * dy + dx * dx <= r * r,
        1 => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
        _ => dy.abs() + dx.abs() <= r * 1.1,
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders one sample. Odd classes appear only in the thermal channel (the
/// rgb image keeps its background texture there); even non-zero classes appear
/// only in rgb (the thermal image stays flat). Night images get rgb contrast
/// reduced five-fold plus sensor noise.
pub fn render_synthetic(size: (usize, usize), classes: usize, rng: &mut impl Rng) -> SyntheticImage {
    let (h, w) = size;
    let illumination = if rng.gen_bool(0.5) { Illumination::Day } else { Illumination::Night };
    let noise = Normal::new(0.0, 0.02).expect("valid normal");
    let night_noise = Normal::new(0.0, 0.03).expect("valid normal");

    let base: [f64; 3] = [rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6)];
    // 6.28 rather than TAU: the generated bytes are part of the dataset contract
    #[allow(clippy::approx_constant)]
    let (fy, fx, phase) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.0..6.28));
    let thermal_bg = rng.gen_range(0.15..0.3);

    let mut label = vec![0u8; h * w];
    let count = rng.gen_range(2..=4);
    let scale = h.min(w) as f64 / 64.0;
    for _ in 0..count {
        let c = rng.gen_range(1..classes);
        let r = rng.gen_range(5.0..10.0) * scale;
        let cy = rng.gen_range(r..h as f64 - r);
        let cx = rng.gen_range(r..w as f64 - r);
        for y in 0..h {
            for x in 0..w {
                if inside(c, cy, cx, r, y as f64, x as f64) {
                    label[y * w + x] = c as u8;
                }
            }
        }
    }

    let mut rgb = RgbImage::new(w as u32, h as u32);
    let mut thermal = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let c = label[y * w + x] as usize;
            let texture = 0.15 * ((y as f64 * fy + x as f64 * fx + phase).sin());
            let mut px = [0.0; 3];
            for ch in 0..3 {
                px[ch] = base[ch] + texture * (1.0 + ch as f64 * 0.3) + noise.sample(rng);
            }
            if c != 0 && c.is_multiple_of(2) {
                let col = rgb_colour(c);
                for ch in 0..3 {
                    px[ch] = col[ch] + noise.sample(rng);
                }
            }
            if illumination == Illumination::Night {
                for v in &mut px {
                    *v = *v / 5.0 + night_noise.sample(rng);
                }
            }
            rgb.put_pixel(x as u32, y as u32, Rgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]));
            let t = if c % 2 == 1 { thermal_level(c, classes) } else { thermal_bg } + noise.sample(rng);
            thermal.put_pixel(x as u32, y as u32, Luma([to_u8(t)]));
        }
    }
    let label = ImageBuffer::from_raw(w as u32, h as u32, label).expect("label buffer size");
    SyntheticImage { rgb, thermal, label, illumination }
}

pub fn synthetic_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Summary of a generated dataset.
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub root: PathBuf,
    pub histogram: Vec<u64>,
    pub counts: [usize; 3],
}

/// Writes a synthetic dataset to `root`, which must be empty or absent unless
/// `force` is set.
pub fn generate_synthetic(root: impl AsRef<Path>, cfg: &SyntheticConfig, force: bool) -> Result<GeneratedDataset> {
    let root = root.as_ref();
    if cfg.classes < 3 {
        return Err(Error::Config(format!("synthetic data needs at least 3 classes, got {}", cfg.classes)));
    }
    if cfg.classes > 255 {
        return Err(Error::Config("at most 255 classes fit in 8-bit label images".into()));
    }
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Data(format!("{} exists and is not empty (use --force)", root.display())));
        }
    }
    for dir in ["rgb", "thermal", "labels"] {
        fs::create_dir_all(root.join(dir)).map_err(|e| Error::io(root.join(dir), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.train + cfg.val + cfg.test;
    let mut histogram = vec![0u64; cfg.classes];
    let mut illum_lines = String::new();
    for i in 0..total {
        let id = synthetic_id(i);
        let img = render_synthetic(cfg.size, cfg.classes, &mut rng);
        for p in img.label.pixels() {
            histogram[p.0[0] as usize] += 1;
        }
        let save = |kind: &str, res: std::result::Result<(), image::ImageError>| {
            res.map_err(|source| Error::Image { path: root.join(kind).join(format!("{id}.png")), source })
        };
        save("rgb", img.rgb.save(root.join("rgb").join(format!("{id}.png"))))?;
        save("thermal", img.thermal.save(root.join("thermal").join(format!("{id}.png"))))?;
        save("labels", img.label.save(root.join("labels").join(format!("{id}.png"))))?;
        illum_lines.push_str(&format!("{id} {}\n", img.illumination.name()));
    }
    let write = |name: &str, text: String| {
        let p = root.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    let split_text = |range: std::ops::Range<usize>| range.map(|i| synthetic_id(i) + "\n").collect::<String>();
    write("train.txt", split_text(0..cfg.train))?;
    write("val.txt", split_text(cfg.train..cfg.train + cfg.val))?;
    write("test.txt", split_text(cfg.train + cfg.val..total))?;
    write("illumination.txt", illum_lines)?;
    write("classes.txt", (0..cfg.classes).map(|c| class_name(c) + "\n").collect())?;
    Ok(GeneratedDataset { root: root.to_path_buf(), histogram, counts: [cfg.train, cfg.val, cfg.test] })
}

/// Re-renders synthetic sample `index` in memory, matching what
/// [`generate_synthetic`] wrote for the same config.
pub fn regenerate_synthetic(cfg: &SyntheticConfig, index: usize) -> SyntheticImage {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut img = render_synthetic(cfg.size, cfg.classes, &mut rng);
    for _ in 0..index {
        img = render_synthetic(cfg.size, cfg.classes, &mut rng);
    }
    img
}

/// Maps an MFNet-style directory (`images/<id>.png` as RGBA with thermal in
/// the alpha channel, `labels/<id>.png`, `{train,val,test}.txt`, ids ending in
/// `D`/`N` for day/night) into the canonical layout.
pub fn import_mfnet(src: &Path, dst: &Path, class_names: &[&str]) -> Result<usize> {
    for dir in ["rgb", "thermal", "labels"] {
        fs::create_dir_all(dst.join(dir)).map_err(|e| Error::io(dst.join(dir), e))?;
    }
    let mut illum = String::new();
    let mut n = 0;
    for split in Split::ALL {
        let ids = read_lines(&src.join(format!("{}.txt", split.name())))?;
        for id in &ids {
            let img = open_image(&src.join("images").join(format!("{id}.png")))?.to_rgba8();
            let (w, h) = img.dimensions();
            let rgb = RgbImage::from_fn(w, h, |x, y| {
                let p = img.get_pixel(x, y).0;
                Rgb([p[0], p[1], p[2]])
            });
            let thermal = GrayImage::from_fn(w, h, |x, y| Luma([img.get_pixel(x, y).0[3]]));
            let save_err = |kind: &str| {
                let path = dst.join(kind).join(format!("{id}.png"));
                move |source| Error::Image { path, source }
            };
            rgb.save(dst.join("rgb").join(format!("{id}.png"))).map_err(save_err("rgb"))?;
            thermal.save(dst.join("thermal").join(format!("{id}.png"))).map_err(save_err("thermal"))?;
            let from = src.join("labels").join(format!("{id}.png"));
            fs::copy(&from, dst.join("labels").join(format!("{id}.png"))).map_err(|e| Error::io(&from, e))?;
            let tag = if id.ends_with('N') { "night" } else { "day" };
            illum.push_str(&format!("{id} {tag}\n"));
            n += 1;
        }
        let manifest = dst.join(format!("{}.txt", split.name()));
        fs::write(&manifest, ids.join("\n") + "\n").map_err(|e| Error::io(&manifest, e))?;
    }
    fs::write(dst.join("illumination.txt"), illum).map_err(|e| Error::io(dst.join("illumination.txt"), e))?;
    let classes = class_names.join("\n") + "\n";
    fs::write(dst.join("classes.txt"), classes).map_err(|e| Error::io(dst.join("classes.txt"), e))?;
    Ok(n)
}

/// Maps a PST900-style directory (`{train,test}/{rgb,thermal,labels}/<id>.png`)
/// into the canonical layout. All images are tagged night; `val_every` moves
/// every n-th training id to the validation split (0 = none).
pub fn import_pst900(src: &Path, dst: &Path, class_names: &[&str], val_every: usize) -> Result<usize> {
    for dir in ["rgb", "thermal", "labels"] {
        fs::create_dir_all(dst.join(dir)).map_err(|e| Error::io(dst.join(dir), e))?;
    }
    let mut illum = String::new();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for part in ["train", "test"] {
        let rgb_dir = src.join(part).join("rgb");
        let mut names: Vec<String> = fs::read_dir(&rgb_dir)
            .map_err(|e| Error::io(&rgb_dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.path().file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        names.sort();
        for (i, name) in names.iter().enumerate() {
            let id = format!("{part}_{name}");
            for (kind, sub) in [("rgb", "rgb"), ("thermal", "thermal"), ("labels", "labels")] {
                let from = src.join(part).join(sub).join(format!("{name}.png"));
                fs::copy(&from, dst.join(kind).join(format!("{id}.png"))).map_err(|e| Error::io(&from, e))?;
            }
            illum.push_str(&format!("{id} night\n"));
            match part {
                "test" => test.push(id),
                _ if val_every > 0 && i % val_every == val_every - 1 => val.push(id),
                _ => train.push(id),
            }
        }
    }
    let n = train.len() + val.len() + test.len();
    for (name, ids) in [("train.txt", train), ("val.txt", val), ("test.txt", test)] {
        fs::write(dst.join(name), ids.join("\n") + "\n").map_err(|e| Error::io(dst.join(name), e))?;
    }
    fs::write(dst.join("illumination.txt"), illum).map_err(|e| Error::io(dst.join("illumination.txt"), e))?;
    fs::write(dst.join("classes.txt"), class_names.join("\n") + "\n").map_err(|e| Error::io(dst.join("classes.txt"), e))?;
    Ok(n)
}
