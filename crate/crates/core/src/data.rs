//! Synthetic co-registered EO/IR scenes and their on-disk form.
//!
//! Classes: 0 background, 1 warm blob (bright in IR), 2 cold box (dark in
//! IR), 3 thin pole (textured and bright in EO, nearly invisible in IR). IR
//! also carries unlabeled warm clutter, so neither modality alone is perfect;
//! in night mode the EO image is dimmed and noisier.
//!
//! On disk: `eo/<id>.ppm` (P6), `ir/<id>.pgm` (P5), `label/<id>.pgm` (P5,
//! raw class indices) and a tab-separated `manifest.tsv` with one
//! `id split eo ir label` record per line, paths relative to the manifest.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Amplitude of the EO fill texture.
    pub eo_texture: f64,
    /// IR intensity offset of warm (+) and cold (-) objects from background.
    pub ir_contrast: f64,
    pub eo_noise: f64,
    pub ir_noise: f64,
    /// Fraction of scenes rendered in night mode.
    pub night_fraction: f64,
    pub night_dim: f64,
    pub night_noise: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 32,
            num_classes: 4,
            min_shapes: 3,
            max_shapes: 6,
            eo_texture: 0.12,
            ir_contrast: 0.35,
            eo_noise: 0.03,
            ir_noise: 0.04,
            night_fraction: 0.5,
            night_dim: 0.25,
            night_noise: 0.08,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 4 {
            return Err(Error::Config(format!("the scene generator renders 2 to 4 classes, got {}", self.num_classes)));
        }
        if self.size < 8 {
            return Err(Error::Config(format!("scene size must be at least 8, got {}", self.size)));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "need 1 <= min_shapes <= max_shapes, got {}..{}",
                self.min_shapes, self.max_shapes
            )));
        }
        for (name, v) in [("night_fraction", self.night_fraction), ("train_fraction", self.train_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.night_dim > 0.0 && self.night_dim <= 1.0) {
            return Err(Error::Config(format!("night_dim must be in (0, 1], got {}", self.night_dim)));
        }
        Ok(())
    }
}

/// 8-bit raster, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Raster {
    fn new(channels: usize, h: usize, w: usize) -> Self {
        Raster { channels, h, w, data: vec![0; channels * h * w] }
    }

    /// 1 x channels x h x w tensor scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros([1, self.channels, self.h, self.w]);
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..self.channels {
                    t.set(0, c, y, x, f64::from(self.data[(y * self.w + x) * self.channels + c]) / 255.0);
                }
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    /// 1 x 3 x H x W in [0, 1]; absent when loaded IR-only.
    pub eo: Option<Tensor>,
    /// 1 x 1 x H x W in [0, 1]; absent when loaded EO-only.
    pub ir: Option<Tensor>,
    pub label: LabelMap,
    pub night: bool,
}

impl PairedSample {
    pub fn eo(&self) -> Result<&Tensor> {
        self.eo.as_ref().ok_or_else(|| Error::Invalid(format!("sample {} was loaded without its EO image", self.id)))
    }

    pub fn ir(&self) -> Result<&Tensor> {
        self.ir.as_ref().ok_or_else(|| Error::Invalid(format!("sample {} was loaded without its IR image", self.id)))
    }
}

/// Scene rasters before conversion to tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedScene {
    pub eo: Raster,
    pub ir: Raster,
    pub label: Raster,
    pub night: bool,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-image seed derived from the run seed and the image index.
pub fn scene_seed(run_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(run_seed) ^ index)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Irwin-Hall approximation; plenty for sensor noise.
    (0..4).map(|_| rng.gen::<f64>()).sum::<f64>() - 2.0
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Blob {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
    Box {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    Pole {
        x0: usize,
        x1: usize,
        y0: usize,
        y1: usize,
    },
    /// Warm IR-only clutter; label stays background.
    Clutter {
        cx: f64,
        cy: f64,
        r: f64,
    },
}

impl ShapeKind {
    fn contains(&self, x: usize, y: usize) -> bool {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            ShapeKind::Blob { cx, cy, rx, ry } => ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2) <= 1.0,
            ShapeKind::Box { x0, y0, x1, y1 } | ShapeKind::Pole { x0, x1, y0, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            ShapeKind::Clutter { cx, cy, r } => (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r,
        }
    }

    fn class(&self) -> Option<u8> {
        match self {
            ShapeKind::Blob { .. } => Some(1),
            ShapeKind::Box { .. } => Some(2),
            ShapeKind::Pole { .. } => Some(3),
            ShapeKind::Clutter { .. } => None,
        }
    }
}

fn random_shape<R: Rng>(rng: &mut R, class: u8, s: usize) -> ShapeKind {
    let sf = s as f64;
    match class {
        1 => ShapeKind::Blob {
            cx: rng.gen_range(0.15 * sf..0.85 * sf),
            cy: rng.gen_range(0.15 * sf..0.85 * sf),
            rx: rng.gen_range(0.08 * sf..0.2 * sf),
            ry: rng.gen_range(0.08 * sf..0.2 * sf),
        },
        2 => {
            let (w, h) = (rng.gen_range(s / 6..=s / 3), rng.gen_range(s / 6..=s / 3));
            let (x0, y0) = (rng.gen_range(0..s - w), rng.gen_range(0..s - h));
            ShapeKind::Box { x0, y0, x1: x0 + w, y1: y0 + h }
        }
        _ => {
            let w = rng.gen_range(2..=3);
            let h = rng.gen_range(s * 3 / 8..=s * 3 / 4);
            let (x0, y0) = (rng.gen_range(0..s - w), rng.gen_range(0..s - h));
            ShapeKind::Pole { x0, x1: x0 + w, y0, y1: y0 + h }
        }
    }
}

/// Renders scene `index` of a run. Deterministic in `(config, index)`.
pub fn render_scene(config: &SceneConfig, index: u64) -> Result<RenderedScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(config.seed, index));
    let s = config.size;
    let classes = config.num_classes as u8;
    let night = rng.gen::<f64>() < config.night_fraction;

    let count = rng.gen_range(config.min_shapes..=config.max_shapes);
    let mut shapes = Vec::with_capacity(count + 2);
    for k in 0..count {
        // cycle through the foreground classes so every image has variety
        let class = 1 + ((k as u8 + rng.gen_range(0..classes - 1)) % (classes - 1));
        shapes.push(random_shape(&mut rng, class, s));
    }
    for _ in 0..rng.gen_range(0..=2) {
        let sf = s as f64;
        shapes.push(ShapeKind::Clutter {
            cx: rng.gen_range(0.0..sf),
            cy: rng.gen_range(0.0..sf),
            r: rng.gen_range(0.05 * sf..0.12 * sf),
        });
    }

    let bg_eo = [rng.gen_range(0.35..0.6), rng.gen_range(0.4..0.6), rng.gen_range(0.3..0.5)];
    let bg_ir = rng.gen_range(0.4..0.55);
    let (tex_fx, tex_fy, tex_phase) = (rng.gen_range(0.3..1.2), rng.gen_range(0.3..1.2), rng.gen_range(0.0..6.3));
    let ir_slope = rng.gen_range(-0.1..0.1);

    let mut eo = Raster::new(3, s, s);
    let mut ir = Raster::new(1, s, s);
    let mut label = Raster::new(1, s, s);
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64, y as f64);
            let tex = (tex_fx * fx + tex_phase).sin() * (tex_fy * fy).cos();
            let mut rgb = [bg_eo[0] + 0.5 * config.eo_texture * tex, bg_eo[1] + 0.5 * config.eo_texture * tex, bg_eo[2]];
            let mut heat = bg_ir + ir_slope * (fy / s as f64 - 0.5);
            let mut class = 0u8;
            // later shapes occlude earlier ones, in EO, IR and labels alike
            for shape in &shapes {
                if !shape.contains(x, y) {
                    continue;
                }
                let stripes = ((fx + fy) * 1.3).sin();
                match shape {
                    ShapeKind::Blob { .. } => {
                        rgb = [0.75 + config.eo_texture * stripes, 0.3, 0.25];
                        heat = bg_ir + config.ir_contrast;
                    }
                    ShapeKind::Box { .. } => {
                        let check = if (x / 2 + y / 2) % 2 == 0 { 1.0 } else { -1.0 };
                        rgb = [0.2, 0.3 + config.eo_texture * check, 0.75];
                        heat = bg_ir - config.ir_contrast;
                    }
                    ShapeKind::Pole { .. } => {
                        rgb = [0.95, 0.9, 0.35 + config.eo_texture * stripes];
                        heat = bg_ir + 0.05;
                    }
                    ShapeKind::Clutter { .. } => {
                        heat = bg_ir + 0.8 * config.ir_contrast;
                        continue;
                    }
                }
                class = shape.class().expect("labelled shape");
            }
            let (dim, noise) = if night { (config.night_dim, config.night_noise) } else { (1.0, config.eo_noise) };
            for (c, &v) in rgb.iter().enumerate() {
                eo.data[(y * s + x) * 3 + c] = quantize(v * dim + noise * gauss(&mut rng));
            }
            ir.data[y * s + x] = quantize(heat + config.ir_noise * gauss(&mut rng));
            label.data[y * s + x] = class;
        }
    }
    Ok(RenderedScene { eo, ir, label, night })
}

impl RenderedScene {
    pub fn to_sample(&self, id: impl Into<String>) -> PairedSample {
        PairedSample {
            id: id.into(),
            eo: Some(self.eo.to_tensor()),
            ir: Some(self.ir.to_tensor()),
            label: LabelMap { n: 1, h: self.label.h, w: self.label.w, data: self.label.data.clone() },
            night: self.night,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub eo: PathBuf,
    pub ir: PathBuf,
    pub label: PathBuf,
    pub night: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

fn scene_id(index: usize) -> String {
    format!("scene{index:04}")
}

fn night_marker(night: bool) -> &'static str {
    if night {
        "night"
    } else {
        "day"
    }
}

/// Renders `count` scenes into `dir` and writes the manifest. The first
/// `round(count * train_fraction)` scenes form the training split.
pub fn generate_dataset(config: &SceneConfig, count: usize, dir: &Path, threads: usize) -> Result<Manifest> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    for sub in ["eo", "ir", "label"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let n_train = (count as f64 * config.train_fraction).round() as usize;
    let render = |i: usize| -> Result<ManifestRecord> {
        let scene = render_scene(config, i as u64)?;
        let id = scene_id(i);
        let rec = ManifestRecord {
            split: if i < n_train { Split::Train } else { Split::Test },
            eo: PathBuf::from("eo").join(format!("{id}.ppm")),
            ir: PathBuf::from("ir").join(format!("{id}.pgm")),
            label: PathBuf::from("label").join(format!("{id}.pgm")),
            night: scene.night,
            id,
        };
        write_pnm(&dir.join(&rec.eo), &scene.eo)?;
        write_pnm(&dir.join(&rec.ir), &scene.ir)?;
        write_pnm(&dir.join(&rec.label), &scene.label)?;
        Ok(rec)
    };
    let results: Vec<Result<ManifestRecord>> = with_threads(threads, || (0..count).into_par_iter().map(render).collect())?;
    let mut records = Vec::with_capacity(count);
    let mut text = String::new();
    for r in results {
        let rec = r?;
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            rec.id,
            rec.split,
            rec.eo.display(),
            rec.ir.display(),
            rec.label.display(),
            night_marker(rec.night)
        ));
        records.push(rec);
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(Manifest { root: dir.to_path_buf(), records })
}

/// Runs `f` on a dedicated pool of `threads` workers (1 = the calling thread only).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

impl Manifest {
    /// Parses `manifest.tsv`. Records are `id split eo ir label`; an optional
    /// sixth column (day/night) is informational.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 5 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("line {}: expected 5 tab-separated fields", lineno + 1),
                });
            }
            let split = cols[1]
                .parse()
                .map_err(|e: Error| Error::Format { path: path.to_path_buf(), reason: format!("line {}: {e}", lineno + 1) })?;
            if !seen.insert(cols[0].to_string()) {
                return Err(Error::Format { path: path.to_path_buf(), reason: format!("duplicate id {}", cols[0]) });
            }
            records.push(ManifestRecord {
                id: cols[0].to_string(),
                split,
                eo: PathBuf::from(cols[2]),
                ir: PathBuf::from(cols[3]),
                label: PathBuf::from(cols[4]),
                night: cols.get(5) == Some(&"night"),
            });
        }
        Ok(Manifest { root, records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Which images of a triple to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modalities {
    Both,
    EoOnly,
    IrOnly,
}

/// Samples of one split plus every path that was opened to load them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    pub opened: Vec<PathBuf>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn load(manifest: &Manifest, split: Split, modalities: Modalities, num_classes: usize) -> Result<Dataset> {
        let mut samples = Vec::new();
        let mut opened = Vec::new();
        for rec in manifest.split(split) {
            let paths = [
                (modalities != Modalities::IrOnly).then(|| manifest.root.join(&rec.eo)),
                (modalities != Modalities::EoOnly).then(|| manifest.root.join(&rec.ir)),
            ];
            let label_path = manifest.root.join(&rec.label);
            opened.extend(paths.iter().flatten().cloned());
            opened.push(label_path.clone());
            let mut sample = load_sample(&rec.id, paths[0].as_deref(), paths[1].as_deref(), &label_path, num_classes)?;
            sample.night = rec.night;
            samples.push(sample);
        }
        Ok(Dataset { samples, opened })
    }

    pub fn from_samples(samples: Vec<PairedSample>) -> Dataset {
        Dataset { samples, opened: Vec::new() }
    }

    /// In-memory dataset rendered directly from the generator.
    pub fn synthetic(config: &SceneConfig, range: std::ops::Range<usize>) -> Result<Dataset> {
        let samples = range.map(|i| render_scene(config, i as u64).map(|s| s.to_sample(scene_id(i)))).collect::<Result<_>>()?;
        Ok(Dataset::from_samples(samples))
    }
}

/// Reads an EO/IR/label triple, checking that all extents agree.
pub fn load_sample(id: &str, eo: Option<&Path>, ir: Option<&Path>, label: &Path, num_classes: usize) -> Result<PairedSample> {
    let lab = read_pnm(label)?;
    if lab.channels != 1 {
        return Err(Error::Format { path: label.to_path_buf(), reason: "label map must be a grayscale PGM".into() });
    }
    let labels = LabelMap::new(1, lab.h, lab.w, lab.data)?;
    labels.validate(num_classes).map_err(|e| Error::Format { path: label.to_path_buf(), reason: e.to_string() })?;
    let load = |path: Option<&Path>, channels: usize| -> Result<Option<Tensor>> {
        let Some(path) = path else { return Ok(None) };
        let r = read_pnm(path)?;
        if r.channels != channels {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected {channels} channel(s), found {}", r.channels),
            });
        }
        if (r.h, r.w) != (labels.h, labels.w) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("extent {}x{} does not match label extent {}x{}", r.w, r.h, labels.w, labels.h),
            });
        }
        Ok(Some(r.to_tensor()))
    };
    let eo = load(eo, 3)?;
    let ir = load(ir, 1)?;
    if let (Some(e), Some(i)) = (&eo, &ir) {
        if (e.shape().h, e.shape().w) != (i.shape().h, i.shape().w) {
            return Err(Error::shape(
                "sample",
                format!("EO {}x{} vs IR {}x{}", e.shape().w, e.shape().h, i.shape().w, i.shape().h),
            ));
        }
    }
    Ok(PairedSample { id: id.to_string(), eo, ir, label: labels, night: false })
}

/// Writes a sample's images under `dir` as `<id>_eo.ppm`, `<id>_ir.pgm`, `<id>_label.pgm`.
pub fn save_sample(sample: &PairedSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raster = |t: &Tensor| {
        let s = t.shape();
        let mut r = Raster::new(s.c, s.h, s.w);
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..s.c {
                    r.data[(y * s.w + x) * s.c + c] = quantize(t.at(0, c, y, x));
                }
            }
        }
        r
    };
    if let Some(eo) = &sample.eo {
        write_pnm(&dir.join(format!("{}_eo.ppm", sample.id)), &raster(eo))?;
    }
    if let Some(ir) = &sample.ir {
        write_pnm(&dir.join(format!("{}_ir.pgm", sample.id)), &raster(ir))?;
    }
    let l = &sample.label;
    let label = Raster { channels: 1, h: l.h, w: l.w, data: l.data.clone() };
    write_pnm(&dir.join(format!("{}_label.pgm", sample.id)), &label)
}

pub fn write_pnm(path: &Path, r: &Raster) -> Result<()> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format { path: path.to_path_buf(), reason: format!("cannot store {c} channels") }),
    };
    let mut bytes = format!("{magic}\n{} {}\n255\n", r.w, r.h).into_bytes();
    bytes.extend_from_slice(&r.data);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads binary PGM (P5) or PPM (P6) with maxval 255.
pub fn read_pnm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes).map_err(|reason| Error::Format { path: path.to_path_buf(), reason })
}

pub fn parse_pnm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?} (expected P5 or P6)")),
    };
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad {what} {t:?}"))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (expected 255)"));
    }
    if w == 0 || h == 0 {
        return Err(format!("empty image {w}x{h}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = channels * w * h;
    if bytes.len() < start + need {
        return Err(format!("raster truncated: need {need} bytes, found {}", bytes.len().saturating_sub(start)));
    }
    Ok(Raster { channels, h, w, data: bytes[start..start + need].to_vec() })
}

/// Pearson correlation between EO luminance and IR intensity of one scene.
pub fn eo_ir_correlation(scene: &RenderedScene) -> f64 {
    let n = scene.ir.data.len();
    let lum: Vec<f64> = (0..n)
        .map(|i| {
            let p = &scene.eo.data[i * 3..i * 3 + 3];
            0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
        })
        .collect();
    let ir: Vec<f64> = scene.ir.data.iter().map(|&v| f64::from(v)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ml, mi) = (mean(&lum), mean(&ir));
    let cov: f64 = lum.iter().zip(&ir).map(|(a, b)| (a - ml) * (b - mi)).sum();
    let vl: f64 = lum.iter().map(|a| (a - ml).powi(2)).sum();
    let vi: f64 = ir.iter().map(|b| (b - mi).powi(2)).sum();
    if vl == 0.0 || vi == 0.0 {
        0.0
    } else {
        cov / (vl * vi).sqrt()
    }
}

/// Per-class pixel counts over a set of samples (ignore-index excluded).
pub fn label_histogram(samples: &[PairedSample], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for s in samples {
        for &l in &s.label.data {
            if l != IGNORE_INDEX && usize::from(l) < num_classes {
                h[usize::from(l)] += 1;
            }
        }
    }
    h
}
