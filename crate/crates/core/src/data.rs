//! Deterministic synthetic tasks.
//!
//! A broad "pretraining" distribution over eight parametric shape classes and
//! a narrow downstream task drawn from a class subset under a style shift
//! (rotation offset plus a palette permutation). Classification images hold a
//! single shape; segmentation images hold one to three shapes with an exact
//! binary foreground mask.
//!
//! Every sample is rendered from its own RNG stream derived from
//! `(seed, split, index)`, so generation is order independent. Pixel values
//! are rounded to `f32` precision so the on-disk `f32` arrays are lossless.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Number of shape classes the generator can draw.
pub const SHAPE_LIBRARY: usize = 8;

const SHAPE_NAMES: [&str; SHAPE_LIBRARY] = ["disc", "square", "triangle", "plus", "ring", "diamond", "cross", "bars"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub image_size: [usize; 2],
    pub channels: usize,
    /// Downstream classes (shape types present downstream).
    pub n_classes: usize,
    pub pretrain_classes: usize,
    /// 0 reproduces the pretraining process, 1 is the strongest shift.
    pub style_shift: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_pretrain_train: usize,
    pub n_pretrain_test: usize,
    /// Per-pixel Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}

impl SyntheticTaskSpec {
    pub fn reference_classification(seed: u64) -> Self {
        Self {
            kind: TaskKind::Classification,
            image_size: [32, 32],
            channels: 3,
            n_classes: 3,
            pretrain_classes: 8,
            style_shift: 0.5,
            n_train: 45,
            n_test: 300,
            n_pretrain_train: 1200,
            n_pretrain_test: 400,
            noise: default_noise(),
            seed,
        }
    }

    pub fn reference_segmentation(seed: u64) -> Self {
        Self {
            kind: TaskKind::Segmentation,
            image_size: [48, 48],
            channels: 3,
            n_classes: 3,
            pretrain_classes: 8,
            style_shift: 0.5,
            n_train: 8,
            n_test: 96,
            n_pretrain_train: 480,
            n_pretrain_test: 96,
            noise: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes > self.pretrain_classes {
            return Err(invalid(format!(
                "downstream classes ({}) exceed pretraining classes ({})",
                self.n_classes, self.pretrain_classes
            )));
        }
        if self.pretrain_classes > SHAPE_LIBRARY {
            return Err(invalid(format!("at most {SHAPE_LIBRARY} pretraining classes are available")));
        }
        if self.kind == TaskKind::Classification && self.n_classes < 2 {
            return Err(invalid("classification needs at least two downstream classes"));
        }
        if self.n_classes == 0 || self.n_train == 0 || self.n_pretrain_train == 0 {
            return Err(invalid("class and sample counts must be positive"));
        }
        if self.channels != 3 {
            return Err(invalid("only 3-channel images are generated"));
        }
        if self.image_size.iter().any(|&s| s < 8) {
            return Err(invalid("images must be at least 8x8"));
        }
        if !(0.0..=1.0).contains(&self.style_shift) || !(0.0..=1.0).contains(&self.noise) {
            return Err(invalid("style_shift and noise must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One rasterised shape, in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub shape: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
}

impl ShapeInstance {
    /// Whether the pixel centre `(x + 0.5, y + 0.5)` lies inside the shape.
    pub fn covers_pixel(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.radius;
        let v = (-s * dx + c * dy) / self.radius;
        shape_contains(self.shape, u, v)
    }
}

fn shape_contains(shape: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match shape {
        0 => r2 <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.85,
        2 => (-0.75..=0.9).contains(&v) && u.abs() <= 0.6 * (0.9 - v),
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => (0.3025..=1.0).contains(&r2),
        5 => u.abs() + v.abs() <= 1.0,
        6 => {
            let (a, b) = ((u + v) * std::f64::consts::FRAC_1_SQRT_2, (u - v) * std::f64::consts::FRAC_1_SQRT_2);
            (a.abs() <= 0.28 && b.abs() <= 1.0) || (b.abs() <= 0.28 && a.abs() <= 1.0)
        }
        _ => u.abs().max(v.abs()) <= 0.9 && ((v + 0.9) * 2.8).floor() as i64 % 2 == 0,
    }
}

/// Labels or masks aligned with a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    /// `(N, 1, H, W)` exactly binary.
    Masks(Tensor),
}

impl Targets {
    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Masks(m) => Targets::Masks(m.select_rows(idx)),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Masks(m) => m.dim(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(N, C, H, W)` in `[0, 1]`.
    pub images: Tensor,
    pub targets: Targets,
    /// Pretraining class id of each sample (the dominant shape for
    /// segmentation).
    pub class_ids: Vec<usize>,
    /// Shapes drawn into each image.
    pub objects: Vec<Vec<ShapeInstance>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Targets) {
        (self.images.select_rows(idx), self.targets.select(idx))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: SyntheticTaskSpec,
    pub pretrain_train: Dataset,
    pub pretrain_test: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    /// Downstream label `k` is pretraining class `class_map[k]`.
    pub class_map: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Split {
    PretrainTrain = 0,
    PretrainTest = 1,
    Train = 2,
    Test = 3,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::PretrainTrain => "pretrain_train",
            Split::PretrainTest => "pretrain_test",
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    rng
}

struct Style {
    rotation: f64,
    palette_mix: f64,
}

impl Style {
    fn new(shift: f64) -> Self {
        Self { rotation: shift * std::f64::consts::FRAC_PI_4, palette_mix: shift }
    }

    /// Blend towards a channel rotation `(r, g, b) -> (b, r, g)`.
    fn color(&self, c: [f64; 3]) -> [f64; 3] {
        let p = [c[2], c[0], c[1]];
        let m = self.palette_mix;
        std::array::from_fn(|k| (1.0 - m) * c[k] + m * p[k])
    }
}

fn random_color<R: Rng>(rng: &mut R, bright: bool) -> [f64; 3] {
    let (lo, hi) = if bright { (0.45, 1.0) } else { (0.0, 0.45) };
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn draw_instance<R: Rng>(rng: &mut R, shape: usize, size: [usize; 2], r_range: (f64, f64), style: &Style) -> ShapeInstance {
    let [h, w] = size;
    let radius = rng.gen_range(r_range.0..r_range.1);
    let margin = radius * 0.9;
    let cx = rng.gen_range(margin..(w as f64 - margin).max(margin + 1e-6));
    let cy = rng.gen_range(margin..(h as f64 - margin).max(margin + 1e-6));
    let angle = rng.gen_range(-0.3..0.3) + style.rotation;
    ShapeInstance { shape, cx, cy, radius, angle }
}

struct Rendered {
    image: Vec<f64>,
    mask: Vec<f64>,
    objects: Vec<ShapeInstance>,
}

fn render<R: Rng>(rng: &mut R, spec: &SyntheticTaskSpec, shapes: &[usize], style: &Style) -> Rendered {
    let [h, w] = spec.image_size;
    let min_side = h.min(w) as f64;
    let r_range = match spec.kind {
        TaskKind::Classification => (0.22 * min_side, 0.36 * min_side),
        TaskKind::Segmentation => (0.12 * min_side, 0.22 * min_side),
    };
    let bg = style.color(random_color(rng, false));
    // low-frequency background shading
    let gx: f64 = rng.gen_range(-0.15..0.15);
    let gy: f64 = rng.gen_range(-0.15..0.15);
    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let shade = gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
            for c in 0..3 {
                image[(c * h + y) * w + x] = bg[c] + shade;
            }
        }
    }
    // small distractor blobs that are never part of the foreground
    let n_clutter = rng.gen_range(0..3);
    for _ in 0..n_clutter {
        let bright = rng.gen_bool(0.5);
        let col = style.color(random_color(rng, bright));
        let (bw, bh) = (rng.gen_range(2..5), rng.gen_range(2..5));
        let (x0, y0) = (rng.gen_range(0..w - bw), rng.gen_range(0..h - bh));
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                for c in 0..3 {
                    image[(c * h + y) * w + x] = col[c];
                }
            }
        }
    }
    let mut mask = vec![0.0; h * w];
    let mut objects = Vec::with_capacity(shapes.len());
    for &shape in shapes {
        let inst = draw_instance(rng, shape, spec.image_size, r_range, style);
        let fg = style.color(random_color(rng, true));
        for y in 0..h {
            for x in 0..w {
                if inst.covers_pixel(x, y) {
                    mask[y * w + x] = 1.0;
                    for c in 0..3 {
                        image[(c * h + y) * w + x] = fg[c];
                    }
                }
            }
        }
        objects.push(inst);
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("noise std is finite");
        for v in image.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in image.iter_mut() {
        *v = (v.clamp(0.0, 1.0) as f32) as f64;
    }
    Rendered { image, mask, objects }
}

fn generate_split(spec: &SyntheticTaskSpec, split: Split, n: usize, classes: &[usize], style: &Style) -> Dataset {
    let [h, w] = spec.image_size;
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut class_ids = Vec::with_capacity(n);
    let mut objects = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(spec.seed, split, i);
        // balanced classes for classification; a random dominant shape otherwise
        let label = match spec.kind {
            TaskKind::Classification => i % classes.len(),
            TaskKind::Segmentation => rng.gen_range(0..classes.len()),
        };
        let mut shapes = vec![classes[label]];
        if spec.kind == TaskKind::Segmentation {
            for _ in 0..rng.gen_range(0..3) {
                shapes.push(classes[rng.gen_range(0..classes.len())]);
            }
        }
        let r = render(&mut rng, spec, &shapes, style);
        images.extend_from_slice(&r.image);
        masks.extend_from_slice(&r.mask);
        labels.push(label);
        class_ids.push(classes[label]);
        objects.push(r.objects);
    }
    let images = Tensor::from_parts(vec![n, 3, h, w], images);
    let targets = match spec.kind {
        TaskKind::Classification => Targets::Labels(labels),
        TaskKind::Segmentation => Targets::Masks(Tensor::from_parts(vec![n, 1, h, w], masks)),
    };
    Dataset { images, targets, class_ids, objects }
}

/// Generate pretraining and downstream splits.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c1a5);
    let mut pool: Vec<usize> = (0..spec.pretrain_classes).collect();
    pool.shuffle(&mut rng);
    let mut class_map: Vec<usize> = pool[..spec.n_classes].to_vec();
    class_map.sort_unstable();
    let all: Vec<usize> = (0..spec.pretrain_classes).collect();
    let base = Style::new(0.0);
    let shifted = Style::new(spec.style_shift);
    Ok(TaskData {
        spec: spec.clone(),
        pretrain_train: generate_split(spec, Split::PretrainTrain, spec.n_pretrain_train, &all, &base),
        pretrain_test: generate_split(spec, Split::PretrainTest, spec.n_pretrain_test, &all, &base),
        train: generate_split(spec, Split::Train, spec.n_train, &class_map, &shifted),
        test: generate_split(spec, Split::Test, spec.n_test, &class_map, &shifted),
        class_map,
    })
}

pub fn shape_name(class_id: usize) -> &'static str {
    SHAPE_NAMES.get(class_id).copied().unwrap_or("unknown")
}

// ---------------------------------------------------------------------------
// On-disk layout

const ARRAY_MAGIC: &[u8; 4] = b"RPAR";
const ARRAY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: SyntheticTaskSpec,
    /// `downstream label -> (pretraining class id, shape name)`
    pub class_map: Vec<(usize, String)>,
    pub files: BTreeMap<String, FileEntry>,
}

fn encode_array(shape: &[usize], dtype: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * shape.len() + payload.len());
    out.extend_from_slice(ARRAY_MAGIC);
    out.extend_from_slice(&ARRAY_VERSION.to_le_bytes());
    out.push(dtype);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn f32_array(t: &Tensor) -> Vec<u8> {
    let payload: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    encode_array(t.shape(), 0, &payload)
}

fn u32_array(v: &[usize]) -> Vec<u8> {
    let payload: Vec<u8> = v.iter().flat_map(|&x| (x as u32).to_le_bytes()).collect();
    encode_array(&[v.len()], 1, &payload)
}

/// Decoded array file: shape plus values widened to `f64`.
pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
    if bytes.len() < 13 || &bytes[..4] != ARRAY_MAGIC {
        return Err(bad("missing array header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ARRAY_VERSION {
        return Err(bad("unsupported array version"));
    }
    let dtype = bytes[8];
    let ndim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let mut off = 13;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = bytes.get(off..off + 8).ok_or_else(|| bad("truncated shape"))?;
        shape.push(u64::from_le_bytes(d.try_into().unwrap()) as usize);
        off += 8;
    }
    let n: usize = shape.iter().product();
    let body = &bytes[off..];
    if body.len() != 4 * n {
        return Err(bad("payload length does not match shape"));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| {
            let b: [u8; 4] = c.try_into().unwrap();
            match dtype {
                0 => f32::from_le_bytes(b) as f64,
                _ => u32::from_le_bytes(b) as f64,
            }
        })
        .collect();
    Ok((shape, values))
}

fn split_files(d: &Dataset, name: &str) -> Vec<(String, Vec<u8>, Vec<usize>, &'static str)> {
    let mut files = vec![(format!("{name}.images.bin"), f32_array(&d.images), d.images.shape().to_vec(), "f32")];
    match &d.targets {
        Targets::Labels(l) => files.push((format!("{name}.labels.bin"), u32_array(l), vec![l.len()], "u32")),
        Targets::Masks(m) => files.push((format!("{name}.masks.bin"), f32_array(m), m.shape().to_vec(), "f32")),
    }
    files.push((format!("{name}.class_ids.bin"), u32_array(&d.class_ids), vec![d.class_ids.len()], "u32"));
    files
}

fn all_files(task: &TaskData) -> Vec<(String, Vec<u8>, Vec<usize>, &'static str)> {
    let mut out = Vec::new();
    for (split, d) in [
        (Split::PretrainTrain, &task.pretrain_train),
        (Split::PretrainTest, &task.pretrain_test),
        (Split::Train, &task.train),
        (Split::Test, &task.test),
    ] {
        out.extend(split_files(d, split.name()));
    }
    out
}

fn manifest_for(task: &TaskData) -> (DatasetManifest, Vec<(String, Vec<u8>)>) {
    let mut files = BTreeMap::new();
    let mut blobs = Vec::new();
    for (name, bytes, shape, dtype) in all_files(task) {
        let sha256 = hex::encode(Sha256::digest(&bytes));
        files.insert(name.clone(), FileEntry { sha256, shape, dtype: dtype.to_string() });
        blobs.push((name, bytes));
    }
    let manifest = DatasetManifest {
        format_version: ARRAY_VERSION,
        spec: task.spec.clone(),
        class_map: task.class_map.iter().map(|&c| (c, shape_name(c).to_string())).collect(),
        files,
    };
    (manifest, blobs)
}

/// Write `manifest.json` and one array file per split component.
pub fn save_task(task: &TaskData, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let (manifest, blobs) = manifest_for(task);
    for (name, bytes) in blobs {
        fs::File::create(dir.join(name))?.write_all(&bytes)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Regenerate from the stored spec and check every file hash, both against
/// the manifest and against the bytes on disk.
pub fn verify_task_dir(dir: &Path) -> Result<()> {
    let manifest = load_manifest(dir)?;
    let task = generate_task(&manifest.spec)?;
    let (fresh, _) = manifest_for(&task);
    if fresh.files != manifest.files {
        return Err(Error::Format { path: dir.join("manifest.json"), msg: "regenerated hashes differ".into() });
    }
    for (name, entry) in &manifest.files {
        let bytes = fs::read(dir.join(name))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Format { path: dir.join(name), msg: "file hash differs from manifest".into() });
        }
    }
    Ok(())
}
