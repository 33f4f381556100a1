//! Patch stores on disk, synthetic patch generators and training-time
//! augmentation.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use argb_nn::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ArgbError, Result};
use crate::io::Image;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One line of a patch store manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRecord {
    pub file: String,
    pub source: String,
    pub x: usize,
    pub y: usize,
}

/// A directory of equally sized 8-bit PNG patches plus a JSON-lines manifest.
#[derive(Clone, Debug)]
pub struct PatchStore {
    root: PathBuf,
    records: Vec<PatchRecord>,
}

impl PatchStore {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| ArgbError::missing(&path, e.to_string()))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PatchRecord = serde_json::from_str(&line)
                .map_err(|e| ArgbError::config(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
            if !root.join(&rec.file).is_file() {
                return Err(ArgbError::missing(root.join(&rec.file), "listed in the patch manifest"));
            }
            records.push(rec);
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }

    fn create(root: &Path, patches: &[(PatchRecord, Image)]) -> Result<Self> {
        fs::create_dir_all(root)?;
        let mut manifest = fs::File::create(root.join(MANIFEST_FILE))?;
        for (rec, img) in patches {
            img.save_png(&root.join(&rec.file))?;
            writeln!(manifest, "{}", serde_json::to_string(rec)?)?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            records: patches.iter().map(|(r, _)| r.clone()).collect(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<Image> {
        let rec = self
            .records
            .get(i)
            .ok_or_else(|| ArgbError::invalid(format!("patch index {i} out of range")))?;
        Image::load(&self.root.join(&rec.file))
    }

    pub fn load_all(&self) -> Result<Vec<Image>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Top-left corners `(y, x)` of a regular crop grid.
pub fn grid_origins(height: usize, width: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    if height < size || width < size || stride == 0 {
        return Vec::new();
    }
    let ys = (0..=(height - size) / stride).map(|i| i * stride);
    ys.flat_map(|y| (0..=(width - size) / stride).map(move |i| (y, i * stride)))
        .collect()
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Sorted image files of a directory (non-recursive).
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| ArgbError::missing(dir, e.to_string()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Cuts every image in `image_dir` into `size`-square patches on a grid with
/// the given stride and writes them to `out_dir`.
pub fn extract_patches(image_dir: &Path, size: usize, stride: usize, out_dir: &Path) -> Result<PatchStore> {
    if size == 0 || stride == 0 {
        return Err(ArgbError::invalid("patch size and stride must be positive"));
    }
    let files = list_images(image_dir)?;
    if files.is_empty() {
        return Err(ArgbError::missing(image_dir, "no PNG or JPEG images found"));
    }
    let mut patches = Vec::new();
    for path in &files {
        let img = match Image::load(path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        if img.height() < size || img.width() < size {
            log::warn!(
                "skipping {}: {}x{} is smaller than the patch size {size}",
                path.display(),
                img.height(),
                img.width()
            );
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let source = path.file_name().and_then(|s| s.to_str()).unwrap_or(stem).to_string();
        for (y, x) in grid_origins(img.height(), img.width(), size, stride) {
            let rec = PatchRecord {
                file: format!("{stem}_y{y}_x{x}.png"),
                source: source.clone(),
                x,
                y,
            };
            patches.push((rec, img.crop(y, x, size, size)?));
        }
    }
    if patches.is_empty() {
        return Err(ArgbError::invalid(format!(
            "no patches of size {size} could be cut from {}",
            image_dir.display()
        )));
    }
    PatchStore::create(out_dir, &patches)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Gradients,
    Checker,
    Noise,
}

impl FromStr for SynthKind {
    type Err = ArgbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(Self::Gradients),
            "checker" => Ok(Self::Checker),
            "noise" => Ok(Self::Noise),
            other => Err(ArgbError::invalid(format!(
                "unknown synthetic kind `{other}` (expected gradients, checker or noise)"
            ))),
        }
    }
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gradients => "gradients",
            Self::Checker => "checker",
            Self::Noise => "noise",
        }
    }
}

pub const CHECKER_CELL: usize = 8;

/// One synthetic patch.
///
/// * gradients: each channel ramps linearly between two random levels along a
///   random direction;
/// * checker: two random colors alternating on `cell`-sized squares;
/// * noise: i.i.d. `N(0.5, 0.5)` per value (0.5 is the standard deviation),
///   clipped to `[0, 1]`.
pub fn synth_patch(kind: SynthKind, size: usize, cell: usize, rng: &mut impl Rng) -> Image {
    let t = match kind {
        SynthKind::Gradients => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = theta.sin_cos();
            let lo: [f64; 3] = std::array::from_fn(|_| rng.random());
            let hi: [f64; 3] = std::array::from_fn(|_| rng.random());
            let extent = (size.max(2) - 1) as f64;
            let proj = |y: usize, x: usize| dy * y as f64 / extent + dx * x as f64 / extent;
            let corners = [
                proj(0, 0),
                proj(0, size - 1),
                proj(size - 1, 0),
                proj(size - 1, size - 1),
            ];
            let min = corners.iter().copied().fold(f64::INFINITY, f64::min);
            let max = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (max - min).max(f64::EPSILON);
            Tensor::from_fn([1, 3, size, size], |_, c, y, x| {
                let s = (proj(y, x) - min) / span;
                (lo[c] + (hi[c] - lo[c]) * s) as f32
            })
        }
        SynthKind::Checker => {
            let a: [f32; 3] = std::array::from_fn(|_| rng.random());
            let b: [f32; 3] = std::array::from_fn(|_| rng.random());
            let cell = cell.max(1);
            Tensor::from_fn([1, 3, size, size], |_, c, y, x| {
                if (y / cell + x / cell) % 2 == 0 {
                    a[c]
                } else {
                    b[c]
                }
            })
        }
        SynthKind::Noise => {
            let normal = Normal::new(0.5f32, 0.5).expect("valid normal");
            let data = (0..3 * size * size)
                .map(|_| normal.sample(rng).clamp(0.0, 1.0))
                .collect();
            Tensor::new([1, 3, size, size], data)
        }
    };
    Image::new(t.map(|v| v.clamp(0.0, 1.0))).expect("synthetic values are in range")
}

/// Generates `count` synthetic patches and writes them as a patch store.
pub fn synth_patches(
    kind: SynthKind,
    count: usize,
    size: usize,
    rng: &mut impl Rng,
    out_dir: &Path,
) -> Result<PatchStore> {
    if count == 0 || size == 0 {
        return Err(ArgbError::invalid("count and size must be at least 1"));
    }
    let patches: Vec<(PatchRecord, Image)> = (0..count)
        .map(|i| {
            let rec = PatchRecord {
                file: format!("{}_{i:05}.png", kind.name()),
                source: format!("synthetic:{}", kind.name()),
                x: 0,
                y: 0,
            };
            (rec, synth_patch(kind, size, CHECKER_CELL, rng))
        })
        .collect();
    PatchStore::create(out_dir, &patches)
}

/// Random crop followed by random flips and a random quarter-turn rotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub crop_size: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_size: 256,
            hflip: true,
            vflip: true,
            rot90: true,
        }
    }
}

impl AugmentPolicy {
    pub fn crop_only(crop_size: usize) -> Self {
        Self {
            crop_size,
            hflip: false,
            vflip: false,
            rot90: false,
        }
    }
}

pub fn augment(patch: &Image, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Image> {
    let s = policy.crop_size;
    if s == 0 || patch.height() < s || patch.width() < s {
        return Err(ArgbError::invalid(format!(
            "patch {}x{} is smaller than crop size {s}",
            patch.height(),
            patch.width()
        )));
    }
    let y = rng.random_range(0..=patch.height() - s);
    let x = rng.random_range(0..=patch.width() - s);
    let mut out = patch.crop(y, x, s, s)?;
    if policy.hflip && rng.random::<bool>() {
        out = flip(&out, false);
    }
    if policy.vflip && rng.random::<bool>() {
        out = flip(&out, true);
    }
    if policy.rot90 {
        out = rot90(&out, rng.random_range(0..4));
    }
    Ok(out)
}

/// Mirror left-right, or top-bottom with `vertical`.
pub fn flip(img: &Image, vertical: bool) -> Image {
    let t = img.tensor();
    let (h, w) = (img.height(), img.width());
    let out = Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        if vertical {
            t.at(0, c, h - 1 - y, x)
        } else {
            t.at(0, c, y, w - 1 - x)
        }
    });
    Image::new(out).expect("permutation keeps range")
}

/// Counter-clockwise rotation by `quarter_turns * 90` degrees.
pub fn rot90(img: &Image, quarter_turns: usize) -> Image {
    let mut cur = img.clone();
    for _ in 0..quarter_turns % 4 {
        let t = cur.tensor();
        let (h, w) = (cur.height(), cur.width());
        let out = Tensor::from_fn([1, 3, w, h], |_, c, y, x| t.at(0, c, x, w - 1 - y));
        cur = Image::new(out).expect("permutation keeps range");
    }
    cur
}

/// In-memory training patches drawn from one or more stores.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub patches: Vec<Image>,
}

impl Dataset {
    pub fn new(patches: Vec<Image>) -> Self {
        Self { patches }
    }

    pub fn from_stores(stores: &[PatchStore]) -> Result<Self> {
        let mut patches = Vec::new();
        for s in stores {
            patches.extend(s.load_all()?);
        }
        Ok(Self { patches })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn min_side(&self) -> usize {
        self.patches
            .iter()
            .map(|p| p.height().min(p.width()))
            .min()
            .unwrap_or(0)
    }

    /// A batch `[B, 3, S, S]` of independently drawn and augmented patches.
    pub fn sample_batch(&self, batch: usize, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Tensor<f32>> {
        if self.is_empty() {
            return Err(ArgbError::invalid("dataset is empty"));
        }
        let items = (0..batch)
            .map(|_| {
                let i = rng.random_range(0..self.len());
                augment(&self.patches[i], policy, rng).map(Image::into_tensor)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&items))
    }
}
