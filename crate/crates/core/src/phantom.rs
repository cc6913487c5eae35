//! Layered-ellipse brain phantoms with paired label maps, and the on-disk
//! dataset format built from them.
//!
//! A phantom stacks a skull ring, gray matter, a white-matter core, CSF
//! ventricles and hyperintense lesions. Intensities add up per ellipse
//! (4x4 supersampled for anti-aliasing) and are clipped to `[0, 1]`; each
//! pixel's label is the tissue of the topmost ellipse covering its center.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arrayfile;
use crate::error::{Error, Result};
use crate::schedule::derive_seed;
use crate::seg::LabelMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    /// Number of CSF (ventricle) ellipses.
    #[serde(default = "default_n_ellipses")]
    pub n_ellipses: usize,
    #[serde(default = "default_lesion_count")]
    pub lesion_count: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    /// Lesion semi-axis range as a fraction of the half field of view.
    #[serde(default = "default_lesion_min")]
    pub lesion_radius_min: f64,
    #[serde(default = "default_lesion_max")]
    pub lesion_radius_max: f64,
}

fn default_n_ellipses() -> usize {
    2
}
fn default_lesion_count() -> usize {
    2
}
fn default_classes() -> usize {
    2
}
fn default_lesion_min() -> f64 {
    0.08
}
fn default_lesion_max() -> f64 {
    0.18
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_ellipses: default_n_ellipses(),
            lesion_count: default_lesion_count(),
            n_classes: default_classes(),
            lesion_radius_min: default_lesion_min(),
            lesion_radius_max: default_lesion_max(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height < 16 || self.width < 16 {
            return bad(format!(
                "phantom must be at least 16x16, got {}x{}",
                self.height, self.width
            ));
        }
        if !(2..=5).contains(&self.n_classes) {
            return bad(format!(
                "phantom supports 2 to 5 classes, got {}",
                self.n_classes
            ));
        }
        if !(self.lesion_radius_min > 0.0 && self.lesion_radius_min <= self.lesion_radius_max)
            || self.lesion_radius_max > 0.3
        {
            return bad(format!(
                "lesion radius range must satisfy 0 < min <= max <= 0.3, got [{}, {}]",
                self.lesion_radius_min, self.lesion_radius_max
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tissue {
    Skull,
    GrayMatter,
    WhiteMatter,
    Csf,
    Lesion,
}

/// Class names for a given class count; index 0 is always background.
pub fn class_names(n_classes: usize) -> Result<Vec<String>> {
    let names: &[&str] = match n_classes {
        2 => &["background", "lesion"],
        3 => &["background", "brain", "lesion"],
        4 => &["background", "csf", "brain", "lesion"],
        5 => &["background", "csf", "gray_matter", "white_matter", "lesion"],
        n => {
            return Err(Error::InvalidConfig(format!(
                "phantom supports 2 to 5 classes, got {n}"
            )))
        }
    };
    Ok(names.iter().map(|s| s.to_string()).collect())
}

fn tissue_class(t: Tissue, n_classes: usize) -> u8 {
    match (t, n_classes) {
        (Tissue::Skull, _) => 0,
        (Tissue::Lesion, c) => (c - 1) as u8,
        (_, 2) => 0,
        (_, 3) => 1,
        (Tissue::Csf, 4) => 1,
        (_, 4) => 2,
        (Tissue::Csf, _) => 1,
        (Tissue::GrayMatter, _) => 2,
        (Tissue::WhiteMatter, _) => 3,
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    delta: f64,
    tissue: Tissue,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64, delta: f64, tissue: Tissue) -> Self {
        Self {
            cx,
            cy,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
            delta,
            tissue,
        }
    }

    /// Normalized radius; `< 1` inside.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.rho(x, y) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Array2<f32>,
    pub labels: LabelMap,
    pub class_names: Vec<String>,
    pub seed: u64,
}

const SUPERSAMPLE: usize = 4;

/// Deterministic in `(config, seed)`.
pub fn generate_phantom(config: &PhantomConfig, seed: u64) -> Result<Phantom> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ellipses = layout(config, &mut rng);

    let (h, w) = (config.height, config.width);
    // Normalized coordinates over [-1, 1] with y pointing down the rows.
    let coord = |i: f64, n: usize| (i / n as f64) * 2.0 - 1.0;
    let mut image = Array2::<f32>::zeros((h, w));
    let mut labels = Array2::<u8>::zeros((h, w));
    let sub = SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = coord(x as f64 + (sx as f64 + 0.5) / sub, w);
                    let py = coord(y as f64 + (sy as f64 + 0.5) / sub, h);
                    acc += ellipses
                        .iter()
                        .filter(|e| e.contains(px, py))
                        .map(|e| e.delta)
                        .sum::<f64>();
                }
            }
            image[(y, x)] = (acc / (sub * sub)).clamp(0.0, 1.0) as f32;
            let (px, py) = (coord(x as f64 + 0.5, w), coord(y as f64 + 0.5, h));
            labels[(y, x)] = ellipses
                .iter()
                .rev()
                .find(|e| e.contains(px, py))
                .map_or(0, |e| tissue_class(e.tissue, config.n_classes));
        }
    }
    Ok(Phantom {
        image,
        labels,
        class_names: class_names(config.n_classes)?,
        seed,
    })
}

/// Ellipses bottom to top.
fn layout(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let cx = rng.random_range(-0.04..0.04);
    let cy = rng.random_range(-0.04..0.04);
    let head_a = rng.random_range(0.66..0.76);
    let head_b = rng.random_range(0.82..0.92);
    let theta = rng.random_range(-0.2..0.2);

    let skull = Ellipse::new(cx, cy, head_a, head_b, theta, 0.5, Tissue::Skull);
    let (brain_a, brain_b) = (head_a * 0.86, head_b * 0.88);
    let brain = Ellipse::new(cx, cy, brain_a, brain_b, theta, -0.05, Tissue::GrayMatter);
    let wm_scale = rng.random_range(0.62..0.72);
    let wm = Ellipse::new(
        cx + rng.random_range(-0.02..0.02),
        cy + rng.random_range(-0.02..0.02),
        brain_a * wm_scale,
        brain_b * wm_scale,
        theta + rng.random_range(-0.1..0.1),
        0.25,
        Tissue::WhiteMatter,
    );
    let mut ellipses = vec![skull, brain, wm];

    let mut csf = Vec::with_capacity(config.n_ellipses);
    for i in 0..config.n_ellipses {
        let side = if i % 2 == 0 { -1.0 } else { 1.0 };
        let spread = 0.06 + 0.05 * (i / 2) as f64;
        csf.push(Ellipse::new(
            cx + side * rng.random_range(spread..spread + 0.08),
            cy + rng.random_range(-0.12..0.08),
            rng.random_range(0.04..0.08),
            rng.random_range(0.12..0.24),
            theta + side * rng.random_range(0.05..0.35),
            -0.55,
            Tissue::Csf,
        ));
    }
    ellipses.extend(csf.iter().copied());

    // Lesions go inside the brain, clear of the ventricles.
    let region = Ellipse::new(cx, cy, brain_a * 0.6, brain_b * 0.6, theta, 0.0, Tissue::Lesion);
    for _ in 0..config.lesion_count {
        let r = rng.random_range(config.lesion_radius_min..=config.lesion_radius_max);
        let aspect = rng.random_range(0.7..1.3);
        let rot = rng.random_range(0.0..std::f64::consts::PI);
        let mut center = (cx, cy);
        for _ in 0..64 {
            let px = cx + rng.random_range(-region.a..region.a);
            let py = cy + rng.random_range(-region.b..region.b);
            let clear = csf.iter().all(|c| {
                let grown = Ellipse { a: c.a + r, b: c.b + r, ..*c };
                !grown.contains(px, py)
            });
            if region.contains(px, py) && clear {
                center = (px, py);
                break;
            }
        }
        ellipses.push(Ellipse::new(
            center.0,
            center.1,
            r,
            r * aspect,
            rot,
            0.5,
            Tissue::Lesion,
        ));
    }
    ellipses
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    MinMax,
    ZScore,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    /// Paths relative to the dataset root.
    pub image: String,
    pub label: String,
    pub volume_id: u32,
    pub slice_index: u32,
}

/// Index of one dataset split. Stored as `<root>/<split>/manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub split: Split,
    pub normalization: Normalization,
    pub class_names: Vec<String>,
    pub items: Vec<ManifestItem>,
}

/// Everything `build_dataset` needs besides the item count and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub phantom: PhantomConfig,
    pub split: Split,
    #[serde(default = "default_slices_per_volume")]
    pub slices_per_volume: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

fn default_slices_per_volume() -> usize {
    10
}

impl DatasetManifest {
    pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
        root.join(split.as_str()).join("manifest.json")
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = Self::manifest_path(&self.root, self.split);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        arrayfile::write(&path, json.as_bytes())?;
        Ok(path)
    }

    /// Loads a manifest file; the dataset root is the directory above the
    /// split directory holding the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::CorruptFile {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        m.root = path
            .parent()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(m)
    }

    /// Distinct volume ids in order of first appearance.
    pub fn volume_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = Vec::new();
        for item in &self.items {
            if !ids.contains(&item.volume_id) {
                ids.push(item.volume_id);
            }
        }
        ids
    }

    /// Loads every item once and checks shapes.
    pub fn verify(&self) -> Result<()> {
        (0..self.items.len()).try_for_each(|i| load_sample(self, i).map(|_| ()))
    }
}

/// Writes `n_items` phantoms as `<root>/<split>/<volume>/<slice>.{img,lbl}.npyish`
/// with consecutive volume ids and saves the manifest.
pub fn build_dataset(
    config: &DatasetConfig,
    n_items: usize,
    seed: u64,
    out_root: &Path,
) -> Result<DatasetManifest> {
    config.phantom.validate()?;
    if n_items == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one item".into()));
    }
    if config.slices_per_volume == 0 {
        return Err(Error::InvalidConfig("slices_per_volume must be positive".into()));
    }
    let split_dir = out_root.join(config.split.as_str());
    fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let volume_id = (i / config.slices_per_volume) as u32;
        let slice_index = (i % config.slices_per_volume) as u32;
        let phantom = generate_phantom(&config.phantom, derive_seed(seed, i as u64))?;
        let stem = format!("{}/{volume_id:04}/{slice_index:03}", config.split.as_str());
        let item = ManifestItem {
            image: format!("{stem}.img.npyish"),
            label: format!("{stem}.lbl.npyish"),
            volume_id,
            slice_index,
        };
        arrayfile::write(&out_root.join(&item.image), &arrayfile::encode_f32(&phantom.image))?;
        arrayfile::write(&out_root.join(&item.label), &arrayfile::encode_u8(&phantom.labels))?;
        items.push(item);
    }
    let manifest = DatasetManifest {
        root: out_root.to_path_buf(),
        split: config.split,
        normalization: config.normalization,
        class_names: class_names(config.phantom.n_classes)?,
        items,
    };
    manifest.save()?;
    Ok(manifest)
}

/// Returns the normalized image, its labels and its volume id.
pub fn load_sample(manifest: &DatasetManifest, index: usize) -> Result<(Array2<f32>, LabelMap, u32)> {
    let item = manifest.items.get(index).ok_or(Error::IndexOutOfRange {
        index,
        len: manifest.items.len(),
    })?;
    let img_path = manifest.root.join(&item.image);
    let image = arrayfile::read_f32(&img_path)?;
    let labels = arrayfile::read_u8(&manifest.root.join(&item.label))?;
    if image.dim() != labels.dim() {
        return Err(Error::CorruptFile {
            path: img_path,
            reason: format!(
                "image shape {:?} differs from label shape {:?}",
                image.dim(),
                labels.dim()
            ),
        });
    }
    let max_label = labels.iter().copied().max().unwrap_or(0);
    if manifest.class_names.len() > 0 && max_label as usize >= manifest.class_names.len() {
        return Err(Error::LabelOutOfRange {
            label: max_label,
            classes: manifest.class_names.len(),
        });
    }
    Ok((normalize(&image, manifest.normalization), labels, item.volume_id))
}

/// Min-max maps to `[0, 1]`; z-score to zero mean and unit variance.
/// Constant images map to all zeros.
pub fn normalize(image: &Array2<f32>, mode: Normalization) -> Array2<f32> {
    match mode {
        Normalization::MinMax => {
            let lo = image.iter().copied().fold(f32::INFINITY, f32::min) as f64;
            let hi = image.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let range = hi - lo;
            if !(range > 0.0) {
                return Array2::zeros(image.dim());
            }
            image.mapv(|v| ((v as f64 - lo) / range) as f32)
        }
        Normalization::ZScore => {
            let n = image.len() as f64;
            let mean = image.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = image.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 0.0) {
                return Array2::zeros(image.dim());
            }
            image.mapv(|v| ((v as f64 - mean) / std) as f32)
        }
    }
}
