//! Directory-tree ingestion for industrial anomaly datasets.
//!
//! Supported layouts:
//!
//! * `mvtec`: `<cat>/train/good/*` and `<cat>/test/<defect|good>/*`.
//! * `visa`: `split_csv/1cls.csv` (columns `object,split,label,image,...`,
//!   label `normal`/`anomaly`) when present, otherwise
//!   `<cat>/Data/Images/{Normal,Anomaly}/*`.
//! * `flat`: `<cat>/good/*` and `<cat>/<defect>/*`.
//!
//! In every layout a sample is normal (label 0) exactly when its parent
//! directory is a `good`/`Normal` directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Mvtec,
    Visa,
    Flat,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec" => Ok(Layout::Mvtec),
            "visa" => Ok(Layout::Visa),
            "flat" => Ok(Layout::Flat),
            other => Err(Error::Config(format!("unknown dataset layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Unassigned,
    Train,
    Eval,
}

/// One image in a manifest; pixels are loaded on demand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    /// Category-relative POSIX path, e.g. `test/crack/000.png`.
    pub id: String,
    pub category: String,
    pub path: PathBuf,
    pub label: u8,
    /// Split directory the file came from in the source layout.
    pub source_split: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub normal: usize,
    pub anomalous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub layout: Layout,
    pub categories: BTreeMap<String, Vec<SampleRef>>,
    pub warnings: Vec<String>,
    /// Seed and fraction of the last stratified split, if any.
    pub split_seed: Option<u64>,
    pub train_fraction: Option<f64>,
}

impl DatasetManifest {
    /// All samples, category by category, each in lexicographic id order.
    pub fn samples(&self) -> impl Iterator<Item = &SampleRef> {
        self.categories.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.categories.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class counts keyed by split name (`unassigned`, `train`, `eval`).
    pub fn split_counts(&self) -> BTreeMap<String, ClassCounts> {
        let mut out: BTreeMap<String, ClassCounts> = BTreeMap::new();
        for s in self.samples() {
            let key = serde_json::to_value(s.split)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let c = out.entry(key).or_default();
            if s.label == 0 {
                c.normal += 1;
            } else {
                c.anomalous += 1;
            }
        }
        out
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(format!("reading {}", path.display()), e)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Image files below `dir`, recursively, sorted by path.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let p = entry.map_err(io_err(&d))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if is_image(&p) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn posix_relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Walks `root` according to `layout`. Categories and samples are ordered
/// lexicographically, so repeated scans give identical manifests.
pub fn scan_dataset(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            format!("dataset root {}", root.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut categories = BTreeMap::new();
    let mut warnings = Vec::new();

    if layout == Layout::Visa && root.join("split_csv/1cls.csv").is_file() {
        scan_visa_csv(root, &mut categories)?;
    } else {
        for cat_dir in sorted_dirs(root)? {
            let category = file_name(&cat_dir);
            if layout == Layout::Visa && category == "split_csv" {
                continue;
            }
            let mut samples = Vec::new();
            match layout {
                Layout::Mvtec => {
                    for split in ["test", "train"] {
                        let split_dir = cat_dir.join(split);
                        if !split_dir.is_dir() {
                            continue;
                        }
                        for class_dir in sorted_dirs(&split_dir)? {
                            let label = u8::from(file_name(&class_dir) != "good");
                            push_files(
                                &mut samples,
                                &cat_dir,
                                &category,
                                &class_dir,
                                label,
                                split,
                            )?;
                        }
                    }
                }
                Layout::Visa => {
                    let images = cat_dir.join("Data").join("Images");
                    for (dir, label) in [("Anomaly", 1), ("Normal", 0)] {
                        let class_dir = images.join(dir);
                        if class_dir.is_dir() {
                            push_files(
                                &mut samples,
                                &cat_dir,
                                &category,
                                &class_dir,
                                label,
                                "none",
                            )?;
                        }
                    }
                }
                Layout::Flat => {
                    for class_dir in sorted_dirs(&cat_dir)? {
                        let label = u8::from(file_name(&class_dir) != "good");
                        push_files(&mut samples, &cat_dir, &category, &class_dir, label, "none")?;
                    }
                }
            }
            samples.sort_by(|a, b| a.id.cmp(&b.id));
            if samples.is_empty() {
                warnings.push(format!("category `{category}` has no images"));
            }
            categories.insert(category, samples);
        }
    }
    if categories.is_empty() {
        warnings.push(format!("no categories found under {}", root.display()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        layout,
        categories,
        warnings,
        split_seed: None,
        train_fraction: None,
    })
}

fn push_files(
    out: &mut Vec<SampleRef>,
    cat_dir: &Path,
    category: &str,
    class_dir: &Path,
    label: u8,
    source_split: &str,
) -> Result<()> {
    for path in image_files(class_dir)? {
        out.push(SampleRef {
            id: posix_relative(&path, cat_dir),
            category: category.to_string(),
            path,
            label,
            source_split: source_split.to_string(),
            split: Split::Unassigned,
        });
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct VisaRow {
    object: String,
    split: String,
    label: String,
    image: String,
}

fn scan_visa_csv(root: &Path, categories: &mut BTreeMap<String, Vec<SampleRef>>) -> Result<()> {
    let csv_path = root.join("split_csv/1cls.csv");
    let mut reader = csv::Reader::from_path(&csv_path)
        .map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
    for row in reader.deserialize::<VisaRow>() {
        let row = row.map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
        let label = match row.label.as_str() {
            "normal" => 0,
            "anomaly" => 1,
            other => {
                return Err(Error::Config(format!(
                    "{}: unknown label `{other}`",
                    csv_path.display()
                )))
            }
        };
        let path = root.join(&row.image);
        let cat_dir = root.join(&row.object);
        categories
            .entry(row.object.clone())
            .or_default()
            .push(SampleRef {
                id: posix_relative(&path, &cat_dir),
                category: row.object,
                path,
                label,
                source_split: row.split,
                split: Split::Unassigned,
            });
    }
    for samples in categories.values_mut() {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(())
}

/// Re-splits every (category, label) cell: a seeded Fisher–Yates shuffle of
/// the cell, then the first `floor(fraction · n)` samples go to training and
/// the rest to evaluation. Sample order within the manifest is unchanged.
pub fn stratified_split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    for samples in out.categories.values_mut() {
        for label in [0u8, 1] {
            let mut cell: Vec<usize> = (0..samples.len())
                .filter(|&i| samples[i].label == label)
                .collect();
            fisher_yates(&mut cell, &mut rng);
            let n_train = (train_fraction * cell.len() as f64).floor() as usize;
            for (rank, &i) in cell.iter().enumerate() {
                samples[i].split = if rank < n_train {
                    Split::Train
                } else {
                    Split::Eval
                };
            }
        }
    }
    out.split_seed = Some(seed);
    out.train_fraction = Some(train_fraction);
    Ok(out)
}

/// In-place Fisher–Yates: for `i` from `n−1` down to 1, swap `i` with a
/// uniform `j ∈ [0, i]`.
pub fn fisher_yates<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Decoded 8-bit pixels, row-major and channel-interleaved (`H × W × C`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedImage {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB). Alpha is dropped.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// A loaded sample: pixels plus ground truth.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub category: String,
    pub image: DecodedImage,
    pub label: u8,
    pub split: Split,
}

/// Decodes a PNG or JPEG file. Grayscale stays single-channel.
pub fn load_image(path: &Path) -> Result<DecodedImage> {
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| decode_err(e.to_string()))?;
    let img = image::load_from_memory(&bytes).map_err(|e| decode_err(e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, pixels) = if img.color().has_color() {
        (3, img.into_rgb8().into_raw())
    } else {
        (1, img.into_luma8().into_raw())
    };
    Ok(DecodedImage {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn load_sample(sample: &SampleRef) -> Result<ImageSample> {
    Ok(ImageSample {
        id: sample.id.clone(),
        category: sample.category.clone(),
        image: load_image(&sample.path)?,
        label: sample.label,
        split: sample.split,
    })
}
