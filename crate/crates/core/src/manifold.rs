//! Stain-induced view pairs and patch datasets.
//!
//! A patch and all of its `(alpha_h, alpha_e)` rescalings form a
//! two-parameter family of images with identical morphology. Training draws
//! two independent members of that family per patch.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io;
use crate::stain_math::{
    augment, estimate_stain_basis_rgb, reconstruct, ConcentrationMap, RgbPatch, StainBasis,
    StainEstimationConfig,
};
use crate::util::{derived_rng, stable_hash};

/// Sidecar file mapping patch identifiers to class labels.
pub const LABELS_FILE: &str = "labels.csv";

/// Closed interval the stain scale factors are drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationRange {
    pub min: f64,
    pub max: f64,
}

impl Default for AugmentationRange {
    fn default() -> Self {
        Self { min: 0.5, max: 2.0 }
    }
}

impl AugmentationRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0 && min <= max && max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "augmentation range needs 0 < min <= max, got [{min}, {max}]"
            )));
        }
        Ok(Self { min, max })
    }
}

/// `(alpha_h, alpha_e)` applied to one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alphas {
    pub h: f64,
    pub e: f64,
}

/// Independent uniform draws of both stain factors.
pub fn sample_alphas<R: Rng + ?Sized>(rng: &mut R, range: &AugmentationRange) -> Alphas {
    let h = rng.random_range(range.min..=range.max);
    let e = rng.random_range(range.min..=range.max);
    Alphas { h, e }
}

/// Two stain-augmented views of the same source patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub x1: RgbPatch,
    pub x2: RgbPatch,
    pub source_id: String,
    pub alphas1: Alphas,
    pub alphas2: Alphas,
}

pub fn make_view_pair<R: Rng + ?Sized>(
    patch: &RgbPatch,
    source_id: &str,
    basis: &StainBasis,
    rng: &mut R,
    range: &AugmentationRange,
    background: f64,
) -> Result<ViewPair> {
    let alphas1 = sample_alphas(rng, range);
    let alphas2 = sample_alphas(rng, range);
    Ok(ViewPair {
        x1: augment(patch, basis, alphas1.h, alphas1.e, background)?,
        x2: augment(patch, basis, alphas2.h, alphas2.e, background)?,
        source_id: source_id.to_owned(),
        alphas1,
        alphas2,
    })
}

/// Where the augmentation basis of a patch comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BasisMode {
    /// Macenko estimate per patch.
    #[default]
    PerPatch,
    /// One basis shared by the whole dataset.
    Fixed(StainBasis),
}

impl BasisMode {
    pub fn basis_for(&self, patch: &RgbPatch, cfg: &StainEstimationConfig) -> Result<StainBasis> {
        match self {
            BasisMode::PerPatch => estimate_stain_basis_rgb(patch, cfg),
            BasisMode::Fixed(b) => Ok(*b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchItem {
    pub id: String,
    pub patch: RgbPatch,
    pub label: Option<String>,
}

/// Ordered collection of equally sized square patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    items: Vec<PatchItem>,
    patch_size: usize,
}

impl PatchDataset {
    pub const DEFAULT_PATCH_SIZE: usize = 256;

    pub fn new(items: Vec<PatchItem>, patch_size: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for item in &items {
            if item.patch.width() != patch_size || item.patch.height() != patch_size {
                return Err(Error::dims(
                    format!("{patch_size}x{patch_size}"),
                    format!(
                        "{}x{} for {}",
                        item.patch.width(),
                        item.patch.height(),
                        item.id
                    ),
                ));
            }
            if !seen.insert(item.id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate patch identifier {}",
                    item.id
                )));
            }
        }
        Ok(Self { items, patch_size })
    }

    pub fn items(&self) -> &[PatchItem] {
        &self.items
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Same identifiers and labels, patches replaced by `f(patch)`.
    pub fn map_patches<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&PatchItem) -> Result<RgbPatch> + Sync,
    {
        let items = self
            .items
            .par_iter()
            .map(|item| {
                Ok(PatchItem {
                    id: item.id.clone(),
                    patch: f(item)?,
                    label: item.label.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, self.patch_size)
    }

    /// Splits into the first `n` items and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        let n = n.min(self.items.len());
        Ok((
            Self::new(self.items[..n].to_vec(), self.patch_size)?,
            Self::new(self.items[n..].to_vec(), self.patch_size)?,
        ))
    }

    /// Writes every patch as PNG plus a `labels.csv` sidecar when labelled.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for item in &self.items {
            io::write_patch(&dir.join(&item.id), &item.patch)?;
        }
        if self.items.iter().any(|i| i.label.is_some()) {
            let labels: Vec<(String, String)> = self
                .items
                .iter()
                .filter_map(|i| i.label.clone().map(|l| (i.id.clone(), l)))
                .collect();
            write_labels(&dir.join(LABELS_FILE), &labels)?;
        }
        Ok(())
    }
}

/// A file that was not admitted into a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Loads every PNG/PPM directly under `root` in lexicographic order.
///
/// Wrong-sized or unreadable files are logged and returned as skipped.
/// Labels come from a `labels.csv` sidecar when one exists.
pub fn load_patch_dataset(
    root: &Path,
    patch_size: usize,
) -> Result<(PatchDataset, Vec<SkippedFile>)> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_file() && io::is_patch_file(&path) {
            paths.push(path);
        }
    }
    paths.sort();

    let labels_path = root.join(LABELS_FILE);
    let labels = if labels_path.is_file() {
        read_labels(&labels_path)?
    } else {
        BTreeMap::new()
    };

    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        let id = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_owned();
        match io::read_patch(&path) {
            Ok(p) if p.width() == patch_size && p.height() == patch_size => {
                let label = labels.get(&id).cloned();
                items.push(PatchItem {
                    id,
                    patch: p,
                    label,
                });
            }
            Ok(p) => {
                let reason = format!(
                    "expected {patch_size}x{patch_size}, found {}x{}",
                    p.width(),
                    p.height()
                );
                log::warn!("skipping {}: {reason}", path.display());
                skipped.push(SkippedFile { path, reason });
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(SkippedFile {
                    path,
                    reason: e.to_string(),
                });
            }
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    Ok((PatchDataset::new(items, patch_size)?, skipped))
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 2 {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                message: format!("expected `identifier,label`, got {} fields", rec.len()),
            });
        }
        out.insert(rec[0].to_owned(), rec[1].to_owned());
    }
    Ok(out)
}

pub fn write_labels(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["identifier", "label"]).map_err(csv_err)?;
    for (id, label) in rows {
        w.write_record([id, label]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `identifier,alpha_h1,alpha_e1,alpha_h2,alpha_e2` rows.
pub fn write_pair_manifest(path: &Path, pairs: &[(String, Alphas, Alphas)]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["identifier", "alpha_h1", "alpha_e1", "alpha_h2", "alpha_e2"])
        .map_err(csv_err)?;
    for (id, a1, a2) in pairs {
        w.write_record([
            id.clone(),
            a1.h.to_string(),
            a1.e.to_string(),
            a2.h.to_string(),
            a2.e.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-patch random stream, independent of processing order.
pub fn patch_rng(seed: u64, id: &str, round: u64) -> rand_chacha::ChaCha8Rng {
    derived_rng(&[seed, stable_hash(id.as_bytes()), round])
}

/// Shape parameters of the synthetic tissue generator for one class.
fn class_morphology(class: usize) -> (usize, f64) {
    // Few large nuclei for class 0, progressively more and smaller ones.
    // Total nuclear area is held roughly constant so classes differ in
    // morphology rather than in overall hematoxylin content.
    let count = 3 + 9 * class;
    let radius = (0.15 * (3.0 / count as f64).sqrt()).max(0.04);
    (count, radius)
}

/// Renders one synthetic patch: hematoxylin-dense disks ("nuclei") on an
/// eosin texture, returned as concentrations.
pub fn synthetic_concentrations<R: Rng + ?Sized>(
    rng: &mut R,
    side: usize,
    class: usize,
) -> ConcentrationMap {
    let (count, radius_frac) = class_morphology(class);
    let s = side as f64;
    let nuclei: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let r = radius_frac * s * rng.random_range(0.85..1.15);
            let cx = rng.random_range(r..s - r);
            let cy = rng.random_range(r..s - r);
            let level = rng.random_range(0.8..1.3);
            (cx, cy, r, level)
        })
        .collect();
    let stroma = rng.random_range(0.35..0.6);
    let (fx, fy, ph) = (
        rng.random_range(1.0..3.0),
        rng.random_range(1.0..3.0),
        rng.random_range(0.0..2.0 * PI),
    );
    let edge = 1.0;
    let mut h = Vec::with_capacity(side * side);
    let mut e = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut cover: f64 = 0.0;
            let mut hv: f64 = 0.0;
            for &(cx, cy, r, level) in &nuclei {
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                let p = ((r - d) / edge + 0.5).clamp(0.0, 1.0);
                if p > cover {
                    cover = p;
                    hv = level * p;
                }
            }
            let texture = 0.75
                + 0.25 * (2.0 * PI * (fx * px / s) + ph).sin() * (2.0 * PI * fy * py / s).cos();
            h.push(hv);
            e.push(stroma * texture * (1.0 - cover));
        }
    }
    ConcentrationMap::new(side, side, h, e).expect("generator produces valid concentrations")
}

/// Deterministic labelled dataset of synthetic H&E-like patches rendered
/// through `basis`. Classes differ in nucleus count and size; labels are
/// `"0"`, `"1"`, ... and items alternate classes.
pub fn generate_synthetic_dataset(
    seed: u64,
    n: usize,
    patch_size: usize,
    basis: &StainBasis,
    class_count: usize,
) -> Result<PatchDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs n > 0".into()));
    }
    if class_count == 0 || patch_size == 0 {
        return Err(Error::InvalidArgument(
            "class count and patch size must be positive".into(),
        ));
    }
    let items = (0..n)
        .into_par_iter()
        .map(|i| {
            let class = i % class_count;
            let mut rng = derived_rng(&[seed, i as u64, 0x5717]);
            let conc = synthetic_concentrations(&mut rng, patch_size, class);
            Ok(PatchItem {
                id: format!("synth_{i:05}.png"),
                patch: reconstruct(&conc, basis, 255.0)?,
                label: Some(class.to_string()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PatchDataset::new(items, patch_size)
}
