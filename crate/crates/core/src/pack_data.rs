//! Pack-structured datasets: images grouped by domain, a stochastic pack
//! sampler, domain splits, and the on-disk layout.
//!
//! On disk a dataset is a directory holding `manifest.json` and one
//! subdirectory per domain. Each domain directory contains `0.png`, `1.png`,
//! ... (8-bit) and, when the dataset has ground-truth factors, a
//! `factors.json` array with one record per image.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FACTORS_FILE: &str = "factors.json";
pub const DATASET_FORMAT: &str = "packvae-dataset";
pub const DATASET_VERSION: u32 = 1;

/// An 8-bit image in row-major `H x W x C` order. Pixel values are
/// `byte / 255`, so always in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image buffer of {} bytes for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
        }
    }

    /// Quantises `[0, 1]` values (clamped) to 8 bits.
    pub fn from_unit(height: usize, width: usize, channels: usize, values: &[f32]) -> Result<Self> {
        let data = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Image::new(height, width, channels, data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        f32::from(self.data[(y * self.width + x) * self.channels + c]) / 255.0
    }

    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&b| f32::from(b) / 255.0).collect()
    }

    pub fn count_nonzero(&self) -> usize {
        (0..self.height * self.width)
            .filter(|&p| {
                self.data[p * self.channels..(p + 1) * self.channels]
                    .iter()
                    .any(|&b| b != 0)
            })
            .count()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::Format(format!("cannot write a {c}-channel png"))),
        };
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
    }

    /// Decodes any supported format. Grayscale stays one channel, everything
    /// else becomes RGB (alpha is dropped).
    pub fn load(path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let img = match decoded.color() {
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16 => {
                Image::new(h, w, 1, decoded.into_luma8().into_raw())?
            }
            _ => Image::new(h, w, 3, decoded.into_rgb8().into_raw())?,
        };
        Ok(img)
    }
}

/// Ground-truth factors of one image as a flat real vector; the meaning of
/// each coordinate is given by the dataset's [`FactorSchema`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactorRecord(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSchema {
    pub name: String,
    pub fields: Vec<String>,
}

/// A set of images known to share one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Pack {
    pub images: Vec<Image>,
    pub domain_id: String,
    pub factors: Option<Vec<FactorRecord>>,
}

impl Pack {
    pub fn new(domain_id: impl Into<String>, images: Vec<Image>, factors: Option<Vec<FactorRecord>>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Argument("a pack needs at least one image".into()))?;
        if images.iter().any(|i| i.dims() != first.dims()) {
            return Err(Error::Shape("pack images differ in dimensions".into()));
        }
        if let Some(f) = &factors {
            if f.len() != images.len() {
                return Err(Error::Shape("factor count differs from image count".into()));
            }
        }
        Ok(Pack {
            images,
            domain_id: domain_id.into(),
            factors,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.images[0].dims()
    }
}

/// Every image available for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPool {
    pub images: Vec<Image>,
    pub factors: Option<Vec<FactorRecord>>,
}

impl DomainPool {
    pub fn as_pack(&self, domain_id: &str) -> Pack {
        Pack {
            images: self.images.clone(),
            domain_id: domain_id.to_string(),
            factors: self.factors.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    /// Dataset kind, e.g. `silhouettes` or `image-folder`.
    pub schema: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub factor_schema: Option<FactorSchema>,
    /// Domains excluded from training.
    pub withheld: Vec<String>,
    /// Config text of the run that produced the dataset, if any.
    pub generator: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackDataset {
    pub meta: DatasetMeta,
    pub domains: BTreeMap<String, DomainPool>,
}

impl PackDataset {
    pub fn new(meta: DatasetMeta, domains: BTreeMap<String, DomainPool>) -> Result<Self> {
        let ds = PackDataset { meta, domains };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = (self.meta.height, self.meta.width, self.meta.channels);
        for (id, pool) in &self.domains {
            if pool.images.is_empty() {
                return Err(Error::Format(format!("domain `{id}` has no images")));
            }
            if let Some(bad) = pool.images.iter().find(|i| i.dims() != dims) {
                return Err(Error::Format(format!(
                    "domain `{id}` holds a {:?} image, dataset is {dims:?}",
                    bad.dims()
                )));
            }
            match (&pool.factors, &self.meta.factor_schema) {
                (Some(f), Some(schema)) => {
                    if f.len() != pool.images.len() {
                        return Err(Error::Format(format!("domain `{id}`: factor count differs from image count")));
                    }
                    if let Some(r) = f.iter().find(|r| r.0.len() != schema.fields.len()) {
                        return Err(Error::Schema(format!(
                            "domain `{id}`: factor record of length {} under schema `{}` with {} fields",
                            r.0.len(),
                            schema.name,
                            schema.fields.len()
                        )));
                    }
                }
                (None, None) => {}
                (Some(_), None) => return Err(Error::Schema(format!("domain `{id}` has factors but no schema"))),
                (None, Some(_)) => return Err(Error::Schema(format!("domain `{id}` lacks factor records"))),
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domain_ids(&self) -> Vec<&str> {
        self.domains.keys().map(String::as_str).collect()
    }

    pub fn num_images(&self) -> usize {
        self.domains.values().map(|p| p.images.len()).sum()
    }

    fn subset(&self, ids: &BTreeSet<&str>, withheld: Vec<String>) -> PackDataset {
        let domains = self
            .domains
            .iter()
            .filter(|(id, _)| ids.contains(id.as_str()))
            .map(|(id, p)| (id.clone(), p.clone()))
            .collect();
        PackDataset {
            meta: DatasetMeta {
                withheld,
                ..self.meta.clone()
            },
            domains,
        }
    }

    /// Splits along the withheld list recorded in the metadata.
    pub fn partition_withheld(&self) -> (PackDataset, PackDataset) {
        let withheld: BTreeSet<&str> = self.meta.withheld.iter().map(String::as_str).collect();
        let train_ids = self.domains.keys().map(String::as_str).filter(|id| !withheld.contains(id)).collect();
        let test_ids = self.domains.keys().map(String::as_str).filter(|id| withheld.contains(id)).collect();
        (self.subset(&train_ids, Vec::new()), self.subset(&test_ids, Vec::new()))
    }
}

/// Pack sizes distributed as `base + Poisson(rate)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PackSizeSampler {
    pub base: usize,
    pub rate: f64,
}

impl Default for PackSizeSampler {
    fn default() -> Self {
        PackSizeSampler { base: 4, rate: 8.0 }
    }
}

impl PackSizeSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_pack_size(self, rng)
    }
}

pub fn sample_pack_size<R: Rng + ?Sized>(sampler: &PackSizeSampler, rng: &mut R) -> usize {
    let poisson = Poisson::new(sampler.rate).expect("pack-size rate must be positive and finite");
    let draw: f64 = poisson.sample(rng);
    sampler.base + draw as usize
}

/// Draws `size` images uniformly with replacement from the domain's pool.
pub fn sample_pack<R: Rng + ?Sized>(dataset: &PackDataset, domain_id: &str, size: usize, rng: &mut R) -> Result<Pack> {
    let pool = dataset
        .domains
        .get(domain_id)
        .ok_or_else(|| Error::UnknownDomain(domain_id.to_string()))?;
    if size == 0 {
        return Err(Error::Argument("pack size must be at least 1".into()));
    }
    let picks: Vec<usize> = (0..size).map(|_| rng.random_range(0..pool.images.len())).collect();
    Ok(Pack {
        images: picks.iter().map(|&i| pool.images[i].clone()).collect(),
        domain_id: domain_id.to_string(),
        factors: pool
            .factors
            .as_ref()
            .map(|f| picks.iter().map(|&i| f[i].clone()).collect()),
    })
}

/// Withholds `n_withheld` randomly chosen domains. The returned test set
/// holds exactly those domains; the full dataset's metadata is not changed.
pub fn split_domains<R: Rng + ?Sized>(
    dataset: &PackDataset,
    n_withheld: usize,
    rng: &mut R,
) -> Result<(PackDataset, PackDataset)> {
    if n_withheld >= dataset.len() {
        return Err(Error::Argument(format!(
            "cannot withhold {n_withheld} of {} domains",
            dataset.len()
        )));
    }
    let test = choose_withheld(&dataset.domain_ids(), n_withheld, rng);
    let test_ids: BTreeSet<&str> = test.iter().map(String::as_str).collect();
    let train_ids = dataset.domains.keys().map(String::as_str).filter(|id| !test_ids.contains(id)).collect();
    Ok((dataset.subset(&train_ids, Vec::new()), dataset.subset(&test_ids, Vec::new())))
}

/// Chooses `n` ids at random, returned sorted.
pub fn choose_withheld<R: Rng + ?Sized>(ids: &[&str], n: usize, rng: &mut R) -> Vec<String> {
    let mut order: Vec<&str> = ids.to_vec();
    order.sort_unstable();
    order.shuffle(rng);
    let mut chosen: Vec<String> = order.into_iter().take(n).map(str::to_string).collect();
    chosen.sort();
    chosen
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads every image file directly inside `dir` (sorted by name).
pub fn load_image_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut images = Vec::new();
    for path in sorted_entries(dir)? {
        if path.is_file() && is_image_file(&path) {
            images.push(Image::load(&path)?);
        }
    }
    Ok(images)
}

/// Reads a directory with one subdirectory of images per domain.
pub fn load_image_folder(root: &Path) -> Result<PackDataset> {
    let mut domains = BTreeMap::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    for path in sorted_entries(root)? {
        if !path.is_dir() {
            continue;
        }
        let id = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Format(format!("non-utf8 directory name {}", path.display())))?
            .to_string();
        let images = load_image_dir(&path)?;
        if images.is_empty() {
            return Err(Error::Format(format!("domain directory {} holds no images", path.display())));
        }
        for img in &images {
            match dims {
                None => dims = Some(img.dims()),
                Some(d) if d != img.dims() => {
                    return Err(Error::Format(format!(
                        "inconsistent image dimensions in {}: {:?} vs {d:?}",
                        path.display(),
                        img.dims()
                    )))
                }
                _ => {}
            }
        }
        domains.insert(id, DomainPool { images, factors: None });
    }
    let (height, width, channels) =
        dims.ok_or_else(|| Error::Format(format!("{} has no domain subdirectories", root.display())))?;
    PackDataset::new(
        DatasetMeta {
            schema: "image-folder".into(),
            height,
            width,
            channels,
            factor_schema: None,
            withheld: Vec::new(),
            generator: None,
        },
        domains,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestDomain {
    pub id: String,
    pub count: usize,
}

/// `manifest.json`. Unknown keys are tolerated with a warning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub schema: String,
    pub image: ManifestImage,
    pub factor_schema: Option<FactorSchema>,
    pub domains: Vec<ManifestDomain>,
    pub withheld: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(flatten)]
    pub unknown: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn for_meta(meta: &DatasetMeta, domains: Vec<ManifestDomain>) -> Self {
        Manifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            schema: meta.schema.clone(),
            image: ManifestImage {
                height: meta.height,
                width: meta.width,
                channels: meta.channels,
            },
            factor_schema: meta.factor_schema.clone(),
            domains,
            withheld: meta.withheld.clone(),
            generator: meta.generator.clone(),
            unknown: BTreeMap::new(),
        }
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Writes one domain directory (images and factor records).
pub fn write_domain(root: &Path, id: &str, pool: &DomainPool) -> Result<()> {
    let dir = root.join(id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (k, img) in pool.images.iter().enumerate() {
        img.save_png(&dir.join(format!("{k}.png")))?;
    }
    if let Some(f) = &pool.factors {
        let path = dir.join(FACTORS_FILE);
        let text = serde_json::to_string(f).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &PackDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (id, pool) in &dataset.domains {
        write_domain(root, id, pool)?;
        entries.push(ManifestDomain {
            id: id.clone(),
            count: pool.images.len(),
        });
    }
    Manifest::for_meta(&dataset.meta, entries).write(root)
}

pub fn read_manifest(root: &Path) -> Result<(Manifest, Vec<String>)> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let path = root.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Format(format!("missing {}", path.display())))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unexpected dataset format `{}`", manifest.format)));
    }
    if manifest.version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", manifest.version)));
    }
    let warnings = manifest
        .unknown
        .keys()
        .map(|k| format!("ignoring unknown manifest key `{k}`"))
        .collect();
    Ok((manifest, warnings))
}

/// Loads a dataset and returns it with any non-fatal warnings.
pub fn load_dataset_with_warnings(root: &Path) -> Result<(PackDataset, Vec<String>)> {
    let (manifest, warnings) = read_manifest(root)?;
    let dims = (manifest.image.height, manifest.image.width, manifest.image.channels);
    let mut domains = BTreeMap::new();
    for entry in &manifest.domains {
        let dir = root.join(&entry.id);
        let mut images = Vec::with_capacity(entry.count);
        for k in 0..entry.count {
            let img = Image::load(&dir.join(format!("{k}.png")))?;
            if img.dims() != dims {
                return Err(Error::Format(format!(
                    "{}/{k}.png is {:?}, manifest says {dims:?}",
                    entry.id,
                    img.dims()
                )));
            }
            images.push(img);
        }
        let factors = if manifest.factor_schema.is_some() {
            let path = dir.join(FACTORS_FILE);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let records: Vec<FactorRecord> =
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            Some(records)
        } else {
            None
        };
        domains.insert(entry.id.clone(), DomainPool { images, factors });
    }
    for id in &manifest.withheld {
        if !domains.contains_key(id) {
            return Err(Error::Format(format!("withheld domain `{id}` is not in the manifest")));
        }
    }
    let meta = DatasetMeta {
        schema: manifest.schema,
        height: dims.0,
        width: dims.1,
        channels: dims.2,
        factor_schema: manifest.factor_schema,
        withheld: manifest.withheld,
        generator: manifest.generator,
    };
    Ok((PackDataset::new(meta, domains)?, warnings))
}

pub fn load_dataset(root: &Path) -> Result<PackDataset> {
    let (ds, warnings) = load_dataset_with_warnings(root)?;
    for w in warnings {
        log::warn!("{}: {w}", root.display());
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn tiny_dataset(n_domains: usize, pool: usize, with_factors: bool) -> PackDataset {
        let mut domains = BTreeMap::new();
        for d in 0..n_domains {
            let images = (0..pool)
                .map(|k| {
                    let data = (0..4 * 4 * 3).map(|i| ((i * 7 + d * 31 + k * 3) % 256) as u8).collect();
                    Image::new(4, 4, 3, data).unwrap()
                })
                .collect();
            let factors = with_factors.then(|| {
                (0..pool)
                    .map(|k| FactorRecord(vec![d as f64, k as f64 * 0.1 + 1.0 / 3.0]))
                    .collect()
            });
            domains.insert(format!("d{d:03}"), DomainPool { images, factors });
        }
        PackDataset::new(
            DatasetMeta {
                schema: "test".into(),
                height: 4,
                width: 4,
                channels: 3,
                factor_schema: with_factors.then(|| FactorSchema {
                    name: "test".into(),
                    fields: vec!["a".into(), "b".into()],
                }),
                withheld: Vec::new(),
                generator: None,
            },
            domains,
        )
        .unwrap()
    }

    #[test]
    fn pack_size_moments_and_minimum() {
        let sampler = PackSizeSampler::default();
        let mut rng = rng_for(11, "sizes");
        let draws: Vec<f64> = (0..100_000).map(|_| sampler.sample(&mut rng) as f64).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((11.9..=12.1).contains(&mean), "mean {mean}");
        assert!((7.6..=8.4).contains(&var), "variance {var}");
        assert!(draws.iter().all(|&d| d >= 4.0));
    }

    #[test]
    fn pack_size_is_deterministic() {
        let s = PackSizeSampler::default();
        let a = s.sample(&mut rng_for(5, "x"));
        let b = s.sample(&mut rng_for(5, "x"));
        assert_eq!(a, b);
    }

    #[test]
    fn single_image_pool_repeats() {
        let ds = tiny_dataset(2, 1, true);
        let pack = sample_pack(&ds, "d001", 5, &mut rng_for(1, "p")).unwrap();
        assert_eq!(pack.len(), 5);
        assert!(pack.images.iter().all(|i| *i == pack.images[0]));
        assert_eq!(pack.factors.as_ref().unwrap().len(), 5);
    }

    #[test]
    fn pack_keeps_domain_and_size() {
        let ds = tiny_dataset(3, 40, false);
        let pack = sample_pack(&ds, "d002", 12, &mut rng_for(1, "p")).unwrap();
        assert_eq!(pack.len(), 12);
        assert_eq!(pack.domain_id, "d002");
        assert!(pack.factors.is_none());
    }

    #[test]
    fn unknown_domain_is_lookup_error() {
        let ds = tiny_dataset(1, 1, false);
        assert!(matches!(
            sample_pack(&ds, "nope", 1, &mut rng_for(1, "p")),
            Err(Error::UnknownDomain(_))
        ));
    }

    #[test]
    fn sampling_is_uniform_over_pool() {
        // 10 categories, 10^4 draws: each frequency within [0.08, 0.12]
        // (about 6.3 standard deviations from 0.1).
        let ds = tiny_dataset(1, 10, true);
        let mut rng = rng_for(2, "uniform");
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            let p = sample_pack(&ds, "d000", 1, &mut rng).unwrap();
            let k = ((p.factors.unwrap()[0].0[1] - 1.0 / 3.0) / 0.1).round() as usize;
            counts[k] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.08..=0.12).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn split_partitions_domains() {
        let ds = tiny_dataset(10, 1, false);
        let (train, test) = split_domains(&ds, 0, &mut rng_for(1, "s")).unwrap();
        assert_eq!((train.len(), test.len()), (10, 0));
        let (train, test) = split_domains(&ds, 3, &mut rng_for(1, "s")).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        assert!(train.domains.keys().all(|k| !test.domains.contains_key(k)));
        let (_, again) = split_domains(&ds, 3, &mut rng_for(1, "s")).unwrap();
        assert_eq!(test.domain_ids(), again.domain_ids());
        assert!(split_domains(&ds, 10, &mut rng_for(1, "s")).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny_dataset(5, 3, true);
        ds.meta.withheld = vec!["d001".into()];
        save_dataset(&ds, dir.path()).unwrap();
        let (loaded, warnings) = load_dataset_with_warnings(dir.path()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(loaded, ds);
        let (train, test) = loaded.partition_withheld();
        assert_eq!((train.len(), test.len()), (4, 1));
    }

    #[test]
    fn missing_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_manifest_keys_warn() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(2, 2, false);
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["future_key"] = Value::from(42);
        fs::write(&path, v.to_string()).unwrap();
        let (loaded, warnings) = load_dataset_with_warnings(dir.path()).unwrap();
        assert_eq!(loaded, ds);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("future_key"));
    }

    #[test]
    fn image_folder_loader() {
        let dir = tempfile::tempdir().unwrap();
        for d in ["a", "b"] {
            fs::create_dir(dir.path().join(d)).unwrap();
            for k in 0..3 {
                Image::new(2, 3, 3, vec![(k * 40) as u8; 18])
                    .unwrap()
                    .save_png(&dir.path().join(d).join(format!("{k}.png")))
                    .unwrap();
            }
        }
        let ds = load_image_folder(dir.path()).unwrap();
        assert_eq!(ds.domain_ids(), ["a", "b"]);
        assert!(ds.domains.values().all(|p| p.images.len() == 3));
        assert_eq!((ds.meta.height, ds.meta.width, ds.meta.channels), (2, 3, 3));

        fs::create_dir(dir.path().join("c")).unwrap();
        assert!(matches!(load_image_folder(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn image_folder_rejects_bad_inputs() {
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_image_folder(empty.path()), Err(Error::Format(_))));

        let mixed = tempfile::tempdir().unwrap();
        fs::create_dir(mixed.path().join("a")).unwrap();
        Image::zeros(2, 2, 1).save_png(&mixed.path().join("a/0.png")).unwrap();
        Image::zeros(3, 2, 1).save_png(&mixed.path().join("a/1.png")).unwrap();
        assert!(matches!(load_image_folder(mixed.path()), Err(Error::Format(_))));

        let broken = tempfile::tempdir().unwrap();
        fs::create_dir(broken.path().join("a")).unwrap();
        fs::write(broken.path().join("a/0.png"), b"not a png").unwrap();
        match load_image_folder(broken.path()) {
            Err(e @ Error::Image { .. }) => assert!(e.to_string().contains("0.png")),
            other => panic!("expected image error, got {other:?}"),
        }
    }
}
