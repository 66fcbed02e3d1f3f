//! Procedural block-shape dataset. A domain is a 3x3x3 voxel occupancy
//! pattern; the content of an image is the view angle (pitch, yaw) it is
//! rendered at.
//!
//! Rendering: the grid is centred at the origin with unit cubes, rotated by
//! yaw about the vertical axis and then pitch about the horizontal axis (both
//! extrinsic), and projected orthographically onto the image plane. Faces are
//! rasterised at pixel centres with a depth buffer and flat-shaded by their
//! axis in object space. Background pixels are 0.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pack_data::{
    choose_withheld, write_domain, DatasetMeta, DomainPool, FactorRecord, FactorSchema, Image, Manifest,
    ManifestDomain, PackDataset, PackSizeSampler,
};
use crate::rng::{rng_for, rng_for_item};

pub const SCHEMA_NAME: &str = "silhouettes";
pub const CELLS: usize = 27;
pub const MAX_ANGLE: f64 = 90.0;

/// Ground truth for one rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSpec {
    /// Indexed `x * 9 + y * 3 + z`; `y` is the vertical axis.
    pub occupancy: [bool; CELLS],
    /// Degrees in `[0, 90]`.
    pub pitch: f64,
    /// Degrees in `[0, 90]`.
    pub yaw: f64,
}

impl SilhouetteSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pitch", self.pitch), ("yaw", self.yaw)] {
            if !(0.0..=MAX_ANGLE).contains(&v) {
                return Err(Error::Argument(format!("{name} {v} outside [0, 90]")));
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> FactorRecord {
        let mut v: Vec<f64> = self.occupancy.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        v.push(self.pitch);
        v.push(self.yaw);
        FactorRecord(v)
    }

    pub fn from_record(record: &FactorRecord) -> Result<Self> {
        if record.0.len() != CELLS + 2 {
            return Err(Error::Schema(format!(
                "silhouette record has {} values, expected {}",
                record.0.len(),
                CELLS + 2
            )));
        }
        let mut occupancy = [false; CELLS];
        for (o, &v) in occupancy.iter_mut().zip(&record.0) {
            *o = v != 0.0;
        }
        Ok(SilhouetteSpec {
            occupancy,
            pitch: record.0[CELLS],
            yaw: record.0[CELLS + 1],
        })
    }
}

pub fn cell_index(x: usize, y: usize, z: usize) -> usize {
    x * 9 + y * 3 + z
}

pub fn factor_schema() -> FactorSchema {
    let mut fields = Vec::with_capacity(CELLS + 2);
    for x in 0..3 {
        for y in 0..3 {
            for z in 0..3 {
                fields.push(format!("cell_{x}{y}{z}"));
            }
        }
    }
    fields.push("pitch".into());
    fields.push("yaw".into());
    FactorSchema {
        name: SCHEMA_NAME.into(),
        fields,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Pixels per world unit, as a fraction of the image size.
    pub projection_scale: f64,
    /// Brightness of faces normal to the x, y and z object axes.
    pub shading: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            image_size: 32,
            channels: 3,
            projection_scale: 0.19,
            shading: [1.0, 0.7, 0.45],
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Argument(format!("image size {} is below 8", self.image_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Argument(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(self.projection_scale > 0.0 && self.projection_scale.is_finite()) {
            return Err(Error::Argument("projection scale must be positive".into()));
        }
        // every level must survive 8-bit quantisation as a nonzero value
        if self.shading.iter().any(|&s| !(s >= 1.0 / 255.0 && s <= 1.0)) {
            return Err(Error::Argument("shading levels must lie in [1/255, 1]".into()));
        }
        Ok(())
    }

    pub fn pixels_per_unit(&self) -> f64 {
        self.projection_scale * self.image_size as f64
    }
}

pub fn sample_shape<R: Rng + ?Sized>(rng: &mut R, p: f64) -> [bool; CELLS] {
    let mut occ = [false; CELLS];
    for cell in occ.iter_mut() {
        *cell = rng.random::<f64>() < p;
    }
    occ
}

/// Independent uniform pitch and yaw on `[0, 90]` degrees.
pub fn sample_view<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let pitch = rng.random_range(0.0..=MAX_ANGLE);
    let yaw = rng.random_range(0.0..=MAX_ANGLE);
    (pitch, yaw)
}

type Vec3 = [f64; 3];

/// Yaw about +y, then pitch about +x.
pub fn rotate(p: Vec3, pitch_deg: f64, yaw_deg: f64) -> Vec3 {
    let (sy, cy) = yaw_deg.to_radians().sin_cos();
    let (sp, cp) = pitch_deg.to_radians().sin_cos();
    let x1 = cy * p[0] + sy * p[2];
    let y1 = p[1];
    let z1 = -sy * p[0] + cy * p[2];
    [x1, cp * y1 - sp * z1, y1 * sp + cp * z1]
}

/// Maps a rotated point to continuous pixel coordinates `(col, row)`.
pub fn project(p: Vec3, cfg: &RenderConfig) -> (f64, f64) {
    let c = cfg.image_size as f64 / 2.0;
    let s = cfg.pixels_per_unit();
    (c + p[0] * s, c - p[1] * s)
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn raster_triangle(tri: [(f64, f64, f64); 3], shade: f32, size: usize, depth: &mut [f64], color: &mut [f32]) {
    let pts = tri.map(|(x, y, _)| (x, y));
    let area = edge(pts[0], pts[1], pts[2]);
    if area.abs() < 1e-12 {
        return;
    }
    let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
    let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((max_x - 0.5).floor().min(size as f64 - 1.0)).max(-1.0);
    let y1 = ((max_y - 0.5).floor().min(size as f64 - 1.0)).max(-1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    let eps = 1e-9 * area.abs();
    for row in y0..=y1 as usize {
        for col in x0..=x1 as usize {
            let p = (col as f64 + 0.5, row as f64 + 0.5);
            let w0 = edge(pts[1], pts[2], p) / area;
            let w1 = edge(pts[2], pts[0], p) / area;
            let w2 = edge(pts[0], pts[1], p) / area;
            if w0 < -eps || w1 < -eps || w2 < -eps {
                continue;
            }
            let z = w0 * tri[0].2 + w1 * tri[1].2 + w2 * tri[2].2;
            let idx = row * size + col;
            if z > depth[idx] {
                depth[idx] = z;
                color[idx] = shade;
            }
        }
    }
}

/// Renders one view. Pure function of its inputs.
pub fn render(spec: &SilhouetteSpec, cfg: &RenderConfig) -> Image {
    let size = cfg.image_size;
    let mut depth = vec![f64::NEG_INFINITY; size * size];
    let mut color = vec![0f32; size * size];
    let occupied = |x: isize, y: isize, z: isize| {
        (0..3).contains(&x) && (0..3).contains(&y) && (0..3).contains(&z) && spec.occupancy[cell_index(x as usize, y as usize, z as usize)]
    };
    for x in 0..3usize {
        for y in 0..3usize {
            for z in 0..3usize {
                if !spec.occupancy[cell_index(x, y, z)] {
                    continue;
                }
                let centre = [x as f64 - 1.0, y as f64 - 1.0, z as f64 - 1.0];
                for axis in 0..3 {
                    for sign in [-1isize, 1] {
                        let mut n = [0isize; 3];
                        n[axis] = sign;
                        if occupied(x as isize + n[0], y as isize + n[1], z as isize + n[2]) {
                            continue;
                        }
                        let normal = [n[0] as f64, n[1] as f64, n[2] as f64];
                        if rotate(normal, spec.pitch, spec.yaw)[2] <= 1e-12 {
                            continue;
                        }
                        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                        let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(da, db)| {
                            let mut p = centre;
                            p[axis] += 0.5 * normal[axis];
                            p[a] += 0.5 * da;
                            p[b] += 0.5 * db;
                            let r = rotate(p, spec.pitch, spec.yaw);
                            let (px, py) = project(r, cfg);
                            (px, py, r[2])
                        });
                        let shade = cfg.shading[axis] as f32;
                        raster_triangle([corners[0], corners[1], corners[2]], shade, size, &mut depth, &mut color);
                        raster_triangle([corners[0], corners[2], corners[3]], shade, size, &mut depth, &mut color);
                    }
                }
            }
        }
    }
    let values: Vec<f32> = color
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, cfg.channels))
        .collect();
    Image::from_unit(size, size, cfg.channels, &values).expect("render buffer size")
}

/// Settings for a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub n_packs: usize,
    pub n_withheld: usize,
    pub occupancy_p: f64,
    pub render: RenderConfig,
    pub sampler: PackSizeSampler,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_packs: 16_000,
            n_withheld: 1_000,
            occupancy_p: 1.0 / 6.0,
            render: RenderConfig::default(),
            sampler: PackSizeSampler::default(),
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        if self.n_packs == 0 {
            return Err(Error::Argument("at least one pack is required".into()));
        }
        if self.n_withheld >= self.n_packs {
            return Err(Error::Argument(format!(
                "cannot withhold {} of {} shapes",
                self.n_withheld, self.n_packs
            )));
        }
        if !(0.0..=1.0).contains(&self.occupancy_p) {
            return Err(Error::Argument("occupancy probability must lie in [0, 1]".into()));
        }
        if !(self.sampler.rate > 0.0 && self.sampler.rate.is_finite()) {
            return Err(Error::Argument("pack-size rate must be positive".into()));
        }
        Ok(())
    }

    pub fn domain_id(&self, index: usize) -> String {
        let width = self.n_packs.saturating_sub(1).to_string().len().max(5);
        format!("shape-{index:0width$}")
    }

    fn meta(&self, withheld: Vec<String>, generator: Option<String>) -> DatasetMeta {
        DatasetMeta {
            schema: SCHEMA_NAME.into(),
            height: self.render.image_size,
            width: self.render.image_size,
            channels: self.render.channels,
            factor_schema: Some(factor_schema()),
            withheld,
            generator,
        }
    }

    fn withheld_ids(&self) -> Vec<String> {
        let ids: Vec<String> = (0..self.n_packs).map(|i| self.domain_id(i)).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        choose_withheld(&refs, self.n_withheld, &mut rng_for(self.seed, "withheld"))
    }
}

/// One pack: a fresh shape seen from `4 + Poisson(8)` fresh views.
pub fn generate_pack(cfg: &GenerateConfig, index: usize) -> DomainPool {
    let mut rng = rng_for_item(cfg.seed, "generate", index as u64);
    let size = cfg.sampler.sample(&mut rng);
    let occupancy = sample_shape(&mut rng, cfg.occupancy_p);
    let mut images = Vec::with_capacity(size);
    let mut factors = Vec::with_capacity(size);
    for _ in 0..size {
        let (pitch, yaw) = sample_view(&mut rng);
        let spec = SilhouetteSpec { occupancy, pitch, yaw };
        images.push(render(&spec, &cfg.render));
        factors.push(spec.to_record());
    }
    DomainPool {
        images,
        factors: Some(factors),
    }
}

/// Generates the whole dataset in memory.
pub fn generate_silhouettes(cfg: &GenerateConfig) -> Result<PackDataset> {
    cfg.validate()?;
    let pools: Vec<DomainPool> = (0..cfg.n_packs).into_par_iter().map(|i| generate_pack(cfg, i)).collect();
    let domains: BTreeMap<String, DomainPool> =
        pools.into_iter().enumerate().map(|(i, p)| (cfg.domain_id(i), p)).collect();
    PackDataset::new(cfg.meta(cfg.withheld_ids(), None), domains)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub packs: usize,
    pub images: usize,
    pub withheld: usize,
}

/// Generates straight to disk in chunks, so memory stays bounded for large
/// pack counts. Produces the same files as `save_dataset(generate_silhouettes(..))`.
pub fn generate_to_disk(cfg: &GenerateConfig, root: &Path, generator: Option<String>) -> Result<GenerateSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    const CHUNK: usize = 256;
    let mut entries = Vec::with_capacity(cfg.n_packs);
    let mut images = 0;
    for start in (0..cfg.n_packs).step_by(CHUNK) {
        let end = (start + CHUNK).min(cfg.n_packs);
        let pools: Vec<DomainPool> = (start..end).into_par_iter().map(|i| generate_pack(cfg, i)).collect();
        for (offset, pool) in pools.iter().enumerate() {
            let id = cfg.domain_id(start + offset);
            write_domain(root, &id, pool)?;
            images += pool.images.len();
            entries.push(ManifestDomain {
                id,
                count: pool.images.len(),
            });
        }
    }
    let withheld = cfg.withheld_ids();
    let summary = GenerateSummary {
        packs: cfg.n_packs,
        images,
        withheld: withheld.len(),
    };
    Manifest::for_meta(&cfg.meta(withheld, generator), entries).write(root)?;
    Ok(summary)
}

/// Probe targets of one record: 27 occupancy bits and the two angles.
pub fn factor_targets(schema: &FactorSchema, record: &FactorRecord) -> Result<([f64; CELLS], [f64; 2])> {
    if schema.name != SCHEMA_NAME || schema.fields.len() != CELLS + 2 {
        return Err(Error::Schema(format!(
            "factor schema `{}` is not a silhouettes schema",
            schema.name
        )));
    }
    let spec = SilhouetteSpec::from_record(record)?;
    let mut shape = [0.0; CELLS];
    for (s, &o) in shape.iter_mut().zip(&spec.occupancy) {
        *s = if o { 1.0 } else { 0.0 };
    }
    Ok((shape, [spec.pitch, spec.yaw]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pack_data::{load_dataset, save_dataset};

    fn moments(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn zero_probability_gives_empty_shape() {
        let mut rng = rng_for(1, "shape");
        assert!(sample_shape(&mut rng, 0.0).iter().all(|c| !c));
    }

    #[test]
    fn occupancy_statistics() {
        let mut rng = rng_for(2, "shape");
        let counts: Vec<f64> = (0..10_000)
            .map(|_| sample_shape(&mut rng, 1.0 / 6.0).iter().filter(|&&c| c).count() as f64)
            .collect();
        let (mean, _) = moments(&counts);
        assert!((4.35..=4.65).contains(&mean), "mean {mean}");

        let empty = (0..100_000)
            .filter(|_| sample_shape(&mut rng, 1.0 / 6.0).iter().all(|c| !c))
            .count() as f64
            / 100_000.0;
        let expected = (5.0f64 / 6.0).powi(27);
        assert!((empty - expected).abs() <= 0.002, "empty fraction {empty} vs {expected}");
    }

    #[test]
    fn view_statistics() {
        let mut rng = rng_for(3, "view");
        let views: Vec<(f64, f64)> = (0..100_000).map(|_| sample_view(&mut rng)).collect();
        for angles in [views.iter().map(|v| v.0).collect::<Vec<_>>(), views.iter().map(|v| v.1).collect()] {
            assert!(angles.iter().all(|a| (0.0..=90.0).contains(a)));
            let (mean, var) = moments(&angles);
            assert!((44.5..=45.5).contains(&mean), "mean {mean}");
            assert!((660.0..=690.0).contains(&var), "variance {var}");
        }
    }

    #[test]
    fn empty_shape_renders_black() {
        let spec = SilhouetteSpec {
            occupancy: [false; CELLS],
            pitch: 30.0,
            yaw: 60.0,
        };
        let img = render(&spec, &RenderConfig::default());
        assert!(img.data.iter().all(|&b| b == 0));
    }

    #[test]
    fn centre_cube_projects_to_centred_square() {
        let mut occupancy = [false; CELLS];
        occupancy[cell_index(1, 1, 1)] = true;
        let spec = SilhouetteSpec {
            occupancy,
            pitch: 0.0,
            yaw: 0.0,
        };
        for size in [32usize, 48, 96] {
            let cfg = RenderConfig {
                image_size: size,
                ..RenderConfig::default()
            };
            let img = render(&spec, &cfg);
            // analytic corners of the front face
            let (left, top) = project([-0.5, 0.5, 0.5], &cfg);
            let (right, bottom) = project([0.5, -0.5, 0.5], &cfg);
            let mut bbox = (usize::MAX, usize::MAX, 0usize, 0usize);
            for y in 0..size {
                for x in 0..size {
                    if img.get(y, x, 0) > 0.0 {
                        bbox = (bbox.0.min(x), bbox.1.min(y), bbox.2.max(x), bbox.3.max(y));
                    }
                }
            }
            let close = |pixel: usize, edge: f64| (pixel as f64 + 0.5 - edge).abs() <= 1.0;
            assert!(close(bbox.0, left) && close(bbox.2, right), "{size}: {bbox:?} vs x {left}..{right}");
            assert!(close(bbox.1, top) && close(bbox.3, bottom), "{size}: {bbox:?} vs y {top}..{bottom}");
            // centred: equal margins on both sides
            assert_eq!(bbox.0, size - 1 - bbox.2);
            assert_eq!(bbox.1, size - 1 - bbox.3);
            // only the front face is visible head-on
            assert!((img.get(size / 2, size / 2, 0) - 0.45).abs() < 0.01);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let mut rng = rng_for(4, "r");
        let occupancy = sample_shape(&mut rng, 0.5);
        let spec = SilhouetteSpec {
            occupancy,
            pitch: 12.5,
            yaw: 77.0,
        };
        let cfg = RenderConfig::default();
        assert_eq!(render(&spec, &cfg), render(&spec, &cfg));
    }

    #[test]
    fn adding_a_cube_never_shrinks_the_silhouette() {
        let mut rng = rng_for(5, "mono");
        let cfg = RenderConfig::default();
        for _ in 0..200 {
            let occupancy = sample_shape(&mut rng, 0.3);
            let (pitch, yaw) = sample_view(&mut rng);
            let base = SilhouetteSpec { occupancy, pitch, yaw };
            let before = render(&base, &cfg).count_nonzero();
            let cell = rng.random_range(0..CELLS);
            let mut grown = base.clone();
            grown.occupancy[cell] = true;
            assert!(render(&grown, &cfg).count_nonzero() >= before);
        }
    }

    #[test]
    fn generated_dataset_structure() {
        let cfg = GenerateConfig {
            n_packs: 12,
            n_withheld: 3,
            render: RenderConfig {
                image_size: 16,
                channels: 1,
                ..RenderConfig::default()
            },
            seed: 9,
            ..GenerateConfig::default()
        };
        let ds = generate_silhouettes(&cfg).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.meta.withheld.len(), 3);
        let schema = ds.meta.factor_schema.clone().unwrap();
        for pool in ds.domains.values() {
            assert!(pool.images.len() >= 4);
            assert!(pool.images.iter().all(|i| i.dims() == (16, 16, 1)));
            let factors = pool.factors.as_ref().unwrap();
            let shapes: Vec<_> = factors.iter().map(|f| factor_targets(&schema, f).unwrap().0).collect();
            assert!(shapes.iter().all(|s| *s == shapes[0]));
            let views: Vec<_> = factors.iter().map(|f| factor_targets(&schema, f).unwrap().1).collect();
            assert!(views.windows(2).all(|w| w[0] != w[1]));
        }
        assert_eq!(generate_silhouettes(&cfg).unwrap(), ds);
    }

    #[test]
    fn single_pack_has_at_least_four_images() {
        let cfg = GenerateConfig {
            n_packs: 1,
            n_withheld: 0,
            seed: 1234,
            ..GenerateConfig::default()
        };
        let ds = generate_silhouettes(&cfg).unwrap();
        assert!(ds.domains.values().next().unwrap().images.len() >= 4);
    }

    #[test]
    fn default_config_matches_published_sizes() {
        let cfg = GenerateConfig::default();
        assert_eq!((cfg.n_packs, cfg.n_withheld), (16_000, 1_000));
        assert_eq!(cfg.sampler, PackSizeSampler { base: 4, rate: 8.0 });
        assert!((cfg.occupancy_p - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn disk_generation_matches_in_memory() {
        let cfg = GenerateConfig {
            n_packs: 5,
            n_withheld: 1,
            render: RenderConfig {
                image_size: 16,
                ..RenderConfig::default()
            },
            seed: 2,
            ..GenerateConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_to_disk(&cfg, a.path(), None).unwrap();
        let mem = generate_silhouettes(&cfg).unwrap();
        save_dataset(&mem, b.path()).unwrap();
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded, mem);
        assert_eq!(
            std::fs::read(a.path().join("manifest.json")).unwrap(),
            std::fs::read(b.path().join("manifest.json")).unwrap()
        );
    }

    #[test]
    fn factor_targets_split_record() {
        let schema = factor_schema();
        let empty = SilhouetteSpec {
            occupancy: [false; CELLS],
            pitch: 0.0,
            yaw: 0.0,
        };
        assert_eq!(factor_targets(&schema, &empty.to_record()).unwrap(), ([0.0; CELLS], [0.0, 0.0]));
        let full = SilhouetteSpec {
            occupancy: [true; CELLS],
            pitch: 10.0,
            yaw: 20.0,
        };
        assert_eq!(factor_targets(&schema, &full.to_record()).unwrap(), ([1.0; CELLS], [10.0, 20.0]));
        let other = FactorSchema {
            name: "fonts".into(),
            fields: vec!["x".into()],
        };
        assert!(matches!(factor_targets(&other, &full.to_record()), Err(Error::Schema(_))));
    }
}
