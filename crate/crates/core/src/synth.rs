//! Synthetic thorax phantoms: background, two elliptical lungs, and a
//! crescent of fluid pooled at the base of one lung. Masks carry physical
//! voxel spacing, so a 2D slab still has a real volume in milliliters.
//!
//! Generation is a pure function of `(params, case_index)`; cases can be
//! produced in any order or in parallel.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::rng;
use crate::tensor::Tensor;
use crate::train::LabeledExample;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid phantom params: {0}")]
    InvalidParams(String),
    #[error("effusion region degenerate after {0} attempts")]
    DegenerateGeometry(usize),
    #[error("mask volume: voxel count {len} does not match dims {dims:?}")]
    VoxelCount { len: usize, dims: (usize, usize, usize) },
    #[error("mask volume: voxel value {0} is not binary")]
    NonBinaryVoxel(u8),
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("refusing to write non-finite pixel value")]
    NonFinitePixel,
    #[error("manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Binary voxel grid with physical spacing, x-fastest storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    voxels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing_mm: (f64, f64, f64),
        voxels: Vec<u8>,
    ) -> Result<Self> {
        if voxels.len() != dims.0 * dims.1 * dims.2 {
            return Err(DataError::VoxelCount {
                len: voxels.len(),
                dims,
            });
        }
        if let Some(v) = voxels.iter().find(|v| **v > 1) {
            return Err(DataError::NonBinaryVoxel(*v));
        }
        Ok(Self {
            dims,
            spacing_mm,
            voxels,
        })
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        let (nx, ny, _) = self.dims;
        self.voxels[(z * ny + y) * nx + x] != 0
    }

    pub fn foreground_count(&self) -> usize {
        self.voxels.iter().filter(|v| **v != 0).count()
    }

    pub fn volume_ml(&self) -> f64 {
        let (sx, sy, sz) = self.spacing_mm;
        self.foreground_count() as f64 * sx * sy * sz / 1000.0
    }

    /// Binarize a `[1,H,W]` probability tensor at `p > 0.5`.
    pub fn from_probs(probs: &Tensor, spacing_mm: (f64, f64, f64)) -> Result<Self> {
        let shape = probs.shape();
        let (h, w) = match shape {
            [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => {
                return Err(DataError::InvalidParams(format!(
                    "expected a single-case probability tensor, got shape {shape:?}"
                )))
            }
        };
        let voxels = probs
            .values()
            .iter()
            .map(|p| u8::from(*p > 0.5))
            .collect();
        Self::new((w, h, 1), spacing_mm, voxels)
    }

    /// View as a binary `[1,H,W]` tensor for the training loops.
    pub fn to_tensor(&self) -> Tensor {
        let (nx, ny, nz) = self.dims;
        assert_eq!(nz, 1, "training tensors are single-slab");
        let values = self.voxels.iter().map(|v| f64::from(*v)).collect();
        Tensor::new(vec![1, ny, nx], values).expect("length checked at construction")
    }
}

/// Knobs of the phantom generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    /// (sx, sy, sz) in mm; sz is the slab thickness.
    pub spacing_mm: (f64, f64, f64),
    /// Effusion area as a fraction of the image, sampled uniformly.
    pub effusion_area_range: (f64, f64),
    pub noise_sigma: f64,
    /// (background, lung, effusion) intensities.
    pub intensity_levels: (f64, f64, f64),
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            spacing_mm: (1.0, 1.0, 5.0),
            effusion_area_range: (0.02, 0.10),
            noise_sigma: 0.1,
            intensity_levels: (0.2, 0.4, 0.8),
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(DataError::InvalidParams(format!(
                "image {h}x{w} too small for the phantom geometry"
            )));
        }
        let (lo, hi) = self.effusion_area_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return Err(DataError::InvalidParams(format!(
                "effusion_area_range ({lo}, {hi}) must satisfy 0 < min <= max < 0.5"
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::InvalidParams("noise_sigma < 0".into()));
        }
        let (sx, sy, sz) = self.spacing_mm;
        if sx <= 0.0 || sy <= 0.0 || sz <= 0.0 {
            return Err(DataError::InvalidParams("spacing must be positive".into()));
        }
        let (a, b, c) = self.intensity_levels;
        if a == b || b == c || a == c {
            return Err(DataError::InvalidParams(
                "intensity levels must be pairwise distinct".into(),
            ));
        }
        Ok(())
    }
}

/// One fully-specified case: image, reference mask, physical volume.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    /// `[1,H,W]` image tensor; intensities are f32-representable so file
    /// round trips are exact.
    pub image: Tensor,
    pub mask: MaskVolume,
    pub true_volume_ml: f64,
}

impl Case {
    pub fn to_labeled_example(&self) -> LabeledExample {
        LabeledExample {
            image: self.image.clone(),
            mask: self.mask.to_tensor(),
        }
    }
}

/// An unlabeled case exposes the image only.
#[derive(Debug, Clone)]
pub struct UnlabeledCase {
    pub id: String,
    pub image: Tensor,
}

#[derive(Debug, Clone)]
pub struct SplitSet {
    pub labeled: Vec<Case>,
    pub unlabeled: Vec<UnlabeledCase>,
    pub test: Vec<Case>,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

fn case_id(index: usize) -> String {
    format!("case_{index:05}")
}

/// Pixels of the bottom cap `{inside ellipse, y >= t}` in row-major order.
fn cap_pixels(e: &Ellipse, t: f64, h: usize, w: usize) -> Vec<(usize, usize)> {
    let y_lo = (e.cy - e.ry).floor().max(0.0) as usize;
    let y_hi = ((e.cy + e.ry).ceil() as usize).min(h.saturating_sub(1));
    let x_lo = (e.cx - e.rx).floor().max(0.0) as usize;
    let x_hi = ((e.cx + e.rx).ceil() as usize).min(w.saturating_sub(1));
    let mut pixels = Vec::new();
    for y in y_lo..=y_hi {
        if (y as f64) < t {
            continue;
        }
        for x in x_lo..=x_hi {
            if e.contains(x as f64, y as f64) {
                pixels.push((y, x));
            }
        }
    }
    pixels
}

fn cap_count(e: &Ellipse, t: f64, h: usize, w: usize) -> usize {
    cap_pixels(e, t, h, w).len()
}

/// Generate the case at `case_index` with the area fraction drawn from the
/// params' full range.
pub fn generate_case(params: &PhantomParams, case_index: usize) -> Result<Case> {
    generate_case_in_range(params, case_index, params.effusion_area_range)
}

/// Same, with an explicit area-fraction range (used for stratified test
/// splits).
pub fn generate_case_in_range(
    params: &PhantomParams,
    case_index: usize,
    area_range: (f64, f64),
) -> Result<Case> {
    params.validate()?;
    let (h, w) = params.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = rng::stream(rng::derive_seed(params.seed, "phantom"), case_index as u64);

    let frac = rng::uniform_in(&mut rng, area_range.0, area_range.1);
    let target = ((frac * hf * wf).round() as usize).max(1);

    const MAX_ATTEMPTS: usize = 100;
    let mut chosen: Option<(Ellipse, Ellipse, Vec<(usize, usize)>)> = None;
    for _ in 0..MAX_ATTEMPTS {
        let jitter = |rng: &mut _, base: f64, rel: f64| base * (1.0 + rng::uniform_in(rng, -rel, rel));
        let left = Ellipse {
            cx: jitter(&mut rng, 0.32 * wf, 0.06),
            cy: jitter(&mut rng, 0.45 * hf, 0.06),
            rx: jitter(&mut rng, 0.18 * wf, 0.10),
            ry: jitter(&mut rng, 0.30 * hf, 0.10),
        };
        let right = Ellipse {
            cx: jitter(&mut rng, 0.68 * wf, 0.06),
            cy: jitter(&mut rng, 0.45 * hf, 0.06),
            rx: jitter(&mut rng, 0.18 * wf, 0.10),
            ry: jitter(&mut rng, 0.30 * hf, 0.10),
        };
        let on_left = rng::uniform(&mut rng) < 0.5;
        let lung = if on_left { &left } else { &right };

        // Fluid pool: the bottom cap of an ellipse slightly larger than the
        // lung, scaled up when the target area needs the headroom.
        let base_area = std::f64::consts::PI * lung.rx * lung.ry;
        let scale = (2.6 * target as f64 / base_area).sqrt().max(1.25);
        let pool = Ellipse {
            cx: lung.cx,
            cy: lung.cy,
            rx: lung.rx * scale,
            ry: lung.ry * scale,
        };

        // Bisect the chord height until the rasterized cap covers the
        // target, then trim the excess off the top row so the foreground
        // count equals the target exactly.
        let (mut lo, mut hi) = (pool.cy - pool.ry, pool.cy + pool.ry);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if cap_count(&pool, mid, h, w) >= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut pixels = cap_pixels(&pool, lo, h, w);
        if pixels.len() < target {
            // Headroom exhausted (clipped by the image border); retry with
            // fresh geometry.
            continue;
        }
        let excess = pixels.len() - target;
        pixels.drain(..excess);
        if pixels.is_empty() {
            continue;
        }
        chosen = Some((left, right, pixels));
        break;
    }
    let (left, right, effusion_pixels) =
        chosen.ok_or(DataError::DegenerateGeometry(MAX_ATTEMPTS))?;

    let (bg, lung_level, effusion_level) = params.intensity_levels;
    let mut image = vec![bg; h * w];
    let mut voxels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            if left.contains(x as f64, y as f64) || right.contains(x as f64, y as f64) {
                image[y * w + x] = lung_level;
            }
        }
    }
    for (y, x) in &effusion_pixels {
        image[y * w + x] = effusion_level;
        voxels[y * w + x] = 1;
    }
    if params.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            *v += params.noise_sigma * rng::normal(&mut rng);
        }
    }
    // Store at f32 precision so the on-disk format round-trips exactly.
    for v in image.iter_mut() {
        *v = f64::from(*v as f32);
    }

    let mask = MaskVolume::new((w, h, 1), params.spacing_mm, voxels)?;
    let true_volume_ml = mask.volume_ml();
    Ok(Case {
        id: case_id(case_index),
        image: Tensor::new(vec![1, h, w], image).expect("length consistent"),
        mask,
        true_volume_ml,
    })
}

/// Generate disjoint labeled / unlabeled / test splits. Test cases are
/// stratified: the area range is cut into three equal sub-ranges and test
/// case `j` samples from sub-range `j * 3 / n_test`, so volume terciles are
/// populated by construction.
pub fn generate_split(
    params: &PhantomParams,
    n_labeled: usize,
    n_unlabeled: usize,
    n_test: usize,
) -> Result<SplitSet> {
    params.validate()?;
    if n_labeled + n_test == 0 {
        return Err(DataError::InvalidParams(
            "need at least one labeled or test case".into(),
        ));
    }
    let labeled = (0..n_labeled)
        .map(|i| generate_case(params, i))
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = (0..n_unlabeled)
        .map(|i| {
            generate_case(params, n_labeled + i).map(|case| UnlabeledCase {
                id: case.id,
                image: case.image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = params.effusion_area_range;
    let span = (hi - lo) / 3.0;
    // Interior boundaries are inset by 5% of a tercile so the volume order
    // of the groups is strict even after rasterization rounding.
    let inset = 0.05 * span;
    let test = (0..n_test)
        .map(|j| {
            let tercile = (j * 3 / n_test).min(2);
            let range_lo = lo + span * tercile as f64 + if tercile > 0 { inset } else { 0.0 };
            let range_hi = lo + span * (tercile + 1) as f64 - if tercile < 2 { inset } else { 0.0 };
            generate_case_in_range(params, n_labeled + n_unlabeled + j, (range_lo, range_hi))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitSet {
        labeled,
        unlabeled,
        test,
    })
}

// ---- on-disk formats ----
//
// Mask:  "SSV1" | u32 version=1 | u32 nx,ny,nz | f64 sx,sy,sz | u8 voxels
// Image: "SSF1" | same header | f32 pixels
// All little-endian, x-fastest payload order.

const MASK_MAGIC: &[u8; 4] = b"SSV1";
const IMAGE_MAGIC: &[u8; 4] = b"SSF1";
const FORMAT_VERSION: u32 = 1;

fn write_header(
    out: &mut impl Write,
    magic: &[u8; 4],
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Result<()> {
    out.write_all(magic)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for d in [dims.0, dims.1, dims.2] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in [spacing.0, spacing.1, spacing.2] {
        out.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

fn read_header(
    r: &mut impl Read,
    magic: &'static [u8; 4],
    expected: &'static str,
) -> Result<((usize, usize, usize), (f64, f64, f64))> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)
        .map_err(|_| DataError::Truncated("magic"))?;
    if &found != magic {
        return Err(DataError::BadMagic { expected, found });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| DataError::Truncated("version"))?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        r.read_exact(&mut b4)
            .map_err(|_| DataError::Truncated("dims"))?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let mut b8 = [0u8; 8];
    let mut spacing = [0f64; 3];
    for s in spacing.iter_mut() {
        r.read_exact(&mut b8)
            .map_err(|_| DataError::Truncated("spacing"))?;
        *s = f64::from_le_bytes(b8);
    }
    Ok((
        (dims[0], dims[1], dims[2]),
        (spacing[0], spacing[1], spacing[2]),
    ))
}

pub fn write_mask(path: &Path, mask: &MaskVolume) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut out, MASK_MAGIC, mask.dims, mask.spacing_mm)?;
    out.write_all(&mask.voxels)?;
    out.flush()?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dims, spacing) = read_header(&mut r, MASK_MAGIC, "SSV1")?;
    let n = dims.0 * dims.1 * dims.2;
    let mut voxels = vec![0u8; n];
    r.read_exact(&mut voxels)
        .map_err(|_| DataError::Truncated("voxels"))?;
    MaskVolume::new(dims, spacing, voxels)
}

/// Write a `[1,H,W]` image with its spacing; pixels are stored as f32.
pub fn write_image(path: &Path, image: &Tensor, spacing_mm: (f64, f64, f64)) -> Result<()> {
    let shape = image.shape();
    let (h, w) = match shape {
        [1, h, w] => (*h, *w),
        _ => {
            return Err(DataError::InvalidParams(format!(
                "image tensor must be [1,H,W], got {shape:?}"
            )))
        }
    };
    if !image.values().iter().all(|v| v.is_finite()) {
        return Err(DataError::NonFinitePixel);
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut out, IMAGE_MAGIC, (w, h, 1), spacing_mm)?;
    for v in image.values() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<(Tensor, (f64, f64, f64))> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dims, spacing) = read_header(&mut r, IMAGE_MAGIC, "SSF1")?;
    let (nx, ny, nz) = dims;
    if nz != 1 {
        return Err(DataError::InvalidParams(format!(
            "expected single-slab image, got nz={nz}"
        )));
    }
    let n = nx * ny;
    let mut values = Vec::with_capacity(n);
    let mut b = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut b)
            .map_err(|_| DataError::Truncated("pixels"))?;
        values.push(f64::from(f32::from_le_bytes(b)));
    }
    Ok((
        Tensor::new(vec![1, ny, nx], values).expect("length consistent"),
        spacing,
    ))
}

// ---- dataset manifest ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Labeled,
    Unlabeled,
    Test,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Labeled => "labeled",
            SplitTag::Unlabeled => "unlabeled",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    /// `None` for unlabeled cases (written as `-`).
    pub mask_path: Option<String>,
    pub split: SplitTag,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            e.id,
            e.image_path,
            e.mask_path.as_deref().unwrap_or("-"),
            e.split.as_str()
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DataError::BadManifest {
                line: i + 1,
                reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let split = match fields[3] {
            "labeled" => SplitTag::Labeled,
            "unlabeled" => SplitTag::Unlabeled,
            "test" => SplitTag::Test,
            other => {
                return Err(DataError::BadManifest {
                    line: i + 1,
                    reason: format!("unknown split tag {other:?}"),
                })
            }
        };
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            image_path: fields[1].to_string(),
            mask_path: (fields[2] != "-").then(|| fields[2].to_string()),
            split,
        });
    }
    Ok(entries)
}

/// Write a full split to `dir` (images/, masks/, manifest.tsv) and return the
/// manifest path. Paths in the manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, split: &SplitSet) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::new();
    let write_case = |case: &Case, tag: SplitTag, entries: &mut Vec<ManifestEntry>| -> Result<()> {
        let image_rel = format!("images/{}.ssf", case.id);
        let mask_rel = format!("masks/{}.ssv", case.id);
        write_image(&dir.join(&image_rel), &case.image, case.mask.spacing_mm)?;
        write_mask(&dir.join(&mask_rel), &case.mask)?;
        entries.push(ManifestEntry {
            id: case.id.clone(),
            image_path: image_rel,
            mask_path: Some(mask_rel),
            split: tag,
        });
        Ok(())
    };
    for case in &split.labeled {
        write_case(case, SplitTag::Labeled, &mut entries)?;
    }
    for case in &split.unlabeled {
        let image_rel = format!("images/{}.ssf", case.id);
        // Unlabeled cases expose images only; no mask is written.
        write_image(
            &dir.join(&image_rel),
            &case.image,
            PhantomParams::default().spacing_mm,
        )?;
        entries.push(ManifestEntry {
            id: case.id.clone(),
            image_path: image_rel,
            mask_path: None,
            split: SplitTag::Unlabeled,
        });
    }
    for case in &split.test {
        write_case(case, SplitTag::Test, &mut entries)?;
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_case_has_exact_intensities_and_is_threshold_separable() {
        let params = PhantomParams {
            noise_sigma: 0.0,
            ..PhantomParams::default()
        };
        let case = generate_case(&params, 0).unwrap();
        let effusion = f64::from(0.8f32);
        for (i, v) in case.image.values().iter().enumerate() {
            let inside = case.mask.voxels()[i] != 0;
            if inside {
                assert_eq!(*v, effusion);
            } else {
                assert!(*v < 0.5);
            }
            assert_eq!(*v > 0.5, inside);
        }
    }

    #[test]
    fn generation_is_deterministic_per_index() {
        let params = PhantomParams::default();
        let a = generate_case(&params, 3).unwrap();
        let b = generate_case(&params, 3).unwrap();
        assert_eq!(a.image.values(), b.image.values());
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.true_volume_ml, b.true_volume_ml);
        let c = generate_case(&params, 4).unwrap();
        assert_ne!(a.mask.voxels(), c.mask.voxels());
    }

    #[test]
    fn seed_changes_geometry() {
        let a = generate_case(&PhantomParams::default(), 0).unwrap();
        let b = generate_case(
            &PhantomParams {
                seed: 1,
                ..PhantomParams::default()
            },
            0,
        )
        .unwrap();
        assert_ne!(a.mask.voxels(), b.mask.voxels());
    }

    #[test]
    fn fixed_fraction_hits_expected_volume_within_rasterization_slack() {
        let params = PhantomParams {
            effusion_area_range: (0.05, 0.05),
            spacing_mm: (1.0, 1.0, 5.0),
            ..PhantomParams::default()
        };
        for idx in 0..10 {
            let case = generate_case(&params, idx).unwrap();
            let expect = 0.05 * 64.0 * 64.0 * 5.0 / 1000.0; // 1.024 mL
            let rel = (case.true_volume_ml - expect).abs() / expect;
            assert!(
                rel < 0.15,
                "case {idx}: volume {} vs expected {expect} (rel {rel})",
                case.true_volume_ml
            );
        }
    }

    #[test]
    fn volume_bookkeeping_is_exact() {
        let params = PhantomParams::default();
        for idx in 0..20 {
            let case = generate_case(&params, idx).unwrap();
            let (sx, sy, sz) = case.mask.spacing_mm;
            let recomputed = case.mask.foreground_count() as f64 * sx * sy * sz / 1000.0;
            assert_eq!(case.true_volume_ml, recomputed);
            assert!(case.mask.foreground_count() > 0);
        }
    }

    #[test]
    fn split_ids_are_disjoint_and_counted() {
        let split = generate_split(&PhantomParams::default(), 10, 90, 30).unwrap();
        let mut ids: Vec<&str> = split
            .labeled
            .iter()
            .map(|c| c.id.as_str())
            .chain(split.unlabeled.iter().map(|c| c.id.as_str()))
            .chain(split.test.iter().map(|c| c.id.as_str()))
            .collect();
        assert_eq!(ids.len(), 130);
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 130);
    }

    #[test]
    fn empty_labeled_split_is_allowed() {
        let split = generate_split(&PhantomParams::default(), 0, 5, 3).unwrap();
        assert!(split.labeled.is_empty());
        assert_eq!(split.unlabeled.len(), 5);
        assert_eq!(split.test.len(), 3);
    }

    #[test]
    fn test_split_terciles_hold_equal_counts_in_volume_order() {
        let split = generate_split(&PhantomParams::default(), 0, 0, 30).unwrap();
        let mut volumes: Vec<(usize, f64)> = split
            .test
            .iter()
            .enumerate()
            .map(|(j, c)| (j, c.true_volume_ml))
            .collect();
        // Construction tercile of case j.
        let tercile = |j: usize| j * 3 / 30;
        volumes.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        for (rank, (j, _)) in volumes.iter().enumerate() {
            assert_eq!(rank * 3 / 30, tercile(*j), "case {j} at rank {rank}");
        }
    }

    #[test]
    fn mask_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_case(&PhantomParams::default(), 1).unwrap();
        let path = dir.path().join("m.ssv");
        write_mask(&path, &case.mask).unwrap();
        let loaded = read_mask(&path).unwrap();
        assert_eq!(loaded, case.mask);
        let path2 = dir.path().join("m2.ssv");
        write_mask(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn mask_corruption_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_case(&PhantomParams::default(), 2).unwrap();
        let path = dir.path().join("m.ssv");
        write_mask(&path, &case.mask).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0x55;
        let bad = dir.path().join("bad.ssv");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(read_mask(&bad), Err(DataError::BadMagic { .. })));

        let mut short = std::fs::read(&path).unwrap();
        short.truncate(short.len() - 7);
        std::fs::write(&bad, &short).unwrap();
        assert!(matches!(read_mask(&bad), Err(DataError::Truncated(_))));

        let mut nonbinary = std::fs::read(&path).unwrap();
        let last = nonbinary.len() - 1;
        nonbinary[last] = 9;
        std::fs::write(&bad, &nonbinary).unwrap();
        assert!(matches!(read_mask(&bad), Err(DataError::NonBinaryVoxel(9))));
    }

    #[test]
    fn image_round_trip_is_exact_and_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_case(&PhantomParams::default(), 3).unwrap();
        let path = dir.path().join("i.ssf");
        write_image(&path, &case.image, case.mask.spacing_mm).unwrap();
        let (loaded, spacing) = read_image(&path).unwrap();
        assert_eq!(loaded.values(), case.image.values());
        assert_eq!(spacing, case.mask.spacing_mm);

        let mut bad = case.image.clone();
        bad.values_mut()[0] = f64::NAN;
        assert!(matches!(
            write_image(&dir.path().join("n.ssf"), &bad, (1.0, 1.0, 1.0)),
            Err(DataError::NonFinitePixel)
        ));
    }

    #[test]
    fn image_truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_case(&PhantomParams::default(), 4).unwrap();
        let path = dir.path().join("i.ssf");
        write_image(&path, &case.image, case.mask.spacing_mm).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_image(&path), Err(DataError::Truncated(_))));
    }

    #[test]
    fn manifest_round_trip_and_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_split(&PhantomParams::default(), 2, 3, 2).unwrap();
        let manifest_path = write_dataset(dir.path(), &split).unwrap();
        let entries = read_manifest(&manifest_path).unwrap();
        assert_eq!(entries.len(), 7);
        assert_eq!(
            entries.iter().filter(|e| e.split == SplitTag::Unlabeled).count(),
            3
        );
        assert!(entries
            .iter()
            .filter(|e| e.split == SplitTag::Unlabeled)
            .all(|e| e.mask_path.is_none()));
        for e in &entries {
            let (img, _) = read_image(&dir.path().join(&e.image_path)).unwrap();
            assert_eq!(img.shape(), &[1, 64, 64]);
            if let Some(mask_rel) = &e.mask_path {
                let mask = read_mask(&dir.path().join(mask_rel)).unwrap();
                assert_eq!(mask.dims, (64, 64, 1));
            }
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad_range = PhantomParams {
            effusion_area_range: (0.3, 0.2),
            ..PhantomParams::default()
        };
        assert!(bad_range.validate().is_err());
        let bad_levels = PhantomParams {
            intensity_levels: (0.2, 0.2, 0.8),
            ..PhantomParams::default()
        };
        assert!(bad_levels.validate().is_err());
    }
}
