//! Dataset ingestion and the preprocessing that turns an image/mask pair
//! into the model's training inputs: coarse grid mask, masked reference
//! image, and the scaled joint latent.

pub mod fixtures;
pub mod pnm;

use std::fs;
use std::path::{Path, PathBuf};

use crate::diffusion::JointLatent;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use pnm::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm,
    GrayImage, RGBImage,
};

/// Per-pixel binary map; 0/1 in memory, 0/255 on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Validation(format!(
                "mask {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::Validation("mask pixels must be 0 or 1".into()));
        }
        Ok(BinaryMask {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    /// Threshold an 8-bit image at 128 (>= 128 becomes 1).
    pub fn from_gray(gray: &GrayImage) -> Self {
        BinaryMask {
            width: gray.width,
            height: gray.height,
            pixels: gray.pixels.iter().map(|&p| u8::from(p >= 128)).collect(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| p * 255).collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn active_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    Ok(BinaryMask::from_gray(&read_pgm(path)?))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_pgm(path, &mask.to_gray())
}

/// Coarse K x K grid of anomalous cells plus its image-resolution rendering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMask {
    pub k: usize,
    /// Row-major K x K cell activations.
    pub grid: Vec<bool>,
    pub upsampled: BinaryMask,
}

impl RawMask {
    pub fn cell(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.k + col]
    }
}

/// Cell boundaries sit at floor(i * extent / k); the last cell absorbs the
/// remainder for non-divisible sizes.
fn cell_bounds(extent: usize, k: usize) -> Vec<usize> {
    (0..=k).map(|i| i * extent / k).collect()
}

/// Mark each K x K cell active when it contains at least `min_fraction`
/// (default 0, meaning any) anomalous pixels, and render the grid back at
/// image resolution.
pub fn compute_raw_mask(mask: &BinaryMask, k: usize) -> Result<RawMask> {
    compute_raw_mask_with(mask, k, 0.0)
}

pub fn compute_raw_mask_with(mask: &BinaryMask, k: usize, min_fraction: f64) -> Result<RawMask> {
    if k < 1 || k > mask.width.min(mask.height) {
        return Err(Error::Config(format!(
            "grid size {k} out of range for {}x{} mask",
            mask.width, mask.height
        )));
    }
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(Error::Config(format!(
            "min_fraction {min_fraction} must lie in [0, 1]"
        )));
    }
    let rows = cell_bounds(mask.height, k);
    let cols = cell_bounds(mask.width, k);
    let mut grid = vec![false; k * k];
    let mut upsampled = BinaryMask::zeros(mask.width, mask.height);
    for ci in 0..k {
        for cj in 0..k {
            let area = (rows[ci + 1] - rows[ci]) * (cols[cj + 1] - cols[cj]);
            let mut count = 0usize;
            for r in rows[ci]..rows[ci + 1] {
                for c in cols[cj]..cols[cj + 1] {
                    count += mask.get(r, c) as usize;
                }
            }
            let threshold = ((min_fraction * area as f64).ceil() as usize).max(1);
            let active = count >= threshold;
            grid[ci * k + cj] = active;
            if active {
                for r in rows[ci]..rows[ci + 1] {
                    for c in cols[cj]..cols[cj + 1] {
                        upsampled.set(r, c, 1);
                    }
                }
            }
        }
    }
    Ok(RawMask {
        k,
        grid,
        upsampled,
    })
}

/// Keep the pixels inside active raw-mask cells, zero everything else.
/// Resolution is preserved so the reference stays spatially aligned.
pub fn crop_reference(image: &RGBImage, raw: &RawMask) -> Result<RGBImage> {
    if image.width != raw.upsampled.width || image.height != raw.upsampled.height {
        return Err(Error::Validation(format!(
            "reference crop: image {}x{} vs raw mask {}x{}",
            image.width, image.height, raw.upsampled.width, raw.upsampled.height
        )));
    }
    let mut out = image.clone();
    for (i, &m) in raw.upsampled.pixels.iter().enumerate() {
        if m == 0 {
            out.pixels[3 * i..3 * i + 3].fill(0);
        }
    }
    Ok(out)
}

/// One training record with its derived preprocessing products.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub image: RGBImage,
    pub mask: BinaryMask,
    pub raw_mask: RawMask,
    pub reference: RGBImage,
    pub prompt: String,
    pub category: String,
    pub anomaly_type: String,
}

impl SamplePair {
    pub fn from_parts(
        image: RGBImage,
        mask: BinaryMask,
        k: usize,
        prompt: String,
        category: String,
        anomaly_type: String,
    ) -> Result<Self> {
        if image.width != mask.width || image.height != mask.height {
            return Err(Error::Validation(format!(
                "image {}x{} and mask {}x{} disagree",
                image.width, image.height, mask.width, mask.height
            )));
        }
        if prompt.trim().is_empty() {
            return Err(Error::Validation("prompt must be non-empty".into()));
        }
        let raw_mask = compute_raw_mask(&mask, k)?;
        let reference = crop_reference(&image, &raw_mask)?;
        Ok(SamplePair {
            image,
            mask,
            raw_mask,
            reference,
            prompt,
            category,
            anomaly_type,
        })
    }
}

fn byte_to_signed(v: u8) -> f64 {
    2.0 * v as f64 / 255.0 - 1.0
}

fn signed_to_byte(v: f64) -> u8 {
    let c = v.clamp(-1.0, 1.0);
    (255.0 * (c + 1.0) / 2.0).round() as u8
}

/// Nearest-neighbour index map from `dst` positions into `src` positions.
fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    (0..dst).map(|i| i * src / dst).collect()
}

pub fn resize_rgb_nearest(image: &RGBImage, size: usize) -> RGBImage {
    let rows = nearest_indices(image.height, size);
    let cols = nearest_indices(image.width, size);
    let mut out = RGBImage::filled(size, size, [0, 0, 0]);
    for (r, &sr) in rows.iter().enumerate() {
        for (c, &sc) in cols.iter().enumerate() {
            out.set_pixel(r, c, image.pixel(sr, sc));
        }
    }
    out
}

pub fn resize_mask_nearest(mask: &BinaryMask, size: usize) -> BinaryMask {
    let rows = nearest_indices(mask.height, size);
    let cols = nearest_indices(mask.width, size);
    let mut out = BinaryMask::zeros(size, size);
    for (r, &sr) in rows.iter().enumerate() {
        for (c, &sc) in cols.iter().enumerate() {
            out.set(r, c, mask.get(sr, sc));
        }
    }
    out
}

/// Scale an RGB image to a `[1, 3, size, size]` tensor in [-1, 1].
pub fn image_to_latent(image: &RGBImage, size: usize) -> Tensor {
    let resized = resize_rgb_nearest(image, size);
    let mut data = vec![0.0; 3 * size * size];
    for ch in 0..3 {
        for r in 0..size {
            for c in 0..size {
                data[(ch * size + r) * size + c] =
                    byte_to_signed(resized.pixel(r, c)[ch]);
            }
        }
    }
    Tensor::from_vec(vec![1, 3, size, size], data)
}

/// Resize a mask to a `[1, 1, size, size]` tensor keeping raw {0, 1}
/// values; this is the control-map input format.
pub fn mask_to_control(mask: &BinaryMask, size: usize) -> Tensor {
    let resized = resize_mask_nearest(mask, size);
    let data = resized.pixels.iter().map(|&p| p as f64).collect();
    Tensor::from_vec(vec![1, 1, size, size], data)
}

/// Map a mask to a `[1, 1, size, size]` tensor with {0 -> -1, 1 -> +1}.
pub fn mask_to_latent(mask: &BinaryMask, size: usize) -> Tensor {
    let resized = resize_mask_nearest(mask, size);
    let data = resized
        .pixels
        .iter()
        .map(|&p| if p == 1 { 1.0 } else { -1.0 })
        .collect();
    Tensor::from_vec(vec![1, 1, size, size], data)
}

/// Assemble the clean (t = 0) joint latent for one sample.
pub fn assemble_latent(sample: &SamplePair, size: usize) -> Result<JointLatent> {
    JointLatent::new(
        image_to_latent(&sample.image, size),
        mask_to_latent(&sample.mask, size),
        0,
    )
}

/// Decode denoised latents back to an image and a mask. The image channel
/// maps through round(255 (v+1)/2) after clamping; the annotation channel
/// thresholds at zero.
pub fn decode_outputs(z0_image: &Tensor, z0_annot: &Tensor) -> Result<(RGBImage, BinaryMask)> {
    if z0_image.ndim() != 3 || z0_image.shape[0] != 3 {
        return Err(Error::Dimension(format!(
            "decode expects image latent [3,h,w], got {:?}",
            z0_image.shape
        )));
    }
    if z0_annot.ndim() != 3 || z0_annot.shape[0] != 1 || z0_annot.shape[1..] != z0_image.shape[1..]
    {
        return Err(Error::Dimension(format!(
            "decode expects annotation latent [1,{},{}], got {:?}",
            z0_image.shape[1], z0_image.shape[2], z0_annot.shape
        )));
    }
    let (h, w) = (z0_image.shape[1], z0_image.shape[2]);
    let mut image = RGBImage::filled(w, h, [0, 0, 0]);
    for r in 0..h {
        for c in 0..w {
            let px = [
                signed_to_byte(z0_image.data[(r * w) + c]),
                signed_to_byte(z0_image.data[(h * w) + r * w + c]),
                signed_to_byte(z0_image.data[(2 * h * w) + r * w + c]),
            ];
            image.set_pixel(r, c, px);
        }
    }
    let mask_pixels = z0_annot.data.iter().map(|&v| u8::from(v > 0.0)).collect();
    let mask = BinaryMask::new(w, h, mask_pixels)?;
    Ok((image, mask))
}

/// A `SKIP <path> <reason>` line per file that was passed over.
#[derive(Debug, Clone, Default)]
pub struct SkipReport {
    pub lines: Vec<String>,
}

impl SkipReport {
    fn push(&mut self, path: &Path, reason: &str) {
        self.lines.push(format!("SKIP {} {reason}", path.display()));
    }
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Load `root/<category>/<anomaly_type>/NNN.ppm` + `NNN_mask.pgm` pairs.
/// Pairs come back lexicographically sorted; preprocessing runs eagerly.
pub fn load_dataset(root: impl AsRef<Path>, k: usize) -> Result<(Vec<SamplePair>, SkipReport)> {
    let root = root.as_ref();
    let mut samples = Vec::new();
    let mut report = SkipReport::default();
    for category_dir in sorted_dirs(root)? {
        let category = category_dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .to_string();
        for type_dir in sorted_dirs(&category_dir)? {
            let anomaly_type = type_dir
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .to_string();
            let prompt_path = type_dir.join("prompt.txt");
            let prompt = if prompt_path.exists() {
                fs::read_to_string(&prompt_path)
                    .map_err(|e| Error::io(prompt_path.display().to_string(), e))?
                    .trim()
                    .to_string()
            } else {
                format!("{category} {anomaly_type}")
            };
            let mut images: Vec<PathBuf> = fs::read_dir(&type_dir)
                .map_err(|e| Error::io(type_dir.display().to_string(), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension().map(|x| x == "ppm").unwrap_or(false)
                        && !p
                            .file_stem()
                            .map(|s| s.to_string_lossy().ends_with("_mask"))
                            .unwrap_or(false)
                })
                .collect();
            images.sort();
            for image_path in images {
                let stem = image_path.file_stem().unwrap().to_string_lossy().to_string();
                let mask_path = type_dir.join(format!("{stem}_mask.pgm"));
                if !mask_path.exists() {
                    report.push(&image_path, "missing mask");
                    continue;
                }
                let image = read_ppm(&image_path)?;
                let mask = read_mask(&mask_path)?;
                samples.push(SamplePair::from_parts(
                    image,
                    mask,
                    k,
                    prompt.clone(),
                    category.clone(),
                    anomaly_type.clone(),
                )?);
            }
        }
    }
    if samples.is_empty() {
        report.push(root, "no samples found");
    }
    Ok((samples, report))
}
