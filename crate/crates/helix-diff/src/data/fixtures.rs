//! Procedural fixture dataset: small textured images with geometric defects
//! and exact masks, written in the directory layout `load_dataset` expects.

use std::fs;
use std::path::Path;

use crate::data::{write_mask, write_ppm, BinaryMask, RGBImage};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const FIXTURE_SIZE: usize = 32;
/// Generator contract: every defect covers this many pixels, inclusive.
pub const DEFECT_AREA_MIN: usize = 9;
pub const DEFECT_AREA_MAX: usize = 256;

const CATEGORIES: [&str; 2] = ["checker", "stripes"];
const ANOMALY_TYPES: [&str; 4] = ["band", "blot", "notch", "slash"];

fn texture(category: &str, rng: &mut Rng) -> RGBImage {
    let size = FIXTURE_SIZE;
    let a = [
        rng.next_below(96) as u8 + 40,
        rng.next_below(96) as u8 + 40,
        rng.next_below(96) as u8 + 40,
    ];
    let b = [
        rng.next_below(96) as u8 + 150,
        rng.next_below(96) as u8 + 150,
        rng.next_below(96) as u8 + 150,
    ];
    let period = 8 + rng.next_below(5);
    let mut img = RGBImage::filled(size, size, a);
    for r in 0..size {
        for c in 0..size {
            let on = match category {
                "stripes" => (r / period) % 2 == 0,
                _ => ((r / period) + (c / period)) % 2 == 0,
            };
            if on {
                img.set_pixel(r, c, b);
            }
        }
    }
    img
}

fn paint_defect(
    anomaly_type: &str,
    img: &mut RGBImage,
    mask: &mut BinaryMask,
    rng: &mut Rng,
) {
    let size = FIXTURE_SIZE;
    let color = [
        rng.next_below(256) as u8,
        rng.next_below(256) as u8,
        rng.next_below(256) as u8,
    ];
    let mut mark = |r: usize, c: usize| {
        img.set_pixel(r, c, color);
        mask.set(r, c, 1);
    };
    match anomaly_type {
        "blot" => {
            let radius = 4 + rng.next_below(4) as isize; // 4..=7
            let cr = (radius + rng.next_below(size - 2 * radius as usize) as isize) as isize;
            let cc = (radius + rng.next_below(size - 2 * radius as usize) as isize) as isize;
            for r in 0..size as isize {
                for c in 0..size as isize {
                    if (r - cr) * (r - cr) + (c - cc) * (c - cc) <= radius * radius {
                        mark(r as usize, c as usize);
                    }
                }
            }
        }
        "slash" => {
            let thickness = 3 + rng.next_below(2); // 3..=4
            let start = rng.next_below(size / 2);
            let down = rng.next_below(2) == 0;
            for i in 0..size * 3 / 4 {
                let r = if down { start + i / 2 } else { size - 1 - (start + i / 2) };
                let c = size / 8 + i / 2;
                if r >= size || c >= size {
                    break;
                }
                for t in 0..thickness {
                    if r + t < size {
                        mark(r + t, c);
                    }
                }
            }
        }
        "notch" => {
            let h = 6 + rng.next_below(5); // 6..=10
            let w = 6 + rng.next_below(5);
            let r0 = rng.next_below(size - h);
            let c0 = rng.next_below(size - w);
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    mark(r, c);
                }
            }
        }
        _ => {
            // band: full-width horizontal strip.
            let h = 4 + rng.next_below(3); // 4..=6
            let r0 = rng.next_below(size - h);
            for r in r0..r0 + h {
                for c in 0..size {
                    mark(r, c);
                }
            }
        }
    }
}

/// Build one deterministic sample for stream `index` of `seed`.
pub fn make_sample(seed: u64, index: usize) -> (RGBImage, BinaryMask, &'static str, &'static str) {
    let combo = index % (CATEGORIES.len() * ANOMALY_TYPES.len());
    let category = CATEGORIES[combo / ANOMALY_TYPES.len()];
    let anomaly_type = ANOMALY_TYPES[combo % ANOMALY_TYPES.len()];
    let mut rng = Rng::derive(seed, index as u64);
    let mut img = texture(category, &mut rng);
    let mut mask = BinaryMask::zeros(FIXTURE_SIZE, FIXTURE_SIZE);
    paint_defect(anomaly_type, &mut img, &mut mask, &mut rng);
    (img, mask, category, anomaly_type)
}

/// Write `n` synthetic samples under `root`, deterministic per seed.
pub fn make_synthetic_fixtures(root: impl AsRef<Path>, seed: u64, n: usize) -> Result<()> {
    let root = root.as_ref();
    let mut per_dir = std::collections::BTreeMap::<(String, String), usize>::new();
    for i in 0..n {
        let (img, mask, category, anomaly_type) = make_sample(seed, i);
        let dir = root.join(category).join(anomaly_type);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let idx = per_dir
            .entry((category.to_string(), anomaly_type.to_string()))
            .or_insert(0);
        write_ppm(dir.join(format!("{idx:03}.ppm")), &img)?;
        write_mask(dir.join(format!("{idx:03}_mask.pgm")), &mask)?;
        *idx += 1;
    }
    Ok(())
}
