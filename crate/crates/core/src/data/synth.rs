//! Procedural three-attribute images.
//!
//! Each image has a vertical two-colour gradient background and up to three
//! overlays on disjoint, left-right symmetric regions:
//! `A0` dark stripes across the top third, `A1` a white 3-pixel frame and
//! `A2` a yellow disk at the centre.

use std::fs;
use std::path::Path;

use super::manifest::{Manifest, ManifestEntry};
use super::netpbm::{write_raster, Raster};
use crate::error::{Error, Result};
use crate::rng::SatRng;

pub const N_ATTRIBUTES: usize = 3;
pub const ATTRIBUTE_NAMES: [&str; N_ATTRIBUTES] = ["A0", "A1", "A2"];
pub const SUPPORTED_SIZES: [usize; 2] = [32, 64];

const BORDER: usize = 3;
const STRIPE_RGB: [u8; 3] = [10, 10, 10];
const FRAME_RGB: [u8; 3] = [255, 255, 255];
const DISK_RGB: [u8; 3] = [250, 230, 20];

fn check_size(size: usize) -> Result<()> {
    if SUPPORTED_SIZES.contains(&size) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("image size {size} unsupported (32 or 64)")))
    }
}

fn in_stripe_band(size: usize, r: usize, c: usize) -> bool {
    (BORDER..size / 3).contains(&r) && (BORDER..size - BORDER).contains(&c)
}

fn in_frame(size: usize, r: usize, c: usize) -> bool {
    r < BORDER || c < BORDER || r >= size - BORDER || c >= size - BORDER
}

fn in_disk(size: usize, r: usize, c: usize) -> bool {
    let centre = (size as f64 - 1.0) / 2.0;
    let radius = size as f64 / 6.0;
    let (dr, dc) = (r as f64 - centre, c as f64 - centre);
    dr * dr + dc * dc <= radius * radius
}

/// Ground-truth region of attribute `attr` as a row-major `size x size` mask.
pub fn attribute_region(attr: usize, size: usize) -> Vec<bool> {
    let test = match attr {
        0 => in_stripe_band,
        1 => in_frame,
        2 => in_disk,
        _ => panic!("attribute index {attr} out of range"),
    };
    (0..size * size).map(|i| test(size, i / size, i % size)).collect()
}

/// Union of the regions of every attribute in `attrs`.
pub fn union_region(attrs: &[usize], size: usize) -> Vec<bool> {
    let mut out = vec![false; size * size];
    for &a in attrs {
        for (o, r) in out.iter_mut().zip(attribute_region(a, size)) {
            *o |= r;
        }
    }
    out
}

/// Renders one image. Background colours depend only on `background_seed`,
/// so toggling a label leaves every pixel outside that attribute's region
/// untouched.
pub fn render(size: usize, background_seed: u64, labels: [bool; N_ATTRIBUTES]) -> Result<Raster> {
    check_size(size)?;
    let mut rng = SatRng::new(background_seed);
    let mut colour = || -> [f64; 3] { std::array::from_fn(|_| rng.uniform(40.0, 180.0)) };
    let (top, bottom) = (colour(), colour());
    let mut pixels = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        let t = r as f64 / (size - 1) as f64;
        let bg: [u8; 3] = std::array::from_fn(|k| (top[k] * (1.0 - t) + bottom[k] * t).round() as u8);
        for c in 0..size {
            let px = if labels[1] && in_frame(size, r, c) {
                FRAME_RGB
            } else if labels[0] && in_stripe_band(size, r, c) && ((r - BORDER) / 2).is_multiple_of(2) {
                STRIPE_RGB
            } else if labels[2] && in_disk(size, r, c) {
                DISK_RGB
            } else {
                bg
            };
            pixels.extend_from_slice(&px);
        }
    }
    Ok(Raster { width: size, height: size, channels: 3, pixels })
}

/// Labels and background seed of image `index` under master `seed`.
pub fn image_spec(seed: u64, index: usize) -> ([bool; N_ATTRIBUTES], u64) {
    let base = SatRng::new(seed).fork(index as u64);
    let mut label_rng = base.fork(1);
    let labels = std::array::from_fn(|_| label_rng.bernoulli(0.5));
    (labels, base.fork(2).key())
}

pub fn image_file_name(index: usize) -> String {
    format!("img_{index:06}.ppm")
}

/// Writes `n_images` PPMs plus `manifest.txt` into `out_dir`.
pub fn synth_generate(n_images: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    check_size(size)?;
    if n_images == 0 {
        return Err(Error::InvalidArgument("need at least one image".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let (labels, bg_seed) = image_spec(seed, i);
        let name = image_file_name(i);
        write_raster(&out_dir.join(&name), &render(size, bg_seed, labels)?)?;
        entries.push(ManifestEntry {
            path: name,
            labels: labels.iter().map(|&b| b as u8).collect(),
        });
    }
    let manifest = Manifest {
        domains: ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
        entries,
    };
    manifest.write(&out_dir.join(super::manifest::MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_are_disjoint_and_symmetric() {
        for size in SUPPORTED_SIZES {
            let regions: Vec<_> = (0..3).map(|a| attribute_region(a, size)).collect();
            for i in 0..size * size {
                assert!(regions.iter().filter(|r| r[i]).count() <= 1);
            }
            for reg in &regions {
                for r in 0..size {
                    for c in 0..size {
                        assert_eq!(reg[r * size + c], reg[r * size + size - 1 - c]);
                    }
                }
            }
        }
    }

    #[test]
    fn toggling_a_label_only_touches_its_region() {
        for size in SUPPORTED_SIZES {
            for attr in 0..3 {
                let mut on = [true, false, true];
                on[attr] = true;
                let mut off = on;
                off[attr] = false;
                let a = render(size, 77, on).unwrap();
                let b = render(size, 77, off).unwrap();
                let region = attribute_region(attr, size);
                let mut changed = 0;
                for (i, inside) in region.iter().enumerate() {
                    let same = a.pixels[3 * i..3 * i + 3] == b.pixels[3 * i..3 * i + 3];
                    if !inside {
                        assert!(same, "size {size} attr {attr} pixel {i}");
                    } else if !same {
                        changed += 1;
                    }
                }
                assert!(changed > 0);
            }
        }
    }

    #[test]
    fn rejects_unsupported_sizes() {
        assert!(render(48, 1, [false; 3]).is_err());
    }
}
