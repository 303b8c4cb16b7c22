//! Deterministic synthetic top-down road-damage scenes.
//!
//! Scenes are asphalt-textured grayscale-dominant images carrying three
//! damage classes: cracks (dark jagged polylines), potholes (dark filled
//! ellipses with rough boundaries) and patches (lighter rectangular regions
//! with contrasting texture). Every instance emits an exact bounding-box
//! label from its painted extent. Rendering uses integer hashing and plain
//! arithmetic only (no transcendental functions), so one seed fixes the
//! dataset bit-exactly across platforms with the same word size.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ImageEntry, LabelRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAppearance {
    /// Base pixel intensity range.
    pub intensity: (f64, f64),
    /// Instance size range as a fraction of the image side.
    pub size: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_images: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Class probabilities (crack, pothole, patch); must sum to 1.
    pub class_mix: [f64; 3],
    pub objects_per_image: (usize, usize),
    /// Fraction of images routed to the validation split.
    pub val_fraction: f64,
    pub crack: ClassAppearance,
    pub pothole: ClassAppearance,
    pub patch: ClassAppearance,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 32,
            image_size: 256,
            seed: 0,
            class_mix: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            objects_per_image: (1, 2),
            val_fraction: 0.25,
            crack: ClassAppearance { intensity: (25.0, 60.0), size: (0.28, 0.5) },
            pothole: ClassAppearance { intensity: (30.0, 70.0), size: (0.2, 0.4) },
            patch: ClassAppearance { intensity: (165.0, 215.0), size: (0.22, 0.42) },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::Config("num_images must be >= 1".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be >= 32".into()));
        }
        if self.class_mix.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("class_mix entries must be >= 0".into()));
        }
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class_mix must sum to 1, got {sum}")));
        }
        if self.objects_per_image.0 == 0 || self.objects_per_image.0 > self.objects_per_image.1 {
            return Err(Error::Config("objects_per_image range invalid".into()));
        }
        if !(0.0..=0.9).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 0.9]".into()));
        }
        Ok(())
    }
}

/// 64-bit mix of pixel coordinates and a salt; the basis of all texture.
fn pixel_hash(seed: u64, x: i64, y: i64, salt: u64) -> u64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ salt.wrapping_mul(0x165667B19E3779F9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    h
}

fn noise01(seed: u64, x: i64, y: i64, salt: u64) -> f64 {
    (pixel_hash(seed, x, y, salt) >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise on a lattice of spacing `cell`.
fn value_noise(seed: u64, x: i64, y: i64, cell: i64, salt: u64) -> f64 {
    let (cx, cy) = (x.div_euclid(cell), y.div_euclid(cell));
    let (fx, fy) = (
        x.rem_euclid(cell) as f64 / cell as f64,
        y.rem_euclid(cell) as f64 / cell as f64,
    );
    let v00 = noise01(seed, cx, cy, salt);
    let v10 = noise01(seed, cx + 1, cy, salt);
    let v01 = noise01(seed, cx, cy + 1, salt);
    let v11 = noise01(seed, cx + 1, cy + 1, salt);
    let top = v00 + (v10 - v00) * fx;
    let bot = v01 + (v11 - v01) * fx;
    top + (bot - top) * fy
}

/// A rendered instance: painted pixels (may be out of bounds) with values.
struct Paint {
    pixels: Vec<(i64, i64, f64)>,
}

impl Paint {
    fn extent(&self) -> Option<(i64, i64, i64, i64)> {
        if self.pixels.is_empty() {
            return None;
        }
        let mut e = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for &(x, y, _) in &self.pixels {
            e.0 = e.0.min(x);
            e.1 = e.1.min(y);
            e.2 = e.2.max(x);
            e.3 = e.3.max(y);
        }
        Some(e)
    }
}

/// Unit direction from two uniforms; rejection keeps it well-conditioned.
fn random_direction(rng: &mut ChaCha12Rng) -> (f64, f64) {
    loop {
        let x = rng.random::<f64>() * 2.0 - 1.0;
        let y = rng.random::<f64>() * 2.0 - 1.0;
        let n2 = x * x + y * y;
        if n2 > 0.01 && n2 <= 1.0 {
            let n = n2.sqrt();
            return (x / n, y / n);
        }
    }
}

fn draw_crack(rng: &mut ChaCha12Rng, cfg: &SynthConfig, img_seed: u64) -> Paint {
    let s = cfg.image_size as f64;
    let (i_lo, i_hi) = cfg.crack.intensity;
    let base = i_lo + rng.random::<f64>() * (i_hi - i_lo);
    let (sz_lo, sz_hi) = cfg.crack.size;
    let length = (sz_lo + rng.random::<f64>() * (sz_hi - sz_lo)) * s;
    let stroke = 1.2 + rng.random::<f64>() * 1.3;
    let margin = length * 0.75 + 4.0;
    let mut px = margin + rng.random::<f64>() * (s - 2.0 * margin).max(1.0);
    let mut py = margin + rng.random::<f64>() * (s - 2.0 * margin).max(1.0);
    let (mut dx, mut dy) = random_direction(rng);
    let mut pixels = Vec::new();
    let steps = length as usize;
    let r_int = stroke.ceil() as i64;
    for _ in 0..steps {
        // jitter the heading sideways, keeping unit speed
        let j = (rng.random::<f64>() - 0.5) * 0.55;
        let (nx, ny) = (dx - dy * j, dy + dx * j);
        let n = (nx * nx + ny * ny).sqrt();
        dx = nx / n;
        dy = ny / n;
        px += dx;
        py += dy;
        let (cx, cy) = (px as i64, py as i64);
        for oy in -r_int..=r_int {
            for ox in -r_int..=r_int {
                let d2 = ((cx + ox) as f64 - px).powi(2) + ((cy + oy) as f64 - py).powi(2);
                if d2 <= stroke * stroke {
                    let v = base + 12.0 * noise01(img_seed, cx + ox, cy + oy, 7);
                    pixels.push((cx + ox, cy + oy, v));
                }
            }
        }
    }
    Paint { pixels }
}

fn draw_pothole(rng: &mut ChaCha12Rng, cfg: &SynthConfig, img_seed: u64) -> Paint {
    let s = cfg.image_size as f64;
    let (i_lo, i_hi) = cfg.pothole.intensity;
    let base = i_lo + rng.random::<f64>() * (i_hi - i_lo);
    let (sz_lo, sz_hi) = cfg.pothole.size;
    let rx = (sz_lo + rng.random::<f64>() * (sz_hi - sz_lo)) * s / 2.0;
    let ry = rx * (0.65 + rng.random::<f64>() * 0.5);
    let (c, si) = random_direction(rng);
    let rmax = rx.max(ry) * 1.25;
    let cx = rmax + rng.random::<f64>() * (s - 2.0 * rmax).max(1.0);
    let cy = rmax + rng.random::<f64>() * (s - 2.0 * rmax).max(1.0);
    let mut pixels = Vec::new();
    let (x0, x1) = ((cx - rmax) as i64, (cx + rmax) as i64 + 1);
    let (y0, y1) = ((cy - rmax) as i64, (cy + rmax) as i64 + 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let lx = (dx * c + dy * si) / rx;
            let ly = (-dx * si + dy * c) / ry;
            let d = (lx * lx + ly * ly).sqrt();
            let rough = 1.0 + 0.18 * (2.0 * value_noise(img_seed, x, y, 5, 11) - 1.0);
            if d < rough {
                let v = base + 30.0 * d + 10.0 * noise01(img_seed, x, y, 13);
                pixels.push((x, y, v));
            }
        }
    }
    Paint { pixels }
}

fn draw_patch(rng: &mut ChaCha12Rng, cfg: &SynthConfig, img_seed: u64) -> Paint {
    let s = cfg.image_size as f64;
    let (i_lo, i_hi) = cfg.patch.intensity;
    let base = i_lo + rng.random::<f64>() * (i_hi - i_lo);
    let (sz_lo, sz_hi) = cfg.patch.size;
    let w = (sz_lo + rng.random::<f64>() * (sz_hi - sz_lo)) * s;
    let h = (sz_lo + rng.random::<f64>() * (sz_hi - sz_lo)) * s;
    let x0 = rng.random::<f64>() * (s - w).max(1.0);
    let y0 = rng.random::<f64>() * (s - h).max(1.0);
    let (xa, ya) = (x0 as i64, y0 as i64);
    let (xb, yb) = ((x0 + w) as i64, (y0 + h) as i64);
    let mut pixels = Vec::new();
    for y in ya..=yb {
        for x in xa..=xb {
            let border = x - xa < 2 || xb - x < 2 || y - ya < 2 || yb - y < 2;
            let banding = if (x + 2 * y).rem_euclid(7) < 3 { 7.0 } else { -7.0 };
            let v = if border {
                base - 55.0
            } else {
                base + banding + 16.0 * value_noise(img_seed, x, y, 3, 17) - 8.0
            };
            pixels.push((x, y, v));
        }
    }
    Paint { pixels }
}

fn pick_class(rng: &mut ChaCha12Rng, mix: &[f64; 3]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    2
}

/// Renders image `index` of the dataset: pixels, labels, and the number of
/// instances skipped after 100 out-of-bounds retries.
pub fn render_image(
    cfg: &SynthConfig,
    index: usize,
) -> (image::RgbImage, Vec<LabelRecord>, usize) {
    let size = cfg.image_size;
    let img_seed = pixel_hash(cfg.seed, index as i64, 0x5eed, 1);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    // asphalt background: coarse mottling plus fine grain, gray-dominant
    let base_gray = 115.0 + 35.0 * noise01(img_seed, -1, -1, 2);
    let mut canvas = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let coarse = 20.0 * (value_noise(img_seed, x as i64, y as i64, 16, 3) - 0.5);
            let grain = 16.0 * (noise01(img_seed, x as i64, y as i64, 4) - 0.5);
            canvas[y * size + x] = base_gray + coarse + grain;
        }
    }

    let n_objects = rng.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
    let mut labels = Vec::new();
    let mut skipped = 0usize;
    for _ in 0..n_objects {
        let class_id = pick_class(&mut rng, &cfg.class_mix);
        let mut placed = false;
        for _attempt in 0..100 {
            let paint = match class_id {
                0 => draw_crack(&mut rng, cfg, img_seed),
                1 => draw_pothole(&mut rng, cfg, img_seed),
                _ => draw_patch(&mut rng, cfg, img_seed),
            };
            let Some((x1, y1, x2, y2)) = paint.extent() else { continue };
            if x1 < 0 || y1 < 0 || x2 >= size as i64 || y2 >= size as i64 {
                continue;
            }
            for (x, y, v) in paint.pixels {
                canvas[y as usize * size + x as usize] = v;
            }
            let s = size as f64;
            labels.push(LabelRecord {
                class_id,
                cx: (x1 + x2 + 1) as f64 / 2.0 / s,
                cy: (y1 + y2 + 1) as f64 / 2.0 / s,
                w: (x2 - x1 + 1) as f64 / s,
                h: (y2 - y1 + 1) as f64 / s,
            });
            placed = true;
            break;
        }
        if !placed {
            skipped += 1;
        }
    }

    let mut img = image::RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let v = canvas[y * size + x];
            let px = [
                (v + 2.0 * (noise01(img_seed, x as i64, y as i64, 21) - 0.5)).clamp(0.0, 255.0) as u8,
                v.clamp(0.0, 255.0) as u8,
                (v + 2.0 * (noise01(img_seed, x as i64, y as i64, 22) - 0.5)).clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    (img, labels, skipped)
}

/// Generates the full dataset under `out_dir` (images, YOLO labels and the
/// manifest) and returns the manifest.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let n_val = (cfg.num_images as f64 * cfg.val_fraction).round() as usize;
    let n_train = cfg.num_images - n_val;
    for split in ["train", "val"] {
        for sub in ["images", "labels"] {
            let d = out_dir.join(sub).join(split);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let mut manifest = DatasetManifest::empty();
    manifest.generator = Some(cfg.clone());
    let mut train_entries = Vec::new();
    let mut val_entries = Vec::new();
    let mut skipped_total = 0usize;
    for index in 0..cfg.num_images {
        let (img, labels, skipped) = render_image(cfg, index);
        skipped_total += skipped;
        let split = if index < n_train { Split::Train } else { Split::Val };
        let name = format!("img_{index:05}");
        let rel_img = format!("images/{}/{name}.png", split.dir_name());
        let rel_lbl = format!("labels/{}/{name}.txt", split.dir_name());
        let img_path = out_dir.join(&rel_img);
        img.save(&img_path)
            .map_err(|e| Error::io(&img_path, std::io::Error::other(e)))?;
        let lbl_path = out_dir.join(&rel_lbl);
        std::fs::write(&lbl_path, super::format_yolo_labels(&labels))
            .map_err(|e| Error::io(&lbl_path, e))?;
        let entry = ImageEntry {
            path: rel_img,
            width: cfg.image_size as u32,
            height: cfg.image_size as u32,
            labels,
        };
        match split {
            Split::Train => train_entries.push(entry),
            _ => val_entries.push(entry),
        }
    }
    manifest.skipped_instances = skipped_total;
    manifest.splits.insert(Split::Train, train_entries);
    if !val_entries.is_empty() {
        manifest.splits.insert(Split::Val, val_entries);
    }
    manifest.validate()?;
    manifest.save(out_dir)?;
    Ok(manifest)
}
