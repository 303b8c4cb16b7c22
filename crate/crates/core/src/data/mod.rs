//! Dataset handling: YOLO-format labels, the on-disk manifest layout,
//! resizing, and conversion between images and network tensors.
//!
//! Directory layout: `images/{split}/*.png`, `labels/{split}/*.txt` and a
//! `manifest.json` describing every entry (schema: `version`, `generator`
//! echo, `skipped_instances`, `splits` -> list of `{path, width, height,
//! labels}`).

pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::TargetBox;
use crate::model::BBox;
use crate::tensor::FeatureMap;

pub use synth::{synth_generate, ClassAppearance, SynthConfig};

pub const CLASS_NAMES: [&str; 3] = ["crack", "pothole", "patch"];
pub const NUM_CLASSES: usize = 3;

/// One normalized-center-format label: `class cx cy w h`, all in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabelRecord {
    pub fn validate(&self) -> Result<()> {
        if self.class_id >= NUM_CLASSES {
            return Err(Error::Validation(format!(
                "class {} undefined (schema has {} classes)",
                self.class_id, NUM_CLASSES
            )));
        }
        for (name, v) in [("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "label field {name} = {v} outside [0,1]"
                )));
            }
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Validation("label width/height must be positive".into()));
        }
        Ok(())
    }

    /// True when the denormalized box lies fully inside the unit square.
    pub fn inside_image(&self) -> bool {
        let eps = 1e-9;
        self.cx - self.w / 2.0 >= -eps
            && self.cy - self.h / 2.0 >= -eps
            && self.cx + self.w / 2.0 <= 1.0 + eps
            && self.cy + self.h / 2.0 <= 1.0 + eps
    }

    /// Pixel-space box for an image of `width x height`.
    pub fn to_bbox(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            (self.cx - self.w / 2.0) * width,
            (self.cy - self.h / 2.0) * height,
            (self.cx + self.w / 2.0) * width,
            (self.cy + self.h / 2.0) * height,
        )
    }

    pub fn to_target(&self, image_size: f64) -> TargetBox {
        TargetBox { bbox: self.to_bbox(image_size, image_size), class_id: self.class_id }
    }
}

/// Parses YOLO text labels: one `class cx cy w h` per line.
pub fn parse_yolo_labels(text: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let class_id: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad class id `{}`", fields[0]),
        })?;
        let mut vals = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            vals[k] = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad number `{f}`"),
            })?;
        }
        let rec = LabelRecord { class_id, cx: vals[0], cy: vals[1], w: vals[2], h: vals[3] };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Serializes labels to YOLO text. Floats use the shortest round-trippable
/// decimal form, so a parse of the output reproduces them exactly.
pub fn format_yolo_labels(labels: &[LabelRecord]) -> String {
    let mut s = String::new();
    for l in labels {
        s.push_str(&format!("{} {} {} {} {}\n", l.class_id, l.cx, l.cy, l.w, l.h));
    }
    s
}

pub fn load_yolo_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_yolo_labels(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// Path relative to the dataset root.
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub labels: Vec<LabelRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// Echo of the generator configuration for synthetic datasets.
    pub generator: Option<SynthConfig>,
    /// Instances dropped after repeated out-of-bounds resampling.
    pub skipped_instances: usize,
    pub splits: BTreeMap<Split, Vec<ImageEntry>>,
}

impl DatasetManifest {
    pub fn empty() -> Self {
        Self { version: 1, generator: None, skipped_instances: 0, splits: BTreeMap::new() }
    }

    pub fn entries(&self, split: Split) -> &[ImageEntry] {
        self.splits.get(&split).map_or(&[], |v| v.as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for entries in self.splits.values() {
            for e in entries {
                if !seen.insert(&e.path) {
                    return Err(Error::Validation(format!("duplicate path {}", e.path)));
                }
                for l in &e.labels {
                    l.validate()?;
                    if !l.inside_image() {
                        return Err(Error::Validation(format!(
                            "label box leaves the image in {}",
                            e.path
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dataset_dir: &Path) -> Result<()> {
        let path = dataset_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Schema(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dataset_dir: &Path) -> Result<Self> {
        let path = dataset_dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("manifest parse: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    /// SHA-256 of the canonical JSON encoding; identifies the dataset in
    /// reports so controlled comparisons can assert they shared data.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("manifest encodes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-class instance counts and totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub per_class: [usize; 3],
    pub total_instances: usize,
    pub total_images: usize,
}

pub fn manifest_stats(manifest: &DatasetManifest) -> DatasetStats {
    let mut per_class = [0usize; 3];
    let mut total_images = 0usize;
    for entries in manifest.splits.values() {
        total_images += entries.len();
        for e in entries {
            for l in &e.labels {
                per_class[l.class_id] += 1;
            }
        }
    }
    DatasetStats {
        per_class,
        total_instances: per_class.iter().sum(),
        total_images,
    }
}

impl DatasetStats {
    pub fn report(&self) -> String {
        format!(
            "images: {}\ninstances: {} (crack {}, pothole {}, patch {})\n",
            self.total_images,
            self.total_instances,
            self.per_class[0],
            self.per_class[1],
            self.per_class[2]
        )
    }
}

/// Plain (non-letterbox) resize to `size x size`; returns the image and the
/// per-axis scale factors `(sx, sy)` mapping source pixels to output pixels.
/// Normalized labels are untouched by this transform.
pub fn resize_to_input(
    img: &image::RgbImage,
    size: u32,
) -> Result<(image::RgbImage, f64, f64)> {
    if size == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Validation("degenerate image with a zero dimension".into()));
    }
    let sx = size as f64 / w as f64;
    let sy = size as f64 / h as f64;
    if w == size && h == size {
        return Ok((img.clone(), 1.0, 1.0));
    }
    let resized = image::imageops::resize(img, size, size, image::imageops::FilterType::Triangle);
    Ok((resized, sx, sy))
}

/// Aspect-preserving resize with symmetric gray padding. Returns the image,
/// the uniform scale and the `(dx, dy)` offset of the content.
pub fn letterbox_to_input(
    img: &image::RgbImage,
    size: u32,
) -> Result<(image::RgbImage, f64, u32, u32)> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Validation("degenerate image with a zero dimension".into()));
    }
    let scale = (size as f64 / w as f64).min(size as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    let resized = image::imageops::resize(img, nw, nh, image::imageops::FilterType::Triangle);
    let mut canvas = image::RgbImage::from_pixel(size, size, image::Rgb([114, 114, 114]));
    let dx = (size - nw) / 2;
    let dy = (size - nh) / 2;
    image::imageops::overlay(&mut canvas, &resized, dx as i64, dy as i64);
    Ok((canvas, scale, dx, dy))
}

/// Image to normalized `(1, 3, H, W)` tensor in [0, 1].
pub fn image_to_tensor(img: &image::RgbImage) -> FeatureMap {
    let (w, h) = img.dimensions();
    Array4::from_shape_fn((1, 3, h as usize, w as usize), |(_, c, i, j)| {
        img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
    })
}

/// Horizontal flip of a `(1, 3, H, W)` tensor with matching label update.
pub fn hflip(image: &FeatureMap, labels: &[LabelRecord]) -> (FeatureMap, Vec<LabelRecord>) {
    let w = image.shape()[3];
    let flipped = Array4::from_shape_fn(image.raw_dim(), |(b, c, i, j)| {
        image[[b, c, i, w - 1 - j]]
    });
    let new_labels = labels
        .iter()
        .map(|l| LabelRecord { cx: 1.0 - l.cx, ..*l })
        .collect();
    (flipped, new_labels)
}

/// A dataset entry loaded into memory for training or evaluation.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub image: FeatureMap,
    pub labels: Vec<LabelRecord>,
    pub path: PathBuf,
}

/// Loads a whole split, resizing every image to `input_size`.
pub fn load_split(dataset_dir: &Path, split: Split, input_size: u32) -> Result<Vec<LoadedSample>> {
    let manifest = DatasetManifest::load(dataset_dir)?;
    let mut out = Vec::new();
    for entry in manifest.entries(split) {
        let path = dataset_dir.join(&entry.path);
        let img = image::open(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?
            .to_rgb8();
        let (resized, _, _) = resize_to_input(&img, input_size)?;
        out.push(LoadedSample {
            image: image_to_tensor(&resized),
            labels: entry.labels.clone(),
            path,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_single_record() {
        let recs = parse_yolo_labels("0 0.5 0.5 0.2 0.1\n").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].class_id, 0);
        assert_eq!(recs[0].cx, 0.5);
        assert_eq!(recs[0].w, 0.2);
    }

    #[test]
    fn empty_file_gives_empty_list() {
        assert!(parse_yolo_labels("").unwrap().is_empty());
    }

    #[test]
    fn undefined_class_is_a_validation_error() {
        let err = parse_yolo_labels("3 0.5 0.5 0.1 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_yolo_labels("0 0.5 0.5 0.2 0.1\n1 0.5 oops 0.2 0.1\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn out_of_range_coordinate_rejected() {
        assert!(parse_yolo_labels("0 1.5 0.5 0.2 0.1\n").is_err());
    }

    #[test]
    fn resize_scale_factors() {
        let img = image::RgbImage::from_pixel(512, 512, image::Rgb([10, 20, 30]));
        let (out, sx, sy) = resize_to_input(&img, 512).unwrap();
        assert_eq!(out.dimensions(), (512, 512));
        assert_eq!((sx, sy), (1.0, 1.0));
        let wide = image::RgbImage::from_pixel(1024, 512, image::Rgb([0, 0, 0]));
        let (_, sx, sy) = resize_to_input(&wide, 512).unwrap();
        assert_eq!((sx, sy), (0.5, 1.0));
    }

    #[test]
    fn zero_dimension_image_rejected() {
        let img = image::RgbImage::new(0, 5);
        assert!(resize_to_input(&img, 64).is_err());
    }

    #[test]
    fn hflip_mirrors_labels() {
        let img = Array4::from_shape_fn((1, 3, 4, 4), |(_, _, _, j)| j as f64);
        let labels = vec![LabelRecord { class_id: 1, cx: 0.25, cy: 0.5, w: 0.2, h: 0.2 }];
        let (flipped, new_labels) = hflip(&img, &labels);
        assert_eq!(flipped[[0, 0, 0, 0]], 3.0);
        assert_eq!(new_labels[0].cx, 0.75);
        assert_eq!(new_labels[0].cy, 0.5);
    }

    #[test]
    fn stats_on_reference_counts() {
        // canonical per-class figures: 10342 + 8763 + 10457 = 29562 instances
        let mut manifest = DatasetManifest::empty();
        let mut entries = Vec::new();
        let counts = [10342usize, 8763, 10457];
        let mut labels = Vec::new();
        for (cid, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                labels.push(LabelRecord { class_id: cid, cx: 0.5, cy: 0.5, w: 0.1, h: 0.1 });
            }
        }
        entries.push(ImageEntry { path: "images/train/all.png".into(), width: 100, height: 100, labels });
        manifest.splits.insert(Split::Train, entries);
        let stats = manifest_stats(&manifest);
        assert_eq!(stats.per_class, [10342, 8763, 10457]);
        assert_eq!(stats.total_instances, 29562);
        let report = stats.report();
        assert!(report.contains("crack 10342"));
        assert!(report.contains("pothole 8763"));
        assert!(report.contains("patch 10457"));
    }

    #[test]
    fn stats_empty_manifest_all_zero() {
        let stats = manifest_stats(&DatasetManifest::empty());
        assert_eq!(stats.per_class, [0, 0, 0]);
        assert_eq!(stats.total_instances, 0);
        assert_eq!(stats.total_images, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn yolo_text_round_trips_exactly(
            class_id in 0usize..3,
            cx in 0.25f64..0.75,
            cy in 0.25f64..0.75,
            w in 0.01f64..0.4,
            h in 0.01f64..0.4,
        ) {
            let rec = LabelRecord { class_id, cx, cy, w, h };
            let text = format_yolo_labels(&[rec]);
            let back = parse_yolo_labels(&text).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert!((back[0].cx - cx).abs() < 1e-9);
            prop_assert!((back[0].cy - cy).abs() < 1e-9);
            prop_assert!((back[0].w - w).abs() < 1e-9);
            prop_assert!((back[0].h - h).abs() < 1e-9);
        }
    }
}
