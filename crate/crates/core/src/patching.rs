//! Multi-scale patch datasets cut from class images.
//!
//! Each image is tiled at several scales with a sliding window; every crop
//! is resized bilinearly to the model input resolution. Patch ids encode
//! `(image, scale, y, x)` so that ascending id order is dataset order.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::forward_with_taps;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    /// Window size as a fraction of the image dimensions, largest first.
    pub scales: Vec<f64>,
    pub overlap: f64,
    /// Scales whose window falls below this many pixels are skipped.
    pub min_window: u32,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 0.5, 0.25],
            overlap: 0.5,
            min_window: 8,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} is outside [0, 1)", self.overlap)));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Config(format!("scales {:?} must be nonempty and within (0, 1]", self.scales)));
        }
        Ok(())
    }

    fn sorted_scales(&self) -> Vec<f64> {
        let mut s = self.scales.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        s.dedup();
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Window offsets along one axis: `floor((dim - window) / stride) + 1` of them.
pub fn window_positions(dim: u32, window: u32, stride: u32) -> Vec<u32> {
    if window > dim || window == 0 {
        return Vec::new();
    }
    let stride = stride.max(1);
    (0..=(dim - window) / stride).map(|i| i * stride).collect()
}

/// `(window, stride)` for one axis at one scale.
pub fn window_geometry(dim: u32, scale: f64, overlap: f64) -> (u32, u32) {
    let window = (scale * dim as f64).round() as u32;
    let stride = ((window as f64) * (1.0 - overlap)).round().max(1.0) as u32;
    (window, stride)
}

const SCALE_BITS: u32 = 10;

/// Stable id for a crop. Scale is quantized to 1/1024 and stored inverted,
/// so larger scales sort first within an image.
pub fn patch_id(image: u32, scale: f64, rect: Rect) -> u64 {
    let q = (scale * (1u64 << SCALE_BITS) as f64).round() as u64;
    let inv = (1u64 << SCALE_BITS) - q.min(1 << SCALE_BITS);
    ((image as u64) << 35) | (inv << 24) | ((rect.y as u64 & 0xfff) << 12) | (rect.x as u64 & 0xfff)
}

/// Image index encoded in a patch id.
pub fn patch_image(id: u64) -> u32 {
    (id >> 35) as u32
}

/// Samples the `rect` region of a `[C,H,W]` image onto an `out_h × out_w`
/// grid with bilinear interpolation (half-pixel centres, edge clamped).
pub fn resize_bilinear(src: &Tensor, rect: Rect, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let axis = |out: usize, start: u32, len: u32, limit: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(len as usize - 1);
                let frac = pos - lo as f64;
                let base = start as usize;
                ((base + lo).min(limit - 1), (base + hi).min(limit - 1), frac)
            })
            .collect()
    };
    let ys = axis(out_h, rect.y, rect.h, h);
    let xs = axis(out_w, rect.x, rect.w, w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = src.channel(ch);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("resize shape")
}

/// RGB image to a `[3,H,W]` tensor scaled to `[0, 1]`.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h as usize, w as usize], data).expect("image shape")
}

/// `[3,H,W]` tensor in `[0, 1]` back to 8-bit RGB (rounded, clamped).
pub fn tensor_image(t: &Tensor) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| (t.data()[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn input_hw(graph: &ModelGraph) -> Result<(usize, usize)> {
    match graph.input_shape() {
        [3, h, w] => Ok((*h, *w)),
        other => Err(Error::InvalidModel(format!(
            "patching needs a [3,H,W] image input, model takes {other:?}"
        ))),
    }
}

/// Resizes a whole `[3,H,W]` image to the model input.
pub fn model_input(graph: &ModelGraph, image: &Tensor) -> Result<Tensor> {
    let (h, w) = input_hw(graph)?;
    let full = Rect {
        x: 0,
        y: 0,
        w: image.shape()[2] as u32,
        h: image.shape()[1] as u32,
    };
    Ok(resize_bilinear(image, full, h, w))
}

/// Resizes a full image to the model input and returns the argmax logit.
pub fn predict(graph: &ModelGraph, image: &Tensor) -> Result<usize> {
    let logits = forward_with_taps(graph, &model_input(graph, image)?, &[], &[])?.logits;
    Ok(argmax(logits.data()))
}

/// Every readable image in `dir`, resized to the model input, in file-name
/// order. Unreadable files are skipped with a warning.
pub fn load_model_inputs(graph: &ModelGraph, dir: &Path) -> Result<Vec<(PathBuf, Tensor)>> {
    let mut out = Vec::new();
    for path in list_images(dir)? {
        match load_image(&path) {
            Ok(img) => out.push((path, model_input(graph, &img)?)),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(out)
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Clone, Debug)]
pub struct SourceImage {
    /// Position of the file in the sorted directory listing.
    pub id: u32,
    pub file: String,
    pub pixels: Tensor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: u32,
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub sha256: String,
    pub predicted: usize,
}

/// The class images `D_c`.
#[derive(Clone, Debug)]
pub struct ClassImages {
    pub class: usize,
    pub root: PathBuf,
    pub images: Vec<SourceImage>,
    pub manifest: Vec<ManifestImage>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

/// Image files (png/jpg/jpeg) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(image_tensor(&image::open(path)?.to_rgb8()))
}

/// Keeps the images of `dir` that the model classifies as `class`.
pub fn collect_class_images(graph: &ModelGraph, dir: &Path, class: usize) -> Result<ClassImages> {
    let mut images = Vec::new();
    let mut manifest = Vec::new();
    let mut skipped = 0;
    for (id, path) in list_images(dir)?.into_iter().enumerate() {
        let bytes = std::fs::read(&path)?;
        let decoded = match image::load_from_memory(&bytes) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let pixels = image_tensor(&decoded);
        let predicted = predict(graph, &pixels)?;
        if predicted != class {
            continue;
        }
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        manifest.push(ManifestImage {
            id: id as u32,
            file: file.clone(),
            width: decoded.width(),
            height: decoded.height(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            predicted,
        });
        images.push(SourceImage {
            id: id as u32,
            file,
            pixels,
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} unreadable image(s) in {}", dir.display());
    }
    if images.is_empty() {
        return Err(Error::NoClassImages {
            dir: dir.display().to_string(),
            class,
        });
    }
    Ok(ClassImages {
        class,
        root: dir.to_path_buf(),
        images,
        manifest,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub id: u64,
    pub image: u32,
    pub rect: Rect,
    pub scale: f64,
    /// Crop resized to the model input, `[3,H,W]`.
    pub pixels: Tensor,
}

/// Crop geometry for one image: `(scale, rect)` in dataset order.
pub fn crop_rects(width: u32, height: u32, cfg: &PatchConfig) -> Vec<(f64, Rect)> {
    let mut out = Vec::new();
    for scale in cfg.sorted_scales() {
        let (ww, sx) = window_geometry(width, scale, cfg.overlap);
        let (wh, sy) = window_geometry(height, scale, cfg.overlap);
        if ww < cfg.min_window || wh < cfg.min_window {
            log::warn!("scale {scale} gives a {ww}x{wh} window on a {width}x{height} image; skipped");
            continue;
        }
        for y in window_positions(height, wh, sy) {
            for x in window_positions(width, ww, sx) {
                out.push((scale, Rect { x, y, w: ww, h: wh }));
            }
        }
    }
    out
}

/// All crops of one image, resized to `out_h × out_w`.
pub fn crop_patches(image_id: u32, pixels: &Tensor, cfg: &PatchConfig, out_h: usize, out_w: usize) -> Vec<Patch> {
    let (h, w) = (pixels.shape()[1] as u32, pixels.shape()[2] as u32);
    crop_rects(w, h, cfg)
        .into_iter()
        .map(|(scale, rect)| Patch {
            id: patch_id(image_id, scale, rect),
            image: image_id,
            rect,
            scale,
            pixels: resize_bilinear(pixels, rect, out_h, out_w),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub class: usize,
    pub input_shape: Vec<usize>,
    pub patches: PatchConfig,
    pub images: Vec<ManifestImage>,
    pub patch_count: usize,
}

impl Manifest {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// The probing dataset `D`, ordered by ascending patch id.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    pub patches: Vec<Patch>,
    pub manifest: Manifest,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.patches.binary_search_by_key(&id, |p| p.id).ok()
    }

    pub fn get(&self, id: u64) -> Result<&Patch> {
        self.index_of(id).map(|i| &self.patches[i]).ok_or(Error::UnknownPatch(id))
    }

    pub fn ids(&self) -> Vec<u64> {
        self.patches.iter().map(|p| p.id).collect()
    }
}

pub fn generate_patches(images: &ClassImages, cfg: &PatchConfig, input_shape: &[usize]) -> Result<PatchDataset> {
    cfg.validate()?;
    let (h, w) = match input_shape {
        [3, h, w] => (*h, *w),
        other => return Err(Error::InvalidModel(format!("expected a [3,H,W] input, got {other:?}"))),
    };
    let mut patches: Vec<Patch> = images
        .images
        .iter()
        .flat_map(|img| crop_patches(img.id, &img.pixels, cfg, h, w))
        .collect();
    patches.sort_by_key(|p| p.id);
    if patches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION.into(),
        class: images.class,
        input_shape: input_shape.to_vec(),
        patches: cfg.clone(),
        images: images.manifest.clone(),
        patch_count: patches.len(),
    };
    Ok(PatchDataset { patches, manifest })
}

/// Collects `D_c` from `dir` and cuts it into patches.
pub fn class_dataset(graph: &ModelGraph, dir: &Path, class: usize, cfg: &PatchConfig) -> Result<PatchDataset> {
    let images = collect_class_images(graph, dir, class)?;
    generate_patches(&images, cfg, graph.input_shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_formula_on_224_images() {
        let cfg = PatchConfig::default();
        assert_eq!(window_geometry(224, 0.5, 0.5), (112, 56));
        assert_eq!(window_positions(224, 112, 56), vec![0, 56, 112]);
        let rects = crop_rects(224, 224, &cfg);
        let count = |s: f64| rects.iter().filter(|(sc, _)| *sc == s).count();
        assert_eq!((count(1.0), count(0.5), count(0.25)), (1, 9, 49));
        assert_eq!(rects.len(), 59);
    }

    #[test]
    fn small_windows_are_skipped() {
        let rects = crop_rects(20, 20, &PatchConfig::default());
        assert!(rects.iter().all(|(s, _)| *s != 0.25), "window 5 < 8 px");
        assert_eq!(rects.len(), 1 + 9);
    }

    #[test]
    fn ids_sort_in_dataset_order() {
        let rects = crop_rects(64, 48, &PatchConfig::default());
        let ids: Vec<u64> = rects.iter().map(|(s, r)| patch_id(3, *s, *r)).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert!(patch_id(3, 0.25, rects[rects.len() - 1].1) < patch_id(4, 1.0, rects[0].1));
        assert_eq!(patch_image(ids[5]), 3);
    }

    #[test]
    fn full_window_resize_at_same_size_is_identity() {
        let t = Tensor::new(vec![3, 4, 5], (0..60).map(|i| i as f64 / 60.0).collect()).unwrap();
        let r = resize_bilinear(&t, Rect { x: 0, y: 0, w: 5, h: 4 }, 4, 5);
        assert_eq!(r, t);
    }

    #[test]
    fn upsampling_interpolates_between_pixels() {
        // one channel, two pixels 0 and 1 → four samples
        let t = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&t, Rect { x: 0, y: 0, w: 2, h: 1 }, 1, 4);
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn rejects_bad_overlap() {
        let cfg = PatchConfig {
            overlap: 1.0,
            ..PatchConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn image_tensor_round_trips_through_rgb() {
        let img = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 80, y as u8 * 200, 7]));
        assert_eq!(tensor_image(&image_tensor(&img)), img);
    }
}
