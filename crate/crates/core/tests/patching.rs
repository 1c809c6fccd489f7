mod common;

use common::*;
use neurflow::patching::{
    class_dataset, collect_class_images, crop_rects, image_tensor, list_images, patch_image, resize_bilinear, PatchConfig, Rect,
};
use neurflow::{Error, Tensor};

#[test]
fn class_images_match_reference_argmax() {
    let g = toy_model();
    let files = list_images(&probe_dir()).unwrap();
    assert_eq!(files.len(), 100);
    for class in [0, 7] {
        let got = collect_class_images(&g, &probe_dir(), class).unwrap();
        let mut want = Vec::new();
        for (i, f) in files.iter().enumerate() {
            let x = image_tensor(&image::open(f).unwrap().to_rgb8());
            let logits = &reference_eval(&g, &x)["logits"];
            let best = (0..logits.len()).fold(0, |b, j| if logits[j] > logits[b] { j } else { b });
            if best == class {
                want.push(i as u32);
            }
        }
        let ids: Vec<u32> = got.images.iter().map(|im| im.id).collect();
        assert_eq!(ids, want, "class {class}");
        assert_eq!(got.skipped, 0);
        assert!(got.manifest.iter().all(|m| m.predicted == class && m.sha256.len() == 64));
    }
}

#[test]
fn toy_dataset_has_59_patches_per_image() {
    let g = toy_model();
    let ds = toy_dataset(&g, 0);
    let images = ds.manifest.images.len();
    assert_eq!(ds.len(), 59 * images);
    assert_eq!(ds.manifest.patch_count, ds.len());
    let ids = ds.ids();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    for p in &ds.patches {
        assert_eq!(patch_image(p.id), p.image);
        assert_eq!(p.pixels.shape(), &[3, 32, 32]);
    }
}

#[test]
fn full_scale_patch_is_the_image() {
    let g = toy_model();
    let ds = toy_dataset(&g, 3);
    let first = &ds.manifest.images[0];
    let x = image_tensor(&image::open(probe_dir().join(&first.file)).unwrap().to_rgb8());
    let full = ds
        .patches
        .iter()
        .find(|p| p.image == first.id && p.scale == 1.0)
        .unwrap();
    assert_eq!(full.rect, Rect { x: 0, y: 0, w: 32, h: 32 });
    assert_eq!(full.pixels, x);
}

#[test]
fn half_scale_crop_is_upsampled_window() {
    // 16x16 window at (8, 0) upsampled by two: each output pixel reads the
    // half-pixel centre ((o + 0.5) / 2 - 0.5) of the window.
    let src = Tensor::new(vec![1, 32, 32], (0..1024).map(|v| v as f64).collect()).unwrap();
    let out = resize_bilinear(&src, Rect { x: 8, y: 0, w: 16, h: 16 }, 32, 32);
    let at = |y: f64, x: f64| {
        let cy = y.clamp(0.0, 15.0);
        let cx = x.clamp(0.0, 15.0);
        // The source is linear in both axes, so bilinear sampling is exact.
        cy * 32.0 + (cx + 8.0)
    };
    for oy in 0..32 {
        for ox in 0..32 {
            let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
            let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
            assert!((out.data()[oy * 32 + ox] - at(sy, sx)).abs() < 1e-12);
        }
    }
}

#[test]
fn crop_grid_on_toy_geometry() {
    let rects = crop_rects(32, 32, &PatchConfig::default());
    let count = |s: f64| rects.iter().filter(|(sc, _)| *sc == s).count();
    assert_eq!((count(1.0), count(0.5), count(0.25)), (1, 9, 49));
    let quarter: Vec<u32> = rects.iter().filter(|(s, _)| *s == 0.25).map(|(_, r)| r.x).take(7).collect();
    assert_eq!(quarter, vec![0, 4, 8, 12, 16, 20, 24]);
}

#[test]
fn manifest_hash_tracks_configuration() {
    let g = toy_model();
    let a = toy_dataset(&g, 1).manifest.hash();
    let b = toy_dataset(&g, 1).manifest.hash();
    assert_eq!(a, b);
    let cfg = PatchConfig {
        overlap: 0.25,
        ..PatchConfig::default()
    };
    let c = class_dataset(&g, &probe_dir(), 1, &cfg).unwrap().manifest.hash();
    assert_ne!(a, c);
}

#[test]
fn unreadable_files_are_skipped() {
    let g = toy_model();
    let dir = tempfile::tempdir().unwrap();
    for f in list_images(&probe_dir()).unwrap().iter().take(12) {
        std::fs::copy(f, dir.path().join(f.file_name().unwrap())).unwrap();
    }
    std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let got = collect_class_images(&g, dir.path(), 0).unwrap();
    assert_eq!(got.skipped, 1);
    assert_eq!(got.images.len(), 10);
}

#[test]
fn class_without_images_is_an_error() {
    let g = toy_model();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        collect_class_images(&g, dir.path(), 0),
        Err(Error::NoClassImages { class: 0, .. })
    ));
    let one = list_images(&probe_dir()).unwrap().remove(0);
    std::fs::copy(&one, dir.path().join("a.png")).unwrap();
    assert!(matches!(
        collect_class_images(&g, dir.path(), 9),
        Err(Error::NoClassImages { class: 9, .. })
    ));
}
