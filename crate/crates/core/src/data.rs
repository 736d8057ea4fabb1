//! Dataset preprocessing, a synthetic Lambertian scene generator and the
//! on-disk dataset layout.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/scenes/<stem>/image.png     16-bit RGB
//! <dir>/scenes/<stem>/albedo.png    16-bit RGB
//! <dir>/scenes/<stem>/shading.png   16-bit grayscale
//! ```
//!
//! `manifest.txt` is line oriented: a `flowiid-dataset 1` header, optional
//! `key value` lines (`side`, `seed`), then one `scene <stem> <split>` line per
//! scene with split `train` or `test`.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image_plane::{ImagePlane, LUMA_709};

/// Image with exact intrinsic ground truth, `image = albedo * shading`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub image: ImagePlane,
    pub albedo: ImagePlane,
    pub shading: ImagePlane,
}

impl ScenePair {
    /// Largest deviation from `image = albedo * shading`.
    pub fn product_residual(&self) -> f64 {
        let s = &self.shading;
        let mut worst = 0.0f64;
        for c in 0..3 {
            for y in 0..s.height() {
                for x in 0..s.width() {
                    let want = self.albedo.get(c, y, x) * s.get(0, y, x);
                    worst = worst.max((self.image.get(c, y, x) - want).abs() as f64);
                }
            }
        }
        worst
    }
}

/// Single-channel shading from an HDR image and its albedo.
///
/// Per channel `hdr / albedo`, collapsed with Rec.709 weights renormalized over
/// the channels that have a defined ratio. A pixel where some channel has zero
/// albedo under non-zero radiance is masked to zero and counted.
pub fn compute_shading(hdr: &ImagePlane, albedo: &ImagePlane) -> Result<(ImagePlane, usize)> {
    hdr.ensure_same_shape(albedo, "compute_shading")?;
    if hdr.channels() != 3 {
        return Err(Error::InvalidInput(format!("expected RGB, got {} channels", hdr.channels())));
    }
    let mut masked = 0;
    let shading = ImagePlane::from_fn(1, hdr.height(), hdr.width(), |_, y, x| {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        let mut invalid = false;
        for (c, w) in LUMA_709.iter().enumerate() {
            let (h, a) = (hdr.get(c, y, x) as f64, albedo.get(c, y, x) as f64);
            if a > 0.0 {
                num += *w as f64 * (h / a);
                den += *w as f64;
            } else if h > 0.0 {
                invalid = true;
            }
        }
        if invalid {
            masked += 1;
            0.0
        } else if den > 0.0 {
            (num / den).max(0.0) as f32
        } else {
            0.0
        }
    });
    Ok((shading, masked))
}

/// Nearest-rank 99th percentile of the positive finite values.
fn p99(values: &[f32]) -> Option<f32> {
    let mut v: Vec<f32> = values.iter().copied().filter(|x| x.is_finite() && *x > 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((0.99 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

/// Linear tonemap `clamp(s / p99, 0, 1)`; no gamma.
pub fn tonemap_unit(shading: &ImagePlane) -> Result<ImagePlane> {
    if shading.data().iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidInput("tonemap input must be non-negative".into()));
    }
    match p99(shading.data()) {
        Some(scale) => Ok(shading.map(|v| if v.is_finite() { (v / scale).clamp(0.0, 1.0) } else { 0.0 })),
        None => {
            log::warn!("tonemap_unit: image has no positive pixels; returning zeros");
            Ok(ImagePlane::zeros(shading.channels(), shading.height(), shading.width()))
        }
    }
}

/// Geometry of a shorter-edge resize followed by a centre crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResizeCrop {
    /// Output pixels per input pixel, identical on both axes.
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl ResizeCrop {
    pub fn plan(height: usize, width: usize, side: usize) -> Self {
        let scale = side as f64 / height.min(width) as f64;
        let (sw, sh) = (width as f64 * scale, height as f64 * scale);
        Self {
            scale,
            offset_x: ((sw - side as f64) / 2.0).floor().max(0.0),
            offset_y: ((sh - side as f64) / 2.0).floor().max(0.0),
        }
    }
}

/// Scales the shorter edge to `side` (bilinear) and centre-crops to `side x side`.
pub fn resize_crop(image: &ImagePlane, side: usize) -> Result<ImagePlane> {
    let (h, w) = (image.height(), image.width());
    if h < 2 || w < 2 {
        return Err(Error::InvalidInput(format!("image {h}x{w} is too small to resample")));
    }
    if side < 8 {
        return Err(Error::InvalidInput(format!("target side {side} must be at least 8")));
    }
    let plan = ResizeCrop::plan(h, w, side);
    let inv = 1.0 / plan.scale;
    let src = |o: usize, off: f64, n: usize| {
        let s = ((o as f64 + off + 0.5) * inv - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..side).map(|x| src(x, plan.offset_x, w)).collect();
    let ys: Vec<_> = (0..side).map(|y| src(y, plan.offset_y, h)).collect();
    Ok(ImagePlane::from_fn(image.channels(), side, side, |c, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let p = |yy, xx| image.get(c, yy, xx) as f64;
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    }))
}

/// Synthetic scene generator settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub min_regions: usize,
    pub max_regions: usize,
    pub albedo_range: (f32, f32),
    pub min_lobes: usize,
    pub max_lobes: usize,
    /// Lobe standard deviation as a fraction of the side length.
    pub lobe_sigma: (f64, f64),
    /// Shading floor; shading lies in `(floor, 1]`.
    pub shading_floor: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            min_regions: 4,
            max_regions: 10,
            albedo_range: (0.1, 0.95),
            min_lobes: 2,
            max_lobes: 5,
            lobe_sigma: (0.1, 0.3),
            shading_floor: 0.05,
        }
    }
}

fn synth_albedo<R: Rng>(rng: &mut R, side: usize, p: &SynthParams) -> ImagePlane {
    let k = rng.random_range(p.min_regions..=p.max_regions);
    let sites: Vec<(f64, f64, [f32; 3])> = (0..k)
        .map(|_| {
            let (lo, hi) = p.albedo_range;
            (
                rng.random::<f64>() * side as f64,
                rng.random::<f64>() * side as f64,
                [
                    rng.random_range(lo..=hi),
                    rng.random_range(lo..=hi),
                    rng.random_range(lo..=hi),
                ],
            )
        })
        .collect();
    let owner: Vec<usize> = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
            let d = |s: &(f64, f64, [f32; 3])| (s.0 - x).powi(2) + (s.1 - y).powi(2);
            (0..k)
                .min_by(|&a, &b| d(&sites[a]).total_cmp(&d(&sites[b])))
                .unwrap_or(0)
        })
        .collect();
    ImagePlane::from_fn(3, side, side, |c, y, x| sites[owner[y * side + x]].2[c])
}

fn synth_shading<R: Rng>(rng: &mut R, side: usize, p: &SynthParams) -> ImagePlane {
    let n = rng.random_range(p.min_lobes..=p.max_lobes);
    let s = side as f64;
    let lobes: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            let cx = (rng.random::<f64>() * 1.2 - 0.1) * s;
            let cy = (rng.random::<f64>() * 1.2 - 0.1) * s;
            let sigma = rng.random_range(p.lobe_sigma.0..=p.lobe_sigma.1) * s;
            let amp = rng.random_range(0.3..=1.0);
            (cx, cy, sigma, amp)
        })
        .collect();
    let raw = ImagePlane::from_fn(1, side, side, |_, y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        lobes
            .iter()
            .map(|(cx, cy, sg, a)| a * (-((px - cx).powi(2) + (py - cy).powi(2)) / (2.0 * sg * sg)).exp())
            .sum::<f64>() as f32
    });
    let (_, max) = raw.min_max();
    let lo = p.shading_floor + 0.01;
    raw.map(|v| lo + (1.0 - lo) * (v / max))
}

/// One deterministic scene for `(seed, index)`.
pub fn synth_scene(seed: u64, index: u64, side: usize, params: &SynthParams) -> ScenePair {
    let mut rng = crate::rng::substream(seed, index);
    let albedo = synth_albedo(&mut rng, side, params);
    let shading = synth_shading(&mut rng, side, params);
    let image = ImagePlane::from_fn(3, side, side, |c, y, x| albedo.get(c, y, x) * shading.get(0, y, x));
    ScenePair { image, albedo, shading }
}

/// `count` scenes: piecewise-constant Voronoi albedo times a smooth sum of
/// Gaussian lobes. Fully determined by `seed`.
pub fn synth_generate(seed: u64, count: usize, side: usize) -> Vec<ScenePair> {
    synth_generate_with(seed, count, side, &SynthParams::default())
}

pub fn synth_generate_with(seed: u64, count: usize, side: usize, params: &SynthParams) -> Vec<ScenePair> {
    (0..count as u64).map(|i| synth_scene(seed, i, side, params)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub stem: String,
    pub split: Split,
    pub scene: ScenePair,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

pub const MANIFEST: &str = "manifest.txt";

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// 16-bit PNG; RGB for three channels, grayscale for one.
pub fn write_png16(path: &Path, plane: &ImagePlane) -> Result<()> {
    let (w, h) = (plane.width() as u32, plane.height() as u32);
    match plane.channels() {
        1 => ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w, h, |x, y| {
            Luma([to_u16(plane.get(0, y as usize, x as usize))])
        })
        .save(path)?,
        3 => ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w, h, |x, y| {
            let p = |c| to_u16(plane.get(c, y as usize, x as usize));
            Rgb([p(0), p(1), p(2)])
        })
        .save(path)?,
        c => return Err(Error::InvalidInput(format!("cannot write {c}-channel PNG"))),
    }
    Ok(())
}

/// 8-bit PNG; RGB for three channels, grayscale for one.
pub fn write_png8(path: &Path, plane: &ImagePlane) -> Result<()> {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (plane.width() as u32, plane.height() as u32);
    match plane.channels() {
        1 => ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(w, h, |x, y| Luma([q(plane.get(0, y as usize, x as usize))]))
            .save(path)?,
        3 => ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w, h, |x, y| {
            let p = |c| q(plane.get(c, y as usize, x as usize));
            Rgb([p(0), p(1), p(2)])
        })
        .save(path)?,
        c => return Err(Error::InvalidInput(format!("cannot write {c}-channel PNG"))),
    }
    Ok(())
}

/// Reads any PNG as a float plane in `[0, 1]` with `channels` (1 or 3) channels.
pub fn read_png(path: &Path, channels: usize) -> Result<ImagePlane> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => {
            let g = img.into_luma16();
            Ok(ImagePlane::from_fn(1, h, w, |_, y, x| g.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0))
        }
        3 => {
            let rgb = img.into_rgb16();
            Ok(ImagePlane::from_fn(3, h, w, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f32 / 65535.0))
        }
        c => Err(Error::InvalidInput(format!("unsupported channel count {c}"))),
    }
}

/// Raw float dump: `u32` channels, height, width (LE) then `f32` LE values.
pub fn write_f32_dump(path: &Path, plane: &ImagePlane) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * plane.data().len());
    for d in [plane.channels(), plane.height(), plane.width()] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in plane.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32_dump(path: &Path) -> Result<ImagePlane> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::Data(format!("{}: truncated float dump", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let body = &bytes[12..];
    if body.len() != 4 * c * h * w {
        return Err(Error::Data(format!("{}: float dump size mismatch", path.display())));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    ImagePlane::new(c, h, w, data)
}

pub fn scene_dir(root: &Path, stem: &str) -> PathBuf {
    root.join("scenes").join(stem)
}

/// Writes scenes and manifest. The last `test_count` entries form the test split.
pub fn save_dataset(root: &Path, scenes: &[ScenePair], test_count: usize, header: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(root.join("scenes"))?;
    let mut manifest = String::from("flowiid-dataset 1\n");
    for (k, v) in header {
        manifest.push_str(&format!("{k} {v}\n"));
    }
    let first_test = scenes.len().saturating_sub(test_count);
    for (i, s) in scenes.iter().enumerate() {
        let stem = format!("{i:06}");
        let dir = scene_dir(root, &stem);
        std::fs::create_dir_all(&dir)?;
        write_png16(&dir.join("image.png"), &s.image)?;
        write_png16(&dir.join("albedo.png"), &s.albedo)?;
        write_png16(&dir.join("shading.png"), &s.shading)?;
        let split = if i >= first_test { Split::Test } else { Split::Train };
        manifest.push_str(&format!("scene {stem} {}\n", split.as_str()));
    }
    std::fs::write(root.join(MANIFEST), manifest)?;
    Ok(())
}

/// `(stem, split)` records of a manifest.
pub fn read_manifest(root: &Path) -> Result<Vec<(String, Split)>> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("flowiid-dataset 1") {
        return Err(Error::Data(format!("{}: missing dataset header", path.display())));
    }
    let mut out = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => {}
            ["scene", stem, split] => out.push((stem.to_string(), Split::parse(split)?)),
            [key, ..] if *key != "scene" => {}
            _ => return Err(Error::Data(format!("{}: bad line {line:?}", path.display()))),
        }
    }
    Ok(out)
}

/// Loads every scene, optionally keeping only one split.
pub fn load_dataset(root: &Path, split: Option<Split>) -> Result<Dataset> {
    let mut entries = Vec::new();
    for (stem, s) in read_manifest(root)? {
        if split.is_some_and(|want| want != s) {
            continue;
        }
        let dir = scene_dir(root, &stem);
        let scene = ScenePair {
            image: read_png(&dir.join("image.png"), 3)?,
            albedo: read_png(&dir.join("albedo.png"), 3)?,
            shading: read_png(&dir.join("shading.png"), 1)?,
        };
        entries.push(DatasetEntry { stem, split: s, scene });
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no scenes found in {}", root.display())));
    }
    Ok(Dataset { entries })
}

impl Dataset {
    pub fn scenes(&self) -> Vec<ScenePair> {
        self.entries.iter().map(|e| e.scene.clone()).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Mean absolute forward-difference gradient magnitude.
pub fn mean_gradient(plane: &ImagePlane, mask: impl Fn(usize, usize) -> bool) -> f64 {
    let (h, w) = (plane.height(), plane.width());
    let (mut acc, mut n) = (0.0, 0usize);
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            if !mask(y, x) {
                continue;
            }
            for c in 0..plane.channels() {
                let v = plane.get(c, y, x) as f64;
                let gx = plane.get(c, y, x + 1) as f64 - v;
                let gy = plane.get(c, y + 1, x) as f64 - v;
                acc += (gx * gx + gy * gy).sqrt();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}
