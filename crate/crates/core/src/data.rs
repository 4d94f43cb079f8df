//! Synthetic RGB+IR detection data, the VEDAI-style file layout and
//! flip/translation augmentation.
//!
//! Layout on disk: `images/<id>_co.png` (RGB), `images/<id>_ir.png` (one
//! channel), `labels/<id>.txt` with one `class cx cy w h` line per object.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{iou, BBox, GroundTruth};
use crate::numerics::Tensor;

/// One registered RGB/IR pair with its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[H, W, 3]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[H, W]` in `[0, 1]`.
    pub ir: Tensor<f32>,
    pub boxes: Vec<GroundTruth>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.ir.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.ir.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub extent_min: usize,
    pub extent_max: usize,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            classes: 4,
            objects_min: 2,
            objects_max: 6,
            extent_min: 5,
            extent_max: 11,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes != SYNTH_CLASSES.len() {
            return Err(Error::Config(format!(
                "the synthetic generator defines {} classes, got {}",
                SYNTH_CLASSES.len(),
                self.classes
            )));
        }
        if self.extent_min == 0
            || self.extent_min > self.extent_max
            || 4 * self.extent_max >= self.image_size
        {
            return Err(Error::Config(format!(
                "object extents {}..={} must be positive and below a quarter of {}",
                self.extent_min, self.extent_max, self.image_size
            )));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::Config("objects_min exceeds objects_max".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Intensity level of one channel inside an object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Low,
    High,
    /// Independent uniform draw over the full range.
    Any,
    /// The same draw as the G channel.
    SameAsG,
}

/// Per-class `(R, G, B, IR)` levels. No single channel identifies a class:
/// R and IR split the classes into {0, 2} and {1, 3}; G and B only tell
/// them apart through their relation (G >> B, G << B or G = B).
pub const SYNTH_CLASSES: [[Level; 4]; 4] = {
    use Level::*;
    [
        [Low, High, Low, High],
        [High, Low, High, Low],
        [Low, Any, SameAsG, High],
        [High, High, Low, Low],
    ]
};

pub const SYNTH_CLASS_NAMES: [&str; 4] = ["warm_green", "hot_red", "warm_grey", "cold_green"];

const LOW: (f32, f32) = (0.05, 0.25);
const HIGH: (f32, f32) = (0.75, 0.95);

/// Seed of sample `index` derived from the dataset seed (splitmix64).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Smooth random pattern around mid-grey.
fn texture(rng: &mut impl Rng, size: usize) -> Vec<f32> {
    let base: f32 = rng.random_range(0.35..0.65);
    let waves: Vec<(f32, f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.25),
                rng.random_range(0.02..0.25),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v: f32 = waves
                .iter()
                .map(|&(fx, fy, px, py, a)| {
                    a * (fx * x as f32 + px).sin() * (fy * y as f32 + py).sin()
                })
                .sum();
            out.push(base + v);
        }
    }
    out
}

fn draw_level(rng: &mut impl Rng, level: Level) -> f32 {
    match level {
        Level::Low => rng.random_range(LOW.0..LOW.1),
        Level::High => rng.random_range(HIGH.0..HIGH.1),
        Level::Any | Level::SameAsG => rng.random_range(LOW.0..HIGH.1),
    }
}

/// Object intensities `(R, G, B, IR)` for a class.
pub fn class_intensities(rng: &mut impl Rng, class_id: usize) -> [f32; 4] {
    let levels = SYNTH_CLASSES[class_id];
    let mut v = [0.0; 4];
    for (c, &l) in levels.iter().enumerate() {
        v[c] = draw_level(rng, l);
    }
    if levels[2] == Level::SameAsG {
        v[2] = v[1];
    }
    v
}

/// One synthetic sample from its own seed.
pub fn gen_sample(cfg: &SynthConfig, seed: u64, id: String) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let mut planes: Vec<Vec<f32>> = (0..4).map(|_| texture(&mut rng, s)).collect();
    let n_obj = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut boxes: Vec<GroundTruth> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class_id = rng.random_range(0..cfg.classes);
        let colors = class_intensities(&mut rng, class_id);
        let mut placed = None;
        for _ in 0..100 {
            let w = rng.random_range(cfg.extent_min..=cfg.extent_max);
            let h = rng.random_range(cfg.extent_min..=cfg.extent_max);
            let x0 = rng.random_range(0..=s - w);
            let y0 = rng.random_range(0..=s - h);
            let bbox = BBox::from_corners(
                x0 as f32 / s as f32,
                y0 as f32 / s as f32,
                (x0 + w) as f32 / s as f32,
                (y0 + h) as f32 / s as f32,
            );
            if boxes.iter().all(|b| iou(&b.bbox, &bbox) <= 0.1) {
                placed = Some((x0, y0, w, h, bbox));
                break;
            }
        }
        let Some((x0, y0, w, h, bbox)) = placed else {
            log::debug!("sample {id}: object skipped after 100 placement attempts");
            continue;
        };
        for (plane, &c) in planes.iter_mut().zip(&colors) {
            for y in y0..y0 + h {
                plane[y * s + x0..y * s + x0 + w].fill(c);
            }
        }
        boxes.push(GroundTruth { class_id, bbox });
    }
    let noise = Normal::new(0.0f32, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    for plane in &mut planes {
        for v in plane.iter_mut() {
            *v = quantize(*v + noise.sample(&mut rng));
        }
    }
    let mut rgb = Vec::with_capacity(s * s * 3);
    for i in 0..s * s {
        rgb.extend([planes[0][i], planes[1][i], planes[2][i]]);
    }
    let ir = std::mem::take(&mut planes[3]);
    Ok(Sample {
        id,
        rgb: Tensor::new([s, s, 3], rgb)?,
        ir: Tensor::new([s, s], ir)?,
        boxes,
    })
}

/// `n` samples with ids `000000..`, sample `i` seeded by
/// `sample_seed(cfg.seed, i)`.
pub fn gen_synthetic(n: usize, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..n)
        .map(|i| gen_sample(cfg, sample_seed(cfg.seed, i as u64), format!("{i:06}")))
        .collect()
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn label_text(boxes: &[GroundTruth]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            b.class_id, b.bbox.cx, b.bbox.cy, b.bbox.w, b.bbox.h
        );
    }
    s
}

/// Write samples under `root/images` and `root/labels`.
pub fn write_vedai(root: &Path, samples: &[Sample]) -> Result<()> {
    let images = root.join("images");
    let labels = root.join("labels");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&labels)?;
    for s in samples {
        let (h, w) = (s.height() as u32, s.width() as u32);
        let rgb: Vec<u8> = s.rgb.data().iter().map(|&v| to_u8(v)).collect();
        let ir: Vec<u8> = s.ir.data().iter().map(|&v| to_u8(v)).collect();
        let co_path = images.join(format!("{}_co.png", s.id));
        let ir_path = images.join(format!("{}_ir.png", s.id));
        image::RgbImage::from_raw(w, h, rgb)
            .ok_or_else(|| Error::Format("rgb buffer size".into()))?
            .save(&co_path)
            .map_err(image_err(&co_path))?;
        image::GrayImage::from_raw(w, h, ir)
            .ok_or_else(|| Error::Format("ir buffer size".into()))?
            .save(&ir_path)
            .map_err(image_err(&ir_path))?;
        fs::write(labels.join(format!("{}.txt", s.id)), label_text(&s.boxes))?;
    }
    Ok(())
}

/// Parse one label file; malformed lines are logged with file and line
/// number and skipped.
pub fn parse_labels(text: &str, path: &Path) -> Vec<GroundTruth> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = (fields.len() == 5)
            .then(|| {
                let class_id = fields[0].parse::<usize>().ok()?;
                let v: Vec<f32> = fields[1..]
                    .iter()
                    .map(|f| f.parse().ok())
                    .collect::<Option<_>>()?;
                Some(GroundTruth {
                    class_id,
                    bbox: BBox::new(v[0], v[1], v[2], v[3]),
                })
            })
            .flatten()
            .filter(|g| g.bbox.is_normalized());
        match parsed {
            Some(g) => out.push(g),
            None => log::warn!(
                "{}:{}: malformed label line `{line}`",
                path.display(),
                n + 1
            ),
        }
    }
    out
}

fn load_pair(co: &Path, ir: &Path) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let rgb = image::open(co).map_err(image_err(co))?.to_rgb8();
    let gray = image::open(ir).map_err(image_err(ir))?.to_luma8();
    if rgb.dimensions() != gray.dimensions() {
        return Err(Error::Format(format!(
            "{} is {:?} but {} is {:?}",
            co.display(),
            rgb.dimensions(),
            ir.display(),
            gray.dimensions()
        )));
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let scale = |v: &u8| *v as f32 / 255.0;
    Ok((
        Tensor::new([h, w, 3], rgb.as_raw().iter().map(scale).collect())?,
        Tensor::new([h, w], gray.as_raw().iter().map(scale).collect())?,
    ))
}

/// Load every `<id>_co.png` in `image_dir` with its IR counterpart and
/// label file, in id order. Pairs without IR are skipped with a warning; a
/// missing label file counts as no objects.
pub fn load_vedai_format(image_dir: &Path, label_dir: &Path) -> Result<Vec<Sample>> {
    let mut ids: Vec<String> = fs::read_dir(image_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_co.png"))
                .map(String::from)
        })
        .collect();
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let co = image_dir.join(format!("{id}_co.png"));
        let ir = image_dir.join(format!("{id}_ir.png"));
        if !ir.exists() {
            log::warn!("{}: missing IR counterpart, sample skipped", co.display());
            continue;
        }
        let (rgb, ir) = load_pair(&co, &ir)?;
        let label_path = label_dir.join(format!("{id}.txt"));
        let boxes = match fs::read_to_string(&label_path) {
            Ok(text) => parse_labels(&text, &label_path),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                log::warn!("{}: no label file", label_path.display());
                Vec::new()
            }
            Err(e) => return Err(e.into()),
        };
        out.push(Sample { id, rgb, ir, boxes });
    }
    Ok(out)
}

/// [`load_vedai_format`] on `root/images` and `root/labels`.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let images: PathBuf = root.join("images");
    if !images.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a dataset directory", root.display()),
        )));
    }
    load_vedai_format(&images, &root.join("labels"))
}

/// Horizontal mirror of both modalities and the boxes.
pub fn flip(s: &Sample) -> Sample {
    let (h, w) = (s.height(), s.width());
    let mut rgb = s.rgb.clone();
    let mut ir = s.ir.clone();
    for y in 0..h {
        for x in 0..w {
            let src = y * w + (w - 1 - x);
            ir.data_mut()[y * w + x] = s.ir.data()[src];
            for c in 0..3 {
                rgb.data_mut()[(y * w + x) * 3 + c] = s.rgb.data()[src * 3 + c];
            }
        }
    }
    let boxes = s
        .boxes
        .iter()
        .map(|b| GroundTruth {
            bbox: BBox {
                cx: 1.0 - b.bbox.cx,
                ..b.bbox
            },
            ..*b
        })
        .collect();
    Sample {
        id: s.id.clone(),
        rgb,
        ir,
        boxes,
    }
}

/// Fill value of pixels uncovered by a translation.
pub const TRANSLATE_FILL: f32 = 0.5;

/// Shift both modalities by whole pixels. Boxes are moved, clipped to the
/// image and dropped when less than a quarter of their area remains.
pub fn translate(s: &Sample, dx: i64, dy: i64) -> Sample {
    let (h, w) = (s.height() as i64, s.width() as i64);
    let mut rgb = Tensor::full([h as usize, w as usize, 3], TRANSLATE_FILL);
    let mut ir = Tensor::full([h as usize, w as usize], TRANSLATE_FILL);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x - dx, y - dy);
            if sx < 0 || sy < 0 || sx >= w || sy >= h {
                continue;
            }
            let (dst, src) = ((y * w + x) as usize, (sy * w + sx) as usize);
            ir.data_mut()[dst] = s.ir.data()[src];
            for c in 0..3 {
                rgb.data_mut()[dst * 3 + c] = s.rgb.data()[src * 3 + c];
            }
        }
    }
    let (fx, fy) = (dx as f32 / w as f32, dy as f32 / h as f32);
    let boxes = s
        .boxes
        .iter()
        .filter_map(|b| {
            let moved = BBox {
                cx: b.bbox.cx + fx,
                cy: b.bbox.cy + fy,
                ..b.bbox
            };
            let clipped = moved.clipped();
            (clipped.area() >= 0.25 * b.bbox.area() && clipped.w > 0.0 && clipped.h > 0.0)
                .then_some(GroundTruth {
                    bbox: clipped,
                    ..*b
                })
        })
        .collect();
    Sample {
        id: s.id.clone(),
        rgb,
        ir,
        boxes,
    }
}

/// Random flip (p = 0.5) then random translation (p = 0.5) by up to 10% of
/// each extent; the same transform applies to RGB and IR.
pub fn augment(s: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let do_flip = rng.random_bool(0.5);
    let do_shift = rng.random_bool(0.5);
    let fx: f64 = rng.random_range(-0.1..=0.1);
    let fy: f64 = rng.random_range(-0.1..=0.1);
    let mut out = if do_flip { flip(s) } else { s.clone() };
    if do_shift {
        let dx = (fx * s.width() as f64).round() as i64;
        let dy = (fy * s.height() as f64).round() as i64;
        out = translate(&out, dx, dy);
    }
    out
}
