//! Time-synchronized (intensity frame, modality) pairs: synthetic pair
//! generators, spatial alignment, temporal splitting, paired cropping and
//! on-disk manifests.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{s, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_tensor_blob, write_tensor_blob};
use crate::error::{Error, Result};
use crate::evaluation::BBox;
use crate::event_voxel::{read_events, voxelize, EventRecord, Polarity};

/// Image as (channels, height, width).
pub type Image = Array3<f64>;

/// Offset added before taking logs of intensities in [0, 1].
pub const LOG_EPS: f64 = 0.01;

/// The two spatially aligned views a grafting step consumes. Carries no label.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorPair {
    pub frame: Image,
    pub modality: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Evaluation-only annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Boxes(Vec<LabeledBox>),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Boxes(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub pair: SensorPair,
    pub timestamp: u64,
    pub label: Option<Label>,
}

impl PairedSample {
    pub fn frame(&self) -> &Image {
        &self.pair.frame
    }

    pub fn modality(&self) -> &Image {
        &self.pair.modality
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl DatasetSplit {
    /// Unlabeled training pairs, the only view the grafting trainer accepts.
    pub fn train_pairs(&self) -> Vec<SensorPair> {
        self.train.iter().map(|s| s.pair.clone()).collect()
    }
}

fn spatial(img: &Image) -> (usize, usize) {
    let (_, h, w) = img.dim();
    (h, w)
}

/// Integer translation with zero fill: output pixel (y, x) reads input
/// pixel (y - dy, x - dx).
pub fn align_shift(frame: &Image, dx: i64, dy: i64) -> Result<Image> {
    let (c, h, w) = frame.dim();
    if dx.unsigned_abs() as usize >= w.max(1) || dy.unsigned_abs() as usize >= h.max(1) {
        return Err(Error::Range {
            name: "shift",
            value: dx.unsigned_abs().max(dy.unsigned_abs()) as usize,
            valid: format!("|dx| < {w}, |dy| < {h}"),
        });
    }
    let mut out = Image::zeros((c, h, w));
    let (w_i, h_i) = (w as i64, h as i64);
    let (x0, x1) = (dx.max(0), (w_i + dx).min(w_i));
    let (y0, y1) = (dy.max(0), (h_i + dy).min(h_i));
    let u = |v: i64| v as usize;
    out.slice_mut(s![.., u(y0)..u(y1), u(x0)..u(x1)])
        .assign(&frame.slice(s![.., u(y0 - dy)..u(y1 - dy), u(x0 - dx)..u(x1 - dx)]));
    Ok(out)
}

/// Rectangle (x0, y0, width, height) still covered by both images after a
/// shift of (dx, dy).
pub fn common_region(width: usize, height: usize, dx: i64, dy: i64) -> (usize, usize, usize, usize) {
    let (w, h) = (width as i64, height as i64);
    let x0 = dx.max(0);
    let y0 = dy.max(0);
    let x1 = (w + dx).min(w);
    let y1 = (h + dy).min(h);
    (
        x0 as usize,
        y0 as usize,
        (x1 - x0).max(0) as usize,
        (y1 - y0).max(0) as usize,
    )
}

/// Shifts the modality of a pair by (dx, dy); with `crop_common`, both views
/// are then cropped to the region where they overlap.
pub fn align_pair(sample: &PairedSample, dx: i64, dy: i64, crop_common: bool) -> Result<PairedSample> {
    let modality = align_shift(&sample.pair.modality, dx, dy)?;
    let mut out = PairedSample {
        pair: SensorPair {
            frame: sample.pair.frame.clone(),
            modality,
        },
        ..sample.clone()
    };
    if crop_common {
        let (h, w) = spatial(&sample.pair.frame);
        let (x0, y0, cw, ch) = common_region(w, h, dx, dy);
        let crop = |img: &Image| img.slice(s![.., y0..y0 + ch, x0..x0 + cw]).to_owned();
        out.pair.frame = crop(&out.pair.frame);
        out.pair.modality = crop(&out.pair.modality);
    }
    Ok(out)
}

/// Translates a single-channel image by a sub-pixel offset with bilinear
/// interpolation and zero fill outside the source.
pub fn translate_bilinear(img: ArrayView2<'_, f64>, ox: f64, oy: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let at = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            img[[y as usize, x as usize]]
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = y as f64 - oy;
        let sx = x as f64 - ox;
        let y0 = sy.floor();
        let x0 = sx.floor();
        let fy = sy - y0;
        let fx = sx - x0;
        let (y0, x0) = (y0 as i64, x0 as i64);
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    })
}

/// Brightness-change events between consecutive frames.
///
/// Each pixel keeps a reference log intensity, initialised from the first
/// frame. Whenever the current log intensity moves a full `threshold` away
/// from the reference an event is emitted and the reference moves by
/// `threshold` in that direction; several events may fire per frame step.
/// Event times are interpolated linearly inside the step. The output is
/// sorted by time, ties broken by (y, x) raster order.
pub fn events_from_frames(
    frames: &[Array2<f64>],
    timestamps: &[u64],
    threshold: f64,
) -> Result<Vec<EventRecord>> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Config(format!("threshold must be > 0, got {threshold}")));
    }
    if frames.len() != timestamps.len() {
        return Err(Error::shape("frames vs timestamps", &[frames.len()], &[timestamps.len()]));
    }
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = first.dim();
    let log = |v: f64| (v + LOG_EPS).ln();
    let mut reference = first.mapv(log);
    let mut prev = reference.clone();
    let mut events = Vec::new();
    for (k, frame) in frames.iter().enumerate().skip(1) {
        if frame.dim() != (h, w) {
            return Err(Error::shape("frame size", &[h, w], &[frame.dim().0, frame.dim().1]));
        }
        let (t0, t1) = (timestamps[k - 1], timestamps[k]);
        if t1 < t0 {
            return Err(Error::UnsortedEvents(k));
        }
        let dt = (t1 - t0) as f64;
        let cur = frame.mapv(log);
        for y in 0..h {
            for x in 0..w {
                let (lp, lc) = (prev[[y, x]], cur[[y, x]]);
                let r = &mut reference[[y, x]];
                let crossing_time = |level: f64| -> u64 {
                    let a = if lc != lp { (level - lp) / (lc - lp) } else { 1.0 };
                    t0 + (a.clamp(0.0, 1.0) * dt).round() as u64
                };
                while lc - *r >= threshold {
                    *r += threshold;
                    events.push(EventRecord::new(crossing_time(*r), x as u32, y as u32, Polarity::On));
                }
                while *r - lc >= threshold {
                    *r -= threshold;
                    events.push(EventRecord::new(crossing_time(*r), x as u32, y as u32, Polarity::Off));
                }
            }
        }
        prev = cur;
    }
    events.sort_by_key(|e| (e.t, e.y, e.x));
    Ok(events)
}

/// Grayscale image with an optional evaluation label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Array2<f64>,
    pub label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthEventConfig {
    /// Number of rendered frames along the trajectory (>= 2).
    pub steps: usize,
    pub threshold: f64,
    /// Per-step displacement along each axis, in pixels, is drawn with
    /// magnitude in `[min_speed, max_speed]` and a random sign.
    #[serde(default)]
    pub min_speed: f64,
    pub max_speed: f64,
    /// Temporal slices of the voxel grid.
    pub slices: usize,
    /// Time between rendered frames, microseconds.
    pub frame_interval_us: u64,
    pub seed: u64,
}

impl Default for SynthEventConfig {
    fn default() -> Self {
        Self {
            steps: 6,
            threshold: 0.1,
            min_speed: 0.0,
            max_speed: 0.75,
            slices: 3,
            frame_interval_us: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SynthOutput {
    pub samples: Vec<PairedSample>,
    /// Inputs that produced no events and were skipped.
    pub skipped: usize,
    pub total_events: usize,
}

/// Straight-line trajectory of `steps` offsets ending at (0, 0).
pub fn linear_trajectory(steps: usize, vx: f64, vy: f64) -> Vec<(f64, f64)> {
    (0..steps)
        .map(|k| {
            let back = (steps - 1 - k) as f64;
            (-back * vx, -back * vy)
        })
        .collect()
}

/// Renders each image along `trajectory` and converts the frame sequence to events.
pub fn events_along_trajectory(
    image: &Array2<f64>,
    trajectory: &[(f64, f64)],
    threshold: f64,
    frame_interval_us: u64,
) -> Result<Vec<EventRecord>> {
    let frames: Vec<_> = trajectory
        .iter()
        .map(|&(ox, oy)| translate_bilinear(image.view(), ox, oy))
        .collect();
    let times: Vec<u64> = (0..frames.len() as u64).map(|k| k * frame_interval_us).collect();
    events_from_frames(&frames, &times, threshold)
}

/// Synthetic intensity/event pairs.
///
/// Every image moves along a random straight trajectory that ends at its
/// original position; the events of the motion are voxelized and paired
/// with the final frame (the frame at the end of the event window).
/// Deterministic for a given seed.
pub fn synth_event_pairs(images: &[LabeledImage], cfg: &SynthEventConfig) -> Result<SynthOutput> {
    if cfg.steps < 2 {
        return Err(Error::Config(format!("steps must be >= 2, got {}", cfg.steps)));
    }
    if cfg.threshold.is_nan() || cfg.threshold <= 0.0 {
        return Err(Error::Config(format!("threshold must be > 0, got {}", cfg.threshold)));
    }
    if !(cfg.min_speed >= 0.0 && cfg.max_speed >= cfg.min_speed) {
        return Err(Error::Config(format!(
            "need 0 <= min_speed <= max_speed, got {} and {}",
            cfg.min_speed, cfg.max_speed
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SynthOutput::default();
    let window_us = cfg.frame_interval_us * cfg.steps as u64;
    for (i, item) in images.iter().enumerate() {
        let mut speed = || {
            if cfg.max_speed > 0.0 {
                let v = rng.random_range(cfg.min_speed..=cfg.max_speed);
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            } else {
                0.0
            }
        };
        let (vx, vy) = (speed(), speed());
        let traj = linear_trajectory(cfg.steps, vx, vy);
        let events = events_along_trajectory(&item.image, &traj, cfg.threshold, cfg.frame_interval_us)?;
        if events.is_empty() {
            out.skipped += 1;
            continue;
        }
        out.total_events += events.len();
        let (h, w) = item.image.dim();
        let grid = voxelize(&events, cfg.slices, h, w)?;
        let final_frame = translate_bilinear(item.image.view(), traj[cfg.steps - 1].0, traj[cfg.steps - 1].1);
        out.samples.push(PairedSample {
            pair: SensorPair {
                frame: final_frame.insert_axis(ndarray::Axis(0)),
                modality: grid.slices,
            },
            timestamp: i as u64 * window_us,
            label: item.label.clone(),
        });
    }
    Ok(out)
}

/// Intensity remapping applied to produce a thermal-like view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remap {
    Identity,
    Invert,
    Gamma(f64),
}

impl Remap {
    fn apply(self, v: f64) -> f64 {
        match self {
            Remap::Identity => v,
            Remap::Invert => 1.0 - v,
            Remap::Gamma(g) => v.max(0.0).powf(g),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthThermalConfig {
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub remap: Remap,
    pub seed: u64,
}

impl Default for SynthThermalConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            blur_radius: 1,
            remap: Remap::Invert,
            seed: 0,
        }
    }
}

/// Mean over a (2r+1) x (2r+1) window, clipped at the borders.
pub fn box_blur(img: ArrayView2<'_, f64>, radius: usize) -> Array2<f64> {
    if radius == 0 {
        return img.to_owned();
    }
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let ys = y.saturating_sub(radius)..(y + radius + 1).min(h);
        let xs = x.saturating_sub(radius)..(x + radius + 1).min(w);
        let n = (ys.len() * xs.len()) as f64;
        img.slice(s![ys, xs]).sum() / n
    })
}

/// Thermal-like pairs: the modality is a blurred, remapped copy of the frame
/// plus Gaussian noise. Deterministic for a given seed.
pub fn synth_thermal_pairs(images: &[LabeledImage], cfg: &SynthThermalConfig) -> Result<Vec<PairedSample>> {
    if cfg.noise_sigma.is_nan() || cfg.noise_sigma < 0.0 {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {}", cfg.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    images
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let mut m = box_blur(item.image.view(), cfg.blur_radius).mapv(|v| cfg.remap.apply(v));
            if cfg.noise_sigma > 0.0 {
                m.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
            Ok(PairedSample {
                pair: SensorPair {
                    frame: item.image.clone().insert_axis(ndarray::Axis(0)),
                    modality: m.insert_axis(ndarray::Axis(0)),
                },
                timestamp: i as u64,
                label: item.label.clone(),
            })
        })
        .collect()
}

/// Prefix/suffix split of time-ordered samples; the first
/// `round(n * train_fraction)` go to training.
pub fn split_temporal(samples: Vec<PairedSample>, train_fraction: f64) -> Result<DatasetSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if let Some(i) = samples.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::UnsortedEvents(i + 1));
    }
    let n_train = (samples.len() as f64 * train_fraction).round() as usize;
    let mut train = samples;
    let test = train.split_off(n_train.min(train.len()));
    Ok(DatasetSplit { train, test })
}

/// Crops the same `size x size` window, at a random offset, from both views.
pub fn random_crop_pair<R: Rng + ?Sized>(sample: &PairedSample, size: usize, rng: &mut R) -> Result<PairedSample> {
    Ok(PairedSample {
        pair: random_crop(&sample.pair, size, rng)?,
        ..sample.clone()
    })
}

pub fn random_crop<R: Rng + ?Sized>(pair: &SensorPair, size: usize, rng: &mut R) -> Result<SensorPair> {
    let (h, w) = spatial(&pair.frame);
    let (mh, mw) = spatial(&pair.modality);
    if (h, w) != (mh, mw) {
        return Err(Error::shape("frame vs modality spatial size", &[h, w], &[mh, mw]));
    }
    if size == 0 || size > h || size > w {
        return Err(Error::Range {
            name: "crop size",
            value: size,
            valid: format!("1..={}", h.min(w)),
        });
    }
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    let crop = |img: &Image| img.slice(s![.., y0..y0 + size, x0..x0 + size]).to_owned();
    Ok(SensorPair {
        frame: crop(&pair.frame),
        modality: crop(&pair.modality),
    })
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Reads an IDX3 image file (optionally gzipped) scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<Vec<Array2<f64>>> {
    let b = open_maybe_gz(path)?;
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    if b.len() < 16 || be_u32(&b, 0) != 2051 {
        return Err(bad("not an IDX3 image file"));
    }
    let (n, rows, cols) = (be_u32(&b, 4) as usize, be_u32(&b, 8) as usize, be_u32(&b, 12) as usize);
    if b.len() != 16 + n * rows * cols {
        return Err(bad("size does not match header"));
    }
    Ok(b[16..]
        .chunks_exact(rows * cols)
        .map(|px| {
            Array2::from_shape_vec((rows, cols), px.iter().map(|&v| f64::from(v) / 255.0).collect())
                .expect("chunk sized rows*cols")
        })
        .collect())
}

/// Reads an IDX1 label file (optionally gzipped).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let b = open_maybe_gz(path)?;
    if b.len() < 8 || be_u32(&b, 0) != 2049 || b.len() != 8 + be_u32(&b, 4) as usize {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "not an IDX1 label file".into(),
        });
    }
    Ok(b[8..].iter().map(|&v| usize::from(v)).collect())
}

/// Loads `images-idx3-ubyte[.gz]` and `labels-idx1-ubyte[.gz]` from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<Vec<LabeledImage>> {
    let pick = |stem: &str| -> PathBuf {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    let images = load_idx_images(&pick("images-idx3-ubyte"))?;
    let labels = load_idx_labels(&pick("labels-idx1-ubyte"))?;
    if images.len() != labels.len() {
        return Err(Error::shape("images vs labels", &[images.len()], &[labels.len()]));
    }
    Ok(images
        .into_iter()
        .zip(labels)
        .map(|(image, l)| LabeledImage {
            image,
            label: Some(Label::Class(l)),
        })
        .collect())
}

/// Writes a 1- or 3-channel image with values clamped to [0, 1] as 8-bit PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.dim();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([q(img[[0, y as usize, x as usize]])])
            });
            buf.save(path)?;
        }
        3 => {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let p = |ch| q(img[[ch, y as usize, x as usize]]);
                image::Rgb([p(0), p(1), p(2)])
            });
            buf.save(path)?;
        }
        _ => return Err(Error::Invalid(format!("PNG export needs 1 or 3 channels, got {c}"))),
    }
    Ok(())
}

/// Reads a PNG as (1, H, W) for grayscale or (3, H, W) otherwise, in [0, 1].
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        Ok(Image::from_shape_fn((3, h, w), |(c, y, x)| {
            f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
        }))
    } else {
        let g = img.to_luma8();
        Ok(Image::from_shape_fn((1, h, w), |(_, y, x)| {
            f64::from(g.get_pixel(x as u32, y as u32)[0]) / 255.0
        }))
    }
}

/// Reference to a window of an event recording, voxelized on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventWindowRef {
    pub events_path: String,
    pub start: usize,
    pub count: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
}

/// One line of a paired-dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub frame_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_window: Option<EventWindowRef>,
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_modality(base: &Path, rec: &ManifestRecord) -> Result<Image> {
    match (&rec.modality_path, &rec.event_window) {
        (Some(p), None) => {
            let path = resolve(base, p);
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                load_png(&path)
            } else {
                read_tensor_blob(&path)?
                    .into_dimensionality::<ndarray::Ix3>()
                    .map_err(|_| Error::Format {
                        path: path.display().to_string(),
                        reason: "modality tensor must be 3-dimensional".into(),
                    })
            }
        }
        (None, Some(w)) => {
            let events = read_events(&resolve(base, &w.events_path))?;
            let end = w.start + w.count;
            if end > events.len() {
                return Err(Error::Range {
                    name: "event window end",
                    value: end,
                    valid: format!("..={}", events.len()),
                });
            }
            Ok(voxelize(&events[w.start..end], w.slices, w.height, w.width)?.slices)
        }
        _ => Err(Error::Invalid(format!(
            "manifest record for {} needs exactly one of modality_path or event_window",
            rec.frame_path
        ))),
    }
}

/// Loads every record of a JSON-lines manifest; relative paths are resolved
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<PairedSample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        let frame = load_png(&resolve(base, &rec.frame_path))?;
        let modality = load_modality(base, &rec)?;
        out.push(PairedSample {
            pair: SensorPair { frame, modality },
            timestamp: rec.timestamp,
            label: rec.label,
        });
    }
    Ok(out)
}

/// Writes samples as PNG frames, tensor-blob modalities and a `manifest.jsonl`.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[PairedSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("modality"))?;
    let manifest = dir.join("manifest.jsonl");
    let mut f = std::io::BufWriter::new(fs::File::create(&manifest)?);
    for (i, s) in samples.iter().enumerate() {
        let frame_rel = format!("frames/{i:06}.png");
        let mod_rel = format!("modality/{i:06}.gkt");
        save_png(&dir.join(&frame_rel), &s.pair.frame)?;
        write_tensor_blob(&dir.join(&mod_rel), &s.pair.modality.clone().into_dyn())?;
        let rec = ManifestRecord {
            frame_path: frame_rel,
            modality_path: Some(mod_rel),
            event_window: None,
            timestamp: s.timestamp,
            label: s.label.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
    }
    f.flush()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample(h: usize, w: usize, t: u64) -> PairedSample {
        let frame = Image::from_shape_fn((1, h, w), |(_, y, x)| (y * w + x) as f64);
        let modality = Image::from_shape_fn((3, h, w), |(c, y, x)| (c * 1000 + y * w + x) as f64);
        PairedSample {
            pair: SensorPair { frame, modality },
            timestamp: t,
            label: None,
        }
    }

    #[test]
    fn shift_identity_and_right() {
        let img = array![[[1.0, 2.0], [3.0, 4.0]]];
        assert_eq!(align_shift(&img, 0, 0).unwrap(), img);
        assert_eq!(align_shift(&img, 1, 0).unwrap(), array![[[0.0, 1.0], [0.0, 3.0]]]);
        assert_eq!(align_shift(&img, 0, -1).unwrap(), array![[[3.0, 4.0], [0.0, 0.0]]]);
        assert!(align_shift(&img, 2, 0).is_err());
        assert!(align_shift(&img, 0, -2).is_err());
    }

    #[test]
    fn shift_round_trip_on_interior() {
        let img = sample(6, 7, 0).pair.frame;
        for (dx, dy) in [(2, 1), (-3, 2), (1, -4)] {
            let back = align_shift(&align_shift(&img, dx, dy).unwrap(), -dx, -dy).unwrap();
            let (x0, y0, cw, ch) = common_region(7, 6, dx, dy);
            // Interior = pixels whose shifted position stays inside the image.
            let (x0, y0) = (x0 as i64 - dx, y0 as i64 - dy);
            for y in y0..y0 + ch as i64 {
                for x in x0..x0 + cw as i64 {
                    assert_eq!(back[[0, y as usize, x as usize]], img[[0, y as usize, x as usize]]);
                }
            }
        }
    }

    #[test]
    fn align_pair_crops_common_region() {
        let s = sample(5, 6, 0);
        let a = align_pair(&s, 2, -1, true).unwrap();
        assert_eq!(a.pair.frame.dim(), (1, 4, 4));
        assert_eq!(a.pair.modality.dim(), (3, 4, 4));
        // Frame pixel (y=0, x=2) and the shifted modality pixel read source (y+1, x-2).
        assert_eq!(a.pair.frame[[0, 0, 0]], s.pair.frame[[0, 0, 2]]);
        assert_eq!(a.pair.modality[[0, 0, 0]], s.pair.modality[[0, 1, 0]]);
    }

    #[test]
    fn static_trajectory_emits_nothing() {
        let img = Array2::from_shape_fn((8, 8), |(y, x)| ((x + y) % 3) as f64 / 2.0);
        let traj = linear_trajectory(5, 0.0, 0.0);
        assert!(events_along_trajectory(&img, &traj, 0.1, 100).unwrap().is_empty());
        let items = [LabeledImage { image: img, label: None }];
        let cfg = SynthEventConfig {
            max_speed: 0.0,
            ..Default::default()
        };
        let out = synth_event_pairs(&items, &cfg).unwrap();
        assert_eq!((out.samples.len(), out.skipped), (0, 1));
    }

    #[test]
    fn moving_dot_polarities() {
        let mut a = Array2::zeros((3, 4));
        a[[1, 1]] = 1.0;
        let mut b = Array2::zeros((3, 4));
        b[[1, 2]] = 1.0;
        let ev = events_from_frames(&[a, b], &[0, 1000], 0.5).unwrap();
        assert!(!ev.is_empty());
        for e in &ev {
            match e.p {
                Polarity::Off => assert_eq!((e.x, e.y), (1, 1)),
                Polarity::On => assert_eq!((e.x, e.y), (2, 1)),
            }
        }
        let n_on = ev.iter().filter(|e| e.p == Polarity::On).count();
        let n_off = ev.len() - n_on;
        // log(1.01) - log(0.01) = 4.615..., nine full 0.5 steps each way.
        assert_eq!((n_on, n_off), (9, 9));
        assert!(ev.windows(2).all(|w| w[0].t <= w[1].t));
    }

    #[test]
    fn synthetic_events_are_reproducible() {
        let img = Array2::from_shape_fn((12, 12), |(y, x)| if (3..9).contains(&y) && (4..8).contains(&x) { 1.0 } else { 0.0 });
        let items = vec![LabeledImage { image: img, label: Some(Label::Class(4)) }; 3];
        let cfg = SynthEventConfig { seed: 5, ..Default::default() };
        let a = synth_event_pairs(&items, &cfg).unwrap();
        let b = synth_event_pairs(&items, &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.total_events, b.total_events);
        assert!(a.total_events > 0);
        let s = &a.samples[0];
        assert_eq!(s.pair.modality.dim(), (3, 12, 12));
        // Trajectories end at the original position.
        assert_eq!(s.pair.frame.index_axis(ndarray::Axis(0), 0), items[0].image);
        assert!(a.samples.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    }

    #[test]
    fn thermal_identity_and_inversion() {
        let img = Array2::from_shape_fn((4, 5), |(y, x)| (y * 5 + x) as f64 / 20.0);
        let items = [LabeledImage { image: img.clone(), label: None }];
        let id = SynthThermalConfig { noise_sigma: 0.0, blur_radius: 0, remap: Remap::Identity, seed: 0 };
        let s = synth_thermal_pairs(&items, &id).unwrap();
        assert_eq!(s[0].pair.modality, s[0].pair.frame);
        let inv = SynthThermalConfig { remap: Remap::Invert, ..id };
        let s = synth_thermal_pairs(&items, &inv).unwrap();
        assert_eq!(s[0].pair.modality, s[0].pair.frame.mapv(|v| 1.0 - v));
        let noisy = SynthThermalConfig { noise_sigma: 0.1, blur_radius: 1, remap: Remap::Gamma(0.5), seed: 3 };
        assert_eq!(synth_thermal_pairs(&items, &noisy).unwrap(), synth_thermal_pairs(&items, &noisy).unwrap());
        assert!(synth_thermal_pairs(&items, &SynthThermalConfig { noise_sigma: -1.0, ..noisy }).is_err());
    }

    #[test]
    fn temporal_split() {
        let samples: Vec<_> = (0..7000).map(|t| sample(2, 2, t)).collect();
        let split = split_temporal(samples, 5000.0 / 7000.0).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (5000, 2000));
        let max_train = split.train.iter().map(|s| s.timestamp).max().unwrap();
        let min_test = split.test.iter().map(|s| s.timestamp).min().unwrap();
        assert!(max_train < min_test);

        let samples: Vec<_> = (0..10).map(|t| sample(2, 2, t)).collect();
        let split = split_temporal(samples.clone(), 0.5).unwrap();
        assert_eq!(split.test[0].timestamp, 5);
        assert!(split_temporal(samples.clone(), 0.0).is_err());
        assert!(split_temporal(samples, 1.0).is_err());
        let unsorted = vec![sample(2, 2, 3), sample(2, 2, 1)];
        assert!(split_temporal(unsorted, 0.5).is_err());
    }

    #[test]
    fn paired_crop_shares_window() {
        let s = sample(512, 640, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_crop_pair(&s, 224, &mut rng).unwrap();
        assert_eq!(c.pair.frame.dim(), (1, 224, 224));
        assert_eq!(c.pair.modality.dim(), (3, 224, 224));
        // Both views encode their source coordinate, so the offsets must agree.
        let f = c.pair.frame[[0, 0, 0]] as usize;
        let m = c.pair.modality[[0, 0, 0]] as usize;
        assert_eq!(f, m);
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_crop_pair(&s, 224, &mut rng2).unwrap(), c);
        assert_eq!(random_crop_pair(&s, 512, &mut rng).unwrap().pair.frame.dim(), (1, 512, 512));
        assert!(random_crop_pair(&s, 513, &mut rng).is_err());

        let small = sample(4, 4, 0);
        assert_eq!(random_crop_pair(&small, 4, &mut rng).unwrap(), small);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Image::from_shape_fn((1, 3, 4), |(_, y, x)| ((y * 4 + x) * 17 % 256) as f64 / 255.0);
        let modality = Image::from_shape_fn((2, 3, 4), |(c, y, x)| c as f64 - 0.37 * (y + x) as f64);
        let samples = vec![PairedSample {
            pair: SensorPair { frame, modality },
            timestamp: 42,
            label: Some(Label::Class(7)),
        }];
        let manifest = write_dataset(dir.path(), &samples).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded, samples);
    }

    #[test]
    fn manifest_event_window_reference() {
        let dir = tempfile::tempdir().unwrap();
        let events = "t,x,y,p\n0,0,0,1\n10,1,0,0\n20,1,1,1\n";
        fs::write(dir.path().join("ev.csv"), events).unwrap();
        save_png(&dir.path().join("f.png"), &Image::zeros((1, 2, 2))).unwrap();
        let rec = r#"{"frame_path":"f.png","event_window":{"events_path":"ev.csv","start":0,"count":3,"slices":3,"height":2,"width":2},"timestamp":5}"#;
        fs::write(dir.path().join("m.jsonl"), format!("{rec}\n")).unwrap();
        let s = load_manifest(&dir.path().join("m.jsonl")).unwrap();
        assert_eq!(s[0].pair.modality[[1, 0, 1]], -1.0);
        assert_eq!(s[0].pair.modality.sum(), 1.0);
        let bad = r#"{"frame_path":"f.png","timestamp":5,"extra":1}"#;
        fs::write(dir.path().join("bad.jsonl"), format!("{bad}\n")).unwrap();
        assert!(load_manifest(&dir.path().join("bad.jsonl")).is_err());
    }
}
