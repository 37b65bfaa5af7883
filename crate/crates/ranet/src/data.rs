//! Datasets: CIFAR-10 binary files, a procedurally generated shape corpus,
//! augmentation, and normalization.

use std::io::Read;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One sample: a `(1, C, H, W)` image plus its class label.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<LabeledImage>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Split off the last `n` samples as a holdout set.
    pub fn split_holdout(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n >= self.samples.len() {
            return Err(Error::Usage(format!(
                "holdout of {} from {} samples leaves nothing to train on",
                n,
                self.samples.len()
            )));
        }
        let held = self.samples.split_off(self.samples.len() - n);
        let classes = self.num_classes;
        Ok((self, Dataset { samples: held, num_classes: classes }))
    }
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Read one CIFAR-10 binary batch file: records of a label byte followed by
/// 3072 pixel bytes (channel-planar, row-major). Pixels are scaled to [0, 1].
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.is_empty() {
        return Err(Error::Format(format!("{}: empty file", path.display())));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a multiple of the {}-byte record size",
            path.display(),
            bytes.len(),
            CIFAR_RECORD
        )));
    }
    let mut samples = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!(
                "{}: record {} has label {} outside 0..=9",
                path.display(),
                i,
                label
            )));
        }
        let data: Vec<f32> = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        samples.push(LabeledImage { image: Tensor::new([1, 3, 32, 32], data)?, label });
    }
    Ok(Dataset { samples, num_classes: 10 })
}

/// Write a dataset in the same binary layout (for fixtures and round-trips).
pub fn save_cifar10_binary(path: &Path, ds: &Dataset) -> Result<()> {
    let mut bytes = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for s in &ds.samples {
        let [_, c, h, w] = s.image.shape();
        if (c, h, w) != (3, 32, 32) {
            return Err(Error::Usage(format!(
                "binary export needs 3x32x32 images, got {}x{}x{}",
                c, h, w
            )));
        }
        bytes.push(s.label as u8);
        bytes.extend(s.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// The four procedural shape classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Cross,
    Stripes,
}

const SHAPES: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Cross, Shape::Stripes];

/// Render one shape into a 3-channel image. `difficulty` in [0, 1] controls
/// pixel noise, color jitter, and size/position spread; 0 gives clean,
/// centered, high-contrast shapes.
fn render_shape(
    rng: &mut ChaCha20Rng,
    shape: Shape,
    res: usize,
    difficulty: f64,
) -> Tensor {
    let n = res as f64;
    let jitter = difficulty * n * 0.15;
    let cx = n / 2.0 + rng.gen_range(-1.0..=1.0) * jitter;
    let cy = n / 2.0 + rng.gen_range(-1.0..=1.0) * jitter;
    let size = n * (0.30 + rng.gen_range(-0.08..=0.08) * difficulty);
    let fg: [f64; 3] = {
        let base = [0.9, 0.6, 0.2];
        let mut c = [0.0; 3];
        for i in 0..3 {
            c[i] = (base[i] + rng.gen_range(-0.3..=0.3) * difficulty).clamp(0.05, 1.0);
        }
        c
    };
    let bg = 0.1 + rng.gen_range(0.0..=0.2) * difficulty;
    let angle = rng.gen_range(0.0..std::f64::consts::PI) * difficulty;
    let (sin_a, cos_a) = angle.sin_cos();
    let noise = Normal::new(0.0, 0.12 * difficulty).unwrap();

    let mut data = vec![0.0f32; 3 * res * res];
    for y in 0..res {
        for x in 0..res {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let rx = dx * cos_a + dy * sin_a;
            let ry = -dx * sin_a + dy * cos_a;
            let inside = match shape {
                Shape::Disk => (rx * rx + ry * ry).sqrt() <= size,
                Shape::Square => rx.abs() <= size * 0.85 && ry.abs() <= size * 0.85,
                Shape::Cross => {
                    let arm = size * 0.35;
                    (rx.abs() <= arm && ry.abs() <= size * 1.1)
                        || (ry.abs() <= arm && rx.abs() <= size * 1.1)
                }
                Shape::Stripes => ((rx / (size * 0.5)).rem_euclid(2.0)) < 1.0,
            };
            for ch in 0..3 {
                let base = if inside { fg[ch] } else { bg };
                let v = base + noise.sample(rng);
                data[ch * res * res + y * res + x] = (v.clamp(0.0, 1.0)) as f32;
            }
        }
    }
    Tensor::new([1, 3, res, res], data).unwrap()
}

/// Generate a balanced labeled shape dataset. Deterministic in `seed`.
pub fn synthesize_dataset(
    seed: u64,
    per_class: usize,
    resolution: usize,
    difficulty: f64,
) -> Result<Dataset> {
    if resolution == 0 || per_class == 0 {
        return Err(Error::Usage("resolution and per-class count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::Usage(format!("difficulty {} outside [0, 1]", difficulty)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(per_class * SHAPES.len());
    for i in 0..per_class {
        for (label, &shape) in SHAPES.iter().enumerate() {
            let mut sample_rng =
                ChaCha20Rng::seed_from_u64(rng.gen::<u64>() ^ (i as u64) << 8 ^ label as u64);
            samples.push(LabeledImage {
                image: render_shape(&mut sample_rng, shape, resolution, difficulty),
                label,
            });
        }
    }
    Ok(Dataset { samples, num_classes: SHAPES.len() })
}

/// Per-channel mean and standard deviation over a whole dataset.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub fn channel_stats(ds: &Dataset) -> Result<ChannelStats> {
    if ds.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty dataset".into()));
    }
    let c = ds.samples[0].image.shape()[1];
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    let mut count = vec![0u64; c];
    for s in &ds.samples {
        let [_, sc, h, w] = s.image.shape();
        if sc != c {
            return Err(Error::Data("inconsistent channel counts in dataset".into()));
        }
        let plane = h * w;
        for ch in 0..c {
            for &v in &s.image.data()[ch * plane..(ch + 1) * plane] {
                sum[ch] += v as f64;
                sumsq[ch] += (v as f64) * (v as f64);
            }
            count[ch] += plane as u64;
        }
    }
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let m = sum[ch] / count[ch] as f64;
        let v = (sumsq[ch] / count[ch] as f64 - m * m).max(0.0);
        mean.push(m as f32);
        std.push((v.sqrt().max(1e-6)) as f32);
    }
    Ok(ChannelStats { mean, std })
}

/// Normalize in place: per channel, subtract mean and divide by std.
pub fn normalize(ds: &mut Dataset, stats: &ChannelStats) {
    for s in &mut ds.samples {
        let [_, c, h, w] = s.image.shape();
        let plane = h * w;
        let data = s.image.data_mut();
        for ch in 0..c.min(stats.mean.len()) {
            let (m, sd) = (stats.mean[ch], stats.std[ch]);
            for v in &mut data[ch * plane..(ch + 1) * plane] {
                *v = (*v - m) / sd;
            }
        }
    }
}

/// Random training augmentation: zero-pad by 4 and crop back, then flip
/// horizontally with probability one half.
pub fn augment(image: &Tensor, rng: &mut ChaCha20Rng) -> Tensor {
    let [_, c, h, w] = image.shape();
    let pad = 4usize;
    let dy = Uniform::new_inclusive(0, 2 * pad).sample(rng);
    let dx = Uniform::new_inclusive(0, 2 * pad).sample(rng);
    let flip = rng.gen_bool(0.5);
    let mut out = vec![0.0f32; c * h * w];
    let src = image.data();
    for ch in 0..c {
        for y in 0..h {
            // source row in the padded frame
            let sy = y + dy;
            if sy < pad || sy >= pad + h {
                continue;
            }
            for x in 0..w {
                let sx = x + dx;
                if sx < pad || sx >= pad + w {
                    continue;
                }
                let ox = if flip { w - 1 - x } else { x };
                out[ch * h * w + y * w + ox] = src[ch * h * w + (sy - pad) * w + (sx - pad)];
            }
        }
    }
    Tensor::new([1, c, h, w], out).unwrap()
}
