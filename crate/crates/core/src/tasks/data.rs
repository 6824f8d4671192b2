//! Deterministic synthetic samples.
//!
//! Flow samples are integer translations of a band-limited texture (a sum of
//! random sinusoids). Depth samples are fronto-parallel rectangles over a
//! background plane, drawn far to near, with shading `1.5 / depth` modulated
//! by a texture. All pixel values are representable in `f32`, so a dataset
//! survives the checkpoint format unchanged.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::encoder::Head;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

const TEXTURE_COMPONENTS: usize = 24;
const TEXTURE_FREQ_MIN: f64 = 0.03;
const TEXTURE_FREQ_MAX: f64 = 0.08;
/// Candidate plane depths: 1.5, 2.0, ..., 8.0.
const DEPTH_LEVELS: usize = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    /// `H x W x 1` in `[0, 1]`.
    pub frame1: Tensor,
    pub frame2: Tensor,
    /// `H x W x 2`, `(u, v)` in pixels.
    pub flow: Tensor,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthSample {
    /// `H x W x 1` in `[0, 1]`.
    pub image: Tensor,
    /// `H x W`, strictly positive.
    pub depth: Tensor,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Flow(FlowSample),
    Depth(DepthSample),
}

impl Sample {
    pub fn task(&self) -> Head {
        match self {
            Sample::Flow(_) => Head::Flow,
            Sample::Depth(_) => Head::Depth,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        match self {
            Sample::Flow(s) => {
                c.insert("frame1", s.frame1.clone());
                c.insert("frame2", s.frame2.clone());
                c.insert("flow", s.flow.clone());
            }
            Sample::Depth(s) => {
                c.insert("frame1", s.image.clone());
                c.insert("depth", s.depth.clone());
            }
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, seed: u64) -> Result<Self> {
        if c.get("flow").is_some() {
            Ok(Sample::Flow(FlowSample {
                frame1: c.require("frame1")?.clone(),
                frame2: c.require("frame2")?.clone(),
                flow: c.require("flow")?.clone(),
                seed,
            }))
        } else {
            let depth = c.require("depth")?.clone();
            if depth.data().iter().any(|&d| d <= 0.0) {
                return Err(Error::Data("depth sample has nonpositive depth".into()));
            }
            Ok(Sample::Depth(DepthSample {
                image: c.require("frame1")?.clone(),
                depth,
                seed,
            }))
        }
    }
}

/// Sum of random plane waves, normalised to `[0, 1]` and rounded to `f32`.
fn texture(rng: &mut impl Rng, height: usize, width: usize) -> Vec<f64> {
    let mut img = vec![0.0; height * width];
    for _ in 0..TEXTURE_COMPONENTS {
        let f = rng.gen_range(TEXTURE_FREQ_MIN..TEXTURE_FREQ_MAX);
        let theta = rng.gen_range(0.0..TAU);
        let phase = rng.gen_range(0.0..TAU);
        let (kx, ky) = (TAU * f * theta.cos(), TAU * f * theta.sin());
        for y in 0..height {
            for x in 0..width {
                img[y * width + x] += (kx * x as f64 + ky * y as f64 + phase).cos();
            }
        }
    }
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    img.iter().map(|v| ((v - lo) / span) as f32 as f64).collect()
}

pub fn gen_flow_sample(seed: u64, height: usize, width: usize, max_shift: usize) -> Result<FlowSample> {
    if 4 * max_shift >= height.min(width) {
        return Err(Error::Param(format!(
            "max shift {max_shift} must be below a quarter of {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = max_shift as i64;
    let du = rng.gen_range(-m..=m);
    let dv = rng.gen_range(-m..=m);
    flow_sample_from(&mut rng, seed, height, width, max_shift, du, dv)
}

/// A flow sample with a prescribed shift `(du, dv)`.
pub fn gen_flow_sample_with_shift(seed: u64, height: usize, width: usize, du: i64, dv: i64) -> Result<FlowSample> {
    let margin = du.unsigned_abs().max(dv.unsigned_abs()) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    flow_sample_from(&mut rng, seed, height, width, margin, du, dv)
}

fn flow_sample_from(
    rng: &mut impl Rng,
    seed: u64,
    height: usize,
    width: usize,
    margin: usize,
    du: i64,
    dv: i64,
) -> Result<FlowSample> {
    let (ch, cw) = (height + 2 * margin, width + 2 * margin);
    let canvas = texture(rng, ch, cw);
    let m = margin as i64;
    let at = |y: i64, x: i64| canvas[(y + m) as usize * cw + (x + m) as usize];
    let mut frame1 = Vec::with_capacity(height * width);
    let mut frame2 = Vec::with_capacity(height * width);
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            frame1.push(at(y, x));
            // frame2(p + flow) = frame1(p)
            frame2.push(at(y - dv, x - du));
        }
    }
    let flow = (0..height * width).flat_map(|_| [du as f64, dv as f64]).collect();
    Ok(FlowSample {
        frame1: Tensor::new(&[height, width, 1], frame1)?,
        frame2: Tensor::new(&[height, width, 1], frame2)?,
        flow: Tensor::new(&[height, width, 2], flow)?,
        seed,
    })
}

/// Depth sample with 2 to 4 rectangles.
pub fn gen_depth_sample(seed: u64, height: usize, width: usize) -> Result<DepthSample> {
    let n = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).gen_range(2..=4);
    gen_depth_sample_with(seed, height, width, n)
}

/// Depth sample with exactly `rects` visible rectangles over the background.
pub fn gen_depth_sample_with(seed: u64, height: usize, width: usize, rects: usize) -> Result<DepthSample> {
    if rects + 1 > DEPTH_LEVELS {
        return Err(Error::Param(format!("at most {} rectangles", DEPTH_LEVELS - 1)));
    }
    if rects > 0 && height.min(width) < 4 {
        return Err(Error::Param("image too small for rectangles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = texture(&mut rng, height, width);
    loop {
        let mut levels: Vec<usize> = (0..DEPTH_LEVELS).collect();
        for i in 0..=rects {
            let j = rng.gen_range(i..DEPTH_LEVELS);
            levels.swap(i, j);
        }
        let mut planes: Vec<f64> = levels[..=rects].iter().map(|&l| 1.5 + 0.5 * l as f64).collect();
        // background farthest, then far to near
        planes.sort_by(|a, b| b.total_cmp(a));
        let mut depth = vec![planes[0]; height * width];
        for &d in &planes[1..] {
            let rh = rng.gen_range(height / 4..=height / 2);
            let rw = rng.gen_range(width / 4..=width / 2);
            let y0 = rng.gen_range(0..=height - rh);
            let x0 = rng.gen_range(0..=width - rw);
            for y in y0..y0 + rh {
                depth[y * width + x0..y * width + x0 + rw].fill(d);
            }
        }
        let visible = planes.iter().all(|p| depth.contains(p));
        if !visible {
            continue;
        }
        let image = depth
            .iter()
            .zip(&tex)
            .map(|(d, t)| (1.5 / d * (0.85 + 0.15 * t)) as f32 as f64)
            .collect();
        return Ok(DepthSample {
            image: Tensor::new(&[height, width, 1], image)?,
            depth: Tensor::new(&[height, width], depth)?,
            seed,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataConfig {
    pub count: usize,
    pub size: usize,
    pub max_shift: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 80,
            size: 32,
            max_shift: 3,
        }
    }
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(task: Head, config: &DataConfig, seed: u64, exec: Execution) -> Result<Self> {
        if config.count == 0 {
            return Err(Error::Param("dataset must be nonempty".into()));
        }
        let samples = par::map_range(exec, config.count, |i| {
            let s = sample_seed(seed, i);
            match task {
                Head::Flow => gen_flow_sample(s, config.size, config.size, config.max_shift).map(Sample::Flow),
                Head::Depth => gen_depth_sample(s, config.size, config.size).map(Sample::Depth),
            }
        });
        Ok(Self {
            samples: samples.into_iter().collect::<Result<_>>()?,
        })
    }

    pub fn task(&self) -> Option<Head> {
        self.samples.first().map(Sample::task)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First 80% for training, the rest held out.
    pub fn split(&self) -> (&[Sample], &[Sample]) {
        let n = self.samples.len() * 4 / 5;
        self.samples.split_at(n)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (i, s) in self.samples.iter().enumerate() {
            s.to_checkpoint().save(dir.join(format!("sample_{i:05}.pfkt")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("sample_") && n.ends_with(".pfkt"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!("no samples in {}", dir.as_ref().display())));
        }
        let samples = paths
            .iter()
            .enumerate()
            .map(|(i, p)| Sample::from_checkpoint(&Checkpoint::load(p)?, i as u64))
            .collect::<Result<Vec<_>>>()?;
        if samples.iter().any(|s| s.task() != samples[0].task()) {
            return Err(Error::Data("dataset mixes flow and depth samples".into()));
        }
        Ok(Self { samples })
    }
}
