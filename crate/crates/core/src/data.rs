//! Deterministic bouncing-squares sequences.
//!
//! Every sequence draws from its own xoshiro256** stream derived from
//! `(seed, sequence index)`, so any sequence can be regenerated in
//! isolation. Draw order per sequence: for each object `x, y, speed,
//! angle`; then, for the cluttered variant, one background value per pixel
//! in row-major order; then per frame, for the dynamic-speed variant, a
//! normal perturbation of `vx` then `vy` for each object after the frame is
//! drawn.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Xoshiro256;
use crate::segmentation::FrameSequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Plain,
    /// Each velocity component receives `N(0, sigma_v²)` noise every frame.
    DynamicSpeed { sigma_v: f64 },
    /// A fixed per-sequence uniform `[0, amplitude)` texture under the objects.
    ClutteredBackground { noise_amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub num_sequences: usize,
    pub observed: usize,
    pub predicted: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_objects: usize,
    /// Side of each square object in pixels.
    pub object_size: usize,
    /// Speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_sequences: 256,
            observed: 4,
            predicted: 4,
            height: 16,
            width: 16,
            channels: 1,
            num_objects: 1,
            object_size: 4,
            speed_min: 1.0,
            speed_max: 2.0,
            variant: Variant::Plain,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn seq_len(&self) -> usize {
        self.observed + self.predicted
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 || self.seq_len() == 0 {
            return Err(Error::config("need at least one sequence of at least one frame"));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("frame geometry must be positive"));
        }
        if self.object_size == 0 || self.object_size >= self.height.min(self.width) {
            return Err(Error::config(format!(
                "object size {} must be positive and below min(H, W) = {}",
                self.object_size,
                self.height.min(self.width)
            )));
        }
        if !(self.speed_min.is_finite() && self.speed_max.is_finite())
            || self.speed_min < 0.0
            || self.speed_min > self.speed_max
        {
            return Err(Error::config(format!(
                "speed range [{}, {}] must be finite, non-negative and ordered",
                self.speed_min, self.speed_max
            )));
        }
        match self.variant {
            Variant::Plain => {}
            Variant::DynamicSpeed { sigma_v } => {
                if !(sigma_v.is_finite() && sigma_v >= 0.0) {
                    return Err(Error::config(format!("sigma_v {sigma_v} must be finite and >= 0")));
                }
            }
            Variant::ClutteredBackground { noise_amplitude } => {
                if !(0.0..1.0).contains(&noise_amplitude) {
                    return Err(Error::config(format!(
                        "noise amplitude {noise_amplitude} must lie in [0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `N` sequences of `L×C×H×W` pixels in `[0, 1]`, stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_sequences: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Generator settings, when the dataset was produced in-process.
    pub provenance: Option<GenConfig>,
}

impl Dataset {
    pub fn new(
        num_sequences: usize,
        seq_len: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = num_sequences
            .checked_mul(seq_len)
            .and_then(|v| v.checked_mul(channels))
            .and_then(|v| v.checked_mul(height))
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::config("dataset dimensions overflow"))?;
        if data.len() != expected {
            return Err(Error::dim(
                "dataset",
                format!("header needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            num_sequences,
            seq_len,
            channels,
            height,
            width,
            data,
            provenance: None,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sequence_len_values(&self) -> usize {
        self.seq_len * self.frame_len()
    }

    pub fn raw_sequence(&self, index: usize) -> &[f32] {
        let n = self.sequence_len_values();
        &self.data[index * n..(index + 1) * n]
    }

    /// Sequence `index` widened to `f64`.
    pub fn sequence(&self, index: usize) -> FrameSequence {
        let data = self.raw_sequence(index).iter().map(|&v| v as f64).collect();
        FrameSequence::from_data(self.seq_len, self.channels, self.height, self.width, data)
            .expect("dataset dimensions are validated on construction")
    }

    /// First `len` frames of every sequence.
    pub fn truncated(&self, len: usize) -> Result<Dataset> {
        if len == 0 || len > self.seq_len {
            return Err(Error::config(format!(
                "cannot keep {len} of {} frames",
                self.seq_len
            )));
        }
        let keep = len * self.frame_len();
        let mut data = Vec::with_capacity(self.num_sequences * keep);
        for i in 0..self.num_sequences {
            data.extend_from_slice(&self.raw_sequence(i)[..keep]);
        }
        Dataset::new(self.num_sequences, len, self.channels, self.height, self.width, data)
    }
}

/// A square with continuous top-left position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovingObject {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

fn reflect(pos: &mut f64, vel: &mut f64, max: f64) {
    *pos += *vel;
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = -*vel;
    } else if *pos > max {
        *pos = 2.0 * max - *pos;
        *vel = -*vel;
    }
    *pos = pos.clamp(0.0, max);
}

impl MovingObject {
    /// Moves by one frame inside `[0, max_x] × [0, max_y]`, reflecting the
    /// velocity component of any wall that is crossed.
    pub fn advance(&mut self, max_x: f64, max_y: f64) {
        reflect(&mut self.x, &mut self.vx, max_x);
        reflect(&mut self.y, &mut self.vy, max_y);
    }

    /// Integer top-left pixel `(row, col)`.
    pub fn cell(&self) -> (usize, usize) {
        (math::floor(self.y) as usize, math::floor(self.x) as usize)
    }
}

/// Draws one `C×H×W` frame: background (or zeros) plus filled squares of
/// intensity 1, saturating at 1.
pub fn rasterize(
    objects: &[MovingObject],
    size: usize,
    channels: usize,
    height: usize,
    width: usize,
    background: Option<&[f64]>,
) -> Vec<f64> {
    let mut plane = match background {
        Some(bg) => bg.to_vec(),
        None => vec![0.0; height * width],
    };
    for obj in objects {
        let (r0, c0) = obj.cell();
        for r in r0..(r0 + size).min(height) {
            for c in c0..(c0 + size).min(width) {
                let p = &mut plane[r * width + c];
                *p = (*p + 1.0).min(1.0);
            }
        }
    }
    let mut frame = Vec::with_capacity(channels * plane.len());
    for _ in 0..channels {
        frame.extend_from_slice(&plane);
    }
    frame
}

fn generate_sequence(config: &GenConfig, index: usize) -> Vec<f64> {
    let mut rng = Xoshiro256::for_stream(config.seed, index as u64);
    let max_x = (config.width - config.object_size) as f64;
    let max_y = (config.height - config.object_size) as f64;
    let mut objects: Vec<MovingObject> = (0..config.num_objects)
        .map(|_| {
            let x = rng.uniform(0.0, max_x);
            let y = rng.uniform(0.0, max_y);
            let speed = rng.uniform(config.speed_min, config.speed_max);
            let angle = rng.uniform(0.0, 2.0 * core::f64::consts::PI);
            MovingObject {
                x,
                y,
                vx: speed * math::cos(angle),
                vy: speed * math::sin(angle),
            }
        })
        .collect();
    let background: Option<Vec<f64>> = match config.variant {
        Variant::ClutteredBackground { noise_amplitude } => Some(
            (0..config.height * config.width)
                .map(|_| rng.uniform(0.0, noise_amplitude))
                .collect(),
        ),
        _ => None,
    };
    let mut out = Vec::with_capacity(config.seq_len() * config.channels * config.height * config.width);
    for _ in 0..config.seq_len() {
        out.extend(rasterize(
            &objects,
            config.object_size,
            config.channels,
            config.height,
            config.width,
            background.as_deref(),
        ));
        for obj in &mut objects {
            if let Variant::DynamicSpeed { sigma_v } = config.variant {
                obj.vx += sigma_v * rng.normal();
                obj.vy += sigma_v * rng.normal();
            }
            obj.advance(max_x, max_y);
        }
    }
    out
}

pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let mut data = Vec::with_capacity(
        config.num_sequences * config.seq_len() * config.channels * config.height * config.width,
    );
    for i in 0..config.num_sequences {
        data.extend(generate_sequence(config, i).into_iter().map(|v| v as f32));
    }
    let mut ds = Dataset::new(
        config.num_sequences,
        config.seq_len(),
        config.channels,
        config.height,
        config.width,
        data,
    )?;
    ds.provenance = Some(*config);
    Ok(ds)
}
