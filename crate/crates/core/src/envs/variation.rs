//! Test-time visual variations. A variation only ever replaces background
//! pixels, so agent and target silhouettes are untouched by construction.

use std::fmt;
use std::str::FromStr;

use super::pixel::BACKGROUND;
use crate::error::{bail, Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::texture::{rgb_texture, NoiseParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariationMode {
    None,
    RandomColor,
    TextureBackground,
    DynamicDistractor,
}

impl VariationMode {
    pub const ALL: [VariationMode; 4] = [
        VariationMode::None,
        VariationMode::RandomColor,
        VariationMode::TextureBackground,
        VariationMode::DynamicDistractor,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariationMode::None => "none",
            VariationMode::RandomColor => "random_color",
            VariationMode::TextureBackground => "texture_background",
            VariationMode::DynamicDistractor => "dynamic_distractor",
        }
    }
}

impl fmt::Display for VariationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => VariationMode::None,
            "random_color" => VariationMode::RandomColor,
            "texture_background" => VariationMode::TextureBackground,
            "dynamic_distractor" => VariationMode::DynamicDistractor,
            other => bail!(InvalidArgument, "unknown variation mode '{other}'"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisualVariation {
    pub mode: VariationMode,
    pub seed: u64,
}

impl VisualVariation {
    pub fn none() -> Self {
        Self {
            mode: VariationMode::None,
            seed: 0,
        }
    }

    pub fn new(mode: VariationMode, seed: u64) -> Self {
        Self { mode, seed }
    }

    /// Planar `[3, h, w]` background for the frame rendered at `tick`.
    pub fn background(&self, tick: u64, height: usize, width: usize) -> Vec<f32> {
        let plane = height * width;
        let solid = |c: [f32; 3]| {
            let mut v = Vec::with_capacity(3 * plane);
            for ch in c {
                v.extend(std::iter::repeat(ch).take(plane));
            }
            v
        };
        match self.mode {
            VariationMode::None => solid(BACKGROUND),
            VariationMode::RandomColor => {
                let mut rng = Rng::new(self.seed, "variation.color");
                solid([rng.uniform_f32(), rng.uniform_f32(), rng.uniform_f32()])
            }
            VariationMode::TextureBackground => {
                let mut rng = Rng::new(self.seed, "variation.texture");
                let params = NoiseParams {
                    cell: (width.max(height) as f32 / 4.0).max(2.0),
                    ..NoiseParams::default()
                };
                rgb_texture(height, width, params, &mut rng)
            }
            VariationMode::DynamicDistractor => {
                let mut bg = solid(BACKGROUND);
                let mut rng = Rng::new(self.seed, "variation.distractor");
                for _ in 0..2 {
                    let color = [rng.uniform_f32(), rng.uniform_f32(), rng.uniform_f32()];
                    let (wx, wy) = (rng.uniform_range(0.05, 0.2), rng.uniform_range(0.05, 0.2));
                    let (px, py) = (rng.uniform_range(0.0, 6.3), rng.uniform_range(0.0, 6.3));
                    let radius = rng.uniform_range(0.1, 0.18);
                    let t = tick as f64;
                    let cx = 0.5 + 0.4 * (wx * t + px).sin();
                    let cy = 0.5 + 0.4 * (wy * t + py).sin();
                    for y in 0..height {
                        let yc = (y as f64 + 0.5) / height as f64;
                        for x in 0..width {
                            let xc = (x as f64 + 0.5) / width as f64;
                            if (xc - cx).powi(2) + (yc - cy).powi(2) <= radius * radius {
                                for (ch, &c) in color.iter().enumerate() {
                                    bg[ch * plane + y * width + x] = c;
                                }
                            }
                        }
                    }
                }
                bg
            }
        }
    }
}

fn is_background(frame: &[f32], plane: usize, p: usize) -> bool {
    (0..3).all(|c| frame[c * plane + p] == BACKGROUND[c])
}

/// Replaces canonical-background pixels of each stacked frame, frame `k`
/// using the background at `frame_ticks[k]`.
pub fn apply_variation_at(obs: &Tensor, variation: &VisualVariation, frame_ticks: &[u64]) -> Result<Tensor> {
    if obs.rank() != 3 || obs.shape()[0] % 3 != 0 {
        bail!(Shape, "observation must be [3 * stack, H, W], got {:?}", obs.shape());
    }
    let (c, h, w) = (obs.shape()[0], obs.shape()[1], obs.shape()[2]);
    let stack = c / 3;
    if frame_ticks.len() != stack {
        bail!(Shape, "{} frame ticks for a stack of {stack}", frame_ticks.len());
    }
    let mut out = obs.clone();
    if variation.mode == VariationMode::None {
        return Ok(out);
    }
    let plane = h * w;
    for (f, &tick) in frame_ticks.iter().enumerate() {
        let bg = variation.background(tick, h, w);
        let frame = &mut out.data_mut()[f * 3 * plane..(f + 1) * 3 * plane];
        for p in 0..plane {
            if is_background(frame, plane, p) {
                for ch in 0..3 {
                    frame[ch * plane + p] = bg[ch * plane + p];
                }
            }
        }
    }
    Ok(out)
}

/// [`apply_variation_at`] with every frame taken at tick 0.
pub fn apply_variation(obs: &Tensor, variation: &VisualVariation) -> Result<Tensor> {
    let stack = obs.shape().first().copied().unwrap_or(0) / 3;
    apply_variation_at(obs, variation, &vec![0; stack])
}
