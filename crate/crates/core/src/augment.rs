//! Augmentation operators on stacked observations `[3 * stack, H, W]`.
//!
//! Every stochastic operator draws one spatial transform per call and
//! applies it to all frames of the stack.

use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::texture::{rgb_texture, NoiseParams};

fn dims(obs: &Tensor) -> Result<(usize, usize, usize)> {
    if obs.rank() != 3 {
        bail!(Shape, "observation must be [C, H, W], got {:?}", obs.shape());
    }
    Ok((obs.shape()[0], obs.shape()[1], obs.shape()[2]))
}

fn frames_of(obs: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = dims(obs)?;
    if c % 3 != 0 {
        bail!(Shape, "observation channels must be a multiple of 3, got {c}");
    }
    Ok((c / 3, h, w))
}

/// Crop at offset `(dy, dx)` from the edge-replicated, `pad`-padded image.
pub fn shift_at(obs: &Tensor, pad: usize, dy: usize, dx: usize) -> Result<Tensor> {
    let (c, h, w) = dims(obs)?;
    if pad > 0 && pad >= h.min(w) {
        bail!(InvalidArgument, "shift pad {pad} must be smaller than the frame ({h}x{w})");
    }
    if dy > 2 * pad || dx > 2 * pad {
        bail!(InvalidArgument, "shift offset ({dy}, {dx}) exceeds 2 * pad");
    }
    let mut out = Tensor::zeros(obs.shape());
    let src = obs.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy).saturating_sub(pad).min(h - 1);
            for x in 0..w {
                let sx = (x + dx).saturating_sub(pad).min(w - 1);
                dst[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Ok(out)
}

/// Random shift (pad-and-crop) with a uniformly drawn offset.
pub fn random_shift(obs: &Tensor, pad: usize, rng: &mut Rng) -> Result<Tensor> {
    let (dy, dx) = if pad == 0 {
        (0, 0)
    } else {
        (rng.below(2 * pad + 1), rng.below(2 * pad + 1))
    };
    shift_at(obs, pad, dy, dx)
}

/// A `3 x 3 x 3 x 3` kernel `[out, in, ky, kx]`.
pub type ConvKernel = [f32; 81];

pub fn sample_conv_kernel(rng: &mut Rng) -> ConvKernel {
    let std = 1.0 / 27f32.sqrt();
    let mut k = [0.0; 81];
    k.iter_mut().for_each(|v| *v = rng.normal_f32() * std);
    k
}

pub fn identity_conv_kernel() -> ConvKernel {
    let mut k = [0.0; 81];
    for c in 0..3 {
        k[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    k
}

/// Convolves every RGB frame with `kernel` (edge-replicate padding), then
/// rescales each frame affinely to `[0, 1]`; constant frames become 0.5.
pub fn conv_with_kernel(obs: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let (stack, h, w) = frames_of(obs)?;
    let plane = h * w;
    let mut out = Tensor::zeros(obs.shape());
    for f in 0..stack {
        let src = &obs.data()[f * 3 * plane..(f + 1) * 3 * plane];
        let dst = &mut out.data_mut()[f * 3 * plane..(f + 1) * 3 * plane];
        for o in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f32;
                    for i in 0..3 {
                        for ky in 0..3 {
                            let sy = (y + ky).saturating_sub(1).min(h - 1);
                            for kx in 0..3 {
                                let sx = (x + kx).saturating_sub(1).min(w - 1);
                                acc += kernel[((o * 3 + i) * 3 + ky) * 3 + kx] * src[i * plane + sy * w + sx];
                            }
                        }
                    }
                    dst[o * plane + y * w + x] = acc;
                }
            }
        }
        let (lo, hi) = dst
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi > lo {
            let scale = 1.0 / (hi - lo);
            dst.iter_mut().for_each(|v| *v = ((*v - lo) * scale).clamp(0.0, 1.0));
        } else {
            dst.iter_mut().for_each(|v| *v = 0.5);
        }
    }
    Ok(out)
}

/// Random convolution with a freshly sampled kernel shared by all frames.
pub fn random_conv(obs: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let k = sample_conv_kernel(rng);
    conv_with_kernel(obs, &k)
}

/// Where overlay images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TextureSource {
    /// Fresh multi-octave value noise per call.
    ValueNoise(NoiseParams),
    /// A fixed planar RGB image `[3, h, w]`, resized (nearest) to the frame.
    Image(Tensor),
}

impl Default for TextureSource {
    fn default() -> Self {
        TextureSource::ValueNoise(NoiseParams::default())
    }
}

impl TextureSource {
    pub fn sample(&self, h: usize, w: usize, rng: &mut Rng) -> Result<Vec<f32>> {
        match self {
            TextureSource::ValueNoise(p) => {
                let params = NoiseParams {
                    cell: p.cell.min(h.max(w) as f32),
                    ..*p
                };
                Ok(rgb_texture(h, w, params, rng))
            }
            TextureSource::Image(img) => {
                let (c, ih, iw) = dims(img)?;
                if c != 3 {
                    bail!(Shape, "overlay image must have 3 channels");
                }
                let mut out = vec![0.0; 3 * h * w];
                for ch in 0..3 {
                    for y in 0..h {
                        let sy = y * ih / h;
                        for x in 0..w {
                            let sx = x * iw / w;
                            out[(ch * h + y) * w + x] = img.data()[(ch * ih + sy) * iw + sx];
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

/// `alpha * obs + (1 - alpha) * I`, one texture `I` for every frame.
pub fn random_overlay(obs: &Tensor, source: &TextureSource, alpha: f32, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        bail!(InvalidArgument, "overlay alpha must lie in [0, 1], got {alpha}");
    }
    let (stack, h, w) = frames_of(obs)?;
    let tex = source.sample(h, w, rng)?;
    let plane = 3 * h * w;
    let mut out = obs.clone();
    for f in 0..stack {
        for (o, &t) in out.data_mut()[f * plane..(f + 1) * plane].iter_mut().zip(&tex) {
            *o = (alpha * *o + (1.0 - alpha) * t).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

fn patch_size(n: usize, fraction: f32) -> usize {
    ((n as f32 * fraction).round() as usize).clamp(1, n)
}

/// Zeroes a `round(fraction * H) x round(fraction * W)` rectangle at `(y, x)`.
pub fn cutout_at(obs: &Tensor, fraction: f32, y: usize, x: usize) -> Result<Tensor> {
    let (c, h, w) = dims(obs)?;
    if !(fraction > 0.0 && fraction < 1.0) {
        bail!(InvalidArgument, "cutout fraction must lie in (0, 1), got {fraction}");
    }
    let (ph, pw) = (patch_size(h, fraction), patch_size(w, fraction));
    if y + ph > h || x + pw > w {
        bail!(InvalidArgument, "cutout patch at ({y}, {x}) leaves the frame");
    }
    let mut out = obs.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for yy in y..y + ph {
            d[(ch * h + yy) * w + x..(ch * h + yy) * w + x + pw].fill(0.0);
        }
    }
    Ok(out)
}

pub fn cutout(obs: &Tensor, fraction: f32, rng: &mut Rng) -> Result<Tensor> {
    let (_, h, w) = dims(obs)?;
    if !(fraction > 0.0 && fraction < 1.0) {
        bail!(InvalidArgument, "cutout fraction must lie in (0, 1), got {fraction}");
    }
    let (ph, pw) = (patch_size(h, fraction), patch_size(w, fraction));
    let y = rng.below(h - ph + 1);
    let x = rng.below(w - pw + 1);
    cutout_at(obs, fraction, y, x)
}

/// Normalized 1-D Gaussian taps for radius `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * f64::from(sigma) * f64::from(sigma))).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps.into_iter().map(|t| t as f32).collect()
}

/// Separable Gaussian blur per channel with edge-replicate boundaries.
pub fn gaussian_blur(obs: &Tensor, sigma: f32) -> Result<Tensor> {
    let (c, h, w) = dims(obs)?;
    if !(sigma > 0.0) {
        bail!(InvalidArgument, "blur sigma must be positive, got {sigma}");
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; c * h * w];
    let src = obs.data();
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    acc += t * row[clamp(x as isize + k as isize - r, w)];
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = Tensor::zeros(obs.shape());
    let dst = out.data_mut();
    let (lo, hi) = src
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    acc += t * tmp[(ch * h + clamp(y as isize + k as isize - r, h)) * w + x];
                }
                // rounding in the weighted sum can step a hair outside the input range
                dst[(ch * h + y) * w + x] = acc.clamp(lo, hi);
            }
        }
    }
    Ok(out)
}

/// Values below this are truncated to zero in [`gaussian_mask`].
pub const MASK_FLOOR: f32 = 1e-4;

/// `exp(-((y - i)^2 + (x - j)^2) / (2 sigma^2))`, row-major `H x W`, peak 1 at `(i, j)`.
pub fn gaussian_mask(i: usize, j: usize, sigma: f32, width: usize, height: usize) -> Result<Vec<f32>> {
    if i >= height || j >= width {
        bail!(InvalidArgument, "mask center ({i}, {j}) outside {height}x{width}");
    }
    if !(sigma > 0.0) {
        bail!(InvalidArgument, "mask sigma must be positive, got {sigma}");
    }
    let denom = 2.0 * sigma * sigma;
    let mut m = vec![0.0f32; height * width];
    for y in 0..height {
        let dy = y as f32 - i as f32;
        for x in 0..width {
            let dx = x as f32 - j as f32;
            let v = (-(dy * dy + dx * dx) / denom).exp();
            m[y * width + x] = if v < MASK_FLOOR { 0.0 } else { v };
        }
    }
    Ok(m)
}

/// How many pixels the random-patch baseline preserves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchBudget {
    Fraction(f32),
    Count(usize),
}

/// Random-patch baseline: a binary mask built from randomly ordered square
/// patches selects `original` on exactly the budgeted number of pixels and
/// `augmented` elsewhere. Returns the blend and the mask.
pub fn random_patch_preserve(
    original: &Tensor,
    augmented: &Tensor,
    budget: PatchBudget,
    patch: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<u8>)> {
    if original.shape() != augmented.shape() {
        bail!(Shape, "random patch needs equal shapes, got {:?} and {:?}", original.shape(), augmented.shape());
    }
    let (_, h, w) = dims(original)?;
    let n = h * w;
    let keep = match budget {
        PatchBudget::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                bail!(InvalidArgument, "patch fraction must lie in [0, 1]");
            }
            (f * n as f32).round() as usize
        }
        PatchBudget::Count(c) => c.min(n),
    };
    let patch = patch.max(1);
    let (gh, gw) = (h.div_ceil(patch), w.div_ceil(patch));
    let mut order: Vec<usize> = (0..gh * gw).collect();
    rng.shuffle(&mut order);
    let mut mask = vec![0u8; n];
    let mut left = keep;
    'outer: for cell in order {
        let (cy, cx) = (cell / gw, cell % gw);
        for y in cy * patch..((cy + 1) * patch).min(h) {
            for x in cx * patch..((cx + 1) * patch).min(w) {
                if left == 0 {
                    break 'outer;
                }
                mask[y * w + x] = 1;
                left -= 1;
            }
        }
    }
    Ok((blend_with_mask(original, augmented, &mask)?, mask))
}

/// `mask ⊙ keep + (1 - mask) ⊙ other` with a binary spatial mask shared by all channels.
pub fn blend_with_mask(keep: &Tensor, other: &Tensor, mask: &[u8]) -> Result<Tensor> {
    let (c, h, w) = dims(keep)?;
    if keep.shape() != other.shape() || mask.len() != h * w {
        bail!(Shape, "blend shapes disagree");
    }
    let plane = h * w;
    let mut out = other.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for (p, &m) in mask.iter().enumerate() {
            if m != 0 {
                d[ch * plane + p] = keep.data()[ch * plane + p];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    Identity,
    Shift,
    Conv,
    Overlay,
    Cutout,
}

impl AugmentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentKind::Identity => "identity",
            AugmentKind::Shift => "shift",
            AugmentKind::Conv => "conv",
            AugmentKind::Overlay => "overlay",
            AugmentKind::Cutout => "cutout",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" | "none" => AugmentKind::Identity,
            "shift" => AugmentKind::Shift,
            "conv" | "random_conv" => AugmentKind::Conv,
            "overlay" | "random_overlay" => AugmentKind::Overlay,
            "cutout" => AugmentKind::Cutout,
            other => bail!(InvalidArgument, "unknown augmentation '{other}'"),
        })
    }
}

/// An augmentation operator with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOp {
    pub kind: AugmentKind,
    pub pad: usize,
    pub alpha: f32,
    pub cutout_fraction: f32,
    pub texture: TextureSource,
}

impl AugmentOp {
    pub fn new(kind: AugmentKind) -> Self {
        Self {
            kind,
            pad: 4,
            alpha: 0.5,
            cutout_fraction: 0.25,
            texture: TextureSource::default(),
        }
    }

    pub fn identity() -> Self {
        Self::new(AugmentKind::Identity)
    }

    pub fn apply(&self, obs: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        match self.kind {
            AugmentKind::Identity => {
                dims(obs)?;
                Ok(obs.clone())
            }
            AugmentKind::Shift => random_shift(obs, self.pad, rng),
            AugmentKind::Conv => random_conv(obs, rng),
            AugmentKind::Overlay => random_overlay(obs, &self.texture, self.alpha, rng),
            AugmentKind::Cutout => cutout(obs, self.cutout_fraction, rng),
        }
    }
}
