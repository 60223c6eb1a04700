//! Seeded multi-octave value noise, used for overlay images and textured
//! backgrounds.

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// Lattice spacing of the coarsest octave, in pixels.
    pub cell: f32,
    pub octaves: usize,
    /// Amplitude ratio between consecutive octaves.
    pub persistence: f32,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            cell: 8.0,
            octaves: 3,
            persistence: 0.5,
        }
    }
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// One `h x w` channel in `[0, 1]`.
pub fn value_noise(height: usize, width: usize, params: NoiseParams, rng: &mut Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; height * width];
    let mut amp = 1.0f32;
    let mut total = 0.0f32;
    let mut cell = params.cell.max(1.0);
    for _ in 0..params.octaves.max(1) {
        let gh = (height as f32 / cell).ceil() as usize + 2;
        let gw = (width as f32 / cell).ceil() as usize + 2;
        let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.uniform_f32()).collect();
        for y in 0..height {
            let fy = y as f32 / cell;
            let y0 = fy.floor() as usize;
            let ty = smoothstep(fy - y0 as f32);
            for x in 0..width {
                let fx = x as f32 / cell;
                let x0 = fx.floor() as usize;
                let tx = smoothstep(fx - x0 as f32);
                let v00 = lattice[y0 * gw + x0];
                let v01 = lattice[y0 * gw + x0 + 1];
                let v10 = lattice[(y0 + 1) * gw + x0];
                let v11 = lattice[(y0 + 1) * gw + x0 + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                out[y * width + x] += amp * (top + (bot - top) * ty);
            }
        }
        total += amp;
        amp *= params.persistence;
        cell = (cell / 2.0).max(1.0);
    }
    out.iter_mut().for_each(|v| *v = (*v / total).clamp(0.0, 1.0));
    out
}

/// Planar RGB texture `[3, h, w]`, one independent noise field per channel.
pub fn rgb_texture(height: usize, width: usize, params: NoiseParams, rng: &mut Rng) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * height * width);
    for _ in 0..3 {
        out.extend(value_noise(height, width, params, rng));
    }
    out
}
