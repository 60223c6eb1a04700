//! Per-pixel policy sensitivity (the K-matrix) and task-aware blending.
//!
//! For a pixel `(i, j)` the observation is locally blurred under a Gaussian
//! spatial mask centred there, and the policy's response to that
//! perturbation is measured with an action-space distance. Pixels whose
//! response is at least the mean response are preserved when a strong
//! augmentation is applied; the rest take the augmented value.

use std::fmt;
use std::str::FromStr;

use crate::augment::{blend_with_mask, gaussian_blur, gaussian_mask, AugmentOp};
use crate::error::{bail, Error, Result};
use crate::exec::Exec;
use crate::numerics::Tensor;
use crate::rng::Rng;

/// Floor applied to the second argument of the KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

/// What a policy reports about its action distribution at one observation.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionSummary {
    /// A deterministic action vector, already squashed.
    Mean(Vec<f64>),
    /// A categorical distribution over discrete actions.
    Categorical(Vec<f64>),
    /// A diagonal Gaussian before the tanh squashing; its mean action is `tanh(loc)`.
    Gaussian { loc: Vec<f64>, std: Vec<f64> },
}

impl ActionSummary {
    pub fn dim(&self) -> usize {
        match self {
            ActionSummary::Mean(v) | ActionSummary::Categorical(v) => v.len(),
            ActionSummary::Gaussian { loc, .. } => loc.len(),
        }
    }

    /// Mean action used by the l2 metric.
    pub fn mean_action(&self) -> Option<Vec<f64>> {
        match self {
            ActionSummary::Mean(v) => Some(v.clone()),
            ActionSummary::Gaussian { loc, .. } => Some(loc.iter().map(|x| x.tanh()).collect()),
            ActionSummary::Categorical(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Metric {
    #[default]
    L2,
    Tv,
    Kl,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::L2 => "l2",
            Metric::Tv => "tv",
            Metric::Kl => "kl",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "l2" => Metric::L2,
            "tv" => Metric::Tv,
            "kl" => Metric::Kl,
            other => bail!(InvalidArgument, "unknown metric '{other}' (expected l2, tv or kl)"),
        })
    }
}

/// Distance between two action summaries of the same kind and dimension.
pub fn policy_distance(a: &ActionSummary, b: &ActionSummary, metric: Metric) -> Result<f64> {
    use ActionSummary::*;
    if a.dim() != b.dim() {
        bail!(Shape, "action summaries differ in dimension: {} vs {}", a.dim(), b.dim());
    }
    match (a, b) {
        (Categorical(p), Categorical(q)) => Ok(match metric {
            Metric::L2 => p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
            Metric::Tv => 0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>(),
            Metric::Kl => p
                .iter()
                .zip(q)
                .filter(|(x, _)| **x > 0.0)
                .map(|(x, y)| x * (x / y.max(KL_FLOOR)).ln())
                .sum::<f64>()
                .max(0.0),
        }),
        (Mean(_) | Gaussian { .. }, Mean(_) | Gaussian { .. }) => match metric {
            Metric::L2 => {
                let (x, y) = (a.mean_action().unwrap_or_default(), b.mean_action().unwrap_or_default());
                Ok(x.iter().zip(&y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
            }
            Metric::Kl => match (a, b) {
                (Gaussian { loc: m1, std: s1 }, Gaussian { loc: m2, std: s2 }) => {
                    let mut kl = 0.0;
                    for i in 0..m1.len() {
                        let (sa, sb) = (s1[i].max(KL_FLOOR), s2[i].max(KL_FLOOR));
                        kl += (sb / sa).ln() + (sa * sa + (m1[i] - m2[i]).powi(2)) / (2.0 * sb * sb) - 0.5;
                    }
                    Ok(kl.max(0.0))
                }
                _ => bail!(InvalidArgument, "kl needs categorical or Gaussian summaries, not point actions"),
            },
            Metric::Tv => bail!(InvalidArgument, "tv needs categorical summaries"),
        },
        _ => bail!(InvalidArgument, "cannot compare categorical and continuous summaries"),
    }
}

/// A pure map from observations to action summaries.
pub trait PolicyOracle: Sync {
    fn summarize(&self, obs: &Tensor) -> Result<ActionSummary>;

    /// Summaries for many observations; implementations may batch, but the
    /// result for each observation must not depend on its neighbours.
    fn summarize_batch(&self, obs: &[Tensor]) -> Result<Vec<ActionSummary>> {
        obs.iter().map(|o| self.summarize(o)).collect()
    }
}

/// A policy that ignores its input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPolicy(pub ActionSummary);

impl PolicyOracle for ConstantPolicy {
    fn summarize(&self, _obs: &Tensor) -> Result<ActionSummary> {
        Ok(self.0.clone())
    }
}

/// `a = W x + b` over the flattened observation, optionally squashed by tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub squash: bool,
}

impl LinearPolicy {
    pub fn new(weight: Tensor, bias: Vec<f32>, squash: bool) -> Result<Self> {
        if weight.rank() != 2 || weight.shape()[0] != bias.len() {
            bail!(Shape, "linear policy weight {:?} does not match bias length {}", weight.shape(), bias.len());
        }
        Ok(Self { weight, bias, squash })
    }

    /// A policy reading a single pixel of channel `channel` with sensitivity `w`.
    pub fn one_pixel(obs_shape: &[usize], channel: usize, y: usize, x: usize, w: f32, squash: bool) -> Result<Self> {
        let (c, h, wd) = (obs_shape[0], obs_shape[1], obs_shape[2]);
        if channel >= c || y >= h || x >= wd {
            bail!(InvalidArgument, "pixel ({channel}, {y}, {x}) outside {obs_shape:?}");
        }
        let mut weight = Tensor::zeros(&[1, c * h * wd]);
        weight.data_mut()[(channel * h + y) * wd + x] = w;
        Self::new(weight, vec![0.0], squash)
    }
}

impl PolicyOracle for LinearPolicy {
    fn summarize(&self, obs: &Tensor) -> Result<ActionSummary> {
        let n = self.weight.shape()[1];
        if obs.len() != n {
            bail!(Shape, "linear policy expects {n} inputs, observation has {}", obs.len());
        }
        let out = (0..self.bias.len())
            .map(|k| {
                let dot: f64 = self
                    .weight
                    .row(k)
                    .iter()
                    .zip(obs.data())
                    .map(|(w, x)| f64::from(*w) * f64::from(*x))
                    .sum();
                let v = dot + f64::from(self.bias[k]);
                if self.squash {
                    v.tanh()
                } else {
                    v
                }
            })
            .collect();
        Ok(ActionSummary::Mean(out))
    }
}

/// `obs ⊙ (1 - M) + blurred ⊙ M` for the truncated Gaussian mask centred at `(i, j)`,
/// applied identically to every channel.
pub fn perturb_with_blur(obs: &Tensor, blurred: &Tensor, i: usize, j: usize, mask_sigma: f32) -> Result<Tensor> {
    if obs.rank() != 3 || obs.shape() != blurred.shape() {
        bail!(Shape, "perturbation needs matching [C, H, W] tensors");
    }
    let (c, h, w) = (obs.shape()[0], obs.shape()[1], obs.shape()[2]);
    let mask = gaussian_mask(i, j, mask_sigma, w, h)?;
    let mut out = obs.clone();
    let plane = h * w;
    for (p, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for ch in 0..c {
            let k = ch * plane + p;
            out.data_mut()[k] = (obs.data()[k] * (1.0 - m) + blurred.data()[k] * m).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Locally blurred observation around pixel `(i, j)`.
pub fn perturb_at(obs: &Tensor, i: usize, j: usize, blur_sigma: f32, mask_sigma: f32) -> Result<Tensor> {
    let blurred = gaussian_blur(obs, blur_sigma)?;
    perturb_with_blur(obs, &blurred, i, j, mask_sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    /// Report the raw action-space distance.
    #[default]
    Dropped,
    /// Divide by the l2 distance between perturbed and clean observation.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fill {
    #[default]
    Nearest,
    Bilinear,
}

impl FromStr for Denominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dropped" | "none" => Ok(Denominator::Dropped),
            "normalized" => Ok(Denominator::Normalized),
            other => bail!(InvalidArgument, "unknown denominator mode '{other}'"),
        }
    }
}

impl FromStr for Fill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Fill::Nearest),
            "bilinear" => Ok(Fill::Bilinear),
            other => bail!(InvalidArgument, "unknown fill mode '{other}'"),
        }
    }
}

impl Denominator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Denominator::Dropped => "dropped",
            Denominator::Normalized => "normalized",
        }
    }
}

impl Fill {
    pub fn as_str(&self) -> &'static str {
        match self {
            Fill::Nearest => "nearest",
            Fill::Bilinear => "bilinear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMatrixConfig {
    pub stride: usize,
    pub metric: Metric,
    pub blur_sigma: f32,
    pub mask_sigma: f32,
    pub denominator: Denominator,
    pub fill: Fill,
    pub exec: Exec,
    /// Perturbed observations handed to the policy per call.
    pub chunk: usize,
}

impl Default for KMatrixConfig {
    fn default() -> Self {
        Self {
            stride: 5,
            metric: Metric::L2,
            blur_sigma: 1.5,
            mask_sigma: 3.0,
            denominator: Denominator::Dropped,
            fill: Fill::Nearest,
            exec: Exec::Parallel,
            chunk: 64,
        }
    }
}

impl KMatrixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            bail!(InvalidArgument, "stride must be at least 1");
        }
        if !(self.blur_sigma > 0.0 && self.mask_sigma > 0.0) {
            bail!(InvalidArgument, "blur and mask sigma must be positive");
        }
        Ok(())
    }
}

/// Non-negative per-pixel sensitivity of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct KMatrix {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub metric: Metric,
    pub values: Vec<f64>,
    /// FNV-1a over the bit patterns of the observation it was measured on.
    pub source_hash: u64,
}

impl KMatrix {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (k, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = k;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Lattice coordinates along one axis.
    pub fn lattice(n: usize, stride: usize) -> Vec<usize> {
        (0..n).step_by(stride).collect()
    }

    /// `KMAT <H> <W> <stride> <metric>\n` followed by little-endian f32 values.
    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = format!("KMAT {} {} {} {}\n", self.height, self.width, self.stride, self.metric).into_bytes();
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_raw(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing KMAT header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("KMAT header is not UTF-8".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "KMAT" {
            bail!(Format, "bad KMAT header '{header}'");
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad KMAT field '{s}'")));
        let (height, width, stride) = (num(parts[1])?, num(parts[2])?, num(parts[3])?);
        let metric: Metric = parts[4].parse()?;
        let body = &bytes[nl + 1..];
        if body.len() != height * width * 4 {
            bail!(Format, "KMAT body has {} bytes, expected {}", body.len(), height * width * 4);
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(Self {
            height,
            width,
            stride,
            metric,
            values,
            source_hash: 0,
        })
    }

    /// Values min-max scaled to `0..=255`; a constant matrix maps to 0.
    pub fn to_gray(&self) -> Vec<u8> {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        self.values
            .iter()
            .map(|v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
            .collect()
    }
}

pub fn observation_hash(obs: &Tensor) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in obs.data() {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn fill_lattice(h: usize, w: usize, stride: usize, ys: &[usize], xs: &[usize], lat: &[f64], fill: Fill) -> Vec<f64> {
    let at = |a: usize, b: usize| lat[a * xs.len() + b];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = match fill {
                Fill::Nearest => {
                    let a = ((y + stride / 2) / stride).min(ys.len() - 1);
                    let b = ((x + stride / 2) / stride).min(xs.len() - 1);
                    at(a, b)
                }
                Fill::Bilinear => {
                    let (a0, b0) = ((y / stride).min(ys.len() - 1), (x / stride).min(xs.len() - 1));
                    let (a1, b1) = ((a0 + 1).min(ys.len() - 1), (b0 + 1).min(xs.len() - 1));
                    let ty = if a1 > a0 { (y - ys[a0]) as f64 / stride as f64 } else { 0.0 };
                    let tx = if b1 > b0 { (x - xs[b0]) as f64 / stride as f64 } else { 0.0 };
                    let top = at(a0, b0) * (1.0 - tx) + at(a0, b1) * tx;
                    let bot = at(a1, b0) * (1.0 - tx) + at(a1, b1) * tx;
                    top * (1.0 - ty) + bot * ty
                }
            };
        }
    }
    out
}

/// K-matrices for several observations, evaluating all perturbations in
/// policy batches of `cfg.chunk`.
pub fn k_matrix_batch(policy: &dyn PolicyOracle, obs: &[Tensor], cfg: &KMatrixConfig) -> Result<Vec<KMatrix>> {
    cfg.validate()?;
    if obs.is_empty() {
        return Ok(Vec::new());
    }
    let shape = obs[0].shape().to_vec();
    if shape.len() != 3 || obs.iter().any(|o| o.shape() != shape.as_slice()) {
        bail!(Shape, "k-matrix needs observations of one [C, H, W] shape");
    }
    let (h, w) = (shape[1], shape[2]);
    if cfg.stride > h || cfg.stride > w {
        bail!(InvalidArgument, "stride {} exceeds the {h}x{w} frame", cfg.stride);
    }
    let ys = KMatrix::lattice(h, cfg.stride);
    let xs = KMatrix::lattice(w, cfg.stride);
    let points: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    // row layout per observation: clean, then one perturbation per lattice point
    let per_obs = points.len() + 1;
    let total = obs.len() * per_obs;
    let blurred: Vec<Tensor> = cfg
        .exec
        .map(obs, |o| gaussian_blur(o, cfg.blur_sigma))
        .into_iter()
        .collect::<Result<_>>()?;
    let chunk = cfg.chunk.max(1);
    let starts: Vec<usize> = (0..total).step_by(chunk).collect();
    let build = |k: usize| -> Result<Tensor> {
        let (n, r) = (k / per_obs, k % per_obs);
        if r == 0 {
            Ok(obs[n].clone())
        } else {
            let (i, j) = points[r - 1];
            perturb_with_blur(&obs[n], &blurred[n], i, j, cfg.mask_sigma)
        }
    };
    let results = cfg.exec.map(&starts, |&s| -> Result<(Vec<ActionSummary>, Vec<f64>)> {
        let inputs: Vec<Tensor> = (s..(s + chunk).min(total)).map(build).collect::<Result<_>>()?;
        let dist = match cfg.denominator {
            Denominator::Dropped => Vec::new(),
            Denominator::Normalized => inputs
                .iter()
                .enumerate()
                .map(|(q, t)| {
                    let n = (s + q) / per_obs;
                    t.data()
                        .iter()
                        .zip(obs[n].data())
                        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect(),
        };
        Ok((policy.summarize_batch(&inputs)?, dist))
    });
    let mut summaries = Vec::with_capacity(total);
    let mut dists = Vec::with_capacity(total);
    for r in results {
        let (s, d) = r?;
        if s.len() != d.len() && cfg.denominator == Denominator::Normalized {
            bail!(State, "policy returned {} summaries for {} inputs", s.len(), d.len());
        }
        summaries.extend(s);
        dists.extend(d);
    }
    if summaries.len() != total {
        bail!(State, "policy returned {} summaries for {total} inputs", summaries.len());
    }
    let mut out = Vec::with_capacity(obs.len());
    for (n, o) in obs.iter().enumerate() {
        let base = &summaries[n * per_obs];
        let mut lat = Vec::with_capacity(points.len());
        for p in 0..points.len() {
            let k = n * per_obs + 1 + p;
            let num = policy_distance(&summaries[k], base, cfg.metric)?;
            let v = match cfg.denominator {
                Denominator::Dropped => num,
                Denominator::Normalized => {
                    if dists[k] > 0.0 {
                        num / dists[k]
                    } else {
                        0.0
                    }
                }
            };
            if !v.is_finite() || v < 0.0 {
                bail!(NonFinite, "k-matrix entry at {:?} is {v}", points[p]);
            }
            lat.push(v);
        }
        out.push(KMatrix {
            height: h,
            width: w,
            stride: cfg.stride,
            metric: cfg.metric,
            values: fill_lattice(h, w, cfg.stride, &ys, &xs, &lat, cfg.fill),
            source_hash: observation_hash(o),
        });
    }
    Ok(out)
}

pub fn k_matrix(policy: &dyn PolicyOracle, obs: &Tensor, cfg: &KMatrixConfig) -> Result<KMatrix> {
    Ok(k_matrix_batch(policy, std::slice::from_ref(obs), cfg)?.remove(0))
}

/// Binary spatial mask; 1 marks a preserved pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreservationMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl PreservationMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count_ones() as f64 / self.values.len() as f64
    }

    pub fn to_gray(&self) -> Vec<u8> {
        self.values.iter().map(|&v| v * 255).collect()
    }
}

/// `M = 1` where `K >= mean(K)`.
pub fn binarize_mask(k: &KMatrix) -> PreservationMask {
    let lo = k.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = k.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // summation rounding must not push the mean above the maximum
    let mean = k.mean().clamp(lo, hi);
    PreservationMask {
        height: k.height,
        width: k.width,
        values: k.values.iter().map(|&v| u8::from(v >= mean)).collect(),
    }
}

/// `M ⊙ obs + (1 - M) ⊙ augmented`.
pub fn tlda_blend(obs: &Tensor, augmented: &Tensor, mask: &PreservationMask) -> Result<Tensor> {
    blend_with_mask(obs, augmented, &mask.values)
}

/// Output of [`tlda_augment`].
#[derive(Debug, Clone, PartialEq)]
pub struct TldaOutput {
    pub observation: Tensor,
    pub k: KMatrix,
    pub mask: PreservationMask,
}

/// Strongly augments `obs` everywhere except the pixels the policy is most sensitive to.
pub fn tlda_augment(
    obs: &Tensor,
    aug: &AugmentOp,
    policy: &dyn PolicyOracle,
    cfg: &KMatrixConfig,
    rng: &mut Rng,
) -> Result<TldaOutput> {
    let augmented = aug.apply(obs, rng)?;
    let k = k_matrix(policy, obs, cfg)?;
    let mask = binarize_mask(&k);
    Ok(TldaOutput {
        observation: tlda_blend(obs, &augmented, &mask)?,
        k,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{cutout_at, AugmentKind};

    fn noise_obs(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut r = Rng::new(seed, "obs");
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| r.uniform_f32()).collect()).unwrap()
    }

    fn cfg(stride: usize) -> KMatrixConfig {
        KMatrixConfig {
            stride,
            ..KMatrixConfig::default()
        }
    }

    #[test]
    fn distance_examples() {
        let z = ActionSummary::Mean(vec![0.0, 0.0]);
        let p = ActionSummary::Mean(vec![3.0, 4.0]);
        assert_eq!(policy_distance(&z, &p, Metric::L2).unwrap(), 5.0);
        let a = ActionSummary::Categorical(vec![0.5, 0.5]);
        let b = ActionSummary::Categorical(vec![1.0, 0.0]);
        assert_eq!(policy_distance(&a, &b, Metric::Tv).unwrap(), 0.5);
        for m in [Metric::L2, Metric::Tv, Metric::Kl] {
            assert_eq!(policy_distance(&a, &a, m).unwrap(), 0.0);
        }
        let g = ActionSummary::Gaussian {
            loc: vec![0.3, -0.2],
            std: vec![0.5, 1.0],
        };
        assert_eq!(policy_distance(&g, &g, Metric::Kl).unwrap(), 0.0);
        assert!(policy_distance(&z, &p, Metric::Kl).is_err());
        assert!(policy_distance(&z, &ActionSummary::Mean(vec![0.0]), Metric::L2).is_err());
        assert!(policy_distance(&a, &z, Metric::L2).is_err());
        // kl(p || q) with q floored where it vanishes
        let kl = policy_distance(&a, &b, Metric::Kl).unwrap();
        assert!((kl - (0.5 * (0.5f64).ln() + 0.5 * (0.5 / KL_FLOOR).ln())).abs() < 1e-9);
    }

    #[test]
    fn gaussian_kl_closed_form() {
        let a = ActionSummary::Gaussian {
            loc: vec![0.0],
            std: vec![1.0],
        };
        let b = ActionSummary::Gaussian {
            loc: vec![1.0],
            std: vec![2.0],
        };
        let want = (2.0f64).ln() + (1.0 + 1.0) / 8.0 - 0.5;
        assert!((policy_distance(&a, &b, Metric::Kl).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn perturb_examples() {
        let o = noise_obs(1, 6, 12, 12);
        let blurred = gaussian_blur(&o, 1.5).unwrap();
        let tiny = perturb_at(&o, 4, 7, 1.5, 0.05).unwrap();
        for k in 0..o.len() {
            let (p, ch) = (k % 144, k / 144);
            if p == 4 * 12 + 7 {
                assert_eq!(tiny.data()[k], blurred.data()[ch * 144 + p]);
            } else {
                assert_eq!(tiny.data()[k], o.data()[k]);
            }
        }
        let flat = Tensor::full(&[3, 9, 9], 0.4);
        assert!(perturb_at(&flat, 3, 3, 1.5, 3.0).unwrap().max_abs_diff(&flat).unwrap() < 1e-6);
        let m = gaussian_mask(2, 2, 1.0, 12, 12).unwrap();
        let p = perturb_at(&o, 2, 2, 1.5, 1.0).unwrap();
        for ch in 0..6 {
            for q in 0..144 {
                if m[q] == 0.0 {
                    assert_eq!(p.data()[ch * 144 + q].to_bits(), o.data()[ch * 144 + q].to_bits());
                }
            }
        }
        assert!(perturb_at(&o, 12, 0, 1.5, 3.0).is_err());
    }

    #[test]
    fn constant_policy_gives_zero_and_full_mask() {
        let o = noise_obs(2, 9, 16, 16);
        let pol = ConstantPolicy(ActionSummary::Mean(vec![0.2, -0.1]));
        let k = k_matrix(&pol, &o, &cfg(5)).unwrap();
        assert!(k.values.iter().all(|&v| v == 0.0));
        let mask = binarize_mask(&k);
        assert_eq!(mask.count_ones(), 256);
        let op = AugmentOp::new(AugmentKind::Conv);
        let out = tlda_augment(&o, &op, &pol, &cfg(5), &mut Rng::new(1, "t")).unwrap();
        assert_eq!(out.observation, o);
    }

    #[test]
    fn stride_lattices_agree_bit_exactly() {
        let o = noise_obs(3, 6, 15, 15);
        let mut r = Rng::new(4, "w");
        let weight = Tensor::from_vec(&[2, o.len()], (0..2 * o.len()).map(|_| r.normal_f32() * 0.05).collect()).unwrap();
        let pol = LinearPolicy::new(weight, vec![0.1, -0.2], true).unwrap();
        let dense = k_matrix(&pol, &o, &cfg(1)).unwrap();
        let sparse = k_matrix(&pol, &o, &cfg(5)).unwrap();
        for y in (0..15).step_by(5) {
            for x in (0..15).step_by(5) {
                assert_eq!(dense.get(y, x).to_bits(), sparse.get(y, x).to_bits());
            }
        }
        // nearest fill copies the closest lattice value
        assert_eq!(sparse.get(7, 2), sparse.get(5, 0));
        assert_eq!(sparse.get(8, 14), sparse.get(10, 10));
        let seq = k_matrix(&pol, &o, &KMatrixConfig { exec: Exec::Sequential, chunk: 3, ..cfg(5) }).unwrap();
        assert_eq!(seq, sparse);
    }

    #[test]
    fn bilinear_fill_interpolates() {
        let lat = vec![0.0, 1.0, 2.0, 3.0];
        let v = fill_lattice(5, 5, 4, &[0, 4], &[0, 4], &lat, Fill::Bilinear);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[4], 1.0);
        assert_eq!(v[2], 0.5);
        assert_eq!(v[2 * 5 + 2], 1.5);
        assert_eq!(v[4 * 5 + 4], 3.0);
    }

    #[test]
    fn one_pixel_policy_peaks_at_its_pixel() {
        for seed in 0..5 {
            let o = noise_obs(10 + seed, 3, 14, 14);
            let (py, px) = (3 + seed as usize, 10 - seed as usize);
            let pol = LinearPolicy::one_pixel(o.shape(), 1, py, px, 2.0, true).unwrap();
            let dense = k_matrix(&pol, &o, &cfg(1)).unwrap();
            assert_eq!(dense.argmax(), (py, px));
            // brute force: the only nonzero entries are within the mask support of the pixel
            let radius = 3.0 * (2.0 * (1.0 / crate::augment::MASK_FLOOR as f64).ln()).sqrt();
            for y in 0..14 {
                for x in 0..14 {
                    let d = ((y as f64 - py as f64).powi(2) + (x as f64 - px as f64).powi(2)).sqrt();
                    if d > radius {
                        assert_eq!(dense.get(y, x), 0.0);
                    }
                }
            }
            let sparse = k_matrix(&pol, &o, &cfg(5)).unwrap();
            let (ay, ax) = sparse.argmax();
            let d = ((ay as f64 - py as f64).powi(2) + (ax as f64 - px as f64).powi(2)).sqrt();
            assert!(d <= 3.0 * 3.0, "argmax {:?} vs pixel {:?}", (ay, ax), (py, px));
        }
    }

    #[test]
    fn monotone_in_sensitivity() {
        let o = noise_obs(20, 3, 10, 10);
        let mut last = -1.0;
        for w in [0.1f32, 0.5, 1.0, 2.0, 5.0, -8.0] {
            let pol = LinearPolicy::one_pixel(o.shape(), 0, 5, 5, w, false).unwrap();
            let k = k_matrix(&pol, &o, &cfg(1)).unwrap().get(5, 5);
            assert!(k > last);
            last = k;
        }
    }

    #[test]
    fn binarize_examples() {
        let mk = |values: Vec<f64>| KMatrix {
            height: 2,
            width: 3,
            stride: 1,
            metric: Metric::L2,
            values,
            source_hash: 0,
        };
        assert_eq!(binarize_mask(&mk(vec![0.1; 6])).count_ones(), 6);
        assert_eq!(binarize_mask(&mk(vec![0.0; 6])).count_ones(), 6);
        let m = binarize_mask(&mk(vec![0.0, 0.0, 0.7, 0.0, 0.0, 0.0]));
        assert_eq!(m.values, vec![0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn one_pixel_policy_neighbourhood_survives_cutout() {
        let o = noise_obs(30, 3, 16, 16);
        let pol = LinearPolicy::one_pixel(o.shape(), 0, 6, 6, 3.0, true).unwrap();
        let c = KMatrixConfig { mask_sigma: 1.5, ..cfg(1) };
        let k = k_matrix(&pol, &o, &c).unwrap();
        let mask = binarize_mask(&k);
        let cut = cutout_at(&o, 0.5, 2, 2).unwrap();
        let out = tlda_blend(&o, &cut, &mask).unwrap();
        for ch in 0..3 {
            for y in 5..=7 {
                for x in 5..=7 {
                    let i = (ch * 16 + y) * 16 + x;
                    assert_eq!(out.data()[i], o.data()[i]);
                }
            }
        }
        assert!(mask.count_ones() < 256);
    }

    #[test]
    fn identity_aug_is_identity() {
        let o = noise_obs(40, 6, 10, 10);
        let mut r = Rng::new(5, "w");
        let weight = Tensor::from_vec(&[1, o.len()], (0..o.len()).map(|_| r.normal_f32()).collect()).unwrap();
        let pol = LinearPolicy::new(weight, vec![0.0], true).unwrap();
        let out = tlda_augment(&o, &AugmentOp::identity(), &pol, &cfg(2), &mut r).unwrap();
        assert_eq!(out.observation, o);
    }

    #[test]
    fn raw_round_trip() {
        let k = KMatrix {
            height: 2,
            width: 2,
            stride: 5,
            metric: Metric::Tv,
            values: vec![0.0, 0.25, 1.5, 3.0],
            source_hash: 0,
        };
        let raw = k.to_raw();
        assert!(raw.starts_with(b"KMAT 2 2 5 tv\n"));
        assert_eq!(KMatrix::from_raw(&raw).unwrap(), k);
        assert_eq!(k.to_gray(), vec![0, 21, 128, 255]);
        assert!(KMatrix::from_raw(b"KMAT 2 2 5 tv\n\0").is_err());
    }

    #[test]
    fn rejects_bad_stride() {
        let o = noise_obs(50, 3, 8, 8);
        let pol = ConstantPolicy(ActionSummary::Mean(vec![0.0]));
        assert!(k_matrix(&pol, &o, &cfg(0)).is_err());
        assert!(k_matrix(&pol, &o, &cfg(9)).is_err());
    }
}
