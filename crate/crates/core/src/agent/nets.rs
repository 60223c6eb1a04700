//! Encoder, critic heads, squashed-Gaussian actor and their losses.
//!
//! Objectives come in pairs: a pure `*_objective` computing the scalar
//! loss through inference only, and a `*_backward` that computes the same
//! value while accumulating analytic gradients.

use crate::error::{bail, Result};
use crate::numerics::{conv_out_dim, LayerSpec, Network, ParamStore, Tensor};
use crate::rng::Rng;

/// Added inside `log(1 - tanh(u)^2 + SQUASH_EPS)` for stability.
pub const SQUASH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub conv_channels: usize,
    pub conv_layers: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            conv_channels: 32,
            conv_layers: 4,
            feature_dim: 50,
            hidden_dim: 256,
        }
    }
}

impl Architecture {
    /// First conv has stride 2, the rest stride 1; all 3x3 without padding.
    pub fn encoder_layers(&self, obs_shape: &[usize]) -> Result<Vec<LayerSpec>> {
        if obs_shape.len() != 3 || self.conv_layers == 0 {
            bail!(InvalidArgument, "encoder needs a [C, H, W] input and at least one conv layer");
        }
        let (mut h, mut w) = (obs_shape[1], obs_shape[2]);
        let mut layers = Vec::new();
        let mut c = obs_shape[0];
        for i in 0..self.conv_layers {
            let stride = if i == 0 { 2 } else { 1 };
            let (Some(nh), Some(nw)) = (conv_out_dim(h, 3, stride, 0), conv_out_dim(w, 3, stride, 0)) else {
                bail!(InvalidArgument, "frame {}x{} too small for {} conv layers", obs_shape[1], obs_shape[2], self.conv_layers);
            };
            layers.push(LayerSpec::conv(c, self.conv_channels, 3, stride));
            layers.push(LayerSpec::Relu);
            c = self.conv_channels;
            (h, w) = (nh, nw);
        }
        layers.push(LayerSpec::dense(c * h * w, self.feature_dim));
        layers.push(LayerSpec::Tanh);
        Ok(layers)
    }

    pub fn head_layers(&self, inputs: usize, outputs: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::dense(inputs, self.hidden_dim),
            LayerSpec::Relu,
            LayerSpec::dense(self.hidden_dim, self.hidden_dim),
            LayerSpec::Relu,
            LayerSpec::dense(self.hidden_dim, outputs),
        ]
    }
}

/// Concatenates two batches along the leading axis.
pub fn concat_batch(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[1..] != b.shape()[1..] {
        bail!(Shape, "cannot concatenate batches {:?} and {:?}", a.shape(), b.shape());
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(&shape, data)
}

/// Shared conv encoder with two Q heads.
#[derive(Debug, Clone)]
pub struct Critic {
    pub encoder: Network,
    pub q1: Network,
    pub q2: Network,
}

impl Critic {
    pub fn new(obs_shape: &[usize], action_dim: usize, arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        let encoder = Network::new("encoder", obs_shape, arch.encoder_layers(obs_shape)?, rng)?;
        let inputs = arch.feature_dim + action_dim;
        let q1 = Network::new("q1", &[inputs], arch.head_layers(inputs, 1), rng)?;
        let q2 = Network::new("q2", &[inputs], arch.head_layers(inputs, 1), rng)?;
        Ok(Self { encoder, q1, q2 })
    }

    pub fn features(&self, obs: &Tensor) -> Result<Tensor> {
        self.encoder.infer(obs)
    }

    pub fn q_values(&self, features: &Tensor, actions: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
        let x = Tensor::concat_cols(features, actions)?;
        Ok((self.q1.infer(&x)?.into_vec(), self.q2.infer(&x)?.into_vec()))
    }

    pub fn networks(&self) -> [&Network; 3] {
        [&self.encoder, &self.q1, &self.q2]
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 3] {
        [&mut self.encoder, &mut self.q1, &mut self.q2]
    }

    pub fn params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        for n in self.networks() {
            p.extend(n.params().clone());
        }
        p
    }

    pub fn param_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.networks_mut().into_iter().find_map(|n| n.params_mut().get_mut(key))
    }

    pub fn grad(&self, key: &str) -> Option<&Tensor> {
        self.networks().into_iter().find_map(|n| n.grads().get(key))
    }

    pub fn zero_grad(&mut self) {
        self.networks_mut().into_iter().for_each(|n| n.zero_grad());
    }
}

/// Bounds of the log standard deviation; the raw actor output is mapped
/// through `lo + (hi - lo) (tanh(raw) + 1) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogStdBounds {
    pub lo: f32,
    pub hi: f32,
}

impl Default for LogStdBounds {
    fn default() -> Self {
        Self { lo: -10.0, hi: 2.0 }
    }
}

pub fn new_actor(action_dim: usize, arch: &Architecture, rng: &mut Rng) -> Result<Network> {
    Network::new("actor", &[arch.feature_dim], arch.head_layers(arch.feature_dim, 2 * action_dim), rng)
}

/// Per-row Gaussian parameters before squashing.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mu: Vec<f32>,
    pub log_std: Vec<f32>,
    pub raw: Vec<f32>,
    pub action_dim: usize,
}

impl GaussianHead {
    pub fn from_output(out: &Tensor, bounds: LogStdBounds) -> Result<Self> {
        if out.rank() != 2 || out.shape()[1] % 2 != 0 {
            bail!(Shape, "actor output must be [B, 2A], got {:?}", out.shape());
        }
        let a = out.shape()[1] / 2;
        let mut mu = Vec::with_capacity(out.batch() * a);
        let mut raw = Vec::with_capacity(out.batch() * a);
        for r in 0..out.batch() {
            mu.extend_from_slice(&out.row(r)[..a]);
            raw.extend_from_slice(&out.row(r)[a..]);
        }
        let log_std = raw
            .iter()
            .map(|&x| bounds.lo + 0.5 * (bounds.hi - bounds.lo) * (x.tanh() + 1.0))
            .collect();
        Ok(Self {
            mu,
            log_std,
            raw,
            action_dim: a,
        })
    }

    pub fn rows(&self) -> usize {
        self.mu.len() / self.action_dim.max(1)
    }

    /// `tanh(mu)`, shaped `[B, A]`.
    pub fn mean_action(&self) -> Tensor {
        Tensor::from_vec(&[self.rows(), self.action_dim], self.mu.iter().map(|m| m.tanh()).collect())
            .expect("mean action shape")
    }

    /// Reparameterized sample `tanh(mu + std * eps)` and its log-density.
    pub fn sample(&self, eps: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if eps.len() != self.mu.len() {
            bail!(Shape, "noise has {} entries, policy has {}", eps.len(), self.mu.len());
        }
        let a = self.action_dim;
        let mut act = vec![0.0f32; self.mu.len()];
        let mut logp = vec![0.0f64; self.rows()];
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        for k in 0..self.mu.len() {
            let e = f64::from(eps.data()[k]);
            let ls = f64::from(self.log_std[k]);
            let u = f64::from(self.mu[k]) + ls.exp() * e;
            let t = u.tanh();
            act[k] = t as f32;
            logp[k / a] += -0.5 * e * e - ls - half_log_2pi - (1.0 - t * t + SQUASH_EPS).ln();
        }
        Ok((Tensor::from_vec(&[self.rows(), a], act)?, logp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorTerms {
    pub loss: f64,
    pub mean_log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticTerms {
    pub jq: f64,
    pub rq: f64,
    pub total: f64,
}

/// `mean(alpha * log pi(a|s) - min(Q1, Q2)(s, a))` with `a` reparameterized by `eps`.
pub fn actor_objective(
    actor: &Network,
    critic: &Critic,
    features: &Tensor,
    eps: &Tensor,
    alpha: f32,
    bounds: LogStdBounds,
) -> Result<ActorTerms> {
    let head = GaussianHead::from_output(&actor.infer(features)?, bounds)?;
    let (act, logp) = head.sample(eps)?;
    let (q1, q2) = critic.q_values(features, &act)?;
    let b = logp.len() as f64;
    let mut loss = 0.0;
    for i in 0..logp.len() {
        loss += f64::from(alpha) * logp[i] - f64::from(q1[i].min(q2[i]));
    }
    Ok(ActorTerms {
        loss: loss / b,
        mean_log_prob: logp.iter().sum::<f64>() / b,
    })
}

/// Same value as [`actor_objective`]; accumulates gradients into `actor`.
/// The critic heads' gradient buffers are used as scratch and zeroed.
pub fn actor_backward(
    actor: &mut Network,
    critic: &mut Critic,
    features: &Tensor,
    eps: &Tensor,
    alpha: f32,
    bounds: LogStdBounds,
) -> Result<ActorTerms> {
    let out = actor.forward(features)?;
    let head = GaussianHead::from_output(&out, bounds)?;
    let (act, logp) = head.sample(eps)?;
    let (n, a) = (head.rows(), head.action_dim);
    let x = Tensor::concat_cols(features, &act)?;
    let q1 = critic.q1.forward(&x)?;
    let q2 = critic.q2.forward(&x)?;
    let inv_b = 1.0 / n as f32;
    let mut up1 = Tensor::zeros(&[n, 1]);
    let mut up2 = Tensor::zeros(&[n, 1]);
    let mut loss = 0.0;
    for i in 0..n {
        let (v1, v2) = (q1.data()[i], q2.data()[i]);
        if v1 <= v2 {
            up1.data_mut()[i] = -inv_b;
        } else {
            up2.data_mut()[i] = -inv_b;
        }
        loss += f64::from(alpha) * logp[i] - f64::from(v1.min(v2));
    }
    let dx1 = critic.q1.backward(&up1)?;
    let dx2 = critic.q2.backward(&up2)?;
    critic.q1.zero_grad();
    critic.q2.zero_grad();
    let f = features.shape()[1];
    let mut dout = Tensor::zeros(out.shape());
    let span = 0.5 * f64::from(bounds.hi - bounds.lo);
    let coef = f64::from(alpha) * f64::from(inv_b);
    for i in 0..n {
        for j in 0..a {
            let k = i * a + j;
            let t = f64::from(act.data()[k]);
            let e = f64::from(eps.data()[k]);
            let std = f64::from(head.log_std[k]).exp();
            let ga = f64::from(dx1.row(i)[f + j] + dx2.row(i)[f + j]);
            let one_m = 1.0 - t * t;
            // d/du of -log(1 - tanh(u)^2 + c)
            let g = 2.0 * t * one_m / (one_m + SQUASH_EPS);
            let du = ga * one_m + coef * g;
            let dmu = du;
            let dls = du * std * e - coef;
            let th = f64::from(head.raw[k]).tanh();
            dout.row_mut(i)[j] = dmu as f32;
            dout.row_mut(i)[a + j] = (dls * span * (1.0 - th * th)) as f32;
        }
    }
    actor.backward(&dout)?;
    Ok(ActorTerms {
        loss: loss / n as f64,
        mean_log_prob: logp.iter().sum::<f64>() / n as f64,
    })
}

fn squared_errors(q: &[f32], targets: &[f32]) -> f64 {
    q.iter()
        .zip(targets)
        .map(|(q, y)| (f64::from(*q) - f64::from(*y)).powi(2))
        .sum()
}

/// `J = mean[(Q1 - y)^2 + (Q2 - y)^2]` on `obs`, `R` likewise on `aug`
/// (zero when absent), `total = J + lambda R`.
pub fn critic_objective(
    critic: &Critic,
    obs: &Tensor,
    aug: Option<&Tensor>,
    actions: &Tensor,
    targets: &[f32],
    lambda: f32,
) -> Result<CriticTerms> {
    let b = targets.len() as f64;
    let (q1, q2) = critic.q_values(&critic.features(obs)?, actions)?;
    let jq = (squared_errors(&q1, targets) + squared_errors(&q2, targets)) / b;
    let rq = match aug {
        Some(x) => {
            let (r1, r2) = critic.q_values(&critic.features(x)?, actions)?;
            (squared_errors(&r1, targets) + squared_errors(&r2, targets)) / b
        }
        None => 0.0,
    };
    Ok(CriticTerms {
        jq,
        rq,
        total: jq + f64::from(lambda) * rq,
    })
}

/// Intermediate values of [`critic_backward`] reused by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticPass {
    pub terms: CriticTerms,
    /// Encoder features of the first (un-augmented) half.
    pub features: Tensor,
    /// Encoder features of the augmented half, when present.
    pub aug_features: Option<Tensor>,
    /// `Q1` on the un-augmented and augmented halves.
    pub q1_clean: Vec<f32>,
    pub q1_aug: Vec<f32>,
}

/// Same value as [`critic_objective`]; accumulates gradients into the encoder and both heads.
pub fn critic_backward(
    critic: &mut Critic,
    obs: &Tensor,
    aug: Option<&Tensor>,
    actions: &Tensor,
    targets: &[f32],
    lambda: f32,
) -> Result<CriticPass> {
    let b = targets.len();
    if obs.batch() != b || actions.batch() != b {
        bail!(Shape, "critic batch sizes disagree");
    }
    let (input, acts) = match aug {
        Some(x) => (concat_batch(obs, x)?, concat_batch(actions, actions)?),
        None => (obs.clone(), actions.clone()),
    };
    let rows = input.batch();
    let feats = critic.encoder.forward(&input)?;
    let x = Tensor::concat_cols(&feats, &acts)?;
    let q1 = critic.q1.forward(&x)?;
    let q2 = critic.q2.forward(&x)?;
    let mut up1 = Tensor::zeros(&[rows, 1]);
    let mut up2 = Tensor::zeros(&[rows, 1]);
    let (mut jq, mut rq) = (0.0f64, 0.0f64);
    for r in 0..rows {
        let y = targets[r % b];
        let (e1, e2) = (q1.data()[r] - y, q2.data()[r] - y);
        let sq = f64::from(e1).powi(2) + f64::from(e2).powi(2);
        let w = if r < b {
            jq += sq;
            1.0
        } else {
            rq += sq;
            lambda
        };
        up1.data_mut()[r] = 2.0 * w * e1 / b as f32;
        up2.data_mut()[r] = 2.0 * w * e2 / b as f32;
    }
    let mut dx = critic.q1.backward(&up1)?;
    dx.axpy(1.0, &critic.q2.backward(&up2)?)?;
    let (dfeat, _) = dx.split_cols(feats.shape()[1])?;
    critic.encoder.backward(&dfeat)?;
    let (jq, rq) = (jq / b as f64, rq / b as f64);
    let fdim = feats.shape()[1];
    let features = Tensor::from_vec(&[b, fdim], feats.data()[..b * fdim].to_vec())?;
    let aug_features = match aug {
        Some(_) => Some(Tensor::from_vec(&[b, fdim], feats.data()[b * fdim..].to_vec())?),
        None => None,
    };
    Ok(CriticPass {
        terms: CriticTerms {
            jq,
            rq,
            total: jq + f64::from(lambda) * rq,
        },
        features,
        aug_features,
        q1_clean: q1.data()[..b].to_vec(),
        q1_aug: q1.data()[b..].to_vec(),
    })
}

/// `psi <- (1 - tau) psi + tau theta`.
pub fn target_update(psi: &mut ParamStore, theta: &ParamStore, tau: f32) -> Result<()> {
    if !(tau >= 0.0 && tau <= 1.0) {
        bail!(InvalidArgument, "tau must lie in [0, 1], got {tau}");
    }
    if !psi.same_layout(theta) {
        bail!(Shape, "target and online parameters differ in keys or shapes");
    }
    for (k, p) in psi.iter_mut() {
        let t = theta.get(k).expect("same layout");
        if tau == 1.0 {
            p.data_mut().copy_from_slice(t.data());
            continue;
        }
        // written as a step toward theta so that psi == theta is a fixed point
        for (a, &b) in p.data_mut().iter_mut().zip(t.data()) {
            *a += tau * (b - *a);
        }
    }
    Ok(())
}
