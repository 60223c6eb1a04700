//! Soft actor-critic agent over stacked pixel observations.

use std::fmt;
use std::str::FromStr;

use super::nets::{
    actor_backward, critic_backward, new_actor, target_update, ActorTerms, Architecture, Critic, CriticTerms,
    GaussianHead, LogStdBounds,
};
use crate::augment::AugmentKind;
use crate::error::{bail, Error, Result};
use crate::lipschitz::{ActionSummary, PolicyOracle};
use crate::numerics::{adam_step, AdamState, Network, ParamStore, Tensor};
use crate::rng::Rng;

/// Which observations the critic regularizer sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TrainMode {
    /// Strong augmentation outside the high-sensitivity pixels.
    #[default]
    Tlda,
    /// Strong augmentation everywhere.
    NaiveStrong,
    /// Random shift only; the regularizer is off.
    WeakOnly,
    /// Strong augmentation outside randomly chosen patches.
    RandomPatch,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::Tlda, TrainMode::NaiveStrong, TrainMode::WeakOnly, TrainMode::RandomPatch];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Tlda => "tlda",
            TrainMode::NaiveStrong => "naive_strong",
            TrainMode::WeakOnly => "weak_only",
            TrainMode::RandomPatch => "random_patch",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode '{s}' (expected tlda, naive_strong, weak_only or random_patch)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacConfig {
    pub gamma: f32,
    pub batch_size: usize,
    /// Weight of the augmented-observation critic term.
    pub lambda: f32,
    pub tau: f32,
    pub actor_lr: f32,
    pub critic_lr: f32,
    pub alpha_lr: f32,
    pub alpha_beta1: f32,
    pub init_temperature: f32,
    pub replay_capacity: usize,
    pub shift_pad: usize,
    pub arch: Architecture,
    pub log_std: LogStdBounds,
    /// Actor and temperature step once every this many critic updates.
    pub actor_every: usize,
    pub target_every: usize,
    /// Decisions taken uniformly at random before updates start.
    pub init_steps: usize,
    pub strong_aug: AugmentKind,
    pub overlay_alpha: f32,
    /// Recompute K-matrices every n-th update; other updates reuse the mask
    /// cached for each replay slot.
    pub recompute_every: usize,
    pub patch_fraction: f32,
    pub patch_size: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 128,
            lambda: 1.0,
            tau: 0.01,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            alpha_lr: 1e-4,
            alpha_beta1: 0.5,
            init_temperature: 0.1,
            replay_capacity: 100_000,
            shift_pad: 4,
            arch: Architecture::default(),
            log_std: LogStdBounds::default(),
            actor_every: 2,
            target_every: 2,
            init_steps: 1000,
            strong_aug: AugmentKind::Conv,
            overlay_alpha: 0.5,
            recompute_every: 1,
            patch_fraction: 0.3,
            patch_size: 4,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            bail!(InvalidArgument, "gamma must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0) {
            bail!(InvalidArgument, "lambda must be non-negative");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            bail!(InvalidArgument, "tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 {
            bail!(InvalidArgument, "batch size and replay capacity must be positive");
        }
        if self.actor_every == 0 || self.target_every == 0 || self.recompute_every == 0 {
            bail!(InvalidArgument, "update periods must be positive");
        }
        if !(self.log_std.lo < self.log_std.hi) {
            bail!(InvalidArgument, "log-std bounds must satisfy lo < hi");
        }
        if !(self.init_temperature > 0.0) {
            bail!(InvalidArgument, "initial temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.patch_fraction) {
            bail!(InvalidArgument, "patch fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Scalars produced by one [`SacAgent::update`].
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub critic: CriticTerms,
    pub actor: Option<ActorTerms>,
    pub temperature: f32,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    cfg: SacConfig,
    obs_shape: Vec<usize>,
    action_dim: usize,
    pub critic: Critic,
    pub target: Critic,
    pub actor: Network,
    log_alpha: ParamStore,
    opt_critic: [AdamState; 3],
    opt_actor: AdamState,
    opt_alpha: AdamState,
    updates: u64,
}

const TARGET_PREFIX: &str = "target.";
const LOG_ALPHA: &str = "log_alpha";

impl SacAgent {
    pub fn new(cfg: SacConfig, obs_shape: &[usize], action_dim: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let critic = Critic::new(obs_shape, action_dim, &cfg.arch, rng)?;
        let actor = new_actor(action_dim, &cfg.arch, rng)?;
        let mut log_alpha = ParamStore::new();
        log_alpha.insert(LOG_ALPHA, Tensor::full(&[1], cfg.init_temperature.ln()));
        let opt_critic = [
            AdamState::new(critic.encoder.params(), cfg.critic_lr),
            AdamState::new(critic.q1.params(), cfg.critic_lr),
            AdamState::new(critic.q2.params(), cfg.critic_lr),
        ];
        let opt_actor = AdamState::new(actor.params(), cfg.actor_lr);
        let opt_alpha = AdamState::with_betas(&log_alpha, cfg.alpha_lr, cfg.alpha_beta1, 0.999, 1e-8);
        Ok(Self {
            target: critic.clone(),
            critic,
            actor,
            log_alpha,
            opt_critic,
            opt_actor,
            opt_alpha,
            cfg,
            obs_shape: obs_shape.to_vec(),
            action_dim,
            updates: 0,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    pub fn obs_shape(&self) -> &[usize] {
        &self.obs_shape
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn temperature(&self) -> f32 {
        self.log_alpha.get(LOG_ALPHA).expect("log alpha").data()[0].exp()
    }

    pub fn target_entropy(&self) -> f32 {
        -(self.action_dim as f32)
    }

    /// Gaussian head for a batch `[N, C, H, W]`.
    pub fn policy_head(&self, obs: &Tensor) -> Result<GaussianHead> {
        let f = self.critic.features(obs)?;
        GaussianHead::from_output(&self.actor.infer(&f)?, self.cfg.log_std)
    }

    /// Deterministic actions `tanh(mu)` for a batch.
    pub fn mean_actions(&self, obs: &Tensor) -> Result<Tensor> {
        Ok(self.policy_head(obs)?.mean_action())
    }

    /// One action for a single observation `[C, H, W]`.
    pub fn act(&self, obs: &Tensor, deterministic: bool, rng: &mut Rng) -> Result<Vec<f32>> {
        let batch = Tensor::stack(std::slice::from_ref(obs))?;
        let head = self.policy_head(&batch)?;
        if deterministic {
            return Ok(head.mean_action().into_vec());
        }
        let eps = Tensor::from_vec(&[1, self.action_dim], (0..self.action_dim).map(|_| rng.normal_f32()).collect())?;
        Ok(head.sample(&eps)?.0.into_vec())
    }

    /// Soft Bellman targets `r + γ (1 - done) (min Q'(s', a') - α log π(a'|s'))`.
    pub fn targets(&self, next_obs: &Tensor, rewards: &[f32], dones: &[bool], rng: &mut Rng) -> Result<Vec<f32>> {
        let b = rewards.len();
        let head = self.policy_head(next_obs)?;
        let eps = Tensor::from_vec(&[b, self.action_dim], (0..b * self.action_dim).map(|_| rng.normal_f32()).collect())?;
        let (act, logp) = head.sample(&eps)?;
        let (q1, q2) = self.target.q_values(&self.target.features(next_obs)?, &act)?;
        let alpha = f64::from(self.temperature());
        let g = f64::from(self.cfg.gamma);
        let y: Vec<f32> = (0..b)
            .map(|i| {
                let v = f64::from(q1[i].min(q2[i])) - alpha * logp[i];
                let cont = if dones[i] { 0.0 } else { 1.0 };
                (f64::from(rewards[i]) + g * cont * v) as f32
            })
            .collect();
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            bail!(NonFinite, "critic target {i} is {}", y[i]);
        }
        Ok(y)
    }

    /// One critic step (and, on schedule, actor, temperature and target steps).
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        obs: &Tensor,
        aug: Option<&Tensor>,
        actions: &Tensor,
        rewards: &[f32],
        next_obs: &Tensor,
        dones: &[bool],
        rng: &mut Rng,
    ) -> Result<UpdateStats> {
        let y = self.targets(next_obs, rewards, dones, rng)?;
        self.critic.zero_grad();
        let pass = critic_backward(&mut self.critic, obs, aug, actions, &y, self.cfg.lambda)?;
        if !pass.terms.total.is_finite() {
            bail!(NonFinite, "critic loss is {}", pass.terms.total);
        }
        for (net, opt) in self.critic.networks_mut().into_iter().zip(self.opt_critic.iter_mut()) {
            let (p, g) = net.params_and_grads_mut();
            adam_step(p, g, opt)?;
        }
        let mut actor_terms = None;
        if self.updates % self.cfg.actor_every as u64 == 0 {
            let b = y.len();
            let eps = Tensor::from_vec(&[b, self.action_dim], (0..b * self.action_dim).map(|_| rng.normal_f32()).collect())?;
            self.actor.zero_grad();
            let alpha = self.temperature();
            let terms = actor_backward(&mut self.actor, &mut self.critic, &pass.features, &eps, alpha, self.cfg.log_std)?;
            if !terms.loss.is_finite() {
                bail!(NonFinite, "actor loss is {}", terms.loss);
            }
            let (p, g) = self.actor.params_and_grads_mut();
            adam_step(p, g, &mut self.opt_actor)?;
            let mut grad = ParamStore::new();
            let dlog = f64::from(alpha) * (-terms.mean_log_prob - f64::from(self.target_entropy()));
            grad.insert(LOG_ALPHA, Tensor::full(&[1], dlog as f32));
            adam_step(&mut self.log_alpha, &grad, &mut self.opt_alpha)?;
            actor_terms = Some(terms);
        }
        if self.updates % self.cfg.target_every as u64 == 0 {
            for (t, o) in self.target.networks_mut().into_iter().zip(self.critic.networks()) {
                target_update(t.params_mut(), o.params(), self.cfg.tau)?;
            }
        }
        self.updates += 1;
        Ok(UpdateStats {
            critic: pass.terms,
            actor: actor_terms,
            temperature: self.temperature(),
        })
    }

    /// Mean l2 shift of the mean action and mean squared shift of `Q1(·, a)`
    /// between `clean` and `aug`, with `actions` the actions to score.
    pub fn shift_stats(&self, clean: &Tensor, aug: &Tensor, actions: &Tensor) -> Result<(f64, f64)> {
        let (fc, fa) = (self.critic.features(clean)?, self.critic.features(aug)?);
        let hc = GaussianHead::from_output(&self.actor.infer(&fc)?, self.cfg.log_std)?;
        let ha = GaussianHead::from_output(&self.actor.infer(&fa)?, self.cfg.log_std)?;
        let shift = mean_l2(&hc.mean_action(), &ha.mean_action());
        let (qc, _) = self.critic.q_values(&fc, actions)?;
        let (qa, _) = self.critic.q_values(&fa, actions)?;
        let mse = qc
            .iter()
            .zip(&qa)
            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
            .sum::<f64>()
            / qc.len().max(1) as f64;
        Ok((shift, mse))
    }

    /// All parameters under unique names: online critic, actor, temperature
    /// and the target critic prefixed with `target.`.
    pub fn state_dict(&self) -> ParamStore {
        let mut p = self.critic.params();
        p.extend(self.actor.params().clone());
        p.extend(self.log_alpha.clone());
        for (k, v) in self.target.params().iter() {
            p.insert(format!("{TARGET_PREFIX}{k}"), v.clone());
        }
        p
    }

    /// Rebuilds an agent from [`SacAgent::state_dict`] output; the layout must match `cfg`.
    pub fn from_state_dict(cfg: SacConfig, obs_shape: &[usize], action_dim: usize, params: &ParamStore) -> Result<Self> {
        let mut agent = Self::new(cfg, obs_shape, action_dim, &mut Rng::new(0, "agent.load"))?;
        let pick = |net: &Network, prefix: &str| -> Result<ParamStore> {
            net.params()
                .keys()
                .map(|k| {
                    let full = format!("{prefix}{k}");
                    params
                        .get(&full)
                        .cloned()
                        .map(|t| (k.clone(), t))
                        .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor '{full}'")))
                })
                .collect()
        };
        let [e, q1, q2] = agent.critic.networks().map(|n| pick(n, ""));
        let (e, q1, q2) = (e?, q1?, q2?);
        agent.critic.encoder.load_params(&e)?;
        agent.critic.q1.load_params(&q1)?;
        agent.critic.q2.load_params(&q2)?;
        let [te, tq1, tq2] = agent.target.networks().map(|n| pick(n, TARGET_PREFIX));
        let (te, tq1, tq2) = (te?, tq1?, tq2?);
        agent.target.encoder.load_params(&te)?;
        agent.target.q1.load_params(&tq1)?;
        agent.target.q2.load_params(&tq2)?;
        let a = pick(&agent.actor, "")?;
        agent.actor.load_params(&a)?;
        let la = params
            .get(LOG_ALPHA)
            .ok_or_else(|| Error::Shape("checkpoint lacks 'log_alpha'".into()))?;
        if la.shape() != [1] {
            bail!(Shape, "log_alpha must have shape [1]");
        }
        agent.log_alpha.insert(LOG_ALPHA, la.clone());
        let expected = agent.state_dict();
        if expected.len() != params.len() {
            bail!(Shape, "checkpoint has {} tensors, agent expects {}", params.len(), expected.len());
        }
        Ok(agent)
    }
}

/// Mean over rows of the l2 distance between two `[B, A]` tensors.
pub fn mean_l2(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.batch().max(1);
    (0..a.batch())
        .map(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64
}

impl PolicyOracle for SacAgent {
    fn summarize(&self, obs: &Tensor) -> Result<ActionSummary> {
        Ok(self.summarize_batch(std::slice::from_ref(obs))?.remove(0))
    }

    fn summarize_batch(&self, obs: &[Tensor]) -> Result<Vec<ActionSummary>> {
        if obs.is_empty() {
            return Ok(Vec::new());
        }
        let head = self.policy_head(&Tensor::stack(obs)?)?;
        let a = self.action_dim;
        Ok((0..head.rows())
            .map(|r| ActionSummary::Gaussian {
                loc: head.mu[r * a..(r + 1) * a].iter().map(|&v| f64::from(v)).collect(),
                std: head.log_std[r * a..(r + 1) * a].iter().map(|&v| f64::from(v).exp()).collect(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SacConfig {
        SacConfig {
            batch_size: 4,
            arch: Architecture {
                conv_channels: 2,
                conv_layers: 1,
                feature_dim: 4,
                hidden_dim: 8,
            },
            ..SacConfig::default()
        }
    }

    fn batch(rng: &mut Rng) -> (Tensor, Tensor, Vec<f32>, Tensor) {
        let obs = Tensor::from_vec(&[4, 3, 6, 6], (0..432).map(|_| rng.uniform_f32()).collect()).unwrap();
        let next = Tensor::from_vec(&[4, 3, 6, 6], (0..432).map(|_| rng.uniform_f32()).collect()).unwrap();
        let acts = Tensor::from_vec(&[4, 2], (0..8).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect()).unwrap();
        (obs, acts, vec![0.1, 0.5, 0.0, 1.0], next)
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
        }
        assert!("svea".parse::<TrainMode>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SacConfig::default().validate().is_ok());
        assert!(SacConfig { gamma: 1.0, ..SacConfig::default() }.validate().is_err());
        assert!(SacConfig { tau: 0.0, ..SacConfig::default() }.validate().is_err());
        assert!(SacConfig { lambda: -1.0, ..SacConfig::default() }.validate().is_err());
        assert!(SacConfig { replay_capacity: 0, ..SacConfig::default() }.validate().is_err());
    }

    #[test]
    fn update_is_deterministic_and_decomposes() {
        let mut rng = Rng::new(1, "b");
        let (obs, acts, r, next) = batch(&mut rng);
        let aug = obs.map(|v| 1.0 - v);
        let run = || {
            let mut agent = SacAgent::new(small_cfg(), &[3, 6, 6], 2, &mut Rng::new(5, "init")).unwrap();
            let mut r2 = Rng::new(6, "u");
            let mut stats = Vec::new();
            for _ in 0..3 {
                stats.push(agent.update(&obs, Some(&aug), &acts, &r, &next, &[false; 4], &mut r2).unwrap());
            }
            (agent.state_dict(), stats)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        for s in &sa {
            let want = s.critic.jq + s.critic.rq;
            assert!((s.critic.total - want).abs() <= 1e-5 * want.abs());
        }
        assert!(sa[0].actor.is_some() && sa[1].actor.is_none());
    }

    #[test]
    fn state_dict_round_trip_and_mismatch() {
        let agent = SacAgent::new(small_cfg(), &[3, 6, 6], 2, &mut Rng::new(2, "init")).unwrap();
        let sd = agent.state_dict();
        let back = SacAgent::from_state_dict(small_cfg(), &[3, 6, 6], 2, &sd).unwrap();
        assert_eq!(back.state_dict(), sd);
        let mut other = small_cfg();
        other.arch.hidden_dim = 9;
        assert!(SacAgent::from_state_dict(other, &[3, 6, 6], 2, &sd).is_err());
    }

    #[test]
    fn summaries_match_mean_actions() {
        let agent = SacAgent::new(small_cfg(), &[3, 6, 6], 2, &mut Rng::new(3, "init")).unwrap();
        let mut rng = Rng::new(4, "o");
        let (obs, ..) = batch(&mut rng);
        let mean = agent.mean_actions(&obs).unwrap();
        let s = agent.summarize_batch(&obs.unstack()).unwrap();
        for (r, sum) in s.iter().enumerate() {
            let m = sum.mean_action().unwrap();
            for j in 0..2 {
                assert!((m[j] - f64::from(mean.row(r)[j])).abs() < 1e-6);
            }
        }
    }
}
