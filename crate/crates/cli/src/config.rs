//! Flat `key = value` configuration with dotted sections.
//!
//! Sections: `run.*`, `env.*`, `agent.*`, `tlda.*`, `verify.*`. Blank lines
//! and `#` comments are ignored. Unknown keys, duplicate keys and malformed
//! values are rejected with the offending line number.

use std::fmt::Display;
use std::str::FromStr;

use tlda_core::agent::{SacConfig, TrainConfig, TrainMode};
use tlda_core::augment::AugmentKind;
use tlda_core::envs::{PixelEnvConfig, VariationMode};
use tlda_core::error::{Error, Result};
use tlda_core::exec::Exec;
use tlda_core::lipschitz::KMatrixConfig;
use tlda_core::verify::EnsembleConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Environment (physics) steps.
    pub steps: usize,
    pub mode: TrainMode,
    pub checkpoint_every: usize,
    pub eval_episodes: usize,
    pub eval_variations: Vec<VariationMode>,
    pub diag_samples: usize,
    pub diag_augs: Vec<AugmentKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 30_000,
            mode: TrainMode::Tlda,
            checkpoint_every: 10_000,
            eval_episodes: 10,
            eval_variations: VariationMode::ALL.to_vec(),
            diag_samples: 500,
            diag_augs: vec![AugmentKind::Conv, AugmentKind::Overlay],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub run: RunConfig,
    pub env: PixelEnvConfig,
    pub agent: SacConfig,
    pub tlda: KMatrixConfig,
    pub verify: EnsembleConfig,
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse '{v}': {e}"))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn list<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got '{v}'")),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Config { line, msg: format!("expected key = value, got '{body}'") });
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config { line, msg: format!("duplicate key '{k}'") });
            }
            cfg.set(k, v).map_err(|msg| Error::Config { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        self.tlda.validate()?;
        self.verify.validate()?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (r, e, a, t, y) = (&mut self.run, &mut self.env, &mut self.agent, &mut self.tlda, &mut self.verify);
        match key {
            "run.seed" => r.seed = parse(v)?,
            "run.steps" => r.steps = parse(v)?,
            "run.mode" => r.mode = parse(v)?,
            "run.checkpoint_every" => r.checkpoint_every = parse(v)?,
            "run.eval_episodes" => r.eval_episodes = parse(v)?,
            "run.eval_variations" => r.eval_variations = parse_list(v)?,
            "run.diag_samples" => r.diag_samples = parse(v)?,
            "run.diag_augs" => r.diag_augs = parse_list(v)?,
            "env.width" => e.width = parse(v)?,
            "env.height" => e.height = parse(v)?,
            "env.frame_stack" => e.frame_stack = parse(v)?,
            "env.episode_length" => e.episode_length = parse(v)?,
            "env.action_repeat" => e.action_repeat = parse(v)?,
            "env.mass" => e.mass = parse(v)?,
            "env.damping" => e.damping = parse(v)?,
            "env.dt" => e.dt = parse(v)?,
            "env.force_scale" => e.force_scale = parse(v)?,
            "env.agent_radius" => e.agent_radius = parse(v)?,
            "env.target_radius" => e.target_radius = parse(v)?,
            "env.reward_distance" => e.reward_distance = parse(v)?,
            "agent.gamma" => a.gamma = parse(v)?,
            "agent.batch_size" => a.batch_size = parse(v)?,
            "agent.lambda" => a.lambda = parse(v)?,
            "agent.tau" => a.tau = parse(v)?,
            "agent.actor_lr" => a.actor_lr = parse(v)?,
            "agent.critic_lr" => a.critic_lr = parse(v)?,
            "agent.alpha_lr" => a.alpha_lr = parse(v)?,
            "agent.alpha_beta1" => a.alpha_beta1 = parse(v)?,
            "agent.init_temperature" => a.init_temperature = parse(v)?,
            "agent.replay_capacity" => a.replay_capacity = parse(v)?,
            "agent.shift_pad" => a.shift_pad = parse(v)?,
            "agent.conv_channels" => a.arch.conv_channels = parse(v)?,
            "agent.conv_layers" => a.arch.conv_layers = parse(v)?,
            "agent.feature_dim" => a.arch.feature_dim = parse(v)?,
            "agent.hidden_dim" => a.arch.hidden_dim = parse(v)?,
            "agent.log_std_min" => a.log_std.lo = parse(v)?,
            "agent.log_std_max" => a.log_std.hi = parse(v)?,
            "agent.actor_every" => a.actor_every = parse(v)?,
            "agent.target_every" => a.target_every = parse(v)?,
            "agent.init_steps" => a.init_steps = parse(v)?,
            "agent.strong_aug" => a.strong_aug = parse(v)?,
            "agent.overlay_alpha" => a.overlay_alpha = parse(v)?,
            "agent.recompute_every" => a.recompute_every = parse(v)?,
            "agent.patch_fraction" => a.patch_fraction = parse(v)?,
            "agent.patch_size" => a.patch_size = parse(v)?,
            "tlda.stride" => t.stride = parse(v)?,
            "tlda.metric" => t.metric = parse(v)?,
            "tlda.blur_sigma" => t.blur_sigma = parse(v)?,
            "tlda.mask_sigma" => t.mask_sigma = parse(v)?,
            "tlda.denominator" => t.denominator = parse(v)?,
            "tlda.fill" => t.fill = parse(v)?,
            "tlda.parallel" => t.exec = if parse_bool(v)? { Exec::Parallel } else { Exec::Sequential },
            "tlda.chunk" => t.chunk = parse(v)?,
            "verify.instances" => y.instances = parse(v)?,
            "verify.max_states" => y.max_states = parse(v)?,
            "verify.max_actions" => y.max_actions = parse(v)?,
            "verify.gammas" => y.gammas = parse_list(v)?,
            "verify.d_lo" => y.d_lo = parse(v)?,
            "verify.d_hi" => y.d_hi = parse(v)?,
            "verify.horizon" => y.horizon = if v == "auto" { None } else { Some(parse(v)?) },
            "verify.identity_map" => y.identity_map = parse_bool(v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (r, e, a, t, y) = (&self.run, &self.env, &self.agent, &self.tlda, &self.verify);
        vec![
            ("run.seed", r.seed.to_string()),
            ("run.steps", r.steps.to_string()),
            ("run.mode", r.mode.to_string()),
            ("run.checkpoint_every", r.checkpoint_every.to_string()),
            ("run.eval_episodes", r.eval_episodes.to_string()),
            ("run.eval_variations", list(&r.eval_variations)),
            ("run.diag_samples", r.diag_samples.to_string()),
            ("run.diag_augs", list(&r.diag_augs)),
            ("env.width", e.width.to_string()),
            ("env.height", e.height.to_string()),
            ("env.frame_stack", e.frame_stack.to_string()),
            ("env.episode_length", e.episode_length.to_string()),
            ("env.action_repeat", e.action_repeat.to_string()),
            ("env.mass", e.mass.to_string()),
            ("env.damping", e.damping.to_string()),
            ("env.dt", e.dt.to_string()),
            ("env.force_scale", e.force_scale.to_string()),
            ("env.agent_radius", e.agent_radius.to_string()),
            ("env.target_radius", e.target_radius.to_string()),
            ("env.reward_distance", e.reward_distance.to_string()),
            ("agent.gamma", a.gamma.to_string()),
            ("agent.batch_size", a.batch_size.to_string()),
            ("agent.lambda", a.lambda.to_string()),
            ("agent.tau", a.tau.to_string()),
            ("agent.actor_lr", a.actor_lr.to_string()),
            ("agent.critic_lr", a.critic_lr.to_string()),
            ("agent.alpha_lr", a.alpha_lr.to_string()),
            ("agent.alpha_beta1", a.alpha_beta1.to_string()),
            ("agent.init_temperature", a.init_temperature.to_string()),
            ("agent.replay_capacity", a.replay_capacity.to_string()),
            ("agent.shift_pad", a.shift_pad.to_string()),
            ("agent.conv_channels", a.arch.conv_channels.to_string()),
            ("agent.conv_layers", a.arch.conv_layers.to_string()),
            ("agent.feature_dim", a.arch.feature_dim.to_string()),
            ("agent.hidden_dim", a.arch.hidden_dim.to_string()),
            ("agent.log_std_min", a.log_std.lo.to_string()),
            ("agent.log_std_max", a.log_std.hi.to_string()),
            ("agent.actor_every", a.actor_every.to_string()),
            ("agent.target_every", a.target_every.to_string()),
            ("agent.init_steps", a.init_steps.to_string()),
            ("agent.strong_aug", a.strong_aug.to_string()),
            ("agent.overlay_alpha", a.overlay_alpha.to_string()),
            ("agent.recompute_every", a.recompute_every.to_string()),
            ("agent.patch_fraction", a.patch_fraction.to_string()),
            ("agent.patch_size", a.patch_size.to_string()),
            ("tlda.stride", t.stride.to_string()),
            ("tlda.metric", t.metric.to_string()),
            ("tlda.blur_sigma", t.blur_sigma.to_string()),
            ("tlda.mask_sigma", t.mask_sigma.to_string()),
            ("tlda.denominator", t.denominator.as_str().to_string()),
            ("tlda.fill", t.fill.as_str().to_string()),
            ("tlda.parallel", (t.exec == Exec::Parallel).to_string()),
            ("tlda.chunk", t.chunk.to_string()),
            ("verify.instances", y.instances.to_string()),
            ("verify.max_states", y.max_states.to_string()),
            ("verify.max_actions", y.max_actions.to_string()),
            ("verify.gammas", list(&y.gammas)),
            ("verify.d_lo", y.d_lo.to_string()),
            ("verify.d_hi", y.d_hi.to_string()),
            ("verify.horizon", y.horizon.map_or_else(|| "auto".to_string(), |h| h.to_string())),
            ("verify.identity_map", y.identity_map.to_string()),
        ]
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            env: self.env.clone(),
            sac: self.agent.clone(),
            tlda: self.tlda,
            mode: self.run.mode,
            seed: self.run.seed,
            steps: self.run.steps,
            checkpoint_every: self.run.checkpoint_every,
        }
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            seed: self.run.seed,
            ..self.verify.clone()
        }
    }
}
