//! Training loop, evaluation rollouts and shift diagnostics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;

use super::replay::{ReplayBuffer, Transition};
use super::sac::{mean_l2, SacAgent, SacConfig, TrainMode};
use crate::augment::{random_patch_preserve, shift_at, AugmentKind, AugmentOp, PatchBudget};
use crate::envs::{PixelEnv, PixelEnvConfig, VariationMode, VisualVariation};
use crate::error::{bail, Result};
use crate::lipschitz::{binarize_mask, k_matrix_batch, tlda_blend, KMatrixConfig, PreservationMask};
use crate::numerics::{write_checkpoint, Tensor};
use crate::rng::Rng;

pub const METRICS_HEADER: &str = "step,episode,episode_return,critic_loss_jq,critic_loss_rq,critic_loss_total,actor_loss,temperature,action_shift_l2,q_mse_aug";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: PixelEnvConfig,
    pub sac: SacConfig,
    pub tlda: KMatrixConfig,
    pub mode: TrainMode,
    pub seed: u64,
    /// Budget in environment (physics) steps; decisions = steps / action_repeat.
    pub steps: usize,
    /// Checkpoint period in environment steps; 0 keeps only the initial and final ones.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: PixelEnvConfig::default(),
            sac: SacConfig::default(),
            tlda: KMatrixConfig::default(),
            mode: TrainMode::Tlda,
            seed: 0,
            steps: 30_000,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.sac.validate()?;
        self.tlda.validate()?;
        Ok(())
    }

    pub fn decisions(&self) -> usize {
        self.steps / self.env.action_repeat.max(1)
    }

    pub fn strong_op(&self) -> AugmentOp {
        let mut op = AugmentOp::new(self.sac.strong_aug);
        op.pad = self.sac.shift_pad;
        op.alpha = self.sac.overlay_alpha;
        op
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub step: usize,
    pub episode: usize,
    pub episode_return: f64,
    pub jq: Option<f64>,
    pub rq: Option<f64>,
    pub total: Option<f64>,
    pub actor_loss: Option<f64>,
    pub temperature: f64,
    pub action_shift: Option<f64>,
    pub q_mse: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}

impl EpisodeRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episode,
            self.episode_return,
            opt(self.jq),
            opt(self.rq),
            opt(self.total),
            opt(self.actor_loss),
            self.temperature,
            opt(self.action_shift),
            opt(self.q_mse)
        )
    }
}

#[derive(Debug, Default)]
struct Running {
    jq: f64,
    rq: f64,
    total: f64,
    n: usize,
    actor: f64,
    n_actor: usize,
}

impl Running {
    fn mean(sum: f64, n: usize) -> Option<f64> {
        (n > 0).then(|| sum / n as f64)
    }
}

/// Builds regularizer inputs for one mode, caching preservation masks per replay slot.
struct Augmenter {
    strong: AugmentOp,
    tlda: KMatrixConfig,
    pad: usize,
    patch_fraction: f32,
    patch_size: usize,
    recompute_every: usize,
    masks: Vec<Option<PreservationMask>>,
    calls: u64,
}

impl Augmenter {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            strong: cfg.strong_op(),
            tlda: cfg.tlda,
            pad: cfg.sac.shift_pad,
            patch_fraction: cfg.sac.patch_fraction,
            patch_size: cfg.sac.patch_size,
            recompute_every: cfg.sac.recompute_every,
            masks: Vec::new(),
            calls: 0,
        }
    }

    fn invalidate(&mut self, slot: usize) {
        if slot < self.masks.len() {
            self.masks[slot] = None;
        }
    }

    /// Regularizer input for `raw` (un-shifted) observations, shifted by `offsets`.
    fn build(
        &mut self,
        agent: &SacAgent,
        raw: &[Tensor],
        slots: Option<&[usize]>,
        offsets: &[(usize, usize)],
        mode: TrainMode,
        rng: &mut Rng,
    ) -> Result<Option<Tensor>> {
        let blended: Vec<Tensor> = match mode {
            TrainMode::WeakOnly => return Ok(None),
            TrainMode::NaiveStrong => raw.iter().map(|o| self.strong.apply(o, rng)).collect::<Result<_>>()?,
            TrainMode::RandomPatch => raw
                .iter()
                .map(|o| {
                    let s = self.strong.apply(o, rng)?;
                    Ok(random_patch_preserve(o, &s, PatchBudget::Fraction(self.patch_fraction), self.patch_size, rng)?.0)
                })
                .collect::<Result<_>>()?,
            TrainMode::Tlda => {
                let masks = self.masks_for(agent, raw, slots)?;
                raw.iter()
                    .zip(&masks)
                    .map(|(o, m)| tlda_blend(o, &self.strong.apply(o, rng)?, m))
                    .collect::<Result<_>>()?
            }
        };
        let shifted: Vec<Tensor> = blended
            .iter()
            .zip(offsets)
            .map(|(o, &(dy, dx))| shift_at(o, self.pad, dy, dx))
            .collect::<Result<_>>()?;
        Ok(Some(Tensor::stack(&shifted)?))
    }

    fn masks_for(&mut self, agent: &SacAgent, raw: &[Tensor], slots: Option<&[usize]>) -> Result<Vec<PreservationMask>> {
        let Some(slots) = slots else {
            let ks = k_matrix_batch(agent, raw, &self.tlda)?;
            return Ok(ks.iter().map(binarize_mask).collect());
        };
        let refresh = self.calls % self.recompute_every as u64 == 0;
        self.calls += 1;
        let need: Vec<usize> = (0..raw.len())
            .filter(|&i| refresh || self.masks.get(slots[i]).map_or(true, |m| m.is_none()))
            .collect();
        if !need.is_empty() {
            let inputs: Vec<Tensor> = need.iter().map(|&i| raw[i].clone()).collect();
            let ks = k_matrix_batch(agent, &inputs, &self.tlda)?;
            for (&i, k) in need.iter().zip(&ks) {
                let slot = slots[i];
                if self.masks.len() <= slot {
                    self.masks.resize(slot + 1, None);
                }
                self.masks[slot] = Some(binarize_mask(k));
            }
        }
        Ok(slots.iter().map(|&s| self.masks[s].clone().expect("mask computed above")).collect())
    }
}

fn shift_offsets(n: usize, pad: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| {
            if pad == 0 {
                (0, 0)
            } else {
                (rng.below(2 * pad + 1), rng.below(2 * pad + 1))
            }
        })
        .collect()
}

fn shift_all(raw: &[Tensor], pad: usize, offsets: &[(usize, usize)]) -> Result<Tensor> {
    let v: Vec<Tensor> = raw
        .iter()
        .zip(offsets)
        .map(|(o, &(dy, dx))| shift_at(o, pad, dy, dx))
        .collect::<Result<_>>()?;
    Tensor::stack(&v)
}

/// Files written by [`train`] under its output directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutputs {
    pub metrics: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpisodeRecord>,
    pub agent: SacAgent,
    pub outputs: TrainOutputs,
}

pub fn save_agent(agent: &SacAgent, path: &Path, echo: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let f = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(f, &agent.state_dict(), Some(echo))?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn episode_seed(root: &Rng, episode: usize) -> u64 {
    root.fork_indexed("episode", episode as u64).next_u64()
}

/// Runs the full interaction/update loop. With `out_dir`, writes
/// `metrics.csv` row by row and checkpoints under `checkpoints/`; `echo`
/// is stored as each checkpoint's trailer.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>, echo: &str) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed, "train");
    let obs_shape = cfg.env.observation_shape();
    let mut agent = SacAgent::new(cfg.sac.clone(), &obs_shape, 2, &mut root.fork("init"))?;
    let mut env = PixelEnv::new(cfg.env.clone(), VisualVariation::none())?;
    let mut buffer = ReplayBuffer::new(cfg.sac.replay_capacity, &obs_shape, 2)?;
    let mut augmenter = Augmenter::new(cfg);
    let (mut explore, mut replay_rng, mut aug_rng, mut update_rng, mut diag_rng) = (
        root.fork("explore"),
        root.fork("replay"),
        root.fork("augment"),
        root.fork("update"),
        root.fork("diagnostics"),
    );
    let mut outputs = TrainOutputs::default();
    let mut csv = None;
    let ckpt_dir = out_dir.map(|d| d.join("checkpoints"));
    if let (Some(dir), Some(ck)) = (out_dir, ckpt_dir.as_ref()) {
        fs::create_dir_all(ck)?;
        let path = dir.join("metrics.csv");
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "{METRICS_HEADER}")?;
        w.flush()?;
        csv = Some(w);
        outputs.metrics = Some(path);
        let p = ck.join("step_00000000.ckpt");
        save_agent(&agent, &p, echo)?;
        outputs.checkpoints.push(p);
    }
    let mut records = Vec::new();
    let (mut episode, mut env_steps) = (0usize, 0usize);
    let mut obs = env.reset(episode_seed(&root, episode));
    let mut ep_return = 0.0f64;
    let mut run = Running::default();
    let decisions = cfg.decisions();
    let b = cfg.sac.batch_size;
    let pad = cfg.sac.shift_pad;
    for t in 0..decisions {
        let action = if t < cfg.sac.init_steps {
            vec![explore.uniform_range(-1.0, 1.0) as f32, explore.uniform_range(-1.0, 1.0) as f32]
        } else {
            agent.act(&obs, false, &mut explore)?
        };
        let before = env.elapsed();
        let res = env.step([action[0], action[1]]);
        env_steps += env.elapsed() - before;
        let slot = buffer.push(&Transition {
            obs: obs.clone(),
            action,
            reward: res.reward,
            next_obs: res.obs.clone(),
            done: false,
        })?;
        augmenter.invalidate(slot);
        ep_return += f64::from(res.reward);
        if t >= cfg.sac.init_steps {
            let batch = buffer.sample(b, &mut replay_rng)?;
            let raw = batch.obs.unstack();
            let offsets = shift_offsets(b, pad, &mut aug_rng);
            let next_offsets = shift_offsets(b, pad, &mut aug_rng);
            let obs_w = shift_all(&raw, pad, &offsets)?;
            let next_w = shift_all(&batch.next_obs.unstack(), pad, &next_offsets)?;
            let aug = augmenter.build(&agent, &raw, Some(&batch.indices), &offsets, cfg.mode, &mut aug_rng)?;
            let stats = agent.update(&obs_w, aug.as_ref(), &batch.actions, &batch.rewards, &next_w, &batch.dones, &mut update_rng)?;
            run.jq += stats.critic.jq;
            run.rq += stats.critic.rq;
            run.total += stats.critic.total;
            run.n += 1;
            if let Some(a) = stats.actor {
                run.actor += a.loss;
                run.n_actor += 1;
            }
        }
        if res.done {
            let (shift, qmse) = if run.n > 0 {
                let (s, q) = episode_diagnostics(&agent, &buffer, &mut augmenter, cfg, &mut diag_rng)?;
                (Some(s), Some(q))
            } else {
                (None, None)
            };
            let rec = EpisodeRecord {
                step: env_steps,
                episode,
                episode_return: ep_return,
                jq: Running::mean(run.jq, run.n),
                rq: Running::mean(run.rq, run.n),
                total: Running::mean(run.total, run.n),
                actor_loss: Running::mean(run.actor, run.n_actor),
                temperature: f64::from(agent.temperature()),
                action_shift: shift,
                q_mse: qmse,
            };
            if let Some(w) = csv.as_mut() {
                writeln!(w, "{}", rec.csv_row())?;
                w.flush()?;
            }
            records.push(rec);
            episode += 1;
            ep_return = 0.0;
            run = Running::default();
            obs = env.reset(episode_seed(&root, episode));
        } else {
            obs = res.obs;
        }
        if let Some(ck) = ckpt_dir.as_ref() {
            let every = cfg.checkpoint_every / cfg.env.action_repeat.max(1);
            if every > 0 && (t + 1) % every == 0 && t + 1 < decisions {
                let p = ck.join(format!("step_{:08}.ckpt", (t + 1) * cfg.env.action_repeat));
                save_agent(&agent, &p, echo)?;
                outputs.checkpoints.push(p);
            }
        }
    }
    if let Some(dir) = out_dir {
        let p = dir.join("final.ckpt");
        save_agent(&agent, &p, echo)?;
        outputs.checkpoints.push(p);
    }
    Ok(TrainOutcome {
        records,
        agent,
        outputs,
    })
}

/// Shift statistics on a fresh replay sample, under the run's regularizer
/// input (the naive strong operator for weak-only runs).
fn episode_diagnostics(
    agent: &SacAgent,
    buffer: &ReplayBuffer,
    augmenter: &mut Augmenter,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let batch = buffer.sample(cfg.sac.batch_size, rng)?;
    let raw = batch.obs.unstack();
    let offsets = shift_offsets(raw.len(), cfg.sac.shift_pad, rng);
    let clean = shift_all(&raw, cfg.sac.shift_pad, &offsets)?;
    let mode = if cfg.mode == TrainMode::WeakOnly { TrainMode::NaiveStrong } else { cfg.mode };
    let aug = augmenter
        .build(agent, &raw, None, &offsets, mode, rng)?
        .expect("strong modes always produce an input");
    agent.shift_stats(&clean, &aug, &batch.actions)
}

/// Chooses actions during evaluation rollouts.
pub trait Controller {
    fn action(&self, obs: &Tensor, rng: &mut Rng) -> Result<[f32; 2]>;
}

impl Controller for SacAgent {
    fn action(&self, obs: &Tensor, rng: &mut Rng) -> Result<[f32; 2]> {
        let a = self.act(obs, true, rng)?;
        Ok([a[0], a[1]])
    }
}

/// Uniform random actions in `[-1, 1]^2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomController;

impl Controller for RandomController {
    fn action(&self, _obs: &Tensor, rng: &mut Rng) -> Result<[f32; 2]> {
        Ok([rng.uniform_range(-1.0, 1.0) as f32, rng.uniform_range(-1.0, 1.0) as f32])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub variation: VariationMode,
    pub returns: Vec<f64>,
}

impl EvalStats {
    pub fn mean(&self) -> f64 {
        if self.returns.is_empty() {
            return f64::NAN;
        }
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.returns.is_empty() {
            return f64::NAN;
        }
        let m = self.mean();
        (self.returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / self.returns.len() as f64).sqrt()
    }
}

/// Rolls out `episodes` episodes per variation. Episode `k` starts from the
/// same arena state under every variation.
pub fn evaluate(
    controller: &dyn Controller,
    env_cfg: &PixelEnvConfig,
    variations: &[VariationMode],
    episodes: usize,
    seed: u64,
) -> Result<Vec<EvalStats>> {
    if episodes == 0 {
        return Ok(Vec::new());
    }
    let root = Rng::new(seed, "eval");
    let mut out = Vec::with_capacity(variations.len());
    for &mode in variations {
        let mut returns = Vec::with_capacity(episodes);
        for k in 0..episodes {
            let vseed = root.fork_indexed("variation", k as u64).next_u64();
            let mut env = PixelEnv::new(env_cfg.clone(), VisualVariation::new(mode, vseed))?;
            let mut obs = env.reset(episode_seed(&root, k));
            let mut rng = root.fork_indexed("actions", k as u64);
            let mut total = 0.0;
            loop {
                let res = env.step(controller.action(&obs, &mut rng)?);
                total += f64::from(res.reward);
                if res.done {
                    break;
                }
                obs = res.obs;
            }
            returns.push(total);
        }
        out.push(EvalStats { variation: mode, returns });
    }
    Ok(out)
}

/// Which input the diagnostics compare against the clean observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiagMode {
    Weak,
    Strong,
    Tlda,
}

impl DiagMode {
    pub const ALL: [DiagMode; 3] = [DiagMode::Weak, DiagMode::Strong, DiagMode::Tlda];

    pub fn as_str(&self) -> &'static str {
        match self {
            DiagMode::Weak => "weak",
            DiagMode::Strong => "strong",
            DiagMode::Tlda => "tlda",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagRow {
    pub mode: DiagMode,
    pub aug: AugmentKind,
    /// Mean l2 distance between mean actions.
    pub action_shift: f64,
    /// Mean squared difference of `Q1(·, a)`.
    pub q_mse: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagConfig {
    pub samples: usize,
    pub augs: Vec<AugmentKind>,
    pub shift_pad: usize,
    pub overlay_alpha: f32,
    pub tlda: KMatrixConfig,
    pub seed: u64,
    /// Observations per policy/critic call.
    pub chunk: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            augs: vec![AugmentKind::Conv, AugmentKind::Overlay],
            shift_pad: 4,
            overlay_alpha: 0.5,
            tlda: KMatrixConfig::default(),
            seed: 0,
            chunk: 128,
        }
    }
}

/// Observations from deterministic-policy rollouts, with the actions taken.
pub fn collect_observations(agent: &SacAgent, env_cfg: &PixelEnvConfig, n: usize, seed: u64) -> Result<(Vec<Tensor>, Vec<[f32; 2]>)> {
    let root = Rng::new(seed, "diagnostics.rollout");
    let mut env = PixelEnv::new(env_cfg.clone(), VisualVariation::none())?;
    let (mut obs_out, mut acts) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut episode = 0;
    let mut rng = root.fork("actions");
    let mut obs = env.reset(episode_seed(&root, episode));
    while obs_out.len() < n {
        let a = Controller::action(agent, &obs, &mut rng)?;
        obs_out.push(obs.clone());
        acts.push(a);
        let res = env.step(a);
        if res.done {
            episode += 1;
            obs = env.reset(episode_seed(&root, episode));
        } else {
            obs = res.obs;
        }
    }
    Ok((obs_out, acts))
}

/// Action-shift and Q-gap report: one row per `(mode, aug)`. The strong and
/// sensitivity-aware rows use the same augmentation draw per observation.
pub fn diagnostics(agent: &SacAgent, obs: &[Tensor], actions: &[[f32; 2]], cfg: &DiagConfig) -> Result<Vec<DiagRow>> {
    if obs.len() != actions.len() {
        bail!(Shape, "{} observations but {} actions", obs.len(), actions.len());
    }
    let root = Rng::new(cfg.seed, "diagnostics");
    let masks: Vec<PreservationMask> = if obs.is_empty() {
        Vec::new()
    } else {
        k_matrix_batch(agent, obs, &cfg.tlda)?.iter().map(binarize_mask).collect()
    };
    let mut rows = Vec::new();
    for &kind in &cfg.augs {
        let mut op = AugmentOp::new(kind);
        op.pad = cfg.shift_pad;
        op.alpha = cfg.overlay_alpha;
        let mut shift_rng = root.fork(&format!("{kind}.weak"));
        let mut strong_rng = root.fork(&format!("{kind}.strong"));
        let mut inputs: [Vec<Tensor>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (o, m) in obs.iter().zip(&masks) {
            let (dy, dx) = shift_offsets(1, cfg.shift_pad, &mut shift_rng)[0];
            inputs[0].push(shift_at(o, cfg.shift_pad, dy, dx)?);
            let s = op.apply(o, &mut strong_rng)?;
            inputs[2].push(tlda_blend(o, &s, m)?);
            inputs[1].push(s);
        }
        for (mode, aug_obs) in DiagMode::ALL.into_iter().zip(&inputs) {
            let (mut shift_sum, mut q_sum) = (0.0, 0.0);
            for start in (0..obs.len()).step_by(cfg.chunk.max(1)) {
                let end = (start + cfg.chunk.max(1)).min(obs.len());
                let clean = Tensor::stack(&obs[start..end])?;
                let aug = Tensor::stack(&aug_obs[start..end])?;
                let a: Vec<f32> = actions[start..end].iter().flat_map(|a| a.iter().copied()).collect();
                let a = Tensor::from_vec(&[end - start, 2], a)?;
                let (s, q) = agent.shift_stats(&clean, &aug, &a)?;
                shift_sum += s * (end - start) as f64;
                q_sum += q * (end - start) as f64;
            }
            let n = obs.len().max(1) as f64;
            rows.push(DiagRow {
                mode,
                aug: kind,
                action_shift: shift_sum / n,
                q_mse: q_sum / n,
                samples: obs.len(),
            });
        }
    }
    Ok(rows)
}

/// Mean l2 action shift between two observation sets, exposed for tests.
pub fn action_shift(agent: &SacAgent, a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mean_l2(&agent.mean_actions(a)?, &agent.mean_actions(b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: TrainMode) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.env.width = 16;
        cfg.env.height = 16;
        cfg.env.episode_length = 20;
        cfg.sac.arch.conv_channels = 4;
        cfg.sac.arch.conv_layers = 2;
        cfg.sac.arch.feature_dim = 8;
        cfg.sac.arch.hidden_dim = 16;
        cfg.sac.batch_size = 8;
        cfg.sac.init_steps = 10;
        cfg.sac.shift_pad = 2;
        cfg.tlda.stride = 4;
        cfg.tlda.mask_sigma = 1.5;
        cfg.mode = mode;
        cfg.steps = 60;
        cfg
    }

    fn scratch(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("tlda-train-{}-{name}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn training_is_deterministic_for_every_mode() {
        for mode in [TrainMode::Tlda, TrainMode::NaiveStrong, TrainMode::WeakOnly, TrainMode::RandomPatch] {
            let cfg = tiny(mode);
            let a = train(&cfg, None, "").unwrap();
            let b = train(&cfg, None, "").unwrap();
            assert_eq!(a.records, b.records, "{mode:?}");
            assert_eq!(a.agent.state_dict(), b.agent.state_dict());
            assert_eq!(a.records.len(), 3);
            assert_eq!(a.records.last().unwrap().step, 60);
            // the first episode finishes before updates start
            assert!(a.records[0].jq.is_none());
            assert!(a.records[1].jq.is_some());
            assert!(a.records[1].action_shift.unwrap() >= 0.0);
            if mode == TrainMode::WeakOnly {
                assert_eq!(a.records[1].rq, Some(0.0));
            }
        }
    }

    #[test]
    fn seeds_change_the_run() {
        let mut cfg = tiny(TrainMode::Tlda);
        let a = train(&cfg, None, "").unwrap();
        cfg.seed = 1;
        let b = train(&cfg, None, "").unwrap();
        assert_ne!(a.agent.state_dict(), b.agent.state_dict());
    }

    #[test]
    fn outputs_are_byte_identical() {
        let cfg = tiny(TrainMode::Tlda);
        let (d1, d2) = (scratch("a"), scratch("b"));
        let o1 = train(&cfg, Some(&d1), "echo").unwrap().outputs;
        let o2 = train(&cfg, Some(&d2), "echo").unwrap().outputs;
        let csv = fs::read_to_string(o1.metrics.as_ref().unwrap()).unwrap();
        assert_eq!(csv, fs::read_to_string(o2.metrics.unwrap()).unwrap());
        assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().contains("nan"));
        for (p, q) in o1.checkpoints.iter().zip(&o2.checkpoints) {
            assert_eq!(fs::read(p).unwrap(), fs::read(q).unwrap());
        }
        let _ = fs::remove_dir_all(&d1);
        let _ = fs::remove_dir_all(&d2);
    }

    #[test]
    fn zero_steps_still_writes_initial_checkpoint() {
        let mut cfg = tiny(TrainMode::Tlda);
        cfg.steps = 0;
        let dir = scratch("zero");
        let out = train(&cfg, Some(&dir), "").unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.outputs.checkpoints.len(), 2);
        let initial = crate::numerics::read_checkpoint(File::open(&out.outputs.checkpoints[0]).unwrap()).unwrap().0;
        assert_eq!(initial, out.agent.state_dict());
        let csv = fs::read_to_string(out.outputs.metrics.unwrap()).unwrap();
        assert_eq!(csv, format!("{METRICS_HEADER}\n"));
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn periodic_checkpoints() {
        let mut cfg = tiny(TrainMode::WeakOnly);
        cfg.checkpoint_every = 20;
        let dir = scratch("periodic");
        let out = train(&cfg, Some(&dir), "").unwrap();
        let names: Vec<_> = out.outputs.checkpoints.iter().map(|p| p.file_name().unwrap().to_owned()).collect();
        assert_eq!(names, ["step_00000000.ckpt", "step_00000020.ckpt", "step_00000040.ckpt", "final.ckpt"]);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn evaluate_without_episodes_is_empty() {
        let r = evaluate(&RandomController, &PixelEnvConfig::default(), &VariationMode::ALL, 0, 0).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn random_controller_matches_independent_estimate() {
        let mut env_cfg = PixelEnvConfig::default();
        env_cfg.width = 16;
        env_cfg.height = 16;
        let r = evaluate(&RandomController, &env_cfg, &[VariationMode::None], 200, 3).unwrap();
        let est = &r[0];
        assert_eq!(est.returns.len(), 200);
        // independent Monte Carlo with unrelated streams
        let mut rng = Rng::new(99, "oracle");
        let mut env = PixelEnv::new(env_cfg.clone(), VisualVariation::none()).unwrap();
        let mut sample = Vec::new();
        for _ in 0..400 {
            env.reset(rng.next_u64());
            let mut total = 0.0;
            loop {
                let a = [rng.uniform_range(-1.0, 1.0) as f32, rng.uniform_range(-1.0, 1.0) as f32];
                let res = env.step(a);
                total += f64::from(res.reward);
                if res.done {
                    break;
                }
            }
            sample.push(total);
        }
        let m = sample.iter().sum::<f64>() / sample.len() as f64;
        let var = sample.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (sample.len() - 1) as f64;
        let se = (var / 400.0 + est.std().powi(2) / 200.0).sqrt();
        assert!((est.mean() - m).abs() < 4.0 * se, "{} vs {m} (se {se})", est.mean());
    }

    #[test]
    fn diagnostics_weak_rows_and_shared_draws() {
        let cfg = tiny(TrainMode::Tlda);
        let agent = train(&cfg, None, "").unwrap().agent;
        let (obs, acts) = collect_observations(&agent, &cfg.env, 12, 0).unwrap();
        assert_eq!(obs.len(), 12);
        let dcfg = DiagConfig {
            samples: 12,
            shift_pad: 2,
            tlda: cfg.tlda,
            chunk: 5,
            ..DiagConfig::default()
        };
        let rows = diagnostics(&agent, &obs, &acts, &dcfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows, diagnostics(&agent, &obs, &acts, &dcfg).unwrap());
        for r in &rows {
            assert!(r.action_shift.is_finite() && r.q_mse.is_finite() && r.q_mse >= 0.0);
        }
        // chunking does not change the result beyond rounding
        let whole = diagnostics(&agent, &obs, &acts, &DiagConfig { chunk: 64, ..dcfg.clone() }).unwrap();
        for (a, b) in rows.iter().zip(&whole) {
            assert!((a.action_shift - b.action_shift).abs() < 1e-6);
            assert!((a.q_mse - b.q_mse).abs() < 1e-6 * (1.0 + b.q_mse));
        }
        // a zero-pad weak shift is the identity
        let none = diagnostics(&agent, &obs, &acts, &DiagConfig { shift_pad: 0, ..dcfg }).unwrap();
        assert_eq!(none[0].action_shift, 0.0);
        assert_eq!(none[0].q_mse, 0.0);
    }
}
