//! Soft actor-critic with a sensitivity-aware critic regularizer.

mod nets;
mod replay;
mod sac;
mod train;

pub use nets::{
    actor_backward, actor_objective, concat_batch, critic_backward, critic_objective, new_actor, target_update,
    ActorTerms, Architecture, Critic, CriticPass, CriticTerms, GaussianHead, LogStdBounds, SQUASH_EPS,
};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use sac::{mean_l2, SacAgent, SacConfig, TrainMode, UpdateStats};
pub use train::{
    action_shift, collect_observations, diagnostics, evaluate, save_agent, train, Controller, DiagConfig, DiagMode,
    DiagRow, EpisodeRecord, EvalStats, RandomController, TrainConfig, TrainOutcome, TrainOutputs, METRICS_HEADER,
};
