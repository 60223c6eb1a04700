//! Ring-buffer experience replay with 8-bit observation storage.

use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::pnm::quantize;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Tensor,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_obs: Tensor,
    /// True only for terminal states; time-limit ends still bootstrap.
    pub done: bool,
}

/// A sampled minibatch; observations are `[B, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub obs: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f32>,
    pub next_obs: Tensor,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Stores observations quantized to `u8` (lossless for frames whose values
/// are multiples of 1/255, as the pixel environment renders them).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_shape: Vec<usize>,
    action_dim: usize,
    obs: Vec<Vec<u8>>,
    next_obs: Vec<Vec<u8>>,
    actions: Vec<Vec<f32>>,
    rewards: Vec<f32>,
    dones: Vec<bool>,
    inserted: u64,
}

fn encode(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&v| quantize(v)).collect()
}

fn decode(bytes: &[u8], out: &mut [f32]) {
    for (o, &b) in out.iter_mut().zip(bytes) {
        *o = f32::from(b) / 255.0;
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_shape: &[usize], action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            bail!(InvalidArgument, "replay capacity must be positive");
        }
        Ok(Self {
            capacity,
            obs_shape: obs_shape.to_vec(),
            action_dim,
            obs: Vec::new(),
            next_obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Total insertions, including overwritten ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Slot that the next insertion writes.
    pub fn next_slot(&self) -> usize {
        (self.inserted % self.capacity as u64) as usize
    }

    pub fn push(&mut self, t: &Transition) -> Result<usize> {
        if t.obs.shape() != self.obs_shape.as_slice() || t.next_obs.shape() != self.obs_shape.as_slice() {
            bail!(Shape, "transition observation shape {:?} != {:?}", t.obs.shape(), self.obs_shape);
        }
        if t.action.len() != self.action_dim {
            bail!(Shape, "transition action has {} entries, expected {}", t.action.len(), self.action_dim);
        }
        if !t.reward.is_finite() {
            bail!(NonFinite, "transition reward is {}", t.reward);
        }
        let slot = self.next_slot();
        let (o, n) = (encode(&t.obs), encode(&t.next_obs));
        if slot == self.obs.len() {
            self.obs.push(o);
            self.next_obs.push(n);
            self.actions.push(t.action.clone());
            self.rewards.push(t.reward);
            self.dones.push(t.done);
        } else {
            self.obs[slot] = o;
            self.next_obs[slot] = n;
            self.actions[slot] = t.action.clone();
            self.rewards[slot] = t.reward;
            self.dones[slot] = t.done;
        }
        self.inserted += 1;
        Ok(slot)
    }

    /// `n` slot indices drawn uniformly with replacement from the filled slots.
    pub fn sample_indices(&self, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.is_empty() {
            bail!(State, "cannot sample from an empty replay buffer");
        }
        Ok((0..n).map(|_| rng.below(self.len())).collect())
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let b = indices.len();
        let per: usize = self.obs_shape.iter().product();
        let mut shape = vec![b];
        shape.extend_from_slice(&self.obs_shape);
        let mut obs = Tensor::zeros(&shape);
        let mut next_obs = Tensor::zeros(&shape);
        let mut actions = Tensor::zeros(&[b, self.action_dim]);
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                bail!(InvalidArgument, "replay slot {i} is empty");
            }
            decode(&self.obs[i], &mut obs.data_mut()[k * per..(k + 1) * per]);
            decode(&self.next_obs[i], &mut next_obs.data_mut()[k * per..(k + 1) * per]);
            actions.row_mut(k).copy_from_slice(&self.actions[i]);
        }
        Ok(Batch {
            indices: indices.to_vec(),
            obs,
            actions,
            rewards: indices.iter().map(|&i| self.rewards[i]).collect(),
            next_obs,
            dones: indices.iter().map(|&i| self.dones[i]).collect(),
        })
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Batch> {
        let idx = self.sample_indices(n, rng)?;
        self.gather(&idx)
    }
}
