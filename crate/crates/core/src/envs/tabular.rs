//! Finite MDPs with exact dynamic-programming oracles (all `f64`).

use crate::error::{bail, Result};
use crate::rng::Rng;

const ROW_TOL: f64 = 1e-12;

fn check_distribution(row: &[f64], tol: f64, what: &str) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        bail!(InvalidArgument, "{what} has a negative or non-finite entry");
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > tol {
        bail!(InvalidArgument, "{what} sums to {s}, not 1");
    }
    Ok(())
}

fn dirichlet_row(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| rng.exponential()).collect();
    normalize(&mut row);
    row
}

/// Rescales to sum 1, then folds the rounding residue into the largest entry.
fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= s);
    let resid = 1.0 - row.iter().sum::<f64>();
    if let Some(m) = row
        .iter_mut()
        .max_by(|a, b| a.partial_cmp(b).unwrap())
    {
        *m += resid;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    gamma: f64,
    initial_state: usize,
}

impl TabularMdp {
    /// `transitions` is `P[s][a][s']` flattened, `rewards` is `r[s][a]` flattened.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
        initial_state: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            bail!(InvalidArgument, "an MDP needs at least one state and one action");
        }
        if transitions.len() != n_states * n_actions * n_states || rewards.len() != n_states * n_actions {
            bail!(Shape, "transition or reward table has the wrong size");
        }
        if !(0.0..1.0).contains(&gamma) {
            bail!(InvalidArgument, "discount must lie in [0, 1), got {gamma}");
        }
        if initial_state >= n_states {
            bail!(InvalidArgument, "initial state {initial_state} out of range");
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            bail!(NonFinite, "rewards must be finite");
        }
        for (i, row) in transitions.chunks_exact(n_states).enumerate() {
            check_distribution(row, ROW_TOL, &format!("P[{}][{}]", i / n_actions, i % n_actions))?;
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
            initial_state,
        })
    }

    /// Dirichlet(1, ..., 1) transition rows and rewards uniform in `[-1, 1]`.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, rng: &mut Rng) -> Result<Self> {
        let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transitions.extend(dirichlet_row(n_states, rng));
        }
        let rewards = (0..n_states * n_actions)
            .map(|_| rng.uniform_range(-1.0, 1.0))
            .collect();
        Self::new(n_states, n_actions, transitions, rewards, gamma, 0)
    }

    /// Deterministic chain `s -> s + 1` (the last state loops), same for every action.
    pub fn chain(n_states: usize, n_actions: usize, rewards: Vec<f64>, gamma: f64) -> Result<Self> {
        let mut transitions = vec![0.0; n_states * n_actions * n_states];
        for s in 0..n_states {
            let next = (s + 1).min(n_states - 1);
            for a in 0..n_actions {
                transitions[(s * n_actions + a) * n_states + next] = 1.0;
            }
        }
        Self::new(n_states, n_actions, transitions, rewards, gamma, 0)
    }

    /// Mixes every transition row with a fresh Dirichlet row:
    /// `(1 - weight) P + weight D`, renormalized.
    pub fn perturbed(&self, weight: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            bail!(InvalidArgument, "mixing weight must lie in [0, 1]");
        }
        let n = self.n_states;
        let mut transitions = self.transitions.clone();
        for row in transitions.chunks_exact_mut(n) {
            let d = dirichlet_row(n, rng);
            for (p, q) in row.iter_mut().zip(d) {
                *p = (1.0 - weight) * *p + weight * q;
            }
            normalize(row);
        }
        Self::new(n, self.n_actions, transitions, self.rewards.clone(), self.gamma, self.initial_state)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states;
        let i = (s * self.n_actions + a) * n;
        &self.transitions[i..i + n]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// `max |r(s, a)|`.
    pub fn r_max(&self) -> f64 {
        self.rewards.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Samples `s'` from `P[s][a]`.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut Rng) -> usize {
        sample_index(self.transition(s, a), rng)
    }
}

fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Stochastic policy `π(a | s)` over a finite MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions || n_actions == 0 {
            bail!(Shape, "policy table must be {n_states} x {n_actions}");
        }
        for (s, row) in probs.chunks_exact(n_actions).enumerate() {
            check_distribution(row, 1e-9, &format!("pi(.|{s})"))?;
        }
        Ok(Self { n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn random(n_states: usize, n_actions: usize, rng: &mut Rng) -> Self {
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            probs.extend(dirichlet_row(n_actions, rng));
        }
        Self { n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn sample(&self, s: usize, rng: &mut Rng) -> usize {
        sample_index(self.row(s), rng)
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states() != mdp.n_states || self.n_actions != mdp.n_actions {
            bail!(Shape, "policy and MDP disagree on state/action counts");
        }
        Ok(())
    }
}

/// A map `φ` on states together with the distances `d(φ(s), s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMap {
    map: Vec<usize>,
    distances: Vec<f64>,
}

impl StateMap {
    pub fn new(map: Vec<usize>, distances: Vec<f64>) -> Result<Self> {
        let n = map.len();
        if distances.len() != n {
            bail!(Shape, "state map and distance table lengths differ");
        }
        if map.iter().any(|&t| t >= n) {
            bail!(InvalidArgument, "state map points outside the state space");
        }
        if distances.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            bail!(InvalidArgument, "distances must be finite and non-negative");
        }
        Ok(Self { map, distances })
    }

    /// Default distances: 1 where `φ(s) != s`, 0 otherwise.
    pub fn with_unit_distances(map: Vec<usize>) -> Result<Self> {
        let distances = map
            .iter()
            .enumerate()
            .map(|(s, &t)| if s == t { 0.0 } else { 1.0 })
            .collect();
        Self::new(map, distances)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).collect(),
            distances: vec![0.0; n],
        }
    }

    /// Uniformly random `φ`; distances uniform in `[d_lo, d_hi]` off the fixed points.
    pub fn random(n: usize, d_lo: f64, d_hi: f64, rng: &mut Rng) -> Result<Self> {
        let map: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
        let distances = map
            .iter()
            .enumerate()
            .map(|(s, &t)| if s == t { 0.0 } else { rng.uniform_range(d_lo, d_hi) })
            .collect();
        Self::new(map, distances)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn apply(&self, s: usize) -> usize {
        self.map[s]
    }

    pub fn distance(&self, s: usize) -> f64 {
        self.distances[s]
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    /// `‖d(φ)‖∞ = max_s d(φ(s), s)`.
    pub fn sup_distance(&self) -> f64 {
        self.distances.iter().fold(0.0, |m, &d| m.max(d))
    }
}

/// `Q^π(s, a)` table.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Iterates the policy-evaluation operator until the a-posteriori error bound
/// `γ/(1-γ) ‖Q_{k+1} - Q_k‖∞` drops below `tol`.
pub fn exact_q(mdp: &TabularMdp, policy: &TabularPolicy, tol: f64) -> Result<QTable> {
    policy.check_against(mdp)?;
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    if !(g < 1.0) {
        bail!(InvalidArgument, "policy evaluation needs gamma < 1");
    }
    let mut q = vec![0.0; ns * na];
    let mut v = vec![0.0; ns];
    for _ in 0..10_000_000usize {
        for (s, vs) in v.iter_mut().enumerate() {
            *vs = policy.row(s).iter().zip(&q[s * na..(s + 1) * na]).map(|(p, q)| p * q).sum();
        }
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let next: f64 = mdp.transition(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
                let nq = mdp.reward(s, a) + g * next;
                delta = delta.max((nq - q[s * na + a]).abs());
                q[s * na + a] = nq;
            }
        }
        if delta * g / (1.0 - g) < tol || delta == 0.0 {
            return Ok(QTable { n_actions: na, values: q });
        }
    }
    bail!(State, "policy evaluation did not converge")
}

fn step_distribution(mdp: &TabularMdp, policy: &TabularPolicy, p: &[f64]) -> Vec<f64> {
    let ns = mdp.n_states;
    let mut next = vec![0.0; ns];
    for (s, &ps) in p.iter().enumerate() {
        if ps == 0.0 {
            continue;
        }
        for (a, &pa) in policy.row(s).iter().enumerate() {
            let w = ps * pa;
            if w == 0.0 {
                continue;
            }
            for (n, &t) in next.iter_mut().zip(mdp.transition(s, a)) {
                *n += w * t;
            }
        }
    }
    next
}

/// State distributions `p^0 .. p^T` under `π` from `start_state`.
pub fn visitation_probs(mdp: &TabularMdp, policy: &TabularPolicy, start_state: usize, horizon: usize) -> Result<Vec<Vec<f64>>> {
    policy.check_against(mdp)?;
    if start_state >= mdp.n_states {
        bail!(InvalidArgument, "start state {start_state} out of range");
    }
    let mut p = vec![0.0; mdp.n_states];
    p[start_state] = 1.0;
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(p);
    for _ in 0..horizon {
        let next = step_distribution(mdp, policy, out.last().unwrap());
        out.push(next);
    }
    Ok(out)
}

/// Like [`visitation_probs`] but with the first action fixed to `action`
/// (the process underlying `Q^π(s, a)`).
pub fn visitation_from_pair(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    start_state: usize,
    action: usize,
    horizon: usize,
) -> Result<Vec<Vec<f64>>> {
    policy.check_against(mdp)?;
    if start_state >= mdp.n_states || action >= mdp.n_actions {
        bail!(InvalidArgument, "state/action pair out of range");
    }
    let mut p0 = vec![0.0; mdp.n_states];
    p0[start_state] = 1.0;
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(p0);
    if horizon >= 1 {
        out.push(mdp.transition(start_state, action).to_vec());
    }
    while out.len() < horizon + 1 {
        let next = step_distribution(mdp, policy, out.last().unwrap());
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_series() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![1.0], 0.99, 0).unwrap();
        let q = exact_q(&mdp, &TabularPolicy::uniform(1, 1), 1e-10).unwrap();
        assert!((q.get(0, 0) - 100.0).abs() < 1e-8);
    }

    #[test]
    fn zero_reward_zero_q() {
        let mut rng = Rng::new(1, "t");
        let mut mdp = TabularMdp::random(4, 3, 0.9, &mut rng).unwrap();
        mdp.rewards.iter_mut().for_each(|r| *r = 0.0);
        let q = exact_q(&mdp, &TabularPolicy::random(4, 3, &mut rng), 1e-10).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(TabularMdp::new(1, 1, vec![0.9], vec![0.0], 0.5, 0).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], 1.0, 0).is_err());
        assert!(TabularPolicy::new(1, 2, vec![0.7, 0.7]).is_err());
        assert!(StateMap::new(vec![0, 5], vec![0.0, 1.0]).is_err());
        assert!(StateMap::new(vec![0, 1], vec![0.0, -1.0]).is_err());
    }

    #[test]
    fn exact_q_matches_monte_carlo() {
        let mut rng = Rng::new(7, "mc");
        let mdp = TabularMdp::random(4, 2, 0.8, &mut rng).unwrap();
        let pi = TabularPolicy::random(4, 2, &mut rng);
        let q = exact_q(&mdp, &pi, 1e-12).unwrap();
        // truncated rollouts; γ^80 / (1 - γ) is far below the sampling error
        let (n, horizon) = (100_000, 80);
        for (s, a) in [(0, 0), (2, 1), (3, 0)] {
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..n {
                let (mut st, mut ac, mut disc, mut ret) = (s, a, 1.0, 0.0);
                for _ in 0..horizon {
                    ret += disc * mdp.reward(st, ac);
                    disc *= mdp.gamma();
                    st = mdp.sample_next(st, ac, &mut rng);
                    ac = pi.sample(st, &mut rng);
                }
                sum += ret;
                sq += ret * ret;
            }
            let mean = sum / n as f64;
            let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
            assert!((mean - q.get(s, a)).abs() < 3.0 * se + 1e-9, "{mean} vs {} (se {se})", q.get(s, a));
        }
    }

    #[test]
    fn visitation_matches_sampled_frequencies() {
        let mut rng = Rng::new(8, "mc");
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::random(5, 3, &mut rng);
        let p = visitation_from_pair(&mdp, &pi, 1, 2, 4).unwrap();
        let n = 100_000;
        let mut counts = vec![[0usize; 5]; 5];
        for _ in 0..n {
            let (mut s, mut a) = (1, 2);
            counts[0][s] += 1;
            for row in counts.iter_mut().skip(1) {
                s = mdp.sample_next(s, a, &mut rng);
                a = pi.sample(s, &mut rng);
                row[s] += 1;
            }
        }
        for t in 0..5 {
            for s in 0..5 {
                let f = counts[t][s] as f64 / n as f64;
                let se = (p[t][s] * (1.0 - p[t][s]) / n as f64).sqrt();
                assert!((f - p[t][s]).abs() <= 4.0 * se + 1e-12, "t={t} s={s}: {f} vs {}", p[t][s]);
            }
        }
    }

    #[test]
    fn chain_marches() {
        let mdp = TabularMdp::chain(5, 2, vec![0.0; 10], 0.9).unwrap();
        let p = visitation_probs(&mdp, &TabularPolicy::uniform(5, 2), 0, 6).unwrap();
        assert_eq!(p[0], vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        for t in 0..5 {
            assert_eq!(p[t][t], 1.0);
        }
        assert_eq!(p[6][4], 1.0);
    }

    #[test]
    fn visitation_rows_normalized() {
        let mut rng = Rng::new(5, "t");
        let mdp = TabularMdp::random(7, 3, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::random(7, 3, &mut rng);
        for p in visitation_probs(&mdp, &pi, 2, 50).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_keeps_rows_normalized() {
        let mut rng = Rng::new(9, "t");
        let mdp = TabularMdp::random(6, 2, 0.9, &mut rng).unwrap();
        for w in [0.0, 0.3, 1.0] {
            let p = mdp.perturbed(w, &mut rng).unwrap();
            for s in 0..6 {
                for a in 0..2 {
                    assert!((p.transition(s, a).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}
