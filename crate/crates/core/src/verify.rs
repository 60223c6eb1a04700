//! Exact checks of the value-gap bounds under a state map on tabular MDPs.
//!
//! For a policy `π`, a map `φ` with distances `d(φ(s), s)` and every pair
//! `(s, a)` the gap `|Q(s, a) - Q(φ(s), a)|` is compared against
//!
//! * the coarse bound `2 r_max (K ‖d‖∞ + 1) / (1 - γ)`, and
//! * the fine bound `2 r_max Σ_{t ≤ T} γ^t (L + TV(p_φ^t, p^t))` plus the
//!   truncation allowance `2 r_max γ^{T+1} / (1 - γ)`,
//!
//! where `K` is the policy's Lipschitz constant under `φ`,
//! `L = max_s TV(π(·|φ(s)), π(·|s))`, and `p^t`, `p_φ^t` are the state
//! distributions at step `t` of the processes started from `(s, a)` and
//! `(φ(s), a)`.

use crate::envs::{exact_q, visitation_from_pair, StateMap, TabularMdp, TabularPolicy};
use crate::error::{bail, Result};
use crate::exec::Exec;
use crate::rng::Rng;

/// Tolerance on probability vectors passed to [`tv_distance`].
pub const PROB_TOL: f64 = 1e-9;
/// Accuracy of the exact value tables.
pub const DP_TOL: f64 = 1e-10;
/// Slack granted to each inequality for floating-point rounding.
pub const ROUNDING: f64 = 1e-9;

/// `½ Σ |p - q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        bail!(Shape, "distributions differ in length: {} vs {}", p.len(), q.len());
    }
    for (name, v) in [("P", p), ("Q", q)] {
        let s: f64 = v.iter().sum();
        if v.iter().any(|x| !(*x >= -PROB_TOL)) || (s - 1.0).abs() > PROB_TOL {
            bail!(InvalidArgument, "{name} is not a probability vector (sum {s})");
        }
    }
    let tv = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(tv.clamp(0.0, 1.0))
}

/// `max_s TV(π(·|φ(s)), π(·|s))`.
pub fn policy_shift(policy: &TabularPolicy, map: &StateMap) -> Result<f64> {
    check_sizes(policy, map)?;
    let mut m: f64 = 0.0;
    for s in 0..map.len() {
        m = m.max(tv_distance(policy.row(map.apply(s)), policy.row(s))?);
    }
    Ok(m)
}

fn check_sizes(policy: &TabularPolicy, map: &StateMap) -> Result<()> {
    if policy.n_states() != map.len() {
        bail!(Shape, "policy has {} states, map has {}", policy.n_states(), map.len());
    }
    Ok(())
}

/// `sup_s TV(π(·|φ(s)), π(·|s)) / d(φ(s), s)`; `0/0` counts as 0 and a
/// positive numerator over a zero distance gives `f64::INFINITY`.
pub fn policy_lipschitz(policy: &TabularPolicy, map: &StateMap) -> Result<f64> {
    check_sizes(policy, map)?;
    let mut k: f64 = 0.0;
    for s in 0..map.len() {
        let tv = tv_distance(policy.row(map.apply(s)), policy.row(s))?;
        let d = map.distance(s);
        let ratio = if tv == 0.0 {
            0.0
        } else if d == 0.0 {
            f64::INFINITY
        } else {
            tv / d
        };
        k = k.max(ratio);
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftBoundReport {
    /// `max_s TV(π(·|φ(s)), π(·|s))`.
    pub lhs: f64,
    /// `K ‖d‖∞`.
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

pub fn check_shift_bound(policy: &TabularPolicy, map: &StateMap) -> Result<ShiftBoundReport> {
    let k = policy_lipschitz(policy, map)?;
    if !k.is_finite() {
        bail!(InvalidArgument, "policy Lipschitz constant is unbounded under this map");
    }
    let lhs = policy_shift(policy, map)?;
    let rhs = k * map.sup_distance();
    Ok(ShiftBoundReport {
        lhs,
        rhs,
        slack: rhs - lhs,
        holds: lhs <= rhs + ROUNDING,
    })
}

/// Smallest `T` with `γ^{T+1} / (1 - γ) < 1e-8`.
pub fn default_horizon(gamma: f64) -> usize {
    let mut t = 0usize;
    let mut g = gamma;
    while g / (1.0 - gamma) >= 1e-8 {
        g *= gamma;
        t += 1;
    }
    t
}

/// Everything measured for one `(MDP, π, φ)` instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub k_pi: f64,
    pub sup_distance: f64,
    pub horizon: usize,
    /// `2 r_max γ^{T+1} / (1 - γ)`.
    pub truncation: f64,
    pub shift_bound: ShiftBoundReport,
    /// `|Q(s, a) - Q(φ(s), a)|`, indexed `s * n_actions + a`.
    pub lhs: Vec<f64>,
    /// Coarse bound, the same for every pair.
    pub coarse_rhs: f64,
    /// Fine bound without the truncation allowance, per pair.
    pub fine_rhs: Vec<f64>,
    /// Policy-shift contribution `2 r_max Σ γ^t L` (same for every pair).
    pub fine_policy_term: f64,
    /// Distribution-shift contribution `2 r_max Σ γ^t TV(p_φ^t, p^t)`, per pair.
    pub fine_visitation_term: Vec<f64>,
}

impl BoundReport {
    pub fn lhs_max(&self) -> f64 {
        self.lhs.iter().cloned().fold(0.0, f64::max)
    }

    pub fn coarse_min_slack(&self) -> f64 {
        self.lhs.iter().map(|l| self.coarse_rhs - l).fold(f64::INFINITY, f64::min)
    }

    pub fn fine_min_slack(&self) -> f64 {
        self.lhs
            .iter()
            .zip(&self.fine_rhs)
            .map(|(l, r)| r + self.truncation - l)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn coarse_holds(&self) -> bool {
        self.coarse_min_slack() >= -ROUNDING
    }

    pub fn fine_holds(&self) -> bool {
        self.fine_min_slack() >= -ROUNDING
    }

    /// The fine bound never exceeds the coarse one.
    pub fn ordered(&self) -> bool {
        self.fine_rhs.iter().all(|r| *r <= self.coarse_rhs + ROUNDING)
    }

    pub fn all_finite(&self) -> bool {
        [self.k_pi, self.sup_distance, self.truncation, self.coarse_rhs, self.fine_policy_term]
            .iter()
            .chain(&self.lhs)
            .chain(&self.fine_rhs)
            .chain(&self.fine_visitation_term)
            .all(|v| v.is_finite())
    }

    pub fn holds(&self) -> bool {
        self.shift_bound.holds && self.coarse_holds() && self.fine_holds() && self.ordered() && self.all_finite()
    }
}

fn value_gaps(mdp: &TabularMdp, policy: &TabularPolicy, map: &StateMap) -> Result<Vec<f64>> {
    let q = exact_q(mdp, policy, DP_TOL)?;
    let na = mdp.n_actions();
    Ok((0..mdp.n_states() * na)
        .map(|k| (q.get(k / na, k % na) - q.get(map.apply(k / na), k % na)).abs())
        .collect())
}

fn validate(mdp: &TabularMdp, policy: &TabularPolicy, map: &StateMap) -> Result<()> {
    check_sizes(policy, map)?;
    if mdp.n_states() != map.len() || mdp.n_actions() != policy.n_actions() {
        bail!(Shape, "MDP, policy and map sizes disagree");
    }
    Ok(())
}

/// Gaps against the coarse bound only.
pub fn check_coarse_bound(mdp: &TabularMdp, policy: &TabularPolicy, map: &StateMap) -> Result<(Vec<f64>, f64)> {
    validate(mdp, policy, map)?;
    let k = policy_lipschitz(policy, map)?;
    if !k.is_finite() {
        bail!(InvalidArgument, "policy Lipschitz constant is unbounded under this map");
    }
    let rhs = 2.0 * mdp.r_max() * (k * map.sup_distance() + 1.0) / (1.0 - mdp.gamma());
    Ok((value_gaps(mdp, policy, map)?, rhs))
}

/// Full report at horizon `T` (default [`default_horizon`]).
pub fn check_bounds(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    map: &StateMap,
    horizon: Option<usize>,
) -> Result<BoundReport> {
    let (lhs, coarse_rhs) = check_coarse_bound(mdp, policy, map)?;
    let (g, r_max) = (mdp.gamma(), mdp.r_max());
    let horizon = horizon.unwrap_or_else(|| default_horizon(g));
    let shift_bound = check_shift_bound(policy, map)?;
    let discount_sum: f64 = (0..=horizon).map(|t| g.powi(t as i32)).sum();
    let fine_policy_term = 2.0 * r_max * shift_bound.lhs * discount_sum;
    let na = mdp.n_actions();
    let mut fine_visitation_term = Vec::with_capacity(lhs.len());
    for s in 0..mdp.n_states() {
        for a in 0..na {
            let p = visitation_from_pair(mdp, policy, s, a, horizon)?;
            let pf = visitation_from_pair(mdp, policy, map.apply(s), a, horizon)?;
            let mut acc = 0.0;
            let mut disc = 1.0;
            for t in 0..=horizon {
                acc += disc * tv_distance(&pf[t], &p[t])?;
                disc *= g;
            }
            fine_visitation_term.push(2.0 * r_max * acc);
        }
    }
    let fine_rhs = fine_visitation_term.iter().map(|v| v + fine_policy_term).collect();
    Ok(BoundReport {
        n_states: mdp.n_states(),
        n_actions: na,
        gamma: g,
        r_max,
        k_pi: policy_lipschitz(policy, map)?,
        sup_distance: map.sup_distance(),
        horizon,
        truncation: 2.0 * r_max * g.powi(horizon as i32 + 1) / (1.0 - g),
        shift_bound,
        lhs,
        coarse_rhs,
        fine_rhs,
        fine_policy_term,
        fine_visitation_term,
    })
}

/// Parameters of the random-instance ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    /// Instance `id` uses `gammas[id % gammas.len()]`.
    pub gammas: Vec<f64>,
    pub d_lo: f64,
    pub d_hi: f64,
    pub horizon: Option<usize>,
    /// Replace every sampled state map by the identity.
    pub identity_map: bool,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            max_states: 10,
            max_actions: 4,
            gammas: vec![0.9, 0.99],
            d_lo: 0.5,
            d_hi: 2.0,
            horizon: None,
            identity_map: false,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            bail!(InvalidArgument, "ensemble size must be at least 1");
        }
        if self.max_states < 2 || self.max_actions < 1 {
            bail!(InvalidArgument, "ensemble needs at least 2 states and 1 action");
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(0.0..1.0).contains(g)) {
            bail!(InvalidArgument, "gamma must lie in [0, 1)");
        }
        if !(self.d_lo > 0.0 && self.d_lo <= self.d_hi) {
            bail!(InvalidArgument, "distances need 0 < d_lo <= d_hi");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceReport {
    pub id: usize,
    pub report: BoundReport,
}

/// Instance `id` of the ensemble; depends only on `(cfg.seed, id)`.
pub fn ensemble_instance(cfg: &EnsembleConfig, id: usize) -> Result<(TabularMdp, TabularPolicy, StateMap)> {
    let mut rng = Rng::new(cfg.seed, "verify.ensemble").fork_indexed("instance", id as u64);
    let ns = 2 + rng.below(cfg.max_states - 1);
    let na = 1 + rng.below(cfg.max_actions);
    let mdp = TabularMdp::random(ns, na, cfg.gammas[id % cfg.gammas.len()], &mut rng)?;
    let policy = TabularPolicy::random(ns, na, &mut rng);
    let mut map = StateMap::random(ns, cfg.d_lo, cfg.d_hi, &mut rng)?;
    if cfg.identity_map {
        map = StateMap::identity(ns);
    }
    Ok((mdp, policy, map))
}

/// Plain-text listing of an instance, enough to rebuild it by hand.
pub fn describe_instance(mdp: &TabularMdp, policy: &TabularPolicy, map: &StateMap) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let _ = writeln!(out, "states {ns}\nactions {na}\ngamma {:?}", mdp.gamma());
    for s in 0..ns {
        for a in 0..na {
            let _ = writeln!(out, "P[{s}][{a}] {:?}", mdp.transition(s, a));
            let _ = writeln!(out, "r[{s}][{a}] {:?}", mdp.reward(s, a));
        }
    }
    for s in 0..ns {
        let _ = writeln!(out, "pi[{s}] {:?}", policy.row(s));
    }
    for s in 0..ns {
        let _ = writeln!(out, "phi[{s}] {} d {:?}", map.apply(s), map.distance(s));
    }
    out
}

pub fn run_ensemble(cfg: &EnsembleConfig, exec: Exec) -> Result<Vec<InstanceReport>> {
    cfg.validate()?;
    exec.map_range(cfg.instances, |id| {
        let (mdp, policy, map) = ensemble_instance(cfg, id)?;
        Ok(InstanceReport {
            id,
            report: check_bounds(&mdp, &policy, &map, cfg.horizon)?,
        })
    })
    .into_iter()
    .collect()
}
