//! Clipped-surrogate policy optimization with generalized advantage
//! estimation.
//!
//! The update consumes a [`SampleBatch`] whose rewards may be either true
//! environment rewards (expert training) or discriminator-derived surrogate
//! rewards (imitation). Policies and value functions are abstracted behind
//! [`PolicyModel`] / [`ValueModel`] so the same update drives both the
//! Gaussian MLP used on continuous tasks and the softmax table used on the
//! gridworld.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{self, Environment, Trajectory};
use crate::error::{Error, Result};
use crate::neural::{check_finite, clip_grad_norm, Adam, Container, GaussianPolicyHead, Mlp};

/// Hyperparameters of one PPO update cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    /// Transitions collected per environment per iteration.
    pub batch_size: usize,
    pub policy_epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            policy_epochs: 4,
            minibatch: 64,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            entropy_coef: 0.0,
            value_coef: 0.5,
            policy_lr: 3e-4,
            value_lr: 3e-4,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::InvalidSpec(format!("clip {} outside (0,1)", self.clip)));
        }
        if self.policy_epochs == 0 || self.minibatch == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSpec("epochs/minibatch/batch must be ≥ 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidSpec(format!("discount {} outside (0,1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::InvalidSpec(format!(
                "gae lambda {} outside [0,1]",
                self.gae_lambda
            )));
        }
        Ok(())
    }
}

/// Flat per-step storage for one iteration's worth of experience.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBatch {
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Which interaction environment each step came from.
    pub env_index: Vec<usize>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::InvalidSpec("empty sample batch".into()));
        }
        let ok = self.states.len() == n * self.state_dim
            && self.actions.len() == n * self.action_dim
            && self.rewards.len() == n
            && self.values.len() == n
            && self.dones.len() == n
            && self.env_index.len() == n;
        if !ok {
            return Err(Error::InvalidSpec("sample batch field lengths disagree".into()));
        }
        check_finite(&self.rewards, "batch rewards")?;
        check_finite(&self.values, "batch values")?;
        Ok(())
    }

    /// Append another batch (same dims) to this one.
    pub fn extend(&mut self, other: &SampleBatch) {
        if self.is_empty() {
            self.state_dim = other.state_dim;
            self.action_dim = other.action_dim;
        }
        self.states.extend_from_slice(&other.states);
        self.actions.extend_from_slice(&other.actions);
        self.logprobs.extend_from_slice(&other.logprobs);
        self.rewards.extend_from_slice(&other.rewards);
        self.values.extend_from_slice(&other.values);
        self.dones.extend_from_slice(&other.dones);
        self.env_index.extend_from_slice(&other.env_index);
    }
}

/// Raw GAE advantages and discounted-return targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Gae {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Standard GAE recursion, run backwards over each episode segment
/// (`done` flags and environment-index changes both close a segment; a
/// closed segment bootstraps with terminal value 0). Advantages are
/// returned *unnormalized*.
pub fn compute_gae(batch: &SampleBatch, gamma: f64, lambda: f64) -> Result<Gae> {
    batch.validate()?;
    let n = batch.len();
    let mut advantages = vec![0.0; n];
    let mut returns = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let boundary = batch.dones[t]
            || t + 1 == n
            || batch.env_index[t + 1] != batch.env_index[t];
        if boundary {
            next_adv = 0.0;
            next_value = 0.0;
        }
        let delta = batch.rewards[t] + gamma * next_value - batch.values[t];
        next_adv = delta + gamma * lambda * next_adv;
        advantages[t] = next_adv;
        returns[t] = next_adv + batch.values[t];
        next_value = batch.values[t];
    }
    Ok(Gae {
        advantages,
        returns,
    })
}

/// In-place zero-mean / unit-variance normalization. Batches with fewer
/// than two samples are left alone — standardizing a singleton would erase
/// its sign.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.len() < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// A trainable stochastic policy exposed through a flat parameter vector.
pub trait PolicyModel {
    fn action_dim(&self) -> usize;
    fn n_params(&self) -> usize;
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()>;
    /// Sample (or take the mode of) the action distribution at `state`.
    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng, deterministic: bool) -> Result<Vec<f64>>;
    /// Batch log-densities of given actions.
    fn logprobs(&self, states: &[f64], actions: &[f64], n: usize) -> Result<Vec<f64>>;
    /// Gradient of `Σ_b coeff_b·log π(a_b|s_b)` w.r.t. the flat parameters.
    fn weighted_logprob_grad(
        &self,
        states: &[f64],
        actions: &[f64],
        coeff: &[f64],
        n: usize,
    ) -> Result<Vec<f64>>;
    /// Mean entropy of the action distribution over the given states.
    fn entropy_mean(&self, states: &[f64], n: usize) -> Result<f64>;
    /// Gradient of the mean entropy w.r.t. the flat parameters (may be zero
    /// for models whose entropy term is unused).
    fn entropy_grad(&self, states: &[f64], n: usize) -> Result<Vec<f64>>;
}

impl PolicyModel for GaussianPolicyHead {
    fn action_dim(&self) -> usize {
        GaussianPolicyHead::action_dim(self)
    }

    fn n_params(&self) -> usize {
        GaussianPolicyHead::n_params(self)
    }

    fn flat_params(&self) -> Vec<f64> {
        GaussianPolicyHead::flat_params(self)
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        GaussianPolicyHead::set_flat_params(self, flat)
    }

    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng, deterministic: bool) -> Result<Vec<f64>> {
        GaussianPolicyHead::act(self, state, rng, deterministic)
    }

    fn logprobs(&self, states: &[f64], actions: &[f64], n: usize) -> Result<Vec<f64>> {
        GaussianPolicyHead::logprobs(self, states, actions, n)
    }

    fn weighted_logprob_grad(
        &self,
        states: &[f64],
        actions: &[f64],
        coeff: &[f64],
        n: usize,
    ) -> Result<Vec<f64>> {
        GaussianPolicyHead::weighted_logprob_grad(self, states, actions, coeff, n)
    }

    fn entropy_mean(&self, _states: &[f64], _n: usize) -> Result<f64> {
        Ok(self.entropy())
    }

    fn entropy_grad(&self, _states: &[f64], _n: usize) -> Result<Vec<f64>> {
        // Entropy depends only on the log-stds: d/d log_std_k = 1.
        let mut g = vec![0.0; PolicyModel::n_params(self)];
        let off = self.mean.n_params();
        for v in &mut g[off..] {
            *v = 1.0;
        }
        Ok(g)
    }
}

/// How a table-driven model maps state vectors to row indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateIndexer {
    /// `[x, y]` on the 5×5 grid.
    WindyGrid,
    /// `state[0]` cast to an index (synthetic tasks with enumerated states).
    FirstComponent,
}

impl StateIndexer {
    pub fn index(&self, state: &[f64]) -> usize {
        match self {
            Self::WindyGrid => env::windy_grid::state_index(state[0] as usize, state[1] as usize),
            Self::FirstComponent => state[0] as usize,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::WindyGrid => "windy-grid",
            Self::FirstComponent => "first-component",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "windy-grid" => Ok(Self::WindyGrid),
            "first-component" => Ok(Self::FirstComponent),
            other => Err(Error::Format(format!("unknown state indexer {other:?}"))),
        }
    }
}

/// Tabular softmax policy over discrete actions; the parameters are the
/// logits themselves. `state_dim` is the width of one state in a flat
/// batch, which the indexer may only partially consume.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxTablePolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub indexer: StateIndexer,
    pub state_dim: usize,
    logits: Vec<f64>,
}

impl SoftmaxTablePolicy {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        indexer: StateIndexer,
        state_dim: usize,
    ) -> Self {
        Self {
            n_states,
            n_actions,
            indexer,
            state_dim,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        let row = &self.logits[s * self.n_actions..(s + 1) * self.n_actions];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn save_into(&self, c: &mut Container, prefix: &str) {
        c.put_u64(
            &format!("{prefix}.shape"),
            vec![
                self.n_states as u64,
                self.n_actions as u64,
                self.state_dim as u64,
            ],
        );
        c.put_str(&format!("{prefix}.indexer"), self.indexer.name());
        c.put_f64(
            &format!("{prefix}.logits"),
            vec![self.logits.len() as u64],
            self.logits.clone(),
        );
    }

    pub fn load_from(c: &Container, prefix: &str) -> Result<Self> {
        let shape = c.u64(&format!("{prefix}.shape"))?;
        let indexer = StateIndexer::parse(c.str(&format!("{prefix}.indexer"))?)?;
        let (_, logits) = c.f64(&format!("{prefix}.logits"))?;
        if shape.len() != 3 || logits.len() != (shape[0] * shape[1]) as usize {
            return Err(Error::Format(format!("bad policy table in {prefix:?}")));
        }
        Ok(Self {
            n_states: shape[0] as usize,
            n_actions: shape[1] as usize,
            indexer,
            state_dim: shape[2] as usize,
            logits: logits.to_vec(),
        })
    }
}

impl PolicyModel for SoftmaxTablePolicy {
    fn action_dim(&self) -> usize {
        1
    }

    fn n_params(&self) -> usize {
        self.logits.len()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.logits.clone()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.logits.len() {
            return Err(Error::DimMismatch {
                what: "table policy parameters",
                expected: self.logits.len(),
                got: flat.len(),
            });
        }
        self.logits.copy_from_slice(flat);
        Ok(())
    }

    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng, deterministic: bool) -> Result<Vec<f64>> {
        let s = self.indexer.index(state);
        let probs = self.probs(s);
        let a = if deterministic {
            probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = self.n_actions - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        Ok(vec![a as f64])
    }

    fn logprobs(&self, states: &[f64], actions: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let s = self.indexer.index(&states[i * self.state_dim..]);
            let a = actions[i] as usize;
            if a >= self.n_actions {
                return Err(Error::InvalidSpec(format!("action index {a} out of range")));
            }
            out.push(self.probs(s)[a].max(1e-300).ln());
        }
        Ok(out)
    }

    fn weighted_logprob_grad(
        &self,
        states: &[f64],
        actions: &[f64],
        coeff: &[f64],
        n: usize,
    ) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.logits.len()];
        for i in 0..n {
            let s = self.indexer.index(&states[i * self.state_dim..]);
            let a = actions[i] as usize;
            let probs = self.probs(s);
            for (k, &p) in probs.iter().enumerate() {
                let ind = if k == a { 1.0 } else { 0.0 };
                grad[s * self.n_actions + k] += coeff[i] * (ind - p);
            }
        }
        Ok(grad)
    }

    fn entropy_mean(&self, states: &[f64], n: usize) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..n {
            let s = self.indexer.index(&states[i * self.state_dim..]);
            total -= self
                .probs(s)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>();
        }
        Ok(total / n as f64)
    }

    fn entropy_grad(&self, states: &[f64], n: usize) -> Result<Vec<f64>> {
        // dH/d logit_k = −p_k (log p_k + 1)·... assembled per visited state.
        let mut grad = vec![0.0; self.logits.len()];
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let s = self.indexer.index(&states[i * self.state_dim..]);
            let probs = self.probs(s);
            let h: f64 = -probs.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>();
            for (k, &p) in probs.iter().enumerate() {
                grad[s * self.n_actions + k] += inv_n * p * (-(p.max(1e-300).ln()) - h);
            }
        }
        Ok(grad)
    }
}

/// Value-function abstraction mirroring [`PolicyModel`].
pub trait ValueModel {
    fn n_params(&self) -> usize;
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()>;
    fn values(&self, states: &[f64], n: usize) -> Result<Vec<f64>>;
    /// Gradient of `scale·mean_b (V(s_b) − target_b)²`.
    fn mse_grad(&self, states: &[f64], targets: &[f64], n: usize, scale: f64) -> Result<Vec<f64>>;
}

impl ValueModel for Mlp {
    fn n_params(&self) -> usize {
        Mlp::n_params(self)
    }

    fn flat_params(&self) -> Vec<f64> {
        self.params().to_vec()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != Mlp::n_params(self) {
            return Err(Error::DimMismatch {
                what: "value parameters",
                expected: Mlp::n_params(self),
                got: flat.len(),
            });
        }
        self.params_mut().copy_from_slice(flat);
        Ok(())
    }

    fn values(&self, states: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.forward(states, n)?.0)
    }

    fn mse_grad(&self, states: &[f64], targets: &[f64], n: usize, scale: f64) -> Result<Vec<f64>> {
        let (v, tape) = self.forward(states, n)?;
        let upstream: Vec<f64> = v
            .iter()
            .zip(targets)
            .map(|(&vi, &t)| scale * 2.0 * (vi - t) / n as f64)
            .collect();
        self.param_grad(&tape, &upstream)
    }
}

/// Table of state values for discrete tasks. `state_dim` mirrors
/// [`SoftmaxTablePolicy::state_dim`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub indexer: StateIndexer,
    pub state_dim: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn new(n_states: usize, indexer: StateIndexer, state_dim: usize) -> Self {
        Self {
            indexer,
            state_dim,
            values: vec![0.0; n_states],
        }
    }

    pub fn save_into(&self, c: &mut Container, prefix: &str) {
        c.put_str(&format!("{prefix}.indexer"), self.indexer.name());
        c.put_u64(&format!("{prefix}.state_dim"), vec![self.state_dim as u64]);
        c.put_f64(
            &format!("{prefix}.values"),
            vec![self.values.len() as u64],
            self.values.clone(),
        );
    }

    pub fn load_from(c: &Container, prefix: &str) -> Result<Self> {
        let indexer = StateIndexer::parse(c.str(&format!("{prefix}.indexer"))?)?;
        let state_dim = c.u64(&format!("{prefix}.state_dim"))?[0] as usize;
        let (_, values) = c.f64(&format!("{prefix}.values"))?;
        Ok(Self {
            indexer,
            state_dim,
            values: values.to_vec(),
        })
    }
}

impl ValueModel for ValueTable {
    fn n_params(&self) -> usize {
        self.values.len()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.values.clone()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.values.len() {
            return Err(Error::DimMismatch {
                what: "value table",
                expected: self.values.len(),
                got: flat.len(),
            });
        }
        self.values.copy_from_slice(flat);
        Ok(())
    }

    fn values(&self, states: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok((0..n)
            .map(|i| self.values[self.indexer.index(&states[i * self.state_dim..])])
            .collect())
    }

    fn mse_grad(&self, states: &[f64], targets: &[f64], n: usize, scale: f64) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.values.len()];
        for i in 0..n {
            let s = self.indexer.index(&states[i * self.state_dim..]);
            grad[s] += scale * 2.0 * (self.values[s] - targets[i]) / n as f64;
        }
        Ok(grad)
    }
}

/// Statistics from one [`ppo_update`] call.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub entropy: f64,
}

/// One PPO update: `policy_epochs` shuffled minibatch passes of clipped
/// surrogate ascent plus value regression. A non-finite loss or gradient
/// aborts the whole update and restores the pre-update parameters.
pub fn ppo_update<P: PolicyModel, V: ValueModel>(
    policy: &mut P,
    value: &mut V,
    policy_opt: &mut Adam,
    value_opt: &mut Adam,
    batch: &SampleBatch,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    cfg.validate()?;
    let gae = compute_gae(batch, cfg.gamma, cfg.gae_lambda)?;
    let mut advantages = gae.advantages;
    normalize_advantages(&mut advantages);
    let returns = gae.returns;

    let policy_snapshot = policy.flat_params();
    let value_snapshot = value.flat_params();
    let opt_snapshot = (policy_opt.clone_state(), value_opt.clone_state());

    match ppo_update_inner(
        policy, value, policy_opt, value_opt, batch, cfg, rng, &advantages, &returns,
    ) {
        Ok(stats) => Ok(stats),
        Err(err) => {
            policy.set_flat_params(&policy_snapshot)?;
            value.set_flat_params(&value_snapshot)?;
            policy_opt.restore_state(opt_snapshot.0)?;
            value_opt.restore_state(opt_snapshot.1)?;
            Err(Error::NumericalAbort(format!(
                "policy update rolled back: {err}"
            )))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn ppo_update_inner<P: PolicyModel, V: ValueModel>(
    policy: &mut P,
    value: &mut V,
    policy_opt: &mut Adam,
    value_opt: &mut Adam,
    batch: &SampleBatch,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
    advantages: &[f64],
    returns: &[f64],
) -> Result<UpdateStats> {
    let n = batch.len();
    let (sd, ad) = (batch.state_dim, batch.action_dim);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut minibatches = 0usize;

    for _ in 0..cfg.policy_epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.minibatch) {
            let m = chunk.len();
            let mut states = Vec::with_capacity(m * sd);
            let mut actions = Vec::with_capacity(m * ad);
            let mut lp_old = Vec::with_capacity(m);
            let mut adv = Vec::with_capacity(m);
            let mut ret = Vec::with_capacity(m);
            for &i in chunk {
                states.extend_from_slice(batch.state(i));
                actions.extend_from_slice(batch.action(i));
                lp_old.push(batch.logprobs[i]);
                adv.push(advantages[i]);
                ret.push(returns[i]);
            }

            let lp_new = policy.logprobs(&states, &actions, m)?;
            let mut coeff = vec![0.0; m];
            let mut policy_loss = 0.0;
            let mut clipped = 0usize;
            let mut kl = 0.0;
            for b in 0..m {
                let ratio = (lp_new[b] - lp_old[b]).exp();
                let unclipped = ratio * adv[b];
                let clipped_obj = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv[b];
                policy_loss -= unclipped.min(clipped_obj) / m as f64;
                kl += (lp_old[b] - lp_new[b]) / m as f64;
                if (ratio - 1.0).abs() > cfg.clip {
                    clipped += 1;
                }
                // The surrogate's gradient flows only through the
                // unclipped branch.
                let active = if adv[b] >= 0.0 {
                    ratio <= 1.0 + cfg.clip
                } else {
                    ratio >= 1.0 - cfg.clip
                };
                if active {
                    coeff[b] = -ratio * adv[b] / m as f64;
                }
            }
            if !policy_loss.is_finite() || !kl.is_finite() {
                return Err(Error::NonFinite("ppo surrogate loss".into()));
            }

            let mut pgrad = policy.weighted_logprob_grad(&states, &actions, &coeff, m)?;
            if cfg.entropy_coef != 0.0 {
                let egrad = policy.entropy_grad(&states, m)?;
                for (g, e) in pgrad.iter_mut().zip(&egrad) {
                    *g -= cfg.entropy_coef * e;
                }
            }
            clip_grad_norm(&mut pgrad, cfg.max_grad_norm);
            let mut params = policy.flat_params();
            policy_opt.step(&mut params, &pgrad)?;
            policy.set_flat_params(&params)?;

            let v_pred = value.values(&states, m)?;
            let value_loss: f64 = cfg.value_coef
                * v_pred
                    .iter()
                    .zip(&ret)
                    .map(|(&v, &r)| (v - r) * (v - r))
                    .sum::<f64>()
                / m as f64;
            if !value_loss.is_finite() {
                return Err(Error::NonFinite("value regression loss".into()));
            }
            let mut vgrad = value.mse_grad(&states, &ret, m, cfg.value_coef)?;
            clip_grad_norm(&mut vgrad, cfg.max_grad_norm);
            let mut vparams = value.flat_params();
            value_opt.step(&mut vparams, &vgrad)?;
            value.set_flat_params(&vparams)?;

            stats.policy_loss += policy_loss;
            stats.value_loss += value_loss;
            stats.clip_fraction += clipped as f64 / m as f64;
            stats.approx_kl += kl;
            minibatches += 1;
        }
    }
    stats.entropy = policy.entropy_mean(&batch.states, n)?;
    let scale = 1.0 / minibatches.max(1) as f64;
    stats.policy_loss *= scale;
    stats.value_loss *= scale;
    stats.clip_fraction *= scale;
    stats.approx_kl *= scale;
    Ok(stats)
}

impl Adam {
    fn clone_state(&self) -> (Vec<f64>, Vec<f64>, u64) {
        let (m, v, t) = self.state();
        (m.to_vec(), v.to_vec(), t)
    }

    fn restore_state(&mut self, s: (Vec<f64>, Vec<f64>, u64)) -> Result<()> {
        self.restore(s.0, s.1, s.2)
    }
}

/// Roll out whole episodes until `n_steps` transitions are collected,
/// recording everything a PPO update needs. Rewards are the environment's
/// true rewards; imitation callers overwrite them with surrogate values
/// before updating. Also returns the raw trajectories (for discriminator
/// features and logging).
pub fn collect_batch<P: PolicyModel, V: ValueModel>(
    environment: &mut Environment,
    policy: &P,
    value: &V,
    n_steps: usize,
    env_index: usize,
    action_rng: &mut ChaCha8Rng,
) -> Result<(SampleBatch, Vec<Trajectory>)> {
    let spec = environment.spec().clone();
    let mut batch = SampleBatch {
        state_dim: spec.state_dim(),
        action_dim: spec.action_dim(),
        ..SampleBatch::default()
    };
    let mut trajectories = Vec::new();
    while batch.len() < n_steps {
        let mut state = environment.reset();
        let mut steps = Vec::with_capacity(spec.horizon);
        loop {
            let action = policy.act(&state, action_rng, false)?;
            let lp = policy.logprobs(&state, &action, 1)?[0];
            let tr = environment.step(&action)?;
            batch.states.extend_from_slice(&state);
            batch.actions.extend_from_slice(&action);
            batch.logprobs.push(lp);
            batch.rewards.push(tr.reward);
            batch.dones.push(tr.done);
            batch.env_index.push(env_index);
            state = tr.next_state.clone();
            let done = tr.done;
            steps.push(tr);
            if done {
                break;
            }
        }
        trajectories.push(Trajectory {
            env_id: env_index,
            dynamics: spec.dynamics.clone(),
            steps,
        });
    }
    batch.values = value.values(&batch.states, batch.len())?;
    Ok((batch, trajectories))
}
