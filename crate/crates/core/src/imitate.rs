//! Imitation-learning drivers.
//!
//! [`train`] runs the adversarial loop shared by all discriminator-based
//! algorithms: each iteration collects one on-policy batch per interaction
//! environment, brings every discriminator cell up to date, and only then
//! performs the per-environment policy updates. The strict
//! "all discriminators before any policy step" ordering is recorded in an
//! event log so tests (and post-mortems) can verify it. [`bc_train`] is the
//! environment-free baseline: supervised regression on pooled demonstrations.
//!
//! Checkpointing goes through [`TrainState`], which captures every piece of
//! mutable training state — parameters, optimizer moments and RNG positions —
//! so a run split across two processes is bit-identical to an uninterrupted
//! one.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adversary::{
    lfiw_fit, train_cell, train_row_shared, AlgorithmTag, BankMode, DiscStats, DiscTrainConfig,
    DiscriminatorBank, ExpertColumn, RatioEstimator, DEFAULT_KAPPA, DEFAULT_LFIW_TEMPERATURE,
};
use crate::env::{self, make_env, ActionKind, EnvFamily, EnvSpec, Environment, Trajectory};
use crate::error::{Error, Result};
use crate::experts::DemoSet;
use crate::neural::{Adam, Container, GaussianPolicyHead, Mlp};
use crate::par::Parallelism;
use crate::ppo::{
    collect_batch, ppo_update, PolicyModel, PpoConfig, SampleBatch, SoftmaxTablePolicy,
    StateIndexer, UpdateStats, ValueModel, ValueTable,
};
use crate::rng::{self, RngState};

// ---------------------------------------------------------------------------
// Algorithm selection
// ---------------------------------------------------------------------------

/// Which imitation algorithm a run uses. The discriminator-based variants
/// differ only in bank shape and reward rule; `Bc` skips environments
/// entirely and is handled by [`bc_train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IlAlgorithm {
    /// Per-sample pessimism over an N×N discriminator bank.
    Rime,
    /// Batch-level pessimism: one expert column per environment per iteration.
    Omme,
    /// One discriminator per environment, trained only against its own expert.
    GailSingle,
    /// A single discriminator against demonstrations pooled across experts.
    GailMixture,
    /// Per-sample pessimism with a single (nominal) interaction environment.
    SnempeMax,
    /// Behavioral cloning; no environment interaction at all.
    Bc,
}

impl IlAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rime => "rime",
            Self::Omme => "omme",
            Self::GailSingle => "gail-single",
            Self::GailMixture => "gail-mixture",
            Self::SnempeMax => "snempe-max",
            Self::Bc => "bc",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "rime" => Ok(Self::Rime),
            "omme" => Ok(Self::Omme),
            "gail-single" => Ok(Self::GailSingle),
            "gail-mixture" => Ok(Self::GailMixture),
            "snempe-max" => Ok(Self::SnempeMax),
            "bc" => Ok(Self::Bc),
            other => Err(Error::Format(format!("unknown algorithm {other:?}"))),
        }
    }

    pub fn all() -> [Self; 6] {
        [
            Self::Rime,
            Self::Omme,
            Self::GailSingle,
            Self::GailMixture,
            Self::SnempeMax,
            Self::Bc,
        ]
    }

    /// Reward rule used against the discriminator bank; `None` for `Bc`.
    pub fn surrogate_tag(self) -> Option<AlgorithmTag> {
        match self {
            Self::Rime => Some(AlgorithmTag::Rime),
            Self::Omme => Some(AlgorithmTag::Omme),
            Self::GailSingle => Some(AlgorithmTag::GailSingle),
            Self::GailMixture => Some(AlgorithmTag::GailMixture),
            Self::SnempeMax => Some(AlgorithmTag::SnempeMax),
            Self::Bc => None,
        }
    }

    /// Bank shape (rows, columns) given the number of interaction
    /// environments and demonstration sets.
    fn bank_shape(self, n_envs: usize, n_demos: usize) -> (usize, usize) {
        match self {
            Self::Rime | Self::Omme => (n_envs, n_demos),
            Self::GailSingle => (n_envs, 1),
            Self::GailMixture => (1, 1),
            Self::SnempeMax => (1, n_demos),
            Self::Bc => (0, 0),
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Everything a training run needs besides the environments, demonstrations
/// and seed.
#[derive(Debug, Clone)]
pub struct IlConfig {
    pub algorithm: IlAlgorithm,
    /// Discriminate on (state, next-state) pairs instead of (state, action).
    pub state_only: bool,
    pub disc_mode: BankMode,
    /// Reweight expert terms by an estimated state-marginal density ratio.
    pub use_lfiw: bool,
    /// Total environment steps across all interaction environments.
    pub total_steps: usize,
    pub ppo: PpoConfig,
    pub disc: DiscTrainConfig,
    pub disc_hidden: Vec<usize>,
    pub kappa: f64,
    pub policy_hidden: Vec<usize>,
    pub lfiw_hidden: Vec<usize>,
    pub lfiw_temperature: f64,
    pub lfiw_steps: usize,
    pub lfiw_lr: f64,
}

impl Default for IlConfig {
    fn default() -> Self {
        Self {
            algorithm: IlAlgorithm::Rime,
            state_only: false,
            disc_mode: BankMode::Independent,
            use_lfiw: false,
            total_steps: 300_000,
            ppo: PpoConfig::default(),
            disc: DiscTrainConfig::default(),
            disc_hidden: vec![100, 100],
            kappa: DEFAULT_KAPPA,
            policy_hidden: vec![64, 64],
            lfiw_hidden: vec![64, 64],
            lfiw_temperature: DEFAULT_LFIW_TEMPERATURE,
            lfiw_steps: 100,
            lfiw_lr: 1e-3,
        }
    }
}

impl IlConfig {
    /// Cross-check the configuration against the actual environments and
    /// demonstration sets before any work starts.
    pub fn validate(&self, specs: &[EnvSpec], demos: &[DemoSet]) -> Result<()> {
        if self.algorithm == IlAlgorithm::Bc {
            return Err(Error::InvalidSpec(
                "behavioral cloning does not use the interactive trainer; call bc_train".into(),
            ));
        }
        if specs.is_empty() || demos.is_empty() {
            return Err(Error::InvalidSpec(
                "need at least one environment and one demonstration set".into(),
            ));
        }
        if self.algorithm == IlAlgorithm::SnempeMax && specs.len() != 1 {
            return Err(Error::InvalidSpec(format!(
                "snempe-max interacts with exactly one environment, got {}",
                specs.len()
            )));
        }
        if self.algorithm == IlAlgorithm::GailSingle && specs.len() != demos.len() {
            return Err(Error::InvalidSpec(format!(
                "gail-single pairs each environment with its own expert: {} envs vs {} demo sets",
                specs.len(),
                demos.len()
            )));
        }
        let family = specs[0].family;
        for spec in specs {
            spec.validate()?;
            if spec.family != family {
                return Err(Error::InvalidSpec(
                    "all interaction environments must share one family".into(),
                ));
            }
        }
        for set in demos {
            set.validate()?;
            if set.family != family {
                return Err(Error::InvalidSpec(format!(
                    "demo family {} does not match environment family {}",
                    set.family.name(),
                    family.name()
                )));
            }
            if set.state_only != self.state_only {
                return Err(Error::InvalidSpec(format!(
                    "demo set recorded with state_only={}, run configured with {}",
                    set.state_only, self.state_only
                )));
            }
            if set.trajectories.is_empty() {
                return Err(Error::InvalidSpec("empty demonstration set".into()));
            }
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidSpec("total_steps must be positive".into()));
        }
        self.ppo.validate()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Discriminator input for one transition: `concat(state, payload)` where the
/// payload is the action, or the next state when learning from state-only
/// demonstrations.
pub fn make_features(state: &[f64], payload: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(state.len() + payload.len());
    f.extend_from_slice(state);
    f.extend_from_slice(payload);
    f
}

/// Row-major feature matrix for a whole demonstration set.
pub fn demo_features(set: &DemoSet) -> (Vec<f64>, usize) {
    let n = set.n_transitions();
    let mut feats = Vec::with_capacity(n * (set.state_dim + set.payload_dim()));
    for traj in &set.trajectories {
        for step in &traj.steps {
            feats.extend_from_slice(&step.state);
            feats.extend_from_slice(&step.payload);
        }
    }
    (feats, n)
}

/// Row-major state matrix for a demonstration set (density-ratio input).
pub fn demo_states(set: &DemoSet) -> (Vec<f64>, usize) {
    let n = set.n_transitions();
    let mut states = Vec::with_capacity(n * set.state_dim);
    for traj in &set.trajectories {
        for step in &traj.steps {
            states.extend_from_slice(&step.state);
        }
    }
    (states, n)
}

/// Discriminator features for an on-policy batch. In state-only mode the
/// next states come from the collected trajectories, whose steps align
/// one-to-one with the batch rows.
pub fn batch_features(
    batch: &SampleBatch,
    trajs: &[Trajectory],
    state_only: bool,
) -> Result<(Vec<f64>, usize)> {
    let n = batch.len();
    if !state_only {
        let mut feats = Vec::with_capacity(n * (batch.state_dim + batch.action_dim));
        for k in 0..n {
            feats.extend_from_slice(batch.state(k));
            feats.extend_from_slice(batch.action(k));
        }
        return Ok((feats, n));
    }
    let mut feats = Vec::with_capacity(n * 2 * batch.state_dim);
    let mut rows = 0usize;
    for traj in trajs {
        for step in &traj.steps {
            feats.extend_from_slice(&step.state);
            feats.extend_from_slice(&step.next_state);
            rows += 1;
        }
    }
    if rows != n {
        return Err(Error::DimMismatch {
            what: "batch feature rows",
            expected: n,
            got: rows,
        });
    }
    Ok((feats, n))
}

fn feature_dim(state_dim: usize, action_dim: usize, state_only: bool) -> usize {
    if state_only {
        2 * state_dim
    } else {
        state_dim + action_dim
    }
}

// ---------------------------------------------------------------------------
// Policy / value wrappers
// ---------------------------------------------------------------------------

/// Policy representation chosen per environment family: a Gaussian head for
/// continuous control, a softmax table for the grid.
#[derive(Debug, Clone)]
pub enum IlPolicy {
    Gaussian(GaussianPolicyHead),
    Table(SoftmaxTablePolicy),
}

impl PolicyModel for IlPolicy {
    fn action_dim(&self) -> usize {
        match self {
            Self::Gaussian(p) => PolicyModel::action_dim(p),
            Self::Table(p) => PolicyModel::action_dim(p),
        }
    }

    fn n_params(&self) -> usize {
        match self {
            Self::Gaussian(p) => PolicyModel::n_params(p),
            Self::Table(p) => PolicyModel::n_params(p),
        }
    }

    fn flat_params(&self) -> Vec<f64> {
        match self {
            Self::Gaussian(p) => PolicyModel::flat_params(p),
            Self::Table(p) => PolicyModel::flat_params(p),
        }
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            Self::Gaussian(p) => PolicyModel::set_flat_params(p, flat),
            Self::Table(p) => PolicyModel::set_flat_params(p, flat),
        }
    }

    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng, deterministic: bool) -> Result<Vec<f64>> {
        match self {
            Self::Gaussian(p) => PolicyModel::act(p, state, rng, deterministic),
            Self::Table(p) => PolicyModel::act(p, state, rng, deterministic),
        }
    }

    fn logprobs(&self, states: &[f64], actions: &[f64], n: usize) -> Result<Vec<f64>> {
        match self {
            Self::Gaussian(p) => PolicyModel::logprobs(p, states, actions, n),
            Self::Table(p) => PolicyModel::logprobs(p, states, actions, n),
        }
    }

    fn weighted_logprob_grad(
        &self,
        states: &[f64],
        actions: &[f64],
        coeff: &[f64],
        n: usize,
    ) -> Result<Vec<f64>> {
        match self {
            Self::Gaussian(p) => PolicyModel::weighted_logprob_grad(p, states, actions, coeff, n),
            Self::Table(p) => PolicyModel::weighted_logprob_grad(p, states, actions, coeff, n),
        }
    }

    fn entropy_mean(&self, states: &[f64], n: usize) -> Result<f64> {
        match self {
            Self::Gaussian(p) => PolicyModel::entropy_mean(p, states, n),
            Self::Table(p) => PolicyModel::entropy_mean(p, states, n),
        }
    }

    fn entropy_grad(&self, states: &[f64], n: usize) -> Result<Vec<f64>> {
        match self {
            Self::Gaussian(p) => PolicyModel::entropy_grad(p, states, n),
            Self::Table(p) => PolicyModel::entropy_grad(p, states, n),
        }
    }
}

/// Value function matching the policy representation.
#[derive(Debug, Clone)]
pub enum IlValue {
    Mlp(Mlp),
    Table(ValueTable),
}

impl ValueModel for IlValue {
    fn n_params(&self) -> usize {
        match self {
            Self::Mlp(v) => ValueModel::n_params(v),
            Self::Table(v) => ValueModel::n_params(v),
        }
    }

    fn flat_params(&self) -> Vec<f64> {
        match self {
            Self::Mlp(v) => ValueModel::flat_params(v),
            Self::Table(v) => ValueModel::flat_params(v),
        }
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            Self::Mlp(v) => ValueModel::set_flat_params(v, flat),
            Self::Table(v) => ValueModel::set_flat_params(v, flat),
        }
    }

    fn values(&self, states: &[f64], n: usize) -> Result<Vec<f64>> {
        match self {
            Self::Mlp(v) => ValueModel::values(v, states, n),
            Self::Table(v) => ValueModel::values(v, states, n),
        }
    }

    fn mse_grad(&self, states: &[f64], targets: &[f64], n: usize, scale: f64) -> Result<Vec<f64>> {
        match self {
            Self::Mlp(v) => ValueModel::mse_grad(v, states, targets, n, scale),
            Self::Table(v) => ValueModel::mse_grad(v, states, targets, n, scale),
        }
    }
}

// ---------------------------------------------------------------------------
// Train state and checkpointing
// ---------------------------------------------------------------------------

/// Complete mutable state of an adversarial training run. Saving and
/// reloading this struct mid-run continues bit-identically, because it
/// carries the optimizer moments and the position of every RNG stream
/// alongside the parameters.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub algorithm: IlAlgorithm,
    pub policy: IlPolicy,
    pub value: IlValue,
    pub bank: DiscriminatorBank,
    pub policy_opt: Adam,
    pub value_opt: Adam,
    /// One optimizer per discriminator cell (independent mode) or per bank
    /// row (weight-shared mode).
    pub bank_opts: Vec<Adam>,
    pub iteration: u64,
    pub steps_consumed: u64,
    pub master_seed: u64,
    pub env_rng: Vec<RngState>,
    pub act_rng: Vec<RngState>,
    pub ppo_rng: Vec<RngState>,
}

fn rng_words(st: &RngState) -> [u64; 7] {
    let mut w = [0u64; 7];
    for (k, chunk) in st.seed.chunks(8).enumerate() {
        w[k] = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    w[4] = st.stream_id;
    w[5] = st.word_pos as u64;
    w[6] = (st.word_pos >> 64) as u64;
    w
}

fn rng_from_words(w: &[u64]) -> Result<RngState> {
    if w.len() != 7 {
        return Err(Error::Format("RNG snapshot needs 7 words".into()));
    }
    let mut seed = [0u8; 32];
    for k in 0..4 {
        seed[k * 8..(k + 1) * 8].copy_from_slice(&w[k].to_le_bytes());
    }
    Ok(RngState {
        seed,
        stream_id: w[4],
        word_pos: (w[5] as u128) | ((w[6] as u128) << 64),
    })
}

fn put_rng_states(c: &mut Container, name: &str, states: &[RngState]) {
    let words: Vec<u64> = states.iter().flat_map(|s| rng_words(s)).collect();
    c.put_u64(name, words);
}

fn get_rng_states(c: &Container, name: &str) -> Result<Vec<RngState>> {
    let words = c.u64(name)?;
    if words.len() % 7 != 0 {
        return Err(Error::Format(format!("truncated RNG block {name:?}")));
    }
    words.chunks(7).map(rng_from_words).collect()
}

impl TrainState {
    pub fn save_into(&self, c: &mut Container) {
        c.put_str("il.algorithm", self.algorithm.name());
        c.put_u64(
            "il.counters",
            vec![self.iteration, self.steps_consumed, self.master_seed],
        );
        match &self.policy {
            IlPolicy::Gaussian(p) => {
                c.put_str("il.policy.kind", "gaussian");
                p.save_into(c, "il.policy");
            }
            IlPolicy::Table(p) => {
                c.put_str("il.policy.kind", "table");
                p.save_into(c, "il.policy");
            }
        }
        match &self.value {
            IlValue::Mlp(v) => {
                c.put_str("il.value.kind", "mlp");
                v.save_into(c, "il.value");
            }
            IlValue::Table(v) => {
                c.put_str("il.value.kind", "table");
                v.save_into(c, "il.value");
            }
        }
        self.bank.save_into(c, "il.bank");
        self.policy_opt.save_into(c, "il.opt.policy");
        self.value_opt.save_into(c, "il.opt.value");
        c.put_u64("il.opt.bank.count", vec![self.bank_opts.len() as u64]);
        for (k, opt) in self.bank_opts.iter().enumerate() {
            opt.save_into(c, &format!("il.opt.bank{k}"));
        }
        put_rng_states(c, "il.rng.env", &self.env_rng);
        put_rng_states(c, "il.rng.act", &self.act_rng);
        put_rng_states(c, "il.rng.ppo", &self.ppo_rng);
    }

    pub fn load_from(c: &Container) -> Result<Self> {
        let algorithm = IlAlgorithm::parse(c.str("il.algorithm")?)?;
        let counters = c.u64("il.counters")?;
        if counters.len() != 3 {
            return Err(Error::Format("bad counter block in checkpoint".into()));
        }
        let policy = match c.str("il.policy.kind")? {
            "gaussian" => IlPolicy::Gaussian(GaussianPolicyHead::load_from(c, "il.policy")?),
            "table" => IlPolicy::Table(SoftmaxTablePolicy::load_from(c, "il.policy")?),
            other => return Err(Error::Format(format!("unknown policy kind {other:?}"))),
        };
        let value = match c.str("il.value.kind")? {
            "mlp" => IlValue::Mlp(Mlp::load_from(c, "il.value")?),
            "table" => IlValue::Table(ValueTable::load_from(c, "il.value")?),
            other => return Err(Error::Format(format!("unknown value kind {other:?}"))),
        };
        let bank = DiscriminatorBank::load_from(c, "il.bank")?;
        let policy_opt = Adam::load_from(c, "il.opt.policy")?;
        let value_opt = Adam::load_from(c, "il.opt.value")?;
        let n_opts = c.u64("il.opt.bank.count")?[0] as usize;
        let bank_opts = (0..n_opts)
            .map(|k| Adam::load_from(c, &format!("il.opt.bank{k}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            algorithm,
            policy,
            value,
            bank,
            policy_opt,
            value_opt,
            bank_opts,
            iteration: counters[0],
            steps_consumed: counters[1],
            master_seed: counters[2],
            env_rng: get_rng_states(c, "il.rng.env")?,
            act_rng: get_rng_states(c, "il.rng.act")?,
            ppo_rng: get_rng_states(c, "il.rng.ppo")?,
        })
    }

    pub fn save_to_path(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        self.save_into(&mut c);
        c.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_from_path(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load_from(&Container::read_from(file)?)
    }
}

// ---------------------------------------------------------------------------
// Metrics and event log
// ---------------------------------------------------------------------------

/// Line-oriented run telemetry. `records` holds one JSON object per
/// iteration (no timestamps, so identical runs produce identical bytes);
/// `events` is a flat phase log proving the update ordering.
#[derive(Debug, Clone, Default)]
pub struct Metrics {
    pub records: Vec<String>,
    pub events: Vec<String>,
}

impl Metrics {
    /// Hex SHA-256 over the record lines; equal hashes mean equal runs.
    pub fn trace_hash(&self) -> String {
        let mut h = Sha256::new();
        for line in &self.records {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// One iteration's worth of telemetry, serialized into `Metrics::records`.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub steps_consumed: u64,
    /// Mean undiscounted true-reward return per interaction environment
    /// (diagnostic only; the learner never sees these rewards).
    pub env_return: Vec<f64>,
    /// Mean surrogate reward per environment at update time.
    pub surrogate_mean: Vec<f64>,
    /// Row-major discriminator stats, one per cell.
    pub disc: Vec<DiscStats>,
    pub policy: Vec<UpdateStats>,
    /// Batch-mean of per-sample max log(1−D) minus max of batch means,
    /// per environment; nonnegative up to float noise.
    pub max_gap: Vec<f64>,
    pub max_ordering_violations: u64,
    /// Expert column chosen per environment under the batch-max rule.
    pub omme_expert: Option<Vec<usize>>,
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

/// Expert data prepared once per run.
struct ExpertData {
    /// Per demo set: row-major features and row count.
    feats: Vec<(Vec<f64>, usize)>,
    /// Per demo set: row-major states (density-ratio input).
    states: Vec<(Vec<f64>, usize)>,
    /// Pooled features across all sets (mixture training).
    pooled: (Vec<f64>, usize),
}

fn prepare_experts(demos: &[DemoSet]) -> ExpertData {
    let feats: Vec<_> = demos.iter().map(demo_features).collect();
    let states: Vec<_> = demos.iter().map(demo_states).collect();
    let mut pooled = Vec::new();
    let mut pooled_n = 0;
    for (f, n) in &feats {
        pooled.extend_from_slice(f);
        pooled_n += n;
    }
    ExpertData {
        feats,
        states,
        pooled: (pooled, pooled_n),
    }
}

fn init_policy_value(
    cfg: &IlConfig,
    spec: &EnvSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(IlPolicy, IlValue)> {
    match spec.action_kind() {
        ActionKind::Continuous { .. } => {
            let policy = GaussianPolicyHead::new(
                spec.state_dim(),
                spec.action_dim(),
                &cfg.policy_hidden,
                rng,
            )?;
            let mut sizes = vec![spec.state_dim()];
            sizes.extend_from_slice(&cfg.policy_hidden);
            sizes.push(1);
            let value = Mlp::new(
                &sizes,
                crate::neural::Activation::Tanh,
                crate::neural::Activation::Identity,
                rng,
            )?;
            Ok((IlPolicy::Gaussian(policy), IlValue::Mlp(value)))
        }
        ActionKind::Discrete { .. } => {
            let (n_states, n_actions, indexer) = match spec.family {
                EnvFamily::WindyGrid => (
                    env::windy_grid::N_STATES,
                    env::windy_grid::N_ACTIONS,
                    StateIndexer::WindyGrid,
                ),
                EnvFamily::PointMass1D => {
                    return Err(Error::InvalidSpec(
                        "point-mass has continuous actions".into(),
                    ))
                }
            };
            let state_dim = spec.state_dim();
            Ok((
                IlPolicy::Table(SoftmaxTablePolicy::new(n_states, n_actions, indexer, state_dim)),
                IlValue::Table(ValueTable::new(n_states, indexer, state_dim)),
            ))
        }
    }
}

/// Build the initial [`TrainState`] for a fresh run.
pub fn init_train_state(
    cfg: &IlConfig,
    specs: &[EnvSpec],
    demos: &[DemoSet],
    seed: u64,
) -> Result<TrainState> {
    cfg.validate(specs, demos)?;
    let (rows, cols) = cfg.algorithm.bank_shape(specs.len(), demos.len());
    let feat_dim = feature_dim(specs[0].state_dim(), specs[0].action_dim(), cfg.state_only);
    for set in demos {
        let got = set.state_dim + set.payload_dim();
        if got != feat_dim {
            return Err(Error::DimMismatch {
                what: "demo feature width",
                expected: feat_dim,
                got,
            });
        }
    }

    let mut init_rng = rng::stream(seed, "il-init", 0);
    let (policy, value) = init_policy_value(cfg, &specs[0], &mut init_rng)?;
    let mut bank_rng = rng::stream(seed, "il-bank", 0);
    let bank = match cfg.disc_mode {
        BankMode::Independent => DiscriminatorBank::independent(
            rows,
            cols,
            feat_dim,
            &cfg.disc_hidden,
            cfg.kappa,
            &mut bank_rng,
        )?,
        BankMode::WeightShared => DiscriminatorBank::weight_shared(
            rows,
            cols,
            feat_dim,
            &cfg.disc_hidden,
            cfg.kappa,
            &mut bank_rng,
        )?,
    };

    let policy_opt = Adam::new(cfg.ppo.policy_lr, PolicyModel::n_params(&policy));
    let value_opt = Adam::new(cfg.ppo.value_lr, ValueModel::n_params(&value));
    let bank_opts = match cfg.disc_mode {
        BankMode::Independent => (0..rows * cols)
            .map(|idx| {
                let (i, j) = (idx / cols, idx % cols);
                let n = bank.cell_params(i, j).map(|p| p.len())?;
                Ok(Adam::new(cfg.disc.lr, n))
            })
            .collect::<Result<Vec<_>>>()?,
        BankMode::WeightShared => (0..rows)
            .map(|_| Adam::new(cfg.disc.lr, bank.row_n_params()))
            .collect(),
    };

    // Environment RNG positions are captured right after construction; the
    // act/update streams start at their derived origins.
    let mut env_rng = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let environment = make_env(spec, rng::child_seed(seed, "il-env", i as u64))?;
        env_rng.push(environment.rng_state());
    }
    let act_rng = (0..specs.len())
        .map(|i| RngState::capture(&rng::stream(seed, "il-act", i as u64)))
        .collect();
    let ppo_rng = (0..specs.len())
        .map(|i| RngState::capture(&rng::stream(seed, "il-ppo", i as u64)))
        .collect();

    Ok(TrainState {
        algorithm: cfg.algorithm,
        policy,
        value,
        bank,
        policy_opt,
        value_opt,
        bank_opts,
        iteration: 0,
        steps_consumed: 0,
        master_seed: seed,
        env_rng,
        act_rng,
        ppo_rng,
    })
}

/// Result of [`train`] / [`resume`].
#[derive(Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub metrics: Metrics,
}

/// Run adversarial imitation from scratch until `cfg.total_steps`
/// environment steps have been consumed.
pub fn train(
    cfg: &IlConfig,
    specs: &[EnvSpec],
    demos: &[DemoSet],
    seed: u64,
    par: &Parallelism,
    abort_dump: Option<&Path>,
) -> Result<TrainOutput> {
    let state = init_train_state(cfg, specs, demos, seed)?;
    run_loop(cfg, specs, demos, state, par, abort_dump)
}

/// Continue a checkpointed run until `cfg.total_steps`. A run saved at
/// iteration k and resumed produces exactly the bytes an uninterrupted run
/// would have produced from iteration k onward.
pub fn resume(
    cfg: &IlConfig,
    specs: &[EnvSpec],
    demos: &[DemoSet],
    state: TrainState,
    par: &Parallelism,
    abort_dump: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate(specs, demos)?;
    if state.algorithm != cfg.algorithm {
        return Err(Error::InvalidSpec(format!(
            "checkpoint was trained with {}, config says {}",
            state.algorithm.name(),
            cfg.algorithm.name()
        )));
    }
    if state.env_rng.len() != specs.len() {
        return Err(Error::DimMismatch {
            what: "checkpoint environment count",
            expected: specs.len(),
            got: state.env_rng.len(),
        });
    }
    run_loop(cfg, specs, demos, state, par, abort_dump)
}

/// Live (non-serializable) side of the training loop.
struct LiveRun {
    envs: Vec<Environment>,
    act_rngs: Vec<ChaCha8Rng>,
    ppo_rngs: Vec<ChaCha8Rng>,
}

impl LiveRun {
    fn restore(specs: &[EnvSpec], state: &TrainState) -> Result<Self> {
        let mut envs = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let mut environment =
                make_env(spec, rng::child_seed(state.master_seed, "il-env", i as u64))?;
            environment.restore_rng(&state.env_rng[i]);
            envs.push(environment);
        }
        Ok(Self {
            envs,
            act_rngs: state.act_rng.iter().map(RngState::restore).collect(),
            ppo_rngs: state.ppo_rng.iter().map(RngState::restore).collect(),
        })
    }

    fn capture_into(&self, state: &mut TrainState) {
        state.env_rng = self.envs.iter().map(Environment::rng_state).collect();
        state.act_rng = self.act_rngs.iter().map(RngState::capture).collect();
        state.ppo_rng = self.ppo_rngs.iter().map(RngState::capture).collect();
    }
}

fn run_loop(
    cfg: &IlConfig,
    specs: &[EnvSpec],
    demos: &[DemoSet],
    mut state: TrainState,
    par: &Parallelism,
    abort_dump: Option<&Path>,
) -> Result<TrainOutput> {
    let experts = prepare_experts(demos);
    let mut live = LiveRun::restore(specs, &state)?;
    let mut metrics = Metrics::default();

    while state.steps_consumed < cfg.total_steps as u64 {
        match run_iteration(cfg, demos, &experts, &mut state, &mut live, &mut metrics, par) {
            Ok(()) => {}
            Err(e) => {
                // Numerical failures abort the run but leave a resumable
                // snapshot of the exact pre-iteration state behind.
                if let Some(path) = abort_dump {
                    let _ = state.save_to_path(path);
                }
                return Err(e);
            }
        }
        live.capture_into(&mut state);
    }
    Ok(TrainOutput { state, metrics })
}

/// Discriminator work for one independent cell or one shared row, executed
/// on a cloned bank so cells can run in parallel. RNG streams derive from
/// (seed, iteration, unit index), making results schedule-independent.
struct DiscResult {
    params: Vec<f64>,
    opt: Adam,
    stats: Vec<DiscStats>,
}

#[allow(clippy::too_many_arguments)]
fn run_iteration(
    cfg: &IlConfig,
    demos: &[DemoSet],
    experts: &ExpertData,
    state: &mut TrainState,
    live: &mut LiveRun,
    metrics: &mut Metrics,
    par: &Parallelism,
) -> Result<()> {
    let iter = state.iteration;
    let n_envs = live.envs.len();
    let (rows, cols) = (state.bank.n_envs, state.bank.n_experts);
    let tag = cfg
        .algorithm
        .surrogate_tag()
        .ok_or_else(|| Error::InvalidSpec("bc has no surrogate reward".into()))?;

    // -- Phase 1: collect one on-policy batch per interaction environment.
    let mut batches = Vec::with_capacity(n_envs);
    let mut env_return = Vec::with_capacity(n_envs);
    let mut feats = Vec::with_capacity(n_envs);
    for i in 0..n_envs {
        let (batch, trajs) = collect_batch(
            &mut live.envs[i],
            &state.policy,
            &state.value,
            cfg.ppo.batch_size,
            i,
            &mut live.act_rngs[i],
        )?;
        let mean_ret = trajs
            .iter()
            .map(Trajectory::undiscounted_return)
            .sum::<f64>()
            / trajs.len().max(1) as f64;
        env_return.push(mean_ret);
        feats.push(batch_features(&batch, &trajs, cfg.state_only)?);
        batches.push(batch);
        metrics.events.push(format!("iter={iter} phase=collect env={i}"));
    }

    // Pool policy features when a single discriminator serves all
    // environments.
    let pooled_policy: Option<(Vec<f64>, usize)> = if cfg.algorithm == IlAlgorithm::GailMixture {
        let mut all = Vec::new();
        let mut n = 0;
        for (f, m) in &feats {
            all.extend_from_slice(f);
            n += m;
        }
        Some((all, n))
    } else {
        None
    };

    // -- Phase 2: optional density-ratio weights for every expert column.
    // Estimators are refit from scratch each iteration so that no extra
    // state has to survive a checkpoint.
    let iter_seed = rng::child_seed(state.master_seed, "il-iter", iter);
    let lfiw_weights: Vec<Option<Vec<f64>>> = if cfg.use_lfiw {
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let policy_states = policy_states_for_row(cfg.algorithm, i, &batches);
            for j in 0..cols {
                let (ref e_states, e_n) = experts.states[j];
                let mut est = RatioEstimator::new(
                    demos[j].state_dim,
                    &cfg.lfiw_hidden,
                    cfg.lfiw_temperature,
                    &mut rng::stream(iter_seed, "lfiw", (i * cols + j) as u64),
                )?;
                lfiw_fit(
                    &mut est,
                    &policy_states.0,
                    policy_states.1,
                    e_states,
                    e_n,
                    cfg.lfiw_steps,
                    cfg.lfiw_lr,
                )?;
                out.push(Some(est.normalized_weights(e_states, e_n)?));
            }
        }
        out
    } else {
        vec![None; rows * cols]
    };

    // -- Phase 3: update every discriminator before any policy step.
    let expert_for_cell = |i: usize, j: usize| -> ExpertColumn<'_> {
        let (f, n) = match cfg.algorithm {
            IlAlgorithm::GailSingle => (&experts.feats[i].0, experts.feats[i].1),
            IlAlgorithm::GailMixture => (&experts.pooled.0, experts.pooled.1),
            _ => (&experts.feats[j].0, experts.feats[j].1),
        };
        ExpertColumn {
            feats: f,
            n,
            weights: lfiw_weights[i * cols + j].as_deref(),
        }
    };

    let disc_results: Vec<Result<DiscResult>> = match state.bank.mode() {
        BankMode::Independent => {
            let bank = &state.bank;
            let opts = &state.bank_opts;
            par.map_range(rows * cols, |idx| {
                let (i, j) = (idx / cols, idx % cols);
                let mut local = bank.clone();
                let mut opt = opts[idx].clone();
                let (ref pf, pn) = *policy_feats_for_row(cfg.algorithm, i, &feats, &pooled_policy);
                let mut cell_rng = rng::stream(iter_seed, "disc", idx as u64);
                let stats = train_cell(
                    &mut local,
                    &mut opt,
                    i,
                    j,
                    pf,
                    pn,
                    &expert_for_cell(i, j),
                    &cfg.disc,
                    &mut cell_rng,
                )?;
                Ok(DiscResult {
                    params: local.cell_params(i, j)?,
                    opt,
                    stats: vec![stats],
                })
            })
        }
        BankMode::WeightShared => {
            let bank = &state.bank;
            let opts = &state.bank_opts;
            par.map_range(rows, |i| {
                let mut local = bank.clone();
                let mut opt = opts[i].clone();
                let (ref pf, pn) = *policy_feats_for_row(cfg.algorithm, i, &feats, &pooled_policy);
                let columns: Vec<ExpertColumn<'_>> =
                    (0..cols).map(|j| expert_for_cell(i, j)).collect();
                let mut row_rng = rng::stream(iter_seed, "disc", i as u64);
                let stats = train_row_shared(
                    &mut local, &mut opt, i, pf, pn, &columns, &cfg.disc, &mut row_rng,
                )?;
                Ok(DiscResult {
                    params: local.row_params(i)?,
                    opt,
                    stats,
                })
            })
        }
    };

    let mut disc_stats = Vec::with_capacity(rows * cols);
    for (unit, result) in disc_results.into_iter().enumerate() {
        let result = result?;
        match state.bank.mode() {
            BankMode::Independent => {
                let (i, j) = (unit / cols, unit % cols);
                state.bank.set_cell_params(i, j, &result.params)?;
                metrics
                    .events
                    .push(format!("iter={iter} phase=disc env={i} expert={j}"));
            }
            BankMode::WeightShared => {
                state.bank.set_row_params(unit, &result.params)?;
                for j in 0..cols {
                    metrics
                        .events
                        .push(format!("iter={iter} phase=disc env={unit} expert={j}"));
                }
            }
        }
        state.bank_opts[unit] = result.opt;
        disc_stats.extend(result.stats);
    }

    // -- Phase 4: per-environment diagnostics and reward-rule inputs from
    // the freshly updated bank.
    let mut max_gap = Vec::with_capacity(n_envs);
    let mut violations = 0u64;
    if cols > 1 {
        for i in 0..n_envs {
            let row = bank_row_for_env(cfg.algorithm, i);
            let (ref pf, pn) = feats[i];
            let check = state.bank.max_ordering(row, pf, pn)?;
            if !check.holds() {
                violations += 1;
            }
            max_gap.push(check.mean_of_max - check.max_of_mean);
        }
    }
    let omme_expert: Option<Vec<usize>> = if cfg.algorithm == IlAlgorithm::Omme {
        let mut picks = Vec::with_capacity(n_envs);
        for i in 0..n_envs {
            let row = bank_row_for_env(cfg.algorithm, i);
            let (ref pf, pn) = feats[i];
            picks.push(state.bank.batch_max_expert(row, pf, pn)?);
        }
        Some(picks)
    } else {
        None
    };

    // -- Phase 5: sequential policy updates, one environment at a time.
    let mut surrogate_mean = Vec::with_capacity(n_envs);
    let mut policy_stats = Vec::with_capacity(n_envs);
    for (i, batch) in batches.iter_mut().enumerate() {
        let row = bank_row_for_env(cfg.algorithm, i);
        let (ref pf, pn) = feats[i];
        let omme_j = omme_expert.as_ref().map(|p| p[i]);
        let rewards = state.bank.surrogate_rewards(tag, row, pf, pn, omme_j)?;
        surrogate_mean.push(rewards.iter().sum::<f64>() / rewards.len().max(1) as f64);
        batch.rewards = rewards;
        let stats = ppo_update(
            &mut state.policy,
            &mut state.value,
            &mut state.policy_opt,
            &mut state.value_opt,
            batch,
            &cfg.ppo,
            &mut live.ppo_rngs[i],
        )?;
        policy_stats.push(stats);
        metrics.events.push(format!("iter={iter} phase=policy env={i}"));
    }

    state.steps_consumed += batches.iter().map(|b| b.len() as u64).sum::<u64>();
    state.iteration += 1;

    let record = IterationRecord {
        iteration: iter,
        steps_consumed: state.steps_consumed,
        env_return,
        surrogate_mean,
        disc: disc_stats,
        policy: policy_stats,
        max_gap,
        max_ordering_violations: violations,
        omme_expert,
    };
    metrics.records.push(
        serde_json::to_string(&record).map_err(|e| Error::Format(format!("metrics: {e}")))?,
    );
    Ok(())
}

/// Which bank row serves environment `i` under each algorithm.
fn bank_row_for_env(algorithm: IlAlgorithm, i: usize) -> usize {
    match algorithm {
        IlAlgorithm::GailMixture => 0,
        _ => i,
    }
}

fn policy_feats_for_row<'a>(
    algorithm: IlAlgorithm,
    i: usize,
    feats: &'a [(Vec<f64>, usize)],
    pooled: &'a Option<(Vec<f64>, usize)>,
) -> &'a (Vec<f64>, usize) {
    match algorithm {
        IlAlgorithm::GailMixture => pooled.as_ref().expect("pooled features exist"),
        _ => &feats[i],
    }
}

fn policy_states_for_row(
    algorithm: IlAlgorithm,
    i: usize,
    batches: &[SampleBatch],
) -> (Vec<f64>, usize) {
    match algorithm {
        IlAlgorithm::GailMixture => {
            let mut states = Vec::new();
            let mut n = 0;
            for b in batches {
                states.extend_from_slice(&b.states);
                n += b.len();
            }
            (states, n)
        }
        _ => (batches[i].states.clone(), batches[i].len()),
    }
}

// ---------------------------------------------------------------------------
// Behavioral cloning
// ---------------------------------------------------------------------------

/// Supervised-regression settings for [`bc_train`].
#[derive(Debug, Clone)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub minibatch: usize,
    /// Fraction of each demo set's trajectories used for fitting; the rest
    /// is that set's validation split.
    pub train_frac: f64,
    /// Stop once every set's validation loss has gone this many consecutive
    /// epochs without improving.
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lr: 1e-3,
            minibatch: 64,
            train_frac: 0.7,
            patience: 10,
            max_epochs: 2000,
        }
    }
}

/// What [`bc_train`] hands back besides the policy.
#[derive(Debug)]
pub struct BcOutput {
    pub policy: GaussianPolicyHead,
    pub epochs_run: usize,
    /// Validation loss per demo set, one entry per epoch.
    pub val_losses: Vec<Vec<f64>>,
}

struct BcSplit {
    train_states: Vec<f64>,
    train_actions: Vec<f64>,
    n_train: usize,
    /// Per demo set: validation states/actions and count.
    val: Vec<(Vec<f64>, Vec<f64>, usize)>,
}

fn bc_split(demos: &[DemoSet], train_frac: f64, seed: u64) -> Result<BcSplit> {
    let mut out = BcSplit {
        train_states: Vec::new(),
        train_actions: Vec::new(),
        n_train: 0,
        val: Vec::new(),
    };
    for (set_idx, set) in demos.iter().enumerate() {
        if set.state_only {
            return Err(Error::InvalidSpec(
                "behavioral cloning needs demonstrated actions".into(),
            ));
        }
        let n_traj = set.trajectories.len();
        let n_train_traj = ((n_traj as f64) * train_frac).round() as usize;
        if n_train_traj == 0 || n_train_traj == n_traj {
            return Err(Error::InvalidSpec(format!(
                "demo set {set_idx} is too small for a {train_frac} split"
            )));
        }
        // The split is over whole trajectories so validation transitions are
        // never time-adjacent to training ones from the same episode.
        let mut order: Vec<usize> = (0..n_traj).collect();
        let mut split_rng = rng::stream(seed, "bc-split", set_idx as u64);
        use rand::seq::SliceRandom;
        order.shuffle(&mut split_rng);
        let mut vs = Vec::new();
        let mut va = Vec::new();
        let mut vn = 0;
        for (pos, &t) in order.iter().enumerate() {
            for step in &set.trajectories[t].steps {
                if pos < n_train_traj {
                    out.train_states.extend_from_slice(&step.state);
                    out.train_actions.extend_from_slice(&step.payload);
                    out.n_train += 1;
                } else {
                    vs.extend_from_slice(&step.state);
                    va.extend_from_slice(&step.payload);
                    vn += 1;
                }
            }
        }
        out.val.push((vs, va, vn));
    }
    Ok(out)
}

fn bc_mse(net: &Mlp, states: &[f64], actions: &[f64], n: usize, a_dim: usize) -> Result<f64> {
    let (mu, _) = net.forward(states, n)?;
    let mut sum = 0.0;
    for (m, a) in mu.iter().zip(actions) {
        let d = m - a;
        sum += d * d;
    }
    Ok(sum / (n * a_dim).max(1) as f64)
}

/// Behavioral cloning: fit a Gaussian policy's mean network to pooled
/// demonstration actions by minimizing squared error (the maximum-likelihood
/// fit of the mean), with early stopping on per-set validation losses.
/// No environment is ever constructed or stepped.
pub fn bc_train(demos: &[DemoSet], cfg: &BcConfig, seed: u64) -> Result<BcOutput> {
    if demos.is_empty() {
        return Err(Error::InvalidSpec("no demonstration sets".into()));
    }
    let state_dim = demos[0].state_dim;
    let a_dim = demos[0].action_dim;
    for set in demos {
        set.validate()?;
        if set.state_dim != state_dim || set.action_dim != a_dim {
            return Err(Error::InvalidSpec(
                "demo sets disagree on state or action dimension".into(),
            ));
        }
    }
    let split = bc_split(demos, cfg.train_frac, seed)?;

    let mut policy = GaussianPolicyHead::new(
        state_dim,
        a_dim,
        &cfg.hidden,
        &mut rng::stream(seed, "bc-init", 0),
    )?;
    let mut opt = Adam::new(cfg.lr, policy.mean.n_params());
    let mut epoch_rng = rng::stream(seed, "bc-epoch", 0);

    let mut val_losses: Vec<Vec<f64>> = vec![Vec::new(); demos.len()];
    let mut best: Vec<f64> = vec![f64::INFINITY; demos.len()];
    let mut stale: Vec<usize> = vec![0; demos.len()];
    let mut best_pooled = f64::INFINITY;
    let mut best_params = policy.mean.params().to_vec();
    let mut epochs_run = 0;

    use rand::seq::SliceRandom;
    for _ in 0..cfg.max_epochs {
        epochs_run += 1;
        let mut order: Vec<usize> = (0..split.n_train).collect();
        order.shuffle(&mut epoch_rng);
        for chunk in order.chunks(cfg.minibatch) {
            let m = chunk.len();
            let mut states = Vec::with_capacity(m * state_dim);
            let mut actions = Vec::with_capacity(m * a_dim);
            for &k in chunk {
                states.extend_from_slice(&split.train_states[k * state_dim..(k + 1) * state_dim]);
                actions.extend_from_slice(&split.train_actions[k * a_dim..(k + 1) * a_dim]);
            }
            let (mu, tape) = policy.mean.forward(&states, m)?;
            let upstream: Vec<f64> = mu
                .iter()
                .zip(&actions)
                .map(|(m_k, a_k)| 2.0 * (m_k - a_k) / (m * a_dim) as f64)
                .collect();
            let grad = policy.mean.param_grad(&tape, &upstream)?;
            opt.step(policy.mean.params_mut(), &grad)?;
        }

        let mut pooled = 0.0;
        let mut pooled_n = 0usize;
        for (set_idx, (vs, va, vn)) in split.val.iter().enumerate() {
            let loss = bc_mse(&policy.mean, vs, va, *vn, a_dim)?;
            val_losses[set_idx].push(loss);
            pooled += loss * *vn as f64;
            pooled_n += vn;
            if loss + 1e-12 < best[set_idx] {
                best[set_idx] = loss;
                stale[set_idx] = 0;
            } else {
                stale[set_idx] += 1;
            }
        }
        pooled /= pooled_n.max(1) as f64;
        if pooled < best_pooled {
            best_pooled = pooled;
            best_params = policy.mean.params().to_vec();
        }
        if stale.iter().all(|&s| s >= cfg.patience) {
            break;
        }
    }
    policy.mean.params_mut().copy_from_slice(&best_params);

    // Maximum-likelihood spread given the fitted mean: per-dimension
    // residual standard deviation on the training split.
    let (mu, _) = policy.mean.forward(&split.train_states, split.n_train)?;
    let mut var = vec![0.0; a_dim];
    for k in 0..split.n_train {
        for d in 0..a_dim {
            let r = mu[k * a_dim + d] - split.train_actions[k * a_dim + d];
            var[d] += r * r;
        }
    }
    for (d, v) in var.iter().enumerate() {
        policy.log_std[d] = (v / split.n_train.max(1) as f64).sqrt().max(1e-3).ln();
    }
    policy.clamp_log_std();

    Ok(BcOutput {
        policy,
        epochs_run,
        val_losses,
    })
}
