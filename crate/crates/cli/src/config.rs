//! Declarative run manifests.
//!
//! A run is described by one TOML file with strict schema checking: unknown
//! keys are rejected so a typo cannot silently fall back to a default. Each
//! subcommand reads the sections it needs and ignores the rest, which lets a
//! single manifest drive the whole expert → demos → training → sweep
//! pipeline.

use std::path::{Path, PathBuf};

use serde::Deserialize;

/// Top-level manifest.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub expert: Option<ExpertSection>,
    pub demos: Option<DemoSection>,
    pub il: Option<IlSection>,
    pub sweep: Option<SweepSection>,
}

/// Identity of the experiment: family, the dynamics parameter that varies,
/// the sampled scales, and where artifacts land.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_run_id")]
    pub id: String,
    /// "point-mass" or "windy-grid".
    pub family: String,
    /// Which dynamics entry the ζ list scales ("mass", "gravity", "wind").
    pub zeta_param: String,
    /// Sampled training scales, e.g. [0.5, 1.5].
    pub zetas: Vec<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_run_id() -> String {
    "run".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSection {
    /// "pd" (point-mass controller), "value-iteration" (grid), or "ppo".
    pub kind: String,
    #[serde(default = "default_expert_steps")]
    pub total_steps: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
}

fn default_expert_steps() -> usize {
    200_000
}

fn default_eval_episodes() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSection {
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub state_only: bool,
}

fn default_n_traj() -> usize {
    50
}

fn default_sigma() -> f64 {
    0.02
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IlSection {
    /// rime | omme | gail-single | gail-mixture | snempe-max | bc
    pub algorithm: String,
    #[serde(default = "default_disc_mode")]
    pub disc_mode: String,
    #[serde(default)]
    pub use_lfiw: bool,
    #[serde(default)]
    pub state_only: bool,
    #[serde(default = "default_il_steps")]
    pub total_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_disc_epochs")]
    pub disc_epochs: usize,
    #[serde(default = "default_disc_minibatch")]
    pub disc_minibatch: usize,
    #[serde(default = "default_disc_lr")]
    pub disc_lr: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Defaults depend on the policy representation (network vs table), so
    /// absent means "family default".
    pub policy_lr: Option<f64>,
    pub value_lr: Option<f64>,
    /// Exploration bonus weight in the PPO policy loss.
    #[serde(default)]
    pub entropy_coef: f64,
    /// Keep only the first k trajectories of every demo set (demo-count
    /// ablations); absent means use all.
    pub demo_traj: Option<usize>,
}

fn default_disc_mode() -> String {
    "independent".into()
}

fn default_il_steps() -> usize {
    300_000
}

fn default_batch_size() -> usize {
    2048
}

fn default_disc_epochs() -> usize {
    5
}

fn default_disc_minibatch() -> usize {
    256
}

fn default_disc_lr() -> f64 {
    1e-3
}

fn default_kappa() -> f64 {
    10.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Dynamics parameter to sweep; defaults to the run's zeta_param.
    pub param: Option<String>,
    #[serde(default = "default_sweep_lo")]
    pub lo: f64,
    #[serde(default = "default_sweep_hi")]
    pub hi: f64,
    #[serde(default = "default_sweep_step")]
    pub step: f64,
    #[serde(default = "default_eval_episodes")]
    pub episodes: usize,
    /// Checkpoint file to evaluate, relative to out_dir; defaults to the
    /// trainer's standard artifact names.
    pub checkpoint: Option<PathBuf>,
}

fn default_sweep_lo() -> f64 {
    0.5
}

fn default_sweep_hi() -> f64 {
    1.5
}

fn default_sweep_step() -> f64 {
    0.05
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), String> {
        if self.run.zetas.is_empty() {
            return Err("run.zetas must list at least one scale".into());
        }
        if self.run.zetas.iter().any(|z| !z.is_finite()) {
            return Err("run.zetas entries must be finite".into());
        }
        Ok(())
    }
}
