//! Subcommand implementations.
//!
//! Every command is deterministic given (config, seed): artifacts contain no
//! timestamps; wall-clock data goes into a separate `run_meta.json` so that
//! reruns produce byte-identical checkpoints, demos, metrics, and CSVs.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use rime_core::adversary::BankMode;
use rime_core::env::{DynamicsParam, EnvFamily, EnvSpec, windy_grid_mdp};
use rime_core::error::Error;
use rime_core::experts::{
    evaluate_expert, pd_expert, record_demos, train_expert_ppo, value_iteration, DemoSet,
    ExpertPolicy,
};
use rime_core::imitate::{
    bc_train, train, BcConfig, IlAlgorithm, IlConfig, TrainOutput, TrainState,
};
use rime_core::neural::{Container, GaussianPolicyHead};
use rime_core::par::Parallelism;
use rime_core::robust::{compare, sweep, sweep_csv_name, EvalPolicy, RobustnessReport, SweepSpec};
use rime_core::rng::child_seed;
use rime_core::tabular::{
    bellman_flow_residual, classification_objective_at_optimum,
    discriminator_objective_at_optimum, flow_rank_report, js_divergence,
    optimum_weighting_deviation, policy_js_objective, random_mdp, random_mdp_family,
    random_policy, solve_occupancy, ExpertWeights,
};

use crate::config::{DemoSection, RunConfig, SweepSection};

/// Failures, bucketed by exit code: 2 for configuration problems, 3 for
/// missing or malformed artifacts, 4 for numerical aborts, 1 for failed
/// theory checks.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(Error),
    ChecksFailed(usize),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::Run(e) => write!(f, "{e}"),
            Self::ChecksFailed(n) => write!(f, "{n} theory check(s) failed"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Run(Error::InvalidSpec(_)) => 2,
            Self::Run(Error::NonFinite(_)) | Self::Run(Error::NumericalAbort(_)) => 4,
            Self::Run(_) => 3,
            Self::ChecksFailed(_) => 1,
        }
    }
}

pub type CmdResult = Result<(), CliError>;

/// Shared command context: resolved config, output directory, seed, workers.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub par: Parallelism,
}

impl Ctx {
    pub fn new(
        cfg: RunConfig,
        out_override: Option<PathBuf>,
        seed_override: Option<u64>,
        workers: usize,
    ) -> Self {
        let out = out_override.unwrap_or_else(|| cfg.run.out_dir.clone());
        let seed = seed_override.unwrap_or(cfg.run.seed);
        Self {
            cfg,
            out,
            seed,
            par: Parallelism::with_workers(workers),
        }
    }

    fn family(&self) -> Result<EnvFamily, CliError> {
        EnvFamily::parse(&self.cfg.run.family).map_err(|e| CliError::Config(e.to_string()))
    }

    fn spec_at(&self, family: EnvFamily, zeta: f64) -> EnvSpec {
        let dynamics = DynamicsParam::from_pairs(&[(self.cfg.run.zeta_param.as_str(), zeta)]);
        match family {
            EnvFamily::WindyGrid => EnvSpec::windy_grid(dynamics),
            EnvFamily::PointMass1D => EnvSpec::point_mass(dynamics),
        }
    }

    fn ensure_out(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::Run(Error::Io(e)))
    }

    fn expert_path(&self, zeta: f64) -> PathBuf {
        self.out
            .join(format!("expert_{}_{}.ntc", self.cfg.run.zeta_param, zeta))
    }

    fn demo_path(&self, zeta: f64) -> PathBuf {
        self.out
            .join(format!("demos_{}_{}.demo.txt", self.cfg.run.zeta_param, zeta))
    }
}

/// Wall-clock information, quarantined away from the deterministic
/// artifacts.
#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    started_unix_s: u64,
    duration_s: f64,
    workers: usize,
}

fn write_meta(out: &Path, command: &str, started: SystemTime, t0: Instant, workers: usize) {
    let meta = RunMeta {
        command,
        started_unix_s: started
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        duration_s: t0.elapsed().as_secs_f64(),
        workers,
    };
    if let Ok(text) = serde_json::to_string_pretty(&meta) {
        let _ = std::fs::write(out.join("run_meta.json"), text);
    }
}

// ---------------------------------------------------------------------------
// train-expert
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ExpertReportEntry {
    zeta: f64,
    mean_return: f64,
    file: String,
}

pub fn cmd_train_expert(ctx: &Ctx) -> CmdResult {
    let started = SystemTime::now();
    let t0 = Instant::now();
    let family = ctx.family()?;
    let section = ctx
        .cfg
        .expert
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [expert] section".into()))?;
    ctx.ensure_out()?;

    let mut report = Vec::new();
    for (k, &zeta) in ctx.cfg.run.zetas.iter().enumerate() {
        let spec = ctx.spec_at(family, zeta);
        let expert = match section.kind.as_str() {
            "pd" => {
                if family != EnvFamily::PointMass1D {
                    return Err(CliError::Config(
                        "expert.kind = \"pd\" applies to the point-mass family".into(),
                    ));
                }
                pd_expert(&spec.dynamics)
            }
            "value-iteration" => {
                if family != EnvFamily::WindyGrid {
                    return Err(CliError::Config(
                        "expert.kind = \"value-iteration\" applies to the grid family".into(),
                    ));
                }
                let wind = spec.dynamics.get("wind");
                let (mdp, rewards) = windy_grid_mdp(wind)?;
                ExpertPolicy::Tabular(value_iteration(&mdp, &rewards, 1e-10)?)
            }
            "ppo" => train_expert_ppo(
                &spec,
                section.total_steps,
                child_seed(ctx.seed, "expert-train", k as u64),
            )?,
            other => {
                return Err(CliError::Config(format!("unknown expert kind {other:?}")));
            }
        };
        let mean_return = evaluate_expert(
            &expert,
            &spec,
            section.eval_episodes,
            child_seed(ctx.seed, "expert-eval", k as u64),
        )?;
        let path = ctx.expert_path(zeta);
        expert.save_to_path(&path)?;
        println!(
            "expert {}={zeta}: mean return {mean_return:.4} -> {}",
            ctx.cfg.run.zeta_param,
            path.display()
        );
        report.push(ExpertReportEntry {
            zeta,
            mean_return,
            file: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        });
    }
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Run(Error::Format(e.to_string())))?;
    std::fs::write(ctx.out.join("experts_report.json"), text)
        .map_err(|e| CliError::Run(Error::Io(e)))?;
    write_meta(&ctx.out, "train-expert", started, t0, ctx.par.workers());
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-demos
// ---------------------------------------------------------------------------

pub fn cmd_gen_demos(ctx: &Ctx) -> CmdResult {
    let started = SystemTime::now();
    let t0 = Instant::now();
    let family = ctx.family()?;
    let section = ctx.cfg.demos.clone().unwrap_or(DemoSection {
        n_traj: 50,
        sigma: 0.02,
        state_only: false,
    });
    ctx.ensure_out()?;

    for (k, &zeta) in ctx.cfg.run.zetas.iter().enumerate() {
        let path = ctx.expert_path(zeta);
        let expert = ExpertPolicy::load_from_path(&path)
            .map_err(|e| Error::Format(format!("expert file {}: {e}", path.display())))?;
        let spec = ctx.spec_at(family, zeta);
        let set = record_demos(
            &expert,
            &spec,
            section.n_traj,
            section.sigma,
            section.state_only,
            child_seed(ctx.seed, "demos", k as u64),
        )?;
        let path = ctx.demo_path(zeta);
        set.write_to_path(&path)?;
        println!(
            "demos {}={zeta}: {} trajectories, {} transitions -> {}",
            ctx.cfg.run.zeta_param,
            set.trajectories.len(),
            set.n_transitions(),
            path.display()
        );
    }
    write_meta(&ctx.out, "gen-demos", started, t0, ctx.par.workers());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-il
// ---------------------------------------------------------------------------

fn load_demo_sets(ctx: &Ctx, keep_traj: Option<usize>) -> Result<Vec<DemoSet>, CliError> {
    let mut demos = Vec::new();
    for &zeta in &ctx.cfg.run.zetas {
        let path = ctx.demo_path(zeta);
        let mut set = DemoSet::read_from_path(&path)
            .map_err(|e| Error::Format(format!("demo file {}: {e}", path.display())))?;
        if let Some(k) = keep_traj {
            if k == 0 {
                return Err(CliError::Config("il.demo_traj must be ≥ 1".into()));
            }
            set.trajectories.truncate(k);
        }
        demos.push(set);
    }
    Ok(demos)
}

pub fn cmd_train_il(ctx: &Ctx) -> CmdResult {
    let started = SystemTime::now();
    let t0 = Instant::now();
    let family = ctx.family()?;
    let section = ctx
        .cfg
        .il
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [il] section".into()))?;
    let algorithm =
        IlAlgorithm::parse(&section.algorithm).map_err(|e| CliError::Config(e.to_string()))?;
    ctx.ensure_out()?;
    let demos = load_demo_sets(ctx, section.demo_traj)?;

    if algorithm == IlAlgorithm::Bc {
        let out = bc_train(&demos, &BcConfig::default(), ctx.seed)?;
        let mut c = Container::new();
        c.put_str("bc.kind", "bc");
        out.policy.save_into(&mut c, "bc.policy");
        let path = ctx.out.join("bc_checkpoint.ntc");
        c.write_to(std::io::BufWriter::new(
            std::fs::File::create(&path).map_err(Error::Io)?,
        ))?;
        let mut lines = Vec::new();
        for (set_idx, losses) in out.val_losses.iter().enumerate() {
            for (epoch, loss) in losses.iter().enumerate() {
                lines.push(format!(
                    "{{\"set\":{set_idx},\"epoch\":{epoch},\"val_loss\":{loss}}}"
                ));
            }
        }
        std::fs::write(ctx.out.join("metrics.jsonl"), lines.join("\n") + "\n")
            .map_err(Error::Io)?;
        println!(
            "bc: {} epochs, checkpoint -> {}",
            out.epochs_run,
            path.display()
        );
        write_meta(&ctx.out, "train-il", started, t0, ctx.par.workers());
        return Ok(());
    }

    let disc_mode = match section.disc_mode.as_str() {
        "independent" => BankMode::Independent,
        "weight-shared" => BankMode::WeightShared,
        other => {
            return Err(CliError::Config(format!(
                "unknown disc_mode {other:?} (independent | weight-shared)"
            )));
        }
    };
    let specs: Vec<EnvSpec> = if algorithm == IlAlgorithm::SnempeMax {
        vec![ctx.spec_at(family, 1.0)]
    } else {
        ctx.cfg
            .run
            .zetas
            .iter()
            .map(|&z| ctx.spec_at(family, z))
            .collect()
    };

    // Table policies take bigger steps than network policies; apply the
    // family default unless the manifest overrides it.
    let (default_plr, default_vlr) = match family {
        EnvFamily::WindyGrid => (0.05, 0.1),
        EnvFamily::PointMass1D => (3e-4, 3e-4),
    };
    let mut cfg = IlConfig {
        algorithm,
        state_only: section.state_only,
        disc_mode,
        use_lfiw: section.use_lfiw,
        total_steps: section.total_steps,
        kappa: section.kappa,
        ..IlConfig::default()
    };
    cfg.ppo.batch_size = section.batch_size;
    cfg.ppo.gamma = specs[0].gamma;
    cfg.ppo.policy_lr = section.policy_lr.unwrap_or(default_plr);
    cfg.ppo.value_lr = section.value_lr.unwrap_or(default_vlr);
    cfg.ppo.entropy_coef = section.entropy_coef;
    cfg.disc.epochs = section.disc_epochs;
    cfg.disc.minibatch = section.disc_minibatch;
    cfg.disc.lr = section.disc_lr;

    let abort_path = ctx.out.join("abort_checkpoint.ntc");
    let TrainOutput { state, metrics } = train(
        &cfg,
        &specs,
        &demos,
        ctx.seed,
        &ctx.par,
        Some(abort_path.as_path()),
    )?;

    let ckpt = ctx.out.join("il_checkpoint.ntc");
    state.save_to_path(&ckpt)?;
    std::fs::write(
        ctx.out.join("metrics.jsonl"),
        metrics.records.join("\n") + "\n",
    )
    .map_err(Error::Io)?;
    std::fs::write(ctx.out.join("events.log"), metrics.events.join("\n") + "\n")
        .map_err(Error::Io)?;
    println!(
        "{}: {} iterations, {} env steps, trace {} -> {}",
        algorithm.name(),
        state.iteration,
        state.steps_consumed,
        metrics.trace_hash(),
        ckpt.display()
    );
    write_meta(&ctx.out, "train-il", started, t0, ctx.par.workers());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// A checkpointed policy of any trainable kind, plus its algorithm label.
fn load_sweep_policy(path: &Path) -> Result<(Box<dyn EvalPolicy + Sync>, String), CliError> {
    let file = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Format(format!("checkpoint {}: {e}", path.display())))?,
    );
    let c = Container::read_from(file)?;
    if c.str("il.algorithm").is_ok() {
        let state = TrainState::load_from(&c)?;
        let name = state.algorithm.name().to_string();
        Ok((Box::new(state.policy), name))
    } else if c.str("bc.kind").is_ok() {
        let policy = GaussianPolicyHead::load_from(&c, "bc.policy")?;
        Ok((Box::new(policy), "bc".to_string()))
    } else {
        let expert = ExpertPolicy::load_from(&c, "expert")?;
        Ok((Box::new(expert), "expert".to_string()))
    }
}

pub fn cmd_sweep(ctx: &Ctx) -> CmdResult {
    let started = SystemTime::now();
    let t0 = Instant::now();
    let family = ctx.family()?;
    let section = ctx.cfg.sweep.clone().unwrap_or(SweepSection {
        param: None,
        lo: 0.5,
        hi: 1.5,
        step: 0.05,
        episodes: 10,
        checkpoint: None,
    });
    ctx.ensure_out()?;

    let ckpt_path = match &section.checkpoint {
        Some(rel) => ctx.out.join(rel),
        None => {
            let il = ctx.out.join("il_checkpoint.ntc");
            let bc = ctx.out.join("bc_checkpoint.ntc");
            if il.exists() {
                il
            } else if bc.exists() {
                bc
            } else {
                return Err(CliError::Run(Error::Format(format!(
                    "no checkpoint found in {} (looked for il_checkpoint.ntc, bc_checkpoint.ntc)",
                    ctx.out.display()
                ))));
            }
        }
    };
    let (policy, algorithm) = load_sweep_policy(&ckpt_path)?;

    let param = section
        .param
        .clone()
        .unwrap_or_else(|| ctx.cfg.run.zeta_param.clone());
    let mut spec = SweepSpec::one_axis(&param, section.lo, section.hi, section.step);
    spec.episodes_per_point = section.episodes;
    let report = sweep(
        policy.as_ref(),
        family,
        &spec,
        child_seed(ctx.seed, "sweep-cmd", 0),
        &ctx.par,
    )?;

    let csv_name = sweep_csv_name(&ctx.cfg.run.id, &algorithm, family.name());
    let csv_path = ctx.out.join(&csv_name);
    report.write_csv(&csv_path)?;
    let json_path = ctx
        .out
        .join(csv_name.replace(".sweep.csv", ".sweep.json"));
    std::fs::write(&json_path, report.to_json()?).map_err(Error::Io)?;
    println!(
        "sweep {algorithm} over {param} [{}, {}]: mean {:.4} / min {:.4} -> {}",
        section.lo,
        section.hi,
        report.mean_over_range,
        report.min_over_range,
        csv_path.display()
    );
    write_meta(&ctx.out, "sweep", started, t0, ctx.par.workers());
    Ok(())
}

// ---------------------------------------------------------------------------
// verify-theory
// ---------------------------------------------------------------------------

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn theory_checks(seed: u64) -> Vec<Check> {
    use rime_core::rng::stream;
    let mut checks = Vec::new();

    // Exact occupancies satisfy the discounted flow equations and integrate
    // to the discounted horizon.
    {
        let mut rng = stream(seed, "verify-flow", 0);
        let mut worst_residual = 0.0f64;
        let mut worst_mass = 0.0f64;
        for _ in 0..20 {
            let mdp = random_mdp(6, 3, 0.9, &mut rng);
            let policy = random_policy(6, 3, &mut rng);
            let occ = solve_occupancy(&mdp, &policy).expect("solvable flow system");
            worst_residual = worst_residual.max(bellman_flow_residual(&mdp, &occ));
            worst_mass = worst_mass.max((occ.total() - 1.0 / (1.0 - 0.9)).abs());
        }
        checks.push(Check {
            name: "occupancy-flow-identity",
            pass: worst_residual <= 1e-10 && worst_mass <= 1e-8,
            detail: format!("max residual {worst_residual:.2e}, max mass error {worst_mass:.2e}"),
        });
    }

    // The mixture flow system over two environments has more unknowns than
    // independent equations, yet the exact per-environment solution
    // satisfies it.
    {
        let mut rng = stream(seed, "verify-rank", 0);
        let mut all_under = true;
        let mut worst_res = 0.0f64;
        for _ in 0..10 {
            let family = random_mdp_family(2, 5, 2, 0.9, &mut rng);
            let policy = random_policy(5, 2, &mut rng);
            let report = flow_rank_report(&family, &policy).expect("rank report");
            all_under &= report.underdetermined && report.rank < report.n_unknowns;
            worst_res = worst_res.max(report.mixture_residual);
        }
        checks.push(Check {
            name: "mixture-flow-underdetermined",
            pass: all_under && worst_res <= 1e-8,
            detail: format!("rank deficit on all instances, max residual {worst_res:.2e}"),
        });
    }

    // The policy-side weighted JS objective equals the discriminator-side
    // objective at the closed-form optimum.
    {
        let mut rng = stream(seed, "verify-objective", 0);
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let n_envs = 1 + trial % 3;
            let mdps = random_mdp_family(n_envs, 4, 3, 0.9, &mut rng);
            let policy = random_policy(4, 3, &mut rng);
            let experts: Vec<_> = (0..n_envs).map(|_| random_policy(4, 3, &mut rng)).collect();
            let weights = ExpertWeights::random(4, n_envs, &mut rng);
            let js = policy_js_objective(&mdps, &policy, &experts, &weights).expect("js");
            let disc = discriminator_objective_at_optimum(&mdps, &policy, &experts, &weights)
                .expect("disc");
            worst = worst.max((js - disc).abs());
        }
        checks.push(Check {
            name: "objective-identity",
            pass: worst <= 1e-8,
            detail: format!("max |policy-side − discriminator-side| = {worst:.2e}"),
        });
    }

    // Strictly positive per-state weights leave the optimal discriminator
    // untouched, even at extreme scales.
    {
        let mut rng = stream(seed, "verify-weights", 0);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let mdp = random_mdp(5, 2, 0.9, &mut rng);
            let pol_a = random_policy(5, 2, &mut rng);
            let pol_b = random_policy(5, 2, &mut rng);
            let rho_pi = solve_occupancy(&mdp, &pol_a).expect("occupancy");
            let rho_e = solve_occupancy(&mdp, &pol_b).expect("occupancy");
            use rand::Rng;
            let weights: Vec<f64> = (0..5).map(|_| 0.1 + rng.random::<f64>()).collect();
            let scaled: Vec<f64> = weights.iter().map(|w| w * 1e6).collect();
            worst = worst
                .max(optimum_weighting_deviation(&rho_pi, &rho_e, &weights).expect("deviation"));
            worst = worst
                .max(optimum_weighting_deviation(&rho_pi, &rho_e, &scaled).expect("deviation"));
        }
        checks.push(Check {
            name: "weighting-invariance",
            pass: worst <= 1e-10,
            detail: format!("max optimum deviation {worst:.2e}"),
        });
    }

    // The two-sample classification objective at its optimum is an affine
    // function of the Jensen-Shannon divergence.
    {
        let mut rng = stream(seed, "verify-js", 0);
        use rand::Rng;
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let mut p: Vec<f64> = (0..6).map(|_| 0.05 + rng.random::<f64>()).collect();
            let mut q: Vec<f64> = (0..6).map(|_| 0.05 + rng.random::<f64>()).collect();
            let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
            p.iter_mut().for_each(|x| *x /= sp);
            q.iter_mut().for_each(|x| *x /= sq);
            let lhs = classification_objective_at_optimum(&p, &q).expect("objective");
            let rhs = 2.0 * js_divergence(&p, &q).expect("js") - 2.0 * std::f64::consts::LN_2;
            worst = worst.max((lhs - rhs).abs());
        }
        checks.push(Check {
            name: "classification-js-link",
            pass: worst <= 1e-12,
            detail: format!("max identity gap {worst:.2e}"),
        });
    }

    checks
}

pub fn cmd_verify_theory(seed: u64, out: Option<&Path>) -> CmdResult {
    let checks = theory_checks(seed);
    let mut lines = Vec::new();
    let mut failures = 0;
    for check in &checks {
        let status = if check.pass { "PASS" } else { "FAIL" };
        let line = format!("{status} {} ({})", check.name, check.detail);
        println!("{line}");
        lines.push(line);
        if !check.pass {
            failures += 1;
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(Error::Io)?;
        std::fs::write(dir.join("theory_report.txt"), lines.join("\n") + "\n")
            .map_err(Error::Io)?;
    }
    if failures > 0 {
        return Err(CliError::ChecksFailed(failures));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

pub fn cmd_compare(files: &[PathBuf], out: Option<&Path>) -> CmdResult {
    if files.is_empty() {
        return Err(CliError::Config(
            "compare needs at least one .sweep.json file".into(),
        ));
    }
    let mut named = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(path).map_err(Error::Io)?;
        let report: RobustnessReport = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
            .trim_end_matches(".sweep.json")
            .to_string();
        named.push((name, report));
    }
    let table = compare(&named)?;
    print!("{}", table.to_text());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(Error::Io)?;
        std::fs::write(dir.join("comparison.txt"), table.to_text()).map_err(Error::Io)?;
        std::fs::write(dir.join("comparison.csv"), table.to_csv()).map_err(Error::Io)?;
    }
    Ok(())
}
