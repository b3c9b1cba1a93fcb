//! Robustness sweeps: evaluate a fixed policy across a grid of dynamics
//! parameters and aggregate the per-point returns into the mean-over-range
//! and min-over-range summaries used for algorithm comparisons.
//!
//! Grid points are independent, so they evaluate in parallel; every point
//! derives its RNG streams from (seed, point index), which makes the report
//! identical no matter how many workers run it.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{make_env, DynamicsParam, EnvFamily, EnvSpec};
use crate::error::{Error, Result};
use crate::experts::ExpertPolicy;
use crate::par::Parallelism;
use crate::ppo::PolicyModel;
use crate::rng;

pub const DEFAULT_EPISODES_PER_POINT: usize = 10;
/// Aggregation window in units of the nominal scale ζ₀ = 1.
pub const DEFAULT_AGG_RANGE: (f64, f64) = (0.5, 1.5);

/// Anything a sweep can evaluate: a state-in, action-out map with an
/// optional deterministic (mean/argmax) mode.
pub trait EvalPolicy {
    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng, deterministic: bool) -> Result<Vec<f64>>;
}

impl<P: PolicyModel> EvalPolicy for P {
    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng, deterministic: bool) -> Result<Vec<f64>> {
        PolicyModel::act(self, state, rng, deterministic)
    }
}

impl EvalPolicy for ExpertPolicy {
    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng, deterministic: bool) -> Result<Vec<f64>> {
        ExpertPolicy::act(self, state, rng, deterministic)
    }
}

// ---------------------------------------------------------------------------
// Sweep specification
// ---------------------------------------------------------------------------

/// One swept dynamics parameter: values `lo, lo+step, …, hi` (endpoints
/// included exactly).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepAxis {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl SweepAxis {
    pub fn new(name: &str, lo: f64, hi: f64, step: f64) -> Self {
        Self {
            name: name.into(),
            lo,
            hi,
            step,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo <= self.hi) {
            return Err(Error::InvalidSpec(format!(
                "axis {}: lo {} > hi {}",
                self.name, self.lo, self.hi
            )));
        }
        if !(self.step > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "axis {}: step {} must be positive",
                self.name, self.step
            )));
        }
        Ok(())
    }

    /// Grid values along this axis. Computed from the point count rather
    /// than by repeated addition so both endpoints land exactly.
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step).round() as usize + 1;
        if n <= 1 {
            return vec![self.lo];
        }
        (0..n)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Full sweep description: the cartesian grid over all axes, how many
/// episodes to run per point, and whether actions are deterministic.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSpec {
    pub axes: Vec<SweepAxis>,
    pub episodes_per_point: usize,
    pub deterministic: bool,
    /// Range (in ζ units, applied to every axis) over which the aggregate
    /// mean and min are computed.
    pub agg_range: (f64, f64),
}

impl SweepSpec {
    /// One axis from `lo` to `hi`, default episode count, mean actions.
    pub fn one_axis(name: &str, lo: f64, hi: f64, step: f64) -> Self {
        Self {
            axes: vec![SweepAxis::new(name, lo, hi, step)],
            episodes_per_point: DEFAULT_EPISODES_PER_POINT,
            deterministic: true,
            agg_range: DEFAULT_AGG_RANGE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::InvalidSpec("sweep needs at least one axis".into()));
        }
        for axis in &self.axes {
            axis.validate()?;
        }
        if self.episodes_per_point == 0 {
            return Err(Error::InvalidSpec("episodes_per_point must be ≥ 1".into()));
        }
        if !(self.agg_range.0 <= self.agg_range.1) {
            return Err(Error::InvalidSpec("aggregate range is inverted".into()));
        }
        Ok(())
    }

    /// Cartesian product of all axis values, row-major in axis order.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let per_axis: Vec<Vec<f64>> = self.axes.iter().map(SweepAxis::values).collect();
        let mut points: Vec<Vec<f64>> = vec![Vec::new()];
        for values in &per_axis {
            let mut next = Vec::with_capacity(points.len() * values.len());
            for prefix in &points {
                for &v in values {
                    let mut point = prefix.clone();
                    point.push(v);
                    next.push(point);
                }
            }
            points = next;
        }
        points
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Returns at one grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Axis values, aligned with the spec's axis order.
    pub zeta: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over episodes (0 for a single episode).
    pub std: f64,
    pub n_episodes: usize,
}

/// Outcome of a full sweep, including the range aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub family: String,
    pub axes: Vec<String>,
    pub episodes_per_point: usize,
    pub deterministic: bool,
    pub points: Vec<SweepPoint>,
    pub agg_range: (f64, f64),
    /// Mean of per-point mean returns over grid points inside the range.
    pub mean_over_range: f64,
    /// Minimum per-point mean return inside the range.
    pub min_over_range: f64,
}

impl RobustnessReport {
    /// Points whose every coordinate lies inside the aggregate range.
    pub fn in_range(&self) -> impl Iterator<Item = &SweepPoint> {
        let (lo, hi) = self.agg_range;
        self.points
            .iter()
            .filter(move |p| p.zeta.iter().all(|&z| z >= lo - 1e-12 && z <= hi + 1e-12))
    }

    /// CSV with one row per grid point: ζ columns, then mean, std, episode
    /// count.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for name in &self.axes {
            out.push_str(&format!("zeta_{name},"));
        }
        out.push_str("mean,std,n_episodes\n");
        for p in &self.points {
            for z in &p.zeta {
                out.push_str(&format!("{z:.17e},"));
            }
            out.push_str(&format!("{:.17e},{:.17e},{}\n", p.mean, p.std, p.n_episodes));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("report json: {e}")))
    }
}

/// Canonical sweep artifact name: `{run_id}_{algorithm}_{family}.sweep.csv`.
pub fn sweep_csv_name(run_id: &str, algorithm: &str, family: &str) -> String {
    format!("{run_id}_{algorithm}_{family}.sweep.csv")
}

// ---------------------------------------------------------------------------
// Sweep execution
// ---------------------------------------------------------------------------

fn base_spec(family: EnvFamily, dynamics: DynamicsParam) -> EnvSpec {
    match family {
        EnvFamily::WindyGrid => EnvSpec::windy_grid(dynamics),
        EnvFamily::PointMass1D => EnvSpec::point_mass(dynamics),
    }
}

/// Undiscounted return of one episode under `policy`.
fn run_episode<P: EvalPolicy + ?Sized>(
    env: &mut crate::env::Environment,
    policy: &P,
    rng: &mut ChaCha8Rng,
    deterministic: bool,
) -> Result<f64> {
    let mut state = env.reset();
    let mut total = 0.0;
    loop {
        let action = policy.act(&state, rng, deterministic)?;
        let tr = env.step(&action)?;
        total += tr.reward;
        if tr.done {
            return Ok(total);
        }
        state = tr.next_state;
    }
}

/// Evaluate `policy` over the sweep grid. Each grid point instantiates the
/// family environment at that point's dynamics, runs the configured episode
/// count, and records the return statistics; aggregates cover the declared
/// range. Deterministic given (policy, spec, seed) regardless of worker
/// count.
pub fn sweep<P: EvalPolicy + Sync + ?Sized>(
    policy: &P,
    family: EnvFamily,
    spec: &SweepSpec,
    seed: u64,
    par: &Parallelism,
) -> Result<RobustnessReport> {
    spec.validate()?;
    let grid = spec.grid();
    if grid.is_empty() {
        return Err(Error::InvalidSpec("sweep grid is empty".into()));
    }
    for axis in &spec.axes {
        if !family.dynamics_registry().contains(&axis.name.as_str()) {
            return Err(Error::InvalidSpec(format!(
                "family {} has no dynamics parameter {:?}",
                family.name(),
                axis.name
            )));
        }
    }

    let points: Vec<Result<SweepPoint>> = par.map_range(grid.len(), |idx| {
        let zeta = &grid[idx];
        let pairs: Vec<(&str, f64)> = spec
            .axes
            .iter()
            .zip(zeta)
            .map(|(a, &v)| (a.name.as_str(), v))
            .collect();
        let env_spec = base_spec(family, DynamicsParam::from_pairs(&pairs));
        let mut env = make_env(&env_spec, rng::child_seed(seed, "sweep-env", idx as u64))?;
        let mut act_rng = rng::stream(seed, "sweep-act", idx as u64);
        let mut returns = Vec::with_capacity(spec.episodes_per_point);
        for _ in 0..spec.episodes_per_point {
            returns.push(run_episode(&mut env, policy, &mut act_rng, spec.deterministic)?);
        }
        let n = returns.len();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(SweepPoint {
            zeta: zeta.clone(),
            mean,
            std,
            n_episodes: n,
        })
    });
    let points = points.into_iter().collect::<Result<Vec<_>>>()?;

    let mut report = RobustnessReport {
        family: family.name().to_string(),
        axes: spec.axes.iter().map(|a| a.name.clone()).collect(),
        episodes_per_point: spec.episodes_per_point,
        deterministic: spec.deterministic,
        points,
        agg_range: spec.agg_range,
        mean_over_range: f64::NAN,
        min_over_range: f64::NAN,
    };
    let in_range: Vec<f64> = report.in_range().map(|p| p.mean).collect();
    if in_range.is_empty() {
        return Err(Error::InvalidSpec(
            "no grid point falls inside the aggregate range".into(),
        ));
    }
    report.mean_over_range = in_range.iter().sum::<f64>() / in_range.len() as f64;
    report.min_over_range = in_range.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Comparisons
// ---------------------------------------------------------------------------

/// One line of a comparison table.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub mean: f64,
    pub min: f64,
    /// Whether this row attains the best (maximum) mean / min among all
    /// rows; ties are all marked.
    pub best_mean: bool,
    pub best_min: bool,
}

/// Text + CSV rendering of a set of named reports.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// Plain-text table with `mean / min` cells; `*` marks the per-column
    /// maxima.
    pub fn to_text(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max("name".len());
        let mut out = format!("{:<name_w$}  mean / min\n", "name");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<name_w$}  {:.1}{} / {:.1}{}\n",
                r.name,
                r.mean,
                if r.best_mean { "*" } else { "" },
                r.min,
                if r.best_min { "*" } else { "" },
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,mean,min,cell,best_mean,best_min\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.1} / {:.1},{},{}\n",
                r.name, r.mean, r.min, r.mean, r.min, r.best_mean, r.best_min
            ));
        }
        out
    }
}

/// Tabulate named reports, marking the per-column maxima (ties all marked).
pub fn compare(reports: &[(String, RobustnessReport)]) -> Result<Comparison> {
    if reports.is_empty() {
        return Err(Error::InvalidSpec("nothing to compare".into()));
    }
    let best_mean = reports
        .iter()
        .map(|(_, r)| r.mean_over_range)
        .fold(f64::NEG_INFINITY, f64::max);
    let best_min = reports
        .iter()
        .map(|(_, r)| r.min_over_range)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Comparison {
        rows: reports
            .iter()
            .map(|(name, r)| ComparisonRow {
                name: name.clone(),
                mean: r.mean_over_range,
                min: r.min_over_range,
                best_mean: r.mean_over_range == best_mean,
                best_min: r.min_over_range == best_min,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::pd_expert;
    use crate::ppo::{SoftmaxTablePolicy, StateIndexer};

    #[test]
    fn range_grid_has_21_points_with_exact_endpoints() {
        let spec = SweepSpec::one_axis("mass", 0.5, 1.5, 0.05);
        let grid = spec.grid();
        assert_eq!(grid.len(), 21);
        assert_eq!(grid[0][0], 0.5);
        assert_eq!(grid[20][0], 1.5);
        assert!(grid.iter().any(|p| (p[0] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn two_axis_grid_has_36_points() {
        let spec = SweepSpec {
            axes: vec![
                SweepAxis::new("gravity", 0.5, 1.5, 0.2),
                SweepAxis::new("mass", 0.5, 1.5, 0.2),
            ],
            episodes_per_point: 1,
            deterministic: true,
            agg_range: DEFAULT_AGG_RANGE,
        };
        let grid = spec.grid();
        assert_eq!(grid.len(), 36);
        // Corner points are exact.
        assert_eq!(grid[0], vec![0.5, 0.5]);
        assert_eq!(grid[35], vec![1.5, 1.5]);
    }

    #[test]
    fn deterministic_grid_point_collapses_mean_and_min() {
        // Wind scale 0 makes the grid world fully deterministic and the
        // start state is fixed, so a deterministic policy earns the same
        // return in every episode: mean == min and std == 0.
        let policy = SoftmaxTablePolicy::new(25, 4, StateIndexer::WindyGrid, 2);
        let spec = SweepSpec {
            axes: vec![SweepAxis::new("wind", 0.0, 0.0, 1.0)],
            episodes_per_point: 5,
            deterministic: true,
            agg_range: (0.0, 1.0),
        };
        let report = sweep(
            &policy,
            EnvFamily::WindyGrid,
            &spec,
            3,
            &Parallelism::sequential(),
        )
        .unwrap();
        assert_eq!(report.points.len(), 1);
        assert_eq!(report.points[0].std, 0.0);
        assert_eq!(report.mean_over_range, report.min_over_range);
        assert_eq!(report.mean_over_range, report.points[0].mean);
    }

    #[test]
    fn sweeps_are_deterministic_and_worker_independent() {
        let dynamics = DynamicsParam::nominal();
        let expert = pd_expert(&dynamics);
        let spec = SweepSpec::one_axis("mass", 0.5, 1.5, 0.25);
        let a = sweep(
            &expert,
            EnvFamily::PointMass1D,
            &spec,
            7,
            &Parallelism::sequential(),
        )
        .unwrap();
        let b = sweep(
            &expert,
            EnvFamily::PointMass1D,
            &spec,
            7,
            &Parallelism::with_workers(3),
        )
        .unwrap();
        let means_a: Vec<f64> = a.points.iter().map(|p| p.mean).collect();
        let means_b: Vec<f64> = b.points.iter().map(|p| p.mean).collect();
        assert_eq!(means_a, means_b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn aggregates_cover_only_the_declared_range() {
        let dynamics = DynamicsParam::nominal();
        let expert = pd_expert(&dynamics);
        // Grid wider than the aggregation window.
        let mut spec = SweepSpec::one_axis("mass", 0.3, 1.9, 0.2);
        spec.episodes_per_point = 2;
        let report = sweep(
            &expert,
            EnvFamily::PointMass1D,
            &spec,
            11,
            &Parallelism::sequential(),
        )
        .unwrap();
        let inside: Vec<f64> = report.in_range().map(|p| p.mean).collect();
        assert!(inside.len() < report.points.len());
        let mean = inside.iter().sum::<f64>() / inside.len() as f64;
        assert!((report.mean_over_range - mean).abs() < 1e-12);
        assert!(report.min_over_range <= report.mean_over_range);
        // Both window endpoints appear as grid points.
        assert!(report.points.iter().any(|p| (p.zeta[0] - 0.5).abs() < 1e-9));
        assert!(report.points.iter().any(|p| (p.zeta[0] - 1.5).abs() < 1e-9));
    }

    #[test]
    fn unknown_axis_names_are_rejected() {
        let policy = SoftmaxTablePolicy::new(25, 4, StateIndexer::WindyGrid, 2);
        let spec = SweepSpec::one_axis("mass", 0.5, 1.5, 0.5);
        let err = sweep(
            &policy,
            EnvFamily::WindyGrid,
            &spec,
            0,
            &Parallelism::sequential(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)));
    }

    fn stub_report(mean: f64, min: f64) -> RobustnessReport {
        RobustnessReport {
            family: "point-mass".into(),
            axes: vec!["mass".into()],
            episodes_per_point: 1,
            deterministic: true,
            points: Vec::new(),
            agg_range: DEFAULT_AGG_RANGE,
            mean_over_range: mean,
            min_over_range: min,
        }
    }

    #[test]
    fn comparison_marks_maxima_and_ties() {
        let reports = vec![
            ("alpha".to_string(), stub_report(2886.7, 2332.4)),
            ("beta".to_string(), stub_report(2886.7, 2000.0)),
            ("gamma".to_string(), stub_report(1000.0, 2332.4)),
        ];
        let cmp = compare(&reports).unwrap();
        assert!(cmp.rows[0].best_mean && cmp.rows[1].best_mean);
        assert!(!cmp.rows[2].best_mean);
        assert!(cmp.rows[0].best_min && cmp.rows[2].best_min);
        let text = cmp.to_text();
        assert!(text.contains("2886.7* / 2332.4*"), "got:\n{text}");
        assert!(text.contains("2886.7* / 2000.0"));
        let csv = cmp.to_csv();
        assert!(csv.contains("2886.7 / 2332.4"));
    }

    #[test]
    fn single_report_is_marked() {
        let cmp = compare(&[("only".to_string(), stub_report(-3.0, -8.0))]).unwrap();
        assert!(cmp.rows[0].best_mean && cmp.rows[0].best_min);
    }

    #[test]
    fn artifact_names_follow_the_convention() {
        assert_eq!(
            sweep_csv_name("run7", "rime", "point-mass"),
            "run7_rime_point-mass.sweep.csv"
        );
    }

    #[test]
    fn csv_layout_matches_the_declared_columns() {
        let policy = SoftmaxTablePolicy::new(25, 4, StateIndexer::WindyGrid, 2);
        let mut spec = SweepSpec::one_axis("wind", 0.5, 1.5, 0.5);
        spec.episodes_per_point = 2;
        let report = sweep(
            &policy,
            EnvFamily::WindyGrid,
            &spec,
            1,
            &Parallelism::sequential(),
        )
        .unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "zeta_wind,mean,std,n_episodes");
        assert_eq!(lines.count(), 3);
    }
}
