//! Exact occupancy-measure machinery for finite MDPs.
//!
//! This module is the verification oracle for the rest of the crate. It
//! solves discounted occupancy measures from the Bellman flow constraint by
//! direct linear algebra, evaluates the policy-space weighted-JS objective
//! and its discriminator-form counterpart exactly, and exposes the
//! closed-form optimal discriminator. Training code is tested against these
//! quantities; nothing here touches sampling or neural networks.
//!
//! Conventions: occupancy measures are *unnormalized* discounted visitation
//! sums, so a valid table sums to `1/(1-γ)`. Divergence sums use natural
//! logarithms and the measure-theoretic convention `0·log 0 = 0`; cells
//! where both measures vanish are excluded.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const WEIGHT_SUM_TOL: f64 = 1e-9;
const FLOW_RESIDUAL_TOL: f64 = 1e-10;
/// Relative singular-value cutoff for numerical rank.
const RANK_EPS: f64 = 1e-9;

fn check_distribution(v: &[f64], what: &str, tol: f64) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    if v.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidSpec(format!("{what} has a negative entry")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::InvalidSpec(format!(
            "{what} sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Finite MDP with dense transition kernel `P[s' | s, a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major: `trans[(s * n_actions + a) * n_states + s2] = P(s2 | s, a)`.
    trans: Vec<f64>,
    mu0: Vec<f64>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        trans: Vec<f64>,
        mu0: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidSpec("empty state or action space".into()));
        }
        if !(0.0..1.0).contains(&gamma) || gamma <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "discount {gamma} outside (0,1)"
            )));
        }
        if trans.len() != n_states * n_actions * n_states {
            return Err(Error::DimMismatch {
                what: "transition tensor",
                expected: n_states * n_actions * n_states,
                got: trans.len(),
            });
        }
        if mu0.len() != n_states {
            return Err(Error::DimMismatch {
                what: "initial distribution",
                expected: n_states,
                got: mu0.len(),
            });
        }
        check_distribution(&mu0, "mu0", ROW_SUM_TOL)?;
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &trans[(s * n_actions + a) * n_states..][..n_states];
                check_distribution(row, &format!("P(.|s={s},a={a})"), ROW_SUM_TOL)?;
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            trans,
            mu0,
            gamma,
        })
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

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    /// `P(s2 | s, a)`.
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.trans[(s * self.n_actions + a) * self.n_states + s2]
    }

    /// The distribution over next states for `(s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.trans[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    /// Parse the plain-text format written by [`TabularMdp::to_text`]:
    ///
    /// ```text
    /// # comments and blank lines ignored
    /// states 2
    /// actions 2
    /// gamma 0.9
    /// mu0 1 0
    /// p 0 0  0.5 0.5      # P(.|s=0,a=0)
    /// p 0 1  1 0
    /// ...
    /// ```
    ///
    /// One `p s a ...` line is required for every state-action pair.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut n_states = None;
        let mut n_actions = None;
        let mut gamma = None;
        let mut mu0: Option<Vec<f64>> = None;
        let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();

        let bad = |line_no: usize, msg: &str| {
            Error::Format(format!("mdp text line {}: {}", line_no + 1, msg))
        };

        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let floats = |items: &[&str]| -> Result<Vec<f64>> {
                items
                    .iter()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| bad(ln, &format!("bad float {t:?}")))
                    })
                    .collect()
            };
            match key {
                "states" | "actions" => {
                    let v: usize = rest
                        .first()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad(ln, "expected a count"))?;
                    if key == "states" {
                        n_states = Some(v);
                    } else {
                        n_actions = Some(v);
                    }
                }
                "gamma" => {
                    gamma = Some(
                        rest.first()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| bad(ln, "expected a float"))?,
                    );
                }
                "mu0" => mu0 = Some(floats(&rest)?),
                "p" => {
                    if rest.len() < 2 {
                        return Err(bad(ln, "expected `p s a probs...`"));
                    }
                    let s: usize = rest[0].parse().map_err(|_| bad(ln, "bad state index"))?;
                    let a: usize = rest[1].parse().map_err(|_| bad(ln, "bad action index"))?;
                    rows.push((s, a, floats(&rest[2..])?));
                }
                other => return Err(bad(ln, &format!("unknown key {other:?}"))),
            }
        }

        let n_states = n_states.ok_or_else(|| Error::Format("missing `states`".into()))?;
        let n_actions = n_actions.ok_or_else(|| Error::Format("missing `actions`".into()))?;
        let gamma = gamma.ok_or_else(|| Error::Format("missing `gamma`".into()))?;
        let mu0 = mu0.ok_or_else(|| Error::Format("missing `mu0`".into()))?;
        let mut trans = vec![f64::NAN; n_states * n_actions * n_states];
        for (s, a, probs) in rows {
            if s >= n_states || a >= n_actions || probs.len() != n_states {
                return Err(Error::Format(format!(
                    "transition row (s={s}, a={a}) out of range or wrong length"
                )));
            }
            trans[(s * n_actions + a) * n_states..][..n_states].copy_from_slice(&probs);
        }
        if trans.iter().any(|x| x.is_nan()) {
            return Err(Error::Format("missing transition rows".into()));
        }
        Self::new(n_states, n_actions, trans, mu0, gamma)
    }

    /// Serialize with 17 significant digits so `from_text` round-trips exactly.
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "states {}", self.n_states).unwrap();
        writeln!(out, "actions {}", self.n_actions).unwrap();
        writeln!(out, "gamma {:.17e}", self.gamma).unwrap();
        write!(out, "mu0").unwrap();
        for x in &self.mu0 {
            write!(out, " {x:.17e}").unwrap();
        }
        out.push('\n');
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                write!(out, "p {s} {a}").unwrap();
                for x in self.transition_row(s, a) {
                    write!(out, " {x:.17e}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Stochastic policy `π[a | s]`, row-stochastic over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::DimMismatch {
                what: "policy matrix",
                expected: n_states * n_actions,
                got: probs.len(),
            });
        }
        for s in 0..n_states {
            check_distribution(
                &probs[s * n_actions..][..n_actions],
                &format!("pi(.|s={s})"),
                ROW_SUM_TOL,
            )?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(n_states: usize, n_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != n_states {
            return Err(Error::DimMismatch {
                what: "action list",
                expected: n_states,
                got: actions.len(),
            });
        }
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidSpec(format!("action {a} out of range")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..][..self.n_actions]
    }
}

/// Unnormalized discounted state-action occupancy `ρ(s,a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    n_states: usize,
    n_actions: usize,
    rho: Vec<f64>,
}

impl OccupancyTable {
    pub fn new(n_states: usize, n_actions: usize, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != n_states * n_actions {
            return Err(Error::DimMismatch {
                what: "occupancy table",
                expected: n_states * n_actions,
                got: rho.len(),
            });
        }
        if rho.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("occupancy table".into()));
        }
        if rho.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidSpec("negative occupancy entry".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            rho,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.rho[s * self.n_actions + a]
    }

    pub fn values(&self) -> &[f64] {
        &self.rho
    }

    /// Total mass; equals `1/(1-γ)` for an exact solve.
    pub fn total(&self) -> f64 {
        self.rho.iter().sum()
    }

    /// `μ(s) = Σ_a ρ(s,a)`.
    pub fn state_marginal(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.n_states];
        for s in 0..self.n_states {
            mu[s] = self.rho[s * self.n_actions..][..self.n_actions].iter().sum();
        }
        mu
    }

    /// The occupancy rescaled to a probability distribution.
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        self.rho.iter().map(|x| x / total).collect()
    }
}

/// Solve the Bellman flow constraint exactly: `μ = μ0 + γ P_π^⊤ μ` by LU
/// factorization, then `ρ(s,a) = μ(s)·π(a|s)`.
pub fn solve_occupancy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<OccupancyTable> {
    if policy.n_states != mdp.n_states || policy.n_actions != mdp.n_actions {
        return Err(Error::DimMismatch {
            what: "policy vs mdp",
            expected: mdp.n_states * mdp.n_actions,
            got: policy.n_states * policy.n_actions,
        });
    }
    let n = mdp.n_states;
    // A[s2][s] = δ(s2,s) − γ·Σ_a π(a|s)·P(s2|s,a)
    let a = DMatrix::from_fn(n, n, |s2, s| {
        let mut kernel = 0.0;
        for act in 0..mdp.n_actions {
            kernel += policy.prob(s, act) * mdp.p(s, act, s2);
        }
        let diag = if s2 == s { 1.0 } else { 0.0 };
        diag - mdp.gamma * kernel
    });
    let b = DVector::from_column_slice(&mdp.mu0);
    let mu = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("flow system factorization failed".into()))?;

    let mut rho = vec![0.0; n * mdp.n_actions];
    for s in 0..n {
        for act in 0..mdp.n_actions {
            let v = mu[s] * policy.prob(s, act);
            // LU round-off can leave entries a hair below zero.
            rho[s * mdp.n_actions + act] = if v < 0.0 && v > -1e-12 { 0.0 } else { v };
        }
    }
    let table = OccupancyTable::new(n, mdp.n_actions, rho)?;
    let residual = bellman_flow_residual(mdp, &table);
    if residual > FLOW_RESIDUAL_TOL {
        return Err(Error::Singular(format!(
            "flow residual {residual:.3e} after solve"
        )));
    }
    Ok(table)
}

/// Max-abs violation of the flow constraint
/// `Σ_a ρ(s,a) = μ0(s) + γ·Σ_{s',a'} P(s|s',a')·ρ(s',a')` over states.
pub fn bellman_flow_residual(mdp: &TabularMdp, occ: &OccupancyTable) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..mdp.n_states {
        let lhs: f64 = (0..mdp.n_actions).map(|a| occ.get(s, a)).sum();
        let mut inflow = 0.0;
        for s2 in 0..mdp.n_states {
            for a2 in 0..mdp.n_actions {
                inflow += mdp.p(s2, a2, s) * occ.get(s2, a2);
            }
        }
        worst = worst.max((lhs - mdp.mu0[s] - mdp.gamma * inflow).abs());
    }
    worst
}

/// Structure report for the multi-environment flow system: one equation per
/// `(s,a)` cell constrains the mixture `(1/N)·Σ_i ρ^i`, leaving `N·|S|·|A|`
/// unknowns — underdetermined for `N ≥ 2`.
#[derive(Debug, Clone, Serialize)]
pub struct RankReport {
    pub n_envs: usize,
    pub n_unknowns: usize,
    pub n_equations: usize,
    pub rank: usize,
    pub underdetermined: bool,
    /// ‖A·x − b‖_∞ with the exact per-environment solves substituted for x.
    pub mixture_residual: f64,
}

/// Build the mixture flow system over the stacked unknowns
/// `{ρ^i(s,a)}: i of N` and report its numerical rank (SVD cutoff
/// `1e-9·σ_max`) together with the residual of the exact per-environment
/// solution.
pub fn flow_rank_report(mdps: &[TabularMdp], policy: &TabularPolicy) -> Result<RankReport> {
    let first = mdps
        .first()
        .ok_or_else(|| Error::InvalidSpec("no environments given".into()))?;
    let (ns, na, gamma) = (first.n_states, first.n_actions, first.gamma);
    for m in mdps {
        if m.n_states != ns || m.n_actions != na {
            return Err(Error::InvalidSpec(
                "environments must share state/action spaces".into(),
            ));
        }
        if (m.gamma - gamma).abs() > 1e-15 {
            return Err(Error::InvalidSpec("environments must share γ".into()));
        }
        if m.mu0
            .iter()
            .zip(&first.mu0)
            .any(|(x, y)| (x - y).abs() > ROW_SUM_TOL)
        {
            return Err(Error::InvalidSpec(
                "environments must share the initial distribution".into(),
            ));
        }
    }
    if policy.n_states != ns || policy.n_actions != na {
        return Err(Error::DimMismatch {
            what: "policy vs environments",
            expected: ns * na,
            got: policy.n_states * policy.n_actions,
        });
    }

    let n_envs = mdps.len();
    let cells = ns * na;
    let n_unknowns = n_envs * cells;
    let inv_n = 1.0 / n_envs as f64;

    // Row (s,a); column (i, s', a'):
    //   (1/N)·[ 1{(s',a')=(s,a), any i} − γ·P^i(s|s',a')·π(a|s) ]
    let mut a = DMatrix::zeros(cells, n_unknowns);
    for s in 0..ns {
        for act in 0..na {
            let row = s * na + act;
            let pi_sa = policy.prob(s, act);
            for (i, mdp) in mdps.iter().enumerate() {
                for s2 in 0..ns {
                    for a2 in 0..na {
                        let col = i * cells + s2 * na + a2;
                        let own = if s2 == s && a2 == act { 1.0 } else { 0.0 };
                        a[(row, col)] = inv_n * (own - gamma * mdp.p(s2, a2, s) * pi_sa);
                    }
                }
            }
        }
    }
    let b = DVector::from_fn(cells, |row, _| {
        let (s, act) = (row / na, row % na);
        first.mu0[s] * policy.prob(s, act)
    });

    // Residual with the exact per-environment occupancies plugged in.
    let mut x = DVector::zeros(n_unknowns);
    for (i, mdp) in mdps.iter().enumerate() {
        let occ = solve_occupancy(mdp, policy)?;
        for cell in 0..cells {
            x[i * cells + cell] = occ.values()[cell];
        }
    }
    let mixture_residual = (&a * &x - &b).abs().max();

    let sv = a.svd(false, false).singular_values;
    let sigma_max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let rank = sv.iter().filter(|&&s| s > RANK_EPS * sigma_max).count();

    Ok(RankReport {
        n_envs,
        n_unknowns,
        n_equations: cells,
        rank,
        underdetermined: rank < n_unknowns,
        mixture_residual,
    })
}

/// Closed-form optimal discriminator `num/(num + den_other)` elementwise.
/// By convention the value tends to 1 where the numerator-side (expert)
/// measure dominates. Cells where both measures vanish are undefined and
/// returned as NaN; every consumer in this module weights such cells by
/// zero mass, so they never enter a divergence sum.
pub fn optimal_discriminator(num: &[f64], den_other: &[f64]) -> Result<Vec<f64>> {
    if num.len() != den_other.len() {
        return Err(Error::DimMismatch {
            what: "discriminator inputs",
            expected: num.len(),
            got: den_other.len(),
        });
    }
    if num.iter().chain(den_other).any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidSpec(
            "discriminator inputs must be finite and nonnegative".into(),
        ));
    }
    Ok(num
        .iter()
        .zip(den_other)
        .map(|(&n, &d)| if n + d > 0.0 { n / (n + d) } else { f64::NAN })
        .collect())
}

/// Jensen-Shannon divergence between two distributions, natural log,
/// `0·log 0 := 0`. Ranges over `[0, log 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimMismatch {
            what: "js inputs",
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / m).ln();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / m).ln();
        }
    }
    Ok(acc)
}

/// Value of the two-sample classification objective
/// `E_p[log(1−D)] + E_q[log D]` at its optimum `D = q/(p+q)`, for
/// normalized distributions. Equals `2·JS(p,q) − 2·log 2`.
pub fn classification_objective_at_optimum(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimMismatch {
            what: "classification inputs",
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = pi + qi;
        if pi > 0.0 {
            acc += pi * (pi / m).ln();
        }
        if qi > 0.0 {
            acc += qi * (qi / m).ln();
        }
    }
    Ok(acc)
}

/// Per-state simplex weights over the expert set: `w[s][j] > 0`,
/// `Σ_j w[s][j] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    n_states: usize,
    n_experts: usize,
    w: Vec<f64>,
}

impl ExpertWeights {
    pub fn new(n_states: usize, n_experts: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != n_states * n_experts {
            return Err(Error::DimMismatch {
                what: "expert weights",
                expected: n_states * n_experts,
                got: w.len(),
            });
        }
        for s in 0..n_states {
            let row = &w[s * n_experts..][..n_experts];
            if row.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "weights at state {s} must be strictly positive"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::InvalidSpec(format!(
                    "weights at state {s} sum to {sum}, expected 1"
                )));
            }
        }
        Ok(Self {
            n_states,
            n_experts,
            w,
        })
    }

    pub fn uniform(n_states: usize, n_experts: usize) -> Self {
        Self {
            n_states,
            n_experts,
            w: vec![1.0 / n_experts as f64; n_states * n_experts],
        }
    }

    /// Independent random interior simplex point per state.
    pub fn random<R: Rng>(n_states: usize, n_experts: usize, rng: &mut R) -> Self {
        let mut w = vec![0.0; n_states * n_experts];
        for s in 0..n_states {
            let row = &mut w[s * n_experts..][..n_experts];
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = 0.05 + rng.random::<f64>();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        Self {
            n_states,
            n_experts,
            w,
        }
    }

    pub fn get(&self, s: usize, j: usize) -> f64 {
        self.w[s * self.n_experts + j]
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
}

fn check_ensemble(
    mdps: &[TabularMdp],
    policy: &TabularPolicy,
    experts: &[TabularPolicy],
    weights: &ExpertWeights,
) -> Result<()> {
    if mdps.is_empty() || experts.len() != mdps.len() {
        return Err(Error::InvalidSpec(format!(
            "need one expert per environment, got {} environments / {} experts",
            mdps.len(),
            experts.len()
        )));
    }
    let (ns, na) = (mdps[0].n_states, mdps[0].n_actions);
    if weights.n_states != ns || weights.n_experts != mdps.len() {
        return Err(Error::InvalidSpec(
            "weight table shape must be n_states × n_envs".into(),
        ));
    }
    for pi in std::iter::once(policy).chain(experts) {
        if pi.n_states != ns || pi.n_actions != na {
            return Err(Error::DimMismatch {
                what: "policy vs environments",
                expected: ns * na,
                got: pi.n_states * pi.n_actions,
            });
        }
    }
    Ok(())
}

/// Policy-space objective: the weighted JS divergence from the agent policy
/// to each expert policy, integrated over the unnormalized mean state
/// occupancy of the agent across all environments:
///
/// `Σ_s (1/N)·Σ_i μ_π^i(s) · Σ_j w[s][j] · JS(π(·|s), π_E^j(·|s))`.
pub fn policy_js_objective(
    mdps: &[TabularMdp],
    policy: &TabularPolicy,
    experts: &[TabularPolicy],
    weights: &ExpertWeights,
) -> Result<f64> {
    check_ensemble(mdps, policy, experts, weights)?;
    let ns = mdps[0].n_states;
    let mut mu_bar = vec![0.0; ns];
    for mdp in mdps {
        let occ = solve_occupancy(mdp, policy)?;
        for (acc, m) in mu_bar.iter_mut().zip(occ.state_marginal()) {
            *acc += m / mdps.len() as f64;
        }
    }
    let mut total = 0.0;
    for s in 0..ns {
        let mut per_state = 0.0;
        for (j, expert) in experts.iter().enumerate() {
            per_state += weights.get(s, j) * js_divergence(policy.row(s), expert.row(s))?;
        }
        total += mu_bar[s] * per_state;
    }
    Ok(total)
}

/// The same objective evaluated in discriminator form: the sum over
/// environment-expert pairs of the weighted classification objective at the
/// closed-form optimum `D*_ij(s,a) = π_E^j(a|s)/(π(a|s)+π_E^j(a|s))`, plus
/// the constant `log 2/(1−γ)`. Agrees with [`policy_js_objective`] exactly.
pub fn discriminator_objective_at_optimum(
    mdps: &[TabularMdp],
    policy: &TabularPolicy,
    experts: &[TabularPolicy],
    weights: &ExpertWeights,
) -> Result<f64> {
    check_ensemble(mdps, policy, experts, weights)?;
    let (ns, na) = (mdps[0].n_states, mdps[0].n_actions);
    let n = mdps.len() as f64;
    let mut total = 0.0;
    for mdp in mdps {
        let occ = solve_occupancy(mdp, policy)?;
        let mu = occ.state_marginal();
        for (j, expert) in experts.iter().enumerate() {
            for s in 0..ns {
                let scale = weights.get(s, j) / (2.0 * n);
                for a in 0..na {
                    let p_pi = policy.prob(s, a);
                    let p_ex = expert.prob(s, a);
                    let denom = p_pi + p_ex;
                    if denom == 0.0 {
                        continue;
                    }
                    // log(1−D*) = log(π/(π+π_E)); weight ρ^i(s,a) vanishes
                    // with π, so the 0·log 0 cells drop out.
                    if p_pi > 0.0 {
                        total += scale * occ.get(s, a) * (p_pi / denom).ln();
                    }
                    if p_ex > 0.0 {
                        total += scale * mu[s] * p_ex * (p_ex / denom).ln();
                    }
                }
            }
        }
    }
    Ok(total + std::f64::consts::LN_2 / (1.0 - mdps[0].gamma))
}

/// How far per-state reweighting moves the optimal discriminator: compares
/// the argmax of `Σ w(s)·[ρ_π·log(1−D) + ρ_E·log D]` (solved per cell from
/// the weighted coefficients) against the unweighted `ρ_E/(ρ_π+ρ_E)`.
/// Returns the max-abs elementwise deviation — zero up to round-off, for
/// any strictly positive weights.
pub fn optimum_weighting_deviation(
    rho_pi: &OccupancyTable,
    rho_e: &OccupancyTable,
    state_weights: &[f64],
) -> Result<f64> {
    if rho_pi.n_states != rho_e.n_states
        || rho_pi.n_actions != rho_e.n_actions
        || state_weights.len() != rho_pi.n_states
    {
        return Err(Error::InvalidSpec(
            "occupancy tables and weights must share the state space".into(),
        ));
    }
    if state_weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
        return Err(Error::InvalidSpec(
            "state weights must be strictly positive".into(),
        ));
    }
    let mut worst: f64 = 0.0;
    for s in 0..rho_pi.n_states {
        let w = state_weights[s];
        for a in 0..rho_pi.n_actions {
            // argmax_D of α·log(1−D) + β·log D is β/(α+β)
            let alpha = w * rho_pi.get(s, a);
            let beta = w * rho_e.get(s, a);
            if alpha + beta == 0.0 {
                continue;
            }
            let weighted = beta / (alpha + beta);
            let unweighted = rho_e.get(s, a) / (rho_pi.get(s, a) + rho_e.get(s, a));
            worst = worst.max((weighted - unweighted).abs());
        }
    }
    Ok(worst)
}

/// Random dense MDP with strictly positive transition rows and initial
/// distribution; used by the verification suites.
pub fn random_mdp<R: Rng>(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rng: &mut R,
) -> TabularMdp {
    let positive_row = |rng: &mut R, len: usize| {
        let mut row: Vec<f64> = (0..len).map(|_| 0.1 + rng.random::<f64>()).collect();
        let sum: f64 = row.iter().sum();
        for x in &mut row {
            *x /= sum;
        }
        // Make the row sum exactly 1 in floating point.
        let correction: f64 = 1.0 - row.iter().sum::<f64>();
        row[len - 1] += correction;
        row
    };
    let mut trans = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        trans.extend(positive_row(rng, n_states));
    }
    let mu0 = positive_row(rng, n_states);
    TabularMdp::new(n_states, n_actions, trans, mu0, gamma).expect("random mdp is valid")
}

/// Random family of environments with independent kernels but a shared
/// initial distribution and discount, as the multi-environment setting
/// requires.
pub fn random_mdp_family<R: Rng>(
    n_envs: usize,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rng: &mut R,
) -> Vec<TabularMdp> {
    let first = random_mdp(n_states, n_actions, gamma, rng);
    let mu0 = first.mu0.clone();
    let mut family = vec![first];
    for _ in 1..n_envs {
        let mut next = random_mdp(n_states, n_actions, gamma, rng);
        next.mu0 = mu0.clone();
        family.push(next);
    }
    family
}

/// Random strictly positive policy; rows are interior simplex points.
pub fn random_policy<R: Rng>(n_states: usize, n_actions: usize, rng: &mut R) -> TabularPolicy {
    let mut probs = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        let mut row: Vec<f64> = (0..n_actions).map(|_| 0.1 + rng.random::<f64>()).collect();
        let sum: f64 = row.iter().sum();
        for x in &mut row {
            *x /= sum;
        }
        let correction: f64 = 1.0 - row.iter().sum::<f64>();
        row[n_actions - 1] += correction;
        probs.extend(row);
    }
    TabularPolicy::new(n_states, n_actions, probs).expect("random policy is valid")
}
