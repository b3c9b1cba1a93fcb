//! Minimal neural substrate: dense MLPs with hand-rolled reverse-mode
//! differentiation, including input gradients and the second-order path
//! needed to differentiate a gradient-norm penalty with respect to the
//! parameters. Also: a diagonal-Gaussian policy head, an Adam optimizer,
//! and a versioned binary tensor container for checkpoints.
//!
//! Parameters of a network live in one flat `Vec<f64>` (layer by layer,
//! weights then bias), so optimizers and checkpoints treat every model the
//! same way. All gradients here are *sums* over the batch unless a function
//! documents otherwise; callers fold in `1/B` through the upstream signal.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Elementwise activation; derivatives are evaluated from the *output*
/// value, which every supported activation permits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
    /// σ(z) = 1/(1+e^{-z}); maps scalar logits into (0,1).
    Logistic,
    /// ln(1+e^z); maps scalar logits onto (0,∞) for ratio heads.
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Tanh => z.tanh(),
            Self::Identity => z,
            Self::Logistic => 1.0 / (1.0 + (-z).exp()),
            // Overflow-safe: ln(1+e^z) = max(z,0) + ln(1+e^{-|z|}).
            Self::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// σ'(z) given h = σ(z).
    fn prime(self, h: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - h * h,
            Self::Identity => 1.0,
            Self::Logistic => h * (1.0 - h),
            Self::Softplus => 1.0 - (-h).exp(),
        }
    }

    /// σ''(z) given h = σ(z).
    fn second(self, h: f64) -> f64 {
        match self {
            Self::Tanh => -2.0 * h * (1.0 - h * h),
            Self::Identity => 0.0,
            Self::Logistic => h * (1.0 - h) * (1.0 - 2.0 * h),
            Self::Softplus => {
                let p = 1.0 - (-h).exp();
                p * (1.0 - p)
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::Identity => "identity",
            Self::Logistic => "logistic",
            Self::Softplus => "softplus",
        }
    }

    fn parse(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            "logistic" => Ok(Self::Logistic),
            "softplus" => Ok(Self::Softplus),
            other => Err(Error::Format(format!("unknown activation {other:?}"))),
        }
    }
}

pub fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Fully-connected network; hidden layers share one activation, the output
/// layer has its own (identity for regression heads, logistic for
/// discriminators).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden_act: Activation,
    output_act: Activation,
    /// Flat parameters: for each layer, row-major weights then bias.
    params: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Fan-in uniform initialization: each layer drawn from
    /// `U[-1/√fan_in, 1/√fan_in]`.
    pub fn new<R: Rng>(
        sizes: &[usize],
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidSpec(format!("bad layer sizes {sizes:?}")));
        }
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(bound * (2.0 * rng.random::<f64>() - 1.0));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden_act,
            output_act,
            params,
        })
    }

    pub fn zeros(sizes: &[usize], hidden_act: Activation, output_act: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidSpec(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden_act,
            output_act,
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Wrap an existing flat parameter vector (e.g. a shared trunk
    /// concatenated with one output head).
    pub fn from_parts(
        sizes: &[usize],
        hidden_act: Activation,
        output_act: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden_act, output_act)?;
        if params.len() != net.params.len() {
            return Err(Error::DimMismatch {
                what: "mlp parameters",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_act
    }

    pub fn output_activation(&self) -> Activation {
        self.output_act
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Multiply the last layer's weights and bias by `factor` (small initial
    /// policy outputs stabilize early training).
    pub fn scale_output_layer(&mut self, factor: f64) {
        let (w_off, b_off) = self.offsets(self.n_layers() - 1);
        let (rows, cols) = self.layer_shape(self.n_layers() - 1);
        for p in &mut self.params[w_off..w_off + rows * cols] {
            *p *= factor;
        }
        for p in &mut self.params[b_off..b_off + rows] {
            *p *= factor;
        }
    }

    /// (rows, cols) = (fan_out, fan_in) of layer `l`.
    fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.sizes[l + 1], self.sizes[l])
    }

    /// (weight offset, bias offset) of layer `l` in the flat vector.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            let (rows, cols) = self.layer_shape(k);
            off += rows * cols + rows;
        }
        let (rows, cols) = self.layer_shape(l);
        (off, off + rows * cols)
    }

    fn weights(&self, l: usize) -> &[f64] {
        let (w, b) = self.offsets(l);
        &self.params[w..b]
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (rows, _) = self.layer_shape(l);
        let (_, b) = self.offsets(l);
        &self.params[b..b + rows]
    }

    fn act_of(&self, l: usize) -> Activation {
        if l + 1 == self.sizes.len() - 1 {
            self.output_act
        } else {
            self.hidden_act
        }
    }

    /// Batch forward pass; `x` is row-major `[n × input_dim]`. Returns the
    /// output batch and a tape for the backward passes.
    pub fn forward(&self, x: &[f64], n: usize) -> Result<(Vec<f64>, Tape)> {
        if x.len() != n * self.input_dim() {
            return Err(Error::DimMismatch {
                what: "forward input",
                expected: n * self.input_dim(),
                got: x.len(),
            });
        }
        check_finite(x, "forward input")?;
        let mut hs: Vec<Vec<f64>> = vec![x.to_vec()];
        for l in 0..self.n_layers() {
            let (rows, cols) = self.layer_shape(l);
            let w = self.weights(l);
            let b = self.bias(l);
            let act = self.act_of(l);
            let prev = &hs[l];
            let mut next = vec![0.0; n * rows];
            for s in 0..n {
                let h_in = &prev[s * cols..(s + 1) * cols];
                let h_out = &mut next[s * rows..(s + 1) * rows];
                for (r, out) in h_out.iter_mut().enumerate() {
                    let wrow = &w[r * cols..(r + 1) * cols];
                    let mut z = b[r];
                    for (wv, hv) in wrow.iter().zip(h_in) {
                        z += wv * hv;
                    }
                    *out = act.apply(z);
                }
            }
            hs.push(next);
        }
        let y = hs.last().unwrap().clone();
        check_finite(&y, "forward output")?;
        Ok((y, Tape { n, hs }))
    }

    /// Convenience single-sample forward without keeping the tape.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, 1)?.0)
    }

    /// Reverse-mode parameter gradients, summed over the batch. `upstream`
    /// is `dL/dy`, row-major `[n × output_dim]`.
    pub fn param_grad(&self, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>> {
        self.backward(tape, upstream, false).map(|(g, _)| g)
    }

    /// Gradient of the scalar loss with respect to the *input* batch,
    /// `[n × input_dim]`.
    pub fn input_grad(&self, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>> {
        self.backward(tape, upstream, true).map(|(_, x)| x.unwrap())
    }

    fn backward(
        &self,
        tape: &Tape,
        upstream: &[f64],
        want_input: bool,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let n = tape.n;
        if upstream.len() != n * self.output_dim() {
            return Err(Error::DimMismatch {
                what: "upstream gradient",
                expected: n * self.output_dim(),
                got: upstream.len(),
            });
        }
        check_finite(upstream, "upstream gradient")?;
        let mut grad = vec![0.0; self.params.len()];
        let mut input_grad = if want_input {
            Some(vec![0.0; n * self.input_dim()])
        } else {
            None
        };
        // delta = dL/dz at the current layer, one sample at a time.
        let mut delta: Vec<f64> = Vec::new();
        for s in 0..n {
            delta.clear();
            let y = &tape.hs[self.n_layers()][s * self.output_dim()..(s + 1) * self.output_dim()];
            let up = &upstream[s * self.output_dim()..(s + 1) * self.output_dim()];
            let act = self.act_of(self.n_layers() - 1);
            delta.extend(y.iter().zip(up).map(|(&h, &u)| u * act.prime(h)));
            for l in (0..self.n_layers()).rev() {
                let (rows, cols) = self.layer_shape(l);
                let (w_off, b_off) = self.offsets(l);
                let h_prev = &tape.hs[l][s * cols..(s + 1) * cols];
                for r in 0..rows {
                    let d = delta[r];
                    let grow = &mut grad[w_off + r * cols..w_off + (r + 1) * cols];
                    for (g, hv) in grow.iter_mut().zip(h_prev) {
                        *g += d * hv;
                    }
                    grad[b_off + r] += d;
                }
                let w = self.weights(l);
                let mut below = vec![0.0; cols];
                for (r, &d) in delta.iter().enumerate() {
                    let wrow = &w[r * cols..(r + 1) * cols];
                    for (bv, wv) in below.iter_mut().zip(wrow) {
                        *bv += wv * d;
                    }
                }
                if l > 0 {
                    let act = self.act_of(l - 1);
                    let h = &tape.hs[l][s * cols..(s + 1) * cols];
                    delta.clear();
                    delta.extend(below.iter().zip(h).map(|(&b, &hv)| b * act.prime(hv)));
                } else if let Some(xg) = input_grad.as_mut() {
                    xg[s * cols..(s + 1) * cols].copy_from_slice(&below);
                } else {
                    break;
                }
            }
        }
        check_finite(&grad, "parameter gradient")?;
        Ok((grad, input_grad))
    }
}

/// Recorded forward pass: post-activation values of every layer
/// (`hs[0]` is the input batch).
#[derive(Debug, Clone)]
pub struct Tape {
    n: usize,
    hs: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch_len(&self) -> usize {
        self.n
    }
}

/// Guard inside the gradient-norm square root; keeps the derivative finite
/// when the input gradient vanishes.
pub const GRAD_NORM_EPS: f64 = 1e-12;

/// Value and exact parameter gradient of the gradient penalty
/// `κ·mean_b (‖∇_x y(x_b)‖₂ − 1)²` for a scalar-output network, by a second
/// reverse pass through the input-gradient computation.
pub fn gp_param_grad(net: &Mlp, xhat: &[f64], n: usize, kappa: f64) -> Result<(f64, Vec<f64>)> {
    if net.output_dim() != 1 {
        return Err(Error::InvalidSpec(
            "gradient penalty needs a scalar-output network".into(),
        ));
    }
    if n == 0 || xhat.len() != n * net.input_dim() {
        return Err(Error::DimMismatch {
            what: "penalty input",
            expected: n.max(1) * net.input_dim(),
            got: xhat.len(),
        });
    }
    check_finite(xhat, "penalty input")?;
    let layers = net.n_layers();
    let mut grad = vec![0.0; net.n_params()];
    let mut penalty = 0.0;
    let inv_n = 1.0 / n as f64;

    for s in 0..n {
        let x = &xhat[s * net.input_dim()..(s + 1) * net.input_dim()];

        // Forward; activations are recoverable from h, so z is not stored.
        let mut hs: Vec<Vec<f64>> = vec![x.to_vec()];
        for l in 0..layers {
            let (rows, cols) = net.layer_shape(l);
            let w = net.weights(l);
            let b = net.bias(l);
            let act = net.act_of(l);
            let prev = &hs[l];
            let mut next = vec![0.0; rows];
            for r in 0..rows {
                let wrow = &w[r * cols..(r + 1) * cols];
                let mut z = b[r];
                for (wv, hv) in wrow.iter().zip(prev) {
                    z += wv * hv;
                }
                next[r] = act.apply(z);
            }
            hs.push(next);
        }

        // First backward: delta[l] = dy/dz_l and u[l] = W_{l+1}^T delta[l+1],
        // ending in the input gradient g = W_1^T delta[1].
        let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); layers + 1];
        let mut us: Vec<Vec<f64>> = vec![Vec::new(); layers + 1];
        let top_act = net.act_of(layers - 1);
        deltas[layers] = vec![top_act.prime(hs[layers][0])];
        for l in (1..layers).rev() {
            let (rows, cols) = net.layer_shape(l);
            let w = net.weights(l);
            let mut u = vec![0.0; cols];
            for (r, &d) in deltas[l + 1].iter().enumerate() {
                debug_assert_eq!(deltas[l + 1].len(), rows);
                let wrow = &w[r * cols..(r + 1) * cols];
                for (uv, wv) in u.iter_mut().zip(wrow) {
                    *uv += wv * d;
                }
            }
            let act = net.act_of(l - 1);
            deltas[l] = u
                .iter()
                .zip(&hs[l])
                .map(|(&uv, &hv)| uv * act.prime(hv))
                .collect();
            us[l] = u;
        }
        let (rows0, cols0) = net.layer_shape(0);
        let w0 = net.weights(0);
        let mut g = vec![0.0; cols0];
        for (r, &d) in deltas[1].iter().enumerate() {
            debug_assert_eq!(deltas[1].len(), rows0);
            let wrow = &w0[r * cols0..(r + 1) * cols0];
            for (gv, wv) in g.iter_mut().zip(wrow) {
                *gv += wv * d;
            }
        }

        // Penalty for this sample and its gradient with respect to g.
        let norm = (g.iter().map(|v| v * v).sum::<f64>() + GRAD_NORM_EPS).sqrt();
        penalty += kappa * inv_n * (norm - 1.0) * (norm - 1.0);
        let coeff = kappa * inv_n * 2.0 * (norm - 1.0) / norm;
        let gbar: Vec<f64> = g.iter().map(|&gv| coeff * gv).collect();

        // Adjoint pass over the backward graph: seed delta-bar at layer 1
        // from g = W_1^T delta_1, then walk upward, turning each
        // delta_l = u_l ⊙ σ'(z_l) into z-bar and u-bar contributions.
        let mut zbars: Vec<Vec<f64>> = (0..=layers)
            .map(|l| vec![0.0; if l == 0 { 0 } else { net.layer_shape(l - 1).0 }])
            .collect();
        let (w_off0, _) = net.offsets(0);
        let mut dbar = vec![0.0; rows0];
        for r in 0..rows0 {
            let wrow = &w0[r * cols0..(r + 1) * cols0];
            let grow = &mut grad[w_off0 + r * cols0..w_off0 + (r + 1) * cols0];
            let mut acc = 0.0;
            for ((gv, wv), gr) in gbar.iter().zip(wrow).zip(grow.iter_mut()) {
                acc += wv * gv;
                *gr += deltas[1][r] * gv;
            }
            dbar[r] = acc;
        }
        for l in 1..layers {
            // delta_l = u_l ⊙ σ'(z_l), h_l = σ(z_l)
            let act = net.act_of(l - 1);
            let ubar: Vec<f64> = dbar
                .iter()
                .zip(&hs[l])
                .map(|(&db, &hv)| db * act.prime(hv))
                .collect();
            for ((zb, &db), (&uv, &hv)) in zbars[l]
                .iter_mut()
                .zip(&dbar)
                .zip(us[l].iter().zip(&hs[l]))
            {
                *zb += db * uv * act.second(hv);
            }
            // u_l = W_{l+1}^T delta_{l+1}
            let (rows, cols) = net.layer_shape(l);
            let w = net.weights(l);
            let (w_off, _) = net.offsets(l);
            let mut next_dbar = vec![0.0; rows];
            for r in 0..rows {
                let wrow = &w[r * cols..(r + 1) * cols];
                let grow = &mut grad[w_off + r * cols..w_off + (r + 1) * cols];
                let mut acc = 0.0;
                for ((uv, wv), gr) in ubar.iter().zip(wrow).zip(grow.iter_mut()) {
                    acc += wv * uv;
                    *gr += deltas[l + 1][r] * uv;
                }
                next_dbar[r] = acc;
            }
            dbar = next_dbar;
        }
        {
            // delta_L = σ'(z_L)
            let act = net.act_of(layers - 1);
            for (zb, (&db, &hv)) in zbars[layers].iter_mut().zip(dbar.iter().zip(&hs[layers])) {
                *zb += db * act.second(hv);
            }
        }

        // Standard reverse sweep over the forward chain with the seeded
        // z-bars: z_l = W_l h_{l-1} + b_l, h_l = σ(z_l).
        let mut hbar: Vec<f64> = vec![0.0; net.output_dim()];
        for l in (0..layers).rev() {
            let (_, cols) = net.layer_shape(l);
            let act = net.act_of(l);
            let zb: Vec<f64> = zbars[l + 1]
                .iter()
                .zip(hbar.iter().zip(&hs[l + 1]))
                .map(|(&seed, (&hb, &hv))| seed + hb * act.prime(hv))
                .collect();
            let w = net.weights(l);
            let (w_off, b_off) = net.offsets(l);
            let mut below = vec![0.0; cols];
            for (r, &z) in zb.iter().enumerate() {
                let wrow = &w[r * cols..(r + 1) * cols];
                let grow = &mut grad[w_off + r * cols..w_off + (r + 1) * cols];
                for ((bv, wv), (gr, hv)) in below
                    .iter_mut()
                    .zip(wrow)
                    .zip(grow.iter_mut().zip(&hs[l]))
                {
                    *bv += wv * z;
                    *gr += z * hv;
                }
                grad[b_off + r] += z;
            }
            hbar = below;
        }
    }
    check_finite(&grad, "penalty gradient")?;
    Ok((penalty, grad))
}

/// Penalty value alone (used by finite-difference oracles).
pub fn gp_value(net: &Mlp, xhat: &[f64], n: usize, kappa: f64) -> Result<f64> {
    let (y, tape) = net.forward(xhat, n)?;
    debug_assert_eq!(y.len(), n);
    let upstream = vec![1.0; n];
    let g = net.input_grad(&tape, &upstream)?;
    let d = net.input_dim();
    let mut penalty = 0.0;
    for s in 0..n {
        let gs = &g[s * d..(s + 1) * d];
        let norm = (gs.iter().map(|v| v * v).sum::<f64>() + GRAD_NORM_EPS).sqrt();
        penalty += (norm - 1.0) * (norm - 1.0);
    }
    Ok(kappa * penalty / n as f64)
}

/// Diagonal-Gaussian policy: an MLP for the mean plus state-independent
/// per-dimension log standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyHead {
    pub mean: Mlp,
    /// One per action dimension, clamped to [`LOG_STD_MIN`, `LOG_STD_MAX`].
    pub log_std: Vec<f64>,
}

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_74;

impl GaussianPolicyHead {
    pub fn new<R: Rng>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let mut mean = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, rng)?;
        mean.scale_output_layer(0.01);
        Ok(Self {
            mean,
            log_std: vec![0.0; action_dim],
        })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    /// Total trainable parameters (mean net + log-stds).
    pub fn n_params(&self) -> usize {
        self.mean.n_params() + self.log_std.len()
    }

    pub fn clamp_log_std(&mut self) {
        for v in &mut self.log_std {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// Sample an action (or return the mean when `deterministic`).
    pub fn act(&self, state: &[f64], rng: &mut ChaCha8Rng, deterministic: bool) -> Result<Vec<f64>> {
        let mu = self.mean.eval(state)?;
        if deterministic {
            return Ok(mu);
        }
        Ok(mu
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }

    /// Log-density of `a` under the state-conditional Gaussian, given the
    /// already-computed mean.
    pub fn logprob_from_mean(&self, mu: &[f64], a: &[f64]) -> f64 {
        let mut lp = 0.0;
        for ((&m, &av), &ls) in mu.iter().zip(a).zip(&self.log_std) {
            let z = (av - m) / ls.exp();
            lp -= HALF_LN_2PI + ls + 0.5 * z * z;
        }
        lp
    }

    /// Batch log-probabilities; states `[n × s_dim]`, actions `[n × a_dim]`.
    pub fn logprobs(&self, states: &[f64], actions: &[f64], n: usize) -> Result<Vec<f64>> {
        let (mu, _) = self.mean.forward(states, n)?;
        let d = self.action_dim();
        Ok((0..n)
            .map(|s| self.logprob_from_mean(&mu[s * d..(s + 1) * d], &actions[s * d..(s + 1) * d]))
            .collect())
    }

    /// Differential entropy (state-independent for a fixed-σ Gaussian).
    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|&ls| 0.5 + HALF_LN_2PI + ls)
            .sum()
    }

    /// Gradient of `Σ_b coeff_b · log π(a_b|s_b)` with respect to the flat
    /// parameter vector `[mean params.., log_std..]`.
    pub fn weighted_logprob_grad(
        &self,
        states: &[f64],
        actions: &[f64],
        coeff: &[f64],
        n: usize,
    ) -> Result<Vec<f64>> {
        let (mu, tape) = self.mean.forward(states, n)?;
        let d = self.action_dim();
        let mut upstream = vec![0.0; n * d];
        let mut ls_grad = vec![0.0; d];
        for s in 0..n {
            for k in 0..d {
                let std = self.log_std[k].exp();
                let z = (actions[s * d + k] - mu[s * d + k]) / std;
                // d logprob / d mu = z/std;  d logprob / d log_std = z² − 1
                upstream[s * d + k] = coeff[s] * z / std;
                ls_grad[k] += coeff[s] * (z * z - 1.0);
            }
        }
        let mut grad = self.mean.param_grad(&tape, &upstream)?;
        grad.extend(ls_grad);
        Ok(grad)
    }

    /// Copy the flat parameter vector (mean params then log-stds).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.mean.params().to_vec();
        p.extend(&self.log_std);
        p
    }

    /// Write a flat parameter vector back, clamping log-stds.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimMismatch {
                what: "policy parameters",
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let split = self.mean.n_params();
        self.mean.params_mut().copy_from_slice(&flat[..split]);
        self.log_std.copy_from_slice(&flat[split..]);
        self.clamp_log_std();
        Ok(())
    }

    pub fn save_into(&self, c: &mut Container, prefix: &str) {
        self.mean.save_into(c, &format!("{prefix}.mean"));
        c.put_f64(
            &format!("{prefix}.log_std"),
            vec![self.log_std.len() as u64],
            self.log_std.clone(),
        );
    }

    pub fn load_from(c: &Container, prefix: &str) -> Result<Self> {
        let mean = Mlp::load_from(c, &format!("{prefix}.mean"))?;
        let (_, log_std) = c.f64(&format!("{prefix}.log_std"))?;
        Ok(Self {
            mean,
            log_std: log_std.to_vec(),
        })
    }
}

/// Adam with bias correction; moments live alongside the parameter vector
/// they optimize.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One descent step along `grad` (callers negate for ascent).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimMismatch {
                what: "optimizer step",
                expected: self.m.len(),
                got: params.len().max(grad.len()),
            });
        }
        check_finite(grad, "optimizer gradient")?;
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / b1t;
            let vhat = *v / b2t;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn state(&self) -> (&[f64], &[f64], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(&mut self, m: Vec<f64>, v: Vec<f64>, t: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::DimMismatch {
                what: "optimizer state",
                expected: self.m.len(),
                got: m.len(),
            });
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }

    /// Store the full optimizer state (hyperparameters and moments) under
    /// `prefix` in a container.
    pub fn save_into(&self, c: &mut Container, prefix: &str) {
        c.put_f64(
            &format!("{prefix}.hyper"),
            vec![4],
            vec![self.lr, self.beta1, self.beta2, self.eps],
        );
        c.put_f64(&format!("{prefix}.m"), vec![self.m.len() as u64], self.m.clone());
        c.put_f64(&format!("{prefix}.v"), vec![self.v.len() as u64], self.v.clone());
        c.put_u64(&format!("{prefix}.t"), vec![self.t]);
    }

    pub fn load_from(c: &Container, prefix: &str) -> Result<Self> {
        let (_, hyper) = c.f64(&format!("{prefix}.hyper"))?;
        if hyper.len() != 4 {
            return Err(Error::Format(format!("bad optimizer hyper block in {prefix:?}")));
        }
        let (_, m) = c.f64(&format!("{prefix}.m"))?;
        let (_, v) = c.f64(&format!("{prefix}.v"))?;
        let t = c.u64(&format!("{prefix}.t"))?;
        if m.len() != v.len() || t.len() != 1 {
            return Err(Error::Format(format!("bad optimizer state in {prefix:?}")));
        }
        Ok(Self {
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
            m: m.to_vec(),
            v: v.to_vec(),
            t: t[0],
        })
    }
}

/// Scale `grad` in place so its L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Versioned binary container for checkpoints.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"NTC1";
const FORMAT_VERSION: u32 = 1;

/// One named section of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    /// Shaped little-endian f64 tensor.
    F64 { shape: Vec<u64>, data: Vec<f64> },
    U64(Vec<u64>),
    Str(String),
}

/// Named-section binary container: magic bytes, format version, then each
/// section as (name, kind, payload). Floats are little-endian 64-bit, so
/// checkpoints round-trip bit-exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    sections: std::collections::BTreeMap<String, Section>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_f64(&mut self, name: &str, shape: Vec<u64>, data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<u64>() as usize,
            data.len(),
            "shape/data mismatch for {name}"
        );
        self.sections
            .insert(name.to_string(), Section::F64 { shape, data });
    }

    pub fn put_u64(&mut self, name: &str, data: Vec<u64>) {
        self.sections.insert(name.to_string(), Section::U64(data));
    }

    pub fn put_str(&mut self, name: &str, value: &str) {
        self.sections
            .insert(name.to_string(), Section::Str(value.to_string()));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(|s| s.as_str())
    }

    pub fn f64(&self, name: &str) -> Result<(&[u64], &[f64])> {
        match self.sections.get(name) {
            Some(Section::F64 { shape, data }) => Ok((shape, data)),
            _ => Err(Error::Format(format!("missing f64 section {name:?}"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<&[u64]> {
        match self.sections.get(name) {
            Some(Section::U64(data)) => Ok(data),
            _ => Err(Error::Format(format!("missing u64 section {name:?}"))),
        }
    }

    pub fn str(&self, name: &str) -> Result<&str> {
        match self.sections.get(name) {
            Some(Section::Str(s)) => Ok(s),
            _ => Err(Error::Format(format!("missing string section {name:?}"))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.sections.len() as u32)?;
        for (name, section) in &self.sections {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            match section {
                Section::F64 { shape, data } => {
                    w.write_u8(0)?;
                    w.write_u8(shape.len() as u8)?;
                    for &d in shape {
                        w.write_u64::<LittleEndian>(d)?;
                    }
                    for &x in data {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
                Section::U64(data) => {
                    w.write_u8(1)?;
                    w.write_u64::<LittleEndian>(data.len() as u64)?;
                    for &x in data {
                        w.write_u64::<LittleEndian>(x)?;
                    }
                }
                Section::Str(s) => {
                    w.write_u8(2)?;
                    w.write_u64::<LittleEndian>(s.len() as u64)?;
                    w.write_all(s.as_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count = r.read_u32::<LittleEndian>()?;
        let mut sections = std::collections::BTreeMap::new();
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("non-utf8 section name".into()))?;
            let kind = r.read_u8()?;
            let section = match kind {
                0 => {
                    let rank = r.read_u8()? as usize;
                    let mut shape = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        shape.push(r.read_u64::<LittleEndian>()?);
                    }
                    let len = shape.iter().product::<u64>() as usize;
                    let mut data = Vec::with_capacity(len);
                    for _ in 0..len {
                        data.push(r.read_f64::<LittleEndian>()?);
                    }
                    Section::F64 { shape, data }
                }
                1 => {
                    let len = r.read_u64::<LittleEndian>()? as usize;
                    let mut data = Vec::with_capacity(len);
                    for _ in 0..len {
                        data.push(r.read_u64::<LittleEndian>()?);
                    }
                    Section::U64(data)
                }
                2 => {
                    let len = r.read_u64::<LittleEndian>()? as usize;
                    let mut bytes = vec![0u8; len];
                    r.read_exact(&mut bytes)?;
                    Section::Str(
                        String::from_utf8(bytes)
                            .map_err(|_| Error::Format("non-utf8 string section".into()))?,
                    )
                }
                other => return Err(Error::Format(format!("unknown section kind {other}"))),
            };
            sections.insert(name, section);
        }
        Ok(Self { sections })
    }
}

impl Mlp {
    /// Store this network under `prefix` in a container.
    pub fn save_into(&self, c: &mut Container, prefix: &str) {
        c.put_u64(
            &format!("{prefix}.sizes"),
            self.sizes.iter().map(|&s| s as u64).collect(),
        );
        c.put_str(&format!("{prefix}.hidden_act"), self.hidden_act.name());
        c.put_str(&format!("{prefix}.output_act"), self.output_act.name());
        c.put_f64(
            &format!("{prefix}.params"),
            vec![self.params.len() as u64],
            self.params.clone(),
        );
    }

    pub fn load_from(c: &Container, prefix: &str) -> Result<Self> {
        let sizes: Vec<usize> = c
            .u64(&format!("{prefix}.sizes"))?
            .iter()
            .map(|&s| s as usize)
            .collect();
        let hidden_act = Activation::parse(c.str(&format!("{prefix}.hidden_act"))?)?;
        let output_act = Activation::parse(c.str(&format!("{prefix}.output_act"))?)?;
        let (_, params) = c.f64(&format!("{prefix}.params"))?;
        let mut net = Mlp::zeros(&sizes, hidden_act, output_act)?;
        if params.len() != net.n_params() {
            return Err(Error::Format(format!(
                "parameter count mismatch in {prefix:?}"
            )));
        }
        net.params_mut().copy_from_slice(params);
        Ok(net)
    }
}
