//! Closed-form capacity and convergence bounds for ℓ1-constrained networks, plus a
//! randomized audit that sampled networks respect the pointwise ones.
//!
//! Notation: `r` is the ℓ1 radius, `L` the depth, `P` the parameter count, `n`
//! the sample size, `R` the sup-norm input bound, `b₀` the loss bound and `b₁`
//! the bound on the density score `|∂_i log p|`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{domain, Result};
use crate::net::Network;
use crate::sparsity::{param_l1_norm, project_l1_in_place, FlatParams};

fn check_depth(depth: usize) -> Result<()> {
    if depth < 2 {
        return Err(domain(format!("depth must be >= 2, got {depth}")));
    }
    Ok(())
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(domain(format!("{name} must be finite and non-negative, got {v}")));
    }
    Ok(())
}

/// `(r/(L-1))^{L-1}`, the worst-case product of the other layers' norms.
fn layer_product(r: f64, depth: usize) -> f64 {
    let m = (depth - 1) as f64;
    (r / m).powi(depth as i32 - 1)
}

/// `√L (r/(L-1))^{L-1} ‖x‖∞`: Lipschitz constant of `Θ ↦ f_Θ(x)` in Frobenius norm.
pub fn lipschitz_param_bound(r: f64, depth: usize, x_inf: f64) -> Result<f64> {
    check_depth(depth)?;
    check_nonneg("r", r)?;
    check_nonneg("x_inf", x_inf)?;
    Ok((depth as f64).sqrt() * layer_product(r, depth) * x_inf)
}

/// Same constant in the empirical `L²(Pₙ)` metric; `sample_x_inf_rms = √((1/n) Σ ‖x_i‖∞²)`.
pub fn lip_l2pn_bound(r: f64, depth: usize, sample_x_inf_rms: f64) -> Result<f64> {
    lipschitz_param_bound(r, depth, sample_x_inf_rms)
}

/// `R (r/L)^L`.
pub fn sup_model_bound(input_bound: f64, r: f64, depth: usize) -> Result<f64> {
    check_depth(depth)?;
    check_nonneg("R", input_bound)?;
    check_nonneg("r", r)?;
    Ok(input_bound * grad_l1_bound_unchecked(r, depth))
}

fn grad_l1_bound_unchecked(r: f64, depth: usize) -> f64 {
    (r / depth as f64).powi(depth as i32)
}

/// `(r/L)^L`, bound on `‖∇ₓf‖₁`.
pub fn grad_l1_bound(r: f64, depth: usize) -> Result<f64> {
    check_depth(depth)?;
    check_nonneg("r", r)?;
    Ok(grad_l1_bound_unchecked(r, depth))
}

/// `max_{k ∈ {2..L-1}} (r/k)^{k·power}`; the empty maximum (`L = 2`) is 1.
fn middle_layer_max(r: f64, depth: usize, power: i32) -> f64 {
    (2..depth).map(|k| (r / k as f64).powi(k as i32 * power)).fold(None, |acc: Option<f64>, v| {
        Some(acc.map_or(v, |a| a.max(v)))
    })
    .unwrap_or(1.0)
}

/// `(L/4)(r/L)^L max_{k ∈ {2..L-1}} (r/k)^k`, bound on `|Δₓf|` for softplus.
///
/// For `L = 2` the maximum is over an empty set and is taken to be 1. The bound is
/// not claimed for relu.
pub fn divergence_bound(r: f64, depth: usize) -> Result<f64> {
    check_depth(depth)?;
    check_nonneg("r", r)?;
    Ok(depth as f64 / 4.0 * grad_l1_bound_unchecked(r, depth) * middle_layer_max(r, depth, 1))
}

/// `c₁ = R / (6 r L^{3/2} √(2 log P))`.
pub fn c1(input_bound: f64, r: f64, depth: usize, param_count: f64) -> Result<f64> {
    check_depth(depth)?;
    check_nonneg("R", input_bound)?;
    if !(r > 0.0 && r.is_finite()) {
        return Err(domain(format!("r must be positive, got {r}")));
    }
    if !(param_count > 1.0 && param_count.is_finite()) {
        return Err(domain(format!("parameter count must exceed 1 (log P > 0), got {param_count}")));
    }
    Ok(input_bound / (6.0 * r * (depth as f64).powf(1.5) * (2.0 * param_count.ln()).sqrt()))
}

/// Which power of `b₁` multiplies the model term of the derivative bound. The
/// published statement uses `1 + b₁`; carrying the derivation through gives `1 + b₁²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum B1Exponent {
    One,
    Two,
}

impl B1Exponent {
    pub fn power(self) -> i32 {
        match self {
            B1Exponent::One => 1,
            B1Exponent::Two => 2,
        }
    }
}

impl TryFrom<u8> for B1Exponent {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(B1Exponent::One),
            2 => Ok(B1Exponent::Two),
            other => Err(format!("b1 exponent must be 1 or 2, got {other}")),
        }
    }
}

impl From<B1Exponent> for u8 {
    fn from(e: B1Exponent) -> u8 {
        e.power() as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// ℓ1 radius `r`.
    pub r: f64,
    /// Depth `L`.
    pub depth: usize,
    /// Parameter count `P`; real-valued so closed forms can be probed off the integers.
    pub param_count: f64,
    /// Sample size `n`.
    pub n: f64,
    /// Input sup-norm bound `R`.
    pub input_bound: f64,
    pub b0: f64,
    pub b1: f64,
    /// `E‖x‖∞²`.
    pub x_inf_sq: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        check_depth(self.depth)?;
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(domain(format!("r must be positive, got {}", self.r)));
        }
        if !(self.n >= 1.0 && self.n.is_finite()) {
            return Err(domain(format!("n must be >= 1, got {}", self.n)));
        }
        check_nonneg("R", self.input_bound)?;
        check_nonneg("b0", self.b0)?;
        check_nonneg("b1", self.b1)?;
        check_nonneg("x_inf_sq", self.x_inf_sq)?;
        if !(self.param_count > 1.0) {
            return Err(domain(format!("parameter count must exceed 1, got {}", self.param_count)));
        }
        Ok(())
    }

    pub fn c1(&self) -> Result<f64> {
        c1(self.input_bound, self.r, self.depth, self.param_count)
    }

    /// `1 + log(c₁√n) √(E‖x‖∞²)`, clamped below at 1. The flag reports whether the
    /// clamp was active (the raw factor would have been below 1).
    pub fn log_factor(&self) -> Result<(f64, bool)> {
        self.validate()?;
        let raw = 1.0 + (self.c1()? * self.n.sqrt()).ln() * self.x_inf_sq.sqrt();
        if raw < 1.0 {
            Ok((1.0, true))
        } else {
            Ok((raw, false))
        }
    }
}

/// `24 r (r/(L-1))^{L-1} √(2 L log P / n) · (1 + log(c₁√n) √(E‖x‖∞²))`, log factor clamped at ≥ 1.
pub fn rademacher_bound(inputs: &BoundInputs) -> Result<f64> {
    let (factor, _) = inputs.log_factor()?;
    let l = inputs.depth as f64;
    Ok(24.0
        * inputs.r
        * layer_product(inputs.r, inputs.depth)
        * (2.0 * l * inputs.param_count.ln() / inputs.n).sqrt()
        * factor)
}

/// `4 b₀ · rademacher_bound`.
pub fn model_convergence_bound(inputs: &BoundInputs) -> Result<f64> {
    Ok(4.0 * inputs.b0 * rademacher_bound(inputs)?)
}

/// `n^{-1/4} (r/L)^{2L} (2 + (L²/8) max_k (r/k)^{2k})
///  + 48 (1 + b₁^e) b₀ r (r/(L-1))^{L-1} √(2 L log P) n^{-1/4} · (log factor)`.
pub fn derivative_convergence_bound(inputs: &BoundInputs, b1_exponent: B1Exponent) -> Result<f64> {
    let (factor, _) = inputs.log_factor()?;
    let l = inputs.depth as f64;
    let quarter = inputs.n.powf(-0.25);
    let curvature = quarter
        * (inputs.r / l).powi(2 * inputs.depth as i32)
        * (2.0 + l * l / 8.0 * middle_layer_max(inputs.r, inputs.depth, 2));
    let model = 48.0
        * (1.0 + inputs.b1.powi(b1_exponent.power()))
        * inputs.b0
        * inputs.r
        * layer_product(inputs.r, inputs.depth)
        * (2.0 * l * inputs.param_count.ln()).sqrt()
        * quarter
        * factor;
    Ok(curvature + model)
}

/// Every bound evaluated at one set of inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lip_param: f64,
    pub lip_l2pn: f64,
    pub sup_model: f64,
    pub grad_l1: f64,
    pub divergence: f64,
    pub c1: f64,
    pub rademacher: f64,
    pub model_convergence: f64,
    pub derivative_convergence: f64,
    /// Parenthesised `1 + log(c₁√n)√(E‖x‖∞²)` after clamping.
    pub log_factor: f64,
    pub log_factor_clamped: bool,
    pub b1_exponent: B1Exponent,
}

impl BoundReport {
    /// `lip_param` uses `‖x‖∞ = R`; `lip_l2pn` uses `√(E‖x‖∞²)` for the sample RMS.
    pub fn evaluate(inputs: &BoundInputs, b1_exponent: B1Exponent) -> Result<Self> {
        inputs.validate()?;
        let (log_factor, log_factor_clamped) = inputs.log_factor()?;
        Ok(Self {
            lip_param: lipschitz_param_bound(inputs.r, inputs.depth, inputs.input_bound)?,
            lip_l2pn: lip_l2pn_bound(inputs.r, inputs.depth, inputs.x_inf_sq.sqrt())?,
            sup_model: sup_model_bound(inputs.input_bound, inputs.r, inputs.depth)?,
            grad_l1: grad_l1_bound(inputs.r, inputs.depth)?,
            divergence: divergence_bound(inputs.r, inputs.depth)?,
            c1: inputs.c1()?,
            rademacher: rademacher_bound(inputs)?,
            model_convergence: model_convergence_bound(inputs)?,
            derivative_convergence: derivative_convergence_bound(inputs, b1_exponent)?,
            log_factor,
            log_factor_clamped,
            b1_exponent,
        })
    }
}

/// Pointwise inequalities audited by [`verify_bounds`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditedBound {
    /// `|f_Θ(x) - f_Θ'(x)| <= √L (r/(L-1))^{L-1} ‖x‖∞ ‖Θ - Θ'‖_F`.
    LipschitzParam,
    /// `|f_Θ(x)| <= R (r/L)^L`.
    SupModel,
    /// `‖∇ₓf‖₁ <= (r/L)^L`.
    GradL1,
    /// `|Δₓf| <= (L/4)(r/L)^L max_k (r/k)^k`.
    Divergence,
}

impl AuditedBound {
    pub const ALL: [AuditedBound; 4] =
        [AuditedBound::LipschitzParam, AuditedBound::SupModel, AuditedBound::GradL1, AuditedBound::Divergence];

    pub fn name(self) -> &'static str {
        match self {
            AuditedBound::LipschitzParam => "lipschitz_param",
            AuditedBound::SupModel => "sup_model",
            AuditedBound::GradL1 => "grad_l1",
            AuditedBound::Divergence => "divergence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditOptions {
    /// An inequality counts as violated when `lhs > rhs · (1 + slack)`.
    pub slack: f64,
    /// Multiplies the `‖∇ₓf‖₁` bound before comparing. Only for mutation tests; keep at 1.
    pub grad_bound_scale: f64,
    /// Sup-norm bound `R` on sampled inputs.
    pub input_bound: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self { slack: 1e-9, grad_bound_scale: 1.0, input_bound: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub bound_name: String,
    pub trials: usize,
    pub violations: usize,
    /// Largest observed `lhs / rhs`.
    pub worst_ratio: f64,
}

/// Draws a network inside the ℓ1 ball: dense Gaussian weights at a random scale, or
/// a sparse network with a few large weights per layer, then projected.
pub fn sample_ball_network<R: Rng + ?Sized>(
    widths: &[usize],
    activation: ActivationKind,
    r: f64,
    sparse: bool,
    rng: &mut R,
) -> Result<Network> {
    let shapes = crate::net::layer_shapes(widths)?;
    let mut values = Vec::new();
    if sparse {
        let shares: Vec<f64> = (0..shapes.len()).map(|_| rng.random_range(0.05..1.0)).collect();
        let total_share: f64 = shares.iter().sum();
        let fill = rng.random_range(0.5..=1.0);
        for (&(rows, cols), share) in shapes.iter().zip(&shares) {
            let mut layer = vec![0.0; rows * cols];
            let k = rng.random_range(1..=3.min(layer.len()));
            for _ in 0..k {
                let idx = rng.random_range(0..layer.len());
                layer[idx] = StandardNormal.sample(rng);
            }
            let norm: f64 = layer.iter().map(|v: &f64| v.abs()).sum();
            if norm > 0.0 {
                let target = r * fill * share / total_share;
                layer.iter_mut().for_each(|v| *v *= target / norm);
            }
            values.extend(layer);
        }
    } else {
        let scale = rng.random_range(-2.0f64..2.0).exp();
        for (l, &(rows, cols)) in shapes.iter().enumerate() {
            let normal = Normal::new(0.0, (2.0 / widths[l] as f64).sqrt()).expect("positive std");
            values.extend((0..rows * cols).map(|_| scale * normal.sample(rng)));
        }
    }
    if r > 0.0 {
        project_l1_in_place(&mut values, r);
    } else {
        values.fill(0.0);
    }
    FlatParams { values, shapes }.to_network(activation)
}

/// An input with `‖x‖∞ <= R`: uniform in the box, with each coordinate snapped to a
/// face half of the time so the sup-norm is attained.
pub fn sample_box_input<R: Rng + ?Sized>(d: usize, input_bound: f64, rng: &mut R) -> Vec<f64> {
    let snap = rng.random_bool(0.5);
    (0..d)
        .map(|_| {
            if snap && rng.random_bool(0.5) {
                if rng.random_bool(0.5) {
                    input_bound
                } else {
                    -input_bound
                }
            } else {
                rng.random_range(-input_bound..=input_bound)
            }
        })
        .collect()
}

/// Ratios `lhs/rhs` for one trial, in [`AuditedBound::ALL`] order.
fn audit_trial(widths: &[usize], r: f64, opts: &AuditOptions, seed: u64, trial: usize) -> Result<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let depth = widths.len();
    let sparse = trial % 2 == 1;
    let net = sample_ball_network(widths, ActivationKind::Softplus, r, sparse, &mut rng)?;
    let other = if rng.random_bool(0.5) {
        sample_ball_network(widths, ActivationKind::Softplus, r, !sparse, &mut rng)?
    } else {
        // nearby point of the ball
        let eps = rng.random_range(-6.0f64..0.0).exp();
        let mut flat = FlatParams::from_network(&net);
        for v in flat.values.iter_mut() {
            *v += eps * rng.sample::<f64, _>(StandardNormal);
        }
        if r > 0.0 {
            project_l1_in_place(&mut flat.values, r);
        } else {
            flat.values.fill(0.0);
        }
        flat.to_network(ActivationKind::Softplus)?
    };
    let x = sample_box_input(widths[0], opts.input_bound, &mut rng);

    let trace = net.forward(&x)?;
    let grad = net.grad_input(&trace)?;
    let lap = net.laplacian_input(&trace)?;
    let x_inf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let theta_dist: f64 = FlatParams::from_network(&net)
        .values
        .iter()
        .zip(&FlatParams::from_network(&other).values)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let ratio = |lhs: f64, rhs: f64| if lhs == 0.0 { 0.0 } else { lhs / rhs };
    Ok([
        ratio((trace.output - other.output(&x)?).abs(), lipschitz_param_bound(r, depth, x_inf)? * theta_dist),
        ratio(trace.output.abs(), sup_model_bound(opts.input_bound, r, depth)?),
        ratio(grad.iter().map(|v| v.abs()).sum(), opts.grad_bound_scale * grad_l1_bound(r, depth)?),
        ratio(lap.abs(), divergence_bound(r, depth)?),
    ])
}

/// Samples `trials` softplus networks in the ball of radius `r` (alternating dense and
/// sparse draws) and inputs in the `R` box; counts violations of each pointwise bound.
pub fn verify_bounds(widths: &[usize], r: f64, trials: usize, seed: u64, opts: &AuditOptions) -> Result<Vec<BoundCheck>> {
    check_depth(widths.len())?;
    check_nonneg("r", r)?;
    if trials == 0 {
        return Err(domain("trials must be >= 1"));
    }
    let ratios: Vec<[f64; 4]> =
        (0..trials).into_par_iter().map(|t| audit_trial(widths, r, opts, seed, t)).collect::<Result<_>>()?;
    Ok(AuditedBound::ALL
        .iter()
        .enumerate()
        .map(|(b, bound)| {
            let column = ratios.iter().map(|row| row[b]);
            BoundCheck {
                bound_name: bound.name().to_string(),
                trials,
                violations: column.clone().filter(|&q| q > 1.0 + opts.slack || q.is_nan()).count(),
                worst_ratio: column.fold(0.0, f64::max),
            }
        })
        .collect())
}

/// `‖Θ‖₁` of a sampled network never exceeds the radius beyond rounding.
pub fn within_ball(net: &Network, r: f64) -> bool {
    param_l1_norm(net) <= r * (1.0 + 1e-12)
}
