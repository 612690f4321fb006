//! Dense fully-connected networks `f(x) = θ_L σ(θ_{L-1} ⋯ σ(θ_1 x) ⋯)` without biases.
//!
//! A [`ForwardTrace`] caches every hidden preactivation `z_l`, activation `h_l` and
//! the pointwise derivatives `h'_l = σ'(z_l)`, `h''_l = σ''(z_l)`. All derivative
//! routines consume a trace:
//!
//! * [`Network::grad_params`]: `∂f/∂θ_l = δ_l h_{l-1}ᵀ` where `δ_L = 1` and
//!   `δ_l = h'_l ⊙ θ_{l+1}ᵀ δ_{l+1}`.
//! * [`Network::grad_input`]: `∇ₓf = θ_1ᵀ δ_1`.
//! * [`Network::laplacian_input`]: `Δₓf = Σ_i Σ_k ⟨∂(∂_i f)/∂h'_k, ∂h'_k/∂x_i⟩`.
//!   With `J_k = ∂z_k/∂x` and the backward vector `b_k = θ_{k+1}ᵀ δ_{k+1}` this
//!   collapses to `Σ_k Σ_j b_kj · h''_kj · ‖J_k[j, :]‖²`.

use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{config, Error, Result};
use crate::matrix::{axpy, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRepr", into = "NetworkRepr")]
pub struct Network {
    layers: Vec<Matrix>,
    activation: ActivationKind,
}

/// On-disk form: `{"activation": "...", "layers": [[[row], ...], ...]}`.
#[derive(Serialize, Deserialize)]
struct NetworkRepr {
    activation: ActivationKind,
    layers: Vec<Matrix>,
}

impl TryFrom<NetworkRepr> for Network {
    type Error = Error;

    fn try_from(r: NetworkRepr) -> Result<Self> {
        Network::new(r.layers, r.activation)
    }
}

impl From<Network> for NetworkRepr {
    fn from(n: Network) -> Self {
        NetworkRepr { activation: n.activation, layers: n.layers }
    }
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `h_0 = x, h_1, …, h_{L-1}`.
    pub activations: Vec<Vec<f64>>,
    /// `z_1, …, z_{L-1}`.
    pub preactivations: Vec<Vec<f64>>,
    /// `h'_1, …, h'_{L-1}`.
    pub first_derivs: Vec<Vec<f64>>,
    /// `h''_1, …, h''_{L-1}`.
    pub second_derivs: Vec<Vec<f64>>,
    pub output: f64,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

impl Network {
    /// Validates the layer chain: at least two layers, matching inner dimensions,
    /// scalar output and finite weights.
    pub fn new(layers: Vec<Matrix>, activation: ActivationKind) -> Result<Self> {
        if layers.len() < 2 {
            return Err(config(format!("a network needs at least 2 layers, got {}", layers.len())));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return Err(config(format!(
                    "layer {} has {} columns but layer {} has {} rows",
                    l + 2,
                    pair[1].cols(),
                    l + 1,
                    pair[0].rows()
                )));
            }
        }
        let last = layers.last().expect("non-empty");
        if last.rows() != 1 {
            return Err(config(format!("output layer must have 1 row, got {}", last.rows())));
        }
        if layers.iter().any(|m| m.rows() == 0 || m.cols() == 0) {
            return Err(config("layers must be non-empty"));
        }
        if !layers.iter().all(Matrix::is_finite) {
            return Err(config("network weights must be finite"));
        }
        Ok(Self { layers, activation })
    }

    /// All-zero network with layer widths `widths = [d_0, d_1, …, d_{L-1}]` and scalar output.
    pub fn zeros(widths: &[usize], activation: ActivationKind) -> Result<Self> {
        Self::from_shape_fn(widths, activation, |_, _, _| 0.0)
    }

    /// Builds a network whose entry `(l, k, j)` (0-based layer index) is `f(l, k, j)`.
    pub fn from_shape_fn(
        widths: &[usize],
        activation: ActivationKind,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let shapes = layer_shapes(widths)?;
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(l, &(rows, cols))| Matrix::from_fn(rows, cols, |k, j| f(l, k, j)))
            .collect();
        Self::new(layers, activation)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    /// `[d_0, d_1, …, d_{L-1}]`; the output width `d_L = 1` is implicit.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers[..self.depth() - 1].iter().map(Matrix::rows)).collect()
    }

    /// `(d_l, d_{l-1})` for every layer.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(Matrix::shape).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn with_activation(&self, activation: ActivationKind) -> Network {
        Network { layers: self.layers.clone(), activation }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(config(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(config("input must be finite"));
        }
        Ok(())
    }

    /// Output only; skips the derivative caches.
    pub fn output(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.output_unchecked(x))
    }

    pub(crate) fn output_unchecked(&self, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        let mut z = Vec::new();
        let (last, hidden) = self.layers.split_last().expect("depth >= 2");
        for theta in hidden {
            z.resize(theta.rows(), 0.0);
            theta.matvec_into(&h, &mut z);
            h.clear();
            h.extend(z.iter().map(|&v| self.activation.value(v)));
        }
        crate::matrix::dot(last.row(0), &h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let depth = self.depth();
        let mut activations = Vec::with_capacity(depth);
        let mut preactivations = Vec::with_capacity(depth - 1);
        let mut first_derivs = Vec::with_capacity(depth - 1);
        let mut second_derivs = Vec::with_capacity(depth - 1);
        activations.push(x.to_vec());
        for theta in &self.layers[..depth - 1] {
            let z = theta.matvec(activations.last().expect("h_0 present"));
            let mut h = Vec::with_capacity(z.len());
            let mut d1 = Vec::with_capacity(z.len());
            let mut d2 = Vec::with_capacity(z.len());
            for &zj in &z {
                let e = self.activation.eval_unchecked(zj);
                h.push(e.value);
                d1.push(e.first);
                d2.push(e.second);
            }
            preactivations.push(z);
            activations.push(h);
            first_derivs.push(d1);
            second_derivs.push(d2);
        }
        let output = crate::matrix::dot(self.layers[depth - 1].row(0), &activations[depth - 1]);
        Ok(ForwardTrace { activations, preactivations, first_derivs, second_derivs, output })
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let depth = self.depth();
        let ok = trace.activations.len() == depth
            && trace.preactivations.len() == depth - 1
            && trace.first_derivs.len() == depth - 1
            && trace.second_derivs.len() == depth - 1
            && trace.activations[0].len() == self.input_dim()
            && self.layers[..depth - 1].iter().enumerate().all(|(l, theta)| {
                let w = theta.rows();
                trace.activations[l + 1].len() == w
                    && trace.preactivations[l].len() == w
                    && trace.first_derivs[l].len() == w
                    && trace.second_derivs[l].len() == w
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("forward trace does not match the network's shapes".into()))
        }
    }

    /// Backward vectors `δ_1, …, δ_{L-1}` (index `l - 1`) with `δ_l = ∂f/∂z_l`.
    fn backward_deltas(&self, trace: &ForwardTrace) -> Vec<Vec<f64>> {
        let depth = self.depth();
        let mut deltas = vec![Vec::new(); depth - 1];
        // b_{L-1} = θ_Lᵀ
        let mut b = self.layers[depth - 1].row(0).to_vec();
        for l in (1..depth).rev() {
            let delta: Vec<f64> =
                b.iter().zip(&trace.first_derivs[l - 1]).map(|(bj, dj)| bj * dj).collect();
            if l > 1 {
                b = self.layers[l - 1].matvec_t(&delta);
            }
            deltas[l - 1] = delta;
        }
        deltas
    }

    /// `∂f/∂θ_l` for every layer, shaped like `θ_l`.
    pub fn grad_params(&self, trace: &ForwardTrace) -> Result<Vec<Matrix>> {
        self.check_trace(trace)?;
        let depth = self.depth();
        let deltas = self.backward_deltas(trace);
        let mut grads = Vec::with_capacity(depth);
        for l in 0..depth {
            let h_prev = &trace.activations[l];
            let mut g = Matrix::zeros(self.layers[l].rows(), self.layers[l].cols());
            if l + 1 == depth {
                g.row_mut(0).copy_from_slice(h_prev);
            } else {
                for (k, &dk) in deltas[l].iter().enumerate() {
                    if dk != 0.0 {
                        axpy(dk, h_prev, g.row_mut(k));
                    }
                }
            }
            grads.push(g);
        }
        Ok(grads)
    }

    /// `∇ₓf = θ_1ᵀ (h'_1 ⊙ θ_2ᵀ ⋯ (h'_{L-1} ⊙ θ_Lᵀ))`, evaluated right to left.
    pub fn grad_input(&self, trace: &ForwardTrace) -> Result<Vec<f64>> {
        self.check_trace(trace)?;
        let deltas = self.backward_deltas(trace);
        Ok(self.layers[0].matvec_t(&deltas[0]))
    }

    /// Exact `Δₓf = Σ_i ∂²f/∂x_i²`. Zero for relu, whose second derivative is taken as 0.
    pub fn laplacian_input(&self, trace: &ForwardTrace) -> Result<f64> {
        self.check_trace(trace)?;
        if self.activation == ActivationKind::Relu {
            return Ok(0.0);
        }
        let depth = self.depth();
        let deltas = self.backward_deltas(trace);
        let mut total = 0.0;
        // J_1 = θ_1; J_k = θ_k diag(h'_{k-1}) J_{k-1}.
        let mut jac = self.layers[0].clone();
        for k in 1..depth {
            if k > 1 {
                let theta = &self.layers[k - 1];
                let prev_d1 = &trace.first_derivs[k - 2];
                let mut next = Matrix::zeros(theta.rows(), jac.cols());
                for r in 0..theta.rows() {
                    let out = next.row_mut(r);
                    for (m, (&t, &d)) in theta.row(r).iter().zip(prev_d1).enumerate() {
                        let c = t * d;
                        if c != 0.0 {
                            axpy(c, jac.row(m), out);
                        }
                    }
                }
                jac = next;
            }
            // b_k = δ_k / h'_k is recovered without division: b_k = θ_{k+1}ᵀ δ_{k+1}.
            let b: Vec<f64> = if k + 1 == depth {
                self.layers[depth - 1].row(0).to_vec()
            } else {
                self.layers[k].matvec_t(&deltas[k])
            };
            let d2 = &trace.second_derivs[k - 1];
            for j in 0..jac.rows() {
                let row_sq: f64 = jac.row(j).iter().map(|v| v * v).sum();
                total += b[j] * d2[j] * row_sq;
            }
        }
        Ok(total)
    }

    /// Adds `scale · ∂f/∂θ_l` into `grads[l]` for every layer.
    pub(crate) fn accumulate_grad_params(&self, trace: &ForwardTrace, scale: f64, grads: &mut [Matrix]) {
        let depth = self.depth();
        let deltas = self.backward_deltas(trace);
        for l in 0..depth {
            let h_prev = &trace.activations[l];
            if l + 1 == depth {
                axpy(scale, h_prev, grads[l].row_mut(0));
            } else {
                for (k, &dk) in deltas[l].iter().enumerate() {
                    if dk != 0.0 {
                        axpy(scale * dk, h_prev, grads[l].row_mut(k));
                    }
                }
            }
        }
    }

    /// Output and input gradient without keeping the trace around.
    pub fn value_and_grad_input(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let trace = self.forward(x)?;
        let g = self.grad_input(&trace)?;
        Ok((trace.output, g))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Layer shapes `(d_l, d_{l-1})` for hidden widths `widths = [d_0, …, d_{L-1}]` and a scalar output.
pub fn layer_shapes(widths: &[usize]) -> Result<Vec<(usize, usize)>> {
    if widths.len() < 2 {
        return Err(config("need an input width and at least one hidden width"));
    }
    if widths.contains(&0) {
        return Err(config("layer widths must be positive"));
    }
    let mut shapes: Vec<(usize, usize)> = widths.windows(2).map(|w| (w[1], w[0])).collect();
    shapes.push((1, *widths.last().expect("non-empty")));
    Ok(shapes)
}

/// Widths `[d, h, …, h]` for a depth-`depth` network with constant hidden width.
pub fn uniform_widths(input_dim: usize, hidden: usize, depth: usize) -> Vec<usize> {
    std::iter::once(input_dim).chain(std::iter::repeat_n(hidden, depth.saturating_sub(1))).collect()
}
