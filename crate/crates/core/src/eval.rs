//! Monte-Carlo L² error estimators, finite-difference oracles and a sampled check
//! of the integration-by-parts identity
//! `-E[∇f·∇g] = E[(Δf + ∇f·∇log p) g]` under the data density.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::datagen::{grad_log_density, DataSpec};
use crate::error::{config, domain, Result};
use crate::matrix::{dot, Matrix};
use crate::net::Network;

/// Added to the denominator of the relative gap so two zeros compare equal.
pub const REL_GAP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    PredictionL2,
    GradientL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub value: f64,
    pub n_test: usize,
    pub kind: ErrorKind,
}

fn check_test_set(model: &Network, teacher: &Network, x_test: &Matrix) -> Result<()> {
    if x_test.rows() == 0 {
        return Err(domain("test set is empty"));
    }
    if model.input_dim() != x_test.cols() || teacher.input_dim() != x_test.cols() {
        return Err(config(format!(
            "test inputs have {} columns; model expects {}, teacher {}",
            x_test.cols(),
            model.input_dim(),
            teacher.input_dim()
        )));
    }
    Ok(())
}

/// `(1/m) Σ_j (f̂(x_j) - f₀(x_j))²`.
pub fn l2_prediction_error(model: &Network, teacher: &Network, x_test: &Matrix) -> Result<ErrorEstimate> {
    check_test_set(model, teacher, x_test)?;
    let m = x_test.rows();
    let sum: f64 = (0..m)
        .map(|j| {
            let x = x_test.row(j);
            (model.output_unchecked(x) - teacher.output_unchecked(x)).powi(2)
        })
        .sum();
    Ok(ErrorEstimate { value: sum / m as f64, n_test: m, kind: ErrorKind::PredictionL2 })
}

/// `(1/m) Σ_j ‖∇f̂(x_j) - ∇f₀(x_j)‖₂²`.
pub fn l2_gradient_error(model: &Network, teacher: &Network, x_test: &Matrix) -> Result<ErrorEstimate> {
    check_test_set(model, teacher, x_test)?;
    let m = x_test.rows();
    let mut sum = 0.0;
    for j in 0..m {
        let x = x_test.row(j);
        let (_, gm) = model.value_and_grad_input(x)?;
        let (_, gt) = teacher.value_and_grad_input(x)?;
        sum += gm.iter().zip(&gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(ErrorEstimate { value: sum / m as f64, n_test: m, kind: ErrorKind::GradientL2 })
}

/// Teacher outputs and input gradients on a fixed test set, reusable across many models.
#[derive(Debug, Clone)]
pub struct TeacherReference {
    pub x_test: Matrix,
    pub outputs: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

impl TeacherReference {
    pub fn new(teacher: &Network, x_test: Matrix) -> Result<Self> {
        check_test_set(teacher, teacher, &x_test)?;
        let mut outputs = Vec::with_capacity(x_test.rows());
        let mut grads = Vec::with_capacity(x_test.rows());
        for j in 0..x_test.rows() {
            let (v, g) = teacher.value_and_grad_input(x_test.row(j))?;
            outputs.push(v);
            grads.push(g);
        }
        Ok(Self { x_test, outputs, grads })
    }

    /// Both error estimates against the cached teacher; matches
    /// [`l2_prediction_error`] and [`l2_gradient_error`] bit for bit.
    pub fn errors(&self, model: &Network) -> Result<(ErrorEstimate, ErrorEstimate)> {
        if model.input_dim() != self.x_test.cols() {
            return Err(config("model input dimension does not match the test set"));
        }
        let m = self.x_test.rows();
        let mut pred = 0.0;
        let mut grad = 0.0;
        for j in 0..m {
            let (v, g) = model.value_and_grad_input(self.x_test.row(j))?;
            pred += (v - self.outputs[j]).powi(2);
            grad += g.iter().zip(&self.grads[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok((
            ErrorEstimate { value: pred / m as f64, n_test: m, kind: ErrorKind::PredictionL2 },
            ErrorEstimate { value: grad / m as f64, n_test: m, kind: ErrorKind::GradientL2 },
        ))
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_gradient(net: &Network, x: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(domain("finite-difference step must be positive"));
    }
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + step;
            let up = net.output(&xp)?;
            xp[i] = x[i] - step;
            let down = net.output(&xp)?;
            xp[i] = x[i];
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// `Σ_i (f(x + h e_i) - 2 f(x) + f(x - h e_i)) / h²`.
pub fn finite_diff_laplacian(net: &Network, x: &[f64], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(domain("finite-difference step must be positive"));
    }
    let center = net.output(x)?;
    let mut xp = x.to_vec();
    let mut total = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let up = net.output(&xp)?;
        xp[i] = x[i] - step;
        let down = net.output(&xp)?;
        xp[i] = x[i];
        total += (up - 2.0 * center + down) / (step * step);
    }
    Ok(total)
}

/// Richardson extrapolation of [`finite_diff_laplacian`]: `(4 D(h/2) - D(h)) / 3`,
/// which cancels the `h²` truncation term.
pub fn finite_diff_laplacian_extrapolated(net: &Network, x: &[f64], step: f64) -> Result<f64> {
    let coarse = finite_diff_laplacian(net, x, step)?;
    let fine = finite_diff_laplacian(net, x, 0.5 * step)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenReport {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_gap: f64,
    pub m: usize,
    pub seed: u64,
}

/// Number of samples per parallel chunk; each chunk owns its own RNG stream.
const GREEN_CHUNK: usize = 1 << 14;

/// Monte-Carlo estimates of `lhs = -(1/m) Σ ∇f·∇g` and
/// `rhs = (1/m) Σ (Δf + ∇f·∇log p) g` over `m` draws from the data density.
///
/// Both sides use the same draws. Chunks are reduced in index order, so the
/// result depends only on `seed`, not on the thread count.
pub fn green_identity_check(f: &Network, g: &Network, dspec: &DataSpec, m: usize, seed: u64) -> Result<GreenReport> {
    if f.activation() != ActivationKind::Softplus || g.activation() != ActivationKind::Softplus {
        return Err(domain("the Laplacian identity needs smooth (softplus) networks"));
    }
    if f.input_dim() != g.input_dim() {
        return Err(config("f and g must share the input dimension"));
    }
    if m == 0 {
        return Err(domain("need at least one sample"));
    }
    dspec.validate()?;
    let d = f.input_dim();
    let chunks = m.div_ceil(GREEN_CHUNK);
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<(f64, f64)> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = GREEN_CHUNK.min(m - c * GREEN_CHUNK);
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for _ in 0..count {
                let x = dspec.sample_input(d, &mut rng);
                let tf = f.forward(&x)?;
                let grad_f = f.grad_input(&tf)?;
                let lap_f = f.laplacian_input(&tf)?;
                let tg = g.forward(&x)?;
                let grad_g = g.grad_input(&tg)?;
                let score = grad_log_density(&x, dspec)?;
                lhs -= dot(&grad_f, &grad_g);
                rhs += (lap_f + dot(&grad_f, &score)) * tg.output;
            }
            Ok((lhs, rhs))
        })
        .collect::<Result<_>>()?;
    let (lhs, rhs) = partial.iter().fold((0.0, 0.0), |(a, b), (l, r)| (a + l, b + r));
    let lhs = lhs / m as f64;
    let rhs = rhs / m as f64;
    Ok(GreenReport { lhs, rhs, rel_gap: rel_gap(lhs, rhs), m, seed })
}

/// `|a - b| / max(|a|, |b|, ε)`.
pub fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_GAP_EPS)
}

/// `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂, tiny)`, the usual gradient-check metric.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_teacher, TeacherSpec};
    use rand::Rng;

    fn symmetric_net() -> Network {
        Network::new(
            vec![
                Matrix::from_rows(vec![vec![1.0], vec![-1.0]]).unwrap(),
                Matrix::from_rows(vec![vec![1.0, 1.0]]).unwrap(),
            ],
            ActivationKind::Softplus,
        )
        .unwrap()
    }

    fn teacher(seed: u64, d: usize, s: usize, act: ActivationKind) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        make_teacher(&TeacherSpec { d, s, hidden: 6 }, 3, act, &mut rng).unwrap()
    }

    #[test]
    fn errors_vanish_for_identical_models() {
        let t = teacher(1, 6, 3, ActivationKind::Softplus);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DataSpec::default().sample_inputs(500, 6, &mut rng);
        assert_eq!(l2_prediction_error(&t, &t, &x).unwrap().value, 0.0);
        assert_eq!(l2_gradient_error(&t, &t, &x).unwrap().value, 0.0);
        let reference = TeacherReference::new(&t, x).unwrap();
        let (p, g) = reference.errors(&t).unwrap();
        assert_eq!((p.value, g.value), (0.0, 0.0));
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let t = teacher(1, 4, 2, ActivationKind::Softplus);
        let x = Matrix::zeros(0, 4);
        assert!(l2_prediction_error(&t, &t, &x).is_err());
        assert!(l2_gradient_error(&t, &t, &x).is_err());
    }

    #[test]
    fn constant_shift_gives_squared_offset() {
        // No biases: the shift comes from an input column pinned at 1 that only
        // the model's extra relu unit reads.
        let c = 0.37;
        let d = 3;
        let teacher = Network::new(
            vec![
                Matrix::from_rows(vec![vec![0.5, -1.0, 0.0], vec![0.3, 0.2, 0.0]]).unwrap(),
                Matrix::from_rows(vec![vec![1.0, -2.0]]).unwrap(),
            ],
            ActivationKind::Relu,
        )
        .unwrap();
        let model = Network::new(
            vec![
                Matrix::from_rows(vec![vec![0.5, -1.0, 0.0], vec![0.3, 0.2, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
                Matrix::from_rows(vec![vec![1.0, -2.0, c]]).unwrap(),
            ],
            ActivationKind::Relu,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_fn(200, d, |_, j| if j == 2 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let e = l2_prediction_error(&model, &teacher, &x).unwrap();
        assert!((e.value - c * c).abs() < 1e-15);
        assert_eq!(e.kind, ErrorKind::PredictionL2);
        assert_eq!(e.n_test, 200);
    }

    #[test]
    fn gradient_error_on_irrelevant_coordinates() {
        let t = teacher(4, 6, 2, ActivationKind::Softplus);
        let model = teacher(5, 6, 6, ActivationKind::Softplus);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DataSpec::default().sample_inputs(300, 6, &mut rng);
        let mut expected = 0.0;
        for j in 0..300 {
            let (_, gm) = model.value_and_grad_input(x.row(j)).unwrap();
            let (_, gt) = t.value_and_grad_input(x.row(j)).unwrap();
            assert!(gt[2..].iter().all(|&v| v == 0.0));
            expected += gm[2..].iter().map(|v| v * v).sum::<f64>();
        }
        expected /= 300.0;
        let restricted: f64 = (0..300)
            .map(|j| {
                let (_, gm) = model.value_and_grad_input(x.row(j)).unwrap();
                let (_, gt) = t.value_and_grad_input(x.row(j)).unwrap();
                (2..6).map(|i| (gm[i] - gt[i]).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / 300.0;
        assert_eq!(restricted, expected);
    }

    #[test]
    fn estimators_are_permutation_invariant() {
        let t = teacher(7, 5, 3, ActivationKind::Softplus);
        let model = teacher(8, 5, 5, ActivationKind::Softplus);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DataSpec::default().sample_inputs(64, 5, &mut rng);
        let rows: Vec<Vec<f64>> = (0..64).rev().map(|j| x.row(j).to_vec()).collect();
        let xr = Matrix::from_rows(rows).unwrap();
        let a = l2_prediction_error(&model, &t, &x).unwrap().value;
        let b = l2_prediction_error(&model, &t, &xr).unwrap().value;
        assert!((a - b).abs() <= 1e-14 * a.max(1.0));
        let a = l2_gradient_error(&model, &t, &x).unwrap().value;
        let b = l2_gradient_error(&model, &t, &xr).unwrap().value;
        assert!((a - b).abs() <= 1e-14 * a.max(1.0));
    }

    #[test]
    fn cached_reference_matches_direct_estimators() {
        let t = teacher(10, 5, 2, ActivationKind::Relu);
        let model = teacher(11, 5, 5, ActivationKind::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = DataSpec::default().sample_inputs(128, 5, &mut rng);
        let (p, g) = TeacherReference::new(&t, x.clone()).unwrap().errors(&model).unwrap();
        assert_eq!(p, l2_prediction_error(&model, &t, &x).unwrap());
        assert_eq!(g, l2_gradient_error(&model, &t, &x).unwrap());
    }

    #[test]
    fn monte_carlo_estimate_is_self_consistent() {
        let t = teacher(13, 4, 2, ActivationKind::Softplus);
        let model = teacher(14, 4, 4, ActivationKind::Softplus);
        let dspec = DataSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let small = dspec.sample_inputs(10_000, 4, &mut rng);
        let sq: Vec<f64> = (0..10_000)
            .map(|j| (model.output(small.row(j)).unwrap() - t.output(small.row(j)).unwrap()).powi(2))
            .collect();
        let mean = sq.iter().sum::<f64>() / sq.len() as f64;
        let se = (sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (sq.len() - 1) as f64 / sq.len() as f64).sqrt();
        let large = dspec.sample_inputs(1_000_000, 4, &mut rng);
        let big = l2_prediction_error(&model, &t, &large).unwrap().value;
        assert!((mean - big).abs() <= 3.0 * se, "{mean} vs {big} (se {se})");
    }

    #[test]
    fn finite_difference_laplacian_on_symmetric_net() {
        let v = finite_diff_laplacian(&symmetric_net(), &[0.0], 1e-3).unwrap();
        assert!((v - 0.5).abs() <= 1e-6);
        assert!(finite_diff_gradient(&symmetric_net(), &[0.0], 0.0).is_err());
    }

    #[test]
    fn finite_difference_error_shrinks_quadratically() {
        let t = teacher(16, 3, 3, ActivationKind::Softplus);
        let x = [0.7, -0.4, 1.1];
        let exact = t.value_and_grad_input(&x).unwrap().1;
        let err = |h: f64| relative_error(&finite_diff_gradient(&t, &x, h).unwrap(), &exact);
        let ratio = err(0.1) / err(0.05);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn relu_finite_differences_are_exact_away_from_kinks() {
        let t = teacher(17, 4, 4, ActivationKind::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut checked = 0;
        while checked < 20 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let trace = t.forward(&x).unwrap();
            if trace.preactivations.iter().flatten().any(|z| z.abs() < 1e-3) {
                continue;
            }
            let fd = finite_diff_gradient(&t, &x, 1e-6).unwrap();
            let g = t.grad_input(&trace).unwrap();
            for (a, b) in fd.iter().zip(&g) {
                assert!((a - b).abs() <= 1e-8);
            }
            checked += 1;
        }
    }

    #[test]
    fn green_check_zero_network() {
        let f = Network::zeros(&[2, 3, 3], ActivationKind::Softplus).unwrap();
        let g = teacher(19, 2, 2, ActivationKind::Softplus);
        let rep = green_identity_check(&f, &g, &DataSpec::default(), 10_000, 1).unwrap();
        assert_eq!((rep.lhs, rep.rhs, rep.rel_gap), (0.0, 0.0, 0.0));
    }

    #[test]
    fn green_check_rejects_relu() {
        let f = teacher(20, 2, 2, ActivationKind::Relu);
        let g = teacher(21, 2, 2, ActivationKind::Softplus);
        assert!(green_identity_check(&f, &g, &DataSpec::default(), 100, 1).is_err());
    }

    #[test]
    fn green_check_is_deterministic() {
        let f = teacher(22, 2, 2, ActivationKind::Softplus);
        let g = teacher(23, 2, 2, ActivationKind::Softplus);
        let a = green_identity_check(&f, &g, &DataSpec::default(), 40_000, 5).unwrap();
        let b = green_identity_check(&f, &g, &DataSpec::default(), 40_000, 5).unwrap();
        assert_eq!(a, b);
    }
}
