//! ℓ1 geometry of the parameter vector and projected gradient descent on the
//! constrained least-squares objective `min (1/n) Σ (y_i - f_Θ(x_i))²  s.t.  ‖Θ‖₁ <= r`.

use std::cmp::Ordering;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::datagen::{fmt_f64, Dataset};
use crate::error::{config, domain, Error, Result};
use crate::matrix::Matrix;
use crate::net::{layer_shapes, Network};

/// Inputs whose ℓ1 norm is within this relative margin of the radius count as feasible.
/// Keeps the projection exactly idempotent despite rounding in the norm itself.
pub const FEASIBILITY_RTOL: f64 = 1e-12;

/// All weights of a network concatenated layer by layer, each layer row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub values: Vec<f64>,
    /// `(d_l, d_{l-1})` per layer.
    pub shapes: Vec<(usize, usize)>,
}

impl FlatParams {
    pub fn from_network(net: &Network) -> Self {
        let values = net.layers().iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        Self { values, shapes: net.shapes() }
    }

    pub fn to_network(&self, activation: ActivationKind) -> Result<Network> {
        let expected: usize = self.shapes.iter().map(|(r, c)| r * c).sum();
        if expected != self.values.len() {
            return Err(config(format!("{} values for {expected} parameters", self.values.len())));
        }
        let mut offset = 0;
        let layers = self
            .shapes
            .iter()
            .map(|&(r, c)| {
                let m = Matrix::from_vec(r, c, self.values[offset..offset + r * c].to_vec());
                offset += r * c;
                m
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers, activation)
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }
}

/// `‖Θ‖₁ = Σ_l Σ_{k,j} |(θ_l)_{kj}|`.
pub fn param_l1_norm(net: &Network) -> f64 {
    net.layers().iter().map(Matrix::l1_norm).sum()
}

/// Euclidean projection onto `{w : ‖w‖₁ <= r}`.
///
/// Sort-based soft thresholding: with `u` the magnitudes sorted in decreasing
/// order, `ρ = max{j : u_j > (Σ_{i<=j} u_i - r)/j}` and `τ = (Σ_{i<=ρ} u_i - r)/ρ`;
/// the result is `sign(v) · max(|v| - τ, 0)`. Feasible inputs are returned unchanged.
pub fn project_l1(v: &[f64], r: f64) -> Result<Vec<f64>> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(domain(format!("projection radius must be positive, got {r}")));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(domain("cannot project a non-finite vector"));
    }
    let mut out = v.to_vec();
    project_l1_in_place(&mut out, r);
    Ok(out)
}

pub(crate) fn project_l1_in_place(v: &mut [f64], r: f64) {
    let norm: f64 = v.iter().map(|x| x.abs()).sum();
    if norm <= r * (1.0 + FEASIBILITY_RTOL) {
        return;
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| {
        v[b].abs().partial_cmp(&v[a].abs()).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &idx) in order.iter().enumerate() {
        let u = v[idx].abs();
        cumsum += u;
        let t = (cumsum - r) / (j + 1) as f64;
        if u > t {
            tau = t;
        } else {
            break;
        }
    }
    // Rounding can leave the shrunk sum a few ulps above r; nudge tau up until it is not.
    let shrunk_sum = |tau: f64| -> f64 { v.iter().map(|x| (x.abs() - tau).max(0.0)).sum() };
    while shrunk_sum(tau) > r {
        tau = tau.next_up();
    }
    for x in v.iter_mut() {
        let shrunk = (x.abs() - tau).max(0.0);
        *x = shrunk.copysign(*x);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Size(usize),
}

impl Serialize for BatchSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Size(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Size(usize),
        }
        match Repr::deserialize(d)? {
            Repr::Name(s) if s == "full" => Ok(BatchSize::Full),
            Repr::Name(s) => Err(serde::de::Error::custom(format!("batch_size must be \"full\" or a positive integer, got {s:?}"))),
            Repr::Size(0) => Err(serde::de::Error::custom("batch_size must be positive")),
            Repr::Size(n) => Ok(BatchSize::Size(n)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// ℓ1 radius `r`.
    pub radius: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub batch_size: BatchSize,
    /// Multiplier on the `N(0, 2/fan_in)` initial weights before projecting.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            step_size: 0.05,
            iterations: 5000,
            batch_size: BatchSize::Full,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(domain(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(domain(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.iterations == 0 {
            return Err(domain("iterations must be >= 1"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(domain("init_scale must be non-negative"));
        }
        Ok(())
    }
}

/// Widths `[d_0, …, d_{L-1}]` plus the activation of the student network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub activation: ActivationKind,
}

impl Architecture {
    pub fn uniform(input_dim: usize, hidden: usize, depth: usize, activation: ActivationKind) -> Self {
        Self { widths: crate::net::uniform_widths(input_dim, hidden, depth), activation }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(layer_shapes(&self.widths)?.iter().map(|(r, c)| r * c).sum())
    }
}

/// Feasible random start: entrywise `N(0, 2/fan_in)` scaled by `init_scale`, then
/// projected onto the ball.
pub fn init_network(arch: &Architecture, cfg: &TrainConfig) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normals: Vec<Normal<f64>> = arch
        .widths
        .iter()
        .map(|&fan_in| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std"))
        .collect();
    let net = Network::from_shape_fn(&arch.widths, arch.activation, |l, _, _| {
        cfg.init_scale * normals[l].sample(&mut rng)
    })?;
    let mut flat = FlatParams::from_network(&net);
    project_l1_in_place(&mut flat.values, cfg.radius);
    flat.to_network(arch.activation)
}

/// Mean squared error `(1/n) Σ (y_i - f(x_i))²`.
pub fn empirical_loss(net: &Network, data: &Dataset) -> f64 {
    let n = data.len();
    (0..n).map(|i| (data.y[i] - net.output_unchecked(data.x.row(i))).powi(2)).sum::<f64>() / n as f64
}

/// Trains from a fresh initialisation drawn with `cfg.seed`.
pub fn train(data: &Dataset, arch: &Architecture, cfg: &TrainConfig) -> Result<Network> {
    let init = init_network(arch, cfg)?;
    train_from(data, init, cfg, |_, _| {})
}

/// Projected gradient descent from `init`. `observe(t, net)` sees every post-projection iterate.
pub fn train_from(
    data: &Dataset,
    init: Network,
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &Network),
) -> Result<Network> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(domain("training set is empty"));
    }
    if data.dim() != init.input_dim() {
        return Err(config(format!(
            "data has {} inputs, network expects {}",
            data.dim(),
            init.input_dim()
        )));
    }
    let activation = init.activation();
    let n = data.len();
    let batch = match cfg.batch_size {
        BatchSize::Full => n,
        BatchSize::Size(b) => b.min(n),
    };
    // Shuffling stream is independent from the initialisation stream.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut net = init;
    let mut flat = FlatParams::from_network(&net);
    project_l1_in_place(&mut flat.values, cfg.radius);
    net = flat.to_network(activation)?;
    let mut grads: Vec<Matrix> = net.shapes().iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();

    for t in 0..cfg.iterations {
        let indices: &[usize] = if batch == n {
            &order
        } else {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch;
            &order[cursor - batch..cursor]
        };
        grads.iter_mut().for_each(|g| g.as_mut_slice().fill(0.0));
        let mut loss = 0.0;
        let scale = 2.0 / indices.len() as f64;
        for &i in indices {
            let trace = net.forward(data.x.row(i))?;
            let resid = trace.output - data.y[i];
            loss += resid * resid;
            // ∂/∂θ (f - y)² = 2 (f - y) ∂f/∂θ
            net.accumulate_grad_params(&trace, scale * resid, &mut grads);
        }
        loss /= indices.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: t, loss });
        }
        let mut offset = 0;
        for g in &grads {
            for (w, gv) in flat.values[offset..offset + g.as_slice().len()].iter_mut().zip(g.as_slice()) {
                *w -= cfg.step_size * gv;
            }
            offset += g.as_slice().len();
        }
        if !flat.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { iteration: t, loss: f64::NAN });
        }
        project_l1_in_place(&mut flat.values, cfg.radius);
        write_back(&flat, &mut net);
        observe(t, &net);
    }
    Ok(net)
}

fn write_back(flat: &FlatParams, net: &mut Network) {
    let mut offset = 0;
    for m in net.layers_mut() {
        let len = m.as_slice().len();
        m.as_mut_slice().copy_from_slice(&flat.values[offset..offset + len]);
        offset += len;
    }
}

/// One row of the optional training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub full_batch_loss: f64,
    pub l1_norm: f64,
}

/// Trains while recording the full-batch loss and ℓ1 norm after every step.
pub fn train_logged(data: &Dataset, init: Network, cfg: &TrainConfig) -> Result<(Network, Vec<TrainLogRow>)> {
    let mut rows = Vec::with_capacity(cfg.iterations);
    let net = train_from(data, init, cfg, |t, net| {
        rows.push(TrainLogRow { iteration: t, full_batch_loss: empirical_loss(net, data), l1_norm: param_l1_norm(net) });
    })?;
    Ok((net, rows))
}

pub fn write_train_log<W: Write>(rows: &[TrainLogRow], mut out: W) -> Result<()> {
    writeln!(out, "iteration,full_batch_loss,l1_norm")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.iteration, fmt_f64(r.full_batch_loss), fmt_f64(r.l1_norm))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_teacher, synthesize, DataSpec, TeacherSpec};
    use proptest::prelude::*;

    /// Brute-force projection: enumerate every support S, take the threshold
    /// `τ = (Σ_S |v_i| - r)/|S|` and keep the one satisfying the KKT conditions.
    fn kkt_scan_projection(v: &[f64], r: f64) -> Vec<f64> {
        let norm: f64 = v.iter().map(|x| x.abs()).sum();
        if norm <= r {
            return v.to_vec();
        }
        let d = v.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << d) {
            let support: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
            let s: f64 = support.iter().map(|&i| v[i].abs()).sum();
            let tau = (s - r) / support.len() as f64;
            if tau < 0.0 {
                continue;
            }
            let ok = (0..d).all(|i| if mask & (1 << i) != 0 { v[i].abs() >= tau } else { v[i].abs() <= tau });
            if !ok {
                continue;
            }
            let w: Vec<f64> = (0..d).map(|i| if mask & (1 << i) != 0 { (v[i].abs() - tau).copysign(v[i]) } else { 0.0 }).collect();
            let dist: f64 = w.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
                best = Some((dist, w));
            }
        }
        best.expect("some support satisfies KKT").1
    }

    #[test]
    fn l1_norm_examples() {
        let net = Network::new(
            vec![
                Matrix::from_rows(vec![vec![1.0, -2.0], vec![0.0, 3.0]]).unwrap(),
                Matrix::from_rows(vec![vec![1.0, -1.0]]).unwrap(),
            ],
            ActivationKind::Softplus,
        )
        .unwrap();
        assert_eq!(param_l1_norm(&net), 8.0);
        assert_eq!(FlatParams::from_network(&net).l1_norm(), 8.0);
        assert_eq!(param_l1_norm(&Network::zeros(&[3, 2], ActivationKind::Relu).unwrap()), 0.0);
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = make_teacher(&TeacherSpec { d: 4, s: 2, hidden: 3 }, 3, ActivationKind::Softplus, &mut rng).unwrap();
        let flat = FlatParams::from_network(&t);
        assert_eq!(flat.values.len(), t.param_count());
        assert_eq!(flat.to_network(ActivationKind::Softplus).unwrap(), t);
        assert!((flat.l1_norm() - param_l1_norm(&t)).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_l1(&[0.5, -0.5], 2.0).unwrap(), vec![0.5, -0.5]);
        assert_eq!(project_l1(&[3.0, 1.0], 2.0).unwrap(), vec![2.0, 0.0]);
        assert_eq!(project_l1(&[1.0, 1.0], 1.0).unwrap(), vec![0.5, 0.5]);
        assert_eq!(project_l1(&[-3.0, 1.0], 2.0).unwrap(), vec![-2.0, 0.0]);
        assert_eq!(kkt_scan_projection(&[3.0, 1.0], 2.0), vec![2.0, 0.0]);
        assert_eq!(kkt_scan_projection(&[1.0, 1.0], 1.0), vec![0.5, 0.5]);
    }

    #[test]
    fn projection_rejects_bad_radius() {
        assert!(matches!(project_l1(&[1.0], 0.0), Err(Error::Domain(_))));
        assert!(project_l1(&[1.0], -1.0).is_err());
        assert!(project_l1(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn projection_with_ties() {
        let w = project_l1(&[2.0, -2.0, 2.0, 0.5], 3.0).unwrap();
        assert_eq!(w, vec![1.0, -1.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn projection_matches_kkt_scan(v in prop::collection::vec(-5.0f64..5.0, 1..=10), r in 0.01f64..10.0) {
            let w = project_l1(&v, r).unwrap();
            let oracle = kkt_scan_projection(&v, r);
            let dist: f64 = w.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dist <= 1e-8);
        }

        #[test]
        fn projection_is_feasible_and_idempotent(v in prop::collection::vec(-100.0f64..100.0, 1..200), r in 1e-3f64..50.0) {
            let w = project_l1(&v, r).unwrap();
            prop_assert!(w.iter().map(|x| x.abs()).sum::<f64>() <= r * (1.0 + 1e-12));
            prop_assert_eq!(project_l1(&w, r).unwrap(), w);
        }

        #[test]
        fn projection_is_non_expansive(
            pair in (1usize..30).prop_flat_map(|d| (prop::collection::vec(-10.0f64..10.0, d), prop::collection::vec(-10.0f64..10.0, d))),
            r in 0.1f64..20.0,
        ) {
            let (v, u) = pair;
            let pv = project_l1(&v, r).unwrap();
            let pu = project_l1(&u, r).unwrap();
            let d_out: f64 = pv.iter().zip(&pu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let d_in: f64 = v.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d_out <= d_in * (1.0 + 1e-12) + 1e-12);
        }
    }

    fn small_problem(noise_std: f64) -> (Network, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let teacher = make_teacher(&TeacherSpec { d: 2, s: 2, hidden: 4 }, 2, ActivationKind::Softplus, &mut rng).unwrap();
        let data = synthesize(&teacher, 200, &DataSpec { noise_std, ..DataSpec::default() }, &mut rng).unwrap();
        (teacher, data)
    }

    #[test]
    fn teacher_is_a_stationary_point() {
        let (teacher, data) = small_problem(0.0);
        assert_eq!(empirical_loss(&teacher, &data), 0.0);
        let cfg = TrainConfig { radius: param_l1_norm(&teacher) * 2.0, iterations: 20, ..TrainConfig::default() };
        let out = train_from(&data, teacher.clone(), &cfg, |_, _| {}).unwrap();
        assert_eq!(out, teacher);
    }

    #[test]
    fn training_decreases_loss() {
        let (teacher, data) = small_problem(0.1);
        let cfg = TrainConfig { radius: 2.0 * param_l1_norm(&teacher), iterations: 300, seed: 3, ..TrainConfig::default() };
        let arch = Architecture::uniform(2, 4, 2, ActivationKind::Softplus);
        let init = init_network(&arch, &cfg).unwrap();
        let before = empirical_loss(&init, &data);
        let out = train(&data, &arch, &cfg).unwrap();
        assert!(empirical_loss(&out, &data) < before);
    }

    #[test]
    fn iterates_stay_in_the_ball() {
        let (_, data) = small_problem(0.1);
        for batch_size in [BatchSize::Full, BatchSize::Size(16)] {
            let cfg = TrainConfig { radius: 0.7, iterations: 200, step_size: 0.2, batch_size, init_scale: 5.0, seed: 1 };
            let arch = Architecture::uniform(2, 6, 3, ActivationKind::Relu);
            let init = init_network(&arch, &cfg).unwrap();
            assert!(param_l1_norm(&init) <= 0.7 + 1e-9);
            let mut count = 0;
            train_from(&data, init, &cfg, |_, net| {
                count += 1;
                assert!(param_l1_norm(net) <= cfg.radius + 1e-9);
            })
            .unwrap();
            assert_eq!(count, 200);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (_, data) = small_problem(0.1);
        let cfg = TrainConfig { radius: 3.0, iterations: 100, batch_size: BatchSize::Size(32), seed: 42, ..TrainConfig::default() };
        let arch = Architecture::uniform(2, 5, 3, ActivationKind::Softplus);
        assert_eq!(train(&data, &arch, &cfg).unwrap(), train(&data, &arch, &cfg).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let (_, data) = small_problem(0.1);
        let scaled = Dataset::new(
            Matrix::from_vec(data.len(), 2, data.x.as_slice().iter().map(|v| v * 1e150).collect()).unwrap(),
            data.y.clone(),
        )
        .unwrap();
        let cfg = TrainConfig { radius: 1e6, step_size: 1e10, iterations: 50, init_scale: 1.0, ..TrainConfig::default() };
        let arch = Architecture::uniform(2, 4, 2, ActivationKind::Relu);
        match train(&scaled, &arch, &cfg) {
            Err(Error::Divergence { iteration, .. }) => assert!(iteration < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn train_log_csv() {
        let (teacher, data) = small_problem(0.1);
        let cfg = TrainConfig { radius: 5.0, iterations: 3, ..TrainConfig::default() };
        let (_, rows) = train_logged(&data, teacher, &cfg).unwrap();
        assert_eq!(rows.len(), 3);
        let mut buf = Vec::new();
        write_train_log(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("iteration,full_batch_loss,l1_norm\n0,"));
    }

    #[test]
    fn batch_size_serde() {
        assert_eq!(serde_json::from_str::<BatchSize>("\"full\"").unwrap(), BatchSize::Full);
        assert_eq!(serde_json::from_str::<BatchSize>("32").unwrap(), BatchSize::Size(32));
        assert!(serde_json::from_str::<BatchSize>("0").is_err());
        assert!(serde_json::from_str::<BatchSize>("\"half\"").is_err());
        assert_eq!(serde_json::to_string(&BatchSize::Full).unwrap(), "\"full\"");
    }
}
