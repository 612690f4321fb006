//! Teacher-student sweep, bound reports and the verification suites behind the CLI.
//!
//! Every random quantity is derived from `master_seed` through [`mix_seed`], so the
//! outputs depend only on the configuration. Trials run on the rayon pool in
//! parallel and are collected in coordinate order.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::bounds::{verify_bounds, AuditOptions, B1Exponent, BoundInputs, BoundReport};
use crate::datagen::{fmt_f64, make_teacher, sample_truncated_normal, synthesize, DataSpec, TeacherSpec};
use crate::error::{config, Error, Result};
use crate::eval::{
    finite_diff_gradient, finite_diff_laplacian_extrapolated, green_identity_check, relative_error, TeacherReference,
};
use crate::matrix::Matrix;
use crate::net::{uniform_widths, Network};
use crate::sparsity::{empirical_loss, init_network, param_l1_norm, train_from, Architecture, TrainConfig};

/// How the training radius is chosen for each depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusRule {
    Absolute(f64),
    /// `r = k · ‖Θ₀‖₁` for the depth's teacher.
    TeacherMultiplier(f64),
}

impl Default for RadiusRule {
    fn default() -> Self {
        RadiusRule::TeacherMultiplier(1.1)
    }
}

impl RadiusRule {
    pub fn radius(self, teacher: &Network) -> f64 {
        match self {
            RadiusRule::Absolute(r) => r,
            RadiusRule::TeacherMultiplier(k) => k * param_l1_norm(teacher),
        }
    }
}

/// Trial counts and tolerances for `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    pub hidden: usize,
    /// Draws per bound, architecture and radius. Radii are `1` and `L`.
    pub bound_trials: usize,
    pub bound_slack: f64,
    /// Draws per architecture for the finite-difference suites.
    pub fd_trials: usize,
    pub grad_tol: f64,
    pub laplacian_tol: f64,
    pub green_dims: Vec<usize>,
    /// Random `(f, g)` pairs per dimension.
    pub green_nets: usize,
    pub green_hidden: usize,
    pub green_samples: usize,
    pub green_tol: f64,
    /// Multiplies the gradient bound during the audit. Mutation testing only.
    #[serde(skip)]
    pub grad_bound_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            depths: vec![2, 3, 4],
            dims: vec![5, 100],
            hidden: 10,
            bound_trials: 1000,
            bound_slack: 1e-9,
            fd_trials: 1000,
            grad_tol: 1e-5,
            laplacian_tol: 1e-4,
            green_dims: vec![1, 2, 3],
            green_nets: 10,
            green_hidden: 4,
            green_samples: 1_000_000,
            green_tol: 0.05,
            grad_bound_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub teacher: TeacherSpec,
    pub data: DataSpec,
    /// Template for every trial; `radius` and `seed` are overwritten per trial.
    pub train: TrainConfig,
    pub n_grid: Vec<usize>,
    pub n_test: usize,
    pub repeats: usize,
    pub activations: Vec<ActivationKind>,
    pub depths: Vec<usize>,
    pub radius_rule: RadiusRule,
    pub master_seed: u64,
    /// Teacher activation; `None` uses the student's activation in each cell.
    pub teacher_activation: Option<ActivationKind>,
    /// Overrides the estimated loss bound `b₀` in bound reports.
    pub b0: Option<f64>,
    pub b1_exponent: B1Exponent,
    /// Monte-Carlo draws for `E‖x‖∞²`.
    pub x_inf_samples: usize,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            teacher: TeacherSpec::default(),
            data: DataSpec::default(),
            train: TrainConfig::default(),
            n_grid: (50..=100).step_by(10).collect(),
            n_test: 10_000,
            repeats: 100,
            activations: ActivationKind::ALL.to_vec(),
            depths: vec![2, 3],
            radius_rule: RadiusRule::default(),
            master_seed: 0,
            teacher_activation: None,
            b0: None,
            b1_exponent: B1Exponent::Two,
            x_inf_samples: 100_000,
            verify: VerifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.data.validate()?;
        let mut train = self.train.clone();
        train.radius = 1.0;
        train.validate()?;
        if self.n_grid.is_empty() || self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config("n_grid must be non-empty, positive and strictly ascending"));
        }
        if self.repeats == 0 {
            return Err(config("repeats must be >= 1"));
        }
        if self.n_test == 0 {
            return Err(config("n_test must be >= 1"));
        }
        if self.activations.is_empty() {
            return Err(config("need at least one activation"));
        }
        if self.depths.is_empty() || self.depths.iter().any(|&l| l < 2) {
            return Err(config("depths must be non-empty and each >= 2"));
        }
        match self.radius_rule {
            RadiusRule::Absolute(r) | RadiusRule::TeacherMultiplier(r) if !(r > 0.0 && r.is_finite()) => {
                return Err(config("radius_rule value must be positive"));
            }
            _ => {}
        }
        if let Some(b0) = self.b0 {
            if !(b0 >= 0.0 && b0.is_finite()) {
                return Err(config("b0 must be non-negative"));
            }
        }
        if self.x_inf_samples == 0 {
            return Err(config("x_inf_samples must be >= 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// seeds

const TAG_TRIAL: u64 = 0x7472_6961_6c00_0001;
const TAG_TEACHER: u64 = 0x7465_6163_6800_0002;
const TAG_TEST: u64 = 0x7465_7374_0000_0003;
const TAG_XINF: u64 = 0x7869_6e66_0000_0004;
const TAG_VERIFY: u64 = 0x7665_7269_6600_0005;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `master` one word at a time: `h ← splitmix64(h ⊕ part)`.
/// Each step is a bijection of `h`, so sequences that differ only in their last
/// word always map to different seeds.
pub fn mix_seed(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(master), |h, &p| splitmix64(h ^ p))
}

fn activation_code(a: ActivationKind) -> u64 {
    match a {
        ActivationKind::Softplus => 1,
        ActivationKind::Relu => 2,
    }
}

/// Seed of trial `(n, activation, L, repeat)`.
pub fn trial_seed(master: u64, n: usize, activation: ActivationKind, depth: usize, repeat: usize) -> u64 {
    mix_seed(master, &[TAG_TRIAL, n as u64, activation_code(activation), depth as u64, repeat as u64])
}

/// Teacher of depth `depth`; shared by all activations at that depth.
pub fn teacher_for(cfg: &ExperimentConfig, depth: usize, activation: ActivationKind) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.master_seed, &[TAG_TEACHER, depth as u64]));
    make_teacher(&cfg.teacher, depth, cfg.teacher_activation.unwrap_or(activation), &mut rng)
}

const TAG_DATAGEN: u64 = 0x6461_7461_0000_0006;

/// A teacher of depth `depth` and `n` samples from it, both seeded from `master_seed`.
pub fn generate_dataset(
    cfg: &ExperimentConfig,
    n: usize,
    depth: usize,
    activation: ActivationKind,
) -> Result<(Network, crate::datagen::Dataset)> {
    cfg.validate()?;
    let teacher = teacher_for(cfg, depth, activation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.master_seed, &[TAG_DATAGEN, n as u64, depth as u64]));
    let data = synthesize(&teacher, n, &cfg.data, &mut rng)?;
    Ok((teacher, data))
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub n: usize,
    pub repeat: usize,
    pub activation: ActivationKind,
    pub depth: usize,
    pub seed: u64,
    pub pred_l2: f64,
    pub grad_l2: f64,
    pub final_train_loss: f64,
    pub l1_norm_final: f64,
    /// `max |f̂(x) - y|` over the noisy test set; feeds the `b₀` estimate.
    pub max_abs_residual: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub n: usize,
    pub activation: ActivationKind,
    pub depth: usize,
    pub pred_l2_mean: f64,
    pub pred_l2_std: f64,
    pub grad_l2_mean: f64,
    pub grad_l2_std: f64,
    /// Trials that finished without divergence.
    pub completed: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub trials: Vec<TrialResult>,
    pub aggregates: Vec<AggregateRow>,
    /// Training radius per depth, in `cfg.depths` order.
    pub radii: Vec<(usize, f64)>,
}

impl ExperimentOutput {
    /// Cells `(n, activation, L)` in which every trial diverged.
    pub fn fully_diverged_cells(&self) -> Vec<(usize, ActivationKind, usize)> {
        self.aggregates.iter().filter(|a| a.completed == 0).map(|a| (a.n, a.activation, a.depth)).collect()
    }

    /// Largest test residual across all completed trials of depth `depth`.
    pub fn b0_estimate(&self, depth: usize) -> Option<f64> {
        self.trials
            .iter()
            .filter(|t| t.depth == depth && !t.diverged)
            .map(|t| t.max_abs_residual)
            .reduce(f64::max)
    }
}

struct Cell {
    activation: ActivationKind,
    depth: usize,
    teacher: Network,
    radius: f64,
    reference: TeacherReference,
    y_test: Vec<f64>,
}

fn build_cell(cfg: &ExperimentConfig, depth: usize, activation: ActivationKind) -> Result<Cell> {
    let teacher = teacher_for(cfg, depth, activation)?;
    let radius = cfg.radius_rule.radius(&teacher);
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(config(format!("radius for depth {depth} is {radius}; the rule needs a positive value")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        cfg.master_seed,
        &[TAG_TEST, depth as u64, activation_code(activation)],
    ));
    let x_test = cfg.data.sample_inputs(cfg.n_test, cfg.teacher.d, &mut rng);
    let reference = TeacherReference::new(&teacher, x_test)?;
    let y_test = reference
        .outputs
        .iter()
        .map(|f| f + sample_truncated_normal(0.0, cfg.data.noise_std, cfg.data.cutoff_factor, &mut rng))
        .collect();
    Ok(Cell { activation, depth, teacher, radius, reference, y_test })
}

fn run_trial(cfg: &ExperimentConfig, cell: &Cell, n: usize, repeat: usize) -> Result<TrialResult> {
    let seed = trial_seed(cfg.master_seed, n, cell.activation, cell.depth, repeat);
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    // Streams 0 and 1 of this seed belong to initialisation and shuffling.
    data_rng.set_stream(2);
    let data = synthesize(&cell.teacher, n, &cfg.data, &mut data_rng)?;
    let train_cfg = TrainConfig { radius: cell.radius, seed, ..cfg.train.clone() };
    let arch = Architecture::uniform(cfg.teacher.d, cfg.teacher.hidden, cell.depth, cell.activation);
    let mut result = TrialResult {
        n,
        repeat,
        activation: cell.activation,
        depth: cell.depth,
        seed,
        pred_l2: f64::NAN,
        grad_l2: f64::NAN,
        final_train_loss: f64::NAN,
        l1_norm_final: f64::NAN,
        max_abs_residual: f64::NAN,
        diverged: true,
    };
    let model = match train_from(&data, init_network(&arch, &train_cfg)?, &train_cfg, |_, _| {}) {
        Ok(m) => m,
        Err(Error::Divergence { .. }) => return Ok(result),
        Err(e) => return Err(e),
    };
    let (pred, grad) = cell.reference.errors(&model)?;
    let x = &cell.reference.x_test;
    result.max_abs_residual =
        (0..x.rows()).map(|j| (model.output_unchecked(x.row(j)) - cell.y_test[j]).abs()).fold(0.0, f64::max);
    result.pred_l2 = pred.value;
    result.grad_l2 = grad.value;
    result.final_train_loss = empirical_loss(&model, &data);
    result.l1_norm_final = param_l1_norm(&model);
    result.diverged = false;
    Ok(result)
}

/// Runs every `(n, activation, L, repeat)` trial on the current rayon pool.
///
/// Rows are ordered by `n`, then activation (config order), depth (config order)
/// and repeat. Divergent trials produce NaN rows instead of errors.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &activation in &cfg.activations {
        for &depth in &cfg.depths {
            cells.push(build_cell(cfg, depth, activation)?);
        }
    }
    let mut jobs = Vec::new();
    for &n in &cfg.n_grid {
        for cell in &cells {
            for repeat in 0..cfg.repeats {
                jobs.push((n, cell, repeat));
            }
        }
    }
    let trials: Vec<TrialResult> =
        jobs.par_iter().map(|&(n, cell, repeat)| run_trial(cfg, cell, n, repeat)).collect::<Result<_>>()?;
    let aggregates = aggregate(&trials);
    let radii = cfg
        .depths
        .iter()
        .map(|&l| (l, cells.iter().find(|c| c.depth == l).expect("cell per depth").radius))
        .collect();
    Ok(ExperimentOutput { trials, aggregates, radii })
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

/// Groups consecutive trials sharing `(n, activation, L)`; divergent trials are skipped.
pub fn aggregate(trials: &[TrialResult]) -> Vec<AggregateRow> {
    let mut keys: Vec<(usize, ActivationKind, usize)> = Vec::new();
    for t in trials {
        let key = (t.n, t.activation, t.depth);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(n, activation, depth)| {
            let done: Vec<&TrialResult> = trials
                .iter()
                .filter(|t| t.n == n && t.activation == activation && t.depth == depth && !t.diverged)
                .collect();
            let pred: Vec<f64> = done.iter().map(|t| t.pred_l2).collect();
            let grad: Vec<f64> = done.iter().map(|t| t.grad_l2).collect();
            let (pred_l2_mean, pred_l2_std) = mean_std(&pred);
            let (grad_l2_mean, grad_l2_std) = mean_std(&grad);
            AggregateRow {
                n,
                activation,
                depth,
                pred_l2_mean,
                pred_l2_std,
                grad_l2_mean,
                grad_l2_std,
                completed: done.len(),
            }
        })
        .collect()
}

pub const TRIALS_HEADER: &str = "n,repeat,activation,L,seed,pred_l2,grad_l2,final_train_loss,l1_norm_final";
pub const AGGREGATE_HEADER: &str = "n,activation,L,pred_l2_mean,pred_l2_std,grad_l2_mean,grad_l2_std";

pub fn write_trials_csv<W: Write>(trials: &[TrialResult], mut out: W) -> Result<()> {
    writeln!(out, "{TRIALS_HEADER}")?;
    for t in trials {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            t.n,
            t.repeat,
            t.activation,
            t.depth,
            t.seed,
            fmt_f64(t.pred_l2),
            fmt_f64(t.grad_l2),
            fmt_f64(t.final_train_loss),
            fmt_f64(t.l1_norm_final)
        )?;
    }
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], mut out: W) -> Result<()> {
    writeln!(out, "{AGGREGATE_HEADER}")?;
    for a in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            a.n,
            a.activation,
            a.depth,
            fmt_f64(a.pred_l2_mean),
            fmt_f64(a.pred_l2_std),
            fmt_f64(a.grad_l2_mean),
            fmt_f64(a.grad_l2_std)
        )?;
    }
    Ok(())
}

/// Parses a per-trial CSV written by [`write_trials_csv`]. Rows with NaN errors
/// come back marked as diverged.
pub fn read_trials_csv(text: &str) -> Result<Vec<TrialResult>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRIALS_HEADER) {
        return Err(config("unexpected trial CSV header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(config(format!("trial row has {} fields: {line}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| config(format!("{s}: {e}")));
            let int = |s: &str| s.parse::<u64>().map_err(|e| config(format!("{s}: {e}")));
            let pred_l2 = num(f[5])?;
            Ok(TrialResult {
                n: int(f[0])? as usize,
                repeat: int(f[1])? as usize,
                activation: f[2].parse()?,
                depth: int(f[3])? as usize,
                seed: int(f[4])?,
                pred_l2,
                grad_l2: num(f[6])?,
                final_train_loss: num(f[7])?,
                l1_norm_final: num(f[8])?,
                max_abs_residual: f64::NAN,
                diverged: pred_l2.is_nan(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// bound reports

/// Where `b₀` came from in a [`BoundEntry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum B0Source {
    Override,
    /// Max test residual of trained models.
    Estimated,
    /// `R (r/L)^L + R (‖Θ₀‖₁/L)^L + cutoff · noise_std` from the sup bound.
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub depth: usize,
    pub n: usize,
    pub b0_source: B0Source,
    pub inputs: BoundInputs,
    pub report: BoundReport,
}

/// Monte-Carlo estimate of `E‖x‖∞²` under the data density.
pub fn estimate_x_inf_sq(cfg: &ExperimentConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.master_seed, &[TAG_XINF]));
    let total: f64 = (0..cfg.x_inf_samples)
        .map(|_| {
            let x = cfg.data.sample_input(cfg.teacher.d, &mut rng);
            x.iter().fold(0.0f64, |m, v| m.max(v.abs())).powi(2)
        })
        .sum();
    total / cfg.x_inf_samples as f64
}

/// `max_j |f(x_j) - y_j|` on the noisy test set of `model`'s `(L, activation)` cell.
pub fn estimate_b0(cfg: &ExperimentConfig, model: &Network) -> Result<f64> {
    cfg.validate()?;
    if model.input_dim() != cfg.teacher.d {
        return Err(config("model input dimension does not match the teacher"));
    }
    let cell = build_cell(cfg, model.depth(), model.activation())?;
    let x = &cell.reference.x_test;
    Ok((0..x.rows()).map(|j| (model.output_unchecked(x.row(j)) - cell.y_test[j]).abs()).fold(0.0, f64::max))
}

/// Bound reports for every depth (or only `trained`'s depth) and every `n` in the grid.
///
/// `b₀` comes from `cfg.b0` if set, else from `trained` via [`estimate_b0`], else
/// from the analytic sup bound.
pub fn report_bounds(cfg: &ExperimentConfig, trained: Option<&Network>) -> Result<Vec<BoundEntry>> {
    cfg.validate()?;
    let depths: Vec<usize> = match trained {
        Some(m) => vec![m.depth()],
        None => cfg.depths.clone(),
    };
    let b0 = |depth: usize, teacher: &Network, r: f64| -> Result<(f64, B0Source)> {
        if let Some(b0) = cfg.b0 {
            return Ok((b0, B0Source::Override));
        }
        if let Some(m) = trained {
            return Ok((estimate_b0(cfg, m)?, B0Source::Estimated));
        }
        let big_r = cfg.data.input_bound();
        let sup = crate::bounds::sup_model_bound(big_r, r, depth)?
            + crate::bounds::sup_model_bound(big_r, param_l1_norm(teacher), depth)?;
        Ok((sup + cfg.data.cutoff_factor * cfg.data.noise_std, B0Source::Analytic))
    };
    report_bounds_with(cfg, &depths, |depth, teacher, r| b0(depth, teacher, r))
}

/// Bound reports whose `b₀` is the largest test residual of the sweep's trained
/// models at each depth, unless `cfg.b0` overrides it.
pub fn report_bounds_for_sweep(cfg: &ExperimentConfig, sweep: &ExperimentOutput) -> Result<Vec<BoundEntry>> {
    cfg.validate()?;
    report_bounds_with(cfg, &cfg.depths, |depth, _, _| match (cfg.b0, sweep.b0_estimate(depth)) {
        (Some(b0), _) => Ok((b0, B0Source::Override)),
        (None, Some(b0)) => Ok((b0, B0Source::Estimated)),
        (None, None) => Err(config(format!("no completed trials at depth {depth} to estimate b0"))),
    })
}

fn report_bounds_with(
    cfg: &ExperimentConfig,
    depths: &[usize],
    b0: impl Fn(usize, &Network, f64) -> Result<(f64, B0Source)>,
) -> Result<Vec<BoundEntry>> {
    let x_inf_sq = estimate_x_inf_sq(cfg);
    let mut entries = Vec::new();
    for &depth in depths {
        let teacher = teacher_for(cfg, depth, cfg.activations[0])?;
        let r = cfg.radius_rule.radius(&teacher);
        let (b0, b0_source) = b0(depth, &teacher, r)?;
        let param_count = Architecture::uniform(cfg.teacher.d, cfg.teacher.hidden, depth, ActivationKind::Softplus)
            .param_count()? as f64;
        for &n in &cfg.n_grid {
            let inputs = BoundInputs {
                r,
                depth,
                param_count,
                n: n as f64,
                input_bound: cfg.data.input_bound(),
                b0,
                b1: cfg.data.score_bound(),
                x_inf_sq,
            };
            let report = BoundReport::evaluate(&inputs, cfg.b1_exponent)?;
            entries.push(BoundEntry { depth, n, b0_source, inputs, report });
        }
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// verification suites

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub suite: String,
    pub depth: usize,
    pub input_dim: usize,
    /// ℓ1 radius for bound audits; `None` elsewhere.
    pub radius: Option<f64>,
    pub trials: usize,
    pub violations: usize,
    /// Largest observed `measured / allowed`; at most 1 when the suite passes.
    pub worst_ratio: f64,
}

impl VerifyRow {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

pub const VERIFY_HEADER: &str = "suite,depth,input_dim,radius,trials,violations,worst_ratio";

pub fn write_verify_csv<W: Write>(rows: &[VerifyRow], mut out: W) -> Result<()> {
    writeln!(out, "{VERIFY_HEADER}")?;
    for r in rows {
        let radius = r.radius.map(fmt_f64).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.suite,
            r.depth,
            r.input_dim,
            radius,
            r.trials,
            r.violations,
            fmt_f64(r.worst_ratio)
        )?;
    }
    Ok(())
}

/// Finite-difference steps: first derivatives, and the coarse step of the
/// extrapolated Laplacian.
pub const FD_STEP: f64 = 1e-5;
pub const FD_LAPLACIAN_STEP: f64 = 1e-2;

/// Relative errors of `grad_input`, `grad_params` and `laplacian_input` against
/// central differences, for one random softplus network and input.
pub fn finite_difference_errors(widths: &[usize], seed: u64, trial: usize, dspec: &DataSpec) -> Result<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let normals: Vec<Normal<f64>> =
        widths.iter().map(|&f| Normal::new(0.0, (2.0 / f as f64).sqrt()).expect("positive std")).collect();
    let net = Network::from_shape_fn(widths, ActivationKind::Softplus, |l, _, _| normals[l].sample(&mut rng))?;
    let x = dspec.sample_input(widths[0], &mut rng);

    let trace = net.forward(&x)?;
    let grad_x = net.grad_input(&trace)?;
    let lap = net.laplacian_input(&trace)?;
    let grad_theta: Vec<f64> =
        net.grad_params(&trace)?.iter().flat_map(|m| m.as_slice().iter().copied()).collect();

    let fd_x = finite_diff_gradient(&net, &x, FD_STEP)?;
    let fd_lap = finite_diff_laplacian_extrapolated(&net, &x, FD_LAPLACIAN_STEP)?;
    let fd_theta = finite_diff_params(&net, &x, FD_STEP)?;
    Ok([relative_error(&grad_x, &fd_x), relative_error(&grad_theta, &fd_theta), relative_error(&[lap], &[fd_lap])])
}

/// Central differences of the output with respect to every weight, layer by layer.
pub fn finite_diff_params(net: &Network, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut layers: Vec<Matrix> = net.layers().to_vec();
    let activation = net.activation();
    let mut out = Vec::with_capacity(net.param_count());
    for l in 0..layers.len() {
        for i in 0..layers[l].as_slice().len() {
            let orig = layers[l].as_slice()[i];
            layers[l].as_mut_slice()[i] = orig + step;
            let up = Network::new(layers.clone(), activation)?.output(x)?;
            layers[l].as_mut_slice()[i] = orig - step;
            let down = Network::new(layers.clone(), activation)?.output(x)?;
            layers[l].as_mut_slice()[i] = orig;
            out.push((up - down) / (2.0 * step));
        }
    }
    Ok(out)
}

fn fd_rows(v: &VerifyConfig, seed: u64, dspec: &DataSpec) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    for &depth in &v.depths {
        for &d in &v.dims {
            let widths = uniform_widths(d, v.hidden, depth);
            let arch_seed = mix_seed(seed, &[depth as u64, d as u64]);
            let errs: Vec<[f64; 3]> = (0..v.fd_trials)
                .into_par_iter()
                .map(|t| finite_difference_errors(&widths, arch_seed, t, dspec))
                .collect::<Result<_>>()?;
            let tols = [v.grad_tol, v.grad_tol, v.laplacian_tol];
            for (k, suite) in ["fd_grad_input", "fd_grad_params", "fd_laplacian"].iter().enumerate() {
                let ratios = errs.iter().map(|e| e[k] / tols[k]);
                rows.push(VerifyRow {
                    suite: suite.to_string(),
                    depth,
                    input_dim: d,
                    radius: None,
                    trials: v.fd_trials,
                    violations: ratios.clone().filter(|q| !(*q <= 1.0)).count(),
                    worst_ratio: ratios.fold(0.0, f64::max),
                });
            }
        }
    }
    Ok(rows)
}

fn bound_rows(v: &VerifyConfig, seed: u64, input_bound: f64) -> Result<Vec<VerifyRow>> {
    let opts = AuditOptions { slack: v.bound_slack, grad_bound_scale: v.grad_bound_scale, input_bound };
    let mut rows = Vec::new();
    for &depth in &v.depths {
        for &d in &v.dims {
            let widths = uniform_widths(d, v.hidden, depth);
            for r in [1.0, depth as f64] {
                let s = mix_seed(seed, &[depth as u64, d as u64, r.to_bits()]);
                for check in verify_bounds(&widths, r, v.bound_trials, s, &opts)? {
                    rows.push(VerifyRow {
                        suite: format!("bound_{}", check.bound_name),
                        depth,
                        input_dim: d,
                        radius: Some(r),
                        trials: check.trials,
                        violations: check.violations,
                        worst_ratio: check.worst_ratio,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// A random pair of small softplus networks for the integration-by-parts check.
/// Depth alternates between 2 and 3 with `index`.
pub fn green_pair(d: usize, hidden: usize, seed: u64, index: usize) -> Result<(Network, Network)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let depth = 2 + index % 2;
    let widths = uniform_widths(d, hidden, depth);
    let normals: Vec<Normal<f64>> =
        widths.iter().map(|&f| Normal::new(0.0, (2.0 / f as f64).sqrt()).expect("positive std")).collect();
    let mut draw = || Network::from_shape_fn(&widths, ActivationKind::Softplus, |l, _, _| normals[l].sample(&mut rng));
    let f = draw()?;
    let g = draw()?;
    Ok((f, g))
}

fn green_rows(v: &VerifyConfig, seed: u64, dspec: &DataSpec) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    for &d in &v.green_dims {
        let pair_seed = mix_seed(seed, &[d as u64]);
        let mut gaps = Vec::with_capacity(v.green_nets);
        for i in 0..v.green_nets {
            let (f, g) = green_pair(d, v.green_hidden, pair_seed, i)?;
            let rep = green_identity_check(&f, &g, dspec, v.green_samples, mix_seed(pair_seed, &[i as u64]))?;
            gaps.push(rep.rel_gap / v.green_tol);
        }
        rows.push(VerifyRow {
            suite: "green_identity".to_string(),
            depth: 0,
            input_dim: d,
            radius: None,
            trials: v.green_nets,
            violations: gaps.iter().filter(|q| !(**q <= 1.0)).count(),
            worst_ratio: gaps.iter().copied().fold(0.0, f64::max),
        });
    }
    Ok(rows)
}

/// Finite-difference suites, bound audits and the integration-by-parts check.
pub fn verify(cfg: &ExperimentConfig) -> Result<Vec<VerifyRow>> {
    cfg.data.validate()?;
    let v = &cfg.verify;
    if v.depths.iter().any(|&l| l < 2) || v.dims.contains(&0) || v.hidden == 0 || v.green_hidden == 0 {
        return Err(config("verify depths must be >= 2 and widths positive"));
    }
    let seed = mix_seed(cfg.master_seed, &[TAG_VERIFY]);
    let mut rows = Vec::new();
    if v.fd_trials > 0 {
        rows.extend(fd_rows(v, mix_seed(seed, &[1]), &cfg.data)?);
    }
    if v.bound_trials > 0 {
        rows.extend(bound_rows(v, mix_seed(seed, &[2]), cfg.data.input_bound())?);
    }
    if v.green_nets > 0 {
        rows.extend(green_rows(v, mix_seed(seed, &[3]), &cfg.data)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            teacher: TeacherSpec { d: 6, s: 2, hidden: 4 },
            train: TrainConfig { iterations: 200, ..TrainConfig::default() },
            n_grid: vec![20, 40],
            n_test: 200,
            repeats: 2,
            x_inf_samples: 1000,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.n_grid, vec![50, 60, 70, 80, 90, 100]);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            r#"{"n_grid": []}"#,
            r#"{"n_grid": [60, 50]}"#,
            r#"{"repeats": 0}"#,
            r#"{"n_test": 0}"#,
            r#"{"depths": [1]}"#,
            r#"{"radius_rule": {"absolute": -1.0}}"#,
            r#"{"unknown_field": 1}"#,
            r#"{"b1_exponent": 3}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
        let cfg = ExperimentConfig::from_json(r#"{"radius_rule": {"absolute": 2.5}, "b1_exponent": 1}"#).unwrap();
        assert_eq!(cfg.radius_rule, RadiusRule::Absolute(2.5));
        assert_eq!(cfg.b1_exponent, B1Exponent::One);
    }

    #[test]
    fn trial_seeds_are_distinct_over_a_paper_sized_sweep() {
        let cfg = ExperimentConfig::default();
        let mut seeds = std::collections::HashSet::new();
        for &n in &cfg.n_grid {
            for &a in &cfg.activations {
                for l in 2..=4 {
                    for rep in 0..cfg.repeats {
                        assert!(seeds.insert(trial_seed(7, n, a, l, rep)));
                    }
                }
            }
        }
        assert_ne!(trial_seed(7, 50, ActivationKind::Relu, 2, 0), trial_seed(8, 50, ActivationKind::Relu, 2, 0));
    }

    #[test]
    fn mixing_is_order_sensitive() {
        assert_ne!(mix_seed(1, &[2, 3]), mix_seed(1, &[3, 2]));
        assert_ne!(mix_seed(1, &[]), mix_seed(1, &[0]));
    }

    #[test]
    fn sweep_bookkeeping() {
        let cfg = tiny();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.trials.len(), 2 * 2 * 2 * 2);
        assert_eq!(out.aggregates.len(), cfg.n_grid.len() * cfg.activations.len() * cfg.depths.len());
        for t in &out.trials {
            assert!(!t.diverged);
            assert!(t.pred_l2 >= 0.0 && t.grad_l2 >= 0.0);
            let r = out.radii.iter().find(|(l, _)| *l == t.depth).unwrap().1;
            assert!(t.l1_norm_final <= r * (1.0 + 1e-9));
        }
        assert!(out.fully_diverged_cells().is_empty());
    }

    #[test]
    fn aggregates_recompute_from_the_trial_csv() {
        let out = run_experiment(&tiny()).unwrap();
        let mut buf = Vec::new();
        write_trials_csv(&out.trials, &mut buf).unwrap();
        let parsed = read_trials_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_aggregate_csv(&aggregate(&parsed), &mut a).unwrap();
        write_aggregate_csv(&out.aggregates, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_is_shared_across_activations() {
        let cfg = tiny();
        let s = teacher_for(&cfg, 3, ActivationKind::Softplus).unwrap();
        let r = teacher_for(&cfg, 3, ActivationKind::Relu).unwrap();
        assert_eq!(s.layers(), r.layers());
        assert_eq!(r.activation(), ActivationKind::Relu);
        let fixed = ExperimentConfig { teacher_activation: Some(ActivationKind::Softplus), ..cfg };
        assert_eq!(teacher_for(&fixed, 3, ActivationKind::Relu).unwrap().activation(), ActivationKind::Softplus);
    }

    #[test]
    fn noiseless_runs_predict_better() {
        let noisy = ExperimentConfig {
            data: DataSpec { noise_std: 0.5, ..DataSpec::default() },
            train: TrainConfig { iterations: 1500, ..TrainConfig::default() },
            n_grid: vec![200],
            repeats: 4,
            activations: vec![ActivationKind::Softplus],
            depths: vec![2],
            radius_rule: RadiusRule::TeacherMultiplier(2.0),
            ..tiny()
        };
        let clean = ExperimentConfig { data: DataSpec { noise_std: 0.0, ..DataSpec::default() }, ..noisy.clone() };
        let a = run_experiment(&noisy).unwrap().aggregates[0].pred_l2_mean;
        let b = run_experiment(&clean).unwrap().aggregates[0].pred_l2_mean;
        assert!(b < a, "clean {b} vs noisy {a}");
    }

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn bound_report_overrides_and_rates() {
        let cfg = ExperimentConfig { n_grid: vec![100, 400], b0: Some(0.0), ..tiny() };
        let entries = report_bounds(&cfg, None).unwrap();
        assert_eq!(entries.len(), 4);
        assert!(entries.iter().all(|e| e.report.model_convergence == 0.0 && e.b0_source == B0Source::Override));
        let cfg = ExperimentConfig { n_grid: vec![100, 400], ..tiny() };
        let entries = report_bounds(&cfg, None).unwrap();
        assert!(entries.iter().all(|e| e.b0_source == B0Source::Analytic));
        assert_eq!(entries[0].inputs.b1, 10.0);
        assert_eq!(entries[0].inputs.input_bound, 10.0);
        let model = teacher_for(&cfg, 2, ActivationKind::Softplus).unwrap();
        let trained = report_bounds(&cfg, Some(&model)).unwrap();
        assert_eq!(trained.len(), 2);
        assert_eq!(trained[0].b0_source, B0Source::Estimated);
        // the teacher's residual is pure noise, bounded by the truncation
        assert!(trained[0].inputs.b0 <= cfg.data.cutoff_factor * cfg.data.noise_std);
    }

    #[test]
    fn x_inf_estimate_is_plausible() {
        // E max_i |x_i|² for d = 6 standard normals lies between 1 and 2 log(2d) + 1.
        let v = estimate_x_inf_sq(&tiny());
        assert!(v > 1.0 && v < 2.0 * 12f64.ln() + 1.0, "{v}");
    }

    #[test]
    fn small_verify_passes_and_mutation_fails() {
        let v = VerifyConfig {
            depths: vec![2, 3],
            dims: vec![3],
            hidden: 4,
            bound_trials: 200,
            fd_trials: 50,
            green_dims: vec![1],
            green_nets: 2,
            green_samples: 200_000,
            ..VerifyConfig::default()
        };
        let cfg = ExperimentConfig { verify: v.clone(), ..tiny() };
        let rows = verify(&cfg).unwrap();
        assert!(rows.iter().all(VerifyRow::passed), "{rows:?}");
        let bad = ExperimentConfig { verify: VerifyConfig { grad_bound_scale: 0.5, ..v }, ..tiny() };
        let rows = verify(&bad).unwrap();
        assert!(rows.iter().any(|r| r.suite == "bound_grad_l1" && !r.passed()));
    }
}
