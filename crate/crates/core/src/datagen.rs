//! Sparse teacher networks and truncated-normal regression data.
//!
//! Inputs and noise are drawn from normals truncated at `cutoff_factor` standard
//! deviations. Truncation by rejection is the same as rescaling the normal density
//! uniformly inside the interval.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{config, domain, Result};
use crate::matrix::Matrix;
use crate::net::{uniform_widths, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    /// Input dimension `d`.
    pub d: usize,
    /// Number of relevant inputs; the first `s` coordinates.
    pub s: usize,
    /// Hidden width `h` shared by all hidden layers.
    pub hidden: usize,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self { d: 100, s: 5, hidden: 10 }
    }
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.s > self.d {
            return Err(domain(format!("need 1 <= s <= d, got s={} d={}", self.s, self.d)));
        }
        if self.hidden == 0 {
            return Err(domain("hidden width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub x_std: f64,
    /// Zero disables the noise entirely.
    pub noise_std: f64,
    pub cutoff_factor: f64,
    pub mean: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { x_std: 1.0, noise_std: 0.1, cutoff_factor: 10.0, mean: 0.0 }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_std > 0.0 && self.x_std.is_finite()) {
            return Err(domain(format!("x_std must be positive, got {}", self.x_std)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(domain(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        if !(self.cutoff_factor > 0.0 && self.cutoff_factor.is_finite()) {
            return Err(domain(format!("cutoff_factor must be positive, got {}", self.cutoff_factor)));
        }
        if !self.mean.is_finite() {
            return Err(domain("mean must be finite"));
        }
        Ok(())
    }

    /// Sup-norm bound on inputs, `R = cutoff · σ_x` (around a zero mean).
    pub fn input_bound(&self) -> f64 {
        self.mean.abs() + self.cutoff_factor * self.x_std
    }

    /// Sup of `|∂_i log p(x)|` over the box: `cutoff · σ / σ² = cutoff / σ`.
    pub fn score_bound(&self) -> f64 {
        self.cutoff_factor / self.x_std
    }

    pub fn sample_input<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Vec<f64> {
        (0..d).map(|_| sample_truncated_normal(self.mean, self.x_std, self.cutoff_factor, rng)).collect()
    }

    pub fn sample_inputs<R: Rng + ?Sized>(&self, m: usize, d: usize, rng: &mut R) -> Matrix {
        let data = (0..m * d)
            .map(|_| sample_truncated_normal(self.mean, self.x_std, self.cutoff_factor, rng))
            .collect();
        Matrix::from_vec(m, d, data).expect("sized above")
    }
}

/// Regression sample `(X, y)` with `X` stored row-major `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(config(format!("{} input rows but {} responses", x.rows(), y.len())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// CSV with header `x1,…,xd,y` and every value in `{:.16e}` (17 significant digits).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> =
            (1..=self.dim()).map(|i| format!("x{i}")).chain(std::iter::once("y".to_string())).collect();
        writeln!(out, "{}", header.join(","))?;
        for (i, y) in self.y.iter().enumerate() {
            let mut line: Vec<String> = self.x.row(i).iter().map(|v| fmt_f64(*v)).collect();
            line.push(fmt_f64(*y));
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| config("empty dataset file"))?;
        let cols = header.split(',').count();
        if cols < 2 {
            return Err(config("dataset needs at least one input column and y"));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| config(format!("row {}: {e}", lineno + 1)))?;
            if vals.len() != cols {
                return Err(config(format!("row {} has {} fields, expected {cols}", lineno + 1, vals.len())));
            }
            xs.extend_from_slice(&vals[..cols - 1]);
            ys.push(vals[cols - 1]);
        }
        Dataset::new(Matrix::from_vec(ys.len(), cols - 1, xs)?, ys)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One draw from `N(mean, std²)` conditioned on `|x - mean| <= cutoff_factor · std`.
///
/// A non-positive `std` returns `mean` (a point mass).
pub fn sample_truncated_normal<R: Rng + ?Sized>(mean: f64, std: f64, cutoff_factor: f64, rng: &mut R) -> f64 {
    if std <= 0.0 {
        return mean;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= cutoff_factor {
            return mean + std * z;
        }
    }
}

/// Draws a teacher of depth `depth` with widths `[d, h, …, h, 1]`. Layer `l` is
/// entrywise `N(0, 2/d_{l-1})`; columns of `θ_1` for inputs `s..d` are zeroed.
pub fn make_teacher<R: Rng + ?Sized>(
    spec: &TeacherSpec,
    depth: usize,
    activation: ActivationKind,
    rng: &mut R,
) -> Result<Network> {
    spec.validate()?;
    if depth < 2 {
        return Err(domain(format!("teacher depth must be >= 2, got {depth}")));
    }
    let widths = uniform_widths(spec.d, spec.hidden, depth);
    let normals: Vec<Normal<f64>> =
        widths.iter().map(|&fan_in| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std")).collect();
    Network::from_shape_fn(&widths, activation, |l, _, j| {
        let w = normals[l].sample(rng);
        if l == 0 && j >= spec.s {
            0.0
        } else {
            w
        }
    })
}

/// `y_i = f₀(x_i) + ξ_i` with truncated-normal inputs and noise.
pub fn synthesize<R: Rng + ?Sized>(teacher: &Network, n: usize, dspec: &DataSpec, rng: &mut R) -> Result<Dataset> {
    dspec.validate()?;
    let d = teacher.input_dim();
    let mut x = Matrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        for v in x.row_mut(i) {
            *v = sample_truncated_normal(dspec.mean, dspec.x_std, dspec.cutoff_factor, rng);
        }
        let noise = sample_truncated_normal(0.0, dspec.noise_std, dspec.cutoff_factor, rng);
        y.push(teacher.output_unchecked(x.row(i)) + noise);
    }
    Dataset::new(x, y)
}

/// `∇ₓ log p(x) = -(x - μ)/σ²` for the product truncated-normal density, defined on
/// the closed truncation box.
pub fn grad_log_density(x: &[f64], dspec: &DataSpec) -> Result<Vec<f64>> {
    let half_width = dspec.cutoff_factor * dspec.x_std;
    let var = dspec.x_std * dspec.x_std;
    x.iter()
        .map(|&xi| {
            let c = xi - dspec.mean;
            if !(c.abs() <= half_width) {
                Err(domain(format!("{xi} lies outside the truncation box")))
            } else {
                Ok(-c / var)
            }
        })
        .collect()
}

/// `log p(x)` of the product truncated-normal density (including the normaliser's
/// truncation mass, which is constant and irrelevant to the gradient).
pub fn log_density(x: &[f64], dspec: &DataSpec) -> Result<f64> {
    let half_width = dspec.cutoff_factor * dspec.x_std;
    let var = dspec.x_std * dspec.x_std;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    x.iter().try_fold(0.0, |acc, &xi| {
        let c = xi - dspec.mean;
        if !(c.abs() <= half_width) {
            return Err(domain(format!("{xi} lies outside the truncation box")));
        }
        Ok(acc + norm - 0.5 * c * c / var)
    })
}
