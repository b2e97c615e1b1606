//! Gaussian-smoothing (Stein) derivative estimators.
//!
//! With `δ_i ~ N(0, σ²I)` over the perturbed axes and antithetic pairs,
//!
//! ```text
//! ∇u(x) ≈ (1/K) Σ δ_i/(2σ²) · (u(x+δ_i) − u(x−δ_i))
//! Δu(x) ≈ (1/K) Σ (‖δ_i‖² − σ²D)/(2σ⁴) · (u(x+δ_i) + u(x−δ_i) − 2u(x))
//! ```
//!
//! Evaluations arrive in delta form (`plus = u(x+δ) − u(x)`,
//! `minus = u(x) − u(x−δ)`), so the gradient uses `plus + minus` and the
//! Laplacian `plus − minus`. One set of `2K+1` evaluations per point serves
//! both estimates. Time derivatives use a separate set of `K` scalar
//! perturbations along the time axis.

use std::ops::{Add, Mul, Neg, Range, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::network::{PerturbedOutput, PreparedNetwork, Propagation};
use crate::tensor::{DenseTensor, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteinConfig {
    /// `K`, antithetic pairs per estimate.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// One delta set per step shared by every point, or one per point.
    #[serde(default = "yes")]
    pub share_deltas: bool,
    /// Estimate the gradient from its own `K` perturbations instead of
    /// reusing the Laplacian's.
    #[serde(default)]
    pub separate_gradient: bool,
}

fn default_samples() -> usize {
    512
}

fn default_sigma() -> f64 {
    0.01
}

fn yes() -> bool {
    true
}

impl Default for SteinConfig {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            sigma: default_sigma(),
            share_deltas: true,
            separate_gradient: false,
        }
    }
}

impl SteinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return param_err("Stein sample count must be ≥ 1");
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return param_err(format!("Stein sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }
}

/// Perturbations for one estimate: `K` spatial rows (Gaussian on
/// `spatial_dims`, zero elsewhere), then `K` more spatial rows reserved for
/// the gradient when `separate_gradient` is set, then, when `time_dim` is
/// set, `K` rows perturbing only the time axis. Either one block shared by
/// all points or one block per point.
#[derive(Debug, Clone)]
pub struct DeltaSet {
    deltas: DenseTensor,
    sigma: f64,
    samples: usize,
    spatial_dims: Vec<usize>,
    time_dim: Option<usize>,
    separate_gradient: bool,
    points: Option<usize>,
}

impl DeltaSet {
    pub fn sample(
        cfg: &SteinConfig,
        input_dim: usize,
        spatial_dims: &[usize],
        time_dim: Option<usize>,
        points: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        cfg.validate()?;
        if spatial_dims.is_empty() || spatial_dims.iter().chain(&time_dim).any(|&d| d >= input_dim) {
            return param_err(format!(
                "perturbed axes {spatial_dims:?} / {time_dim:?} invalid for input width {input_dim}"
            ));
        }
        if time_dim.is_some_and(|t| spatial_dims.contains(&t)) {
            return param_err("time axis cannot also be a spatial axis");
        }
        let k = cfg.samples;
        let spatial_blocks = 1 + cfg.separate_gradient as usize;
        let group = k * (spatial_blocks + time_dim.is_some() as usize);
        let blocks = if cfg.share_deltas { 1 } else { points };
        let mut deltas = DenseTensor::zeros(&[blocks * group, input_dim]);
        for b in 0..blocks {
            for i in 0..spatial_blocks * k {
                let row = deltas.row_mut(b * group + i);
                for &d in spatial_dims {
                    row[d] = cfg.sigma * rng.standard_normal();
                }
            }
            if let Some(t) = time_dim {
                for i in 0..k {
                    deltas.row_mut(b * group + spatial_blocks * k + i)[t] = cfg.sigma * rng.standard_normal();
                }
            }
        }
        Ok(Self {
            deltas,
            sigma: cfg.sigma,
            samples: k,
            spatial_dims: spatial_dims.to_vec(),
            time_dim,
            separate_gradient: cfg.separate_gradient,
            points: (!cfg.share_deltas).then_some(points),
        })
    }

    /// Wraps explicit spatial perturbations (`K × input_dim`, shared).
    pub fn from_spatial(deltas: DenseTensor, sigma: f64, spatial_dims: &[usize]) -> Result<Self> {
        if deltas.ndim() != 2 || deltas.rows() == 0 {
            return shape_err("delta matrix must be K × input_dim with K ≥ 1");
        }
        if !(sigma > 0.0) {
            return param_err("sigma must be positive");
        }
        Ok(Self {
            samples: deltas.rows(),
            deltas,
            sigma,
            spatial_dims: spatial_dims.to_vec(),
            time_dim: None,
            separate_gradient: false,
            points: None,
        })
    }

    pub fn deltas(&self) -> &DenseTensor {
        &self.deltas
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn spatial_dims(&self) -> &[usize] {
        &self.spatial_dims
    }

    pub fn time_dim(&self) -> Option<usize> {
        self.time_dim
    }

    pub fn is_shared(&self) -> bool {
        self.points.is_none()
    }

    pub fn separate_gradient(&self) -> bool {
        self.separate_gradient
    }

    /// Evaluations per point, `G`.
    pub fn group(&self) -> usize {
        self.samples * (1 + self.separate_gradient as usize + self.time_dim.is_some() as usize)
    }

    /// Rows feeding the Laplacian (and the gradient unless separated).
    pub fn spatial_rows(&self) -> Range<usize> {
        0..self.samples
    }

    /// Rows feeding the gradient.
    pub fn gradient_rows(&self) -> Range<usize> {
        if self.separate_gradient {
            self.samples..2 * self.samples
        } else {
            self.spatial_rows()
        }
    }

    pub fn time_rows(&self) -> Option<Range<usize>> {
        let start = self.gradient_rows().end;
        self.time_dim.map(|_| start..start + self.samples)
    }

    /// Perturbation `i` of point `p`.
    pub fn delta(&self, p: usize, i: usize) -> &[f64] {
        let block = if self.points.is_some() { p } else { 0 };
        self.deltas.row(block * self.group() + i)
    }

    /// The part of this set covering points `range`; shared sets are cloned.
    pub fn chunk(&self, range: Range<usize>) -> Result<Self> {
        if self.is_shared() {
            return Ok(self.clone());
        }
        if range.end > self.points.unwrap_or(0) || range.start > range.end {
            return shape_err(format!("point range {range:?} out of bounds"));
        }
        Ok(Self {
            deltas: self.per_point_rows(range.clone())?,
            points: Some(range.end - range.start),
            spatial_dims: self.spatial_dims.clone(),
            ..*self
        })
    }

    /// Rows of this set as a per-point block for `points` points.
    pub fn per_point_rows(&self, range: Range<usize>) -> Result<DenseTensor> {
        if self.is_shared() {
            return shape_err("shared delta set has no per-point rows");
        }
        let g = self.group();
        let cols = self.deltas.cols();
        let data = self.deltas.data()[range.start * g * cols..range.end * g * cols].to_vec();
        DenseTensor::new(vec![(range.end - range.start) * g, cols], data)
    }
}

/// Output of `2K+1` (or `4K+1` with time) evaluations per point in delta
/// form; entry `p·G + i` pairs point `p` with perturbation `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEvaluations {
    pub base: Vec<f64>,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    pub group: usize,
}

impl PairEvaluations {
    pub fn points(&self) -> usize {
        self.base.len()
    }
}

impl From<&PerturbedOutput> for PairEvaluations {
    fn from(o: &PerturbedOutput) -> Self {
        let first = |t: &DenseTensor| t.data().iter().step_by(t.cols()).copied().collect();
        Self {
            base: first(&o.base),
            plus: first(&o.plus),
            minus: first(&o.minus),
            group: o.group,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeEstimate {
    pub value: Vec<f64>,
    /// `P × |spatial_dims|`.
    pub gradient: DenseTensor,
    pub laplacian: Vec<f64>,
    pub time_derivative: Option<Vec<f64>>,
}

fn check_evals(ds: &DeltaSet, ev: &PairEvaluations) -> Result<()> {
    let p = ev.points();
    if ev.group != ds.group() || ev.plus.len() != p * ds.group() || ev.minus.len() != ev.plus.len() {
        return shape_err("evaluations do not match the delta set");
    }
    if let Some(n) = ds.points {
        if n != p {
            return shape_err(format!("delta set built for {n} points, got {p}"));
        }
    }
    Ok(())
}

fn laplacian_weight(ds: &DeltaSet, d: &[f64]) -> f64 {
    let s2 = ds.sigma * ds.sigma;
    let norm2: f64 = ds.spatial_dims.iter().map(|&j| d[j] * d[j]).sum();
    (norm2 - s2 * ds.spatial_dims.len() as f64) / (2.0 * s2 * s2)
}

/// Gradient, Laplacian and (if the set has a time block) time derivative
/// from one shared set of evaluations.
pub fn estimate(ds: &DeltaSet, ev: &PairEvaluations) -> Result<DerivativeEstimate> {
    check_evals(ds, ev)?;
    let (p_rows, g, k) = (ev.points(), ds.group(), ds.samples as f64);
    let nd = ds.spatial_dims.len();
    let inv = 1.0 / (2.0 * ds.sigma * ds.sigma);
    let mut gradient = DenseTensor::zeros(&[p_rows, nd]);
    let mut laplacian = vec![0.0; p_rows];
    let mut time = ds.time_dim.map(|_| vec![0.0; p_rows]);
    for p in 0..p_rows {
        let grow = gradient.row_mut(p);
        for i in ds.gradient_rows() {
            let d = ds.delta(p, i);
            let odd = ev.plus[p * g + i] + ev.minus[p * g + i];
            for (gj, &j) in grow.iter_mut().zip(&ds.spatial_dims) {
                *gj += d[j] * inv * odd;
            }
        }
        for i in ds.spatial_rows() {
            let d = ds.delta(p, i);
            laplacian[p] += laplacian_weight(ds, d) * (ev.plus[p * g + i] - ev.minus[p * g + i]);
        }
        grow.iter_mut().for_each(|v| *v /= k);
        laplacian[p] /= k;
        if let (Some(t), Some(rows), Some(out)) = (ds.time_dim, ds.time_rows(), time.as_mut()) {
            let s: f64 = rows
                .map(|i| ds.delta(p, i)[t] * inv * (ev.plus[p * g + i] + ev.minus[p * g + i]))
                .sum();
            out[p] = s / k;
        }
    }
    Ok(DerivativeEstimate {
        value: ev.base.clone(),
        gradient,
        laplacian,
        time_derivative: time,
    })
}

/// Per-sample Laplacian terms (`P × K`) before averaging.
pub fn laplacian_samples(ds: &DeltaSet, ev: &PairEvaluations) -> Result<DenseTensor> {
    check_evals(ds, ev)?;
    let (g, k) = (ds.group(), ds.samples);
    Ok(DenseTensor::from_fn(&[ev.points(), k], |idx| {
        let (p, i) = (idx / k, idx % k);
        laplacian_weight(ds, ds.delta(p, i)) * (ev.plus[p * g + i] - ev.minus[p * g + i])
    }))
}

/// Per-sample gradient terms for spatial axis slot `j` (`P × K`).
pub fn gradient_samples(ds: &DeltaSet, ev: &PairEvaluations, j: usize) -> Result<DenseTensor> {
    check_evals(ds, ev)?;
    let (g, k, axis) = (ds.group(), ds.samples, ds.spatial_dims[j]);
    let first = ds.gradient_rows().start;
    let inv = 1.0 / (2.0 * ds.sigma * ds.sigma);
    Ok(DenseTensor::from_fn(&[ev.points(), k], |idx| {
        let (p, i) = (idx / k, first + idx % k);
        ds.delta(p, i)[axis] * inv * (ev.plus[p * g + i] + ev.minus[p * g + i])
    }))
}

/// Upstream gradients with respect to the estimate's outputs.
#[derive(Debug, Clone)]
pub struct EstimateGradients {
    /// `P × |spatial_dims|`, or `None` if the gradient is unused.
    pub gradient: Option<DenseTensor>,
    pub laplacian: Option<Vec<f64>>,
    pub time_derivative: Option<Vec<f64>>,
    pub value: Option<Vec<f64>>,
}

/// Chain rule through [`estimate`]: gradients with respect to the
/// evaluations `(base, plus, minus)`.
pub fn backprop(ds: &DeltaSet, points: usize, up: &EstimateGradients) -> Result<PairEvaluations> {
    let (g, k) = (ds.group(), ds.samples as f64);
    let inv = 1.0 / (2.0 * ds.sigma * ds.sigma);
    let mut out = PairEvaluations {
        base: up.value.clone().unwrap_or_else(|| vec![0.0; points]),
        plus: vec![0.0; points * g],
        minus: vec![0.0; points * g],
        group: g,
    };
    if out.base.len() != points {
        return shape_err("value gradient length mismatch");
    }
    for p in 0..points {
        if let Some(gr) = &up.gradient {
            for i in ds.gradient_rows() {
                let d = ds.delta(p, i);
                let odd = ds.spatial_dims.iter().zip(gr.row(p)).map(|(&j, w)| w * d[j] * inv).sum::<f64>() / k;
                out.plus[p * g + i] = odd;
                out.minus[p * g + i] = odd;
            }
        }
        if let Some(l) = &up.laplacian {
            for i in ds.spatial_rows() {
                let even = l[p] * laplacian_weight(ds, ds.delta(p, i)) / k;
                out.plus[p * g + i] += even;
                out.minus[p * g + i] -= even;
            }
        }
        if let (Some(t), Some(rows), Some(dt)) = (ds.time_dim, ds.time_rows(), &up.time_derivative) {
            for i in rows {
                let w = dt[p] * ds.delta(p, i)[t] * inv / k;
                out.plus[p * g + i] = w;
                out.minus[p * g + i] = w;
            }
        }
    }
    Ok(out)
}

/// Anything that can be evaluated at `x` and at `x ± δ` in delta form.
pub trait PerturbedField {
    fn input_dim(&self) -> usize;
    fn eval_pairs(&self, x: &DenseTensor, ds: &DeltaSet) -> Result<PairEvaluations>;
}

/// A network under a propagation mode.
pub struct NetworkField<'a> {
    pub net: &'a PreparedNetwork,
    pub mode: Propagation,
}

impl PerturbedField for NetworkField<'_> {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn eval_pairs(&self, x: &DenseTensor, ds: &DeltaSet) -> Result<PairEvaluations> {
        let (out, _) = if ds.is_shared() {
            self.net.forward_shared(x, ds.deltas(), self.mode)?
        } else {
            let d = ds.per_point_rows(0..x.rows())?;
            self.net.forward_grouped(x, &d, &d, ds.group(), self.mode)?
        };
        Ok(PairEvaluations::from(&out))
    }
}

/// `u(x) = aᵀx + c` with deltas `aᵀδ` computed directly, so antithetic
/// differences cancel exactly.
pub struct LinearField {
    pub a: Vec<f64>,
    pub c: f64,
}

impl PerturbedField for LinearField {
    fn input_dim(&self) -> usize {
        self.a.len()
    }

    fn eval_pairs(&self, x: &DenseTensor, ds: &DeltaSet) -> Result<PairEvaluations> {
        let dot = |v: &[f64]| v.iter().zip(&self.a).map(|(p, q)| p * q).sum::<f64>();
        let g = ds.group();
        let base: Vec<f64> = (0..x.rows()).map(|p| dot(x.row(p)) + self.c).collect();
        let plus: Vec<f64> = (0..x.rows() * g).map(|r| dot(ds.delta(r / g, r % g))).collect();
        Ok(PairEvaluations {
            base,
            minus: plus.clone(),
            plus,
            group: g,
        })
    }
}

/// Plain closure, evaluated once at `x` and once at each `x ± δ_i`.
pub struct ClosureField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64> PerturbedField for ClosureField<F> {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn eval_pairs(&self, x: &DenseTensor, ds: &DeltaSet) -> Result<PairEvaluations> {
        let g = ds.group();
        let mut ev = PairEvaluations {
            base: Vec::with_capacity(x.rows()),
            plus: Vec::with_capacity(x.rows() * g),
            minus: Vec::with_capacity(x.rows() * g),
            group: g,
        };
        let mut buf = vec![0.0; self.dim];
        for p in 0..x.rows() {
            let xr = x.row(p);
            let u = (self.f)(xr);
            ev.base.push(u);
            for i in 0..g {
                let d = ds.delta(p, i);
                buf.iter_mut().zip(xr.iter().zip(d)).for_each(|(b, (a, c))| *b = a + c);
                ev.plus.push((self.f)(&buf) - u);
                buf.iter_mut().zip(xr.iter().zip(d)).for_each(|(b, (a, c))| *b = a - c);
                ev.minus.push(u - (self.f)(&buf));
            }
        }
        Ok(ev)
    }
}

fn fresh_deltas(
    field: &dyn PerturbedField,
    x: &DenseTensor,
    cfg: &SteinConfig,
    dims: &[usize],
    time_dim: Option<usize>,
    rng: &mut RngStream,
) -> Result<(DeltaSet, PairEvaluations)> {
    let ds = DeltaSet::sample(cfg, field.input_dim(), dims, time_dim, x.rows(), rng)?;
    let ev = field.eval_pairs(x, &ds)?;
    Ok((ds, ev))
}

/// Gradient over `dims` with freshly sampled perturbations.
pub fn estimate_gradient(
    field: &dyn PerturbedField,
    x: &DenseTensor,
    cfg: &SteinConfig,
    dims: &[usize],
    rng: &mut RngStream,
) -> Result<DenseTensor> {
    let (ds, ev) = fresh_deltas(field, x, cfg, dims, None, rng)?;
    Ok(estimate(&ds, &ev)?.gradient)
}

/// Laplacian over `dims` with freshly sampled perturbations.
pub fn estimate_laplacian(
    field: &dyn PerturbedField,
    x: &DenseTensor,
    cfg: &SteinConfig,
    dims: &[usize],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let (ds, ev) = fresh_deltas(field, x, cfg, dims, None, rng)?;
    Ok(estimate(&ds, &ev)?.laplacian)
}

/// Derivative along the single axis `time_dim`.
pub fn estimate_time_derivative(
    field: &dyn PerturbedField,
    x: &DenseTensor,
    cfg: &SteinConfig,
    time_dim: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let (ds, ev) = fresh_deltas(field, x, cfg, &[time_dim], None, rng)?;
    Ok(estimate(&ds, &ev)?.gradient.into_data())
}

/// Exact `Σ_j ∂²u/∂x_j²` over `dims` by forward-mode jets (full precision).
pub fn exact_laplacian(net: &PreparedNetwork, x: &DenseTensor, dims: &[usize]) -> Result<Vec<f64>> {
    let (_, _, second) = net.forward_jets(x, dims)?;
    Ok((0..x.rows()).map(|p| second.row(p).iter().sum()).collect())
}

/// Exact gradient over `dims` (`P × |dims|`).
pub fn exact_gradient(net: &PreparedNetwork, x: &DenseTensor, dims: &[usize]) -> Result<DenseTensor> {
    net.forward_jets(x, dims).map(|(_, g, _)| g)
}

/// Hyper-dual number `a + b·ε₁ + c·ε₂ + d·ε₁ε₂` with `ε₁² = ε₂² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperDual {
    pub re: f64,
    pub e1: f64,
    pub e2: f64,
    pub e12: f64,
}

impl HyperDual {
    pub fn constant(v: f64) -> Self {
        Self {
            re: v,
            e1: 0.0,
            e2: 0.0,
            e12: 0.0,
        }
    }

    /// Variable seeded in both infinitesimal directions.
    pub fn variable(v: f64) -> Self {
        Self {
            re: v,
            e1: 1.0,
            e2: 1.0,
            e12: 0.0,
        }
    }

    /// `f(self)` given `f`, `f'`, `f''` at the real part.
    fn chain(self, f: f64, f1: f64, f2: f64) -> Self {
        Self {
            re: f,
            e1: f1 * self.e1,
            e2: f1 * self.e2,
            e12: f1 * self.e12 + f2 * self.e1 * self.e2,
        }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(c, -s, -c)
    }

    pub fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e, e)
    }

    pub fn ln(self) -> Self {
        let r = self.re;
        self.chain(r.ln(), 1.0 / r, -1.0 / (r * r))
    }

    pub fn tanh(self) -> Self {
        let t = self.re.tanh();
        let s = 1.0 - t * t;
        self.chain(t, s, -2.0 * t * s)
    }

    pub fn scale(self, k: f64) -> Self {
        Self {
            re: k * self.re,
            e1: k * self.e1,
            e2: k * self.e2,
            e12: k * self.e12,
        }
    }
}

impl Add for HyperDual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            re: self.re + o.re,
            e1: self.e1 + o.e1,
            e2: self.e2 + o.e2,
            e12: self.e12 + o.e12,
        }
    }
}

impl Sub for HyperDual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Neg for HyperDual {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl Mul for HyperDual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            re: self.re * o.re,
            e1: self.re * o.e1 + self.e1 * o.re,
            e2: self.re * o.e2 + self.e2 * o.re,
            e12: self.re * o.e12 + self.e1 * o.e2 + self.e2 * o.e1 + self.e12 * o.re,
        }
    }
}

/// `Σ_j ∂²f/∂x_j²` over `dims` for a closure on hyper-dual numbers.
pub fn hyperdual_laplacian(f: impl Fn(&[HyperDual]) -> HyperDual, x: &[f64], dims: &[usize]) -> f64 {
    dims.iter()
        .map(|&j| {
            let args: Vec<HyperDual> = x
                .iter()
                .enumerate()
                .map(|(i, &v)| if i == j { HyperDual::variable(v) } else { HyperDual::constant(v) })
                .collect();
            f(&args).e12
        })
        .sum()
}

/// `∂f/∂x_j` for each `j` in `dims`.
pub fn hyperdual_gradient(f: impl Fn(&[HyperDual]) -> HyperDual, x: &[f64], dims: &[usize]) -> Vec<f64> {
    dims.iter()
        .map(|&j| {
            let args: Vec<HyperDual> = x
                .iter()
                .enumerate()
                .map(|(i, &v)| if i == j { HyperDual::variable(v) } else { HyperDual::constant(v) })
                .collect();
            f(&args).e1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkConfig, Parameters};
    use crate::tensor::sample_uniform;
    use std::cell::Cell;

    fn cfg(k: usize) -> SteinConfig {
        SteinConfig {
            samples: k,
            sigma: 0.01,
            share_deltas: true,
            separate_gradient: false,
        }
    }

    fn mean_se(row: &[f64]) -> (f64, f64) {
        let n = row.len() as f64;
        let m = row.iter().sum::<f64>() / n;
        let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    fn small_net(seed: u64, d: usize) -> PreparedNetwork {
        let c = NetworkConfig::dense(3, 16, d);
        let p = Parameters::init(&c, &mut RngStream::new(seed, 0)).unwrap();
        PreparedNetwork::new(&c, &p, None).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SteinConfig::default().validate().is_ok());
        assert!(SteinConfig { samples: 0, ..Default::default() }.validate().is_err());
        assert!(SteinConfig { sigma: 0.0, ..Default::default() }.validate().is_err());
        let c: SteinConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, SteinConfig::default());
    }

    #[test]
    fn constant_field_gives_zero_gradient_per_sample() {
        let f = ClosureField { dim: 3, f: |_: &[f64]| 4.25 };
        let x = sample_uniform(&[4, 3], 0.0, 1.0, &mut RngStream::new(1, 0)).unwrap();
        let ds = DeltaSet::sample(&cfg(64), 3, &[0, 1, 2], None, 4, &mut RngStream::new(2, 0)).unwrap();
        let ev = f.eval_pairs(&x, &ds).unwrap();
        for j in 0..3 {
            assert!(gradient_samples(&ds, &ev, j).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_field_laplacian_samples_exactly_zero() {
        let f = LinearField {
            a: vec![0.3, -1.7, 2.5],
            c: 0.1,
        };
        let x = sample_uniform(&[5, 3], -1.0, 1.0, &mut RngStream::new(3, 0)).unwrap();
        let ds = DeltaSet::sample(&cfg(128), 3, &[0, 1, 2], None, 5, &mut RngStream::new(4, 0)).unwrap();
        let ev = f.eval_pairs(&x, &ds).unwrap();
        assert!(laplacian_samples(&ds, &ev).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_gradient_within_band() {
        let a = vec![0.3, -1.7, 2.5];
        let f = LinearField { a: a.clone(), c: 0.0 };
        let x = DenseTensor::zeros(&[1, 3]);
        let ds = DeltaSet::sample(&cfg(4096), 3, &[0, 1, 2], None, 1, &mut RngStream::new(5, 0)).unwrap();
        let ev = f.eval_pairs(&x, &ds).unwrap();
        for j in 0..3 {
            let (m, se) = mean_se(gradient_samples(&ds, &ev, j).unwrap().data());
            assert!((m - a[j]).abs() <= 4.0 * se, "axis {j}: {m} vs {} (se {se})", a[j]);
        }
    }

    #[test]
    fn quadratic_laplacian_within_band() {
        for d in [2usize, 20, 100] {
            let f = ClosureField {
                dim: d,
                f: |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>(),
            };
            let x = sample_uniform(&[1, d], -1.0, 1.0, &mut RngStream::new(6, d as u64)).unwrap();
            let dims: Vec<usize> = (0..d).collect();
            let ds = DeltaSet::sample(&cfg(4096), d, &dims, None, 1, &mut RngStream::new(7, d as u64)).unwrap();
            let ev = f.eval_pairs(&x, &ds).unwrap();
            let (m, se) = mean_se(laplacian_samples(&ds, &ev).unwrap().data());
            let want = 2.0 * d as f64;
            assert!((m - want).abs() <= 4.0 * se, "D={d}: {m} vs {want} (se {se})");
        }
    }

    #[test]
    fn time_derivative_of_linear_in_t() {
        let c = 1.75;
        let f = ClosureField {
            dim: 3,
            f: move |x: &[f64]| c * x[2] + x[0].sin(),
        };
        let x = sample_uniform(&[1, 3], 0.0, 1.0, &mut RngStream::new(8, 0)).unwrap();
        let ds = DeltaSet::sample(&cfg(4096), 3, &[2], None, 1, &mut RngStream::new(9, 0)).unwrap();
        let ev = f.eval_pairs(&x, &ds).unwrap();
        let (m, se) = mean_se(gradient_samples(&ds, &ev, 0).unwrap().data());
        assert!((m - c).abs() <= 4.0 * se.max(1e-12));
        let free = ClosureField { dim: 3, f: |x: &[f64]| x[0] * x[1] };
        let dt = estimate_time_derivative(&free, &x, &cfg(64), 2, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(dt, vec![0.0]);
    }

    #[test]
    fn time_block_is_separate_from_spatial_block() {
        let ds = DeltaSet::sample(&cfg(8), 3, &[0, 1], Some(2), 2, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(ds.group(), 16);
        for i in 0..8 {
            assert_eq!(ds.delta(0, i)[2], 0.0);
            assert_eq!(ds.delta(0, 8 + i)[0], 0.0);
            assert_eq!(ds.delta(0, 8 + i)[1], 0.0);
        }
        assert!(DeltaSet::sample(&cfg(8), 3, &[0, 2], Some(2), 1, &mut RngStream::new(1, 0)).is_err());
        assert!(DeltaSet::sample(&cfg(8), 3, &[], None, 1, &mut RngStream::new(1, 0)).is_err());
    }

    #[test]
    fn shared_evaluations_cover_gradient_and_laplacian() {
        let calls = Cell::new(0usize);
        let f = ClosureField {
            dim: 2,
            f: |x: &[f64]| {
                calls.set(calls.get() + 1);
                x[0] * x[0] * x[1]
            },
        };
        let x = sample_uniform(&[3, 2], 0.0, 1.0, &mut RngStream::new(1, 0)).unwrap();
        let ds = DeltaSet::sample(&cfg(32), 2, &[0, 1], None, 3, &mut RngStream::new(2, 0)).unwrap();
        let est = estimate(&ds, &f.eval_pairs(&x, &ds).unwrap()).unwrap();
        assert_eq!(calls.get(), 3 * (2 * 32 + 1));
        assert_eq!(est.gradient.shape(), &[3, 2]);
        assert_eq!(est.laplacian.len(), 3);
    }

    #[test]
    fn per_point_deltas_differ_between_points() {
        let c = SteinConfig {
            share_deltas: false,
            ..cfg(16)
        };
        let ds = DeltaSet::sample(&c, 2, &[0, 1], None, 3, &mut RngStream::new(1, 0)).unwrap();
        assert_ne!(ds.delta(0, 0), ds.delta(1, 0));
        let net = small_net(1, 2);
        let x = sample_uniform(&[3, 2], 0.0, 1.0, &mut RngStream::new(2, 0)).unwrap();
        let field = NetworkField {
            net: &net,
            mode: Propagation::DiffQuant,
        };
        let ev = field.eval_pairs(&x, &ds).unwrap();
        let direct = ClosureField {
            dim: 2,
            f: |v: &[f64]| net.eval(&DenseTensor::matrix(1, 2, v.to_vec()).unwrap()).unwrap().data()[0],
        }
        .eval_pairs(&x, &ds)
        .unwrap();
        for (a, b) in ev.plus.iter().zip(&direct.plus) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hyperdual_quadratic_and_linear() {
        let x = [0.3, -0.2, 1.5, 2.0];
        let dims = [0, 1, 2, 3];
        let quad = hyperdual_laplacian(|v| v.iter().fold(HyperDual::constant(0.0), |s, &a| s + a * a), &x, &dims);
        assert_eq!(quad, 8.0);
        let lin = hyperdual_laplacian(|v| v[0].scale(3.0) - v[2], &x, &dims);
        assert_eq!(lin, 0.0);
        let g = hyperdual_gradient(|v| (v[0] + v[1]).sin(), &x, &[0, 1]);
        assert!((g[0] - 0.1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn hyperdual_elementary_functions() {
        let x = 0.7;
        let lap = |f: fn(HyperDual) -> HyperDual| hyperdual_laplacian(|v| f(v[0]), &[x], &[0]);
        assert!((lap(HyperDual::sin) + x.sin()).abs() < 1e-15);
        assert!((lap(HyperDual::cos) + x.cos()).abs() < 1e-15);
        assert!((lap(HyperDual::exp) - x.exp()).abs() < 1e-15);
        assert!((lap(HyperDual::ln) + 1.0 / (x * x)).abs() < 1e-14);
        let t = x.tanh();
        assert!((lap(HyperDual::tanh) + 2.0 * t * (1.0 - t * t)).abs() < 1e-15);
    }

    #[test]
    fn network_jets_match_second_differences() {
        let net = small_net(3, 2);
        let x = sample_uniform(&[6, 2], 0.0, 1.0, &mut RngStream::new(4, 0)).unwrap();
        let lap = exact_laplacian(&net, &x, &[0, 1]).unwrap();
        let grad = exact_gradient(&net, &x, &[0, 1]).unwrap();
        let h = 1e-3;
        let u = |v: &[f64]| net.eval(&DenseTensor::matrix(1, 2, v.to_vec()).unwrap()).unwrap().data()[0];
        for p in 0..6 {
            let xr = x.row(p).to_vec();
            let mut fd_lap = 0.0;
            for j in 0..2 {
                let (mut a, mut b) = (xr.clone(), xr.clone());
                a[j] += h;
                b[j] -= h;
                fd_lap += (u(&a) - 2.0 * u(&xr) + u(&b)) / (h * h);
                let fd_g = (u(&a) - u(&b)) / (2.0 * h);
                assert!((fd_g - grad.at(p, j)).abs() <= 1e-6 * fd_g.abs().max(1e-2));
            }
            assert!((fd_lap - lap[p]).abs() <= 1e-6 * lap[p].abs().max(1e-1), "{fd_lap} vs {}", lap[p]);
        }
    }

    #[test]
    fn tanh_network_estimates_track_oracle() {
        let net = small_net(5, 2);
        let x = sample_uniform(&[32, 2], 0.0, 1.0, &mut RngStream::new(6, 0)).unwrap();
        let field = NetworkField {
            net: &net,
            mode: Propagation::DiffQuant,
        };
        let ds = DeltaSet::sample(&cfg(4096), 2, &[0, 1], None, 32, &mut RngStream::new(7, 0)).unwrap();
        let est = estimate(&ds, &field.eval_pairs(&x, &ds).unwrap()).unwrap();
        let lap = exact_laplacian(&net, &x, &[0, 1]).unwrap();
        let grad = exact_gradient(&net, &x, &[0, 1]).unwrap();
        let mut lap_err: Vec<f64> = (0..32).map(|p| (est.laplacian[p] - lap[p]).abs() / lap[p].abs()).collect();
        lap_err.sort_by(f64::total_cmp);
        assert!(lap_err[16] <= 0.05, "median Laplacian error {}", lap_err[16]);
        let g_err = est.gradient.sub(&grad).unwrap().frobenius() / grad.frobenius();
        assert!(g_err <= 0.05, "gradient error {g_err}");
    }

    #[test]
    fn backprop_matches_finite_differences_of_estimate() {
        for separate_gradient in [false, true] {
            let c = SteinConfig {
                separate_gradient,
                ..cfg(16)
            };
            backprop_check(&DeltaSet::sample(&c, 3, &[0, 1], Some(2), 2, &mut RngStream::new(1, 0)).unwrap());
        }
    }

    #[test]
    fn separate_gradient_rows() {
        let sep = SteinConfig {
            separate_gradient: true,
            ..cfg(8)
        };
        let a = DeltaSet::sample(&cfg(8), 3, &[0, 1], Some(2), 1, &mut RngStream::new(3, 0)).unwrap();
        let b = DeltaSet::sample(&sep, 3, &[0, 1], Some(2), 1, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!((a.group(), b.group()), (16, 24));
        assert_eq!((b.gradient_rows(), b.time_rows()), (8..16, Some(16..24)));
        for i in 8..16 {
            assert_eq!(b.delta(0, i)[2], 0.0);
            assert!(b.delta(0, i)[0] != 0.0);
        }
        for i in 16..24 {
            assert_eq!(&b.delta(0, i)[..2], &[0.0, 0.0]);
        }
        // Laplacian rows are drawn first, so both sets share them
        let f = ClosureField {
            dim: 3,
            f: |x: &[f64]| x[0] * x[0] * x[1] + x[2].sin() + x[0],
        };
        let x = DenseTensor::matrix(1, 3, vec![0.3, -0.2, 0.5]).unwrap();
        let ea = estimate(&a, &f.eval_pairs(&x, &a).unwrap()).unwrap();
        let eb = estimate(&b, &f.eval_pairs(&x, &b).unwrap()).unwrap();
        assert_eq!(ea.laplacian, eb.laplacian);
        assert_ne!(ea.gradient, eb.gradient);
    }

    fn backprop_check(ds: &DeltaSet) {
        let ds = ds.clone();
        let mut rng = RngStream::new(2, 0);
        let n = 2 * ds.group();
        let ev = PairEvaluations {
            base: vec![0.3, -0.1],
            plus: (0..n).map(|_| rng.uniform(-1e-2, 1e-2)).collect(),
            minus: (0..n).map(|_| rng.uniform(-1e-2, 1e-2)).collect(),
            group: ds.group(),
        };
        let wg = DenseTensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let (wl, wt) = (vec![1.5, -0.5], vec![0.7, 1.1]);
        let objective = |e: &PairEvaluations| {
            let est = estimate(&ds, e).unwrap();
            let g: f64 = est.gradient.data().iter().zip(wg.data()).map(|(a, b)| a * b).sum();
            let l: f64 = est.laplacian.iter().zip(&wl).map(|(a, b)| a * b).sum();
            let t: f64 = est.time_derivative.unwrap().iter().zip(&wt).map(|(a, b)| a * b).sum();
            g + l + t
        };
        let up = EstimateGradients {
            gradient: Some(wg.clone()),
            laplacian: Some(wl.clone()),
            time_derivative: Some(wt.clone()),
            value: None,
        };
        let back = backprop(&ds, 2, &up).unwrap();
        // the objective is linear in the evaluations
        for r in 0..n {
            let mut e = ev.clone();
            e.plus[r] += 1.0;
            assert!(((objective(&e) - objective(&ev)) - back.plus[r]).abs() <= 1e-9 * back.plus[r].abs().max(1.0));
            let mut e = ev.clone();
            e.minus[r] += 1.0;
            assert!(((objective(&e) - objective(&ev)) - back.minus[r]).abs() <= 1e-9 * back.minus[r].abs().max(1.0));
        }
        assert_eq!(back.base, vec![0.0, 0.0]);
    }
}
