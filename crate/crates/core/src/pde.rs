//! Benchmark problems: Poisson 2-D, HJB 20-D and Heat 100-D.
//!
//! Each problem supplies interior and boundary samplers, a residual
//! `a·Δu + b·∂_t u + c·‖∇u‖² + s(x)` evaluated on derivative estimates,
//! boundary targets and a reference solution for metrics.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::network::PreparedNetwork;
use crate::smx::normal_cdf;
use crate::stein::{DerivativeEstimate, EstimateGradients};
use crate::tensor::{read_dense, write_dense, DenseTensor, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemId {
    Poisson2d,
    Hjb20d,
    Heat100d,
}

impl ProblemId {
    pub fn name(self) -> &'static str {
        match self {
            Self::Poisson2d => "poisson2d",
            Self::Hjb20d => "hjb20d",
            Self::Heat100d => "heat100d",
        }
    }
}

/// Seeded Monte Carlo settings for the HJB reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HjbReferenceConfig {
    pub seed: u64,
    pub draws: usize,
}

impl Default for HjbReferenceConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            draws: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeProblem {
    pub id: ProblemId,
    pub spatial_dim: usize,
    pub time_dependent: bool,
    pub hjb_reference: HjbReferenceConfig,
}

pub fn poisson2d() -> PdeProblem {
    PdeProblem {
        id: ProblemId::Poisson2d,
        spatial_dim: 2,
        time_dependent: false,
        hjb_reference: HjbReferenceConfig::default(),
    }
}

pub fn hjb20d() -> PdeProblem {
    PdeProblem {
        id: ProblemId::Hjb20d,
        spatial_dim: 20,
        time_dependent: true,
        hjb_reference: HjbReferenceConfig::default(),
    }
}

pub fn heat100d() -> PdeProblem {
    PdeProblem {
        id: ProblemId::Heat100d,
        spatial_dim: 100,
        time_dependent: true,
        hjb_reference: HjbReferenceConfig::default(),
    }
}

pub fn problem(id: ProblemId) -> PdeProblem {
    match id {
        ProblemId::Poisson2d => poisson2d(),
        ProblemId::Hjb20d => hjb20d(),
        ProblemId::Heat100d => heat100d(),
    }
}

/// Coefficients of `a·Δu + b·∂_t u + c·‖∇u‖² + k`, plus a problem source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualForm {
    pub laplacian: f64,
    pub time: f64,
    pub grad_sq: f64,
    pub constant: f64,
}

const HEAT_N: f64 = 100.0;

fn unit_ball(d: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut v = unit_sphere(d, rng);
    let r = rng.uniform(0.0, 1.0).powf(1.0 / d as f64);
    v.iter_mut().for_each(|x| *x *= r);
    v
}

fn unit_sphere(d: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

impl PdeProblem {
    pub fn input_dim(&self) -> usize {
        self.spatial_dim + usize::from(self.time_dependent)
    }

    pub fn spatial_dims(&self) -> Vec<usize> {
        (0..self.spatial_dim).collect()
    }

    pub fn time_dim(&self) -> Option<usize> {
        self.time_dependent.then_some(self.spatial_dim)
    }

    pub fn residual_form(&self) -> ResidualForm {
        match self.id {
            ProblemId::Poisson2d => ResidualForm {
                laplacian: 1.0,
                time: 0.0,
                grad_sq: 0.0,
                constant: 0.0,
            },
            ProblemId::Hjb20d => ResidualForm {
                laplacian: 1.0,
                time: 1.0,
                grad_sq: -0.5,
                constant: 2.0,
            },
            ProblemId::Heat100d => ResidualForm {
                laplacian: -1.0,
                time: 1.0,
                grad_sq: 0.0,
                constant: 0.0,
            },
        }
    }

    /// Point-dependent residual term (`−g(x)` for Poisson).
    pub fn source(&self, x: &[f64]) -> f64 {
        match self.id {
            ProblemId::Poisson2d => (x[0] + x[1]).sin(),
            _ => 0.0,
        }
    }

    pub fn uses_gradient(&self) -> bool {
        self.residual_form().grad_sq != 0.0
    }

    /// Uniform collocation points in the interior.
    pub fn sample_interior(&self, n: usize, rng: &mut RngStream) -> DenseTensor {
        let d = self.input_dim();
        let mut x = DenseTensor::zeros(&[n, d]);
        for p in 0..n {
            let row = x.row_mut(p);
            match self.id {
                ProblemId::Poisson2d | ProblemId::Hjb20d => {
                    row.iter_mut().for_each(|v| *v = rng.uniform(0.0, 1.0));
                }
                ProblemId::Heat100d => {
                    row[..self.spatial_dim].copy_from_slice(&unit_ball(self.spatial_dim, rng));
                    row[self.spatial_dim] = rng.uniform(0.0, 1.0);
                }
            }
        }
        x
    }

    /// Boundary, initial or terminal points with their target values.
    pub fn sample_boundary(&self, n: usize, rng: &mut RngStream) -> (DenseTensor, Vec<f64>) {
        let d = self.input_dim();
        let mut x = DenseTensor::zeros(&[n, d]);
        for p in 0..n {
            let row = x.row_mut(p);
            match self.id {
                ProblemId::Poisson2d => {
                    let edge = (rng.uniform(0.0, 4.0) as usize).min(3);
                    let s = rng.uniform(0.0, 1.0);
                    let fixed = (edge % 2) as f64;
                    if edge < 2 {
                        row.copy_from_slice(&[fixed, s]);
                    } else {
                        row.copy_from_slice(&[s, fixed]);
                    }
                }
                ProblemId::Hjb20d => {
                    row.iter_mut().for_each(|v| *v = rng.uniform(0.0, 1.0));
                    row[self.spatial_dim] = 1.0;
                }
                ProblemId::Heat100d => {
                    // even rows: initial slice t = 0; odd rows: lateral sphere
                    if p % 2 == 0 {
                        row[..self.spatial_dim].copy_from_slice(&unit_ball(self.spatial_dim, rng));
                        row[self.spatial_dim] = 0.0;
                    } else {
                        row[..self.spatial_dim].copy_from_slice(&unit_sphere(self.spatial_dim, rng));
                        row[self.spatial_dim] = rng.uniform(0.0, 1.0);
                    }
                }
            }
        }
        let targets = (0..n).map(|p| self.boundary_target(x.row(p))).collect();
        (x, targets)
    }

    pub fn boundary_target(&self, x: &[f64]) -> f64 {
        match self.id {
            ProblemId::Poisson2d => 0.5 * (x[0] + x[1]).sin(),
            ProblemId::Hjb20d => x[..self.spatial_dim].iter().map(|v| v.abs()).sum(),
            ProblemId::Heat100d => {
                let t = x[self.spatial_dim];
                if t == 0.0 {
                    sq_norm(&x[..self.spatial_dim]) / (2.0 * HEAT_N)
                } else {
                    t + 1.0 / (2.0 * HEAT_N)
                }
            }
        }
    }

    /// Domain membership, including the closure for boundary points.
    pub fn in_domain(&self, x: &[f64]) -> bool {
        if x.len() != self.input_dim() {
            return false;
        }
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        match self.id {
            ProblemId::Poisson2d | ProblemId::Hjb20d => x.iter().all(unit),
            ProblemId::Heat100d => sq_norm(&x[..self.spatial_dim]) <= 1.0 + 1e-12 && unit(&x[self.spatial_dim]),
        }
    }

    /// Residual per point from derivative estimates.
    pub fn residual(&self, x: &DenseTensor, est: &DerivativeEstimate) -> Result<Vec<f64>> {
        let f = self.residual_form();
        let n = x.rows();
        if est.laplacian.len() != n {
            return shape_err("estimate does not match points");
        }
        let dt = est.time_derivative.as_deref();
        if f.time != 0.0 && dt.is_none() {
            return shape_err("time derivative required");
        }
        Ok((0..n)
            .map(|p| {
                let mut r = f.laplacian * est.laplacian[p] + f.constant + self.source(x.row(p));
                if let Some(dt) = dt {
                    r += f.time * dt[p];
                }
                if f.grad_sq != 0.0 {
                    r += f.grad_sq * sq_norm(est.gradient.row(p));
                }
                r
            })
            .collect())
    }

    /// Gradients with respect to the estimate given `∂L/∂r`.
    pub fn residual_backprop(&self, est: &DerivativeEstimate, dr: &[f64]) -> EstimateGradients {
        let f = self.residual_form();
        let gradient = (f.grad_sq != 0.0).then(|| {
            let mut g = est.gradient.clone();
            for p in 0..g.rows() {
                g.row_mut(p).iter_mut().for_each(|v| *v *= 2.0 * f.grad_sq * dr[p]);
            }
            g
        });
        EstimateGradients {
            gradient,
            laplacian: Some(dr.iter().map(|d| f.laplacian * d).collect()),
            time_derivative: self.time_dependent.then(|| dr.iter().map(|d| f.time * d).collect()),
            value: None,
        }
    }

    /// Exact derivatives of a full-precision network in estimate form.
    pub fn exact_derivatives(&self, net: &PreparedNetwork, x: &DenseTensor) -> Result<DerivativeEstimate> {
        let mut dims = self.spatial_dims();
        dims.extend(self.time_dim());
        let (value, first, second) = net.forward_jets(x, &dims)?;
        let d = self.spatial_dim;
        let gradient = DenseTensor::from_fn(&[x.rows(), d], |k| first.at(k / d, k % d));
        let laplacian = (0..x.rows()).map(|p| second.row(p)[..d].iter().sum()).collect();
        let time_derivative = self.time_dependent.then(|| (0..x.rows()).map(|p| first.at(p, d)).collect());
        Ok(DerivativeEstimate {
            value,
            gradient,
            laplacian,
            time_derivative,
        })
    }

    /// Closed-form reference (Poisson, Heat) or its HJB counterpart
    /// [`hjb_closed_form`].
    pub fn analytic_solution(&self, x: &[f64]) -> f64 {
        match self.id {
            ProblemId::Poisson2d => 0.5 * (x[0] + x[1]).sin(),
            ProblemId::Heat100d => sq_norm(&x[..self.spatial_dim]) / (2.0 * HEAT_N) + x[self.spatial_dim],
            ProblemId::Hjb20d => hjb_closed_form(&x[..self.spatial_dim], x[self.spatial_dim]),
        }
    }

    /// Fixed evaluation set: a 101×101 grid for Poisson, otherwise 2048
    /// seeded interior points.
    pub fn eval_points(&self, seed: u64) -> DenseTensor {
        match self.id {
            ProblemId::Poisson2d => DenseTensor::from_fn(&[101 * 101, 2], |k| {
                let (p, c) = (k / 2, k % 2);
                let idx = if c == 0 { p / 101 } else { p % 101 };
                idx as f64 / 100.0
            }),
            _ => self.sample_interior(2048, &mut RngStream::new(seed, 0xE7A1)),
        }
    }

    /// Evaluation points and reference values. HJB references are Monte
    /// Carlo estimates cached under `cache_dir` when given.
    pub fn eval_set(&self, seed: u64, cache_dir: Option<&Path>) -> Result<EvalSet> {
        let points = self.eval_points(seed);
        let reference = match self.id {
            ProblemId::Hjb20d => {
                let cfg = self.hjb_reference;
                let path = cache_dir.map(|d| d.join(hjb_cache_name(seed, &cfg, points.rows())));
                match path.as_deref().and_then(|p| load_cache(p, points.rows())) {
                    Some(r) => r,
                    None => {
                        let r = hjb_monte_carlo(&points, self.spatial_dim, &cfg)?;
                        if let Some(p) = &path {
                            store_cache(p, &r)?;
                        }
                        r
                    }
                }
            }
            _ => (0..points.rows()).map(|p| self.analytic_solution(points.row(p))).collect(),
        };
        Ok(EvalSet { points, reference, seed })
    }
}

fn hjb_cache_name(seed: u64, cfg: &HjbReferenceConfig, n: usize) -> String {
    format!("hjb20d_eval{seed}_mc{}_draws{}_n{n}.ref", cfg.seed, cfg.draws)
}

fn load_cache(path: &Path, n: usize) -> Option<Vec<f64>> {
    let bytes = fs::read(path).ok()?;
    let t = read_dense(&mut bytes.as_slice()).ok()?;
    (t.shape() == [n] && t.check_finite().is_ok()).then(|| t.into_data())
}

fn store_cache(path: &Path, values: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    write_dense(&mut buf, &DenseTensor::new(vec![values.len()], values.to_vec())?)?;
    let tmp: PathBuf = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Cole–Hopf solution of the HJB problem,
/// `u = 2(1−t) − 2·ln E[exp(−½‖x + √2·W_{1−t}‖₁)]`, with the expectation
/// estimated from `draws` shared Gaussian vectors (common random numbers
/// across points). Points are `(x, t)` rows.
pub fn hjb_monte_carlo(points: &DenseTensor, d: usize, cfg: &HjbReferenceConfig) -> Result<Vec<f64>> {
    if cfg.draws < 2 {
        return param_err("HJB reference needs at least two draws");
    }
    if points.cols() != d + 1 {
        return shape_err("HJB points must be (x, t) rows");
    }
    let mut rng = RngStream::new(cfg.seed, 0x4A1B);
    let z: Vec<f64> = (0..cfg.draws * d).map(|_| rng.standard_normal()).collect();
    let mut out = Vec::with_capacity(points.rows());
    for p in 0..points.rows() {
        let row = points.row(p);
        let t = row[d];
        let s = (2.0 * (1.0 - t)).max(0.0).sqrt();
        let x = &row[..d];
        let exps: Vec<f64> = z
            .chunks_exact(d)
            .map(|zk| -0.5 * x.iter().zip(zk).map(|(a, b)| (a + s * b).abs()).sum::<f64>())
            .collect();
        out.push(2.0 * (1.0 - t) - 2.0 * log_mean_exp(&exps));
    }
    Ok(out)
}

/// Two independent half-sample estimates of `ln E[…]` and their standard
/// errors at one point, for self-consistency checks.
pub fn hjb_half_estimates(x: &[f64], t: f64, cfg: &HjbReferenceConfig) -> [(f64, f64); 2] {
    let mut rng = RngStream::new(cfg.seed, 0x4A1C);
    let s = (2.0 * (1.0 - t)).max(0.0).sqrt();
    let half = cfg.draws / 2;
    let mut est = |_| {
        let w: Vec<f64> = (0..half)
            .map(|_| {
                let l1: f64 = x.iter().map(|a| (a + s * rng.standard_normal()).abs()).sum();
                (-0.5 * l1).exp()
            })
            .collect();
        let n = w.len() as f64;
        let m = w.iter().sum::<f64>() / n;
        let v = w.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    };
    [est(0), est(1)]
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + (v.iter().map(|a| (a - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// The HJB expectation in closed form: coordinates are independent, and for
/// `Y ~ N(x, s²)`, `E[e^{−|Y|/2}] = e^{s²/8}[e^{−x/2}Φ(x/s − s/2) + e^{x/2}Φ(−x/s − s/2)]`.
pub fn hjb_closed_form(x: &[f64], t: f64) -> f64 {
    let s2 = 2.0 * (1.0 - t);
    if s2 <= 0.0 {
        return x.iter().map(|v| v.abs()).sum();
    }
    let s = s2.sqrt();
    let a = 0.5;
    let log_e: f64 = x
        .iter()
        .map(|&xi| {
            let l = a * a * s2 / 2.0;
            let p = (-a * xi).exp() * normal_cdf(xi / s - a * s);
            let m = (a * xi).exp() * normal_cdf(-xi / s - a * s);
            l + (p + m).ln()
        })
        .sum();
    s2 - 2.0 * log_e
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub points: DenseTensor,
    pub reference: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub l1_rel: f64,
    pub l2_rel: f64,
}

pub fn metrics(pred: &[f64], reference: &[f64]) -> Result<Metrics> {
    if pred.len() != reference.len() || pred.is_empty() {
        return shape_err("prediction and reference must be non-empty and equal length");
    }
    let n = pred.len() as f64;
    let (mut se, mut ae, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0);
    for (p, r) in pred.iter().zip(reference) {
        let e = p - r;
        se += e * e;
        ae += e.abs();
        r1 += r.abs();
        r2 += r * r;
    }
    if r1 == 0.0 {
        return Err(Error::InvalidParameter("reference is identically zero".into()));
    }
    Ok(Metrics {
        mse: se / n,
        l1_rel: ae / r1,
        l2_rel: (se / r2).sqrt(),
    })
}

pub fn evaluate_metrics(net: &PreparedNetwork, eval: &EvalSet) -> Result<Metrics> {
    let mut pred = Vec::with_capacity(eval.reference.len());
    let rows = eval.points.rows();
    let cols = eval.points.cols();
    for start in (0..rows).step_by(4096) {
        let end = (start + 4096).min(rows);
        let chunk = DenseTensor::matrix(end - start, cols, eval.points.data()[start * cols..end * cols].to_vec())?;
        let y = net.eval(&chunk)?;
        pred.extend(y.data().iter().step_by(y.cols()));
    }
    metrics(&pred, &eval.reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "w_c")]
    pub w_c: f64,
    #[serde(default = "w_b")]
    pub w_b: f64,
    #[serde(default)]
    pub w_d: f64,
    #[serde(default = "n_pts")]
    pub n_c: usize,
    #[serde(default = "n_pts")]
    pub n_b: usize,
    #[serde(default)]
    pub n_d: usize,
}

fn w_c() -> f64 {
    1.0
}

fn w_b() -> f64 {
    100.0
}

fn n_pts() -> usize {
    128
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_c: 1.0,
            w_b: 100.0,
            w_d: 0.0,
            n_c: 128,
            n_b: 128,
            n_d: 0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_c, self.w_b, self.w_d];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("loss weights must be nonnegative with one positive".into()));
        }
        if (self.w_c > 0.0 && self.n_c == 0) || (self.w_b > 0.0 && self.n_b == 0) {
            return Err(Error::Config("weighted loss terms need points".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub residual: f64,
    pub boundary: f64,
    pub data: f64,
}

pub fn total_loss(w: &LossWeights, parts: &LossParts) -> f64 {
    w.w_c * parts.residual + w.w_b * parts.boundary + w.w_d * parts.data
}

pub fn mean_square(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return param_err("loss over an empty point set");
    }
    Ok(v.iter().map(|r| r * r).sum::<f64>() / v.len() as f64)
}

/// Mean squared residual under the given derivative estimates.
pub fn residual_loss(problem: &PdeProblem, x: &DenseTensor, est: &DerivativeEstimate) -> Result<f64> {
    mean_square(&problem.residual(x, est)?)
}

/// Mean squared boundary mismatch of the network.
pub fn boundary_loss(net: &PreparedNetwork, x: &DenseTensor, targets: &[f64]) -> Result<f64> {
    if x.rows() != targets.len() {
        return shape_err("boundary targets do not match points");
    }
    let u = net.eval(x)?;
    let diff: Vec<f64> = u.data().iter().step_by(u.cols()).zip(targets).map(|(a, b)| a - b).collect();
    mean_square(&diff)
}

/// One metrics checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_residual: f64,
    pub loss_boundary: f64,
    pub mse: f64,
    pub l1_rel: f64,
    pub l2_rel: f64,
}

pub const METRICS_HEADER: &str = "iteration,loss_total,loss_residual,loss_boundary,mse,l1_rel,l2_rel";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.iteration, self.loss_total, self.loss_residual, self.loss_boundary, self.mse, self.l1_rel, self.l2_rel
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}
