//! Adam training loop, run records and the ablation matrix.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{self, Gradients, LayerKind, NetworkConfig, Parameters, PreparedNetwork, Propagation};
use crate::pde::{self, EvalSet, HjbReferenceConfig, LossParts, LossWeights, MetricsRow, PdeProblem, ProblemId};
use crate::perfmodel::{self, CostReport};
use crate::smx::PrecisionPolicy;
use crate::stein::{self, DeltaSet, PairEvaluations, SteinConfig};
use crate::tensor::{gemm_stats, reset_gemm_stats, DenseTensor, RngStream};
use crate::tt::ContractionScheme;

const STREAM_INIT: u64 = 1;
const STREAM_POINTS: u64 = 2;
const STREAM_DELTAS: u64 = 3;
const STREAM_CHECK: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub problem: ProblemId,
    pub network: NetworkConfig,
    /// `None` trains in full precision.
    #[serde(default)]
    pub precision: Option<PrecisionPolicy>,
    #[serde(default)]
    pub propagation: Propagation,
    #[serde(default)]
    pub stein: SteinConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eval_seed: u64,
    /// Upper bound on perturbed rows held in memory per chunk.
    #[serde(default = "default_chunk_rows")]
    pub chunk_rows: usize,
    #[serde(default = "yes")]
    pub gradient_check: bool,
    #[serde(default)]
    pub hjb_reference: HjbReferenceConfig,
}

fn default_iterations() -> usize {
    1000
}

fn default_eval_every() -> usize {
    100
}

fn default_chunk_rows() -> usize {
    8192
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// Benchmark defaults: 4-layer tanh MLPs of width 256 (Poisson, Heat)
    /// or 512 (HJB), full precision.
    pub fn preset(problem: ProblemId) -> Self {
        let p = pde::problem(problem);
        let width = if problem == ProblemId::Hjb20d { 512 } else { 256 };
        Self {
            problem,
            network: NetworkConfig::dense(4, width, p.input_dim()),
            precision: None,
            propagation: Propagation::DiffQuant,
            stein: SteinConfig::default(),
            loss: LossWeights::default(),
            optimizer: AdamConfig::default(),
            iterations: default_iterations(),
            eval_every: default_eval_every(),
            seed: 0,
            eval_seed: 0,
            chunk_rows: default_chunk_rows(),
            gradient_check: true,
            hjb_reference: HjbReferenceConfig::default(),
        }
    }

    pub fn problem_def(&self) -> PdeProblem {
        let mut p = pde::problem(self.problem);
        p.hjb_reference = self.hjb_reference;
        p
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.network.validate()?;
        self.network.tt_spec().map_err(cfg_err)?;
        let p = self.problem_def();
        if self.network.input_dim != p.input_dim() {
            return Err(Error::Config(format!(
                "{} needs input_dim {}, got {}",
                self.problem.name(),
                p.input_dim(),
                self.network.input_dim
            )));
        }
        if self.network.output_dim != 1 {
            return Err(Error::Config("scalar PDEs need output_dim 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        if self.eval_every == 0 || self.chunk_rows == 0 {
            return Err(Error::Config("eval_every and chunk_rows must be ≥ 1".into()));
        }
        if self.hjb_reference.draws < 2 {
            return Err(Error::Config("HJB reference needs at least two draws".into()));
        }
        self.stein.validate().map_err(cfg_err)?;
        if self.stein.separate_gradient && !p.uses_gradient() {
            return Err(Error::Config(format!(
                "stein.separate_gradient needs a gradient term, which {} lacks",
                self.problem.name()
            )));
        }
        self.loss.validate()
    }
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

pub fn adam_step(params: &mut Parameters, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let gs = grads.tensors();
    let shapes_match = |p: &Parameters| {
        let t = p.tensors();
        t.len() == gs.len() && t.iter().zip(&gs).all(|(a, b)| a.shape() == b.shape())
    };
    if !shapes_match(params) || !shapes_match(&state.m) || !shapes_match(&state.v) {
        return Err(Error::Shape("gradients do not match parameters".into()));
    }
    grads.check_finite()?;
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(&gs) {
        let it = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
        for (((p, m), v), &g) in it {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One iteration's samples: collocation points with their perturbations and
/// boundary points with targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub collocation: DenseTensor,
    pub deltas: DeltaSet,
    pub boundary: DenseTensor,
    pub targets: Vec<f64>,
}

pub fn sample_batch(
    cfg: &TrainConfig,
    problem: &PdeProblem,
    points: &mut RngStream,
    deltas: &mut RngStream,
) -> Result<Batch> {
    let collocation = problem.sample_interior(cfg.loss.n_c, points);
    let (boundary, targets) = problem.sample_boundary(cfg.loss.n_b, points);
    let deltas = DeltaSet::sample(
        &cfg.stein,
        problem.input_dim(),
        &problem.spatial_dims(),
        problem.time_dim(),
        cfg.loss.n_c,
        deltas,
    )?;
    Ok(Batch {
        collocation,
        deltas,
        boundary,
        targets,
    })
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub parts: LossParts,
    pub total: f64,
    pub grads: Option<Gradients>,
}

fn row_range(x: &DenseTensor, start: usize, end: usize) -> Result<DenseTensor> {
    let c = x.cols();
    DenseTensor::matrix(end - start, c, x.data()[start * c..end * c].to_vec())
}

fn column(v: Vec<f64>) -> Result<DenseTensor> {
    DenseTensor::matrix(v.len(), 1, v)
}

/// Stein residual loss plus boundary loss of `net` on `batch`, with
/// parameter gradients when `need_grad` is set. Collocation points are
/// processed in chunks of [`perfmodel::chunk_points`].
pub fn evaluate_loss(
    cfg: &TrainConfig,
    problem: &PdeProblem,
    net: &PreparedNetwork,
    batch: &Batch,
    need_grad: bool,
) -> Result<LossOutput> {
    let mut acc = need_grad.then(|| net.new_accumulator());
    let nc = batch.collocation.rows();
    let mut res_sq = 0.0;
    let step = perfmodel::chunk_points(cfg);
    for start in (0..nc).step_by(step) {
        let end = (start + step).min(nc);
        let x = row_range(&batch.collocation, start, end)?;
        let ds = batch.deltas.chunk(start..end)?;
        let (out, cache) = if ds.is_shared() {
            net.forward_shared(&x, ds.deltas(), cfg.propagation)?
        } else {
            net.forward_grouped(&x, ds.deltas(), ds.deltas(), ds.group(), cfg.propagation)?
        };
        let est = stein::estimate(&ds, &PairEvaluations::from(&out))?;
        let r = problem.residual(&x, &est)?;
        res_sq += r.iter().map(|v| v * v).sum::<f64>();
        if let Some(acc) = acc.as_mut() {
            let scale = 2.0 * cfg.loss.w_c / nc as f64;
            let dr: Vec<f64> = r.iter().map(|v| scale * v).collect();
            let up = problem.residual_backprop(&est, &dr);
            let d = stein::backprop(&ds, x.rows(), &up)?;
            net.backward_perturbed(&cache, &column(d.base)?, &column(d.plus)?, &column(d.minus)?, acc)?;
        }
    }

    let nb = batch.boundary.rows();
    let mut bnd_sq = 0.0;
    if nb > 0 {
        let (u, cache) = net.forward(&batch.boundary)?;
        let diff: Vec<f64> = u.data().iter().zip(&batch.targets).map(|(a, b)| a - b).collect();
        bnd_sq = diff.iter().map(|v| v * v).sum();
        if let Some(acc) = acc.as_mut() {
            let scale = 2.0 * cfg.loss.w_b / nb as f64;
            net.backward(&cache, &column(diff.iter().map(|v| scale * v).collect())?, acc)?;
        }
    }

    let parts = LossParts {
        residual: if nc > 0 { res_sq / nc as f64 } else { 0.0 },
        boundary: if nb > 0 { bnd_sq / nb as f64 } else { 0.0 },
        data: 0.0,
    };
    let grads = acc.map(|a| net.finish(&a)).transpose()?;
    Ok(LossOutput {
        total: pde::total_loss(&cfg.loss, &parts),
        parts,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Central differences on three random parameters against the analytic
/// gradient, on a small frozen batch in full precision.
pub fn gradient_check(cfg: &TrainConfig, params: &Parameters) -> Result<GradCheck> {
    let problem = cfg.problem_def();
    let mut small = cfg.clone();
    small.precision = None;
    small.loss.n_c = cfg.loss.n_c.min(4);
    small.loss.n_b = cfg.loss.n_b.min(4);
    let mut rng = RngStream::new(cfg.seed, STREAM_CHECK);
    let mut drng = rng.substream(1);
    let batch = sample_batch(&small, &problem, &mut rng, &mut drng)?;
    let loss = |p: &Parameters, grad: bool| {
        let net = PreparedNetwork::new(&small.network, p, None)?;
        evaluate_loss(&small, &problem, &net, &batch, grad)
    };
    let g = loss(params, true)?.grads.expect("gradients requested");
    let gt = g.tensors();
    let gmax = gt.iter().flat_map(|t| t.data()).fold(0.0f64, |a, v| a.max(v.abs()));
    let candidates: Vec<(usize, usize)> = gt
        .iter()
        .enumerate()
        .flat_map(|(t, x)| x.data().iter().enumerate().map(move |(i, v)| (t, i, *v)))
        .filter(|&(_, _, v)| v.abs() >= 1e-3 * gmax && gmax > 0.0)
        .map(|(t, i, _)| (t, i))
        .collect();
    let mut entries = Vec::new();
    for _ in 0..3.min(candidates.len()) {
        let (t, i) = candidates[(rng.next_u64() % candidates.len() as u64) as usize];
        let theta = params.tensors()[t].data()[i];
        let h = 1e-5 * theta.abs().max(1.0);
        let at = |s: f64| -> Result<f64> {
            let mut p = params.clone();
            p.tensors_mut()[t].data_mut()[i] = theta + s * h;
            Ok(loss(&p, false)?.total)
        };
        let numeric = (at(1.0)? - at(-1.0)?) / (2.0 * h);
        let analytic = gt[t].data()[i];
        let rel_err = (numeric - analytic).abs() / analytic.abs().max(numeric.abs());
        entries.push(GradCheckEntry {
            tensor: t,
            index: i,
            analytic,
            numeric,
            rel_err,
        });
    }
    let passed = !entries.is_empty() && entries.iter().all(|e| e.rel_err <= GRAD_CHECK_TOL);
    Ok(GradCheck { entries, passed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub metrics: Vec<MetricsRow>,
    /// Total loss at every iteration `0..=iterations`.
    pub losses: Vec<f64>,
    pub params: Parameters,
    pub wall_clock_secs: f64,
    pub cost: CostReport,
    /// MACs actually issued by the first training step.
    pub measured_step_macs: Option<u64>,
    pub grad_check: Option<GradCheck>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: ProblemId,
    pub seed: u64,
    pub iterations: usize,
    pub final_metrics: MetricsRow,
    pub wall_clock_secs: f64,
    pub measured_step_macs: Option<u64>,
    pub grad_check: Option<GradCheck>,
}

impl RunRecord {
    pub fn final_metrics(&self) -> &MetricsRow {
        self.metrics.last().expect("a run records at least one checkpoint")
    }

    pub fn losses_csv(&self) -> String {
        let mut s = String::from("iteration,loss_total\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:e}\n"));
        }
        s
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            problem: self.config.problem,
            seed: self.config.seed,
            iterations: self.config.iterations,
            final_metrics: *self.final_metrics(),
            wall_clock_secs: self.wall_clock_secs,
            measured_step_macs: self.measured_step_macs,
            grad_check: self.grad_check.clone(),
        }
    }

    /// Writes `config.json`, `metrics.csv`, `losses.csv`, `checkpoint.qpnn`,
    /// `cost.json` and `run.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)? + "\n")?;
        fs::write(dir.join("metrics.csv"), pde::metrics_csv(&self.metrics))?;
        fs::write(dir.join("losses.csv"), self.losses_csv())?;
        fs::write(dir.join("cost.json"), cost_json(&self.cost)?)?;
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(&self.summary())? + "\n")?;
        let mut buf = Vec::new();
        network::write_checkpoint(&mut buf, &self.config.network, &self.params)?;
        fs::write(dir.join("checkpoint.qpnn"), buf)?;
        Ok(())
    }
}

pub fn cost_json(cost: &CostReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(cost)? + "\n")
}

fn divergence(iteration: usize, detail: String) -> Error {
    Error::Divergence { iteration, detail }
}

/// Runs `cfg.iterations` Adam steps. Metrics are taken at iteration 0, every
/// `eval_every` iterations and at the end; `progress` sees each checkpoint.
/// HJB references are cached under `cache_dir` when given.
pub fn train(cfg: &TrainConfig, cache_dir: Option<&Path>, mut progress: impl FnMut(&MetricsRow)) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let problem = cfg.problem_def();
    let cost = perfmodel::count_costs(cfg)?;
    let eval: EvalSet = problem.eval_set(cfg.eval_seed, cache_dir)?;
    let mut params = Parameters::init(&cfg.network, &mut RngStream::new(cfg.seed, STREAM_INIT))?;
    let grad_check = (cfg.precision.is_none() && cfg.gradient_check && cfg.iterations > 0)
        .then(|| gradient_check(cfg, &params))
        .transpose()?;

    let mut points = RngStream::new(cfg.seed, STREAM_POINTS);
    let mut deltas = RngStream::new(cfg.seed, STREAM_DELTAS);
    let mut adam = AdamState::new(&params);
    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iterations + 1);
    let mut measured_step_macs = None;

    for it in 0..=cfg.iterations {
        let last = it == cfg.iterations;
        let batch = sample_batch(cfg, &problem, &mut points, &mut deltas)?;
        reset_gemm_stats();
        let net = PreparedNetwork::new(&cfg.network, &params, cfg.precision.as_ref())?;
        let out = evaluate_loss(cfg, &problem, &net, &batch, !last)?;
        if it == 0 && !last {
            measured_step_macs = Some(gemm_stats().macs);
        }
        if !out.total.is_finite() {
            return Err(divergence(
                it,
                format!(
                    "non-finite loss (residual {:e}, boundary {:e})",
                    out.parts.residual, out.parts.boundary
                ),
            ));
        }
        losses.push(out.total);
        if it % cfg.eval_every == 0 || last {
            let m = pde::evaluate_metrics(&net, &eval).map_err(|e| match e {
                Error::NonFinite { .. } => divergence(it, format!("non-finite prediction: {e}")),
                other => other,
            })?;
            let row = MetricsRow {
                iteration: it,
                loss_total: out.total,
                loss_residual: out.parts.residual,
                loss_boundary: out.parts.boundary,
                mse: m.mse,
                l1_rel: m.l1_rel,
                l2_rel: m.l2_rel,
            };
            progress(&row);
            metrics.push(row);
        }
        if let Some(g) = out.grads {
            adam_step(&mut params, &g, &mut adam, &cfg.optimizer).map_err(|e| match e {
                Error::NonFinite { index, value } => {
                    divergence(it, format!("non-finite gradient {value} at flat index {index}"))
                }
                other => other,
            })?;
        }
    }

    Ok(RunRecord {
        config: cfg.clone(),
        metrics,
        losses,
        params,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        cost,
        measured_step_macs,
        grad_check,
    })
}

/// Rows of the method comparison, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationRow {
    #[serde(rename = "AD-FP-FR")]
    AdFpFr,
    #[serde(rename = "SE-FP-FR")]
    SeFpFr,
    #[serde(rename = "SE-NaiveQuant")]
    SeNaiveQuant,
    #[serde(rename = "SE-DiffQuant")]
    SeDiffQuant,
    #[serde(rename = "SE-FP-R16")]
    SeFpTt,
    #[serde(rename = "SE-TT-Seq-DiffQuant")]
    SeTtSeqDiffQuant,
    #[serde(rename = "SE-TT-PRS-DiffQuant")]
    SeTtPrsDiffQuant,
}

impl AblationRow {
    pub const ALL: [Self; 7] = [
        Self::AdFpFr,
        Self::SeFpFr,
        Self::SeNaiveQuant,
        Self::SeDiffQuant,
        Self::SeFpTt,
        Self::SeTtSeqDiffQuant,
        Self::SeTtPrsDiffQuant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::AdFpFr => "AD-FP-FR",
            Self::SeFpFr => "SE-FP-FR",
            Self::SeNaiveQuant => "SE-NaiveQuant",
            Self::SeDiffQuant => "SE-DiffQuant",
            Self::SeFpTt => "SE-FP-R16",
            Self::SeTtSeqDiffQuant => "SE-TT-Seq-DiffQuant",
            Self::SeTtPrsDiffQuant => "SE-TT-PRS-DiffQuant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name().eq_ignore_ascii_case(s))
    }

    /// Training configuration for this row, or `None` for rows this crate
    /// does not train (automatic differentiation).
    pub fn configure(self, base: &TrainConfig, rank: usize) -> Option<TrainConfig> {
        let policy = base.precision.unwrap_or_default();
        let mut c = base.clone();
        c.network.layer_kind = LayerKind::FullRank;
        let tt = |scheme| LayerKind::Tt {
            rank,
            factors: None,
            scheme,
        };
        let (kind, precision, propagation) = match self {
            Self::AdFpFr => return None,
            Self::SeFpFr => (LayerKind::FullRank, None, Propagation::DiffQuant),
            Self::SeNaiveQuant => (LayerKind::FullRank, Some(policy), Propagation::NaiveQuant),
            Self::SeDiffQuant => (LayerKind::FullRank, Some(policy), Propagation::DiffQuant),
            Self::SeFpTt => (tt(ContractionScheme::Prs), None, Propagation::DiffQuant),
            Self::SeTtSeqDiffQuant => (tt(ContractionScheme::Sequential), Some(policy), Propagation::DiffQuant),
            Self::SeTtPrsDiffQuant => (tt(ContractionScheme::Prs), Some(policy), Propagation::DiffQuant),
        };
        c.network.layer_kind = kind;
        c.precision = precision;
        c.propagation = propagation;
        Some(c)
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub row: AblationRow,
    pub record: Option<RunRecord>,
}

pub const ABLATION_HEADER: &str = "method,status,seed,iterations,mse,l1_rel,l2_rel";

/// Trains every selected row with the base seed. Rows are returned in
/// table order regardless of selection order.
pub fn run_ablation(
    base: &TrainConfig,
    rows: &[AblationRow],
    rank: usize,
    cache_dir: Option<&Path>,
    mut progress: impl FnMut(AblationRow, &MetricsRow),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for row in AblationRow::ALL.into_iter().filter(|r| rows.contains(r)) {
        let record = match row.configure(base, rank) {
            Some(cfg) => Some(train(&cfg, cache_dir, |m| progress(row, m))?),
            None => None,
        };
        out.push(AblationResult { row, record });
    }
    Ok(out)
}

pub fn ablation_csv(base: &TrainConfig, results: &[AblationResult]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in results {
        match &r.record {
            Some(rec) => {
                let m = rec.final_metrics();
                s.push_str(&format!(
                    "{},ok,{},{},{:e},{:e},{:e}\n",
                    r.row.name(),
                    base.seed,
                    rec.config.iterations,
                    m.mse,
                    m.l1_rel,
                    m.l2_rel
                ));
            }
            None => s.push_str(&format!("{},not_run,{},{},,,\n", r.row.name(), base.seed, base.iterations)),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Parameters;

    fn tiny(problem: ProblemId) -> TrainConfig {
        let mut c = TrainConfig::preset(problem);
        c.network.width = 16;
        c.stein.samples = 16;
        c.loss.n_c = 8;
        c.loss.n_b = 8;
        c.iterations = 20;
        c.eval_every = 5;
        c.hjb_reference.draws = 500;
        c
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let cfg = NetworkConfig::dense(2, 4, 2);
        let mut p = Parameters::init(&cfg, &mut RngStream::new(0, 0)).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let z = p.zeros_like();
        adam_step(&mut p, &z, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let cfg = NetworkConfig::dense(2, 4, 2);
        let mut p = Parameters::init(&cfg, &mut RngStream::new(0, 0)).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.tensors_mut().into_iter().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 1.0));
        let mut st = AdamState::new(&p);
        let a = AdamConfig::default();
        adam_step(&mut p, &g, &mut st, &a).unwrap();
        let want = -a.lr / (1.0 + a.eps);
        for (x, y) in p.tensors().iter().zip(before.tensors()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite_and_mismatched() {
        let cfg = NetworkConfig::dense(2, 4, 2);
        let mut p = Parameters::init(&cfg, &mut RngStream::new(0, 0)).unwrap();
        let mut st = AdamState::new(&p);
        let mut g = p.zeros_like();
        g.tensors_mut()[0].data_mut()[0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, &AdamConfig::default()),
            Err(Error::NonFinite { .. })
        ));
        let other = Parameters::init(&NetworkConfig::dense(2, 5, 2), &mut RngStream::new(0, 0)).unwrap();
        assert!(adam_step(&mut p, &other, &mut st, &AdamConfig::default()).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c: TrainConfig = serde_json::from_str(
            r#"{"problem": "poisson2d", "network": {"depth": 4, "width": 32, "input_dim": 2}}"#,
        )
        .unwrap();
        assert_eq!(c.iterations, 1000);
        assert_eq!(c.eval_every, 100);
        assert_eq!(c.optimizer, AdamConfig::default());
        assert_eq!(c.stein.samples, 512);
        assert_eq!(c.loss.w_b, 100.0);
        c.validate().unwrap();
        let bad = r#"{"problem": "poisson2d", "network": {"depth": 4, "width": 32, "input_dim": 2}, "lr": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(bad).is_err());
        let mut c2 = c.clone();
        c2.network.input_dim = 3;
        assert!(matches!(c2.validate(), Err(Error::Config(_))));
        let mut c3 = c.clone();
        c3.optimizer.lr = 0.0;
        assert!(matches!(c3.validate(), Err(Error::Config(_))));
        let mut c4 = c;
        c4.stein.sigma = -1.0;
        assert!(matches!(c4.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_iterations_reports_init() {
        let mut c = tiny(ProblemId::Poisson2d);
        c.iterations = 0;
        let r = train(&c, None, |_| {}).unwrap();
        assert_eq!(r.metrics.len(), 1);
        assert_eq!(r.metrics[0].iteration, 0);
        let init = Parameters::init(&c.network, &mut RngStream::new(c.seed, STREAM_INIT)).unwrap();
        assert_eq!(r.params, init);
        assert!(r.grad_check.is_none());
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_on_schedule() {
        let c = tiny(ProblemId::Poisson2d);
        let a = train(&c, None, |_| {}).unwrap();
        let b = train(&c, None, |_| {}).unwrap();
        assert_eq!(pde::metrics_csv(&a.metrics), pde::metrics_csv(&b.metrics));
        assert_eq!(a.params, b.params);
        let its: Vec<usize> = a.metrics.iter().map(|m| m.iteration).collect();
        assert_eq!(its, vec![0, 5, 10, 15, 20]);
        assert_eq!(a.losses.len(), 21);
        assert!(a.grad_check.as_ref().unwrap().passed, "{:?}", a.grad_check);
    }

    #[test]
    fn gradient_matches_finite_differences_for_every_problem() {
        for id in [ProblemId::Poisson2d, ProblemId::Hjb20d, ProblemId::Heat100d] {
            let mut c = tiny(id);
            c.stein.share_deltas = id != ProblemId::Heat100d;
            let p = Parameters::init(&c.network, &mut RngStream::new(3, 0)).unwrap();
            let g = gradient_check(&c, &p).unwrap();
            assert_eq!(g.entries.len(), 3);
            assert!(g.passed, "{id:?}: {g:?}");
        }
    }

    #[test]
    fn separate_gradient_rows_train_and_check() {
        let mut c = tiny(ProblemId::Hjb20d);
        c.stein.separate_gradient = true;
        let p = Parameters::init(&c.network, &mut RngStream::new(3, 0)).unwrap();
        assert!(gradient_check(&c, &p).unwrap().passed);
        c.iterations = 1;
        let r = train(&c, None, |_| {}).unwrap();
        assert_eq!(r.measured_step_macs, Some(r.cost.macs_se_total));
        let mut poisson = tiny(ProblemId::Poisson2d);
        poisson.stein.separate_gradient = true;
        assert!(matches!(poisson.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tt_gradient_matches_finite_differences() {
        let mut c = tiny(ProblemId::Poisson2d);
        c.network.layer_kind = LayerKind::Tt {
            rank: 2,
            factors: None,
            scheme: ContractionScheme::Prs,
        };
        let p = Parameters::init(&c.network, &mut RngStream::new(4, 0)).unwrap();
        assert!(gradient_check(&c, &p).unwrap().passed);
    }

    #[test]
    fn chunking_does_not_change_loss_or_gradients() {
        let mut c = tiny(ProblemId::Hjb20d);
        let problem = c.problem_def();
        let p = Parameters::init(&c.network, &mut RngStream::new(5, 0)).unwrap();
        let net = PreparedNetwork::new(&c.network, &p, None).unwrap();
        let batch = sample_batch(&c, &problem, &mut RngStream::new(6, 0), &mut RngStream::new(7, 0)).unwrap();
        let whole = evaluate_loss(&c, &problem, &net, &batch, true).unwrap();
        c.chunk_rows = 3 * 32;
        let parts = evaluate_loss(&c, &problem, &net, &batch, true).unwrap();
        assert!((whole.total - parts.total).abs() <= 1e-12 * whole.total.abs());
        let (g1, g2) = (whole.grads.unwrap(), parts.grads.unwrap());
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn measured_macs_match_cost_model() {
        let mut cases = Vec::new();
        for id in [ProblemId::Poisson2d, ProblemId::Hjb20d] {
            cases.push(tiny(id));
        }
        let mut naive = tiny(ProblemId::Poisson2d);
        naive.precision = Some(PrecisionPolicy::default());
        naive.propagation = Propagation::NaiveQuant;
        cases.push(naive);
        for scheme in [ContractionScheme::Prs, ContractionScheme::Sequential] {
            let mut t = tiny(ProblemId::Heat100d);
            t.network.layer_kind = LayerKind::Tt {
                rank: 3,
                factors: None,
                scheme,
            };
            t.precision = Some(PrecisionPolicy::default());
            t.stein.share_deltas = false;
            t.chunk_rows = 50;
            cases.push(t);
        }
        for mut c in cases {
            c.iterations = 1;
            let r = train(&c, None, |_| {}).unwrap();
            assert_eq!(r.measured_step_macs, Some(r.cost.macs_se_total), "{:?}", c.network.layer_kind);
        }
    }

    #[test]
    fn ablation_rows_configure_as_named() {
        let base = tiny(ProblemId::Poisson2d);
        assert!(AblationRow::AdFpFr.configure(&base, 16).is_none());
        let n = AblationRow::SeNaiveQuant.configure(&base, 16).unwrap();
        assert_eq!(n.propagation, Propagation::NaiveQuant);
        assert!(n.precision.is_some());
        let s = AblationRow::SeTtSeqDiffQuant.configure(&base, 16).unwrap();
        assert_eq!(s.network.scheme(), ContractionScheme::Sequential);
        let mut q = base.clone();
        q.precision = Some(PrecisionPolicy::default());
        assert_eq!(AblationRow::SeFpFr.configure(&q, 16).unwrap().precision, None);
        assert_eq!(AblationRow::parse("se-diffquant"), Some(AblationRow::SeDiffQuant));
        assert_eq!(AblationRow::ALL.map(AblationRow::name)[4], "SE-FP-R16");
    }

    #[test]
    fn ablation_table_keeps_order_and_seed() {
        let mut base = tiny(ProblemId::Poisson2d);
        base.iterations = 2;
        base.seed = 11;
        let res = run_ablation(&base, &[AblationRow::SeDiffQuant, AblationRow::AdFpFr], 2, None, |_, _| {}).unwrap();
        let csv = ablation_csv(&base, &res);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], ABLATION_HEADER);
        assert!(lines[1].starts_with("AD-FP-FR,not_run,11,"));
        assert!(lines[2].starts_with("SE-DiffQuant,ok,11,2,"));
    }

    #[test]
    fn divergence_is_reported() {
        let mut c = tiny(ProblemId::Poisson2d);
        c.optimizer.lr = 1e300;
        c.gradient_check = false;
        match train(&c, None, |_| {}) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn run_record_directory() {
        let c = tiny(ProblemId::Heat100d);
        let r = train(&c, None, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + r.metrics.len());
        let back: TrainConfig = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(back, c);
        let cost = fs::read_to_string(dir.path().join("cost.json")).unwrap();
        assert_eq!(cost, cost_json(&perfmodel::count_costs(&c).unwrap()).unwrap());
        let bytes = fs::read(dir.path().join("checkpoint.qpnn")).unwrap();
        let (nc, p) = network::read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!((nc, p), (c.network.clone(), r.params.clone()));
    }
}
