//! Tanh MLP with dense or TT hidden layers.
//!
//! Master parameters stay in `f64`; a [`PreparedNetwork`] snapshots them for
//! one optimizer step, quantizing weights once when a [`PrecisionPolicy`] is
//! active. Bias addition and tanh always run in full precision.
//!
//! Perturbed evaluations carry a base batch plus two delta streams per layer:
//! for an affine layer `Y = XWᵀ + b`, `Δ⁺ = δ⁺Wᵀ` and `Δ⁻ = δ⁻Wᵀ`; after tanh
//! the deltas are re-derived as `tanh(Y + Δ⁺) − tanh(Y)` and
//! `tanh(Y) − tanh(Y − Δ⁻)`. Under [`Propagation::DiffQuant`] the small delta
//! tensors are quantized on their own scale; [`Propagation::NaiveQuant`]
//! quantizes `X + δ` jointly and subtracts.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::smx::{self, PrecisionPolicy, QuantSpec, SmxTensor};
use crate::tensor::{matmul, read_dense, write_dense, DenseTensor, RngStream};
use crate::tt::{self, ContractionScheme, PreparedTt, TtAccumulator, TtCores, TtLayerSpec};

#[inline(always)]
fn expm1_nonneg(y: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let k = (y * std::f64::consts::LOG2_E).round();
    let r = (y - k * LN2_HI) - k * LN2_LO;
    let mut p: f64 = 1.0 / 87_178_291_200.0;
    for c in [
        1.0 / 6_227_020_800.0,
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
    ] {
        p = p.mul_add(r, c);
    }
    let em = (p * r).mul_add(r, r);
    let two_k = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    two_k.mul_add(em, two_k - 1.0)
}

/// Hyperbolic tangent, within a few ulp of `f64::tanh`.
#[inline]
pub fn tanh(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let a = x.abs().min(40.0);
    let e = expm1_nonneg(2.0 * a);
    (e / (e + 2.0)).copysign(x)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    FullRank,
    /// TT hidden layers with uniform rank. `factors` splits the width
    /// (defaults to a balanced two-way split) and is used on both sides.
    Tt {
        rank: usize,
        #[serde(default)]
        factors: Option<Vec<usize>>,
        #[serde(default = "default_scheme")]
        scheme: ContractionScheme,
    },
}

fn default_scheme() -> ContractionScheme {
    ContractionScheme::Prs
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of affine layers.
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    #[serde(default = "one")]
    pub output_dim: usize,
    #[serde(default = "full_rank")]
    pub layer_kind: LayerKind,
}

fn one() -> usize {
    1
}

fn full_rank() -> LayerKind {
    LayerKind::FullRank
}

/// Two factors `[a, w/a]` with `a` the largest divisor of `w` not above `√w`.
pub fn balanced_factors(w: usize) -> Vec<usize> {
    let a = (1..=w).take_while(|a| a * a <= w).filter(|a| w % a == 0).last().unwrap_or(1);
    vec![a, w / a]
}

impl NetworkConfig {
    pub fn dense(depth: usize, width: usize, input_dim: usize) -> Self {
        Self {
            depth,
            width,
            input_dim,
            output_dim: 1,
            layer_kind: LayerKind::FullRank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be ≥ 2, got {}", self.depth)));
        }
        if self.width == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if let LayerKind::Tt { rank, factors, .. } = &self.layer_kind {
            if *rank == 0 {
                return Err(Error::Config("TT rank must be positive".into()));
            }
            if let Some(f) = factors {
                if f.is_empty() || f.iter().product::<usize>() != self.width {
                    return Err(Error::Config(format!(
                        "TT factors {f:?} do not multiply to width {}",
                        self.width
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(in, out)` for every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let i = if l == 0 { self.input_dim } else { self.width };
                let o = if l + 1 == self.depth { self.output_dim } else { self.width };
                (i, o)
            })
            .collect()
    }

    /// TT layout of the hidden×hidden layers, if any.
    pub fn tt_spec(&self) -> Result<Option<TtLayerSpec>> {
        match &self.layer_kind {
            LayerKind::FullRank => Ok(None),
            LayerKind::Tt { rank, factors, .. } => {
                let f = factors.clone().unwrap_or_else(|| balanced_factors(self.width));
                Ok(Some(TtLayerSpec::uniform(f.clone(), f, *rank)?))
            }
        }
    }

    pub fn scheme(&self) -> ContractionScheme {
        match &self.layer_kind {
            LayerKind::FullRank => ContractionScheme::Prs,
            LayerKind::Tt { scheme, .. } => *scheme,
        }
    }

    pub fn is_tt_layer(&self, l: usize) -> bool {
        matches!(self.layer_kind, LayerKind::Tt { .. }) && l > 0 && l + 1 < self.depth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Dense { weight: DenseTensor, bias: DenseTensor },
    Tt { cores: TtCores, bias: DenseTensor },
}

impl LayerParams {
    pub fn bias(&self) -> &DenseTensor {
        match self {
            Self::Dense { bias, .. } | Self::Tt { bias, .. } => bias,
        }
    }

    /// Effective `out × in` weight matrix.
    pub fn dense_weight(&self) -> Result<DenseTensor> {
        match self {
            Self::Dense { weight, .. } => Ok(weight.clone()),
            Self::Tt { cores, .. } => tt::reconstruct_full(cores),
        }
    }
}

/// Master parameters; also used for gradients of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    layers: Vec<LayerParams>,
}

pub type Gradients = Parameters;

impl Parameters {
    pub fn new(cfg: &NetworkConfig, layers: Vec<LayerParams>) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.layer_dims();
        if layers.len() != dims.len() {
            return shape_err(format!("expected {} layers, got {}", dims.len(), layers.len()));
        }
        for (l, (p, &(i, o))) in layers.iter().zip(&dims).enumerate() {
            match p {
                LayerParams::Dense { weight, .. } if weight.shape() != [o, i] => {
                    return shape_err(format!("layer {l} weight {:?}, want [{o}, {i}]", weight.shape()))
                }
                LayerParams::Tt { cores, .. }
                    if cores.spec().out_dim() != o || cores.spec().in_dim() != i =>
                {
                    return shape_err(format!("layer {l} TT spec does not map {i} → {o}"))
                }
                _ => {}
            }
            if p.bias().shape() != [o] {
                return shape_err(format!("layer {l} bias {:?}, want [{o}]", p.bias().shape()));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-normal dense weights, TT cores from [`tt::tt_init`], zero biases.
    pub fn init(cfg: &NetworkConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let tt_spec = cfg.tt_spec()?;
        let layers = cfg
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| {
                let bias = DenseTensor::zeros(&[o]);
                if cfg.is_tt_layer(l) {
                    let cores = tt::tt_init(tt_spec.as_ref().unwrap(), rng)?;
                    Ok(LayerParams::Tt { cores, bias })
                } else {
                    let std = (2.0 / (i + o) as f64).sqrt();
                    let weight = DenseTensor::from_fn(&[o, i], |_| std * rng.standard_normal());
                    Ok(LayerParams::Dense { weight, bias })
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
        z
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&DenseTensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::Dense { weight, bias } => out.extend([weight, bias]),
                LayerParams::Tt { cores, bias } => {
                    out.extend(cores.cores());
                    out.push(bias);
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseTensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::Dense { weight, bias } => out.extend([weight, bias]),
                LayerParams::Tt { cores, bias } => {
                    out.extend(cores.cores_mut().iter_mut());
                    out.push(bias);
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        let mut offset = 0;
        for t in self.tensors() {
            if let Err(Error::NonFinite { index, value }) = t.check_finite() {
                return Err(Error::NonFinite {
                    index: offset + index,
                    value,
                });
            }
            offset += t.len();
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

const NET_MAGIC: &[u8; 4] = b"QPNN";
const NET_VERSION: u16 = 1;

/// Config JSON header followed by per-layer tensor dumps.
pub fn write_checkpoint(w: &mut impl Write, cfg: &NetworkConfig, params: &Parameters) -> Result<()> {
    let json = serde_json::to_vec(cfg)?;
    w.write_all(NET_MAGIC)?;
    w.write_all(&NET_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for l in &params.layers {
        match l {
            LayerParams::Dense { weight, bias } => {
                w.write_all(&[0])?;
                write_dense(w, weight)?;
                write_dense(w, bias)?;
            }
            LayerParams::Tt { cores, bias } => {
                w.write_all(&[1])?;
                tt::write_checkpoint(w, cores)?;
                write_dense(w, bias)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(NetworkConfig, Parameters)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NET_MAGIC {
        return Err(Error::Format("not a network checkpoint".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    if u16::from_le_bytes(b2) != NET_VERSION {
        return Err(Error::Format("unsupported network checkpoint version".into()));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    if len > 1 << 20 {
        return Err(Error::Format("oversized config header".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let cfg: NetworkConfig = serde_json::from_slice(&json)?;
    cfg.validate()?;
    let mut layers = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        layers.push(match tag[0] {
            0 => LayerParams::Dense {
                weight: read_dense(r)?,
                bias: read_dense(r)?,
            },
            1 => LayerParams::Tt {
                cores: tt::read_checkpoint(r)?,
                bias: read_dense(r)?,
            },
            t => return Err(Error::Format(format!("unknown layer tag {t}"))),
        });
    }
    let params = Parameters::new(&cfg, layers)?;
    params.check_finite()?;
    Ok((cfg, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    #[default]
    DiffQuant,
    NaiveQuant,
}

#[derive(Debug, Clone)]
enum PreparedLayer {
    Dense {
        w: DenseTensor,
        qw: Option<SmxTensor>,
        b: Vec<f64>,
    },
    Tt {
        tt: PreparedTt,
        b: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
enum LayerAcc {
    Dense { dw: DenseTensor, db: Vec<f64> },
    Tt { acc: TtAccumulator, db: Vec<f64> },
}

/// Parameter-gradient sums across any number of forward/backward chunks.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    layers: Vec<LayerAcc>,
}

/// Layer inputs retained by [`PreparedNetwork::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<DenseTensor>,
}

impl ForwardCache {
    pub fn layer_inputs(&self) -> &[DenseTensor] {
        &self.inputs
    }
}

/// One layer's input in perturbed form: a base batch of `P` rows and delta
/// streams of `P·G` rows, row `p·G + i` belonging to base row `p`. At the
/// input layer the deltas may instead be `G` rows shared by every base row,
/// with `δ⁻ = δ⁺`.
#[derive(Debug, Clone)]
pub struct PerturbedBatch {
    pub base: DenseTensor,
    pub plus: DenseTensor,
    pub minus: DenseTensor,
    pub group: usize,
    pub shared: bool,
}

impl PerturbedBatch {
    fn delta_row(&self, p: usize, i: usize) -> usize {
        if self.shared {
            i
        } else {
            p * self.group + i
        }
    }
}

/// Network output triple `(u(x), u(x+δ) − u(x), u(x) − u(x−δ))`; the delta
/// tensors have `P·G` rows.
#[derive(Debug, Clone)]
pub struct PerturbedOutput {
    pub base: DenseTensor,
    pub plus: DenseTensor,
    pub minus: DenseTensor,
    pub group: usize,
}

#[derive(Debug, Clone)]
pub struct PerturbedCache {
    inputs: Vec<PerturbedBatch>,
}

impl PerturbedCache {
    pub fn layer_inputs(&self) -> &[PerturbedBatch] {
        &self.inputs
    }
}

fn add_bias(y: &mut DenseTensor, b: &[f64]) {
    let cols = b.len();
    for row in y.data_mut().chunks_exact_mut(cols) {
        row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
}

fn col_sums(y: &DenseTensor, acc: &mut [f64]) {
    let cols = acc.len();
    for row in y.data().chunks_exact(cols) {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
}

/// Row `p·G + i` of the result is `base[p] + sign·delta[row(p, i)]`.
fn expand(batch: &PerturbedBatch, minus: bool) -> DenseTensor {
    let (p_rows, cols, g) = (batch.base.rows(), batch.base.cols(), batch.group);
    let delta = if minus { &batch.minus } else { &batch.plus };
    let sign = if minus { -1.0 } else { 1.0 };
    let mut out = DenseTensor::zeros(&[p_rows * g, cols]);
    for p in 0..p_rows {
        let base = batch.base.row(p);
        for i in 0..g {
            let d = delta.row(batch.delta_row(p, i));
            let o = out.row_mut(p * g + i);
            for c in 0..cols {
                o[c] = base[c] + sign * d[c];
            }
        }
    }
    out
}

/// Snapshot of a network for one step: weights quantized on read.
#[derive(Debug, Clone)]
pub struct PreparedNetwork {
    layers: Vec<PreparedLayer>,
    policy: Option<PrecisionPolicy>,
    dims: Vec<(usize, usize)>,
}

impl PreparedNetwork {
    pub fn new(
        cfg: &NetworkConfig,
        params: &Parameters,
        policy: Option<&PrecisionPolicy>,
    ) -> Result<Self> {
        let layers = params
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::Dense { weight, bias } => Ok(PreparedLayer::Dense {
                    qw: policy.map(|p| smx::quantize(weight, p.weight_bits)).transpose()?,
                    w: weight.clone(),
                    b: bias.data().to_vec(),
                }),
                LayerParams::Tt { cores, bias } => Ok(PreparedLayer::Tt {
                    tt: PreparedTt::new(cores, cfg.scheme(), policy)?,
                    b: bias.data().to_vec(),
                }),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            policy: policy.copied(),
            dims: cfg.layer_dims(),
        })
    }

    pub fn policy(&self) -> Option<&PrecisionPolicy> {
        self.policy.as_ref()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0].0
    }

    fn act_q(&self) -> Option<QuantSpec> {
        self.policy.map(|p| p.activation_bits)
    }

    fn pert_q(&self) -> Option<QuantSpec> {
        self.policy.map(|p| p.perturbation())
    }

    fn grad_q(&self) -> Option<QuantSpec> {
        self.policy.map(|p| p.gradient_bits)
    }

    /// `x·Wᵀ` without bias.
    fn linear(&self, l: usize, x: &DenseTensor, x_q: Option<QuantSpec>) -> Result<DenseTensor> {
        match &self.layers[l] {
            PreparedLayer::Dense { w, qw, .. } => match (qw, x_q) {
                (Some(qw), Some(xq)) => smx::smx_matmul(&smx::quantize(x, xq)?, qw, false, true),
                _ => matmul(x, w, false, true),
            },
            PreparedLayer::Tt { tt, .. } => tt.apply(x, x_q),
        }
    }

    fn affine(&self, l: usize, x: &DenseTensor, x_q: Option<QuantSpec>) -> Result<DenseTensor> {
        let mut y = self.linear(l, x, x_q)?;
        add_bias(&mut y, self.bias(l));
        Ok(y)
    }

    fn bias(&self, l: usize) -> &[f64] {
        match &self.layers[l] {
            PreparedLayer::Dense { b, .. } | PreparedLayer::Tt { b, .. } => b,
        }
    }

    /// `dy·W`.
    fn linear_grad(&self, l: usize, dy: &DenseTensor) -> Result<DenseTensor> {
        match &self.layers[l] {
            PreparedLayer::Dense { w, qw, .. } => match (qw, self.grad_q()) {
                (Some(qw), Some(g)) => smx::smx_matmul(&smx::quantize(dy, g)?, qw, false, false),
                _ => matmul(dy, w, false, false),
            },
            PreparedLayer::Tt { tt, .. } => tt.input_grad(dy),
        }
    }

    /// `dW += dyᵀ·x`.
    fn weight_grad(
        &self,
        l: usize,
        x: &DenseTensor,
        x_q: Option<QuantSpec>,
        dy: &DenseTensor,
        acc: &mut GradAccumulator,
    ) -> Result<()> {
        let x_q = self.policy.and(x_q);
        match (&self.layers[l], &mut acc.layers[l]) {
            (PreparedLayer::Dense { .. }, LayerAcc::Dense { dw, .. }) => {
                let g = match (self.grad_q(), x_q) {
                    (Some(gq), Some(xq)) => smx::quantized_matmul(dy, gq, x, xq, true, false)?,
                    _ => matmul(dy, x, true, false)?,
                };
                dw.add_assign(&g)
            }
            (PreparedLayer::Tt { tt, .. }, LayerAcc::Tt { acc, .. }) => tt.accumulate(x, x_q, dy, acc),
            _ => unreachable!("accumulator built from this network"),
        }
    }

    fn bias_grad(&self, l: usize, dy: &DenseTensor, acc: &mut GradAccumulator) {
        match &mut acc.layers[l] {
            LayerAcc::Dense { db, .. } | LayerAcc::Tt { db, .. } => col_sums(dy, db),
        }
    }

    pub fn new_accumulator(&self) -> GradAccumulator {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                PreparedLayer::Dense { w, b, .. } => LayerAcc::Dense {
                    dw: DenseTensor::zeros(w.shape()),
                    db: vec![0.0; b.len()],
                },
                PreparedLayer::Tt { tt, b } => LayerAcc::Tt {
                    acc: tt.new_accumulator(),
                    db: vec![0.0; b.len()],
                },
            })
            .collect();
        GradAccumulator { layers }
    }

    /// Converts accumulated sums into parameter-shaped gradients.
    pub fn finish(&self, acc: &GradAccumulator) -> Result<Gradients> {
        let layers = self
            .layers
            .iter()
            .zip(&acc.layers)
            .map(|(l, a)| match (l, a) {
                (PreparedLayer::Dense { .. }, LayerAcc::Dense { dw, db }) => Ok(LayerParams::Dense {
                    weight: dw.clone(),
                    bias: DenseTensor::new(vec![db.len()], db.clone())?,
                }),
                (PreparedLayer::Tt { tt, .. }, LayerAcc::Tt { acc, db }) => Ok(LayerParams::Tt {
                    cores: TtCores::new(tt.spec().clone(), tt.core_grads(acc)?)?,
                    bias: DenseTensor::new(vec![db.len()], db.clone())?,
                }),
                _ => unreachable!("accumulator built from this network"),
            })
            .collect::<Result<_>>()?;
        Ok(Parameters { layers })
    }

    fn check_input(&self, x: &DenseTensor) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.input_dim() {
            return shape_err(format!(
                "network expects batch × {}, got {:?}",
                self.input_dim(),
                x.shape()
            ));
        }
        x.check_finite()
    }

    /// Forward pass returning `batch × output_dim` and the layer inputs.
    pub fn forward(&self, x: &DenseTensor) -> Result<(DenseTensor, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.depth());
        let mut h = x.clone();
        for l in 0..self.depth() {
            let mut y = self.affine(l, &h, self.act_q())?;
            inputs.push(h);
            if l + 1 < self.depth() {
                y.data_mut().iter_mut().for_each(|v| *v = tanh(*v));
            }
            h = y;
        }
        Ok((h, ForwardCache { inputs }))
    }

    /// Output only.
    pub fn eval(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Reverse pass for upstream `du = ∂L/∂u`; adds parameter gradients to
    /// `acc` and returns `∂L/∂x`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        du: &DenseTensor,
        acc: &mut GradAccumulator,
    ) -> Result<DenseTensor> {
        if cache.inputs.len() != self.depth() {
            return shape_err("forward cache does not belong to this network");
        }
        let rows = cache.inputs[0].rows();
        if du.shape() != [rows, self.dims[self.depth() - 1].1] {
            return shape_err(format!("upstream gradient {:?} does not match cache", du.shape()));
        }
        let mut dy = du.clone();
        for l in (0..self.depth()).rev() {
            let x = &cache.inputs[l];
            self.weight_grad(l, x, self.act_q(), &dy, acc)?;
            self.bias_grad(l, &dy, acc);
            let mut dx = self.linear_grad(l, &dy)?;
            if l > 0 {
                dx.data_mut().iter_mut().zip(x.data()).for_each(|(g, t)| *g *= 1.0 - t * t);
            }
            dy = dx;
        }
        Ok(dy)
    }

    /// Perturbation-pair forward with per-row input deltas
    /// (`plus`/`minus` have the same shape as `x`).
    pub fn forward_diffquant(
        &self,
        x: &DenseTensor,
        plus: &DenseTensor,
        minus: &DenseTensor,
    ) -> Result<(PerturbedOutput, PerturbedCache)> {
        self.forward_pairs(x, plus, minus, Propagation::DiffQuant)
    }

    pub fn forward_naivequant(
        &self,
        x: &DenseTensor,
        plus: &DenseTensor,
        minus: &DenseTensor,
    ) -> Result<(PerturbedOutput, PerturbedCache)> {
        self.forward_pairs(x, plus, minus, Propagation::NaiveQuant)
    }

    fn forward_pairs(
        &self,
        x: &DenseTensor,
        plus: &DenseTensor,
        minus: &DenseTensor,
        mode: Propagation,
    ) -> Result<(PerturbedOutput, PerturbedCache)> {
        if plus.shape() != x.shape() || minus.shape() != x.shape() {
            return shape_err("input deltas must match the input batch");
        }
        self.forward_grouped(x, plus, minus, 1, mode)
    }

    /// `group` independent delta pairs per base row: `plus`/`minus` have
    /// `P·group` rows, row `p·group + i` perturbing `x_p`.
    pub fn forward_grouped(
        &self,
        x: &DenseTensor,
        plus: &DenseTensor,
        minus: &DenseTensor,
        group: usize,
        mode: Propagation,
    ) -> Result<(PerturbedOutput, PerturbedCache)> {
        let want = [x.rows() * group, self.input_dim()];
        if group == 0 || plus.shape() != want || minus.shape() != want {
            return shape_err(format!(
                "grouped deltas must be {want:?}, got {:?} / {:?}",
                plus.shape(),
                minus.shape()
            ));
        }
        self.forward_perturbed(
            PerturbedBatch {
                base: x.clone(),
                plus: plus.clone(),
                minus: minus.clone(),
                group,
                shared: false,
            },
            mode,
        )
    }

    /// Every base row perturbed by every row of `deltas` (`G × input_dim`),
    /// antithetically: output row `p·G + i` holds the pair for `x_p ± δ_i`.
    pub fn forward_shared(
        &self,
        x: &DenseTensor,
        deltas: &DenseTensor,
        mode: Propagation,
    ) -> Result<(PerturbedOutput, PerturbedCache)> {
        if deltas.ndim() != 2 || deltas.cols() != self.input_dim() || deltas.rows() == 0 {
            return shape_err(format!("deltas {:?} do not match input width", deltas.shape()));
        }
        self.forward_perturbed(
            PerturbedBatch {
                base: x.clone(),
                plus: deltas.clone(),
                minus: deltas.clone(),
                group: deltas.rows(),
                shared: true,
            },
            mode,
        )
    }

    fn forward_perturbed(
        &self,
        input: PerturbedBatch,
        mode: Propagation,
    ) -> Result<(PerturbedOutput, PerturbedCache)> {
        self.check_input(&input.base)?;
        input.plus.check_finite()?;
        input.minus.check_finite()?;
        let mode = if self.policy.is_none() {
            Propagation::DiffQuant
        } else {
            mode
        };
        let mut inputs = Vec::with_capacity(self.depth());
        let mut cur = input;
        for l in 0..self.depth() {
            let y = self.affine(l, &cur.base, self.act_q())?;
            let (dp, dm) = match mode {
                Propagation::DiffQuant => {
                    let dp = self.linear(l, &cur.plus, self.pert_q())?;
                    let dm = if cur.shared {
                        dp.clone()
                    } else {
                        self.linear(l, &cur.minus, self.pert_q())?
                    };
                    (dp, dm)
                }
                Propagation::NaiveQuant => {
                    let yp = self.affine(l, &expand(&cur, false), self.act_q())?;
                    let ym = self.affine(l, &expand(&cur, true), self.act_q())?;
                    (
                        naive_delta(&yp, &y, cur.group, false),
                        naive_delta(&ym, &y, cur.group, true),
                    )
                }
            };
            let naive_expanded = mode == Propagation::NaiveQuant;
            let shared = cur.shared && !naive_expanded;
            let group = cur.group;
            inputs.push(cur);
            let pre = PerturbedBatch {
                base: y,
                plus: dp,
                minus: dm,
                group,
                shared,
            };
            if l + 1 == self.depth() {
                let out = if pre.shared { unshare(&pre) } else { pre };
                return Ok((
                    PerturbedOutput {
                        base: out.base,
                        plus: out.plus,
                        minus: out.minus,
                        group,
                    },
                    PerturbedCache { inputs },
                ));
            }
            cur = activate(&pre);
        }
        unreachable!("depth ≥ 2")
    }

    /// Reverse pass for upstream gradients with respect to the output triple
    /// `(base, plus, minus)` of [`PreparedNetwork::forward_shared`] or
    /// [`PreparedNetwork::forward_diffquant`]. The quantizers are treated as
    /// identity (straight-through).
    pub fn backward_perturbed(
        &self,
        cache: &PerturbedCache,
        d_base: &DenseTensor,
        d_plus: &DenseTensor,
        d_minus: &DenseTensor,
        acc: &mut GradAccumulator,
    ) -> Result<()> {
        if cache.inputs.len() != self.depth() {
            return shape_err("perturbed cache does not belong to this network");
        }
        let first = &cache.inputs[0];
        let (p_rows, g) = (first.base.rows(), first.group);
        let out = self.dims[self.depth() - 1].1;
        if d_base.shape() != [p_rows, out]
            || d_plus.shape() != [p_rows * g, out]
            || d_minus.shape() != [p_rows * g, out]
        {
            return shape_err("upstream gradients do not match the perturbed cache");
        }
        let (mut a, mut gp, mut gm) = (d_base.clone(), d_plus.clone(), d_minus.clone());
        for l in (0..self.depth()).rev() {
            let inp = &cache.inputs[l];
            self.weight_grad(l, &inp.base, self.act_q(), &a, acc)?;
            self.bias_grad(l, &a, acc);
            if inp.shared {
                // δ⁺ = δ⁻ = δ for every base row: fold the point axis first
                let cols = gp.cols();
                let mut s = DenseTensor::zeros(&[g, cols]);
                for p in 0..p_rows {
                    for i in 0..g {
                        let r = p * g + i;
                        let (rp, rm) = (gp.row(r), gm.row(r));
                        s.row_mut(i).iter_mut().zip(rp.iter().zip(rm)).for_each(|(o, (x, y))| *o += x + y);
                    }
                }
                self.weight_grad(l, &inp.plus, self.pert_q(), &s, acc)?;
            } else {
                self.weight_grad(l, &inp.plus, self.pert_q(), &gp, acc)?;
                self.weight_grad(l, &inp.minus, self.pert_q(), &gm, acc)?;
            }
            if l == 0 {
                break;
            }
            let hx = self.linear_grad(l, &a)?;
            let hp = self.linear_grad(l, &gp)?;
            let hm = self.linear_grad(l, &gm)?;
            (a, gp, gm) = tanh_backward(inp, hx, hp, hm);
        }
        Ok(())
    }
}

impl PreparedNetwork {
    /// Second-order forward mode along each coordinate axis in `dims`:
    /// returns `u` (`P`), `∂u/∂x_j` and `∂²u/∂x_j²` (both `P × |dims|`).
    /// Full precision only.
    pub fn forward_jets(&self, x: &DenseTensor, dims: &[usize]) -> Result<(Vec<f64>, DenseTensor, DenseTensor)> {
        self.check_input(x)?;
        if self.policy.is_some() {
            return Err(Error::InvalidParameter("jets need a full-precision network".into()));
        }
        if dims.iter().any(|&d| d >= self.input_dim()) {
            return shape_err(format!("jet axes {dims:?} exceed input width {}", self.input_dim()));
        }
        let (p_rows, nd) = (x.rows(), dims.len());
        let mut v = x.clone();
        // direction j of point p at row p·nd + j
        let mut d1 = DenseTensor::from_fn(&[p_rows * nd, self.input_dim()], |k| {
            let (row, c) = (k / self.input_dim(), k % self.input_dim());
            if dims[row % nd] == c {
                1.0
            } else {
                0.0
            }
        });
        let mut d2 = DenseTensor::zeros(d1.shape());
        for l in 0..self.depth() {
            let y = self.affine(l, &v, None)?;
            let mut z1 = self.linear(l, &d1, None)?;
            let mut z2 = self.linear(l, &d2, None)?;
            if l + 1 == self.depth() {
                v = y;
                d1 = z1;
                d2 = z2;
                break;
            }
            let t = y.map(tanh);
            let cols = t.cols();
            for r in 0..p_rows * nd {
                let tr = t.row(r / nd);
                let (a, b) = (z1.row_mut(r), z2.row_mut(r));
                for c in 0..cols {
                    let s = 1.0 - tr[c] * tr[c];
                    b[c] = s * b[c] - 2.0 * tr[c] * s * a[c] * a[c];
                    a[c] *= s;
                }
            }
            v = t;
            d1 = z1;
            d2 = z2;
        }
        let first = DenseTensor::new(vec![p_rows, nd], first_column(&d1))?;
        let second = DenseTensor::new(vec![p_rows, nd], first_column(&d2))?;
        Ok((first_column(&v), first, second))
    }
}

fn first_column(t: &DenseTensor) -> Vec<f64> {
    t.data().iter().step_by(t.cols()).copied().collect()
}

fn naive_delta(y_pert: &DenseTensor, y: &DenseTensor, g: usize, minus: bool) -> DenseTensor {
    let cols = y.cols();
    let mut out = y_pert.clone();
    for (r, row) in out.data_mut().chunks_exact_mut(cols).enumerate() {
        let base = y.row(r / g);
        for (v, b) in row.iter_mut().zip(base) {
            *v = if minus { b - *v } else { *v - b };
        }
    }
    out
}

fn unshare(pre: &PerturbedBatch) -> PerturbedBatch {
    let (p_rows, g, cols) = (pre.base.rows(), pre.group, pre.plus.cols());
    let mut plus = DenseTensor::zeros(&[p_rows * g, cols]);
    for p in 0..p_rows {
        for i in 0..g {
            plus.row_mut(p * g + i).copy_from_slice(pre.plus.row(i));
        }
    }
    PerturbedBatch {
        base: pre.base.clone(),
        minus: plus.clone(),
        plus,
        group: g,
        shared: false,
    }
}

/// `t = tanh(Y)`, `δ⁺ = tanh(Y + Δ⁺) − t`, `δ⁻ = t − tanh(Y − Δ⁻)`.
fn activate(pre: &PerturbedBatch) -> PerturbedBatch {
    let (p_rows, g, cols) = (pre.base.rows(), pre.group, pre.base.cols());
    let t = pre.base.map(tanh);
    let mut plus = DenseTensor::zeros(&[p_rows * g, cols]);
    let mut minus = DenseTensor::zeros(&[p_rows * g, cols]);
    for p in 0..p_rows {
        let (y, tr) = (pre.base.row(p), t.row(p));
        for i in 0..g {
            let src = pre.delta_row(p, i);
            let (dp, dm) = (pre.plus.row(src), pre.minus.row(src));
            let r = p * g + i;
            let op = plus.row_mut(r);
            for c in 0..cols {
                op[c] = tanh(y[c] + dp[c]) - tr[c];
            }
            let om = minus.row_mut(r);
            for c in 0..cols {
                om[c] = tr[c] - tanh(y[c] - dm[c]);
            }
        }
    }
    PerturbedBatch {
        base: t,
        plus,
        minus,
        group: g,
        shared: false,
    }
}

/// Gradients with respect to the previous layer's `(Y, Δ⁺, Δ⁻)` given
/// `hx = a·W`, `hp = g⁺·W`, `hm = g⁻·W` and this layer's input
/// `(t, δ⁺, δ⁻)`.
fn tanh_backward(
    inp: &PerturbedBatch,
    mut hx: DenseTensor,
    mut hp: DenseTensor,
    mut hm: DenseTensor,
) -> (DenseTensor, DenseTensor, DenseTensor) {
    let (p_rows, g, cols) = (inp.base.rows(), inp.group, inp.base.cols());
    for p in 0..p_rows {
        let t = inp.base.row(p);
        let mut extra = vec![0.0; cols];
        for i in 0..g {
            let r = p * g + i;
            let (dp, dm) = (inp.plus.row(r), inp.minus.row(r));
            let rp = hp.row_mut(r);
            for c in 0..cols {
                let tp = t[c] + dp[c];
                extra[c] += rp[c] * dp[c] * (t[c] + tp);
                rp[c] *= 1.0 - tp * tp;
            }
            let rm = hm.row_mut(r);
            for c in 0..cols {
                let tm = t[c] - dm[c];
                extra[c] += rm[c] * dm[c] * (t[c] + tm);
                rm[c] *= 1.0 - tm * tm;
            }
        }
        let ra = hx.row_mut(p);
        for c in 0..cols {
            ra[c] = ra[c] * (1.0 - t[c] * t[c]) - extra[c];
        }
    }
    (hx, hp, hm)
}

/// Convenience: one-shot full forward of `params`.
pub fn forward(
    cfg: &NetworkConfig,
    params: &Parameters,
    x: &DenseTensor,
    policy: Option<&PrecisionPolicy>,
) -> Result<DenseTensor> {
    PreparedNetwork::new(cfg, params, policy)?.eval(x)
}

/// Convenience: gradients of `Σ du ⊙ u(x)` with respect to parameters and `x`.
pub fn backward(
    cfg: &NetworkConfig,
    params: &Parameters,
    x: &DenseTensor,
    du: &DenseTensor,
    policy: Option<&PrecisionPolicy>,
) -> Result<(Gradients, DenseTensor)> {
    let net = PreparedNetwork::new(cfg, params, policy)?;
    let (_, cache) = net.forward(x)?;
    let mut acc = net.new_accumulator();
    let dx = net.backward(&cache, du, &mut acc)?;
    Ok((net.finish(&acc)?, dx))
}
