//! Tensor-train (TT) layers.
//!
//! A weight matrix `W ∈ R^{M×N}` with `M = ∏ m_k`, `N = ∏ n_k` is stored as
//! `2d` order-3 cores: `G^(k)` has shape `(r_{k-1}, m_k, r_k)` for `k ≤ d` and
//! `(r_{k-1}, n_{k-d}, r_k)` for `k > d`, with `r_0 = r_{2d} = 1`. Row index
//! `(i_1..i_d)` and column index `(j_1..j_d)` are row-major with `i_1`/`j_1`
//! slowest. [`reconstruct_full`] is the reference every other scheme is tested
//! against.
//!
//! Two forward schemes are provided: sequential (the activation is contracted
//! through all `2d` cores, highest index first) and partial reconstruction
//! (PRS: contract the output cores into `A` (`r_d × M`), the input cores into
//! `B` (`N × r_d`), then `Y = X·B·A`). The backward pass always differentiates
//! the PRS graph.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::smx::{self, PrecisionPolicy, QuantSpec, SmxTensor};
use crate::tensor::{
    contract_with, matmul, read_dense, transpose, transpose2, write_dense, DenseTensor, RngStream,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtLayerSpec {
    pub out_factors: Vec<usize>,
    pub in_factors: Vec<usize>,
    pub ranks: Vec<usize>,
}

impl TtLayerSpec {
    pub fn new(out_factors: Vec<usize>, in_factors: Vec<usize>, ranks: Vec<usize>) -> Result<Self> {
        let spec = Self {
            out_factors,
            in_factors,
            ranks,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Ranks `[1, r, r, …, r, 1]`.
    pub fn uniform(out_factors: Vec<usize>, in_factors: Vec<usize>, rank: usize) -> Result<Self> {
        let d = out_factors.len();
        let mut ranks = vec![rank; 2 * d + 1];
        ranks[0] = 1;
        ranks[2 * d] = 1;
        Self::new(out_factors, in_factors, ranks)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.out_factors.len();
        if d == 0 || self.in_factors.len() != d {
            return param_err(format!(
                "TT spec needs d ≥ 1 factors per side, got {} out / {} in",
                d,
                self.in_factors.len()
            ));
        }
        if self.ranks.len() != 2 * d + 1 {
            return param_err(format!("TT spec needs {} ranks, got {}", 2 * d + 1, self.ranks.len()));
        }
        if self.ranks[0] != 1 || self.ranks[2 * d] != 1 {
            return param_err("boundary TT ranks must be 1");
        }
        if self.ranks.iter().chain(&self.out_factors).chain(&self.in_factors).any(|&v| v == 0) {
            return param_err("TT factors and ranks must be positive");
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.out_factors.len()
    }

    /// `M`, the layer output width.
    pub fn out_dim(&self) -> usize {
        self.out_factors.iter().product()
    }

    /// `N`, the layer input width.
    pub fn in_dim(&self) -> usize {
        self.in_factors.iter().product()
    }

    /// Mode size of core `k` (0-based over all `2d` cores).
    pub fn mode(&self, k: usize) -> usize {
        let d = self.d();
        if k < d {
            self.out_factors[k]
        } else {
            self.in_factors[k - d]
        }
    }

    pub fn core_shape(&self, k: usize) -> [usize; 3] {
        [self.ranks[k], self.mode(k), self.ranks[k + 1]]
    }

    pub fn param_count(&self) -> usize {
        (0..2 * self.d()).map(|k| self.core_shape(k).iter().product::<usize>()).sum()
    }

    /// The rank between the output and input halves.
    pub fn mid_rank(&self) -> usize {
        self.ranks[self.d()]
    }
}

/// Dense parameter count over TT parameter count.
pub fn compression_ratio(spec: &TtLayerSpec) -> f64 {
    (spec.out_dim() * spec.in_dim()) as f64 / spec.param_count() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtCores {
    spec: TtLayerSpec,
    cores: Vec<DenseTensor>,
}

impl TtCores {
    pub fn new(spec: TtLayerSpec, cores: Vec<DenseTensor>) -> Result<Self> {
        spec.validate()?;
        if cores.len() != 2 * spec.d() {
            return shape_err(format!("expected {} cores, got {}", 2 * spec.d(), cores.len()));
        }
        for (k, c) in cores.iter().enumerate() {
            if c.shape() != spec.core_shape(k) {
                return shape_err(format!(
                    "core {k} has shape {:?}, spec wants {:?}",
                    c.shape(),
                    spec.core_shape(k)
                ));
            }
            c.check_finite()?;
        }
        Ok(Self { spec, cores })
    }

    pub fn spec(&self) -> &TtLayerSpec {
        &self.spec
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.cores
    }

    fn fake_quantized(&self, spec: QuantSpec) -> Result<Vec<DenseTensor>> {
        self.cores.iter().map(|c| smx::quantize_dequantize(c, spec)).collect()
    }
}

/// Product of a run of cores: returns the matrix `(a · F, b)` where `a` is the
/// left rank of the first core, `F` the product of mode sizes and `b` the
/// right rank of the last core.
fn chain_product(cores: &[DenseTensor]) -> Result<DenseTensor> {
    let first = &cores[0];
    let [a, f, b] = [first.shape()[0], first.shape()[1], first.shape()[2]];
    let mut acc = first.clone().reshaped(&[a * f, b])?;
    for c in &cores[1..] {
        let [r, f, b] = [c.shape()[0], c.shape()[1], c.shape()[2]];
        let next = matmul(&acc, &c.clone().reshaped(&[r, f * b])?, false, false)?;
        let rows = next.rows() * f;
        acc = next.reshaped(&[rows, b])?;
    }
    Ok(acc)
}

fn build_a_from(cores: &[DenseTensor], spec: &TtLayerSpec) -> Result<DenseTensor> {
    // (M, r_d) since r_0 = 1
    let p = chain_product(&cores[..spec.d()])?;
    transpose2(&p)
}

fn build_b_from(cores: &[DenseTensor], spec: &TtLayerSpec) -> Result<DenseTensor> {
    // (r_d · N, 1) → (r_d, N)
    let p = chain_product(&cores[spec.d()..])?.reshaped(&[spec.mid_rank(), spec.in_dim()])?;
    transpose2(&p)
}

/// Output-half partial matrix `A` (`r_d × M`).
pub fn build_a(cores: &TtCores) -> Result<DenseTensor> {
    build_a_from(&cores.cores, &cores.spec)
}

/// Input-half partial matrix `B` (`N × r_d`).
pub fn build_b(cores: &TtCores) -> Result<DenseTensor> {
    build_b_from(&cores.cores, &cores.spec)
}

/// Contract the whole rank chain into the `M × N` matrix.
pub fn reconstruct_full(cores: &TtCores) -> Result<DenseTensor> {
    let spec = &cores.spec;
    chain_product(&cores.cores)?.reshaped(&[spec.out_dim(), spec.in_dim()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractionScheme {
    Sequential,
    Prs,
}

fn gemm(
    a: &DenseTensor,
    a_q: Option<QuantSpec>,
    b: &DenseTensor,
    b_q: Option<QuantSpec>,
    ta: bool,
    tb: bool,
) -> Result<DenseTensor> {
    match (a_q, b_q) {
        (Some(qa), Some(qb)) => smx::quantized_matmul(a, qa, b, qb, ta, tb),
        (None, None) => matmul(a, b, ta, tb),
        _ => unreachable!("operands are quantized together or not at all"),
    }
}

fn check_input(spec: &TtLayerSpec, x: &DenseTensor) -> Result<()> {
    if x.ndim() != 2 || x.cols() != spec.in_dim() {
        return shape_err(format!(
            "TT layer expects batch × {}, got {:?}",
            spec.in_dim(),
            x.shape()
        ));
    }
    Ok(())
}

/// Sequential scheme over already-prepared (possibly fake-quantized) cores.
/// `x_q` is the spec for the incoming activation, `act_q` for every
/// intermediate, `w_q` for the cores.
fn sequential_with(
    spec: &TtLayerSpec,
    cores: &[DenseTensor],
    x: &DenseTensor,
    x_q: Option<QuantSpec>,
    act_q: Option<QuantSpec>,
    w_q: Option<QuantSpec>,
) -> Result<DenseTensor> {
    check_input(spec, x)?;
    let d = spec.d();
    let batch = x.rows();
    let mut shape = vec![batch];
    shape.extend(&spec.in_factors);
    shape.push(1);
    let mut state = x.clone().reshaped(&shape)?;
    let mut state_q = x_q;

    // input cores, highest index first: pair (n_j, r_k) at the tail of the state
    for k in (d..2 * d).rev() {
        let nd = state.ndim();
        state = contract_with(&state, &cores[k], &[nd - 2, nd - 1], &[1, 2], |a, b| {
            gemm(a, state_q, b, w_q, false, false)
        })?;
        state_q = act_q;
    }
    // state: (batch, r_d); output cores k = d-1 .. 0
    for k in (0..d).rev() {
        // state (batch, r_{k+1}, m_{k+1}..): contract axis 1 with core axis 2
        let nd = state.ndim();
        let out = contract_with(&state, &cores[k], &[1], &[2], |a, b| {
            gemm(a, state_q, b, w_q, false, false)
        })?;
        state_q = act_q;
        // (batch, m.., r_k, m_k) -> (batch, r_k, m_k, m..)
        let ond = out.ndim();
        let mut perm = vec![0, ond - 2, ond - 1];
        perm.extend(1..nd - 1);
        state = if nd == 2 { out } else { transpose(&out, &perm)? };
    }
    state.reshaped(&[batch, spec.out_dim()])
}

/// Sequential scheme: contract `x` with `G^(2d)`, then `G^(2d−1)`, …, `G^(1)`.
/// With a policy, each contraction's operands are SMX-quantized (activations
/// at `activation_bits`, cores at `weight_bits`) and products accumulate in
/// full precision.
pub fn forward_sequential(
    cores: &TtCores,
    x: &DenseTensor,
    quant: Option<&PrecisionPolicy>,
) -> Result<DenseTensor> {
    let prepared = PreparedTt::new(cores, ContractionScheme::Sequential, quant)?;
    prepared.apply(x, quant.map(|p| p.activation_bits))
}

/// Partial-reconstruction scheme: `Y = (X·B)·A`.
pub fn forward_prs(
    cores: &TtCores,
    x: &DenseTensor,
    quant: Option<&PrecisionPolicy>,
) -> Result<DenseTensor> {
    let prepared = PreparedTt::new(cores, ContractionScheme::Prs, quant)?;
    prepared.apply(x, quant.map(|p| p.activation_bits))
}

#[derive(Debug, Clone)]
pub struct TtGradients {
    pub dx: DenseTensor,
    pub dcores: Vec<DenseTensor>,
}

/// Chain rule through the PRS graph for upstream gradient `dy = ∂L/∂Y`.
pub fn backward(
    cores: &TtCores,
    x: &DenseTensor,
    dy: &DenseTensor,
    quant: Option<&PrecisionPolicy>,
) -> Result<TtGradients> {
    let prepared = PreparedTt::new(cores, ContractionScheme::Prs, quant)?;
    let mut acc = prepared.new_accumulator();
    prepared.accumulate(x, quant.map(|p| p.activation_bits), dy, &mut acc)?;
    let dx = prepared.input_grad(dy)?;
    Ok(TtGradients {
        dx,
        dcores: prepared.core_grads(&acc)?,
    })
}

/// Per-step evaluation state of a TT layer: (fake-)quantized cores and the
/// partial matrices `A`, `B` shared by forward and backward.
#[derive(Debug, Clone)]
pub struct PreparedTt {
    spec: TtLayerSpec,
    scheme: ContractionScheme,
    policy: Option<PrecisionPolicy>,
    cores: Vec<DenseTensor>,
    a: DenseTensor,
    b: DenseTensor,
    qa: Option<SmxTensor>,
    qb: Option<SmxTensor>,
}

/// Running sums of `∂L/∂A` and `∂L/∂B` over any number of row batches.
#[derive(Debug, Clone)]
pub struct TtAccumulator {
    pub da: DenseTensor,
    pub db: DenseTensor,
}

impl PreparedTt {
    pub fn new(
        cores: &TtCores,
        scheme: ContractionScheme,
        policy: Option<&PrecisionPolicy>,
    ) -> Result<Self> {
        let spec = cores.spec.clone();
        let used = match policy {
            Some(p) => cores.fake_quantized(p.weight_bits)?,
            None => cores.cores.clone(),
        };
        let a = build_a_from(&used, &spec)?;
        let b = build_b_from(&used, &spec)?;
        let (qa, qb) = match policy {
            Some(p) => (
                Some(smx::quantize(&a, p.weight_bits)?),
                Some(smx::quantize(&b, p.weight_bits)?),
            ),
            None => (None, None),
        };
        Ok(Self {
            spec,
            scheme,
            policy: policy.copied(),
            cores: used,
            a,
            b,
            qa,
            qb,
        })
    }

    pub fn spec(&self) -> &TtLayerSpec {
        &self.spec
    }

    pub fn a(&self) -> &DenseTensor {
        &self.a
    }

    pub fn b(&self) -> &DenseTensor {
        &self.b
    }

    fn mm(
        &self,
        x: &DenseTensor,
        x_q: Option<QuantSpec>,
        w: &DenseTensor,
        qw: &Option<SmxTensor>,
        tx: bool,
        tw: bool,
    ) -> Result<DenseTensor> {
        match (qw, x_q) {
            (Some(qw), Some(xq)) => smx::smx_matmul(&smx::quantize(x, xq)?, qw, tx, tw),
            _ => matmul(x, w, tx, tw),
        }
    }

    /// Linear map `x ↦ x·Wᵀ`; `x_q` is the spec for the incoming activation
    /// (ignored in full precision).
    pub fn apply(&self, x: &DenseTensor, x_q: Option<QuantSpec>) -> Result<DenseTensor> {
        check_input(&self.spec, x)?;
        let act = self.policy.map(|p| p.activation_bits);
        let x_q = self.policy.and(x_q);
        match self.scheme {
            ContractionScheme::Prs => {
                let xb = self.mm(x, x_q, &self.b, &self.qb, false, false)?;
                self.mm(&xb, act, &self.a, &self.qa, false, false)
            }
            ContractionScheme::Sequential => sequential_with(
                &self.spec,
                &self.cores,
                x,
                x_q,
                act,
                self.policy.map(|p| p.weight_bits),
            ),
        }
    }

    /// `∂L/∂x = (∂L/∂Y · Aᵀ) · Bᵀ`.
    pub fn input_grad(&self, dy: &DenseTensor) -> Result<DenseTensor> {
        let g = self.policy.map(|p| p.gradient_bits);
        let dya = self.mm(dy, g, &self.a, &self.qa, false, true)?;
        self.mm(&dya, g, &self.b, &self.qb, false, true)
    }

    pub fn new_accumulator(&self) -> TtAccumulator {
        TtAccumulator {
            da: DenseTensor::zeros(self.a.shape()),
            db: DenseTensor::zeros(self.b.shape()),
        }
    }

    /// Adds `(X·B)ᵀ·dY` to `dA` and `Xᵀ·(dY·Aᵀ)` to `dB`.
    pub fn accumulate(
        &self,
        x: &DenseTensor,
        x_q: Option<QuantSpec>,
        dy: &DenseTensor,
        acc: &mut TtAccumulator,
    ) -> Result<()> {
        check_input(&self.spec, x)?;
        if dy.ndim() != 2 || dy.rows() != x.rows() || dy.cols() != self.spec.out_dim() {
            return shape_err(format!(
                "TT upstream gradient {:?} does not match input {:?}",
                dy.shape(),
                x.shape()
            ));
        }
        let x_q = self.policy.and(x_q);
        let act = self.policy.map(|p| p.activation_bits);
        let g = self.policy.map(|p| p.gradient_bits);
        let xb = self.mm(x, x_q, &self.b, &self.qb, false, false)?;
        acc.da.add_assign(&gemm(&xb, act, dy, g, true, false)?)?;
        let dya = self.mm(dy, g, &self.a, &self.qa, false, true)?;
        acc.db.add_assign(&gemm(x, x_q, &dya, g, true, false)?)?;
        Ok(())
    }

    /// Core gradients from accumulated `dA`, `dB`, contracted against the
    /// other cores of each half-chain in full precision.
    pub fn core_grads(&self, acc: &TtAccumulator) -> Result<Vec<DenseTensor>> {
        let d = self.spec.d();
        let (m, n, rd) = (self.spec.out_dim(), self.spec.in_dim(), self.spec.mid_rank());
        // A = P_outᵀ with P_out (1·M, r_d); B = P_inᵀ with P_in (r_d, N·1)
        let dp_out = transpose2(&acc.da)?.reshaped(&[1, m * rd])?;
        let dp_in = transpose2(&acc.db)?.reshaped(&[rd, n])?;
        let mut grads = chain_grads(&self.cores[..d], &dp_out)?;
        grads.extend(chain_grads(&self.cores[d..], &dp_in)?);
        Ok(grads)
    }
}

/// Gradients of every core in a chain given `∂L/∂P` for the chain product
/// `P[a, F, b]`, passed as an `(a, F·b)` matrix.
fn chain_grads(cores: &[DenseTensor], dp: &DenseTensor) -> Result<Vec<DenseTensor>> {
    let k = cores.len();
    let a = cores[0].shape()[0];
    let b = cores[k - 1].shape()[2];
    // left[t]: product of cores[..t] as (a·F<, r_t); left[0] = I_a
    let mut left = vec![DenseTensor::identity(a)];
    for c in &cores[..k - 1] {
        let [r, f, rb] = [c.shape()[0], c.shape()[1], c.shape()[2]];
        let prev = left.last().unwrap();
        let next = matmul(prev, &c.clone().reshaped(&[r, f * rb])?, false, false)?;
        let rows = next.rows() * f;
        left.push(next.reshaped(&[rows, rb])?);
    }
    // right[t]: product of cores[t+1..] as (r_{t+1}, F>·b); right[k-1] = I_b
    let mut right = vec![DenseTensor::identity(b)];
    for c in cores[1..].iter().rev() {
        let [r, f, rb] = [c.shape()[0], c.shape()[1], c.shape()[2]];
        let prev = right.last().unwrap();
        let next = matmul(&c.clone().reshaped(&[r * f, rb])?, prev, false, false)?;
        let cols = f * next.cols();
        right.push(next.reshaped(&[r, cols])?);
    }
    right.reverse();

    let mut grads = Vec::with_capacity(k);
    for (t, c) in cores.iter().enumerate() {
        let [r, f, rb] = [c.shape()[0], c.shape()[1], c.shape()[2]];
        let l = &left[t];
        let rgt = &right[t];
        let f_lt = l.rows() / a;
        let f_gt_b = rgt.cols();
        // dP viewed as (a·F<, f·F>·b)
        let dp_view = dp.clone().reshaped(&[a * f_lt, f * f_gt_b])?;
        let t1 = matmul(l, &dp_view, true, false)?.reshaped(&[r * f, f_gt_b])?;
        grads.push(matmul(&t1, rgt, false, true)?.reshaped(&[r, f, rb])?);
    }
    Ok(grads)
}

/// Gaussian cores scaled so the reconstructed matrix has entrywise variance
/// close to `2/(M+N)`, followed by a uniform rescale that hits the target on
/// the realized reconstruction.
pub fn tt_init(spec: &TtLayerSpec, rng: &mut RngStream) -> Result<TtCores> {
    spec.validate()?;
    let d = spec.d();
    let target = 2.0 / (spec.out_dim() + spec.in_dim()) as f64;
    let rank_prod: f64 = spec.ranks[1..2 * d].iter().map(|&r| r as f64).product();
    let std = (target / rank_prod).powf(1.0 / (4 * d) as f64);
    let cores: Vec<DenseTensor> = (0..2 * d)
        .map(|k| {
            let shape = spec.core_shape(k);
            DenseTensor::from_fn(&shape, |_| std * rng.standard_normal())
        })
        .collect();
    let mut tt = TtCores::new(spec.clone(), cores)?;
    let w = reconstruct_full(&tt)?;
    let n = w.len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        let c = (target / var).powf(1.0 / (4 * d) as f64);
        tt.cores.iter_mut().for_each(|core| core.scale(c));
    }
    Ok(tt)
}

const TT_MAGIC: &[u8; 4] = b"QPTT";
const TT_VERSION: u16 = 1;

pub fn write_checkpoint(w: &mut impl Write, cores: &TtCores) -> Result<()> {
    let spec = &cores.spec;
    w.write_all(TT_MAGIC)?;
    w.write_all(&TT_VERSION.to_le_bytes())?;
    w.write_all(&(spec.d() as u64).to_le_bytes())?;
    for v in spec.out_factors.iter().chain(&spec.in_factors).chain(&spec.ranks) {
        w.write_all(&(*v as u64).to_le_bytes())?;
    }
    for c in &cores.cores {
        write_dense(w, c)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<TtCores> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TT_MAGIC {
        return Err(Error::Format("not a TT checkpoint".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    if u16::from_le_bytes(b2) != TT_VERSION {
        return Err(Error::Format("unsupported TT checkpoint version".into()));
    }
    let mut b8 = [0u8; 8];
    let mut next = |r: &mut dyn Read| -> Result<usize> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8) as usize)
    };
    let d = next(r)?;
    if d == 0 || d > 64 {
        return Err(Error::Format(format!("implausible TT order {d}")));
    }
    let out: Vec<usize> = (0..d).map(|_| next(r)).collect::<Result<_>>()?;
    let inp: Vec<usize> = (0..d).map(|_| next(r)).collect::<Result<_>>()?;
    let ranks: Vec<usize> = (0..=2 * d).map(|_| next(r)).collect::<Result<_>>()?;
    let spec = TtLayerSpec::new(out, inp, ranks)?;
    let cores = (0..2 * d).map(|_| read_dense(r)).collect::<Result<Vec<_>>>()?;
    TtCores::new(spec, cores)
}
