//! Closed-form cost counters for one training iteration.
//!
//! Counts mirror the GEMMs issued by [`crate::trainer`]: the Stein pass over
//! `N_c` collocation points in chunks, the boundary pass over `N_b` points,
//! TT partial-matrix construction and core-gradient contraction. Bytes are
//! SMX-packed sizes at the policy bit widths (FP32 without a policy).

use serde::{Deserialize, Serialize};

use crate::network::{NetworkConfig, Propagation};
use crate::pde;
use crate::smx::PrecisionPolicy;
use crate::trainer::TrainConfig;
use crate::tt::{ContractionScheme, TtLayerSpec};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub macs_forward: u64,
    pub macs_backward: u64,
    pub macs_se_total: u64,
    pub bytes_weights: u64,
    pub bytes_activations: u64,
    pub bytes_gradients: u64,
    pub parameter_count: u64,
    pub compression_ratio: f64,
}

/// Affine layer as seen by the cost model.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCost {
    Dense { input: usize, output: usize },
    Tt { spec: TtLayerSpec, scheme: ContractionScheme },
}

fn prod(v: &[usize]) -> u64 {
    v.iter().map(|&x| x as u64).product()
}

fn core_shapes(spec: &TtLayerSpec) -> Vec<[u64; 3]> {
    (0..2 * spec.d()).map(|k| spec.core_shape(k).map(|v| v as u64)).collect()
}

fn chain_product_macs(cores: &[[u64; 3]]) -> u64 {
    let mut rows = cores[0][0] * cores[0][1];
    let mut macs = 0;
    for &[r, f, b] in &cores[1..] {
        macs += rows * r * f * b;
        rows *= f;
    }
    macs
}

fn chain_grads_macs(cores: &[[u64; 3]]) -> u64 {
    let k = cores.len();
    let (a, b) = (cores[0][0], cores[k - 1][2]);
    let mut macs = 0;
    let mut rows = a;
    for &[r, f, rb] in &cores[..k - 1] {
        macs += rows * r * f * rb;
        rows *= f;
    }
    let mut cols = b;
    for &[r, f, rb] in cores[1..].iter().rev() {
        macs += r * f * rb * cols;
        cols *= f;
    }
    let modes: Vec<u64> = cores.iter().map(|c| c[1]).collect();
    for (t, &[r, f, rb]) in cores.iter().enumerate() {
        let lt: u64 = modes[..t].iter().product();
        let gt: u64 = modes[t + 1..].iter().product();
        macs += r * a * lt * f * gt * b + r * f * gt * b * rb;
    }
    macs
}

fn sequential_row_macs(spec: &TtLayerSpec) -> u64 {
    let d = spec.d();
    let r = |k: usize| spec.ranks[k] as u64;
    let mut macs = 0;
    for k in d..2 * d {
        let j = k - d;
        macs += prod(&spec.in_factors[..j]) * spec.in_factors[j] as u64 * r(k + 1) * r(k);
    }
    for k in 0..d {
        macs += prod(&spec.out_factors[k + 1..]) * r(k + 1) * r(k) * spec.out_factors[k] as u64;
    }
    macs
}

impl LayerCost {
    fn dims(&self) -> (u64, u64) {
        match self {
            Self::Dense { input, output } => (*input as u64, *output as u64),
            Self::Tt { spec, .. } => (spec.in_dim() as u64, spec.out_dim() as u64),
        }
    }

    /// MACs of `x·Wᵀ` for `rows` input rows.
    pub fn forward_macs(&self, rows: u64) -> u64 {
        match self {
            Self::Dense { input, output } => rows * (*input as u64) * (*output as u64),
            Self::Tt { spec, scheme } => {
                let (n, m, r) = (spec.in_dim() as u64, spec.out_dim() as u64, spec.mid_rank() as u64);
                match scheme {
                    ContractionScheme::Prs => rows * (n * r + r * m),
                    ContractionScheme::Sequential => rows * sequential_row_macs(spec),
                }
            }
        }
    }

    /// MACs of `dy·W`.
    pub fn input_grad_macs(&self, rows: u64) -> u64 {
        let (n, m) = self.dims();
        match self {
            Self::Dense { .. } => rows * n * m,
            Self::Tt { spec, .. } => rows * spec.mid_rank() as u64 * (m + n),
        }
    }

    /// MACs of the weight-gradient contribution of `rows` rows.
    pub fn weight_grad_macs(&self, rows: u64) -> u64 {
        let (n, m) = self.dims();
        match self {
            Self::Dense { .. } => rows * n * m,
            Self::Tt { spec, .. } => 2 * rows * spec.mid_rank() as u64 * (n + m),
        }
    }

    /// Per-step construction of the partial matrices `A`, `B`.
    pub fn setup_macs(&self) -> u64 {
        match self {
            Self::Dense { .. } => 0,
            Self::Tt { spec, .. } => {
                let c = core_shapes(spec);
                chain_product_macs(&c[..spec.d()]) + chain_product_macs(&c[spec.d()..])
            }
        }
    }

    /// Per-step contraction of `dA`, `dB` into core gradients.
    pub fn finish_macs(&self) -> u64 {
        match self {
            Self::Dense { .. } => 0,
            Self::Tt { spec, .. } => {
                let c = core_shapes(spec);
                chain_grads_macs(&c[..spec.d()]) + chain_grads_macs(&c[spec.d()..])
            }
        }
    }

    fn weight_matrices(&self) -> Vec<(u64, u64)> {
        match self {
            Self::Dense { input, output } => vec![(*output as u64, *input as u64)],
            Self::Tt { spec, .. } => core_shapes(spec).iter().map(|[r, f, b]| (r * f, *b)).collect(),
        }
    }

    fn param_count(&self) -> u64 {
        let (_, m) = self.dims();
        match self {
            Self::Dense { input, output } => (*input * *output) as u64 + m,
            Self::Tt { spec, .. } => spec.param_count() as u64 + m,
        }
    }
}

pub fn layer_costs(net: &NetworkConfig) -> Result<Vec<LayerCost>> {
    let spec = net.tt_spec()?;
    Ok(net
        .layer_dims()
        .into_iter()
        .enumerate()
        .map(|(l, (input, output))| match (&spec, net.is_tt_layer(l)) {
            (Some(s), true) => LayerCost::Tt {
                spec: s.clone(),
                scheme: net.scheme(),
            },
            _ => LayerCost::Dense { input, output },
        })
        .collect())
}

/// Packed size of an `r × c` tensor: `⌈bits·r·c/8⌉` plus one exponent byte
/// per 4×4 block; FP32 without a width.
pub fn packed_bytes(rows: u64, cols: u64, bits: Option<u8>) -> u64 {
    match bits {
        Some(b) => (b as u64 * rows * cols).div_ceil(8) + rows.div_ceil(4) * cols.div_ceil(4),
        None => 4 * rows * cols,
    }
}

/// Collocation points per chunk of the Stein pass.
pub fn chunk_points(cfg: &TrainConfig) -> usize {
    (cfg.chunk_rows / group_size(cfg)).max(1)
}

fn group_size(cfg: &TrainConfig) -> usize {
    let blocks = 1 + cfg.stein.separate_gradient as usize + pde::problem(cfg.problem).time_dependent as usize;
    cfg.stein.samples * blocks
}

pub fn count_costs(cfg: &TrainConfig) -> Result<CostReport> {
    cfg.validate()?;
    let layers = layer_costs(&cfg.network)?;
    let policy: Option<&PrecisionPolicy> = cfg.precision.as_ref();
    let p = cfg.loss.n_c as u64;
    let nb = cfg.loss.n_b as u64;
    let g = group_size(cfg) as u64;
    let chunks = if p == 0 { 0 } else { p.div_ceil(chunk_points(cfg) as u64) };
    let shared = cfg.stein.share_deltas;
    let naive = cfg.propagation == Propagation::NaiveQuant && policy.is_some();

    let wbits = policy.map(|q| q.weight_bits.bit_width());
    let abits = policy.map(|q| q.activation_bits.bit_width());
    let pbits = policy.map(|q| q.perturbation().bit_width());
    let gbits = policy.map(|q| q.gradient_bits.bit_width());

    let (mut fwd, mut bwd) = (0, 0);
    let (mut bytes_w, mut bytes_a, mut bytes_g) = (0, 0, 0);
    for (l, layer) in layers.iter().enumerate() {
        let (n, m) = layer.dims();
        let folded = l == 0 && shared;
        let fwd_rows = if folded && !naive { chunks * g } else { 2 * p * g };
        let bwd_rows = if folded { chunks * g } else { 2 * p * g };
        fwd += layer.setup_macs() + layer.forward_macs(p + fwd_rows + nb);
        bwd += layer.weight_grad_macs(p + bwd_rows + nb) + layer.finish_macs();
        // the boundary pass also forms ∂L/∂x at the input layer
        bwd += layer.input_grad_macs(if l > 0 { p + 2 * p * g + nb } else { nb });
        bytes_w += layer.weight_matrices().iter().map(|&(r, c)| packed_bytes(r, c, wbits)).sum::<u64>();
        bytes_a += packed_bytes(p + nb, n, abits) + packed_bytes(fwd_rows, n, if naive { abits } else { pbits });
        bytes_g += packed_bytes(p + 2 * p * g + nb, m, gbits);
    }

    let parameter_count: u64 = layers.iter().map(LayerCost::param_count).sum();
    let dense: u64 = cfg.network.layer_dims().iter().map(|&(i, o)| (i * o + o) as u64).sum();
    Ok(CostReport {
        macs_forward: fwd,
        macs_backward: bwd,
        macs_se_total: fwd + bwd,
        bytes_weights: bytes_w,
        bytes_activations: bytes_a,
        bytes_gradients: bytes_g,
        parameter_count,
        compression_ratio: dense as f64 / parameter_count as f64,
    })
}
