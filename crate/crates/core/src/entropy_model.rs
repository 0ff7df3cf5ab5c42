//! Causal-context Laplace model over quantized latents, plus uniform weight
//! quantization and the discretized Laplace prior used to price network weights.
//!
//! Each latent is predicted from the `C` codes that precede it in raster order
//! within the same scale. One small MLP serves every scale of a slice.

use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::latents::{PyramidDims, QuantizedPyramid};
use crate::numerics::laplace::{bin_bits, bin_log_prob};
use crate::numerics::ops::affine;
use crate::numerics::{Real, Tensor, Var};

/// Floor on the predicted Laplace scale.
pub const B_MIN: f64 = 1e-6;
/// Probability floor on the coding path.
pub const P_MIN: f64 = 1.0 / 65536.0;
/// Context sizes of the standard presets.
pub const PRESET_CONTEXTS: [usize; 5] = [8, 16, 24, 32, 64];

/// Shape of an entropy network: `context -> width -> ... -> width -> 2`, `depth` affine layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntropyNetConfig {
    pub context: usize,
    pub width: usize,
    pub depth: usize,
}

impl EntropyNetConfig {
    pub fn new(context: usize, width: usize, depth: usize) -> Result<Self> {
        if context == 0 || width == 0 {
            return Err(invalid("entropy net context and width must be positive"));
        }
        if depth < 2 {
            return Err(invalid(format!("entropy net depth must be at least 2, got {depth}")));
        }
        Ok(Self { context, width, depth })
    }

    /// Whether the context size is one of the standard presets.
    pub fn is_preset_context(&self) -> bool {
        PRESET_CONTEXTS.contains(&self.context)
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.context, self.width)];
        dims.extend(std::iter::repeat((self.width, self.width)).take(self.depth - 2));
        dims.push((self.width, 2));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// Entropy-network parameters: `[w0, b0, w1, b1, ...]` with `w` of shape `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyNetWeights<F: Real> {
    pub config: EntropyNetConfig,
    pub params: Vec<Tensor<F>>,
}

impl<F: Real> EntropyNetWeights<F> {
    /// Uniform `±1/sqrt(fan_in)` hidden layers; a zero output layer so that
    /// training starts from `mu = 0, b = 1`.
    pub fn init<R: Rng>(config: EntropyNetConfig, rng: &mut R) -> Self {
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let mut params = Vec::with_capacity(2 * dims.len());
        for (k, &(i, o)) in dims.iter().enumerate() {
            let bound = 1.0 / (i as f64).sqrt();
            let w: Vec<F> = (0..i * o)
                .map(|_| if k == last { F::zero() } else { F::of(rng.random_range(-bound..bound)) })
                .collect();
            params.push(Tensor::from_parts(vec![i, o], w));
            params.push(Tensor::zeros(vec![o]));
        }
        Self { config, params }
    }

    pub fn zeros(config: EntropyNetConfig) -> Self {
        let params = config
            .layer_dims()
            .iter()
            .flat_map(|&(i, o)| [Tensor::zeros(vec![i, o]), Tensor::zeros(vec![o])])
            .collect();
        Self { config, params }
    }

    pub fn from_flat(config: EntropyNetConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != config.param_count() {
            return Err(shape_err(
                "entropy net",
                format!("{} values for {} parameters", flat.len(), config.param_count()),
            ));
        }
        let mut params = Vec::new();
        let mut off = 0;
        for (i, o) in config.layer_dims() {
            params.push(Tensor::from_f64(vec![i, o], &flat[off..off + i * o])?);
            off += i * o;
            params.push(Tensor::from_f64(vec![o], &flat[off..off + o])?);
            off += o;
        }
        Ok(Self { config, params })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.to_f64_vec()).collect()
    }

    pub fn cast<G: Real>(&self) -> EntropyNetWeights<G> {
        EntropyNetWeights {
            config: self.config,
            params: self.params.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Laplace location and scale of one latent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceParams {
    pub mu: f64,
    pub scale: f64,
}

/// Flat index (into the scale-major code vector) of each context slot:
/// `C` entries per code, nearest predecessor first, `-1` where no predecessor exists.
pub fn context_indices(dims: &PyramidDims, context: usize) -> Vec<isize> {
    let mut idx = Vec::with_capacity(dims.total() * context);
    for (&(h, w), off) in dims.scales.iter().zip(dims.offsets()) {
        for p in 0..h * w {
            for k in 1..=context {
                idx.push(if k <= p { (off + p - k) as isize } else { -1 });
            }
        }
    }
    idx
}

/// The `C` codes preceding `(row, col)` of scale `l` in raster order, nearest first, zero-filled.
pub fn extract_context(q: &QuantizedPyramid, l: usize, row: usize, col: usize, context: usize) -> Result<Vec<i32>> {
    let (h, w) = *q.dims.scales.get(l).ok_or_else(|| invalid(format!("scale {l} out of range")))?;
    if row >= h || col >= w {
        return Err(invalid(format!("position ({row}, {col}) outside {h}x{w}")));
    }
    let grid = q.scale(l);
    let p = row * w + col;
    Ok((1..=context).map(|k| if k <= p { grid[p - k] } else { 0 }).collect())
}

/// Evaluates the network on one context in f64 with a platform-independent
/// `exp`, so encoder and decoder agree bit for bit.
pub fn predict_params(context: &[f64], weights: &EntropyNetWeights<f64>) -> Result<LaplaceParams> {
    let cfg = weights.config;
    if context.len() != cfg.context {
        return Err(shape_err("predict", format!("context of {} for net expecting {}", context.len(), cfg.context)));
    }
    let dims = cfg.layer_dims();
    let mut act = context.to_vec();
    for (k, &(i, o)) in dims.iter().enumerate() {
        let w = weights.params[2 * k].data();
        let b = weights.params[2 * k + 1].data();
        let mut next = b.to_vec();
        for (c, &a) in act.iter().enumerate().take(i) {
            for (d, n) in next.iter_mut().enumerate() {
                *n += a * w[c * o + d];
            }
        }
        if k + 1 < dims.len() {
            for n in next.iter_mut() {
                if *n < 0.0 {
                    *n = 0.0;
                }
            }
        }
        act = next;
    }
    let (mu, log_b) = (act[0], act[1]);
    let scale = libm::exp(log_b).max(B_MIN);
    if !mu.is_finite() || !scale.is_finite() {
        return Err(Error::NonFinite("entropy network output".into()));
    }
    Ok(LaplaceParams { mu, scale })
}

/// Mass of the unit bin centred on `z`, unfloored.
pub fn discrete_laplace_prob(z: i32, p: &LaplaceParams) -> f64 {
    bin_log_prob(z as f64, p.mu, p.scale, 1.0).exp()
}

/// Coding-path probability: the bin mass floored at [`P_MIN`].
pub fn coding_prob(z: i32, p: &LaplaceParams) -> f64 {
    discrete_laplace_prob(z, p).max(P_MIN)
}

/// Predicted parameters for every code of a quantized pyramid, in coding order.
pub fn predict_all(q: &QuantizedPyramid, weights: &EntropyNetWeights<f64>) -> Result<Vec<LaplaceParams>> {
    let c = weights.config.context;
    let idx = context_indices(&q.dims, c);
    let mut ctx = vec![0.0; c];
    (0..q.values.len())
        .map(|m| {
            for (slot, &i) in ctx.iter_mut().zip(&idx[m * c..(m + 1) * c]) {
                *slot = if i < 0 { 0.0 } else { q.values[i as usize] as f64 };
            }
            predict_params(&ctx, weights)
        })
        .collect()
}

/// Ideal code length of a quantized pyramid: `-sum log2 P(z | context)`.
pub fn rate_bits_latents(q: &QuantizedPyramid, weights: &EntropyNetWeights<f64>) -> Result<f64> {
    let params = predict_all(q, weights)?;
    Ok(q.values
        .iter()
        .zip(&params)
        .map(|(&z, p)| bin_bits(z as f64, p.mu, p.scale, 1.0))
        .sum())
}

/// Differentiable `(mu, b)` for a batch of contexts `[M, C]`; `params` are vars for
/// the network weights in [`EntropyNetWeights::params`] order.
pub fn predict_graph<'t, F: Real>(
    contexts: Var<'t, F>,
    params: &[Var<'t, F>],
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let layers = params.len() / 2;
    let mut act = contexts;
    for k in 0..layers {
        act = affine(act, params[2 * k], params[2 * k + 1])?;
        if k + 1 < layers {
            act = act.relu()?;
        }
    }
    let m = act.shape()[0];
    let mu_idx: Arc<[isize]> = (0..m).map(|i| (2 * i) as isize).collect();
    let lb_idx: Arc<[isize]> = (0..m).map(|i| (2 * i + 1) as isize).collect();
    let mu = act.gather(mu_idx, &[m])?;
    let scale = act.gather(lb_idx, &[m])?.exp()?.clamp_min(F::of(B_MIN))?;
    Ok((mu, scale))
}

/// Differentiable total latent rate in bits of several pyramids sharing one network.
///
/// `latents` holds one flat var per sample (already relaxed); contexts are read
/// from the same values that are being priced.
pub fn rate_graph<'t, F: Real>(
    latents: &[Var<'t, F>],
    dims: &PyramidDims,
    params: &[Var<'t, F>],
    context: usize,
) -> Result<Var<'t, F>> {
    let first = latents.first().ok_or_else(|| invalid("rate of an empty slice"))?;
    let tape = first.tape();
    let per = dims.total();
    let base = context_indices(dims, context);
    let mut idx = Vec::with_capacity(base.len() * latents.len());
    for s in 0..latents.len() {
        let off = (s * per) as isize;
        idx.extend(base.iter().map(|&i| if i < 0 { -1 } else { i + off }));
    }
    let flat = if latents.len() == 1 { *first } else { tape.concat(latents)? };
    let m = per * latents.len();
    let ctx = flat.gather(idx.into(), &[m, context])?;
    let (mu, scale) = predict_graph(ctx, params)?;
    flat.laplace_bits(mu, scale, F::one())?.sum()
}

// ---------------------------------------------------------------------------
// Weight quantization

/// Network weights snapped to a uniform grid: value `j` is `ints[j] * step`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeights {
    pub step: f64,
    pub ints: Vec<i32>,
}

impl QuantizedWeights {
    pub fn values(&self) -> Vec<f64> {
        self.ints.iter().map(|&k| k as f64 * self.step).collect()
    }

    /// Scale of the zero-mean Laplace prior in units of `step`: `std(values) / sqrt(2) / step`,
    /// rounded to f32 as stored in the bitstream and floored at [`B_MIN`].
    pub fn prior_scale(&self) -> f32 {
        if self.ints.is_empty() {
            return B_MIN as f32;
        }
        let n = self.ints.len() as f64;
        let mean = self.ints.iter().map(|&k| k as f64).sum::<f64>() / n;
        let var = self.ints.iter().map(|&k| (k as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = (var.sqrt() / std::f64::consts::SQRT_2).max(B_MIN);
        scale as f32
    }
}

/// `round(w / step) * step` elementwise.
pub fn quantize_weights(weights: &[f64], step: f64) -> Result<QuantizedWeights> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(invalid(format!("quantization step must be positive, got {step}")));
    }
    let ints = weights
        .iter()
        .map(|&w| {
            let k = (w / step).round();
            if k.abs() > i32::MAX as f64 / 2.0 {
                Err(invalid(format!("weight {w} too large for step {step}")))
            } else {
                Ok(k as i32)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedWeights { step, ints })
}

/// Bits to code quantized weights under their discretized zero-mean Laplace prior.
pub fn weight_rate_bits(q: &QuantizedWeights) -> f64 {
    let b = q.prior_scale() as f64;
    q.ints.iter().map(|&k| bin_bits(k as f64, 0.0, b, 1.0)).sum()
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Geometric step grid `std * 2^k`, `k = k_min..=k_max`, coarsest last.
pub fn step_grid(std: f64, k_min: i32, k_max: i32) -> Vec<f64> {
    let base = if std > 0.0 { std } else { 1.0 };
    (k_min..=k_max).map(|k| base * 2f64.powi(k)).collect()
}

/// Penalty on prediction drift in the entropy-net step search.
pub const ENTROPY_STEP_PENALTY: f64 = 1e4;

/// Result of a step-size search.
#[derive(Clone, Debug)]
pub struct StepSearch {
    pub step: f64,
    pub candidates: Vec<(f64, f64)>,
}

/// Mean squared difference of the `(mu, ln b)` predictions of two networks on `probe` contexts.
pub fn prediction_mse(a: &EntropyNetWeights<f64>, b: &EntropyNetWeights<f64>, probe: &[Vec<f64>]) -> Result<f64> {
    if probe.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for ctx in probe {
        let (pa, pb) = (predict_params(ctx, a)?, predict_params(ctx, b)?);
        acc += (pa.mu - pb.mu).powi(2) + (pa.scale.ln() - pb.scale.ln()).powi(2);
    }
    Ok(acc / (2 * probe.len()) as f64)
}

/// Picks one step for a group of entropy networks by exhaustive search over
/// `std(all weights) * 2^k, k = -8..=0`, minimizing weight bits plus
/// [`ENTROPY_STEP_PENALTY`] times the prediction drift on each net's probe contexts.
pub fn search_entropy_step(nets: &[EntropyNetWeights<f64>], probes: &[Vec<Vec<f64>>]) -> Result<StepSearch> {
    if nets.len() != probes.len() {
        return Err(invalid("one probe set per network required"));
    }
    let all: Vec<f64> = nets.iter().flat_map(|n| n.flatten()).collect();
    let mut candidates = Vec::new();
    for step in step_grid(std_dev(&all), -8, 0) {
        let mut objective = 0.0;
        for (net, probe) in nets.iter().zip(probes) {
            let q = quantize_weights(&net.flatten(), step)?;
            let snapped = EntropyNetWeights::from_flat(net.config, &q.values())?;
            objective += weight_rate_bits(&q) + ENTROPY_STEP_PENALTY * prediction_mse(net, &snapped, probe)?;
        }
        candidates.push((step, objective));
    }
    let step = candidates
        .iter()
        .fold((f64::NAN, f64::INFINITY), |best, &(s, o)| if o < best.1 { (s, o) } else { best })
        .0;
    if !step.is_finite() {
        return Err(Error::NonFinite("entropy step search".into()));
    }
    Ok(StepSearch { step, candidates })
}

/// Contexts of every code of `q`, as f64 rows, for use as a probe set.
pub fn probe_contexts(q: &QuantizedPyramid, context: usize) -> Vec<Vec<f64>> {
    let idx = context_indices(&q.dims, context);
    idx.chunks(context)
        .map(|row| row.iter().map(|&i| if i < 0 { 0.0 } else { q.values[i as usize] as f64 }).collect())
        .collect()
}
