//! Lightweight synthesis network: three 1x1 convolutions followed by two 3x3
//! residual convolutions, applied to the upsampled latent stack.

use rand::Rng;

use crate::entropy_model::{quantize_weights, std_dev, step_grid, weight_rate_bits, QuantizedWeights};
use crate::error::{invalid, shape_err, Result};
use crate::latents::{upsample_concat_quantized, QuantizedPyramid};
use crate::numerics::ops::conv2d;
use crate::numerics::{Real, Tape, Tensor, Var};

/// Named presets: `(name, D1, D2)`. The table position is the on-disk decoder id.
pub const PRESETS: [(&str, usize, usize); 8] = [
    ("v4-40", 40, 0),
    ("v4-160", 160, 0),
    ("v4-240", 240, 0),
    ("v4-480", 480, 0),
    ("v4-960", 960, 0),
    ("v4-1200", 1200, 0),
    ("v5-240", 240, 40),
    ("v5-320", 320, 40),
];

/// Decoder id written for configurations outside [`PRESETS`].
pub const CUSTOM_ID: u8 = 255;
/// Output channels.
pub const OUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub latent_channels: usize,
    pub d1: usize,
    /// Width of the optional second 1x1 layer; 0 means the layer is absent.
    pub d2: usize,
}

impl DecoderConfig {
    pub fn new(latent_channels: usize, d1: usize, d2: usize) -> Result<Self> {
        if latent_channels == 0 || d1 == 0 {
            return Err(invalid("decoder needs at least one input channel and D1 > 0"));
        }
        Ok(Self { latent_channels, d1, d2 })
    }

    pub fn preset(name: &str, latent_channels: usize) -> Result<Self> {
        let &(_, d1, d2) = PRESETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| invalid(format!("unknown decoder preset {name:?}")))?;
        Self::new(latent_channels, d1, d2)
    }

    /// Preset index, or [`CUSTOM_ID`].
    pub fn id(&self) -> u8 {
        PRESETS
            .iter()
            .position(|&(_, d1, d2)| d1 == self.d1 && d2 == self.d2)
            .map_or(CUSTOM_ID, |i| i as u8)
    }

    pub fn name(&self) -> String {
        match PRESETS.get(self.id() as usize) {
            Some((n, _, _)) => n.to_string(),
            None => format!("custom-{}-{}", self.d1, self.d2),
        }
    }

    fn din3(&self) -> usize {
        if self.d2 > 0 {
            self.d2
        } else {
            self.d1
        }
    }

    /// `(kernel shape, bias len)` of each convolution, in parameter order.
    pub fn layer_shapes(&self) -> Vec<([usize; 4], usize)> {
        let mut v = vec![([1, 1, self.latent_channels, self.d1], self.d1)];
        if self.d2 > 0 {
            v.push(([1, 1, self.d1, self.d2], self.d2));
        }
        v.push(([1, 1, self.din3(), OUT_CHANNELS], OUT_CHANNELS));
        v.push(([3, 3, OUT_CHANNELS, OUT_CHANNELS], OUT_CHANNELS));
        v.push(([3, 3, OUT_CHANNELS, OUT_CHANNELS], OUT_CHANNELS));
        v
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(k, b)| k.iter().product::<usize>() + b).sum()
    }
}

/// Kernels `[kh, kw, cin, cout]` and biases, interleaved `[k1, b1, (k2, b2), k3, b3, k4, b4, k5, b5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights<F: Real> {
    pub config: DecoderConfig,
    pub params: Vec<Tensor<F>>,
}

impl<F: Real> DecoderWeights<F> {
    /// Uniform `±1/sqrt(fan_in)` kernels and zero biases.
    pub fn init<R: Rng>(config: DecoderConfig, rng: &mut R) -> Self {
        let mut params = Vec::new();
        for (k, b) in config.layer_shapes() {
            let fan_in = (k[0] * k[1] * k[2]) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let w: Vec<F> = (0..k.iter().product::<usize>())
                .map(|_| F::of(rng.random_range(-bound..bound)))
                .collect();
            params.push(Tensor::from_parts(k.to_vec(), w));
            // random biases keep hidden units distinct while the latents are still zero
            let bias: Vec<F> = (0..b).map(|_| F::of(rng.random_range(-bound..bound))).collect();
            params.push(Tensor::from_parts(vec![b], bias));
        }
        Self { config, params }
    }

    pub fn zeros(config: DecoderConfig) -> Self {
        let params = config
            .layer_shapes()
            .into_iter()
            .flat_map(|(k, b)| [Tensor::zeros(k.to_vec()), Tensor::zeros(vec![b])])
            .collect();
        Self { config, params }
    }

    pub fn from_flat(config: DecoderConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != config.param_count() {
            return Err(shape_err("decoder", format!("{} values for {} parameters", flat.len(), config.param_count())));
        }
        let mut params = Vec::new();
        let mut off = 0;
        for (k, b) in config.layer_shapes() {
            let n = k.iter().product::<usize>();
            params.push(Tensor::from_f64(k.to_vec(), &flat[off..off + n])?);
            off += n;
            params.push(Tensor::from_f64(vec![b], &flat[off..off + b])?);
            off += b;
        }
        Ok(Self { config, params })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.to_f64_vec()).collect()
    }

    pub fn cast<G: Real>(&self) -> DecoderWeights<G> {
        DecoderWeights { config: self.config, params: self.params.iter().map(|t| t.cast()).collect() }
    }
}

/// Differentiable decoder over `[H, W, L]` or `[N, H, W, L]` inputs; `params` in
/// [`DecoderWeights::params`] order. Output is unclamped.
pub fn decode_graph<'t, F: Real>(input: Var<'t, F>, params: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    let n = params.len() / 2;
    if params.len() % 2 != 0 || !(4..=5).contains(&n) {
        return Err(shape_err("decode", format!("{} parameter tensors", params.len())));
    }
    let mut h = input;
    // hidden 1x1 layers take ReLU; the layer producing 3 channels stays linear
    for k in 0..n - 3 {
        h = conv2d(h, params[2 * k], params[2 * k + 1])?.relu()?;
    }
    let k = n - 3;
    let h3 = conv2d(h, params[2 * k], params[2 * k + 1])?;
    let r = 2 * (n - 2);
    // ReLU sits on the residual branch, so zeroed residual layers are exact identities
    let h4 = h3.add(conv2d(h3, params[r], params[r + 1])?.relu()?)?;
    h4.add(conv2d(h4, params[r + 2], params[r + 3])?)
}

/// Decodes one upsampled latent stack `[H, W, L]` to an unclamped `[H, W, 3]` image.
pub fn decode_tensor<F: Real>(input: &Tensor<F>, weights: &DecoderWeights<F>) -> Result<Tensor<F>> {
    let shape = input.shape();
    if shape.last() != Some(&weights.config.latent_channels) {
        return Err(shape_err(
            "decode",
            format!("input {shape:?} for decoder with {} latent channels", weights.config.latent_channels),
        ));
    }
    let tape = Tape::<F>::new();
    let vars: Vec<_> = weights.params.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(decode_graph(tape.constant(input.clone()), &vars)?.value())
}

/// Decodes a quantized pyramid to an unclamped `[H, W, 3]` image.
pub fn decode<F: Real>(q: &QuantizedPyramid, weights: &DecoderWeights<F>) -> Result<Tensor<F>> {
    if q.dims.num_scales() != weights.config.latent_channels {
        return Err(shape_err(
            "decode",
            format!("{} scales for decoder with {} latent channels", q.dims.num_scales(), weights.config.latent_channels),
        ));
    }
    decode_tensor(&upsample_concat_quantized::<F>(q)?, weights)
}

/// Clamps an image to `[0, 1]` for export.
pub fn clamp_unit<F: Real>(image: &Tensor<F>) -> Tensor<F> {
    image.map(|v| v.max(F::zero()).min(F::one()))
}

/// Result of the decoder step search.
#[derive(Clone, Debug)]
pub struct DecoderQuantization {
    pub step: f64,
    /// One quantized weight vector per decoder.
    pub weights: Vec<QuantizedWeights>,
    /// `(step, mse)` for every grid point, finest first.
    pub candidates: Vec<(f64, f64)>,
    /// False when no grid point met the budget and the finest step was used.
    pub within_budget: bool,
}

impl DecoderQuantization {
    pub fn decoder(&self, config: DecoderConfig, i: usize) -> Result<DecoderWeights<f64>> {
        DecoderWeights::from_flat(config, &self.weights[i].values())
    }
}

/// Mean squared difference between the clamped outputs of two decoders on `probes`.
pub fn output_mse(a: &DecoderWeights<f64>, b: &DecoderWeights<f64>, probes: &[Tensor<f64>]) -> Result<f64> {
    let (mut acc, mut count) = (0.0, 0usize);
    for p in probes {
        let ya = clamp_unit(&decode_tensor(p, a)?);
        let yb = clamp_unit(&decode_tensor(p, b)?);
        acc += ya.data().iter().zip(yb.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        count += ya.numel();
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}

/// Picks one quantization step shared by a group of decoders: the coarsest of
/// `std(all weights) * 2^k, k = -16..=0` whose mean output MSE over all probes
/// stays within `mse_budget`. Each decoder is probed on its own inputs.
pub fn post_quantize_decoders(
    decoders: &[DecoderWeights<f64>],
    probes: &[Vec<Tensor<f64>>],
    mse_budget: f64,
) -> Result<DecoderQuantization> {
    if decoders.is_empty() || decoders.len() != probes.len() {
        return Err(invalid("one probe set per decoder required"));
    }
    let all: Vec<f64> = decoders.iter().flat_map(|d| d.flatten()).collect();
    let mut candidates = Vec::new();
    let mut chosen: Option<(f64, Vec<QuantizedWeights>)> = None;
    let mut finest: Option<(f64, Vec<QuantizedWeights>)> = None;
    for step in step_grid(std_dev(&all), -16, 0) {
        let (mut acc, mut count) = (0.0, 0usize);
        let mut qs = Vec::with_capacity(decoders.len());
        for (d, p) in decoders.iter().zip(probes) {
            let q = quantize_weights(&d.flatten(), step)?;
            let snapped = DecoderWeights::from_flat(d.config, &q.values())?;
            let pixels: usize = p.iter().map(|t| t.numel() / d.config.latent_channels * OUT_CHANNELS).sum();
            acc += output_mse(d, &snapped, p)? * pixels as f64;
            count += pixels;
            qs.push(q);
        }
        let mse = if count == 0 { 0.0 } else { acc / count as f64 };
        candidates.push((step, mse));
        if finest.is_none() {
            finest = Some((step, qs.clone()));
        }
        if mse <= mse_budget {
            chosen = Some((step, qs));
        }
    }
    let within_budget = chosen.is_some();
    let (step, weights) = chosen.or(finest).expect("grid is non-empty");
    if !within_budget {
        log::warn!("no decoder step meets the MSE budget {mse_budget:e}; using the finest step {step:e}");
    }
    Ok(DecoderQuantization { step, weights, candidates, within_budget })
}

/// Single-decoder form of [`post_quantize_decoders`].
pub fn post_quantize_decoder(
    weights: &DecoderWeights<f64>,
    probes: &[Tensor<f64>],
    mse_budget: f64,
) -> Result<DecoderQuantization> {
    post_quantize_decoders(std::slice::from_ref(weights), &[probes.to_vec()], mse_budget)
}

/// Bits for quantized decoder weights under their discretized zero-mean Laplace prior.
pub fn decoder_rate_bits(q: &QuantizedWeights) -> f64 {
    weight_rate_bits(q)
}
