//! The utility side of the pipeline and the three-phase driver.
//!
//! Phase 1 fits every slice to randomly drawn originals as an overfitted image
//! codec. Phase 2 trades latent rate against a plug-in distillation loss under
//! a two-stage multiplier. Phase 3 rounds the latents, snaps both networks to
//! their searched grids and writes the bitstream.

pub mod checkpoint;
pub mod classifier;
pub mod losses;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{encode_dataset, BitAllocation, DatasetContent};
use crate::data::LabeledImageSet;
use crate::decoder::{clamp_unit, decode, decode_graph, post_quantize_decoders, DecoderConfig, DecoderWeights};
use crate::entropy_model::{
    probe_contexts, quantize_weights, rate_graph, search_entropy_step, EntropyNetConfig, EntropyNetWeights,
};
use crate::error::{invalid, Error, Result};
use crate::latents::{
    pyramid_dims, quantize_round, relax_uniform_noise, upsample_concat, upsample_concat_quantized, LatentPyramid,
    NoiseSource, PyramidDims, QuantizedPyramid, Relaxation,
};
use crate::numerics::{adam_update, AdamConfig, AdamState, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use classifier::{accuracy, predict, train_classifier, ClassifierConfig, TrainConfig};
pub use losses::{inner_unroll, loss_dm, loss_gm, loss_tm, train_expert, unroll_values, ExpertTrajectory};

/// Plug-in distillation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Gradient matching.
    Gm,
    /// Trajectory matching.
    Tm,
    /// Distribution matching.
    Dm,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gm" => Ok(Self::Gm),
            "tm" => Ok(Self::Tm),
            "dm" => Ok(Self::Dm),
            other => Err(invalid(format!("unknown loss `{other}` (expected gm, tm or dm)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gm => "gm",
            Self::Tm => "tm",
            Self::Dm => "dm",
        })
    }
}

/// `lambda_hi` during the first half of Phase 2, `lambda_lo` afterwards.
pub fn lambda_schedule(step: usize, total: usize, lambda_hi: f64, lambda_lo: f64) -> Result<f64> {
    if lambda_lo > lambda_hi {
        return Err(invalid(format!("lambda_lo {lambda_lo} exceeds lambda_hi {lambda_hi}")));
    }
    if step >= total {
        return Err(invalid(format!("step {step} outside schedule of {total}")));
    }
    Ok(if 2 * step < total { lambda_hi } else { lambda_lo })
}

/// Every setting of one distillation run.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub num_classes: usize,
    pub spc: usize,
    pub height: usize,
    pub width: usize,
    pub scales: usize,
    pub entropy: EntropyNetConfig,
    pub decoder: DecoderConfig,
    /// Samples sharing one entropy network and one decoder.
    pub slice_size: usize,
    pub classifier: ClassifierConfig,
    pub loss: LossKind,
    pub beta: f64,
    pub lambda_hi: f64,
    pub lambda_lo: f64,
    pub init_steps: usize,
    pub joint_steps: usize,
    pub init_lr: f64,
    pub joint_lr: f64,
    /// Mean squared output error allowed by decoder post-quantization.
    pub mse_budget: f64,
    pub real_per_class: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub expert_steps: usize,
    pub expert_lr: f64,
    /// Student steps per trajectory-matching segment.
    pub tm_student_steps: usize,
    /// Expert steps per trajectory-matching segment.
    pub tm_expert_steps: usize,
    pub seed: u64,
}

impl DistillConfig {
    /// Desk-scale defaults: as many scales as fit (at most 5), context 8, a
    /// 16-wide three-layer entropy net, the smallest decoder preset and a
    /// two-block, 16-channel classifier.
    pub fn desk(num_classes: usize, spc: usize, height: usize, width: usize) -> Result<Self> {
        let side = height.min(width).max(1);
        let scales = (usize::BITS - side.leading_zeros()).min(5) as usize;
        let blocks = if height % 4 == 0 && width % 4 == 0 { 2 } else { 1 };
        Ok(Self {
            num_classes,
            spc,
            height,
            width,
            scales,
            entropy: EntropyNetConfig::new(8, 16, 3)?,
            decoder: DecoderConfig::preset("v4-40", scales)?,
            slice_size: spc,
            classifier: ClassifierConfig::new(blocks, 16, num_classes, height, width)?,
            loss: LossKind::Dm,
            beta: 1e6,
            lambda_hi: 1e3,
            lambda_lo: 85.0,
            init_steps: 1000,
            joint_steps: 200,
            init_lr: 1e-2,
            joint_lr: 1e-3,
            mse_budget: 5e-5,
            real_per_class: 16,
            inner_steps: 2,
            inner_lr: 1e-2,
            expert_steps: 20,
            expert_lr: 1e-2,
            tm_student_steps: 2,
            tm_expert_steps: 4,
            seed: 0,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.num_classes * self.spc
    }

    pub fn num_slices(&self) -> usize {
        self.num_samples().div_ceil(self.slice_size.max(1))
    }

    pub fn dims(&self) -> Result<PyramidDims> {
        pyramid_dims(self.height, self.width, self.scales)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.spc == 0 || self.slice_size == 0 {
            return Err(invalid("need K >= 2, spc >= 1 and slice_size >= 1"));
        }
        self.dims()?;
        if self.decoder.latent_channels != self.scales {
            return Err(invalid(format!(
                "decoder expects {} latent channels but the pyramid has {} scales",
                self.decoder.latent_channels, self.scales
            )));
        }
        let c = &self.classifier;
        if c.num_classes != self.num_classes || c.height != self.height || c.width != self.width {
            return Err(invalid("classifier shape does not match the dataset"));
        }
        if self.lambda_lo > self.lambda_hi || self.lambda_lo < 0.0 {
            return Err(invalid(format!("need 0 <= lambda_lo <= lambda_hi, got {} and {}", self.lambda_lo, self.lambda_hi)));
        }
        for (name, v) in [("beta", self.beta), ("init_lr", self.init_lr), ("joint_lr", self.joint_lr), ("mse_budget", self.mse_budget)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.real_per_class == 0 {
            return Err(invalid("real_per_class must be positive"));
        }
        if self.loss == LossKind::Tm
            && (self.tm_student_steps >= self.tm_expert_steps || self.tm_expert_steps > self.expert_steps)
        {
            return Err(invalid(format!(
                "trajectory matching needs student steps < expert segment <= expert steps, got {} / {} / {}",
                self.tm_student_steps, self.tm_expert_steps, self.expert_steps
            )));
        }
        Ok(())
    }
}

/// How far a run has progressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Fresh = 0,
    Initialized = 1,
    Optimized = 2,
}

impl Phase {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Fresh),
            1 => Ok(Self::Initialized),
            2 => Ok(Self::Optimized),
            _ => Err(Error::Format(format!("unknown phase {v}"))),
        }
    }
}

/// Optimizable latents and networks plus fixed labels. Samples are ordered
/// class-major and sliced contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub dims: PyramidDims,
    pub num_classes: usize,
    pub slice_size: usize,
    pub latents: Vec<Tensor<f64>>,
    pub labels: Vec<u32>,
    pub entropy: Vec<EntropyNetWeights<f64>>,
    pub decoders: Vec<DecoderWeights<f64>>,
    pub phase: Phase,
    pub seed: u64,
}

fn phase_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SLICE_STREAM_BASE: u64 = 1 << 32;

impl DistillState {
    /// Zero latents, freshly initialized networks.
    pub fn new(cfg: &DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims()?;
        let mut rng = phase_rng(cfg.seed, 0);
        let n = cfg.num_samples();
        let slices = cfg.num_slices();
        let entropy = (0..slices).map(|_| EntropyNetWeights::init(cfg.entropy, &mut rng)).collect();
        let decoders = (0..slices).map(|_| DecoderWeights::init(cfg.decoder, &mut rng)).collect();
        Ok(Self {
            latents: vec![Tensor::zeros(vec![dims.total()]); n],
            labels: (0..n).map(|i| (i / cfg.spc) as u32).collect(),
            dims,
            num_classes: cfg.num_classes,
            slice_size: cfg.slice_size,
            entropy,
            decoders,
            phase: Phase::Fresh,
            seed: cfg.seed,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn num_slices(&self) -> usize {
        self.entropy.len()
    }

    pub fn slice_range(&self, s: usize) -> std::ops::Range<usize> {
        s * self.slice_size..((s + 1) * self.slice_size).min(self.len())
    }

    pub fn quantized(&self) -> Result<Vec<QuantizedPyramid>> {
        self.latents
            .iter()
            .map(|z| Ok(quantize_round(&LatentPyramid::new(self.dims.clone(), z.clone())?)))
            .collect()
    }

    /// Clamped decoded images of the rounded latents, `[N, H, W, 3]`.
    pub fn decoded_images(&self) -> Result<Tensor<f64>> {
        let q = self.quantized()?;
        let mut data = Vec::new();
        for s in 0..self.num_slices() {
            for i in self.slice_range(s) {
                data.extend(clamp_unit(&decode(&q[i], &self.decoders[s])?).to_vec());
            }
        }
        Tensor::new(vec![self.len(), self.dims.height, self.dims.width, 3], data)
    }
}

/// Leaf vars of a state on one tape.
pub struct StateVars<'t> {
    pub latents: Vec<Var<'t, f64>>,
    pub entropy: Vec<Vec<Var<'t, f64>>>,
    pub decoders: Vec<Vec<Var<'t, f64>>>,
}

impl<'t> StateVars<'t> {
    pub fn new(tape: &'t Tape<f64>, state: &DistillState) -> Self {
        Self {
            latents: state.latents.iter().map(|z| tape.leaf(z.clone())).collect(),
            entropy: state.entropy.iter().map(|n| n.params.iter().map(|p| tape.leaf(p.clone())).collect()).collect(),
            decoders: state.decoders.iter().map(|n| n.params.iter().map(|p| tape.leaf(p.clone())).collect()).collect(),
        }
    }

    /// Latents, then every entropy net, then every decoder.
    pub fn all(&self) -> Vec<Var<'t, f64>> {
        let mut v = self.latents.clone();
        v.extend(self.entropy.iter().flatten().copied());
        v.extend(self.decoders.iter().flatten().copied());
        v
    }
}

/// Mutable views of a state's tensors in [`StateVars::all`] order.
fn state_params(state: &mut DistillState) -> Vec<&mut Tensor<f64>> {
    let mut v: Vec<&mut Tensor<f64>> = state.latents.iter_mut().collect();
    v.extend(state.entropy.iter_mut().flat_map(|n| n.params.iter_mut()));
    v.extend(state.decoders.iter_mut().flat_map(|n| n.params.iter_mut()));
    v
}

fn apply_adam(targets: Vec<&mut Tensor<f64>>, grads: &[Tensor<f64>], adam: &mut AdamState<f64>, lr: f64) -> Result<()> {
    for g in grads {
        g.ensure_finite("gradient")?;
    }
    let mut params: Vec<Tensor<f64>> = targets.iter().map(|t| (**t).clone()).collect();
    adam_update(&mut params, grads, adam, &AdamConfig::with_lr(lr))?;
    for (t, p) in targets.into_iter().zip(params) {
        *t = p;
    }
    Ok(())
}

/// Decoded images `[n, H, W, 3]` of the given latents under one decoder; the
/// latents pass through `relax` (rounding with identity gradient, or nothing).
pub fn decode_slice<'t>(
    latents: &[Var<'t, f64>],
    decoder: &[Var<'t, f64>],
    dims: &PyramidDims,
    relax: Relaxation,
) -> Result<Var<'t, f64>> {
    let first = latents.first().ok_or_else(|| invalid("decode of an empty slice"))?;
    let tape = first.tape();
    let stacks = latents
        .iter()
        .map(|z| {
            let z = match relax {
                Relaxation::Ste => z.round_ste()?,
                Relaxation::Identity => *z,
                Relaxation::Noise => return Err(invalid("the decoder path takes rounded or exact latents")),
            };
            upsample_concat(z, dims)
        })
        .collect::<Result<Vec<_>>>()?;
    let l = dims.num_scales();
    let batch = tape.concat(&stacks)?.reshape(&[latents.len(), dims.height, dims.width, l])?;
    decode_graph(batch, decoder)
}

/// Decoded images of every sample, `[N, H, W, 3]`, unclamped.
pub fn synthesize<'t>(state: &DistillState, vars: &StateVars<'t>, relax: Relaxation) -> Result<Var<'t, f64>> {
    let tape = vars.latents[0].tape();
    let parts = (0..state.num_slices())
        .map(|s| decode_slice(&vars.latents[state.slice_range(s)], &vars.decoders[s], &state.dims, relax))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (state.dims.height, state.dims.width);
    tape.concat(&parts)?.reshape(&[state.len(), h, w, 3])
}

/// Noisy-relaxation latent rate of every slice, summed, in bits.
pub fn rate_total<'t, R: Rng>(
    state: &DistillState,
    vars: &StateVars<'t>,
    context: usize,
    rng: &mut R,
) -> Result<Var<'t, f64>> {
    let mut total: Option<Var<'t, f64>> = None;
    for s in 0..state.num_slices() {
        let noisy = vars.latents[state.slice_range(s)]
            .iter()
            .map(|z| relax_uniform_noise(*z, NoiseSource::Random(&mut *rng)))
            .collect::<Result<Vec<_>>>()?;
        let r = rate_graph(&noisy, &state.dims, &vars.entropy[s], context)?;
        total = Some(match total {
            Some(t) => t.add(r)?,
            None => r,
        });
    }
    total.ok_or_else(|| invalid("state has no slices"))
}

/// Randomness drawn once per Phase-2 step and held fixed inside it.
#[derive(Clone, Debug)]
pub enum UtilityContext {
    /// Checkpoints at which gradients are compared.
    Gm { trace: Vec<Vec<Tensor<f64>>> },
    /// Starting index into the expert trajectory.
    Tm { start: usize },
    /// Random classifier body used as the feature extractor.
    Dm { extractor: Vec<Tensor<f64>> },
}

/// A class-balanced batch of originals.
#[derive(Clone, Debug)]
pub struct RealBatch {
    pub images: Tensor<f64>,
    pub labels: Vec<u32>,
}

impl RealBatch {
    pub fn draw<R: Rng>(data: &LabeledImageSet, per_class: usize, rng: &mut R) -> Result<Self> {
        let by_class: Vec<Vec<usize>> = (0..data.num_classes).map(|c| data.class_indices(c)).collect();
        let idx = losses::balanced_batch(&by_class, per_class, rng)?;
        Ok(Self { images: data.batch(&idx)?, labels: idx.iter().map(|&i| data.labels[i]).collect() })
    }
}

/// Value and parts of the Phase-2 objective.
pub struct JointTerms<'t> {
    pub total: Var<'t, f64>,
    /// Total noisy latent bits over all samples.
    pub rate_bits: Var<'t, f64>,
    pub utility: Var<'t, f64>,
}

/// Utility of the decoded synthetic set `syn` under a fixed context.
pub fn utility_graph<'t>(
    cfg: &DistillConfig,
    syn: Var<'t, f64>,
    syn_labels: &[u32],
    real: &RealBatch,
    ctx: &UtilityContext,
    expert: Option<&ExpertTrajectory<f64>>,
) -> Result<Var<'t, f64>> {
    let tape = syn.tape();
    let c = &cfg.classifier;
    match ctx {
        UtilityContext::Gm { trace } => {
            loss_gm(c, tape.constant(real.images.clone()), &real.labels, syn, syn_labels, trace)
        }
        UtilityContext::Tm { start } => {
            let expert = expert.ok_or_else(|| invalid("trajectory matching without an expert"))?;
            loss_tm(c, expert, syn, syn_labels, *start, cfg.tm_student_steps, cfg.tm_expert_steps, cfg.inner_lr)
        }
        UtilityContext::Dm { extractor } => {
            loss_dm(c, extractor, tape.constant(real.images.clone()), &real.labels, syn, syn_labels)
        }
    }
}

/// Mean per-sample rate plus `lambda` times the utility of the STE-decoded set.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective<'t, R: Rng>(
    cfg: &DistillConfig,
    state: &DistillState,
    vars: &StateVars<'t>,
    real: &RealBatch,
    ctx: &UtilityContext,
    expert: Option<&ExpertTrajectory<f64>>,
    lambda: f64,
    decode_relax: Relaxation,
    rng: &mut R,
) -> Result<JointTerms<'t>> {
    let rate_bits = rate_total(state, vars, cfg.entropy.context, rng)?;
    let syn = synthesize(state, vars, decode_relax)?;
    let utility = utility_graph(cfg, syn, &state.labels, real, ctx, expert)?;
    let total = rate_bits.scale(1.0 / state.len() as f64)?.add(utility.scale(lambda)?)?;
    Ok(JointTerms { total, rate_bits, utility })
}

/// Draws the per-step randomness of the configured loss.
pub fn draw_context<R: Rng>(
    cfg: &DistillConfig,
    state: &DistillState,
    expert: Option<&ExpertTrajectory<f64>>,
    rng: &mut R,
) -> Result<UtilityContext> {
    match cfg.loss {
        LossKind::Gm => {
            let theta0: Vec<Tensor<f64>> = cfg.classifier.init(rng);
            let syn = decoded_relaxed(state)?;
            let mut trace = unroll_values(&cfg.classifier, &syn, &state.labels, &theta0, cfg.inner_steps, cfg.inner_lr)?;
            trace.truncate(cfg.inner_steps.max(1));
            Ok(UtilityContext::Gm { trace })
        }
        LossKind::Tm => {
            let expert = expert.ok_or_else(|| invalid("trajectory matching without an expert"))?;
            let last = expert.len().checked_sub(cfg.tm_expert_steps + 1).ok_or_else(|| invalid("expert too short"))?;
            Ok(UtilityContext::Tm { start: rng.random_range(0..=last) })
        }
        LossKind::Dm => Ok(UtilityContext::Dm { extractor: cfg.classifier.init(rng) }),
    }
}

/// Unclamped STE-forward decode of the current state, as used by Phase 2.
fn decoded_relaxed(state: &DistillState) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let vars = StateVars {
        latents: state.latents.iter().map(|z| tape.constant(z.clone())).collect(),
        entropy: Vec::new(),
        decoders: state.decoders.iter().map(|n| n.params.iter().map(|p| tape.constant(p.clone())).collect()).collect(),
    };
    Ok(synthesize(state, &vars, Relaxation::Ste)?.value())
}

/// One row of the Phase-2 log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub rate_bits: f64,
    pub utility: f64,
    pub lambda: f64,
}

/// One Adam step of Phase 2 on latents and both networks.
pub fn joint_step<R: Rng>(
    cfg: &DistillConfig,
    state: &mut DistillState,
    adam: &mut AdamState<f64>,
    data: &LabeledImageSet,
    expert: Option<&ExpertTrajectory<f64>>,
    step: usize,
    rng: &mut R,
) -> Result<MetricRow> {
    let lambda = lambda_schedule(step, cfg.joint_steps, cfg.lambda_hi, cfg.lambda_lo)?;
    let real = RealBatch::draw(data, cfg.real_per_class, rng)?;
    let ctx = draw_context(cfg, state, expert, rng)?;
    let tape = Tape::new();
    let vars = StateVars::new(&tape, state);
    let terms = joint_objective(cfg, state, &vars, &real, &ctx, expert, lambda, Relaxation::Ste, rng)?;
    let total = terms.total.item()?;
    if !total.is_finite() {
        return Err(Error::Divergence { step, detail: "joint objective is not finite".into() });
    }
    let row = MetricRow { step, rate_bits: terms.rate_bits.item()?, utility: terms.utility.item()?, lambda };
    let grads = tape.gradients(terms.total, &vars.all())?;
    apply_adam(state_params(state), &grads, adam, cfg.joint_lr)?;
    Ok(row)
}

/// Outcome of fitting one slice in Phase 1.
#[derive(Clone, Debug)]
pub struct SliceFit {
    pub latents: Vec<Tensor<f64>>,
    pub entropy: EntropyNetWeights<f64>,
    pub decoder: DecoderWeights<f64>,
    /// Pixel-mean squared error of the clamped decode of the rounded latents.
    pub mse: f64,
    /// Exact bits of the rounded latents under the final entropy net.
    pub rate_bits: f64,
}

/// Overfits one slice to `targets` (`[H, W, 3]` each) with Adam on
/// `mean rate + beta * pixel MSE`, starting from zero latents.
#[allow(clippy::too_many_arguments)]
pub fn fit_slice(
    targets: &[Tensor<f64>],
    dims: &PyramidDims,
    entropy: EntropyNetWeights<f64>,
    decoder: DecoderWeights<f64>,
    steps: usize,
    lr: f64,
    beta: f64,
    seed: u64,
    stream: u64,
) -> Result<SliceFit> {
    if targets.is_empty() {
        return Err(invalid("slice without targets"));
    }
    let n = targets.len();
    let (h, w) = (dims.height, dims.width);
    let target: Vec<f64> = targets.iter().flat_map(|t| t.to_vec()).collect();
    let target = Tensor::new(vec![n, h, w, 3], target)?;
    let mut state = DistillState {
        dims: dims.clone(),
        num_classes: 1,
        slice_size: n,
        latents: vec![Tensor::zeros(vec![dims.total()]); n],
        labels: vec![0; n],
        entropy: vec![entropy],
        decoders: vec![decoder],
        phase: Phase::Fresh,
        seed,
    };
    let mut rng = phase_rng(seed, stream);
    let mut adam = AdamState::default();
    let context = state.entropy[0].config.context;
    for step in 0..steps {
        let tape = Tape::new();
        let vars = StateVars::new(&tape, &state);
        let rate = rate_total(&state, &vars, context, &mut rng)?;
        let img = decode_slice(&vars.latents, &vars.decoders[0], dims, Relaxation::Ste)?;
        let mse = img.sub(tape.constant(target.clone()))?.square()?.mean()?;
        let loss = rate.scale(1.0 / n as f64)?.add(mse.scale(beta)?)?;
        if !loss.item()?.is_finite() {
            return Err(Error::Divergence { step, detail: "initialization loss is not finite".into() });
        }
        let grads = tape.gradients(loss, &vars.all())?;
        apply_adam(state_params(&mut state), &grads, &mut adam, lr)?;
    }
    let decoded = state.decoded_images()?;
    let mse = decoded.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / target.numel() as f64;
    let q = state.quantized()?;
    let mut rate_bits = 0.0;
    for p in &q {
        rate_bits += crate::entropy_model::rate_bits_latents(p, &state.entropy[0])?;
    }
    let DistillState { latents, mut entropy, mut decoders, .. } = state;
    Ok(SliceFit { latents, entropy: entropy.remove(0), decoder: decoders.remove(0), mse, rate_bits })
}

/// Phase 1: each sample gets its own randomly drawn original of its class and
/// every slice is fitted independently (in parallel).
pub fn phase1(cfg: &DistillConfig, state: &mut DistillState, data: &LabeledImageSet) -> Result<Vec<SliceFit>> {
    check_data(cfg, data)?;
    let mut rng = phase_rng(cfg.seed, 1);
    let mut originals = vec![0usize; state.len()];
    for c in 0..cfg.num_classes {
        let mut pool = data.class_indices(c);
        classifier::shuffle(&mut pool, &mut rng);
        for j in 0..cfg.spc {
            originals[c * cfg.spc + j] = pool[j % pool.len()];
        }
    }
    let fits = (0..state.num_slices())
        .into_par_iter()
        .map(|s| {
            let targets = state
                .slice_range(s)
                .map(|i| Tensor::new(vec![cfg.height, cfg.width, 3], data.image(originals[i]).iter().map(|&v| v as f64).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            fit_slice(
                &targets,
                &state.dims,
                state.entropy[s].clone(),
                state.decoders[s].clone(),
                cfg.init_steps,
                cfg.init_lr,
                cfg.beta,
                cfg.seed,
                SLICE_STREAM_BASE + s as u64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for (s, fit) in fits.iter().enumerate() {
        let range = state.slice_range(s);
        state.latents[range].clone_from_slice(&fit.latents);
        state.entropy[s] = fit.entropy.clone();
        state.decoders[s] = fit.decoder.clone();
    }
    state.phase = Phase::Initialized;
    Ok(fits)
}

/// Phase 2: `joint_steps` joint steps over all samples (whole classes per step).
pub fn phase2(
    cfg: &DistillConfig,
    state: &mut DistillState,
    data: &LabeledImageSet,
    expert: Option<&ExpertTrajectory<f64>>,
) -> Result<Vec<MetricRow>> {
    check_data(cfg, data)?;
    if state.phase < Phase::Initialized {
        return Err(invalid("joint optimization requires an initialized state"));
    }
    let mut rng = phase_rng(cfg.seed, 2);
    let mut adam = AdamState::default();
    let mut rows = Vec::with_capacity(cfg.joint_steps);
    for step in 0..cfg.joint_steps {
        rows.push(joint_step(cfg, state, &mut adam, data, expert, step, &mut rng)?);
    }
    state.phase = Phase::Optimized;
    Ok(rows)
}

/// Phase 3: rounds the latents, picks both weight steps and assembles the stream content.
pub fn phase3(cfg: &DistillConfig, state: &DistillState) -> Result<DatasetContent> {
    let q = state.quantized()?;
    let slices = state.num_slices();
    let mut entropy_probes = Vec::with_capacity(slices);
    let mut decoder_probes = Vec::with_capacity(slices);
    for s in 0..slices {
        let range = state.slice_range(s);
        entropy_probes.push(q[range.clone()].iter().flat_map(|p| probe_contexts(p, cfg.entropy.context)).collect());
        decoder_probes.push(q[range].iter().map(upsample_concat_quantized::<f64>).collect::<Result<Vec<_>>>()?);
    }
    let search = search_entropy_step(&state.entropy, &entropy_probes)?;
    let entropy_weights = state
        .entropy
        .iter()
        .map(|n| Ok(quantize_weights(&n.flatten(), search.step)?.ints))
        .collect::<Result<Vec<_>>>()?;
    let dq = post_quantize_decoders(&state.decoders, &decoder_probes, cfg.mse_budget)?;
    let content = DatasetContent {
        num_classes: cfg.num_classes,
        height: cfg.height,
        width: cfg.width,
        slice_size: cfg.slice_size,
        entropy: cfg.entropy,
        decoder: cfg.decoder,
        step_e: search.step,
        step_d: dq.step,
        latents: q,
        labels: state.labels.clone(),
        entropy_weights,
        decoder_weights: dq.weights.into_iter().map(|w| w.ints).collect(),
    };
    content.validate()?;
    Ok(content)
}

fn check_data(cfg: &DistillConfig, data: &LabeledImageSet) -> Result<()> {
    if data.height != cfg.height || data.width != cfg.width || data.num_classes != cfg.num_classes {
        return Err(invalid(format!(
            "dataset is {}x{} with {} classes, config expects {}x{} with {}",
            data.height, data.width, data.num_classes, cfg.height, cfg.width, cfg.num_classes
        )));
    }
    if let Some(c) = (0..cfg.num_classes).find(|&c| data.class_indices(c).is_empty()) {
        return Err(invalid(format!("class {c} has no training samples")));
    }
    Ok(())
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub stream: Vec<u8>,
    pub allocation: BitAllocation,
    pub content: DatasetContent,
    pub metrics: Vec<MetricRow>,
    pub state: DistillState,
}

pub const PHASE1_CHECKPOINT: &str = "phase1.ruck";
pub const PHASE2_CHECKPOINT: &str = "phase2.ruck";
pub const METRICS_FILE: &str = "metrics.csv";

/// Runs all three phases. With `work_dir`, each completed phase is
/// checkpointed there and existing checkpoints are resumed from; the
/// Phase-2 log is kept in `metrics.csv` next to them.
pub fn run_algorithm1(cfg: &DistillConfig, data: &LabeledImageSet, work_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let ckpt = |name: &str| work_dir.map(|d| d.join(name));
    let mut state = DistillState::new(cfg)?;
    let mut metrics = None;

    if let Some(p) = ckpt(PHASE2_CHECKPOINT).filter(|p| p.exists()) {
        state = load_checkpoint(&p, cfg)?;
        let m = ckpt(METRICS_FILE).expect("work dir present");
        metrics = Some(if m.exists() { read_metrics(&m)? } else { Vec::new() });
        log::info!("resuming from {}", p.display());
    } else if let Some(p) = ckpt(PHASE1_CHECKPOINT).filter(|p| p.exists()) {
        state = load_checkpoint(&p, cfg)?;
        log::info!("resuming from {}", p.display());
    }

    if state.phase < Phase::Initialized {
        let fits = phase1(cfg, &mut state, data)?;
        let worst = fits.iter().map(|f| f.mse).fold(0.0, f64::max);
        log::info!("phase 1 done: worst slice MSE {worst:.3e}");
        if let Some(p) = ckpt(PHASE1_CHECKPOINT) {
            save_checkpoint(&p, &state)?;
            state = load_checkpoint(&p, cfg)?;
        }
    }

    if state.phase < Phase::Optimized {
        let expert = match cfg.loss {
            LossKind::Tm => Some(train_expert::<f64>(
                &cfg.classifier,
                data,
                cfg.expert_steps,
                cfg.expert_lr,
                cfg.real_per_class,
                phase_rng(cfg.seed, 3).random(),
            )?),
            _ => None,
        };
        let rows = phase2(cfg, &mut state, data, expert.as_ref())?;
        if let Some(m) = ckpt(METRICS_FILE) {
            write_metrics(&m, &rows)?;
        }
        if let Some(p) = ckpt(PHASE2_CHECKPOINT) {
            save_checkpoint(&p, &state)?;
            state = load_checkpoint(&p, cfg)?;
        }
        metrics = Some(rows);
    }

    let content = phase3(cfg, &state)?;
    let (stream, allocation) = encode_dataset(&content)?;
    Ok(RunOutput { stream, allocation, content, metrics: metrics.unwrap_or_default(), state })
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut s = String::from("step,rate_bits,utility,lambda\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.rate_bits, r.utility, r.lambda));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize| Error::Format(format!("{}: malformed metrics row {line}", path.display()));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 1));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(i + 1));
            Ok(MetricRow {
                step: f[0].trim().parse().map_err(|_| bad(i + 1))?,
                rate_bits: num(f[1])?,
                utility: num(f[2])?,
                lambda: num(f[3])?,
            })
        })
        .collect()
}

/// Clamped decoded images `[N, H, W, 3]` and labels of a stream's content.
pub fn decode_content(content: &DatasetContent) -> Result<(Tensor<f64>, Vec<u32>)> {
    let mut data = Vec::with_capacity(content.latents.len() * content.height * content.width * 3);
    for s in 0..content.num_slices() {
        let net = content.decoder_net(s)?;
        for i in content.slice_range(s) {
            data.extend(clamp_unit(&decode(&content.latents[i], &net)?).to_vec());
        }
    }
    let images = Tensor::new(vec![content.latents.len(), content.height, content.width, 3], data)?;
    Ok((images, content.labels.clone()))
}

/// Test accuracies over independent training trials.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over trials.
    pub std: f64,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len().max(1) as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { accuracies, mean, std }
    }
}

/// Trains a fresh classifier on `images`/`labels` once per trial (seed
/// `seed + trial`, trials in parallel) and measures accuracy on `test`.
pub fn evaluate_images(
    images: &Tensor<f64>,
    labels: &[u32],
    test: &LabeledImageSet,
    cfg: &ClassifierConfig,
    train: &TrainConfig,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    if trials == 0 {
        return Err(invalid("evaluation needs at least one trial"));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let test_images = test.batch::<f64>(&all)?;
    let accs = (0..trials)
        .into_par_iter()
        .map(|t| {
            let params = train_classifier(cfg, images, labels, train, seed.wrapping_add(t as u64))?;
            Ok(accuracy(&predict(cfg, &params, &test_images)?, &test.labels))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(accs))
}

/// Decodes a stream's content and evaluates it with [`evaluate_images`].
pub fn evaluate(
    content: &DatasetContent,
    test: &LabeledImageSet,
    cfg: &ClassifierConfig,
    train: &TrainConfig,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    let (images, labels) = decode_content(content)?;
    evaluate_images(&images, &labels, test, cfg, train, trials, seed)
}

#[cfg(test)]
mod tests;
