//! Small ConvNet used both as the inner-loop learner and as the evaluation model.
//!
//! Each block is a same-padded 3x3 convolution, instance normalization without
//! affine parameters, ReLU and 2x2 average pooling; a linear head maps the
//! flattened features to class logits.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::ops::{affine, conv2d};
use crate::numerics::{adam_update, AdamConfig, AdamState, Real, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub blocks: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
}

impl ClassifierConfig {
    pub fn new(blocks: usize, channels: usize, num_classes: usize, height: usize, width: usize) -> Result<Self> {
        let div = 1usize << blocks;
        if blocks == 0 || channels == 0 || num_classes < 2 {
            return Err(invalid("classifier needs at least one block, one channel and two classes"));
        }
        if height % div != 0 || width % div != 0 {
            return Err(invalid(format!("{height}x{width} input is not divisible by 2^{blocks}")));
        }
        Ok(Self { blocks, channels, num_classes, height, width })
    }

    pub fn feature_dim(&self) -> usize {
        self.channels * (self.height >> self.blocks) * (self.width >> self.blocks)
    }

    /// Parameter shapes in order: `[k, b]` per block, then head weight and bias.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut v = Vec::new();
        let mut cin = 3;
        for _ in 0..self.blocks {
            v.push(vec![3, 3, cin, self.channels]);
            v.push(vec![self.channels]);
            cin = self.channels;
        }
        v.push(vec![self.feature_dim(), self.num_classes]);
        v.push(vec![self.num_classes]);
        v
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn init<F: Real, R: Rng>(&self, rng: &mut R) -> Vec<Tensor<F>> {
        self.shapes()
            .into_iter()
            .map(|s| {
                if s.len() == 1 {
                    return Tensor::zeros(s);
                }
                let fan_in: usize = s[..s.len() - 1].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = s.iter().product::<usize>();
                let data: Vec<F> = (0..n).map(|_| F::of(rng.random_range(-bound..bound))).collect();
                Tensor::new(s, data).expect("shape matches data")
            })
            .collect()
    }
}

/// Instance normalization over the spatial axes of an NHWC value.
pub fn instance_norm<'t, F: Real>(x: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err("instance_norm", format!("need NHWC, got {s:?}")));
    }
    let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
    let inv = F::one() / F::of(hw as f64);
    let mean = x.sum_mid(n, hw, c, &[n, c])?.scale(inv)?;
    let centered = x.sub(mean.expand_mid(n, hw, c, &s)?)?;
    let var = centered.square()?.sum_mid(n, hw, c, &[n, c])?.scale(inv)?;
    let scale = var.offset(F::of(NORM_EPS))?.pow(F::of(-0.5))?;
    centered.mul(scale.expand_mid(n, hw, c, &s)?)
}

/// Flattened features `[N, feature_dim]` of an `[N, H, W, 3]` batch; `params`
/// may include the head, which is ignored.
pub fn features<'t, F: Real>(cfg: &ClassifierConfig, x: Var<'t, F>, params: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != cfg.height || s[2] != cfg.width || s[3] != 3 {
        return Err(shape_err("classifier", format!("input {s:?} for {}x{} RGB", cfg.height, cfg.width)));
    }
    if params.len() < 2 * cfg.blocks {
        return Err(shape_err("classifier", format!("{} parameter tensors", params.len())));
    }
    let mut h = x;
    for b in 0..cfg.blocks {
        h = conv2d(h, params[2 * b], params[2 * b + 1])?;
        h = instance_norm(h)?.relu()?.avg_pool2()?;
    }
    h.reshape(&[s[0], cfg.feature_dim()])
}

pub fn logits<'t, F: Real>(cfg: &ClassifierConfig, x: Var<'t, F>, params: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    if params.len() != 2 * cfg.blocks + 2 {
        return Err(shape_err("classifier", format!("{} parameter tensors", params.len())));
    }
    let f = features(cfg, x, params)?;
    affine(f, params[2 * cfg.blocks], params[2 * cfg.blocks + 1])
}

/// Mean cross-entropy of `[N, K]` logits; the row maximum is subtracted as a constant.
pub fn cross_entropy<'t, F: Real>(logits: Var<'t, F>, labels: &[u32]) -> Result<Var<'t, F>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err("cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
    }
    let (n, k) = (s[0], s[1]);
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= k) {
        return Err(invalid(format!("label {y} with {k} classes")));
    }
    let v = logits.value();
    let maxes: Vec<F> = v.data().chunks(k).map(|r| r.iter().copied().fold(F::neg_infinity(), F::max)).collect();
    let tape = logits.tape();
    let m = tape.constant(Tensor::from_parts(vec![n, 1], maxes)).expand_mid(n, k, 1, &[n, k])?;
    let z = logits.sub(m)?;
    let lse = z.exp()?.sum_mid(n, k, 1, &[n])?.ln()?;
    let idx: Arc<[isize]> = labels.iter().enumerate().map(|(i, &y)| (i * k + y as usize) as isize).collect();
    let picked = z.gather(idx, &[n])?;
    lse.sub(picked)?.mean()
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy<F: Real>(logits: &Tensor<F>, labels: &[u32]) -> f64 {
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == y as usize
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Training schedule for a standalone classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 64, lr: 1e-2 }
    }
}

/// Trains from a fresh initialization with Adam on minibatches drawn without
/// replacement (reshuffled every epoch).
pub fn train_classifier<F: Real>(
    cfg: &ClassifierConfig,
    images: &Tensor<F>,
    labels: &[u32],
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<Tensor<F>>> {
    let n = labels.len();
    if n == 0 || images.shape()[0] != n {
        return Err(invalid("training set is empty or mislabeled"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = cfg.init::<F, _>(&mut rng);
    let mut state = AdamState::default();
    let adam = AdamConfig::with_lr(train.lr);
    let per = images.numel() / n;
    let bs = train.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for step in 0..train.steps {
        if cursor + bs > n {
            shuffle(&mut order, &mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + bs];
        cursor += bs;
        let data: Vec<F> = batch.iter().flat_map(|&i| images.data()[i * per..(i + 1) * per].to_vec()).collect();
        let mut shape = images.shape().to_vec();
        shape[0] = bs;
        let x = Tensor::new(shape, data)?;
        let y: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();

        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = cross_entropy(logits(cfg, tape.constant(x), &vars)?, &y)?;
        let lv = loss.item()?;
        if !lv.is_finite() {
            return Err(Error::Divergence { step, detail: "classifier loss is not finite".into() });
        }
        let grads = tape.gradients(loss, &vars)?;
        adam_update(&mut params, &grads, &mut state, &adam)?;
    }
    Ok(params)
}

/// Logits of a large set, evaluated in chunks.
pub fn predict<F: Real>(cfg: &ClassifierConfig, params: &[Tensor<F>], images: &Tensor<F>) -> Result<Tensor<F>> {
    let n = images.shape()[0];
    let per = images.numel() / n;
    let mut out = Vec::with_capacity(n * cfg.num_classes);
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let x = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
        out.extend(logits(cfg, tape.constant(x), &vars)?.value().to_vec());
    }
    Tensor::new(vec![n, cfg.num_classes], out)
}

/// Fisher-Yates shuffle.
pub(crate) fn shuffle<T, R: Rng>(v: &mut [T], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
