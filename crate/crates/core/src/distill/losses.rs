//! Inner-loop unrolling and the gradient-, trajectory- and distribution-matching losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::classifier::{cross_entropy, features, logits, shuffle, ClassifierConfig};
use crate::data::LabeledImageSet;
use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Plain SGD on cross-entropy from `theta0`. Returns `[theta0, theta1, ..., thetaT]`.
///
/// With `create_graph` the snapshots stay differentiable with respect to the
/// images (and to `theta0` when it is a leaf); otherwise each step only
/// records the update itself.
pub fn inner_unroll<'t, F: Real>(
    cfg: &ClassifierConfig,
    images: Var<'t, F>,
    labels: &[u32],
    theta0: Vec<Var<'t, F>>,
    steps: usize,
    lr: f64,
    create_graph: bool,
) -> Result<Vec<Vec<Var<'t, F>>>> {
    let tape = images.tape();
    let mut trace = vec![theta0];
    for step in 0..steps {
        let theta = trace.last().expect("trace starts non-empty").clone();
        let loss = cross_entropy(logits(cfg, images, &theta)?, labels)?;
        if !loss.item()?.is_finite() {
            return Err(Error::Divergence { step, detail: "inner loss is not finite".into() });
        }
        let grads = tape.grad(loss, &theta, create_graph)?;
        let next = theta
            .iter()
            .zip(grads)
            .map(|(p, g)| p.sub(g.scale(F::of(lr))?))
            .collect::<Result<Vec<_>>>()?;
        trace.push(next);
    }
    Ok(trace)
}

/// Values-only unroll on a fixed batch; returns the `steps + 1` snapshots.
pub fn unroll_values<F: Real>(
    cfg: &ClassifierConfig,
    images: &Tensor<F>,
    labels: &[u32],
    theta0: &[Tensor<F>],
    steps: usize,
    lr: f64,
) -> Result<Vec<Vec<Tensor<F>>>> {
    let mut out = vec![theta0.to_vec()];
    for step in 0..steps {
        let tape = Tape::new();
        let theta: Vec<_> = out.last().expect("non-empty").iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = cross_entropy(logits(cfg, tape.constant(images.clone()), &theta)?, labels)?;
        if !loss.item()?.is_finite() {
            return Err(Error::Divergence { step, detail: "inner loss is not finite".into() });
        }
        let grads = tape.gradients(loss, &theta)?;
        let next = out
            .last()
            .expect("non-empty")
            .iter()
            .zip(&grads)
            .map(|(p, g)| p.zip_with(g, "sgd", |a, b| a - F::of(lr) * b))
            .collect::<Result<Vec<_>>>()?;
        out.push(next);
    }
    Ok(out)
}

fn squared_distance<'t, F: Real>(a: &[Var<'t, F>], b: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    let mut acc: Option<Var<'t, F>> = None;
    for (x, y) in a.iter().zip(b) {
        let d = x.sub(*y)?.square()?.sum()?;
        acc = Some(match acc {
            Some(s) => s.add(d)?,
            None => d,
        });
    }
    acc.ok_or_else(|| invalid("distance between empty parameter lists"))
}

/// Sum over the checkpoints in `trace` of the squared L2 distance between the
/// cross-entropy gradients on the real batch and on the synthetic batch.
/// Real-side gradients are constants; the synthetic side stays differentiable.
pub fn loss_gm<'t, F: Real>(
    cfg: &ClassifierConfig,
    real: Var<'t, F>,
    real_labels: &[u32],
    syn: Var<'t, F>,
    syn_labels: &[u32],
    trace: &[Vec<Tensor<F>>],
) -> Result<Var<'t, F>> {
    if trace.is_empty() {
        return Err(invalid("gradient matching needs at least one checkpoint"));
    }
    let tape = syn.tape();
    let mut total: Option<Var<'t, F>> = None;
    for theta in trace {
        let vars: Vec<_> = theta.iter().map(|p| tape.leaf(p.clone())).collect();
        let g_real = tape.grad(cross_entropy(logits(cfg, real, &vars)?, real_labels)?, &vars, false)?;
        let g_syn = tape.grad(cross_entropy(logits(cfg, syn, &vars)?, syn_labels)?, &vars, true)?;
        let d = squared_distance(&g_real, &g_syn)?;
        total = Some(match total {
            Some(t) => t.add(d)?,
            None => d,
        });
    }
    Ok(total.expect("trace is non-empty"))
}

/// Parameter snapshots of a classifier trained on real data, one per step.
#[derive(Clone, Debug)]
pub struct ExpertTrajectory<F: Real> {
    pub snapshots: Vec<Vec<Tensor<F>>>,
}

impl<F: Real> ExpertTrajectory<F> {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

/// Trains an expert with minibatch SGD on class-balanced batches of `data`,
/// keeping a snapshot after every step (`steps + 1` in total).
pub fn train_expert<F: Real>(
    cfg: &ClassifierConfig,
    data: &LabeledImageSet,
    steps: usize,
    lr: f64,
    per_class: usize,
    seed: u64,
) -> Result<ExpertTrajectory<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta0: Vec<Tensor<F>> = cfg.init(&mut rng);
    let mut snapshots = vec![theta0];
    let by_class: Vec<Vec<usize>> = (0..data.num_classes).map(|c| data.class_indices(c)).collect();
    for step in 0..steps {
        let idx = balanced_batch(&by_class, per_class, &mut rng)?;
        let images = data.batch::<F>(&idx)?;
        let labels: Vec<u32> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut next = unroll_values(cfg, &images, &labels, snapshots.last().expect("non-empty"), 1, lr)
            .map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { step, detail },
                other => other,
            })?;
        snapshots.push(next.pop().expect("one step"));
    }
    Ok(ExpertTrajectory { snapshots })
}

/// Indices of `per_class` samples from every class, without replacement where possible.
pub fn balanced_batch<R: Rng>(by_class: &[Vec<usize>], per_class: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(by_class.len() * per_class);
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(invalid(format!("class {c} has no samples")));
        }
        let mut pool = members.clone();
        shuffle(&mut pool, rng);
        out.extend((0..per_class).map(|j| pool[j % pool.len()]));
    }
    Ok(out)
}

/// Normalized trajectory distance: the student starts at `expert[t]`, takes
/// `t1` differentiable SGD steps on the synthetic batch and is compared with
/// `expert[t + t2]`, relative to the expert's own displacement.
#[allow(clippy::too_many_arguments)]
pub fn loss_tm<'t, F: Real>(
    cfg: &ClassifierConfig,
    expert: &ExpertTrajectory<F>,
    syn: Var<'t, F>,
    syn_labels: &[u32],
    t: usize,
    t1: usize,
    t2: usize,
    lr: f64,
) -> Result<Var<'t, F>> {
    if t1 >= t2 {
        return Err(invalid(format!("student steps t1={t1} must be fewer than expert steps t2={t2}")));
    }
    if t + t2 >= expert.len() {
        return Err(invalid(format!("expert segment {t}..{} outside {} snapshots", t + t2, expert.len())));
    }
    let tape = syn.tape();
    let start: Vec<_> = expert.snapshots[t].iter().map(|p| tape.leaf(p.clone())).collect();
    let target: Vec<_> = expert.snapshots[t + t2].iter().map(|p| tape.constant(p.clone())).collect();
    let origin: Vec<_> = expert.snapshots[t].iter().map(|p| tape.constant(p.clone())).collect();
    let denom = squared_distance(&target, &origin)?;
    if denom.item()? == F::zero() {
        return Err(invalid(format!("expert does not move between steps {t} and {}", t + t2)));
    }
    let student = inner_unroll(cfg, syn, syn_labels, start, t1, lr, true)?;
    squared_distance(&target, student.last().expect("non-empty"))?.div(denom)
}

/// Constant `[K, n]` matrix averaging the rows of each class; errors on empty classes.
fn class_mean_matrix<F: Real>(labels: &[u32], num_classes: usize, side: &str) -> Result<Tensor<F>> {
    let n = labels.len();
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y as usize >= num_classes {
            return Err(invalid(format!("label {y} with {num_classes} classes")));
        }
        counts[y as usize] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(invalid(format!("class {c} is empty in the {side} batch")));
    }
    let mut a = vec![F::zero(); num_classes * n];
    for (i, &y) in labels.iter().enumerate() {
        a[y as usize * n + i] = F::one() / F::of(counts[y as usize] as f64);
    }
    Tensor::new(vec![num_classes, n], a)
}

/// Sum over classes of the squared L2 distance between mean real and mean
/// synthetic features under `extractor` (a classifier body).
pub fn loss_dm<'t, F: Real>(
    cfg: &ClassifierConfig,
    extractor: &[Tensor<F>],
    real: Var<'t, F>,
    real_labels: &[u32],
    syn: Var<'t, F>,
    syn_labels: &[u32],
) -> Result<Var<'t, F>> {
    if extractor.len() < 2 * cfg.blocks {
        return Err(shape_err("loss_dm", format!("{} extractor tensors", extractor.len())));
    }
    let tape = syn.tape();
    let body: Vec<_> = extractor[..2 * cfg.blocks].iter().map(|p| tape.constant(p.clone())).collect();
    let k = cfg.num_classes;
    let a_real = tape.constant(class_mean_matrix::<F>(real_labels, k, "real")?);
    let a_syn = tape.constant(class_mean_matrix::<F>(syn_labels, k, "synthetic")?);
    let m_real = a_real.matmul(features(cfg, real, &body)?)?;
    let m_syn = a_syn.matmul(features(cfg, syn, &body)?)?;
    m_real.sub(m_syn)?.square()?.sum()
}

/// Distance between class-conditional feature means for an arbitrary
/// `[n, d]` feature matrix pair; used where the extractor is not a classifier.
pub fn mean_feature_distance<'t, F: Real>(
    real: Var<'t, F>,
    real_labels: &[u32],
    syn: Var<'t, F>,
    syn_labels: &[u32],
    num_classes: usize,
) -> Result<Var<'t, F>> {
    let tape = syn.tape();
    let a_real = tape.constant(class_mean_matrix::<F>(real_labels, num_classes, "real")?);
    let a_syn = tape.constant(class_mean_matrix::<F>(syn_labels, num_classes, "synthetic")?);
    a_real.matmul(real)?.sub(a_syn.matmul(syn)?)?.square()?.sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check::{directional_difference, relative_error};

    fn cfg() -> ClassifierConfig {
        ClassifierConfig::new(1, 2, 2, 4, 4).unwrap()
    }

    fn random_images(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
        Tensor::new(vec![n, 4, 4, 3], (0..n * 48).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn unroll_trivial_cases() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta: Vec<Tensor<f64>> = c.init(&mut rng);
        let x = random_images(&mut rng, 2);
        assert_eq!(unroll_values(&c, &x, &[0, 1], &theta, 0, 0.1).unwrap().len(), 1);
        let frozen = unroll_values(&c, &x, &[0, 1], &theta, 3, 0.0).unwrap();
        assert_eq!(frozen.len(), 4);
        assert!(frozen.iter().all(|s| s == &theta));
        let moved = unroll_values(&c, &x, &[0, 1], &theta, 1, 0.5).unwrap();
        assert_ne!(moved[1], theta);
    }

    #[test]
    fn one_step_of_logistic_regression_matches_closed_form() {
        // two samples, the head alone acting on fixed features: with equal logits
        // the softmax gradient is (p - onehot) x / n
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::zeros(vec![2, 2]));
        let b = tape.leaf(Tensor::zeros(vec![2]));
        let loss = cross_entropy(crate::numerics::ops::affine(x, w, b).unwrap(), &[0, 1]).unwrap();
        let g = tape.gradients(loss, &[w, b]).unwrap();
        // row 0: x=(1,0), y=0 -> (p - e0) = (-0.5, 0.5); row 1: x=(0,2), y=1 -> (0.5, -0.5)
        let want_w = [-0.25, 0.25, 0.5, -0.5];
        for (a, e) in g[0].data().iter().zip(want_w) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!(g[1].data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gm_vanishes_on_identical_batches_and_is_positive_otherwise() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trace = vec![c.init::<f64, _>(&mut rng), c.init(&mut rng)];
        let x = random_images(&mut rng, 4);
        let y = [0, 1, 0, 1];
        let tape = Tape::new();
        let l = loss_gm(&c, tape.constant(x.clone()), &y, tape.leaf(x.clone()), &y, &trace).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
        let other = random_images(&mut rng, 4);
        let l = loss_gm(&c, tape.constant(x), &y, tape.leaf(other), &y, &trace).unwrap();
        assert!(l.item().unwrap() > 0.0);
        assert!(loss_gm(&c, l, &y, l, &y, &[]).is_err());
    }

    #[test]
    fn gm_matches_independent_gradient_recomputation() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trace = vec![c.init::<f64, _>(&mut rng), c.init(&mut rng)];
        let (xr, xs) = (random_images(&mut rng, 4), random_images(&mut rng, 2));
        let (yr, ys) = ([0, 1, 1, 0], [1, 0]);
        let grads = |x: &Tensor<f64>, y: &[u32], theta: &[Tensor<f64>]| -> Vec<f64> {
            let tape = Tape::new();
            let v: Vec<_> = theta.iter().map(|p| tape.leaf(p.clone())).collect();
            let l = cross_entropy(logits(&c, tape.constant(x.clone()), &v).unwrap(), y).unwrap();
            tape.gradients(l, &v).unwrap().iter().flat_map(|t| t.to_vec()).collect()
        };
        let want: f64 = trace
            .iter()
            .map(|th| grads(&xr, &yr, th).iter().zip(grads(&xs, &ys, th)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        let tape = Tape::new();
        let got = loss_gm(&c, tape.constant(xr), &yr, tape.constant(xs), &ys, &trace).unwrap().item().unwrap();
        assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn gm_single_parameter_arithmetic() {
        // squared distance of flattened gradient lists: (1 - 0.5)^2
        let tape = Tape::<f64>::new();
        let a = [tape.constant(Tensor::scalar(1.0))];
        let b = [tape.constant(Tensor::scalar(0.5))];
        assert_eq!(squared_distance(&a, &b).unwrap().item().unwrap(), 0.25);
    }

    fn toy_expert(c: &ClassifierConfig, rng: &mut ChaCha8Rng, len: usize) -> ExpertTrajectory<f64> {
        let x = random_images(rng, 4);
        let theta0: Vec<Tensor<f64>> = c.init(rng);
        ExpertTrajectory { snapshots: unroll_values(c, &x, &[0, 1, 0, 1], &theta0, len - 1, 0.5).unwrap() }
    }

    #[test]
    fn tm_trivial_cases() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let expert = toy_expert(&c, &mut rng, 4);
        let x = random_images(&mut rng, 2);
        let tape = Tape::new();
        let frozen = loss_tm(&c, &expert, tape.constant(x.clone()), &[0, 1], 0, 1, 2, 0.0).unwrap();
        assert!((frozen.item().unwrap() - 1.0).abs() < 1e-12);
        assert!(loss_tm(&c, &expert, tape.constant(x.clone()), &[0, 1], 2, 1, 2, 0.1).is_err());
        assert!(loss_tm(&c, &expert, tape.constant(x.clone()), &[0, 1], 0, 2, 2, 0.1).is_err());
        let flat = ExpertTrajectory { snapshots: vec![expert.snapshots[0].clone(); 3] };
        assert!(loss_tm(&c, &flat, tape.constant(x), &[0, 1], 0, 1, 2, 0.1).is_err());
    }

    #[test]
    fn tm_reaches_zero_when_the_student_follows_the_expert() {
        // an expert trained on the synthetic batch itself, compared after equal step counts
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_images(&mut rng, 2);
        let theta0: Vec<Tensor<f64>> = c.init(&mut rng);
        let snaps = unroll_values(&c, &x, &[0, 1], &theta0, 3, 0.3).unwrap();
        let expert = ExpertTrajectory { snapshots: snaps };
        let tape = Tape::new();
        // t1 < t2 is required, so the expert repeats its last snapshot once
        let mut padded = expert.clone();
        padded.snapshots.push(padded.snapshots[3].clone());
        let l = loss_tm(&c, &padded, tape.constant(x), &[0, 1], 0, 3, 4, 0.3).unwrap();
        assert!(l.item().unwrap() < 1e-20);
    }

    #[test]
    fn tm_one_step_matches_hand_unrolled_algebra() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let expert = toy_expert(&c, &mut rng, 3);
        let x = random_images(&mut rng, 2);
        let lr = 0.2;
        let student = unroll_values(&c, &x, &[1, 0], &expert.snapshots[0], 1, lr).unwrap();
        let dist = |a: &[Tensor<f64>], b: &[Tensor<f64>]| -> f64 {
            a.iter().zip(b).flat_map(|(p, q)| p.data().iter().zip(q.data()).map(|(u, v)| (u - v).powi(2)).collect::<Vec<_>>()).sum()
        };
        let want = dist(&expert.snapshots[2], &student[1]) / dist(&expert.snapshots[2], &expert.snapshots[0]);
        let tape = Tape::new();
        let got = loss_tm(&c, &expert, tape.constant(x), &[1, 0], 0, 1, 2, lr).unwrap().item().unwrap();
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn dm_cases() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ext: Vec<Tensor<f64>> = c.init(&mut rng);
        let x = random_images(&mut rng, 4);
        let y = [0, 1, 1, 0];
        let tape = Tape::new();
        let l = loss_dm(&c, &ext, tape.constant(x.clone()), &y, tape.leaf(x.clone()), &y).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
        assert!(tape.gradients(l, &[tape.leaf(x.clone())]).unwrap()[0].data().iter().all(|v| *v == 0.0));
        assert!(loss_dm(&c, &ext, tape.constant(x.clone()), &y, tape.constant(x), &[0, 0, 0, 0]).is_err());

        // identity features on 1-D data: class means 0 and 1 differ by 1
        let real = tape.constant(Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
        let syn = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let d = mean_feature_distance(real, &[0, 0], syn, &[0, 0], 1).unwrap();
        assert_eq!(d.item().unwrap(), 1.0);
    }

    #[test]
    fn dm_matches_two_pass_oracle() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ext: Vec<Tensor<f64>> = c.init(&mut rng);
        let (xr, xs) = (random_images(&mut rng, 5), random_images(&mut rng, 3));
        let (yr, ys) = ([0, 1, 1, 0, 1], [1, 0, 1]);
        let feats = |x: &Tensor<f64>| {
            let tape = Tape::new();
            let body: Vec<_> = ext.iter().map(|p| tape.constant(p.clone())).collect();
            features(&c, tape.constant(x.clone()), &body).unwrap().value()
        };
        let (fr, fs) = (feats(&xr), feats(&xs));
        let d = c.feature_dim();
        let mean = |f: &Tensor<f64>, y: &[u32], k: u32| -> Vec<f64> {
            let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == k).collect();
            (0..d).map(|j| rows.iter().map(|&i| f.data()[i * d + j]).sum::<f64>() / rows.len() as f64).collect()
        };
        let want: f64 = (0..2)
            .map(|k| mean(&fr, &yr, k).iter().zip(mean(&fs, &ys, k)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        let tape = Tape::new();
        let got = loss_dm(&c, &ext, tape.constant(xr), &yr, tape.constant(xs), &ys).unwrap().item().unwrap();
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }

    /// Directional FD check of `loss(images)` against its tape gradient.
    fn check_image_gradient(loss: impl Fn(&Tape<f64>, Var<'_, f64>) -> f64, grad: Vec<f64>, x: &Tensor<f64>, rng: &mut ChaCha8Rng) {
        let flat = x.to_vec();
        let f = |v: &[f64]| {
            let tape = Tape::new();
            loss(&tape, tape.constant(Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap()))
        };
        let dir: Vec<f64> = (0..flat.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fd = directional_difference(f, &flat, &dir, 1e-5);
        let an: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!(relative_error(&[an], &[fd]) < 1e-6, "{an} vs {fd}");
    }

    #[test]
    fn losses_are_differentiable_in_the_synthetic_images() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trace = vec![c.init::<f64, _>(&mut rng)];
        let ext: Vec<Tensor<f64>> = c.init(&mut rng);
        let expert = toy_expert(&c, &mut rng, 3);
        let xr = random_images(&mut rng, 4);
        let xs = random_images(&mut rng, 2);
        let (yr, ys) = ([0, 1, 0, 1], [0, 1]);
        type L = Box<dyn Fn(&Tape<f64>, Var<'_, f64>) -> f64>;
        let make = |kind: usize| -> L {
            let (c, trace, ext, expert, xr) = (c, trace.clone(), ext.clone(), expert.clone(), xr.clone());
            Box::new(move |tape: &Tape<f64>, s: Var<'_, f64>| {
                let r = tape.constant(xr.clone());
                let v = match kind {
                    0 => loss_gm(&c, r, &yr, s, &ys, &trace),
                    1 => loss_tm(&c, &expert, s, &ys, 0, 1, 2, 0.3),
                    _ => loss_dm(&c, &ext, r, &yr, s, &ys),
                };
                v.unwrap().item().unwrap()
            })
        };
        for kind in 0..3 {
            let tape = Tape::new();
            let s = tape.leaf(xs.clone());
            let r = tape.constant(xr.clone());
            let l = match kind {
                0 => loss_gm(&c, r, &yr, s, &ys, &trace),
                1 => loss_tm(&c, &expert, s, &ys, 0, 1, 2, 0.3),
                _ => loss_dm(&c, &ext, r, &yr, s, &ys),
            }
            .unwrap();
            let g = tape.gradients(l, &[s]).unwrap()[0].to_vec();
            assert!(g.iter().any(|v| *v != 0.0));
            check_image_gradient(make(kind), g, &xs, &mut rng);
        }
    }

    #[test]
    fn balanced_batches_cover_every_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let by_class = vec![vec![0, 1, 2], vec![3], vec![4, 5]];
        let b = balanced_batch(&by_class, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(&b[2..4], &[3, 3]);
        assert!(b[..2].iter().all(|i| *i < 3) && b[0] != b[1]);
        assert!(balanced_batch(&[vec![]], 1, &mut rng).is_err());
    }
}
