//! Multiscale latent pyramids: one single-channel grid per scale, each half the
//! size (floored) of the previous one, finest first.

use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::numerics::ops::{stack_channels, upsample_bilinear};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Smallest storable quantized latent.
pub const LATENT_MIN: i32 = -(1 << 15);
/// Largest storable quantized latent.
pub const LATENT_MAX: i32 = (1 << 15) - 1;

/// Grid sizes of a pyramid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidDims {
    pub height: usize,
    pub width: usize,
    /// `(rows, cols)` per scale.
    pub scales: Vec<(usize, usize)>,
}

impl PyramidDims {
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Total number of latent codes over all scales.
    pub fn total(&self) -> usize {
        self.scales.iter().map(|&(h, w)| h * w).sum()
    }

    /// Offset of each scale inside the flat (scale-major) code vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.scales.len());
        let mut acc = 0;
        for &(h, w) in &self.scales {
            off.push(acc);
            acc += h * w;
        }
        off
    }
}

/// Dims of every scale: scale `l` (0-based) is `floor(H / 2^l) x floor(W / 2^l)`.
pub fn pyramid_dims(height: usize, width: usize, scales: usize) -> Result<PyramidDims> {
    if height == 0 || width == 0 {
        return Err(invalid("image dims must be positive"));
    }
    if scales == 0 {
        return Err(invalid("need at least one latent scale"));
    }
    let mut dims = Vec::with_capacity(scales);
    for l in 0..scales {
        let (h, w) = (height >> l, width >> l);
        if h == 0 || w == 0 {
            return Err(invalid(format!(
                "{scales} scales too many for {height}x{width}: scale {} would be {h}x{w}",
                l + 1
            )));
        }
        dims.push((h, w));
    }
    Ok(PyramidDims {
        height,
        width,
        scales: dims,
    })
}

/// Continuous latent codes of one sample, stored flat (scale-major, row-major within a scale).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPyramid<F: Real> {
    pub dims: PyramidDims,
    pub values: Tensor<F>,
}

impl<F: Real> LatentPyramid<F> {
    pub fn zeros(dims: PyramidDims) -> Self {
        let n = dims.total();
        Self {
            dims,
            values: Tensor::zeros(vec![n]),
        }
    }

    pub fn new(dims: PyramidDims, values: Tensor<F>) -> Result<Self> {
        if values.numel() != dims.total() {
            return Err(shape_err(
                "pyramid",
                format!("{} values for {} codes", values.numel(), dims.total()),
            ));
        }
        values.ensure_finite("latent pyramid")?;
        Ok(Self {
            values: values.reshape(vec![dims.total()])?,
            dims,
        })
    }

    /// Values of scale `l` as an `[h, w]` tensor.
    pub fn grid(&self, l: usize) -> Result<Tensor<F>> {
        let (h, w) = self.dims.scales[l];
        let off = self.dims.offsets()[l];
        Tensor::new(vec![h, w], self.values.data()[off..off + h * w].to_vec())
    }
}

/// Integer latent codes of one sample, same layout as [`LatentPyramid`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedPyramid {
    pub dims: PyramidDims,
    pub values: Vec<i32>,
}

impl QuantizedPyramid {
    pub fn new(dims: PyramidDims, values: Vec<i32>) -> Result<Self> {
        if values.len() != dims.total() {
            return Err(shape_err("pyramid", format!("{} values for {} codes", values.len(), dims.total())));
        }
        Ok(Self { dims, values })
    }

    pub fn scale(&self, l: usize) -> &[i32] {
        let (h, w) = self.dims.scales[l];
        let off = self.dims.offsets()[l];
        &self.values[off..off + h * w]
    }

    pub fn to_latents<F: Real>(&self) -> LatentPyramid<F> {
        LatentPyramid {
            dims: self.dims.clone(),
            values: Tensor::from_parts(
                vec![self.values.len()],
                self.values.iter().map(|&v| F::of(v as f64)).collect(),
            ),
        }
    }
}

/// `floor(z + 1/2)` for one value, clamped to the storable range.
pub fn round_half_up(z: f64) -> i32 {
    (z + 0.5).floor().clamp(LATENT_MIN as f64, LATENT_MAX as f64) as i32
}

/// Rounds every code to the nearest integer, ties upward.
pub fn quantize_round<F: Real>(p: &LatentPyramid<F>) -> QuantizedPyramid {
    QuantizedPyramid {
        dims: p.dims.clone(),
        values: p.values.data().iter().map(|v| round_half_up(v.as_f64())).collect(),
    }
}

/// How the training graph stands in for rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// Additive U(-1/2, 1/2) noise.
    Noise,
    /// Round forward, identity backward.
    Ste,
    /// No quantization at all (gradient checks).
    Identity,
}

/// Source of the additive noise; `Zero` disables it.
pub enum NoiseSource<'a, R: Rng> {
    Random(&'a mut R),
    Zero,
}

/// `z + u`, `u ~ U(-1/2, 1/2)` i.i.d.; the gradient passes through unchanged.
pub fn relax_uniform_noise<'t, F: Real, R: Rng>(z: Var<'t, F>, noise: NoiseSource<'_, R>) -> Result<Var<'t, F>> {
    let shape = z.shape();
    let n = z.numel();
    let u: Vec<F> = match noise {
        NoiseSource::Random(rng) => (0..n).map(|_| F::of(rng.random::<f64>() - 0.5)).collect(),
        NoiseSource::Zero => vec![F::zero(); n],
    };
    let tape = z.tape();
    z.add(tape.constant(Tensor::new(shape, u)?))
}

/// Straight-through rounding: forward equals [`quantize_round`] on in-range values.
pub fn relax_ste<'t, F: Real>(z: Var<'t, F>) -> Result<Var<'t, F>> {
    z.round_ste()
}

/// Applies `mode` to a flat latent var.
pub fn relax<'t, F: Real, R: Rng>(z: Var<'t, F>, mode: Relaxation, rng: &mut R) -> Result<Var<'t, F>> {
    match mode {
        Relaxation::Noise => relax_uniform_noise(z, NoiseSource::Random(rng)),
        Relaxation::Ste => relax_ste(z),
        Relaxation::Identity => Ok(z),
    }
}

/// Per-scale `[h, w]` views of a flat latent var.
pub fn split_scales<'t, F: Real>(flat: Var<'t, F>, dims: &PyramidDims) -> Result<Vec<Var<'t, F>>> {
    if flat.numel() != dims.total() {
        return Err(shape_err("split_scales", format!("{} values for {} codes", flat.numel(), dims.total())));
    }
    dims.scales
        .iter()
        .zip(dims.offsets())
        .map(|(&(h, w), off)| {
            let idx: Arc<[isize]> = (off..off + h * w).map(|i| i as isize).collect();
            flat.gather(idx, &[h, w])
        })
        .collect()
}

/// Upsamples every scale to full resolution and stacks them into `[H, W, L]`,
/// finest scale in channel 0.
pub fn upsample_concat<'t, F: Real>(flat: Var<'t, F>, dims: &PyramidDims) -> Result<Var<'t, F>> {
    let planes = split_scales(flat, dims)?
        .into_iter()
        .map(|g| upsample_bilinear(g, dims.height, dims.width))
        .collect::<Result<Vec<_>>>()?;
    stack_channels(&planes)
}

/// [`upsample_concat`] evaluated on a quantized pyramid, outside any training graph.
pub fn upsample_concat_quantized<F: Real>(q: &QuantizedPyramid) -> Result<Tensor<F>> {
    let tape = Tape::<F>::new();
    let flat = tape.constant(q.to_latents::<F>().values);
    Ok(upsample_concat(flat, &q.dims)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::upsample_bilinear;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dims_32_by_6() {
        let d = pyramid_dims(32, 32, 6).unwrap();
        let sides: Vec<_> = d.scales.iter().map(|s| s.0).collect();
        assert_eq!(sides, vec![32, 16, 8, 4, 2, 1]);
        assert!(d.scales.iter().all(|s| s.0 == s.1));
        assert_eq!(d.total(), 1365);
    }

    #[test]
    fn dims_128_by_6() {
        let d = pyramid_dims(128, 128, 6).unwrap();
        let sides: Vec<_> = d.scales.iter().map(|s| s.0).collect();
        assert_eq!(sides, vec![128, 64, 32, 16, 8, 4]);
    }

    #[test]
    fn dims_degenerate_scale_errors() {
        // 5x3 -> 2x1 -> 1x0
        assert!(pyramid_dims(5, 3, 2).is_ok());
        assert!(pyramid_dims(5, 3, 3).is_err());
        assert!(pyramid_dims(4, 4, 0).is_err());
    }

    #[test]
    fn rounding_ties_go_up() {
        assert_eq!(round_half_up(0.5), 1);
        assert_eq!(round_half_up(-0.5), 0);
        assert_eq!(round_half_up(-1.4), -1);
        assert_eq!(round_half_up(2.49), 2);
        assert_eq!(round_half_up(1e9), LATENT_MAX);
        assert_eq!(round_half_up(-1e9), LATENT_MIN);
    }

    #[test]
    fn quantize_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = pyramid_dims(8, 8, 3).unwrap();
        let vals: Vec<f64> = (0..dims.total()).map(|_| rng.random_range(-20.0..20.0)).collect();
        let p = LatentPyramid::new(dims, Tensor::new(vec![vals.len()], vals.clone()).unwrap()).unwrap();
        let q = quantize_round(&p);
        for (z, &v) in vals.iter().zip(&q.values) {
            assert_eq!(v as f64, (z + 0.5).floor());
        }
    }

    #[test]
    fn noise_relaxation() {
        let tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::new(vec![3], vec![0.2, -1.0, 4.0]).unwrap());
        let same = relax_uniform_noise::<f64, ChaCha8Rng>(z, NoiseSource::Zero).unwrap();
        assert_eq!(same.value(), z.value());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(vec![n]));
        let y = relax_uniform_noise(z, NoiseSource::Random(&mut rng)).unwrap();
        let v = y.value();
        assert!(v.data().iter().all(|&u| (-0.5..0.5).contains(&u)));
        // U(-1/2,1/2) has sigma = 1/sqrt(12); the sample mean must sit within 3 sigma/sqrt(n).
        let mean = v.sum() / n as f64;
        assert!(mean.abs() <= 3.0 / (12f64.sqrt() * (n as f64).sqrt()), "mean {mean}");
        let g = tape.gradients(y.sum().unwrap(), &[z]).unwrap();
        assert!(g[0].data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn ste_forward_and_gradient() {
        let tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::new(vec![1], vec![0.7]).unwrap());
        let q = relax_ste(z).unwrap();
        assert_eq!(q.item().unwrap(), 1.0);
        assert_eq!(tape.gradients(q.sum().unwrap(), &[z]).unwrap()[0].data(), &[1.0]);
    }

    #[test]
    fn ste_gradient_is_loss_gradient_at_rounded_point() {
        // loss = sum (round(z) - t)^2 -> d/dz = 2 (round(z) - t), compared against finite
        // differences of the surrogate (round replaced by identity) evaluated at round(z).
        let zs = [0.7, -1.2, 2.49];
        let t = [0.1, 0.3, -2.0];
        let tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::new(vec![3], zs.to_vec()).unwrap());
        let target = tape.constant(Tensor::new(vec![3], t.to_vec()).unwrap());
        let loss = relax_ste(z).unwrap().sub(target).unwrap().square().unwrap().sum().unwrap();
        let g = tape.gradients(loss, &[z]).unwrap()[0].clone();
        let rounded: Vec<f64> = zs.iter().map(|&v| round_half_up(v) as f64).collect();
        let fd = crate::numerics::check::central_difference(
            |x| x.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum(),
            &rounded,
            1e-5,
        );
        for (a, b) in g.data().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn upsample_concat_cases() {
        let dims = pyramid_dims(4, 4, 1).unwrap();
        let tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let up = upsample_concat(tape.constant(Tensor::new(vec![16], vals.clone()).unwrap()), &dims).unwrap();
        assert_eq!(up.shape(), vec![4, 4, 1]);
        assert_eq!(up.value().data(), &vals[..]);

        let dims = pyramid_dims(8, 6, 3).unwrap();
        let up = upsample_concat(tape.constant(Tensor::full(vec![dims.total()], 2.5)), &dims).unwrap();
        assert!(up.value().data().iter().all(|&v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn upsample_concat_matches_per_channel_upsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = pyramid_dims(8, 8, 3).unwrap();
        let vals: Vec<f64> = (0..dims.total()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tape = Tape::<f64>::new();
        let flat = tape.constant(Tensor::new(vec![vals.len()], vals.clone()).unwrap());
        let up = upsample_concat(flat, &dims).unwrap().value();
        let p = LatentPyramid::new(dims.clone(), Tensor::new(vec![vals.len()], vals).unwrap()).unwrap();
        for l in 0..3 {
            let ch = upsample_bilinear(tape.constant(p.grid(l).unwrap()), 8, 8).unwrap().value();
            for px in 0..64 {
                assert_eq!(up.data()[px * 3 + l], ch.data()[px]);
            }
        }
    }

    proptest! {
        #[test]
        fn quantize_properties(vals in proptest::collection::vec(-100.0f64..100.0, 21)) {
            let dims = pyramid_dims(4, 4, 3).unwrap();
            let p = LatentPyramid::new(dims.clone(), Tensor::new(vec![21], vals.clone()).unwrap()).unwrap();
            let q = quantize_round(&p);
            prop_assert_eq!(q.dims.clone(), dims);
            for (z, &v) in vals.iter().zip(&q.values) {
                prop_assert!((v as f64 - z).abs() <= 0.5);
            }
            // idempotent on integer-valued pyramids
            let again = quantize_round(&q.to_latents::<f64>());
            prop_assert_eq!(again, q);
        }

        #[test]
        fn upsample_shape_is_h_w_l(h in 1usize..20, w in 1usize..20, l in 1usize..4) {
            if let Ok(dims) = pyramid_dims(h, w, l) {
                let tape = Tape::<f64>::new();
                let up = upsample_concat(tape.constant(Tensor::zeros(vec![dims.total()])), &dims).unwrap();
                prop_assert_eq!(up.shape(), vec![h, w, l]);
            }
        }
    }
}
