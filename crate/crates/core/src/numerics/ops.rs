//! Layer-level operations built from tape primitives.

use std::sync::Arc;

use super::tape::Var;
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Result};

/// Same-padded convolution of an `[H, W, Cin]` (or NHWC) input with a bias per output channel.
pub fn conv2d<'t, F: Real>(input: Var<'t, F>, kernel: Var<'t, F>, bias: Var<'t, F>) -> Result<Var<'t, F>> {
    let shape = input.shape();
    let batched = match shape.len() {
        3 => input.reshape(&[1, shape[0], shape[1], shape[2]])?,
        4 => input,
        _ => return Err(shape_err("conv2d", format!("input must be HWC or NHWC, got {shape:?}"))),
    };
    let out = batched.conv2d(kernel)?.add_channel_bias(bias)?;
    if shape.len() == 3 {
        let s = out.shape();
        out.reshape(&s[1..])
    } else {
        Ok(out)
    }
}

/// `input * weight + bias` for `[C]` or `[N, C]` inputs and a `[C, D]` weight.
pub fn affine<'t, F: Real>(input: Var<'t, F>, weight: Var<'t, F>, bias: Var<'t, F>) -> Result<Var<'t, F>> {
    let shape = input.shape();
    let rows = match shape.len() {
        1 => input.reshape(&[1, shape[0]])?,
        2 => input,
        _ => return Err(shape_err("affine", format!("input must be [C] or [N, C], got {shape:?}"))),
    };
    let ws = weight.shape();
    if ws.len() != 2 || ws[0] != rows.shape()[1] || bias.numel() != ws[1] {
        return Err(shape_err(
            "affine",
            format!("input {shape:?}, weight {ws:?}, bias {:?}", bias.shape()),
        ));
    }
    let out = rows.matmul(weight)?.add_channel_bias(bias)?;
    if shape.len() == 1 {
        out.reshape(&[ws[1]])
    } else {
        Ok(out)
    }
}

/// Row-stochastic `[dst, src]` matrix of 1-D linear interpolation weights with
/// half-pixel centres (align-corners false).
pub fn bilinear_weights(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let ratio = src as f64 / dst as f64;
    for d in 0..dst {
        let pos = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let frac = pos - i0 as f64;
        m[d * src + i0] += 1.0 - frac;
        m[d * src + i1] += frac;
    }
    m
}

/// Bilinear upsampling of an `[h, w]` grid to `[out_h, out_w]`.
pub fn upsample_bilinear<'t, F: Real>(grid: Var<'t, F>, out_h: usize, out_w: usize) -> Result<Var<'t, F>> {
    let s = grid.shape();
    if s.len() != 2 {
        return Err(shape_err("upsample", format!("grid must be rank 2, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if h > out_h || w > out_w {
        return Err(shape_err("upsample", format!("target {out_h}x{out_w} smaller than source {h}x{w}")));
    }
    if h == out_h && w == out_w {
        return Ok(grid);
    }
    let tape = grid.tape();
    let rows = tape.constant(Tensor::from_f64(vec![out_h, h], &bilinear_weights(h, out_h))?);
    let cols = tape.constant(Tensor::from_f64(vec![w, out_w], &transpose(&bilinear_weights(w, out_w), out_w, w))?);
    rows.matmul(grid)?.matmul(cols)
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Stacks `[H, W]` planes into one `[H, W, C]` value, plane order becoming channel order.
pub fn stack_channels<'t, F: Real>(planes: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    let first = planes.first().ok_or_else(|| shape_err("stack", "no planes"))?;
    let s = first.shape();
    if planes.iter().any(|p| p.shape() != s) || s.len() != 2 {
        return Err(shape_err("stack", "planes must share one rank-2 shape"));
    }
    let (h, w, c) = (s[0], s[1], planes.len());
    let flat = first.tape().concat(planes)?;
    let idx: Arc<[isize]> = (0..h * w)
        .flat_map(|p| (0..c).map(move |ch| (ch * h * w + p) as isize))
        .collect();
    flat.gather(idx, &[h, w, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_1x1_kernel() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(vec![4, 4, 3], rand_vec(&mut rng, 48)).unwrap();
        let mut k = vec![0.0; 9];
        for c in 0..3 {
            k[c * 3 + c] = 1.0;
        }
        let y = conv2d(
            tape.constant(x.clone()),
            tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap()),
            tape.constant(Tensor::zeros(vec![3])),
        )
        .unwrap();
        assert_eq!(y.value(), x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let tape = Tape::<f64>::new();
        let y = conv2d(
            tape.constant(Tensor::ones(vec![5, 5, 2])),
            tape.constant(Tensor::zeros(vec![3, 3, 2, 2])),
            tape.constant(Tensor::new(vec![2], vec![0.25, -1.5]).unwrap()),
        )
        .unwrap();
        let v = y.value();
        assert_eq!(v.shape(), &[5, 5, 2]);
        for px in v.data().chunks(2) {
            assert_eq!(px, &[0.25, -1.5]);
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w, ci, co) = (5, 5, 2, 3);
        let x = rand_vec(&mut rng, h * w * ci);
        let k = rand_vec(&mut rng, 9 * ci * co);
        let b = rand_vec(&mut rng, co);
        let tape = Tape::<f64>::new();
        let y = conv2d(
            tape.constant(Tensor::new(vec![h, w, ci], x.clone()).unwrap()),
            tape.constant(Tensor::new(vec![3, 3, ci, co], k.clone()).unwrap()),
            tape.constant(Tensor::new(vec![co], b.clone()).unwrap()),
        )
        .unwrap()
        .value();
        for i in 0..h as isize {
            for j in 0..w as isize {
                for o in 0..co {
                    let mut acc = b[o];
                    for u in 0..3isize {
                        for v in 0..3isize {
                            let (si, sj) = (i + u - 1, j + v - 1);
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                acc += x[(si as usize * w + sj as usize) * ci + c]
                                    * k[((u as usize * 3 + v as usize) * ci + c) * co + o];
                            }
                        }
                    }
                    let got = y.data()[(i as usize * w + j as usize) * co + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let tape = Tape::<f64>::new();
        let r = conv2d(
            tape.constant(Tensor::ones(vec![4, 4, 1])),
            tape.constant(Tensor::zeros(vec![2, 2, 1, 1])),
            tape.constant(Tensor::zeros(vec![1])),
        );
        assert!(r.is_err());
        let r = conv2d(
            tape.constant(Tensor::ones(vec![4, 4, 2])),
            tape.constant(Tensor::zeros(vec![3, 3, 1, 1])),
            tape.constant(Tensor::zeros(vec![1])),
        );
        assert!(r.is_err());
    }

    #[test]
    fn affine_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let id = affine(x, tape.constant(Tensor::new(vec![3, 3], eye).unwrap()), tape.constant(Tensor::zeros(vec![3]))).unwrap();
        assert_eq!(id.value().data(), &[1.0, 2.0, 3.0]);
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let z = affine(x, tape.constant(Tensor::zeros(vec![3, 2])), tape.constant(b.clone())).unwrap();
        assert_eq!(z.value(), b);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xin = rand_vec(&mut rng, 8);
        let w = rand_vec(&mut rng, 8 * 16);
        let bias = rand_vec(&mut rng, 16);
        let y = affine(
            tape.constant(Tensor::new(vec![8], xin.clone()).unwrap()),
            tape.constant(Tensor::new(vec![8, 16], w.clone()).unwrap()),
            tape.constant(Tensor::new(vec![16], bias.clone()).unwrap()),
        )
        .unwrap()
        .value();
        for d in 0..16 {
            let expect: f64 = bias[d] + (0..8).map(|c| xin[c] * w[c * 16 + d]).sum::<f64>();
            assert!((y.data()[d] - expect).abs() < 1e-12);
        }
        assert!(affine(x, tape.constant(Tensor::zeros(vec![4, 2])), tape.constant(Tensor::zeros(vec![2]))).is_err());
    }

    #[test]
    fn upsample_identity_and_constant() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        assert_eq!(upsample_bilinear(g, 2, 3).unwrap().value(), g.value());
        let c = tape.constant(Tensor::full(vec![3, 2], 0.75));
        let up = upsample_bilinear(c, 12, 7).unwrap().value();
        assert!(up.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
        assert!(upsample_bilinear(c, 2, 7).is_err());
    }

    #[test]
    fn upsample_2x2_to_4x4_closed_form() {
        // Half-pixel mapping: output index d samples source coordinate (d + 0.5)/2 - 0.5,
        // clamped at the borders. Expected values evaluated by hand per pixel.
        let (a, b, c, d) = (1.0, 2.0, 3.0, 5.0);
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::new(vec![2, 2], vec![a, b, c, d]).unwrap());
        let up = upsample_bilinear(g, 4, 4).unwrap().value();
        let coord = [0.0, 0.25, 0.75, 1.0];
        for (i, &y) in coord.iter().enumerate() {
            for (j, &x) in coord.iter().enumerate() {
                let top = a * (1.0 - x) + b * x;
                let bot = c * (1.0 - x) + d * x;
                let expect = top * (1.0 - y) + bot * y;
                assert!((up.data()[i * 4 + j] - expect).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn stack_channels_layout() {
        let tape = Tape::<f64>::new();
        let p0 = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let p1 = tape.constant(Tensor::new(vec![1, 2], vec![10.0, 20.0]).unwrap());
        let s = stack_channels(&[p0, p1]).unwrap().value();
        assert_eq!(s.shape(), &[1, 2, 2]);
        assert_eq!(s.data(), &[1.0, 10.0, 2.0, 20.0]);
    }
}
