//! Plain slice kernels behind the tape ops. All loops run in a fixed order so
//! results are bit-reproducible in single-threaded mode.

use super::tensor::Real;

/// Geometry of a same-padded 2-D convolution over NHWC batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn pads(&self) -> (isize, isize) {
        ((self.kh / 2) as isize, (self.kw / 2) as isize)
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.height * self.width * self.cin
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.height * self.width * self.cout
    }

    pub fn kernel_len(&self) -> usize {
        self.kh * self.kw * self.cin * self.cout
    }

    /// Visits every (input pixel offset, output pixel offset, kernel tap offset)
    /// triple that contributes to the convolution.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = self.pads();
        let (h, w) = (self.height as isize, self.width as isize);
        for n in 0..self.batch {
            for i in 0..h {
                for j in 0..w {
                    let out_off = ((n * self.height + i as usize) * self.width + j as usize) * self.cout;
                    for u in 0..self.kh as isize {
                        let si = i + u - ph;
                        if si < 0 || si >= h {
                            continue;
                        }
                        for v in 0..self.kw as isize {
                            let sj = j + v - pw;
                            if sj < 0 || sj >= w {
                                continue;
                            }
                            let in_off = ((n * self.height + si as usize) * self.width + sj as usize) * self.cin;
                            let k_off = ((u as usize) * self.kw + v as usize) * self.cin * self.cout;
                            f(in_off, out_off, k_off);
                        }
                    }
                }
            }
        }
    }
}

/// `y[n,i,j,o] = sum x[n,i+u-ph,j+v-pw,c] * k[u,v,c,o]`
pub fn conv_forward<F: Real>(g: &ConvGeom, x: &[F], k: &[F]) -> Vec<F> {
    let mut y = vec![F::zero(); g.output_len()];
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|xo, yo, ko| {
        let yrow = &mut y[yo..yo + cout];
        for c in 0..cin {
            let xv = x[xo + c];
            if xv == F::zero() {
                continue;
            }
            let krow = &k[ko + c * cout..ko + (c + 1) * cout];
            for (yv, &kv) in yrow.iter_mut().zip(krow) {
                *yv = *yv + xv * kv;
            }
        }
    });
    y
}

/// Adjoint of [`conv_forward`] with respect to its input.
pub fn conv_input_adjoint<F: Real>(g: &ConvGeom, gy: &[F], k: &[F]) -> Vec<F> {
    let mut gx = vec![F::zero(); g.input_len()];
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|xo, yo, ko| {
        let gyrow = &gy[yo..yo + cout];
        for c in 0..cin {
            let krow = &k[ko + c * cout..ko + (c + 1) * cout];
            let mut acc = F::zero();
            for (&a, &b) in gyrow.iter().zip(krow) {
                acc = acc + a * b;
            }
            gx[xo + c] = gx[xo + c] + acc;
        }
    });
    gx
}

/// Adjoint of [`conv_forward`] with respect to its kernel.
pub fn conv_kernel_adjoint<F: Real>(g: &ConvGeom, x: &[F], gy: &[F]) -> Vec<F> {
    let mut gk = vec![F::zero(); g.kernel_len()];
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|xo, yo, ko| {
        let gyrow = &gy[yo..yo + cout];
        for c in 0..cin {
            let xv = x[xo + c];
            if xv == F::zero() {
                continue;
            }
            let gkrow = &mut gk[ko + c * cout..ko + (c + 1) * cout];
            for (gv, &b) in gkrow.iter_mut().zip(gyrow) {
                *gv = *gv + xv * b;
            }
        }
    });
    gk
}

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Sums the middle axis of an `[outer, mid, inner]` view.
pub fn sum_mid<F: Real>(x: &[F], outer: usize, mid: usize, inner: usize) -> Vec<F> {
    let mut out = vec![F::zero(); outer * inner];
    for o in 0..outer {
        let orow = &mut out[o * inner..(o + 1) * inner];
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            for (acc, &v) in orow.iter_mut().zip(&x[base..base + inner]) {
                *acc = *acc + v;
            }
        }
    }
    out
}

/// Repeats an `[outer, inner]` array along a new middle axis.
pub fn expand_mid<F: Real>(x: &[F], outer: usize, mid: usize, inner: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(outer * mid * inner);
    for o in 0..outer {
        for _ in 0..mid {
            out.extend_from_slice(&x[o * inner..(o + 1) * inner]);
        }
    }
    out
}

/// 2x2 average pooling with stride 2 over NHWC.
pub fn avg_pool2<F: Real>(x: &[F], n: usize, h: usize, w: usize, c: usize) -> Vec<F> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = F::of(0.25);
    let mut out = vec![F::zero(); n * ho * wo * c];
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let o = ((b * ho + i) * wo + j) * c;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                    for ch in 0..c {
                        out[o + ch] = out[o + ch] + x[s + ch];
                    }
                }
                for ch in 0..c {
                    out[o + ch] = out[o + ch] * quarter;
                }
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`]: spreads each pooled value over its 2x2 window, scaled by 1/4.
pub fn avg_pool2_adjoint<F: Real>(g: &[F], n: usize, h: usize, w: usize, c: usize) -> Vec<F> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = F::of(0.25);
    let mut out = vec![F::zero(); n * h * w * c];
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let o = ((b * ho + i) * wo + j) * c;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                    for ch in 0..c {
                        out[s + ch] = g[o + ch] * quarter;
                    }
                }
            }
        }
    }
    out
}

/// `out[i] = x[idx[i]]`, or zero where `idx[i] < 0`.
pub fn gather<F: Real>(x: &[F], idx: &[isize]) -> Vec<F> {
    idx.iter()
        .map(|&i| if i < 0 { F::zero() } else { x[i as usize] })
        .collect()
}

/// Adjoint of [`gather`].
pub fn scatter_add<F: Real>(g: &[F], idx: &[isize], len: usize) -> Vec<F> {
    let mut out = vec![F::zero(); len];
    for (&i, &v) in idx.iter().zip(g) {
        if i >= 0 {
            out[i as usize] = out[i as usize] + v;
        }
    }
    out
}
