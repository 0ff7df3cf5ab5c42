//! Procedural toy datasets and PNG folder I/O.
//!
//! Toy classes pair one of eight shape families with one of six palette colors,
//! so up to 48 classes are available. Every random draw comes from ChaCha8, a
//! counter-based generator with a fixed, documented output stream, which keeps
//! generated sets identical across platforms.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]`, stored flat as `N x H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<u32>,
    pub split: Split,
    pub seed: u64,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Indices of the samples of class `c`, in storage order.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] as usize == c).collect()
    }

    /// The selected images as one `[n, H, W, 3]` tensor.
    pub fn batch<F: Real>(&self, indices: &[usize]) -> Result<Tensor<F>> {
        if indices.is_empty() {
            return Err(invalid("empty batch"));
        }
        let data: Vec<F> = indices.iter().flat_map(|&i| self.image(i).iter().map(|&v| F::of(v as f64))).collect();
        Tensor::new(vec![indices.len(), self.height, self.width, 3], data)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pixels: indices.iter().flat_map(|&i| self.image(i).to_vec()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }
}

pub const NUM_FAMILIES: usize = 8;
pub const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.95, 0.85, 0.20],
    [0.80, 0.30, 0.85],
    [0.20, 0.85, 0.85],
];
const BACKGROUND: [f32; 3] = [0.12, 0.12, 0.12];

/// Rendering options for [`generate_toy_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyOptions {
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    /// Random position, scale and color jitter.
    pub jitter: bool,
    pub split: Split,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self { noise: 0.05, jitter: true, split: Split::Train }
    }
}

/// `(family, color)` of class `k`.
pub fn class_style(k: usize) -> (usize, usize) {
    let f = k % NUM_FAMILIES;
    (f, (f + k / NUM_FAMILIES) % PALETTE.len())
}

/// Whether the point `(u, v)` (shape-centred, unit radius) lies inside family `f`.
fn inside(f: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    match f {
        0 => u.abs() <= 1.0 && v.abs() <= 0.3,                               // horizontal bar
        1 => u.abs() <= 0.3 && v.abs() <= 1.0,                               // vertical bar
        2 => r <= 0.9,                                                       // disk
        3 => (0.55..=1.0).contains(&r),                                      // ring
        4 => (u.abs() <= 0.25 && v.abs() <= 1.0) || (v.abs() <= 0.25 && u.abs() <= 1.0), // cross
        5 => u.abs() <= 0.75 && v.abs() <= 0.75 && (u.abs() >= 0.4 || v.abs() >= 0.4), // hollow square
        6 => v <= 0.8 && v >= -0.9 + 2.0 * u.abs(),                           // triangle
        _ => (u - v).abs() <= 0.35 && u.abs() <= 1.0 && v.abs() <= 1.0,       // diagonal
    }
}

/// [`generate_toy_with`] under the default options (jitter on, noise 0.05).
pub fn generate_toy(num_classes: usize, per_class: usize, height: usize, width: usize, seed: u64) -> Result<LabeledImageSet> {
    generate_toy_with(num_classes, per_class, height, width, seed, ToyOptions::default())
}

/// Renders `per_class` images of each of `num_classes` shape/color classes, class-major.
pub fn generate_toy_with(
    num_classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
    opts: ToyOptions,
) -> Result<LabeledImageSet> {
    let max = NUM_FAMILIES * PALETTE.len();
    if num_classes < 2 || num_classes > max {
        return Err(invalid(format!("toy data supports 2..={max} classes, got {num_classes}")));
    }
    if per_class == 0 || height == 0 || width == 0 {
        return Err(invalid("toy data needs positive sizes"));
    }
    if !(opts.noise >= 0.0) {
        return Err(invalid("noise must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(if opts.split == Split::Train { 0 } else { 1 });
    let normal = Normal::new(0.0, opts.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut pixels = Vec::with_capacity(num_classes * per_class * height * width * 3);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for k in 0..num_classes {
        let (family, color) = class_style(k);
        for _ in 0..per_class {
            let (mut cx, mut cy, mut scale, mut rgb) = (0.5f32, 0.5f32, 0.35f32, PALETTE[color]);
            if opts.jitter {
                cx += rng.random_range(-0.08..0.08);
                cy += rng.random_range(-0.08..0.08);
                scale *= rng.random_range(0.85..1.15);
                for c in rgb.iter_mut() {
                    *c = (*c + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0);
                }
            }
            for y in 0..height {
                for x in 0..width {
                    let u = ((x as f32 + 0.5) / width as f32 - cx) / scale;
                    let v = ((y as f32 + 0.5) / height as f32 - cy) / scale;
                    let base = if inside(family, u, v) { rgb } else { BACKGROUND };
                    for c in base {
                        let n = if opts.noise > 0.0 { normal.sample(&mut rng) as f32 } else { 0.0 };
                        pixels.push((c + n).clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(k as u32);
        }
    }
    Ok(LabeledImageSet { height, width, num_classes, pixels, labels, split: opts.split, seed })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one PNG per image under `dir/class_XXX/NNNNN.png`.
pub fn export_images(set: &LabeledImageSet, dir: &Path) -> Result<()> {
    for c in 0..set.num_classes {
        std::fs::create_dir_all(dir.join(format!("class_{c:03}")))?;
    }
    for i in 0..set.len() {
        let buf: Vec<u8> = set.image(i).iter().map(|&v| to_u8(v)).collect();
        let img = image::RgbImage::from_raw(set.width as u32, set.height as u32, buf)
            .ok_or_else(|| invalid("image buffer size"))?;
        img.save(dir.join(format!("class_{:03}", set.labels[i])).join(format!("{i:05}.png")))?;
    }
    Ok(())
}

/// Writes a single `[H, W, 3]` image as an 8-bit PNG, clamping to `[0, 1]`.
pub fn save_png<F: Real>(image: &Tensor<F>, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(invalid(format!("expected an [H, W, 3] image, got {s:?}")));
    }
    let buf: Vec<u8> = image.data().iter().map(|v| to_u8(v.as_f64() as f32)).collect();
    image::RgbImage::from_raw(s[1] as u32, s[0] as u32, buf)
        .ok_or_else(|| invalid("image buffer size"))?
        .save(path)?;
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Loads a folder with one subdirectory of PNG files per class; classes are
/// numbered in sorted subdirectory order.
pub fn load_images(dir: &Path) -> Result<LabeledImageSet> {
    let classes: Vec<_> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(invalid(format!("no class directories under {}", dir.display())));
    }
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    let mut size: Option<(u32, u32)> = None;
    for (k, cdir) in classes.iter().enumerate() {
        let files: Vec<_> = sorted_entries(cdir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        if files.is_empty() {
            return Err(invalid(format!("class directory {} has no PNG files", cdir.display())));
        }
        for f in files {
            let img = image::open(&f)?.to_rgb8();
            let dims = img.dimensions();
            if *size.get_or_insert(dims) != dims {
                return Err(Error::Format(format!("{} is {}x{}, expected {:?}", f.display(), dims.0, dims.1, size.unwrap())));
            }
            pixels.extend(img.as_raw().iter().map(|&b| b as f32 / 255.0));
            labels.push(k as u32);
        }
    }
    let (w, h) = size.expect("at least one image");
    Ok(LabeledImageSet {
        height: h as usize,
        width: w as usize,
        num_classes: classes.len(),
        pixels,
        labels,
        split: Split::Train,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_toy(4, 3, 16, 16, 9).unwrap();
        let b = generate_toy(4, 3, 16, 16, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_toy(4, 3, 16, 16, 10).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn train_and_test_differ() {
        let a = generate_toy(3, 2, 8, 8, 1).unwrap();
        let b = generate_toy_with(3, 2, 8, 8, 1, ToyOptions { split: Split::Test, ..Default::default() }).unwrap();
        assert_ne!(a.pixels, b.pixels);
    }

    #[test]
    fn clean_exemplars_are_identical_within_class() {
        let opts = ToyOptions { noise: 0.0, jitter: false, split: Split::Train };
        let s = generate_toy_with(5, 4, 12, 12, 3, opts).unwrap();
        for c in 0..5 {
            let idx = s.class_indices(c);
            assert!(idx.iter().all(|&i| s.image(i) == s.image(idx[0])));
        }
        assert_ne!(s.image(0), s.image(4));
    }

    #[test]
    fn all_48_classes_distinct() {
        let opts = ToyOptions { noise: 0.0, jitter: false, split: Split::Train };
        let s = generate_toy_with(48, 1, 16, 16, 0, opts).unwrap();
        for i in 0..48 {
            for j in 0..i {
                assert_ne!(s.image(i), s.image(j), "classes {i} and {j}");
            }
        }
        assert!(generate_toy(49, 1, 8, 8, 0).is_err());
        assert!(generate_toy(1, 1, 8, 8, 0).is_err());
    }

    #[test]
    fn values_in_unit_range_and_labels_class_major() {
        let s = generate_toy(3, 5, 8, 8, 2).unwrap();
        assert!(s.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.labels, (0..15).map(|i| i / 5).collect::<Vec<u32>>());
    }

    /// Softmax regression on raw pixels, full-batch gradient descent.
    fn linear_accuracy(train: &LabeledImageSet, test: &LabeledImageSet) -> f64 {
        let d = train.image_len();
        let k = train.num_classes;
        let mut w = vec![0.0f64; (d + 1) * k];
        let logits = |w: &[f64], x: &[f32]| -> Vec<f64> {
            (0..k).map(|c| w[d * k + c] + x.iter().enumerate().map(|(j, &v)| v as f64 * w[j * k + c]).sum::<f64>()).collect()
        };
        for _ in 0..300 {
            let mut g = vec![0.0; w.len()];
            for i in 0..train.len() {
                let x = train.image(i);
                let z = logits(&w, x);
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..k {
                    let r = e[c] / s - if train.labels[i] as usize == c { 1.0 } else { 0.0 };
                    for (j, &v) in x.iter().enumerate() {
                        g[j * k + c] += r * v as f64;
                    }
                    g[d * k + c] += r;
                }
            }
            for (wv, gv) in w.iter_mut().zip(&g) {
                *wv -= 0.5 * gv / train.len() as f64;
            }
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let z = logits(&w, test.image(i));
                let arg = (0..k).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
                arg == test.labels[i] as usize
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn linearly_separable_at_desk_scale() {
        let train = generate_toy(4, 200, 16, 16, 21).unwrap();
        let test = generate_toy_with(4, 50, 16, 16, 21, ToyOptions { split: Split::Test, ..Default::default() }).unwrap();
        let acc = linear_accuracy(&train, &test);
        assert!(acc >= 0.95, "linear accuracy {acc}");
    }

    #[test]
    fn png_round_trip_within_one_level() {
        let s = generate_toy(3, 2, 10, 7, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_images(&s, dir.path()).unwrap();
        let back = load_images(dir.path()).unwrap();
        assert_eq!(back.labels, s.labels);
        assert_eq!((back.height, back.width, back.num_classes), (10, 7, 3));
        for (a, b) in s.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn empty_class_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        assert!(load_images(dir.path()).is_err());
        assert!(load_images(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn inconsistent_dims_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        export_images(&generate_toy(2, 1, 4, 4, 0).unwrap(), dir.path()).unwrap();
        image::RgbImage::new(5, 4).save(dir.path().join("class_001").join("zz.png")).unwrap();
        assert!(matches!(load_images(dir.path()), Err(Error::Format(_))));
    }
}
