//! Randomized preprocessing pipeline: Gaussian blur, random resized crop
//! and horizontal flip, applied in declared order with a documented RNG
//! consumption sequence so outputs are reproducible.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tensor::ImageTensor;

/// One step of the denoising pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiseStep {
    GaussianBlur {
        kernel: usize,
        sigma: f64,
    },
    RandomResizedCrop {
        scale_min: f64,
        scale_max: f64,
        aspect_min: f64,
        aspect_max: f64,
    },
    HorizontalFlip {
        p: f64,
    },
}

/// Ordered step list plus the number of independent draws per input.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserSpec {
    pub steps: Vec<DenoiseStep>,
    pub draws_per_input: usize,
}

impl DenoiserSpec {
    pub fn new(steps: Vec<DenoiseStep>, draws_per_input: usize) -> Result<Self> {
        if draws_per_input == 0 {
            return Err(Error::InvalidConfig("draws_per_input must be >= 1".into()));
        }
        for step in &steps {
            match *step {
                DenoiseStep::GaussianBlur { kernel, sigma } => {
                    if kernel % 2 == 0 || kernel == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "blur kernel must be odd, got {kernel}"
                        )));
                    }
                    if !(sigma > 0.0) {
                        return Err(Error::InvalidConfig(format!(
                            "blur sigma must be > 0, got {sigma}"
                        )));
                    }
                }
                DenoiseStep::RandomResizedCrop {
                    scale_min,
                    scale_max,
                    aspect_min,
                    aspect_max,
                } => {
                    if !(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0) {
                        return Err(Error::InvalidConfig(format!(
                            "crop scale range ({scale_min}, {scale_max}) invalid"
                        )));
                    }
                    if !(aspect_min > 0.0 && aspect_min <= aspect_max) {
                        return Err(Error::InvalidConfig(format!(
                            "crop aspect range ({aspect_min}, {aspect_max}) invalid"
                        )));
                    }
                }
                DenoiseStep::HorizontalFlip { p } => {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::InvalidConfig(format!(
                            "flip probability {p} outside [0, 1]"
                        )));
                    }
                }
            }
        }
        Ok(DenoiserSpec {
            steps,
            draws_per_input,
        })
    }

    /// Identity pipeline.
    pub fn identity() -> Self {
        DenoiserSpec {
            steps: Vec::new(),
            draws_per_input: 1,
        }
    }

    /// Blur(3, 0.8) + crop(0.5..1.0, 3/4..4/3) + flip(p=1): the full
    /// three-operation pipeline.
    pub fn full_default() -> Self {
        DenoiserSpec::new(
            vec![
                DenoiseStep::GaussianBlur {
                    kernel: 3,
                    sigma: 0.8,
                },
                DenoiseStep::RandomResizedCrop {
                    scale_min: 0.5,
                    scale_max: 1.0,
                    aspect_min: 0.75,
                    aspect_max: 4.0 / 3.0,
                },
                DenoiseStep::HorizontalFlip { p: 1.0 },
            ],
            1,
        )
        .expect("default spec is valid")
    }

    /// Flip-only pipeline, for detectors whose cue blurring would destroy.
    pub fn flip_only() -> Self {
        DenoiserSpec::new(vec![DenoiseStep::HorizontalFlip { p: 1.0 }], 1)
            .expect("flip-only spec is valid")
    }
}

/// Normalized discrete Gaussian kernel of odd size `kernel`.
pub fn gaussian_kernel(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let mut w = Vec::with_capacity(kernel * kernel);
    let denom = 2.0 * sigma * sigma;
    for di in -r..=r {
        for dj in -r..=r {
            w.push((-((di * di + dj * dj) as f64) / denom).exp());
        }
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

/// Per-channel 2-D convolution with the normalized Gaussian, reflect
/// boundary handling.
pub fn gaussian_blur<T: Scalar>(
    x: &ImageTensor<T>,
    kernel: usize,
    sigma: f64,
) -> Result<ImageTensor<T>> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(Error::InvalidConfig(format!(
            "blur kernel must be odd, got {kernel}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "blur sigma must be > 0, got {sigma}"
        )));
    }
    let (_, h, w) = x.shape();
    let r = kernel / 2;
    if r >= h || r >= w {
        return Err(Error::InvalidConfig(format!(
            "blur radius {r} too large for {h}x{w} image"
        )));
    }
    let weights: Vec<T> = gaussian_kernel(kernel, sigma).into_iter().map(lit).collect();
    let ri = r as isize;
    Ok(ImageTensor::from_fn(x.channels(), h, w, |c, i, j| {
        let mut acc = T::zero();
        let mut k = 0;
        for di in -ri..=ri {
            let ii = reflect(i as isize + di, h);
            for dj in -ri..=ri {
                let jj = reflect(j as isize + dj, w);
                acc += weights[k] * x.get(c, ii, jj);
                k += 1;
            }
        }
        acc
    }))
}

/// Bilinear resize with the pixel-center convention
/// `src = (dst + 0.5) * (src_size / dst_size) - 0.5`, edges clamped.
fn bilinear_resize<T: Scalar>(
    src: &ImageTensor<T>,
    out_h: usize,
    out_w: usize,
) -> ImageTensor<T> {
    let (c, sh, sw) = src.shape();
    let sy = sh as f64 / out_h as f64;
    let sx = sw as f64 / out_w as f64;
    ImageTensor::from_fn(c, out_h, out_w, |ch, i, j| {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let ty = lit::<T>(fy - y0 as f64);
        let tx = lit::<T>(fx - x0 as f64);
        let one = T::one();
        let top = src.get(ch, y0, x0) * (one - tx) + src.get(ch, y0, x1) * tx;
        let bot = src.get(ch, y1, x0) * (one - tx) + src.get(ch, y1, x1) * tx;
        top * (one - ty) + bot * ty
    })
}

fn crop<T: Scalar>(
    x: &ImageTensor<T>,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
) -> ImageTensor<T> {
    ImageTensor::from_fn(x.channels(), ch, cw, |c, i, j| x.get(c, top + i, left + j))
}

/// Random resized crop: sample an area fraction in the scale range and an
/// aspect ratio in the aspect range, crop, then resize back to the input
/// dimensions.
///
/// RNG consumption per attempt: scale, aspect; on geometric success two
/// further draws for the top-left corner. After 10 failed attempts the
/// last sampled crop size is clamped to the image and taken centered.
pub fn random_resized_crop<T: Scalar>(
    x: &ImageTensor<T>,
    scale_min: f64,
    scale_max: f64,
    aspect_min: f64,
    aspect_max: f64,
    rng: &mut Rng,
) -> ImageTensor<T> {
    let (_, h, w) = x.shape();
    let area = (h * w) as f64;
    let mut crop_h = h;
    let mut crop_w = w;
    let mut placed = false;
    let mut top = 0;
    let mut left = 0;
    for _ in 0..10 {
        let s = rng.uniform(scale_min, scale_max);
        let a = rng.uniform(aspect_min, aspect_max);
        let target = area * s;
        let cw = (target * a).sqrt().round() as usize;
        let ch = (target / a).sqrt().round() as usize;
        if cw >= 1 && cw <= w && ch >= 1 && ch <= h {
            crop_h = ch;
            crop_w = cw;
            top = rng.next_below((h - ch + 1) as u64) as usize;
            left = rng.next_below((w - cw + 1) as u64) as usize;
            placed = true;
            break;
        }
        crop_h = ch.clamp(1, h);
        crop_w = cw.clamp(1, w);
    }
    if !placed {
        top = (h - crop_h) / 2;
        left = (w - crop_w) / 2;
    }
    let cropped = crop(x, top, left, crop_h, crop_w);
    bilinear_resize(&cropped, h, w)
}

/// Mirror the image left-right with probability `p`. Consumes exactly one
/// draw.
pub fn horizontal_flip<T: Scalar>(x: &ImageTensor<T>, p: f64, rng: &mut Rng) -> ImageTensor<T> {
    let u = rng.next_f64();
    if u < p {
        x.flipped_horizontal()
    } else {
        x.clone()
    }
}

/// Apply the pipeline steps in declared order, consuming `rng` in the
/// documented per-step sequence.
pub fn apply_denoiser<T: Scalar>(
    spec: &DenoiserSpec,
    x: &ImageTensor<T>,
    rng: &mut Rng,
) -> Result<ImageTensor<T>> {
    let mut out = x.clone();
    for step in &spec.steps {
        out = match *step {
            DenoiseStep::GaussianBlur { kernel, sigma } => gaussian_blur(&out, kernel, sigma)?,
            DenoiseStep::RandomResizedCrop {
                scale_min,
                scale_max,
                aspect_min,
                aspect_max,
            } => random_resized_crop(&out, scale_min, scale_max, aspect_min, aspect_max, rng),
            DenoiseStep::HorizontalFlip { p } => horizontal_flip(&out, p, rng),
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constant_images() {
        let x = ImageTensor::<f64>::constant(1, 6, 6, 0.37);
        let y = gaussian_blur(&x, 3, 0.8).unwrap();
        for v in y.data() {
            assert!((v - 0.37).abs() <= 1e-12);
        }
    }

    #[test]
    fn blur_impulse_reproduces_kernel_weights() {
        // Normalized 3x3 Gaussian at sigma 0.8.
        let center = 0.27249597351072816;
        let edge = 0.12475774762164542;
        let corner = 0.05711825900067254;
        let x = ImageTensor::<f64>::from_fn(1, 5, 5, |_, i, j| {
            if i == 2 && j == 2 {
                1.0
            } else {
                0.0
            }
        });
        let y = gaussian_blur(&x, 3, 0.8).unwrap();
        for i in 0..5usize {
            for j in 0..5usize {
                let di = i.abs_diff(2);
                let dj = j.abs_diff(2);
                let expect = match (di, dj) {
                    (0, 0) => center,
                    (0, 1) | (1, 0) => edge,
                    (1, 1) => corner,
                    _ => 0.0,
                };
                assert!(
                    (y.get(0, i, j) - expect).abs() <= 1e-12,
                    "({i},{j}): {} vs {}",
                    y.get(0, i, j),
                    expect
                );
            }
        }
    }

    #[test]
    fn blur_rejects_even_kernel_and_bad_sigma() {
        let x = ImageTensor::<f64>::constant(1, 4, 4, 0.5);
        assert!(gaussian_blur(&x, 2, 0.8).is_err());
        assert!(gaussian_blur(&x, 3, 0.0).is_err());
        assert!(gaussian_blur(&x, 3, -1.0).is_err());
    }

    #[test]
    fn blur_output_stays_in_range() {
        let mut rng = Rng::new(5);
        let x = ImageTensor::<f64>::from_fn(1, 8, 8, |_, _, _| rng.next_f64());
        let y = gaussian_blur(&x, 5, 2.0).unwrap();
        for v in y.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn crop_with_unit_ranges_is_identity() {
        let x = ImageTensor::<f64>::from_fn(1, 8, 8, |_, i, j| (i * 8 + j) as f64 / 64.0);
        let mut rng = Rng::new(1);
        let y = random_resized_crop(&x, 1.0, 1.0, 1.0, 1.0, &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn crop_is_seed_deterministic_and_shape_preserving() {
        let x = ImageTensor::<f64>::from_fn(2, 10, 6, |c, i, j| ((c + i + j) % 7) as f64 / 7.0);
        let a = random_resized_crop(&x, 0.5, 1.0, 0.75, 1.3333, &mut Rng::new(9));
        let b = random_resized_crop(&x, 0.5, 1.0, 0.75, 1.3333, &mut Rng::new(9));
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
        let c = random_resized_crop(&x, 0.5, 1.0, 0.75, 1.3333, &mut Rng::new(10));
        assert_eq!(c.shape(), x.shape());
    }

    #[test]
    fn flip_examples() {
        let x = ImageTensor::<f64>::new(1, 1, 2, vec![0.2, 0.9]).unwrap();
        let mut rng = Rng::new(3);
        let y = horizontal_flip(&x, 1.0, &mut rng);
        assert_eq!(y.data(), &[0.9, 0.2]);
        let z = horizontal_flip(&y, 1.0, &mut rng);
        assert_eq!(z, x);
        let w = horizontal_flip(&x, 0.0, &mut rng);
        assert_eq!(w, x);
    }

    #[test]
    fn empty_spec_is_identity() {
        let x = ImageTensor::<f64>::from_fn(1, 6, 6, |_, i, j| (i * j) as f64 / 25.0);
        let y = apply_denoiser(&DenoiserSpec::identity(), &x, &mut Rng::new(0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn apply_is_seed_deterministic() {
        let spec = DenoiserSpec::full_default();
        let x = ImageTensor::<f64>::from_fn(1, 8, 8, |_, i, j| ((i * 13 + j * 5) % 11) as f64 / 11.0);
        let a = apply_denoiser(&spec, &x, &mut Rng::derive(7, &[1])).unwrap();
        let b = apply_denoiser(&spec, &x, &mut Rng::derive(7, &[1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flip_only_preserves_pixel_multiset() {
        let spec = DenoiserSpec::flip_only();
        let x = ImageTensor::<f64>::from_fn(1, 4, 4, |_, i, j| (i * 4 + j) as f64 / 16.0);
        let y = apply_denoiser(&spec, &x, &mut Rng::new(2)).unwrap();
        let mut a: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert_ne!(x, y); // asymmetric input actually moved
    }

    #[test]
    fn spec_validation() {
        assert!(DenoiserSpec::new(vec![DenoiseStep::GaussianBlur { kernel: 4, sigma: 1.0 }], 1).is_err());
        assert!(DenoiserSpec::new(vec![DenoiseStep::HorizontalFlip { p: 1.5 }], 1).is_err());
        assert!(DenoiserSpec::new(
            vec![DenoiseStep::RandomResizedCrop {
                scale_min: 0.0,
                scale_max: 1.0,
                aspect_min: 1.0,
                aspect_max: 1.0
            }],
            1
        )
        .is_err());
        assert!(DenoiserSpec::new(vec![], 0).is_err());
    }
}
