//! Image tensors: C×H×W grids of intensities in `[0, 1]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A channel-major image with every value in `[0, 1]`.
///
/// Dimensions are immutable after construction; the flat buffer is laid out
/// as `data[c * h * w + i * w + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    /// Validating constructor.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::EmptyDimensions {
                channels,
                height,
                width,
            });
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::BufferLength {
                expected,
                got: data.len(),
            });
        }
        for (index, v) in data.iter().enumerate() {
            if !(*v >= T::zero() && *v <= T::one()) {
                return Err(Error::PixelOutOfRange {
                    index,
                    value: v.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    /// Build from a per-pixel function; the closure result is clamped to `[0, 1]`.
    pub fn from_fn<F>(channels: usize, height: usize, width: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize, usize) -> T,
    {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(clamp01(f(c, i, j)));
                }
            }
        }
        ImageTensor {
            channels,
            height,
            width,
            data,
        }
    }

    /// Constant-valued image (value clamped to `[0, 1]`).
    pub fn constant(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self::from_fn(channels, height, width, |_, _, _| value)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.height + i) * self.width + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.data[self.idx(c, i, j)]
    }

    /// Largest absolute pixel difference to `other`.
    pub fn linf_distance(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    /// Euclidean distance to `other`.
    pub fn l2_distance(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = *a - *b;
                d * d
            })
            .sum::<T>()
            .sqrt()
    }

    /// Mirror the image left-right.
    pub fn flipped_horizontal(&self) -> Self {
        let (c, h, w) = self.shape();
        let mut data = Vec::with_capacity(self.data.len());
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data.push(self.get(ch, i, w - 1 - j));
                }
            }
        }
        ImageTensor {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }
}

#[inline]
pub(crate) fn clamp01<T: Scalar>(v: T) -> T {
    if v < T::zero() {
        T::zero()
    } else if v > T::one() {
        T::one()
    } else {
        v
    }
}
