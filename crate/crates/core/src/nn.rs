//! Fixed-architecture differentiable binary detector.
//!
//! Topology (fixed): two 3x3 convolutions with stride 1, reflect padding
//! and ReLU, each followed by 2x2 average pooling, then global average
//! pooling into the penultimate feature vector `z`, followed by an affine
//! head producing two logits. The head input `z` is the feature every
//! shift/entropy analysis in the crate operates on.
//!
//! Gradients with respect to inputs and parameters are exact analytic
//! reverse-mode passes through this stack; there is no general autodiff.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{ByteReader, ByteWriter};
use crate::label::Label;
use crate::rng::{streams, Rng};
use crate::scalar::{lit, prob_floor, Scalar};
use crate::tensor::ImageTensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRIMMDL1";
const CHECKPOINT_VERSION: u32 = 1;

/// Default hidden channel count of the first convolution.
pub const DEFAULT_HIDDEN: usize = 16;
/// Default penultimate feature dimension (channels of the second convolution).
pub const DEFAULT_FEATURE_DIM: usize = 32;

/// Shape parameters of the fixed topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub feature_dim: usize,
}

impl Architecture {
    /// Descriptor with the default channel widths.
    pub fn new(in_channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::with_widths(in_channels, height, width, DEFAULT_HIDDEN, DEFAULT_FEATURE_DIM)
    }

    pub fn with_widths(
        in_channels: usize,
        height: usize,
        width: usize,
        hidden: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        if in_channels == 0 || hidden == 0 || feature_dim == 0 {
            return Err(Error::InvalidConfig(
                "architecture channel counts must be positive".into(),
            ));
        }
        // Two 2x2 pools plus reflect padding need both spatial dims to be
        // multiples of 4 and at least 4.
        if height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "spatial dims must be multiples of 4 and >= 4, got {height}x{width}"
            )));
        }
        Ok(Architecture {
            in_channels,
            height,
            width,
            hidden,
            feature_dim,
        })
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.in_channels, self.height, self.width)
    }
}

/// 3x3 convolution parameters, weight layout `[out][in][3][3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    fn zeroed(in_ch: usize, out_ch: usize) -> Self {
        Conv2d {
            in_ch,
            out_ch,
            weight: vec![T::zero(); out_ch * in_ch * 9],
            bias: vec![T::zero(); out_ch],
        }
    }

    #[inline]
    pub fn weight_index(&self, o: usize, c: usize, ki: usize, kj: usize) -> usize {
        ((o * self.in_ch + c) * 3 + ki) * 3 + kj
    }
}

/// Affine layer, weight layout `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Affine<T> {
    fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Affine {
            in_dim,
            out_dim,
            weight: vec![T::zero(); out_dim * in_dim],
            bias: vec![T::zero(); out_dim],
        }
    }
}

/// The detector: immutable after training, safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel<T> {
    arch: Architecture,
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub head: Affine<T>,
}

impl<T: Scalar> DetectorModel<T> {
    /// All-zero parameters.
    pub fn zeroed(arch: Architecture) -> Self {
        DetectorModel {
            arch,
            conv1: Conv2d::zeroed(arch.in_channels, arch.hidden),
            conv2: Conv2d::zeroed(arch.hidden, arch.feature_dim),
            head: Affine::zeroed(arch.feature_dim, 2),
        }
    }

    /// Seeded uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut model = Self::zeroed(arch);
        let mut layer = 0u64;
        let mut fill = |w: &mut [T], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = Rng::derive(seed, &[streams::MODEL_INIT, layer]);
            for v in w.iter_mut() {
                *v = lit(rng.uniform(-bound, bound));
            }
            layer += 1;
        };
        let fan1 = arch.in_channels * 9;
        fill(&mut model.conv1.weight, fan1);
        fill(&mut model.conv1.bias, fan1);
        let fan2 = arch.hidden * 9;
        fill(&mut model.conv2.weight, fan2);
        fill(&mut model.conv2.bias, fan2);
        fill(&mut model.head.weight, arch.feature_dim);
        fill(&mut model.head.bias, arch.feature_dim);
        model
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    fn check_input(&self, x: &ImageTensor<T>) -> Result<()> {
        if x.shape() != self.arch.input_shape() {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_shape(),
                got: x.shape(),
            });
        }
        Ok(())
    }

    /// Forward pass: logits and the penultimate feature vector.
    pub fn forward(&self, x: &ImageTensor<T>) -> Result<([T; 2], Vec<T>)> {
        let cache = self.forward_cached(x)?;
        Ok((cache.logits, cache.z))
    }

    /// Forward returning just the softmax output.
    pub fn predict(&self, x: &ImageTensor<T>) -> Result<SoftmaxOutput<T>> {
        let (logits, _) = self.forward(x)?;
        softmax(logits)
    }

    /// Cross-entropy loss of the prediction on `x` against `y`.
    pub fn ce_loss(&self, x: &ImageTensor<T>, y: Label) -> Result<T> {
        let probs = self.predict(x)?;
        Ok(cross_entropy(&probs, y))
    }

    fn forward_cached(&self, x: &ImageTensor<T>) -> Result<Cache<T>> {
        self.check_input(x)?;
        let (h, w) = (self.arch.height, self.arch.width);
        let (h1, w1) = (h / 2, w / 2);
        let (h2, w2) = (h1 / 2, w1 / 2);

        let a1 = conv_forward(&self.conv1, x.data(), h, w);
        let r1 = relu(&a1);
        let p1 = avgpool2(&r1, self.conv1.out_ch, h, w);
        let a2 = conv_forward(&self.conv2, &p1, h1, w1);
        let r2 = relu(&a2);
        let p2 = avgpool2(&r2, self.conv2.out_ch, h1, w1);

        // Global average pool over the remaining h2 x w2 grid.
        let plane = h2 * w2;
        let inv = lit::<T>(1.0 / plane as f64);
        let mut z = vec![T::zero(); self.arch.feature_dim];
        for (c, zc) in z.iter_mut().enumerate() {
            let mut acc = T::zero();
            for v in &p2[c * plane..(c + 1) * plane] {
                acc += *v;
            }
            *zc = acc * inv;
        }

        let mut logits = [self.head.bias[0], self.head.bias[1]];
        for k in 0..2 {
            for (d, zd) in z.iter().enumerate() {
                logits[k] += self.head.weight[k * self.arch.feature_dim + d] * *zd;
            }
        }

        Ok(Cache {
            a1,
            p1,
            a2,
            z,
            logits,
        })
    }

    /// Exact gradient of the cross-entropy loss with respect to the input,
    /// flattened in the image layout.
    pub fn input_gradient(&self, x: &ImageTensor<T>, y: Label) -> Result<Vec<T>> {
        let cache = self.forward_cached(x)?;
        let dlogits = ce_dlogits(&softmax(cache.logits)?, y);
        Ok(self.backward(x, &cache, dlogits).1)
    }

    /// Gradient of `dlogits . logits` with respect to the input; the
    /// building block behind margin-style attack objectives.
    pub fn input_gradient_from_dlogits(
        &self,
        x: &ImageTensor<T>,
        dlogits: [T; 2],
    ) -> Result<Vec<T>> {
        let cache = self.forward_cached(x)?;
        Ok(self.backward(x, &cache, dlogits).1)
    }

    /// Per-sample parameter gradients of `dlogits . logits`.
    pub fn param_gradient_from_dlogits(
        &self,
        x: &ImageTensor<T>,
        dlogits: [T; 2],
    ) -> Result<ParamGrads<T>> {
        let cache = self.forward_cached(x)?;
        Ok(self.backward(x, &cache, dlogits).0)
    }

    /// Per-sample cross-entropy loss and parameter gradient from a single
    /// forward pass.
    pub fn ce_loss_and_param_grad(
        &self,
        x: &ImageTensor<T>,
        y: Label,
    ) -> Result<(T, ParamGrads<T>)> {
        let cache = self.forward_cached(x)?;
        let probs = softmax(cache.logits)?;
        let loss = cross_entropy(&probs, y);
        let (grads, _) = self.backward(x, &cache, ce_dlogits(&probs, y));
        Ok((loss, grads))
    }

    /// Mean cross-entropy parameter gradient over a batch.
    pub fn param_gradient(&self, batch: &[(&ImageTensor<T>, Label)]) -> Result<ParamGrads<T>> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = ParamGrads::zeroed(self.arch);
        for (x, y) in batch {
            let cache = self.forward_cached(x)?;
            let dlogits = ce_dlogits(&softmax(cache.logits)?, *y);
            total.add_assign(&self.backward(x, &cache, dlogits).0);
        }
        total.scale(lit::<T>(1.0 / batch.len() as f64));
        Ok(total)
    }

    /// Gradient descent step: `theta -= lr * grad`.
    pub fn apply_step(&mut self, grads: &ParamGrads<T>, lr: T) {
        let update = |p: &mut [T], g: &[T]| {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv = *pv - lr * *gv;
            }
        };
        update(&mut self.conv1.weight, &grads.conv1_w);
        update(&mut self.conv1.bias, &grads.conv1_b);
        update(&mut self.conv2.weight, &grads.conv2_w);
        update(&mut self.conv2.bias, &grads.conv2_b);
        update(&mut self.head.weight, &grads.head_w);
        update(&mut self.head.bias, &grads.head_b);
    }

    /// Reverse pass from `dlogits`, producing parameter and input gradients.
    fn backward(
        &self,
        x: &ImageTensor<T>,
        cache: &Cache<T>,
        dlogits: [T; 2],
    ) -> (ParamGrads<T>, Vec<T>) {
        let arch = self.arch;
        let (h, w) = (arch.height, arch.width);
        let (h1, w1) = (h / 2, w / 2);
        let (h2, w2) = (h1 / 2, w1 / 2);
        let d = arch.feature_dim;

        let mut grads = ParamGrads::zeroed(arch);

        // Affine head.
        let mut dz = vec![T::zero(); d];
        for k in 0..2 {
            grads.head_b[k] = dlogits[k];
            for (i, zi) in cache.z.iter().enumerate() {
                grads.head_w[k * d + i] = dlogits[k] * *zi;
                dz[i] += self.head.weight[k * d + i] * dlogits[k];
            }
        }

        // Global average pool.
        let plane2 = h2 * w2;
        let inv2 = lit::<T>(1.0 / plane2 as f64);
        let mut dp2 = vec![T::zero(); d * plane2];
        for c in 0..d {
            let g = dz[c] * inv2;
            for v in &mut dp2[c * plane2..(c + 1) * plane2] {
                *v = g;
            }
        }

        // Pool 2 backward, ReLU 2 backward.
        let mut da2 = avgpool2_backward(&dp2, d, h1, w1);
        relu_backward(&mut da2, &cache.a2);

        // Conv 2 backward.
        let (dw2, db2, dp1) = conv_backward(&self.conv2, &cache.p1, &da2, h1, w1);
        grads.conv2_w = dw2;
        grads.conv2_b = db2;

        // Pool 1 backward, ReLU 1 backward.
        let mut da1 = avgpool2_backward(&dp1, arch.hidden, h, w);
        relu_backward(&mut da1, &cache.a1);

        // Conv 1 backward.
        let (dw1, db1, dx) = conv_backward(&self.conv1, x.data(), &da1, h, w);
        grads.conv1_w = dw1;
        grads.conv1_b = db1;

        (grads, dx)
    }

    /// Serialize to the documented little-endian checkpoint format.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.arch.in_channels as u32);
        w.u32(self.arch.height as u32);
        w.u32(self.arch.width as u32);
        w.u32(self.arch.hidden as u32);
        w.u32(self.arch.feature_dim as u32);
        for arr in [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.head.weight,
            &self.head.bias,
        ] {
            for v in arr.iter() {
                w.f64(v.to_f64().expect("scalar convertible to f64"));
            }
        }
        fs::write(path, w.finish())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        let mut r = ByteReader::new(&buf);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 8,
                what: format!("unsupported checkpoint version {version}"),
            });
        }
        let in_channels = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let arch = Architecture::with_widths(in_channels, height, width, hidden, feature_dim)
            .map_err(|e| Error::Format {
                offset: 12,
                what: format!("bad architecture descriptor: {e}"),
            })?;
        let mut model = Self::zeroed(arch);
        {
            let arrays: [&mut Vec<T>; 6] = [
                &mut model.conv1.weight,
                &mut model.conv1.bias,
                &mut model.conv2.weight,
                &mut model.conv2.bias,
                &mut model.head.weight,
                &mut model.head.bias,
            ];
            for arr in arrays {
                for v in arr.iter_mut() {
                    *v = lit(r.f64()?);
                }
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Format {
                offset: r.offset(),
                what: format!("{} trailing byte(s) after parameters", r.remaining()),
            });
        }
        Ok(model)
    }
}

/// Cached activations of one forward pass (only what backward needs).
struct Cache<T> {
    a1: Vec<T>,
    p1: Vec<T>,
    a2: Vec<T>,
    z: Vec<T>,
    logits: [T; 2],
}

/// Parameter-shaped gradient container.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeroed(arch: Architecture) -> Self {
        ParamGrads {
            conv1_w: vec![T::zero(); arch.hidden * arch.in_channels * 9],
            conv1_b: vec![T::zero(); arch.hidden],
            conv2_w: vec![T::zero(); arch.feature_dim * arch.hidden * 9],
            conv2_b: vec![T::zero(); arch.feature_dim],
            head_w: vec![T::zero(); 2 * arch.feature_dim],
            head_b: vec![T::zero(); 2],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        let add = |a: &mut [T], b: &[T]| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        };
        add(&mut self.conv1_w, &other.conv1_w);
        add(&mut self.conv1_b, &other.conv1_b);
        add(&mut self.conv2_w, &other.conv2_w);
        add(&mut self.conv2_b, &other.conv2_b);
        add(&mut self.head_w, &other.head_w);
        add(&mut self.head_b, &other.head_b);
    }

    pub fn scale(&mut self, s: T) {
        for arr in [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.head_w,
            &mut self.head_b,
        ] {
            for v in arr.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Largest absolute entry, for convergence diagnostics.
    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        for arr in [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.head_w,
            &self.head_b,
        ] {
            for v in arr.iter() {
                m = m.max(v.abs());
            }
        }
        m
    }

    /// Euclidean norm over all entries.
    pub fn norm_l2(&self) -> T {
        let mut acc = T::zero();
        for arr in [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.head_w,
            &self.head_b,
        ] {
            for v in arr.iter() {
                acc += *v * *v;
            }
        }
        acc.sqrt()
    }
}

/// Softmax output of the detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxOutput<T> {
    pub p_real: T,
    pub p_fake: T,
}

impl<T: Scalar> SoftmaxOutput<T> {
    /// Validating constructor for externally supplied probabilities.
    pub fn new(p_real: T, p_fake: T) -> Result<Self> {
        let ok = p_real >= T::zero()
            && p_real <= T::one()
            && p_fake >= T::zero()
            && p_fake <= T::one()
            && ((p_real + p_fake) - T::one()).abs() <= lit(1e-12);
        if !ok {
            return Err(Error::InvalidProbs {
                p_real: p_real.to_f64().unwrap_or(f64::NAN),
                p_fake: p_fake.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(SoftmaxOutput { p_real, p_fake })
    }

    #[inline]
    pub fn prob(&self, y: Label) -> T {
        match y {
            Label::Real => self.p_real,
            Label::Fake => self.p_fake,
        }
    }

    /// Predicted label; ties go to `Real`.
    #[inline]
    pub fn argmax(&self) -> Label {
        if self.p_fake > self.p_real {
            Label::Fake
        } else {
            Label::Real
        }
    }
}

/// Numerically stable softmax of a logit pair.
pub fn softmax<T: Scalar>(logits: [T; 2]) -> Result<SoftmaxOutput<T>> {
    if !logits[0].is_finite() || !logits[1].is_finite() {
        return Err(Error::NonFiniteLogits(
            logits[0].to_f64().unwrap_or(f64::NAN),
            logits[1].to_f64().unwrap_or(f64::NAN),
        ));
    }
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    Ok(SoftmaxOutput {
        p_real: e0 / s,
        p_fake: e1 / s,
    })
}

/// Cross-entropy `-ln p_y`, with the probability clamped to
/// `[prob_floor, 1]` before the logarithm.
pub fn cross_entropy<T: Scalar>(probs: &SoftmaxOutput<T>, y: Label) -> T {
    let p = probs.prob(y).max(prob_floor()).min(T::one());
    -p.ln()
}

/// Gradient of the cross-entropy loss with respect to the logits:
/// `p - onehot(y)`.
#[inline]
pub fn ce_dlogits<T: Scalar>(probs: &SoftmaxOutput<T>, y: Label) -> [T; 2] {
    let mut d = [probs.p_real, probs.p_fake];
    d[y.index()] -= T::one();
    d
}

/// Reflect-padding index map (mirror without edge repetition): -1 -> 1,
/// n -> n-2. Valid for n >= 2 and offsets in [-1, n].
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

fn conv_forward<T: Scalar>(conv: &Conv2d<T>, input: &[T], h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); conv.out_ch * plane];
    for o in 0..conv.out_ch {
        for i in 0..h {
            for j in 0..w {
                let mut acc = conv.bias[o];
                for c in 0..conv.in_ch {
                    let base = c * plane;
                    for ki in 0..3 {
                        let ii = reflect(i as isize + ki as isize - 1, h);
                        for kj in 0..3 {
                            let jj = reflect(j as isize + kj as isize - 1, w);
                            acc += conv.weight[conv.weight_index(o, c, ki, kj)]
                                * input[base + ii * w + jj];
                        }
                    }
                }
                out[o * plane + i * w + j] = acc;
            }
        }
    }
    out
}

/// Backward of `conv_forward`: gradients for weights, biases and the input.
/// Input-gradient contributions accumulate into the same reflected source
/// positions the forward pass read from.
fn conv_backward<T: Scalar>(
    conv: &Conv2d<T>,
    input: &[T],
    dout: &[T],
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = h * w;
    let mut dweight = vec![T::zero(); conv.weight.len()];
    let mut dbias = vec![T::zero(); conv.out_ch];
    let mut dinput = vec![T::zero(); conv.in_ch * plane];
    for o in 0..conv.out_ch {
        for i in 0..h {
            for j in 0..w {
                let g = dout[o * plane + i * w + j];
                dbias[o] += g;
                for c in 0..conv.in_ch {
                    let base = c * plane;
                    for ki in 0..3 {
                        let ii = reflect(i as isize + ki as isize - 1, h);
                        for kj in 0..3 {
                            let jj = reflect(j as isize + kj as isize - 1, w);
                            let widx = conv.weight_index(o, c, ki, kj);
                            dweight[widx] += g * input[base + ii * w + jj];
                            dinput[base + ii * w + jj] += g * conv.weight[widx];
                        }
                    }
                }
            }
        }
    }
    (dweight, dbias, dinput)
}

fn relu<T: Scalar>(a: &[T]) -> Vec<T> {
    a.iter().map(|v| v.max(T::zero())).collect()
}

/// ReLU backward with the subgradient at 0 fixed to 0.
fn relu_backward<T: Scalar>(d: &mut [T], pre: &[T]) {
    for (dv, av) in d.iter_mut().zip(pre) {
        if *av <= T::zero() {
            *dv = T::zero();
        }
    }
}

fn avgpool2<T: Scalar>(input: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = lit::<T>(0.25);
    let mut out = vec![T::zero(); ch * ho * wo];
    for c in 0..ch {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = T::zero();
                for di in 0..2 {
                    for dj in 0..2 {
                        acc += input[c * h * w + (2 * i + di) * w + (2 * j + dj)];
                    }
                }
                out[c * ho * wo + i * wo + j] = acc * quarter;
            }
        }
    }
    out
}

fn avgpool2_backward<T: Scalar>(dout: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = lit::<T>(0.25);
    let mut din = vec![T::zero(); ch * h * w];
    for c in 0..ch {
        for i in 0..ho {
            for j in 0..wo {
                let g = dout[c * ho * wo + i * wo + j] * quarter;
                for di in 0..2 {
                    for dj in 0..2 {
                        din[c * h * w + (2 * i + di) * w + (2 * j + dj)] = g;
                    }
                }
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Architecture {
        Architecture::with_widths(1, 4, 4, 1, 1).unwrap()
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let model = DetectorModel::<f64>::init(Architecture::new(1, 8, 8).unwrap(), 1);
        let x = ImageTensor::constant(1, 4, 4, 0.5);
        assert!(matches!(
            model.forward(&x),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_model_logits_equal_head_biases() {
        let mut model = DetectorModel::<f64>::zeroed(Architecture::new(1, 4, 4).unwrap());
        model.head.bias = vec![0.3, -0.7];
        let x = ImageTensor::constant(1, 4, 4, 0.0);
        let (logits, z) = model.forward(&x).unwrap();
        assert_eq!(logits, [0.3, -0.7]);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DetectorModel::<f64>::init(Architecture::new(1, 8, 8).unwrap(), 42);
        let x = ImageTensor::from_fn(1, 8, 8, |_, i, j| ((i * 8 + j) as f64) / 100.0);
        let (l1, z1) = model.forward(&x).unwrap();
        let (l2, z2) = model.forward(&x).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(z1, z2);
    }

    #[test]
    fn hand_computed_affine_configuration() {
        // With single positive center taps the whole stack is affine in the
        // input mean: logits_k = w_k * (alpha * beta * mean(x)) + b_k.
        let mut model = DetectorModel::<f64>::zeroed(tiny_arch());
        let alpha = 0.5;
        let beta = 2.0;
        let c1 = model.conv1.weight_index(0, 0, 1, 1);
        model.conv1.weight[c1] = alpha;
        let c2 = model.conv2.weight_index(0, 0, 1, 1);
        model.conv2.weight[c2] = beta;
        model.head.weight = vec![1.5, -0.25];
        model.head.bias = vec![0.1, -0.2];

        let vals: Vec<f64> = (0..16).map(|k| k as f64 / 20.0).collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let x = ImageTensor::new(1, 4, 4, vals).unwrap();

        let (logits, z) = model.forward(&x).unwrap();
        let feat = alpha * beta * mean;
        assert!((z[0] - feat).abs() < 1e-12);
        assert!((logits[0] - (1.5 * feat + 0.1)).abs() < 1e-12);
        assert!((logits[1] - (-0.25 * feat - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax([0.0_f64, 0.0]).unwrap();
        assert_eq!(p.p_real, 0.5);
        assert_eq!(p.p_fake, 0.5);

        let p = softmax([3.25_f64, 3.25]).unwrap();
        assert_eq!(p.p_real, 0.5);

        let p = softmax([3.0_f64.ln(), 0.0]).unwrap();
        assert!((p.p_real - 0.75).abs() < 1e-15);
        assert!((p.p_fake - 0.25).abs() < 1e-15);

        assert!(softmax([f64::NAN, 0.0]).is_err());
        assert!(softmax([f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = Rng::new(9);
        for _ in 0..200 {
            let l0 = rng.uniform(-30.0, 30.0);
            let l1 = rng.uniform(-30.0, 30.0);
            let c = rng.uniform(-100.0, 100.0);
            let a = softmax([l0, l1]).unwrap();
            let b = softmax([l0 + c, l1 + c]).unwrap();
            assert!((a.p_real - b.p_real).abs() <= 1e-12);
            assert!((a.p_fake - b.p_fake).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let sat = SoftmaxOutput::new(1.0_f64, 0.0).unwrap();
        assert!(cross_entropy(&sat, Label::Real) <= 1e-12);

        let even = SoftmaxOutput::new(0.5_f64, 0.5).unwrap();
        assert!((cross_entropy(&even, Label::Real) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cross_entropy(&even, Label::Fake) - std::f64::consts::LN_2).abs() < 1e-12);

        let skew = SoftmaxOutput::new(0.9_f64, 0.1).unwrap();
        assert!((cross_entropy(&skew, Label::Fake) - 2.302585092994046).abs() < 1e-12);
    }

    #[test]
    fn zero_head_means_zero_input_gradient() {
        let mut model = DetectorModel::<f64>::init(Architecture::new(1, 4, 4).unwrap(), 5);
        model.head.weight = vec![0.0; model.head.weight.len()];
        let x = ImageTensor::constant(1, 4, 4, 0.4);
        let g = model.input_gradient(&x, Label::Fake).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn label_antisymmetry_of_input_gradient() {
        let model = DetectorModel::<f64>::init(Architecture::new(1, 8, 8).unwrap(), 17);
        let x = ImageTensor::from_fn(1, 8, 8, |_, i, j| 0.2 + 0.6 * ((i * 31 + j * 7) % 13) as f64 / 13.0);
        let probs = model.predict(&x).unwrap();
        let g_real = model.input_gradient(&x, Label::Real).unwrap();
        let g_fake = model.input_gradient(&x, Label::Fake).unwrap();
        // grad(y=real) = -(p_fake / p_real) * grad(y=fake)
        let ratio = probs.p_fake / probs.p_real;
        for (gr, gf) in g_real.iter().zip(&g_fake) {
            assert!((gr + ratio * gf).abs() <= 1e-10 * (1.0 + gf.abs()));
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = DetectorModel::<f64>::init(Architecture::new(1, 8, 8).unwrap(), 23);
        model.save_checkpoint(&path).unwrap();
        let loaded = DetectorModel::<f64>::load_checkpoint(&path).unwrap();
        assert_eq!(model, loaded);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match DetectorModel::<f64>::load_checkpoint(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        // restore magic first
        let mut bytes2 = std::fs::read(&path).unwrap();
        bytes2[0] = b'T';
        std::fs::write(&path, &bytes2).unwrap();
        assert!(matches!(
            DetectorModel::<f64>::load_checkpoint(&path),
            Err(Error::Truncated { .. })
        ));
    }
}
