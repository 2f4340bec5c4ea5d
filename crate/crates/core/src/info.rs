//! Information-theoretic measures: predictive entropy, KL divergence,
//! cross-entropy-based mutual-information estimators, and exact
//! enumeration oracles over small discrete joints.
//!
//! All quantities are in nats.

use crate::error::{Error, Result};
use crate::label::Label;
use crate::nn::{cross_entropy, DetectorModel, SoftmaxOutput};
use crate::scalar::{lit, prob_floor, Scalar};
use crate::tensor::ImageTensor;

/// Largest number of joint states the enumeration oracle accepts.
pub const MAX_JOINT_STATES: usize = 16 * 16 * 16;

/// Shannon entropy of a binary softmax output, in nats.
///
/// Probabilities are clamped to `[prob_floor, 1]` inside both the log and
/// the multiplier, so the result is strictly positive and bounded by ln 2.
pub fn prediction_entropy<T: Scalar>(probs: &SoftmaxOutput<T>) -> T {
    let term = |p: T| {
        let pc = p.max(prob_floor()).min(T::one());
        -(pc * pc.ln())
    };
    term(probs.p_real) + term(probs.p_fake)
}

/// KL divergence `D(p || q)` between two binary distributions, in nats.
///
/// Zero-probability terms contribute zero; logs are clamped. Rounding can
/// produce a negative result on the order of machine epsilon, which is
/// floored to zero (Gibbs' inequality guarantees the true value is >= 0).
pub fn kl_divergence<T: Scalar>(p: &SoftmaxOutput<T>, q: &SoftmaxOutput<T>) -> T {
    let term = |pv: T, qv: T| {
        if pv <= T::zero() {
            return T::zero();
        }
        let pc = pv.max(prob_floor()).min(T::one());
        let qc = qv.max(prob_floor()).min(T::one());
        pv * (pc.ln() - qc.ln())
    };
    let raw = term(p.p_real, q.p_real) + term(p.p_fake, q.p_fake);
    raw.max(T::zero())
}

/// Cross entropy `H(p, q) = -sum p ln q`, in nats.
pub fn cross_entropy_dist<T: Scalar>(p: &SoftmaxOutput<T>, q: &SoftmaxOutput<T>) -> T {
    let term = |pv: T, qv: T| {
        if pv <= T::zero() {
            return T::zero();
        }
        let qc = qv.max(prob_floor()).min(T::one());
        -(pv * qc.ln())
    };
    term(p.p_real, q.p_real) + term(p.p_fake, q.p_fake)
}

/// Entropy of `p` with zero-probability terms contributing zero, matching
/// the convention of [`cross_entropy_dist`].
fn entropy_dist<T: Scalar>(p: &SoftmaxOutput<T>) -> T {
    let term = |pv: T| {
        if pv <= T::zero() {
            return T::zero();
        }
        let pc = pv.max(prob_floor()).min(T::one());
        -(pv * pc.ln())
    };
    term(p.p_real) + term(p.p_fake)
}

/// Check the identity `D_KL(p||q) = H_cross(p, q) - H(p)` and Gibbs'
/// inequality, returning both sides.
pub fn kl_identity_check<T: Scalar>(p: &SoftmaxOutput<T>, q: &SoftmaxOutput<T>) -> Result<(T, T)> {
    let kl = kl_divergence(p, q);
    let via_cross = cross_entropy_dist(p, q) - entropy_dist(p);
    let tol = lit::<T>(1e-12);
    if (kl - via_cross).abs() > tol {
        return Err(Error::InvalidJoint(format!(
            "KL identity violated: D_KL = {kl}, H_cross - H = {via_cross}"
        )));
    }
    if kl < T::zero() {
        return Err(Error::InvalidJoint(format!("negative KL divergence {kl}")));
    }
    Ok((kl, via_cross))
}

/// Empirical label entropy `H(Y)` of a label sequence, in nats.
pub fn label_entropy<T: Scalar>(labels: &[Label]) -> Result<T> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = labels.len() as f64;
    let n_fake = labels.iter().filter(|l| **l == Label::Fake).count() as f64;
    let p_fake = n_fake / n;
    let probs = SoftmaxOutput::new(lit::<T>(1.0 - p_fake), lit::<T>(p_fake))?;
    Ok(entropy_dist(&probs))
}

/// Mean cross-entropy of model predictions against the true labels.
pub fn mean_cross_entropy<T: Scalar>(
    model: &DetectorModel<T>,
    images: &[ImageTensor<T>],
    labels: &[Label],
) -> Result<T> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if images.len() != labels.len() {
        return Err(Error::BatchSizeMismatch {
            left: images.len(),
            right: labels.len(),
        });
    }
    let mut acc = T::zero();
    for (x, y) in images.iter().zip(labels) {
        let probs = model.predict(x)?;
        acc += cross_entropy(&probs, *y);
    }
    Ok(acc / lit::<T>(images.len() as f64))
}

/// Cross-entropy estimate of `I(Z; Y) ~= H(Y) - mean CE`, in nats.
///
/// This is an estimator, not the true mutual information; it is reported
/// as-is and may be negative.
pub fn mi_estimate<T: Scalar>(
    model: &DetectorModel<T>,
    images: &[ImageTensor<T>],
    labels: &[Label],
) -> Result<T> {
    let h_y = label_entropy::<T>(labels)?;
    let ce = mean_cross_entropy(model, images, labels)?;
    Ok(h_y - ce)
}

/// Estimate of `I(dZ; Y | Z) ~= CE(clean) - CE(adversarial)` over paired
/// batches that share labels.
pub fn mi_delta_estimate<T: Scalar>(
    model: &DetectorModel<T>,
    clean: &[ImageTensor<T>],
    adversarial: &[ImageTensor<T>],
    labels: &[Label],
) -> Result<T> {
    if clean.len() != adversarial.len() {
        return Err(Error::BatchSizeMismatch {
            left: clean.len(),
            right: adversarial.len(),
        });
    }
    let ce_clean = mean_cross_entropy(model, clean, labels)?;
    let ce_adv = mean_cross_entropy(model, adversarial, labels)?;
    Ok(ce_clean - ce_adv)
}

/// L2 norm of the penultimate-feature displacement between two inputs.
pub fn feature_shift<T: Scalar>(
    model: &DetectorModel<T>,
    x_clean: &ImageTensor<T>,
    x_adv: &ImageTensor<T>,
) -> Result<T> {
    let (_, z_clean) = model.forward(x_clean)?;
    let (_, z_adv) = model.forward(x_adv)?;
    let mut acc = T::zero();
    for (a, b) in z_adv.iter().zip(&z_clean) {
        let d = *a - *b;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// One record of the per-step mutual-information trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub i_clean: f64,
    pub i_adv: f64,
    pub i_delta: f64,
    pub ce_clean: f64,
    pub ce_adv: f64,
}

/// Per-step estimates of `I(Z;Y)`, `I(Z~;Y)` and `I(dZ;Y|Z)` recorded
/// during training.
#[derive(Debug, Clone, Default)]
pub struct MiTrace {
    pub records: Vec<TraceRecord>,
}

impl MiTrace {
    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }

    /// CSV export; schema `step,i_clean,i_adv,i_delta,ce_clean,ce_adv`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("#schema=trimlab.trace.v1\n");
        out.push_str("step,i_clean,i_adv,i_delta,ce_clean,ce_adv\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.i_clean, r.i_adv, r.i_delta, r.ce_clean, r.ce_adv
            ));
        }
        out
    }

    /// Mean of `i_clean` over the last `n` records.
    pub fn tail_mean_i_clean(&self, n: usize) -> f64 {
        let k = self.records.len().saturating_sub(n);
        let tail = &self.records[k..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|r| r.i_clean).sum::<f64>() / tail.len() as f64
    }
}

/// A discrete joint distribution over `(Z, dZ, Y)` with `Z~ = Z + dZ`
/// defined on integer supports.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    nz: usize,
    ndz: usize,
    ny: usize,
    /// `pmf[(z * ndz + dz) * ny + y]`
    pmf: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nz: usize, ndz: usize, ny: usize, pmf: Vec<f64>) -> Result<Self> {
        let states = nz
            .checked_mul(ndz)
            .and_then(|v| v.checked_mul(ny))
            .ok_or_else(|| Error::InvalidJoint("support size overflow".into()))?;
        if nz == 0 || ndz == 0 || ny == 0 {
            return Err(Error::InvalidJoint("empty support".into()));
        }
        if states > MAX_JOINT_STATES {
            return Err(Error::SupportTooLarge {
                states,
                max: MAX_JOINT_STATES,
            });
        }
        if pmf.len() != states {
            return Err(Error::InvalidJoint(format!(
                "pmf has {} entries, support needs {}",
                pmf.len(),
                states
            )));
        }
        let mut total = 0.0;
        for &p in &pmf {
            if !(p >= 0.0) {
                return Err(Error::InvalidJoint(format!("negative pmf entry {p}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidJoint(format!("pmf sums to {total}")));
        }
        Ok(DiscreteJoint { nz, ndz, ny, pmf })
    }

    /// Random joint with entries drawn uniformly and normalized.
    pub fn random(nz: usize, ndz: usize, ny: usize, rng: &mut crate::rng::Rng) -> Result<Self> {
        let states = nz * ndz * ny;
        let mut pmf: Vec<f64> = (0..states).map(|_| rng.uniform(1e-3, 1.0)).collect();
        let total: f64 = pmf.iter().sum();
        for p in &mut pmf {
            *p /= total;
        }
        // Nudge the last entry so the sum passes the 1e-12 constructor gate.
        let total: f64 = pmf.iter().sum();
        let last = pmf.len() - 1;
        pmf[last] += 1.0 - total;
        Self::new(nz, ndz, ny, pmf)
    }

    #[inline]
    pub fn prob(&self, z: usize, dz: usize, y: usize) -> f64 {
        self.pmf[(z * self.ndz + dz) * self.ny + y]
    }

    pub fn supports(&self) -> (usize, usize, usize) {
        (self.nz, self.ndz, self.ny)
    }

    /// Support size of `Z~ = Z + dZ`.
    pub fn n_zt(&self) -> usize {
        self.nz + self.ndz - 1
    }
}

/// Every quantity the enumeration oracle computes, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactMiSuite {
    pub i_zt_y: f64,
    pub i_z_y: f64,
    pub i_dz_y: f64,
    pub i_dz_y_given_z: f64,
    /// Interaction information `I(Z; dZ; Y)`.
    pub i_interaction: f64,
    pub h_y: f64,
    pub h_y_given_z_dz: f64,
    pub h_y_given_zt: f64,
}

impl ExactMiSuite {
    /// Residual of the decomposition
    /// `I(Z~;Y) = I(Z;Y) + I(dZ;Y) - I(Z;dZ;Y) + H(Y|Z,dZ) - H(Y|Z~)`,
    /// which holds identically for every joint.
    pub fn decomposition_residual(&self) -> f64 {
        let rhs = self.i_z_y + self.i_dz_y - self.i_interaction + self.h_y_given_z_dz
            - self.h_y_given_zt;
        self.i_zt_y - rhs
    }

    /// Gap `H(Y|Z,dZ) - H(Y|Z~)` closed by the approximation that treats
    /// the pair `(Z, dZ)` and the sum `Z~` as equally informative.
    pub fn approximation_gap(&self) -> f64 {
        self.h_y_given_z_dz - self.h_y_given_zt
    }
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Exhaustive computation of every entropy / mutual-information term of
/// the joint. Pure enumeration; no estimators involved.
pub fn exact_mi_suite(joint: &DiscreteJoint) -> ExactMiSuite {
    let (nz, ndz, ny) = joint.supports();
    let nzt = joint.n_zt();

    // Marginals.
    let mut p_y = vec![0.0; ny];
    let mut p_z = vec![0.0; nz];
    let mut p_dz = vec![0.0; ndz];
    let mut p_zt = vec![0.0; nzt];
    let mut p_zy = vec![0.0; nz * ny];
    let mut p_dzy = vec![0.0; ndz * ny];
    let mut p_zty = vec![0.0; nzt * ny];
    let mut p_zdz = vec![0.0; nz * ndz];
    for z in 0..nz {
        for dz in 0..ndz {
            for y in 0..ny {
                let p = joint.prob(z, dz, y);
                let zt = z + dz;
                p_y[y] += p;
                p_z[z] += p;
                p_dz[dz] += p;
                p_zt[zt] += p;
                p_zy[z * ny + y] += p;
                p_dzy[dz * ny + y] += p;
                p_zty[zt * ny + y] += p;
                p_zdz[z * ndz + dz] += p;
            }
        }
    }

    let h = |ps: &[f64]| -ps.iter().copied().map(plogp).sum::<f64>();

    let h_y = h(&p_y);
    let h_z = h(&p_z);
    let h_dz = h(&p_dz);
    let h_zt = h(&p_zt);
    let h_zy = h(&p_zy);
    let h_dzy = h(&p_dzy);
    let h_zty = h(&p_zty);
    let h_zdz = h(&p_zdz);
    let h_zdzy = h(&joint.pmf);

    // Conditional entropies via the chain rule H(Y|A) = H(A,Y) - H(A).
    let h_y_given_z = h_zy - h_z;
    let h_y_given_dz = h_dzy - h_dz;
    let h_y_given_zt = h_zty - h_zt;
    let h_y_given_z_dz = h_zdzy - h_zdz;

    let i_z_y = h_y - h_y_given_z;
    let i_dz_y = h_y - h_y_given_dz;
    let i_zt_y = h_y - h_y_given_zt;
    let i_dz_y_given_z = h_y_given_z - h_y_given_z_dz;
    let i_interaction = i_dz_y - i_dz_y_given_z;

    ExactMiSuite {
        i_zt_y,
        i_z_y,
        i_dz_y,
        i_dz_y_given_z,
        i_interaction,
        h_y,
        h_y_given_z_dz,
        h_y_given_zt,
    }
}
