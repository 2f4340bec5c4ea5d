//! White-box and black-box adversarial example generators.
//!
//! Every returned sample satisfies the feasibility contract exactly as
//! measured in the working precision: `|x_adv - x|_inf <= epsilon` for the
//! l-inf families, and `x_adv` inside the `[0, 1]` box for all families.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::label::Label;
use crate::nn::DetectorModel;
use crate::rng::{streams, Rng};
use crate::scalar::{lit, Scalar};
use crate::tensor::ImageTensor;

/// Attack family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    CwL2,
    RandSearch,
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::CwL2 => "cw",
            AttackFamily::RandSearch => "randsearch",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for AttackFamily {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fgsm" => Ok(AttackFamily::Fgsm),
            "pgd" => Ok(AttackFamily::Pgd),
            "cw" => Ok(AttackFamily::CwL2),
            "randsearch" => Ok(AttackFamily::RandSearch),
            other => Err(format!("unknown attack family '{other}'")),
        }
    }
}

/// Budget in units of 1/255, converted to an absolute intensity.
#[inline]
pub fn eps_units(units: f64) -> f64 {
    units / 255.0
}

/// Attack parameters; `epsilon` and `step_size` are absolute intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    /// C&W confidence margin.
    pub kappa: f64,
    /// C&W hinge weight.
    pub c: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    /// Single-step sign attack.
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            family: AttackFamily::Fgsm,
            epsilon,
            step_size: epsilon,
            iterations: 1,
            kappa: 0.0,
            c: 1.0,
            random_start: false,
            seed: 0,
        }
    }

    /// PGD defaults: 40 iterations, step = eps/4, random start on.
    pub fn pgd(epsilon: f64) -> Self {
        AttackConfig {
            family: AttackFamily::Pgd,
            epsilon,
            step_size: epsilon / 4.0,
            iterations: 40,
            kappa: 0.0,
            c: 1.0,
            random_start: true,
            seed: 0,
        }
    }

    /// C&W defaults: fixed c = 1, 200 steps, learning rate 0.01.
    pub fn cw(kappa: f64) -> Self {
        AttackConfig {
            family: AttackFamily::CwL2,
            epsilon: 0.0,
            step_size: 0.01,
            iterations: 200,
            kappa,
            c: 1.0,
            random_start: false,
            seed: 0,
        }
    }

    /// Random-search black-box defaults: 500 forward queries.
    pub fn rand_search(epsilon: f64) -> Self {
        AttackConfig {
            family: AttackFamily::RandSearch,
            epsilon,
            step_size: epsilon,
            iterations: 500,
            kappa: 0.0,
            c: 1.0,
            random_start: false,
            seed: 0,
        }
    }

    /// Entropy-evading preset: PGD at 1/255.
    pub fn adapt1() -> Self {
        Self::pgd(eps_units(1.0))
    }

    /// Entropy-evading preset: C&W at kappa = 0.
    pub fn adapt2() -> Self {
        Self::cw(0.0)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.family == AttackFamily::Fgsm && self.iterations != 1 {
            return Err(Error::InvalidConfig(
                "FGSM is single-step; set iterations = 1".into(),
            ));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kappa must be >= 0, got {}",
                self.kappa
            )));
        }
        if !(self.c > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "c must be > 0, got {}",
                self.c
            )));
        }
        if !(self.step_size >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step size must be >= 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Result of one attack instance.
#[derive(Debug, Clone)]
pub struct AttackOutcome<T> {
    pub x_adv: ImageTensor<T>,
    /// For FGSM/PGD/random search: the returned sample is misclassified.
    /// For C&W: an iterate satisfying the confidence margin was found.
    pub success: bool,
    pub queries_or_steps: usize,
}

/// Project `cand` onto the intersection of the eps-ball around `orig` and
/// the `[0, 1]` box, such that the measured difference obeys the bound in
/// the same floating-point arithmetic the caller uses to verify it.
fn clamp_ball_box<T: Scalar>(orig: T, cand: T, eps: T) -> T {
    let mut v = cand
        .max(orig - eps)
        .min(orig + eps)
        .max(T::zero())
        .min(T::one());
    // Rounding in (orig + eps) can leave the measured difference a few ulps
    // above eps; shrink toward orig until the measurement itself passes.
    let two = lit::<T>(2.0);
    let mut guard = 0;
    while (v - orig).abs() > eps {
        if guard > 128 {
            v = orig;
            break;
        }
        let d = v - orig;
        v = orig + d * (T::one() - two * T::epsilon());
        guard += 1;
    }
    v
}

#[inline]
fn sign<T: Scalar>(g: T) -> T {
    if g > T::zero() {
        T::one()
    } else if g < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn misclassified<T: Scalar>(model: &DetectorModel<T>, x: &ImageTensor<T>, y: Label) -> Result<bool> {
    Ok(model.predict(x)?.argmax() != y)
}

/// Shared FGSM/PGD core: optional uniform random start in the ball, then
/// `iterations` of sign-gradient ascent with exact projection.
fn pgd_core<T: Scalar>(
    model: &DetectorModel<T>,
    x: &ImageTensor<T>,
    y: Label,
    cfg: &AttackConfig,
    sample_id: u64,
) -> Result<AttackOutcome<T>> {
    let (c, h, w) = x.shape();
    let eps = lit::<T>(cfg.epsilon);
    let alpha = lit::<T>(cfg.step_size);

    let mut cur: Vec<T> = x.data().to_vec();
    if cfg.random_start {
        let mut rng = Rng::derive(cfg.seed, &[streams::ATTACK, sample_id]);
        for (v, o) in cur.iter_mut().zip(x.data()) {
            let delta = lit::<T>(rng.uniform(-cfg.epsilon, cfg.epsilon));
            *v = clamp_ball_box(*o, *o + delta, eps);
        }
    }

    for _ in 0..cfg.iterations {
        let image = ImageTensor::new(c, h, w, cur.clone())?;
        let grad = model.input_gradient(&image, y)?;
        for ((v, g), o) in cur.iter_mut().zip(&grad).zip(x.data()) {
            let cand = *v + alpha * sign(*g);
            *v = clamp_ball_box(*o, cand, eps);
        }
    }

    let x_adv = ImageTensor::new(c, h, w, cur)?;
    let success = misclassified(model, &x_adv, y)?;
    Ok(AttackOutcome {
        x_adv,
        success,
        queries_or_steps: cfg.iterations,
    })
}

/// Fast gradient sign method: `clip(x + eps * sign(dL/dx))`.
pub fn fgsm<T: Scalar>(
    model: &DetectorModel<T>,
    x: &ImageTensor<T>,
    y: Label,
    cfg: &AttackConfig,
) -> Result<AttackOutcome<T>> {
    cfg.validate()?;
    if cfg.family != AttackFamily::Fgsm {
        return Err(Error::InvalidConfig("config family is not FGSM".into()));
    }
    let one_step = AttackConfig {
        iterations: 1,
        step_size: cfg.epsilon,
        random_start: false,
        ..*cfg
    };
    pgd_core(model, x, y, &one_step, 0)
}

/// Projected gradient descent on the cross-entropy loss.
pub fn pgd<T: Scalar>(
    model: &DetectorModel<T>,
    x: &ImageTensor<T>,
    y: Label,
    cfg: &AttackConfig,
    sample_id: u64,
) -> Result<AttackOutcome<T>> {
    cfg.validate()?;
    if cfg.family != AttackFamily::Pgd {
        return Err(Error::InvalidConfig("config family is not PGD".into()));
    }
    pgd_core(model, x, y, cfg, sample_id)
}

/// Carlini-Wagner L2 attack in tanh space with a fixed hinge weight.
///
/// Minimizes `|x(w) - x|_2^2 + c * max(l_true - l_other + kappa, 0)` by
/// plain gradient descent and returns the accepted iterate (margin >= kappa
/// and prediction flipped) closest to `x`, or the final iterate with
/// `success = false`.
pub fn cw_l2<T: Scalar>(
    model: &DetectorModel<T>,
    x: &ImageTensor<T>,
    y: Label,
    cfg: &AttackConfig,
) -> Result<AttackOutcome<T>> {
    cfg.validate()?;
    if cfg.family != AttackFamily::CwL2 {
        return Err(Error::InvalidConfig("config family is not CW_L2".into()));
    }
    let (ch, h, w) = x.shape();
    let other = y.flip();
    let kappa = lit::<T>(cfg.kappa);
    let cweight = lit::<T>(cfg.c);
    let lr = lit::<T>(cfg.step_size);
    let two = lit::<T>(2.0);

    let accepted = |logits: [T; 2]| -> bool {
        let margin = logits[other.index()] - logits[y.index()];
        margin >= kappa && logits[other.index()] > logits[y.index()]
    };

    // Zero-perturbation shortcut when the input already satisfies the
    // confidence condition.
    let (logits0, _) = model.forward(x)?;
    if accepted(logits0) {
        return Ok(AttackOutcome {
            x_adv: x.clone(),
            success: true,
            queries_or_steps: 0,
        });
    }

    // w = atanh(2x - 1), with x pulled off the box corners.
    let margin_eps = lit::<T>(1e-6);
    let mut wvar: Vec<T> = x
        .data()
        .iter()
        .map(|&v| {
            let xv = v.max(margin_eps).min(T::one() - margin_eps);
            (two * xv - T::one()).atanh()
        })
        .collect();

    let mut best: Option<(T, Vec<T>)> = None;
    for _ in 0..cfg.iterations {
        let xw: Vec<T> = wvar
            .iter()
            .map(|&wv| (wv.tanh() + T::one()) / two)
            .collect();
        let image = ImageTensor::new(ch, h, w, xw.clone())?;
        let (logits, _) = model.forward(&image)?;
        let hinge = (logits[y.index()] - logits[other.index()] + kappa).max(T::zero());

        // dObjective/dx: distance term plus, when the hinge is active, the
        // margin term c * d(l_true - l_other)/dx.
        let mut dx: Vec<T> = xw
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| two * (a - b))
            .collect();
        if hinge > T::zero() {
            let mut dlogits = [T::zero(); 2];
            dlogits[y.index()] = cweight;
            dlogits[other.index()] = -cweight;
            let dmargin = model.input_gradient_from_dlogits(&image, dlogits)?;
            for (d, g) in dx.iter_mut().zip(&dmargin) {
                *d += *g;
            }
        }
        for ((wv, d), &xv) in wvar.iter_mut().zip(&dx).zip(&xw) {
            // dx/dw = 2 x (1 - x)
            let chain = two * xv * (T::one() - xv);
            *wv = *wv - lr * *d * chain;
        }

        let xn: Vec<T> = wvar
            .iter()
            .map(|&wv| (wv.tanh() + T::one()) / two)
            .collect();
        let new_image = ImageTensor::new(ch, h, w, xn.clone())?;
        let (new_logits, _) = model.forward(&new_image)?;
        if accepted(new_logits) {
            let dist = new_image.l2_distance(x);
            if best.as_ref().map_or(true, |(bd, _)| dist < *bd) {
                best = Some((dist, xn));
            }
        }
    }

    match best {
        Some((_, data)) => Ok(AttackOutcome {
            x_adv: ImageTensor::new(ch, h, w, data)?,
            success: true,
            queries_or_steps: cfg.iterations,
        }),
        None => {
            let data: Vec<T> = wvar
                .iter()
                .map(|&wv| (wv.tanh() + T::one()) / two)
                .collect();
            Ok(AttackOutcome {
                x_adv: ImageTensor::new(ch, h, w, data)?,
                success: false,
                queries_or_steps: cfg.iterations,
            })
        }
    }
}

/// Query-only random search: square patches pushed to the ball surface,
/// kept when the loss strictly increases.
pub fn random_search_blackbox<T: Scalar>(
    model: &DetectorModel<T>,
    x: &ImageTensor<T>,
    y: Label,
    cfg: &AttackConfig,
    sample_id: u64,
) -> Result<AttackOutcome<T>> {
    cfg.validate()?;
    if cfg.family != AttackFamily::RandSearch {
        return Err(Error::InvalidConfig(
            "config family is not RANDSEARCH".into(),
        ));
    }
    let (c, h, w) = x.shape();
    let eps = lit::<T>(cfg.epsilon);
    let mut rng = Rng::derive(cfg.seed, &[streams::ATTACK, sample_id]);

    let mut cur = x.clone();
    let mut cur_loss = model.ce_loss(&cur, y)?;
    let mut queries = 1usize;
    let max_side = (h.min(w) / 4).max(1) as u64;

    for _ in 0..cfg.iterations {
        let side = 1 + rng.next_below(max_side) as usize;
        let top = rng.next_below((h - side + 1) as u64) as usize;
        let left = rng.next_below((w - side + 1) as u64) as usize;
        let up = rng.next_below(2) == 1;

        let mut data = cur.data().to_vec();
        for ci in 0..c {
            for i in top..top + side {
                for j in left..left + side {
                    let flat = (ci * h + i) * w + j;
                    let orig = x.data()[flat];
                    let target = if up { orig + eps } else { orig - eps };
                    data[flat] = clamp_ball_box(orig, target, eps);
                }
            }
        }
        let cand = ImageTensor::new(c, h, w, data)?;
        let cand_loss = model.ce_loss(&cand, y)?;
        queries += 1;
        if cand_loss > cur_loss {
            cur = cand;
            cur_loss = cand_loss;
        }
    }

    let success = misclassified(model, &cur, y)?;
    Ok(AttackOutcome {
        x_adv: cur,
        success,
        queries_or_steps: queries,
    })
}

/// Dispatch on the configured family.
pub fn run_attack<T: Scalar>(
    model: &DetectorModel<T>,
    x: &ImageTensor<T>,
    y: Label,
    cfg: &AttackConfig,
    sample_id: u64,
) -> Result<AttackOutcome<T>> {
    match cfg.family {
        AttackFamily::Fgsm => fgsm(model, x, y, cfg),
        AttackFamily::Pgd => pgd(model, x, y, cfg, sample_id),
        AttackFamily::CwL2 => cw_l2(model, x, y, cfg),
        AttackFamily::RandSearch => random_search_blackbox(model, x, y, cfg, sample_id),
    }
}

/// Attack every sample in parallel; sample index is the RNG stream id, so
/// the result does not depend on the thread schedule.
pub fn attack_batch<T: Scalar>(
    model: &DetectorModel<T>,
    images: &[ImageTensor<T>],
    labels: &[Label],
    cfg: &AttackConfig,
) -> Result<Vec<AttackOutcome<T>>> {
    if images.len() != labels.len() {
        return Err(Error::BatchSizeMismatch {
            left: images.len(),
            right: labels.len(),
        });
    }
    images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, y))| run_attack(model, x, *y, cfg, i as u64))
        .collect()
}

/// One CSV row of an attack run.
#[derive(Debug, Clone)]
pub struct AttackRecord {
    pub sample_id: usize,
    pub family: AttackFamily,
    pub epsilon: f64,
    pub success: bool,
    pub linf: f64,
    pub l2: f64,
    pub steps: usize,
}

impl AttackRecord {
    pub fn from_outcome<T: Scalar>(
        sample_id: usize,
        cfg: &AttackConfig,
        clean: &ImageTensor<T>,
        outcome: &AttackOutcome<T>,
    ) -> Self {
        AttackRecord {
            sample_id,
            family: cfg.family,
            epsilon: cfg.epsilon,
            success: outcome.success,
            linf: outcome.x_adv.linf_distance(clean).to_f64().unwrap_or(f64::NAN),
            l2: outcome.x_adv.l2_distance(clean).to_f64().unwrap_or(f64::NAN),
            steps: outcome.queries_or_steps,
        }
    }
}

/// CSV export; schema `sample_id,family,epsilon,success,linf,l2,steps`.
pub fn attack_csv(records: &[AttackRecord]) -> String {
    let mut out = String::from("#schema=trimlab.attack.v1\n");
    out.push_str("sample_id,family,epsilon,success,linf,l2,steps\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sample_id, r.family, r.epsilon, r.success as u8, r.linf, r.l2, r.steps
        ));
    }
    out
}
