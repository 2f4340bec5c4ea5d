//! Training loops: standard, PGD adversarial training, and a TRADES-style
//! clean/adversarial KL objective, all with per-step mutual-information
//! tracing.
//!
//! Optimization is plain mini-batch gradient descent with a fixed learning
//! rate. Batch order, inner-attack randomness and initialization all flow
//! from documented derived streams, so a seeded run is bit-reproducible.

use rayon::prelude::*;

use crate::attacks::{attack_batch, run_attack, AttackConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::info::{
    feature_shift, label_entropy, mean_cross_entropy, MiTrace, TraceRecord,
};
use crate::label::Label;
use crate::nn::{ce_dlogits, DetectorModel, ParamGrads};
use crate::rng::{derive_seed, streams, Rng};
use crate::scalar::{lit, prob_floor, Scalar};
use crate::tensor::ImageTensor;

/// Training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Standard,
    PgdAt,
    Trades,
}

impl std::str::FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "standard" => Ok(Regime::Standard),
            "pgd-at" => Ok(Regime::PgdAt),
            "trades" => Ok(Regime::Trades),
            other => Err(format!("unknown regime '{other}'")),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Standard => write!(f, "standard"),
            Regime::PgdAt => write!(f, "pgd-at"),
            Regime::Trades => write!(f, "trades"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Inner attack for the AT regimes; also used for MI tracing when set
    /// on a standard run.
    pub inner_attack: Option<AttackConfig>,
    pub trades_beta: f64,
    pub seed: u64,
    /// Record a trace row every this many steps; 0 disables tracing.
    pub trace_every: usize,
}

impl TrainConfig {
    pub fn standard(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            regime: Regime::Standard,
            epochs,
            batch_size: 64,
            learning_rate: 0.05,
            inner_attack: None,
            trades_beta: 1.0,
            seed,
            trace_every: 1,
        }
    }

    /// PGD-AT with the conventional inner loop: 10 steps at eps/4 with a
    /// random start.
    pub fn pgd_at(epochs: usize, epsilon: f64, seed: u64) -> Self {
        let mut inner = AttackConfig::pgd(epsilon);
        inner.iterations = 10;
        TrainConfig {
            regime: Regime::PgdAt,
            inner_attack: Some(inner),
            ..Self::standard(epochs, seed)
        }
    }

    pub fn trades(epochs: usize, epsilon: f64, beta: f64, seed: u64) -> Self {
        let mut cfg = Self::pgd_at(epochs, epsilon, seed);
        cfg.regime = Regime::Trades;
        cfg.trades_beta = beta;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        match self.regime {
            Regime::Standard => {}
            Regime::PgdAt | Regime::Trades => {
                let inner = self.inner_attack.as_ref().ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "{} requires an inner attack configuration",
                        self.regime
                    ))
                })?;
                inner.validate()?;
                if self.regime == Regime::Trades && !(self.trades_beta > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "trades_beta must be > 0, got {}",
                        self.trades_beta
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub model: DetectorModel<T>,
    pub trace: MiTrace,
    /// Pre-update loss of every step.
    pub loss_history: Vec<f64>,
}

fn clamped_ln<T: Scalar>(p: T) -> T {
    p.max(prob_floor()).min(T::one()).ln()
}

/// Mean accuracy of the raw detector over a labeled set.
pub fn accuracy<T: Scalar>(
    model: &DetectorModel<T>,
    images: &[ImageTensor<T>],
    labels: &[Label],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let correct: usize = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, y)| Ok(usize::from(model.predict(x)?.argmax() == *y)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / images.len() as f64)
}

/// Run the configured training loop.
pub fn train<T: Scalar>(
    model: DetectorModel<T>,
    dataset: &LabeledDataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = model;
    let arch = model.architecture();
    let mut trace = MiTrace::default();
    let mut loss_history = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        Rng::derive(cfg.seed, &[streams::TRAIN_SHUFFLE, epoch as u64]).shuffle(&mut order);

        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&ImageTensor<T>> =
                batch.iter().map(|&i| &dataset.images[i]).collect();
            let labels: Vec<Label> = batch.iter().map(|&i| dataset.labels[i]).collect();

            let tracing_now = cfg.trace_every > 0 && step % cfg.trace_every == 0;
            let needs_adv_for_loss = matches!(cfg.regime, Regime::PgdAt | Regime::Trades);
            let needs_adv =
                needs_adv_for_loss || (tracing_now && cfg.inner_attack.is_some());

            // Inner attack streams are fixed by (seed, step, dataset index)
            // and do not depend on the thread schedule.
            let adv_images: Option<Vec<ImageTensor<T>>> = if needs_adv {
                let attack = cfg.inner_attack.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("adversarial batch requires inner attack".into())
                })?;
                let step_cfg = AttackConfig {
                    seed: derive_seed(cfg.seed, &[streams::TRAIN_INNER_ATTACK, step as u64]),
                    ..*attack
                };
                let adv = batch
                    .par_iter()
                    .map(|&i| {
                        run_attack(
                            &model,
                            &dataset.images[i],
                            dataset.labels[i],
                            &step_cfg,
                            i as u64,
                        )
                        .map(|o| o.x_adv)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(adv)
            } else {
                None
            };

            let diverged = |e: Error| match e {
                Error::NonFiniteLogits(..) => Error::Diverged {
                    step,
                    loss: f64::NAN,
                },
                other => other,
            };

            // Per-sample loss and gradient contributions, reduced in batch
            // order.
            let contributions: Vec<(T, ParamGrads<T>)> = match cfg.regime {
                Regime::Standard => images
                    .par_iter()
                    .zip(labels.par_iter())
                    .map(|(x, y)| model.ce_loss_and_param_grad(x, *y))
                    .collect::<Result<_>>()
                    .map_err(diverged)?,
                Regime::PgdAt => {
                    let adv = adv_images.as_ref().expect("adv batch exists for PGD-AT");
                    adv.par_iter()
                        .zip(labels.par_iter())
                        .map(|(x, y)| model.ce_loss_and_param_grad(x, *y))
                        .collect::<Result<_>>()
                        .map_err(diverged)?
                }
                Regime::Trades => {
                    let adv = adv_images.as_ref().expect("adv batch exists for TRADES");
                    let beta = lit::<T>(cfg.trades_beta);
                    images
                        .par_iter()
                        .zip(adv.par_iter())
                        .zip(labels.par_iter())
                        .map(|((x, xa), y)| {
                            let p_c = model.predict(x)?;
                            let p_a = model.predict(xa)?;
                            let kl = crate::info::kl_divergence(&p_c, &p_a);
                            let loss =
                                crate::nn::cross_entropy(&p_c, *y) + beta * kl;

                            // d(CE + beta KL)/d(clean logits):
                            // (p_c - onehot) + beta * p_i (ln(p_i/q_i) - KL)
                            let ce_d = ce_dlogits(&p_c, *y);
                            let lr_ratio_real = clamped_ln(p_c.p_real) - clamped_ln(p_a.p_real);
                            let lr_ratio_fake = clamped_ln(p_c.p_fake) - clamped_ln(p_a.p_fake);
                            let dl_clean = [
                                ce_d[0] + beta * p_c.p_real * (lr_ratio_real - kl),
                                ce_d[1] + beta * p_c.p_fake * (lr_ratio_fake - kl),
                            ];
                            // d(beta KL)/d(adv logits) = beta (p_a - p_c)
                            let dl_adv = [
                                beta * (p_a.p_real - p_c.p_real),
                                beta * (p_a.p_fake - p_c.p_fake),
                            ];
                            let mut g = model.param_gradient_from_dlogits(x, dl_clean)?;
                            g.add_assign(&model.param_gradient_from_dlogits(xa, dl_adv)?);
                            Ok((loss, g))
                        })
                        .collect::<Result<_>>()
                        .map_err(diverged)?
                }
            };

            let batch_len = lit::<T>(contributions.len() as f64);
            let mut grads = ParamGrads::zeroed(arch);
            let mut loss_acc = T::zero();
            for (l, g) in &contributions {
                loss_acc += *l;
                grads.add_assign(g);
            }
            grads.scale(T::one() / batch_len);
            let loss = (loss_acc / batch_len).to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            loss_history.push(loss);

            // Trace with the pre-update model on this step's batch.
            if tracing_now {
                let clean_owned: Vec<ImageTensor<T>> =
                    images.iter().map(|x| (*x).clone()).collect();
                let ce_clean = mean_cross_entropy(&model, &clean_owned, &labels)
                    .map_err(diverged)?
                    .to_f64()
                    .unwrap_or(f64::NAN);
                let ce_adv = match &adv_images {
                    Some(adv) => mean_cross_entropy(&model, adv, &labels)
                        .map_err(diverged)?
                        .to_f64()
                        .unwrap_or(f64::NAN),
                    None => ce_clean,
                };
                let h_y = label_entropy::<T>(&labels)?.to_f64().unwrap_or(f64::NAN);
                trace.push(TraceRecord {
                    step,
                    i_clean: h_y - ce_clean,
                    i_adv: h_y - ce_adv,
                    i_delta: ce_clean - ce_adv,
                    ce_clean,
                    ce_adv,
                });
            }

            model.apply_step(&grads, lit(cfg.learning_rate));
            step += 1;
        }
    }

    Ok(TrainOutput {
        model,
        trace,
        loss_history,
    })
}

/// One row of the feature-shift sweep.
#[derive(Debug, Clone, Copy)]
pub struct ShiftRow {
    pub epsilon: f64,
    pub mean_all: f64,
    /// Absent when no attack in the partition succeeded / failed.
    pub mean_success: Option<f64>,
    pub mean_fail: Option<f64>,
    pub n_success: usize,
    pub n_fail: usize,
}

/// PGD feature-shift sweep over a grid of budgets, partitioned by attack
/// success.
pub fn sweep_epsilon_feature_shift<T: Scalar>(
    model: &DetectorModel<T>,
    images: &[ImageTensor<T>],
    labels: &[Label],
    eps_grid: &[f64],
    seed: u64,
) -> Result<Vec<ShiftRow>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let cfg = AttackConfig::pgd(eps).with_seed(seed);
        let outcomes = attack_batch(model, images, labels, &cfg)?;
        let shifts: Vec<(f64, bool)> = images
            .par_iter()
            .zip(outcomes.par_iter())
            .map(|(x, o)| {
                feature_shift(model, x, &o.x_adv).map(|s| {
                    (s.to_f64().unwrap_or(f64::NAN), o.success)
                })
            })
            .collect::<Result<_>>()?;
        let mean = |want: Option<bool>| -> (usize, Option<f64>) {
            let vals: Vec<f64> = shifts
                .iter()
                .filter(|(_, s)| want.map_or(true, |w| *s == w))
                .map(|(v, _)| *v)
                .collect();
            if vals.is_empty() {
                (0, None)
            } else {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                (vals.len(), Some(m))
            }
        };
        let (_, all) = mean(None);
        let (n_success, mean_success) = mean(Some(true));
        let (n_fail, mean_fail) = mean(Some(false));
        rows.push(ShiftRow {
            epsilon: eps,
            mean_all: all.expect("nonempty sample set"),
            mean_success,
            mean_fail,
            n_success,
            n_fail,
        });
    }
    Ok(rows)
}

/// CSV export; schema
/// `epsilon,mean_all,mean_success,mean_fail,n_success,n_fail` with empty
/// fields marking absent partitions.
pub fn shift_csv(rows: &[ShiftRow]) -> String {
    let mut out = String::from("#schema=trimlab.shift.v1\n");
    out.push_str("epsilon,mean_all,mean_success,mean_fail,n_success,n_fail\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epsilon,
            r.mean_all,
            opt(r.mean_success),
            opt(r.mean_fail),
            r.n_success,
            r.n_fail
        ));
    }
    out
}

/// CSV export of the loss history; schema `step,loss`.
pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("#schema=trimlab.loss.v1\nstep,loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, ArtifactPattern, DatasetSpec};
    use crate::nn::Architecture;

    fn tiny_dataset(amplitude: f64) -> LabeledDataset<f64> {
        generate(&DatasetSpec {
            n_per_class: 8,
            channels: 1,
            height: 8,
            width: 8,
            amplitude,
            pattern: ArtifactPattern::HorizontalStripe,
            seed: 3,
        })
        .unwrap()
    }

    fn tiny_model(seed: u64) -> DetectorModel<f64> {
        DetectorModel::init(Architecture::with_widths(1, 8, 8, 4, 6).unwrap(), seed)
    }

    fn tiny_cfg(regime: Regime) -> TrainConfig {
        let mut cfg = TrainConfig::standard(2, 5);
        cfg.batch_size = 8;
        cfg.regime = regime;
        cfg
    }

    #[test]
    fn validation_rejects_missing_inner_attack() {
        let cfg = tiny_cfg(Regime::PgdAt);
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg(Regime::Standard);
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let ds = tiny_dataset(0.2);
        let cfg = tiny_cfg(Regime::Standard);
        let a = train(tiny_model(1), &ds, &cfg).unwrap();
        let b = train(tiny_model(1), &ds, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn pgd_at_with_zero_epsilon_reduces_to_standard() {
        let ds = tiny_dataset(0.2);
        let standard = train(tiny_model(2), &ds, &tiny_cfg(Regime::Standard)).unwrap();

        let mut at_cfg = tiny_cfg(Regime::PgdAt);
        let mut inner = AttackConfig::pgd(0.0);
        inner.iterations = 10;
        at_cfg.inner_attack = Some(inner);
        let at = train(tiny_model(2), &ds, &at_cfg).unwrap();

        assert_eq!(standard.model, at.model);
        assert_eq!(standard.loss_history, at.loss_history);
    }

    #[test]
    fn trace_satisfies_the_estimator_identity() {
        let ds = tiny_dataset(0.3);
        let mut cfg = tiny_cfg(Regime::PgdAt);
        let mut inner = AttackConfig::pgd(4.0 / 255.0);
        inner.iterations = 3;
        cfg.inner_attack = Some(inner);
        let out = train(tiny_model(3), &ds, &cfg).unwrap();
        assert!(!out.trace.records.is_empty());
        for r in &out.trace.records {
            assert!((r.i_adv - (r.i_clean + r.i_delta)).abs() <= 1e-12);
            assert!((r.i_clean - (r.i_adv - r.i_delta)).abs() <= 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let ds = tiny_dataset(0.3);
        let mut cfg = tiny_cfg(Regime::Standard);
        cfg.learning_rate = 1e18;
        cfg.epochs = 30;
        match train(tiny_model(4), &ds, &cfg) {
            Err(Error::Diverged { .. }) => {}
            Ok(_) => panic!("expected divergence"),
            Err(other) => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_epsilon_sweep_has_zero_shifts() {
        let ds = tiny_dataset(0.3);
        let model = tiny_model(5);
        let rows =
            sweep_epsilon_feature_shift(&model, &ds.images, &ds.labels, &[0.0], 9).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean_all, 0.0);
        // With eps = 0 nothing moves; successes are exactly the samples the
        // raw model already misclassifies.
        let wrong = ds
            .iter()
            .filter(|(x, y)| model.predict(x).unwrap().argmax() != *y)
            .count();
        assert_eq!(rows[0].n_success, wrong);
    }

    #[test]
    fn shift_csv_marks_absent_partitions() {
        let rows = [ShiftRow {
            epsilon: 0.0,
            mean_all: 0.0,
            mean_success: None,
            mean_fail: Some(0.0),
            n_success: 0,
            n_fail: 4,
        }];
        let csv = shift_csv(&rows);
        assert!(csv.starts_with("#schema=trimlab.shift.v1\n"));
        assert!(csv.contains("0,0,,0,0,4"));
    }
}
