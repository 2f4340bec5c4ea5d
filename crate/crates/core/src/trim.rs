//! The TRIM test-time defense: an entropy gate followed by a
//! randomized-denoising KL gate, with prediction flipping and quantile
//! threshold calibration.
//!
//! Per sample: compute the softmax output and its predictive entropy; if
//! the entropy leaves `[h_min, h_max]` the label is flipped immediately
//! and the KL stage is skipped. Otherwise the input is denoised and the
//! KL divergence between the outputs before and after denoising decides
//! whether to flip.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::attacks::{attack_batch, AttackConfig};
use crate::data::LabeledDataset;
use crate::denoise::{apply_denoiser, DenoiseStep, DenoiserSpec};
use crate::error::{Error, Result};
use crate::info::{kl_divergence, prediction_entropy};
use crate::label::Label;
use crate::nn::DetectorModel;
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// KL gate threshold: one value, or one per predicted class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlThreshold {
    Single(f64),
    PerClass { real: f64, fake: f64 },
}

impl KlThreshold {
    pub fn for_label(&self, predicted: Label) -> f64 {
        match *self {
            KlThreshold::Single(tau) => tau,
            KlThreshold::PerClass { real, fake } => match predicted {
                Label::Real => real,
                Label::Fake => fake,
            },
        }
    }

    fn min_value(&self) -> f64 {
        match *self {
            KlThreshold::Single(tau) => tau,
            KlThreshold::PerClass { real, fake } => real.min(fake),
        }
    }
}

/// How the KL statistic aggregates over the denoiser draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlAggregation {
    /// One draw (draw index 0), matching the plain two-stage procedure.
    SingleDraw,
    /// Mean KL over `draws_per_input` independent draws.
    MeanOverK,
}

impl std::fmt::Display for KlAggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KlAggregation::SingleDraw => write!(f, "single-draw"),
            KlAggregation::MeanOverK => write!(f, "mean-over-k"),
        }
    }
}

/// Full defense configuration; also the content of a profile file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimConfig {
    pub h_min: f64,
    pub h_max: f64,
    pub kl_threshold: KlThreshold,
    pub kl_aggregation: KlAggregation,
    pub denoiser: DenoiserSpec,
    pub seed: u64,
}

impl TrimConfig {
    pub fn validate(&self) -> Result<()> {
        let ln2 = std::f64::consts::LN_2;
        if !(self.h_min >= 0.0 && self.h_min < self.h_max && self.h_max <= ln2) {
            return Err(Error::InvalidConfig(format!(
                "entropy bounds [{}, {}] must satisfy 0 <= h_min < h_max <= ln 2",
                self.h_min, self.h_max
            )));
        }
        if !(self.kl_threshold.min_value() > 0.0) {
            return Err(Error::InvalidConfig(
                "KL thresholds must be > 0".to_string(),
            ));
        }
        Ok(())
    }

    /// Entropy-only variant: the KL gate never fires.
    pub fn entropy_only(mut self) -> Self {
        self.kl_threshold = KlThreshold::Single(f64::INFINITY);
        self
    }
}

/// Which gate decided the verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Pass,
    EntropyFlip,
    KlFlip,
}

impl Gate {
    /// Severity used by the monotonicity property: relaxing thresholds
    /// can only decrease it.
    pub fn severity(self) -> u8 {
        match self {
            Gate::Pass => 0,
            Gate::KlFlip => 1,
            Gate::EntropyFlip => 2,
        }
    }
}

impl std::fmt::Display for Gate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Gate::Pass => write!(f, "PASS"),
            Gate::EntropyFlip => write!(f, "ENTROPY_FLIP"),
            Gate::KlFlip => write!(f, "KL_FLIP"),
        }
    }
}

/// Per-sample defense decision. `kl` is absent when the entropy gate fired
/// and the KL stage was skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrimVerdict {
    pub final_label: Label,
    pub raw_label: Label,
    pub gate: Gate,
    pub entropy: f64,
    pub kl: Option<f64>,
}

/// Run the two-stage defense on one input.
///
/// The denoiser RNG stream is derived from `(cfg.seed, sample_id, draw)`,
/// so verdicts are reproducible and independent across samples.
pub fn trim_predict<T: Scalar>(
    model: &DetectorModel<T>,
    cfg: &TrimConfig,
    x: &ImageTensor<T>,
    sample_id: u64,
) -> Result<TrimVerdict> {
    cfg.validate()?;
    let before = model.predict(x)?;
    let raw_label = before.argmax();
    let entropy = prediction_entropy(&before).to_f64().unwrap_or(f64::NAN);

    if entropy < cfg.h_min || entropy > cfg.h_max {
        return Ok(TrimVerdict {
            final_label: raw_label.flip(),
            raw_label,
            gate: Gate::EntropyFlip,
            entropy,
            kl: None,
        });
    }

    let n_draws = match cfg.kl_aggregation {
        KlAggregation::SingleDraw => 1,
        KlAggregation::MeanOverK => cfg.denoiser.draws_per_input,
    };
    let mut total = 0.0;
    for draw in 0..n_draws {
        let mut rng = Rng::derive(cfg.seed, &[streams::TRIM_DENOISE, sample_id, draw as u64]);
        let denoised = apply_denoiser(&cfg.denoiser, x, &mut rng)?;
        let after = model.predict(&denoised)?;
        total += kl_divergence(&before, &after).to_f64().unwrap_or(f64::NAN);
    }
    let kl = total / n_draws as f64;

    let tau = cfg.kl_threshold.for_label(raw_label);
    let (gate, final_label) = if kl > tau {
        (Gate::KlFlip, raw_label.flip())
    } else {
        (Gate::Pass, raw_label)
    };
    Ok(TrimVerdict {
        final_label,
        raw_label,
        gate,
        entropy,
        kl: Some(kl),
    })
}

/// Calibrated entropy bounds with safety factors applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyBounds {
    pub h_min: f64,
    pub h_max: f64,
    /// Set when the calibration set was a single sample.
    pub degenerate: bool,
}

/// Type-7 quantile (sorted values, linear interpolation at `q * (n - 1)`).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Entropy-bound calibration: quantiles of clean predictive entropies,
/// widened by safety factors 0.1 (lower) and 10 (upper), upper bound
/// clamped to ln 2.
pub fn calibrate_entropy_bounds<T: Scalar>(
    model: &DetectorModel<T>,
    clean: &[ImageTensor<T>],
    lower_q: f64,
    upper_q: f64,
) -> Result<EntropyBounds> {
    if clean.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&lower_q) || !(0.0..=1.0).contains(&upper_q) || lower_q >= upper_q {
        return Err(Error::InvalidConfig(format!(
            "quantiles ({lower_q}, {upper_q}) must satisfy 0 <= lower < upper <= 1"
        )));
    }
    let mut entropies: Vec<f64> = clean
        .par_iter()
        .map(|x| {
            model
                .predict(x)
                .map(|p| prediction_entropy(&p).to_f64().unwrap_or(f64::NAN))
        })
        .collect::<Result<_>>()?;
    entropies.sort_by(|a, b| a.partial_cmp(b).expect("finite entropies"));
    let h_min = quantile(&entropies, lower_q) * 0.1;
    let h_max = (quantile(&entropies, upper_q) * 10.0).min(std::f64::consts::LN_2);
    Ok(EntropyBounds {
        h_min,
        h_max,
        degenerate: clean.len() == 1,
    })
}

/// Calibrated KL threshold(s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlCalibration {
    pub threshold: KlThreshold,
    /// Set when all clean KL values collapse to ~0 (identity denoiser) and
    /// the floor 1e-12 was substituted.
    pub degenerate: bool,
    /// Set when a per-class group was empty and the global threshold was
    /// used for it.
    pub empty_group_fallback: bool,
}

const KL_TAU_FLOOR: f64 = 1e-12;

/// KL-threshold calibration at quantile `q` of clean-sample KL statistics,
/// optionally grouped by the predicted class.
pub fn calibrate_kl_threshold<T: Scalar>(
    model: &DetectorModel<T>,
    clean: &[ImageTensor<T>],
    denoiser: &DenoiserSpec,
    aggregation: KlAggregation,
    seed: u64,
    q: f64,
    per_class: bool,
) -> Result<KlCalibration> {
    if clean.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidConfig(format!("quantile {q} outside [0, 1]")));
    }
    // Use a wide-open gate config so every sample reaches the KL stage.
    let probe = TrimConfig {
        h_min: 0.0,
        h_max: std::f64::consts::LN_2,
        kl_threshold: KlThreshold::Single(f64::INFINITY),
        kl_aggregation: aggregation,
        denoiser: denoiser.clone(),
        seed,
    };
    let verdicts: Vec<TrimVerdict> = clean
        .par_iter()
        .enumerate()
        .map(|(i, x)| trim_predict(model, &probe, x, i as u64))
        .collect::<Result<_>>()?;

    let collect_tau = |filter: Option<Label>| -> Option<f64> {
        let mut vals: Vec<f64> = verdicts
            .iter()
            .filter(|v| filter.map_or(true, |f| v.raw_label == f))
            .map(|v| v.kl.expect("KL stage always reached during calibration"))
            .collect();
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite KL values"));
        Some(quantile(&vals, q))
    };

    let global = collect_tau(None).expect("nonempty calibration set");
    let mut degenerate = false;
    let mut floor = |tau: f64| -> f64 {
        if tau < KL_TAU_FLOOR {
            degenerate = true;
            KL_TAU_FLOOR
        } else {
            tau
        }
    };

    if per_class {
        let real = collect_tau(Some(Label::Real));
        let fake = collect_tau(Some(Label::Fake));
        let empty_group_fallback = real.is_none() || fake.is_none();
        let threshold = KlThreshold::PerClass {
            real: floor(real.unwrap_or(global)),
            fake: floor(fake.unwrap_or(global)),
        };
        Ok(KlCalibration {
            threshold,
            degenerate,
            empty_group_fallback,
        })
    } else {
        Ok(KlCalibration {
            threshold: KlThreshold::Single(floor(global)),
            degenerate,
            empty_group_fallback: false,
        })
    }
}

/// Gate firing counts over one evaluation phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GateCounts {
    pub pass: usize,
    pub entropy_flip: usize,
    pub kl_flip: usize,
}

impl GateCounts {
    fn add(&mut self, gate: Gate) {
        match gate {
            Gate::Pass => self.pass += 1,
            Gate::EntropyFlip => self.entropy_flip += 1,
            Gate::KlFlip => self.kl_flip += 1,
        }
    }
}

/// Per-sample evaluation row (one CSV line).
#[derive(Debug, Clone, Copy)]
pub struct EvalRow {
    pub sample_id: usize,
    pub true_label: Label,
    pub raw_label: Label,
    pub final_label: Label,
    pub entropy: f64,
    pub kl: Option<f64>,
    pub gate: Gate,
}

/// Defense evaluation over a dataset: accuracies of the raw detector and
/// of TRIM, on clean and adversarial inputs.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub clean_acc_raw: f64,
    pub clean_acc_trim: f64,
    pub robust_acc_raw: f64,
    pub robust_acc_trim: f64,
    pub clean_gates: GateCounts,
    pub adv_gates: GateCounts,
    pub clean_rows: Vec<EvalRow>,
    pub adv_rows: Vec<EvalRow>,
}

fn eval_phase<T: Scalar>(
    model: &DetectorModel<T>,
    cfg: &TrimConfig,
    images: &[ImageTensor<T>],
    labels: &[Label],
) -> Result<(f64, f64, GateCounts, Vec<EvalRow>)> {
    let rows: Vec<EvalRow> = images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, y))| {
            let v = trim_predict(model, cfg, x, i as u64)?;
            Ok(EvalRow {
                sample_id: i,
                true_label: *y,
                raw_label: v.raw_label,
                final_label: v.final_label,
                entropy: v.entropy,
                kl: v.kl,
                gate: v.gate,
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let raw_acc = rows.iter().filter(|r| r.raw_label == r.true_label).count() as f64 / n;
    let trim_acc = rows.iter().filter(|r| r.final_label == r.true_label).count() as f64 / n;
    let mut gates = GateCounts::default();
    for r in &rows {
        gates.add(r.gate);
    }
    Ok((raw_acc, trim_acc, gates, rows))
}

/// Evaluate against precomputed adversarial images (paired with the clean
/// set and sharing its labels).
pub fn evaluate_defense_prepared<T: Scalar>(
    model: &DetectorModel<T>,
    cfg: &TrimConfig,
    clean: &[ImageTensor<T>],
    labels: &[Label],
    adversarial: &[ImageTensor<T>],
) -> Result<EvalReport> {
    cfg.validate()?;
    if clean.len() != labels.len() {
        return Err(Error::BatchSizeMismatch {
            left: clean.len(),
            right: labels.len(),
        });
    }
    if clean.len() != adversarial.len() {
        return Err(Error::BatchSizeMismatch {
            left: clean.len(),
            right: adversarial.len(),
        });
    }
    if clean.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (clean_acc_raw, clean_acc_trim, clean_gates, clean_rows) =
        eval_phase(model, cfg, clean, labels)?;
    let (robust_acc_raw, robust_acc_trim, adv_gates, adv_rows) =
        eval_phase(model, cfg, adversarial, labels)?;
    Ok(EvalReport {
        clean_acc_raw,
        clean_acc_trim,
        robust_acc_raw,
        robust_acc_trim,
        clean_gates,
        adv_gates,
        clean_rows,
        adv_rows,
    })
}

/// Evaluate the defense, generating adversarial inputs with `attack_cfg`.
pub fn evaluate_defense<T: Scalar>(
    model: &DetectorModel<T>,
    cfg: &TrimConfig,
    dataset: &LabeledDataset<T>,
    attack_cfg: &AttackConfig,
) -> Result<EvalReport> {
    let outcomes = attack_batch(model, &dataset.images, &dataset.labels, attack_cfg)?;
    let adversarial: Vec<ImageTensor<T>> = outcomes.into_iter().map(|o| o.x_adv).collect();
    evaluate_defense_prepared(model, cfg, &dataset.images, &dataset.labels, &adversarial)
}

/// Per-sample CSV; schema
/// `sample_id,true_label,raw_label,final_label,entropy,kl,gate`.
/// The `kl` field is empty when the entropy gate fired.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("#schema=trimlab.eval.v1\n");
    out.push_str("sample_id,true_label,raw_label,final_label,entropy,kl,gate\n");
    for r in rows {
        let kl = r.kl.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{:e},{},{}\n",
            r.sample_id, r.true_label, r.raw_label, r.final_label, r.entropy, kl, r.gate
        ));
    }
    out
}

/// Summary CSV; schema `metric,value` pairs.
pub fn summary_csv(report: &EvalReport) -> String {
    let mut out = String::from("#schema=trimlab.summary.v1\nmetric,value\n");
    let mut kv = |k: &str, v: String| out.push_str(&format!("{k},{v}\n"));
    kv("clean_acc_raw", report.clean_acc_raw.to_string());
    kv("clean_acc_trim", report.clean_acc_trim.to_string());
    kv("robust_acc_raw", report.robust_acc_raw.to_string());
    kv("robust_acc_trim", report.robust_acc_trim.to_string());
    kv("clean_gate_pass", report.clean_gates.pass.to_string());
    kv(
        "clean_gate_entropy_flip",
        report.clean_gates.entropy_flip.to_string(),
    );
    kv("clean_gate_kl_flip", report.clean_gates.kl_flip.to_string());
    kv("adv_gate_pass", report.adv_gates.pass.to_string());
    kv(
        "adv_gate_entropy_flip",
        report.adv_gates.entropy_flip.to_string(),
    );
    kv("adv_gate_kl_flip", report.adv_gates.kl_flip.to_string());
    out
}

// ---------------------------------------------------------------------------
// Profile files
// ---------------------------------------------------------------------------

const PROFILE_SCHEMA: &str = "#schema=trimlab.profile.v1";

fn step_to_string(step: &DenoiseStep) -> String {
    match *step {
        DenoiseStep::GaussianBlur { kernel, sigma } => {
            format!("gaussian_blur(kernel={kernel},sigma={sigma})")
        }
        DenoiseStep::RandomResizedCrop {
            scale_min,
            scale_max,
            aspect_min,
            aspect_max,
        } => format!(
            "random_resized_crop(scale_min={scale_min},scale_max={scale_max},aspect_min={aspect_min},aspect_max={aspect_max})"
        ),
        DenoiseStep::HorizontalFlip { p } => format!("horizontal_flip(p={p})"),
    }
}

/// Parse one `name(key=value,...)` step description.
pub fn parse_step(s: &str) -> std::result::Result<DenoiseStep, String> {
    let s = s.trim();
    let open = s.find('(').ok_or("missing '(' in step")?;
    if !s.ends_with(')') {
        return Err("missing ')' in step".into());
    }
    let name = &s[..open];
    let body = &s[open + 1..s.len() - 1];
    let mut kv = std::collections::BTreeMap::new();
    for part in body.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("bad parameter '{part}'"))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let num = |key: &str| -> std::result::Result<f64, String> {
        kv.get(key)
            .ok_or_else(|| format!("step '{name}' missing parameter '{key}'"))?
            .parse::<f64>()
            .map_err(|_| format!("step '{name}': parameter '{key}' is not a number"))
    };
    match name {
        "gaussian_blur" => Ok(DenoiseStep::GaussianBlur {
            kernel: num("kernel")? as usize,
            sigma: num("sigma")?,
        }),
        "random_resized_crop" => Ok(DenoiseStep::RandomResizedCrop {
            scale_min: num("scale_min")?,
            scale_max: num("scale_max")?,
            aspect_min: num("aspect_min")?,
            aspect_max: num("aspect_max")?,
        }),
        "horizontal_flip" => Ok(DenoiseStep::HorizontalFlip { p: num("p")? }),
        other => Err(format!("unknown step '{other}'")),
    }
}

/// Serialize a config as the human-readable profile text.
pub fn profile_to_string(cfg: &TrimConfig) -> String {
    let mut out = String::new();
    out.push_str(PROFILE_SCHEMA);
    out.push('\n');
    out.push_str(&format!("h_min = {:e}\n", cfg.h_min));
    out.push_str(&format!("h_max = {:e}\n", cfg.h_max));
    match cfg.kl_threshold {
        KlThreshold::Single(tau) => out.push_str(&format!("tau = {tau:e}\n")),
        KlThreshold::PerClass { real, fake } => {
            out.push_str(&format!("tau_real = {real:e}\n"));
            out.push_str(&format!("tau_fake = {fake:e}\n"));
        }
    }
    out.push_str(&format!("kl_aggregation = {}\n", cfg.kl_aggregation));
    out.push_str(&format!("draws = {}\n", cfg.denoiser.draws_per_input));
    out.push_str(&format!("seed = {}\n", cfg.seed));
    for step in &cfg.denoiser.steps {
        out.push_str(&format!("step = {}\n", step_to_string(step)));
    }
    out
}

/// Parse a profile file body.
pub fn profile_from_str(text: &str) -> Result<TrimConfig> {
    let mut h_min = None;
    let mut h_max = None;
    let mut tau = None;
    let mut tau_real = None;
    let mut tau_fake = None;
    let mut agg = KlAggregation::SingleDraw;
    let mut draws = 1usize;
    let mut seed = 0u64;
    let mut steps = Vec::new();

    let bad = |line: usize, what: String| Error::ProfileParse { line, what };

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(lineno, format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        let fval = || {
            value
                .parse::<f64>()
                .map_err(|_| bad(lineno, format!("'{value}' is not a number")))
        };
        match key {
            "h_min" => h_min = Some(fval()?),
            "h_max" => h_max = Some(fval()?),
            "tau" => tau = Some(fval()?),
            "tau_real" => tau_real = Some(fval()?),
            "tau_fake" => tau_fake = Some(fval()?),
            "kl_aggregation" => {
                agg = match value {
                    "single-draw" => KlAggregation::SingleDraw,
                    "mean-over-k" => KlAggregation::MeanOverK,
                    other => {
                        return Err(bad(lineno, format!("unknown aggregation '{other}'")));
                    }
                }
            }
            "draws" => {
                draws = value
                    .parse::<usize>()
                    .map_err(|_| bad(lineno, format!("'{value}' is not a count")))?
            }
            "seed" => {
                seed = value
                    .parse::<u64>()
                    .map_err(|_| bad(lineno, format!("'{value}' is not a seed")))?
            }
            "step" => steps.push(parse_step(value).map_err(|e| bad(lineno, e))?),
            other => return Err(bad(lineno, format!("unknown key '{other}'"))),
        }
    }

    let h_min = h_min.ok_or_else(|| bad(0, "missing h_min".into()))?;
    let h_max = h_max.ok_or_else(|| bad(0, "missing h_max".into()))?;
    let kl_threshold = match (tau, tau_real, tau_fake) {
        (Some(t), None, None) => KlThreshold::Single(t),
        (None, Some(r), Some(f)) => KlThreshold::PerClass { real: r, fake: f },
        _ => {
            return Err(bad(
                0,
                "need either 'tau' or both 'tau_real' and 'tau_fake'".into(),
            ))
        }
    };
    let cfg = TrimConfig {
        h_min,
        h_max,
        kl_threshold,
        kl_aggregation: agg,
        denoiser: DenoiserSpec::new(steps, draws)?,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_profile(cfg: &TrimConfig, path: &Path) -> Result<()> {
    fs::write(path, profile_to_string(cfg))?;
    Ok(())
}

pub fn load_profile(path: &Path) -> Result<TrimConfig> {
    profile_from_str(&fs::read_to_string(path)?)
}

/// Reference profiles for the four detector families the thresholds were
/// originally reported for. The blur/crop steps are omitted for the
/// detectors whose pixel-level or high-frequency cues they would destroy.
pub fn preset(name: &str) -> Option<TrimConfig> {
    let full = DenoiserSpec::full_default();
    let flip = DenoiserSpec::flip_only();
    match name {
        "cnnspot" => Some(TrimConfig {
            h_min: 1e-15,
            h_max: 1e-1,
            kl_threshold: KlThreshold::Single(1.0),
            kl_aggregation: KlAggregation::SingleDraw,
            denoiser: full,
            seed: 0,
        }),
        "univfd" => Some(TrimConfig {
            h_min: 1e-6,
            h_max: 6e-1,
            kl_threshold: KlThreshold::Single(1.0),
            kl_aggregation: KlAggregation::SingleDraw,
            denoiser: full,
            seed: 0,
        }),
        // FreqNet thresholds as reported for the ProGAN-trained detector.
        "freqnet" => Some(TrimConfig {
            h_min: 1e-20,
            h_max: 0.2,
            kl_threshold: KlThreshold::PerClass {
                real: (-6.0f64).exp(),
                fake: (-2.0f64).exp(),
            },
            kl_aggregation: KlAggregation::SingleDraw,
            denoiser: flip.clone(),
            seed: 0,
        }),
        "npr" => Some(TrimConfig {
            h_min: 1e-25,
            h_max: 1e-1,
            kl_threshold: KlThreshold::PerClass {
                real: (-10.0f64).exp(),
                fake: (-6.0f64).exp(),
            },
            kl_aggregation: KlAggregation::SingleDraw,
            denoiser: flip,
            seed: 0,
        }),
        _ => None,
    }
}

pub const PRESET_NAMES: [&str; 4] = ["cnnspot", "univfd", "freqnet", "npr"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    /// Model affine in the input mean (see attacks::tests).
    fn affine_model(slope_scale: f64, head_w: [f64; 2], head_b: [f64; 2]) -> DetectorModel<f64> {
        let arch = Architecture::with_widths(1, 4, 4, 1, 1).unwrap();
        let mut m = DetectorModel::zeroed(arch);
        let c1 = m.conv1.weight_index(0, 0, 1, 1);
        m.conv1.weight[c1] = slope_scale;
        let c2 = m.conv2.weight_index(0, 0, 1, 1);
        m.conv2.weight[c2] = 1.0;
        m.head.weight = vec![head_w[0], head_w[1]];
        m.head.bias = vec![head_b[0], head_b[1]];
        m
    }

    fn base_cfg() -> TrimConfig {
        TrimConfig {
            h_min: 1e-15,
            h_max: 1e-1,
            kl_threshold: KlThreshold::Single(1.0),
            kl_aggregation: KlAggregation::SingleDraw,
            denoiser: DenoiserSpec::identity(),
            seed: 0,
        }
    }

    #[test]
    fn entropy_gate_fires_below_lower_bound() {
        // Saturated head: entropy ~ 1e-20 falls under h_min = 1e-15.
        let model = affine_model(0.0, [0.0, 0.0], [50.0, 0.0]);
        let x = ImageTensor::constant(1, 4, 4, 0.5);
        let v = trim_predict(&model, &base_cfg(), &x, 0).unwrap();
        assert!(v.entropy < 1e-15);
        assert_eq!(v.gate, Gate::EntropyFlip);
        assert_eq!(v.raw_label, Label::Real);
        assert_eq!(v.final_label, Label::Fake);
        assert!(v.kl.is_none(), "KL must not be computed on entropy flips");
    }

    #[test]
    fn identity_denoiser_passes_in_range_samples() {
        // Mild confidence: entropy inside [1e-15, 0.1]; identity denoiser
        // gives KL = 0 <= tau.
        let model = affine_model(0.0, [0.0, 0.0], [3.0, 0.0]);
        let x = ImageTensor::constant(1, 4, 4, 0.5);
        let v = trim_predict(&model, &base_cfg(), &x, 0).unwrap();
        assert_eq!(v.gate, Gate::Pass);
        assert_eq!(v.kl, Some(0.0));
        assert_eq!(v.final_label, v.raw_label);
    }

    #[test]
    fn kl_gate_flips_when_threshold_halved() {
        // Flip-sensitive model: prediction changes under horizontal flip.
        let arch = Architecture::with_widths(1, 4, 4, 1, 1).unwrap();
        let mut model = DetectorModel::<f64>::zeroed(arch);
        // Off-center tap makes the feature flip-dependent.
        let c1 = model.conv1.weight_index(0, 0, 1, 0);
        model.conv1.weight[c1] = 4.0;
        let c2 = model.conv2.weight_index(0, 0, 1, 1);
        model.conv2.weight[c2] = 4.0;
        model.head.weight = vec![5.0, -5.0];
        model.head.bias = vec![-3.0, 3.0];
        let x = ImageTensor::from_fn(1, 4, 4, |_, _, j| if j < 2 { 0.9 } else { 0.05 });

        let mut cfg = base_cfg();
        cfg.h_min = 1e-30;
        cfg.h_max = std::f64::consts::LN_2;
        cfg.denoiser = DenoiserSpec::flip_only();
        let probe = trim_predict(&model, &cfg, &x, 0).unwrap();
        let kl = probe.kl.expect("KL stage reached");
        assert!(kl > 0.0, "flip must change the prediction, kl = {kl}");

        cfg.kl_threshold = KlThreshold::Single(kl / 2.0);
        let v = trim_predict(&model, &cfg, &x, 0).unwrap();
        assert_eq!(v.gate, Gate::KlFlip);
        assert_eq!(v.final_label, v.raw_label.flip());

        cfg.kl_threshold = KlThreshold::Single(kl * 2.0);
        let v = trim_predict(&model, &cfg, &x, 0).unwrap();
        assert_eq!(v.gate, Gate::Pass);
    }

    #[test]
    fn flip_correctness_invariant() {
        let model = affine_model(1.0, [2.0, -2.0], [0.5, -0.5]);
        let cfg = base_cfg();
        for k in 0..20 {
            let x = ImageTensor::from_fn(1, 4, 4, |_, i, j| {
                ((i * 4 + j + k) % 16) as f64 / 16.0
            });
            let v = trim_predict(&model, &cfg, &x, k as u64).unwrap();
            let flipped = v.gate != Gate::Pass;
            assert_eq!(v.final_label != v.raw_label, flipped);
        }
    }

    #[test]
    fn verdicts_are_deterministic() {
        let model = affine_model(1.0, [2.0, -2.0], [0.0, 0.0]);
        let mut cfg = base_cfg();
        cfg.denoiser = DenoiserSpec::full_default();
        cfg.h_max = std::f64::consts::LN_2;
        cfg.h_min = 1e-30;
        let x = ImageTensor::from_fn(1, 4, 4, |_, i, j| (i * 4 + j) as f64 / 16.0);
        let a = trim_predict(&model, &cfg, &x, 7).unwrap();
        let b = trim_predict(&model, &cfg, &x, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn widened_thresholds_move_verdicts_toward_pass() {
        let model = affine_model(1.3, [3.0, -3.0], [0.2, -0.2]);
        let mut rng = crate::rng::Rng::new(41);
        for trial in 0..200 {
            let x = ImageTensor::from_fn(1, 4, 4, |_, _, _| rng.next_f64());
            // Tight config, then a strictly wider one.
            let h_lo = rng.uniform(1e-6, 0.2);
            let h_hi = rng.uniform(h_lo + 1e-6, std::f64::consts::LN_2);
            let tau = rng.uniform(1e-4, 0.5);
            let tight = TrimConfig {
                h_min: h_lo,
                h_max: h_hi,
                kl_threshold: KlThreshold::Single(tau),
                kl_aggregation: KlAggregation::SingleDraw,
                denoiser: DenoiserSpec::flip_only(),
                seed: 3,
            };
            let wide = TrimConfig {
                h_min: h_lo * 0.5,
                h_max: (h_hi * 1.2).min(std::f64::consts::LN_2),
                kl_threshold: KlThreshold::Single(tau * 3.0),
                ..tight.clone()
            };
            let vt = trim_predict(&model, &tight, &x, trial).unwrap();
            let vw = trim_predict(&model, &wide, &x, trial).unwrap();
            assert!(
                vw.gate.severity() <= vt.gate.severity(),
                "trial {trial}: tight {:?} wide {:?}",
                vt.gate,
                vw.gate
            );
        }
    }

    #[test]
    fn calibration_entropy_bounds_cover_the_set() {
        let model = affine_model(1.0, [4.0, -4.0], [0.0, 0.0]);
        let mut rng = crate::rng::Rng::new(5);
        let images: Vec<ImageTensor<f64>> = (0..64)
            .map(|_| ImageTensor::from_fn(1, 4, 4, |_, _, _| rng.next_f64()))
            .collect();
        let bounds = calibrate_entropy_bounds(&model, &images, 0.001, 0.999).unwrap();
        assert!(!bounds.degenerate);
        assert!(bounds.h_min < bounds.h_max);
        assert!(bounds.h_max <= std::f64::consts::LN_2);
        // With the safety factors no calibration sample falls outside.
        let mut outside = 0;
        for x in &images {
            let h = crate::info::prediction_entropy(&model.predict(x).unwrap());
            if h < bounds.h_min || h > bounds.h_max {
                outside += 1;
            }
        }
        assert_eq!(outside, 0);
    }

    #[test]
    fn calibration_single_sample_is_degenerate() {
        let model = affine_model(1.0, [4.0, -4.0], [0.0, 0.0]);
        let x = ImageTensor::constant(1, 4, 4, 0.4);
        let h = crate::info::prediction_entropy(&model.predict(&x).unwrap());
        let bounds = calibrate_entropy_bounds(&model, std::slice::from_ref(&x), 0.001, 0.999).unwrap();
        assert!(bounds.degenerate);
        assert!((bounds.h_min - h * 0.1).abs() <= 1e-18);
        assert!((bounds.h_max - (h * 10.0).min(std::f64::consts::LN_2)).abs() <= 1e-15);
    }

    #[test]
    fn kl_calibration_identity_denoiser_floors_tau() {
        let model = affine_model(1.0, [2.0, -2.0], [0.0, 0.0]);
        let mut rng = crate::rng::Rng::new(6);
        let images: Vec<ImageTensor<f64>> = (0..16)
            .map(|_| ImageTensor::from_fn(1, 4, 4, |_, _, _| rng.next_f64()))
            .collect();
        let cal = calibrate_kl_threshold(
            &model,
            &images,
            &DenoiserSpec::identity(),
            KlAggregation::SingleDraw,
            0,
            0.999,
            false,
        )
        .unwrap();
        assert!(cal.degenerate);
        assert_eq!(cal.threshold, KlThreshold::Single(1e-12));
    }

    #[test]
    fn kl_calibration_covers_quantile_mass() {
        let model = affine_model(1.2, [3.0, -3.0], [0.1, -0.1]);
        let mut rng = crate::rng::Rng::new(7);
        let images: Vec<ImageTensor<f64>> = (0..128)
            .map(|_| ImageTensor::from_fn(1, 4, 4, |_, _, _| rng.next_f64()))
            .collect();
        let spec = DenoiserSpec::flip_only();
        let cal = calibrate_kl_threshold(
            &model,
            &images,
            &spec,
            KlAggregation::SingleDraw,
            11,
            0.9,
            false,
        )
        .unwrap();
        let tau = match cal.threshold {
            KlThreshold::Single(t) => t,
            _ => unreachable!(),
        };
        // By the quantile definition at most (1 - q) of the calibration
        // samples exceed tau.
        let probe = TrimConfig {
            h_min: 0.0,
            h_max: std::f64::consts::LN_2,
            kl_threshold: KlThreshold::Single(f64::INFINITY),
            kl_aggregation: KlAggregation::SingleDraw,
            denoiser: spec,
            seed: 11,
        };
        let over = images
            .iter()
            .enumerate()
            .filter(|(i, x)| {
                trim_predict(&model, &probe, x, *i as u64)
                    .unwrap()
                    .kl
                    .unwrap()
                    > tau
            })
            .count();
        assert!(over as f64 <= (1.0 - 0.9) * images.len() as f64 + 1.0);
    }

    #[test]
    fn kl_calibration_per_class_fallback() {
        // Every prediction is Real: the fake group is empty and falls back
        // to the global threshold.
        let model = affine_model(0.0, [0.0, 0.0], [3.0, 0.0]);
        let images: Vec<ImageTensor<f64>> = (0..8)
            .map(|k| ImageTensor::constant(1, 4, 4, 0.1 + 0.1 * k as f64 / 8.0))
            .collect();
        let cal = calibrate_kl_threshold(
            &model,
            &images,
            &DenoiserSpec::flip_only(),
            KlAggregation::SingleDraw,
            0,
            0.999,
            true,
        )
        .unwrap();
        assert!(cal.empty_group_fallback);
        match cal.threshold {
            KlThreshold::PerClass { real, fake } => assert_eq!(real, fake),
            _ => panic!("expected per-class threshold"),
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = base_cfg();
        cfg.h_min = 0.2;
        cfg.h_max = 0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg();
        cfg.h_max = 1.0; // above ln 2
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg();
        cfg.kl_threshold = KlThreshold::Single(0.0);
        assert!(cfg.validate().is_err());
        let cfg = base_cfg().entropy_only();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.kl_threshold, KlThreshold::Single(f64::INFINITY));
    }

    #[test]
    fn profile_roundtrip_all_presets() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            let text = profile_to_string(&cfg);
            let back = profile_from_str(&text).unwrap();
            assert_eq!(cfg, back, "preset {name}");
        }
        assert!(preset("resnet").is_none());
    }

    #[test]
    fn profile_roundtrip_infinity_tau() {
        let cfg = base_cfg().entropy_only();
        let back = profile_from_str(&profile_to_string(&cfg)).unwrap();
        assert_eq!(back.kl_threshold, KlThreshold::Single(f64::INFINITY));
    }

    #[test]
    fn profile_parse_errors_name_lines() {
        let text = "h_min = 1e-15\nh_max = nonsense\ntau = 1\n";
        match profile_from_str(text) {
            Err(Error::ProfileParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(profile_from_str("h_min = 1e-3\n").is_err()); // missing keys
        let text = "h_min = 1e-15\nh_max = 0.1\ntau = 1\nstep = warp(x=1)\n";
        assert!(matches!(
            profile_from_str(text),
            Err(Error::ProfileParse { line: 4, .. })
        ));
    }
}
