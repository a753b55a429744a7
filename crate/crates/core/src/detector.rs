//! Resistance-based detection.
//!
//! Each latent code gets a normal value range from clean validation data.
//! Morphs of an input perturb one code within that range (found by a
//! stochastic search with a growing radius) and are decoded; the code's
//! resistance is the percentage of morphs whose predicted label matches the
//! input's. An input is normal when every selected code's resistance
//! exceeds its threshold.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::TargetClassifier;
use crate::combo_vae::ComboVae;
use crate::datasets::ImageSet;
use crate::error::{FmError, Result};
use crate::util::stream_rng;

/// Normal range = these empirical quantiles of `μ` over VAL.
pub const RANGE_QUANTILES: (f64, f64) = (0.005, 0.995);

/// Per-code `[lo, hi]` intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalRanges {
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

impl NormalRanges {
    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn width(&self, code: usize) -> f32 {
        self.hi[code] - self.lo[code]
    }

    pub fn contains(&self, code: usize, v: f32) -> bool {
        v >= self.lo[code] && v <= self.hi[code]
    }

    pub fn unbounded(m: usize) -> Self {
        NormalRanges { lo: vec![f32::MIN; m], hi: vec![f32::MAX; m] }
    }
}

/// Linear-interpolation empirical quantile of sorted data.
pub fn quantile(sorted: &[f32], q: f64) -> f32 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    (sorted[i] as f64 + frac * (sorted[i + 1] as f64 - sorted[i] as f64)) as f32
}

/// Quantiles of the deterministic shared codes of `latents` (rows).
pub fn ranges_from_latents(latents: &Array2<f32>) -> Result<NormalRanges> {
    let n = latents.nrows();
    let min_n = (1.0 / RANGE_QUANTILES.0).ceil() as usize;
    if n < min_n {
        return Err(FmError::Calibration(format!(
            "{n} validation codes cannot resolve the {} quantile (need {min_n})",
            RANGE_QUANTILES.0
        )));
    }
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for (i, col) in latents.columns().into_iter().enumerate() {
        let mut v = col.to_vec();
        v.sort_by(f32::total_cmp);
        let (a, b) = (quantile(&v, RANGE_QUANTILES.0), quantile(&v, RANGE_QUANTILES.1));
        if !(a < b) {
            return Err(FmError::Calibration(format!("code {i} has a degenerate normal range [{a}, {b}]")));
        }
        lo.push(a);
        hi.push(b);
    }
    Ok(NormalRanges { lo, hi })
}

pub fn compute_normal_ranges(vae: &ComboVae, val: &ImageSet) -> Result<NormalRanges> {
    ranges_from_latents(&vae.encode_shared(&val.images, None)?.mu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphSearchConfig {
    /// Morphs per code, `N`.
    pub n_morphs: usize,
    /// Candidates per search iteration, `B`.
    pub batch: usize,
    /// Radius increment as a fraction of the normal range width.
    pub delta_r_fraction: f32,
    pub max_iterations: usize,
}

impl Default for MorphSearchConfig {
    fn default() -> Self {
        MorphSearchConfig { n_morphs: 100, batch: 32, delta_r_fraction: 0.2, max_iterations: 50 }
    }
}

impl MorphSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_morphs == 0 || self.batch == 0 || self.max_iterations == 0 || !(self.delta_r_fraction > 0.0) {
            return Err(FmError::Contract(format!("invalid morph search config {self:?}")));
        }
        Ok(())
    }
}

/// Values for code `code` found by the stochastic search around `start`.
/// The radius grows by `Δr` per iteration; each iteration draws `B`
/// candidates uniformly from `[start - radius, start + radius]` and keeps
/// those inside the normal range, until `N` are kept.
pub fn search_code_values<R: Rng + ?Sized>(
    start: f32,
    code: usize,
    ranges: &NormalRanges,
    cfg: &MorphSearchConfig,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let delta_r = cfg.delta_r_fraction * ranges.width(code).min(f32::MAX / 4.0);
    let mut accepted = Vec::with_capacity(cfg.n_morphs);
    for it in 1..=cfg.max_iterations {
        let radius = delta_r * it as f32;
        for _ in 0..cfg.batch {
            let v = start + rng.random_range(-1.0f32..=1.0) * radius;
            if ranges.contains(code, v) {
                accepted.push(v);
                if accepted.len() == cfg.n_morphs {
                    return Ok(accepted);
                }
            }
        }
    }
    Err(FmError::MorphSearch { code, accepted: accepted.len(), wanted: cfg.n_morphs })
}

/// Latent of one instance: deterministic `z_s` and DGMM `z_u`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceLatent {
    pub z_s: Array1<f32>,
    pub z_u: Array1<f32>,
}

/// Morph latents and decoded images for one code.
#[derive(Clone, Debug, PartialEq)]
pub struct Morphs {
    pub code: usize,
    pub latents: Array2<f32>,
    pub images: Array2<f32>,
}

fn morph_latents(base: &InstanceLatent, code: usize, values: &[f32]) -> Array2<f32> {
    let mut z = base.z_s.broadcast((values.len(), base.z_s.len())).unwrap().to_owned();
    for (mut row, &v) in z.rows_mut().into_iter().zip(values) {
        row[code] = v;
    }
    z
}

fn latent_of(vae: &ComboVae, x: ArrayView1<f32>) -> Result<InstanceLatent> {
    let x = x.to_owned().insert_axis(Axis(0));
    let z_s = vae.encode_shared(&x, None)?.z.row(0).to_owned();
    let z_u = vae.encode_unique(&x)?.row(0).to_owned();
    Ok(InstanceLatent { z_s, z_u })
}

/// `N` morphs of `x` varying only code `code`.
pub fn generate_morphs<R: Rng + ?Sized>(
    vae: &ComboVae,
    x: ArrayView1<f32>,
    code: usize,
    ranges: &NormalRanges,
    cfg: &MorphSearchConfig,
    rng: &mut R,
) -> Result<Morphs> {
    cfg.validate()?;
    if code >= ranges.len() || ranges.len() != vae.latent_dim() {
        return Err(FmError::Contract(format!(
            "code {code} with {} ranges and m = {}",
            ranges.len(),
            vae.latent_dim()
        )));
    }
    let base = latent_of(vae, x)?;
    let values = search_code_values(base.z_s[code], code, ranges, cfg, rng)?;
    let latents = morph_latents(&base, code, &values);
    let z_u = base.z_u.broadcast((values.len(), base.z_u.len())).unwrap().to_owned();
    let images = vae.decode(&latents, &z_u)?;
    Ok(Morphs { code, latents, images })
}

/// `100 · |{morph : pred(morph) = pred(x)}| / N`.
pub fn resistance(prediction: usize, morph_predictions: &[u8]) -> f64 {
    if morph_predictions.is_empty() {
        return 0.0;
    }
    let same = morph_predictions.iter().filter(|&&p| p as usize == prediction).count();
    100.0 * same as f64 / morph_predictions.len() as f64
}

/// Resistance of every selected code, with the raw morph predictions kept
/// for independent recounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResistanceVector {
    pub codes: Vec<usize>,
    pub r: Vec<f64>,
    pub prediction: usize,
    pub morph_count: usize,
    /// Per code, the predicted labels of its morphs as a digit string.
    pub morph_predictions: Vec<String>,
}

impl ResistanceVector {
    pub fn min(&self) -> f64 {
        self.r.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Everything needed to compute resistance vectors against frozen models.
pub struct ResistanceEngine<'a> {
    pub clf: &'a TargetClassifier,
    pub vae: &'a ComboVae,
    pub ranges: &'a NormalRanges,
    pub morph: &'a MorphSearchConfig,
    pub codes: Vec<usize>,
    pub seed: u64,
}

impl ResistanceEngine<'_> {
    pub fn validate(&self) -> Result<()> {
        self.morph.validate()?;
        if self.codes.is_empty() {
            return Err(FmError::Contract("no latent codes selected".into()));
        }
        if let Some(c) = self.codes.iter().find(|&&c| c >= self.ranges.len()) {
            return Err(FmError::Contract(format!("code {c} out of range 0..{}", self.ranges.len())));
        }
        if self.vae.stage != crate::combo_vae::Stage::Full {
            return Err(FmError::State("resistance needs a fully trained combo-VAE".into()));
        }
        if self.ranges.len() != self.vae.latent_dim() {
            return Err(FmError::Contract("normal ranges do not match the latent width".into()));
        }
        Ok(())
    }

    /// Resistance vector of one image. `stream` selects an independent RNG
    /// stream so results do not depend on evaluation order.
    pub fn evaluate(&self, x: ArrayView1<f32>, stream: u64) -> Result<ResistanceVector> {
        let mut rng = stream_rng(self.seed, stream);
        let xb = x.to_owned().insert_axis(Axis(0));
        let prediction = self.clf.predict(&xb)?[0];
        let base = latent_of(self.vae, x)?;
        let n = self.morph.n_morphs;
        let mut z_s = Array2::<f32>::zeros((n * self.codes.len(), base.z_s.len()));
        for (j, &code) in self.codes.iter().enumerate() {
            let values = search_code_values(base.z_s[code], code, self.ranges, self.morph, &mut rng)?;
            z_s.slice_mut(ndarray::s![j * n..(j + 1) * n, ..]).assign(&morph_latents(&base, code, &values));
        }
        let z_u = base.z_u.broadcast((z_s.nrows(), base.z_u.len())).unwrap().to_owned();
        let preds = self.clf.predict(&self.vae.decode(&z_s, &z_u)?)?;
        let mut r = Vec::with_capacity(self.codes.len());
        let mut morph_predictions = Vec::with_capacity(self.codes.len());
        for chunk in preds.chunks(n) {
            let bytes: Vec<u8> = chunk.iter().map(|&p| p as u8).collect();
            r.push(resistance(prediction, &bytes));
            morph_predictions.push(bytes.iter().map(|&b| char::from(b'0' + b)).collect());
        }
        Ok(ResistanceVector { codes: self.codes.clone(), r, prediction, morph_count: n, morph_predictions })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// One threshold for all codes, capping the joint false-positive rate.
    Unified,
    /// One threshold per code, each capping that code's false-positive rate.
    PerCode,
}

impl std::str::FromStr for ThresholdMode {
    type Err = FmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(ThresholdMode::Unified),
            "per-code" | "per_code" => Ok(ThresholdMode::PerCode),
            other => Err(FmError::Contract(format!("unknown threshold mode {other:?}"))),
        }
    }
}

/// Resistance thresholds (percent) for the selected codes, plus the
/// distance threshold once the purifier is calibrated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub codes: Vec<usize>,
    pub theta_r: Vec<f64>,
    pub mode: ThresholdMode,
    pub rho: Option<f64>,
    pub theta_d: Option<f64>,
    pub eta: Option<f64>,
}

impl ThresholdConfig {
    pub fn unified(codes: Vec<usize>, theta: f64) -> Self {
        let theta_r = vec![theta; codes.len()];
        ThresholdConfig { codes, theta_r, mode: ThresholdMode::Unified, rho: None, theta_d: None, eta: None }
    }

    fn check(&self, rv: &ResistanceVector) -> Result<()> {
        if rv.r.len() != self.theta_r.len() || rv.codes != self.codes {
            return Err(FmError::Contract(format!(
                "resistance vector over codes {:?} vs thresholds over {:?}",
                rv.codes, self.codes
            )));
        }
        Ok(())
    }
}

/// Largest threshold on the `100/N` grid such that at most a `1 - rho`
/// fraction of `values` satisfy `v <= θ`. When even `θ = 0` flags more than
/// that (mass at zero), returns 0.
fn fp_capped_threshold(values: &mut [f64], rho: f64, step: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let budget = ((1.0 - rho) * values.len() as f64 + 1e-9).floor() as usize;
    if budget >= values.len() {
        return 100.0;
    }
    let first_flagged_excess = values[budget];
    // Largest grid point strictly below the (budget+1)-th smallest value.
    let k = (first_flagged_excess / step - 1e-9).ceil() - 1.0;
    (k * step).clamp(0.0, 100.0)
}

/// Calibrate thresholds on clean validation resistance vectors so the
/// false-positive rate stays at or below `1 - rho`.
pub fn calibrate_thresholds(val: &[ResistanceVector], rho: f64, mode: ThresholdMode) -> Result<ThresholdConfig> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(FmError::Contract(format!("rho {rho} outside (0, 1)")));
    }
    let first = val.first().ok_or_else(|| FmError::Calibration("no validation resistance vectors".into()))?;
    if val.iter().any(|v| v.codes != first.codes || v.morph_count != first.morph_count) {
        return Err(FmError::Calibration("validation vectors disagree on codes or morph count".into()));
    }
    let step = 100.0 / first.morph_count as f64;
    let theta_r = match mode {
        ThresholdMode::PerCode => (0..first.codes.len())
            .map(|j| fp_capped_threshold(&mut val.iter().map(|v| v.r[j]).collect::<Vec<_>>(), rho, step))
            .collect(),
        ThresholdMode::Unified => {
            let t = fp_capped_threshold(&mut val.iter().map(ResistanceVector::min).collect::<Vec<_>>(), rho, step);
            vec![t; first.codes.len()]
        }
    };
    Ok(ThresholdConfig { codes: first.codes.clone(), theta_r, mode, rho: Some(rho), theta_d: None, eta: None })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Normal,
    Suspicious,
}

/// NORMAL iff every selected resistance strictly exceeds its threshold.
pub fn detect(rv: &ResistanceVector, tc: &ThresholdConfig) -> Result<Verdict> {
    tc.check(rv)?;
    Ok(if rv.r.iter().zip(&tc.theta_r).all(|(r, t)| r > t) { Verdict::Normal } else { Verdict::Suspicious })
}

/// One point of a unified-threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub theta: f64,
    /// Clean instances kept NORMAL (true negatives / |CLE|).
    pub clean: Option<f64>,
    /// Adversarial instances flagged (true positives / |ADV|).
    pub adv: Option<f64>,
    pub overall: Option<f64>,
}

/// Detection accuracies at each unified threshold. Rates over an empty
/// group are `None`.
pub fn sweep(clean_min: &[f64], adv_min: &[f64], thetas: &[f64]) -> Vec<SweepPoint> {
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    thetas
        .iter()
        .map(|&theta| {
            let tn = clean_min.iter().filter(|&&r| r > theta).count();
            let tp = adv_min.iter().filter(|&&r| r <= theta).count();
            SweepPoint {
                theta,
                clean: rate(tn, clean_min.len()),
                adv: rate(tp, adv_min.len()),
                overall: rate(tn + tp, clean_min.len() + adv_min.len()),
            }
        })
        .collect()
}

/// `lo:hi:step` inclusive grid, e.g. `5:100:5`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| FmError::Contract(format!("grid {spec:?}: {e}")))?;
    let (lo, hi, step) = match parts[..] {
        [v] => (v, v, 1.0),
        [lo, hi, step] if step > 0.0 && hi >= lo => (lo, hi, step),
        _ => return Err(FmError::Contract(format!("grid {spec:?}: expected lo:hi:step"))),
    };
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}
