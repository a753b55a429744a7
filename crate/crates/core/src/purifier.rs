//! Triage of suspicious inputs and purification by reconstruction.
//!
//! A suspicious input's distance is the summed shortfall of its resistance
//! below the thresholds. Inputs within `θ_d` are salvageable and are
//! reconstructed through the combo-VAE before re-classification; the rest
//! are rejected.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::TargetClassifier;
use crate::combo_vae::ComboVae;
use crate::datasets::check_pixels;
use crate::detector::{detect, ResistanceEngine, ResistanceVector, ThresholdConfig, Verdict};
use crate::error::{FmError, Result};

/// `Σ |r_i - θ_i|` over components with `r_i < θ_i`.
pub fn distance(rv: &ResistanceVector, tc: &ThresholdConfig) -> Result<f64> {
    if rv.r.len() != tc.theta_r.len() {
        return Err(FmError::Contract(format!("{} resistances vs {} thresholds", rv.r.len(), tc.theta_r.len())));
    }
    Ok(rv.r.iter().zip(&tc.theta_r).filter(|(r, t)| r < t).fold(0.0, |acc, (r, t)| acc + (t - r)))
}

/// Empirical `eta`-percent quantile (lower order statistic) of clean
/// validation distances, zeros included.
pub fn calibrate_distance_threshold(distances: &[f64], eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta <= 100.0) {
        return Err(FmError::Contract(format!("eta {eta} outside (0, 100]")));
    }
    if distances.is_empty() {
        return Err(FmError::Calibration("no validation distances".into()));
    }
    let mut d = distances.to_vec();
    d.sort_by(f64::total_cmp);
    let k = ((eta / 100.0 * d.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(d[k.min(d.len()) - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Triage {
    Normal,
    Salvageable,
    Rejected,
}

/// Triage outcome and the distance it was based on.
pub fn triage(rv: &ResistanceVector, tc: &ThresholdConfig, theta_d: f64) -> Result<(Triage, f64)> {
    let d = distance(rv, tc)?;
    let t = match detect(rv, tc)? {
        Verdict::Normal => Triage::Normal,
        Verdict::Suspicious if d <= theta_d => Triage::Salvageable,
        Verdict::Suspicious => Triage::Rejected,
    };
    Ok((t, d))
}

/// Reconstructions of `x` and the classifier's labels for them.
pub fn purify(vae: &ComboVae, clf: &TargetClassifier, x: &Array2<f32>) -> Result<(Array2<f32>, Vec<usize>)> {
    let x_pur = vae.reconstruct(x)?;
    check_pixels(&x_pur).map_err(|e| FmError::Numeric(format!("purified image: {e}")))?;
    let labels = clf.predict(&x_pur)?;
    Ok((x_pur, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriageDecision {
    pub verdict: Triage,
    pub distance: f64,
    /// `None` exactly when rejected.
    pub final_label: Option<usize>,
    #[serde(skip)]
    pub purified: Option<Vec<f32>>,
}

impl TriageDecision {
    /// Decision from a triage outcome plus the two candidate labels.
    pub fn assemble(
        verdict: Triage,
        distance: f64,
        direct: usize,
        purified: Option<(Vec<f32>, usize)>,
    ) -> Result<Self> {
        let (final_label, purified) = match (verdict, purified) {
            (Triage::Normal, _) => (Some(direct), None),
            (Triage::Salvageable, Some((img, label))) => (Some(label), Some(img)),
            (Triage::Salvageable, None) => {
                return Err(FmError::Contract("salvageable decision without a purified image".into()));
            }
            (Triage::Rejected, _) => (None, None),
        };
        Ok(TriageDecision { verdict, distance, final_label, purified })
    }
}

/// The full defense against frozen models and calibrated thresholds.
pub struct Defense<'a> {
    pub engine: ResistanceEngine<'a>,
    pub thresholds: &'a ThresholdConfig,
}

impl Defense<'_> {
    pub fn theta_d(&self) -> Result<f64> {
        self.thresholds.theta_d.ok_or_else(|| FmError::State("thresholds have no calibrated distance threshold".into()))
    }

    pub fn decide(&self, x: ArrayView1<f32>, stream: u64) -> Result<(ResistanceVector, TriageDecision)> {
        let theta_d = self.theta_d()?;
        let rv = self.engine.evaluate(x, stream)?;
        let (verdict, d) = triage(&rv, self.thresholds, theta_d)?;
        let purified = if verdict == Triage::Salvageable {
            let (img, labels) = purify(self.engine.vae, self.engine.clf, &x.to_owned().insert_axis(Axis(0)))?;
            Some((img.row(0).to_vec(), labels[0]))
        } else {
            None
        };
        let decision = TriageDecision::assemble(verdict, d, rv.prediction, purified)?;
        Ok((rv, decision))
    }
}
