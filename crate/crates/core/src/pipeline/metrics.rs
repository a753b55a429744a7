use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::attacks::{success_rate, undefended_accuracy, AdversarialRecord, AttackKind};
use crate::combo_vae::{ComboVae, Stage1Report, Stage2Report};
use crate::datasets::DatasetId;
use crate::datasets::ImageSet;
use crate::detector::NormalRanges;
use crate::detector::{detect, sweep, ResistanceVector, SweepPoint, ThresholdConfig, Verdict};
use crate::error::{FmError, Result};
use crate::purifier::{calibrate_distance_threshold, distance, triage, Triage};
use crate::util::median;

/// Everything the defense decided about one instance, independent of `θ_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub label: usize,
    pub rv: ResistanceVector,
    /// Classifier output on the reconstruction.
    pub purified_label: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub total: usize,
    pub normal: usize,
    pub salvageable: usize,
    pub rejected: usize,
    /// NORMAL and the direct prediction is the true label.
    pub normal_correct: usize,
    /// SALVAGEABLE and the purified prediction is the true label.
    pub recovered: usize,
}

impl GroupCounts {
    fn add(&mut self, t: Triage, o: &InstanceOutcome) {
        self.total += 1;
        match t {
            Triage::Normal => {
                self.normal += 1;
                self.normal_correct += usize::from(o.rv.prediction == o.label);
            }
            Triage::Salvageable => {
                self.salvageable += 1;
                self.recovered += usize::from(o.purified_label == o.label);
            }
            Triage::Rejected => self.rejected += 1,
        }
    }

    fn merged(&self, other: &GroupCounts) -> GroupCounts {
        GroupCounts {
            total: self.total + other.total,
            normal: self.normal + other.normal,
            salvageable: self.salvageable + other.salvageable,
            rejected: self.rejected + other.rejected,
            normal_correct: self.normal_correct + other.normal_correct,
            recovered: self.recovered + other.recovered,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub clean: Option<f64>,
    pub adv: Option<f64>,
    pub overall: Option<f64>,
}

/// Triage results at one `(θ_r, θ_d)` operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    /// `None` means unbounded: every suspicious instance is salvageable.
    pub theta_d: Option<f64>,
    pub clean: GroupCounts,
    pub adv: GroupCounts,
    /// Clean: fraction kept NORMAL. Adversarial: fraction flagged.
    pub detection: Rates,
    /// Fraction of salvageable instances whose purified label is correct.
    pub recall: Rates,
    /// Per-instance correctness: NORMAL uses the direct label, SALVAGEABLE
    /// the purified one, and REJECTED is correct only for adversarial input.
    pub final_accuracy: Rates,
}

impl Outcome {
    fn from_counts(theta_d: Option<f64>, clean: GroupCounts, adv: GroupCounts) -> Self {
        let all = clean.merged(&adv);
        let clean_ok = clean.normal_correct + clean.recovered;
        let adv_ok = adv.normal_correct + adv.recovered + adv.rejected;
        Outcome {
            theta_d,
            detection: Rates {
                clean: ratio(clean.normal, clean.total),
                adv: ratio(adv.salvageable + adv.rejected, adv.total),
                overall: ratio(clean.normal + adv.salvageable + adv.rejected, all.total),
            },
            recall: Rates {
                clean: ratio(clean.recovered, clean.salvageable),
                adv: ratio(adv.recovered, adv.salvageable),
                overall: ratio(all.recovered, all.salvageable),
            },
            final_accuracy: Rates {
                clean: ratio(clean_ok, clean.total),
                adv: ratio(adv_ok, adv.total),
                overall: ratio(clean_ok + adv_ok, all.total),
            },
            clean,
            adv,
        }
    }

    /// Counts partition each group and every rate matches its counts.
    pub fn check(&self) -> Result<()> {
        for (name, g) in [("clean", &self.clean), ("adv", &self.adv)] {
            if g.normal + g.salvageable + g.rejected != g.total
                || g.normal_correct > g.normal
                || g.recovered > g.salvageable
            {
                return Err(FmError::Contract(format!("{name} counts inconsistent: {g:?}")));
            }
        }
        let again = Outcome::from_counts(self.theta_d, self.clean, self.adv);
        if &again != self {
            return Err(FmError::Contract("rates disagree with counts".into()));
        }
        Ok(())
    }
}

/// Triage every instance of both groups at one operating point.
pub fn evaluate_outcome(
    clean: &[InstanceOutcome],
    adv: &[InstanceOutcome],
    tc: &ThresholdConfig,
    theta_d: Option<f64>,
) -> Result<Outcome> {
    let td = theta_d.unwrap_or(f64::INFINITY);
    let count = |group: &[InstanceOutcome]| -> Result<GroupCounts> {
        let mut c = GroupCounts::default();
        for o in group {
            c.add(triage(&o.rv, tc, td)?.0, o);
        }
        Ok(c)
    };
    Ok(Outcome::from_counts(theta_d, count(clean)?, count(adv)?))
}

/// Fraction of VAL flagged by `tc` (all codes jointly) and the worst
/// single-code false-positive rate.
pub fn val_false_positive(val: &[InstanceOutcome], tc: &ThresholdConfig) -> Result<(f64, f64)> {
    let mut joint = 0;
    let mut per_code = vec![0usize; tc.theta_r.len()];
    for o in val {
        joint += usize::from(detect(&o.rv, tc)? == Verdict::Suspicious);
        for (j, (r, t)) in o.rv.r.iter().zip(&tc.theta_r).enumerate() {
            per_code[j] += usize::from(r <= t);
        }
    }
    let n = val.len().max(1) as f64;
    Ok((joint as f64 / n, per_code.iter().copied().max().unwrap_or(0) as f64 / n))
}

pub fn val_distances(val: &[InstanceOutcome], tc: &ThresholdConfig) -> Result<Vec<f64>> {
    val.iter().map(|o| distance(&o.rv, tc)).collect()
}

fn mean_resistance(group: &[InstanceOutcome]) -> Option<f64> {
    let per: Vec<f64> = group.iter().map(|o| o.rv.r.iter().sum::<f64>() / o.rv.r.len().max(1) as f64).collect();
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub train_size: usize,
    /// Accuracy on CLE.
    pub clean_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub thresholds: ThresholdConfig,
    pub val_size: usize,
    pub val_joint_false_positive: f64,
    pub val_max_code_false_positive: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// `None` for the all-salvageable endpoint.
    pub eta: Option<f64>,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub kind: AttackKind,
    /// Attacked CLE instances.
    pub attacked: usize,
    pub undefended_accuracy: f64,
    pub success_rate: f64,
    /// Instances in ADV (successful attacks on correctly classified images).
    pub adv_size: usize,
    pub mean_linf: f64,
    pub mean_l2: f64,
    /// Median norms over ADV members.
    pub median_linf: Option<f64>,
    pub median_l2: Option<f64>,
    pub mean_resistance_adv: Option<f64>,
    /// Unified-threshold detection sweep over CLE and this ADV.
    pub sweep: Vec<SweepPoint>,
    /// Triage at the calibrated thresholds.
    pub calibrated: Outcome,
    /// Triage at the unified curve threshold for each fractile.
    pub purification: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: DatasetId,
    pub config_hash: String,
    pub classifier: ClassifierMetrics,
    pub calibration: CalibrationSummary,
    pub clean_instances: usize,
    pub mean_resistance_clean: Option<f64>,
    /// CLE alone at the calibrated thresholds.
    pub clean_calibrated: Outcome,
    /// CLE alone at the curve threshold with every suspicious instance purified.
    pub clean_purified: Outcome,
    /// Fraction of CLE whose reconstruction keeps the classifier's label.
    pub label_preservation: Option<f64>,
    /// Fraction of CLE whose label survives a second reconstruction.
    pub purification_stability: Option<f64>,
    /// Unified resistance threshold used for the purification curves.
    pub curve_theta: f64,
    pub attacks: Vec<AttackMetrics>,
    pub diagnostics: ModelDiagnostics,
}

/// Model-quality statistics behind the defense, measured on VAL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    /// Accuracy of `argmax_c q(c | z_u)`.
    pub dgmm_accuracy: Option<f64>,
    /// Classes whose mean `z_u` lies nearest their own mixture mean.
    pub zu_clustered_classes: usize,
    /// Per-dimension mean and standard deviation of the encoder mean `μ`.
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
    /// Median per-image `L_R` after each stage-2 epoch.
    pub heldout_reconstruction: Vec<f64>,
    pub ranges: NormalRanges,
}

/// Diagnostics of a trained combo-VAE on `val`.
pub fn model_diagnostics(
    vae: &ComboVae,
    val: &ImageSet,
    ranges: &NormalRanges,
    stage1: Option<&Stage1Report>,
    stage2: Option<&Stage2Report>,
) -> Result<ModelDiagnostics> {
    let mu = vae.encode_shared(&val.images, None)?.mu;
    let latent_mean: Vec<f64> =
        mu.columns().into_iter().map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / c.len() as f64).collect();
    let latent_std = mu
        .columns()
        .into_iter()
        .zip(&latent_mean)
        .map(|(c, m)| (c.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    let zu = vae.encode_unique(&val.images)?;
    let means = &vae.dgmm.mixture.means;
    let mut clustered = 0;
    for c in 0..means.nrows() {
        let rows: Vec<usize> = (0..val.len()).filter(|&i| val.labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        let centre = zu.select(Axis(0), &rows).mean_axis(Axis(0)).expect("non-empty");
        let dist = |k: usize| centre.iter().zip(means.row(k)).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        let nearest = (0..means.nrows()).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).expect("classes");
        clustered += usize::from(nearest == c);
    }
    Ok(ModelDiagnostics {
        dgmm_accuracy: stage1.and_then(|r| r.heldout_accuracy),
        zu_clustered_classes: clustered,
        latent_mean,
        latent_std,
        heldout_reconstruction: stage2.map(|r| r.heldout_reconstruction.clone()).unwrap_or_default(),
        ranges: ranges.clone(),
    })
}

impl MetricsReport {
    pub fn attack(&self, kind: AttackKind) -> Option<&AttackMetrics> {
        self.attacks.iter().find(|a| a.kind == kind)
    }

    /// Every rate in `[0, 1]` and every outcome consistent with its counts.
    pub fn check(&self) -> Result<()> {
        let in_unit = |v: Option<f64>| v.is_none_or(|v| (0.0..=1.0).contains(&v));
        self.clean_calibrated.check()?;
        self.clean_purified.check()?;
        for a in &self.attacks {
            a.calibrated.check()?;
            for p in &a.purification {
                p.outcome.check()?;
            }
            let rates = [a.undefended_accuracy, a.success_rate].map(Some);
            let sweep_rates = a.sweep.iter().flat_map(|p| [p.clean, p.adv, p.overall]);
            if !rates.into_iter().chain(sweep_rates).all(in_unit) {
                return Err(FmError::Contract(format!("{} has a rate outside [0, 1]", a.kind)));
            }
        }
        Ok(())
    }
}

/// Inputs of [`compute_metrics`]: per-instance outcomes read back from the
/// resistance logs and the purification labels.
pub struct RunLogs {
    pub val: Vec<InstanceOutcome>,
    /// Labels of twice-reconstructed CLE images, aligned with `cle`.
    pub cle_repurified: Vec<usize>,
    pub cle: Vec<InstanceOutcome>,
    pub adv: Vec<(AttackKind, Vec<AdversarialRecord>, Vec<InstanceOutcome>)>,
}

pub struct MetricsSettings<'a> {
    pub dataset: DatasetId,
    pub config_hash: &'a str,
    pub thresholds: &'a ThresholdConfig,
    pub sweep_thetas: &'a [f64],
    pub curve_theta: f64,
    pub eta_grid: &'a [f64],
}

pub fn compute_metrics(
    s: &MetricsSettings,
    logs: &RunLogs,
    classifier: ClassifierMetrics,
    diagnostics: ModelDiagnostics,
) -> Result<MetricsReport> {
    let tc = s.thresholds;
    let theta_d = tc.theta_d.ok_or_else(|| FmError::State("thresholds lack a distance threshold".into()))?;
    let (joint, max_code) = val_false_positive(&logs.val, tc)?;

    let curve_tc = ThresholdConfig::unified(tc.codes.clone(), s.curve_theta);
    let curve_d = val_distances(&logs.val, &curve_tc)?;
    let curve_thetas: Vec<Option<f64>> = s
        .eta_grid
        .iter()
        .map(|&eta| calibrate_distance_threshold(&curve_d, eta).map(Some))
        .chain(std::iter::once(Ok(None)))
        .collect::<Result<_>>()?;
    let etas: Vec<Option<f64>> = s.eta_grid.iter().copied().map(Some).chain(std::iter::once(None)).collect();

    let clean_min: Vec<f64> = logs.cle.iter().map(|o| o.rv.min()).collect();
    let mut attacks = Vec::new();
    for (kind, records, adv) in &logs.adv {
        for o in adv.iter().chain(&logs.cle) {
            if o.rv.codes != tc.codes {
                return Err(FmError::Contract(format!(
                    "{kind}: resistance over {:?}, thresholds over {:?}",
                    o.rv.codes, tc.codes
                )));
            }
        }
        let adv_min: Vec<f64> = adv.iter().map(|o| o.rv.min()).collect();
        let n = records.len().max(1) as f64;
        let in_adv: Vec<&AdversarialRecord> =
            records.iter().filter(|r| r.success && r.clean_prediction == r.original_label).collect();
        let mut linf: Vec<f64> = in_adv.iter().map(|r| r.linf as f64).collect();
        let mut l2: Vec<f64> = in_adv.iter().map(|r| r.l2 as f64).collect();
        let purification = etas
            .iter()
            .zip(&curve_thetas)
            .map(|(&eta, &td)| Ok(CurvePoint { eta, outcome: evaluate_outcome(&logs.cle, adv, &curve_tc, td)? }))
            .collect::<Result<_>>()?;
        attacks.push(AttackMetrics {
            kind: *kind,
            attacked: records.len(),
            undefended_accuracy: undefended_accuracy(records),
            success_rate: success_rate(records),
            adv_size: adv.len(),
            mean_linf: records.iter().map(|r| r.linf as f64).sum::<f64>() / n,
            mean_l2: records.iter().map(|r| r.l2 as f64).sum::<f64>() / n,
            median_linf: median(&mut linf),
            median_l2: median(&mut l2),
            mean_resistance_adv: mean_resistance(adv),
            sweep: sweep(&clean_min, &adv_min, s.sweep_thetas),
            calibrated: evaluate_outcome(&logs.cle, adv, tc, Some(theta_d))?,
            purification,
        });
    }
    let report = MetricsReport {
        dataset: s.dataset,
        config_hash: s.config_hash.to_string(),
        classifier,
        calibration: CalibrationSummary {
            thresholds: tc.clone(),
            val_size: logs.val.len(),
            val_joint_false_positive: joint,
            val_max_code_false_positive: max_code,
        },
        clean_instances: logs.cle.len(),
        mean_resistance_clean: mean_resistance(&logs.cle),
        clean_calibrated: evaluate_outcome(&logs.cle, &[], tc, Some(theta_d))?,
        clean_purified: evaluate_outcome(&logs.cle, &[], &curve_tc, None)?,
        label_preservation: ratio(
            logs.cle.iter().filter(|o| o.purified_label == o.rv.prediction).count(),
            logs.cle.len(),
        ),
        purification_stability: ratio(
            logs.cle.iter().zip(&logs.cle_repurified).filter(|(o, &l)| o.purified_label == l).count(),
            logs.cle_repurified.len(),
        ),
        curve_theta: s.curve_theta,
        attacks,
        diagnostics,
    };
    report.check()?;
    Ok(report)
}
