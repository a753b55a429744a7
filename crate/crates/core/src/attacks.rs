//! Oblivious attacks on the target classifier: FGSM (L∞), DeepFool (L∞)
//! and Carlini-Wagner (L2). Nothing here sees the detector or purifier.

use fmd_nn::loss::argmax_rows;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::TargetClassifier;
use crate::datasets::{ImageSet, Role, NUM_CLASSES, PIXELS};
use crate::error::{FmError, Result};

const CW_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Deepfool,
    Cw,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Deepfool => "deepfool",
            AttackKind::Cw => "cw",
        })
    }
}

impl std::str::FromStr for AttackKind {
    type Err = FmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "deepfool" => Ok(AttackKind::Deepfool),
            "cw" | "cw_l2" | "cw-l2" => Ok(AttackKind::Cw),
            other => Err(FmError::Contract(format!("unknown attack {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// FGSM L∞ budget.
    pub epsilon: f32,
    pub deepfool_max_iter: usize,
    pub deepfool_overshoot: f32,
    pub cw_confidence: f32,
    pub cw_binary_steps: usize,
    pub cw_iterations: usize,
    pub cw_learning_rate: f32,
    pub cw_initial_const: f32,
    pub cw_abort_early: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::Cw,
            epsilon: 0.3,
            deepfool_max_iter: 50,
            deepfool_overshoot: 0.02,
            cw_confidence: 0.0,
            cw_binary_steps: 9,
            cw_iterations: 1000,
            cw_learning_rate: 0.01,
            cw_initial_const: 1e-3,
            cw_abort_early: true,
        }
    }
}

impl AttackSpec {
    pub fn of_kind(kind: AttackKind) -> Self {
        AttackSpec { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AttackKind::Fgsm && !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(FmError::Contract(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.deepfool_max_iter == 0 || self.cw_binary_steps == 0 || self.cw_iterations == 0 {
            return Err(FmError::Contract("iteration counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// One attacked instance. `perturbed` is kept in memory only; persisted
/// records carry the statistics and the pixels travel separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRecord {
    pub source: usize,
    /// Ground-truth label of the clean image.
    pub original_label: usize,
    /// Classifier output on the clean image.
    pub clean_prediction: usize,
    pub adv_label: usize,
    /// `adv_label != original_label`.
    pub success: bool,
    pub linf: f32,
    pub l2: f32,
    #[serde(skip)]
    pub perturbed: Vec<f32>,
}

impl AdversarialRecord {
    fn new(
        source: usize,
        x: ArrayView1<f32>,
        y: usize,
        clean_prediction: usize,
        adv: Vec<f32>,
        adv_label: usize,
    ) -> Self {
        let (mut linf, mut l2) = (0.0f32, 0.0f64);
        for (a, b) in adv.iter().zip(x.iter()) {
            let d = a - b;
            linf = linf.max(d.abs());
            l2 += (d as f64) * (d as f64);
        }
        AdversarialRecord {
            source,
            original_label: y,
            clean_prediction,
            adv_label,
            success: adv_label != y,
            linf,
            l2: l2.sqrt() as f32,
            perturbed: adv,
        }
    }
}

fn check_batch(x: &Array2<f32>, y: &[usize]) -> Result<()> {
    if x.ncols() != PIXELS || x.nrows() != y.len() {
        return Err(FmError::Contract(format!("{} images of width {} with {} labels", x.nrows(), x.ncols(), y.len())));
    }
    if let Some(bad) = y.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(FmError::Contract(format!("label {bad} out of range")));
    }
    Ok(())
}

/// `clip(x + ε·sign(∇_x loss), 0, 1)` for every row.
pub fn fgsm(clf: &TargetClassifier, x: &Array2<f32>, y: &[usize], epsilon: f32) -> Result<Array2<f32>> {
    check_batch(x, y)?;
    let g = clf.loss_gradient(x, y)?;
    Ok(ndarray::Zip::from(x).and(&g).map_collect(|&xi, &gi| (xi + epsilon * sign(gi)).clamp(0.0, 1.0)))
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Logits and the Jacobian rows `∇ logit_k(x)` for all classes.
fn logit_jacobian(clf: &TargetClassifier, x: ArrayView1<f32>) -> Result<(Array1<f32>, Array2<f32>)> {
    let rep = x.broadcast((NUM_CLASSES, PIXELS)).unwrap().to_owned();
    let (logits, jac) = clf.input_gradient(&rep, |l| Array2::eye(l.ncols()))?;
    Ok((logits.row(0).to_owned(), jac))
}

/// L∞ DeepFool on a single image. Returns the clipped adversarial image.
pub fn deepfool(clf: &TargetClassifier, x: ArrayView1<f32>, max_iter: usize, overshoot: f32) -> Result<Vec<f32>> {
    let x0 = x.to_owned();
    let (logits, _) = logit_jacobian(clf, x)?;
    let k0 = argmax_rows(&logits.insert_axis(Axis(0)))[0];
    let mut total = Array1::<f32>::zeros(PIXELS);
    let mut adv = x0.clone();
    for _ in 0..max_iter {
        let (logits, jac) = logit_jacobian(clf, adv.view())?;
        if argmax_rows(&logits.clone().insert_axis(Axis(0)))[0] != k0 {
            break;
        }
        let mut best: Option<(f32, usize)> = None;
        for k in (0..NUM_CLASSES).filter(|&k| k != k0) {
            let w_norm: f32 = jac.row(k).iter().zip(jac.row(k0).iter()).map(|(a, b)| (a - b).abs()).sum();
            let f = (logits[k] - logits[k0]).abs();
            let dist = f / (w_norm + 1e-8);
            if best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, k));
            }
        }
        let (_, l) = best.expect("at least two classes");
        let w = &jac.row(l) - &jac.row(k0);
        let w_norm = w.iter().map(|v| v.abs()).sum::<f32>() + 1e-8;
        let step = ((logits[l] - logits[k0]).abs() + 1e-4) / w_norm;
        total.zip_mut_with(&w, |t, &wi| *t += step * sign(wi));
        adv = ndarray::Zip::from(&x0).and(&total).map_collect(|&a, &t| (a + (1.0 + overshoot) * t).clamp(0.0, 1.0));
    }
    Ok(adv.to_vec())
}

/// Batched untargeted CW-L2 with tanh change of variables and a binary
/// search over the trade-off constant, one constant per instance.
pub fn cw_l2(clf: &TargetClassifier, x: &Array2<f32>, y: &[usize], spec: &AttackSpec) -> Result<Array2<f32>> {
    check_batch(x, y)?;
    let mut out = x.clone();
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + CW_CHUNK).min(x.nrows());
        let adv = cw_chunk(clf, &x.slice(s![start..end, ..]).to_owned(), &y[start..end], spec)?;
        out.slice_mut(s![start..end, ..]).assign(&adv);
        start = end;
    }
    Ok(out)
}

fn cw_chunk(clf: &TargetClassifier, x: &Array2<f32>, y: &[usize], spec: &AttackSpec) -> Result<Array2<f32>> {
    let n = x.nrows();
    let kappa = spec.cw_confidence;
    let (beta1, beta2, eps_adam) = (0.9f32, 0.999f32, 1e-8f32);
    // x = (tanh(w) + 1) / 2, kept slightly inside (0, 1) so atanh is finite.
    let w0 = x.mapv(|v| ((2.0 * v - 1.0) * 0.999999).atanh());
    let mut lower = vec![0.0f32; n];
    let mut upper = vec![1e10f32; n];
    let mut consts = vec![spec.cw_initial_const; n];
    let mut best_l2 = vec![f32::INFINITY; n];
    let mut best = x.clone();
    let check_every = (spec.cw_iterations / 10).max(1);

    for _ in 0..spec.cw_binary_steps {
        let mut delta = Array2::<f32>::zeros(x.dim());
        let mut m = Array2::<f32>::zeros(x.dim());
        let mut v = Array2::<f32>::zeros(x.dim());
        let mut active: Vec<usize> = (0..n).collect();
        let mut prev_loss = vec![f32::INFINITY; n];
        let mut succeeded = vec![false; n];
        for it in 0..spec.cw_iterations {
            if active.is_empty() {
                break;
            }
            let wa = w0.select(Axis(0), &active) + delta.select(Axis(0), &active);
            let th = wa.mapv(f32::tanh);
            let xa = th.mapv(|t| (t + 1.0) * 0.5);
            let x_orig = x.select(Axis(0), &active);
            let mut margins = vec![0.0f32; active.len()];
            let (logits, g_logit) = clf.input_gradient(&xa, |l| {
                let mut gy = Array2::<f32>::zeros(l.dim());
                for (r, &i) in active.iter().enumerate() {
                    let yi = y[i];
                    let (mut o, mut best_other) = (0usize, f32::NEG_INFINITY);
                    for k in (0..NUM_CLASSES).filter(|&k| k != yi) {
                        if l[[r, k]] > best_other {
                            best_other = l[[r, k]];
                            o = k;
                        }
                    }
                    margins[r] = l[[r, yi]] - best_other + kappa;
                    if margins[r] > 0.0 {
                        gy[[r, yi]] = consts[i];
                        gy[[r, o]] = -consts[i];
                    }
                }
                gy
            })?;
            let preds = argmax_rows(&logits);
            let t = (it + 1) as i32;
            let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let mut l2 = 0.0f32;
                for p in 0..PIXELS {
                    let d = xa[[r, p]] - x_orig[[r, p]];
                    l2 += d * d;
                }
                let loss = l2 + consts[i] * margins[r].max(0.0);
                // Record the iterate just evaluated.
                let adversarial = preds[r] != y[i] && margins[r] <= 0.0;
                if adversarial {
                    succeeded[i] = true;
                    if l2 < best_l2[i] {
                        best_l2[i] = l2;
                        best.row_mut(i).assign(&xa.row(r));
                    }
                }
                // d loss / d w = (2(x' - x) + c·dmargin/dx') · (1 - tanh²)/2.
                for p in 0..PIXELS {
                    let dx = 2.0 * (xa[[r, p]] - x_orig[[r, p]]) + g_logit[[r, p]];
                    let g = dx * 0.5 * (1.0 - th[[r, p]] * th[[r, p]]);
                    let mi = beta1 * m[[i, p]] + (1.0 - beta1) * g;
                    let vi = beta2 * v[[i, p]] + (1.0 - beta2) * g * g;
                    m[[i, p]] = mi;
                    v[[i, p]] = vi;
                    delta[[i, p]] -= spec.cw_learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + eps_adam);
                }
                let mut keep = true;
                if spec.cw_abort_early && (it + 1) % check_every == 0 {
                    if loss > prev_loss[i] * 0.9999 {
                        keep = false;
                    }
                    prev_loss[i] = loss;
                }
                if keep {
                    still.push(i);
                }
            }
            active = still;
        }
        for i in 0..n {
            if succeeded[i] {
                upper[i] = upper[i].min(consts[i]);
                consts[i] = 0.5 * (lower[i] + upper[i]);
            } else {
                lower[i] = lower[i].max(consts[i]);
                consts[i] = if upper[i] < 1e9 { 0.5 * (lower[i] + upper[i]) } else { consts[i] * 10.0 };
            }
        }
    }
    Ok(best)
}

/// Attack every instance of `source`. Returns all records plus the ADV set
/// made of successful records whose clean image was classified correctly.
pub fn build_adv_set(
    clf: &TargetClassifier,
    source: &ImageSet,
    spec: &AttackSpec,
) -> Result<(Vec<AdversarialRecord>, ImageSet)> {
    spec.validate()?;
    let clean_pred = clf.predict(&source.images)?;
    let adv_images = match spec.kind {
        AttackKind::Fgsm => fgsm(clf, &source.images, &source.labels, spec.epsilon)?,
        AttackKind::Cw => cw_l2(clf, &source.images, &source.labels, spec)?,
        AttackKind::Deepfool => {
            let mut out = source.images.clone();
            for i in 0..source.len() {
                if clean_pred[i] != source.labels[i] {
                    continue;
                }
                let adv = deepfool(clf, source.image(i), spec.deepfool_max_iter, spec.deepfool_overshoot)?;
                out.row_mut(i).assign(&Array1::from(adv));
            }
            out
        }
    };
    let adv_pred = clf.predict(&adv_images)?;
    let records: Vec<AdversarialRecord> = (0..source.len())
        .map(|i| {
            AdversarialRecord::new(
                source.source[i],
                source.image(i),
                source.labels[i],
                clean_pred[i],
                adv_images.row(i).to_vec(),
                adv_pred[i],
            )
        })
        .collect();
    let keep: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].success && records[i].clean_prediction == records[i].original_label)
        .collect();
    let dropped = records.len() - keep.len();
    if dropped > 0 {
        log::info!("{}: {dropped} of {} records excluded from ADV", spec.kind, records.len());
    }
    let adv = ImageSet {
        images: adv_images.select(Axis(0), &keep),
        labels: keep.iter().map(|&i| source.labels[i]).collect(),
        source: keep.iter().map(|&i| source.source[i]).collect(),
        role: Some(Role::Adv),
    };
    adv.check_pixels()?;
    Ok((records, adv))
}

/// Fraction of attacked images still classified as their true label.
pub fn undefended_accuracy(records: &[AdversarialRecord]) -> f64 {
    records.iter().filter(|r| !r.success).count() as f64 / records.len().max(1) as f64
}

pub fn success_rate(records: &[AdversarialRecord]) -> f64 {
    let attacked: Vec<_> = records.iter().filter(|r| r.clean_prediction == r.original_label).collect();
    attacked.iter().filter(|r| r.success).count() as f64 / attacked.len().max(1) as f64
}
