//! The protected classifier: a two-block CNN trained with cross-entropy.

use std::path::Path;

use fmd_nn::loss::{argmax_rows, softmax, softmax_cross_entropy};
use fmd_nn::{Adam, Archive, LayerSpec, Sequential};
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{ImageSet, NUM_CLASSES, PIXELS, SIDE};
use crate::error::{FmError, Result};
use crate::util::{minibatches, rows};

const INFER_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { epochs: 20, batch_size: 128, learning_rate: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub train_size: usize,
    pub final_loss: f64,
    pub heldout_accuracy: Option<f64>,
}

/// conv3x3(16) - relu - pool - conv3x3(32) - relu - pool - dense(128) - relu - dense(10).
pub fn architecture() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(1, 16, (SIDE, SIDE), 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { channels: 16, height: SIDE, width: SIDE },
        LayerSpec::conv(16, 32, (SIDE / 2, SIDE / 2), 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { channels: 32, height: SIDE / 2, width: SIDE / 2 },
        LayerSpec::Linear { inputs: 32 * 7 * 7, outputs: 128 },
        LayerSpec::Relu,
        LayerSpec::Linear { inputs: 128, outputs: NUM_CLASSES },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetClassifier {
    net: Sequential,
    pub meta: TrainingMeta,
}

/// Train on `train`, then measure accuracy on `heldout` when given.
pub fn train_classifier(
    train: &ImageSet,
    heldout: Option<&ImageSet>,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<TargetClassifier> {
    if train.is_empty() {
        return Err(FmError::Contract("empty training set".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(FmError::Contract("epochs and batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Sequential::new(PIXELS, architecture(), &mut rng)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut grads = net.zero_grads();
    let mut last_finite = None;
    let mut epoch_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in minibatches(train.len(), cfg.batch_size, &mut rng) {
            let x = rows(&train.images, &batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (logits, trace) = net.forward_trace(&x)?;
            let (loss, gy) = softmax_cross_entropy(&logits, &y);
            if !loss.is_finite() {
                return Err(FmError::Training { stage: "classifier", last_finite });
            }
            last_finite = Some(loss as f64);
            total += loss as f64 * batch.len() as f64;
            grads.zero();
            net.backward(&trace, gy, Some(&mut grads), false)?;
            opt.step(net.params_mut(), &grads.slices());
        }
        epoch_loss = total / train.len() as f64;
        log::info!("classifier epoch {}/{}: loss {epoch_loss:.4}", epoch + 1, cfg.epochs);
    }
    let mut clf = TargetClassifier {
        net,
        meta: TrainingMeta {
            epochs: cfg.epochs,
            seed,
            train_size: train.len(),
            final_loss: epoch_loss,
            heldout_accuracy: None,
        },
    };
    if let Some(h) = heldout {
        clf.meta.heldout_accuracy = Some(clf.accuracy(h)?);
    }
    Ok(clf)
}

impl TargetClassifier {
    pub fn from_network(net: Sequential, meta: TrainingMeta) -> Result<Self> {
        if net.input_dim() != PIXELS || net.output_dim() != NUM_CLASSES {
            return Err(FmError::Contract(format!(
                "classifier must map {PIXELS} -> {NUM_CLASSES}, got {} -> {}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(TargetClassifier { net, meta })
    }

    pub fn network(&self) -> &Sequential {
        &self.net
    }

    fn check(&self, x: &Array2<f32>) -> Result<()> {
        if x.ncols() != PIXELS {
            return Err(FmError::Contract(format!("expected {PIXELS} pixels per image, got {}", x.ncols())));
        }
        Ok(())
    }

    pub fn logits(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        self.check(x)?;
        let mut out = Array2::<f32>::zeros((x.nrows(), NUM_CLASSES));
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + INFER_CHUNK).min(x.nrows());
            let y = self.net.forward(&x.slice(s![start..end, ..]).to_owned())?;
            out.slice_mut(s![start..end, ..]).assign(&y);
            start = end;
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Array2<f32>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn accuracy(&self, set: &ImageSet) -> Result<f64> {
        if set.is_empty() {
            return Ok(f64::NAN);
        }
        let pred = self.predict(&set.images)?;
        Ok(pred.iter().zip(&set.labels).filter(|(p, y)| p == y).count() as f64 / set.len() as f64)
    }

    /// Logits and the input gradient of `sum_rows <cotangent(logits), logits>`.
    /// `cotangent` sees the logits and returns the output-side gradient.
    pub fn input_gradient(
        &self,
        x: &Array2<f32>,
        cotangent: impl FnOnce(&Array2<f32>) -> Array2<f32>,
    ) -> Result<(Array2<f32>, Array2<f32>)> {
        self.check(x)?;
        let (logits, trace) = self.net.forward_trace(x)?;
        let gy = cotangent(&logits);
        let gx = self.net.backward(&trace, gy, None, true)?.expect("input gradient requested");
        if gx.iter().any(|v| !v.is_finite()) {
            return Err(FmError::Numeric("non-finite input gradient".into()));
        }
        Ok((logits, gx))
    }

    /// Per-instance gradient of the cross-entropy loss with respect to the
    /// pixels; row `i` is `d loss(x_i, y_i) / d x_i`.
    pub fn loss_gradient(&self, x: &Array2<f32>, y: &[usize]) -> Result<Array2<f32>> {
        if x.nrows() != y.len() {
            return Err(FmError::Contract(format!("{} images but {} labels", x.nrows(), y.len())));
        }
        if let Some(bad) = y.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(FmError::Contract(format!("label {bad} out of range")));
        }
        let (_, gx) = self.input_gradient(x, |logits| {
            let mut p = softmax(logits);
            for (i, &l) in y.iter().enumerate() {
                p[[i, l]] -= 1.0;
            }
            p
        })?;
        Ok(gx)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.put_network("clf", &self.net);
        a.metadata.insert("kind".into(), "classifier".into());
        a.metadata.insert("clf.meta".into(), serde_json::to_string(&self.meta).expect("meta serializes"));
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta("kind")? != "classifier" {
            return Err(FmError::Contract(format!("checkpoint holds a {}, not a classifier", a.meta("kind")?)));
        }
        let meta = serde_json::from_str(a.meta("clf.meta")?)
            .map_err(|e| FmError::Contract(format!("classifier metadata: {e}")))?;
        Self::from_network(a.get_network("clf")?, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
