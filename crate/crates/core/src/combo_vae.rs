//! The combo-VAE: a shared encoder `E_s` with a total-correlation penalty, a
//! DGMM producing class-unique features `z_u` under a Gaussian-mixture
//! prior, a TC discriminator, and a decoder fed `z_s ‖ z_u`.
//!
//! Training runs in two stages. Stage 1 fits the DGMM alone with
//! `L_GM = L_cls + λ_lkd·L_lkd`. Stage 2 freezes it and trains the encoder on
//! `L_R + L_KL + γ·L_TC`, the decoder on `L_R`, and the discriminator on its
//! own two-class loss, one step of each per minibatch.

use std::path::Path;

use fmd_nn::{sigmoid, Adam, Archive, Gradients, LayerSpec, Sequential};
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{ImageSet, NUM_CLASSES, PIXELS, SIDE};
use crate::error::{FmError, Result};
use crate::util::{minibatches, rows};

/// Floor added to every mixture variance.
pub const VARIANCE_FLOOR: f64 = 1e-4;
/// Discriminator logits are clamped to this magnitude so `D(z)` stays
/// strictly inside (0, 1).
pub const LOGIT_CLAMP: f32 = 15.0;
const INFER_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    /// Width `m` of the class-shared code.
    pub latent_dim: usize,
    /// Width `K` of the class-unique code.
    pub feature_dim: usize,
    pub gamma: f32,
    pub lambda_lkd: f32,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub disc_learning_rate: f32,
    pub disc_hidden: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 20,
            feature_dim: 10,
            gamma: 40.0,
            lambda_lkd: 0.1,
            stage1_epochs: 20,
            stage2_epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            disc_learning_rate: 1e-4,
            disc_hidden: 256,
        }
    }
}

/// The encoder/DGMM trunk: four stride-2 4x4 convolutions and two dense
/// layers, ending in `outputs` units.
pub fn encoder_architecture(outputs: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(1, 32, (SIDE, SIDE), 4, 2, 1),
        LayerSpec::Relu,
        LayerSpec::conv(32, 32, (14, 14), 4, 2, 1),
        LayerSpec::Relu,
        LayerSpec::conv(32, 64, (7, 7), 4, 2, 1),
        LayerSpec::Relu,
        LayerSpec::conv(64, 64, (3, 3), 4, 2, 1),
        LayerSpec::Relu,
        LayerSpec::Linear { inputs: 64, outputs: 128 },
        LayerSpec::Relu,
        LayerSpec::Linear { inputs: 128, outputs },
    ]
}

/// Dense layers up to a 64x7x7 map, then two stride-2 transposed
/// convolutions back to 28x28 and a sigmoid.
pub fn decoder_architecture(inputs: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Linear { inputs, outputs: 128 },
        LayerSpec::Relu,
        LayerSpec::Linear { inputs: 128, outputs: 64 * 7 * 7 },
        LayerSpec::Relu,
        LayerSpec::conv_transpose(64, 32, (14, 14), 4, 2, 1),
        LayerSpec::LeakyRelu { slope: 0.2 },
        LayerSpec::conv_transpose(32, 1, (SIDE, SIDE), 4, 2, 1),
        LayerSpec::Sigmoid,
    ]
}

pub fn discriminator_architecture(inputs: usize, hidden: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Linear { inputs, outputs: hidden },
        LayerSpec::LeakyRelu { slope: 0.2 },
        LayerSpec::Linear { inputs: hidden, outputs: hidden },
        LayerSpec::LeakyRelu { slope: 0.2 },
        LayerSpec::Linear { inputs: hidden, outputs: 1 },
    ]
}

// ---------------------------------------------------------------------------
// Scalar losses

/// Closed-form `KL(N(μ, diag(exp(logvar))) || N(0, I))`.
pub fn kl_loss(mu: &[f32], logvar: &[f32]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(FmError::Contract(format!("μ has {} entries, logvar {}", mu.len(), logvar.len())));
    }
    let kl: f64 = mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum();
    if !kl.is_finite() {
        return Err(FmError::Numeric("non-finite KL divergence".into()));
    }
    // exp(lv) - 1 - lv >= 0 analytically; clear rounding residue.
    Ok(kl.max(0.0))
}

/// Summed squared error between an image and its reconstruction.
pub fn reconstruction_loss(x: &[f32], x_rec: &[f32]) -> Result<f64> {
    if x.len() != x_rec.len() {
        return Err(FmError::Contract(format!("shapes differ: {} vs {}", x.len(), x_rec.len())));
    }
    Ok(x.iter().zip(x_rec).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum())
}

/// Shuffle every column of `z` independently across the batch, sampling
/// from the product of the marginals.
pub fn permute_dims<R: Rng + ?Sized>(z: &Array2<f32>, rng: &mut R) -> Result<Array2<f32>> {
    if z.nrows() < 2 {
        return Err(FmError::Contract(format!("permute_dims needs a batch of at least 2, got {}", z.nrows())));
    }
    let mut out = z.clone();
    let mut order: Vec<usize> = (0..z.nrows()).collect();
    for mut col in out.columns_mut() {
        order.shuffle(rng);
        let src = col.to_vec();
        for (dst, &o) in col.iter_mut().zip(&order) {
            *dst = src[o];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gaussian mixture prior

/// Per-class diagonal Gaussians with a uniform class prior.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    /// `(C, K)` component means.
    pub means: Array2<f32>,
    /// `(C, K)` unconstrained log-variances; `Σ = VARIANCE_FLOOR + exp(s)`.
    pub log_var: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmLosses {
    pub cls: f64,
    pub lkd: f64,
    pub gm: f64,
    pub posterior: Vec<f64>,
}

impl GaussianMixture {
    pub fn new<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Self {
        GaussianMixture {
            means: Array2::from_shape_fn((classes, dim), |_| rng.sample::<f32, _>(StandardNormal)),
            log_var: Array2::zeros((classes, dim)),
        }
    }

    pub fn classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn variance(&self, c: usize, k: usize) -> f64 {
        VARIANCE_FLOOR + (self.log_var[[c, k]] as f64).exp()
    }

    /// `log N(z; μ_c, Σ_c)` for every class.
    pub fn log_densities(&self, z: ArrayView1<f32>) -> Vec<f64> {
        (0..self.classes())
            .map(|c| {
                (0..self.dim())
                    .map(|k| {
                        let var = self.variance(c, k);
                        let d = z[k] as f64 - self.means[[c, k]] as f64;
                        -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
                    })
                    .sum()
            })
            .collect()
    }

    /// `q(c | z)` under the uniform prior.
    pub fn posterior(&self, z: ArrayView1<f32>) -> Vec<f64> {
        let a = self.log_densities(z);
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        e.into_iter().map(|v| v / sum).collect()
    }

    pub fn most_likely(&self, z: ArrayView1<f32>) -> usize {
        let a = self.log_densities(z);
        (0..a.len()).fold(0, |best, c| if a[c] > a[best] { c } else { best })
    }
}

/// `L_cls`, `L_lkd` and `L_GM` for one feature vector and label.
pub fn gm_losses(mix: &GaussianMixture, z_u: ArrayView1<f32>, y: usize, lambda_lkd: f64) -> Result<GmLosses> {
    if y >= mix.classes() {
        return Err(FmError::Contract(format!("label {y} with {} mixture components", mix.classes())));
    }
    if z_u.len() != mix.dim() {
        return Err(FmError::Contract(format!("z_u has {} entries, mixture {}", z_u.len(), mix.dim())));
    }
    let a = mix.log_densities(z_u);
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let cls = lse - a[y];
    let lkd = -a[y];
    if !cls.is_finite() || !lkd.is_finite() {
        return Err(FmError::Numeric("non-finite mixture loss".into()));
    }
    let posterior = a.iter().map(|v| (v - lse).exp()).collect();
    Ok(GmLosses { cls, lkd, gm: cls + lambda_lkd * lkd, posterior })
}

/// Batch-mean `L_GM` with gradients for `z` (rows), the means and the
/// log-variances.
fn gm_batch_gradients(
    mix: &GaussianMixture,
    z: &Array2<f32>,
    y: &[usize],
    lambda_lkd: f64,
) -> Result<(f64, Array2<f32>, Array2<f32>, Array2<f32>)> {
    let (c_n, k_n) = (mix.classes(), mix.dim());
    let n = z.nrows() as f64;
    let mut gz = Array2::<f32>::zeros(z.dim());
    let mut gmu = Array2::<f64>::zeros((c_n, k_n));
    let mut gs = Array2::<f64>::zeros((c_n, k_n));
    let mut total = 0.0;
    for (i, &label) in y.iter().enumerate() {
        let zi = z.row(i);
        let l = gm_losses(mix, zi, label, lambda_lkd)?;
        total += l.gm;
        for c in 0..c_n {
            // dL/da_c for a_c = log N(z; μ_c, Σ_c).
            let mut w = l.posterior[c];
            if c == label {
                w -= 1.0 + lambda_lkd;
            }
            w /= n;
            for k in 0..k_n {
                let var = mix.variance(c, k);
                let d = zi[k] as f64 - mix.means[[c, k]] as f64;
                gz[[i, k]] += (w * (-d / var)) as f32;
                gmu[[c, k]] += w * d / var;
                let da_dvar = -0.5 * (1.0 / var - d * d / (var * var));
                gs[[c, k]] += w * da_dvar * (var - VARIANCE_FLOOR);
            }
        }
    }
    Ok((total / n, gz, gmu.mapv(|v| v as f32), gs.mapv(|v| v as f32)))
}

// ---------------------------------------------------------------------------
// DGMM

#[derive(Clone, Debug, PartialEq)]
pub struct Dgmm {
    pub net: Sequential,
    pub mixture: GaussianMixture,
}

impl Dgmm {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Dgmm {
            net: Sequential::new(PIXELS, encoder_architecture(feature_dim), rng)?,
            mixture: GaussianMixture::new(NUM_CLASSES, feature_dim, rng),
        })
    }

    /// Deterministic class-unique features `z_u`.
    pub fn features(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        chunked(&self.net, x)
    }

    pub fn classify(&self, x: &Array2<f32>) -> Result<Vec<usize>> {
        let z = self.features(x)?;
        Ok(z.rows().into_iter().map(|r| self.mixture.most_likely(r)).collect())
    }

    pub fn accuracy(&self, set: &ImageSet) -> Result<f64> {
        let pred = self.classify(&set.images)?;
        Ok(pred.iter().zip(&set.labels).filter(|(p, y)| p == y).count() as f64 / set.len().max(1) as f64)
    }
}

fn chunked(net: &Sequential, x: &Array2<f32>) -> Result<Array2<f32>> {
    let mut out = Array2::<f32>::zeros((x.nrows(), net.output_dim()));
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + INFER_CHUNK).min(x.nrows());
        let y = net.forward(&x.slice(s![start..end, ..]).to_owned())?;
        out.slice_mut(s![start..end, ..]).assign(&y);
        start = end;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// TC discriminator

#[derive(Clone, Debug, PartialEq)]
pub struct TcDiscriminator {
    pub net: Sequential,
}

impl TcDiscriminator {
    /// The output layer starts at zero, so an untrained discriminator says
    /// `D = 0.5` everywhere.
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let net = Sequential::new(latent_dim, discriminator_architecture(latent_dim, hidden), rng)?;
        let mut layers = net.layers().to_vec();
        let last = layers.last_mut().expect("non-empty");
        last.weight.iter_mut().for_each(|w| *w = 0.0);
        Ok(TcDiscriminator { net: Sequential::from_layers(latent_dim, layers)? })
    }

    /// Clamped logits `log D/(1-D)`, one per row.
    pub fn logits(&self, z: &Array2<f32>) -> Result<Array1<f32>> {
        Ok(self.net.forward(z)?.column(0).mapv(|v| v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
    }

    pub fn probabilities(&self, z: &Array2<f32>) -> Result<Array1<f32>> {
        Ok(self.logits(z)?.mapv(sigmoid))
    }

    /// Fraction of joint rows with `D > 0.5` and product-of-marginals rows
    /// with `D <= 0.5`.
    pub fn accuracy(&self, joint: &Array2<f32>, permuted: &Array2<f32>) -> Result<f64> {
        let a = self.logits(joint)?.iter().filter(|&&l| l > 0.0).count();
        let b = self.logits(permuted)?.iter().filter(|&&l| l <= 0.0).count();
        Ok((a + b) as f64 / (joint.nrows() + permuted.nrows()) as f64)
    }

    /// Input gradient of `scale · Σ_rows logit(z)`, respecting the clamp.
    fn logit_input_gradient(&self, z: &Array2<f32>, scale: f32) -> Result<(Array1<f32>, Array2<f32>)> {
        let (raw, trace) = self.net.forward_trace(z)?;
        let gy = raw.mapv(|v| if v.abs() < LOGIT_CLAMP { scale } else { 0.0 });
        let gz = self.net.backward(&trace, gy, None, true)?.expect("input gradient requested");
        Ok((raw.column(0).mapv(|v| v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)), gz))
    }
}

/// `L_TC ≈ mean_z log(D(z) / (1 - D(z)))`.
pub fn tc_estimate(disc: &TcDiscriminator, z: &Array2<f32>) -> Result<f64> {
    let l = disc.logits(z)?;
    let v = l.iter().map(|&v| v as f64).sum::<f64>() / l.len().max(1) as f64;
    if !v.is_finite() {
        return Err(FmError::Numeric("non-finite TC estimate".into()));
    }
    Ok(v)
}

/// One Adam step on `-(1/2|B|)[Σ log D(z) + Σ log(1 - D(permute_dims(z')))]`
/// with `z` the joint batch and `z'` a second batch. Returns the loss before
/// the step.
pub fn tc_discriminator_step<R: Rng + ?Sized>(
    disc: &mut TcDiscriminator,
    opt: &mut Adam,
    joint: &Array2<f32>,
    other: &Array2<f32>,
    rng: &mut R,
) -> Result<f64> {
    let permuted = permute_dims(other, rng)?;
    let (n_j, n_p) = (joint.nrows(), permuted.nrows());
    let mut both = Array2::<f32>::zeros((n_j + n_p, joint.ncols()));
    both.slice_mut(s![..n_j, ..]).assign(joint);
    both.slice_mut(s![n_j.., ..]).assign(&permuted);
    let (raw, trace) = disc.net.forward_trace(&both)?;
    let mut loss = 0.0f64;
    let mut gy = Array2::<f32>::zeros(raw.dim());
    for i in 0..n_j + n_p {
        let l = raw[[i, 0]];
        let lc = l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP) as f64;
        let inside = l.abs() < LOGIT_CLAMP;
        let (count, joint_row) = if i < n_j { (n_j, true) } else { (n_p, false) };
        let w = 0.5 / count as f64;
        // -log D = softplus(-l); -log(1-D) = softplus(l).
        let d = 1.0 / (1.0 + (-lc).exp());
        if joint_row {
            loss += w * softplus(-lc);
            gy[[i, 0]] = if inside { (-w * (1.0 - d)) as f32 } else { 0.0 };
        } else {
            loss += w * softplus(lc);
            gy[[i, 0]] = if inside { (w * d) as f32 } else { 0.0 };
        }
    }
    if !loss.is_finite() {
        return Err(FmError::Numeric("non-finite discriminator loss".into()));
    }
    let mut grads = disc.net.zero_grads();
    disc.net.backward(&trace, gy, Some(&mut grads), false)?;
    opt.step(disc.net.params_mut(), &grads.slices());
    Ok(loss)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// The combined model

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Untrained,
    Dgmm,
    Full,
}

/// Output of the shared encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedCode {
    pub mu: Array2<f32>,
    pub logvar: Array2<f32>,
    /// `μ` in deterministic mode, otherwise `μ + exp(logvar/2)·ϵ`.
    pub z: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComboVae {
    pub config: VaeConfig,
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub discriminator: TcDiscriminator,
    pub dgmm: Dgmm,
    pub stage: Stage,
}

/// Batch-mean stage-2 losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Losses {
    pub reconstruction: f64,
    pub kl: f64,
    pub tc: f64,
}

impl Stage2Losses {
    pub fn encoder_objective(&self, gamma: f64) -> f64 {
        self.reconstruction + self.kl + gamma * self.tc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub epoch_losses: Vec<f64>,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub epoch_losses: Vec<Stage2Losses>,
    pub disc_losses: Vec<f64>,
    /// Median per-image `L_R` on held-out data after each epoch.
    pub heldout_reconstruction: Vec<f64>,
}

impl ComboVae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || config.feature_dim == 0 {
            return Err(FmError::Contract("latent and feature dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = config.latent_dim;
        Ok(ComboVae {
            encoder: Sequential::new(PIXELS, encoder_architecture(2 * m), &mut rng)?,
            decoder: Sequential::new(m + config.feature_dim, decoder_architecture(m + config.feature_dim), &mut rng)?,
            discriminator: TcDiscriminator::new(m, config.disc_hidden, &mut rng)?,
            dgmm: Dgmm::new(config.feature_dim, &mut rng)?,
            stage: Stage::Untrained,
            config,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn require(&self, stage: Stage) -> Result<()> {
        let ok = match stage {
            Stage::Untrained => true,
            Stage::Dgmm => self.stage != Stage::Untrained,
            Stage::Full => self.stage == Stage::Full,
        };
        if ok {
            Ok(())
        } else {
            Err(FmError::State(format!("combo-VAE is at stage {:?}, {stage:?} required", self.stage)))
        }
    }

    /// `(μ, logvar, z_s)`; deterministic (`z_s = μ`) when `rng` is `None`.
    pub fn encode_shared(&self, x: &Array2<f32>, rng: Option<&mut dyn RngCore>) -> Result<SharedCode> {
        let m = self.latent_dim();
        let out = chunked(&self.encoder, x)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(FmError::Numeric("non-finite encoder output".into()));
        }
        let mu = out.slice(s![.., ..m]).to_owned();
        let logvar = out.slice(s![.., m..]).to_owned();
        let z = match rng {
            None => mu.clone(),
            Some(rng) => {
                let eps = Array2::from_shape_fn(mu.dim(), |_| rng.sample::<f32, _>(StandardNormal));
                &mu + &(logvar.mapv(|v| (0.5 * v).exp()) * &eps)
            }
        };
        Ok(SharedCode { mu, logvar, z })
    }

    pub fn encode_unique(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        self.require(Stage::Dgmm)?;
        self.dgmm.features(x)
    }

    pub fn decode(&self, z_s: &Array2<f32>, z_u: &Array2<f32>) -> Result<Array2<f32>> {
        if z_s.nrows() != z_u.nrows() || z_s.ncols() != self.latent_dim() || z_u.ncols() != self.config.feature_dim {
            return Err(FmError::Contract(format!(
                "decode expects ({}, {}) and ({}, {}) codes",
                z_s.nrows(),
                self.latent_dim(),
                z_s.nrows(),
                self.config.feature_dim
            )));
        }
        chunked(&self.decoder, &concat(z_s, z_u))
    }

    /// Decode from deterministic `z_s = μ` and the DGMM features.
    pub fn reconstruct(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        self.require(Stage::Full)?;
        let code = self.encode_shared(x, None)?;
        let z_u = self.dgmm.features(x)?;
        self.decode(&code.z, &z_u)
    }

    /// Images decoded while code `code` of `x`'s latent takes each of
    /// `values` (one row per value).
    pub fn traversal(&self, x: ArrayView1<f32>, code: usize, values: &[f32]) -> Result<Array2<f32>> {
        self.require(Stage::Full)?;
        if code >= self.latent_dim() {
            return Err(FmError::Contract(format!("code {code} out of range 0..{}", self.latent_dim())));
        }
        let x = x.to_owned().insert_axis(Axis(0));
        let base = self.encode_shared(&x, None)?.z;
        let zu = self.dgmm.features(&x)?;
        let mut zs = Array2::<f32>::zeros((values.len(), self.latent_dim()));
        for (mut row, &v) in zs.rows_mut().into_iter().zip(values) {
            row.assign(&base.row(0));
            row[code] = v;
        }
        let zu = zu.broadcast((values.len(), self.config.feature_dim)).unwrap().to_owned();
        self.decode(&zs, &zu)
    }

    // -- stage 1 -----------------------------------------------------------

    pub fn train_stage1_dgmm(
        &mut self,
        train: &ImageSet,
        heldout: Option<&ImageSet>,
        seed: u64,
    ) -> Result<Stage1Report> {
        if train.is_empty() {
            return Err(FmError::Contract("empty training set".into()));
        }
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt_net = Adam::new(cfg.learning_rate);
        let mut opt_mix = Adam::new(cfg.learning_rate);
        let mut grads = self.dgmm.net.zero_grads();
        let mut last_finite = None;
        let mut epoch_losses = Vec::new();
        for epoch in 0..cfg.stage1_epochs {
            let mut total = 0.0;
            for batch in minibatches(train.len(), cfg.batch_size, &mut rng) {
                let x = rows(&train.images, &batch);
                let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
                let (z, trace) = self.dgmm.net.forward_trace(&x)?;
                let (loss, gz, gmu, gs) = match gm_batch_gradients(&self.dgmm.mixture, &z, &y, cfg.lambda_lkd as f64) {
                    Ok(v) if v.0.is_finite() => v,
                    _ => return Err(FmError::Training { stage: "dgmm", last_finite }),
                };
                last_finite = Some(loss);
                total += loss * batch.len() as f64;
                grads.zero();
                self.dgmm.net.backward(&trace, gz, Some(&mut grads), false)?;
                opt_net.step(self.dgmm.net.params_mut(), &grads.slices());
                let mix = &mut self.dgmm.mixture;
                opt_mix.step(
                    vec![mix.means.as_slice_mut().unwrap(), mix.log_var.as_slice_mut().unwrap()],
                    &[gmu.as_slice().unwrap(), gs.as_slice().unwrap()],
                );
            }
            let mean = total / train.len() as f64;
            log::info!("dgmm epoch {}/{}: L_GM {mean:.4}", epoch + 1, cfg.stage1_epochs);
            epoch_losses.push(mean);
        }
        self.stage = Stage::Dgmm;
        let heldout_accuracy = heldout.map(|h| self.dgmm.accuracy(h)).transpose()?;
        Ok(Stage1Report { epoch_losses, heldout_accuracy })
    }

    // -- stage 2 -----------------------------------------------------------

    /// Stage-2 losses and gradients for one batch with fixed noise `eps`.
    /// Encoder gradients include `γ·L_TC` through the frozen discriminator;
    /// decoder gradients are those of `L_R` alone. Returns the sampled
    /// `z_s` as well, which the discriminator step consumes.
    pub fn stage2_gradients(
        &self,
        x: &Array2<f32>,
        z_u: &Array2<f32>,
        eps: &Array2<f32>,
        gamma: f32,
    ) -> Result<(Stage2Losses, Gradients, Gradients, Array2<f32>)> {
        let m = self.latent_dim();
        let n = x.nrows();
        let nf = n as f32;
        let (enc_out, enc_trace) = self.encoder.forward_trace(x)?;
        let mu = enc_out.slice(s![.., ..m]);
        let logvar = enc_out.slice(s![.., m..]);
        let std = logvar.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std * eps);

        let (x_rec, dec_trace) = self.decoder.forward_trace(&concat(&z, z_u))?;
        let diff = &x_rec - x;
        let rec = diff.iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>() / n as f64;
        let kl = mu
            .iter()
            .zip(logvar.iter())
            .map(|(&a, &b)| 0.5 * ((a * a) as f64 + (b as f64).exp() - 1.0 - b as f64))
            .sum::<f64>()
            / n as f64;

        let mut dec_grads = self.decoder.zero_grads();
        let g_in = self
            .decoder
            .backward(&dec_trace, diff.mapv(|d| 2.0 * d / nf), Some(&mut dec_grads), true)?
            .expect("input gradient requested");
        let mut gz = g_in.slice(s![.., ..m]).to_owned();

        let (tc_logits, g_tc) = self.discriminator.logit_input_gradient(&z, gamma / nf)?;
        let tc = tc_logits.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        if gamma != 0.0 {
            gz += &g_tc;
        }

        let mut g_enc = Array2::<f32>::zeros(enc_out.dim());
        {
            let (mut g_mu, mut g_lv) = g_enc.multi_slice_mut((s![.., ..m], s![.., m..]));
            g_mu.assign(&(&gz + &mu.mapv(|v| v / nf)));
            // dz/dlogvar = ½·std·ϵ; dKL/dlogvar = ½(exp(logvar) - 1).
            let from_z = &gz * &std * eps * 0.5;
            let from_kl = logvar.mapv(|v| 0.5 * (v.exp() - 1.0) / nf);
            g_lv.assign(&(from_z + from_kl));
        }
        let mut enc_grads = self.encoder.zero_grads();
        self.encoder.backward(&enc_trace, g_enc, Some(&mut enc_grads), false)?;
        let losses = Stage2Losses { reconstruction: rec, kl, tc };
        if !(rec.is_finite() && kl.is_finite() && tc.is_finite()) || !enc_grads.is_finite() {
            return Err(FmError::Numeric("non-finite stage-2 loss or gradient".into()));
        }
        Ok((losses, enc_grads, dec_grads, z))
    }

    /// Train encoder, decoder and discriminator with the DGMM frozen.
    pub fn train_stage2(&mut self, train: &ImageSet, heldout: Option<&ImageSet>, seed: u64) -> Result<Stage2Report> {
        self.require(Stage::Dgmm)?;
        if train.len() < 2 {
            return Err(FmError::Contract("stage 2 needs at least two training images".into()));
        }
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z_u_all = self.dgmm.features(&train.images)?;
        let heldout_zu = heldout.map(|h| self.dgmm.features(&h.images)).transpose()?;
        let mut opt_enc = Adam::new(cfg.learning_rate);
        let mut opt_dec = Adam::new(cfg.learning_rate);
        let mut opt_disc = Adam::with_betas(cfg.disc_learning_rate, 0.5, 0.9);
        let mut report =
            Stage2Report { epoch_losses: Vec::new(), disc_losses: Vec::new(), heldout_reconstruction: Vec::new() };
        let mut previous_z: Option<Array2<f32>> = None;
        let mut last_finite = None;
        for epoch in 0..cfg.stage2_epochs {
            let mut sums = Stage2Losses { reconstruction: 0.0, kl: 0.0, tc: 0.0 };
            let mut disc_sum = 0.0;
            let mut disc_steps = 0usize;
            for batch in minibatches(train.len(), cfg.batch_size, &mut rng) {
                let x = rows(&train.images, &batch);
                let z_u = rows(&z_u_all, &batch);
                let eps =
                    Array2::from_shape_fn((batch.len(), cfg.latent_dim), |_| rng.sample::<f32, _>(StandardNormal));
                let (losses, enc_g, dec_g, z) = match self.stage2_gradients(&x, &z_u, &eps, cfg.gamma) {
                    Ok(v) => v,
                    Err(FmError::Numeric(_)) => return Err(FmError::Training { stage: "stage 2", last_finite }),
                    Err(e) => return Err(e),
                };
                last_finite = Some(losses.encoder_objective(cfg.gamma as f64));
                opt_enc.step(self.encoder.params_mut(), &enc_g.slices());
                opt_dec.step(self.decoder.params_mut(), &dec_g.slices());
                let b = batch.len() as f64;
                sums.reconstruction += losses.reconstruction * b;
                sums.kl += losses.kl * b;
                sums.tc += losses.tc * b;
                // The previous batch's codes serve as the independent second
                // batch for the product-of-marginals samples.
                if let Some(prev) = previous_z.as_ref().filter(|p| p.nrows() >= 2) {
                    disc_sum += tc_discriminator_step(&mut self.discriminator, &mut opt_disc, &z, prev, &mut rng)?;
                    disc_steps += 1;
                }
                previous_z = Some(z);
            }
            let n = train.len() as f64;
            let epoch_losses =
                Stage2Losses { reconstruction: sums.reconstruction / n, kl: sums.kl / n, tc: sums.tc / n };
            report.epoch_losses.push(epoch_losses);
            report.disc_losses.push(disc_sum / disc_steps.max(1) as f64);
            if let (Some(h), Some(zu)) = (heldout, heldout_zu.as_ref()) {
                let code = self.encode_shared(&h.images, None)?;
                let rec = self.decode(&code.z, zu)?;
                let mut per: Vec<f64> = (0..h.len())
                    .map(|i| reconstruction_loss(h.images.row(i).as_slice().unwrap(), rec.row(i).as_slice().unwrap()))
                    .collect::<Result<_>>()?;
                report.heldout_reconstruction.push(crate::util::median(&mut per).unwrap_or(f64::NAN));
            }
            log::info!(
                "stage 2 epoch {}/{}: L_R {:.3} L_KL {:.3} L_TC {:.3} disc {:.4}",
                epoch + 1,
                cfg.stage2_epochs,
                epoch_losses.reconstruction,
                epoch_losses.kl,
                epoch_losses.tc,
                report.disc_losses.last().unwrap()
            );
        }
        self.stage = Stage::Full;
        Ok(report)
    }

    // -- persistence ---------------------------------------------------------

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.put_network("enc", &self.encoder);
        a.put_network("dec", &self.decoder);
        a.put_network("disc", &self.discriminator.net);
        a.put_network("dgmm", &self.dgmm.net);
        let mix = &self.dgmm.mixture;
        a.insert("dgmm.means", vec![mix.classes(), mix.dim()], mix.means.iter().cloned().collect());
        a.insert("dgmm.log_var", vec![mix.classes(), mix.dim()], mix.log_var.iter().cloned().collect());
        a.metadata.insert("kind".into(), "combo_vae".into());
        a.metadata.insert("vae.config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        a.metadata.insert("vae.stage".into(), serde_json::to_string(&self.stage).expect("stage serializes"));
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta("kind")? != "combo_vae" {
            return Err(FmError::Contract(format!("checkpoint holds a {}, not a combo-VAE", a.meta("kind")?)));
        }
        let bad = |e: serde_json::Error| FmError::Contract(format!("combo-VAE metadata: {e}"));
        let config: VaeConfig = serde_json::from_str(a.meta("vae.config")?).map_err(bad)?;
        let stage: Stage = serde_json::from_str(a.meta("vae.stage")?).map_err(bad)?;
        let tensor = |name: &str| -> Result<Array2<f32>> {
            let (shape, data) = a.tensor(name)?;
            Array2::from_shape_vec((shape[0], shape[1]), data.clone())
                .map_err(|e| FmError::Contract(format!("{name}: {e}")))
        };
        Ok(ComboVae {
            encoder: a.get_network("enc")?,
            decoder: a.get_network("dec")?,
            discriminator: TcDiscriminator { net: a.get_network("disc")? },
            dgmm: Dgmm {
                net: a.get_network("dgmm")?,
                mixture: GaussianMixture { means: tensor("dgmm.means")?, log_var: tensor("dgmm.log_var")? },
            },
            stage,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn concat(a: &Array2<f32>, b: &Array2<f32>) -> Array2<f32> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts match")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_loss(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
        assert!((kl_loss(&[1.0, 0.0, 0.0], &[0.0; 3]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_sums_squares() {
        assert_eq!(reconstruction_loss(&[0.0; PIXELS], &[1.0; PIXELS]).unwrap(), 784.0);
        assert!(reconstruction_loss(&[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn permute_dims_rejects_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(permute_dims(&Array2::zeros((1, 3)), &mut rng).is_err());
    }

    #[test]
    fn untrained_discriminator_is_indifferent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = TcDiscriminator::new(5, 16, &mut rng).unwrap();
        let z = Array2::from_shape_fn((8, 5), |_| rng.sample::<f32, _>(StandardNormal));
        assert_eq!(tc_estimate(&d, &z).unwrap(), 0.0);
        assert!(d.probabilities(&z).unwrap().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn reconstruct_requires_training() {
        let vae = ComboVae::new(VaeConfig { latent_dim: 3, feature_dim: 2, ..Default::default() }, 0).unwrap();
        assert!(matches!(vae.reconstruct(&Array2::zeros((1, PIXELS))), Err(FmError::State(_))));
    }
}
