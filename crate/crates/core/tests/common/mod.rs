//! Independent oracles shared by the property suites and the acceptance
//! target. Each returns a short detail line on success.
#![allow(dead_code)]

use fm_defense::classifier::{architecture, TargetClassifier, TrainingMeta};
use fm_defense::combo_vae::{
    gm_losses, kl_loss, permute_dims, tc_discriminator_step, ComboVae, GaussianMixture, Stage, TcDiscriminator,
    VaeConfig,
};
use fm_defense::datasets::{synthetic_corpus, PIXELS};
use fm_defense::detector::{
    calibrate_thresholds, detect, generate_morphs, ranges_from_latents, MorphSearchConfig, ResistanceEngine,
    ResistanceVector, ThresholdConfig, ThresholdMode, Verdict,
};
use fm_defense::pipeline::{evaluate_outcome, InstanceOutcome};
use fm_defense::purifier::{calibrate_distance_threshold, distance, triage, Triage};
use fmd_nn::{Adam, Sequential};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Resistance on the 100-morph grid, so ties with thresholds are common.
pub fn grid_value<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(0..=100) as f64
}

pub fn rv_of(r: Vec<f64>, prediction: usize) -> ResistanceVector {
    ResistanceVector {
        codes: (0..r.len()).collect(),
        morph_predictions: vec![String::new(); r.len()],
        r,
        prediction,
        morph_count: 100,
    }
}

pub fn per_code(theta: Vec<f64>) -> ThresholdConfig {
    let mut t = ThresholdConfig::unified((0..theta.len()).collect(), 0.0);
    t.theta_r = theta;
    t.mode = ThresholdMode::PerCode;
    t
}

/// Distance against `Σ max(θ - r, 0)` computed by index.
pub fn distance_vs_bruteforce(pairs: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut ties = 0;
    for _ in 0..pairs {
        let m = rng.random_range(1..=12);
        let r: Vec<f64> = (0..m).map(|_| grid_value(&mut rng)).collect();
        let theta: Vec<f64> = (0..m).map(|_| grid_value(&mut rng)).collect();
        let mut brute = 0.0;
        for i in 0..m {
            if theta[i] - r[i] > 0.0 {
                brute += theta[i] - r[i];
            }
            ties += usize::from(theta[i] == r[i]);
        }
        let d = distance(&rv_of(r.clone(), 0), &per_code(theta.clone())).map_err(|e| e.to_string())?;
        if (d - brute).abs() > 1e-9 {
            return Err(format!("r {r:?} theta {theta:?}: distance {d} vs brute force {brute}"));
        }
    }
    Ok(format!("{pairs} pairs agree ({ties} tied components)"))
}

/// Closed-form KL against a Monte-Carlo estimate of `E_q[log q - log p]`.
pub fn kl_vs_monte_carlo(configs: usize, samples: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let k = rng.random_range(2..=6);
        let mu: Vec<f32> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lv: Vec<f32> = (0..k).map(|_| rng.random_range(-1.5..1.0)).collect();
        let closed = kl_loss(&mu, &lv).map_err(|e| e.to_string())?;
        let mut acc = 0.0;
        for _ in 0..samples {
            let mut log_ratio = 0.0;
            for j in 0..k {
                let (m, v) = (mu[j] as f64, (lv[j] as f64).exp());
                let z = m + v.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let log_q = -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (z - m).powi(2) / v);
                let log_p = -0.5 * ((2.0 * std::f64::consts::PI).ln() + z * z);
                log_ratio += log_q - log_p;
            }
            acc += log_ratio;
        }
        let mc = acc / samples as f64;
        let rel = (mc - closed).abs() / closed;
        worst = worst.max(rel);
        if rel > 0.02 {
            return Err(format!("μ {mu:?} logvar {lv:?}: closed {closed:.5} vs MC {mc:.5}"));
        }
    }
    Ok(format!("{configs} configurations, worst relative error {:.3}%", 100.0 * worst))
}

/// Mixture losses against densities evaluated directly (no log-space).
pub fn gm_losses_vs_density_ratio(configs: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let (c_n, k) = (rng.random_range(2..=10), rng.random_range(1..=4));
        let mut mix = GaussianMixture::new(c_n, k, &mut rng);
        mix.log_var.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let z = Array1::from_shape_fn(k, |_| rng.random_range(-1.5f32..1.5));
        let y = rng.random_range(0..c_n);
        let lambda = rng.random_range(0.0..1.0);
        let dens: Vec<f64> = (0..c_n)
            .map(|c| {
                (0..k)
                    .map(|j| {
                        let var = mix.variance(c, j);
                        let d = z[j] as f64 - mix.means[[c, j]] as f64;
                        (-d * d / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
                    })
                    .product()
            })
            .collect();
        let total: f64 = dens.iter().sum();
        let cls = -(dens[y] / total).ln();
        let lkd = -dens[y].ln();
        let l = gm_losses(&mix, z.view(), y, lambda).map_err(|e| e.to_string())?;
        let errs = [
            (l.cls - cls).abs(),
            (l.lkd - lkd).abs(),
            (l.gm - (cls + lambda * lkd)).abs(),
            (l.posterior[y] - dens[y] / total).abs(),
        ];
        let e = errs.iter().cloned().fold(0.0, f64::max);
        worst = worst.max(e);
        if e > 1e-6 {
            return Err(format!("C={c_n} K={k} y={y}: errors {errs:?}"));
        }
    }
    Ok(format!("{configs} mixtures, worst absolute error {worst:.2e}"))
}

/// Every column of `permute_dims(z)` is a rearrangement of the same column of `z`.
pub fn permute_dims_preserves_columns(trials: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut moved = 0;
    for _ in 0..trials {
        let (n, k) = (rng.random_range(2..40), rng.random_range(1..8));
        let z = Array2::from_shape_fn((n, k), |_| rng.random_range(-3i32..4) as f32);
        let p = permute_dims(&z, &mut rng).map_err(|e| e.to_string())?;
        for j in 0..k {
            let mut a = z.column(j).to_vec();
            let mut b = p.column(j).to_vec();
            moved += usize::from(a != b);
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            if a != b {
                return Err(format!("column {j} changed its multiset"));
            }
        }
    }
    Ok(format!("{trials} batches, {moved} columns reordered"))
}

/// Largest grid threshold with false-positive fraction at most `1 - rho`,
/// found by scanning the grid.
pub fn threshold_by_scan(values: &[f64], rho: f64, morphs: usize) -> f64 {
    let n = values.len() as f64;
    let mut best = 0.0;
    for k in 0..=morphs {
        let theta = 100.0 * k as f64 / morphs as f64;
        let flagged = values.iter().filter(|&&v| v <= theta).count() as f64;
        if flagged <= (1.0 - rho) * n + 1e-9 {
            best = theta;
        }
    }
    best
}

fn val_sample<R: Rng>(rng: &mut R, n: usize, m: usize) -> Vec<ResistanceVector> {
    (0..n)
        .map(|_| {
            // Clean resistance clusters near the top with a low tail.
            let r = (0..m)
                .map(|_| if rng.random_bool(0.1) { grid_value(rng) } else { rng.random_range(80..=100) as f64 })
                .collect();
            rv_of(r, 0)
        })
        .collect()
}

/// Calibration matches a grid scan; θ is non-increasing in ρ, θ_d is
/// non-decreasing in η, SUSPICIOUS sets grow with θ and SALVAGEABLE sets
/// grow with θ_d.
pub fn monotonicity(trials: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let rhos = [0.5, 0.8, 0.9, 0.95, 0.99, 0.999];
    for _ in 0..trials {
        let m = rng.random_range(1..5);
        let n = rng.random_range(20..300);
        let val = val_sample(&mut rng, n, m);
        for mode in [ThresholdMode::PerCode, ThresholdMode::Unified] {
            let mut prev: Option<Vec<f64>> = None;
            for &rho in &rhos {
                let tc = calibrate_thresholds(&val, rho, mode).map_err(|e| e.to_string())?;
                for j in 0..m {
                    let values: Vec<f64> = match mode {
                        ThresholdMode::PerCode => val.iter().map(|v| v.r[j]).collect(),
                        ThresholdMode::Unified => val.iter().map(ResistanceVector::min).collect(),
                    };
                    let scan = threshold_by_scan(&values, rho, 100);
                    if tc.theta_r[j] != scan {
                        return Err(format!("{mode:?} rho {rho}: θ {} vs scan {scan}", tc.theta_r[j]));
                    }
                }
                if let Some(p) = &prev {
                    if tc.theta_r.iter().zip(p).any(|(t, p)| t > p) {
                        return Err(format!("θ rose from {p:?} to {:?} at rho {rho}", tc.theta_r));
                    }
                }
                prev = Some(tc.theta_r);
            }
        }
        let dists: Vec<f64> = (0..rng.random_range(1..200)).map(|_| rng.random_range(0.0..50.0)).collect();
        let mut last = f64::NEG_INFINITY;
        for eta in (1..=100).map(f64::from) {
            let d = calibrate_distance_threshold(&dists, eta).map_err(|e| e.to_string())?;
            if d < last {
                return Err(format!("θ_d fell to {d} at eta {eta}"));
            }
            last = d;
        }
        for v in &val {
            let mut was_suspicious = false;
            for theta in (0..=100).map(f64::from) {
                let s = detect(v, &ThresholdConfig::unified(v.codes.clone(), theta)).map_err(|e| e.to_string())?
                    == Verdict::Suspicious;
                if was_suspicious && !s {
                    return Err(format!("{:?} left SUSPICIOUS at θ {theta}", v.r));
                }
                was_suspicious = s;
            }
            let tc = per_code((0..m).map(|_| grid_value(&mut rng)).collect());
            let mut was_salvageable = false;
            for td in [0.0, 1.0, 5.0, 20.0, 50.0, 100.0, 400.0, f64::INFINITY] {
                let s = triage(v, &tc, td).map_err(|e| e.to_string())?.0 == Triage::Salvageable;
                if was_salvageable && !s {
                    return Err(format!("{:?} left SALVAGEABLE at θ_d {td}", v.r));
                }
                was_salvageable = s;
            }
        }
    }
    Ok(format!("{trials} random validation sets"))
}

/// Every instance lands in exactly one triage class, consistent with its
/// verdict and distance.
pub fn triage_partition(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut counts = [0usize; 3];
    for _ in 0..instances {
        let m = rng.random_range(1..6);
        let v = rv_of((0..m).map(|_| grid_value(&mut rng)).collect(), 0);
        let tc = per_code((0..m).map(|_| grid_value(&mut rng)).collect());
        let td = rng.random_range(0.0..100.0);
        let verdict = detect(&v, &tc).map_err(|e| e.to_string())?;
        let (t, d) = triage(&v, &tc, td).map_err(|e| e.to_string())?;
        let ok = match t {
            Triage::Normal => verdict == Verdict::Normal && d == 0.0,
            Triage::Salvageable => verdict == Verdict::Suspicious && d <= td,
            Triage::Rejected => verdict == Verdict::Suspicious && d > td,
        };
        if !ok {
            return Err(format!("r {:?} θ {:?} θ_d {td}: {t:?} with distance {d}", v.r, tc.theta_r));
        }
        counts[t as usize] += 1;
    }
    Ok(format!("{instances} instances: {} normal, {} salvageable, {} rejected", counts[0], counts[1], counts[2]))
}

fn random_outcomes<R: Rng>(rng: &mut R, n: usize, m: usize) -> Vec<InstanceOutcome> {
    (0..n)
        .map(|_| InstanceOutcome {
            label: rng.random_range(0..10),
            rv: rv_of((0..m).map(|_| grid_value(rng)).collect(), rng.random_range(0..10)),
            purified_label: rng.random_range(0..10),
        })
        .collect()
}

/// Pipeline rates against a direct per-instance count that never calls the
/// detector or purifier.
pub fn metric_recount(trials: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    for _ in 0..trials {
        let m = rng.random_range(1..4);
        let (nc, na) = (rng.random_range(0..60), rng.random_range(0..60));
        let clean = random_outcomes(&mut rng, nc, m);
        let adv = random_outcomes(&mut rng, na, m);
        let theta: Vec<f64> = (0..m).map(|_| grid_value(&mut rng)).collect();
        let td = if rng.random_bool(0.2) { None } else { Some(rng.random_range(0.0..80.0)) };
        let o = evaluate_outcome(&clean, &adv, &per_code(theta.clone()), td).map_err(|e| e.to_string())?;

        // (kept normal, salvageable, recovered, correct) per group.
        let count = |g: &[InstanceOutcome], adversarial: bool| {
            let mut c = (0usize, 0usize, 0usize, 0usize);
            for x in g {
                let normal = x.rv.r.iter().zip(&theta).all(|(r, t)| r > t);
                let short: f64 = x.rv.r.iter().zip(&theta).map(|(r, t)| (t - r).max(0.0)).sum();
                let salv = !normal && td.is_none_or(|td| short <= td);
                if normal {
                    c.0 += 1;
                    c.3 += usize::from(x.rv.prediction == x.label);
                } else if salv {
                    c.1 += 1;
                    c.2 += usize::from(x.purified_label == x.label);
                    c.3 += usize::from(x.purified_label == x.label);
                } else {
                    c.3 += usize::from(adversarial);
                }
            }
            c
        };
        let (c, a) = (count(&clean, false), count(&adv, true));
        let frac = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let expect = [
            (o.detection.clean, frac(c.0, clean.len())),
            (o.detection.adv, frac(adv.len() - a.0, adv.len())),
            (o.detection.overall, frac(c.0 + adv.len() - a.0, clean.len() + adv.len())),
            (o.recall.clean, frac(c.2, c.1)),
            (o.recall.adv, frac(a.2, a.1)),
            (o.recall.overall, frac(c.2 + a.2, c.1 + a.1)),
            (o.final_accuracy.clean, frac(c.3, clean.len())),
            (o.final_accuracy.adv, frac(a.3, adv.len())),
            (o.final_accuracy.overall, frac(c.3 + a.3, clean.len() + adv.len())),
        ];
        for (i, (got, want)) in expect.iter().enumerate() {
            if got != want {
                return Err(format!("rate {i}: pipeline {got:?} vs recount {want:?}"));
            }
        }
        o.check().map_err(|e| e.to_string())?;
    }
    Ok(format!("{trials} random logs recounted exactly"))
}

/// Untrained classifier and combo-VAE (stage forced to full).
pub fn untrained_models(latent_dim: usize, seed: u64) -> (TargetClassifier, ComboVae) {
    let mut rng = rng(seed);
    let net = Sequential::new(PIXELS, architecture(), &mut rng).unwrap();
    let meta = TrainingMeta { epochs: 0, seed, train_size: 0, final_loss: 0.0, heldout_accuracy: None };
    let clf = TargetClassifier::from_network(net, meta).unwrap();
    let cfg = VaeConfig { latent_dim, ..Default::default() };
    let mut vae = ComboVae::new(cfg, seed + 1).unwrap();
    vae.stage = Stage::Full;
    (clf, vae)
}

/// Engine resistances against regenerated morphs classified one code at a
/// time and counted by hand.
pub fn resistance_recount(instances: usize, seed: u64) -> Check {
    let (base_clf, vae) = untrained_models(4, seed);
    let corpus = synthetic_corpus(20, 2, seed);
    let images = &corpus.set.images;
    let latents = vae.encode_shared(images, None).map_err(|e| e.to_string())?.mu;
    let ranges = ranges_from_latents(&latents).map_err(|e| e.to_string())?;
    let morph = MorphSearchConfig { n_morphs: 25, batch: 8, ..Default::default() };
    let codes = vec![0, 2, 3];
    let mut nontrivial = 0;
    for i in 0..instances {
        let x = images.row(i % images.nrows());
        let stream = 1000 + i as u64;
        // Untrained models give every morph the same label; centring the
        // output bias on this instance's morphs makes the labels vary.
        let mut probe = rng(seed ^ 0xfeed);
        let m = generate_morphs(&vae, x, codes[0], &ranges, &morph, &mut probe).map_err(|e| e.to_string())?;
        let centre = base_clf.logits(&m.images).map_err(|e| e.to_string())?.mean_axis(ndarray::Axis(0)).unwrap();
        let mut layers = base_clf.network().layers().to_vec();
        let last = layers.last_mut().unwrap();
        last.bias.iter_mut().zip(&centre).for_each(|(b, c)| *b -= c);
        let net = Sequential::from_layers(PIXELS, layers).map_err(|e| e.to_string())?;
        let clf = TargetClassifier::from_network(net, base_clf.meta.clone()).map_err(|e| e.to_string())?;

        let engine =
            ResistanceEngine { clf: &clf, vae: &vae, ranges: &ranges, morph: &morph, codes: codes.clone(), seed };
        let rv = engine.evaluate(x, stream).map_err(|e| e.to_string())?;
        let prediction = clf.predict(&x.to_owned().insert_axis(ndarray::Axis(0))).map_err(|e| e.to_string())?[0];
        let mut rng = rng(seed);
        rng.set_stream(stream);
        for (j, &code) in codes.iter().enumerate() {
            let morphs = generate_morphs(&vae, x, code, &ranges, &morph, &mut rng).map_err(|e| e.to_string())?;
            let preds = clf.predict(&morphs.images).map_err(|e| e.to_string())?;
            let same = preds.iter().filter(|&&p| p == prediction).count();
            let expected = 100.0 * same as f64 / preds.len() as f64;
            let logged = rv.morph_predictions[j].chars().filter(|&c| c as usize - '0' as usize == prediction).count();
            if rv.r[j] != expected || logged != same || rv.prediction != prediction {
                return Err(format!("instance {i} code {code}: r {} vs recount {expected}", rv.r[j]));
            }
            nontrivial += usize::from(expected > 0.0 && expected < 100.0);
        }
    }
    Ok(format!("{instances} instances x {} codes recounted ({nontrivial} with mixed morph labels)", codes.len()))
}

/// Accuracy of a TC discriminator trained on `sample` batches against
/// their permuted counterparts, measured on fresh batches.
pub fn tc_discriminator_accuracy(sample: impl Fn(&mut ChaCha8Rng, usize) -> Array2<f32>, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let dim = sample(&mut rng, 1).ncols();
    let mut disc = TcDiscriminator::new(dim, 64, &mut rng).unwrap();
    let mut opt = Adam::with_betas(1e-3, 0.5, 0.9);
    for _ in 0..1500 {
        let a = sample(&mut rng, 128);
        let b = sample(&mut rng, 128);
        tc_discriminator_step(&mut disc, &mut opt, &a, &b, &mut rng).unwrap();
    }
    let joint = sample(&mut rng, 4000);
    let other = sample(&mut rng, 4000);
    let permuted = permute_dims(&other, &mut rng).unwrap();
    disc.accuracy(&joint, &permuted).unwrap()
}

pub fn factorized_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, 5), |_| rng.sample(StandardNormal))
}

/// Five dimensions built from two independent ones: `(a, a, b, b, a)`.
pub fn duplicated_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Array2<f32> {
    let mut z = Array2::zeros((n, 5));
    for mut row in z.rows_mut() {
        let a: f32 = rng.sample(StandardNormal);
        let b: f32 = rng.sample(StandardNormal);
        row.assign(&ndarray::arr1(&[a, a, b, b, a]));
    }
    z
}
