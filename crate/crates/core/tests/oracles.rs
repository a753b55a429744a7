//! Gradient, training-dynamics and synthetic-data oracles for the models.

mod common;

use common::*;
use fm_defense::classifier::TargetClassifier;
use fm_defense::combo_vae::ComboVae;
use fm_defense::combo_vae::{
    gm_losses, permute_dims, tc_discriminator_step, tc_estimate, GaussianMixture, TcDiscriminator, VaeConfig,
    VARIANCE_FLOOR,
};
use fm_defense::datasets::synthetic_corpus;
use fmd_nn::Adam;
use ndarray::{arr1, arr2, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

fn cross_entropy(logits: &Array2<f32>, y: usize) -> f64 {
    let row: Vec<f64> = logits.row(0).iter().map(|&v| v as f64).collect();
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
}

/// Central difference of the loss along one pixel, using the largest step
/// that keeps the logits on one linear piece of the ReLU/max-pool network
/// (zero second difference up to rounding). `None` when every step crosses
/// a kink.
fn central_difference(clf: &TargetClassifier, x: &Array2<f32>, y: usize, p: usize) -> Option<f64> {
    let base = clf.logits(x).unwrap();
    [5e-2f32, 2e-2, 1e-2, 5e-3].into_iter().find_map(|h| {
        let mut plus = x.clone();
        plus[[0, p]] += h;
        let mut minus = x.clone();
        minus[[0, p]] -= h;
        let (lp, lm) = (clf.logits(&plus).unwrap(), clf.logits(&minus).unwrap());
        let linear = (0..lp.ncols()).all(|k| (lp[[0, k]] + lm[[0, k]] - 2.0 * base[[0, k]]).abs() <= 2e-6);
        linear.then(|| (cross_entropy(&lp, y) - cross_entropy(&lm, y)) / (2.0 * h as f64))
    })
}

#[test]
fn classifier_loss_gradient_matches_central_differences() {
    let (clf, _) = untrained_models(2, 3);
    let corpus = synthetic_corpus(1, 0, 3);
    let mut rng = rng(4);
    let mut checked = 0;
    for img in 0..corpus.set.len() {
        let x = corpus.set.images.row(img).to_owned().insert_axis(ndarray::Axis(0));
        let y = corpus.set.labels[img];
        let g = clf.loss_gradient(&x, &[y]).unwrap();
        // Tiny gradients drown in f32 rounding of the logits.
        let mut pixels: Vec<usize> = (0..x.ncols()).filter(|&p| g[[0, p]].abs() >= 1e-2).collect();
        pixels.shuffle(&mut rng);
        for p in pixels.into_iter().take(40) {
            let Some(fd) = central_difference(&clf, &x, y, p) else {
                continue;
            };
            let an = g[[0, p]] as f64;
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(rel <= 1e-3, "image {img} pixel {p}: analytic {an:e} vs central difference {fd:e}");
            checked += 1;
            if checked == 10 {
                return;
            }
        }
    }
    panic!("only {checked} kink-free pixels found");
}

fn tiny_vae(seed: u64) -> ComboVae {
    let cfg = VaeConfig { latent_dim: 3, disc_hidden: 8, ..Default::default() };
    let mut vae = ComboVae::new(cfg, seed).unwrap();
    vae.stage = fm_defense::combo_vae::Stage::Dgmm;
    vae
}

#[test]
fn zero_gamma_encoder_gradient_is_the_plain_vae_gradient() {
    let mut vae = tiny_vae(5);
    let corpus = synthetic_corpus(1, 0, 5);
    let x = corpus.set.images.slice(ndarray::s![..2, ..]).to_owned();
    let z_u = vae.encode_unique(&x).unwrap();
    let mut rng = rng(6);
    let eps = Array2::from_shape_fn((x.nrows(), 3), |_| rng.sample::<f32, _>(StandardNormal));
    let (_, untrained_disc, _, _) = vae.stage2_gradients(&x, &z_u, &eps, 0.0).unwrap();

    // A discriminator with a non-trivial output layer, so L_TC has a gradient.
    let mut layers = vae.discriminator.net.layers().to_vec();
    layers.last_mut().unwrap().weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    vae.discriminator.net = fmd_nn::Sequential::from_layers(3, layers).unwrap();

    let (_, g0, _, _) = vae.stage2_gradients(&x, &z_u, &eps, 0.0).unwrap();
    let (_, g40, _, _) = vae.stage2_gradients(&x, &z_u, &eps, 40.0).unwrap();
    assert_eq!(g0, untrained_disc, "with γ = 0 the discriminator must not reach the encoder");
    assert_ne!(g0, g40, "the TC term must move the encoder when γ > 0");

    // Plain VAE objective L_R + L_KL at fixed noise, differentiated numerically.
    let objective = |v: &ComboVae| {
        let (l, _, _, _) = v.stage2_gradients(&x, &z_u, &eps, 0.0).unwrap();
        l.reconstruction + l.kl
    };
    let analytic: Vec<Vec<f32>> = g0.slices().iter().map(|s| s.to_vec()).collect();
    let last = analytic.len() - 1;
    for (t, k) in [(last, 0), (last, 1), (last, 2), (last, 4), (last - 1, 0), (last - 1, 3)] {
        let an = analytic[t][k] as f64;
        // ReLU kinks bias large steps and f32 rounding small ones; the best
        // step must agree.
        let err = [1e-2f32, 3e-3, 1e-3, 3e-4, 1e-4]
            .into_iter()
            .map(|h| {
                let mut plus = vae.clone();
                plus.encoder.params_mut()[t][k] += h;
                let mut minus = vae.clone();
                minus.encoder.params_mut()[t][k] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
                (fd - an).abs()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(err <= 2e-2 * an.abs().max(0.1), "tensor {t}[{k}]: analytic {an}, closest difference off by {err}");
    }
}

#[test]
fn stage_two_leaves_the_dgmm_untouched() {
    let mut vae = tiny_vae(7);
    vae.stage = fm_defense::combo_vae::Stage::Untrained;
    vae.config.stage1_epochs = 1;
    vae.config.stage2_epochs = 1;
    let corpus = synthetic_corpus(6, 0, 7);
    let train = &corpus.set;
    vae.train_stage1_dgmm(train, None, 1).unwrap();
    let frozen = vae.dgmm.clone();
    let encoder = vae.encoder.clone();
    vae.train_stage2(train, None, 2).unwrap();
    assert_eq!(vae.dgmm, frozen);
    assert_ne!(vae.encoder, encoder);
}

#[test]
fn two_class_cls_loss_matches_hand_computation() {
    // μ_0 = -μ_1 = (1, 0.5), Σ = diag(0.5, 2), z = μ_0.
    let s = |v: f64| ((v - VARIANCE_FLOOR).ln()) as f32;
    let mix = GaussianMixture {
        means: arr2(&[[1.0, 0.5], [-1.0, -0.5]]),
        log_var: arr2(&[[s(0.5), s(2.0)], [s(0.5), s(2.0)]]),
    };
    // Mahalanobis gap: ½ (z - μ_1)ᵀ Σ⁻¹ (z - μ_1) with z - μ_1 = (2, 1).
    let delta = 0.5 * (4.0 / mix.variance(0, 0) + 1.0 / mix.variance(0, 1));
    let l = gm_losses(&mix, arr1(&[1.0f32, 0.5]).view(), 0, 0.0).unwrap();
    let expected = (1.0 + (-delta).exp()).ln();
    assert!((l.cls - expected).abs() < 1e-9, "{} vs {expected}", l.cls);
    assert!((delta - 0.5 * (4.0 / 0.5 + 1.0 / 2.0)).abs() < 1e-6);
    assert_eq!(l.gm, l.cls);
}

#[test]
fn tc_oracle_pair() {
    let independent = tc_discriminator_accuracy(factorized_gaussian, 21);
    let duplicated = tc_discriminator_accuracy(duplicated_gaussian, 22);
    assert!(independent <= 0.55, "independent data: accuracy {independent}");
    assert!(duplicated >= 0.9, "duplicated data: accuracy {duplicated}");
}

fn trained_tc(sample: fn(&mut rand_chacha::ChaCha8Rng, usize) -> Array2<f32>, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut disc = TcDiscriminator::new(5, 64, &mut rng).unwrap();
    let mut opt = Adam::with_betas(1e-3, 0.5, 0.9);
    for _ in 0..1500 {
        let (a, b) = (sample(&mut rng, 128), sample(&mut rng, 128));
        tc_discriminator_step(&mut disc, &mut opt, &a, &b, &mut rng).unwrap();
    }
    tc_estimate(&disc, &sample(&mut rng, 4000)).unwrap()
}

#[test]
fn tc_estimate_separates_independent_and_duplicated_codes() {
    let independent = trained_tc(factorized_gaussian, 23);
    let duplicated = trained_tc(duplicated_gaussian, 24);
    assert!(independent.abs() <= 0.2, "independent L_TC {independent}");
    assert!(duplicated > 1.0, "duplicated L_TC {duplicated}");
}

#[test]
fn discriminator_loss_falls_on_correlated_data() {
    let mut drops = Vec::new();
    for seed in 0..5 {
        let mut rng = rng(100 + seed);
        let mut disc = TcDiscriminator::new(5, 64, &mut rng).unwrap();
        let mut opt = Adam::with_betas(1e-3, 0.5, 0.9);
        let losses: Vec<f64> = (0..100)
            .map(|_| {
                let (a, b) = (duplicated_gaussian(&mut rng, 128), duplicated_gaussian(&mut rng, 128));
                tc_discriminator_step(&mut disc, &mut opt, &a, &b, &mut rng).unwrap()
            })
            .collect();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
        drops.push(head - tail);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] > 0.0, "median drop {} over seeds {drops:?}", drops[2]);
}

#[test]
fn permuted_duplicates_lose_their_correlation() {
    let mut rng = rng(30);
    let z = duplicated_gaussian(&mut rng, 2000);
    let p = permute_dims(&z, &mut rng).unwrap();
    let corr = |m: &Array2<f32>| {
        let (a, b) = (m.column(0), m.column(1));
        let n = a.len() as f64;
        let (ma, mb) = (a.sum() as f64 / n, b.sum() as f64 / n);
        let cov: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb)).sum::<f64>() / n;
        let sa = (a.iter().map(|&x| (x as f64 - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (b.iter().map(|&y| (y as f64 - mb).powi(2)).sum::<f64>() / n).sqrt();
        cov / (sa * sb)
    };
    assert!((corr(&z) - 1.0).abs() < 1e-6);
    assert!(corr(&p).abs() < 0.1);
}
