//! Central-difference checks of every layer's backward pass, in f64-summed
//! scalar objectives over f32 networks.

use fmd_nn::{Archive, LayerSpec, Sequential};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f32..1.0))
}

/// Objective: sum(y * c) with fixed random c.
fn objective(net: &Sequential, x: &Array2<f32>, c: &Array2<f32>) -> f64 {
    let y = net.forward(x).unwrap();
    y.iter().zip(c.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
}

fn check(specs: Vec<LayerSpec>, input_dim: usize, seed: u64) {
    check_with_step(specs, input_dim, seed, 1e-2)
}

fn check_with_step(specs: Vec<LayerSpec>, input_dim: usize, seed: u64, h: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Sequential::new(input_dim, specs, &mut rng).unwrap();
    let x = random_input(&mut rng, 3, input_dim);
    let c = random_input(&mut rng, 3, net.output_dim());
    let (_, trace) = net.forward_trace(&x).unwrap();
    let mut grads = net.zero_grads();
    let gx = net.backward(&trace, c.clone(), Some(&mut grads), true).unwrap().unwrap();

    let tol = |fd: f64, an: f64| (fd - an).abs() <= 2e-2 * (1.0 + fd.abs().max(an.abs()));

    for _ in 0..12 {
        let i = rng.random_range(0..x.len());
        let (r, col) = (i / input_dim, i % input_dim);
        let mut xp = x.clone();
        xp[[r, col]] += h;
        let mut xm = x.clone();
        xm[[r, col]] -= h;
        let fd = (objective(&net, &xp, &c) - objective(&net, &xm, &c)) / (2.0 * h as f64);
        let an = gx[[r, col]] as f64;
        assert!(tol(fd, an), "input grad [{r},{col}]: fd={fd} analytic={an}");
    }

    let grad_slices: Vec<Vec<f32>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    for k in 0..grad_slices.len() {
        for _ in 0..6 {
            let j = rng.random_range(0..grad_slices[k].len());
            let orig = net.params()[k][j];
            net.params_mut()[k][j] = orig + h;
            let fp = objective(&net, &x, &c);
            net.params_mut()[k][j] = orig - h;
            let fm = objective(&net, &x, &c);
            net.params_mut()[k][j] = orig;
            let fd = (fp - fm) / (2.0 * h as f64);
            let an = grad_slices[k][j] as f64;
            assert!(tol(fd, an), "param {k}[{j}]: fd={fd} analytic={an}");
        }
    }
}

#[test]
fn linear_and_pointwise_layers() {
    check(
        vec![
            LayerSpec::Linear { inputs: 6, outputs: 5 },
            LayerSpec::Tanh,
            LayerSpec::Linear { inputs: 5, outputs: 4 },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Linear { inputs: 4, outputs: 3 },
            LayerSpec::Sigmoid,
        ],
        6,
        1,
    );
}

#[test]
fn strided_convolution() {
    check(
        vec![
            LayerSpec::conv(2, 3, (6, 6), 4, 2, 1),
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::conv(3, 2, (3, 3), 3, 1, 1),
        ],
        2 * 36,
        2,
    );
}

#[test]
fn transposed_convolution() {
    check(
        vec![
            LayerSpec::conv_transpose(3, 2, (6, 6), 4, 2, 1),
            LayerSpec::Tanh,
            LayerSpec::conv_transpose(2, 1, (12, 12), 4, 2, 1),
        ],
        3 * 9,
        3,
    );
}

#[test]
fn pooling_and_relu() {
    // Random inputs make max-pool ties and ReLU kinks measure-zero events;
    // a small step keeps the difference quotient off them.
    check_with_step(
        vec![
            LayerSpec::conv(1, 3, (4, 4), 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { channels: 3, height: 4, width: 4 },
            LayerSpec::Linear { inputs: 12, outputs: 2 },
        ],
        16,
        11,
        1e-3,
    );
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // With shared weights, <conv(x), y> == <x, convT(y)> (no bias).
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let conv = Sequential::new(2 * 36, vec![LayerSpec::conv(2, 3, (6, 6), 4, 2, 1)], &mut rng).unwrap();
    let mut layer = conv.layers()[0].clone();
    layer.spec = LayerSpec::conv_transpose(3, 2, (6, 6), 4, 2, 1);
    layer.bias = vec![0.0; 2];
    let convt = Sequential::from_layers(27, vec![layer]).unwrap();
    let mut conv_nb = conv.clone();
    conv_nb.params_mut()[1].iter_mut().for_each(|b| *b = 0.0);
    let x = random_input(&mut rng, 2, 72);
    let y = random_input(&mut rng, 2, 27);
    let lhs: f32 = conv_nb.forward(&x).unwrap().iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    let rhs: f32 = convt.forward(&y).unwrap().iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
}

#[test]
fn mismatched_layer_dims_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = Sequential::new(
        10,
        vec![LayerSpec::Linear { inputs: 10, outputs: 4 }, LayerSpec::Linear { inputs: 5, outputs: 2 }],
        &mut rng,
    );
    assert!(err.is_err());
}

#[test]
fn archive_round_trip_preserves_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = Sequential::new(
        16,
        vec![LayerSpec::conv(1, 2, (4, 4), 3, 1, 1), LayerSpec::Relu, LayerSpec::Linear { inputs: 32, outputs: 3 }],
        &mut rng,
    )
    .unwrap();
    let mut a = Archive::new();
    a.put_network("clf", &net);
    a.metadata.insert("note".into(), "hello".into());
    let back = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
    assert_eq!(back.meta("note").unwrap(), "hello");
    assert_eq!(back.get_network("clf").unwrap(), net);
}
