use cfbeam_nn::{grad_check, grad_check_with, Layer, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // Keep activations away from ReLU kinks.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_biases(net: &mut Network, rng: &mut ChaCha8Rng) {
    use cfbeam_nn::Parameterized;
    for p in net.parameters_mut() {
        if p.shape().len() == 1 {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

#[test]
fn linear_networks_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut net = Network::new(vec![
            Layer::dense(4, 6, &mut rng),
            Layer::dense(6, 3, &mut rng),
        ]);
        random_biases(&mut net, &mut rng);
        let x = random_input(&mut rng, &[4]);
        let err = grad_check(&net, &x, 1e-5).unwrap();
        assert!(err < 1e-8, "linear net error {err}");
    }
}

#[test]
fn dense_relu_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let mut net = Network::mlp(&[5, 8, 7, 3], &mut rng);
        random_biases(&mut net, &mut rng);
        let x = random_input(&mut rng, &[5]);
        let err = grad_check(&net, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "relu net error {err}");
    }
}

#[test]
fn conv_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let mut net = Network::new(vec![
            Layer::conv2d(1, 3, 2, 2, &mut rng),
            Layer::Relu,
            Layer::conv2d(3, 2, 2, 2, &mut rng),
            Layer::Relu,
            Layer::Flatten,
            Layer::dense(2 * 3 * 4, 4, &mut rng),
        ]);
        random_biases(&mut net, &mut rng);
        let x = random_input(&mut rng, &[1, 3, 4]);
        let err = grad_check(&net, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "conv net error {err}");
    }
}

#[test]
fn corrupted_gradient_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let net = Network::mlp(&[3, 4, 2], &mut rng);
    let x = random_input(&mut rng, &[3]);
    let err = grad_check_with(&net, &x, 1e-5, |mut g| {
        for v in g.0[0].data_mut() {
            *v = *v * 1.5 + 0.1;
        }
        g
    })
    .unwrap();
    assert!(err > 1e-2, "negative control not flagged: {err}");
}

#[test]
fn rejects_out_of_range_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let net = Network::mlp(&[2, 2], &mut rng);
    let x = Tensor::vector(vec![1.0, 2.0]);
    assert!(grad_check(&net, &x, 1e-2).is_err());
    assert!(grad_check(&net, &x, 1e-9).is_err());
}
