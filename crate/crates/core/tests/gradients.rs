mod common;

use agesel::model::{minibatch_gradient, ModelSpec, Params, Sample};
use agesel::RandomStream;
use common::{fd_suite, max_fd_error, random_instance};

#[test]
fn logistic_gradient_matches_finite_differences() {
    let spec = ModelSpec::logistic(6, 4);
    assert!(fd_suite(&spec, 100, 1) < 1e-4);
}

#[test]
fn two_layer_gradient_matches_finite_differences() {
    let spec = ModelSpec::two_layer(5, 7, 3);
    assert!(fd_suite(&spec, 100, 2) < 1e-4);
}

#[test]
fn binary_and_wide_shapes() {
    let mut rng = RandomStream::new(9);
    for spec in [
        ModelSpec::logistic(1, 2),
        ModelSpec::logistic(20, 10),
        ModelSpec::two_layer(1, 1, 2),
        ModelSpec::two_layer(20, 16, 10),
    ] {
        for _ in 0..5 {
            let (p, b) = random_instance(&spec, 4, &mut rng);
            assert!(max_fd_error(&spec, &p, &b, 1e-5) < 1e-4, "{spec:?}");
        }
    }
}

#[test]
fn gradient_vanishes_at_separable_minimiser() {
    // two points on opposite sides of the origin; long plain gradient descent
    let spec = ModelSpec::logistic(1, 2);
    let batch = vec![Sample::new(vec![1.0], 0), Sample::new(vec![-1.0], 1)];
    let mut p = Params::<f64>::zeros(spec.num_params());
    for _ in 0..20000 {
        let g = minibatch_gradient(&p, &spec, &batch).unwrap();
        p.add_scaled(-5.0, &g).unwrap();
    }
    // separable data has no finite minimiser; the gradient still decays
    let g = minibatch_gradient(&p, &spec, &batch).unwrap();
    assert!(g.norm() < 1e-3, "{}", g.norm());

    // a non-separable toy instance has an interior minimiser
    let batch = vec![
        Sample::new(vec![1.0], 0),
        Sample::new(vec![1.0], 1),
        Sample::new(vec![-1.0], 1),
        Sample::new(vec![0.5], 0),
    ];
    let mut p = Params::<f64>::zeros(spec.num_params());
    for _ in 0..20000 {
        let g = minibatch_gradient(&p, &spec, &batch).unwrap();
        p.add_scaled(-1.0, &g).unwrap();
    }
    assert!(minibatch_gradient(&p, &spec, &batch).unwrap().norm() < 1e-6);
}

#[test]
fn single_precision_gradient_tracks_double() {
    let spec = ModelSpec::two_layer(4, 5, 3);
    let mut rng = RandomStream::new(4);
    let (p, b) = random_instance(&spec, 6, &mut rng);
    let g64 = minibatch_gradient(&p, &spec, &b).unwrap();
    let p32 = Params::new(p.as_slice().iter().map(|&v| v as f32).collect()).unwrap();
    let b32: Vec<Sample<f32>> = b
        .iter()
        .map(|s| Sample::new(s.features.iter().map(|&v| v as f32).collect(), s.label))
        .collect();
    let g32 = minibatch_gradient(&p32, &spec, &b32).unwrap();
    for (a, b) in g64.as_slice().iter().zip(g32.as_slice()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}
