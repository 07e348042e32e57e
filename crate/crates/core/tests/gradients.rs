//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use texfill_core::embed::PooledEmbedding;
use texfill_core::stats::{
    boundary_loss, combined_loss_features, cross_correlation_loss_features,
    synthesis_loss_features, GramianSet,
};
use texfill_core::{FeatureNetwork, Tensor, Topology};

fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Worst relative error between `grad` and central differences of `f` at `x`.
fn fd_error(f: impl Fn(&Tensor) -> f64, x: &Tensor, grad: &Tensor) -> f64 {
    let h = 1e-5;
    let scale = grad.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let a = grad.data()[i];
            (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6 * scale).max(1e-12)
        })
        .fold(0.0, f64::max)
}

#[test]
fn synthesis_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = random(&mut rng, 3, 4, 5);
    let reference = GramianSet::from_features([&r], &[1]).unwrap();
    let f = random(&mut rng, 3, 4, 5);
    let loss = |t: &Tensor| synthesis_loss_features(&reference, &[t]).unwrap().value;
    let grad = &synthesis_loss_features(&reference, &[&f])
        .unwrap()
        .cotangents[0];
    assert!(fd_error(loss, &f, grad) < 1e-6);
}

#[test]
fn cross_correlation_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for delta in 0..3 {
        let r = random(&mut rng, 2, 5, 6);
        let reference = GramianSet::from_features([&r], &[delta]).unwrap();
        let f = random(&mut rng, 2, 5, 6);
        let loss = |t: &Tensor| {
            cross_correlation_loss_features(&reference, &[t])
                .unwrap()
                .value
        };
        let grad = &cross_correlation_loss_features(&reference, &[&f])
            .unwrap()
            .cotangents[0];
        assert!(fd_error(loss, &f, grad) < 1e-6, "delta {delta}");
    }
}

#[test]
fn combined_loss_gradient_over_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (r1, r2) = (random(&mut rng, 2, 6, 6), random(&mut rng, 3, 3, 3));
    let reference = GramianSet::from_features([&r1, &r2], &[2, 1]).unwrap();
    let (f1, f2) = (random(&mut rng, 2, 6, 6), random(&mut rng, 3, 3, 3));
    let loss = combined_loss_features(&reference, &[&f1, &f2], 3.0, 7.0).unwrap();
    let l1 = |t: &Tensor| {
        combined_loss_features(&reference, &[t, &f2], 3.0, 7.0)
            .unwrap()
            .value
    };
    let l2 = |t: &Tensor| {
        combined_loss_features(&reference, &[&f1, t], 3.0, 7.0)
            .unwrap()
            .value
    };
    assert!(fd_error(l1, &f1, &loss.cotangents[0]) < 1e-6);
    assert!(fd_error(l2, &f2, &loss.cotangents[1]) < 1e-6);
}

#[test]
fn boundary_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x_b = random(&mut rng, 3, 5, 5);
    let x = random(&mut rng, 3, 5, 5);
    let m = Tensor::from_fn(1, 5, 5, |_, y, _| if y < 2 { 1.0 } else { 0.0 });
    let (_, grad) = boundary_loss(&x_b, &x, &m).unwrap();
    let loss = |t: &Tensor| boundary_loss(&x_b, t, &m).unwrap().0;
    assert!(fd_error(loss, &x, &grad) < 1e-6);
}

#[test]
fn network_backward_matches_finite_differences() {
    let topo = Topology::new([
        ("conv1_1", Some(3)),
        ("conv1_2", Some(3)),
        ("pool1", None),
        ("conv2_1", Some(4)),
    ]);
    let net = FeatureNetwork::random(5, &topo)
        .unwrap()
        .with_statistics_layers(&["conv1_2", "pool1", "conv2_1"])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(3, 6, 6, |_, _, _| rng.random_range(0.0..255.0));
    let trace = net.forward(&x).unwrap();
    let cot: Vec<Tensor> = trace
        .features()
        .map(|f| random(&mut rng, f.channels(), f.height(), f.width()))
        .collect();
    let grad = net.backward(&trace, &cot).unwrap();
    let pairing = |t: &Tensor| -> f64 {
        net.forward(t)
            .unwrap()
            .features()
            .zip(&cot)
            .map(|(f, c)| f.dot(c))
            .sum()
    };
    assert!(fd_error(pairing, &x, &grad) < 1e-5);
}

#[test]
fn embedding_adjoint_satisfies_the_pairing_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for q in 1..=2 {
        let window = random(&mut rng, 3, 32, 24);
        let emb = PooledEmbedding::new(&window, q, 8, 8, (8, 16)).unwrap();
        let patch = random(&mut rng, 3, 8, 8);
        let (c, h, w) = emb.pooled_shape();
        let y = random(&mut rng, c, h, w);
        // the embedding is affine in the patch: subtract its constant part
        let offset = emb.embed(&Tensor::zeros(3, 8, 8)).unwrap();
        let mut linear = emb.embed(&patch).unwrap();
        for (a, b) in linear.data_mut().iter_mut().zip(offset.data()) {
            *a -= b;
        }
        let lhs = linear.dot(&y);
        let rhs = patch.dot(&emb.adjoint(&y).unwrap());
        assert!(
            (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0),
            "q {q}: {lhs} vs {rhs}"
        );
    }
}
