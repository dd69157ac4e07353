use piba_core::featbn::{bottleneck_kl_tape, feature_loss, FeatureStats};
use piba_core::gradcheck::{grad_check, op_catalogue};
use piba_core::inputbn::input_loss;
use piba_core::models::Model;
use piba_core::RngStream;

#[test]
fn every_catalogued_op_at_100_points() {
    let mut s = RngStream::new(2024, 0);
    for case in op_catalogue() {
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let r = case.check_at(&mut s, 1e-6, 1e-5).unwrap();
            worst = worst.max(r.max_rel_error);
        }
        assert!(worst < 1e-5, "{}: {worst:e}", case.name);
    }
}

#[test]
fn cross_entropy_on_random_logits() {
    let mut s = RngStream::new(5, 0);
    for _ in 0..20 {
        let logits = s.normal_tensor(&[4, 3]).map(|v| 3.0 * v);
        let r = grad_check(|t, v| t.softmax_cross_entropy(v, &[2, 0, 1, 1]), &logits, 1e-4, 1e-6).unwrap();
        assert!(r.passed, "{:e}", r.max_rel_error);
    }
}

#[test]
fn conv_relu_mean_composite() {
    let mut s = RngStream::new(6, 0);
    let w = s.normal_tensor(&[4, 1, 3, 3]);
    let b = s.normal_tensor(&[4]);
    let x = s.normal_tensor(&[1, 1, 8, 8]);
    let r = grad_check(
        |t, v| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(v, w, b)?;
            let y = t.relu(y)?;
            t.mean(y)
        },
        &x,
        1e-4,
        1e-5,
    )
    .unwrap();
    assert!(r.passed, "{:e}", r.max_rel_error);
}

fn stats(s: &mut RngStream, shape: &[usize]) -> FeatureStats {
    FeatureStats {
        mean: s.normal_tensor(shape).map(|v| 0.3 * v),
        std: s.uniform_tensor(shape, 0.5, 1.5),
    }
}

#[test]
fn input_kl_with_prior_mask() {
    let mut s = RngStream::new(7, 0);
    let shape = [3, 5];
    let value = s.normal_tensor(&shape);
    let prior = s.uniform_tensor(&shape, 0.0, 1.0);
    let st = stats(&mut s, &shape);
    let alpha = s.normal_tensor(&shape).map(|v| 2.0 * v);
    let r = grad_check(
        |t, a| {
            let kl = bottleneck_kl_tape(t, a, &value, &prior, &st.mean, &st.std)?;
            t.sum(kl)
        },
        &alpha,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{:e}", r.max_rel_error);
}

#[test]
fn full_feature_loss() {
    let model = Model::cnn(3);
    let mut s = RngStream::new(8, 0);
    let pos = model.layer_position("conv2").unwrap();
    let shape = model.activation_shape(pos).unwrap();
    let features = s.normal_tensor(&shape).map(f64::abs);
    let st = stats(&mut s, &shape);
    let mut noise_shape = vec![2];
    noise_shape.extend_from_slice(&shape);
    let noise = s.normal_tensor(&noise_shape);
    let alpha = s.normal_tensor(&shape);
    let r = grad_check(
        |t, a| feature_loss(t, &model, pos, a, &features, 1, &st, 10.0, &noise),
        &alpha,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{:e}", r.max_rel_error);
}

#[test]
fn full_input_loss() {
    let model = Model::cnn(4);
    let mut s = RngStream::new(9, 0);
    let shape = [1, 16, 16];
    let input = s.uniform_tensor(&shape, 0.0, 1.0);
    let lambda_g = s.uniform_tensor(&shape, 0.0, 1.0);
    let st = stats(&mut s, &shape);
    let eps = s.normal_tensor(&[2, 1, 16, 16]);
    let alpha = s.normal_tensor(&shape);
    let r = grad_check(
        |t, a| input_loss(t, &model, a, &input, 2, &lambda_g, &st, 20.0, &eps),
        &alpha,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{:e}", r.max_rel_error);
}

#[test]
fn recurrent_model_loss_gradient() {
    // The token path: CE through embedding → GRU → fc, checked at the embeddings.
    let model = Model::rnn(5);
    let mut s = RngStream::new(10, 0);
    let x = s.normal_tensor(&[2, 32, 16]).map(|v| 0.5 * v);
    let from = model.dense_input_position();
    let r = grad_check(
        |t, v| {
            let bound = model.bind(t, false);
            let y = model.forward_range(t, &bound, v, from, model.output_position())?;
            t.softmax_cross_entropy(y, &[0, 1])
        },
        &x,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(r.passed, "{:e}", r.max_rel_error);
}
