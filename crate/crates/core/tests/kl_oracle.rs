use piba_core::featbn::{bottleneck_kl, FeatureStats};
use piba_core::inputbn::compose_input_bottleneck;
use piba_core::{RngStream, Tensor};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn t1(v: f64) -> Tensor {
    Tensor::new(vec![1], vec![v]).unwrap()
}

fn kl1(mask: f64, value: f64, prior: f64, mu: f64, sigma: f64) -> f64 {
    bottleneck_kl(&t1(mask), &t1(value), &t1(prior), &t1(mu), &t1(sigma)).unwrap().data()[0]
}

/// The bottleneck given the value and the prior-conditioned marginal, as
/// (mean, std) pairs, written out from the two masking steps.
fn gaussians(mask: f64, value: f64, prior: f64, mu: f64, sigma: f64) -> ((f64, f64), (f64, f64)) {
    let post = (mask * value + (1.0 - mask) * mu, (1.0 - mask) * sigma);
    let marg = (prior * mask * value + (1.0 - prior * mask) * mu, (1.0 - prior * mask) * sigma);
    (post, marg)
}

/// `E_p[log p − log q]` from `n` stratified draws of `p`.
fn monte_carlo_kl(p: (f64, f64), q: (f64, f64), n: usize, s: &mut RngStream) -> f64 {
    let std = Normal::new(0.0, 1.0).unwrap();
    let dp = Normal::new(p.0, p.1).unwrap();
    let dq = Normal::new(q.0, q.1).unwrap();
    let mut acc = 0.0;
    for i in 0..n {
        let u = (i as f64 + s.uniform()) / n as f64;
        let z = p.0 + p.1 * std.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
        acc += dp.ln_pdf(z) - dq.ln_pdf(z);
    }
    acc / n as f64
}

#[test]
fn hand_value_matches_monte_carlo() {
    let k = kl1(0.5, 1.0, 0.5, 0.0, 1.0);
    // ln 1.5 + 0.25/1.125 + 0.0625/1.125 − 0.5
    let by_hand = 1.5f64.ln() + 0.3125 / 1.125 - 0.5;
    assert!((k - by_hand).abs() < 1e-15, "{k}");
    assert!((k - 0.18326).abs() < 1e-4, "{k}");
    let (p, q) = gaussians(0.5, 1.0, 0.5, 0.0, 1.0);
    let mc = monte_carlo_kl(p, q, 1_000_000, &mut RngStream::new(1, 0));
    assert!((mc - k).abs() / k < 0.02, "{mc} vs {k}");
}

#[test]
fn closed_form_agrees_with_monte_carlo_on_random_draws() {
    let mut s = RngStream::new(11, 0);
    for draw in 0..20 {
        let mask = s.uniform_range(0.05, 0.95);
        let prior = s.uniform_range(0.0, 0.95);
        let value = s.normal() * 2.0;
        let mu = s.normal();
        let sigma = s.uniform_range(0.2, 2.0);
        let k = kl1(mask, value, prior, mu, sigma);
        let (p, q) = gaussians(mask, value, prior, mu, sigma);
        let mc = monte_carlo_kl(p, q, 1_000_000, &mut s);
        assert!((mc - k).abs() <= 0.02 * k.abs(), "draw {draw}: closed {k}, MC {mc}");
    }
}

#[test]
fn zero_cases_are_exact() {
    let mut s = RngStream::new(12, 0);
    for _ in 0..1000 {
        let (v, mu, sigma) = (s.normal() * 3.0, s.normal(), s.uniform_range(0.1, 3.0));
        let mask = s.uniform_range(0.0, 0.999);
        assert!(kl1(mask, v, 1.0, mu, sigma).abs() < 1e-12);
        assert!(kl1(0.0, v, s.uniform(), mu, sigma).abs() < 1e-12);
    }
}

#[test]
fn never_negative() {
    let mut s = RngStream::new(13, 0);
    for _ in 0..100_000 {
        let k = kl1(s.uniform_range(0.0, 0.9999), s.normal() * 5.0, s.uniform(), s.normal(), s.uniform_range(0.01, 5.0));
        assert!(k >= -1e-12, "{k}");
    }
}

#[test]
fn prior_zero_reduces_to_feature_kl() {
    let mut s = RngStream::new(14, 0);
    let n = 100_000;
    let mask = s.uniform_tensor(&[n], 0.0, 0.999);
    let value = s.normal_tensor(&[n]).map(|v| 3.0 * v);
    let mu = s.normal_tensor(&[n]);
    let sigma = s.uniform_tensor(&[n], 0.05, 3.0);
    let got = bottleneck_kl(&mask, &value, &Tensor::zeros([n]), &mu, &sigma).unwrap();
    for k in 0..n {
        let (l, d, sg) = (mask.data()[k], value.data()[k] - mu.data()[k], sigma.data()[k]);
        let direct = (1.0 / (1.0 - l)).ln() + (1.0 - l).powi(2) / 2.0 + l * l * d * d / (2.0 * sg * sg) - 0.5;
        assert!((got.data()[k] - direct).abs() < 1e-12, "element {k}");
    }
}

#[test]
fn composed_masks_match_the_closed_form_gaussian() {
    let mut s = RngStream::new(15, 0);
    let shape = [4];
    let mask = s.uniform_tensor(&shape, 0.1, 0.9);
    let lambda_g = s.uniform_tensor(&shape, 0.1, 0.9);
    let input = s.normal_tensor(&shape);
    let stats = FeatureStats {
        mean: s.normal_tensor(&shape),
        std: s.uniform_tensor(&shape, 0.5, 2.0),
    };
    let draws = 1_000_000;
    let z = compose_input_bottleneck(&mask, &lambda_g, &input, &stats, draws, &mut s).unwrap();
    for k in 0..4 {
        let a = lambda_g.data()[k] * mask.data()[k];
        let mean = a * input.data()[k] + (1.0 - a) * stats.mean.data()[k];
        let var = ((1.0 - a) * stats.std.data()[k]).powi(2);
        let col: Vec<f64> = z.data().iter().skip(k).step_by(4).copied().collect();
        let m = col.iter().sum::<f64>() / draws as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
        assert!((m - mean).abs() <= 0.01 * mean.abs().max(stats.std.data()[k]), "mean {k}: {m} vs {mean}");
        assert!((v - var).abs() <= 0.01 * var, "variance {k}: {v} vs {var}");
    }
}
