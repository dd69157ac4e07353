use serde::{Deserialize, Serialize};

use super::{group_width, par_map, ssim, Curve, DenseClassifier};
use crate::attribution::{AttributionMap, Provenance};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::RngStream;
use crate::tensor::Tensor;

const GRAD_CHUNK: usize = 64;

/// Element-wise Integrated Gradients: `(x − b) ⊙` the mean target-logit
/// gradient at `b + k/steps · (x − b)`, `k = 1..=steps`.
pub fn integrated_gradients_raw<M: DenseClassifier + ?Sized>(
    model: &M,
    x: &Tensor,
    target: usize,
    steps: usize,
    baseline: &Tensor,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs at least 1 step"));
    }
    if x.shape() != baseline.shape() {
        return Err(Error::shape("integrated gradients", format!("{:?} vs baseline {:?}", x.shape(), baseline.shape())));
    }
    let diff = x.zip_map(baseline, |a, b| a - b)?;
    let mut total = vec![0.0; x.len()];
    let ks: Vec<usize> = (1..=steps).collect();
    for chunk in ks.chunks(GRAD_CHUNK) {
        let points: Vec<Tensor> = chunk
            .iter()
            .map(|&k| baseline.zip_map(&diff, |b, d| b + k as f64 / steps as f64 * d))
            .collect::<Result<_>>()?;
        let g = model.target_gradient(&Tensor::stack(&points)?, target)?;
        for row in g.data().chunks(x.len()) {
            for (t, v) in total.iter_mut().zip(row) {
                *t += v;
            }
        }
    }
    let data = total.iter().zip(diff.data()).map(|(g, d)| d * g / steps as f64).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Integrated Gradients as a map of shape `positions`: raw scores summed per
/// position group, then absolute value and min-max normalization.
pub fn integrated_gradients<M: DenseClassifier + ?Sized>(
    model: &M,
    x: &Tensor,
    target: usize,
    steps: usize,
    baseline: &Tensor,
    positions: &[usize],
) -> Result<AttributionMap> {
    let raw = integrated_gradients_raw(model, x, target, steps, baseline)?;
    let p: usize = positions.iter().product();
    let width = group_width(raw.len(), p)?;
    let grouped: Vec<f64> = raw.data().chunks(width).map(|g| g.iter().sum::<f64>().abs()).collect();
    Ok(AttributionMap::from_raw(
        &Tensor::new(positions.to_vec(), grouped)?,
        Provenance {
            method: "ig".into(),
            ..Default::default()
        },
    ))
}

/// Uniform `[0, 1]` scores, normalized.
pub fn random_attribution(shape: &[usize], stream: &mut RngStream) -> AttributionMap {
    AttributionMap::from_raw(
        &stream.uniform_tensor(shape, 0.0, 1.0),
        Provenance {
            method: "random".into(),
            seed: stream.seed(),
            ..Default::default()
        },
    )
}

/// Model-randomization sanity check result: mean SSIM per depth, with the
/// standard deviation over inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sanity {
    pub curve: Curve,
    pub std: Vec<f64>,
}

fn as_2d(map: Tensor) -> Result<Tensor> {
    let s = map.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape("sanity check", format!("map {s:?} is not a single 2-D map")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    map.reshape(vec![h, w])
}

/// Cascading randomization: depth `d` re-initializes the last `d` layers of
/// `model` (seeded by `seed`), recomputes `attributor(model, i)` for every
/// input `i < n_inputs`, and scores it against the depth-0 map with SSIM.
pub fn sanity_check<F>(model: &Model, attributor: F, n_inputs: usize, seed: u64, workers: usize) -> Result<Sanity>
where
    F: Fn(&Model, usize) -> Result<Tensor> + Sync + Send,
{
    if n_inputs == 0 {
        return Err(Error::invalid("sanity check needs at least one input"));
    }
    let layers = model.layer_ids();
    let original = par_map(workers, n_inputs, |i| as_2d(attributor(model, i)?))?;
    let mut ys = vec![];
    let mut std = vec![];
    for depth in 0..=layers.len() {
        let scores = if depth == 0 {
            original.iter().map(|m| ssim(m, m)).collect::<Result<Vec<_>>>()?
        } else {
            let randomized = model.randomize_from_layer(layers[layers.len() - depth], seed)?;
            par_map(workers, n_inputs, |i| ssim(&original[i], &as_2d(attributor(&randomized, i)?)?))?
        };
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        ys.push(mean);
        std.push((scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt());
    }
    Ok(Sanity {
        curve: Curve::new("sanity", (0..=layers.len()).map(|d| d as f64).collect(), ys)?,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear(Vec<f64>);

    impl DenseClassifier for Linear {
        fn logits_dense(&self, x: &Tensor) -> Result<Tensor> {
            let d = self.0.len();
            let s: Vec<f64> = x.data().chunks(d).map(|r| r.iter().zip(&self.0).map(|(a, b)| a * b).sum()).collect();
            Tensor::new([s.len(), 1], s)
        }

        fn target_gradient(&self, x: &Tensor, _target: usize) -> Result<Tensor> {
            Ok(Tensor::from_fn(x.shape().to_vec(), |k| self.0[k % self.0.len()]))
        }
    }

    #[test]
    fn linear_ig_is_exact() {
        let mut s = RngStream::new(1, 0);
        let w: Vec<f64> = (0..20).map(|_| s.normal()).collect();
        let m = Linear(w.clone());
        let x = s.uniform_tensor(&[20], 0.0, 1.0);
        let zero = Tensor::zeros([20]);
        for steps in [1, 7, 50] {
            let ig = integrated_gradients_raw(&m, &x, 0, steps, &zero).unwrap();
            for k in 0..20 {
                assert!((ig.data()[k] - w[k] * x.data()[k]).abs() < 1e-12);
            }
        }
        let same = integrated_gradients_raw(&m, &x, 0, 10, &x).unwrap();
        assert!(same.data().iter().all(|&v| v == 0.0));
        assert!(integrated_gradients_raw(&m, &x, 0, 0, &zero).is_err());
    }

    #[test]
    fn ig_map_groups_positions() {
        let m = Linear(vec![1.0, -3.0, 2.0, 2.0]);
        let x = Tensor::full([4], 1.0);
        let map = integrated_gradients(&m, &x, 0, 5, &Tensor::zeros([4]), &[2]).unwrap();
        // group sums −2 and 4 → |·| → 2, 4 → normalized 0, 1
        assert_eq!(map.values.data(), &[0.0, 1.0]);
        assert!(integrated_gradients(&m, &x, 0, 5, &Tensor::zeros([4]), &[3]).is_err());
    }

    #[test]
    fn random_attribution_is_uniform() {
        let mut s = RngStream::new(2, 0);
        let m = random_attribution(&[64, 64], &mut s);
        m.validate().unwrap();
        let mut v = m.values.data().to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let d = v
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        // asymptotic Kolmogorov critical value at p = 0.01
        assert!(d < 1.628 / n.sqrt(), "D = {d}");
        let again = random_attribution(&[64, 64], &mut RngStream::new(2, 0));
        assert_eq!(again, m);
    }

    #[test]
    fn constant_attributor_stays_identical() {
        let model = Model::cnn(3);
        let fixed = Tensor::from_fn([16, 16], |k| (k % 7) as f64 / 6.0);
        let s = sanity_check(&model, |_, _| Ok(fixed.clone()), 3, 9, 2).unwrap();
        assert_eq!(s.curve.xs.len(), model.layer_ids().len() + 1);
        for y in &s.curve.ys {
            assert!((y - 1.0).abs() < 1e-12);
        }
        assert!(s.std.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn gradient_attributor_changes_under_randomization() {
        let model = Model::cnn(4);
        let mut st = RngStream::new(5, 0);
        let inputs: Vec<Tensor> = (0..3).map(|_| st.uniform_tensor(&[1, 16, 16], 0.0, 1.0)).collect();
        let attr = |m: &Model, i: usize| {
            let x = &inputs[i];
            let ig = integrated_gradients(m, x, 0, 4, &Tensor::zeros([1, 16, 16]), &[16, 16])?;
            Ok(ig.values)
        };
        let s = sanity_check(&model, attr, 3, 11, 1).unwrap();
        assert!((s.curve.ys[0] - 1.0).abs() < 1e-12);
        assert!(*s.curve.ys.last().unwrap() < 0.99);
    }
}
