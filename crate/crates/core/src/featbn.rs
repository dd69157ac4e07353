//! Feature-level information bottleneck.
//!
//! Noise is injected at a hidden layer, `Z = λ ⊙ R + (1 − λ) ⊙ ε` with
//! `ε ~ N(μ_R, σ_R)`, and the mask `λ = sigmoid(α)` is fit to keep the target
//! prediction while passing as little information as possible.

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionMap, Provenance};
use crate::error::{Error, Result};
use crate::models::{Batch, Model};
use crate::optim::OptimState;
use crate::rng::{gaussian_sample, RngStream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Lower clamp for estimated standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// Elementwise Gaussian fit of activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Tensor,
    pub std: Tensor,
}

impl FeatureStats {
    /// Mean and unbiased standard deviation over the leading axis of `samples`,
    /// with the deviation clamped at [`SIGMA_FLOOR`].
    pub fn from_samples(samples: &Tensor) -> Result<Self> {
        if samples.rank() < 2 || samples.shape()[0] < 2 {
            return Err(Error::invalid("feature statistics need at least 2 samples"));
        }
        let n = samples.shape()[0];
        let shape = samples.shape()[1..].to_vec();
        let d: usize = shape.iter().product();
        let mut mean = vec![0.0; d];
        for s in samples.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for s in samples.data().chunks(d) {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|v| (v / (n - 1) as f64).sqrt().max(SIGMA_FLOOR)).collect();
        Ok(FeatureStats {
            mean: Tensor::from_raw(shape.clone(), mean),
            std: Tensor::from_raw(shape, std),
        })
    }
}

/// Statistics of the activations at `layer_id` over an estimation batch.
pub fn estimate_feature_stats(model: &Model, layer_id: &str, samples: &Batch) -> Result<FeatureStats> {
    let pos = model.layer_position(layer_id)?;
    estimate_stats_at(model, pos, samples)
}

/// Statistics at an arbitrary activation position.
pub fn estimate_stats_at(model: &Model, pos: usize, samples: &Batch) -> Result<FeatureStats> {
    if samples.len() < 2 {
        return Err(Error::invalid("feature statistics need at least 2 samples"));
    }
    let acts = model.activations_at(samples, pos)?;
    FeatureStats::from_samples(&acts)
}

/// Closed-form per-element KL between the bottleneck given the value and the
/// prior-conditioned marginal:
///
/// ```text
/// KL = log((1 − pλ)/(1 − λ)) + (1 − λ)²/(2(1 − pλ)²)
///      + (v − μ)²(λ − pλ)²/(2(1 − pλ)²σ²) − ½
/// ```
///
/// `prior_mask = 0` gives the feature-level KL against `N(μ, σ)`.
pub fn bottleneck_kl(mask: &Tensor, value: &Tensor, prior_mask: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    for (name, t) in [("value", value), ("prior_mask", prior_mask), ("mu", mu), ("sigma", sigma)] {
        if t.shape() != mask.shape() {
            return Err(Error::shape("bottleneck_kl", format!("{name} {:?} vs mask {:?}", t.shape(), mask.shape())));
        }
    }
    if mask.data().iter().any(|&l| l >= 1.0) {
        return Err(Error::invalid("bottleneck_kl: mask value of 1 leaves no noise"));
    }
    let n = mask.len();
    let data = (0..n)
        .map(|k| {
            let l = mask.data()[k];
            let p = prior_mask.data()[k];
            let q = 1.0 - p * l;
            let a = 1.0 - l;
            let d = value.data()[k] - mu.data()[k];
            let s = sigma.data()[k];
            (q / a).ln() + a * a / (2.0 * q * q) + d * d * (l - p * l).powi(2) / (2.0 * q * q * s * s) - 0.5
        })
        .collect();
    Ok(Tensor::from_raw(mask.shape().to_vec(), data))
}

/// Tape version of [`bottleneck_kl`] parameterized by mask logits `α`.
///
/// `1 − λ` is evaluated as `sigmoid(−α)` and `1 − pλ` as `(1 − p) + p(1 − λ)` so
/// saturated masks stay finite.
pub fn bottleneck_kl_tape(
    tape: &mut Tape,
    logits: Var,
    value: &Tensor,
    prior_mask: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    for t in [value, prior_mask, mu, sigma] {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("bottleneck_kl", format!("{:?} vs {:?}", t.shape(), shape)));
        }
    }
    let lam = tape.sigmoid(logits)?;
    let neg = tape.scale(logits, -1.0)?;
    let open = tape.sigmoid(neg)?; // 1 − λ
    let p = tape.constant(prior_mask.clone());
    let one_minus_p = tape.constant(prior_mask.map(|v| 1.0 - v));
    let p_open = tape.mul(p, open)?;
    let q = tape.add(one_minus_p, p_open)?; // 1 − pλ
    let log_q = tape.log(q)?;
    let log_a = tape.log(open)?;
    let t1 = tape.sub(log_q, log_a)?;
    let ratio = tape.div(open, q)?;
    let sq = tape.mul(ratio, ratio)?;
    let t2 = tape.scale(sq, 0.5)?;
    let diff = tape.mul(lam, one_minus_p)?; // λ − pλ
    let s = tape.div(diff, q)?;
    let s2 = tape.mul(s, s)?;
    let coef = value.zip_map(mu, |v, m| (v - m) * (v - m))?.zip_map(sigma, |d, s| d / (2.0 * s * s))?;
    let c = tape.constant(coef);
    let t3 = tape.mul(s2, c)?;
    let sum = tape.add(t1, t2)?;
    let sum = tape.add(sum, t3)?;
    tape.scale_shift(sum, 1.0, -0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBnConfig {
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
    pub noise_draws: usize,
    pub init_logit: f64,
}

impl Default for FeatureBnConfig {
    fn default() -> Self {
        FeatureBnConfig {
            beta: 10.0,
            steps: 10,
            lr: 1.0,
            noise_draws: 10,
            init_logit: 5.0,
        }
    }
}

/// Draws `Z* = λ* ⊙ R + (1 − λ*) ⊙ ε`, `ε ~ N(μ_R, σ_R)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZSampler {
    pub lambda: Tensor,
    pub features: Tensor,
    pub stats: FeatureStats,
}

impl ZSampler {
    pub fn sample(&self, stream: &mut RngStream) -> Result<Tensor> {
        let eps = gaussian_sample(stream, &self.stats.mean, &self.stats.std)?;
        let data = self
            .lambda
            .data()
            .iter()
            .zip(self.features.data())
            .zip(eps.data())
            .map(|((&l, &r), &e)| l * r + (1.0 - l) * e)
            .collect();
        Ok(Tensor::from_raw(self.lambda.shape().to_vec(), data))
    }

    /// `n` draws stacked along a new leading axis.
    pub fn sample_bank(&self, n: usize, stream: &mut RngStream) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("target bank must be nonempty"));
        }
        let draws = (0..n).map(|_| self.sample(stream)).collect::<Result<Vec<_>>>()?;
        Tensor::stack(&draws)
    }
}

#[derive(Clone, Debug)]
pub struct FeatureFit {
    /// λ* = sigmoid(α*)
    pub lambda: Tensor,
    pub logits: Tensor,
    /// Total loss before each update.
    pub losses: Vec<f64>,
    pub sampler: ZSampler,
}

/// Loss of the feature bottleneck for given logits, recorded on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn feature_loss(
    tape: &mut Tape,
    model: &Model,
    pos: usize,
    alpha: Var,
    features: &Tensor,
    target: usize,
    stats: &FeatureStats,
    beta: f64,
    noise: &Tensor,
) -> Result<Var> {
    let draws = noise.shape()[0];
    let bound = model.bind(tape, false);
    let lam = tape.sigmoid(alpha)?;
    let neg = tape.scale(alpha, -1.0)?;
    let open = tape.sigmoid(neg)?;
    let lam_t = tape.tile(lam, draws)?;
    let open_t = tape.tile(open, draws)?;
    let r = tape.constant(Tensor::stack(&vec![features.clone(); draws])?);
    let eps = tape.constant(noise.clone());
    let kept = tape.mul(lam_t, r)?;
    let noised = tape.mul(open_t, eps)?;
    let z = tape.add(kept, noised)?;
    let logits = model.forward_range(tape, &bound, z, pos, model.output_position())?;
    let ce = tape.softmax_cross_entropy(logits, &vec![target; draws])?;
    let zero = Tensor::zeros(features.shape().to_vec());
    let kl = bottleneck_kl_tape(tape, alpha, features, &zero, &stats.mean, &stats.std)?;
    let kl = tape.mean(kl)?;
    let kl = tape.scale(kl, beta)?;
    tape.add(ce, kl)
}

/// Fits the feature mask for one input (a batch of size 1) and target class.
pub fn fit_feature_bottleneck(
    model: &Model,
    layer_id: &str,
    input: &Batch,
    target: usize,
    stats: &FeatureStats,
    cfg: &FeatureBnConfig,
    stream: &mut RngStream,
) -> Result<FeatureFit> {
    if input.len() != 1 {
        return Err(Error::invalid("feature bottleneck explains one input at a time"));
    }
    if target >= model.num_classes() {
        return Err(Error::invalid(format!("target class {target} out of range")));
    }
    let pos = model.layer_position(layer_id)?;
    let features = model.activations_at(input, pos)?.row(0)?;
    if features.shape() != stats.mean.shape() {
        return Err(Error::shape("fit_feature_bottleneck", "statistics do not match the layer"));
    }
    let mut params = vec![Tensor::full(features.shape().to_vec(), cfg.init_logit)];
    let mut opt = OptimState::adam(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let draws = cfg.noise_draws.max(1);
    let mut noise_shape = vec![draws];
    noise_shape.extend_from_slice(features.shape());
    for _ in 0..cfg.steps {
        let noise = Tensor::stack(
            &(0..draws)
                .map(|_| gaussian_sample(stream, &stats.mean, &stats.std))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let mut tape = Tape::new();
        let alpha = tape.param(params[0].clone());
        let loss = feature_loss(&mut tape, model, pos, alpha, &features, target, stats, cfg.beta, &noise)?;
        let lv = tape.value(loss).item()?;
        losses.push(lv);
        let grads = tape.backward(loss)?;
        opt.step(&mut params, &[grads.get_or_zeros(alpha, features.shape())])?;
    }
    let logits = params.pop().expect("one parameter");
    let lambda = logits.map(crate::kernels::sigmoid_value);
    Ok(FeatureFit {
        sampler: ZSampler {
            lambda: lambda.clone(),
            features,
            stats: stats.clone(),
        },
        lambda,
        logits,
        losses,
    })
}

/// Mean over the channel axis: axis 0 of `[c, h, w]` maps, axis 1 of `[len, d]`
/// sequence maps.
pub fn channel_mean(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    match s.len() {
        3 => {
            let (c, hw) = (s[0], s[1] * s[2]);
            let mut out = vec![0.0; hw];
            for plane in t.data().chunks(hw) {
                for (o, v) in out.iter_mut().zip(plane) {
                    *o += v / c as f64;
                }
            }
            Ok(Tensor::from_raw(vec![s[1], s[2]], out))
        }
        2 => Ok(Tensor::from_raw(
            vec![s[0]],
            t.data().chunks(s[1]).map(|r| r.iter().sum::<f64>() / s[1] as f64).collect(),
        )),
        _ => Err(Error::shape("channel_mean", format!("{s:?}"))),
    }
}

/// Bilinear resize with half-pixel centers (edge-clamped).
pub fn bilinear_resize(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if src.rank() != 2 {
        return Err(Error::shape("bilinear_resize", format!("{:?}", src.shape())));
    }
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let coord = |o: usize, out: usize, inp: usize| {
        let x = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, x - i0 as f64)
    };
    let d = src.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
            let bot = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(Tensor::from_raw(vec![out_h, out_w], out))
}

/// Feature-level attribution: channel mean of λ*, resized to the input's spatial
/// shape (`[h, w]` images or `[len]` sequences) and min-max normalized.
pub fn iba_attribution(lambda: &Tensor, input_shape: &[usize]) -> Result<AttributionMap> {
    resize_channel_mean(lambda, input_shape)
}

/// Like [`iba_attribution`] but each element of λ* is weighted by its KL
/// capacity against the feature statistics.
pub fn iba_capacity_attribution(fit: &FeatureFit, input_shape: &[usize]) -> Result<AttributionMap> {
    let s = &fit.sampler;
    let zero = Tensor::zeros(s.lambda.shape().to_vec());
    let lam = s.lambda.map(|l| l.min(1.0 - 1e-12));
    let kl = bottleneck_kl(&lam, &s.features, &zero, &s.stats.mean, &s.stats.std)?;
    resize_channel_mean(&lam.zip_map(&kl, |l, k| l * k.max(0.0))?, input_shape)
}

fn resize_channel_mean(lambda: &Tensor, input_shape: &[usize]) -> Result<AttributionMap> {
    let m = channel_mean(lambda)?;
    let raw = match (m.rank(), input_shape) {
        (2, [h, w]) => bilinear_resize(&m, *h, *w)?,
        (1, [len]) => {
            let row = m.reshape(vec![1, m.len()])?;
            bilinear_resize(&row, 1, *len)?.reshape(vec![*len])?
        }
        _ => {
            return Err(Error::shape(
                "iba_attribution",
                format!("mask {:?} vs input {input_shape:?}", lambda.shape()),
            ))
        }
    };
    Ok(AttributionMap::from_raw(
        &raw,
        Provenance {
            method: "iba".into(),
            ..Default::default()
        },
    ))
}
