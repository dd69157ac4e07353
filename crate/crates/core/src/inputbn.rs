//! Input-level bottleneck.
//!
//! Two stages follow the feature bottleneck:
//!
//! 1. A generator mask `λ_G` over the input is fit adversarially so that the
//!    network prefix applied to `Z_G = λ_G ⊙ I + (1 − λ_G) ⊙ ε_G` looks like the
//!    feature-level bottleneck samples `Z*` to a Wasserstein critic.
//! 2. The final mask `Λ` is fit on `Z_I = Λ ⊙ Z_G + (1 − Λ) ⊙ ε` with the KL
//!    against the `λ_G`-conditioned prior.
//!
//! In stage 2 both masking steps share one noise draw `ε ~ N(μ_I, σ_I)`, which
//! is what makes `Z_I ~ N(λ_G Λ I + (1 − λ_G Λ) μ_I, (1 − λ_G Λ)² σ_I²)` hold.

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionMap, Provenance};
use crate::error::{Error, Result, StageExt};
use crate::featbn::{channel_mean, fit_feature_bottleneck, FeatureBnConfig, FeatureFit, FeatureStats};
use crate::kernels::sigmoid_value;
use crate::models::{Batch, Model};
use crate::optim::OptimState;
use crate::rng::{gaussian_sample, RngStream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `n` jittered copies of `input` stacked on a new leading axis.
///
/// The jitter is `N(0, (scale · std(input))²)` per element; `range` clamps the
/// result (e.g. `[0, 1]` for pixels).
pub fn sample_local_inputs(
    input: &Tensor,
    n: usize,
    scale: f64,
    range: Option<(f64, f64)>,
    stream: &mut RngStream,
) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("need at least one local sample"));
    }
    let mean = input.mean();
    let var = input.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / input.len() as f64;
    let sd = scale * var.sqrt();
    let mut data = Vec::with_capacity(n * input.len());
    for _ in 0..n {
        for &v in input.data() {
            let x = v + sd * stream.normal();
            data.push(match range {
                Some((lo, hi)) => x.clamp(lo, hi),
                None => x,
            });
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(input.shape());
    Ok(Tensor::from_raw(shape, data))
}

/// `n` draws of `Z*` from a fitted feature bottleneck.
pub fn sample_target_bank(fit: &FeatureFit, n: usize, stream: &mut RngStream) -> Result<Tensor> {
    fit.sampler.sample_bank(n, stream)
}

/// Wasserstein critic over feature-shaped samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    arch: CriticArch,
    params: Vec<Tensor>,
    clip: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CriticArch {
    /// `[c, h, w]`: three 3×3 convs (the first two pooled), then two dense layers.
    Conv { c: usize, h: usize, w: usize },
    /// `[len, d]`: one GRU layer, linear head on the last state.
    Recurrent { d: usize },
    /// `[d]`: two dense layers.
    Dense { d: usize },
}

const CRITIC_CONV: usize = 8;
const CRITIC_HIDDEN: usize = 32;
const CRITIC_GRU: usize = 16;

impl Critic {
    /// Critic for per-sample feature shape `shape`, initialized uniformly on
    /// `±1/√fan_in` and then clipped to `[−clip, clip]`.
    pub fn new(shape: &[usize], clip: f64, stream: &mut RngStream) -> Result<Self> {
        if !(clip > 0.0) {
            return Err(Error::invalid("critic clip must be positive"));
        }
        let (arch, specs): (CriticArch, Vec<(Vec<usize>, usize)>) = match *shape {
            [c, h, w] => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::shape("critic", format!("spatial dims {h}×{w} not divisible by 4")));
                }
                let k = CRITIC_CONV;
                let flat = k * (h / 4) * (w / 4);
                (
                    CriticArch::Conv { c, h, w },
                    vec![
                        (vec![k, c, 3, 3], c * 9),
                        (vec![k], c * 9),
                        (vec![k, k, 3, 3], k * 9),
                        (vec![k], k * 9),
                        (vec![k, k, 3, 3], k * 9),
                        (vec![k], k * 9),
                        (vec![flat, CRITIC_HIDDEN], flat),
                        (vec![CRITIC_HIDDEN], flat),
                        (vec![CRITIC_HIDDEN, 1], CRITIC_HIDDEN),
                        (vec![1], CRITIC_HIDDEN),
                    ],
                )
            }
            [_, d] => {
                let g = CRITIC_GRU;
                (
                    CriticArch::Recurrent { d },
                    vec![
                        (vec![d, 3 * g], g),
                        (vec![g, 3 * g], g),
                        (vec![3 * g], g),
                        (vec![3 * g], g),
                        (vec![g, 1], g),
                        (vec![1], g),
                    ],
                )
            }
            [d] => (
                CriticArch::Dense { d },
                vec![
                    (vec![d, CRITIC_HIDDEN], d),
                    (vec![CRITIC_HIDDEN], d),
                    (vec![CRITIC_HIDDEN, 1], CRITIC_HIDDEN),
                    (vec![1], CRITIC_HIDDEN),
                ],
            ),
            _ => return Err(Error::shape("critic", format!("unsupported feature shape {shape:?}"))),
        };
        let params = specs
            .into_iter()
            .map(|(s, fan_in)| {
                let b = 1.0 / (fan_in as f64).sqrt();
                stream.uniform_tensor(&s, -b, b).map(|v| v.clamp(-clip, clip))
            })
            .collect();
        Ok(Critic { arch, params, clip })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip
    }

    /// Largest absolute weight.
    pub fn max_abs_weight(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.data())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn clip_weights(&mut self) {
        let c = self.clip;
        for p in &mut self.params {
            *p = p.map(|v| v.clamp(-c, c));
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Scores `x: [n, ...shape]`, giving `[n, 1]`.
    fn score(&self, tape: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        match self.arch {
            CriticArch::Conv { h, w, .. } => {
                let mut a = x;
                for (layer, pool) in [(0, true), (1, true), (2, false)] {
                    let c = tape.conv2d(a, v[2 * layer], v[2 * layer + 1])?;
                    a = tape.relu(c)?;
                    if pool {
                        a = tape.maxpool2(a)?;
                    }
                }
                let flat = tape.reshape(a, &[n, CRITIC_CONV * (h / 4) * (w / 4)])?;
                let z = tape.matmul(flat, v[6])?;
                let z = tape.add_bias(z, v[7], 1)?;
                let z = tape.relu(z)?;
                let z = tape.matmul(z, v[8])?;
                tape.add_bias(z, v[9], 1)
            }
            CriticArch::Recurrent { .. } => {
                let len = tape.shape(x)[1];
                let mut hs = tape.constant(Tensor::zeros([n, CRITIC_GRU]));
                for t in 0..len {
                    let xt = tape.index_axis(x, 1, t)?;
                    hs = tape.gru_cell(xt, hs, v[0], v[1], v[2], v[3])?;
                }
                let z = tape.matmul(hs, v[4])?;
                tape.add_bias(z, v[5], 1)
            }
            CriticArch::Dense { .. } => {
                let z = tape.matmul(x, v[0])?;
                let z = tape.add_bias(z, v[1], 1)?;
                let z = tape.relu(z)?;
                let z = tape.matmul(z, v[2])?;
                tape.add_bias(z, v[3], 1)
            }
        }
    }

    /// Mean score over a batch of samples.
    pub fn mean_score(&self, samples: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let x = tape.constant(samples.clone());
        let s = self.score(&mut tape, &v, x)?;
        Ok(tape.value(s).mean())
    }

    /// One RMSProp step on `mean(critic(fake)) − mean(critic(real))`, followed by
    /// clipping. Returns the loss before the step.
    pub fn train_step(&mut self, opt: &mut OptimState, real: &Tensor, fake: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, true);
        let r = tape.constant(real.clone());
        let f = tape.constant(fake.clone());
        let sr = self.score(&mut tape, &v, r)?;
        let sf = self.score(&mut tape, &v, f)?;
        let mr = tape.mean(sr)?;
        let mf = tape.mean(sf)?;
        let loss = tape.sub(mf, mr)?;
        let lv = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = v
            .iter()
            .zip(&self.params)
            .map(|(&var, p)| grads.get_or_zeros(var, p.shape()))
            .collect();
        opt.step(&mut self.params, &g)?;
        self.clip_weights();
        Ok(lv)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// RMSProp learning rate of the generator parameters.
    pub gen_lr: f64,
    /// RMSProp learning rate of the critic.
    pub critic_lr: f64,
    pub clip: f64,
    /// Generator updates per critic update.
    pub gen_steps_per_critic: usize,
    /// Jittered inputs used to measure the Wasserstein estimate.
    pub eval_samples: usize,
    /// Local-set jitter as a fraction of the input's standard deviation.
    pub jitter: f64,
    /// Initial generator mask logit.
    pub init_logit: f64,
    /// Critic updates on the initial generator before adversarial training.
    pub critic_warmup: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            epochs: 20,
            batch_size: 16,
            gen_lr: 1e-2,
            critic_lr: 5e-5,
            clip: 0.01,
            gen_steps_per_critic: 5,
            eval_samples: 64,
            jitter: 0.05,
            init_logit: 0.0,
            critic_warmup: 100,
        }
    }
}

/// Fitted generator: `Z_G = λ_G ⊙ I + (1 − λ_G) ⊙ N(μ_G, σ_G)`.
#[derive(Clone, Debug)]
pub struct GenEstimator {
    pub lambda: Tensor,
    pub logits: Tensor,
    pub mu: Tensor,
    /// σ_G = softplus(ρ_G)
    pub sigma: Tensor,
    /// `|E critic(real) − E critic(fake)|` before training, then after each epoch.
    pub wasserstein: Vec<f64>,
    /// Critic loss at each critic update.
    pub critic_losses: Vec<f64>,
    pub critic: Critic,
}

fn softplus_inv(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Builds `Z_G` for a batch of local inputs on the tape.
fn generator_sample(tape: &mut Tape, gen: [Var; 3], local: &Tensor, eta: Tensor) -> Result<Var> {
    let [alpha, mu, rho] = gen;
    let n = local.shape()[0];
    let lam = tape.sigmoid(alpha)?;
    let neg = tape.scale(alpha, -1.0)?;
    let open = tape.sigmoid(neg)?;
    let sigma = tape.softplus(rho)?;
    let lam = tape.tile(lam, n)?;
    let open = tape.tile(open, n)?;
    let mu = tape.tile(mu, n)?;
    let sigma = tape.tile(sigma, n)?;
    let eps = tape.gaussian_reparam(mu, sigma, eta)?;
    let x = tape.constant(local.clone());
    let kept = tape.mul(lam, x)?;
    let noised = tape.mul(open, eps)?;
    tape.add(kept, noised)
}

/// Network prefix used by the adversarial fit: maps `Z_G` batches to the
/// bottleneck layer.
pub type Prefix<'a> = dyn Fn(&mut Tape, Var) -> Result<Var> + 'a;

/// Adversarial fit of the generator against a target bank, with an arbitrary
/// prefix. `input_stats` seeds `μ_G`, `σ_G`.
pub fn fit_gen_with_prefix(
    prefix: &Prefix<'_>,
    input: &Tensor,
    range: Option<(f64, f64)>,
    input_stats: &FeatureStats,
    bank: &Tensor,
    cfg: &GanConfig,
    stream: &mut RngStream,
) -> Result<GenEstimator> {
    if bank.rank() < 2 || bank.shape()[0] == 0 {
        return Err(Error::invalid("target bank must be nonempty"));
    }
    if cfg.batch_size == 0 || cfg.gen_steps_per_critic == 0 || cfg.eval_samples == 0 {
        return Err(Error::invalid("GAN batch sizes and schedule must be positive"));
    }
    if input_stats.mean.shape() != input.shape() {
        return Err(Error::shape("fit_gen_estimator", "input statistics do not match the input"));
    }
    let shape = input.shape().to_vec();
    let bank_n = bank.shape()[0];
    let mut critic = Critic::new(&bank.shape()[1..], cfg.clip, &mut stream.derive(1))?;
    let mut gen = vec![
        Tensor::full(shape.clone(), cfg.init_logit),
        input_stats.mean.clone(),
        input_stats.std.map(softplus_inv),
    ];
    let mut gen_opt = OptimState::rmsprop(cfg.gen_lr);
    let mut critic_opt = OptimState::rmsprop(cfg.critic_lr);

    // Fixed inputs for the Wasserstein estimate so the trace is comparable
    // across epochs.
    let mut eval_stream = stream.derive(2);
    let eval_local = sample_local_inputs(input, cfg.eval_samples, cfg.jitter, range, &mut eval_stream)?;
    let eval_eta = eval_stream.normal_tensor(eval_local.shape());
    let fake_eval = |gen: &[Tensor]| -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = [
            tape.constant(gen[0].clone()),
            tape.constant(gen[1].clone()),
            tape.constant(gen[2].clone()),
        ];
        let z = generator_sample(&mut tape, vars, &eval_local, eval_eta.clone())?;
        let f = prefix(&mut tape, z)?;
        Ok(tape.value(f).clone())
    };
    let estimate = |critic: &Critic, gen: &[Tensor]| -> Result<f64> {
        Ok((critic.mean_score(bank)? - critic.mean_score(&fake_eval(gen)?)?).abs())
    };

    let mut critic_losses = Vec::new();
    let mut train_stream = stream.derive(3);
    for _ in 0..cfg.critic_warmup {
        let local = sample_local_inputs(input, cfg.batch_size, cfg.jitter, range, &mut train_stream)?;
        let eta = train_stream.normal_tensor(local.shape());
        let mut tape = Tape::new();
        let vars = [
            tape.constant(gen[0].clone()),
            tape.constant(gen[1].clone()),
            tape.constant(gen[2].clone()),
        ];
        let z = generator_sample(&mut tape, vars, &local, eta)?;
        let fake = prefix(&mut tape, z)?;
        let fake = tape.value(fake).clone();
        let idx = train_stream.sample_indices(bank_n, cfg.batch_size.min(bank_n));
        let rows = idx.iter().map(|&i| bank.row(i)).collect::<Result<Vec<_>>>()?;
        let lv = critic.train_step(&mut critic_opt, &Tensor::stack(&rows)?, &fake)?;
        critic_losses.push(lv);
    }
    let mut wasserstein = vec![estimate(&critic, &gen)?];
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..bank_n).collect();
        train_stream.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let local = sample_local_inputs(input, cfg.batch_size, cfg.jitter, range, &mut train_stream)?;
            let eta = train_stream.normal_tensor(local.shape());
            let mut tape = Tape::new();
            let vars = [
                tape.param(gen[0].clone()),
                tape.param(gen[1].clone()),
                tape.param(gen[2].clone()),
            ];
            let cv = critic.bind(&mut tape, false);
            let z = generator_sample(&mut tape, vars, &local, eta)?;
            let fake = prefix(&mut tape, z)?;
            let s = critic.score(&mut tape, &cv, fake)?;
            let m = tape.mean(s)?;
            let loss = tape.scale(m, -1.0)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars
                .iter()
                .zip(&gen)
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            gen_opt.step(&mut gen, &g)?;
            step += 1;

            if step % cfg.gen_steps_per_critic == 0 {
                let fake = tape.value(fake).clone();
                let rows = chunk.iter().map(|&i| bank.row(i)).collect::<Result<Vec<_>>>()?;
                let real = Tensor::stack(&rows)?;
                let lv = critic.train_step(&mut critic_opt, &real, &fake)?;
                if !lv.is_finite() {
                    return Err(Error::NonFinite("critic loss".into()));
                }
                critic_losses.push(lv);
            }
        }
        wasserstein.push(estimate(&critic, &gen)?);
    }
    let [logits, mu, rho]: [Tensor; 3] = gen.try_into().expect("three generator tensors");
    Ok(GenEstimator {
        lambda: logits.map(sigmoid_value),
        logits,
        mu,
        sigma: rho.map(softplus),
        wasserstein,
        critic_losses,
        critic,
    })
}

/// Adversarial fit of `λ_G` so that the prefix up to `layer_id` maps `Z_G` onto
/// the target bank's distribution.
#[allow(clippy::too_many_arguments)]
pub fn fit_gen_estimator(
    model: &Model,
    layer_id: &str,
    input: &Tensor,
    range: Option<(f64, f64)>,
    input_stats: &FeatureStats,
    bank: &Tensor,
    cfg: &GanConfig,
    stream: &mut RngStream,
) -> Result<GenEstimator> {
    let pos = model.layer_position(layer_id)?;
    let start = model.dense_input_position();
    let prefix = |tape: &mut Tape, z: Var| -> Result<Var> {
        let bound = model.bind(tape, false);
        model.forward_range(tape, &bound, z, start, pos)
    };
    fit_gen_with_prefix(&prefix, input, range, input_stats, bank, cfg, stream)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBnConfig {
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
    pub noise_draws: usize,
    pub init_logit: f64,
}

impl Default for InputBnConfig {
    fn default() -> Self {
        InputBnConfig {
            beta: 20.0,
            steps: 60,
            lr: 0.5,
            noise_draws: 10,
            init_logit: 5.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputFit {
    /// Λ* = sigmoid(final logits)
    pub mask: Tensor,
    pub logits: Tensor,
    /// Total loss before each update.
    pub losses: Vec<f64>,
}

/// `draws` samples of `Z_I = Λ ⊙ Z_G + (1 − Λ) ⊙ ε` with `Z_G = λ_G ⊙ I + (1 − λ_G) ⊙ ε`
/// and one shared `ε ~ N(μ_I, σ_I)` per draw.
pub fn compose_input_bottleneck(
    mask: &Tensor,
    lambda_g: &Tensor,
    input: &Tensor,
    stats: &FeatureStats,
    draws: usize,
    stream: &mut RngStream,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(draws * input.len());
    for _ in 0..draws {
        let eps = gaussian_sample(stream, &stats.mean, &stats.std)?;
        for k in 0..input.len() {
            let (l, p, e) = (mask.data()[k], lambda_g.data()[k], eps.data()[k]);
            let zg = p * input.data()[k] + (1.0 - p) * e;
            out.push(l * zg + (1.0 - l) * e);
        }
    }
    let mut shape = vec![draws];
    shape.extend_from_slice(input.shape());
    Ok(Tensor::from_raw(shape, out))
}

/// Input bottleneck loss for logits `alpha` with pre-drawn noise `eps: [draws, ...]`.
#[allow(clippy::too_many_arguments)]
pub fn input_loss(
    tape: &mut Tape,
    model: &Model,
    alpha: Var,
    input: &Tensor,
    target: usize,
    lambda_g: &Tensor,
    stats: &FeatureStats,
    beta: f64,
    eps: &Tensor,
) -> Result<Var> {
    let draws = eps.shape()[0];
    let bound = model.bind(tape, false);
    let lam = tape.sigmoid(alpha)?;
    let neg = tape.scale(alpha, -1.0)?;
    let open = tape.sigmoid(neg)?;
    let lam_t = tape.tile(lam, draws)?;
    let open_t = tape.tile(open, draws)?;
    let d = input.len();
    let mut zg = Vec::with_capacity(eps.len());
    for row in eps.data().chunks(d) {
        for k in 0..d {
            let p = lambda_g.data()[k];
            zg.push(p * input.data()[k] + (1.0 - p) * row[k]);
        }
    }
    let zg = tape.constant(Tensor::from_raw(eps.shape().to_vec(), zg));
    let e = tape.constant(eps.clone());
    let kept = tape.mul(lam_t, zg)?;
    let noised = tape.mul(open_t, e)?;
    let z = tape.add(kept, noised)?;
    let logits = model.forward_range(tape, &bound, z, model.dense_input_position(), model.output_position())?;
    let ce = tape.softmax_cross_entropy(logits, &vec![target; draws])?;
    let kl = crate::featbn::bottleneck_kl_tape(tape, alpha, input, lambda_g, &stats.mean, &stats.std)?;
    let kl = tape.mean(kl)?;
    let kl = tape.scale(kl, beta)?;
    tape.add(ce, kl)
}

/// Fits the final input mask `Λ` for one dense input (no batch axis).
#[allow(clippy::too_many_arguments)]
pub fn fit_input_bottleneck(
    model: &Model,
    input: &Tensor,
    target: usize,
    lambda_g: &Tensor,
    stats: &FeatureStats,
    cfg: &InputBnConfig,
    stream: &mut RngStream,
) -> Result<InputFit> {
    if target >= model.num_classes() {
        return Err(Error::invalid(format!("target class {target} out of range")));
    }
    for t in [lambda_g, &stats.mean, &stats.std] {
        if t.shape() != input.shape() {
            return Err(Error::shape("fit_input_bottleneck", format!("{:?} vs input {:?}", t.shape(), input.shape())));
        }
    }
    let mut params = vec![Tensor::full(input.shape().to_vec(), cfg.init_logit)];
    let mut opt = OptimState::adam(cfg.lr);
    let draws = cfg.noise_draws.max(1);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let eps = Tensor::stack(
            &(0..draws)
                .map(|_| gaussian_sample(stream, &stats.mean, &stats.std))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let mut tape = Tape::new();
        let alpha = tape.param(params[0].clone());
        let loss = input_loss(&mut tape, model, alpha, input, target, lambda_g, stats, cfg.beta, &eps)?;
        losses.push(tape.value(loss).item()?);
        let grads = tape.backward(loss)?;
        opt.step(&mut params, &[grads.get_or_zeros(alpha, input.shape())])?;
    }
    let logits = params.pop().expect("one parameter");
    Ok(InputFit {
        mask: logits.map(sigmoid_value),
        logits,
        losses,
    })
}

/// Settings of the full pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputIbaConfig {
    pub layer: String,
    pub feature: FeatureBnConfig,
    pub bank_size: usize,
    pub gan: GanConfig,
    pub input: InputBnConfig,
}

impl InputIbaConfig {
    /// Defaults with the bottleneck at `layer`.
    pub fn for_layer(layer: &str) -> Self {
        InputIbaConfig {
            layer: layer.to_string(),
            feature: FeatureBnConfig::default(),
            bank_size: 200,
            gan: GanConfig::default(),
            input: InputBnConfig::default(),
        }
    }

    /// Defaults for a model kind: `conv2` for the CNN, `rnn` for the GRU.
    pub fn for_model(model: &Model) -> Self {
        match model.kind() {
            crate::models::ModelKind::Cnn => Self::for_layer("conv2"),
            crate::models::ModelKind::Rnn => Self::for_layer("rnn"),
        }
    }
}

/// Everything produced while explaining one input.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub map: AttributionMap,
    pub feature_mask: Tensor,
    pub gen: GenEstimator,
    pub input_fit: InputFit,
}

/// Shared, read-only state for explaining many inputs of one model: the model,
/// the configuration and the dataset statistics at the bottleneck layer and at
/// the dense input.
#[derive(Clone, Debug)]
pub struct Explainer<'m> {
    model: &'m Model,
    cfg: InputIbaConfig,
    feature_stats: FeatureStats,
    input_stats: FeatureStats,
}

/// Stream id offset for per-sample explanation streams.
const EXPLAIN_STREAM: u64 = 1 << 32;

impl<'m> Explainer<'m> {
    /// Estimates both sets of statistics from `reference` (normally the training
    /// split).
    pub fn new(model: &'m Model, reference: &Batch, cfg: InputIbaConfig) -> Result<Self> {
        let pos = model.layer_position(&cfg.layer).stage("feature statistics")?;
        let feature_stats = crate::featbn::estimate_stats_at(model, pos, reference).stage("feature statistics")?;
        let input_stats =
            crate::featbn::estimate_stats_at(model, model.dense_input_position(), reference).stage("input statistics")?;
        Ok(Explainer {
            model,
            cfg,
            feature_stats,
            input_stats,
        })
    }

    pub fn config(&self) -> &InputIbaConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// The same explainer over another model (e.g. a randomized copy), with its
    /// statistics re-estimated.
    pub fn with_model<'n>(&self, model: &'n Model, reference: &Batch) -> Result<Explainer<'n>> {
        Explainer::new(model, reference, self.cfg.clone())
    }

    fn input_range(&self) -> Option<(f64, f64)> {
        match self.model.kind() {
            crate::models::ModelKind::Cnn => Some((0.0, 1.0)),
            crate::models::ModelKind::Rnn => None,
        }
    }

    /// Explains one input (a batch of size 1) for class `target`. The result is a
    /// pure function of `(seed, index)` and the explainer state.
    pub fn explain(&self, sample: &Batch, target: usize, seed: u64, index: u64) -> Result<Explanation> {
        if sample.len() != 1 {
            return Err(Error::invalid("explain takes a batch of one input"));
        }
        let root = RngStream::new(seed, EXPLAIN_STREAM + index);
        let model = self.model;
        let fit = fit_feature_bottleneck(
            model,
            &self.cfg.layer,
            sample,
            target,
            &self.feature_stats,
            &self.cfg.feature,
            &mut root.derive(1),
        )
        .stage("feature bottleneck")?;
        let bank = sample_target_bank(&fit, self.cfg.bank_size, &mut root.derive(2)).stage("target bank")?;
        let input = model
            .activations_at(sample, model.dense_input_position())?
            .row(0)
            .stage("input")?;
        let gen = fit_gen_estimator(
            model,
            &self.cfg.layer,
            &input,
            self.input_range(),
            &self.input_stats,
            &bank,
            &self.cfg.gan,
            &mut root.derive(3),
        )
        .stage("generator")?;
        let input_fit = fit_input_bottleneck(
            model,
            &input,
            target,
            &gen.lambda,
            &self.input_stats,
            &self.cfg.input,
            &mut root.derive(4),
        )
        .stage("input bottleneck")?;
        let map = mask_to_map(&input_fit.mask, seed)?;
        Ok(Explanation {
            map,
            feature_mask: fit.lambda,
            gen,
            input_fit,
        })
    }
}

/// Per-position channel mean of an input mask (`[1, h, w]` → `[h, w]`,
/// `[len, d]` → `[len]`), min-max normalized.
pub fn mask_to_map(mask: &Tensor, seed: u64) -> Result<AttributionMap> {
    let m = channel_mean(mask)?;
    Ok(AttributionMap::from_raw(
        &m,
        Provenance {
            method: "inputiba".into(),
            seed,
            config_hash: String::new(),
        },
    ))
}

/// One-shot pipeline: statistics from `reference`, then [`Explainer::explain`]
/// with sample index 0.
pub fn input_iba(
    model: &Model,
    reference: &Batch,
    sample: &Batch,
    target: usize,
    cfg: &InputIbaConfig,
    seed: u64,
) -> Result<AttributionMap> {
    Ok(Explainer::new(model, reference, cfg.clone())?
        .explain(sample, target, seed, 0)?
        .map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    #[test]
    fn zero_jitter_copies() {
        let x = Tensor::new([3], vec![0.1, 0.5, 0.9]).unwrap();
        let s = sample_local_inputs(&x, 4, 0.0, Some((0.0, 1.0)), &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(s.shape(), &[4, 3]);
        for r in 0..4 {
            assert_eq!(s.row(r).unwrap(), x);
        }
    }

    #[test]
    fn jitter_respects_range() {
        let x = Tensor::new([4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = sample_local_inputs(&x, 500, 3.0, Some((0.0, 1.0)), &mut RngStream::new(2, 1)).unwrap();
        assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn local_mean_within_clt_bound() {
        let x = Tensor::new([4], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let n = 10_000;
        let s = sample_local_inputs(&x, n, 0.05, None, &mut RngStream::new(3, 1)).unwrap();
        let sd = 0.05 * (0.05f64).sqrt(); // population std of x is sqrt(0.05)
        for k in 0..4 {
            let m: f64 = (0..n).map(|i| s.data()[i * 4 + k]).sum::<f64>() / n as f64;
            assert!((m - x.data()[k]).abs() < 3.0 * sd / 100.0, "{k}: {m}");
        }
    }

    #[test]
    fn critic_weights_start_clipped() {
        for shape in [vec![16, 16, 16], vec![32, 32], vec![5]] {
            let c = Critic::new(&shape, 0.01, &mut RngStream::new(4, 0)).unwrap();
            assert!(c.max_abs_weight() <= 0.01);
        }
        assert!(Critic::new(&[3, 6, 6], 0.01, &mut RngStream::new(4, 0)).is_err());
    }

    #[test]
    fn critic_clip_after_every_step() {
        let mut s = RngStream::new(5, 0);
        let mut c = Critic::new(&[4, 8, 8], 0.01, &mut s).unwrap();
        let mut opt = OptimState::rmsprop(0.5);
        let real = s.normal_tensor(&[6, 4, 8, 8]);
        let fake = s.normal_tensor(&[6, 4, 8, 8]).map(|v| v + 1.0);
        for _ in 0..5 {
            c.train_step(&mut opt, &real, &fake).unwrap();
            assert!(c.max_abs_weight() <= 0.01 + 1e-15);
        }
        // a large step must actually hit the bound
        assert!((c.max_abs_weight() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn recurrent_critic_scores_per_sample() {
        let mut s = RngStream::new(6, 0);
        let c = Critic::new(&[5, 3], 0.01, &mut s).unwrap();
        let mut tape = Tape::new();
        let v = c.bind(&mut tape, false);
        let x = tape.constant(s.normal_tensor(&[7, 5, 3]));
        let y = c.score(&mut tape, &v, x).unwrap();
        assert_eq!(tape.shape(y), &[7, 1]);
    }

    #[test]
    fn generator_gradients_reach_noise_parameters() {
        let mut s = RngStream::new(7, 0);
        let local = s.uniform_tensor(&[3, 4], 0.0, 1.0);
        let eta = s.normal_tensor(&[3, 4]);
        let gen = [
            s.normal_tensor(&[4]),
            s.normal_tensor(&[4]),
            s.normal_tensor(&[4]),
        ];
        let mut tape = Tape::new();
        let vars = [tape.param(gen[0].clone()), tape.param(gen[1].clone()), tape.param(gen[2].clone())];
        let z = generator_sample(&mut tape, vars, &local, eta.clone()).unwrap();
        let sq = tape.mul(z, z).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        for v in &vars[1..] {
            assert!(g.get(*v).unwrap().data().iter().any(|&x| x.abs() > 1e-6));
        }
        // gradient check in each generator tensor with the others held fixed
        for which in 0..3 {
            let f = |t: &mut Tape, x: Var| {
                let mut vs = [
                    t.constant(gen[0].clone()),
                    t.constant(gen[1].clone()),
                    t.constant(gen[2].clone()),
                ];
                vs[which] = x;
                let z = generator_sample(t, vs, &local, eta.clone())?;
                let sq = t.mul(z, z)?;
                t.sum(sq)
            };
            let r = grad_check(f, &gen[which], 1e-6, 1e-6).unwrap();
            assert!(r.passed, "tensor {which}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn composed_draws_match_closed_form() {
        let mut s = RngStream::new(8, 0);
        let k = 3;
        let mask = s.uniform_tensor(&[k], 0.05, 0.95);
        let lg = s.uniform_tensor(&[k], 0.05, 0.95);
        let input = s.normal_tensor(&[k]);
        let stats = FeatureStats {
            mean: s.normal_tensor(&[k]),
            std: s.uniform_tensor(&[k], 0.5, 2.0),
        };
        let n = 200_000;
        let z = compose_input_bottleneck(&mask, &lg, &input, &stats, n, &mut s).unwrap();
        for j in 0..k {
            let q = 1.0 - lg.data()[j] * mask.data()[j];
            let want_mean = (1.0 - q) * input.data()[j] + q * stats.mean.data()[j];
            let want_var = q * q * stats.std.data()[j].powi(2);
            let xs: Vec<f64> = (0..n).map(|i| z.data()[i * k + j]).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
            assert!((m - want_mean).abs() < 0.02 * want_mean.abs().max(0.5), "{m} vs {want_mean}");
            assert!((v / want_var - 1.0).abs() < 0.02, "{v} vs {want_var}");
        }
    }

    #[test]
    fn empty_bank_rejected() {
        let prefix = |_: &mut Tape, z: Var| Ok(z);
        let x = Tensor::full([4], 0.5);
        let stats = FeatureStats {
            mean: Tensor::zeros([4]),
            std: Tensor::full([4], 1.0),
        };
        let bank = Tensor::zeros([1, 4]).reshape(vec![1, 4]).unwrap();
        assert!(fit_gen_with_prefix(&prefix, &x, None, &stats, &bank.row(0).unwrap(), &GanConfig::default(), &mut RngStream::new(0, 0)).is_err());
    }
}
