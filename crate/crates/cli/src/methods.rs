//! Dataset access and the attribution methods behind `attribute` and
//! `sanity-check`.

use piba_core::attribution::{AttributionMap, Provenance};
use piba_core::eval::{dense_input, integrated_gradients, random_attribution};
use piba_core::featbn::{estimate_feature_stats, fit_feature_bottleneck, iba_attribution, FeatureBnConfig, FeatureStats};
use piba_core::inputbn::{Explainer, GanConfig, InputBnConfig, InputIbaConfig};
use piba_core::models::{Batch, Model, ModelKind};
use piba_core::synthdata::{BBox, Dataset, Split};
use piba_core::{RngStream, Tensor};

use crate::config::Config;
use crate::error::{CliError, CliResult};

pub fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(CliError::Config(format!("unknown split `{s}`"))),
    }
}

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

pub fn split_len(ds: &Dataset, split: Split) -> usize {
    match ds {
        Dataset::Patch(d) => d.get(split).len(),
        Dataset::Token(d) => d.get(split).len(),
    }
}

/// Sample `i` of a split as a batch of one.
pub fn sample(ds: &Dataset, split: Split, i: usize) -> CliResult<Batch> {
    if i >= split_len(ds, split) {
        return Err(CliError::Config(format!("index {i} out of range for the {} split", split_name(split))));
    }
    Ok(match ds {
        Dataset::Patch(d) => Batch::Images(d.get(split).image(i)?.reshape(vec![1, 1, 16, 16])?),
        Dataset::Token(d) => Batch::Tokens(vec![d.get(split).sequences[i].clone()]),
    })
}

pub fn label(ds: &Dataset, split: Split, i: usize) -> usize {
    match ds {
        Dataset::Patch(d) => d.get(split).labels[i],
        Dataset::Token(d) => d.get(split).labels[i],
    }
}

pub fn bbox(ds: &Dataset, split: Split, i: usize) -> Option<BBox> {
    match ds {
        Dataset::Patch(d) => Some(d.get(split).bboxes[i]),
        Dataset::Token(_) => None,
    }
}

/// The whole training split, used for dataset statistics.
pub fn reference(ds: &Dataset) -> Batch {
    match ds {
        Dataset::Patch(d) => Batch::Images(d.train.images.clone()),
        Dataset::Token(d) => Batch::Tokens(d.train.sequences.clone()),
    }
}

pub fn model_kind(ds: &Dataset) -> ModelKind {
    match ds {
        Dataset::Patch(_) => ModelKind::Cnn,
        Dataset::Token(_) => ModelKind::Rnn,
    }
}

/// Map shape for a model: `[h, w]` pixels or `[len]` tokens.
pub fn map_shape(model: &Model, sample: &Batch) -> CliResult<Vec<usize>> {
    let x = dense_input(model, sample)?;
    Ok(match model.kind() {
        ModelKind::Cnn => x.shape()[1..].to_vec(),
        ModelKind::Rnn => vec![x.shape()[0]],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    InputIba,
    Iba,
    Ig,
    Random,
}

impl Method {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "inputiba" => Ok(Method::InputIba),
            "iba" => Ok(Method::Iba),
            "ig" => Ok(Method::Ig),
            "random" => Ok(Method::Random),
            _ => Err(CliError::Config(format!("unknown method `{s}`"))),
        }
    }
}

/// InputIBA settings from the `attribute` / `sanity-check` keys.
pub fn inputiba_config(cfg: &Config, model: &Model) -> CliResult<InputIbaConfig> {
    let mut c = InputIbaConfig::for_model(model);
    let layer = cfg.str("layer")?;
    if !layer.is_empty() {
        c.layer = layer.to_string();
    }
    c.feature = FeatureBnConfig {
        beta: cfg.get("beta_feat")?,
        steps: cfg.get("feat_steps")?,
        lr: cfg.get("feat_lr")?,
        noise_draws: cfg.get("noise_draws")?,
        init_logit: cfg.get("feat_init_logit")?,
    };
    c.bank_size = cfg.get("bank_size")?;
    c.gan = GanConfig {
        epochs: cfg.get("gan_epochs")?,
        batch_size: cfg.get("gan_batch")?,
        gen_lr: cfg.get("gen_lr")?,
        critic_lr: cfg.get("critic_lr")?,
        clip: cfg.get("clip")?,
        gen_steps_per_critic: cfg.get("gen_steps_per_critic")?,
        jitter: cfg.get("jitter")?,
        init_logit: cfg.get("gan_init_logit")?,
        critic_warmup: cfg.get("critic_warmup")?,
        ..GanConfig::default()
    };
    c.input = InputBnConfig {
        beta: cfg.get("beta_input")?,
        steps: cfg.get("input_steps")?,
        lr: cfg.get("input_lr")?,
        noise_draws: cfg.get("noise_draws")?,
        init_logit: cfg.get("input_init_logit")?,
    };
    Ok(c)
}

enum State<'m> {
    InputIba(Explainer<'m>),
    Iba(InputIbaConfig, FeatureStats),
    Ig(usize),
    Random,
}

/// A configured attribution method bound to one model.
pub struct Attributor<'m> {
    model: &'m Model,
    state: State<'m>,
    seed: u64,
    config_hash: String,
}

impl<'m> Attributor<'m> {
    pub fn new(model: &'m Model, reference: &Batch, cfg: &Config, config_hash: &str) -> CliResult<Self> {
        let method = Method::parse(cfg.str("method")?)?;
        let state = match method {
            Method::InputIba => State::InputIba(Explainer::new(model, reference, inputiba_config(cfg, model)?)?),
            Method::Iba => {
                let c = inputiba_config(cfg, model)?;
                let stats = estimate_feature_stats(model, &c.layer, reference)?;
                State::Iba(c, stats)
            }
            Method::Ig => State::Ig(cfg.get("ig_steps")?),
            Method::Random => State::Random,
        };
        Ok(Attributor {
            model,
            state,
            seed: cfg.get("seed")?,
            config_hash: config_hash.to_string(),
        })
    }

    /// Map for sample `index` of a split explaining class `target`.
    pub fn attribute(&self, sample: &Batch, target: usize, index: u64) -> CliResult<AttributionMap> {
        let shape = map_shape(self.model, sample)?;
        let mut map = match &self.state {
            State::InputIba(ex) => ex.explain(sample, target, self.seed, index)?.map,
            State::Iba(c, stats) => {
                let mut stream = RngStream::new(self.seed, index);
                let fit = fit_feature_bottleneck(self.model, &c.layer, sample, target, stats, &c.feature, &mut stream)?;
                iba_attribution(&fit.lambda, &shape)?
            }
            State::Ig(steps) => {
                let x = dense_input(self.model, sample)?;
                let zero = Tensor::zeros(x.shape().to_vec());
                integrated_gradients(self.model, &x, target, *steps, &zero, &shape)?
            }
            State::Random => random_attribution(&shape, &mut RngStream::new(self.seed, index)),
        };
        map.provenance = Provenance {
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            ..map.provenance
        };
        Ok(map)
    }
}
