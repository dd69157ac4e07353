use serde::{Deserialize, Serialize};

use super::{Batch, Model, ModelKind};
use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::rng::RngStream;
use crate::synthdata::Dataset;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Per-epoch accuracies; entry 0 is the untrained model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_acc: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub loss: Vec<f64>,
}

/// Samples `idx` of a split as a model batch.
pub(crate) fn gather(data: &SplitView, idx: &[usize]) -> Result<Batch> {
    match data {
        SplitView::Images { images, .. } => {
            let rows = idx.iter().map(|&i| images.row(i)).collect::<Result<Vec<_>>>()?;
            Ok(Batch::Images(Tensor::stack(&rows)?))
        }
        SplitView::Tokens { sequences, .. } => Ok(Batch::Tokens(idx.iter().map(|&i| sequences[i].clone()).collect())),
    }
}

/// Borrowed view of one split, independent of the dataset kind.
pub(crate) enum SplitView<'a> {
    Images { images: &'a Tensor, labels: &'a [usize] },
    Tokens { sequences: &'a [Vec<usize>], labels: &'a [usize] },
}

impl SplitView<'_> {
    pub fn labels(&self) -> &[usize] {
        match self {
            SplitView::Images { labels, .. } | SplitView::Tokens { labels, .. } => labels,
        }
    }
}

pub(crate) fn views(ds: &Dataset) -> [SplitView<'_>; 3] {
    match ds {
        Dataset::Patch(d) => [&d.train, &d.val, &d.test].map(|s| SplitView::Images {
            images: &s.images,
            labels: &s.labels,
        }),
        Dataset::Token(d) => [&d.train, &d.val, &d.test].map(|s| SplitView::Tokens {
            sequences: &s.sequences,
            labels: &s.labels,
        }),
    }
}

fn check_kind(model: &Model, ds: &Dataset) -> Result<()> {
    match (model.kind(), ds) {
        (ModelKind::Cnn, Dataset::Patch(_)) | (ModelKind::Rnn, Dataset::Token(_)) => Ok(()),
        _ => Err(Error::invalid("model kind does not match dataset kind")),
    }
}

fn split_accuracy(model: &Model, view: &SplitView) -> Result<f64> {
    let labels = view.labels();
    let mut correct = 0;
    for chunk in (0..labels.len()).collect::<Vec<_>>().chunks(128) {
        let logits = model.predict_logits(&gather(view, chunk)?)?;
        let k = logits.shape()[1];
        for (row, &i) in chunk.iter().enumerate() {
            let r = &logits.data()[row * k..(row + 1) * k];
            let pred = (0..k).fold(0, |best, j| if r[j] > r[best] { j } else { best });
            correct += usize::from(pred == labels[i]);
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy on `split` (0 train, 1 val, 2 test).
pub fn accuracy(model: &Model, ds: &Dataset, split: usize) -> Result<f64> {
    check_kind(model, ds)?;
    let v = views(ds);
    split_accuracy(model, &v[split.min(2)])
}

/// Mini-batch Adam on the training split with softmax cross-entropy.
pub fn train_classifier(model: &Model, ds: &Dataset, cfg: &TrainConfig) -> Result<(Model, History)> {
    check_kind(model, ds)?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let [train, val, _] = views(ds);
    let mut model = model.clone();
    let mut opt = OptimState::adam(cfg.lr);
    let mut rng = RngStream::new(cfg.seed, 1);
    let mut hist = History {
        train_acc: vec![split_accuracy(&model, &train)?],
        val_acc: vec![split_accuracy(&model, &val)?],
        loss: vec![],
    };
    let n = train.labels().len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather(&train, chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let step = (|| {
                let x = model.embed(&mut tape, &bound, &batch)?;
                let y = model.forward_range(&mut tape, &bound, x, model.dense_input_position(), model.output_position())?;
                tape.softmax_cross_entropy(y, &targets)
            })();
            let loss = match step {
                Ok(l) => l,
                Err(e) if e.is_numeric() => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += lv * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = bound
                .vars
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            opt.step(model.params_mut(), &g).map_err(|_| Error::Diverged { epoch })?;
        }
        hist.loss.push(total / n as f64);
        hist.train_acc.push(split_accuracy(&model, &train)?);
        hist.val_acc.push(split_accuracy(&model, &val)?);
    }
    Ok((model, hist))
}
