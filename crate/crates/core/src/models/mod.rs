//! Small classifiers with named layers.
//!
//! Activations are addressed by *position*: position 0 is the raw input and
//! position `k + 1` is the post-activation output of layer `k`. A bottleneck at
//! layer `L` splits the network into `forward_range(0, pos(L))` (the prefix `f`)
//! and `forward_range(pos(L), end)` (the head).

mod checkpoint;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{accuracy, train_classifier, History, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::synthdata::{IMAGE_SIDE, NUM_IMAGE_CLASSES, SEQ_LEN, VOCAB};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CNN_LAYERS: [&str; 4] = ["conv1", "conv2", "fc1", "fc2"];
pub const RNN_LAYERS: [&str; 3] = ["embed", "rnn", "fc"];
pub const EMBED_DIM: usize = 16;
pub const RNN_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Cnn,
    Rnn,
}

impl ModelKind {
    pub fn tag(self) -> u32 {
        match self {
            ModelKind::Cnn => 1,
            ModelKind::Rnn => 2,
        }
    }

    pub fn layers(self) -> &'static [&'static str] {
        match self {
            ModelKind::Cnn => &CNN_LAYERS,
            ModelKind::Rnn => &RNN_LAYERS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            ModelKind::Cnn => NUM_IMAGE_CLASSES,
            ModelKind::Rnn => 2,
        }
    }

    /// `(name, shape, owning layer index)` for each parameter tensor.
    fn param_specs(self) -> Vec<(&'static str, Vec<usize>, usize)> {
        match self {
            ModelKind::Cnn => vec![
                ("conv1.weight", vec![8, 1, 3, 3], 0),
                ("conv1.bias", vec![8], 0),
                ("conv2.weight", vec![16, 8, 3, 3], 1),
                ("conv2.bias", vec![16], 1),
                ("fc1.weight", vec![16 * 8 * 8, 32], 2),
                ("fc1.bias", vec![32], 2),
                ("fc2.weight", vec![32, NUM_IMAGE_CLASSES], 3),
                ("fc2.bias", vec![NUM_IMAGE_CLASSES], 3),
            ],
            ModelKind::Rnn => vec![
                ("embed.weight", vec![VOCAB, EMBED_DIM], 0),
                ("rnn.weight_x", vec![EMBED_DIM, 3 * RNN_HIDDEN], 1),
                ("rnn.weight_h", vec![RNN_HIDDEN, 3 * RNN_HIDDEN], 1),
                ("rnn.bias_x", vec![3 * RNN_HIDDEN], 1),
                ("rnn.bias_h", vec![3 * RNN_HIDDEN], 1),
                ("fc.weight", vec![RNN_HIDDEN, 2], 2),
                ("fc.bias", vec![2], 2),
            ],
        }
    }
}

/// A batch of raw inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    /// `[n, 1, 16, 16]`
    Images(Tensor),
    /// `n` sequences of token ids
    Tokens(Vec<Vec<usize>>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Images(t) => t.shape()[0],
            Batch::Tokens(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A classifier: a kind plus its parameter tensors in `param_specs` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    kind: ModelKind,
    params: Vec<Tensor>,
}

/// Parameters bound to a tape, in `param_specs` order.
pub struct Bound {
    pub vars: Vec<Var>,
}

fn init_layer(kind: ModelKind, layer: usize, rng: &mut RngStream) -> Vec<(usize, Tensor)> {
    kind.param_specs()
        .into_iter()
        .enumerate()
        .filter(|(_, (_, _, l))| *l == layer)
        .map(|(i, (name, shape, _))| {
            let t = if name.ends_with("bias") && kind == ModelKind::Cnn || name == "fc.bias" {
                Tensor::zeros(shape)
            } else if name == "embed.weight" {
                rng.normal_tensor(&shape)
            } else if name.starts_with("rnn.") {
                let bound = 1.0 / (RNN_HIDDEN as f64).sqrt();
                rng.uniform_tensor(&shape, -bound, bound)
            } else {
                // He-uniform on fan-in
                let fan_in: usize = match shape.len() {
                    4 => shape[1] * shape[2] * shape[3],
                    _ => shape[0],
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                rng.uniform_tensor(&shape, -bound, bound)
            };
            (i, t)
        })
        .collect()
}

impl Model {
    /// Fresh model; each layer draws from its own stream derived from `seed`.
    pub fn new(kind: ModelKind, seed: u64) -> Self {
        let mut params: Vec<Option<Tensor>> = vec![None; kind.param_specs().len()];
        for layer in 0..kind.layers().len() {
            let mut rng = RngStream::new(seed, 1000 + layer as u64);
            for (i, t) in init_layer(kind, layer, &mut rng) {
                params[i] = Some(t);
            }
        }
        Model {
            kind,
            params: params.into_iter().map(|p| p.expect("every parameter initialized")).collect(),
        }
    }

    pub fn cnn(seed: u64) -> Self {
        Self::new(ModelKind::Cnn, seed)
    }

    pub fn rnn(seed: u64) -> Self {
        Self::new(ModelKind::Rnn, seed)
    }

    pub fn from_params(kind: ModelKind, params: Vec<Tensor>) -> Result<Self> {
        let specs = kind.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Format(format!("{:?} needs {} tensors, got {}", kind, specs.len(), params.len())));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Format(format!("{name}: expected {shape:?}, got {:?}", p.shape())));
            }
        }
        Ok(Model { kind, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn layer_ids(&self) -> &'static [&'static str] {
        self.kind.layers()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        self.kind.param_specs().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.kind.num_classes()
    }

    pub fn layer_index(&self, layer_id: &str) -> Result<usize> {
        self.layer_ids()
            .iter()
            .position(|&l| l == layer_id)
            .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))
    }

    /// Position of the output of `layer_id`.
    pub fn layer_position(&self, layer_id: &str) -> Result<usize> {
        Ok(self.layer_index(layer_id)? + 1)
    }

    pub fn output_position(&self) -> usize {
        self.layer_ids().len()
    }

    /// First position whose activations are dense tensors: raw pixels for the CNN,
    /// the embedding output for the RNN. Input-level masks live here.
    pub fn dense_input_position(&self) -> usize {
        match self.kind {
            ModelKind::Cnn => 0,
            ModelKind::Rnn => 1,
        }
    }

    /// Shape of one sample's activations at `pos` (without the batch axis).
    pub fn activation_shape(&self, pos: usize) -> Result<Vec<usize>> {
        let s = match (self.kind, pos) {
            (ModelKind::Cnn, 0) => vec![1, IMAGE_SIDE, IMAGE_SIDE],
            (ModelKind::Cnn, 1) => vec![8, IMAGE_SIDE, IMAGE_SIDE],
            (ModelKind::Cnn, 2) => vec![16, IMAGE_SIDE, IMAGE_SIDE],
            (ModelKind::Cnn, 3) => vec![32],
            (ModelKind::Cnn, 4) => vec![NUM_IMAGE_CLASSES],
            (ModelKind::Rnn, 0) => vec![SEQ_LEN],
            (ModelKind::Rnn, 1) => vec![SEQ_LEN, EMBED_DIM],
            (ModelKind::Rnn, 2) => vec![SEQ_LEN, RNN_HIDDEN],
            (ModelKind::Rnn, 3) => vec![2],
            _ => return Err(Error::invalid(format!("no position {pos} in {:?}", self.kind))),
        };
        Ok(s)
    }

    /// Binds all parameters to `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        Bound { vars }
    }

    /// Records the raw batch on the tape and lifts it to the dense input position.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        match (self.kind, batch) {
            (ModelKind::Cnn, Batch::Images(t)) => {
                let s = t.shape();
                if s.len() != 4 || s[1..] != [1, IMAGE_SIDE, IMAGE_SIDE] {
                    return Err(Error::shape("cnn input", format!("{s:?}")));
                }
                Ok(tape.constant(t.clone()))
            }
            (ModelKind::Rnn, Batch::Tokens(seqs)) => {
                if seqs.is_empty() || seqs.iter().any(|s| s.len() != SEQ_LEN) {
                    return Err(Error::shape("rnn input", format!("expected sequences of length {SEQ_LEN}")));
                }
                let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
                let e = tape.embedding(bound.vars[0], &ids)?;
                tape.reshape(e, &[seqs.len(), SEQ_LEN, EMBED_DIM])
            }
            _ => Err(Error::shape("model input", format!("{:?} model given mismatched batch", self.kind))),
        }
    }

    /// Runs the network from activations at `from` up to position `to`.
    pub fn forward_range(&self, tape: &mut Tape, bound: &Bound, x: Var, from: usize, to: usize) -> Result<Var> {
        if from < self.dense_input_position() || to > self.output_position() || from > to {
            return Err(Error::invalid(format!("invalid forward range {from}..{to}")));
        }
        let v = &bound.vars;
        let mut h = x;
        for step in from..to {
            h = match (self.kind, step) {
                (ModelKind::Cnn, 0) => {
                    let c = tape.conv2d(h, v[0], v[1])?;
                    tape.relu(c)?
                }
                (ModelKind::Cnn, 1) => {
                    let c = tape.conv2d(h, v[2], v[3])?;
                    tape.relu(c)?
                }
                (ModelKind::Cnn, 2) => {
                    let n = tape.shape(h)[0];
                    let p = tape.maxpool2(h)?;
                    let flat = tape.reshape(p, &[n, 16 * 8 * 8])?;
                    let z = tape.matmul(flat, v[4])?;
                    let z = tape.add_bias(z, v[5], 1)?;
                    tape.relu(z)?
                }
                (ModelKind::Cnn, 3) => {
                    let z = tape.matmul(h, v[6])?;
                    tape.add_bias(z, v[7], 1)?
                }
                (ModelKind::Rnn, 1) => self.recurrent(tape, bound, h)?,
                (ModelKind::Rnn, 2) => {
                    let last = tape.index_axis(h, 1, SEQ_LEN - 1)?;
                    let z = tape.matmul(last, v[5])?;
                    tape.add_bias(z, v[6], 1)?
                }
                _ => unreachable!("range checked above"),
            };
        }
        Ok(h)
    }

    /// GRU over `[n, L, d]` embeddings, returning the hidden sequence `[n, L, hid]`.
    fn recurrent(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != SEQ_LEN || s[2] != EMBED_DIM {
            return Err(Error::shape("rnn", format!("{s:?}")));
        }
        let n = s[0];
        let v = &bound.vars;
        let mut h = tape.constant(Tensor::zeros([n, RNN_HIDDEN]));
        let mut states = Vec::with_capacity(SEQ_LEN);
        for t in 0..SEQ_LEN {
            let xt = tape.index_axis(x, 1, t)?;
            h = tape.gru_cell(xt, h, v[1], v[2], v[3], v[4])?;
            states.push(tape.reshape(h, &[n, 1, RNN_HIDDEN])?);
        }
        tape.concat(&states, 1)
    }

    /// Logits `[n, classes]`.
    pub fn predict_logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = self.embed(&mut tape, &bound, batch)?;
        let y = self.forward_range(&mut tape, &bound, x, self.dense_input_position(), self.output_position())?;
        Ok(tape.value(y).clone())
    }

    /// Logits from dense activations at `from` (e.g. masked pixels or embeddings).
    pub fn logits_from(&self, x: &Tensor, from: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward_range(&mut tape, &bound, xv, from, self.output_position())?;
        Ok(tape.value(y).clone())
    }

    /// Dense activations of the batch at `pos`.
    pub fn activations_at(&self, batch: &Batch, pos: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = self.embed(&mut tape, &bound, batch)?;
        let start = self.dense_input_position();
        let y = self.forward_range(&mut tape, &bound, x, start, pos.max(start))?;
        Ok(tape.value(y).clone())
    }

    /// Post-activation output of `layer_id` for every sample in the batch.
    pub fn feature_activations(&self, layer_id: &str, batch: &Batch) -> Result<Tensor> {
        let pos = self.layer_position(layer_id)?;
        self.activations_at(batch, pos)
    }

    /// Copy with `layer_id` and every later layer re-initialized from `seed`.
    pub fn randomize_from_layer(&self, layer_id: &str, seed: u64) -> Result<Model> {
        let first = self.layer_index(layer_id)?;
        let mut out = self.clone();
        for layer in first..self.layer_ids().len() {
            let mut rng = RngStream::new(seed, 1000 + layer as u64);
            for (i, t) in init_layer(self.kind, layer, &mut rng) {
                out.params[i] = t;
            }
        }
        Ok(out)
    }

    /// Indices into `params()` owned by a layer.
    pub fn layer_param_indices(&self, layer_id: &str) -> Result<Vec<usize>> {
        let l = self.layer_index(layer_id)?;
        Ok(self
            .kind
            .param_specs()
            .iter()
            .enumerate()
            .filter(|(_, (_, _, owner))| *owner == l)
            .map(|(i, _)| i)
            .collect())
    }
}
