//! Task-specific binary classifier over extracted codes.
//!
//! Forward pass: `h = sign(BN(sign(W1)·x))`, `logits = sign(W2)·h`. Weights
//! are real-valued latents binarized on the fly; every `sign` backpropagates
//! through the clipped straight-through estimator.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    apply_running_updates, cross_entropy_mean, AdamConfig, AdamState, BatchNorm, Dense, Mode,
    ParamStore, Tape, Var,
};
use crate::binarize::{sign_binarize, BitVector};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::rng::{stream_rng, STREAM_BNN_SHUFFLE, STREAM_INIT};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BnnConfig {
    pub input_bits: usize,
    pub hidden: usize,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for BnnConfig {
    fn default() -> Self {
        BnnConfig {
            input_bits: 200,
            hidden: 128,
            classes: 2,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl BnnConfig {
    fn validate(&self) -> Result<()> {
        if self.input_bits == 0 || self.hidden == 0 || self.classes < 2 {
            return Err(Error::invalid(
                "widths must be positive and there must be at least two classes",
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2 for batchnorm"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BnnModel {
    pub config: BnnConfig,
    pub store: ParamStore,
    pub(crate) fc1: Dense,
    pub(crate) bn: BatchNorm,
    pub(crate) fc2: Dense,
}

impl BnnModel {
    pub fn new(config: BnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, STREAM_INIT);
        let mut store = ParamStore::new();
        let fc1 = Dense::new(&mut store, "bnn.fc1", config.input_bits, config.hidden, false, &mut rng);
        let bn = BatchNorm::new(&mut store, "bnn.bn1", config.hidden);
        let fc2 = Dense::new(&mut store, "bnn.fc2", config.hidden, config.classes, false, &mut rng);
        let mut model = BnnModel {
            config,
            store,
            fc1,
            bn,
            fc2,
        };
        model.clip_latent_weights();
        Ok(model)
    }

    pub fn w1(&self) -> &Tensor {
        self.store.value(self.fc1.w)
    }

    pub fn w2(&self) -> &Tensor {
        self.store.value(self.fc2.w)
    }

    /// (gamma, beta, running mean, running var, eps) of the hidden batchnorm.
    pub fn batchnorm_params(&self) -> (&[f32], &[f32], &[f32], &[f32], f32) {
        (
            self.store.value(self.bn.gamma).data(),
            self.store.value(self.bn.beta).data(),
            self.store.value(self.bn.running_mean).data(),
            self.store.value(self.bn.running_var).data(),
            self.bn.eps,
        )
    }

    pub(crate) fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let width = tape.value(x).shape().get(1).copied();
        if tape.value(x).rank() != 2 || width != Some(self.config.input_bits) {
            return Err(Error::shape(format!(
                "classifier expects [batch, {}] inputs, got {:?}",
                self.config.input_bits,
                tape.value(x).shape()
            )));
        }
        let s = self.fc1.forward_binary(tape, &self.store, x)?;
        let s = self.bn.forward(tape, &self.store, s)?;
        let h = tape.sign_ste(s);
        self.fc2.forward_binary(tape, &self.store, h)
    }

    fn logits(&self, codes_pm1: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new(mode);
        let x = tape.leaf(codes_pm1.clone(), false);
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Logits using batch statistics in the batchnorm (no state is updated).
    pub fn forward_train(&self, codes_pm1: &Tensor) -> Result<Tensor> {
        self.logits(codes_pm1, Mode::Train)
    }

    /// Logits using the running batchnorm statistics.
    pub fn forward_eval(&self, codes_pm1: &Tensor) -> Result<Tensor> {
        self.logits(codes_pm1, Mode::Eval)
    }

    /// Copy of the model with `sign` applied to the latent weights ahead of time.
    pub fn prebinarized(&self) -> BnnModel {
        let mut m = self.clone();
        for id in [self.fc1.w, self.fc2.w] {
            let b = sign_binarize(m.store.value(id));
            *m.store.value_mut(id) = b;
        }
        m
    }

    pub(crate) fn clip_latent_weights(&mut self) {
        for id in [self.fc1.w, self.fc2.w] {
            self.store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = v.clamp(-1.0, 1.0));
        }
    }

    /// Raw scalar bytes of every parameter and buffer (what FedAvg exchanges).
    pub fn payload_bytes(&self) -> usize {
        self.store.scalar_count() * 4
    }

    /// Bytes of the latent weights if only their signs were sent.
    pub fn one_bit_weight_bytes(&self) -> usize {
        let c = &self.config;
        c.hidden * c.input_bits.div_ceil(8) + c.classes * c.hidden.div_ceil(8)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.store.write_container(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint; the architecture is inferred from the stored shapes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let records = crate::autodiff::read_records(&mut BufReader::new(f))?;
        let shape = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape().to_vec())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
        };
        let (w1, w2) = (shape("bnn.fc1.weight")?, shape("bnn.fc2.weight")?);
        let config = BnnConfig {
            input_bits: w1[1],
            hidden: w1[0],
            classes: w2[0],
            ..BnnConfig::default()
        };
        let mut model = BnnModel::new(config)?;
        model.store.load_records(records)?;
        Ok(model)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_logits(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.data().chunks_exact(k).map(argmax_lowest).collect()
}

/// Eval-mode class predictions for a batch of codes.
pub fn bnn_predict(model: &BnnModel, codes: &[BitVector]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(codes.len());
    for chunk in codes.chunks(EVAL_BATCH) {
        let fs = FeatureSet::new(model.config.input_bits, chunk.to_vec(), vec![0; chunk.len()])?;
        let idx: Vec<usize> = (0..chunk.len()).collect();
        out.extend(predict_logits(&model.forward_eval(&fs.batch_pm1(&idx))?));
    }
    Ok(out)
}

const EVAL_BATCH: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f32,
    pub loss: f32,
}

/// Eval-mode accuracy and mean cross-entropy.
pub fn evaluate(model: &BnnModel, features: &FeatureSet) -> Result<Evaluation> {
    if features.is_empty() {
        return Err(Error::Empty("cannot evaluate on an empty set".into()));
    }
    let labels = features.label_indices();
    let (mut correct, mut loss) = (0usize, 0.0f64);
    let idx: Vec<usize> = (0..features.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = model.forward_eval(&features.batch_pm1(chunk))?;
        let lab: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        correct += predict_logits(&logits)
            .iter()
            .zip(&lab)
            .filter(|(p, l)| p == l)
            .count();
        loss += cross_entropy_mean(logits.data(), model.config.classes, &lab) as f64 * chunk.len() as f64;
    }
    Ok(Evaluation {
        accuracy: correct as f32 / features.len() as f32,
        loss: (loss / features.len() as f64) as f32,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_accuracy: f32,
    pub test: Option<Evaluation>,
}

/// Model plus the optimizer and shuffling state needed to keep training.
#[derive(Clone, Debug)]
pub struct BnnTrainer {
    pub model: BnnModel,
    adam: AdamState,
    rng: ChaCha8Rng,
    steps: u64,
    epochs_done: usize,
}

impl BnnTrainer {
    pub fn new(config: BnnConfig) -> Result<Self> {
        Self::with_stream(config, 0)
    }

    /// Trainer whose shuffle order comes from stream `stream` of the seed;
    /// stream 0 is the centralized trainer.
    pub fn with_stream(config: BnnConfig, stream: u64) -> Result<Self> {
        let model = BnnModel::new(config)?;
        let adam = AdamState::new(
            AdamConfig {
                lr: model.config.lr,
                ..AdamConfig::default()
            },
            &model.store,
        );
        let rng = stream_rng(model.config.seed, STREAM_BNN_SHUFFLE + stream);
        Ok(BnnTrainer {
            model,
            adam,
            rng,
            steps: 0,
            epochs_done: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    fn check_features(&self, features: &FeatureSet) -> Result<()> {
        if features.latent_bits != self.model.config.input_bits {
            return Err(Error::shape(format!(
                "features have {} bits, classifier expects {}",
                features.latent_bits, self.model.config.input_bits
            )));
        }
        if features.len() < 2 {
            return Err(Error::Empty("training needs at least 2 samples".into()));
        }
        if let Some(l) = features
            .labels
            .iter()
            .find(|&&l| l as usize >= self.model.config.classes)
        {
            return Err(Error::invalid(format!("label {l} outside the class range")));
        }
        Ok(())
    }

    /// One optimizer step on the given sample indices; returns (loss, correct).
    pub fn step(&mut self, features: &FeatureSet, idx: &[usize]) -> Result<(f32, usize)> {
        let x = features.batch_pm1(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| features.labels[i] as usize).collect();
        let mut tape = Tape::new(Mode::Train);
        let xv = tape.leaf(x, false);
        let logits = self.model.forward(&mut tape, xv)?;
        let loss = tape.softmax_ce(logits, &labels)?;
        tape.backward(loss)?;
        let grads = tape.param_grads(&self.model.store);
        self.adam.step(&mut self.model.store, &grads)?;
        let updates = tape.take_running_updates();
        apply_running_updates(&mut self.model.store, updates);
        self.model.clip_latent_weights();
        self.steps += 1;
        let correct = predict_logits(tape.value(logits))
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok((tape.value(loss).data()[0], correct))
    }

    /// One shuffled pass over `features`; a trailing batch of one sample is skipped.
    pub fn train_epoch(&mut self, features: &FeatureSet, test: Option<&FeatureSet>) -> Result<EpochStats> {
        self.check_features(features)?;
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for chunk in order.chunks(self.model.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (l, c) = self.step(features, chunk)?;
            loss += l as f64 * chunk.len() as f64;
            correct += c;
            seen += chunk.len();
        }
        self.epochs_done += 1;
        Ok(EpochStats {
            epoch: self.epochs_done,
            train_loss: (loss / seen as f64) as f32,
            train_accuracy: correct as f32 / seen as f32,
            test: test.map(|t| evaluate(&self.model, t)).transpose()?,
        })
    }
}

/// Trains a classifier from scratch on extracted features.
pub fn bnn_train(
    config: BnnConfig,
    train: &FeatureSet,
    test: Option<&FeatureSet>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(BnnModel, Vec<EpochStats>)> {
    let mut present = train.labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::invalid(format!(
            "training set contains {} class(es); at least 2 are required",
            present.len()
        )));
    }
    let mut trainer = BnnTrainer::new(config)?;
    trainer.check_features(train)?;
    let mut history = Vec::new();
    for _ in 0..trainer.model.config.epochs {
        let stats = trainer.train_epoch(train, test)?;
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((trainer.model, history))
}
