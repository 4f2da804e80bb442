//! Plain binary CNN trained directly on sign-binarized pixels.
//!
//! Pixels live in [0, 1], so `sign` maps every one of them to +1 and the
//! network sees the same input for every image. That information loss is
//! the failure mode this model exists to demonstrate.

use rand::seq::SliceRandom;

use crate::autodiff::{
    apply_running_updates, cross_entropy_mean, AdamConfig, AdamState, BatchNorm, Conv2d, Dense, Mode,
    ParamStore, Tape, Var,
};
use crate::bnn::{predict_logits, EpochStats, Evaluation};
use crate::error::{Error, Result};
use crate::mnist::TaskSplit;
use crate::rng::{stream_rng, STREAM_BASELINE_SHUFFLE, STREAM_INIT};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub conv_channels: [usize; 3],
    pub fc: usize,
    pub hidden: usize,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            conv_channels: [32, 64, 128],
            fc: 200,
            hidden: 128,
            classes: 2,
            epochs: 15,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

const SIDE_AFTER_CONVS: usize = 4;

#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub config: BaselineConfig,
    pub store: ParamStore,
    convs: Vec<(Conv2d, BatchNorm)>,
    fc1: Dense,
    bn1: BatchNorm,
    fc2: Dense,
    bn2: BatchNorm,
    out: Dense,
}

impl BaselineModel {
    pub fn new(config: BaselineConfig) -> Result<Self> {
        if config.batch_size < 2 || config.classes < 2 || config.conv_channels.contains(&0) {
            return Err(Error::invalid("invalid baseline configuration"));
        }
        let mut rng = stream_rng(config.seed, STREAM_INIT);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.conv_channels.iter().enumerate() {
            let conv = Conv2d::new(&mut store, &format!("baseline.conv{i}"), cin, c, 3, 2, 1, false, &mut rng);
            let bn = BatchNorm::new(&mut store, &format!("baseline.conv{i}.bn"), c);
            convs.push((conv, bn));
            cin = c;
        }
        let flat = cin * SIDE_AFTER_CONVS * SIDE_AFTER_CONVS;
        let fc1 = Dense::new(&mut store, "baseline.fc1", flat, config.fc, false, &mut rng);
        let bn1 = BatchNorm::new(&mut store, "baseline.fc1.bn", config.fc);
        let fc2 = Dense::new(&mut store, "baseline.fc2", config.fc, config.hidden, false, &mut rng);
        let bn2 = BatchNorm::new(&mut store, "baseline.fc2.bn", config.hidden);
        let out = Dense::new(&mut store, "baseline.out", config.hidden, config.classes, false, &mut rng);
        let mut m = BaselineModel {
            config,
            store,
            convs,
            fc1,
            bn1,
            fc2,
            bn2,
            out,
        };
        m.clip_latent_weights();
        Ok(m)
    }

    fn weight_ids(&self) -> Vec<crate::autodiff::ParamId> {
        let mut ids: Vec<_> = self.convs.iter().map(|(c, _)| c.k).collect();
        ids.extend([self.fc1.w, self.fc2.w, self.out.w]);
        ids
    }

    fn clip_latent_weights(&mut self) {
        for id in self.weight_ids() {
            self.store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = v.clamp(-1.0, 1.0));
        }
    }

    /// Binarized input tensor as the first layer sees it.
    pub fn binarized_input(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(images.clone(), false);
        let xb = tape.sign_ste(x);
        Ok(tape.value(xb).clone())
    }

    fn forward(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let s = tape.value(images).shape().to_vec();
        if s.len() != 4 || s[1..] != [1, 28, 28] {
            return Err(Error::shape(format!("baseline expects [n, 1, 28, 28], got {s:?}")));
        }
        let mut h = tape.sign_ste(images);
        for (conv, bn) in &self.convs {
            h = conv.forward_binary(tape, &self.store, h)?;
            h = bn.forward(tape, &self.store, h)?;
            h = tape.sign_ste(h);
        }
        let n = s[0];
        let flat = tape.value(h).len() / n;
        h = tape.reshape(h, &[n, flat])?;
        for (fc, bn) in [(&self.fc1, &self.bn1), (&self.fc2, &self.bn2)] {
            h = fc.forward_binary(tape, &self.store, h)?;
            h = bn.forward(tape, &self.store, h)?;
            h = tape.sign_ste(h);
        }
        self.out.forward_binary(tape, &self.store, h)
    }

    pub fn logits(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new(mode);
        let x = tape.leaf(images.clone(), false);
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

const EVAL_BATCH: usize = 500;

pub fn evaluate_baseline(model: &BaselineModel, split: &TaskSplit) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Empty("cannot evaluate on an empty split".into()));
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let (mut correct, mut loss) = (0usize, 0.0f64);
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = model.logits(&split.images.gather_rows(chunk)?, Mode::Eval)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| split.labels[i]).collect();
        correct += predict_logits(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        loss += cross_entropy_mean(logits.data(), model.config.classes, &labels) as f64 * chunk.len() as f64;
    }
    Ok(Evaluation {
        accuracy: correct as f32 / split.len() as f32,
        loss: (loss / split.len() as f64) as f32,
    })
}

pub fn train_baseline(
    config: BaselineConfig,
    train: &TaskSplit,
    test: Option<&TaskSplit>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(BaselineModel, Vec<EpochStats>)> {
    if train.len() < 2 {
        return Err(Error::Empty("baseline training needs at least 2 images".into()));
    }
    let mut model = BaselineModel::new(config)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: model.config.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut rng = stream_rng(model.config.seed, STREAM_BASELINE_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(model.config.epochs);
    for epoch in 1..=model.config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for chunk in order.chunks(model.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new(Mode::Train);
            let x = tape.leaf(train.images.gather_rows(chunk)?, false);
            let logits = model.forward(&mut tape, x)?;
            let loss = tape.softmax_ce(logits, &labels)?;
            tape.backward(loss)?;
            let grads = tape.param_grads(&model.store);
            adam.step(&mut model.store, &grads)?;
            let updates = tape.take_running_updates();
            apply_running_updates(&mut model.store, updates);
            model.clip_latent_weights();
            loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
            correct += predict_logits(tape.value(logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += chunk.len();
        }
        let stats = EpochStats {
            epoch,
            train_loss: (loss_sum / seen as f64) as f32,
            train_accuracy: correct as f32 / seen as f32,
            test: test.map(|t| evaluate_baseline(&model, t)).transpose()?,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((model, history))
}

/// Highest per-epoch test accuracy in a training history.
pub fn best_test_accuracy(history: &[EpochStats]) -> Option<(usize, f32)> {
    history
        .iter()
        .filter_map(|s| s.test.map(|t| (s.epoch, t.accuracy)))
        .fold(None, |best, (e, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((e, a)),
        })
}
