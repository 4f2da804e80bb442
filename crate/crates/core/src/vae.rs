//! Convolutional autoencoder with a sign-binarized latent layer.
//!
//! Trained on reconstruction alone, then frozen; the encoder followed by
//! `sign` is the binary feature extractor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::{
    apply_running_updates, bce_mean, read_records, write_records, AdamConfig, AdamState,
    BatchNorm, Conv2d, Dense, Mode, ParamStore, Tape, Var,
};
use crate::binarize::{pack, BitVector};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::mnist::SIDE;
use crate::rng::{stream_rng, STREAM_INIT, STREAM_VAE_SHUFFLE};
use crate::tensor::Tensor;

pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub latent_bits: usize,
    pub encoder_channels: [usize; 3],
    pub decoder_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Reserved; only 0 is accepted (no KL term on the deterministic binary code).
    pub kl_weight: f32,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_bits: 200,
            encoder_channels: [32, 64, 128],
            decoder_channels: 32,
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            kl_weight: 0.0,
            seed: 0,
        }
    }
}

impl VaeConfig {
    fn validate(&self) -> Result<()> {
        if self.latent_bits == 0 {
            return Err(Error::invalid("latent_bits must be positive"));
        }
        if self.encoder_channels.contains(&0) || self.decoder_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2 for batchnorm"));
        }
        if self.kl_weight != 0.0 {
            return Err(Error::invalid(
                "kl_weight is reserved: the binary latent has no KL relaxation, use 0",
            ));
        }
        Ok(())
    }
}

/// Spatial side after the three stride-2 encoder convolutions: 28 → 14 → 7 → 4.
const ENC_OUT_SIDE: usize = 4;
/// Decoder seed grid, upsampled twice to 28.
const DEC_IN_SIDE: usize = 7;

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub store: ParamStore,
    enc_conv: [Conv2d; 3],
    enc_bn: [BatchNorm; 3],
    to_latent: Dense,
    dec_fc: Dense,
    dec_bn0: BatchNorm,
    dec_conv1: Conv2d,
    dec_bn1: BatchNorm,
    dec_out: Conv2d,
    frozen: bool,
}

impl VaeModel {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, STREAM_INIT);
        let mut store = ParamStore::new();
        let [c1, c2, c3] = config.encoder_channels;
        let enc_conv = [
            Conv2d::new(&mut store, "encoder.conv1", 1, c1, 3, 2, 1, false, &mut rng),
            Conv2d::new(&mut store, "encoder.conv2", c1, c2, 3, 2, 1, false, &mut rng),
            Conv2d::new(&mut store, "encoder.conv3", c2, c3, 3, 2, 1, false, &mut rng),
        ];
        let enc_bn = [
            BatchNorm::new(&mut store, "encoder.bn1", c1),
            BatchNorm::new(&mut store, "encoder.bn2", c2),
            BatchNorm::new(&mut store, "encoder.bn3", c3),
        ];
        let flat = c3 * ENC_OUT_SIDE * ENC_OUT_SIDE;
        let to_latent = Dense::new(&mut store, "encoder.latent", flat, config.latent_bits, true, &mut rng);
        let dc = config.decoder_channels;
        let dec_fc = Dense::new(
            &mut store,
            "decoder.fc",
            config.latent_bits,
            dc * DEC_IN_SIDE * DEC_IN_SIDE,
            false,
            &mut rng,
        );
        let dec_bn0 = BatchNorm::new(&mut store, "decoder.bn0", dc);
        let dec_conv1 = Conv2d::new(&mut store, "decoder.conv1", dc, dc, 3, 1, 1, false, &mut rng);
        let dec_bn1 = BatchNorm::new(&mut store, "decoder.bn1", dc);
        let dec_out = Conv2d::new(&mut store, "decoder.out", dc, 1, 3, 1, 1, true, &mut rng);
        Ok(VaeModel {
            config,
            store,
            enc_conv,
            enc_bn,
            to_latent,
            dec_fc,
            dec_bn0,
            dec_conv1,
            dec_bn1,
            dec_out,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn latent_bits(&self) -> usize {
        self.config.latent_bits
    }

    /// Digest of all encoder parameters and buffers.
    pub fn encoder_checksum(&self) -> u64 {
        self.store.checksum_prefix(ENCODER_PREFIX)
    }

    /// Scalar count of the encoder (what a client would need to receive to
    /// run feature extraction).
    pub fn encoder_scalars(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(ENCODER_PREFIX))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub(crate) fn encoder_forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in self.enc_conv.iter().zip(&self.enc_bn) {
            h = conv.forward(tape, &self.store, h)?;
            h = bn.forward(tape, &self.store, h)?;
            h = tape.relu(h);
        }
        let n = tape.value(h).shape()[0];
        let flat = tape.value(h).len() / n;
        let h = tape.reshape(h, &[n, flat])?;
        self.to_latent.forward(tape, &self.store, h)
    }

    pub(crate) fn decoder_forward(&self, tape: &mut Tape, code: Var) -> Result<Var> {
        let n = tape.value(code).shape()[0];
        let dc = self.config.decoder_channels;
        let h = self.dec_fc.forward(tape, &self.store, code)?;
        let h = tape.reshape(h, &[n, dc, DEC_IN_SIDE, DEC_IN_SIDE])?;
        let h = self.dec_bn0.forward(tape, &self.store, h)?;
        let h = tape.relu(h);
        let h = tape.upsample2x(h)?;
        let h = self.dec_conv1.forward(tape, &self.store, h)?;
        let h = self.dec_bn1.forward(tape, &self.store, h)?;
        let h = tape.relu(h);
        let h = tape.upsample2x(h)?;
        let h = self.dec_out.forward(tape, &self.store, h)?;
        Ok(tape.sigmoid(h))
    }

    fn check_images(images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != SIDE || s[3] != SIDE {
            return Err(Error::shape(format!(
                "expected images [batch, 1, {SIDE}, {SIDE}], got {s:?}"
            )));
        }
        Ok(())
    }

    /// Pre-binarization latent logits `[batch, latent_bits]` (eval mode).
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Self::check_images(images)?;
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(images.clone(), false);
        let z = self.encoder_forward(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// Reconstruction `[batch, 1, 28, 28]` from ±1 codes (eval mode).
    pub fn decode(&self, code_pm1: &Tensor) -> Result<Tensor> {
        let s = code_pm1.shape();
        if s.len() != 2 || s[1] != self.config.latent_bits {
            return Err(Error::shape(format!(
                "expected codes [batch, {}], got {s:?}",
                self.config.latent_bits
            )));
        }
        let mut tape = Tape::new(Mode::Eval);
        let c = tape.leaf(code_pm1.clone(), false);
        let y = self.decoder_forward(&mut tape, c)?;
        Ok(tape.value(y).clone())
    }

    /// Encode, binarize, decode (eval mode).
    pub fn reconstruct(&self, images: &Tensor) -> Result<Tensor> {
        let z = self.encode(images)?;
        self.decode(&crate::binarize::sign_binarize(&z))
    }

    /// Runs one optimization step on a batch; returns (loss, pixel accuracy).
    pub fn train_step(&mut self, adam: &mut AdamState, images: &Tensor) -> Result<(f32, f32)> {
        Self::check_images(images)?;
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(images.clone(), false);
        let z = self.encoder_forward(&mut tape, x)?;
        let code = tape.sign_ste(z);
        let recon = self.decoder_forward(&mut tape, code)?;
        let loss = tape.bce(recon, images)?;
        tape.backward(loss)?;
        let grads = tape.param_grads(&self.store);
        adam.step(&mut self.store, &grads)?;
        let updates = tape.take_running_updates();
        apply_running_updates(&mut self.store, updates);
        let l = tape.value(loss).data()[0];
        Ok((l, pixel_accuracy(images, tape.value(recon))))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        let meta = Tensor::new(
            &[5],
            vec![
                c.latent_bits as f32,
                c.encoder_channels[0] as f32,
                c.encoder_channels[1] as f32,
                c.encoder_channels[2] as f32,
                c.decoder_channels as f32,
            ],
        )?;
        let frozen = Tensor::scalar(if self.frozen { 1.0 } else { 0.0 });
        let mut records: Vec<(&str, &Tensor)> = vec![("vae.widths", &meta), ("vae.frozen", &frozen)];
        records.extend(self.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)));
        write_records(w, &records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let records = read_records(&mut BufReader::new(f))?;
        Self::from_records(records)
    }

    pub fn from_records(mut records: Vec<(String, Tensor)>) -> Result<Self> {
        let take = |records: &mut Vec<(String, Tensor)>, name: &str| -> Result<Tensor> {
            let i = records
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
            Ok(records.remove(i).1)
        };
        let widths = take(&mut records, "vae.widths")?;
        let frozen = take(&mut records, "vae.frozen")?.item() == Some(1.0);
        let w = widths.data();
        if w.len() != 5 {
            return Err(Error::Format("vae.widths must hold 5 values".into()));
        }
        let config = VaeConfig {
            latent_bits: w[0] as usize,
            encoder_channels: [w[1] as usize, w[2] as usize, w[3] as usize],
            decoder_channels: w[4] as usize,
            ..VaeConfig::default()
        };
        let mut model = VaeModel::new(config)?;
        model.store.load_records(records)?;
        if frozen {
            model = freeze(model);
        }
        Ok(model)
    }
}

/// Fraction of pixels on the same side of 0.5 in input and reconstruction.
pub fn pixel_accuracy(x: &Tensor, recon: &Tensor) -> f32 {
    let hits = x
        .data()
        .iter()
        .zip(recon.data())
        .filter(|(a, b)| (**a >= 0.5) == (**b >= 0.5))
        .count();
    hits as f32 / x.len().max(1) as f32
}

/// Mean per-pixel binary cross-entropy with clamped logarithms.
pub fn vae_loss(x: &Tensor, x_reconstructed: &Tensor) -> Result<f32> {
    if x.shape() != x_reconstructed.shape() {
        return Err(Error::shape(format!(
            "vae_loss: {:?} vs {:?}",
            x.shape(),
            x_reconstructed.shape()
        )));
    }
    let in_unit = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
    if !in_unit(x) || !in_unit(x_reconstructed) {
        return Err(Error::invalid("vae_loss: values must lie in [0, 1]"));
    }
    Ok(bce_mean(x_reconstructed.data(), x.data()))
}

/// Sign-binarizes each row of `[batch, latent_bits]` logits and packs it.
pub fn binarize_latent(logits: &Tensor) -> Result<Vec<BitVector>> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("expected [batch, bits], got {:?}", logits.shape())));
    }
    let bits = logits.shape()[1];
    let signs = crate::binarize::sign_binarize(logits);
    signs.data().chunks_exact(bits).map(pack).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_pixel_accuracy: f32,
    pub test_loss: Option<f32>,
    pub test_pixel_accuracy: Option<f32>,
}

/// Evaluation batch size for inference-only sweeps.
pub const EVAL_BATCH: usize = 500;

/// Mean reconstruction BCE and pixel accuracy over a set of images (eval mode).
pub fn evaluate_reconstruction(model: &VaeModel, images: &Tensor) -> Result<(f32, f32)> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Empty("no images to evaluate".into()));
    }
    let (mut loss, mut acc) = (0.0f64, 0.0f64);
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let x = images.slice_rows(start, end)?;
        let r = model.reconstruct(&x)?;
        let w = (end - start) as f64;
        loss += vae_loss(&x, &r)? as f64 * w;
        acc += pixel_accuracy(&x, &r) as f64 * w;
    }
    Ok(((loss / n as f64) as f32, (acc / n as f64) as f32))
}

/// Trains an autoencoder on unlabeled images. `on_epoch` sees each epoch's
/// statistics as soon as it completes.
pub fn train_vae(
    config: VaeConfig,
    train: &Tensor,
    test: Option<&Tensor>,
    mut on_epoch: impl FnMut(&VaeEpoch),
) -> Result<(VaeModel, Vec<VaeEpoch>)> {
    VaeModel::check_images(train)?;
    let n = train.shape()[0];
    if n < 2 {
        return Err(Error::Empty("autoencoder training needs at least 2 images".into()));
    }
    let mut model = VaeModel::new(config)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: model.config.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut rng = stream_rng(model.config.seed, STREAM_VAE_SHUFFLE);
    let bs = model.config.batch_size;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(model.config.epochs);
    for epoch in 1..=model.config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum, mut seen) = (0.0f64, 0.0f64, 0usize);
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let x = train.gather_rows(chunk)?;
            let (l, a) = model.train_step(&mut adam, &x)?;
            loss_sum += l as f64 * chunk.len() as f64;
            acc_sum += a as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let (test_loss, test_acc) = match test {
            Some(t) => {
                let (l, a) = evaluate_reconstruction(&model, t)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let stats = VaeEpoch {
            epoch,
            train_loss: (loss_sum / seen as f64) as f32,
            train_pixel_accuracy: (acc_sum / seen as f64) as f32,
            test_loss,
            test_pixel_accuracy: test_acc,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((model, history))
}

/// Freezes the encoder: its parameters and batchnorm statistics no longer change.
pub fn freeze(mut model: VaeModel) -> VaeModel {
    model.store.freeze_prefix(ENCODER_PREFIX);
    model.frozen = true;
    model
}

/// Runs images through the frozen encoder and packs one code per sample.
pub fn extract_features(model: &VaeModel, images: &Tensor, labels: &[u8]) -> Result<FeatureSet> {
    if !model.frozen {
        return Err(Error::NotFrozen(
            "feature extraction requires a frozen encoder".into(),
        ));
    }
    VaeModel::check_images(images)?;
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let mut codes = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let z = model.encode(&images.slice_rows(start, end)?)?;
        codes.extend(binarize_latent(&z)?);
    }
    FeatureSet::new(model.config.latent_bits, codes, labels.to_vec())
}
