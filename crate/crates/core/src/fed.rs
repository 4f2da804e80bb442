//! In-process federated averaging over classifier heads.
//!
//! Each client trains on its own feature shard in a worker thread. The
//! server only ever sees [`Message`] values, which carry parameter
//! containers and bookkeeping numbers but never features or labels.

use std::sync::mpsc;
use std::thread;

use crate::autodiff::{read_exact, read_u32, ParamStore};
use crate::bnn::{evaluate, BnnConfig, BnnModel, BnnTrainer, EpochStats, Evaluation};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::mnist::partition_iid;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FedConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub seed: u64,
    /// Head architecture and optimizer; its `epochs` field is ignored.
    pub bnn: BnnConfig,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            n_clients: 3,
            rounds: 20,
            local_epochs: 5,
            seed: 0,
            bnn: BnnConfig::default(),
        }
    }
}

impl FedConfig {
    fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.rounds == 0 {
            return Err(Error::invalid("n_clients and rounds must be at least 1"));
        }
        Ok(())
    }
}

const TAG_BROADCAST: u8 = 1;
const TAG_UPLOAD: u8 = 2;

/// Everything that crosses the client/server boundary.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Broadcast {
        round: u32,
        params: Vec<u8>,
    },
    Upload {
        round: u32,
        client: u32,
        samples: u32,
        train_loss: f32,
        train_accuracy: f32,
        params: Vec<u8>,
    },
}

impl Message {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Message::Broadcast { round, params } => {
                out.push(TAG_BROADCAST);
                out.extend(round.to_le_bytes());
                out.extend(params);
            }
            Message::Upload {
                round,
                client,
                samples,
                train_loss,
                train_accuracy,
                params,
            } => {
                out.push(TAG_UPLOAD);
                out.extend(round.to_le_bytes());
                out.extend(client.to_le_bytes());
                out.extend(samples.to_le_bytes());
                out.extend(train_loss.to_le_bytes());
                out.extend(train_accuracy.to_le_bytes());
                out.extend(params);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Message> {
        let r = &mut &bytes[..];
        let mut tag = [0u8];
        read_exact(r, &mut tag, "message tag")?;
        let round = read_u32(r, "round")?;
        match tag[0] {
            TAG_BROADCAST => Ok(Message::Broadcast {
                round,
                params: r.to_vec(),
            }),
            TAG_UPLOAD => {
                let client = read_u32(r, "client id")?;
                let samples = read_u32(r, "sample count")?;
                let train_loss = f32::from_bits(read_u32(r, "train loss")?);
                let train_accuracy = f32::from_bits(read_u32(r, "train accuracy")?);
                Ok(Message::Upload {
                    round,
                    client,
                    samples,
                    train_loss,
                    train_accuracy,
                    params: r.to_vec(),
                })
            }
            t => Err(Error::Format(format!("unknown message tag {t}"))),
        }
    }
}

/// One federated participant. Its shard never leaves this struct.
#[derive(Debug)]
pub struct ClientState {
    pub id: usize,
    shard: FeatureSet,
    trainer: BnnTrainer,
    pub history: Vec<EpochStats>,
}

impl ClientState {
    /// Client `id` shuffles with its own stream; client 0 shares the stream
    /// of centralized training.
    pub fn new(id: usize, shard: FeatureSet, bnn: BnnConfig) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Empty(format!("client {id} has an empty shard")));
        }
        Ok(ClientState {
            id,
            shard,
            trainer: BnnTrainer::with_stream(bnn, id as u64)?,
            history: Vec::new(),
        })
    }

    pub fn samples(&self) -> usize {
        self.shard.len()
    }

    pub fn model(&self) -> &BnnModel {
        &self.trainer.model
    }

    /// Loads the global parameters and trains `local_epochs` passes over the
    /// shard. Optimizer and shuffle state persist across rounds.
    pub fn local_train(&mut self, global: &ParamStore, local_epochs: usize) -> Result<Vec<EpochStats>> {
        self.trainer.model.store.copy_values_from(global)?;
        let mut out = Vec::with_capacity(local_epochs);
        for _ in 0..local_epochs {
            let s = self.trainer.train_epoch(&self.shard, None)?;
            self.history.push(s.clone());
            out.push(s);
        }
        Ok(out)
    }

    fn handle(&mut self, msg: &[u8], local_epochs: usize) -> Result<Vec<u8>> {
        let Message::Broadcast { round, params } = Message::decode(msg)? else {
            return Err(Error::Format("client expected a broadcast".into()));
        };
        let mut global = self.trainer.model.store.clone();
        global.load_container(&mut params.as_slice())?;
        let stats = self.local_train(&global, local_epochs)?;
        let (train_loss, train_accuracy) = stats
            .last()
            .map_or((f32::NAN, f32::NAN), |s| (s.train_loss, s.train_accuracy));
        Ok(Message::Upload {
            round,
            client: self.id as u32,
            samples: self.samples() as u32,
            train_loss,
            train_accuracy,
            params: self.trainer.model.store.to_container_bytes(),
        }
        .encode())
    }
}

/// Sample-weighted mean `Σ_k n_k·w_k / Σ n_k` of every parameter and buffer,
/// accumulated in f64.
pub fn fedavg(params: &[ParamStore], counts: &[usize]) -> Result<ParamStore> {
    if params.is_empty() || params.len() != counts.len() {
        return Err(Error::invalid(format!(
            "{} parameter sets with {} counts",
            params.len(),
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(Error::invalid("sample counts must be positive"));
    }
    let total: f64 = counts.iter().map(|&n| n as f64).sum();
    let mut out = params[0].clone();
    for p in &params[1..] {
        // validates names and shapes
        out.clone().copy_values_from(p)?;
    }
    let ids: Vec<_> = out.ids().collect();
    for id in ids {
        let mut acc = vec![0.0f64; out.value(id).len()];
        for (p, &n) in params.iter().zip(counts) {
            for (a, &v) in acc.iter_mut().zip(p.value(id).data()) {
                *a += n as f64 * v as f64;
            }
        }
        let shape = out.value(id).shape().to_vec();
        *out.value_mut(id) = Tensor::new(&shape, acc.iter().map(|a| (a / total) as f32).collect())?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientRound {
    pub client: usize,
    pub samples: usize,
    pub train_loss: f32,
    pub train_accuracy: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRound>,
    pub global_test: Evaluation,
    /// Encoded upload messages, all clients.
    pub bytes_uploaded: usize,
    /// Encoded broadcast messages, all clients.
    pub bytes_downloaded: usize,
}

/// Splits `train` IID across clients and runs `rounds` of
/// broadcast → local training → upload → FedAvg → evaluation.
pub fn run_simulation(
    config: &FedConfig,
    train: &FeatureSet,
    test: &FeatureSet,
    mut on_round: impl FnMut(&RoundReport),
) -> Result<(BnnModel, Vec<RoundReport>)> {
    config.validate()?;
    let bnn = BnnConfig {
        seed: config.seed,
        ..config.bnn.clone()
    };
    let partition = partition_iid(&train.label_indices(), config.n_clients, config.seed)?;
    let clients = partition
        .shards
        .iter()
        .enumerate()
        .map(|(k, idx)| ClientState::new(k, train.subset(idx), bnn.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut global = BnnModel::new(bnn)?;
    let local_epochs = config.local_epochs;

    thread::scope(|scope| {
        let (up_tx, up_rx) = mpsc::channel::<(usize, Result<Vec<u8>>)>();
        let mut down = Vec::with_capacity(clients.len());
        for mut client in clients {
            let (tx, rx) = mpsc::channel::<Vec<u8>>();
            down.push(tx);
            let up = up_tx.clone();
            scope.spawn(move || {
                for msg in rx {
                    let reply = client.handle(&msg, local_epochs);
                    let failed = reply.is_err();
                    if up.send((client.id, reply)).is_err() || failed {
                        break;
                    }
                }
            });
        }
        drop(up_tx);

        let mut reports = Vec::with_capacity(config.rounds);
        for round in 1..=config.rounds {
            let msg = Message::Broadcast {
                round: round as u32,
                params: global.store.to_container_bytes(),
            }
            .encode();
            for tx in &down {
                tx.send(msg.clone())
                    .map_err(|_| Error::invalid("client worker exited early"))?;
            }
            let mut uploads = Vec::with_capacity(down.len());
            for _ in 0..down.len() {
                let (k, reply) = up_rx
                    .recv()
                    .map_err(|_| Error::invalid("client worker exited early"))?;
                let bytes = reply.map_err(|e| Error::invalid(format!("client {k}: {e}")))?;
                uploads.push(bytes);
            }
            let bytes_uploaded = uploads.iter().map(Vec::len).sum();
            let mut received = Vec::with_capacity(uploads.len());
            for bytes in &uploads {
                match Message::decode(bytes)? {
                    Message::Upload {
                        round: r,
                        client,
                        samples,
                        train_loss,
                        train_accuracy,
                        params,
                    } if r as usize == round => {
                        let mut store = global.store.clone();
                        store.load_container(&mut params.as_slice())?;
                        received.push((
                            ClientRound {
                                client: client as usize,
                                samples: samples as usize,
                                train_loss,
                                train_accuracy,
                            },
                            store,
                        ));
                    }
                    _ => return Err(Error::Format(format!("unexpected message in round {round}"))),
                }
            }
            // arrival order varies between runs, aggregation order must not
            received.sort_by_key(|(c, _)| c.client);
            let counts: Vec<usize> = received.iter().map(|(c, _)| c.samples).collect();
            let stores: Vec<ParamStore> = received.iter().map(|(_, s)| s.clone()).collect();
            global.store = fedavg(&stores, &counts)?;
            let report = RoundReport {
                round,
                clients: received.into_iter().map(|(c, _)| c).collect(),
                global_test: evaluate(&global, test)?,
                bytes_uploaded,
                bytes_downloaded: msg.len() * down.len(),
            };
            on_round(&report);
            reports.push(report);
        }
        drop(down);
        Ok((global, reports))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommSummary {
    pub rounds: usize,
    pub total_uploaded: usize,
    pub total_downloaded: usize,
    /// Raw 32-bit scalars of one head: latent weights plus batchnorm state.
    pub bnn_payload_bytes: usize,
    /// Same head if only the weight signs were sent.
    pub one_bit_payload_bytes: usize,
    /// Head plus encoder, as if the whole model were exchanged.
    pub full_model_payload_bytes: usize,
}

impl CommSummary {
    pub fn payload_ratio(&self) -> f64 {
        self.bnn_payload_bytes as f64 / self.full_model_payload_bytes as f64
    }
}

pub fn comm_report(reports: &[RoundReport], head: &BnnModel, encoder_scalars: usize) -> Result<CommSummary> {
    if reports.is_empty() {
        return Err(Error::Empty("no rounds to summarize".into()));
    }
    Ok(CommSummary {
        rounds: reports.len(),
        total_uploaded: reports.iter().map(|r| r.bytes_uploaded).sum(),
        total_downloaded: reports.iter().map(|r| r.bytes_downloaded).sum(),
        bnn_payload_bytes: head.payload_bytes(),
        one_bit_payload_bytes: head.one_bit_weight_bytes(),
        full_model_payload_bytes: head.payload_bytes() + encoder_scalars * 4,
    })
}
