//! The six subcommands. Each writes its outputs under the configured run
//! directory and returns a short summary.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use hybnn_core::baseline::{best_test_accuracy, train_baseline, BaselineConfig};
use hybnn_core::bnn::{bnn_predict, bnn_train, BnnConfig, Evaluation};
use hybnn_core::features::FeatureSet;
use hybnn_core::fed::{comm_report, run_simulation, CommSummary, FedConfig};
use hybnn_core::mnist::{make_pair_task, task_first_digit, Mnist, TaskDataset, TaskSplit};
use hybnn_core::vae::{extract_features, freeze, train_vae as fit_vae, VaeConfig, VaeModel};
use hybnn_core::xnor::{compile, model_size_report, SizeReport};

use crate::config::ExperimentConfig;
use crate::metrics::{write_csv, MetricsSink};

fn load_mnist(dir: &Path) -> Result<Mnist> {
    for f in Mnist::files_in(dir) {
        if !f.is_file() {
            bail!(
                "missing MNIST file {} (fetch it with scripts/fetch_mnist.sh or set mnist_dir)",
                f.display()
            );
        }
    }
    Mnist::load_dir(dir).with_context(|| format!("loading MNIST from {}", dir.display()))
}

fn prefix(split: &TaskSplit, limit: usize) -> Result<TaskSplit> {
    if limit == 0 || limit >= split.len() {
        return Ok(split.clone());
    }
    let idx: Vec<usize> = (0..limit).collect();
    Ok(TaskSplit {
        images: split.images.gather_rows(&idx)?,
        labels: split.labels[..limit].to_vec(),
    })
}

fn pair_task(cfg: &ExperimentConfig, mnist: &Mnist, task: usize) -> Result<TaskDataset> {
    let mut t = make_pair_task(mnist, task_first_digit(task)?)?;
    t.train = prefix(&t.train, cfg.task_train_limit)?;
    Ok(t)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn run_id(kind: &str, task: usize, cfg: &ExperimentConfig) -> String {
    format!("{kind}-task{task}-seed{}", cfg.seed)
}

fn load_features(cfg: &ExperimentConfig, task: usize, split: &str) -> Result<FeatureSet> {
    let path = cfg.feature_file(task, split);
    let fs = FeatureSet::load(&path)
        .with_context(|| format!("loading features {} (run `hybnn extract` first)", path.display()))?;
    ensure!(
        fs.latent_bits == cfg.latent_bits,
        "{} holds {}-bit codes but latent_bits = {}",
        path.display(),
        fs.latent_bits,
        cfg.latent_bits
    );
    Ok(fs)
}

fn bnn_config(cfg: &ExperimentConfig) -> BnnConfig {
    BnnConfig {
        input_bits: cfg.latent_bits,
        hidden: cfg.bnn_hidden,
        classes: 2,
        epochs: cfg.bnn_epochs,
        batch_size: cfg.bnn_batch,
        lr: cfg.bnn_lr,
        seed: cfg.seed,
    }
}

fn vae_config(cfg: &ExperimentConfig) -> VaeConfig {
    VaeConfig {
        latent_bits: cfg.latent_bits,
        epochs: cfg.vae_epochs,
        batch_size: cfg.vae_batch,
        lr: cfg.vae_lr,
        seed: cfg.seed,
        ..VaeConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct VaeSummary {
    pub epochs: usize,
    pub final_train_loss: f32,
    pub final_test_pixel_accuracy: f32,
    pub checkpoint: PathBuf,
}

pub fn train_vae(cfg: &ExperimentConfig) -> Result<VaeSummary> {
    let mnist = load_mnist(&cfg.mnist_dir)?;
    let dir = cfg.vae_dir();
    write_config(&dir, cfg)?;
    let train = if cfg.vae_train_limit == 0 || cfg.vae_train_limit >= mnist.train.len() {
        mnist.train.images.clone()
    } else {
        let idx: Vec<usize> = (0..cfg.vae_train_limit).collect();
        mnist.train.images.gather_rows(&idx)?
    };
    let mut sink = MetricsSink::create(&dir, &run_id("vae", 0, cfg))?;
    let mut sink_err = Ok(());
    let (model, history) = fit_vae(vae_config(cfg), &train, Some(&mnist.test.images), |e| {
        let r = (|| {
            sink.row("vae", 0, e.epoch, "train", e.train_pixel_accuracy, e.train_loss)?;
            if let (Some(a), Some(l)) = (e.test_pixel_accuracy, e.test_loss) {
                sink.row("vae", 0, e.epoch, "test", a, l)?;
            }
            sink.timing("vae", 0, e.epoch)
        })();
        if sink_err.is_ok() {
            sink_err = r;
        }
    })?;
    sink_err?;
    sink.finish()?;
    let model = freeze(model);
    let checkpoint = cfg.vae_checkpoint();
    model.save(&checkpoint)?;
    let last = history.last();
    Ok(VaeSummary {
        epochs: history.len(),
        final_train_loss: last.map_or(f32::NAN, |e| e.train_loss),
        final_test_pixel_accuracy: last.and_then(|e| e.test_pixel_accuracy).unwrap_or(f32::NAN),
        checkpoint,
    })
}

#[derive(Clone, Debug)]
pub struct ExtractSummary {
    pub files: Vec<PathBuf>,
    pub code_bytes: usize,
}

pub fn extract(cfg: &ExperimentConfig) -> Result<ExtractSummary> {
    let ckpt = cfg.vae_checkpoint();
    let model = VaeModel::load(&ckpt)
        .with_context(|| format!("loading {} (run `hybnn train-vae` first)", ckpt.display()))?;
    ensure!(
        model.is_frozen(),
        "{} is not frozen; only frozen encoders may extract features",
        ckpt.display()
    );
    ensure!(
        model.latent_bits() == cfg.latent_bits,
        "checkpoint has {} latent bits but latent_bits = {}",
        model.latent_bits(),
        cfg.latent_bits
    );
    let mnist = load_mnist(&cfg.mnist_dir)?;
    let dir = cfg.features_dir();
    write_config(&dir, cfg)?;
    let mut files = Vec::new();
    let mut code_bytes = 0;
    for &task in &cfg.tasks {
        let t = pair_task(cfg, &mnist, task)?;
        for (split, data) in [("train", &t.train), ("test", &t.test)] {
            let labels: Vec<u8> = data.labels.iter().map(|&l| l as u8).collect();
            let fs = extract_features(&model, &data.images, &labels)?;
            code_bytes = fs.code_bytes();
            let path = cfg.feature_file(task, split);
            fs.save(&path)?;
            files.push(path);
        }
    }
    Ok(ExtractSummary { files, code_bytes })
}

#[derive(Clone, Debug)]
pub struct BnnSummary {
    pub task: usize,
    pub epochs: usize,
    pub final_train_accuracy: f32,
    pub test: Evaluation,
    /// Test samples where the packed engine disagrees with the dense model.
    pub engine_mismatches: usize,
    pub sizes: SizeReport,
}

pub fn train_bnn(cfg: &ExperimentConfig) -> Result<BnnSummary> {
    let task = cfg.task;
    let train = load_features(cfg, task, "train")?;
    let test = load_features(cfg, task, "test")?;
    let dir = cfg.bnn_dir(task);
    write_config(&dir, cfg)?;
    let mut sink = MetricsSink::create(&dir, &run_id("bnn", task, cfg))?;
    let mut sink_err = Ok(());
    let (model, history) = bnn_train(bnn_config(cfg), &train, Some(&test), |e| {
        let r = (|| {
            sink.row("bnn", task, e.epoch, "train", e.train_accuracy, e.train_loss)?;
            if let Some(t) = e.test {
                sink.row("bnn", task, e.epoch, "test", t.accuracy, t.loss)?;
            }
            sink.timing("bnn", task, e.epoch)
        })();
        if sink_err.is_ok() {
            sink_err = r;
        }
    })?;
    sink_err?;
    sink.finish()?;
    let test_eval = hybnn_core::bnn::evaluate(&model, &test)?;
    let packed = compile(&model)?;
    let dense_pred = bnn_predict(&model, &test.codes)?;
    let packed_pred = packed.infer_batch(&test.codes)?;
    let mismatches = dense_pred.iter().zip(&packed_pred).filter(|(a, b)| a != b).count();
    model.save(dir.join("bnn.ckpt"))?;
    packed.save(dir.join("bnn.hybp"))?;
    let sizes = model_size_report(&packed, &model);
    let mut rows: Vec<String> = sizes
        .layers
        .iter()
        .map(|l| format!("{},{},{},{}", l.name, l.dense_bytes, l.packed_bytes, l.ratio()))
        .collect();
    rows.push(format!(
        "total,{},{},{}",
        sizes.dense_bytes(),
        sizes.packed_bytes(),
        sizes.weight_ratio()
    ));
    write_csv(&dir.join("sizes.csv"), "layer,dense_bytes,packed_bytes,ratio", &rows)?;
    write_csv(
        &dir.join("engine.csv"),
        "test_samples,mismatches,threshold_bytes",
        &[format!("{},{mismatches},{}", test.len(), sizes.threshold_bytes)],
    )?;
    Ok(BnnSummary {
        task,
        epochs: history.len(),
        final_train_accuracy: history.last().map_or(f32::NAN, |e| e.train_accuracy),
        test: test_eval,
        engine_mismatches: mismatches,
        sizes,
    })
}

#[derive(Clone, Debug)]
pub struct BaselineSummary {
    pub task: usize,
    pub epochs: usize,
    pub test: Evaluation,
    pub best_epoch: usize,
    pub best_test_accuracy: f32,
}

pub fn baseline(cfg: &ExperimentConfig) -> Result<BaselineSummary> {
    let task = cfg.task;
    let mnist = load_mnist(&cfg.mnist_dir)?;
    let t = pair_task(cfg, &mnist, task)?;
    let dir = cfg.baseline_dir(task);
    write_config(&dir, cfg)?;
    let bc = BaselineConfig {
        epochs: cfg.baseline_epochs,
        batch_size: cfg.baseline_batch,
        lr: cfg.baseline_lr,
        seed: cfg.seed,
        ..BaselineConfig::default()
    };
    let mut sink = MetricsSink::create(&dir, &run_id("baseline", task, cfg))?;
    let mut sink_err = Ok(());
    let (_, history) = train_baseline(bc, &t.train, Some(&t.test), |e| {
        let r = (|| {
            sink.row("baseline", task, e.epoch, "train", e.train_accuracy, e.train_loss)?;
            if let Some(te) = e.test {
                sink.row("baseline", task, e.epoch, "test", te.accuracy, te.loss)?;
            }
            sink.timing("baseline", task, e.epoch)
        })();
        if sink_err.is_ok() {
            sink_err = r;
        }
    })?;
    sink_err?;
    sink.finish()?;
    let last = history.last().context("baseline needs at least one epoch")?;
    let (best_epoch, best) = best_test_accuracy(&history).context("no test evaluations")?;
    Ok(BaselineSummary {
        task,
        epochs: history.len(),
        test: last.test.context("no test evaluation")?,
        best_epoch,
        best_test_accuracy: best,
    })
}

#[derive(Clone, Debug)]
pub struct FederatedSummary {
    pub task: usize,
    pub rounds: usize,
    pub final_test: Evaluation,
    pub comm: CommSummary,
}

pub fn federated(cfg: &ExperimentConfig) -> Result<FederatedSummary> {
    let task = cfg.task;
    let train = load_features(cfg, task, "train")?;
    let test = load_features(cfg, task, "test")?;
    let dir = cfg.federated_dir(task);
    write_config(&dir, cfg)?;
    let fc = FedConfig {
        n_clients: cfg.clients,
        rounds: cfg.rounds,
        local_epochs: cfg.local_epochs,
        seed: cfg.seed,
        bnn: bnn_config(cfg),
    };
    let mut sink = MetricsSink::create(&dir, &run_id("federated", task, cfg))?;
    let mut sink_err = Ok(());
    let (global, reports) = run_simulation(&fc, &train, &test, |r| {
        let res = (|| {
            for c in &r.clients {
                let phase = format!("fed-client{}", c.client);
                sink.row(&phase, task, r.round, "train", c.train_accuracy, c.train_loss)?;
            }
            sink.row("federated", task, r.round, "test", r.global_test.accuracy, r.global_test.loss)?;
            sink.timing("federated", task, r.round)
        })();
        if sink_err.is_ok() {
            sink_err = res;
        }
    })?;
    sink_err?;
    sink.finish()?;
    let encoder = VaeModel::new(vae_config(cfg))?.encoder_scalars();
    let comm = comm_report(&reports, &global, encoder)?;
    let rows: Vec<String> = reports
        .iter()
        .map(|r| format!("{},{},{},{}", r.round, r.bytes_uploaded, r.bytes_downloaded, comm.bnn_payload_bytes))
        .collect();
    write_csv(
        &dir.join("comm.csv"),
        "round,bytes_uploaded,bytes_downloaded,payload_bytes_per_client",
        &rows,
    )?;
    write_csv(
        &dir.join("comm_summary.csv"),
        "key,value",
        &[
            format!("rounds,{}", comm.rounds),
            format!("clients,{}", cfg.clients),
            format!("total_uploaded,{}", comm.total_uploaded),
            format!("total_downloaded,{}", comm.total_downloaded),
            format!("bnn_payload_bytes,{}", comm.bnn_payload_bytes),
            format!("one_bit_payload_bytes,{}", comm.one_bit_payload_bytes),
            format!("full_model_payload_bytes,{}", comm.full_model_payload_bytes),
            format!("payload_ratio,{:.6}", comm.payload_ratio()),
        ],
    )?;
    global.save(dir.join("global.ckpt"))?;
    let last = reports.last().context("no rounds were run")?;
    Ok(FederatedSummary {
        task,
        rounds: reports.len(),
        final_test: last.global_test,
        comm,
    })
}
