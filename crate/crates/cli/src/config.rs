//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

/// Every tunable of every subcommand. Unset keys keep their defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mnist_dir: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub task: usize,
    pub tasks: Vec<usize>,
    pub latent_bits: usize,
    pub vae_epochs: usize,
    pub vae_batch: usize,
    pub vae_lr: f32,
    /// Use only the first N training images for the autoencoder (0 = all).
    pub vae_train_limit: usize,
    pub bnn_hidden: usize,
    pub bnn_epochs: usize,
    pub bnn_batch: usize,
    pub bnn_lr: f32,
    pub baseline_epochs: usize,
    pub baseline_batch: usize,
    pub baseline_lr: f32,
    /// Use only the first N training samples of each pair task (0 = all).
    pub task_train_limit: usize,
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mnist_dir: PathBuf::from("data/mnist"),
            out: PathBuf::from("runs"),
            seed: 0,
            task: 1,
            tasks: vec![1, 2, 3, 4, 5],
            latent_bits: 200,
            vae_epochs: 20,
            vae_batch: 64,
            vae_lr: 1e-3,
            vae_train_limit: 0,
            bnn_hidden: 128,
            bnn_epochs: 100,
            bnn_batch: 64,
            bnn_lr: 1e-3,
            baseline_epochs: 15,
            baseline_batch: 64,
            baseline_lr: 1e-3,
            task_train_limit: 0,
            clients: 3,
            rounds: 20,
            local_epochs: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("`{key}`: cannot parse `{value}`: {e}"))
}

fn parse_tasks(value: &str) -> Result<Vec<usize>> {
    let tasks = value
        .split(',')
        .map(|t| parse::<usize>("tasks", t.trim()))
        .collect::<Result<Vec<_>>>()?;
    if tasks.is_empty() || tasks.iter().any(|t| !(1..=5).contains(t)) {
        bail!("`tasks` must list task numbers between 1 and 5, got `{value}`");
    }
    Ok(tasks)
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mnist_dir" => self.mnist_dir = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "task" => self.task = parse(key, value)?,
            "tasks" => self.tasks = parse_tasks(value)?,
            "latent_bits" => self.latent_bits = parse(key, value)?,
            "vae_epochs" => self.vae_epochs = parse(key, value)?,
            "vae_batch" => self.vae_batch = parse(key, value)?,
            "vae_lr" => self.vae_lr = parse(key, value)?,
            "vae_train_limit" => self.vae_train_limit = parse(key, value)?,
            "bnn_hidden" => self.bnn_hidden = parse(key, value)?,
            "bnn_epochs" => self.bnn_epochs = parse(key, value)?,
            "bnn_batch" => self.bnn_batch = parse(key, value)?,
            "bnn_lr" => self.bnn_lr = parse(key, value)?,
            "baseline_epochs" => self.baseline_epochs = parse(key, value)?,
            "baseline_batch" => self.baseline_batch = parse(key, value)?,
            "baseline_lr" => self.baseline_lr = parse(key, value)?,
            "task_train_limit" => self.task_train_limit = parse(key, value)?,
            "clients" => self.clients = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "local_epochs" => self.local_epochs = parse(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", n + 1))?;
            cfg.set(k.trim(), v.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_text(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.task) {
            bail!("`task` must be between 1 and 5, got {}", self.task);
        }
        if self.clients == 0 || self.rounds == 0 {
            bail!("`clients` and `rounds` must be at least 1");
        }
        Ok(())
    }

    /// Fully resolved configuration, one key per line in a fixed order.
    pub fn to_text(&self) -> String {
        let tasks: Vec<String> = self.tasks.iter().map(ToString::to_string).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("String write");
        kv("mnist_dir", self.mnist_dir.display().to_string());
        kv("out", self.out.display().to_string());
        kv("seed", self.seed.to_string());
        kv("task", self.task.to_string());
        kv("tasks", tasks.join(","));
        kv("latent_bits", self.latent_bits.to_string());
        kv("vae_epochs", self.vae_epochs.to_string());
        kv("vae_batch", self.vae_batch.to_string());
        kv("vae_lr", self.vae_lr.to_string());
        kv("vae_train_limit", self.vae_train_limit.to_string());
        kv("bnn_hidden", self.bnn_hidden.to_string());
        kv("bnn_epochs", self.bnn_epochs.to_string());
        kv("bnn_batch", self.bnn_batch.to_string());
        kv("bnn_lr", self.bnn_lr.to_string());
        kv("baseline_epochs", self.baseline_epochs.to_string());
        kv("baseline_batch", self.baseline_batch.to_string());
        kv("baseline_lr", self.baseline_lr.to_string());
        kv("task_train_limit", self.task_train_limit.to_string());
        kv("clients", self.clients.to_string());
        kv("rounds", self.rounds.to_string());
        kv("local_epochs", self.local_epochs.to_string());
        s
    }

    pub fn vae_dir(&self) -> PathBuf {
        self.out.join("vae")
    }

    pub fn vae_checkpoint(&self) -> PathBuf {
        self.vae_dir().join("vae.ckpt")
    }

    pub fn features_dir(&self) -> PathBuf {
        self.out.join("features")
    }

    pub fn feature_file(&self, task: usize, split: &str) -> PathBuf {
        self.features_dir().join(format!("task{task}-{split}.hybf"))
    }

    pub fn bnn_dir(&self, task: usize) -> PathBuf {
        self.out.join(format!("bnn-task{task}"))
    }

    pub fn baseline_dir(&self, task: usize) -> PathBuf {
        self.out.join(format!("baseline-task{task}"))
    }

    pub fn federated_dir(&self, task: usize) -> PathBuf {
        self.out.join(format!("federated-task{task}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.set("seed", "7").unwrap();
        c.set("tasks", "2, 4").unwrap();
        c.set("vae_lr", "0.0005").unwrap();
        assert_eq!(ExperimentConfig::parse_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_blanks_and_errors() {
        let c = ExperimentConfig::parse_text("# header\n\nrounds = 4 # inline\n").unwrap();
        assert_eq!(c.rounds, 4);
        assert!(ExperimentConfig::parse_text("nope = 1").is_err());
        assert!(ExperimentConfig::parse_text("seed").is_err());
        assert!(ExperimentConfig::parse_text("seed = x").is_err());
        assert!(ExperimentConfig::parse_text("task = 6").is_err());
        assert!(ExperimentConfig::parse_text("tasks = 0,1").is_err());
    }
}
