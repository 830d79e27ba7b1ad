//! Epoch loop, evaluation and training logs.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, TrainingMetadata};
use crate::datapipe::{DatasetPack, Normalization, Split};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::ConfusionMatrix;
use crate::models::Network;
use crate::optim::{cross_entropy, Optimizer, OptimizerKind};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Random-access labelled images as normalized `f32`.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    /// Per-sample `C × H × W`.
    fn sample_shape(&self) -> [usize; 3];
    fn class_names(&self) -> &[String];
    fn label(&self, i: usize) -> usize;
    /// Append sample `i` to `out`.
    fn write_sample(&self, i: usize, out: &mut Vec<f32>);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryDataset {
    shape: [usize; 3],
    class_names: Vec<String>,
    data: Vec<f32>,
    labels: Vec<usize>,
}

impl InMemoryDataset {
    pub fn new(shape: [usize; 3], class_names: Vec<String>, data: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || data.len() != per * labels.len() {
            return Err(Error::Config(format!(
                "{} values do not hold {} samples of shape {shape:?}",
                data.len(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_names.len()) {
            return Err(Error::Label {
                index,
                label,
                classes: class_names.len(),
            });
        }
        Ok(Self {
            shape,
            class_names,
            data,
            labels,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let per = self.shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Self {
            shape: self.shape,
            class_names: self.class_names.clone(),
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn sample_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn write_sample(&self, i: usize, out: &mut Vec<f32>) {
        let per = self.shape.iter().product::<usize>();
        out.extend_from_slice(&self.data[i * per..(i + 1) * per]);
    }
}

/// One split of a pack, normalized on the fly.
#[derive(Debug, Clone, Copy)]
pub struct PackSplit<'a> {
    pack: &'a DatasetPack,
    indices: &'a [u32],
    normalization: Normalization,
}

impl<'a> PackSplit<'a> {
    pub fn new(pack: &'a DatasetPack, split: Split) -> Self {
        Self {
            pack,
            indices: pack.split(split),
            normalization: pack.header.normalization,
        }
    }
}

impl Dataset for PackSplit<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn sample_shape(&self) -> [usize; 3] {
        self.pack.image_shape()
    }

    fn class_names(&self) -> &[String] {
        &self.pack.header.class_names
    }

    fn label(&self, i: usize) -> usize {
        self.pack.labels[self.indices[i] as usize] as usize
    }

    fn write_sample(&self, i: usize, out: &mut Vec<f32>) {
        self.normalization.apply(self.pack.sample(self.indices[i] as usize), out);
    }
}

fn load_batch(data: &dyn Dataset, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = data.sample_shape();
    let mut values = Vec::with_capacity(indices.len() * c * h * w);
    for &i in indices {
        data.write_sample(i, &mut values);
    }
    let labels = indices.iter().map(|&i| data.label(i)).collect();
    Ok((Tensor::from_vec(vec![indices.len(), c, h, w], values)?, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Val => "val",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Training images processed so far, including this epoch.
    pub images_seen: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub seed: u64,
    /// Where `best.ckpt`, `final.ckpt` and `stats.csv` go. Nothing is written
    /// when unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stored in checkpoints so inference can reproduce the input scaling.
    pub normalization: Option<Normalization>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            seed: 0,
            checkpoint_dir: None,
            normalization: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

fn check_classes(net: &Network, data: &dyn Dataset) -> Result<()> {
    if net.class_names() != data.class_names() {
        return Err(Error::Config(format!(
            "network predicts {:?} but the data is labelled {:?}",
            net.class_names(),
            data.class_names()
        )));
    }
    if net.input_shape() != data.sample_shape() {
        return Err(Error::Config(format!(
            "network expects {:?} inputs, data has {:?}",
            net.input_shape(),
            data.sample_shape()
        )));
    }
    Ok(())
}

/// Owns a network and its optimizer across epochs.
pub struct Trainer {
    net: Network,
    optimizer: Optimizer,
    config: TrainConfig,
    step: u64,
    images_seen: u64,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer, config.lr),
            net,
            config,
            step: 0,
            images_seen: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn images_seen(&self) -> u64 {
        self.images_seen
    }

    /// One shuffled pass over `data`. The last batch may be short.
    pub fn train_epoch(&mut self, epoch: usize, data: &dyn Dataset) -> Result<EpochStats> {
        check_classes(&self.net, data)?;
        if data.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, Purpose::Shuffle, &[epoch as u64]));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            let (x, labels) = load_batch(data, batch)?;
            let mode = Mode::Train {
                seed: self.config.seed,
                step: self.step,
            };
            let logits = self.net.forward(&x, mode)?;
            let loss = cross_entropy(&logits, &labels)?;
            loss_sum += loss.sample_losses.iter().sum::<f64>();
            correct += logits
                .argmax_rows()?
                .iter()
                .zip(&labels)
                .filter(|(p, t)| p == t)
                .count();
            self.net.zero_grad();
            self.net.backward(&loss.grad_logits)?;
            self.optimizer.step(&mut self.net.param_refs())?;
            self.step += 1;
            self.images_seen += batch.len() as u64;
        }
        Ok(EpochStats {
            phase: Phase::Train,
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            images_seen: self.images_seen,
        })
    }

    pub fn validate(&mut self, epoch: usize, data: &dyn Dataset) -> Result<EpochStats> {
        let (mut stats, _) = evaluate_split(&mut self.net, data, self.config.batch_size)?;
        stats.phase = Phase::Val;
        stats.epoch = epoch;
        stats.images_seen = self.images_seen;
        Ok(stats)
    }
}

/// Evaluate without dropout or parameter updates.
pub fn evaluate_split(net: &mut Network, data: &dyn Dataset, batch_size: usize) -> Result<(EpochStats, ConfusionMatrix)> {
    check_classes(net, data)?;
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let mut cm = ConfusionMatrix::new(net.class_names().to_vec());
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for batch in indices.chunks(batch_size.max(1)) {
        let (x, labels) = load_batch(data, batch)?;
        let logits = net.forward(&x, Mode::Eval)?;
        loss_sum += cross_entropy(&logits, &labels)?.sample_losses.iter().sum::<f64>();
        for (p, &t) in logits.argmax_rows()?.into_iter().zip(&labels) {
            cm.accumulate(t, p)?;
        }
    }
    let stats = EpochStats {
        phase: Phase::Val,
        epoch: 0,
        loss: loss_sum / data.len() as f64,
        accuracy: cm.accuracy(),
        images_seen: 0,
    };
    Ok((stats, cm))
}

/// One epoch's block of the training log, without a trailing newline.
pub fn format_epoch_log(epoch: usize, total_epochs: usize, phases: &[EpochStats]) -> String {
    let mut s = format!("Epoch {epoch}/{}\n----------", total_epochs.saturating_sub(1));
    for p in phases {
        write!(s, "\n{} Loss: {:.4} Acc: {:.4}", p.phase.name(), p.loss, p.accuracy).unwrap();
    }
    s
}

pub const STATS_CSV_HEADER: &str = "epoch,phase,images_seen,loss,acc";

pub fn stats_csv(history: &[EpochStats]) -> String {
    let mut s = String::from(STATS_CSV_HEADER);
    s.push('\n');
    for h in history {
        writeln!(s, "{},{},{},{},{}", h.epoch, h.phase.name(), h.images_seen, h.loss, h.accuracy).unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochStats>,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
}

/// Train for `config.epochs`, validating after each epoch and checkpointing
/// whenever validation accuracy strictly improves. The epoch log is written
/// to `log`.
pub fn run_training(
    net: Network,
    train: &dyn Dataset,
    val: &dyn Dataset,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    if val.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut trainer = Trainer::new(net, config.clone())?;
    let mut history = Vec::with_capacity(2 * config.epochs);
    let mut best: Option<(f64, usize)> = None;
    for epoch in 0..config.epochs {
        let t = trainer.train_epoch(epoch, train)?;
        let v = trainer.validate(epoch, val)?;
        history.extend([t, v]);
        let block = format_epoch_log(epoch, config.epochs, &[t, v]);
        let sep = if epoch + 1 < config.epochs { "\n\n" } else { "\n" };
        write!(log, "{block}{sep}").map_err(|e| Error::io("<log>", e))?;

        if best.is_none_or(|(acc, _)| v.accuracy > acc) {
            best = Some((v.accuracy, epoch));
            if let Some(dir) = &config.checkpoint_dir {
                let meta = TrainingMetadata {
                    epoch: Some(epoch),
                    best_val_accuracy: Some(v.accuracy),
                    seed: config.seed,
                };
                save_checkpoint(trainer.network(), config.normalization, meta, &dir.join("best.ckpt"))?;
            }
        }
    }
    let (best_val_accuracy, best_epoch) = best.expect("at least one epoch");
    if let Some(dir) = &config.checkpoint_dir {
        let meta = TrainingMetadata {
            epoch: Some(config.epochs - 1),
            best_val_accuracy: Some(best_val_accuracy),
            seed: config.seed,
        };
        save_checkpoint(trainer.network(), config.normalization, meta, &dir.join("final.ckpt"))?;
        let csv = dir.join("stats.csv");
        fs::write(&csv, stats_csv(&history)).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(TrainOutcome {
        network: trainer.into_network(),
        history,
        best_val_accuracy,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;
    use crate::models::{default_class_names, init_weights, NetworkSpec};

    fn stats(phase: Phase, loss: f64, accuracy: f64) -> EpochStats {
        EpochStats {
            phase,
            epoch: 0,
            loss,
            accuracy,
            images_seen: 0,
        }
    }

    #[test]
    fn log_layout() {
        assert_eq!(
            format_epoch_log(0, 25, &[stats(Phase::Train, 0.1488, 0.9476)]),
            "Epoch 0/24\n----------\ntrain Loss: 0.1488 Acc: 0.9476"
        );
        let s = format_epoch_log(3, 5, &[stats(Phase::Train, 0.0, 1.0), stats(Phase::Val, 2.5, 0.25)]);
        assert_eq!(s, "Epoch 3/4\n----------\ntrain Loss: 0.0000 Acc: 1.0000\nval Loss: 2.5000 Acc: 0.2500");
    }

    fn linear_net(classes: usize) -> Network {
        let spec = NetworkSpec {
            name: "probe".into(),
            input_shape: [1, 1, 2],
            class_names: default_class_names(classes),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 2,
                    out_features: classes,
                },
            ],
            frozen_layers: vec![],
        };
        Network::from_spec(&spec).unwrap()
    }

    fn toy(n: usize) -> InMemoryDataset {
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let data = labels
            .iter()
            .flat_map(|&l| [if l & 1 == 1 { 1.0 } else { -1.0 }, if l & 2 == 2 { 1.0 } else { -1.0 }])
            .collect();
        InMemoryDataset::new([1, 1, 2], default_class_names(4), data, labels).unwrap()
    }

    #[test]
    fn constant_logits_give_chance() {
        let mut net = linear_net(4);
        let (s, cm) = evaluate_split(&mut net, &toy(8), 3).unwrap();
        assert_eq!(s.accuracy, 0.25);
        assert!((s.loss - 4f64.ln()).abs() < 1e-6);
        assert_eq!(cm.column_sums(), vec![8, 0, 0, 0]);
    }

    #[test]
    fn evaluation_leaves_parameters_alone() {
        let mut net = linear_net(4);
        init_weights(&mut net, 5);
        let before: Vec<f32> = net.params().flat_map(|p| p.value.data().to_vec()).collect();
        evaluate_split(&mut net, &toy(8), 32).unwrap();
        let after: Vec<f32> = net.params().flat_map(|p| p.value.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn class_mismatch_is_config_error() {
        let mut net = linear_net(3);
        assert!(matches!(evaluate_split(&mut net, &toy(4), 4), Err(Error::Config(_))));
    }

    #[test]
    fn learns_quadrants_and_keeps_best() {
        let mut net = linear_net(4);
        init_weights(&mut net, 1);
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            epochs: 40,
            batch_size: 5,
            lr: 0.05,
            seed: 2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let data = toy(16);
        let mut log = Vec::new();
        let out = run_training(net, &data, &data, &config, &mut log).unwrap();
        assert_eq!(out.history.len(), 80);
        let vals: Vec<f64> = out.history.iter().filter(|h| h.phase == Phase::Val).map(|h| h.accuracy).collect();
        assert_eq!(out.best_val_accuracy, vals.iter().cloned().fold(0.0, f64::max));
        assert_eq!(out.best_val_accuracy, 1.0);
        for (e, h) in out.history.iter().filter(|h| h.phase == Phase::Train).enumerate() {
            assert_eq!(h.images_seen, 16 * (e as u64 + 1));
        }
        let best = crate::checkpoint::load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(best.metadata.best_val_accuracy, Some(1.0));
        assert!(dir.path().join("final.ckpt").exists());
        let csv = fs::read_to_string(dir.path().join("stats.csv")).unwrap();
        assert!(csv.starts_with("epoch,phase,images_seen,loss,acc\n0,train,16,"));
        let log = String::from_utf8(log).unwrap();
        assert!(log.starts_with("Epoch 0/39\n----------\ntrain Loss: "));
        assert!(log.contains("\n\nEpoch 1/39\n"));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
