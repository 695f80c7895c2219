use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ann::{cross_entropy_loss, AnnModel};
use crate::data::{
    encode_batch, epoch_order, load_cifar_batches, load_mnist_idx, subset, LabeledDataset,
};
use crate::error::{Error, Result};
use crate::network::{LayerMask, Network, ParamGrads, Sgd};
use crate::plasticity::{DpapPlasticity, ImportanceCriterion, LayerTraces, NetworkTraces};
use crate::pruner::{compression_report, Pruner};
use crate::scalar::Scalar;
use crate::snn::{mse_loss, mse_loss_grad, SnnModel};
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::config::{DatasetKind, EngineKind, ExperimentConfig};
use super::metrics::{CsvSink, MetricsRow, RunMetrics, SplitInfo};

/// Steps of the training loop, reported to a [`PhaseHook`] as they run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Forward pass over the whole window (all time steps), traces included.
    Forward,
    Backward,
    WeightUpdate,
    /// Per-batch BCM, θ and spine accumulation.
    BatchPlasticity,
    /// Epoch rollover of the BCM and spine accumulators.
    EpochImportance,
    SurvivalUpdate,
    Prune,
    Evaluate,
}

pub trait PhaseHook {
    fn phase(&mut self, epoch: usize, phase: Phase);
}

impl PhaseHook for () {
    fn phase(&mut self, _: usize, _: Phase) {}
}

/// Records every phase in order.
#[derive(Clone, Debug, Default)]
pub struct PhaseLog(pub Vec<(usize, Phase)>);

impl PhaseHook for PhaseLog {
    fn phase(&mut self, epoch: usize, phase: Phase) {
        self.0.push((epoch, phase));
    }
}

/// Per-run seed derivation (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_TRAIN_ENCODING: u64 = 1;
const STREAM_EVAL_ENCODING: u64 = 2;
const STREAM_SUBSET: u64 = 3;

fn first_existing(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names
        .iter()
        .flat_map(|n| [dir.join(n), dir.join(format!("{n}.gz"))])
        .find(|p| p.is_file())
}

/// Loads the sample pool named by the config. MNIST is read from
/// `<root>/mnist/` (`train-images-idx3-ubyte` or `images-idx3-ubyte`,
/// optionally gzipped); CIFAR-10 from `<root>/cifar-10-batches-bin/`.
pub fn load_pool<S: Scalar>(cfg: &ExperimentConfig) -> Result<LabeledDataset<S>> {
    let root = cfg.resolve_data_root();
    let missing = |what: &str, dir: &Path| {
        Error::Config(format!(
            "{what} not found under {} (set data_root or ${})",
            dir.display(),
            super::config::DATA_ROOT_ENV
        ))
    };
    match cfg.dataset {
        DatasetKind::Mnist => {
            let dir = root.join("mnist");
            let images = first_existing(&dir, &["train-images-idx3-ubyte", "images-idx3-ubyte"])
                .ok_or_else(|| missing("MNIST images", &dir))?;
            let labels = first_existing(&dir, &["train-labels-idx1-ubyte", "labels-idx1-ubyte"])
                .ok_or_else(|| missing("MNIST labels", &dir))?;
            load_mnist_idx(&images, &labels)
        }
        DatasetKind::Cifar10 => {
            let dir = root.join("cifar-10-batches-bin");
            let files: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.is_file())
                .collect();
            if files.is_empty() {
                return Err(missing("CIFAR-10 batches", &dir));
            }
            let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            load_cifar_batches(&refs)
        }
    }
}

/// Stratified train/test subsets of the configured pool.
pub fn load_split<S: Scalar>(cfg: &ExperimentConfig) -> Result<(LabeledDataset<S>, LabeledDataset<S>)> {
    let pool = load_pool(cfg)?;
    subset(
        &pool,
        cfg.train_size,
        cfg.test_size,
        derive_seed(cfg.seed, STREAM_SUBSET, 0),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model<S> {
    Snn(SnnModel<S>),
    Ann(AnnModel<S>),
}

impl<S: Scalar> Model<S> {
    pub fn net(&self) -> &Network<S> {
        match self {
            Model::Snn(m) => &m.net,
            Model::Ann(m) => &m.net,
        }
    }

    pub fn net_mut(&mut self) -> &mut Network<S> {
        match self {
            Model::Snn(m) => &mut m.net,
            Model::Ann(m) => &mut m.net,
        }
    }
}

/// Test accuracy plus the silence check on removed neurons.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub silent_violations: u64,
}

/// Complete training state of one run.
#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub config: ExperimentConfig,
    pub model: Model<S>,
    pub sgd: Sgd<S>,
    pub plasticity: Option<DpapPlasticity<S>>,
    pub pruner: Option<Pruner<S>>,
    /// Completed training epochs.
    pub epoch: usize,
    pub metrics: RunMetrics,
}

fn elapsed_ms(cfg: &ExperimentConfig, start: Instant) -> u64 {
    if cfg.record_wall_time {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

fn count_nonzero_units<S: Scalar>(out: &Tensor<S>, mask: &LayerMask) -> u64 {
    let units = mask.post();
    let per_sample = out.len() / out.shape()[0];
    let spatial = per_sample / units;
    let mut n = 0;
    for sample in out.data().chunks_exact(per_sample) {
        for (c, unit) in sample.chunks_exact(spatial).enumerate() {
            if !mask.neuron_kept(c) {
                n += unit.iter().filter(|v| !v.is_zero()).count() as u64;
            }
        }
    }
    n
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let plans = config.layer_plans()?;
        let net = Network::init(config.input_shape(), plans, config.seed);
        let model = match config.engine {
            EngineKind::Snn => Model::Snn(SnnModel::new(net, config.lif())?),
            EngineKind::Ann => Model::Ann(AnnModel::new(net)),
        };
        let (plasticity, pruner) = if config.dpap {
            (
                Some(DpapPlasticity::for_network(model.net())),
                Some(Pruner::for_network(model.net(), config.survival())?),
            )
        } else {
            (None, None)
        };
        let total = compression_report(model.net()).total_params;
        Ok(Trainer {
            sgd: Sgd::new(S::lit(config.lr), S::lit(config.momentum)),
            metrics: RunMetrics::new(SplitInfo::of(&config), total),
            config,
            model,
            plasticity,
            pruner,
            epoch: 0,
        })
    }

    pub fn net(&self) -> &Network<S> {
        self.model.net()
    }

    fn encoded(
        &self,
        data: &LabeledDataset<S>,
        indices: &[usize],
        stream: u64,
        index: u64,
    ) -> Result<crate::data::EncodedBatch<S>> {
        let (images, labels) = data.batch(indices)?;
        encode_batch(
            images,
            labels,
            data.class_count,
            self.config.encoding,
            self.config.time_steps,
            derive_seed(self.config.seed, stream, index),
        )
    }

    /// Accuracy on `test`, in fixed order.
    pub fn evaluate(&self, test: &LabeledDataset<S>) -> Result<Evaluation> {
        let mut correct = 0usize;
        let mut violations = 0u64;
        let masks: Vec<(usize, LayerMask)> = self
            .net()
            .layers()
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.params.as_ref().map(|p| (i, p.mask.clone())))
            .filter(|(_, m)| m.kept_neurons() < m.post())
            .collect();
        let order: Vec<usize> = (0..test.len()).collect();
        for (b, chunk) in order.chunks(self.config.eval_batch_size).enumerate() {
            let index = (self.epoch as u64) << 32 | b as u64;
            let batch = self.encoded(test, chunk, STREAM_EVAL_ENCODING, index)?;
            let preds = match &self.model {
                Model::Snn(m) => {
                    let state = m.forward_window(&batch.drive, None)?;
                    for (l, mask) in &masks {
                        for t in 0..state.time_steps() {
                            violations += count_nonzero_units(state.output(*l, t), mask);
                        }
                    }
                    state.predictions()
                }
                Model::Ann(m) => {
                    let state = m.ann_forward(batch.drive.at(0))?;
                    for (l, mask) in &masks {
                        violations += count_nonzero_units(state.output(*l), mask);
                    }
                    state.predictions()
                }
            };
            correct += preds
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p == y)
                .count();
        }
        Ok(Evaluation {
            accuracy: correct as f64 / test.len() as f64,
            silent_violations: violations,
        })
    }

    fn push_row(&mut self, row: MetricsRow, sink: Option<&mut CsvSink>) -> Result<()> {
        let report = compression_report(self.net());
        self.metrics
            .per_layer_retained
            .push(report.per_layer.iter().map(|l| l.retained_params).collect());
        if let Some(sink) = sink {
            sink.push(&row)?;
        }
        self.metrics.rows.push(row);
        Ok(())
    }

    fn theta_mean(&self) -> f64 {
        self.plasticity.as_ref().map_or(0.0, |p| p.theta_mean())
    }

    /// Evaluation before any training; becomes row 0.
    pub fn initial_row(
        &mut self,
        test: &LabeledDataset<S>,
        hook: &mut dyn PhaseHook,
        sink: Option<&mut CsvSink>,
    ) -> Result<()> {
        let start = Instant::now();
        hook.phase(0, Phase::Evaluate);
        let eval = self.evaluate(test)?;
        self.metrics.silent_violations += eval.silent_violations;
        let report = compression_report(self.net());
        let row = MetricsRow {
            epoch: 0,
            train_loss: f64::NAN,
            test_acc: eval.accuracy,
            retained_params: report.retained_params,
            pruning_rate: report.pruning_rate,
            pruned_synapses: 0,
            pruned_neurons: 0,
            theta_mean: self.theta_mean(),
            wall_ms: elapsed_ms(&self.config, start),
        };
        self.push_row(row, sink)
    }

    /// One pass over `train` followed by the end-of-epoch pruning step and
    /// an evaluation on `test`.
    pub fn train_epoch(
        &mut self,
        train: &LabeledDataset<S>,
        test: &LabeledDataset<S>,
        hook: &mut dyn PhaseHook,
        sink: Option<&mut CsvSink>,
    ) -> Result<()> {
        let start = Instant::now();
        let epoch = self.epoch;
        let order = epoch_order(train.len(), self.config.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let index = (epoch as u64) << 32 | b as u64;
            let batch = self.encoded(train, chunk, STREAM_TRAIN_ENCODING, index)?;
            let traces: Option<Vec<LayerTraces<S>>>;
            let want_traces = self.plasticity.is_some();
            let loss = match &mut self.model {
                Model::Snn(m) => {
                    hook.phase(epoch, Phase::Forward);
                    let mut nt = want_traces
                        .then(|| NetworkTraces::new(&m.net, chunk.len(), S::lit(self.config.tau)));
                    let state = m.forward_window(&batch.drive, nt.as_mut())?;
                    let loss = mse_loss(&state.rates, &batch.targets)?;
                    hook.phase(epoch, Phase::Backward);
                    let grad = mse_loss_grad(&state.rates, &batch.targets)?;
                    let grads = m.backward_window(&state, &grad)?;
                    hook.phase(epoch, Phase::WeightUpdate);
                    self.sgd.step(&mut m.net, &grads)?;
                    self.metrics.mask_violations += !m.net.masked_entries_are_zero() as u64;
                    traces = nt.map(|t| t.batch_traces());
                    loss
                }
                Model::Ann(m) => {
                    hook.phase(epoch, Phase::Forward);
                    let state = m.ann_forward(batch.drive.at(0))?;
                    let loss = cross_entropy_loss(&state.logits, &batch.labels)?;
                    hook.phase(epoch, Phase::Backward);
                    let grads = m.ann_backward(&state, &batch.labels)?;
                    hook.phase(epoch, Phase::WeightUpdate);
                    self.sgd.step(&mut m.net, &grads)?;
                    self.metrics.mask_violations += !m.net.masked_entries_are_zero() as u64;
                    traces = want_traces.then(|| state.layer_traces());
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::State(format!(
                    "non-finite training loss at epoch {epoch}, batch {b}"
                )));
            }
            if let (Some(p), Some(t)) = (self.plasticity.as_mut(), traces) {
                hook.phase(epoch, Phase::BatchPlasticity);
                p.observe_batch(&t)?;
            }
            loss_sum += loss.to_f64_lossy();
            batches += 1;
        }

        let (mut pruned_synapses, mut pruned_neurons) = (0, 0);
        if let (Some(p), Some(pruner)) = (self.plasticity.as_mut(), self.pruner.as_mut()) {
            hook.phase(epoch, Phase::EpochImportance);
            let snapshots = p.rollover();
            hook.phase(epoch, Phase::SurvivalUpdate);
            let before = pruner.survival_step(&snapshots, self.model.net())?;
            hook.phase(epoch, Phase::Prune);
            let summary = pruner.prune_step(before, self.model.net_mut())?;
            pruned_synapses = summary.pruned_synapses;
            pruned_neurons = summary.pruned_neurons;
            self.metrics.events.extend(summary.events);
        }
        self.epoch += 1;

        hook.phase(epoch, Phase::Evaluate);
        let eval = self.evaluate(test)?;
        self.metrics.silent_violations += eval.silent_violations;
        let report = compression_report(self.net());
        let row = MetricsRow {
            epoch: self.epoch,
            train_loss: loss_sum / batches as f64,
            test_acc: eval.accuracy,
            retained_params: report.retained_params,
            pruning_rate: report.pruning_rate,
            pruned_synapses,
            pruned_neurons,
            theta_mean: self.theta_mean(),
            wall_ms: elapsed_ms(&self.config, start),
        };
        self.push_row(row, sink)
    }

    /// Trains until `config.epochs` epochs are complete, adding the initial
    /// row first when starting from scratch.
    pub fn run(
        &mut self,
        train: &LabeledDataset<S>,
        test: &LabeledDataset<S>,
        hook: &mut dyn PhaseHook,
        mut sink: Option<&mut CsvSink>,
    ) -> Result<()> {
        if self.metrics.rows.is_empty() {
            self.initial_row(test, hook, sink.as_deref_mut())?;
        }
        while self.epoch < self.config.epochs {
            self.train_epoch(train, test, hook, sink.as_deref_mut())?;
        }
        Ok(())
    }

    /// Snapshot of the full state at an epoch boundary.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "format": "dpap-trainer",
            "dtype": S::DTYPE,
            "epoch": self.epoch,
            "config": self.config,
            "metrics": self.metrics,
        });
        let mut c = Checkpoint::new(meta);
        for (l, layer) in self.net().layers().iter().enumerate() {
            let Some(p) = &layer.params else { continue };
            c.push_tensor(format!("layer{l}.weight"), &p.weight);
            c.push_tensor(format!("layer{l}.bias"), &p.bias);
            c.push_bools(format!("layer{l}.mask.synapse"), p.mask.synapses());
            c.push_bools(format!("layer{l}.mask.neuron"), p.mask.neurons());
            if let Some(Some(v)) = self.sgd.velocity().get(l) {
                c.push_tensor(format!("layer{l}.velocity.weight"), &v.weight);
                c.push_tensor(format!("layer{l}.velocity.bias"), &v.bias);
            }
        }
        if let Some(p) = &self.plasticity {
            for (k, lp) in p.layers.iter().enumerate() {
                c.push_scalars(format!("plasticity{k}.theta"), vec![lp.bcm.theta.len()], &lp.bcm.theta);
                c.push_u64s(format!("plasticity{k}.num"), &[lp.bcm.num]);
                c.push_tensor(format!("plasticity{k}.bcm_epoch"), &lp.bcm.bcm_epoch);
                c.push_scalars(format!("plasticity{k}.d_epoch"), vec![lp.spine.d_epoch.len()], &lp.spine.d_epoch);
            }
        }
        if let Some(pr) = &self.pruner {
            for (k, s) in pr.layers.iter().enumerate() {
                c.push_tensor(format!("survival{k}.f_bcm"), &s.f_bcm);
                c.push_scalars(format!("survival{k}.f_d"), vec![s.f_d.len()], &s.f_d);
                c.push_u64s(format!("survival{k}.epoch"), &[s.epoch as u64]);
            }
        }
        c
    }

    /// Rebuilds a trainer from [`Trainer::to_checkpoint`] output. Fails
    /// without side effects on any inconsistency.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let meta = &c.meta;
        if meta["format"] != "dpap-trainer" {
            return Err(bad("not a trainer checkpoint".into()));
        }
        if meta["dtype"] != S::DTYPE {
            return Err(bad(format!(
                "checkpoint holds {} state, requested {}",
                meta["dtype"],
                S::DTYPE
            )));
        }
        let config: ExperimentConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| bad(format!("config: {e}")))?;
        let metrics: RunMetrics = serde_json::from_value(meta["metrics"].clone())
            .map_err(|e| bad(format!("metrics: {e}")))?;
        let epoch = meta["epoch"]
            .as_u64()
            .ok_or_else(|| bad("missing epoch".into()))? as usize;
        let mut t = Trainer::<S>::new(config)?;
        t.epoch = epoch;
        t.metrics = metrics;

        let layer_count = t.net().layers().len();
        let mut velocity = Vec::with_capacity(layer_count);
        let mut any_velocity = false;
        for (l, layer) in t.model.net_mut().layers_mut().iter_mut().enumerate() {
            let Some(p) = layer.params.as_mut() else {
                velocity.push(None);
                continue;
            };
            let weight = c.tensor::<S>(&format!("layer{l}.weight"))?;
            let bias = c.tensor::<S>(&format!("layer{l}.bias"))?;
            if weight.shape() != p.weight.shape() || bias.shape() != p.bias.shape() {
                return Err(bad(format!("layer {l}: parameter shape does not match topology")));
            }
            let mask = LayerMask::from_parts(
                p.mask.post(),
                p.mask.pre(),
                p.mask.kernel(),
                c.bools(&format!("layer{l}.mask.synapse"))?,
                c.bools(&format!("layer{l}.mask.neuron"))?,
            )?;
            p.weight = weight;
            p.bias = bias;
            p.mask = mask;
            let vw = format!("layer{l}.velocity.weight");
            if c.find(&vw).is_some() {
                any_velocity = true;
                let v = ParamGrads {
                    weight: c.tensor::<S>(&vw)?,
                    bias: c.tensor::<S>(&format!("layer{l}.velocity.bias"))?,
                };
                if v.weight.shape() != p.weight.shape() || v.bias.shape() != p.bias.shape() {
                    return Err(bad(format!("layer {l}: velocity shape does not match")));
                }
                velocity.push(Some(v));
            } else {
                velocity.push(None);
            }
        }
        if any_velocity {
            t.sgd.set_velocity(velocity);
        }
        if let Some(p) = t.plasticity.as_mut() {
            for (k, lp) in p.layers.iter_mut().enumerate() {
                let theta = c.scalars::<S>(&format!("plasticity{k}.theta"))?;
                let num = c.u64s(&format!("plasticity{k}.num"))?;
                let bcm = c.tensor::<S>(&format!("plasticity{k}.bcm_epoch"))?;
                let d = c.scalars::<S>(&format!("plasticity{k}.d_epoch"))?;
                if theta.len() != lp.bcm.theta.len()
                    || num.len() != 1
                    || bcm.shape() != lp.bcm.bcm_epoch.shape()
                    || d.len() != lp.spine.d_epoch.len()
                {
                    return Err(bad(format!("plasticity layer {k}: shape mismatch")));
                }
                lp.bcm.theta = theta;
                lp.bcm.num = num[0];
                lp.bcm.bcm_epoch = bcm;
                lp.spine.d_epoch = d;
            }
        }
        if let Some(pr) = t.pruner.as_mut() {
            for (k, s) in pr.layers.iter_mut().enumerate() {
                let f_bcm = c.tensor::<S>(&format!("survival{k}.f_bcm"))?;
                let f_d = c.scalars::<S>(&format!("survival{k}.f_d"))?;
                let e = c.u64s(&format!("survival{k}.epoch"))?;
                if f_bcm.shape() != s.f_bcm.shape() || f_d.len() != s.f_d.len() || e.len() != 1 {
                    return Err(bad(format!("survival layer {k}: shape mismatch")));
                }
                s.f_bcm = f_bcm;
                s.f_d = f_d;
                s.epoch = e[0] as usize;
            }
        }
        Ok(t)
    }
}

/// Loads the data, trains to completion and returns the metrics.
pub fn run_training<S: Scalar>(config: &ExperimentConfig) -> Result<RunMetrics> {
    let (train, test) = load_split::<S>(config)?;
    let mut t = Trainer::<S>::new(config.clone())?;
    t.run(&train, &test, &mut (), None)?;
    Ok(t.metrics)
}
