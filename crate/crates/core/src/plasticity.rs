//! Activity-dependent importance signals.
//!
//! * spiking traces: `S ← τ·S + activity`, where activity is a neuron's spike
//!   (fully-connected) or the spatial spike count of a whole channel
//!   (convolution);
//! * trace-based BCM per synapse, with a sliding threshold θ that is the
//!   running mean of every postsynaptic trace seen so far;
//! * dendritic-spine plasticity per postsynaptic unit, the unit's trace times
//!   the summed BCM of its incoming synapses.
//!
//! BCM and spine values are accumulated per batch and handed to the pruner
//! once per epoch. Nothing here depends on which engine produced the traces.

use crate::error::{Error, Result};
use crate::network::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::topology::LayerKind;

/// Decaying activity trace, one value per sample and unit.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceState<S> {
    values: Tensor<S>,
    tau: S,
}

impl<S: Scalar> TraceState<S> {
    pub fn new(batch: usize, units: usize, tau: S) -> Self {
        TraceState {
            values: Tensor::zeros(&[batch, units]),
            tau,
        }
    }

    pub fn tau(&self) -> S {
        self.tau
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    /// `S ← τ·S + activity`; `activity` must already be at unit granularity
    /// (see [`unit_activity`]).
    pub fn trace_step(&mut self, activity: &Tensor<S>) -> Result<()> {
        if activity.shape() != self.values.shape() {
            return Err(Error::shape(
                "trace_step",
                format!(
                    "activity {:?} vs trace {:?}",
                    activity.shape(),
                    self.values.shape()
                ),
            ));
        }
        let tau = self.tau;
        for (s, &a) in self.values.data_mut().iter_mut().zip(activity.data()) {
            *s = tau * *s + a;
        }
        Ok(())
    }

    /// Mean over the batch axis, summed in sample order.
    pub fn batch_mean(&self) -> Vec<S> {
        let shape = self.values.shape();
        let (batch, units) = (shape[0], shape[1]);
        let mut mean = vec![S::zero(); units];
        for row in self.values.data().chunks_exact(units) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = S::lit(batch as f64);
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Reduces a layer tensor to per-unit activity: `[B, C, H, W]` is summed
/// over space per channel, `[B, N]` is passed through.
pub fn unit_activity<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    match *x.shape() {
        [_, _] => Ok(x.clone()),
        [b, c, h, w] => {
            let plane = h * w;
            let data = x
                .data()
                .chunks_exact(plane)
                .map(|p| p.iter().fold(S::zero(), |acc, &v| acc + v))
                .collect();
            Tensor::from_vec(&[b, c], data)
        }
        _ => Err(Error::shape(
            "unit_activity",
            format!("expected rank 2 or 4, got {:?}", x.shape()),
        )),
    }
}

/// End-of-window traces of one trainable layer, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTraces<S> {
    /// Trace of the layer's input units (channels for convolutions).
    pub pre: Vec<S>,
    /// Trace of the layer's own neurons (channels for convolutions).
    pub post: Vec<S>,
}

/// Sliding-threshold BCM bookkeeping for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BcmState<S> {
    pub theta: Vec<S>,
    /// Batches seen since the start of training.
    pub num: u64,
    /// Sum of per-batch BCM matrices in the current epoch, `[post, pre]`.
    pub bcm_epoch: Tensor<S>,
}

const MAX_EXACT_COUNT: u64 = 1 << 53;

impl<S: Scalar> BcmState<S> {
    pub fn new(post: usize, pre: usize) -> Self {
        BcmState {
            theta: vec![S::zero(); post],
            num: 0,
            bcm_epoch: Tensor::zeros(&[post, pre]),
        }
    }

    pub fn post(&self) -> usize {
        self.bcm_epoch.shape()[0]
    }

    pub fn pre(&self) -> usize {
        self.bcm_epoch.shape()[1]
    }

    /// One batch: `BCM[i, j] = s_pre[j]·s_post[i]·(s_post[i] − θ[i])` with θ
    /// from before this batch, then the threshold update and epoch
    /// accumulation. Returns this batch's matrix.
    pub fn bcm_batch(&mut self, s_pre: &[S], s_post: &[S]) -> Result<Tensor<S>> {
        let (post, pre) = (self.post(), self.pre());
        if s_pre.len() != pre || s_post.len() != post {
            return Err(Error::shape(
                "bcm_batch",
                format!(
                    "traces of {} pre / {} post units for a {post}x{pre} layer",
                    s_pre.len(),
                    s_post.len()
                ),
            ));
        }
        if self.num >= MAX_EXACT_COUNT {
            return Err(Error::State(format!(
                "bcm_batch: batch counter {} exceeds 2^53",
                self.num
            )));
        }
        let mut batch = vec![S::zero(); post * pre];
        for i in 0..post {
            let (so, dev) = (s_post[i], s_post[i] - self.theta[i]);
            for (b, &sp) in batch[i * pre..(i + 1) * pre].iter_mut().zip(s_pre) {
                *b = sp * so * dev;
            }
        }
        self.num += 1;
        let n = S::lit(self.num as f64);
        let prev = S::lit((self.num - 1) as f64);
        for (th, &s) in self.theta.iter_mut().zip(s_post) {
            *th = (*th * prev + s) / n;
        }
        for (acc, &b) in self.bcm_epoch.data_mut().iter_mut().zip(&batch) {
            *acc += b;
        }
        Tensor::from_vec(&[post, pre], batch)
    }
}

/// Batch counter value at 1-based batch `b` of 0-based epoch `e`, counting
/// every batch since the start of training.
pub fn batch_counter(epoch: u64, batches_per_epoch: u64, batch: u64) -> u64 {
    epoch * batches_per_epoch + batch
}

/// Dendritic-spine accumulator for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SpineState<S> {
    pub d_epoch: Vec<S>,
    pub n_pre: usize,
}

impl<S: Scalar> SpineState<S> {
    pub fn new(post: usize, n_pre: usize) -> Self {
        SpineState {
            d_epoch: vec![S::zero(); post],
            n_pre,
        }
    }

    /// `D[i] += s_post[i] · Σ_j BCM_batch[i, j]`.
    pub fn spine_batch(&mut self, s_post: &[S], bcm_batch: &Tensor<S>) -> Result<()> {
        let post = self.d_epoch.len();
        if s_post.len() != post || bcm_batch.shape() != [post, self.n_pre] {
            return Err(Error::shape(
                "spine_batch",
                format!(
                    "{} post traces and BCM {:?} for {post} units with {} inputs",
                    s_post.len(),
                    bcm_batch.shape(),
                    self.n_pre
                ),
            ));
        }
        for (i, (d, &s)) in self.d_epoch.iter_mut().zip(s_post).enumerate() {
            let row = bcm_batch.data()[i * self.n_pre..(i + 1) * self.n_pre]
                .iter()
                .fold(S::zero(), |acc, &v| acc + v);
            *d += s * row;
        }
        Ok(())
    }
}

/// Frozen per-epoch importance of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceSnapshot<S> {
    /// Synapse importance, `[post, pre]`.
    pub synapse: Tensor<S>,
    /// Neuron importance, `[post]`.
    pub neuron: Vec<S>,
}

/// Hands out the epoch accumulators and zeroes them. θ and the batch counter
/// carry over.
pub fn epoch_rollover<S: Scalar>(
    bcm: &mut BcmState<S>,
    spine: &mut SpineState<S>,
) -> ImportanceSnapshot<S> {
    let zero = Tensor::zeros(bcm.bcm_epoch.shape());
    let synapse = std::mem::replace(&mut bcm.bcm_epoch, zero);
    let fresh = vec![S::zero(); spine.d_epoch.len()];
    let neuron = std::mem::replace(&mut spine.d_epoch, fresh);
    ImportanceSnapshot { synapse, neuron }
}

/// Source of per-epoch synapse and neuron importance for the pruner.
///
/// The developmental-plasticity criterion is [`DpapPlasticity`]; other rules
/// (spike-timing or Hebbian variants) plug in here.
pub trait ImportanceCriterion<S: Scalar> {
    /// Consumes one batch of end-of-window traces, one entry per trainable
    /// layer.
    fn observe_batch(&mut self, traces: &[LayerTraces<S>]) -> Result<()>;

    /// Closes the epoch and returns one snapshot per trainable layer.
    fn rollover(&mut self) -> Vec<ImportanceSnapshot<S>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlasticity<S> {
    pub bcm: BcmState<S>,
    pub spine: SpineState<S>,
}

/// BCM and spine state for every trainable layer of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct DpapPlasticity<S> {
    pub layers: Vec<LayerPlasticity<S>>,
}

impl<S: Scalar> DpapPlasticity<S> {
    pub fn for_network(net: &Network<S>) -> Self {
        let layers = net
            .params()
            .map(|p| {
                let (post, pre) = (p.mask.post(), p.mask.pre());
                LayerPlasticity {
                    bcm: BcmState::new(post, pre),
                    spine: SpineState::new(post, pre),
                }
            })
            .collect();
        DpapPlasticity { layers }
    }

    pub fn num_batches(&self) -> u64 {
        self.layers.first().map_or(0, |l| l.bcm.num)
    }

    pub fn theta_mean(&self) -> f64 {
        let (sum, n) = self
            .layers
            .iter()
            .flat_map(|l| l.bcm.theta.iter())
            .fold((0.0, 0usize), |(s, n), v| (s + v.to_f64_lossy(), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

impl<S: Scalar> ImportanceCriterion<S> for DpapPlasticity<S> {
    fn observe_batch(&mut self, traces: &[LayerTraces<S>]) -> Result<()> {
        if traces.len() != self.layers.len() {
            return Err(Error::shape(
                "observe_batch",
                format!(
                    "{} trace sets for {} layers",
                    traces.len(),
                    self.layers.len()
                ),
            ));
        }
        for (layer, t) in self.layers.iter_mut().zip(traces) {
            let batch = layer.bcm.bcm_batch(&t.pre, &t.post)?;
            layer.spine.spine_batch(&t.post, &batch)?;
        }
        Ok(())
    }

    fn rollover(&mut self) -> Vec<ImportanceSnapshot<S>> {
        self.layers
            .iter_mut()
            .map(|l| epoch_rollover(&mut l.bcm, &mut l.spine))
            .collect()
    }
}

/// Pre/post unit counts of a trainable layer, as seen by the traces.
pub fn trace_units(kind: &LayerKind) -> Option<(usize, usize)> {
    match *kind {
        LayerKind::Conv(spec) => Some((spec.in_channels, spec.out_channels)),
        LayerKind::Fc { inputs, outputs } => Some((inputs, outputs)),
        _ => None,
    }
}

/// Per-sample traces of a network's trainable layers over one window.
#[derive(Clone, Debug)]
pub struct NetworkTraces<S> {
    pub pre: Vec<TraceState<S>>,
    pub post: Vec<TraceState<S>>,
}

impl<S: Scalar> NetworkTraces<S> {
    pub fn new(net: &Network<S>, batch: usize, tau: S) -> Self {
        let units: Vec<_> = net
            .layers()
            .iter()
            .filter_map(|l| trace_units(&l.plan.kind))
            .collect();
        NetworkTraces {
            pre: units
                .iter()
                .map(|&(pre, _)| TraceState::new(batch, pre, tau))
                .collect(),
            post: units
                .iter()
                .map(|&(_, post)| TraceState::new(batch, post, tau))
                .collect(),
        }
    }

    pub fn batch_traces(&self) -> Vec<LayerTraces<S>> {
        self.pre
            .iter()
            .zip(&self.post)
            .map(|(pre, post)| LayerTraces {
                pre: pre.batch_mean(),
                post: post.batch_mean(),
            })
            .collect()
    }
}
