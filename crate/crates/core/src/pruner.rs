//! Survival-function pruning.
//!
//! Every synapse and neuron carries a survival value `F`, initialised to β.
//! Once per epoch the layer's importance is normalised to
//! `δ = 2·(x − min)/(max − min) − ε` over the still-alive entries, elements
//! with `δ ≥ 0` get a protection bonus `C`, and
//! `F ← γ·F + exp(−epoch/η)·ΔF`. Elements whose `F` drops below zero are
//! removed for good; a removed neuron takes all its incoming synapses and
//! its bias with it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerMask, Network};
use crate::plasticity::ImportanceSnapshot;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::topology::LayerKind;

/// Linear map of the alive entries of `importance` onto `[−ε, 2 − ε]`.
///
/// Entries with `alive[i] == false` are excluded from min/max and come back
/// as zero. When all alive entries are equal every δ is `2 − ε`.
pub fn normalize_delta<S: Scalar>(importance: &[S], alive: &[bool], epsilon: S) -> Vec<S> {
    let mut min = S::infinity();
    let mut max = S::neg_infinity();
    for (&x, _) in importance.iter().zip(alive).filter(|(_, &a)| a) {
        min = min.min(x);
        max = max.max(x);
    }
    let two = S::lit(2.0);
    let range = max - min;
    importance
        .iter()
        .zip(alive)
        .map(|(&x, &a)| {
            if !a {
                S::zero()
            } else if !(range > S::zero()) {
                two - epsilon
            } else {
                two * ((x - min) / range) - epsilon
            }
        })
        .collect()
}

/// `ΔF = δ + c` where `δ ≥ 0`, else `δ`.
pub fn delta_f<S: Scalar>(delta: &[S], c: S) -> Vec<S> {
    delta
        .iter()
        .map(|&d| if d >= S::zero() { d + c } else { d })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalParams {
    /// Initial survival value β.
    pub beta: f64,
    /// Per-epoch decay γ of the survival value.
    pub gamma: f64,
    /// Decay value ε.
    pub epsilon: f64,
    /// Decay rate η of the update size.
    pub eta: f64,
    /// Protection bonus for convolution layers.
    pub c_conv: f64,
    /// Protection bonus for fully-connected layers.
    pub c_fc: f64,
}

impl Default for SurvivalParams {
    fn default() -> Self {
        SurvivalParams {
            beta: 2.0,
            gamma: 0.999,
            epsilon: 0.9,
            eta: 25.0,
            c_conv: 5.0,
            c_fc: 2.0,
        }
    }
}

impl SurvivalParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.gamma > 0.0
            && self.gamma < 1.0
            && self.epsilon > 0.0
            && self.epsilon < 2.0
            && self.eta > 0.0
            && self.c_conv >= 0.0
            && self.c_fc >= 0.0;
        if !ok {
            return Err(Error::invalid(
                "survival",
                format!("need beta > 0, 0 < gamma < 1, 0 < epsilon < 2, eta > 0, C >= 0: {self:?}"),
            ));
        }
        Ok(())
    }
}

/// Survival values of one trainable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalState<S> {
    /// `[post, pre]`.
    pub f_bcm: Tensor<S>,
    /// `[post]`.
    pub f_d: Vec<S>,
    pub beta: S,
    pub gamma: S,
    pub epsilon: S,
    pub eta: S,
    pub c: S,
    /// Whether this layer's neurons may be removed (false for the readout).
    pub prune_neurons: bool,
    /// Index of the epoch the next update belongs to.
    pub epoch: usize,
}

impl<S: Scalar> SurvivalState<S> {
    pub fn new(post: usize, pre: usize, params: &SurvivalParams, c: f64, prune_neurons: bool) -> Self {
        let beta = S::lit(params.beta);
        SurvivalState {
            f_bcm: Tensor::full(&[post, pre], beta),
            f_d: vec![beta; post],
            beta,
            gamma: S::lit(params.gamma),
            epsilon: S::lit(params.epsilon),
            eta: S::lit(params.eta),
            c: S::lit(c),
            prune_neurons,
            epoch: 0,
        }
    }

    /// `exp(−epoch/η)`.
    pub fn step_weight(&self) -> S {
        (-(S::lit(self.epoch as f64) / self.eta)).exp()
    }
}

/// `F ← γ·F + exp(−epoch/η)·ΔF` on alive entries; dead entries are left
/// untouched.
pub fn survival_update<S: Scalar>(
    state: &mut SurvivalState<S>,
    delta_f_bcm: &[S],
    delta_f_d: &[S],
    mask: &LayerMask,
) -> Result<()> {
    if delta_f_bcm.len() != state.f_bcm.len() || delta_f_d.len() != state.f_d.len() {
        return Err(Error::shape(
            "survival_update",
            format!(
                "{} synapse / {} neuron updates for {} / {} survival values",
                delta_f_bcm.len(),
                delta_f_d.len(),
                state.f_bcm.len(),
                state.f_d.len()
            ),
        ));
    }
    let w = state.step_weight();
    let gamma = state.gamma;
    for ((f, &d), &alive) in state
        .f_bcm
        .data_mut()
        .iter_mut()
        .zip(delta_f_bcm)
        .zip(mask.synapses())
    {
        if alive {
            *f = gamma * *f + w * d;
        }
    }
    for ((f, &d), &alive) in state.f_d.iter_mut().zip(delta_f_d).zip(mask.neurons()) {
        if alive {
            *f = gamma * *f + w * d;
        }
    }
    Ok(())
}

/// Elements removed by one [`apply_pruning`] call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PruneOutcome {
    /// `(post, pre)` synapses whose own survival value went negative.
    pub synapses: Vec<(usize, usize)>,
    /// Neurons whose survival value went negative, with the number of
    /// incoming synapses they still had when removed.
    pub neurons: Vec<(usize, usize)>,
}

/// Removes alive synapses with `F_BCM < 0` and, where allowed, alive neurons
/// with `F_D < 0`, then zeroes the corresponding weights and biases.
pub fn apply_pruning<S: Scalar>(
    state: &SurvivalState<S>,
    mask: &mut LayerMask,
    weight: &mut Tensor<S>,
    bias: &mut Tensor<S>,
) -> PruneOutcome {
    let mut outcome = PruneOutcome::default();
    let pre = mask.pre();
    for (idx, &f) in state.f_bcm.data().iter().enumerate() {
        let (i, j) = (idx / pre, idx % pre);
        if f < S::zero() && mask.synapse_kept(i, j) {
            mask.kill_synapse(i, j);
            outcome.synapses.push((i, j));
        }
    }
    if state.prune_neurons {
        for (i, &f) in state.f_d.iter().enumerate() {
            if f < S::zero() && mask.neuron_kept(i) {
                let remaining = mask.row_count(i);
                mask.kill_neuron(i);
                outcome.neurons.push((i, remaining));
            }
        }
    }
    mask.apply(weight, bias);
    outcome
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementKind {
    Synapse,
    Neuron,
}

/// One element removed because its own survival value went negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    /// Index among trainable layers.
    pub layer: usize,
    pub kind: ElementKind,
    pub post: usize,
    /// Presynaptic unit for synapses.
    pub pre: Option<usize>,
    /// Survival value after the previous epoch's update (β before the first).
    pub f_before: f64,
    pub f_at: f64,
    /// Incoming synapses still alive when a neuron was removed.
    pub surviving_synapses: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochPruneSummary {
    pub pruned_synapses: usize,
    pub pruned_neurons: usize,
    pub events: Vec<PruneEvent>,
}

/// Survival state for every trainable layer of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct Pruner<S> {
    pub params: SurvivalParams,
    pub layers: Vec<SurvivalState<S>>,
}

impl<S: Scalar> Pruner<S> {
    /// The last trainable layer is the readout; its neurons are never
    /// removed, its synapses are.
    pub fn for_network(net: &Network<S>, params: SurvivalParams) -> Result<Self> {
        params.validate()?;
        let idx = net.param_layer_indices();
        let last = idx.len().saturating_sub(1);
        let layers = idx
            .iter()
            .enumerate()
            .map(|(n, &l)| {
                let layer = &net.layers()[l];
                let mask = &layer.params.as_ref().expect("trainable").mask;
                let c = match layer.plan.kind {
                    LayerKind::Conv(_) => params.c_conv,
                    _ => params.c_fc,
                };
                SurvivalState::new(mask.post(), mask.pre(), &params, c, n != last)
            })
            .collect();
        Ok(Pruner { params, layers })
    }

    pub fn epoch(&self) -> usize {
        self.layers.first().map_or(0, |l| l.epoch)
    }

    /// Full end-of-epoch pass: [`Pruner::survival_step`] then
    /// [`Pruner::prune_step`].
    pub fn epoch_step(
        &mut self,
        snapshots: &[ImportanceSnapshot<S>],
        net: &mut Network<S>,
    ) -> Result<EpochPruneSummary> {
        let before = self.survival_step(snapshots, net)?;
        self.prune_step(before, net)
    }

    /// Normalises importance, forms ΔF and updates every layer's survival
    /// values. Returns the values from before the update for event logging.
    pub fn survival_step(
        &mut self,
        snapshots: &[ImportanceSnapshot<S>],
        net: &Network<S>,
    ) -> Result<SurvivalBefore<S>> {
        if snapshots.len() != self.layers.len() {
            return Err(Error::shape(
                "prune",
                format!(
                    "{} importance snapshots for {} layers",
                    snapshots.len(),
                    self.layers.len()
                ),
            ));
        }
        let mut before = Vec::with_capacity(self.layers.len());
        for ((state, snap), p) in self.layers.iter_mut().zip(snapshots).zip(net.params()) {
            let eps = state.epsilon;
            let d_bcm = normalize_delta(snap.synapse.data(), p.mask.synapses(), eps);
            let d_d = normalize_delta(&snap.neuron, p.mask.neurons(), eps);
            before.push((state.f_bcm.clone(), state.f_d.clone()));
            survival_update(state, &delta_f(&d_bcm, state.c), &delta_f(&d_d, state.c), &p.mask)?;
        }
        Ok(SurvivalBefore(before))
    }

    /// Removes every element whose survival value is negative and advances
    /// the epoch counter.
    pub fn prune_step(
        &mut self,
        before: SurvivalBefore<S>,
        net: &mut Network<S>,
    ) -> Result<EpochPruneSummary> {
        let mut summary = EpochPruneSummary::default();
        let mut params: Vec<_> = net.params_mut().collect();
        if before.0.len() != self.layers.len() || params.len() != self.layers.len() {
            return Err(Error::State(
                "prune_step: survival update does not match this network".into(),
            ));
        }
        for (layer, ((state, (before_bcm, before_d)), p)) in self
            .layers
            .iter_mut()
            .zip(before.0)
            .zip(params.iter_mut())
            .enumerate()
        {
            let epoch = state.epoch;
            let outcome = apply_pruning(state, &mut p.mask, &mut p.weight, &mut p.bias);
            let pre = p.mask.pre();
            for &(i, j) in &outcome.synapses {
                summary.events.push(PruneEvent {
                    epoch,
                    layer,
                    kind: ElementKind::Synapse,
                    post: i,
                    pre: Some(j),
                    f_before: before_bcm.data()[i * pre + j].to_f64_lossy(),
                    f_at: state.f_bcm.data()[i * pre + j].to_f64_lossy(),
                    surviving_synapses: None,
                });
            }
            for &(i, remaining) in &outcome.neurons {
                summary.events.push(PruneEvent {
                    epoch,
                    layer,
                    kind: ElementKind::Neuron,
                    post: i,
                    pre: None,
                    f_before: before_d[i].to_f64_lossy(),
                    f_at: state.f_d[i].to_f64_lossy(),
                    surviving_synapses: Some(remaining),
                });
            }
            summary.pruned_synapses += outcome.synapses.len();
            summary.pruned_neurons += outcome.neurons.len();
            state.epoch += 1;
        }
        Ok(summary)
    }
}

/// Survival values of every layer just before an update.
#[derive(Clone, Debug)]
pub struct SurvivalBefore<S>(Vec<(Tensor<S>, Vec<S>)>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCompression {
    /// Index into [`Network::layers`].
    pub layer: usize,
    pub total_params: usize,
    pub retained_params: usize,
    pub kept_synapses: usize,
    pub kept_neurons: usize,
}

/// Parameter accounting over trainable weights and biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub total_params: usize,
    pub retained_params: usize,
    pub pruning_rate: f64,
    pub per_layer: Vec<LayerCompression>,
}

pub fn compression_report<S: Scalar>(net: &Network<S>) -> CompressionReport {
    let per_layer: Vec<LayerCompression> = net
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            l.params.as_ref().map(|p| LayerCompression {
                layer: i,
                total_params: p.mask.total_params(),
                retained_params: p.mask.kept_params(),
                kept_synapses: p.mask.kept_synapses(),
                kept_neurons: p.mask.kept_neurons(),
            })
        })
        .collect();
    let total: usize = per_layer.iter().map(|l| l.total_params).sum();
    let retained: usize = per_layer.iter().map(|l| l.retained_params).sum();
    CompressionReport {
        total_params: total,
        retained_params: retained,
        pruning_rate: if total == 0 {
            0.0
        } else {
            1.0 - retained as f64 / total as f64
        },
        per_layer,
    }
}
