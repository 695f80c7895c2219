//! Conventional ReLU network with softmax cross-entropy.
//!
//! Post-activation values play the role of spiking traces: a fully-connected
//! neuron's trace is its ReLU output, a convolution channel's trace is its
//! ReLU output summed over space. The output layer's trace is the rectified
//! logit. There is no time window, so one forward pass yields one trace
//! sample per batch.

use crate::error::{Error, Result};
use crate::network::{Gradients, Network, Sgd};
use crate::plasticity::{unit_activity, LayerTraces};
use crate::scalar::Scalar;
use crate::snn::accumulate_param_grads;
use crate::tensor::{
    avgpool2_backward, avgpool2_forward, conv2d_forward, linear_forward, maxpool2_backward,
    maxpool2_forward, MaxPoolIndices, Tensor,
};
use crate::topology::LayerKind;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnModel<S> {
    pub net: Network<S>,
}

/// Per-sample unit activities of every trainable layer for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnTrace<S> {
    /// `[B, pre_units]` input activity.
    pub pre: Tensor<S>,
    /// `[B, post_units]` post-ReLU activity.
    pub post: Tensor<S>,
}

impl<S: Scalar> AnnTrace<S> {
    fn batch_mean(t: &Tensor<S>) -> Vec<S> {
        let (batch, units) = (t.shape()[0], t.shape()[1]);
        let mut mean = vec![S::zero(); units];
        for row in t.data().chunks_exact(units) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = S::lit(batch as f64);
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    pub fn to_layer_traces(&self) -> LayerTraces<S> {
        LayerTraces {
            pre: Self::batch_mean(&self.pre),
            post: Self::batch_mean(&self.post),
        }
    }
}

#[derive(Clone, Debug)]
enum Record<S> {
    Affine { pre_activation: Tensor<S> },
    AvgPool,
    MaxPool(MaxPoolIndices),
    Flatten(Vec<usize>),
}

/// Forward activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct AnnState<S> {
    input: Tensor<S>,
    records: Vec<Record<S>>,
    outputs: Vec<Tensor<S>>,
    pub logits: Tensor<S>,
    pub traces: Vec<AnnTrace<S>>,
}

impl<S: Scalar> AnnState<S> {
    pub fn output(&self, layer: usize) -> &Tensor<S> {
        &self.outputs[layer]
    }

    pub fn predictions(&self) -> Vec<usize> {
        let classes = self.logits.shape()[1];
        self.logits
            .data()
            .chunks_exact(classes)
            .map(|r| {
                let mut best = 0;
                for c in 1..classes {
                    if r[c] > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    pub fn layer_traces(&self) -> Vec<LayerTraces<S>> {
        self.traces.iter().map(AnnTrace::to_layer_traces).collect()
    }
}

impl<S: Scalar> AnnModel<S> {
    pub fn new(net: Network<S>) -> Self {
        AnnModel { net }
    }

    /// Forward pass. Every trainable layer except the last applies ReLU; the
    /// last produces logits.
    pub fn ann_forward(&self, input: &Tensor<S>) -> Result<AnnState<S>> {
        const OP: &str = "ann_forward";
        let [c, h, w] = self.net.input_shape();
        input.expect_rank(4, OP, "input")?;
        if input.shape()[1..] != [c, h, w] {
            return Err(Error::shape(
                OP,
                format!("input {:?}, network expects [B, {c}, {h}, {w}]", input.shape()),
            ));
        }
        let batch = input.shape()[0];
        let layers = self.net.layers();
        let last = layers.len() - 1;
        let mut records = Vec::with_capacity(layers.len());
        let mut outputs: Vec<Tensor<S>> = Vec::with_capacity(layers.len());
        let mut traces = Vec::new();
        for (l, layer) in layers.iter().enumerate() {
            let x = if l == 0 { input } else { &outputs[l - 1] };
            let (record, out) = match layer.plan.kind {
                LayerKind::Conv(_) | LayerKind::Fc { .. } => {
                    let p = layer.params.as_ref().expect("trainable layer");
                    let z = match layer.plan.kind {
                        LayerKind::Conv(spec) => conv2d_forward(x, &p.weight, &p.bias, &spec)?,
                        _ => linear_forward(x, &p.weight, &p.bias)?,
                    };
                    let relu = z.map(|v| v.max(S::zero()));
                    traces.push(AnnTrace {
                        pre: unit_activity(x)?,
                        post: unit_activity(&relu)?,
                    });
                    let out = if l == last { z.clone() } else { relu };
                    (Record::Affine { pre_activation: z }, out)
                }
                LayerKind::AvgPool2 => (Record::AvgPool, avgpool2_forward(x)?),
                LayerKind::MaxPool2 => {
                    let (y, idx) = maxpool2_forward(x)?;
                    (Record::MaxPool(idx), y)
                }
                LayerKind::Flatten => {
                    let n = x.len() / batch;
                    (
                        Record::Flatten(x.shape().to_vec()),
                        x.clone().reshape(&[batch, n])?,
                    )
                }
            };
            records.push(record);
            outputs.push(out);
        }
        let logits = outputs[last].clone();
        Ok(AnnState {
            input: input.clone(),
            records,
            outputs,
            logits,
            traces,
        })
    }

    /// Exact gradients of the batch-mean cross-entropy. Masked entries are
    /// zeroed.
    pub fn ann_backward(&self, state: &AnnState<S>, labels: &[usize]) -> Result<Gradients<S>> {
        const OP: &str = "ann_backward";
        let layers = self.net.layers();
        if state.records.len() != layers.len() {
            return Err(Error::State(format!(
                "{OP}: forward state has {} layers, model has {}",
                state.records.len(),
                layers.len()
            )));
        }
        let mut grad = cross_entropy_grad(&state.logits, labels)?;
        let mut grads = Gradients::zeros_like(&self.net);
        let last = layers.len() - 1;
        for l in (0..layers.len()).rev() {
            let needs_input_grad = layers[..l].iter().any(|x| x.params.is_some());
            match (&layers[l].plan.kind, &state.records[l]) {
                (kind @ (LayerKind::Conv(_) | LayerKind::Fc { .. }), Record::Affine { pre_activation }) => {
                    if l != last {
                        grad = grad.zip_map(pre_activation, OP, |g, z| {
                            if z > S::zero() {
                                g
                            } else {
                                S::zero()
                            }
                        })?;
                    }
                    let p = layers[l].params.as_ref().expect("trainable layer");
                    let x = if l == 0 { &state.input } else { &state.outputs[l - 1] };
                    let slot = grads.layers[l].as_mut().expect("grad slot");
                    if let Some(gin) =
                        accumulate_param_grads(kind, p, &grad, x, slot, needs_input_grad)?
                    {
                        grad = gin;
                    }
                }
                (LayerKind::AvgPool2, Record::AvgPool) => grad = avgpool2_backward(&grad)?,
                (LayerKind::MaxPool2, Record::MaxPool(idx)) => grad = maxpool2_backward(&grad, idx)?,
                (LayerKind::Flatten, Record::Flatten(shape)) => grad = grad.reshape(shape)?,
                _ => unreachable!("record kind follows layer kind"),
            }
            if !needs_input_grad {
                break;
            }
        }
        grads.apply_masks(&self.net);
        Ok(grads)
    }

    /// Backward pass followed by one optimizer step; masks are re-applied.
    pub fn ann_backward_and_step(
        &mut self,
        state: &AnnState<S>,
        labels: &[usize],
        opt: &mut Sgd<S>,
    ) -> Result<Gradients<S>> {
        let grads = self.ann_backward(state, labels)?;
        opt.step(&mut self.net, &grads)?;
        Ok(grads)
    }
}

fn check_labels<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(usize, usize)> {
    const OP: &str = "cross_entropy";
    logits.expect_rank(2, OP, "logits")?;
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::shape(
            OP,
            format!("{} labels for batch of {batch}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(
            OP,
            format!("label {bad} out of range for {classes} classes"),
        ));
    }
    Ok((batch, classes))
}

/// Mean softmax cross-entropy, computed through a max-shifted log-sum-exp.
pub fn cross_entropy_loss<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let (batch, classes) = check_labels(logits, labels)?;
    let mut total = S::zero();
    for (row, &y) in logits.data().chunks_exact(classes).zip(labels) {
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().fold(S::zero(), |a, &v| a + (v - m).exp()).ln() + m;
        total += lse - row[y];
    }
    Ok(total / S::lit(batch as f64))
}

/// `(softmax − onehot) / B`.
pub fn cross_entropy_grad<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
    let (batch, classes) = check_labels(logits, labels)?;
    let inv_b = S::one() / S::lit(batch as f64);
    let mut out = Vec::with_capacity(logits.len());
    for (row, &y) in logits.data().chunks_exact(classes).zip(labels) {
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
        let z = exps.iter().fold(S::zero(), |a, &b| a + b);
        for (c, e) in exps.into_iter().enumerate() {
            let target = if c == y { S::one() } else { S::zero() };
            out.push((e / z - target) * inv_b);
        }
    }
    Tensor::from_vec(logits.shape(), out)
}
