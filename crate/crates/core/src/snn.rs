//! Leaky integrate-and-fire network unrolled over a fixed time window and
//! trained by surrogate-gradient backpropagation through time.
//!
//! Per trainable layer and step:
//!
//! ```text
//! u[t] = λ·u[t-1]·(1 − o[t-1]) + W·x[t] + b
//! o[t] = 1 if u[t] ≥ v_th else 0
//! ```
//!
//! where `x[t]` is the previous stage's output at the *same* step, so a
//! spike travels through the whole depth within one step. Pooling layers act
//! on spikes directly. The readout is the output layer's mean firing rate.
//!
//! In the backward pass the spike derivative is the rectangle
//! `(1/a)·1{|u − v_th| < a/2}`. The reset factor `(1 − o[t-1])` is treated
//! as a constant unless [`LifParams::detach_reset`] is cleared.

use crate::error::{Error, Result};
use crate::network::{Gradients, Network, ParamGrads};
use crate::plasticity::{unit_activity, NetworkTraces};
use crate::scalar::Scalar;
use crate::tensor::{
    avgpool2_backward, avgpool2_forward, conv2d_backward, conv2d_forward, conv2d_weight_grad,
    linear_backward, linear_forward, maxpool2_backward, maxpool2_forward, MaxPoolIndices, Tensor,
};
use crate::topology::LayerKind;

/// Spike nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikeFn<S> {
    /// Hard threshold, differentiated through the rectangle surrogate.
    Heaviside,
    /// `σ(slope·(u − v_th))` with its exact derivative. Only used to check
    /// the backward pass against finite differences.
    Sigmoid { slope: S },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams<S> {
    /// Membrane decay λ.
    pub lambda: S,
    pub v_th: S,
    /// Width of the rectangle surrogate.
    pub a: S,
    pub time_steps: usize,
    pub spike: SpikeFn<S>,
    pub detach_reset: bool,
}

impl<S: Scalar> Default for LifParams<S> {
    fn default() -> Self {
        LifParams {
            lambda: S::lit(0.2),
            v_th: S::lit(0.5),
            a: S::one(),
            time_steps: 8,
            spike: SpikeFn::Heaviside,
            detach_reset: true,
        }
    }
}

impl<S: Scalar> LifParams<S> {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= S::zero()
            && self.lambda < S::one()
            && self.v_th > S::zero()
            && self.a > S::zero()
            && self.time_steps >= 1;
        if !ok {
            return Err(Error::invalid(
                "lif",
                format!(
                    "need 0 <= lambda < 1, v_th > 0, a > 0, T >= 1 (got {}, {}, {}, {})",
                    self.lambda, self.v_th, self.a, self.time_steps
                ),
            ));
        }
        Ok(())
    }

    /// Sigmoid whose slope at threshold equals the rectangle's height `1/a`.
    pub fn matched_sigmoid(mut self) -> Self {
        self.spike = SpikeFn::Sigmoid {
            slope: S::lit(4.0) / self.a,
        };
        self
    }

    #[inline]
    fn fire(&self, u: S) -> S {
        match self.spike {
            SpikeFn::Heaviside => {
                if u >= self.v_th {
                    S::one()
                } else {
                    S::zero()
                }
            }
            SpikeFn::Sigmoid { slope } => sigmoid(slope * (u - self.v_th)),
        }
    }

    #[inline]
    fn fire_grad(&self, u: S) -> S {
        match self.spike {
            SpikeFn::Heaviside => rectangle(u, self.v_th, self.a),
            SpikeFn::Sigmoid { slope } => {
                let s = sigmoid(slope * (u - self.v_th));
                slope * s * (S::one() - s)
            }
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
fn rectangle<S: Scalar>(u: S, v_th: S, a: S) -> S {
    if (u - v_th).abs() < a / S::lit(2.0) {
        S::one() / a
    } else {
        S::zero()
    }
}

/// One membrane update: `u = λ·u_prev·(1 − o_prev) + input`, then threshold.
pub fn lif_step<S: Scalar>(
    u_prev: &Tensor<S>,
    o_prev: &Tensor<S>,
    synaptic_input: &Tensor<S>,
    params: &LifParams<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    u_prev.expect_same_shape(o_prev, "lif_step")?;
    u_prev.expect_same_shape(synaptic_input, "lif_step")?;
    let lambda = params.lambda;
    let u: Vec<S> = u_prev
        .data()
        .iter()
        .zip(o_prev.data())
        .zip(synaptic_input.data())
        .map(|((&u, &o), &i)| lambda * u * (S::one() - o) + i)
        .collect();
    let o = u.iter().map(|&v| params.fire(v)).collect();
    Ok((
        Tensor::from_vec(u_prev.shape(), u)?,
        Tensor::from_vec(u_prev.shape(), o)?,
    ))
}

/// Rectangle surrogate derivative of the spike function.
pub fn surrogate_grad<S: Scalar>(u: &Tensor<S>, params: &LifParams<S>) -> Tensor<S> {
    u.map(|v| rectangle(v, params.v_th, params.a))
}

/// `(1/B)·Σ_b ‖y_b − r_b‖²`.
pub fn mse_loss<S: Scalar>(rates: &Tensor<S>, labels: &Tensor<S>) -> Result<S> {
    rates.expect_same_shape(labels, "mse_loss")?;
    let batch = rates.shape()[0];
    let total = rates
        .data()
        .iter()
        .zip(labels.data())
        .fold(S::zero(), |acc, (&r, &y)| acc + (y - r) * (y - r));
    Ok(total / S::lit(batch as f64))
}

/// Gradient of [`mse_loss`] with respect to the rates.
pub fn mse_loss_grad<S: Scalar>(rates: &Tensor<S>, labels: &Tensor<S>) -> Result<Tensor<S>> {
    let scale = S::lit(2.0) / S::lit(rates.shape()[0] as f64);
    rates.zip_map(labels, "mse_loss_grad", |r, y| scale * (r - y))
}

/// Input current per time step.
#[derive(Clone, Debug, PartialEq)]
pub enum Drive<S> {
    /// The same `[B, C, H, W]` tensor at every step.
    Constant(Tensor<S>),
    /// One `[B, C, H, W]` tensor per step.
    PerStep(Vec<Tensor<S>>),
}

impl<S: Scalar> Drive<S> {
    pub fn at(&self, t: usize) -> &Tensor<S> {
        match self {
            Drive::Constant(x) => x,
            Drive::PerStep(xs) => &xs[t],
        }
    }

    pub fn batch(&self) -> usize {
        self.at(0).shape()[0]
    }

    fn steps(&self) -> Option<usize> {
        match self {
            Drive::Constant(_) => None,
            Drive::PerStep(xs) => Some(xs.len()),
        }
    }
}

#[derive(Clone, Debug)]
enum Record<S> {
    Lif { u: Vec<Tensor<S>> },
    AvgPool,
    MaxPool { indices: Vec<MaxPoolIndices> },
    Flatten { in_shape: Vec<usize> },
}

/// Everything the backward pass needs from one forward window.
#[derive(Clone, Debug)]
pub struct WindowState<S> {
    drive: Drive<S>,
    records: Vec<Record<S>>,
    /// `outputs[layer][t]`.
    outputs: Vec<Vec<Tensor<S>>>,
    pub rates: Tensor<S>,
    /// Output-layer membrane potential summed over the window, used to break
    /// rate ties in [`WindowState::predictions`].
    pub potential: Tensor<S>,
}

impl<S: Scalar> WindowState<S> {
    /// Spikes of layer `layer` at step `t` (pooling layers: pooled spikes).
    pub fn output(&self, layer: usize, t: usize) -> &Tensor<S> {
        &self.outputs[layer][t]
    }

    /// Membrane potentials of a trainable layer at step `t`.
    pub fn membrane(&self, layer: usize, t: usize) -> Option<&Tensor<S>> {
        match &self.records[layer] {
            Record::Lif { u } => Some(&u[t]),
            _ => None,
        }
    }

    pub fn time_steps(&self) -> usize {
        self.outputs.first().map_or(0, Vec::len)
    }

    /// Class with the highest rate; ties go to the larger summed potential,
    /// then the lower index.
    pub fn predictions(&self) -> Vec<usize> {
        let classes = self.rates.shape()[1];
        self.rates
            .data()
            .chunks_exact(classes)
            .zip(self.potential.data().chunks_exact(classes))
            .map(|(r, p)| {
                let mut best = 0;
                for c in 1..classes {
                    if r[c] > r[best] || (r[c] == r[best] && p[c] > p[best]) {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnnModel<S> {
    pub net: Network<S>,
    pub lif: LifParams<S>,
}

impl<S: Scalar> SnnModel<S> {
    pub fn new(net: Network<S>, lif: LifParams<S>) -> Result<Self> {
        lif.validate()?;
        Ok(SnnModel { net, lif })
    }

    /// Runs the window layer by layer for each step. When `traces` is given,
    /// every trainable layer's input and spike activity is folded into them
    /// after each step.
    pub fn forward_window(
        &self,
        drive: &Drive<S>,
        mut traces: Option<&mut NetworkTraces<S>>,
    ) -> Result<WindowState<S>> {
        const OP: &str = "forward_window";
        let steps = self.lif.time_steps;
        if let Some(n) = drive.steps() {
            if n != steps {
                return Err(Error::shape(
                    OP,
                    format!("drive has {n} steps, model expects {steps}"),
                ));
            }
        }
        let batch = drive.batch();
        let [c, h, w] = self.net.input_shape();
        for t in 0..drive.steps().unwrap_or(1) {
            let s = drive.at(t).shape();
            if s != [batch, c, h, w] {
                return Err(Error::shape(
                    OP,
                    format!("drive step {t} is {s:?}, expected [{batch}, {c}, {h}, {w}]"),
                ));
            }
        }
        let constant = matches!(drive, Drive::Constant(_));
        let layers = self.net.layers();
        let mut records: Vec<Record<S>> = layers
            .iter()
            .map(|l| match l.plan.kind {
                LayerKind::Conv(_) | LayerKind::Fc { .. } => Record::Lif {
                    u: Vec::with_capacity(steps),
                },
                LayerKind::AvgPool2 => Record::AvgPool,
                LayerKind::MaxPool2 => Record::MaxPool {
                    indices: Vec::with_capacity(steps),
                },
                LayerKind::Flatten => Record::Flatten {
                    in_shape: batch_shape(batch, &l.plan.in_shape),
                },
            })
            .collect();
        let mut outputs: Vec<Vec<Tensor<S>>> =
            layers.iter().map(|_| Vec::with_capacity(steps)).collect();
        let mut cached_first: Option<Tensor<S>> = None;
        let classes = self.net.output_size();
        let mut rate_sum = Tensor::zeros(&[batch, classes]);
        let mut potential = Tensor::zeros(&[batch, classes]);

        for t in 0..steps {
            let mut trace_slot = 0;
            for (l, layer) in layers.iter().enumerate() {
                let x = if l == 0 {
                    drive.at(t)
                } else {
                    &outputs[l - 1][t]
                };
                let out = match (&layer.plan.kind, &mut records[l]) {
                    (LayerKind::Conv(_) | LayerKind::Fc { .. }, Record::Lif { u }) => {
                        let p = layer.params.as_ref().expect("trainable layer");
                        let current = if l == 0 && constant && cached_first.is_some() {
                            cached_first.clone().expect("cached")
                        } else {
                            let i = match layer.plan.kind {
                                LayerKind::Conv(spec) => {
                                    conv2d_forward(x, &p.weight, &p.bias, &spec)?
                                }
                                _ => linear_forward(x, &p.weight, &p.bias)?,
                            };
                            if l == 0 && constant {
                                cached_first = Some(i.clone());
                            }
                            i
                        };
                        let (u_next, o_next) = if t == 0 {
                            let zero = Tensor::zeros(current.shape());
                            lif_step(&zero, &zero, &current, &self.lif)?
                        } else {
                            lif_step(&u[t - 1], &outputs[l][t - 1], &current, &self.lif)?
                        };
                        if let Some(tr) = traces.as_deref_mut() {
                            tr.pre[trace_slot].trace_step(&unit_activity(x)?)?;
                            tr.post[trace_slot].trace_step(&unit_activity(&o_next)?)?;
                        }
                        trace_slot += 1;
                        u.push(u_next);
                        o_next
                    }
                    (LayerKind::AvgPool2, _) => avgpool2_forward(x)?,
                    (LayerKind::MaxPool2, Record::MaxPool { indices }) => {
                        let (y, idx) = maxpool2_forward(x)?;
                        indices.push(idx);
                        y
                    }
                    (LayerKind::Flatten, _) => {
                        let n = x.len() / batch;
                        x.clone().reshape(&[batch, n])?
                    }
                    _ => unreachable!("record kind follows layer kind"),
                };
                outputs[l].push(out);
            }
            let last = layers.len() - 1;
            rate_sum.add_assign(&outputs[last][t])?;
            if let Record::Lif { u } = &records[last] {
                potential.add_assign(&u[t])?;
            }
        }
        let inv_t = S::one() / S::lit(steps as f64);
        let rates = rate_sum.map(|v| v * inv_t);
        Ok(WindowState {
            drive: drive.clone(),
            records,
            outputs,
            rates,
            potential,
        })
    }

    /// Backpropagation through time from `dL/d rates`. Gradients of masked
    /// entries are zero.
    pub fn backward_window(
        &self,
        state: &WindowState<S>,
        grad_rates: &Tensor<S>,
    ) -> Result<Gradients<S>> {
        const OP: &str = "backward_window";
        let layers = self.net.layers();
        let steps = self.lif.time_steps;
        if state.outputs.len() != layers.len() || state.time_steps() != steps {
            return Err(Error::State(format!(
                "{OP}: window state does not belong to this model ({} layers x {} steps)",
                state.outputs.len(),
                state.time_steps()
            )));
        }
        grad_rates.expect_same_shape(&state.rates, OP)?;
        let inv_t = S::one() / S::lit(steps as f64);
        let mut grad: Vec<Tensor<S>> = (0..steps).map(|_| grad_rates.map(|g| g * inv_t)).collect();
        let mut grads = Gradients::zeros_like(&self.net);
        let lambda = self.lif.lambda;

        for l in (0..layers.len()).rev() {
            let needs_input_grad = layers[..l].iter().any(|x| x.params.is_some());
            match (&layers[l].plan.kind, &state.records[l]) {
                (kind @ (LayerKind::Conv(_) | LayerKind::Fc { .. }), Record::Lif { u }) => {
                    let p = layers[l].params.as_ref().expect("trainable layer");
                    let o = &state.outputs[l];
                    // dL/dI[t], walking time backwards
                    let mut d_current: Vec<Tensor<S>> = vec![Tensor::zeros(&[1]); steps];
                    let mut du_next: Option<Tensor<S>> = None;
                    for t in (0..steps).rev() {
                        let go = &grad[t];
                        let mut du = Vec::with_capacity(go.len());
                        for k in 0..go.len() {
                            let uv = u[t].data()[k];
                            let ov = o[t].data()[k];
                            let mut g_o = go.data()[k];
                            let mut carry = S::zero();
                            if let Some(next) = &du_next {
                                let dn = next.data()[k];
                                if !self.lif.detach_reset {
                                    g_o -= dn * lambda * uv;
                                }
                                carry = dn * lambda * (S::one() - ov);
                            }
                            du.push(g_o * self.lif.fire_grad(uv) + carry);
                        }
                        let du = Tensor::from_vec(go.shape(), du)?;
                        du_next = Some(du.clone());
                        d_current[t] = du;
                    }
                    let slot = grads.layers[l].as_mut().expect("grad slot");
                    let input_at = |t: usize| -> &Tensor<S> {
                        if l == 0 {
                            state.drive.at(t)
                        } else {
                            &state.outputs[l - 1][t]
                        }
                    };
                    if l == 0 && matches!(state.drive, Drive::Constant(_)) {
                        // identical input at every step: sum currents first
                        let mut total = d_current[0].clone();
                        for d in &d_current[1..] {
                            total.add_assign(d)?;
                        }
                        accumulate_param_grads(kind, p, &total, input_at(0), slot, false)?;
                    } else {
                        for t in 0..steps {
                            let gin = accumulate_param_grads(
                                kind,
                                p,
                                &d_current[t],
                                input_at(t),
                                slot,
                                needs_input_grad,
                            )?;
                            if let Some(gin) = gin {
                                grad[t] = gin;
                            }
                        }
                    }
                }
                (LayerKind::AvgPool2, _) => {
                    for g in grad.iter_mut() {
                        *g = avgpool2_backward(g)?;
                    }
                }
                (LayerKind::MaxPool2, Record::MaxPool { indices }) => {
                    for (g, idx) in grad.iter_mut().zip(indices) {
                        *g = maxpool2_backward(g, idx)?;
                    }
                }
                (LayerKind::Flatten, Record::Flatten { in_shape }) => {
                    for g in grad.iter_mut() {
                        *g = std::mem::replace(g, Tensor::zeros(&[1])).reshape(in_shape)?;
                    }
                }
                _ => unreachable!("record kind follows layer kind"),
            }
            if !needs_input_grad {
                break;
            }
        }
        grads.apply_masks(&self.net);
        Ok(grads)
    }
}

/// Adds one step's weight and bias gradients into `slot`; returns the input
/// gradient when requested.
pub(crate) fn accumulate_param_grads<S: Scalar>(
    kind: &LayerKind,
    p: &crate::network::Params<S>,
    d_current: &Tensor<S>,
    input: &Tensor<S>,
    slot: &mut ParamGrads<S>,
    want_input: bool,
) -> Result<Option<Tensor<S>>> {
    match *kind {
        LayerKind::Conv(spec) => {
            if want_input {
                let g = conv2d_backward(d_current, input, &p.weight, &spec)?;
                slot.weight.add_assign(&g.weight)?;
                slot.bias.add_assign(&g.bias)?;
                Ok(Some(g.input))
            } else {
                let (gw, gb) = conv2d_weight_grad(d_current, input, &p.weight, &spec)?;
                slot.weight.add_assign(&gw)?;
                slot.bias.add_assign(&gb)?;
                Ok(None)
            }
        }
        LayerKind::Fc { .. } => {
            let g = linear_backward(d_current, input, &p.weight)?;
            slot.weight.add_assign(&g.weight)?;
            slot.bias.add_assign(&g.bias)?;
            Ok(want_input.then_some(g.input))
        }
        _ => unreachable!("only trainable layers carry parameters"),
    }
}

fn batch_shape(batch: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(per_sample.len() + 1);
    s.push(batch);
    s.extend_from_slice(per_sample);
    s
}
