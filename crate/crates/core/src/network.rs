//! Parameter container shared by the spiking and the ReLU engines: layer
//! plans, weights, biases and the prune masks attached to each trainable
//! layer.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::topology::{LayerKind, LayerPlan};

/// Binary keep-masks of one trainable layer.
///
/// A synapse is a `(post, pre)` pair: a single weight for fully-connected
/// layers, a whole `k×k` kernel slice for convolutions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    post: usize,
    pre: usize,
    kernel: usize,
    synapse: Vec<bool>,
    neuron: Vec<bool>,
}

impl LayerMask {
    pub fn all_kept(post: usize, pre: usize, kernel: usize) -> Self {
        LayerMask {
            post,
            pre,
            kernel,
            synapse: vec![true; post * pre],
            neuron: vec![true; post],
        }
    }

    pub fn from_parts(
        post: usize,
        pre: usize,
        kernel: usize,
        synapse: Vec<bool>,
        neuron: Vec<bool>,
    ) -> Result<Self> {
        if synapse.len() != post * pre || neuron.len() != post {
            return Err(Error::shape(
                "mask",
                format!(
                    "expected {post}x{pre} synapses and {post} neurons, got {} and {}",
                    synapse.len(),
                    neuron.len()
                ),
            ));
        }
        let mut mask = LayerMask {
            post,
            pre,
            kernel,
            synapse,
            neuron,
        };
        for i in 0..post {
            if !mask.neuron[i] {
                mask.kill_neuron(i);
            }
        }
        Ok(mask)
    }

    pub fn post(&self) -> usize {
        self.post
    }

    pub fn pre(&self) -> usize {
        self.pre
    }

    /// Weights per synapse (1 for FC, k·k for convolutions).
    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn synapses(&self) -> &[bool] {
        &self.synapse
    }

    pub fn neurons(&self) -> &[bool] {
        &self.neuron
    }

    pub fn synapse_kept(&self, post: usize, pre: usize) -> bool {
        self.synapse[post * self.pre + pre]
    }

    pub fn neuron_kept(&self, post: usize) -> bool {
        self.neuron[post]
    }

    /// Surviving synapses into `post`.
    pub fn row_count(&self, post: usize) -> usize {
        self.synapse[post * self.pre..(post + 1) * self.pre]
            .iter()
            .filter(|&&k| k)
            .count()
    }

    /// Permanently removes one synapse. Returns whether it was still kept.
    pub fn kill_synapse(&mut self, post: usize, pre: usize) -> bool {
        std::mem::replace(&mut self.synapse[post * self.pre + pre], false)
    }

    /// Permanently removes a neuron and all of its incoming synapses.
    /// Returns whether it was still kept.
    pub fn kill_neuron(&mut self, post: usize) -> bool {
        self.synapse[post * self.pre..(post + 1) * self.pre].fill(false);
        std::mem::replace(&mut self.neuron[post], false)
    }

    pub fn kept_synapses(&self) -> usize {
        self.synapse.iter().filter(|&&k| k).count()
    }

    pub fn kept_neurons(&self) -> usize {
        self.neuron.iter().filter(|&&k| k).count()
    }

    /// Kept weights plus kept biases.
    pub fn kept_params(&self) -> usize {
        self.kept_synapses() * self.kernel + self.kept_neurons()
    }

    pub fn total_params(&self) -> usize {
        self.post * self.pre * self.kernel + self.post
    }

    /// Zeroes every masked weight and the bias of every removed neuron.
    pub fn apply<S: Scalar>(&self, weight: &mut Tensor<S>, bias: &mut Tensor<S>) {
        let k = self.kernel;
        for (s, block) in self.synapse.iter().zip(weight.data_mut().chunks_exact_mut(k)) {
            if !s {
                block.fill(S::zero());
            }
        }
        for (n, b) in self.neuron.iter().zip(bias.data_mut()) {
            if !n {
                *b = S::zero();
            }
        }
    }

    /// True when each `(a, b)` entry of `self` is kept only if kept in
    /// `earlier` too.
    pub fn is_subset_of(&self, earlier: &LayerMask) -> bool {
        self.synapse
            .iter()
            .zip(&earlier.synapse)
            .all(|(&now, &then)| !now || then)
            && self
                .neuron
                .iter()
                .zip(&earlier.neuron)
                .all(|(&now, &then)| !now || then)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub mask: LayerMask,
}

impl<S: Scalar> Params<S> {
    pub fn apply_mask(&mut self) {
        self.mask.apply(&mut self.weight, &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<S> {
    pub plan: LayerPlan,
    pub params: Option<Params<S>>,
}

/// Feed-forward stack of layers for inputs of shape `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    input_shape: [usize; 3],
    layers: Vec<Layer<S>>,
}

impl<S: Scalar> Network<S> {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`) and uniform
    /// biases in `±1/sqrt(fan_in)`, drawn in layer order from `seed`.
    pub fn init(input_shape: [usize; 3], plans: Vec<LayerPlan>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = plans
            .into_iter()
            .map(|plan| {
                let params = match plan.kind {
                    LayerKind::Conv(spec) => {
                        let k2 = spec.kernel_size * spec.kernel_size;
                        Some(init_params(
                            &mut rng,
                            &spec.weight_shape(),
                            spec.out_channels,
                            spec.in_channels,
                            k2,
                        ))
                    }
                    LayerKind::Fc { inputs, outputs } => Some(init_params(
                        &mut rng,
                        &[outputs, inputs],
                        outputs,
                        inputs,
                        1,
                    )),
                    _ => None,
                };
                Layer { plan, params }
            })
            .collect();
        Network {
            input_shape,
            layers,
        }
    }

    pub fn from_layers(input_shape: [usize; 3], layers: Vec<Layer<S>>) -> Self {
        Network {
            input_shape,
            layers,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.plan.out_shape[0])
    }

    /// Indices of layers that carry weights, in forward order.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.params.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Params<S>> {
        self.layers.iter().filter_map(|l| l.params.as_ref())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Params<S>> {
        self.layers.iter_mut().filter_map(|l| l.params.as_mut())
    }

    pub fn apply_masks(&mut self) {
        self.params_mut().for_each(Params::apply_mask);
    }

    pub fn masks(&self) -> Vec<LayerMask> {
        self.params().map(|p| p.mask.clone()).collect()
    }

    /// Whether every masked weight and every removed neuron's bias is
    /// exactly zero.
    pub fn masked_entries_are_zero(&self) -> bool {
        self.params().all(|p| {
            let k = p.mask.kernel();
            let weights_ok = p
                .mask
                .synapses()
                .iter()
                .zip(p.weight.data().chunks_exact(k))
                .all(|(&kept, block)| kept || block.iter().all(|v| v.is_zero()));
            let bias_ok = p
                .mask
                .neurons()
                .iter()
                .zip(p.bias.data())
                .all(|(&kept, b)| kept || b.is_zero());
            weights_ok && bias_ok
        })
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            input_shape: self.input_shape,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    plan: l.plan.clone(),
                    params: l.params.as_ref().map(|p| Params {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                        mask: p.mask.clone(),
                    }),
                })
                .collect(),
        }
    }
}

fn init_params<S: Scalar>(
    rng: &mut ChaCha8Rng,
    weight_shape: &[usize],
    post: usize,
    pre: usize,
    kernel: usize,
) -> Params<S> {
    let fan_in = (pre * kernel) as f64;
    let w_bound = (6.0 / fan_in).sqrt();
    let b_bound = 1.0 / fan_in.sqrt();
    let weight = Tensor::from_fn(weight_shape, |_| S::lit(rng.gen_range(-w_bound..w_bound)));
    let bias = Tensor::from_fn(&[post], |_| S::lit(rng.gen_range(-b_bound..b_bound)));
    Params {
        weight,
        bias,
        mask: LayerMask::all_kept(post, pre, kernel),
    }
}

/// Per-layer gradients aligned with [`Network::layers`]; `None` for layers
/// without parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    pub layers: Vec<Option<ParamGrads<S>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(net: &Network<S>) -> Self {
        Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| {
                    l.params.as_ref().map(|p| ParamGrads {
                        weight: Tensor::zeros(p.weight.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    /// Forces gradients of masked entries to zero.
    pub fn apply_masks(&mut self, net: &Network<S>) {
        for (g, layer) in self.layers.iter_mut().zip(net.layers()) {
            if let (Some(g), Some(p)) = (g.as_mut(), layer.params.as_ref()) {
                p.mask.apply(&mut g.weight, &mut g.bias);
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flatten().all(|g| {
            g.weight.data().iter().all(|v| v.is_zero()) && g.bias.data().iter().all(|v| v.is_zero())
        })
    }
}

/// Plain SGD with optional heavy-ball momentum.
///
/// `velocity ← momentum·velocity + grad`, `w ← w − lr·velocity`; with zero
/// momentum this is exactly `w ← w − lr·grad`. Masks are re-applied to
/// weights and velocities after every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<S> {
    pub lr: S,
    pub momentum: S,
    velocity: Vec<Option<ParamGrads<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: S, momentum: S) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Option<ParamGrads<S>>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Option<ParamGrads<S>>>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, net: &mut Network<S>, grads: &Gradients<S>) -> Result<()> {
        if grads.layers.len() != net.layers().len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{} gradient slots for {} layers",
                    grads.layers.len(),
                    net.layers().len()
                ),
            ));
        }
        let use_momentum = !self.momentum.is_zero();
        if use_momentum && self.velocity.is_empty() {
            self.velocity = Gradients::zeros_like(net).layers;
        }
        for (i, (layer, g)) in net.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
            let (Some(p), Some(g)) = (layer.params.as_mut(), g.as_ref()) else {
                continue;
            };
            p.weight.expect_same_shape(&g.weight, "sgd_step")?;
            p.bias.expect_same_shape(&g.bias, "sgd_step")?;
            if use_momentum {
                let v = self.velocity[i].as_mut().expect("velocity slot");
                momentum_update(&mut p.weight, &mut v.weight, &g.weight, self.lr, self.momentum);
                momentum_update(&mut p.bias, &mut v.bias, &g.bias, self.lr, self.momentum);
                p.mask.apply(&mut v.weight, &mut v.bias);
            } else {
                for (w, &gv) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *w -= self.lr * gv;
                }
                for (b, &gv) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *b -= self.lr * gv;
                }
            }
            p.apply_mask();
        }
        Ok(())
    }
}

fn momentum_update<S: Scalar>(
    param: &mut Tensor<S>,
    velocity: &mut Tensor<S>,
    grad: &Tensor<S>,
    lr: S,
    momentum: S,
) {
    for ((w, v), &g) in param
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut())
        .zip(grad.data())
    {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}
