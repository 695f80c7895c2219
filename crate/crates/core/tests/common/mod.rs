//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dpap::ann::{cross_entropy_loss, AnnModel};
use dpap::network::{LayerMask, Network};
use dpap::data::synth_poisson;
use dpap::plasticity::{DpapPlasticity, ImportanceCriterion, ImportanceSnapshot, LayerTraces, TraceState};
use dpap::pruner::{ElementKind, Pruner, SurvivalParams};
use dpap::snn::{mse_loss, mse_loss_grad, Drive, LifParams, SnnModel};
use dpap::tensor::{
    avgpool2_backward, avgpool2_forward, conv2d_backward, conv2d_forward, linear_backward,
    linear_forward, maxpool2_backward, maxpool2_forward, ConvSpec, Tensor,
};
use dpap::topology::parse_topology;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FdStats {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose ±h probe crossed a non-differentiable point.
    pub skipped: usize,
}

impl FdStats {
    pub fn merge(&mut self, other: FdStats) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel = self.max_rel.max(rel_err(analytic, numeric));
        self.checked += 1;
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Central difference of `f` with respect to `data[i]`, restoring the value.
fn central<F: FnMut(&[f64]) -> f64>(data: &mut [f64], i: usize, f: &mut F) -> f64 {
    let orig = data[i];
    data[i] = orig + FD_STEP;
    let plus = f(data);
    data[i] = orig - FD_STEP;
    let minus = f(data);
    data[i] = orig;
    (plus - minus) / (2.0 * FD_STEP)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check_all<F: FnMut(&[f64]) -> f64>(
    stats: &mut FdStats,
    base: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut f: F,
) {
    let mut data = base.data().to_vec();
    for i in 0..data.len() {
        let numeric = central(&mut data, i, &mut f);
        stats.record(analytic.data()[i], numeric);
    }
}

/// `L = Σ r ⊙ conv(x)` against `conv2d_backward`, over input, weight and
/// bias.
pub fn conv_oracle(seed: u64) -> FdStats {
    let mut r = rng(seed);
    let specs = [
        ConvSpec::same(2, 3, 3),
        ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel_size: 2,
            stride: 2,
            padding: 0,
        },
        ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel_size: 3,
            stride: 2,
            padding: 1,
        },
    ];
    let spec = specs[(seed % 3) as usize];
    let x = random_tensor(&mut r, &[2, 2, 6, 6], -1.0, 1.0);
    let w = random_tensor(&mut r, &spec.weight_shape(), -1.0, 1.0);
    let b = random_tensor(&mut r, &[3], -1.0, 1.0);
    let y = conv2d_forward(&x, &w, &b, &spec).unwrap();
    let gy = random_tensor(&mut r, y.shape(), -1.0, 1.0);
    let g = conv2d_backward(&gy, &x, &w, &spec).unwrap();
    let mut stats = FdStats::default();
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        dot(&gy, &conv2d_forward(x, w, b, &spec).unwrap())
    };
    check_all(&mut stats, &x, &g.input, |d| {
        loss(&Tensor::from_vec(x.shape(), d.to_vec()).unwrap(), &w, &b)
    });
    check_all(&mut stats, &w, &g.weight, |d| {
        loss(&x, &Tensor::from_vec(w.shape(), d.to_vec()).unwrap(), &b)
    });
    check_all(&mut stats, &b, &g.bias, |d| {
        loss(&x, &w, &Tensor::from_vec(b.shape(), d.to_vec()).unwrap())
    });
    stats
}

pub fn linear_oracle(seed: u64) -> FdStats {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[3, 5], -1.0, 1.0);
    let w = random_tensor(&mut r, &[4, 5], -1.0, 1.0);
    let b = random_tensor(&mut r, &[4], -1.0, 1.0);
    let gy = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let g = linear_backward(&gy, &x, &w).unwrap();
    let mut stats = FdStats::default();
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&gy, &linear_forward(x, w, b).unwrap());
    check_all(&mut stats, &x, &g.input, |d| {
        loss(&Tensor::from_vec(x.shape(), d.to_vec()).unwrap(), &w, &b)
    });
    check_all(&mut stats, &w, &g.weight, |d| {
        loss(&x, &Tensor::from_vec(w.shape(), d.to_vec()).unwrap(), &b)
    });
    // bias gradient is the batch sum of grad_out
    let gb = Tensor::from_fn(&[4], |m| (0..3).map(|n| gy.data()[n * 4 + m]).sum::<f64>());
    assert_eq!(g.bias.data(), gb.data());
    check_all(&mut stats, &b, &g.bias, |d| {
        loss(&x, &w, &Tensor::from_vec(b.shape(), d.to_vec()).unwrap())
    });
    stats
}

pub fn avgpool_oracle(seed: u64) -> FdStats {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[2, 2, 4, 6], -1.0, 1.0);
    let gy = random_tensor(&mut r, &[2, 2, 2, 3], -1.0, 1.0);
    let g = avgpool2_backward(&gy).unwrap();
    let mut stats = FdStats::default();
    check_all(&mut stats, &x, &g, |d| {
        dot(&gy, &avgpool2_forward(&Tensor::from_vec(x.shape(), d.to_vec()).unwrap()).unwrap())
    });
    stats
}

pub fn maxpool_oracle(seed: u64) -> FdStats {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[2, 2, 4, 6], -1.0, 1.0);
    let gy = random_tensor(&mut r, &[2, 2, 2, 3], -1.0, 1.0);
    let (_, idx) = maxpool2_forward(&x).unwrap();
    let g = maxpool2_backward(&gy, &idx).unwrap();
    let mut stats = FdStats::default();
    let mut data = x.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        let probe = |v: f64, data: &mut Vec<f64>| {
            data[i] = v;
            let t = Tensor::from_vec(x.shape(), data.clone()).unwrap();
            let (y, idx) = maxpool2_forward(&t).unwrap();
            (dot(&gy, &y), idx.argmax().to_vec())
        };
        let (plus, ip) = probe(orig + FD_STEP, &mut data);
        let (minus, im) = probe(orig - FD_STEP, &mut data);
        data[i] = orig;
        if ip != im || ip != idx.argmax() {
            stats.skipped += 1;
            continue;
        }
        stats.record(g.data()[i], (plus - minus) / (2.0 * FD_STEP));
    }
    stats
}

/// Pattern of every piecewise choice in an ANN forward pass: which units
/// are zero after each layer and which cell wins every max-pool window.
fn ann_pattern(model: &AnnModel<f64>, x: &Tensor<f64>) -> Vec<Vec<usize>> {
    let state = model.ann_forward(x).unwrap();
    let layers = model.net.layers();
    let mut pattern = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let out = state.output(l);
        pattern.push(
            out.data()
                .iter()
                .enumerate()
                .filter(|(_, v)| **v <= 0.0)
                .map(|(i, _)| i)
                .collect(),
        );
        if matches!(layer.plan.kind, dpap::topology::LayerKind::MaxPool2) {
            let prev = if l == 0 { x } else { state.output(l - 1) };
            pattern.push(maxpool2_forward(prev).unwrap().1.argmax().to_vec());
        }
    }
    pattern
}

/// Full ANN (conv, max- and avg-pool, ReLU, cross-entropy) against
/// finite differences over every parameter.
pub fn ann_oracle(seed: u64) -> FdStats {
    let mut r = rng(seed);
    let plans = parse_topology("Input-2C3-MaxPool2-3C3-AvgPool2-Flatten-5FC-3FC", [1, 8, 8]).unwrap();
    let mut model = AnnModel::new(Network::<f64>::init([1, 8, 8], plans, seed));
    let x = random_tensor(&mut r, &[2, 1, 8, 8], 0.0, 1.0);
    let labels = vec![r.gen_range(0..3), r.gen_range(0..3)];
    let state = model.ann_forward(&x).unwrap();
    let grads = model.ann_backward(&state, &labels).unwrap();
    let base_pattern = ann_pattern(&model, &x);
    let mut stats = FdStats::default();
    for l in model.net.param_layer_indices() {
        let g = grads.layers[l].clone().unwrap();
        for (which, analytic) in [(0, g.weight), (1, g.bias)] {
            for i in 0..analytic.len() {
                let eval = |v: f64, m: &mut AnnModel<f64>| {
                    let p = m.net.layers_mut()[l].params.as_mut().unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    let orig = t.data()[i];
                    t.data_mut()[i] = v;
                    let loss = cross_entropy_loss(&m.ann_forward(&x).unwrap().logits, &labels).unwrap();
                    let pattern = ann_pattern(m, &x);
                    let p = m.net.layers_mut()[l].params.as_mut().unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    t.data_mut()[i] = orig;
                    (loss, pattern)
                };
                let orig = {
                    let p = model.net.layers()[l].params.as_ref().unwrap();
                    if which == 0 { p.weight.data()[i] } else { p.bias.data()[i] }
                };
                let (plus, pp) = eval(orig + FD_STEP, &mut model);
                let (minus, pm) = eval(orig - FD_STEP, &mut model);
                if pp != base_pattern || pm != base_pattern {
                    stats.skipped += 1;
                    continue;
                }
                stats.record(analytic.data()[i], (plus - minus) / (2.0 * FD_STEP));
            }
        }
    }
    stats
}

/// SNN backward with the sigmoid spike function (reset kept in the graph)
/// against finite differences of the same forward pass.
pub fn snn_sigmoid_oracle(seed: u64, topology: &str, input: [usize; 3], steps: usize) -> FdStats {
    let mut r = rng(seed);
    let plans = parse_topology(topology, input).unwrap();
    let net = Network::<f64>::init(input, plans, seed);
    let lif = LifParams {
        time_steps: steps,
        detach_reset: false,
        ..LifParams::default()
    }
    .matched_sigmoid();
    let mut model = SnnModel::new(net, lif).unwrap();
    let [c, h, w] = input;
    let drive = Drive::Constant(random_tensor(&mut r, &[2, c, h, w], 0.0, 1.0));
    let classes = model.net.output_size();
    let labels: Vec<usize> = (0..2).map(|_| r.gen_range(0..classes)).collect();
    let targets = dpap::data::one_hot::<f64>(&labels, classes);
    let state = model.forward_window(&drive, None).unwrap();
    let grads = model
        .backward_window(&state, &mse_loss_grad(&state.rates, &targets).unwrap())
        .unwrap();
    let mut stats = FdStats::default();
    for l in model.net.param_layer_indices() {
        let g = grads.layers[l].clone().unwrap();
        for (which, analytic) in [(0, g.weight), (1, g.bias)] {
            for i in 0..analytic.len() {
                let eval = |delta: f64, m: &mut SnnModel<f64>| {
                    let p = m.net.layers_mut()[l].params.as_mut().unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    t.data_mut()[i] += delta;
                    let s = m.forward_window(&drive, None).unwrap();
                    let p = m.net.layers_mut()[l].params.as_mut().unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    t.data_mut()[i] -= delta;
                    mse_loss(&s.rates, &targets).unwrap()
                };
                let (p_orig, _) = {
                    let p = model.net.layers()[l].params.as_ref().unwrap();
                    (if which == 0 { p.weight.data()[i] } else { p.bias.data()[i] }, ())
                };
                let plus = eval(FD_STEP, &mut model);
                let minus = eval(-FD_STEP, &mut model);
                {
                    let p = model.net.layers_mut()[l].params.as_mut().unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    t.data_mut()[i] = p_orig;
                }
                stats.record(analytic.data()[i], (plus - minus) / (2.0 * FD_STEP));
            }
        }
    }
    stats
}

/// Straight-line evaluation of the trace, θ, BCM and spine recurrences.
pub struct PlasticityReference {
    pub tau: f64,
    pub theta: Vec<f64>,
    pub num: u64,
    pub bcm_e: Vec<Vec<f64>>,
    pub d_e: Vec<f64>,
    /// Every batch-mean post trace ever seen, per unit.
    pub history: Vec<Vec<f64>>,
}

impl PlasticityReference {
    pub fn new(post: usize, pre: usize, tau: f64) -> Self {
        PlasticityReference {
            tau,
            theta: vec![0.0; post],
            num: 0,
            bcm_e: vec![vec![0.0; pre]; post],
            d_e: vec![0.0; post],
            history: vec![Vec::new(); post],
        }
    }

    /// `spikes[t][b][unit]` → end-of-window trace averaged over samples.
    pub fn window_trace(&self, spikes: &[Vec<Vec<f64>>]) -> Vec<f64> {
        let batch = spikes[0].len();
        let units = spikes[0][0].len();
        let mut mean = vec![0.0; units];
        for b in 0..batch {
            let mut s = vec![0.0; units];
            for step in spikes {
                for u in 0..units {
                    s[u] = self.tau * s[u] + step[b][u];
                }
            }
            for u in 0..units {
                mean[u] += s[u];
            }
        }
        for m in &mut mean {
            *m /= batch as f64;
        }
        mean
    }

    pub fn batch(&mut self, s_pre: &[f64], s_post: &[f64]) {
        let post = s_post.len();
        let pre = s_pre.len();
        let mut bcm = vec![vec![0.0; pre]; post];
        for i in 0..post {
            for j in 0..pre {
                bcm[i][j] = s_pre[j] * s_post[i] * (s_post[i] - self.theta[i]);
            }
        }
        self.num += 1;
        for i in 0..post {
            self.theta[i] = (self.theta[i] * (self.num - 1) as f64 + s_post[i]) / self.num as f64;
            self.history[i].push(s_post[i]);
        }
        for i in 0..post {
            let mut row = 0.0;
            for j in 0..pre {
                self.bcm_e[i][j] += bcm[i][j];
                row += bcm[i][j];
            }
            self.d_e[i] += s_post[i] * row;
        }
    }

    pub fn rollover(&mut self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let post = self.d_e.len();
        let pre = self.bcm_e[0].len();
        let out = (self.bcm_e.clone(), self.d_e.clone());
        self.bcm_e = vec![vec![0.0; pre]; post];
        self.d_e = vec![0.0; post];
        out
    }
}

/// Straight-line survival and pruning rule for one layer.
#[derive(Clone, Debug)]
pub struct PruneReference {
    pub f_bcm: Vec<f64>,
    pub f_d: Vec<f64>,
    pub synapse: Vec<bool>,
    pub neuron: Vec<bool>,
    pub post: usize,
    pub pre: usize,
    pub c: f64,
    pub prune_neurons: bool,
}

pub fn reference_delta(x: &[f64], alive: &[bool], eps: f64) -> Vec<f64> {
    let live: Vec<f64> = x.iter().zip(alive).filter(|(_, a)| **a).map(|(v, _)| *v).collect();
    let min = live.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    x.iter()
        .zip(alive)
        .map(|(&v, &a)| {
            if !a {
                0.0
            } else if max == min {
                2.0 - eps
            } else {
                2.0 * ((v - min) / (max - min)) - eps
            }
        })
        .collect()
}

impl PruneReference {
    pub fn new(post: usize, pre: usize, beta: f64, c: f64, prune_neurons: bool) -> Self {
        PruneReference {
            f_bcm: vec![beta; post * pre],
            f_d: vec![beta; post],
            synapse: vec![true; post * pre],
            neuron: vec![true; post],
            post,
            pre,
            c,
            prune_neurons,
        }
    }

    /// Returns `(synapses, neurons)` removed this epoch.
    pub fn epoch(&mut self, p: &SurvivalParams, epoch: usize, bcm: &[f64], d: &[f64]) -> (Vec<(usize, usize)>, Vec<usize>) {
        let w = (-(epoch as f64 / p.eta)).exp();
        let db = reference_delta(bcm, &self.synapse, p.epsilon);
        let dd = reference_delta(d, &self.neuron, p.epsilon);
        for k in 0..self.f_bcm.len() {
            if self.synapse[k] {
                let df = if db[k] >= 0.0 { db[k] + self.c } else { db[k] };
                self.f_bcm[k] = p.gamma * self.f_bcm[k] + w * df;
            }
        }
        for i in 0..self.post {
            if self.neuron[i] {
                let df = if dd[i] >= 0.0 { dd[i] + self.c } else { dd[i] };
                self.f_d[i] = p.gamma * self.f_d[i] + w * df;
            }
        }
        let mut syn = Vec::new();
        for k in 0..self.f_bcm.len() {
            if self.synapse[k] && self.f_bcm[k] < 0.0 {
                self.synapse[k] = false;
                syn.push((k / self.pre, k % self.pre));
            }
        }
        let mut neu = Vec::new();
        if self.prune_neurons {
            for i in 0..self.post {
                if self.neuron[i] && self.f_d[i] < 0.0 {
                    self.neuron[i] = false;
                    neu.push(i);
                    for j in 0..self.pre {
                        self.synapse[i * self.pre + j] = false;
                    }
                }
            }
        }
        (syn, neu)
    }
}

pub fn random_snapshot(r: &mut ChaCha8Rng, post: usize, pre: usize) -> ImportanceSnapshot<f64> {
    // mixture of exact ties, zeros and spread values
    let draw = |r: &mut ChaCha8Rng| match r.gen_range(0..10) {
        0 => 0.0,
        1 => 0.25,
        _ => r.gen_range(-3.0..3.0),
    };
    ImportanceSnapshot {
        synapse: Tensor::from_fn(&[post, pre], |_| draw(r)),
        neuron: (0..post).map(|_| draw(r)).collect(),
    }
}

pub fn mask_is_subset(now: &LayerMask, before: &LayerMask) -> bool {
    now.is_subset_of(before)
}

pub fn kind_count(events: &[dpap::pruner::PruneEvent], kind: ElementKind) -> usize {
    events.iter().filter(|e| e.kind == kind).count()
}

pub fn data_root() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// Small SNN run on the bundled MNIST pool, seconds per epoch.
pub fn small_config() -> dpap::harness::ExperimentConfig {
    let cfg = dpap::harness::ExperimentConfig {
        topology: "Input-4C3-AvgPool2-8C3-AvgPool2-Flatten-20FC-10FC".into(),
        data_root: Some(data_root()),
        train_size: 100,
        test_size: 50,
        epochs: 3,
        batch_size: 20,
        eval_batch_size: 25,
        time_steps: 4,
        record_wall_time: false,
        ..Default::default()
    };
    cfg.validate().unwrap();
    cfg
}

pub const TAU: f64 = 0.5;
const BATCH: usize = 4;
const STEPS: usize = 8;

/// `[T, B, U]` spikes as nested vectors.
pub fn nested(spikes: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let (t, b, u) = (spikes.shape()[0], spikes.shape()[1], spikes.shape()[2]);
    (0..t)
        .map(|s| (0..b).map(|i| spikes.data()[(s * b + i) * u..(s * b + i + 1) * u].to_vec()).collect())
        .collect()
}

pub fn library_trace(spikes: &Tensor<f64>) -> Vec<f64> {
    let (t, b, u) = (spikes.shape()[0], spikes.shape()[1], spikes.shape()[2]);
    let mut trace = TraceState::new(b, u, TAU);
    for s in 0..t {
        let step = Tensor::from_vec(&[b, u], spikes.data()[s * b * u..(s + 1) * b * u].to_vec()).unwrap();
        trace.trace_step(&step).unwrap();
    }
    trace.batch_mean()
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Library traces, θ, BCM and spine accumulators against
/// [`PlasticityReference`] on Poisson spikes; panics on the first mismatch.
pub fn plasticity_exactness(epochs: usize, batches: usize) {
    // units: 6 inputs → 4 hidden → 3 outputs
    let units = [6usize, 4, 3];
    let plans = parse_topology("Input-4FC-3FC", [1, 1, 6]).unwrap();
    let net = Network::<f64>::init([1, 1, 6], plans, 7);
    let mut lib = DpapPlasticity::for_network(&net);
    let mut refs = [
        PlasticityReference::new(units[1], units[0], TAU),
        PlasticityReference::new(units[2], units[1], TAU),
    ];
    let mut r = rng(2024);
    let rates: Vec<Tensor<f64>> = units
        .iter()
        .map(|&u| random_tensor(&mut r, &[BATCH, u], 0.0, 1.0))
        .collect();
    let mut nonzero_d = 0;
    for epoch in 0..epochs {
        for batch in 0..batches {
            let seed = (epoch * batches + batch) as u64;
            let spikes: Vec<Tensor<f64>> = rates
                .iter()
                .enumerate()
                .map(|(k, rate)| synth_poisson(rate, STEPS, seed * 3 + k as u64).unwrap().reshape(&[STEPS, BATCH, rate.shape()[1]]).unwrap())
                .collect();
            let traces: Vec<Vec<f64>> = spikes.iter().map(library_trace).collect();
            for (k, s) in spikes.iter().enumerate() {
                let want = refs[0].window_trace(&nested(s));
                assert_eq!(bits(&traces[k]), bits(&want), "trace {k} epoch {epoch} batch {batch}");
            }
            let layer_traces = vec![
                LayerTraces { pre: traces[0].clone(), post: traces[1].clone() },
                LayerTraces { pre: traces[1].clone(), post: traces[2].clone() },
            ];
            lib.observe_batch(&layer_traces).unwrap();
            refs[0].batch(&traces[0], &traces[1]);
            refs[1].batch(&traces[1], &traces[2]);
            for (l, rf) in refs.iter().enumerate() {
                let lp = &lib.layers[l];
                assert_eq!(bits(&lp.bcm.theta), bits(&rf.theta), "theta {l}");
                assert_eq!(lp.bcm.num, rf.num);
                let flat: Vec<f64> = rf.bcm_e.iter().flatten().copied().collect();
                assert_eq!(bits(lp.bcm.bcm_epoch.data()), bits(&flat), "bcm {l}");
                assert_eq!(bits(&lp.spine.d_epoch), bits(&rf.d_e), "spine {l}");
            }
        }
        let snaps = lib.rollover();
        for (l, rf) in refs.iter_mut().enumerate() {
            let (bcm, d) = rf.rollover();
            let flat: Vec<f64> = bcm.iter().flatten().copied().collect();
            assert_eq!(bits(snaps[l].synapse.data()), bits(&flat));
            assert_eq!(bits(&snaps[l].neuron), bits(&d));
            if d.iter().any(|&v| v != 0.0) {
                nonzero_d += 1;
            }
            assert!(lib.layers[l].bcm.bcm_epoch.data().iter().all(|&v| v == 0.0));
            assert!(lib.layers[l].spine.d_epoch.iter().all(|&v| v == 0.0));
        }
    }
    assert_eq!(lib.num_batches(), (epochs * batches) as u64);
    assert!(nonzero_d > epochs, "importance stayed at zero");

    // the recurrence tracks the mean of every post trace seen so far
    for rf in &refs {
        for (theta, hist) in rf.theta.iter().zip(&rf.history) {
            let mean = hist.iter().sum::<f64>() / hist.len() as f64;
            assert!((theta - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        }
    }
}


pub fn random_params(r: &mut rand_chacha::ChaCha8Rng) -> SurvivalParams {
    SurvivalParams {
        beta: r.gen_range(0.5..4.0),
        gamma: r.gen_range(0.9..0.9999),
        epsilon: r.gen_range(0.2..1.8),
        eta: r.gen_range(5.0..60.0),
        c_conv: r.gen_range(0.0..6.0),
        c_fc: r.gen_range(0.0..3.0),
    }
}

/// [`Pruner`] against [`PruneReference`] on random importance; panics on
/// the first mismatch or mask regrowth.
pub fn pruning_exactness(seeds: u64, epochs: usize) {
    let mut seeds_pruning = 0;
    for seed in 0..seeds {
        let mut r = rng(seed);
        let params = random_params(&mut r);
        let plans = parse_topology("Input-3C3-Flatten-5FC-4FC", [2, 3, 3]).unwrap();
        let mut net = Network::<f64>::init([2, 3, 3], plans, seed);
        let mut pruner = Pruner::for_network(&net, params).unwrap();
        let shapes: Vec<(usize, usize, bool, f64)> = net
            .params()
            .enumerate()
            .map(|(k, p)| {
                let c = if k == 0 { params.c_conv } else { params.c_fc };
                (p.mask.post(), p.mask.pre(), k != 2, c)
            })
            .collect();
        let mut refs: Vec<PruneReference> = shapes
            .iter()
            .map(|&(post, pre, neurons, c)| PruneReference::new(post, pre, params.beta, c, neurons))
            .collect();
        let mut prev_masks = net.masks();
        let mut pruned_any = false;
        for epoch in 0..epochs {
            let snaps: Vec<_> = shapes
                .iter()
                .map(|&(post, pre, _, _)| random_snapshot(&mut r, post, pre))
                .collect();
            let summary = pruner.epoch_step(&snaps, &mut net).unwrap();
            let mut want_events = Vec::new();
            for (l, rf) in refs.iter_mut().enumerate() {
                let (syn, neu) = rf.epoch(&params, epoch, snaps[l].synapse.data(), &snaps[l].neuron);
                want_events.extend(syn.iter().map(|&(i, j)| (l, ElementKind::Synapse, i, Some(j))));
                want_events.extend(neu.iter().map(|&i| (l, ElementKind::Neuron, i, None)));
            }
            let got_events: Vec<_> = summary.events.iter().map(|e| (e.layer, e.kind, e.post, e.pre)).collect();
            assert_eq!(got_events, want_events, "seed {seed} epoch {epoch}");
            pruned_any |= !got_events.is_empty();
            for (l, (rf, state)) in refs.iter().zip(&pruner.layers).enumerate() {
                let f: Vec<u64> = state.f_bcm.data().iter().map(|v| v.to_bits()).collect();
                let fr: Vec<u64> = rf.f_bcm.iter().map(|v| v.to_bits()).collect();
                assert_eq!(f, fr, "seed {seed} epoch {epoch} layer {l} F_BCM");
                let d: Vec<u64> = state.f_d.iter().map(|v| v.to_bits()).collect();
                let dr: Vec<u64> = rf.f_d.iter().map(|v| v.to_bits()).collect();
                assert_eq!(d, dr, "seed {seed} epoch {epoch} layer {l} F_D");
            }
            let masks = net.masks();
            for (l, (m, rf)) in masks.iter().zip(&refs).enumerate() {
                assert_eq!(m.synapses(), rf.synapse.as_slice(), "layer {l} synapse mask");
                assert_eq!(m.neurons(), rf.neuron.as_slice(), "layer {l} neuron mask");
            }
            for (now, before) in masks.iter().zip(&prev_masks) {
                assert!(mask_is_subset(now, before), "mask grew back");
            }
            assert!(net.masked_entries_are_zero());
            prev_masks = masks;
        }
        seeds_pruning += pruned_any as usize;
        // readout neurons survive
        assert!(net.masks()[2].neurons().iter().all(|&n| n));
    }
    assert!(seeds_pruning as u64 >= seeds / 2, "only {seeds_pruning} seeds pruned anything");
}

