use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::snn::Drive;
use crate::tensor::Tensor;

/// How pixel intensities become input current.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingMode {
    /// The pixel tensor is injected unchanged at every step.
    #[default]
    Constant,
    /// Each pixel spikes with probability equal to its intensity at every
    /// step.
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch<S> {
    pub drive: Drive<S>,
    /// `[B, classes]` one-hot.
    pub targets: Tensor<S>,
    pub labels: Vec<usize>,
}

pub fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (row, &l) in t.data_mut().chunks_exact_mut(classes).zip(labels) {
        row[l] = S::one();
    }
    t
}

/// Independent Bernoulli(`rate`) draws per element and step; result is
/// `[T, ...rate_map.shape]`.
pub fn synth_poisson<S: Scalar>(rate_map: &Tensor<S>, steps: usize, seed: u64) -> Result<Tensor<S>> {
    if let Some(bad) = rate_map
        .data()
        .iter()
        .find(|&&r| !(r >= S::zero() && r <= S::one()))
    {
        return Err(Error::invalid(
            "synth_poisson",
            format!("rate {bad} outside [0, 1]"),
        ));
    }
    if steps == 0 {
        return Err(Error::invalid("synth_poisson", "need at least one step"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(steps * rate_map.len());
    for _ in 0..steps {
        for &r in rate_map.data() {
            let p = r.to_f64_lossy();
            data.push(if rng.gen::<f64>() < p { S::one() } else { S::zero() });
        }
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(rate_map.shape());
    Tensor::from_vec(&shape, data)
}

pub fn encode_batch<S: Scalar>(
    images: Tensor<S>,
    labels: Vec<usize>,
    classes: usize,
    mode: EncodingMode,
    steps: usize,
    seed: u64,
) -> Result<EncodedBatch<S>> {
    let targets = one_hot(&labels, classes);
    let drive = match mode {
        EncodingMode::Constant => Drive::Constant(images),
        EncodingMode::Bernoulli => {
            let spikes = synth_poisson(&images, steps, seed)?;
            let shape = images.shape().to_vec();
            let per = images.len();
            let steps = spikes
                .data()
                .chunks_exact(per)
                .map(|c| Tensor::from_vec(&shape, c.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            Drive::PerStep(steps)
        }
    };
    Ok(EncodedBatch {
        drive,
        targets,
        labels,
    })
}
