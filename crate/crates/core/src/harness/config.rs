use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::EncodingMode;
use crate::error::{Error, Result};
use crate::pruner::SurvivalParams;
use crate::scalar::Scalar;
use crate::snn::{LifParams, SpikeFn};
use crate::topology::{parse_topology, LayerPlan};

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "DPAP_DATA";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    #[default]
    Snn,
    Ann,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Cifar10,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// One experiment. Serialised as a flat TOML table; every key is optional
/// and falls back to [`ExperimentConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub engine: EngineKind,
    pub topology: String,
    pub precision: Precision,

    pub dataset: DatasetKind,
    /// Overrides the `DPAP_DATA` environment variable.
    pub data_root: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    pub encoding: EncodingMode,

    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Fills the `wall_ms` column; off gives byte-reproducible CSVs.
    pub record_wall_time: bool,

    pub time_steps: usize,
    pub lambda: f64,
    pub v_th: f64,
    pub surrogate_width: f64,
    pub detach_reset: bool,

    pub dpap: bool,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub c_conv: f64,
    pub c_fc: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = SurvivalParams::default();
        ExperimentConfig {
            engine: EngineKind::Snn,
            topology: "Input-8C3-AvgPool2-16C3-AvgPool2-Flatten-100FC-10FC".into(),
            precision: Precision::F32,
            dataset: DatasetKind::Mnist,
            data_root: None,
            train_size: 2000,
            test_size: 1000,
            encoding: EncodingMode::Constant,
            epochs: 30,
            batch_size: 20,
            eval_batch_size: 100,
            lr: 0.01,
            momentum: 0.9,
            seed: 1,
            record_wall_time: true,
            time_steps: 8,
            lambda: 0.2,
            v_th: 0.5,
            surrogate_width: 1.0,
            detach_reset: true,
            dpap: true,
            tau: 0.5,
            beta: s.beta,
            gamma: s.gamma,
            epsilon: s.epsilon,
            eta: s.eta,
            c_conv: s.c_conv,
            c_fc: s.c_fc,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Panics on a seed above `i64::MAX`, which [`Self::validate`] rejects.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    /// Applies one `key=value` override, with the value in TOML syntax
    /// (bare words are taken as strings).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut current = toml::Value::try_from(&*self).expect("config is plain data");
        let table = current.as_table_mut().expect("config is a table");
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let cfg: ExperimentConfig = current
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}={value}: {e}")))?;
        *self = cfg;
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.dataset {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    pub fn layer_plans(&self) -> Result<Vec<LayerPlan>> {
        parse_topology(&self.topology, self.input_shape())
    }

    pub fn survival(&self) -> SurvivalParams {
        SurvivalParams {
            beta: self.beta,
            gamma: self.gamma,
            epsilon: self.epsilon,
            eta: self.eta,
            c_conv: self.c_conv,
            c_fc: self.c_fc,
        }
    }

    pub fn lif<S: Scalar>(&self) -> LifParams<S> {
        LifParams {
            lambda: S::lit(self.lambda),
            v_th: S::lit(self.v_th),
            a: S::lit(self.surrogate_width),
            time_steps: self.time_steps,
            spike: SpikeFn::Heaviside,
            detach_reset: self.detach_reset,
        }
    }

    /// Dataset directory: `data_root`, else `$DPAP_DATA`, else `data/`.
    pub fn resolve_data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let plans = self.layer_plans()?;
        let classes = 10;
        if let Some(last) = plans.last() {
            if last.out_shape.iter().product::<usize>() != classes {
                return fail(format!(
                    "topology must end in {classes} outputs, got {:?}",
                    last.out_shape
                ));
            }
        }
        if self.train_size == 0 || self.test_size == 0 {
            return fail("train_size and test_size must be positive".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail(format!("tau must be in (0, 1), got {}", self.tau));
        }
        if self.seed > i64::MAX as u64 {
            return fail(format!("seed must fit in 63 bits, got {}", self.seed));
        }
        if self.engine == EngineKind::Ann && self.encoding != EncodingMode::Constant {
            return fail("the ann engine takes constant (pixel) input only".into());
        }
        self.lif::<f64>().validate()?;
        self.survival().validate()?;
        Ok(())
    }
}
