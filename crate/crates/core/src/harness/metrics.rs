use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruner::{ElementKind, PruneEvent};

use super::config::{DatasetKind, ExperimentConfig};

pub const CSV_COLUMNS: [&str; 9] = [
    "epoch",
    "train_loss",
    "test_acc",
    "retained_params",
    "pruning_rate",
    "pruned_synapses",
    "pruned_neurons",
    "theta_mean",
    "wall_ms",
];

/// One line of the metrics CSV. Row 0 is the evaluation before training
/// (its `train_loss` is NaN); row `e` follows training epoch `e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    #[serde(deserialize_with = "nan_if_missing")]
    pub train_loss: f64,
    pub test_acc: f64,
    pub retained_params: usize,
    pub pruning_rate: f64,
    /// Synapses removed at the end of this epoch.
    pub pruned_synapses: usize,
    /// Neurons removed at the end of this epoch.
    pub pruned_neurons: usize,
    pub theta_mean: f64,
    pub wall_ms: u64,
}

fn nan_if_missing<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Identity of the data a run saw; runs are only comparable when equal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub dataset: DatasetKind,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SplitInfo {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        SplitInfo {
            dataset: cfg.dataset,
            train_size: cfg.train_size,
            test_size: cfg.test_size,
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub split: SplitInfo,
    pub total_params: usize,
    pub rows: Vec<MetricsRow>,
    /// Retained parameters per trainable layer, one entry per row.
    pub per_layer_retained: Vec<Vec<usize>>,
    pub events: Vec<PruneEvent>,
    /// Spikes (SNN) or non-zero activations (ANN) seen from removed neurons
    /// during evaluation. Zero in a correct run.
    pub silent_violations: u64,
    /// Optimizer steps after which a masked weight or bias was non-zero.
    #[serde(default)]
    pub mask_violations: u64,
}

impl RunMetrics {
    pub fn new(split: SplitInfo, total_params: usize) -> Self {
        RunMetrics {
            split,
            total_params,
            rows: Vec::new(),
            per_layer_retained: Vec::new(),
            events: Vec::new(),
            silent_violations: 0,
            mask_violations: 0,
        }
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.last().map_or(f64::NAN, |r| r.test_acc)
    }

    pub fn final_pruning_rate(&self) -> f64 {
        self.last().map_or(0.0, |r| r.pruning_rate)
    }

    /// Best accuracy over trained epochs and the epoch it occurred in.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.epoch > 0)
            .fold(None, |best: Option<(usize, f64)>, r| match best {
                Some((_, a)) if a >= r.test_acc => best,
                _ => Some((r.epoch, r.test_acc)),
            })
    }

    /// First trained epoch whose accuracy reaches `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.epoch > 0 && r.test_acc >= target)
            .map(|r| r.epoch)
    }

    pub fn events_of(&self, kind: ElementKind) -> impl Iterator<Item = &PruneEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(CSV_COLUMNS).expect("in-memory write");
        }
        for row in &self.rows {
            w.serialize(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Writes the CSV plus `summary.json` (split, events, per-layer counts)
    /// into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(&dir.join("metrics.csv"))?;
        let path = dir.join("summary.json");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, self).map_err(|e| Error::Config(e.to_string()))?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            offset: 0,
            detail: e.to_string(),
        })
    }
}

/// Appends metrics rows to a CSV file as they are produced.
pub struct CsvSink {
    writer: csv::Writer<fs::File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(CsvSink {
            writer: csv::Writer::from_writer(file),
        })
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer
            .serialize(row)
            .and_then(|_| self.writer.flush().map_err(csv::Error::from))
            .map_err(|e| Error::Config(format!("metrics csv: {e}")))
    }
}

/// Reads a metrics CSV, checking the column order.
pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        detail: e.to_string(),
    })?;
    let headers = r.headers().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        detail: e.to_string(),
    })?;
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("unexpected header {headers:?}"),
        });
    }
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: e.position().map_or(0, |p| p.byte()),
                detail: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline_acc: f64,
    pub best_epoch_a: Option<usize>,
    pub best_acc_a: f64,
    pub best_epoch_b: Option<usize>,
    pub best_acc_b: f64,
    /// `best_acc_b − best_acc_a`.
    pub accuracy_delta: f64,
    pub epochs_to_baseline_a: Option<usize>,
    pub epochs_to_baseline_b: Option<usize>,
    /// `epochs_a / epochs_b`; above 1 means B converged faster.
    pub speedup: Option<f64>,
    pub retained_a: usize,
    pub retained_b: usize,
    /// Retained parameters of B over A at the final epoch.
    pub energy_ratio: f64,
}

/// Compares run B against reference run A. `baseline_acc` defaults to A's
/// best accuracy.
pub fn compare_runs(a: &RunMetrics, b: &RunMetrics, baseline_acc: Option<f64>) -> Result<ComparisonReport> {
    if a.split != b.split {
        return Err(Error::invalid(
            "compare_runs",
            format!("runs used different splits: {:?} vs {:?}", a.split, b.split),
        ));
    }
    let (Some(last_a), Some(last_b)) = (a.last(), b.last()) else {
        return Err(Error::invalid("compare_runs", "empty metrics"));
    };
    let best_a = a.best();
    let best_b = b.best();
    let acc = |best: Option<(usize, f64)>, last: &MetricsRow| best.map_or(last.test_acc, |b| b.1);
    let (best_acc_a, best_acc_b) = (acc(best_a, last_a), acc(best_b, last_b));
    let baseline = baseline_acc.unwrap_or(best_acc_a);
    let ea = a.epochs_to_reach(baseline);
    let eb = b.epochs_to_reach(baseline);
    Ok(ComparisonReport {
        baseline_acc: baseline,
        best_epoch_a: best_a.map(|b| b.0),
        best_acc_a,
        best_epoch_b: best_b.map(|b| b.0),
        best_acc_b,
        accuracy_delta: best_acc_b - best_acc_a,
        epochs_to_baseline_a: ea,
        epochs_to_baseline_b: eb,
        speedup: ea.zip(eb).map(|(x, y)| x as f64 / y as f64),
        retained_a: last_a.retained_params,
        retained_b: last_b.retained_params,
        energy_ratio: last_b.retained_params as f64 / last_a.retained_params as f64,
    })
}

impl ComparisonReport {
    pub fn to_text(&self) -> String {
        let opt = |e: Option<usize>| e.map_or("never".to_string(), |e| e.to_string());
        let mut s = String::new();
        s += &format!("baseline accuracy      {:.4}\n", self.baseline_acc);
        s += &format!(
            "best accuracy A / B    {:.4} (epoch {}) / {:.4} (epoch {})\n",
            self.best_acc_a,
            opt(self.best_epoch_a),
            self.best_acc_b,
            opt(self.best_epoch_b)
        );
        s += &format!("accuracy delta         {:+.4}\n", self.accuracy_delta);
        s += &format!(
            "epochs to baseline     {} / {}\n",
            opt(self.epochs_to_baseline_a),
            opt(self.epochs_to_baseline_b)
        );
        s += &match self.speedup {
            Some(x) => format!("speedup                {x:.2}x\n"),
            None => "speedup                n/a\n".to_string(),
        };
        s += &format!(
            "retained params A / B  {} / {}\n",
            self.retained_a, self.retained_b
        );
        s += &format!("energy ratio           {:.4}\n", self.energy_ratio);
        s
    }
}
