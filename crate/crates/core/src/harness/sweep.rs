use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::RunMetrics;

/// Copies of `base` over the `epsilon × eta` grid, epsilon-major.
pub fn sweep_configs(base: &ExperimentConfig, epsilons: &[f64], etas: &[f64]) -> Vec<ExperimentConfig> {
    epsilons
        .iter()
        .flat_map(|&epsilon| {
            etas.iter().map(move |&eta| ExperimentConfig {
                epsilon,
                eta,
                dpap: true,
                ..base.clone()
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub eta: f64,
    pub final_acc: f64,
    pub best_acc: f64,
    pub pruning_rate: f64,
    pub retained_params: usize,
}

impl SweepPoint {
    pub fn from_run(cfg: &ExperimentConfig, m: &RunMetrics) -> Self {
        SweepPoint {
            epsilon: cfg.epsilon,
            eta: cfg.eta,
            final_acc: m.final_accuracy(),
            best_acc: m.best().map_or(m.final_accuracy(), |b| b.1),
            pruning_rate: m.final_pruning_rate(),
            retained_params: m.last().map_or(m.total_params, |r| r.retained_params),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    fn etas(&self) -> Vec<f64> {
        let mut etas: Vec<f64> = self.points.iter().map(|p| p.eta).collect();
        etas.sort_by(f64::total_cmp);
        etas.dedup();
        etas
    }

    /// Points sharing `eta`, by increasing epsilon.
    pub fn column(&self, eta: f64) -> Vec<&SweepPoint> {
        let mut col: Vec<&SweepPoint> = self.points.iter().filter(|p| p.eta == eta).collect();
        col.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
        col
    }

    /// For each eta, whether the final pruning rate never decreases as
    /// epsilon grows.
    pub fn monotone_in_epsilon(&self) -> Vec<(f64, bool)> {
        self.etas()
            .into_iter()
            .map(|eta| {
                let col = self.column(eta);
                let ok = col.windows(2).all(|w| w[1].pruning_rate >= w[0].pruning_rate);
                (eta, ok)
            })
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>8} {:>8} {:>10} {:>10} {:>12} {:>10}\n",
            "epsilon", "eta", "final_acc", "best_acc", "pruning_rate", "retained"
        );
        for eta in self.etas() {
            for p in self.column(eta) {
                s += &format!(
                    "{:>8} {:>8} {:>10.4} {:>10.4} {:>12.4} {:>10}\n",
                    p.epsilon, p.eta, p.final_acc, p.best_acc, p.pruning_rate, p.retained_params
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(epsilon: f64, eta: f64, rate: f64) -> SweepPoint {
        SweepPoint {
            epsilon,
            eta,
            final_acc: 0.9,
            best_acc: 0.9,
            pruning_rate: rate,
            retained_params: 10,
        }
    }

    #[test]
    fn grid_order() {
        let cfgs = sweep_configs(&ExperimentConfig::default(), &[0.5, 1.0], &[10.0, 25.0, 50.0]);
        assert_eq!(cfgs.len(), 6);
        assert_eq!((cfgs[1].epsilon, cfgs[1].eta), (0.5, 25.0));
        assert!(cfgs.iter().all(|c| c.dpap));
    }

    #[test]
    fn monotonicity_per_eta() {
        let r = SweepReport {
            points: vec![
                point(1.0, 10.0, 0.5),
                point(0.5, 10.0, 0.3),
                point(0.5, 20.0, 0.4),
                point(1.0, 20.0, 0.35),
            ],
        };
        assert_eq!(r.monotone_in_epsilon(), vec![(10.0, true), (20.0, false)]);
        assert_eq!(r.to_table().lines().count(), 5);
    }
}
