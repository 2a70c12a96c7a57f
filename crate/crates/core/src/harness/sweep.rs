use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{run_experiment, ResultRecord, RunOptions};
use super::store::ResultsStore;
use crate::error::{Error, Result};
use crate::nets::Paradigm;
use crate::spiking::{SurrogateKind, SurrogateSpec};

/// Which quantizer a `bits` axis varies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitsTarget {
    Weight,
    #[default]
    State,
}

/// Sweep axes; an absent axis keeps the template's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub bits: Option<Vec<u32>>,
    pub bits_target: BitsTarget,
    pub thresholds: Option<Vec<f64>>,
    pub surrogates: Option<Vec<SurrogateKind>>,
    pub seeds: Option<Vec<u64>>,
    pub paradigms: Option<Vec<Paradigm>>,
}

/// One unit of sweep work.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub config: ExperimentConfig,
    pub seed: u64,
}

impl Cell {
    pub fn digest(&self) -> String {
        self.config.digest()
    }
}

fn axis<T: Clone>(values: &Option<Vec<T>>, current: T) -> Vec<T> {
    values.clone().unwrap_or_else(|| vec![current])
}

/// Cartesian product of the axes over `template`, in a fixed order.
pub fn expand(template: &ExperimentConfig, axes: &SweepAxes) -> Result<Vec<Cell>> {
    let current_bits = match axes.bits_target {
        BitsTarget::Weight => template.quant.weight_bits,
        BitsTarget::State => template.quant.state_bits,
    };
    let bits: Vec<Option<u32>> = match &axes.bits {
        Some(b) => b.iter().copied().map(Some).collect(),
        None => vec![current_bits],
    };
    let seeds = axes.seeds.clone().unwrap_or_else(|| template.seeds.clone());
    let mut cells = Vec::new();
    for paradigm in axis(&axes.paradigms, template.paradigm) {
        for &b in &bits {
            for threshold in axis(&axes.thresholds, template.quant.threshold) {
                for surrogate in axis(&axes.surrogates, template.lif.surrogate.kind) {
                    let mut cfg = template.clone();
                    cfg.paradigm = paradigm;
                    match axes.bits_target {
                        BitsTarget::Weight => cfg.quant.weight_bits = b,
                        BitsTarget::State => cfg.quant.state_bits = b,
                    }
                    cfg.quant.threshold = threshold;
                    if surrogate != cfg.lif.surrogate.kind {
                        cfg.lif.surrogate = SurrogateSpec::of(surrogate);
                    }
                    cfg.seeds = seeds.clone();
                    cfg.validate()?;
                    cells.extend(seeds.iter().map(|&seed| Cell {
                        config: ExperimentConfig {
                            seeds: vec![seed],
                            ..cfg.clone()
                        },
                        seed,
                    }));
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FailedCell {
    pub digest: String,
    pub seed: u64,
    pub stage: Option<&'static str>,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct SweepOutcome {
    /// Records produced by this invocation, in cell order.
    pub records: Vec<ResultRecord>,
    /// Cells already present in the store.
    pub skipped: usize,
    pub failed: Vec<FailedCell>,
}

impl SweepOutcome {
    pub fn success(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Runs every cell not yet in `store` on `workers` threads. Failures are
/// collected per cell and never stop the sweep.
pub fn sweep(
    template: &ExperimentConfig,
    axes: &SweepAxes,
    opts: &RunOptions,
    store: &ResultsStore,
    workers: usize,
) -> Result<SweepOutcome> {
    let cells = expand(template, axes)?;
    run_cells(&cells, opts, store, workers)
}

pub fn run_cells(cells: &[Cell], opts: &RunOptions, store: &ResultsStore, workers: usize) -> Result<SweepOutcome> {
    if workers == 0 {
        return Err(Error::Config("at least one worker is required".into()));
    }
    let pending: Vec<(usize, &Cell)> = cells
        .iter()
        .enumerate()
        .filter(|(_, c)| !store.contains(&c.digest(), c.seed))
        .collect();
    let skipped = cells.len() - pending.len();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, std::result::Result<ResultRecord, FailedCell>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(pending.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(idx, cell)) = pending.get(k) else { break };
                let digest = cell.digest();
                log::info!("cell {}/{}: {} seed {}", k + 1, pending.len(), &digest[..12], cell.seed);
                let outcome = run_experiment(&cell.config, cell.seed, opts)
                    .and_then(|r| store.append(&r).map(|_| r))
                    .map_err(|e| FailedCell {
                        digest: digest.clone(),
                        seed: cell.seed,
                        stage: e.stage(),
                        message: e.to_string(),
                    });
                if let Err(f) = &outcome {
                    log::error!("cell {} seed {} failed: {}", &f.digest[..12], f.seed, f.message);
                }
                results.lock().expect("results lock").push((idx, outcome));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);
    let mut out = SweepOutcome {
        skipped,
        ..SweepOutcome::default()
    };
    for (_, r) in results {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(f) => out.failed.push(f),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetName;

    #[test]
    fn product_sizes() {
        let t = ExperimentConfig::defaults(DatasetName::Iris, Paradigm::Snn);
        let axes = SweepAxes {
            bits: Some(vec![2, 4, 8]),
            thresholds: Some(vec![0.5, 1.0, 1.5]),
            seeds: Some(vec![0, 1, 2]),
            ..SweepAxes::default()
        };
        let cells = expand(&t, &axes).unwrap();
        assert_eq!(cells.len(), 27);
        let digests: std::collections::HashSet<String> = cells.iter().map(Cell::digest).collect();
        assert_eq!(digests.len(), 9);
        let axes = SweepAxes {
            surrogates: Some(SurrogateKind::ALL.to_vec()),
            seeds: Some(vec![0, 1, 2]),
            ..SweepAxes::default()
        };
        assert_eq!(expand(&t, &axes).unwrap().len(), 15);
    }

    #[test]
    fn invalid_axis_values_rejected() {
        let t = ExperimentConfig::defaults(DatasetName::Iris, Paradigm::Ann);
        let axes = SweepAxes {
            bits: Some(vec![4]),
            thresholds: Some(vec![2.0]),
            ..SweepAxes::default()
        };
        assert!(expand(&t, &axes).is_err());
    }
}
