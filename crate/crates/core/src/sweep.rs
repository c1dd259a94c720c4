//! Ablation and queue-length sweeps: grids of training runs with aligned
//! text tables on stdout and CSV files in the results directory.
//!
//! Cells run in parallel, one isolated state per cell with a derived seed;
//! aggregation is order-independent.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::TrainConfig;
use crate::error::{DicsError, Result};
use crate::train::train_run;

/// The default ablation grid over (alpha, beta).
pub const ABLATION_GRID: [(f64, f64); 8] = [
    (0.0, 0.0),
    (0.5, 0.0),
    (1.0, 0.0),
    (0.0, 0.5),
    (0.0, 1.0),
    (0.5, 1.0),
    (1.0, 0.5),
    (1.0, 1.0),
];

/// Default queue-length multiples.
pub const QUEUE_MULTIPLES: [usize; 4] = [1, 4, 8, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub alpha: f64,
    pub beta: f64,
    /// Target-domain accuracy per seed, in seed order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueRow {
    pub multiple: usize,
    pub label: String,
    pub target_accuracy: f64,
    pub source_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueTable {
    pub rows: Vec<QueueRow>,
    pub seed: u64,
}

/// Run `count` independent jobs on up to `available_parallelism` threads.
fn run_parallel<T, F>(count: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = std::thread::available_parallelism()
        .map(std::num::NonZeroUsize::get)
        .unwrap_or(1)
        .min(count.max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= count {
                    break;
                }
                let out = job(idx);
                results.lock().expect("no poisoned lock")[idx] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// One training run per (grid cell, seed); seeds are `base.seed + j`.
/// The (0,0) cell is the plain cross-entropy baseline.
pub fn sweep_ablation(
    base: &TrainConfig,
    grid: &[(f64, f64)],
    num_seeds: usize,
    results_dir: Option<&Path>,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(DicsError::InvalidConfig("ablation grid is empty".into()));
    }
    if num_seeds == 0 {
        return Err(DicsError::InvalidConfig("need at least one seed".into()));
    }
    let seeds: Vec<u64> = (0..num_seeds).map(|j| base.seed + j as u64).collect();
    let jobs = grid.len() * seeds.len();
    let outcomes = run_parallel(jobs, |idx| {
        let (cell, seed_idx) = (idx / seeds.len(), idx % seeds.len());
        let mut config = base.clone();
        config.alpha = grid[cell].0;
        config.beta = grid[cell].1;
        config.seed = seeds[seed_idx];
        train_run(&config, None).map(|a| a.report.target_accuracy)
    });
    let mut rows = Vec::with_capacity(grid.len());
    for (cell, &(alpha, beta)) in grid.iter().enumerate() {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for seed_idx in 0..seeds.len() {
            match &outcomes[cell * seeds.len() + seed_idx] {
                Ok(acc) => per_seed.push(*acc),
                Err(e) => {
                    return Err(DicsError::Data(format!(
                        "ablation cell (alpha={alpha}, beta={beta}) seed {} failed: {e}",
                        seeds[seed_idx]
                    )))
                }
            }
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(AblationRow {
            alpha,
            beta,
            per_seed,
            mean,
        });
    }
    let table = AblationTable { rows, seeds };
    if let Some(dir) = results_dir {
        std::fs::create_dir_all(dir)?;
        let name = format!("ablation_{}_seed{}.csv", base.config_hash(), base.seed);
        std::fs::write(dir.join(name), table.to_csv())?;
    }
    Ok(table)
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta");
        for s in &self.seeds {
            let _ = write!(out, ",target_acc_seed{s}");
        }
        out.push_str(",mean\n");
        for row in &self.rows {
            let _ = write!(out, "{},{}", row.alpha, row.beta);
            for acc in &row.per_seed {
                let _ = write!(out, ",{acc}");
            }
            let _ = writeln!(out, ",{}", row.mean);
        }
        out
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>6} {:>6}", "alpha", "beta");
        for s in &self.seeds {
            let _ = write!(out, " {:>10}", format!("seed{s}"));
        }
        let _ = writeln!(out, " {:>10}", "mean");
        for row in &self.rows {
            let _ = write!(out, "{:>6.2} {:>6.2}", row.alpha, row.beta);
            for acc in &row.per_seed {
                let _ = write!(out, " {acc:>10.4}");
            }
            let _ = writeln!(out, " {:>10.4}", row.mean);
        }
        out
    }

    pub fn row(&self, alpha: f64, beta: f64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.alpha == alpha && r.beta == beta)
    }
}

/// One training run per queue multiple, all under the base seed — the rows
/// differ only in queue capacity.
pub fn sweep_queue(
    base: &TrainConfig,
    multiples: &[usize],
    results_dir: Option<&Path>,
) -> Result<QueueTable> {
    if multiples.is_empty() {
        return Err(DicsError::InvalidConfig(
            "queue sweep needs at least one multiple".into(),
        ));
    }
    if multiples.contains(&0) {
        return Err(DicsError::InvalidConfig(
            "queue multiples must be at least 1".into(),
        ));
    }
    let outcomes = run_parallel(multiples.len(), |idx| {
        let mut config = base.clone();
        config.queue_multiple = multiples[idx];
        train_run(&config, None)
            .map(|a| (a.report.target_accuracy, a.report.final_source_val_accuracy))
    });
    let mut rows = Vec::with_capacity(multiples.len());
    for (idx, &multiple) in multiples.iter().enumerate() {
        match &outcomes[idx] {
            Ok((target, val)) => rows.push(QueueRow {
                multiple,
                label: format!("DICS-{multiple}N"),
                target_accuracy: *target,
                source_val_accuracy: *val,
            }),
            Err(e) => {
                return Err(DicsError::Data(format!(
                    "queue sweep cell {multiple}N failed: {e}"
                )))
            }
        }
    }
    let table = QueueTable {
        rows,
        seed: base.seed,
    };
    if let Some(dir) = results_dir {
        std::fs::create_dir_all(dir)?;
        let name = format!("queue_{}_seed{}.csv", base.config_hash(), base.seed);
        std::fs::write(dir.join(name), table.to_csv())?;
    }
    Ok(table)
}

impl QueueTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("algorithm,queue_multiple,target_acc,source_val_acc\n");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                row.label, row.multiple, row.target_accuracy, row.source_val_accuracy
            );
        }
        out
    }

    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{:>10} {:>12} {:>16}\n",
            "algorithm", "target_acc", "source_val_acc"
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:>10} {:>12.4} {:>16.4}",
                row.label, row.target_accuracy, row.source_val_accuracy
            );
        }
        out
    }
}
