use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CURVE_FILE: &str = "curve.csv";

/// One evaluation point. Loss and fraction columns are means over the
/// updates since the previous evaluation (zero when there were none).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_steps: u64,
    pub success_rate: f64,
    pub mean_bc_loss: f64,
    pub mean_filter_fraction: f64,
    pub mean_critic_loss: f64,
    pub mean_actor_loss: f64,
    pub wall_seconds: f64,
}

/// The columns of `metrics.csv`; wall time lives in `timing.csv` so that
/// repeated runs produce identical metrics files.
#[derive(Debug, Serialize, Deserialize)]
struct MetricsRecord {
    env_steps: u64,
    success_rate: f64,
    mean_bc_loss: f64,
    mean_filter_fraction: f64,
    mean_critic_loss: f64,
    mean_actor_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TimingRecord {
    env_steps: u64,
    wall_seconds: f64,
}

/// Append-only writer; every row is flushed before `append` returns.
pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    timing: csv::Writer<File>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Creates (truncating) both files in `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name| -> Result<File> {
            Ok(OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(dir.join(name))?)
        };
        let mut builder = csv::WriterBuilder::new();
        builder.has_headers(false);
        let mut metrics = builder.from_writer(open(METRICS_FILE)?);
        let mut timing = builder.from_writer(open(TIMING_FILE)?);
        metrics.write_record([
            "env_steps",
            "success_rate",
            "mean_bc_loss",
            "mean_filter_fraction",
            "mean_critic_loss",
            "mean_actor_loss",
        ])?;
        timing.write_record(["env_steps", "wall_seconds"])?;
        metrics.flush()?;
        timing.flush()?;
        Ok(Self {
            metrics,
            timing,
            last_step: None,
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        if self.last_step.is_some_and(|s| row.env_steps <= s) {
            return Err(Error::Metrics(format!(
                "env_steps {} does not increase past {}",
                row.env_steps,
                self.last_step.unwrap_or(0)
            )));
        }
        self.metrics.serialize(MetricsRecord {
            env_steps: row.env_steps,
            success_rate: row.success_rate,
            mean_bc_loss: row.mean_bc_loss,
            mean_filter_fraction: row.mean_filter_fraction,
            mean_critic_loss: row.mean_critic_loss,
            mean_actor_loss: row.mean_actor_loss,
        })?;
        self.timing.serialize(TimingRecord {
            env_steps: row.env_steps,
            wall_seconds: row.wall_seconds,
        })?;
        self.metrics.flush()?;
        self.timing.flush()?;
        self.last_step = Some(row.env_steps);
        Ok(())
    }
}

/// Reads a run directory back into its rows. Wall time is 0 if the timing
/// file is absent.
pub fn read_run(dir: &Path) -> Result<Vec<MetricsRow>> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let records: Vec<MetricsRecord> = csv::Reader::from_path(&path)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    let timing_path = dir.join(TIMING_FILE);
    let timing: Vec<TimingRecord> = if timing_path.exists() {
        csv::Reader::from_path(&timing_path)?
            .deserialize()
            .collect::<std::result::Result<_, _>>()?
    } else {
        Vec::new()
    };
    let mut rows = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        if rows.last().is_some_and(|p: &MetricsRow| r.env_steps <= p.env_steps) {
            return Err(Error::Metrics(format!("{}: env_steps not increasing", path.display())));
        }
        let wall_seconds = match timing.get(i) {
            Some(t) if t.env_steps == r.env_steps => t.wall_seconds,
            Some(_) => return Err(Error::Metrics(format!("{}: timing rows misaligned", dir.display()))),
            None => 0.0,
        };
        rows.push(MetricsRow {
            env_steps: r.env_steps,
            success_rate: r.success_rate,
            mean_bc_loss: r.mean_bc_loss,
            mean_filter_fraction: r.mean_filter_fraction,
            mean_critic_loss: r.mean_critic_loss,
            mean_actor_loss: r.mean_actor_loss,
            wall_seconds,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub env_steps: u64,
    pub success_rate: MeanStd,
    pub bc_loss: MeanStd,
    pub filter_fraction: MeanStd,
    pub critic_loss: MeanStd,
    pub actor_loss: MeanStd,
}

/// Seed-aggregated learning curve for one (env, variant) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    pub env: String,
    pub variant: String,
    pub seeds: Vec<u64>,
    pub points: Vec<CurvePoint>,
}

/// Per-point mean and sample std over seeds. Runs are ordered by seed first,
/// so the result does not depend on input order.
pub fn aggregate_seeds(env: &str, variant: &str, runs: &[(u64, Vec<MetricsRow>)]) -> Result<AggregateCurve> {
    if runs.is_empty() {
        return Err(Error::Metrics("no runs to aggregate".into()));
    }
    let mut runs: Vec<&(u64, Vec<MetricsRow>)> = runs.iter().collect();
    runs.sort_by_key(|(seed, _)| *seed);
    if runs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Metrics("duplicate seed in aggregation".into()));
    }
    let grid: Vec<u64> = runs[0].1.iter().map(|r| r.env_steps).collect();
    for (seed, rows) in &runs {
        if !rows.iter().map(|r| r.env_steps).eq(grid.iter().copied()) {
            return Err(Error::Metrics(format!("seed {seed} has a different evaluation grid")));
        }
    }
    let column = |i: usize, f: fn(&MetricsRow) -> f64| {
        MeanStd::of(&runs.iter().map(|(_, rows)| f(&rows[i])).collect::<Vec<_>>())
    };
    let points = grid
        .iter()
        .enumerate()
        .map(|(i, &env_steps)| CurvePoint {
            env_steps,
            success_rate: column(i, |r| r.success_rate),
            bc_loss: column(i, |r| r.mean_bc_loss),
            filter_fraction: column(i, |r| r.mean_filter_fraction),
            critic_loss: column(i, |r| r.mean_critic_loss),
            actor_loss: column(i, |r| r.mean_actor_loss),
        })
        .collect();
    Ok(AggregateCurve {
        env: env.to_owned(),
        variant: variant.to_owned(),
        seeds: runs.iter().map(|(s, _)| *s).collect(),
        points,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRecord {
    env: String,
    variant: String,
    seeds: String,
    env_steps: u64,
    success_mean: f64,
    success_std: f64,
    bc_loss_mean: f64,
    bc_loss_std: f64,
    filter_mean: f64,
    filter_std: f64,
    critic_loss_mean: f64,
    critic_loss_std: f64,
    actor_loss_mean: f64,
    actor_loss_std: f64,
}

pub fn write_curve(path: &Path, curve: &AggregateCurve) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let seeds = curve.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    let mut w = csv::Writer::from_path(path)?;
    for p in &curve.points {
        w.serialize(CurveRecord {
            env: curve.env.clone(),
            variant: curve.variant.clone(),
            seeds: seeds.clone(),
            env_steps: p.env_steps,
            success_mean: p.success_rate.mean,
            success_std: p.success_rate.std,
            bc_loss_mean: p.bc_loss.mean,
            bc_loss_std: p.bc_loss.std,
            filter_mean: p.filter_fraction.mean,
            filter_std: p.filter_fraction.std,
            critic_loss_mean: p.critic_loss.mean,
            critic_loss_std: p.critic_loss.std,
            actor_loss_mean: p.actor_loss.mean,
            actor_loss_std: p.actor_loss.std,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<AggregateCurve> {
    let records: Vec<CurveRecord> = csv::Reader::from_path(path)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    let first = records
        .first()
        .ok_or_else(|| Error::Metrics(format!("{} is empty", path.display())))?;
    let seeds = first
        .seeds
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Metrics(format!("bad seed list {:?}", first.seeds))))
        .collect::<Result<Vec<u64>>>()?;
    let ms = |mean, std| MeanStd { mean, std };
    Ok(AggregateCurve {
        env: first.env.clone(),
        variant: first.variant.clone(),
        seeds,
        points: records
            .iter()
            .map(|r| CurvePoint {
                env_steps: r.env_steps,
                success_rate: ms(r.success_mean, r.success_std),
                bc_loss: ms(r.bc_loss_mean, r.bc_loss_std),
                filter_fraction: ms(r.filter_mean, r.filter_std),
                critic_loss: ms(r.critic_loss_mean, r.critic_loss_std),
                actor_loss: ms(r.actor_loss_mean, r.actor_loss_std),
            })
            .collect(),
    })
}

/// Every directory under `root` (inclusive) holding a metrics file.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        if dir.join(METRICS_FILE).is_file() {
            found.push(dir.clone());
        }
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}
