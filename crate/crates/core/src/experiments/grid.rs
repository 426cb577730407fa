//! Multi-run experiments: the ablation grid, routing gain, the concept-pool
//! sweep and the router sweep over lags.
//!
//! Cells are independent and internally deterministic. Up to
//! `INFOMAMBA_MAX_CELLS` of them (default 1) run on scoped threads; results
//! are always returned in cell order, so the output does not depend on the
//! degree of parallelism.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::bench::{median_time_ms, TimingProtocol};
use super::config::Config;
use super::model::{budget_plan, Model, Variant};
use super::report::{num, Table, ABLATION_HEADER, KSWEEP_HEADER, ROUTER_HEADER};
use super::router::{is_monotone, router_point, RouterPoint};
use super::tasks::SyntheticTask;
use super::train::{run, ExperimentRecord, RunSpec};

/// Environment variable capping the number of concurrently running cells.
pub const MAX_CELLS_ENV: &str = "INFOMAMBA_MAX_CELLS";

pub fn max_cells() -> usize {
    std::env::var(MAX_CELLS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&v| v > 0).unwrap_or(1)
}

/// Evaluates `f(0..count)` on up to [`max_cells`] threads, in index order.
pub fn run_cells<T, F>(count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = max_cells().min(count);
    if workers <= 1 {
        return (0..count).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let out = f(i);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

/// One ablation cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub metric: f64,
    pub params: usize,
    /// `metric(full) − metric(variant)` for the same seed; NaN without a
    /// full row.
    pub g: f64,
    pub time_ms: f64,
    pub spec_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean_metric: f64,
    pub spread: f64,
    /// `metric(full) ≥ metric(variant)` on every seed.
    pub full_at_least: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variants: Vec<VariantSummary>,
    /// Every row's parameter count is within 2% of the largest.
    pub params_matched: bool,
    pub hashes_distinct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
    pub records: Vec<ExperimentRecord>,
    pub summary: AblationSummary,
}

fn mean_and_spread(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let spread = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, spread)
}

fn specs(cfg: &Config, variants: &[Variant]) -> Result<Vec<RunSpec>> {
    let task = cfg.task()?;
    let train = cfg.train_config()?;
    let plan = budget_plan(cfg.model_config(&task), variants)?;
    let mut out = Vec::new();
    for seed in cfg.seed_list() {
        for &(variant, model, filler_rank) in &plan {
            out.push(RunSpec { task: SyntheticTask { seed, ..task }, model, variant, filler_rank, train, seed });
        }
    }
    Ok(out)
}

/// Trains every configured variant on every seed under one protocol, at
/// matched parameter budgets.
pub fn ablation_grid(cfg: &Config) -> Result<AblationGrid> {
    let variants = cfg.variant_list()?;
    let specs = specs(cfg, &variants)?;
    let records = run_cells(specs.len(), |i| run(&specs[i]).map(|(_, rec)| rec))?;
    let metric_of = |v: Variant, seed: u64| {
        records.iter().find(|r| r.result.spec.variant == v && r.result.spec.seed == seed).map(|r| r.metric())
    };
    let rows: Vec<AblationRow> = records
        .iter()
        .map(|r| {
            let spec = &r.result.spec;
            AblationRow {
                variant: spec.variant,
                seed: spec.seed,
                steps: r.result.outcome.losses.len(),
                metric: r.metric(),
                params: r.result.params,
                g: metric_of(Variant::Full, spec.seed).map_or(f64::NAN, |f| f - r.metric()),
                time_ms: r.timing.train_ms + r.timing.eval_ms,
                spec_hash: r.result.spec_hash.clone(),
            }
        })
        .collect();
    let summary = summarize(&rows, &variants);
    Ok(AblationGrid { rows, records, summary })
}

fn summarize(rows: &[AblationRow], variants: &[Variant]) -> AblationSummary {
    let summaries = variants
        .iter()
        .map(|&v| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
            let metrics: Vec<f64> = mine.iter().map(|r| r.metric).collect();
            let (mean_metric, spread) = mean_and_spread(&metrics);
            VariantSummary { variant: v, mean_metric, spread, full_at_least: mine.iter().all(|r| r.g >= 0.0) }
        })
        .collect();
    let max = rows.iter().map(|r| r.params).max().unwrap_or(0) as f64;
    let mut hashes: Vec<&str> = rows.iter().map(|r| r.spec_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    AblationSummary {
        variants: summaries,
        params_matched: rows.iter().all(|r| (max - r.params as f64) <= 0.02 * max),
        hashes_distinct: hashes.len() == rows.len(),
    }
}

impl AblationGrid {
    pub fn table(&self) -> Result<Table> {
        let mut t = Table::new("ablation", &ABLATION_HEADER, &["time_ms"]);
        for r in &self.rows {
            t.push(vec![
                r.variant.name().into(),
                r.seed.to_string(),
                r.steps.to_string(),
                num(r.metric),
                r.params.to_string(),
                num(r.g),
                String::new(),
                num(r.time_ms),
            ])?;
        }
        Ok(t)
    }
}

/// `g = metric(full) − metric(baseline)` per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub baseline: Variant,
    pub seeds: Vec<u64>,
    pub full: Vec<f64>,
    pub reference: Vec<f64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub spread: f64,
    pub params: (usize, usize),
}

/// Matched-budget gain of the full model over `baseline`.
pub fn routing_gain(cfg: &Config, baseline: Variant) -> Result<GainReport> {
    let pair = [Variant::Full, baseline];
    let specs = specs(cfg, &pair)?;
    let records = run_cells(specs.len(), |i| run(&specs[i]).map(|(_, rec)| rec))?;
    let seeds = cfg.seed_list();
    let full: Vec<f64> = records.iter().step_by(2).map(ExperimentRecord::metric).collect();
    let reference: Vec<f64> = records.iter().skip(1).step_by(2).map(ExperimentRecord::metric).collect();
    let per_seed: Vec<f64> = full.iter().zip(&reference).map(|(a, b)| a - b).collect();
    let (mean, spread) = mean_and_spread(&per_seed);
    Ok(GainReport {
        baseline,
        seeds,
        full,
        reference,
        per_seed,
        mean,
        spread,
        params: (records[0].result.params, records[1].result.params),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k_max: usize,
    pub seed: u64,
    pub metric: f64,
    pub params: usize,
    /// Median forward time of one evaluation batch.
    pub time_ms: f64,
}

/// Trains the configured variant at every `k_values` entry and times its
/// forward pass.
pub fn k_sweep(cfg: &Config) -> Result<Vec<KSweepRow>> {
    if cfg.k_values.is_empty() || cfg.k_values.contains(&0) {
        return Err(Error::Config("k_values must be positive".into()));
    }
    let variant: Variant = cfg.variant.parse()?;
    let task = cfg.task()?;
    let train = cfg.train_config()?;
    let protocol = TimingProtocol { repeats: cfg.repeats, warmups: cfg.warmups };
    let mut cells = Vec::new();
    for &k in &cfg.k_values {
        for seed in cfg.seed_list() {
            let model = super::model::ModelConfig { k_max: k, ..cfg.model_config(&task) };
            cells.push(RunSpec { task: SyntheticTask { seed, ..task }, model, variant, filler_rank: 0, train, seed });
        }
    }
    let trained = run_cells(cells.len(), |i| run(&cells[i]))?;
    // Timing runs serially after training so cells do not compete.
    trained
        .into_iter()
        .map(|(model, rec): (Model, ExperimentRecord)| {
            let spec = &rec.result.spec;
            let probe = spec.task.generate(cfg.batch.max(1), 1)?;
            let time_ms = median_time_ms(protocol, || model.evaluate(&probe, &spec.train.weights, false));
            Ok(KSweepRow { k_max: spec.model.k_max, seed: spec.seed, metric: rec.metric(), params: rec.result.params, time_ms })
        })
        .collect()
}

pub fn k_sweep_table(rows: &[KSweepRow]) -> Result<Table> {
    let mut t = Table::new("k_sweep", &KSWEEP_HEADER, &["time_ms"]);
    for r in rows {
        t.push(vec![r.k_max.to_string(), r.seed.to_string(), num(r.metric), r.params.to_string(), num(r.time_ms)])?;
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagSummary {
    pub lag: usize,
    pub mean_mamba_weight: f64,
    pub mean_lsdi: f64,
    pub mean_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub points: Vec<RouterPoint>,
    pub by_lag: Vec<LagSummary>,
    /// Mean Mamba weight is nondecreasing in lag within `tolerance`.
    pub monotone: bool,
    pub tolerance: f64,
    /// Mean LSDI at the largest lag exceeds the one at the smallest.
    pub lsdi_increases: bool,
    pub time_ms: f64,
}

/// Monotonicity band for the Mamba-weight trend.
pub const ROUTER_TOLERANCE: f64 = 0.05;

/// Trains a router model for every configured lag and seed.
pub fn router_experiment(cfg: &Config) -> Result<RouterReport> {
    if cfg.lags.is_empty() {
        return Err(Error::Config("lags must not be empty".into()));
    }
    let setup = cfg.router_setup()?;
    let seeds = cfg.seed_list();
    let cells: Vec<(usize, u64)> = cfg.lags.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let start = Instant::now();
    let points = run_cells(cells.len(), |i| router_point(&setup, cells[i].0, cells[i].1))?;
    let time_ms = start.elapsed().as_secs_f64() * 1e3;
    let by_lag: Vec<LagSummary> = cfg
        .lags
        .iter()
        .map(|&lag| {
            let mine: Vec<&RouterPoint> = points.iter().filter(|p| p.lag == lag).collect();
            let k = mine.len() as f64;
            LagSummary {
                lag,
                mean_mamba_weight: mine.iter().map(|p| p.mamba_weight).sum::<f64>() / k,
                mean_lsdi: mine.iter().map(|p| p.lsdi.lsdi).sum::<f64>() / k,
                mean_metric: mine.iter().map(|p| p.metric).sum::<f64>() / k,
            }
        })
        .collect();
    let monotone = is_monotone(&points, &cfg.lags, ROUTER_TOLERANCE);
    let lsdi_increases = by_lag.last().map(|l| l.mean_lsdi) > by_lag.first().map(|f| f.mean_lsdi);
    Ok(RouterReport { points, by_lag, monotone, tolerance: ROUTER_TOLERANCE, lsdi_increases, time_ms })
}

impl RouterReport {
    pub fn table(&self) -> Result<Table> {
        let mut t = Table::new("router", &ROUTER_HEADER, &[]);
        for p in &self.points {
            t.push(vec![
                p.lag.to_string(),
                p.seed.to_string(),
                num(p.metric),
                num(p.mamba_weight),
                num(p.lsdi.psr),
                num(p.lsdi.mw),
                num(p.lsdi.tcs),
                num(p.lsdi.lsdi),
            ])?;
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        let mut c = Config::default();
        for kv in [
            "task=mixed", "lag=2", "n=8", "n_classes=2", "noise_dims=1", "d_model=4", "d_state=3", "k_max=4",
            "q_max=2", "steps=4", "batch=4", "train_size=16", "eval_size=8", "seeds=2",
        ] {
            c.apply_override(kv).unwrap();
        }
        c
    }

    #[test]
    fn parallel_cells_keep_order() {
        let out = run_cells(7, |i| Ok(i * i)).unwrap();
        assert_eq!(out, vec![0, 1, 4, 9, 16, 25, 36]);
        let err = run_cells(3, |i| if i == 1 { Err(Error::invalid("boom")) } else { Ok(i) });
        assert!(err.is_err());
    }

    #[test]
    fn grid_rows_and_bookkeeping() {
        let mut c = small();
        c.apply_override("variants=full,no_filter,no_both").unwrap();
        let g = ablation_grid(&c).unwrap();
        assert_eq!(g.rows.len(), 6);
        assert!(g.summary.params_matched);
        assert!(g.summary.hashes_distinct);
        for r in g.rows.iter().filter(|r| r.variant == Variant::Full) {
            assert_eq!(r.g, 0.0);
        }
        let table = g.table().unwrap();
        assert!(table.to_csv().unwrap().starts_with("# schema=ablation/v1\nvariant,seed,steps,metric,params,g,lsdi,time_ms\n"));
    }

    #[test]
    fn no_mi_loss_matches_full_with_zero_weights() {
        let mut c = small();
        for kv in ["beta=0", "gamma=0", "eta=0", "variants=full,no_mi_loss", "seeds=1"] {
            c.apply_override(kv).unwrap();
        }
        let g = ablation_grid(&c).unwrap();
        assert_eq!(g.records[0].result.outcome, g.records[1].result.outcome);
    }

    #[test]
    fn gain_against_itself_is_zero() {
        let g = routing_gain(&small(), Variant::Full).unwrap();
        assert_eq!(g.per_seed, vec![0.0, 0.0]);
        assert_eq!(g.mean, 0.0);
    }

    #[test]
    fn k_sweep_rows_and_single_concept_floor() {
        let mut c = small();
        for kv in ["k_values=1,4", "seeds=1", "repeats=1", "warmups=0"] {
            c.apply_override(kv).unwrap();
        }
        let rows = k_sweep(&c).unwrap();
        assert_eq!(rows.iter().map(|r| r.k_max).collect::<Vec<_>>(), vec![1, 4]);
        assert!(rows.iter().all(|r| r.metric.is_finite()));
    }
}
