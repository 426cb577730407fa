//! `infomamba` command-line runner.
//!
//! Every subcommand writes its outputs plus `config.resolved` (the fully
//! resolved configuration) into `--out`. Failures print one JSON line
//! `{"kind": ..., "message": ...}` on stderr; exit code 2 means a usage or
//! configuration problem and 3 a numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use infomamba::experiments::config::Config;
use infomamba::experiments::diagnose::diagnose;
use infomamba::experiments::grid::{ablation_grid, k_sweep, k_sweep_table, router_experiment};
use infomamba::experiments::bench::{scaling_bench, ScalingSetup, TimingProtocol};
use infomamba::experiments::report::{num, write_json, Table, ABLATION_HEADER, SCALING_HEADER};
use infomamba::experiments::train::{run, RunSpec, RunStatus};
use infomamba::Error;

#[derive(Parser, Debug)]
#[command(name = "infomamba", version, about = "Train, diagnose, sweep and ablate InfoMamba models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// `KEY=VALUE` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train one model variant on the configured task.
    Train,
    /// Boundary diagnostics on the configured attention instances.
    Diagnose,
    /// k_max sweep, scaling benchmark or router experiment (config key `sweep`).
    Sweep,
    /// Ablation grid over `variants` × `seeds`.
    Ablate,
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { kind: e.kind(), message: e.to_string() }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self.kind {
            "usage" | "config" | "config-not-found" | "invalid-argument" => 2,
            "numerical-failure" => 3,
            _ => 1,
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(cli: &Cli) -> std::result::Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(path) if !path.is_file() => {
            return Err(Failure { kind: "config-not-found", message: format!("config file {} not found", path.display()) })
        }
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_table(out: &Path, name: &str, table: &Table) -> Outcome {
    table.write(&out.join(name))?;
    Ok(())
}

fn json_file<T: serde::Serialize>(out: &Path, name: &str, value: &T) -> Outcome {
    write_json(&out.join(name), value)?;
    Ok(())
}

fn cmd_train(cfg: &Config, out: &Path) -> Outcome {
    let task = cfg.task()?;
    let spec = RunSpec {
        task,
        model: cfg.model_config(&task),
        variant: cfg.variant.parse()?,
        filler_rank: 0,
        train: cfg.train_config()?,
        seed: cfg.seed,
    };
    let (_, rec) = run(&spec)?;
    let r = &rec.result;
    let mut losses = Table::new("losses", &["step", "loss"], &[]);
    for (i, l) in r.outcome.losses.iter().enumerate() {
        losses.push(vec![i.to_string(), num(*l)])?;
    }
    write_table(out, "losses.csv", &losses)?;
    let mut metrics = Table::new("ablation", &ABLATION_HEADER, &["time_ms"]);
    metrics.push(vec![
        spec.variant.name().into(),
        spec.seed.to_string(),
        r.outcome.losses.len().to_string(),
        num(r.outcome.metric),
        r.params.to_string(),
        String::new(),
        String::new(),
        num(rec.timing.train_ms + rec.timing.eval_ms),
    ])?;
    write_table(out, "metrics.csv", &metrics)?;
    json_file(out, "record.json", r)?;
    json_file(out, "timing.json", &rec.timing)?;
    match r.outcome.status {
        RunStatus::Completed => Ok(()),
        RunStatus::Diverged { step, loss } => Err(Failure {
            kind: "numerical-failure",
            message: format!("training diverged at step {step} (loss {loss:e})"),
        }),
    }
}

fn cmd_diagnose(cfg: &Config, out: &Path) -> Outcome {
    let d = diagnose(cfg)?;
    json_file(out, "diagnose.json", &d.instances)?;
    write_table(out, "kernels.csv", &d.kernels)
}

fn cmd_sweep(cfg: &Config, out: &Path) -> Outcome {
    match cfg.sweep.as_str() {
        "k" => {
            let rows = k_sweep(cfg)?;
            write_table(out, "k_sweep.csv", &k_sweep_table(&rows)?)
        }
        "scaling" => {
            let setup = ScalingSetup {
                d: cfg.d_model,
                d_state: cfg.d_state,
                k_max: cfg.k_max,
                protocol: TimingProtocol { repeats: cfg.repeats, warmups: cfg.warmups },
                seed: cfg.seed,
            };
            let rep = scaling_bench(&cfg.ns, &setup)?;
            let mut t = Table::new("scaling", &SCALING_HEADER, &["median_ms"]);
            for r in &rep.rows {
                t.push(vec![r.model.name().into(), r.n.to_string(), num(r.median_ms)])?;
            }
            write_table(out, "scaling.csv", &t)?;
            json_file(out, "timing.json", &json!({ "attention_slope": rep.attention_slope, "block_slope": rep.block_slope }))
        }
        "router" => {
            let rep = router_experiment(cfg)?;
            write_table(out, "router.csv", &rep.table()?)?;
            json_file(
                out,
                "router_summary.json",
                &json!({
                    "by_lag": rep.by_lag,
                    "monotone": rep.monotone,
                    "tolerance": rep.tolerance,
                    "lsdi_increases": rep.lsdi_increases,
                }),
            )?;
            json_file(out, "timing.json", &json!({ "time_ms": rep.time_ms }))
        }
        other => Err(Failure { kind: "config", message: format!("unknown sweep kind {other:?} (expected k, scaling or router)") }),
    }
}

fn cmd_ablate(cfg: &Config, out: &Path) -> Outcome {
    let grid = ablation_grid(cfg)?;
    write_table(out, "ablation.csv", &grid.table()?)?;
    let records = out.join("records");
    std::fs::create_dir_all(&records).map_err(Error::from)?;
    for rec in &grid.records {
        let s = &rec.result.spec;
        json_file(&records, &format!("{}-seed{}.json", s.variant.name(), s.seed), &rec.result)?;
    }
    let timing: Vec<_> = grid
        .records
        .iter()
        .map(|r| json!({ "variant": r.result.spec.variant.name(), "seed": r.result.spec.seed, "timing": r.timing }))
        .collect();
    json_file(out, "timing.json", &timing)?;
    let gain: Vec<_> = grid
        .rows
        .iter()
        .filter(|r| r.variant.name() == cfg.baseline)
        .map(|r| json!({ "seed": r.seed, "g": r.g }))
        .collect();
    let dominates = grid.summary.variants.iter().all(|v| v.full_at_least);
    json_file(
        out,
        "summary.json",
        &json!({
            "full_at_least_every_variant": dominates,
            "variants": grid.summary.variants,
            "params_matched": grid.summary.params_matched,
            "hashes_distinct": grid.summary.hashes_distinct,
            "baseline": cfg.baseline,
            "gain_vs_baseline": gain,
        }),
    )
}

fn execute(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(Error::from)?;
    std::fs::write(cli.out.join("config.resolved"), cfg.resolved_text()).map_err(Error::from)?;
    match cli.command {
        Command::Train => cmd_train(&cfg, &cli.out),
        Command::Diagnose => cmd_diagnose(&cfg, &cli.out),
        Command::Sweep => cmd_sweep(&cfg, &cli.out),
        Command::Ablate => cmd_ablate(&cfg, &cli.out),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{}", json!({ "kind": f.kind, "message": f.message }));
    ExitCode::from(f.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_owned();
            return fail(Failure { kind: "usage", message });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}
