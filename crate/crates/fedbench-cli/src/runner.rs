//! Implementations behind the `fedbench` subcommands: `run`, `partition`,
//! `grid`, `aggregator`, and `collaborator`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;

use serde::Serialize;

use fedbench::data::Dataset;
use fedbench::model::Batch;
use fedbench::netlink::{run_collaborator, serve_aggregator, NetOptions};
use fedbench::orchestrator::{
    derive_plan, run_partitioned, FederationConfig, FederationRun,
};
use fedbench::partition::{partition, validate_plan, PartitionPlan};

use crate::config::ExperimentConfig;
use crate::metrics::{render_metrics_csv, render_summary_json, summarize, RowContext};
use crate::plan::PlanFile;
use crate::Failure;

/// Command-line overrides shared by the experiment-running subcommands.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub net: bool,
}

struct Loaded {
    exp: ExperimentConfig,
    base: PathBuf,
    train: Dataset,
    test: Dataset,
    cfg: FederationConfig,
}

/// Parse → load data → build the engine config, applying overrides. Every
/// error here is a configuration problem.
fn load_everything(
    config_path: &Path,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<Loaded, Failure> {
    let (exp, base) = ExperimentConfig::load(config_path)?;
    let (train, test) = exp.load_dataset(&base)?;
    let mut cfg = exp.build_federation(&train)?;
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    if let Some(workers) = workers {
        cfg.workers = workers;
        cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(Loaded { exp, base, train, test, cfg })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Failure::Runtime(format!("create {}: {e}", parent.display())))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("write {}: {e}", path.display())))
}

fn row_context<'a>(cfg: &'a FederationConfig) -> RowContext<'a> {
    RowContext {
        algo: cfg.algo.kind.name(),
        skew: cfg.partition.kind.name(),
        epochs_per_round: cfg.algo.epochs_per_round,
        seed: cfg.master_seed,
    }
}

fn write_run_outputs(out: &Path, cfg: &FederationConfig, run: &FederationRun) -> Result<(), Failure> {
    let ctx = row_context(cfg);
    write_file(&out.join("metrics.csv"), render_metrics_csv(&run.metrics, ctx).as_bytes())?;
    let summary = summarize(&run.metrics, ctx, cfg.rounds)
        .ok_or_else(|| Failure::runtime("the run produced no evaluated rounds"))?;
    write_file(&out.join("summary.json"), render_summary_json(&summary).as_bytes())
}

/// One (indices, samples) pair per client, cut exactly as the engine and the
/// aggregator cut them.
fn client_shards(
    train: &Dataset,
    plan: Option<&PartitionPlan>,
) -> Result<Vec<(Vec<usize>, Batch)>, Failure> {
    let assignments: Vec<Vec<usize>> = match plan {
        Some(p) => p.assignments.clone(),
        None => vec![(0..train.len()).collect()],
    };
    assignments
        .into_iter()
        .map(|indices| {
            let labels = indices.iter().map(|&i| train.labels[i]).collect();
            let batch = Batch::new(train.features.gather_rows(&indices), labels)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            Ok((indices, batch))
        })
        .collect()
}

/// Runs the federation over loopback TCP: one aggregator plus one thread per
/// collaborator, all speaking the real wire protocol.
fn run_over_loopback(
    cfg: &FederationConfig,
    train: &Dataset,
    test: &Dataset,
    plan: Option<&PartitionPlan>,
    options: &NetOptions,
) -> Result<FederationRun, Failure> {
    let listener = TcpListener::bind(("127.0.0.1", 0))
        .map_err(|e| Failure::Runtime(format!("bind loopback: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Failure::Runtime(e.to_string()))?
        .to_string();
    let shards = client_shards(train, plan)?;
    thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .enumerate()
            .map(|(id, (indices, batch))| {
                let addr = addr.clone();
                scope.spawn(move || run_collaborator(&addr, id, batch, indices, cfg, options))
            })
            .collect();
        let served = serve_aggregator(cfg, train, test, listener, options);
        let mut client_err: Option<String> = None;
        for (id, handle) in handles.into_iter().enumerate() {
            match handle.join() {
                Ok(Ok(_)) => {}
                Ok(Err(e)) => {
                    client_err.get_or_insert(format!("collaborator {id}: {e}"));
                }
                Err(_) => {
                    client_err.get_or_insert(format!("collaborator {id} panicked"));
                }
            }
        }
        let run = served.map_err(|e| Failure::Runtime(format!("aggregator: {e}")))?;
        match client_err {
            Some(e) => Err(Failure::Runtime(e)),
            None => Ok(run),
        }
    })
}

pub fn cmd_run(config_path: &Path, ov: &RunOverrides) -> Result<(), Failure> {
    let loaded = load_everything(config_path, ov.seed, ov.workers)?;
    let out = loaded.exp.resolve_out_dir(&loaded.base, ov.out.as_deref())?;
    // an infeasible partition is a configuration problem: it is fully
    // determined by the config and the dataset before training starts
    let plan =
        derive_plan(&loaded.cfg, &loaded.train).map_err(|e| Failure::Config(e.to_string()))?;
    let run = if ov.net {
        run_over_loopback(
            &loaded.cfg,
            &loaded.train,
            &loaded.test,
            plan.as_ref(),
            &loaded.exp.net_options(),
        )?
    } else {
        run_partitioned(&loaded.cfg, &loaded.train, &loaded.test, plan.as_ref())
            .map_err(|e| Failure::Runtime(e.to_string()))?
    };
    write_run_outputs(&out, &loaded.cfg, &run)?;
    let last = run.metrics.last().expect("a finished run has metrics");
    println!(
        "{} rounds done, final top-1 {:.4}; wrote {}",
        loaded.cfg.rounds,
        last.global_top1,
        out.join("metrics.csv").display()
    );
    Ok(())
}

pub fn cmd_partition(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let (exp, base) = ExperimentConfig::load(config_path)?;
    let (train, _test) = exp.load_dataset(&base)?;
    let cfg = exp.build_federation(&train)?;
    if cfg.num_clients < 2 {
        return Err(Failure::config("partitioning needs at least 2 clients"));
    }
    let mut spec = cfg.partition.clone();
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let plan = partition(&train, &spec).map_err(|e| Failure::Config(e.to_string()))?;
    let report = validate_plan(&plan, &train);
    if !report.is_valid() {
        return Err(Failure::Runtime(format!(
            "partitioner produced an invalid plan: {}",
            report.violations.join("; ")
        )));
    }
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => exp.resolve_out_dir(&base, None)?.join("plan.json"),
    };
    write_file(&path, PlanFile::from_plan(&plan).to_json().as_bytes())?;
    println!(
        "partitioned {} samples across {} clients; wrote {}",
        train.len(),
        cfg.num_clients,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct GridReport {
    cells_total: usize,
    cells_failed: Vec<FailedCell>,
}

#[derive(Serialize)]
struct FailedCell {
    cell: String,
    error: String,
}

pub fn cmd_grid(config_path: &Path, ov: &RunOverrides) -> Result<(), Failure> {
    let loaded = load_everything(config_path, ov.seed, ov.workers)?;
    let grid = loaded
        .exp
        .grid
        .clone()
        .ok_or_else(|| Failure::config("grid needs a [grid] section in the config"))?;
    if grid.algos.is_empty() || grid.skews.is_empty() || grid.rounds.is_empty() || grid.epochs.is_empty()
    {
        return Err(Failure::config("every grid axis needs at least one entry"));
    }
    let out = loaded.exp.resolve_out_dir(&loaded.base, ov.out.as_deref())?;
    let dataset_name = loaded.exp.dataset.name();
    let fedcurv_lambda = grid.lambda.or(loaded.exp.algo.lambda).unwrap_or(0.0);

    let mut header = String::from("dataset,skew,epochs");
    for &rounds in &grid.rounds {
        for &algo in &grid.algos {
            let _ = write!(header, ",T{}_{}", rounds, algo.name());
        }
    }

    // one partition plan per skew, shared across every algorithm and
    // schedule in that family so all of them train on identical shards
    let mut plans: BTreeMap<&'static str, Result<Option<PartitionPlan>, String>> = BTreeMap::new();

    let mut table_rows = Vec::new();
    let mut failed = Vec::new();
    let mut cells_total = 0usize;
    for &skew in &grid.skews {
        let plan = plans.entry(skew.name()).or_insert_with(|| {
            let mut cfg = loaded.cfg.clone();
            cfg.partition.kind = skew;
            derive_plan(&cfg, &loaded.train).map_err(|e| e.to_string())
        });
        for &epochs in &grid.epochs {
            let mut row = format!("{dataset_name},{},{epochs}", skew.name());
            for &rounds in &grid.rounds {
                for &algo in &grid.algos {
                    cells_total += 1;
                    let cell = format!("{}_{}_T{rounds}_E{epochs}", algo.name(), skew.name());
                    let mut cfg = loaded.cfg.clone();
                    cfg.partition.kind = skew;
                    cfg.algo.kind = algo;
                    cfg.algo.lambda = match algo {
                        fedbench::algo::AlgorithmKind::FedCurv => fedcurv_lambda,
                        fedbench::algo::AlgorithmKind::FedAvg => 0.0,
                    };
                    cfg.rounds = rounds;
                    cfg.algo.epochs_per_round = epochs;
                    let outcome = run_grid_cell(&cfg, &loaded, plan, &out, &cell);
                    match outcome {
                        Ok(best) => {
                            let _ = write!(row, ",{best}");
                            println!("cell {cell}: best top-1 {best:.4}");
                        }
                        Err(error) => {
                            row.push(',');
                            eprintln!("cell {cell} failed: {error}");
                            failed.push(FailedCell { cell, error });
                        }
                    }
                }
            }
            table_rows.push(row);
        }
    }

    let mut combined = header;
    combined.push('\n');
    for row in table_rows {
        combined.push_str(&row);
        combined.push('\n');
    }
    write_file(&out.join("combined.csv"), combined.as_bytes())?;

    let report = GridReport { cells_total, cells_failed: failed };
    let mut report_json =
        serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
    report_json.push('\n');
    write_file(&out.join("grid_report.json"), report_json.as_bytes())?;

    if report.cells_failed.is_empty() {
        println!(
            "{cells_total} cells complete; wrote {}",
            out.join("combined.csv").display()
        );
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "{} of {cells_total} grid cells failed (see {})",
            report.cells_failed.len(),
            out.join("grid_report.json").display()
        )))
    }
}

fn run_grid_cell(
    cfg: &FederationConfig,
    loaded: &Loaded,
    plan: &Result<Option<PartitionPlan>, String>,
    out: &Path,
    cell: &str,
) -> Result<f64, String> {
    let plan = plan.as_ref().map_err(Clone::clone)?;
    let run = run_partitioned(cfg, &loaded.train, &loaded.test, plan.as_ref())
        .map_err(|e| e.to_string())?;
    let csv = render_metrics_csv(&run.metrics, row_context(cfg));
    write_file(&out.join("cells").join(format!("{cell}.csv")), csv.as_bytes())
        .map_err(|e| e.to_string())?;
    run.metrics
        .iter()
        .map(|m| m.global_top1)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or_else(|| "no evaluated rounds".to_string())
}

pub fn cmd_aggregator(config_path: &Path, bind: &str, ov: &RunOverrides) -> Result<(), Failure> {
    let loaded = load_everything(config_path, ov.seed, ov.workers)?;
    let out = loaded.exp.resolve_out_dir(&loaded.base, ov.out.as_deref())?;
    let listener =
        TcpListener::bind(bind).map_err(|e| Failure::Runtime(format!("bind {bind}: {e}")))?;
    let local = listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
    // announce the actual port (stdout may be a pipe, so flush explicitly)
    println!("listening on {local}");
    std::io::stdout().flush().ok();
    let run = serve_aggregator(
        &loaded.cfg,
        &loaded.train,
        &loaded.test,
        listener,
        &loaded.exp.net_options(),
    )
    .map_err(|e| Failure::Runtime(e.to_string()))?;
    write_run_outputs(&out, &loaded.cfg, &run)?;
    let last = run.metrics.last().expect("a finished run has metrics");
    println!(
        "federation complete, final top-1 {:.4}; wrote {}",
        last.global_top1,
        out.join("metrics.csv").display()
    );
    Ok(())
}

pub fn cmd_collaborator(
    config_path: &Path,
    connect: &str,
    client_id: usize,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let loaded = load_everything(config_path, seed, None)?;
    if client_id >= loaded.cfg.num_clients {
        return Err(Failure::Config(format!(
            "client id {client_id} is out of range for {} clients",
            loaded.cfg.num_clients
        )));
    }
    let plan =
        derive_plan(&loaded.cfg, &loaded.train).map_err(|e| Failure::Config(e.to_string()))?;
    let shards = client_shards(&loaded.train, plan.as_ref())?;
    let (indices, batch) = &shards[client_id];
    let report = run_collaborator(
        connect,
        client_id,
        batch,
        indices,
        &loaded.cfg,
        &loaded.exp.net_options(),
    )
    .map_err(|e| Failure::Runtime(e.to_string()))?;
    println!(
        "client {} trained {} rounds ({} bytes sent, {} bytes received)",
        report.client_id, report.rounds_trained, report.bytes_sent, report.bytes_received
    );
    Ok(())
}
