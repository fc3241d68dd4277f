use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use mlopf::coupling::{build_engine, privacy_audit};
use mlopf::feedergen::{balanced_feeder, generate, FeederSpec, HEAVY_LOAD_SCALE};
use mlopf::partition::{auto_partition, validate_partition};
use mlopf::powerflow::compare_models;
use mlopf::solver::{RunOutcome, RunStatus, Solver};
use mlopf::{
    EngineKind, Network, OpfProblem, PartitionHierarchy, SensitivityMatrices, SolverConfig,
};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::inputs::{
    default_area_size, default_subarea_size, load_devices, load_network, load_partition,
    load_problem, output_dir, solver_config, voltage_model,
};
use crate::manifest::RunManifest;
use crate::{Cli, Command, EngineArg, GlobalArgs};

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn validate(args: &GlobalArgs) -> CliResult<()> {
    let net = load_network(args)?;
    let mut report = serde_json::json!({
        "network": { "buses": net.bus_count(), "lines": net.lines().len(), "n_flat": net.n_flat() },
    });
    if args.devices.is_some() {
        let doc = load_devices(args)?;
        load_problem(args, &net)?;
        report["devices"] = serde_json::json!({
            "devices": doc.devices.len(),
            "background": doc.background.len(),
            "vmin": doc.vmin,
            "vmax": doc.vmax,
        });
    }
    if args.partition.is_some() {
        let (part, _) = load_partition(args, &net)?;
        report["partition"] = serde_json::json!({
            "valid": true,
            "areas": part.area_count(),
            "subareas": part.subarea_count(),
        });
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn partition(
    cli: &Cli,
    argv: &[String],
    area_size: Option<usize>,
    subarea_size: Option<usize>,
) -> CliResult<()> {
    let net = load_network(&cli.global)?;
    let area = area_size.unwrap_or_else(|| default_area_size(&net));
    let sub = subarea_size.unwrap_or_else(|| default_subarea_size(area));
    if area == 0 || sub == 0 {
        return Err(CliError::validation(
            "area and subarea sizes must be positive",
        ));
    }
    let part = auto_partition(&net, area, sub);
    let report = validate_partition(&net, &part);
    if !report.is_valid() {
        return Err(CliError::internal(format!(
            "automatic partition failed validation: {report}"
        )));
    }
    let text = serde_json::to_string_pretty(&part.to_document())?;
    match &cli.global.out {
        Some(_) => {
            let dir = output_dir(&cli.global)?;
            fs::write(dir.join("partition.json"), &text)?;
            let mut manifest = RunManifest::new(cli, argv, &dir);
            manifest.partition_source = Some(format!("auto(area_size={area}, subarea_size={sub})"));
            manifest.write(&dir)?;
            eprintln!(
                "{} areas, {} subareas -> {}",
                part.area_count(),
                part.subarea_count(),
                dir.display()
            );
        }
        None => println!("{text}"),
    }
    Ok(())
}

pub fn gen(cli: &Cli, argv: &[String]) -> CliResult<()> {
    let Command::Gen {
        buses,
        load_scale,
        heavy,
        area_size,
        subarea_size,
        spec,
    } = &cli.command
    else {
        unreachable!("gen called with another command")
    };
    let spec = match spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<FeederSpec>(&text)
                .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?
        }
        None => {
            let base = if *heavy {
                FeederSpec::heavy(*buses, cli.global.seed)
            } else {
                FeederSpec::default()
            };
            FeederSpec {
                buses: *buses,
                seed: cli.global.seed,
                load_scale: load_scale.unwrap_or(if *heavy {
                    HEAVY_LOAD_SCALE
                } else {
                    base.load_scale
                }),
                area_size: area_size.unwrap_or(base.area_size),
                subarea_size: subarea_size.unwrap_or(base.subarea_size),
                ..base
            }
        }
    };
    let feeder = generate(&spec)?;
    let dir = output_dir(&cli.global)?;
    fs::write(dir.join("network.json"), feeder.network_json())?;
    fs::write(dir.join("devices.json"), feeder.devices_json())?;
    fs::write(dir.join("partition.json"), feeder.partition_json())?;
    write_json(&dir.join("feeder_spec.json"), &spec)?;
    RunManifest::new(cli, argv, &dir).write(&dir)?;
    eprintln!(
        "{} buses, {} flat indices, {} devices, {} areas -> {}",
        feeder.network.bus_count(),
        feeder.network.n_flat(),
        feeder.devices.devices.len(),
        feeder.partition.area_count(),
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Summary {
    engine: EngineKind,
    voltage_model: &'static str,
    status: RunStatus,
    iterations: usize,
    final_objective: f64,
    final_lagrangian: f64,
    max_over_violation: f64,
    max_under_violation: f64,
    residual: f64,
    total_coupling_ops: u64,
    total_coupling_ns: u64,
    total_step_ns: u64,
    /// Median over repeats.
    wall_ns: u64,
    repeat: usize,
    n_flat: usize,
    areas: usize,
    subareas: usize,
}

#[derive(Debug, Serialize)]
struct IndexSetpoint {
    flat_index: usize,
    bus: usize,
    phase: mlopf::Phase,
    device: bool,
    p: f64,
    q: f64,
    v: f64,
    mu_over: f64,
    mu_under: f64,
}

/// Result of one or more identical solves.
struct Timed {
    outcome: RunOutcome,
    median_wall_ns: u64,
    audit: Option<mlopf::coupling::AuditRecord>,
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

#[allow(clippy::too_many_arguments)]
fn timed_solve(
    net: &Arc<Network>,
    sens: Option<Arc<SensitivityMatrices>>,
    prob: &OpfProblem,
    part: &PartitionHierarchy,
    kind: EngineKind,
    args: &GlobalArgs,
    cfg: SolverConfig,
    audit: bool,
) -> CliResult<Timed> {
    let engine = build_engine(kind, net, sens, part, args.threads.max(1))?;
    let mut walls = Vec::new();
    let mut last = None;
    let mut record = None;
    for rep in 0..args.repeat.max(1) {
        let model = voltage_model(args.voltage_model, net, cfg.sweep_refresh);
        let mut solver = Solver::new(prob, engine.as_ref(), model, cfg)?;
        if audit && rep == 0 {
            solver.enable_audit();
        }
        let init = solver.initial_state()?;
        let outcome = solver.run(init)?;
        if rep == 0 {
            record = solver.audit_record().cloned();
        }
        walls.push(outcome.wall_ns);
        last = Some(outcome);
    }
    Ok(Timed {
        outcome: last.expect("at least one run"),
        median_wall_ns: median(walls),
        audit: record,
    })
}

pub fn solve(cli: &Cli, argv: &[String]) -> CliResult<()> {
    let args = &cli.global;
    let net = load_network(args)?;
    let prob = load_problem(args, &net)?;
    let (part, source) = load_partition(args, &net)?;
    let cfg = solver_config(args)?;
    let dir = output_dir(args)?;
    let net = Arc::new(net);
    let kind = EngineKind::from(args.engine);
    let timed = timed_solve(&net, None, &prob, &part, kind, args, cfg, args.audit)?;
    let out = &timed.outcome;

    let mut trace = out.trace.clone();
    if args.omit_timing {
        for r in &mut trace.records {
            r.step_ns = 0;
            r.coupling_ns = 0;
        }
    }
    trace.write_csv(BufWriter::new(fs::File::create(dir.join("trace.csv"))?))?;

    let state = &out.state;
    let setpoints: Vec<IndexSetpoint> = net
        .flat_entries()
        .iter()
        .enumerate()
        .map(|(a, &(bus, phase))| IndexSetpoint {
            flat_index: a,
            bus,
            phase,
            device: prob.device_at(a).is_some(),
            p: state.p[a],
            q: state.q[a],
            v: state.v[a],
            mu_over: state.duals.over[a],
            mu_under: state.duals.under[a],
        })
        .collect();
    write_json(
        &dir.join("setpoints.json"),
        &serde_json::json!({ "iteration": state.iteration, "indices": setpoints }),
    )?;

    let last = out.trace.last().expect("trace holds the initial iterate");
    let summary = Summary {
        engine: kind,
        voltage_model: match args.voltage_model {
            crate::ModelArg::Linear => "linear",
            crate::ModelArg::Sweep => "sweep",
        },
        status: out.status,
        iterations: out.trace.len() - 1,
        final_objective: last.objective,
        final_lagrangian: last.lagrangian,
        max_over_violation: last.max_over_violation,
        max_under_violation: last.max_under_violation,
        residual: out.residual,
        total_coupling_ops: out.trace.total_coupling_ops(),
        total_coupling_ns: out.trace.total_coupling_ns(),
        total_step_ns: out.trace.total_step_ns(),
        wall_ns: timed.median_wall_ns,
        repeat: args.repeat.max(1),
        n_flat: net.n_flat(),
        areas: part.area_count(),
        subareas: part.subarea_count(),
    };
    write_json(&dir.join("summary.json"), &summary)?;

    if let Some(record) = &timed.audit {
        fs::write(dir.join("audit.jsonl"), record.to_jsonl())?;
        write_json(&dir.join("audit_report.json"), &privacy_audit(record))?;
    }

    let mut manifest = RunManifest::new(cli, argv, &dir);
    manifest.solver = Some(cfg);
    manifest.partition_source = Some(source);
    manifest.write(&dir)?;

    println!("{}", serde_json::to_string_pretty(&summary)?);
    if args.require_convergence && out.status != RunStatus::Converged {
        return Err(CliError::not_converged(format!(
            "stopped after {} steps with residual {:e} (tolerance {:e})",
            summary.iterations, out.residual, cfg.tolerance
        )));
    }
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct BenchRow {
    n: usize,
    k: usize,
    engine: String,
    iters: usize,
    wall_ns: u64,
    coupling_ns: u64,
    coupling_ops: u64,
    /// Flat wall time over this engine's wall time.
    flat_time_ratio: Option<f64>,
    /// Flat coupling operations over this engine's.
    flat_op_ratio: Option<f64>,
    status: String,
    error: String,
}

struct BenchCase {
    n: usize,
    k: usize,
    net: Arc<Network>,
    prob: OpfProblem,
    part: PartitionHierarchy,
}

fn bench_case_from_documents(args: &GlobalArgs) -> CliResult<BenchCase> {
    let net = load_network(args)?;
    let prob = load_problem(args, &net)?;
    let (part, _) = load_partition(args, &net)?;
    Ok(BenchCase {
        n: net.n_flat(),
        k: part.area_count(),
        net: Arc::new(net),
        prob,
        part,
    })
}

fn bench_case_generated(n: usize, subareas: usize, seed: u64) -> CliResult<BenchCase> {
    let k = ((n as f64).sqrt().round() as usize).max(1);
    let feeder = balanced_feeder(n, k, subareas, seed)?;
    let prob = feeder.problem()?;
    Ok(BenchCase {
        n,
        k,
        net: Arc::new(feeder.network),
        prob,
        part: feeder.partition,
    })
}

fn bench_rows(
    case: &BenchCase,
    engines: &[EngineArg],
    args: &GlobalArgs,
    cfg: SolverConfig,
) -> Vec<BenchRow> {
    let sens = engines
        .contains(&EngineArg::Flat)
        .then(|| Arc::new(SensitivityMatrices::build(&case.net)));
    let mut rows: Vec<BenchRow> = engines
        .iter()
        .map(|&e| {
            let kind = EngineKind::from(e);
            let mut row = BenchRow {
                n: case.n,
                k: case.k,
                engine: kind.name().into(),
                ..BenchRow::default()
            };
            match timed_solve(
                &case.net,
                sens.clone(),
                &case.prob,
                &case.part,
                kind,
                args,
                cfg,
                false,
            ) {
                Ok(t) => {
                    row.iters = t.outcome.trace.len() - 1;
                    row.wall_ns = t.median_wall_ns;
                    row.coupling_ns = t.outcome.trace.total_coupling_ns();
                    row.coupling_ops = t.outcome.trace.total_coupling_ops();
                    row.status = serde_json::to_value(t.outcome.status)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_owned))
                        .unwrap_or_default();
                }
                Err(err) => {
                    row.status = "error".into();
                    row.error = err.to_string();
                }
            }
            row
        })
        .collect();
    let flat = rows
        .iter()
        .find(|r| r.engine == "flat" && r.error.is_empty())
        .map(|r| (r.wall_ns, r.coupling_ops));
    if let Some((wall, ops)) = flat {
        for r in rows.iter_mut().filter(|r| r.error.is_empty()) {
            r.flat_time_ratio = Some(wall as f64 / r.wall_ns.max(1) as f64);
            r.flat_op_ratio = Some(ops as f64 / r.coupling_ops.max(1) as f64);
        }
    }
    rows
}

fn aligned_table(rows: &[BenchRow]) -> String {
    let ratio = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
    let header = [
        "N",
        "K",
        "engine",
        "iters",
        "wall_ms",
        "coupling_ms",
        "coupling_ops",
        "flat/engine time",
        "flat/engine ops",
        "status",
    ];
    let body: Vec<[String; 10]> = rows
        .iter()
        .map(|r| {
            [
                r.n.to_string(),
                r.k.to_string(),
                r.engine.clone(),
                r.iters.to_string(),
                format!("{:.3}", r.wall_ns as f64 / 1e6),
                format!("{:.3}", r.coupling_ns as f64 / 1e6),
                r.coupling_ops.to_string(),
                ratio(r.flat_time_ratio),
                ratio(r.flat_op_ratio),
                r.status.clone(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    for r in rows.iter().filter(|r| !r.error.is_empty()) {
        let what = if r.engine.is_empty() {
            "feeder"
        } else {
            r.engine.as_str()
        };
        out.push_str(&format!("N={} {what}: {}\n", r.n, r.error));
    }
    out
}

pub fn bench(
    cli: &Cli,
    argv: &[String],
    sizes: &[usize],
    subareas: usize,
    engines: &[EngineArg],
) -> CliResult<()> {
    let args = &cli.global;
    let mut cfg = solver_config(args)?;
    if args.tolerance.is_none() {
        cfg.tolerance = 0.0;
    }
    let dir = output_dir(args)?;
    if engines.is_empty() {
        return Err(CliError::validation(
            "--engines must name at least one engine",
        ));
    }
    let mut rows = Vec::new();
    if args.network.is_some() {
        let case = bench_case_from_documents(args)?;
        rows.extend(bench_rows(&case, engines, args, cfg));
    } else {
        for &n in sizes {
            match bench_case_generated(n, subareas, args.seed.wrapping_add(n as u64)) {
                Ok(case) => rows.extend(bench_rows(&case, engines, args, cfg)),
                Err(err) => rows.push(BenchRow {
                    n,
                    status: "error".into(),
                    error: err.to_string(),
                    ..BenchRow::default()
                }),
            }
        }
    }
    let mut csv = csv::Writer::from_path(dir.join("bench.csv"))?;
    for r in &rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    let table = aligned_table(&rows);
    fs::write(dir.join("bench.txt"), &table)?;
    let mut manifest = RunManifest::new(cli, argv, &dir);
    manifest.solver = Some(cfg);
    manifest.write(&dir)?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct CompareRow {
    scenario: usize,
    scale: f64,
    file: String,
    max_abs_diff: Option<f64>,
    rms_diff: Option<f64>,
    sweeps: Option<usize>,
    mismatch: Option<f64>,
    error: String,
}

pub fn compare(cli: &Cli, argv: &[String], scales: &[f64]) -> CliResult<()> {
    let args = &cli.global;
    let net = load_network(args)?;
    let prob = load_problem(args, &net)?;
    let dir = output_dir(args)?;
    let sens = SensitivityMatrices::build(&net);
    let (p0, q0) = prob.preferred();
    let mut summary = csv::Writer::from_path(dir.join("compare_summary.csv"))?;
    for (i, &scale) in scales.iter().enumerate() {
        let file = format!("compare_{i}.csv");
        let row = match compare_models(&net, &sens, &(&p0 * scale), &(&q0 * scale)) {
            Ok(cmp) => {
                let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
                cmp.write_csv(&mut w)?;
                w.flush()?;
                CompareRow {
                    scenario: i,
                    scale,
                    file,
                    max_abs_diff: Some(cmp.max_abs_diff),
                    rms_diff: Some(cmp.rms_diff),
                    sweeps: Some(cmp.sweeps),
                    mismatch: Some(cmp.mismatch),
                    error: String::new(),
                }
            }
            Err(err) => CompareRow {
                scenario: i,
                scale,
                file: String::new(),
                max_abs_diff: None,
                rms_diff: None,
                sweeps: None,
                mismatch: None,
                error: err.to_string(),
            },
        };
        let shown = row.max_abs_diff.map_or_else(
            || format!("error: {}", row.error),
            |d| format!("max |diff| {d:.3e}"),
        );
        eprintln!("scenario {i} (scale {scale}): {shown}");
        summary.serialize(&row)?;
    }
    summary.flush()?;
    RunManifest::new(cli, argv, &dir).write(&dir)?;
    Ok(())
}
