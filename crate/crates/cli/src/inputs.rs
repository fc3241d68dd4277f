use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mlopf::opf::DeviceDocument;
use mlopf::partition::{auto_partition, validate_partition};
use mlopf::powerflow::DEFAULT_MAX_SWEEPS;
use mlopf::{Network, OpfProblem, PartitionHierarchy, SolverConfig, VoltageModel};

use crate::error::{CliError, CliResult};
use crate::{GlobalArgs, ModelArg};

/// Sweep tolerance used inside the solver loop.
pub const SOLVER_SWEEP_TOLERANCE: f64 = 1e-10;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::validation(format!("--{flag} is required for this command")))
}

pub fn load_network(args: &GlobalArgs) -> CliResult<Network> {
    let path = required(&args.network, "network")?;
    Network::from_json(&read(path)?).map_err(|e| CliError::input(path, e))
}

pub fn load_devices(args: &GlobalArgs) -> CliResult<DeviceDocument> {
    let path = required(&args.devices, "devices")?;
    serde_json::from_str(&read(path)?).map_err(|e| CliError::input(path, e.into()))
}

pub fn load_problem(args: &GlobalArgs, net: &Network) -> CliResult<OpfProblem> {
    let path = required(&args.devices, "devices")?;
    OpfProblem::from_json(net, &read(path)?).map_err(|e| CliError::input(path, e))
}

/// Default area target: an eighth of the feeder, at least two buses.
pub fn default_area_size(net: &Network) -> usize {
    (net.bus_count() / 8).max(2)
}

pub fn default_subarea_size(area_size: usize) -> usize {
    (area_size / 3).max(1)
}

/// The partition from `--partition`, or an automatic one. The second value
/// describes where it came from.
pub fn load_partition(args: &GlobalArgs, net: &Network) -> CliResult<(PartitionHierarchy, String)> {
    match &args.partition {
        Some(path) => {
            let part = PartitionHierarchy::from_json(net, &read(path)?)
                .map_err(|e| CliError::input(path, e))?;
            let report = validate_partition(net, &part);
            if !report.is_valid() {
                return Err(CliError::validation(format!(
                    "{}: {}",
                    path.display(),
                    report.to_string().trim_end()
                )));
            }
            Ok((part, path.display().to_string()))
        }
        None => {
            let area = default_area_size(net);
            let sub = default_subarea_size(area);
            Ok((
                auto_partition(net, area, sub),
                format!("auto(area_size={area}, subarea_size={sub})"),
            ))
        }
    }
}

pub fn solver_config(args: &GlobalArgs) -> CliResult<SolverConfig> {
    let base = SolverConfig::default();
    let cfg = SolverConfig {
        step_primal: args.step_primal.unwrap_or(base.step_primal),
        step_dual: args.step_dual.unwrap_or(base.step_dual),
        eta: args.eta.unwrap_or(base.eta),
        max_iters: args.iters.unwrap_or(base.max_iters),
        tolerance: args.tolerance.unwrap_or(base.tolerance),
        sweep_refresh: args.sweep_refresh.unwrap_or(base.sweep_refresh),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn voltage_model(arg: ModelArg, net: &Arc<Network>, refresh: usize) -> VoltageModel {
    match arg {
        ModelArg::Linear => VoltageModel::LinearTree(net.clone()),
        ModelArg::Sweep => VoltageModel::Sweep {
            net: net.clone(),
            tol: SOLVER_SWEEP_TOLERANCE,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            refresh: refresh.max(1),
        },
    }
}

pub fn output_dir(args: &GlobalArgs) -> CliResult<PathBuf> {
    let dir = args
        .out
        .clone()
        .ok_or_else(|| CliError::validation("--out is required for this command"))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}
