// SPDX-License-Identifier: Apache-2.0

//! Implementation of the `qcclosure` subcommands.
//!
//! A run directory holds `run.csv`, `manifest.json`, `snapshots/` and, when
//! requested, `kernel_tables.json`. A scan directory holds one run directory
//! per value plus `index.csv`. The formats are described in `docs/output.md`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use qcclosure_core::diagnostics::CsvWriter;
use qcclosure_core::dynamics::Closure;
use qcclosure_core::integrate::{run_with_observer, RunObserver};
use qcclosure_core::kernel::{compute_i_for, compute_j, KernelTableDump};
use qcclosure_core::{build_state, ClosureState, DiagnosticsRecord, ModelKind, QuantumPart, RunConfig};
use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] qcclosure_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "config",
        }
    }

    /// 2 for configuration problems, 3 for geometry and divergence, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "config" => 2,
            "geometry" | "divergence" => 3,
            _ => 1,
        }
    }

    /// Simulation time at which the failure happened, if any.
    pub fn time(&self) -> Option<f64> {
        match self {
            CliError::Core(qcclosure_core::Error::AtTime { time, .. }) => Some(*time),
            CliError::Core(qcclosure_core::Error::Divergence { time, .. }) => Some(*time),
            _ => None,
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            exit_code: u8,
            #[serde(skip_serializing_if = "Option::is_none")]
            time: Option<f64>,
            message: String,
        }
        serde_json::to_string(&Line {
            error: self.kind(),
            exit_code: self.exit_code(),
            time: self.time(),
            message: self.to_string(),
        })
        .expect("error line serializes")
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Command-line settings layered over the config file, in application order.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<ModelKind>,
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub deterministic: bool,
    /// `KEY=VALUE` assignments, applied last.
    pub set: Vec<String>,
}

impl Overrides {
    pub fn assignments(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(m) = self.model {
            out.push(format!("model=\"{}\"", m.name()));
        }
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        if let Some(dt) = self.dt {
            out.push(format!("dt={dt:e}"));
        }
        if self.deterministic {
            out.push("deterministic=true".into());
        }
        out.extend(self.set.iter().cloned());
        out
    }
}

pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| qcclosure_core::Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    Ok(RunConfig::from_toml_with_overrides(&text, overrides)?)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    model: &'static str,
    seed: u64,
    deterministic: bool,
    config_path: String,
    overrides: &'a [String],
    n_steps: usize,
    last_dt: f64,
    /// Resolved configuration, equivalent to the TOML in `config_toml`.
    config: &'a RunConfig,
    config_toml: String,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    step: usize,
    t: f64,
    model: &'static str,
    hbar: f64,
    energy: f64,
    purity: f64,
    weights: &'a [f64],
    /// [q, p] per trajectory
    points: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    states: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    density: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    operator_samples: Vec<OperatorSample>,
}

#[derive(Serialize)]
struct OperatorSample {
    /// [q, p]
    point: [f64; 2],
    /// Row-major `[re, im]` entries.
    matrix: Vec<Vec<[f64; 2]>>,
}

fn complex_rows(m: &qcclosure_core::CMatrix) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| [m[(r, c)].re, m[(r, c)].im]).collect())
        .collect()
}

fn snapshot<'a>(
    state: &'a ClosureState,
    model: ModelKind,
    record: &DiagnosticsRecord,
    sample_points: &[[f64; 2]],
) -> Snapshot<'a> {
    let (states, density) = match &state.quantum {
        QuantumPart::PerTrajectory(s) => (
            Some(
                s.iter()
                    .map(|psi| psi.vector().iter().map(|z| [z.re, z.im]).collect())
                    .collect(),
            ),
            None,
        ),
        QuantumPart::Shared(rho) => (None, Some(complex_rows(rho.matrix()))),
    };
    let operator_samples = match &record.operator_samples {
        Some(ops) => sample_points
            .iter()
            .zip(ops)
            .map(|(point, m)| OperatorSample {
                point: *point,
                matrix: complex_rows(m),
            })
            .collect(),
        None => Vec::new(),
    };
    Snapshot {
        step: record.step,
        t: record.t,
        model: model.name(),
        hbar: state.hbar,
        energy: record.energy,
        purity: record.purity,
        weights: state.weights.as_slice(),
        points: state.points.iter().map(|z| [z.q, z.p]).collect(),
        states,
        density,
        operator_samples,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(format!("cannot create {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(|e| CliError::io(format!("cannot write {}", path.display()), e.into()))?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

struct RunFiles {
    csv: CsvWriter<BufWriter<File>>,
    snapshots: PathBuf,
    model: ModelKind,
    sample_points: Vec<[f64; 2]>,
    first: Option<DiagnosticsRecord>,
    last: Option<DiagnosticsRecord>,
}

impl RunObserver for RunFiles {
    fn on_record(&mut self, record: &DiagnosticsRecord, _state: &ClosureState) -> qcclosure_core::Result<()> {
        self.csv.write(record)?;
        if self.first.is_none() {
            self.first = Some(record.clone());
        }
        self.last = Some(record.clone());
        Ok(())
    }

    fn on_snapshot(
        &mut self,
        step: usize,
        _t: f64,
        state: &ClosureState,
        record: &DiagnosticsRecord,
    ) -> qcclosure_core::Result<()> {
        let path = self.snapshots.join(format!("step_{step:08}.json"));
        write_json(&path, &snapshot(state, self.model, record, &self.sample_points)).map_err(|e| match e {
            CliError::Io { source, .. } => qcclosure_core::Error::Io(source),
            CliError::Core(e) => e,
            CliError::Usage(m) => qcclosure_core::Error::Config(m),
        })
    }
}

/// Endpoint summary of one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub model: ModelKind,
    pub n_trajectories: usize,
    pub t_final: f64,
    pub energy: f64,
    pub relative_energy_drift: f64,
    pub purity: f64,
    pub min_eigenvalue: f64,
    pub max_norm_deviation: f64,
}

/// `qcclosure run`: integrates one configuration and writes a run directory.
pub fn cmd_run(config_path: &Path, output_dir: &Path, overrides: &Overrides) -> CliResult<RunSummary> {
    let assignments = overrides.assignments();
    let cfg = load_config(config_path, &assignments)?;
    run_config(&cfg, config_path, &assignments, output_dir)
}

fn run_config(cfg: &RunConfig, config_path: &Path, assignments: &[String], output_dir: &Path) -> CliResult<RunSummary> {
    let snapshots = output_dir.join("snapshots");
    fs::create_dir_all(&snapshots).map_err(|e| CliError::io(format!("cannot create {}", snapshots.display()), e))?;

    let (n_steps, last_dt) = cfg.step_plan();
    write_json(
        &output_dir.join("manifest.json"),
        &Manifest {
            tool: "qcclosure",
            version: VERSION,
            model: cfg.model.name(),
            seed: cfg.seed,
            deterministic: cfg.deterministic,
            config_path: config_path.display().to_string(),
            overrides: assignments,
            n_steps,
            last_dt,
            config: cfg,
            config_toml: cfg.to_toml_string(),
        },
    )?;

    let closure = Closure::from_config(cfg)?;
    let state = build_state(cfg)?;
    let dump_tables = cfg.output.dump_kernel_tables && cfg.model == ModelKind::Regularized;
    let initial_tables = if dump_tables {
        Some(table_dump(&closure, &state)?)
    } else {
        None
    };

    let csv_path = output_dir.join("run.csv");
    let file = File::create(&csv_path).map_err(|e| CliError::io(format!("cannot create {}", csv_path.display()), e))?;
    let csv = CsvWriter::new(BufWriter::new(file), state.n_trajectories(), cfg.model)
        .map_err(|e| CliError::io("cannot write run.csv header", e))?;
    let mut files = RunFiles {
        csv,
        snapshots,
        model: cfg.model,
        sample_points: cfg.output.operator_samples.clone(),
        first: None,
        last: None,
    };
    info!(
        "{} run: {} trajectories, {} steps",
        cfg.model.name(),
        state.n_trajectories(),
        n_steps
    );
    let result = run_with_observer(cfg, &closure, state, &mut files);
    files.csv.flush().map_err(|e| CliError::io("cannot flush run.csv", e))?;
    let (final_state, _) = result?;

    if let Some(initial) = initial_tables {
        #[derive(Serialize)]
        struct Tables {
            initial: KernelTableDump,
            #[serde(rename = "final")]
            last: KernelTableDump,
        }
        let last = table_dump(&closure, &final_state)?;
        write_json(&output_dir.join("kernel_tables.json"), &Tables { initial, last })?;
    }

    let first = files.first.expect("a run records its initial state");
    let last = files.last.expect("a run records its final state");
    Ok(RunSummary {
        output_dir: output_dir.to_path_buf(),
        model: cfg.model,
        n_trajectories: final_state.n_trajectories(),
        t_final: last.t,
        energy: last.energy,
        relative_energy_drift: if first.energy != 0.0 {
            (last.energy - first.energy) / first.energy.abs()
        } else {
            last.energy - first.energy
        },
        purity: last.purity,
        min_eigenvalue: last.min_eigenvalue,
        max_norm_deviation: last.max_norm_deviation(),
    })
}

fn table_dump(closure: &Closure, state: &ClosureState) -> CliResult<KernelTableDump> {
    let setup = closure
        .kernel
        .as_ref()
        .ok_or_else(|| CliError::Usage("kernel tables need a regularized run".into()))?;
    let i = compute_i_for(state, &closure.hamiltonian, setup)?;
    let j = compute_j(&state.points, &state.weights, setup)?;
    Ok(KernelTableDump::new(setup, &i, &j))
}

/// Parameter swept by `qcclosure scan`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSpec {
    pub parameter: String,
    pub values: Vec<f64>,
}

impl ScanSpec {
    pub const PARAMETERS: [&'static str; 3] = ["alpha", "N", "dt"];

    pub fn new(parameter: &str, values: Vec<f64>) -> CliResult<Self> {
        if !Self::PARAMETERS.contains(&parameter) {
            return Err(CliError::Usage(format!(
                "scan parameter '{parameter}' must be one of {}",
                Self::PARAMETERS.join(", ")
            )));
        }
        if values.is_empty() {
            return Err(CliError::Usage("scan needs at least one value".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(CliError::Usage(format!("scan value {v} must be positive")));
        }
        if parameter == "N" {
            if let Some(v) = values.iter().find(|v| v.fract() != 0.0) {
                return Err(CliError::Usage(format!("scan value {v} for N must be an integer")));
            }
        }
        Ok(Self {
            parameter: parameter.to_string(),
            values,
        })
    }

    /// `name=v1,v2,...`
    pub fn parse(text: &str) -> CliResult<Self> {
        let (name, list) = text
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("scan spec '{text}' is not NAME=V1,V2,...")))?;
        let values = list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("scan value '{v}' is not a number")))
            })
            .collect::<CliResult<Vec<f64>>>()?;
        Self::new(name.trim(), values)
    }

    fn assignment(&self, value: f64) -> String {
        if self.parameter == "N" {
            format!("N={}", value as u64)
        } else {
            format!("{}={value:e}", self.parameter)
        }
    }

    fn directory(&self, index: usize, value: f64) -> String {
        format!("{index:03}_{}_{value}", self.parameter)
    }
}

/// Outcome of one scan value.
#[derive(Debug)]
pub struct ScanEntry {
    pub value: f64,
    pub directory: PathBuf,
    pub result: CliResult<RunSummary>,
}

const INDEX_HEADER: &str = "parameter,value,directory,status,exit_code,t_final,energy,relative_energy_drift,purity,min_eigenvalue,max_norm_deviation,error";

/// `qcclosure scan`: one run directory per value, plus `index.csv`.
/// A failing value is recorded in the index and does not stop the scan.
pub fn cmd_scan(
    config_path: &Path,
    spec: &ScanSpec,
    output_dir: &Path,
    overrides: &Overrides,
) -> CliResult<Vec<ScanEntry>> {
    fs::create_dir_all(output_dir).map_err(|e| CliError::io(format!("cannot create {}", output_dir.display()), e))?;
    let base = overrides.assignments();
    let mut entries = Vec::with_capacity(spec.values.len());
    for (index, &value) in spec.values.iter().enumerate() {
        let directory = output_dir.join(spec.directory(index, value));
        let mut assignments = base.clone();
        assignments.push(spec.assignment(value));
        info!("scan {}={value} -> {}", spec.parameter, directory.display());
        let result = load_config(config_path, &assignments)
            .and_then(|cfg| run_config(&cfg, config_path, &assignments, &directory));
        if let Err(e) = &result {
            log::warn!("scan {}={value} failed: {e}", spec.parameter);
        }
        entries.push(ScanEntry {
            value,
            directory,
            result,
        });
    }
    write_index(&output_dir.join("index.csv"), spec, &entries)?;
    Ok(entries)
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

fn write_index(path: &Path, spec: &ScanSpec, entries: &[ScanEntry]) -> CliResult<()> {
    let mut out = String::from(INDEX_HEADER);
    out.push('\n');
    for e in entries {
        let dir = e
            .directory
            .file_name()
            .map(|d| d.to_string_lossy().into_owned())
            .unwrap_or_default();
        let row = match &e.result {
            Ok(s) => format!(
                "{},{},{},ok,0,{},{},{},{},{},{},",
                spec.parameter,
                e.value,
                csv_field(&dir),
                s.t_final,
                s.energy,
                s.relative_energy_drift,
                s.purity,
                s.min_eigenvalue,
                s.max_norm_deviation
            ),
            Err(err) => format!(
                "{},{},{},error,{},,,,,,,{}",
                spec.parameter,
                e.value,
                csv_field(&dir),
                err.exit_code(),
                csv_field(&err.to_string())
            ),
        };
        out.push_str(&row);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}
