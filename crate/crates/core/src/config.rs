// SPDX-License-Identifier: Apache-2.0

//! Run configuration, read from TOML. The schema is documented in `docs/config.md`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Mollifier, QuadratureGrid};
use crate::linalg::{CMatrix, CVector};
use crate::model::{HamiltonianTerm, HybridHamiltonian, ModelKind, PureState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hbar")]
    pub hbar: f64,
    /// Switches the ħ-coupling between trajectories of the regularized closure.
    #[serde(default = "default_true")]
    pub coupling_hbar_terms: bool,
    /// Forces single-threaded, fixed-order reductions.
    #[serde(default)]
    pub deterministic: bool,
    pub time: TimeConfig,
    pub ensemble: EnsembleConfig,
    pub hamiltonian: HamiltonianConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mollifier: Option<MollifierConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub kernel: KernelOptions,
    #[serde(default)]
    pub output: OutputOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_final: f64,
    /// Diagnostics are recorded every `output_every` steps (and at the final time).
    #[serde(default = "default_one")]
    pub output_every: usize,
    /// Full-state JSON snapshots every `snapshot_every` steps; 0 writes only the final state.
    #[serde(default)]
    pub snapshot_every: usize,
}

/// A complex amplitude or matrix entry written as `[re, im]`.
pub type ComplexPair = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_trajectories: usize,
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Common initial quantum state for every trajectory (normalized on load).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<ComplexPair>>,
    /// One initial quantum state per trajectory (normalized on load).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_states: Option<Vec<Vec<ComplexPair>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    pub dim: usize,
    pub terms: Vec<TermConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub coefficient: f64,
    #[serde(default)]
    pub q_power: u32,
    #[serde(default)]
    pub p_power: u32,
    /// Row-major list of `dim * dim` entries.
    pub matrix: Vec<ComplexPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifierConfig {
    /// Standard deviation of the Gaussian kernel.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub q_range: [f64; 2],
    pub p_range: [f64; 2],
    pub nodes: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelOptions {
    /// Drop kernel contributions beyond `cutoff_radius` widths from a node.
    #[serde(default = "default_true")]
    pub cutoff: bool,
    #[serde(default = "default_cutoff_radius")]
    pub cutoff_radius: f64,
    /// Minimum distance, in kernel widths, between any trajectory and the box edge.
    #[serde(default = "default_margin")]
    pub min_margin: f64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            cutoff: true,
            cutoff_radius: default_cutoff_radius(),
            min_margin: default_margin(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputOptions {
    /// Write the initial I_ab / J_ab tables to `kernel_tables.json`.
    #[serde(default)]
    pub dump_kernel_tables: bool,
    /// Phase-space points at which the smooth part of the hybrid operator is sampled in snapshots.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub operator_samples: Vec<[f64; 2]>,
}

fn default_hbar() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}
fn default_cutoff_radius() -> f64 {
    12.0
}
fn default_margin() -> f64 {
    6.0
}

/// Short names accepted by `--set` and parameter scans.
const ALIASES: &[(&str, &str)] = &[
    ("alpha", "mollifier.alpha"),
    ("N", "ensemble.n_trajectories"),
    ("n_trajectories", "ensemble.n_trajectories"),
    ("dt", "time.dt"),
    ("t_final", "time.t_final"),
    ("output_every", "time.output_every"),
];

pub fn resolve_alias(key: &str) -> &str {
    ALIASES.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).unwrap_or(key)
}

/// Parses the right-hand side of a `KEY=VALUE` override.
fn parse_override_value(raw: &str) -> toml::Value {
    match raw.trim() {
        "on" | "true" | "yes" => return toml::Value::Boolean(true),
        "off" | "false" | "no" => return toml::Value::Boolean(false),
        _ => {}
    }
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value` to a parsed TOML document, creating tables as needed.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    let path: Vec<&str> = resolve_alias(key.trim()).split('.').collect();
    let (last, parents) = path.split_last().expect("split yields at least one item");
    let mut table = doc;
    for part in parents {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{assignment}': '{part}' is not a table")))?;
    }
    table.insert(last.to_string(), parse_override_value(raw));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides::<&str>(text, &[])
    }

    pub fn from_toml_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o.as_ref())?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.time.dt.is_finite() && self.time.dt > 0.0) {
            return bad(format!("time.dt = {} must be positive", self.time.dt));
        }
        if !(self.time.t_final.is_finite() && self.time.t_final > 0.0) {
            return bad(format!("time.t_final = {} must be positive", self.time.t_final));
        }
        if self.time.output_every == 0 {
            return bad("time.output_every must be at least 1".into());
        }
        if !(self.hbar.is_finite() && self.hbar > 0.0) {
            return bad(format!("hbar = {} must be positive", self.hbar));
        }
        let ens = &self.ensemble;
        if ens.n_trajectories == 0 {
            return bad("ensemble.n_trajectories must be at least 1".into());
        }
        if let Some(w) = &ens.weights {
            if w.len() != ens.n_trajectories {
                return bad(format!("{} weights for {} trajectories", w.len(), ens.n_trajectories));
            }
        }
        match (&ens.initial_state, &ens.initial_states) {
            (Some(_), Some(_)) => return bad("give either initial_state or initial_states, not both".into()),
            (None, None) => return bad("ensemble needs initial_state or initial_states".into()),
            (Some(s), None) if s.len() != self.hamiltonian.dim => {
                return bad(format!(
                    "initial_state has {} entries, dim is {}",
                    s.len(),
                    self.hamiltonian.dim
                ))
            }
            (None, Some(list)) => {
                if list.len() != ens.n_trajectories {
                    return bad(format!(
                        "{} initial_states for {} trajectories",
                        list.len(),
                        ens.n_trajectories
                    ));
                }
                if list.iter().any(|s| s.len() != self.hamiltonian.dim) {
                    return bad("initial_states entries must have dim amplitudes".into());
                }
            }
            _ => {}
        }
        if self.hamiltonian.dim == 0 {
            return bad("hamiltonian.dim must be at least 1".into());
        }
        if self.hamiltonian.terms.is_empty() {
            return bad("hamiltonian needs at least one term".into());
        }
        for (k, t) in self.hamiltonian.terms.iter().enumerate() {
            if t.matrix.len() != self.hamiltonian.dim * self.hamiltonian.dim {
                return bad(format!(
                    "term {k}: matrix needs {} entries",
                    self.hamiltonian.dim.pow(2)
                ));
            }
        }
        if let Some(m) = &self.mollifier {
            if !(m.alpha.is_finite() && m.alpha > 0.0) {
                return bad(format!("mollifier.alpha = {} must be positive", m.alpha));
            }
        }
        if let Some(g) = &self.grid {
            if !(g.q_range[0] < g.q_range[1] && g.p_range[0] < g.p_range[1]) {
                return bad("grid ranges must be ordered (min < max)".into());
            }
            if g.nodes[0] < 8 || g.nodes[1] < 8 {
                return bad("grid needs at least 8 nodes per axis".into());
            }
        }
        if self.model == ModelKind::Regularized {
            if self.mollifier.is_none() {
                return bad("regularized model needs [mollifier] alpha".into());
            }
            if self.grid.is_none() {
                return bad("regularized model needs a [grid] section".into());
            }
        }
        if !(self.kernel.cutoff_radius > 0.0 && self.kernel.min_margin >= 0.0) {
            return bad("kernel cutoff_radius and min_margin must be positive".into());
        }
        Ok(())
    }

    pub fn hamiltonian(&self) -> Result<HybridHamiltonian> {
        let n = self.hamiltonian.dim;
        let terms = self
            .hamiltonian
            .terms
            .iter()
            .map(|t| {
                let entries: Vec<Complex64> = t.matrix.iter().map(|[re, im]| Complex64::new(*re, *im)).collect();
                HamiltonianTerm::new(
                    t.coefficient,
                    t.q_power,
                    t.p_power,
                    CMatrix::from_row_slice(n, n, &entries),
                )
            })
            .collect();
        HybridHamiltonian::new(terms)
    }

    pub fn mollifier(&self) -> Result<Mollifier> {
        let m = self
            .mollifier
            .as_ref()
            .ok_or_else(|| Error::Config("missing [mollifier] section".into()))?;
        Mollifier::new(m.alpha)
    }

    pub fn grid(&self) -> Result<QuadratureGrid> {
        let g = self
            .grid
            .as_ref()
            .ok_or_else(|| Error::Config("missing [grid] section".into()))?;
        QuadratureGrid::new(g.q_range, g.p_range, g.nodes)
    }

    pub fn initial_states(&self) -> Result<Vec<PureState>> {
        let to_state = |amps: &[ComplexPair]| {
            let v = CVector::from_iterator(amps.len(), amps.iter().map(|[re, im]| Complex64::new(*re, *im)));
            PureState::normalized(v).map_err(|e| Error::Config(format!("initial state: {e}")))
        };
        match (&self.ensemble.initial_state, &self.ensemble.initial_states) {
            (Some(s), None) => Ok(vec![to_state(s)?; self.ensemble.n_trajectories]),
            (None, Some(list)) => list.iter().map(|s| to_state(s)).collect(),
            _ => Err(Error::Config(
                "ensemble needs exactly one of initial_state / initial_states".into(),
            )),
        }
    }

    /// Number of RK4 steps and the length of the last (possibly shorter) step.
    pub fn step_plan(&self) -> (usize, f64) {
        let dt = self.time.dt;
        let full = (self.time.t_final / dt).floor();
        let rest = self.time.t_final - full * dt;
        // A remainder below rounding noise is absorbed into the last full step.
        if rest <= 1e-9 * dt {
            (full as usize, dt + rest)
        } else {
            (full as usize + 1, rest)
        }
    }
}
