//! Experiment configuration files.
//!
//! A config is TOML with the sections `[grid]`, `[params]`, `[bbar]` and
//! `[experiment]`. Every key is optional; unknown keys are rejected.
//! Environment variables `DH_<SECTION>__<KEY>=<toml value>` override
//! single keys, e.g. `DH_EXPERIMENT__ENSEMBLE=8`.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;
use twoscale::environment::{BbarModel, BbarSpec, SpectralParams};
use twoscale::experiment::{ExperimentConfig, SimResolution};
use twoscale::grid::SpaceTimeGrid;
use twoscale::pde_solver::Preset;

pub const ENV_PREFIX: &str = "DH_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("bad override {key}: {message}")]
    Override { key: String, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub d: usize,
    pub n_x: usize,
    pub n_t: usize,
    pub length: f64,
    pub period: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { d: 2, n_x: 32, n_t: 16, length: 1.0, period: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BbarKind {
    #[default]
    Zero,
    Periodic,
    Ou,
    RwInterp,
}

/// Drift model with its single shape parameter. `amplitude` defaults to 1
/// for non-zero models.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BbarSection {
    pub model: BbarKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_list: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<SimResolution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_list: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrector_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbar_dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_resolution: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes: Option<Vec<Preset>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub grid: GridSection,
    pub params: SpectralParams,
    pub bbar: BbarSection,
    pub experiment: ExperimentSection,
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation(msg.into())
}

impl BbarSection {
    fn spec(&self) -> Result<BbarSpec, ConfigError> {
        let extras = [("period", self.period, BbarKind::Periodic), ("tau", self.tau, BbarKind::Ou), ("block", self.block, BbarKind::RwInterp)];
        for (name, value, owner) in extras {
            if value.is_some() && self.model != owner {
                return Err(invalid(format!("bbar.{name} does not apply to model {:?}", self.model)));
            }
        }
        let need = |name: &str, v: Option<f64>| v.ok_or_else(|| invalid(format!("bbar model needs {name}")));
        let model = match self.model {
            BbarKind::Zero => BbarModel::Zero,
            BbarKind::Periodic => BbarModel::Periodic { period: need("period", self.period)? },
            BbarKind::Ou => BbarModel::Ou { tau: need("tau", self.tau)? },
            BbarKind::RwInterp => BbarModel::RwInterp { block: need("block", self.block)? },
        };
        let default_amp = if self.model == BbarKind::Zero { 0.0 } else { 1.0 };
        Ok(BbarSpec { model, amplitude: self.amplitude.unwrap_or(default_amp) })
    }

    fn from_spec(spec: &BbarSpec) -> Self {
        let mut out = Self { amplitude: Some(spec.amplitude), ..Self::default() };
        match spec.model {
            BbarModel::Zero => out.model = BbarKind::Zero,
            BbarModel::Periodic { period } => (out.model, out.period) = (BbarKind::Periodic, Some(period)),
            BbarModel::Ou { tau } => (out.model, out.tau) = (BbarKind::Ou, Some(tau)),
            BbarModel::RwInterp { block } => (out.model, out.block) = (BbarKind::RwInterp, Some(block)),
        }
        out
    }
}

impl ConfigFile {
    /// Fill defaults and validate.
    pub fn into_config(self) -> Result<ExperimentConfig, ConfigError> {
        let g = self.grid;
        let grid = SpaceTimeGrid { d: g.d, n_x: g.n_x, n_t: g.n_t, length: g.length, period: g.period };
        let mut c = ExperimentConfig::new(grid, self.params, self.bbar.spec()?);
        let e = self.experiment;
        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(v) = e.$field { c.$field = v; } )* };
        }
        take!(
            eps_list, ensemble, seed, sim_length, resolution, initial, horizon, dt_max, dt_fraction, record_every,
            delta_list, corrector_tol, bbar_dt, limit_samples, permutations, probe_resolution
        );
        c.source = e.source;
        c.probes = e.probes;
        if c.seed > i64::MAX as u64 {
            return Err(invalid("seed must fit in a signed 64-bit integer"));
        }
        c.validate().map_err(|err| invalid(err.to_string()))?;
        Ok(c)
    }

    /// The fully explicit file for a config.
    pub fn from_config(c: &ExperimentConfig) -> Self {
        let g = c.grid;
        Self {
            grid: GridSection { d: g.d, n_x: g.n_x, n_t: g.n_t, length: g.length, period: g.period },
            params: c.params,
            bbar: BbarSection::from_spec(&c.bbar),
            experiment: ExperimentSection {
                eps_list: Some(c.eps_list.clone()),
                ensemble: Some(c.ensemble),
                seed: Some(c.seed),
                sim_length: Some(c.sim_length),
                resolution: Some(c.resolution),
                initial: Some(c.initial.clone()),
                source: c.source.clone(),
                horizon: Some(c.horizon),
                dt_max: Some(c.dt_max),
                dt_fraction: Some(c.dt_fraction),
                record_every: Some(c.record_every),
                delta_list: Some(c.delta_list.clone()),
                corrector_tol: Some(c.corrector_tol),
                bbar_dt: Some(c.bbar_dt),
                limit_samples: Some(c.limit_samples),
                permutations: Some(c.permutations),
                probe_resolution: Some(c.probe_resolution),
                probes: c.probes.clone(),
            },
        }
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, column)
}

fn parse_error(text: &str, err: toml::de::Error) -> ConfigError {
    let (line, column) = err.span().map_or((0, 0), |s| line_column(text, s.start));
    ConfigError::Parse { line, column, message: err.message().to_string() }
}

/// Split `DH_SECTION__KEY` into (section, key). `BIG_LAMBDA` addresses `Lambda`.
fn override_target(var: &str) -> Option<(String, String)> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    let (section, key) = rest.split_once("__")?;
    let key = key.to_ascii_lowercase();
    let key = if key == "big_lambda" { "Lambda".to_string() } else { key };
    Some((section.to_ascii_lowercase(), key))
}

fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Parse config text, applying `DH_` overrides given as (variable, value).
pub fn parse_config_str(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let relevant: Vec<_> = overrides.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    let file: ConfigFile = if relevant.is_empty() {
        toml::from_str(text).map_err(|e| parse_error(text, e))?
    } else {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, e))?;
        for (var, raw) in relevant {
            let (section, key) = override_target(var)
                .ok_or_else(|| ConfigError::Override { key: var.clone(), message: "expected DH_<SECTION>__<KEY>".into() })?;
            let entry = table.entry(section).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(sec) = entry else {
                return Err(ConfigError::Override { key: var.clone(), message: "section is not a table".into() });
            };
            sec.insert(key, override_value(raw));
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse { line: 0, column: 0, message: e.message().to_string() })?
    };
    file.into_config()
}

/// Read a config file, applying `DH_` overrides from the process environment.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    let overrides: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    parse_config_str(&text, &overrides)
}

/// Explicit TOML text for a config; parsing it returns the same config.
pub fn config_to_toml(config: &ExperimentConfig) -> String {
    toml::to_string(&ConfigFile::from_config(config)).expect("config sections serialize to TOML")
}
