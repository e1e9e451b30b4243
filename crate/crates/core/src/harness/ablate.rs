use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::report::{run_on, table, EvalReport};
use super::train::Prepared;
use crate::error::{Error, Result};

/// Short axis names accepted in grid files, with the config path they set.
pub const AXIS_ALIASES: &[(&str, &str)] = &[
    ("N", "model.experts"),
    ("L", "model.layers"),
    ("H", "model.hidden"),
    ("D", "data.dim"),
    ("routing", "train.routing"),
    ("init", "train.init"),
    ("data_policy", "train.data_policy"),
    ("aggregation", "eval.aggregation"),
    ("lambda", "loss.lambda"),
    ("eta", "loss.eta"),
    ("wmr", "loss.wmr_variant"),
    ("sampling", "merge.sampling"),
    ("beta", "merge.beta"),
    ("per_layer", "merge.per_layer"),
    ("tfm", "tfm.enabled"),
    ("gamma", "tfm.gamma"),
    ("K", "tfm.k_neighbors"),
];

/// Cartesian grid over config fields, keyed by dotted path or alias.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

impl GridSpec {
    pub fn from_toml(s: &str) -> Result<Self> {
        let g: GridSpec = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if let Some((k, _)) = g.axes.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("grid axis '{k}' has no values")));
        }
        Ok(g)
    }
}

pub fn resolve_axis(name: &str) -> &str {
    AXIS_ALIASES
        .iter()
        .find(|(a, _)| *a == name)
        .map_or(name, |(_, p)| p)
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let (leaf, parents) = parts.split_last().expect("split yields one part");
    let mut node = root;
    for p in parents {
        node = node
            .get_mut(*p)
            .filter(|n| n.is_table())
            .ok_or_else(|| Error::Config(format!("grid axis '{path}': no config section '{p}'")))?;
    }
    node.as_table_mut()
        .expect("checked table")
        .insert((*leaf).to_string(), value);
    Ok(())
}

/// `base` with each `(path, value)` applied, re-validated.
pub fn apply_axes(base: &RunConfig, assignments: &[(String, toml::Value)]) -> Result<RunConfig> {
    let mut v = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    for (axis, value) in assignments {
        set_path(&mut v, resolve_axis(axis), value.clone())?;
    }
    let cfg: RunConfig = v.try_into().map_err(|e: toml::de::Error| {
        let axes: Vec<&str> = assignments.iter().map(|(a, _)| a.as_str()).collect();
        Error::Config(format!("grid axes {axes:?}: {e}"))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn render(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One grid point, labelled `axis=value,...` (or `default`).
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub config: RunConfig,
}

/// Expands the grid; every point is validated before anything runs.
pub fn expand_grid(base: &RunConfig, grid: &GridSpec) -> Result<Vec<GridPoint>> {
    base.validate()?;
    let mut points: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for (axis, values) in &grid.axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
        .into_iter()
        .map(|assign| {
            let label = if assign.is_empty() {
                "default".to_string()
            } else {
                assign
                    .iter()
                    .map(|(a, v)| format!("{a}={}", render(v)))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            Ok(GridPoint {
                config: apply_axes(base, &assign)?,
                label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRun {
    pub label: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationReport {
    pub grid: GridSpec,
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let rows: Vec<(String, EvalReport)> = self.runs.iter().map(|r| (r.label.clone(), r.report.clone())).collect();
        table(&rows)
    }
}

/// Runs every grid point. Points sharing a data spec and seed share the
/// generated dataset.
pub fn ablate(base: &RunConfig, grid: &GridSpec) -> Result<AblationReport> {
    let points = expand_grid(base, grid)?;
    let mut cache: Vec<(String, u64, Prepared)> = Vec::new();
    let mut runs = Vec::with_capacity(points.len());
    for p in points {
        let key = p.config.data.to_toml();
        let seed = p.config.seeds.data;
        let pos = match cache.iter().position(|(k, s, _)| *k == key && *s == seed) {
            Some(i) => i,
            None => {
                cache.push((key, seed, Prepared::new(&p.config)?));
                cache.len() - 1
            }
        };
        let (_, report, _) = run_on(&p.config, &cache[pos].2, None)?;
        runs.push(AblationRun {
            label: p.label,
            report,
        });
    }
    Ok(AblationReport {
        grid: grid.clone(),
        runs,
    })
}
