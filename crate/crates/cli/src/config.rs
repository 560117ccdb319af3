//! Run configuration: a TOML file with `[model]`, `[definitions]`, `[grid]`, `[rate]`,
//! `[functional]`, `[path]`, `[mc]` and `[output]` sections. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use msldp::functional::{PathFunctional, StateFn};
use msldp::homogenize::{CellSettings, XLattice};
use msldp::model::{build_model, ModelSpec, MultiscaleModel};

use crate::error::CliError;

/// A scalar or a list in the file; both read as a list.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Expressions may be written as strings or bare numbers.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ExprText {
    Text(String),
    Number(f64),
}

impl ExprText {
    fn source(&self) -> String {
        match self {
            ExprText::Text(s) => s.clone(),
            ExprText::Number(v) => format!("{v:?}"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub definitions: BTreeMap<String, ExprText>,
    pub grid: Option<GridSection>,
    pub rate: Option<RateSection>,
    pub functional: Option<FunctionalSection>,
    pub path: Option<PathSection>,
    pub mc: Option<McSection>,
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dimension: Option<usize>,
    pub b: OneOrMany<ExprText>,
    pub c: OneOrMany<ExprText>,
    /// Row-major `d × d`.
    pub sigma: OneOrMany<ExprText>,
    pub a: f64,
    pub kappa: Option<f64>,
    pub gamma: Option<f64>,
    pub x0: OneOrMany<f64>,
    pub period: Option<OneOrMany<f64>>,
    pub x_box: Option<[f64; 2]>,
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Fast-variable nodes per direction.
    pub n: Option<usize>,
    pub order: Option<usize>,
    pub x_lo: Option<OneOrMany<f64>>,
    pub x_hi: Option<OneOrMany<f64>>,
    pub x_count: Option<OneOrMany<usize>>,
    /// Points for `homogenize`, `d` numbers each; the lattice nodes when absent.
    pub points: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    pub regime: Option<u8>,
    /// Slow states, `d` numbers per point.
    pub x: Option<Vec<f64>>,
    /// Velocities, `d` numbers per point.
    pub beta: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    pub r2_n: Option<usize>,
    pub r3_n: Option<usize>,
    pub z_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionalKind {
    Constant,
    Terminal,
    Running,
    Exit,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSection {
    pub kind: FunctionalKind,
    pub expr: Option<String>,
    pub value: Option<f64>,
    pub level: Option<f64>,
    pub width: Option<f64>,
    pub amplitude: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSection {
    pub horizon: Option<f64>,
    pub intervals: Option<usize>,
    /// Fixed end point; free when absent.
    pub terminal: Option<OneOrMany<f64>>,
    pub max_iter: Option<usize>,
    pub grad_tol: Option<f64>,
    pub fd_step: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub eps: Option<f64>,
    pub ladder: Option<Vec<f64>>,
    pub n: Option<u64>,
    pub seed: Option<u64>,
    /// Time step; defaults to `δ²/10`, which is also the largest allowed.
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub chunk: Option<u64>,
    pub scheme: Option<String>,
    /// Occupation-measure window `Δ`; defaults to `√ε`.
    pub window: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Keep every `stride`-th simulated state in path dumps.
    pub stride: Option<usize>,
}

/// A parsed file plus the `key = value` overrides applied on top of it.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub source: PathBuf,
    pub overrides: Vec<(String, toml::Value)>,
}

pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Loaded, CliError> {
    let path = path.ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for (key, value) in overrides {
        set_key(&mut table, key, value.clone())?;
    }
    let config = RunConfig::deserialize(toml::Value::Table(table))
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(Loaded {
        config,
        source: path.to_path_buf(),
        overrides: overrides.to_vec(),
    })
}

/// Set a dotted key such as `mc.eps`, creating the section if needed.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::Config(format!("bad key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parse the right-hand side of `--set key=value` as a TOML value; bare words become strings.
pub fn parse_value(text: &str) -> toml::Value {
    let wrapped = format!("v = {text}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

/// Comma-separated numbers as a TOML array.
pub fn number_list(text: &str) -> Result<toml::Value, CliError> {
    let values = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map(toml::Value::Float)
                .map_err(|_| CliError::Config(format!("{s:?} is not a number in {text:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(toml::Value::Array(values))
}

impl RunConfig {
    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let m = &self.model;
        let x0 = m.x0.to_vec();
        let dimension = m.dimension.unwrap_or(x0.len());
        let exprs = |v: &OneOrMany<ExprText>| v.to_vec().iter().map(ExprText::source).collect::<Vec<_>>();
        Ok(ModelSpec {
            dimension,
            b: exprs(&m.b),
            c: exprs(&m.c),
            sigma: exprs(&m.sigma),
            definitions: self.definitions.iter().map(|(k, v)| (k.clone(), v.source())).collect(),
            period: m.period.as_ref().map(OneOrMany::to_vec),
            a: m.a,
            kappa: m.kappa,
            gamma: m.gamma,
            x0,
            x_box: m.x_box.map(|[lo, hi]| (lo, hi)),
            nu: m.nu,
        })
    }

    pub fn build_model(&self) -> Result<MultiscaleModel, CliError> {
        build_model(&self.model_spec()?).map_err(|e| CliError::Config(format!("model: {e}")))
    }

    pub fn grid(&self) -> GridSection {
        self.grid.clone().unwrap_or_default()
    }

    pub fn cell_settings(&self, d: usize) -> CellSettings {
        let g = self.grid();
        let base = CellSettings::default_for(d);
        CellSettings {
            n: g.n.unwrap_or(base.n),
            order: g.order.unwrap_or(base.order),
        }
    }

    /// The x-lattice of `[grid]`; defaults to `x0 ± 2` with 41 nodes per direction.
    pub fn lattice(&self, model: &MultiscaleModel) -> Result<XLattice, CliError> {
        let d = model.dim();
        let g = self.grid();
        let per_dim = |v: Option<&OneOrMany<f64>>, shift: f64, name: &str| -> Result<Vec<f64>, CliError> {
            match v {
                Some(v) => {
                    let v = v.to_vec();
                    match v.len() {
                        1 => Ok(vec![v[0]; d]),
                        n if n == d => Ok(v),
                        n => Err(CliError::Config(format!(
                            "grid.{name} has {n} entries, dimension is {d}"
                        ))),
                    }
                }
                None => Ok(model.x0.iter().map(|x| x + shift).collect()),
            }
        };
        let lo = per_dim(g.x_lo.as_ref(), -2.0, "x_lo")?;
        let hi = per_dim(g.x_hi.as_ref(), 2.0, "x_hi")?;
        let count = match &g.x_count {
            Some(c) => {
                let c = c.to_vec();
                if c.len() == 1 {
                    vec![c[0]; d]
                } else {
                    c
                }
            }
            None => vec![41; d],
        };
        XLattice::new(lo, hi, count).map_err(|e| CliError::Config(format!("grid: {e}")))
    }

    pub fn functional(&self, model: &MultiscaleModel) -> Result<Option<PathFunctional>, CliError> {
        let Some(f) = &self.functional else {
            return Ok(None);
        };
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| CliError::Config(format!("functional.{key} is required for kind {:?}", f.kind)))
        };
        let state_fn = || -> Result<StateFn, CliError> {
            let src = f
                .expr
                .as_deref()
                .ok_or_else(|| CliError::Config(format!("functional.expr is required for kind {:?}", f.kind)))?;
            StateFn::new(src, model).map_err(|e| CliError::Config(format!("functional.expr: {e}")))
        };
        Ok(Some(match f.kind {
            FunctionalKind::Constant => PathFunctional::Constant(need(f.value, "value")?),
            FunctionalKind::Terminal => PathFunctional::Terminal(state_fn()?),
            FunctionalKind::Running => PathFunctional::Running(state_fn()?),
            FunctionalKind::Exit => PathFunctional::Exit {
                level_fn: state_fn()?,
                level: need(f.level, "level")?,
                width: need(f.width, "width")?,
                amplitude: need(f.amplitude, "amplitude")?,
            },
        }))
    }

    pub fn mc(&self) -> McSection {
        self.mc.clone().unwrap_or_default()
    }

    pub fn path(&self) -> PathSection {
        self.path.clone().unwrap_or_default()
    }

    pub fn rate(&self) -> RateSection {
        self.rate.clone().unwrap_or_default()
    }

    pub fn output(&self) -> OutputSection {
        self.output.clone().unwrap_or_default()
    }
}
