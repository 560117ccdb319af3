use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use msldp::control::{bind_feedback, regime1_control, regime2_control, ControlField};
use msldp::functional::PathFunctional;
use msldp::homogenize::{self, effective_coefficients, HomogenizedTable, XLattice};
use msldp::mc::{estimate, ldp_slope, EstimatorReport, McSettings, Scheme};
use msldp::model::MultiscaleModel;
use msldp::pathopt::{self, minimize_action, OptSettings, PathOptResult, PathProblem, Terminal};
use msldp::ratefn::{
    self, local_rate_r1, local_rate_r2_gamma, local_rate_r3, R2Settings, Regime1Rate, Regime2Rate, Regime3Rate,
    R3_DEFAULT_N,
};
use msldp::selftest;
use msldp::simulate::{max_step, occupation_measure, simulate as run_path, OccupationMeasure, OccupationSettings};

use crate::config::{Loaded, RunConfig};
use crate::error::CliError;

/// Version tag of every JSON document written by the CLI.
pub const SCHEMA: &str = "msldp/1";

/// Where artifacts go: files in `dir`, or the primary artifact on standard output.
pub struct Output {
    dir: Option<PathBuf>,
}

impl Output {
    pub fn new(config: &RunConfig) -> Result<Self, CliError> {
        let dir = config.output().dir;
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(CliError::io(d.display()))?;
        }
        Ok(Output { dir })
    }

    /// The main result: a file when a directory is set, standard output otherwise.
    fn emit(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        match &self.dir {
            Some(_) => self.file(name, bytes),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(bytes)
                    .and_then(|_| out.flush())
                    .map_err(CliError::io("stdout"))
            }
        }
    }

    /// Secondary artifacts are written only when a directory is set.
    fn file(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        if let Some(d) = &self.dir {
            let p = d.join(name);
            std::fs::write(&p, bytes).map_err(CliError::io(p.display()))?;
        }
        Ok(())
    }
}

fn json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s.into_bytes()
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    write(&mut buf).expect("writing to memory");
    buf
}

fn provenance(command: &str, loaded: &Loaded) -> Value {
    let overrides: Map<String, Value> = loaded
        .overrides
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::to_value(v).unwrap_or(Value::Null)))
        .collect();
    json!({
        "schema": SCHEMA,
        "command": command,
        "config": loaded.source.display().to_string(),
        "overrides": overrides,
    })
}

fn points(values: &[f64], d: usize, key: &str) -> Result<Vec<Vec<f64>>, CliError> {
    if values.is_empty() || !values.len().is_multiple_of(d) {
        return Err(CliError::Config(format!(
            "{key} needs a non-empty multiple of {d} numbers, got {}",
            values.len()
        )));
    }
    Ok(values.chunks(d).map(<[f64]>::to_vec).collect())
}

fn require_1d(model: &MultiscaleModel, what: &str) -> Result<(), CliError> {
    if model.dim() == 1 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} is implemented for d = 1")))
    }
}

fn regime_of(config: &RunConfig, model: &MultiscaleModel) -> Result<u8, CliError> {
    match config.rate().regime.unwrap_or(model.regime().index()) {
        r @ 1..=3 => Ok(r),
        r => Err(CliError::Config(format!("regime must be 1, 2 or 3, got {r}"))),
    }
}

fn gamma_of(config: &RunConfig, model: &MultiscaleModel) -> Result<f64, CliError> {
    config
        .rate()
        .gamma
        .or(model.gamma())
        .ok_or_else(|| CliError::Config("Regime 2 needs rate.gamma or a model with a = 1".into()))
}

fn r2_settings(config: &RunConfig) -> R2Settings {
    let r = config.rate();
    let base = R2Settings::default();
    R2Settings {
        n: r.r2_n.unwrap_or(base.n),
        order: config.grid().order.unwrap_or(base.order),
        z_max: r.z_max.unwrap_or(base.z_max),
    }
}

fn strip_timing(mut r: EstimatorReport, timing: bool) -> EstimatorReport {
    if !timing {
        r.wall_seconds = None;
    }
    r
}

pub fn homogenize(loaded: &Loaded) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let out = Output::new(cfg)?;
    let model = cfg.build_model()?;
    let d = model.dim();
    let settings = cfg.cell_settings(d);
    let xs = match &cfg.grid().points {
        Some(p) => points(p, d, "grid.points")?,
        None => {
            let lat = cfg.lattice(&model)?;
            lat.indices().iter().map(|i| lat.point(i)).collect()
        }
    };
    let rows = xs
        .par_iter()
        .map(|x| effective_coefficients(&model, x, &settings))
        .collect::<Result<Vec<_>, _>>()?;
    out.emit("homogenize.csv", &csv_bytes(|w| homogenize::write_csv(w, &rows)))
}

pub fn rate(loaded: &Loaded) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let out = Output::new(cfg)?;
    let model = cfg.build_model()?;
    let d = model.dim();
    let rs = cfg.rate();
    let regime = regime_of(cfg, &model)?;
    let xs = match &rs.x {
        Some(x) => points(x, d, "rate.x")?,
        None => vec![model.x0.clone()],
    };
    let betas = points(
        rs.beta
            .as_deref()
            .ok_or_else(|| CliError::Config("rate.beta (or --beta) is required".into()))?,
        d,
        "rate.beta",
    )?;
    let jobs: Vec<(&[f64], &[f64])> = xs
        .iter()
        .flat_map(|x| betas.iter().map(move |b| (&x[..], &b[..])))
        .collect();
    let rows = match regime {
        1 => {
            let settings = cfg.cell_settings(d);
            let homs = xs
                .par_iter()
                .map(|x| effective_coefficients(&model, x, &settings))
                .collect::<Result<Vec<_>, _>>()?;
            homs.iter()
                .flat_map(|h| betas.iter().map(move |b| local_rate_r1(h, b)))
                .collect::<Result<Vec<_>, _>>()?
        }
        2 => {
            require_1d(&model, "the Regime-2 local rate")?;
            let gamma = gamma_of(cfg, &model)?;
            let settings = r2_settings(cfg);
            jobs.par_iter()
                .map(|(x, b)| local_rate_r2_gamma(&model, gamma, x[0], b[0], &settings))
                .collect::<Result<Vec<_>, _>>()?
        }
        _ => {
            require_1d(&model, "the Regime-3 local rate")?;
            let n = rs.r3_n.unwrap_or(R3_DEFAULT_N);
            jobs.par_iter()
                .map(|(x, b)| local_rate_r3(&model, x[0], b[0], n))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    out.emit("rate.csv", &csv_bytes(|w| ratefn::write_csv(w, &rows)))
}

/// Optimizer output plus what is needed to build a control from it.
struct Optimized {
    result: PathOptResult,
    regime: u8,
    table: Option<Arc<HomogenizedTable>>,
    lattice: XLattice,
}

fn optimize(
    cfg: &RunConfig,
    model: &Arc<MultiscaleModel>,
    h: Option<PathFunctional>,
    horizon: f64,
) -> Result<Optimized, CliError> {
    let d = model.dim();
    let ps = cfg.path();
    let regime = regime_of(cfg, model)?;
    let terminal = match &ps.terminal {
        Some(t) => Terminal::Fixed(t.to_vec()),
        None => Terminal::Free,
    };
    let problem = PathProblem {
        horizon,
        intervals: ps.intervals.unwrap_or(64),
        x0: model.x0.clone(),
        terminal,
        h,
    };
    let base = OptSettings::default();
    let settings = OptSettings {
        max_iter: ps.max_iter.unwrap_or(base.max_iter),
        grad_tol: ps.grad_tol.unwrap_or(base.grad_tol),
        fd_step: ps.fd_step.unwrap_or(base.fd_step),
        ..base
    };
    let lattice = cfg.lattice(model)?;
    let (result, table) = match regime {
        1 => {
            let table = Arc::new(HomogenizedTable::new(
                model.clone(),
                cfg.cell_settings(d),
                lattice.clone(),
            )?);
            table.precompute()?;
            let rate = Regime1Rate { table: table.clone() };
            (minimize_action(&problem, &rate, None, &settings)?, Some(table))
        }
        2 => {
            require_1d(model, "the Regime-2 local rate")?;
            let rate = Regime2Rate {
                model: model.clone(),
                gamma: gamma_of(cfg, model)?,
                settings: r2_settings(cfg),
            };
            (minimize_action(&problem, &rate, None, &settings)?, None)
        }
        _ => {
            require_1d(model, "the Regime-3 local rate")?;
            let rate = Regime3Rate {
                model: model.clone(),
                n: cfg.rate().r3_n.unwrap_or(R3_DEFAULT_N),
            };
            (minimize_action(&problem, &rate, None, &settings)?, None)
        }
    };
    Ok(Optimized {
        result,
        regime,
        table,
        lattice,
    })
}

fn build_control(cfg: &RunConfig, model: &MultiscaleModel, opt: &Optimized) -> Result<Arc<ControlField>, CliError> {
    let r = &opt.result;
    let field = match (opt.regime, &opt.table) {
        (1, Some(table)) => regime1_control(table.clone(), r.schedule.clone(), Some(&r.path))?,
        (2, _) => {
            if model.gamma().is_none() {
                return Err(CliError::Config("the Regime-2 control needs a model with a = 1".into()));
            }
            regime2_control(
                model,
                opt.lattice.clone(),
                r.schedule.clone(),
                &r2_settings(cfg),
                Some(&r.path),
            )?
        }
        _ => {
            return Err(CliError::Config(
                "importance-sampling controls are available in Regimes 1 and 2".into(),
            ))
        }
    };
    Ok(Arc::new(field))
}

fn path_json(opt: &Optimized) -> Value {
    let r = &opt.result;
    json!({
        "regime": opt.regime,
        "value": r.value,
        "action": r.action,
        "cost": r.cost,
        "iterations": r.iterations,
        "converged": r.converged,
        "grad_norm": r.grad_norm,
        "horizon": r.path.horizon(),
        "intervals": r.path.intervals(),
    })
}

/// The simulation horizon: `mc.horizon` and `path.horizon` must agree when both are set.
fn horizon(cfg: &RunConfig) -> Result<f64, CliError> {
    match (cfg.mc().horizon, cfg.path().horizon) {
        (Some(a), Some(b)) if a != b => Err(CliError::Config(format!(
            "mc.horizon = {a} and path.horizon = {b} differ"
        ))),
        (a, b) => Ok(a.or(b).unwrap_or(1.0)),
    }
}

pub fn path(loaded: &Loaded, timing: bool) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let out = Output::new(cfg)?;
    let start = Instant::now();
    let model = Arc::new(cfg.build_model()?);
    let h = cfg.functional(&model)?;
    let opt = optimize(cfg, &model, h, horizon(cfg)?)?;
    let r = &opt.result;
    let mut doc = json!({
        "provenance": provenance("path", loaded),
        "result": path_json(&opt),
        "states": r.path.states(),
        "velocities": r.schedule.velocities(),
    });
    if timing {
        doc["wall_seconds"] = json!(start.elapsed().as_secs_f64());
    }
    out.file("path.csv", &csv_bytes(|w| pathopt::write_csv(w, r)))?;
    out.emit("path.json", &json_bytes(&doc))
}

pub fn simulate(loaded: &Loaded, timing: bool, controlled: bool) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let out = Output::new(cfg)?;
    let start = Instant::now();
    let model = Arc::new(cfg.build_model()?);
    let d = model.dim();
    let m = cfg.mc();
    let eps = m
        .eps
        .ok_or_else(|| CliError::Config("mc.eps (or --eps) is required".into()))?;
    let paths = m.n.unwrap_or(1);
    let seed = m.seed.unwrap_or(0);
    let horizon = horizon(cfg)?;
    let delta = model.delta(eps);
    let dt = m.dt.unwrap_or_else(|| max_step(&model, eps));
    let stride = cfg.output().stride.unwrap_or(1).max(1);

    let mut reference = None;
    let feedback = if controlled {
        let h = cfg.functional(&model)?;
        let opt = optimize(cfg, &model, h, horizon)?;
        let field = build_control(cfg, &model, &opt)?;
        reference = Some(path_json(&opt));
        Some(bind_feedback(field, eps, delta, model.coefficients.period()))
    } else {
        None
    };
    let occ_settings = OccupationSettings {
        window: m.window.unwrap_or(eps.sqrt()),
        ..OccupationSettings::defaults(eps, horizon)
    };

    struct Run {
        end: Vec<f64>,
        log_weight: f64,
        dump: Vec<(f64, Vec<f64>)>,
        occupation: OccupationMeasure,
    }
    let runs = (0..paths)
        .into_par_iter()
        .map(|k| -> Result<Run, CliError> {
            let p = run_path(&model, eps, &model.x0, horizon, dt, seed, k, feedback.as_ref(), 1)?;
            let controls = feedback.as_ref().map(|fb| {
                let (mut y, mut u) = (vec![0.0; d], vec![0.0; d]);
                (0..p.intervals())
                    .map(|i| {
                        fb.eval(i as f64 * p.dt(), p.state(i), &mut y, &mut u);
                        u.clone()
                    })
                    .collect::<Vec<_>>()
            });
            let occupation = occupation_measure(
                &p,
                controls.as_deref(),
                delta,
                model.coefficients.period(),
                occ_settings.clone(),
            )?;
            let last = p.intervals();
            let dump = (0..=last)
                .filter(|i| i % stride == 0 || *i == last)
                .map(|i| (i as f64 * p.dt(), p.state(i).to_vec()))
                .collect();
            Ok(Run {
                end: p.end().to_vec(),
                log_weight: p.log_weight.unwrap_or(0.0),
                dump,
                occupation,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut total = OccupationMeasure::new(d, model.coefficients.period(), occ_settings.clone())?;
    for r in &runs {
        total.merge(&r.occupation);
    }
    total.scale(1.0 / paths.max(1) as f64);
    let y_marginal = total.y_marginal();

    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend((1..=d).map(|k| format!("x_{k}")));
    let dump = csv_bytes(|w| {
        msldp::csv::write_row(w, &header)?;
        for (k, r) in runs.iter().enumerate() {
            for (t, x) in &r.dump {
                let mut row = vec![k.to_string(), msldp::csv::num(*t)];
                row.extend(x.iter().map(|v| msldp::csv::num(*v)));
                msldp::csv::write_row(w, &row)?;
            }
        }
        Ok(())
    });
    let occupation_csv = csv_bytes(|w| {
        msldp::csv::write_header(w, &["y_cell", "mass"])?;
        for (i, v) in y_marginal.iter().enumerate() {
            msldp::csv::write_row(w, &[i.to_string(), msldp::csv::num(*v)])?;
        }
        Ok(())
    });

    let (_, dt_used) = msldp::simulate::step_count(horizon, dt);
    let mut doc = json!({
        "provenance": provenance("simulate", loaded),
        "eps": eps,
        "delta": delta,
        "dt": dt_used,
        "horizon": horizon,
        "seed": seed,
        "controlled": controlled,
        "paths": runs.iter().enumerate().map(|(k, r)| json!({
            "stream": k,
            "end": r.end,
            "log_weight": r.log_weight,
        })).collect::<Vec<_>>(),
        "occupation": {
            "window": occ_settings.window,
            "y_bins": occ_settings.y_bins,
            "y_marginal": y_marginal,
            "cumulative_mass": total.cumulative_mass(),
            "clipped": total.clipped,
        },
    });
    if let Some(r) = reference {
        doc["path"] = r;
    }
    if timing {
        doc["wall_seconds"] = json!(start.elapsed().as_secs_f64());
    }
    out.file("paths.csv", &dump)?;
    out.file("occupation.csv", &occupation_csv)?;
    out.emit("simulate.json", &json_bytes(&doc))
}

fn schemes(name: Option<&str>) -> Result<Vec<Scheme>, CliError> {
    match name.unwrap_or("standard") {
        "standard" => Ok(vec![Scheme::Standard]),
        "is" => Ok(vec![Scheme::ImportanceSampling]),
        "both" => Ok(vec![Scheme::Standard, Scheme::ImportanceSampling]),
        s => Err(CliError::Config(format!(
            "mc.scheme must be standard, is or both, got {s:?}"
        ))),
    }
}

pub fn mc(loaded: &Loaded, timing: bool) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let out = Output::new(cfg)?;
    let model = Arc::new(cfg.build_model()?);
    let h = cfg
        .functional(&model)?
        .ok_or_else(|| CliError::Config("mc needs a [functional] section".into()))?;
    let m = cfg.mc();
    let schemes = schemes(m.scheme.as_deref())?;
    let n =
        m.n.ok_or_else(|| CliError::Config("mc.n (or --n) is required".into()))?;
    let horizon = horizon(cfg)?;
    let wants_is = schemes.contains(&Scheme::ImportanceSampling);
    if m.ladder.is_some() && m.dt.is_some() {
        return Err(CliError::Config(
            "mc.dt cannot be combined with a ladder; each ε uses δ²/10".into(),
        ));
    }

    let opt = if wants_is || m.ladder.is_some() {
        Some(optimize(cfg, &model, Some(h.clone()), horizon)?)
    } else {
        None
    };
    let control = match (&opt, wants_is) {
        (Some(o), true) => Some(build_control(cfg, &model, o)?),
        _ => None,
    };
    let control_for = |s: Scheme| match s {
        Scheme::Standard => None,
        Scheme::ImportanceSampling => control.clone(),
    };
    let template = McSettings {
        eps: m.eps.unwrap_or(f64::NAN),
        n,
        horizon,
        dt: m.dt,
        seed: m.seed.unwrap_or(0),
        first_stream: 0,
        chunk: m.chunk.unwrap_or(256),
    };

    let mut doc = json!({ "provenance": provenance("mc", loaded) });
    if let Some(o) = &opt {
        doc["path"] = path_json(o);
    }
    if let Some(ladder) = &m.ladder {
        let reference = opt.as_ref().map_or(f64::NAN, |o| o.result.value);
        let mut tables = Map::new();
        for &s in &schemes {
            let mut table = ldp_slope(&model, &h, ladder, &template, s, control_for(s), reference)?;
            table.rows = table.rows.into_iter().map(|r| strip_timing(r, timing)).collect();
            out.file(&format!("ladder_{}.csv", s.name()), &csv_bytes(|w| table.write_csv(w)))?;
            tables.insert(
                s.name().to_string(),
                json!({
                    "reference": table.reference,
                    "final_relative_gap": table.final_relative_gap(),
                    "reversals": table.reversals(),
                    "rows": table.rows,
                }),
            );
        }
        doc["ladders"] = Value::Object(tables);
    } else {
        if m.eps.is_none() {
            return Err(CliError::Config("mc.eps (or --eps) is required".into()));
        }
        let reports = schemes
            .iter()
            .map(|&s| estimate(&model, &h, &template, s, control_for(s)).map(|e| strip_timing(e.report, timing)))
            .collect::<Result<Vec<_>, _>>()?;
        doc["reports"] = json!(reports);
    }
    out.emit("mc.json", &json_bytes(&doc))
}

pub fn selftest(ids: &[u32]) -> Result<(), CliError> {
    let mut failed = 0;
    for &id in ids {
        let r = selftest::run(id).ok_or_else(|| CliError::Config(format!("there is no check {id}")))?;
        println!("{}", r.line());
        if !r.passed {
            failed += 1;
        }
    }
    println!("{}/{} checks passed", ids.len() - failed, ids.len());
    if failed > 0 {
        Err(CliError::Selftest(failed))
    } else {
        Ok(())
    }
}
