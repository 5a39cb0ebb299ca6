use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use recproj::analytics::{self, ContinuationModel, ExerciseEvent};
use recproj::boundary::{self, BoundaryPoint};
use recproj::calibration;
use recproj::oracles::{self, McSpec, TreeKind, TreeSpec};
use recproj::pricer;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{BoundaryRegime, RunConfig};
use crate::CliError;

/// Files produced by a command; the first is the main artifact.
pub struct Artifacts(Vec<(String, String)>);

impl Artifacts {
    pub fn write(&self, dir: Option<&Path>) -> Result<(), CliError> {
        let io = |e: std::io::Error| CliError::Config(format!("cannot write output: {e}"));
        match dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(io)?;
                for (name, body) in &self.0 {
                    fs::write(d.join(name), body).map_err(io)?;
                }
            }
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(self.0[0].1.as_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }
}

fn with_hash<T: Serialize>(value: &T, cfg: &RunConfig) -> Result<String, CliError> {
    let mut v = serde_json::to_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    let hash = Value::String(cfg.hash());
    match &mut v {
        Value::Object(m) => {
            m.insert("config_hash".into(), hash);
        }
        other => {
            v = json!({ "config_hash": hash, "result": other.take() });
        }
    }
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| CliError::Config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Appends a `config_hash` column to every row of a CSV document.
fn csv_with_hash(body: &str, cfg: &RunConfig) -> Result<String, CliError> {
    let hash = cfg.hash();
    let err = |e: csv::Error| CliError::Config(e.to_string());
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = rdr.headers().map_err(err)?.clone();
    header.push_field("config_hash");
    w.write_record(&header).map_err(err)?;
    for rec in rdr.records() {
        let mut rec = rec.map_err(err)?;
        rec.push_field(&hash);
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Config(e.to_string()))
}

pub fn price(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let rec = pricer::price(&cfg.contract()?, &cfg.model()?, &cfg.env()?, cfg.spot()?, &cfg.lattice)?;
    Ok(Artifacts(vec![("price.json".into(), with_hash(&rec, cfg)?)]))
}

pub fn converge(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let table = pricer::convergence_study(
        &cfg.contract()?,
        &cfg.model()?,
        &cfg.env()?,
        cfg.spot()?,
        &cfg.levels,
        &cfg.lattice,
    )?;
    Ok(Artifacts(vec![
        ("converge.json".into(), with_hash(&table, cfg)?),
        ("converge.csv".into(), csv_with_hash(&table.to_csv()?, cfg)?),
    ]))
}

pub fn boundary(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let (contract, model, env) = (cfg.contract()?, cfg.model()?, cfg.env()?);
    let o = &cfg.boundary;
    let trace = |matched: bool| -> Result<Vec<BoundaryPoint>, CliError> {
        Ok(match (o.regime, matched) {
            (BoundaryRegime::Discrete, false) => {
                boundary::exercise_boundary_discrete(&contract, &model, &env, &cfg.lattice)?
            }
            (BoundaryRegime::Discrete, true) => {
                boundary::matched_bs_boundary_discrete(&contract, &model, &env, &cfg.lattice)?
            }
            (BoundaryRegime::Yield, false) => boundary::exercise_boundary_yield(
                &contract,
                &model,
                &env,
                &o.dates,
                o.dates_per_year,
                &cfg.lattice,
            )?,
            (BoundaryRegime::Yield, true) => boundary::matched_bs_boundary_yield(
                &contract,
                &model,
                &env,
                &o.dates,
                o.dates_per_year,
                &cfg.lattice,
            )?,
        })
    };
    let own = trace(false)?;
    let mut csv = boundary::boundary_csv(&own, model.name())?;
    let mut sets = vec![json!({ "model": model.name(), "points": own })];
    if o.matched_bs && !matches!(model, recproj::model::ModelSpec::Bs { .. }) {
        let pts = trace(true)?;
        let extra = boundary::boundary_csv(&pts, "matched_bs")?;
        csv.push_str(extra.split_once('\n').map_or("", |x| x.1));
        sets.push(json!({ "model": "matched_bs", "points": pts }));
    }
    Ok(Artifacts(vec![
        ("boundary.csv".into(), csv_with_hash(&csv, cfg)?),
        ("boundary.json".into(), with_hash(&json!({ "boundaries": sets }), cfg)?),
    ]))
}

pub fn calibrate(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let path = cfg
        .quotes_file
        .as_ref()
        .ok_or_else(|| CliError::Config("calibrate needs quotes_file or --quotes".into()))?;
    let file = fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let (quotes, rejects) = calibration::read_quotes(file)?;
    let init = match cfg.init {
        Some(m) => m,
        None => cfg.model()?,
    };
    let env = cfg.env()?;
    let res = calibration::calibrate(&quotes, &env, &init, &cfg.calibration)?;
    let out = json!({
        "result": res,
        "parameters": init.param_names().iter().zip(res.model.to_vec()).collect::<std::collections::BTreeMap<_, _>>(),
        "quotes": quotes.len(),
        "rejects": rejects,
    });
    Ok(Artifacts(vec![("calibrate.json".into(), with_hash(&out, cfg)?)]))
}

pub fn analyze(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let o = &cfg.analyze;
    let (events, rejects): (Vec<ExerciseEvent>, Vec<calibration::Reject>) =
        match (&o.events_file, &o.synthetic) {
            (Some(p), _) => {
                let f = fs::File::open(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                analytics::read_events(f)?
            }
            (None, Some(spec)) => {
                let mut spec = spec.clone();
                spec.seed = cfg.seed;
                (analytics::synthetic_events(&spec), Vec::new())
            }
            (None, None) => return Err(CliError::Config("analyze needs events_file or synthetic".into())),
        };
    let models: Vec<ContinuationModel> = if o.models.is_empty() {
        vec![ContinuationModel::new(cfg.model()?.name(), cfg.model()?)]
    } else {
        o.models.clone()
    };
    let mut report = analytics::build_report(&events, &models, &o.fees);
    report
        .rejects
        .extend(rejects.iter().map(|r| format!("row {}: {}", r.row, r.reason)));
    Ok(Artifacts(vec![
        ("analyze.json".into(), with_hash(&report, cfg)?),
        ("analyze.csv".into(), csv_with_hash(&analytics::report_csv(&report)?, cfg)?),
        ("analyze_buckets.csv".into(), csv_with_hash(&analytics::bucket_csv(&report)?, cfg)?),
    ]))
}

#[derive(Serialize)]
struct BenchRow {
    method: String,
    param: usize,
    price: f64,
    error_bp: f64,
    wall_time_ms: f64,
}

pub fn bench(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let (contract, model, env, spot) = (cfg.contract()?, cfg.model()?, cfg.env()?, cfg.spot()?);
    let b = &cfg.bench;
    let top = b.levels.iter().copied().max().unwrap_or(cfg.lattice.level);
    let reference = match b.reference {
        Some(r) => r,
        None => pricer::price_value(&contract, &model, &env, spot, &cfg.lattice.with_level(top + 2))?,
    };
    let mut rows = Vec::new();
    let mut push = |method: &str, param: usize, price: f64, start: Instant| {
        rows.push(BenchRow {
            method: method.into(),
            param,
            price,
            error_bp: 1e4 * (price - reference).abs() / reference,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    };
    for &j in &b.levels {
        let t = Instant::now();
        let p = pricer::price_value(&contract, &model, &env, spot, &cfg.lattice.with_level(j))?;
        push("lattice", j as usize, p, t);
    }
    if matches!(model, recproj::model::ModelSpec::Bs { .. }) {
        for &steps in &b.tree_steps {
            for (name, kind) in [
                ("tree_interpolated", TreeKind::ContinuationInterpolated),
                ("tree_nonrecombining", TreeKind::NonRecombining),
            ] {
                let t = Instant::now();
                let r = oracles::tree_price(&contract, &model, &env, spot, &TreeSpec { steps, kind })?;
                push(name, steps, r.price, t);
            }
        }
    }
    for &paths in &b.lsm_paths {
        let t = Instant::now();
        let spec = McSpec {
            paths,
            seed: cfg.seed,
            ..McSpec::default()
        };
        let r = oracles::lsm_price(&contract, &model, &env, spot, &spec)?;
        push("lsm", paths, r.price, t);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Config(e.to_string()))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| CliError::Config(e.to_string()))?)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Artifacts(vec![("bench.csv".into(), csv_with_hash(&body, cfg)?)]))
}
