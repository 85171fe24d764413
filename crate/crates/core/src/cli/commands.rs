use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use super::workspace::{write_file, WorkspaceLayout};
use super::{EvalMode, GlobalArgs, GridArgs, OracleSpec, PlanArgs, EXIT_CHECK_FAILED, EXIT_OK};
use crate::config_space::{enumerate_configs, ConfigPool, HardwareModel, TileConfig};
use crate::cost_model::{fit_all, CoefficientStore, FitReport, ProfilingPlan, Variant};
use crate::dispatch::{evaluate_regret, speedup_ra_vs_static, static_best, DispatchTable, TestGrid};
use crate::error::{Error, Result};
use crate::model_catalog::{
    bundled_catalog, classify_regime, find_model, load_catalog, region_variables, MoeGeometry, EXPECTED_REGIONS,
};
use crate::routing::{balancedness, csv_header, grid_size, sample_histogram, ExpertHistogram};
use crate::timing_oracle::{load_trace, profile_to_file, task_seed, write_trace, OracleParams, Simulator};

const SAMPLE_STREAM: u64 = 0x5341_4d50;
const CURVE_STREAM: u64 = 0x4355_5256;
const CURVE_DRAWS: u64 = 32;
const CURVE_BMS: [u32; 4] = [8, 16, 32, 64];
const CROSSOVER_BATCHES: [u64; 11] = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024];

type Out<'a> = &'a mut dyn Write;

fn emit(out: Out, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn emit_json(out: Out, value: &serde_json::Value) -> Result<()> {
    emit(out, &format!("{}\n", serde_json::to_string_pretty(value).expect("json value serializes")))
}

pub(super) struct Context {
    workspace: PathBuf,
    hw: HardwareModel,
    catalog: Vec<MoeGeometry>,
    seed: u64,
    json: bool,
}

impl Context {
    pub(super) fn new(g: &GlobalArgs) -> Result<Self> {
        let hw = match &g.hw {
            Some(p) => HardwareModel::from_json_file(p)?,
            None => HardwareModel::default(),
        };
        let catalog = match &g.catalog {
            Some(p) => load_catalog(p)?,
            None => bundled_catalog(),
        };
        Ok(Context { workspace: g.workspace.clone(), hw, catalog, seed: g.seed, json: g.json })
    }

    fn model(&self, name: &str) -> Result<(MoeGeometry, WorkspaceLayout)> {
        let geom = find_model(&self.catalog, name)?.clone();
        let layout = WorkspaceLayout::new(&self.workspace, &geom.name);
        Ok((geom, layout))
    }

    /// The simulator named by `spec`. Its SM count follows the hardware
    /// model unless the parameter file sets one explicitly.
    fn simulator(&self, spec: &OracleSpec) -> Result<Simulator> {
        let params = match spec {
            OracleSpec::Sim(None) => OracleParams { sm_count: self.hw.sm_count, ..OracleParams::default() },
            OracleSpec::Sim(Some(path)) => load_params(path, self.hw.sm_count)?,
            OracleSpec::Trace(_) => {
                return Err(Error::validation(
                    "oracle",
                    "this command needs a simulator for ground-truth times; traces can only be ingested by `profile`",
                ))
            }
        };
        Simulator::new(params)
    }
}

fn load_params(path: &Path, sm_count: u32) -> Result<OracleParams> {
    let context = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(&context, &e))?;
    if let Some(obj) = value.as_object_mut() {
        obj.entry("sm_count").or_insert(json!(sm_count));
    }
    let params: OracleParams = serde_json::from_value(value).map_err(|e| Error::json(&context, &e))?;
    params.validate()?;
    Ok(params)
}

fn load_pool(layout: &WorkspaceLayout) -> Result<ConfigPool> {
    let path = layout.pool();
    let text = std::fs::read_to_string(WorkspaceLayout::require(&path)?).map_err(|e| Error::io(&path, e))?;
    ConfigPool::from_json(&text, &path.display().to_string())
}

fn load_table(geom: &MoeGeometry, layout: &WorkspaceLayout, pool: ConfigPool) -> Result<DispatchTable> {
    let store = CoefficientStore::load(WorkspaceLayout::require(&layout.coeffs())?)?;
    if store.model != geom.name {
        return Err(Error::validation(
            "coefficients",
            format!("{} holds coefficients for '{}', not '{}'", layout.coeffs().display(), store.model, geom.name),
        ));
    }
    DispatchTable::new(geom, pool, store.coefficients(), store.sm_count)
}

fn config_fields(c: &TileConfig) -> String {
    format!(
        "bm={} bn={} wn={} stg={} ttn={} group_m={} split_k={}",
        c.bm, c.bn, c.wn, c.stg, c.ttn, c.group_m, c.split_k
    )
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub(super) fn enumerate(ctx: &Context, model: &str, out: Out) -> Result<i32> {
    let (geom, layout) = ctx.model(model)?;
    let _lock = layout.lock()?;
    let vars = region_variables(&geom);
    let report = classify_regime(&vars);
    let pool = enumerate_configs(&geom, &ctx.hw, &report)?;
    write_file(&layout.pool(), &pool.to_json())?;

    let group_m = pool.iter().filter(|c| c.group_m).count();
    let split_k = pool.iter().filter(|c| c.split_k > 1).count();
    let modes = report.predicted_modes(&vars, ctx.hw.sm_count).to_string();
    if ctx.json {
        emit_json(
            out,
            &json!({
                "model": geom.name,
                "rho": vars.rho.to_f64(),
                "lambda": vars.lambda,
                "kappa": vars.kappa.to_f64(),
                "regime": report.regime.to_string(),
                "group_m_required": report.group_m_required,
                "split_k_eligible": report.split_k_eligible,
                "predicted_modes": modes,
                "pool_size": pool.len(),
                "group_m_variants": group_m,
                "split_k_variants": split_k,
                "path": layout.pool(),
            }),
        )?;
    } else {
        emit(
            out,
            &format!(
                "{}: E={} N={} K={} top_k={}\n\
                 rho={} lambda={} kappa={} -> regime {}, {}\n\
                 {} configs ({} GROUP_M variants, {} split-K variants) -> {}\n",
                geom.name,
                geom.experts,
                geom.n,
                geom.k,
                geom.top_k,
                vars.rho,
                vars.lambda,
                vars.kappa,
                report.regime,
                modes,
                pool.len(),
                group_m,
                split_k,
                layout.pool().display()
            ),
        )?;
    }
    Ok(EXIT_OK)
}

fn plan_from(args: &PlanArgs) -> ProfilingPlan {
    let d = ProfilingPlan::default();
    ProfilingPlan {
        batch_sizes: args.batch_sizes.clone().unwrap_or(d.batch_sizes),
        betas: args.betas.clone().unwrap_or(d.betas),
        seeds_per_point: args.replicates.unwrap_or(d.seeds_per_point),
    }
}

fn grid_from(args: &GridArgs) -> TestGrid {
    let d = TestGrid::default();
    TestGrid {
        batch_sizes: args.batch_sizes.clone().unwrap_or(d.batch_sizes),
        betas: args.betas.clone().unwrap_or(d.betas),
        seeds_per_point: args.replicates.unwrap_or(d.seeds_per_point),
    }
}

pub(super) fn profile(ctx: &Context, model: &str, oracle: &OracleSpec, plan: &PlanArgs, out: Out) -> Result<i32> {
    let (geom, layout) = ctx.model(model)?;
    let pool = load_pool(&layout)?;
    let _lock = layout.lock()?;
    let started = Instant::now();
    let (total, new, source) = match oracle {
        OracleSpec::Trace(path) => {
            let trace = load_trace(path, &geom.name, Some(pool.len()))?;
            write_trace(&trace, &layout.trace())?;
            (trace.samples.len(), trace.samples.len(), format!("trace {}", path.display()))
        }
        OracleSpec::Sim(_) => {
            let sim = ctx.simulator(oracle)?;
            let plan = plan_from(plan);
            let written = profile_to_file(&pool, &geom, &plan, &sim, ctx.seed, &layout.trace())?;
            let total = pool.len() * plan.points().len() * plan.seeds_per_point as usize;
            (total, written, "simulator".to_string())
        }
    };
    let secs = started.elapsed().as_secs_f64();
    if ctx.json {
        emit_json(
            out,
            &json!({ "model": geom.name, "samples": total, "new_samples": new, "source": source,
                     "seconds": secs, "path": layout.trace() }),
        )?;
    } else {
        emit(
            out,
            &format!(
                "{}: {total} samples ({new} new) from {source} in {secs:.2} s -> {}\n",
                geom.name,
                layout.trace().display()
            ),
        )?;
    }
    Ok(EXIT_OK)
}

pub(super) fn fit(ctx: &Context, model: &str, variant: Variant, out: Out) -> Result<i32> {
    let (geom, layout) = ctx.model(model)?;
    let pool = load_pool(&layout)?;
    let trace = load_trace(WorkspaceLayout::require(&layout.trace())?, &geom.name, Some(pool.len()))?;
    let _lock = layout.lock()?;

    let mut fitted: Vec<(usize, FitReport)> = Vec::new();
    let mut excluded: Vec<(usize, String)> = Vec::new();
    for (id, r) in fit_all(&trace.samples, pool.len(), ctx.hw.sm_count, variant).into_iter().enumerate() {
        match r {
            Ok(rep) => fitted.push((id, rep)),
            Err(e) => excluded.push((id, e.to_string())),
        }
    }
    if fitted.is_empty() {
        return Err(Error::EmptyTable);
    }
    let store = CoefficientStore::from_reports(&geom.name, ctx.hw.sm_count, &fitted);
    write_file(&layout.coeffs(), &store.to_json())?;

    let r2: Vec<f64> = fitted.iter().map(|(_, r)| r.r_squared).filter(|v| v.is_finite()).collect();
    let r2_min = r2.iter().cloned().fold(f64::INFINITY, f64::min);
    let r2_median = median(r2).unwrap_or(f64::NAN);
    let uses_log = fitted.iter().filter(|(_, r)| r.coefficients.uses_log).count();
    let flagged = fitted.iter().filter(|(_, r)| r.condition_flag).count();

    if ctx.json {
        let excluded_json: Vec<_> = excluded.iter().map(|(id, why)| json!({ "config_id": id, "reason": why })).collect();
        emit_json(
            out,
            &json!({
                "model": geom.name, "variant": variant, "fitted": fitted.len(), "excluded": excluded_json,
                "r2_min": r2_min, "r2_median": r2_median, "uses_log": uses_log,
                "condition_flagged": flagged, "path": layout.coeffs(),
            }),
        )?;
    } else {
        let mut text = format!(
            "{}: fitted {} of {} configs with {variant}; R^2 min {r2_min:.4}, median {r2_median:.4}; \
             log term active in {uses_log}; {flagged} rank-deficient fits -> {}\n",
            geom.name,
            fitted.len(),
            pool.len(),
            layout.coeffs().display()
        );
        for (id, why) in &excluded {
            writeln!(text, "excluded config {id}: {why}").unwrap();
        }
        emit(out, &text)?;
    }
    Ok(EXIT_OK)
}

/// Reads one histogram row. Accepts a bare row of counts or a CSV whose
/// header names the count columns `c_0 .. c_{E-1}` (the `sample-routing`
/// output format).
fn read_histogram(path: &Path, row: usize) -> Result<ExpertHistogram> {
    let context = path.display().to_string();
    let mut text = String::new();
    if path == Path::new("-") {
        std::io::stdin().read_to_string(&mut text).map_err(|e| Error::io("<stdin>", e))?;
    } else {
        text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Schema { context: context.clone(), row: e.position().map_or(0, |p| p.line() as usize), message: e.to_string() })?;
    let Some(first) = records.first() else {
        return Err(Error::Schema { context, row: 1, message: "file is empty".into() });
    };
    let has_header = first.get(0).is_some_and(|f| f.parse::<u64>().is_err());
    let columns: Vec<usize> = if has_header {
        let cols: Vec<usize> = first.iter().enumerate().filter(|(_, h)| h.starts_with("c_")).map(|(i, _)| i).collect();
        if cols.is_empty() {
            return Err(Error::Schema { context, row: 1, message: "header has no c_<expert> count columns".into() });
        }
        cols
    } else {
        (0..first.len()).collect()
    };
    let data = &records[usize::from(has_header)..];
    let record = data.get(row).ok_or_else(|| Error::Schema {
        context: context.clone(),
        row: row + 1,
        message: format!("requested data row {row} but the file has {}", data.len()),
    })?;
    let line = record.position().map_or(row + 1, |p| p.line() as usize);
    let counts = columns
        .iter()
        .map(|&i| {
            let field = record.get(i).unwrap_or("");
            field.parse::<u64>().map_err(|e| Error::Schema {
                context: context.clone(),
                row: line,
                message: format!("column {} ({field:?}): {e}", i + 1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ExpertHistogram::new(counts)
}

pub(super) fn dispatch(ctx: &Context, model: &str, histogram: &Path, row: usize, out: Out) -> Result<i32> {
    let (geom, layout) = ctx.model(model)?;
    let table = load_table(&geom, &layout, load_pool(&layout)?)?;
    let hist = read_histogram(histogram, row)?;
    let (id, predicted, g) = table.select_uncached(&hist)?;
    let config = table.pool.get(id).expect("selected id is in the pool");
    let omega = g as f64 / table.sm_count as f64;
    let beta = balancedness(&hist).ok();
    if ctx.json {
        emit_json(
            out,
            &json!({ "model": geom.name, "config": config, "predicted_us": predicted, "grid": g,
                     "omega": omega, "assignments": hist.total(), "beta": beta }),
        )?;
    } else {
        let beta_text = beta.map_or("n/a".to_string(), |b| format!("{b:.3}"));
        emit(
            out,
            &format!(
                "config {id}: {}\npredicted {predicted:.3} us, grid {g} CTAs, omega {omega:.3} (M={}, beta {beta_text})\n",
                config_fields(config),
                hist.total()
            ),
        )?;
    }
    Ok(EXIT_OK)
}

pub(super) fn evaluate(
    ctx: &Context,
    model: &str,
    mode: EvalMode,
    oracle: &OracleSpec,
    grid: &GridArgs,
    curve_batch: u64,
    out: Out,
) -> Result<i32> {
    let (geom, layout) = ctx.model(model)?;
    let pool = load_pool(&layout)?;
    let sim = ctx.simulator(oracle)?;
    let grid = grid_from(grid);
    let _lock = layout.lock()?;
    match mode {
        EvalMode::Regret => eval_regret(ctx, &geom, &layout, pool, &sim, &grid, out),
        EvalMode::Speedup => eval_speedup(ctx, &geom, &layout, pool, &sim, &grid, out),
        EvalMode::Ablation => eval_ablation(ctx, &geom, &layout, pool, &sim, &grid, out),
        EvalMode::Curves => eval_curves(ctx, &geom, &layout, pool, &sim, curve_batch, out),
    }
}

fn eval_regret(
    ctx: &Context,
    geom: &MoeGeometry,
    layout: &WorkspaceLayout,
    pool: ConfigPool,
    sim: &Simulator,
    grid: &TestGrid,
    out: Out,
) -> Result<i32> {
    let table = load_table(geom, layout, pool)?;
    let report = evaluate_regret(&table, sim, grid, ctx.seed)?;
    write_file(&layout.report("regret.csv"), &report.to_csv())?;
    write_file(&layout.report("regret.json"), &report.aggregate_json())?;
    if ctx.json {
        emit(out, &format!("{}\n", report.aggregate_json()))?;
    } else {
        let a = report.aggregate;
        emit(
            out,
            &format!(
                "{}: regret over {} points: mean {:.3}% (se {:.3}%), max {:.3}%; {} unreachable points skipped\n",
                geom.name,
                a.n,
                100.0 * a.mean,
                100.0 * a.se,
                100.0 * a.max,
                report.skipped.len()
            ),
        )?;
    }
    Ok(EXIT_OK)
}

fn eval_speedup(
    ctx: &Context,
    geom: &MoeGeometry,
    layout: &WorkspaceLayout,
    pool: ConfigPool,
    sim: &Simulator,
    grid: &TestGrid,
    out: Out,
) -> Result<i32> {
    let table = load_table(geom, layout, pool)?;
    let report = speedup_ra_vs_static(&table, sim, grid, ctx.seed)?;
    write_file(&layout.report("speedup.csv"), &report.to_csv())?;
    write_file(&layout.report("speedup.json"), &report.summary_json())?;
    if ctx.json {
        emit(out, &format!("{}\n", report.summary_json()))?;
    } else {
        let mut text = format!("{}: routing-aware vs static\n", geom.name);
        for b in &report.by_beta {
            writeln!(text, "beta {:.1}: geomean {:.3}x (min {:.3}, max {:.3}, n={})", b.beta, b.geomean, b.min, b.max, b.n)
                .unwrap();
        }
        if !report.skipped.is_empty() {
            writeln!(text, "{} unreachable points skipped", report.skipped.len()).unwrap();
        }
        emit(out, &text)?;
    }
    Ok(EXIT_OK)
}

fn eval_ablation(
    ctx: &Context,
    geom: &MoeGeometry,
    layout: &WorkspaceLayout,
    pool: ConfigPool,
    sim: &Simulator,
    grid: &TestGrid,
    out: Out,
) -> Result<i32> {
    let trace = load_trace(WorkspaceLayout::require(&layout.trace())?, &geom.name, Some(pool.len()))?;
    let mut csv = String::from("variant,mean,se,max,n,fitted\n");
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let entries: Vec<_> = fit_all(&trace.samples, pool.len(), ctx.hw.sm_count, variant)
            .into_iter()
            .enumerate()
            .filter_map(|(id, r)| r.ok().map(|rep| (id, rep.coefficients)))
            .collect();
        let fitted = entries.len();
        let table = DispatchTable::new(geom, pool.clone(), entries, ctx.hw.sm_count)?;
        let a = evaluate_regret(&table, sim, grid, ctx.seed)?.aggregate;
        writeln!(csv, "{variant},{:.6},{:.6},{:.6},{},{fitted}", a.mean, a.se, a.max, a.n).unwrap();
        rows.push(json!({ "variant": variant, "mean": a.mean, "se": a.se, "max": a.max, "n": a.n, "fitted": fitted }));
    }
    write_file(&layout.report("ablation.csv"), &csv)?;
    if ctx.json {
        emit_json(out, &json!(rows))?;
    } else {
        emit(out, &format!("{}: cost model ablation\n{csv}", geom.name))?;
    }
    Ok(EXIT_OK)
}

/// The fastest config with each reference bm under uniform routing at `s`.
fn representatives<'a>(pool: &'a ConfigPool, geom: &MoeGeometry, sim: &Simulator, s: u64) -> Vec<&'a TileConfig> {
    let hist = ExpertHistogram::uniform(geom.experts as usize, s * geom.top_k as u64);
    CURVE_BMS
        .iter()
        .filter_map(|&bm| {
            pool.iter().filter(|c| c.bm == bm).min_by(|a, b| {
                let ta = sim.time_at_grid(&sim.terms(a, geom), grid_size(a, &hist, geom));
                let tb = sim.time_at_grid(&sim.terms(b, geom), grid_size(b, &hist, geom));
                ta.total_cmp(&tb)
            })
        })
        .collect()
}

fn eval_curves(
    ctx: &Context,
    geom: &MoeGeometry,
    layout: &WorkspaceLayout,
    pool: ConfigPool,
    sim: &Simulator,
    curve_batch: u64,
    out: Out,
) -> Result<i32> {
    let sm = sim.params.sm_count as u64;
    let reference = pool.get(static_best(&pool, geom, sim, &[curve_batch])?).expect("static best is in the pool");

    let mut omega_csv = String::from("beta,mean_omega,std_omega\n");
    for i in 1..=10u32 {
        let beta = f64::from(i) / 10.0;
        let mut omegas = Vec::new();
        for r in 0..CURVE_DRAWS {
            let seed = task_seed(ctx.seed, &[CURVE_STREAM, curve_batch, beta.to_bits(), r]);
            match sample_histogram(geom.experts as usize, curve_batch, geom.top_k, beta, seed) {
                Ok(s) => omegas.push(grid_size(reference, &s.histogram, geom) as f64 / sm as f64),
                Err(Error::UnreachableBeta { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        if omegas.is_empty() {
            continue;
        }
        let n = omegas.len() as f64;
        let mean = omegas.iter().sum::<f64>() / n;
        let std = (omegas.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / n).sqrt();
        writeln!(omega_csv, "{beta:.1},{mean:.6},{std:.6}").unwrap();
    }

    let reps = representatives(&pool, geom, sim, curve_batch);
    let mut stair_csv = String::from("config_id,bm,g,time_us\n");
    for c in &reps {
        let terms = sim.terms(c, geom);
        for g in 0..=3 * sm {
            writeln!(stair_csv, "{},{},{g},{:.6}", c.id, c.bm, sim.time_at_grid(&terms, g)).unwrap();
        }
    }

    let table = if layout.coeffs().is_file() { Some(load_table(geom, layout, pool.clone())?) } else { None };
    let mut cross_csv = String::from("S,bm,config_id,time_us,predicted_us\n");
    for s in CROSSOVER_BATCHES {
        let hist = ExpertHistogram::uniform(geom.experts as usize, s * geom.top_k as u64);
        for rep in representatives(&pool, geom, sim, s) {
            let g = grid_size(rep, &hist, geom);
            let time = sim.time_at_grid(&sim.terms(rep, geom), g);
            let predicted = table
                .as_ref()
                .and_then(|t| t.coefficients(rep.id).map(|c| format!("{:.6}", c.predict(g, t.sm_count))))
                .unwrap_or_default();
            writeln!(cross_csv, "{s},{},{},{time:.6},{predicted}", rep.bm, rep.id).unwrap();
        }
    }

    let files = [("omega_beta.csv", omega_csv), ("staircase.csv", stair_csv), ("crossover.csv", cross_csv)];
    for (name, body) in &files {
        write_file(&layout.report(name), body)?;
    }
    let paths: Vec<PathBuf> = files.iter().map(|(name, _)| layout.report(name)).collect();
    if ctx.json {
        emit_json(out, &json!({ "model": geom.name, "reference_config": reference.id, "files": paths }))?;
    } else {
        let mut text = format!("{}: curves for reference config {} at S={curve_batch}\n", geom.name, reference.id);
        for p in &paths {
            writeln!(text, "wrote {}", p.display()).unwrap();
        }
        emit(out, &text)?;
    }
    Ok(EXIT_OK)
}

pub(super) fn classify(ctx: &Context, check: bool, out: Out) -> Result<i32> {
    let mut rows = Vec::new();
    let mut text = String::from("model          rho     lambda  kappa   regime  modes\n");
    let mut mismatches = Vec::new();
    for geom in &ctx.catalog {
        let vars = region_variables(geom);
        let report = classify_regime(&vars);
        let modes = report.predicted_modes(&vars, ctx.hw.sm_count).to_string();
        writeln!(
            text,
            "{:<14} {:<7} {:<7} {:<7} {:<7} {modes}",
            geom.name,
            vars.rho.to_string(),
            vars.lambda,
            vars.kappa.to_string(),
            report.regime.to_string()
        )
        .unwrap();
        if check {
            match EXPECTED_REGIONS.iter().find(|e| e.name == geom.name) {
                None => mismatches.push(format!("{}: not in the reference table", geom.name)),
                Some(e) => {
                    let got = (vars.rho.to_string(), vars.lambda, vars.kappa.to_string(), report.regime, modes.as_str());
                    let want = (e.rho.to_string(), e.lambda, e.kappa.to_string(), e.regime, e.modes);
                    if got != want {
                        mismatches.push(format!("{}: got {got:?}, expected {want:?}", geom.name));
                    }
                }
            }
        }
        rows.push(json!({
            "model": geom.name, "rho": vars.rho.to_f64(), "lambda": vars.lambda, "kappa": vars.kappa.to_f64(),
            "regime": report.regime.to_string(), "predicted_modes": modes,
        }));
    }
    if check {
        for e in &EXPECTED_REGIONS {
            if !ctx.catalog.iter().any(|g| g.name == e.name) {
                mismatches.push(format!("{}: missing from the catalog", e.name));
            }
        }
    }
    if ctx.json {
        let mut v = json!({ "models": rows });
        if check {
            v["mismatches"] = json!(mismatches);
        }
        emit_json(out, &v)?;
    } else {
        if check {
            if mismatches.is_empty() {
                writeln!(text, "check: {}/{} rows match", EXPECTED_REGIONS.len(), EXPECTED_REGIONS.len()).unwrap();
            } else {
                for m in &mismatches {
                    writeln!(text, "mismatch: {m}").unwrap();
                }
            }
        }
        emit(out, &text)?;
    }
    Ok(if mismatches.is_empty() { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub(super) struct RoutingRequest<'a> {
    pub model: Option<&'a str>,
    pub experts: Option<usize>,
    pub top_k: Option<u32>,
    pub batch: u64,
    pub beta: f64,
    pub count: u64,
}

pub(super) fn sample_routing(ctx: &Context, req: &RoutingRequest, out: Out) -> Result<i32> {
    let (experts, top_k) = match (req.model, req.experts, req.top_k) {
        (Some(m), _, _) => {
            let g = find_model(&ctx.catalog, m)?;
            (g.experts as usize, req.top_k.unwrap_or(g.top_k))
        }
        (None, Some(e), Some(k)) => (e, k),
        _ => return Err(Error::validation("sample-routing", "give --model, or --experts with --top-k")),
    };
    let mut text = csv_header(experts);
    text.push('\n');
    for i in 0..req.count {
        let seed = task_seed(ctx.seed, &[SAMPLE_STREAM, req.batch, req.beta.to_bits(), i]);
        let sample = sample_histogram(experts, req.batch, top_k, req.beta, seed)?;
        text.push_str(&sample.csv_line());
        text.push('\n');
    }
    emit(out, &text)?;
    Ok(EXIT_OK)
}
