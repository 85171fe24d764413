//! Runtime configuration selection from a routing histogram, the per-step
//! selection cache, the static baseline and the regret and speedup harness.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config_space::{ConfigPool, TileConfig};
use crate::cost_model::CostCoefficients;
use crate::error::{Error, Result};
use crate::model_catalog::{region_variables, MoeGeometry, RegionVariables, SPLIT_K_MAX_OMEGA, SPLIT_K_MIN_KAPPA};
use crate::routing::{grid_size, sample_histogram, ExpertHistogram, RoutingSample};
use crate::timing_oracle::{task_seed, Simulator};

/// Split-K is considered only for deep reductions on a mostly idle machine.
pub fn split_k_gate(vars: &RegionVariables, omega: f64) -> bool {
    vars.kappa.ge_int(SPLIT_K_MIN_KAPPA) && omega < SPLIT_K_MAX_OMEGA
}

#[derive(Debug)]
pub struct DispatchTable {
    pub model: String,
    pub geom: MoeGeometry,
    pub pool: ConfigPool,
    pub sm_count: u32,
    coeffs: Vec<Option<CostCoefficients>>,
    vars: RegionVariables,
    evaluations: AtomicU64,
}

impl DispatchTable {
    /// Configs without an entry are never selected. Duplicate or unknown ids
    /// are rejected.
    pub fn new(geom: &MoeGeometry, pool: ConfigPool, entries: Vec<(usize, CostCoefficients)>, sm_count: u32) -> Result<Self> {
        let mut coeffs = vec![None; pool.len()];
        for (id, c) in entries {
            let slot = coeffs.get_mut(id).ok_or(Error::UnknownConfig(id))?;
            if slot.replace(c).is_some() {
                return Err(Error::validation("coefficient table", format!("config {id} has more than one entry")));
            }
        }
        if coeffs.iter().all(Option::is_none) {
            return Err(Error::EmptyTable);
        }
        Ok(DispatchTable {
            model: geom.name.clone(),
            geom: geom.clone(),
            pool,
            sm_count,
            coeffs,
            vars: region_variables(geom),
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn coefficients(&self, id: usize) -> Option<&CostCoefficients> {
        self.coeffs.get(id).and_then(Option::as_ref)
    }

    pub fn is_complete(&self) -> bool {
        self.coeffs.iter().all(Option::is_some)
    }

    /// Number of cost-model evaluations performed so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    fn check_histogram(&self, hist: &ExpertHistogram) -> Result<()> {
        if hist.experts() != self.geom.experts as usize {
            return Err(Error::HistogramLength { expected: self.geom.experts as usize, got: hist.experts() });
        }
        Ok(())
    }

    /// Whether a config may be evaluated for this histogram.
    fn admissible(&self, config: &TileConfig, g: u64) -> bool {
        if config.split_k <= 1 {
            return true;
        }
        let omega_unsplit = (g / config.split_k as u64) as f64 / self.sm_count as f64;
        split_k_gate(&self.vars, omega_unsplit)
    }

    /// Argmin of predicted time over admissible configs; ties go to the
    /// lowest id. Returns `(config_id, predicted_us, grid)`.
    pub fn select_uncached(&self, hist: &ExpertHistogram) -> Result<(usize, f64, u64)> {
        self.check_histogram(hist)?;
        let mut best: Option<(usize, f64, u64)> = None;
        let mut evaluated = 0u64;
        for config in self.pool.iter() {
            let Some(coeff) = self.coefficients(config.id) else { continue };
            let g = grid_size(config, hist, &self.geom);
            if !self.admissible(config, g) {
                continue;
            }
            let t = coeff.predict(g, self.sm_count);
            evaluated += 1;
            if best.is_none_or(|(_, bt, _)| t < bt) {
                best = Some((config.id, t, g));
            }
        }
        self.evaluations.fetch_add(evaluated, Ordering::Relaxed);
        best.ok_or(Error::EmptyTable)
    }
}

/// Selections for the current step, keyed on total assignment count.
#[derive(Debug, Default, Clone)]
pub struct StepCache {
    step: Option<u64>,
    selections: HashMap<u64, usize>,
}

impl StepCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> Option<u64> {
        self.step
    }

    pub fn len(&self) -> usize {
        self.selections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selections.is_empty()
    }
}

pub fn select_config(table: &DispatchTable, hist: &ExpertHistogram, cache: &mut StepCache, step_id: u64) -> Result<usize> {
    if cache.step != Some(step_id) {
        cache.step = Some(step_id);
        cache.selections.clear();
    }
    let m = hist.total();
    if let Some(&id) = cache.selections.get(&m) {
        table.check_histogram(hist)?;
        return Ok(id);
    }
    let (id, _, _) = table.select_uncached(hist)?;
    cache.selections.insert(m, id);
    Ok(id)
}

fn argmin(times: &[f64]) -> usize {
    let mut best = 0;
    for (i, &t) in times.iter().enumerate() {
        if t < times[best] {
            best = i;
        }
    }
    best
}

/// Config minimizing the geometric-mean oracle time over `s_grid` under exact
/// uniform routing. Ties go to the lowest id.
pub fn static_best(pool: &ConfigPool, geom: &MoeGeometry, sim: &Simulator, s_grid: &[u64]) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let hists: Vec<ExpertHistogram> = s_grid
        .iter()
        .map(|&s| ExpertHistogram::uniform(geom.experts as usize, s * geom.top_k as u64))
        .collect();
    let log_means: Vec<f64> = pool
        .configs()
        .par_iter()
        .map(|c| {
            let terms = sim.terms(c, geom);
            let sum: f64 = hists.iter().map(|h| sim.time_at_grid(&terms, grid_size(c, h, geom)).ln()).sum();
            sum / hists.len().max(1) as f64
        })
        .collect();
    Ok(argmin(&log_means))
}

/// Evaluation operating points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestGrid {
    pub batch_sizes: Vec<u64>,
    pub betas: Vec<f64>,
    pub seeds_per_point: u32,
}

impl Default for TestGrid {
    fn default() -> Self {
        TestGrid {
            batch_sizes: vec![8, 16, 32, 64, 128, 1024],
            betas: vec![0.2, 0.5, 0.8, 1.0],
            seeds_per_point: 2,
        }
    }
}

const EVAL_STREAM: u64 = 0x4556_414c;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestPoint {
    #[serde(rename = "S")]
    pub s: u64,
    pub beta: f64,
    pub seed: u64,
}

impl TestGrid {
    pub fn points(&self, master_seed: u64) -> Vec<TestPoint> {
        let mut out = Vec::new();
        for &s in &self.batch_sizes {
            for &beta in &self.betas {
                for r in 0..self.seeds_per_point {
                    let seed = task_seed(master_seed, &[EVAL_STREAM, s, beta.to_bits(), r as u64]);
                    out.push(TestPoint { s, beta, seed });
                }
            }
        }
        out
    }
}

/// Samples a test point's histogram; `None` when its balancedness target is
/// out of reach for the point's assignment count.
fn sample_point(geom: &MoeGeometry, p: &TestPoint) -> Result<Option<RoutingSample>> {
    match sample_histogram(geom.experts as usize, p.s, geom.top_k, p.beta, p.seed) {
        Ok(r) => Ok(Some(r)),
        Err(Error::UnreachableBeta { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn split_outcomes<T>(points: &[TestPoint], outcomes: Vec<Option<T>>) -> (Vec<T>, Vec<TestPoint>) {
    let mut kept = Vec::with_capacity(outcomes.len());
    let mut skipped = Vec::new();
    for (p, o) in points.iter().zip(outcomes) {
        match o {
            Some(r) => kept.push(r),
            None => skipped.push(*p),
        }
    }
    (kept, skipped)
}

/// Oracle times for every pool config on one point's histogram, all sharing
/// the point's noise draw.
fn point_times(pool: &ConfigPool, geom: &MoeGeometry, sim: &Simulator, hist: &ExpertHistogram, seed: u64) -> Vec<f64> {
    let noise = sim.noise_factor(task_seed(seed, &[EVAL_STREAM]));
    pool.iter()
        .map(|c| sim.time_at_grid(&sim.terms(c, geom), grid_size(c, hist, geom)) * noise)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    #[serde(rename = "S")]
    pub s: u64,
    pub beta: f64,
    pub seed: u64,
    pub selected_id: usize,
    pub best_id: usize,
    pub selected_us: f64,
    pub best_us: f64,
    pub regret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub se: f64,
    pub max: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Aggregate {
        let n = values.len();
        if n == 0 {
            return Aggregate { mean: 0.0, se: 0.0, max: 0.0, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Aggregate { mean, se: (var / n as f64).sqrt(), max, n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretReport {
    pub records: Vec<RegretRecord>,
    pub aggregate: Aggregate,
    /// Points whose target balancedness the sampler cannot reach with this
    /// many assignments. They are reported rather than silently dropped.
    pub skipped: Vec<TestPoint>,
}

impl RegretReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("S,beta,seed,selected_id,best_id,selected_us,best_us,regret\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6}\n",
                r.s, r.beta, r.seed, r.selected_id, r.best_id, r.selected_us, r.best_us, r.regret
            ));
        }
        out
    }

    pub fn aggregate_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({ "aggregate": self.aggregate, "skipped": self.skipped }))
            .expect("aggregate serializes")
    }
}

pub fn evaluate_regret(table: &DispatchTable, sim: &Simulator, grid: &TestGrid, master_seed: u64) -> Result<RegretReport> {
    let points = grid.points(master_seed);
    if points.is_empty() {
        return Err(Error::validation("test grid", "no test points"));
    }
    let geom = &table.geom;
    let outcomes = points
        .par_iter()
        .map(|p| {
            let Some(routing) = sample_point(geom, p)? else { return Ok(None) };
            let times = point_times(&table.pool, geom, sim, &routing.histogram, p.seed);
            let best_id = argmin(&times);
            let mut cache = StepCache::new();
            let selected_id = select_config(table, &routing.histogram, &mut cache, 0)?;
            let (selected_us, best_us) = (times[selected_id], times[best_id]);
            Ok(Some(RegretRecord { s: p.s, beta: p.beta, seed: p.seed, selected_id, best_id, selected_us, best_us, regret: selected_us / best_us - 1.0 }))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, skipped) = split_outcomes(&points, outcomes);
    if records.is_empty() {
        return Err(Error::validation("test grid", "every test point has an unreachable balancedness target"));
    }
    let regrets: Vec<f64> = records.iter().map(|r| r.regret).collect();
    Ok(RegretReport { aggregate: Aggregate::of(&regrets), records, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRecord {
    #[serde(rename = "S")]
    pub s: u64,
    pub beta: f64,
    pub seed: u64,
    pub static_id: usize,
    pub ra_id: usize,
    pub static_us: f64,
    pub ra_us: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSummary {
    pub beta: f64,
    pub geomean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupReport {
    pub records: Vec<SpeedupRecord>,
    pub by_beta: Vec<BetaSummary>,
    pub skipped: Vec<TestPoint>,
}

impl SpeedupReport {
    pub fn summary(&self, beta: f64) -> Option<&BetaSummary> {
        self.by_beta.iter().find(|b| b.beta == beta)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("S,beta,seed,static_id,ra_id,static_us,ra_us,ratio\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6}\n",
                r.s, r.beta, r.seed, r.static_id, r.ra_id, r.static_us, r.ra_us, r.ratio
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({ "by_beta": self.by_beta, "skipped": self.skipped }))
            .expect("summary serializes")
    }
}

/// Routing-aware selection against the static baseline. The static config is
/// the uniform-routing optimum at each point's batch size.
pub fn speedup_ra_vs_static(table: &DispatchTable, sim: &Simulator, grid: &TestGrid, master_seed: u64) -> Result<SpeedupReport> {
    let geom = &table.geom;
    let mut static_ids = HashMap::new();
    for &s in &grid.batch_sizes {
        static_ids.insert(s, static_best(&table.pool, geom, sim, &[s])?);
    }
    let points = grid.points(master_seed);
    let outcomes = points
        .par_iter()
        .map(|p| {
            let Some(routing) = sample_point(geom, p)? else { return Ok(None) };
            let times = point_times(&table.pool, geom, sim, &routing.histogram, p.seed);
            let mut cache = StepCache::new();
            let ra_id = select_config(table, &routing.histogram, &mut cache, 0)?;
            let static_id = static_ids[&p.s];
            let (static_us, ra_us) = (times[static_id], times[ra_id]);
            Ok(Some(SpeedupRecord { s: p.s, beta: p.beta, seed: p.seed, static_id, ra_id, static_us, ra_us, ratio: static_us / ra_us }))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, skipped) = split_outcomes(&points, outcomes);
    let by_beta = grid
        .betas
        .iter()
        .map(|&beta| {
            let ratios: Vec<f64> = records.iter().filter(|r| r.beta == beta).map(|r| r.ratio).collect();
            let n = ratios.len();
            let geomean = (ratios.iter().map(|r| r.ln()).sum::<f64>() / n.max(1) as f64).exp();
            BetaSummary {
                beta,
                geomean,
                min: ratios.iter().cloned().fold(f64::INFINITY, f64::min),
                max: ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                n,
            }
        })
        .collect();
    Ok(SpeedupReport { records, by_beta, skipped })
}
