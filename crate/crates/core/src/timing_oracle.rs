//! Ground-truth kernel times: a wave-quantization simulator and ingestion of
//! externally measured timing traces.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config_space::{ConfigPool, TileConfig};
use crate::cost_model::{ProfilingPlan, ProfilingSample};
use crate::error::{Error, Result};
use crate::model_catalog::{region_variables, MoeGeometry, GROUP_M_THRESHOLD, TILE_K_REF};
use crate::routing::{grid_size, sample_histogram, ExpertHistogram};

pub const TRACE_HEADER: &str = "config_id,S,beta_target,seed,grid,time_us";

/// Noise draws are clipped to this many standard deviations so simulated
/// times stay strictly positive.
const NOISE_CLIP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub sm_count: u32,
    pub elem_size: u32,
    pub startup_base_us: f64,
    pub startup_per_stage_us: f64,
    /// Per-WGMMA-tile time; a wave costs `N·K / (ttn·128)` of these.
    pub wgmma_ns_per_tile: f64,
    /// Bytes per second.
    pub hbm_bw: f64,
    pub l2_thrash_multiplier: f64,
    pub groupm_overhead_frac: f64,
    pub splitk_overhead_us: f64,
    /// Fraction of a wave's work that split-K cannot divide (epilogue and
    /// partial-sum reduction).
    pub splitk_serial_frac: f64,
    pub subwave_exponent: f64,
    /// Share of a full wave's cost paid by any non-empty partial wave.
    pub subwave_floor: f64,
    pub noise_cv: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            sm_count: 132,
            elem_size: 1,
            startup_base_us: 14.0,
            startup_per_stage_us: 2.0,
            wgmma_ns_per_tile: 130.0,
            hbm_bw: 4.8e12,
            l2_thrash_multiplier: 2.0,
            groupm_overhead_frac: 0.02,
            splitk_overhead_us: 12.5,
            splitk_serial_frac: 0.2,
            subwave_exponent: 0.7,
            subwave_floor: 0.5,
            noise_cv: 0.01,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation("oracle params", m));
        let positive = [
            ("startup_base_us", self.startup_base_us),
            ("startup_per_stage_us", self.startup_per_stage_us),
            ("wgmma_ns_per_tile", self.wgmma_ns_per_tile),
            ("hbm_bw", self.hbm_bw),
            ("l2_thrash_multiplier", self.l2_thrash_multiplier),
            ("groupm_overhead_frac", self.groupm_overhead_frac),
            ("splitk_overhead_us", self.splitk_overhead_us),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if self.sm_count == 0 || self.elem_size == 0 {
            return bad("sm_count and elem_size must be >= 1".into());
        }
        if !(0.0..=0.05).contains(&self.noise_cv) {
            return bad(format!("noise_cv {} outside [0, 0.05]", self.noise_cv));
        }
        if !(self.subwave_exponent > 0.0 && self.subwave_exponent <= 1.0) {
            return bad(format!("subwave_exponent {} outside (0, 1]", self.subwave_exponent));
        }
        if !(0.0..1.0).contains(&self.subwave_floor) {
            return bad(format!("subwave_floor {} outside [0, 1)", self.subwave_floor));
        }
        if !(0.0..1.0).contains(&self.splitk_serial_frac) {
            return bad(format!("splitk_serial_frac {} outside [0, 1)", self.splitk_serial_frac));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: OracleParams = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), &e))?;
        p.validate()?;
        Ok(p)
    }
}

/// Per-config terms of the simulated time, before noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimTerms {
    pub startup_us: f64,
    /// Cost of one full wave.
    pub wave_cost_us: f64,
    /// Memory traffic per CTA.
    pub traffic_us: f64,
    pub splitk_overhead_us: f64,
    /// Multiplicative GROUP_M bookkeeping cost where it is not needed.
    pub groupm_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulator {
    pub params: OracleParams,
}

impl Simulator {
    pub fn new(params: OracleParams) -> Result<Self> {
        params.validate()?;
        Ok(Simulator { params })
    }

    pub fn terms(&self, config: &TileConfig, geom: &MoeGeometry) -> SimTerms {
        let p = &self.params;
        let vars = region_variables(geom);
        let l2_thrash = vars.l2_pressure().gt_int(GROUP_M_THRESHOLD);
        let sk = config.split_k as f64;
        let ttn = config.ttn as f64;
        let k = geom.k as f64;

        let elem = p.elem_size as f64;
        let tiles_per_cta = geom.n as f64 * k / (ttn * TILE_K_REF as f64);
        let k_share = p.splitk_serial_frac + (1.0 - p.splitk_serial_frac) / sk;
        let wave_cost_us = tiles_per_cta * p.wgmma_ns_per_tile / 1000.0 * k_share;

        let thrash = if l2_thrash && !config.group_m { p.l2_thrash_multiplier } else { 1.0 };
        let bytes = (ttn * thrash + config.bm as f64) * (k / sk) * elem;
        let traffic_us = bytes / p.hbm_bw * 1e6;

        SimTerms {
            startup_us: p.startup_base_us + p.startup_per_stage_us * config.stg as f64,
            wave_cost_us,
            traffic_us,
            splitk_overhead_us: if config.split_k > 1 { p.splitk_overhead_us } else { 0.0 },
            groupm_factor: if config.group_m && !l2_thrash { 1.0 + p.groupm_overhead_frac } else { 1.0 },
        }
    }

    /// Wave-count multiplier: 0 for an empty grid, a concave ramp from the
    /// floor to 1 inside the first wave, then whole waves.
    pub fn wave_shape(&self, g: u64) -> f64 {
        let sm = self.params.sm_count as u64;
        if g == 0 {
            0.0
        } else if g < sm {
            let f0 = self.params.subwave_floor;
            f0 + (1.0 - f0) * (g as f64 / sm as f64).powf(self.params.subwave_exponent)
        } else {
            g.div_ceil(sm) as f64
        }
    }

    /// Noise-free time for a given grid size.
    pub fn time_at_grid(&self, terms: &SimTerms, g: u64) -> f64 {
        let t = terms.startup_us + terms.wave_cost_us * self.wave_shape(g) + terms.traffic_us * g as f64 + terms.splitk_overhead_us;
        t * terms.groupm_factor
    }

    /// Multiplicative noise factor for a seed.
    pub fn noise_factor(&self, seed: u64) -> f64 {
        if self.params.noise_cv == 0.0 {
            return 1.0;
        }
        let z: f64 = StandardNormal.sample(&mut ChaCha8Rng::seed_from_u64(seed));
        1.0 + self.params.noise_cv * z.clamp(-NOISE_CLIP, NOISE_CLIP)
    }

    pub fn simulate_time(&self, config: &TileConfig, hist: &ExpertHistogram, geom: &MoeGeometry, seed: u64) -> f64 {
        let g = grid_size(config, hist, geom);
        self.time_at_grid(&self.terms(config, geom), g) * self.noise_factor(seed)
    }
}

pub fn simulate_time(config: &TileConfig, hist: &ExpertHistogram, geom: &MoeGeometry, params: &OracleParams, seed: u64) -> f64 {
    Simulator { params: params.clone() }.simulate_time(config, hist, geom, seed)
}

/// Derives an independent task seed from the master seed and task indices.
pub fn task_seed(master: u64, indices: &[u64]) -> u64 {
    indices.iter().fold(master, |acc, &i| {
        ChaCha8Rng::seed_from_u64(acc ^ i.rotate_left(17)).next_u64()
    })
}

const HIST_STREAM: u64 = 0x4849_5354;
const NOISE_STREAM: u64 = 0x4e4f_4953;

/// Histogram seed for one profiling point replicate; shared by every config.
pub fn histogram_seed(master: u64, s: u64, beta: f64, replicate: u32) -> u64 {
    task_seed(master, &[HIST_STREAM, s, beta.to_bits(), replicate as u64])
}

pub fn noise_seed(histogram_seed: u64, config_id: usize) -> u64 {
    task_seed(histogram_seed, &[NOISE_STREAM, config_id as u64])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Simulator,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingTrace {
    pub model: String,
    pub samples: Vec<ProfilingSample>,
    pub provenance: Provenance,
}

fn round_us(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

pub fn sample_csv_line(s: &ProfilingSample) -> String {
    format!("{},{},{},{},{},{:.6}", s.config_id, s.s, s.beta_target, s.seed, s.grid, s.time_us)
}

/// One profiling block: every config on the same sampled histogram.
fn profile_block(
    sim: &Simulator,
    pool: &ConfigPool,
    geom: &MoeGeometry,
    s: u64,
    beta: f64,
    seed: u64,
) -> Result<Vec<ProfilingSample>> {
    let routing = sample_histogram(geom.experts as usize, s, geom.top_k, beta, seed)?;
    Ok(pool
        .configs()
        .par_iter()
        .map(|c| {
            let g = grid_size(c, &routing.histogram, geom);
            let t = sim.time_at_grid(&sim.terms(c, geom), g) * sim.noise_factor(noise_seed(seed, c.id));
            ProfilingSample { config_id: c.id, s, beta_target: beta, seed, grid: g, time_us: round_us(t) }
        })
        .collect())
}

/// Expected row keys in file order: plan point, replicate, then config.
fn plan_blocks(plan: &ProfilingPlan, master_seed: u64) -> Vec<(u64, f64, u64)> {
    plan.points()
        .into_iter()
        .flat_map(|(s, b)| (0..plan.seeds_per_point).map(move |r| (s, b, histogram_seed(master_seed, s, b, r))))
        .collect()
}

/// Profiles every config at every plan point in memory.
pub fn profile(pool: &ConfigPool, geom: &MoeGeometry, plan: &ProfilingPlan, sim: &Simulator, master_seed: u64) -> Result<TimingTrace> {
    if plan.points().is_empty() || plan.seeds_per_point == 0 {
        return Err(Error::validation("profiling plan", "plan is empty"));
    }
    let mut samples = Vec::with_capacity(pool.len() * plan.points().len() * plan.seeds_per_point as usize);
    for (s, b, seed) in plan_blocks(plan, master_seed) {
        samples.extend(profile_block(sim, pool, geom, s, b, seed)?);
    }
    Ok(TimingTrace { model: geom.name.clone(), samples, provenance: Provenance::Simulator })
}

/// Profiles into an append-only CSV file, resuming after the last complete
/// block already present. A torn or mismatching tail is truncated first.
/// Returns the number of samples written by this call.
pub fn profile_to_file(
    pool: &ConfigPool,
    geom: &MoeGeometry,
    plan: &ProfilingPlan,
    sim: &Simulator,
    master_seed: u64,
    path: &Path,
) -> Result<usize> {
    let blocks = plan_blocks(plan, master_seed);
    if blocks.is_empty() {
        return Err(Error::validation("profiling plan", "plan is empty"));
    }
    let block_len = pool.len();
    let done_blocks = existing_complete_blocks(path, &blocks, block_len)?;

    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    if done_blocks == 0 {
        writeln!(file, "{TRACE_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    let mut written = 0;
    for &(s, b, seed) in &blocks[done_blocks..] {
        let rows = profile_block(sim, pool, geom, s, b, seed)?;
        let mut buf = String::with_capacity(rows.len() * 40);
        for r in &rows {
            buf.push_str(&sample_csv_line(r));
            buf.push('\n');
        }
        file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
        written += rows.len();
    }
    file.flush().map_err(|e| Error::io(path, e))?;
    Ok(written)
}

/// Counts leading blocks of `path` that match the plan exactly and truncates
/// the file to them (header kept when at least one block survives).
fn existing_complete_blocks(path: &Path, blocks: &[(u64, f64, u64)], block_len: usize) -> Result<usize> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut keep_bytes = 0u64;
    let mut complete = 0usize;
    let mut in_block = 0usize;
    let mut consumed = 0u64;

    let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if n > 0 && line.ends_with('\n') && line.trim_end() == TRACE_HEADER {
        consumed += n as u64;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            if n == 0 || !line.ends_with('\n') || complete >= blocks.len() {
                break;
            }
            let (s, b, seed) = blocks[complete];
            let ok = parse_row(line.trim_end(), "resume", 0)
                .map(|r| r.config_id == in_block && r.s == s && r.beta_target == b && r.seed == seed)
                .unwrap_or(false);
            if !ok {
                break;
            }
            consumed += n as u64;
            in_block += 1;
            if in_block == block_len {
                complete += 1;
                in_block = 0;
                keep_bytes = consumed;
            }
        }
    }
    let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    f.set_len(keep_bytes).map_err(|e| Error::io(path, e))?;
    Ok(complete)
}

fn parse_row(line: &str, context: &str, row: usize) -> Result<ProfilingSample> {
    let schema = |message: String| Error::Schema { context: context.to_string(), row, message };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 6 {
        return Err(schema(format!("expected 6 fields, found {}", fields.len())));
    }
    fn num<T: std::str::FromStr>(f: &str, name: &str) -> std::result::Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        f.parse::<T>().map_err(|e| format!("{name} {f:?}: {e}"))
    }
    let sample = (|| -> std::result::Result<ProfilingSample, String> {
        Ok(ProfilingSample {
            config_id: num(fields[0], "config_id")?,
            s: num(fields[1], "S")?,
            beta_target: num(fields[2], "beta_target")?,
            seed: num(fields[3], "seed")?,
            grid: num(fields[4], "grid")?,
            time_us: num(fields[5], "time_us")?,
        })
    })()
    .map_err(schema)?;
    if !(sample.time_us.is_finite() && sample.time_us > 0.0) {
        return Err(schema(format!("time_us must be positive, got {}", sample.time_us)));
    }
    if !(0.0..=1.0).contains(&sample.beta_target) {
        return Err(schema(format!("beta_target {} outside [0, 1]", sample.beta_target)));
    }
    Ok(sample)
}

/// Reads a trace CSV. Row numbers in errors count data rows from 1.
/// When `pool_size` is given, config ids at or beyond it are rejected.
pub fn load_trace(path: &Path, model: &str, pool_size: Option<usize>) -> Result<TimingTrace> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let context = path.display().to_string();
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().transpose().map_err(|e| Error::io(path, e))?.unwrap_or_default();
    if header.trim() != TRACE_HEADER {
        return Err(Error::Schema { context, row: 0, message: format!("header must be {TRACE_HEADER:?}") });
    }
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = parse_row(&line, &context, row)?;
        if let Some(n) = pool_size {
            if s.config_id >= n {
                return Err(Error::Schema { context, row, message: format!("unknown config_id {}", s.config_id) });
            }
        }
        if !seen.insert((s.config_id, s.s, s.beta_target.to_bits(), s.seed)) {
            return Err(Error::Schema {
                context,
                row,
                message: format!("duplicate sample for config {} at S={} beta={} seed={}", s.config_id, s.s, s.beta_target, s.seed),
            });
        }
        samples.push(s);
    }
    Ok(TimingTrace { model: model.to_string(), samples, provenance: Provenance::External })
}

pub fn write_trace(trace: &TimingTrace, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(trace.samples.len() * 40 + 64);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for s in &trace.samples {
        out.push_str(&sample_csv_line(s));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
