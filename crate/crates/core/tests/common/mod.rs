#![allow(dead_code)]

use ramp_core::cost_model::fit_all;
use ramp_core::timing_oracle::profile;
use ramp_core::{
    classify_regime, enumerate_configs, region_variables, ConfigPool, DispatchTable, HardwareModel, MoeGeometry,
    OracleParams, ProfilingPlan, Simulator, TileConfig, Variant,
};

pub fn pool_for(geom: &MoeGeometry) -> ConfigPool {
    enumerate_configs(geom, &HardwareModel::default(), &classify_regime(&region_variables(geom))).unwrap()
}

pub fn config(bm: u32, ttn: u32, split_k: u32) -> TileConfig {
    let (bn, wn) = if ttn == 256 { (128, 2) } else { (256, 2) };
    TileConfig { id: 0, bm, bn, wn, stg: 2, ttn, group_m: false, split_k }
}

pub fn quiet_sim() -> Simulator {
    Simulator::new(OracleParams { noise_cv: 0.0, ..OracleParams::default() }).unwrap()
}

/// Profiles `pool` on `sim` and fits every config with `variant`.
pub fn fitted_table(
    geom: &MoeGeometry,
    pool: &ConfigPool,
    sim: &Simulator,
    plan: &ProfilingPlan,
    variant: Variant,
    seed: u64,
) -> DispatchTable {
    let trace = profile(pool, geom, plan, sim, seed).unwrap();
    let fits = fit_all(&trace.samples, pool.len(), sim.params.sm_count, variant);
    let entries = fits
        .iter()
        .enumerate()
        .filter_map(|(id, f)| f.as_ref().ok().map(|f| (id, f.coefficients)))
        .collect();
    DispatchTable::new(geom, pool.clone(), entries, sim.params.sm_count).unwrap()
}

/// Tile-by-tile count of the CTAs a launch issues: every distinct
/// (expert, M-tile) pair that holds at least one row, times each N offset,
/// times each K slice.
pub fn naive_grid(counts: &[u64], bm: u32, ttn: u32, n: u64, split_k: u32) -> u64 {
    let mut ctas = 0;
    for &c in counts {
        let mut m_tiles = std::collections::BTreeSet::new();
        for row in 0..c {
            m_tiles.insert(row / bm as u64);
        }
        let mut offset = 0;
        while offset < n {
            for _slice in 0..split_k {
                ctas += m_tiles.len() as u64;
            }
            offset += ttn as u64;
        }
    }
    ctas
}

/// Normalised entropy from `ln M - (1/M) Σ c ln c`.
pub fn entropy_oracle(counts: &[u64]) -> f64 {
    let m: u64 = counts.iter().sum();
    if m == 0 || counts.len() < 2 {
        return 0.0;
    }
    let m = m as f64;
    let s: f64 = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 * (c as f64).ln()).sum();
    (m.ln() - s / m) / (counts.len() as f64).ln()
}
