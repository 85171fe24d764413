//! Kernel tile configurations, the Hopper-class hardware constraint model and
//! enumeration of the valid configuration pool.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_catalog::{region_variables, MoeGeometry, RegimeReport, SPLIT_K_MIN_KAPPA, TILE_K_REF};

pub const BM_MIN: u32 = 2;
pub const BM_MAX: u32 = 104;
pub const STG_MAX: u32 = 5;
pub const TTN_CHOICES: [u32; 2] = [256, 512];
pub const SPLIT_K_FACTOR: u32 = 4;

/// `(bn, wn)` factorizations enumerated for each total tile width.
pub const FACTORIZATIONS: [(u32, u32, u32); 4] = [
    // (ttn, bn, wn)
    (256, 64, 4),
    (256, 128, 2),
    (512, 128, 4),
    (512, 256, 2),
];

/// One fused-MoE kernel configuration; the unit of dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileConfig {
    pub id: usize,
    /// Tokens per CTA.
    pub bm: u32,
    /// Weight sub-tile width per consumer warpgroup.
    pub bn: u32,
    /// Consumer warp count.
    pub wn: u32,
    /// Pipeline stages.
    pub stg: u32,
    /// Total N-tile width, `bn * wn`.
    pub ttn: u32,
    pub group_m: bool,
    pub split_k: u32,
}

impl TileConfig {
    fn sort_key(&self) -> (u32, u32, u32, u32, bool, u32) {
        (self.bm, self.ttn, self.bn, self.stg, self.group_m, self.split_k)
    }

    /// Field-range invariants, independent of hardware and geometry.
    pub fn ranges_ok(&self) -> bool {
        self.bn * self.wn == self.ttn
            && TTN_CHOICES.contains(&self.ttn)
            && (1..=STG_MAX).contains(&self.stg)
            && (BM_MIN..=BM_MAX).contains(&self.bm)
            && self.bm.is_multiple_of(2)
            && (self.split_k == 1 || self.split_k == SPLIT_K_FACTOR)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareModel {
    pub sm_count: u32,
    /// Shared memory per SM, bytes.
    pub smem_capacity: u64,
    /// L2 capacity usable for weights, bytes.
    pub l2_effective: u64,
    /// Bytes per element (1 for FP8).
    pub elem_size: u64,
    pub rho_c_empirical: f64,
    pub rho_c_analytic: f64,
    /// Median single-CTA startup cost, µs.
    pub startup_us: f64,
    /// Effective WGMMA time per tile including pipeline stalls, ns.
    pub wgmma_ns_per_tile: f64,
    pub splitk_launch_overhead_us: f64,
}

pub const MB: u64 = 1024 * 1024;
pub const SPLITK_OVERHEAD_RANGE_US: (f64, f64) = (10.0, 15.0);

impl Default for HardwareModel {
    fn default() -> Self {
        HardwareModel {
            sm_count: 132,
            smem_capacity: 227 * 1024,
            l2_effective: 45 * MB,
            elem_size: 1,
            rho_c_empirical: 200.0,
            rho_c_analytic: 186.0,
            startup_us: 24.0,
            wgmma_ns_per_tile: 130.0,
            splitk_launch_overhead_us: 12.5,
        }
    }
}

impl HardwareModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation("hardware model", m));
        if self.sm_count == 0 || self.smem_capacity == 0 || self.l2_effective == 0 || self.elem_size == 0 {
            return bad("integer fields must be strictly positive");
        }
        let floats = [
            self.rho_c_empirical,
            self.rho_c_analytic,
            self.startup_us,
            self.wgmma_ns_per_tile,
            self.splitk_launch_overhead_us,
        ];
        if floats.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("real-valued fields must be finite and strictly positive");
        }
        if self.l2_effective > 60 * MB {
            return bad("l2_effective exceeds 60 MB");
        }
        Ok(())
    }

    /// Compute density at which a CTA's useful WGMMA work equals its startup
    /// cost: `startup_us / wgmma_ns_per_tile`. With the H200 figures this is
    /// 24 µs / 130 ns ≈ 185, the analytic counterpart of the empirical 200.
    pub fn derived_rho_c(&self) -> f64 {
        self.startup_us * 1000.0 / self.wgmma_ns_per_tile
    }

    /// Loads overrides from a JSON object; missing fields keep their defaults.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let hw: HardwareModel =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), &e))?;
        hw.validate()?;
        Ok(hw)
    }
}

/// Multi-stage pipeline buffer estimate: activations plus weights per stage.
pub fn smem_usage(config: &TileConfig, hw: &HardwareModel) -> u64 {
    config.stg as u64 * (config.bm as u64 + config.ttn as u64) * TILE_K_REF * hw.elem_size
}

pub fn is_valid(config: &TileConfig, hw: &HardwareModel, geom: &MoeGeometry) -> bool {
    if !config.ranges_ok() || smem_usage(config, hw) > hw.smem_capacity {
        return false;
    }
    config.split_k == 1 || region_variables(geom).kappa.ge_int(SPLIT_K_MIN_KAPPA)
}

/// N-tiles per M-tile: `ceil(N / ttn)`.
pub fn n_tiles(config: &TileConfig, geom: &MoeGeometry) -> u64 {
    geom.n.div_ceil(config.ttn as u64)
}

/// Enumerated configurations with dense ids `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigPool {
    configs: Vec<TileConfig>,
}

impl ConfigPool {
    /// Builds a pool from configs in any order; ids are reassigned densely in
    /// canonical order.
    pub fn from_configs(mut configs: Vec<TileConfig>) -> Self {
        configs.sort_by_key(TileConfig::sort_key);
        for (i, c) in configs.iter_mut().enumerate() {
            c.id = i;
        }
        ConfigPool { configs }
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&TileConfig> {
        self.configs.get(id)
    }

    pub fn configs(&self) -> &[TileConfig] {
        &self.configs
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TileConfig> {
        self.configs.iter()
    }

    /// Sub-pool keeping configs matching `keep`, re-indexed.
    pub fn filtered(&self, keep: impl Fn(&TileConfig) -> bool) -> ConfigPool {
        ConfigPool::from_configs(self.configs.iter().filter(|c| keep(c)).copied().collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.configs).expect("pool serializes")
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let configs: Vec<TileConfig> =
            serde_json::from_str(text).map_err(|e| Error::json(context, &e))?;
        for (i, c) in configs.iter().enumerate() {
            if c.id != i {
                return Err(Error::validation(context, format!("config ids must be dense; entry {i} has id {}", c.id)));
            }
            if !c.ranges_ok() {
                return Err(Error::validation(context, format!("config {i} violates field ranges")));
            }
        }
        Ok(ConfigPool { configs })
    }
}

impl<'a> IntoIterator for &'a ConfigPool {
    type Item = &'a TileConfig;
    type IntoIter = std::slice::Iter<'a, TileConfig>;

    fn into_iter(self) -> Self::IntoIter {
        self.configs.iter()
    }
}

pub fn enumerate_configs(geom: &MoeGeometry, hw: &HardwareModel, regime: &RegimeReport) -> Result<ConfigPool> {
    let mut base = Vec::new();
    for bm in (BM_MIN..=BM_MAX).step_by(2) {
        for &(ttn, bn, wn) in &FACTORIZATIONS {
            for stg in 1..=STG_MAX {
                let c = TileConfig { id: 0, bm, bn, wn, stg, ttn, group_m: false, split_k: 1 };
                if is_valid(&c, hw, geom) {
                    base.push(c);
                }
            }
        }
    }
    if base.is_empty() {
        return Err(Error::EmptyPool);
    }

    let group_m_values: &[bool] = if regime.group_m_required { &[false, true] } else { &[false] };
    let mut all = Vec::with_capacity(base.len() * group_m_values.len() * 2);
    for c in &base {
        for &group_m in group_m_values {
            let c = TileConfig { group_m, ..*c };
            all.push(c);
            if regime.split_k_eligible {
                let sk = TileConfig { split_k: SPLIT_K_FACTOR, ..c };
                if is_valid(&sk, hw, geom) {
                    all.push(sk);
                }
            }
        }
    }
    Ok(ConfigPool::from_configs(all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_catalog::classify_regime;

    fn cfg(bm: u32, ttn: u32, stg: u32, split_k: u32) -> TileConfig {
        let (bn, wn) = if ttn == 256 { (64, 4) } else { (128, 4) };
        TileConfig { id: 0, bm, bn, wn, stg, ttn, group_m: false, split_k }
    }

    fn olmoe() -> MoeGeometry {
        MoeGeometry::new("olmoe", 64, 2048, 2048, 8).unwrap()
    }

    fn mixtral() -> MoeGeometry {
        MoeGeometry::new("mixtral", 8, 32768, 6144, 2).unwrap()
    }

    #[test]
    fn smem_examples() {
        let hw = HardwareModel::default();
        assert_eq!(smem_usage(&cfg(16, 256, 3, 1), &hw), 104_448);
        assert_eq!(smem_usage(&cfg(2, 256, 1, 1), &hw), 33_024);
        assert_eq!(smem_usage(&cfg(104, 512, 5, 1), &hw), 394_240);
    }

    #[test]
    fn validity_examples() {
        let hw = HardwareModel::default();
        assert!(!is_valid(&cfg(104, 512, 5, 1), &hw, &olmoe()));
        assert!(is_valid(&cfg(16, 256, 3, 1), &hw, &olmoe()));
        assert!(!is_valid(&cfg(16, 256, 3, 4), &hw, &olmoe()));
        assert!(is_valid(&cfg(16, 256, 3, 4), &hw, &mixtral()));
    }

    #[test]
    fn odd_bm_and_bad_factorization_rejected() {
        let hw = HardwareModel::default();
        assert!(!is_valid(&cfg(15, 256, 3, 1), &hw, &olmoe()));
        let c = TileConfig { bn: 128, wn: 4, ..cfg(16, 256, 3, 1) };
        assert!(!is_valid(&c, &hw, &olmoe()));
    }

    #[test]
    fn n_tiles_examples() {
        let c = cfg(16, 256, 1, 1);
        assert_eq!(n_tiles(&c, &olmoe()), 8);
        assert_eq!(n_tiles(&c, &MoeGeometry::new("d", 32, 512, 7168, 8).unwrap()), 2);
        assert_eq!(n_tiles(&c, &MoeGeometry::new("one", 1, 1, 128, 1).unwrap()), 1);
    }

    #[test]
    fn group_m_doubles_pool() {
        let hw = HardwareModel::default();
        let geom = mixtral();
        let mut regime = classify_regime(&region_variables(&geom));
        regime.split_k_eligible = false;
        let with = enumerate_configs(&geom, &hw, &regime).unwrap();
        regime.group_m_required = false;
        let without = enumerate_configs(&geom, &hw, &regime).unwrap();
        assert_eq!(with.len(), 2 * without.len());
    }

    #[test]
    fn tiny_smem_gives_empty_pool() {
        let hw = HardwareModel { smem_capacity: 33_023, ..HardwareModel::default() };
        let geom = olmoe();
        let regime = classify_regime(&region_variables(&geom));
        assert!(matches!(enumerate_configs(&geom, &hw, &regime), Err(Error::EmptyPool)));
    }

    #[test]
    fn enumeration_is_deterministic_and_valid() {
        let hw = HardwareModel::default();
        let geom = mixtral();
        let regime = classify_regime(&region_variables(&geom));
        let a = enumerate_configs(&geom, &hw, &regime).unwrap();
        let b = enumerate_configs(&geom, &hw, &regime).unwrap();
        assert_eq!(a, b);
        for (i, c) in a.iter().enumerate() {
            assert_eq!(c.id, i);
            assert!(is_valid(c, &hw, &geom));
            assert!(n_tiles(c, &geom) >= geom.n.div_ceil(512));
        }
        assert!(a.iter().any(|c| c.group_m) && a.iter().any(|c| c.split_k == 4));
    }

    #[test]
    fn pool_json_round_trip() {
        let hw = HardwareModel::default();
        let geom = olmoe();
        let regime = classify_regime(&region_variables(&geom));
        let pool = enumerate_configs(&geom, &hw, &regime).unwrap();
        let back = ConfigPool::from_json(&pool.to_json(), "t").unwrap();
        assert_eq!(pool, back);
    }

    #[test]
    fn hw_partial_override() {
        let hw: HardwareModel = serde_json::from_str(r#"{"sm_count": 78}"#).unwrap();
        assert_eq!(hw.sm_count, 78);
        assert_eq!(hw.smem_capacity, 232_448);
        assert!(hw.validate().is_ok());
        let too_big = HardwareModel { l2_effective: 61 * MB, ..HardwareModel::default() };
        assert!(too_big.validate().is_err());
    }

    #[test]
    fn analytic_rho_c_close_to_empirical() {
        let hw = HardwareModel::default();
        let derived = hw.derived_rho_c();
        assert!((derived - 184.615).abs() < 1e-3);
        assert!((derived - hw.rho_c_analytic).abs() / hw.rho_c_analytic < 0.01);
    }
}
