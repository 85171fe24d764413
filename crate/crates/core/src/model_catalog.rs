//! MoE layer geometry, performance-region variables and regime classification.
//!
//! Region variables are always computed against a fixed reference tile
//! (`ttn = 256`, `tile_k = 128`) so that they describe the model, not a
//! particular kernel configuration.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference N-tile width used for region variables.
pub const TTN_REF: u64 = 256;
/// Reference K-tile depth; also the fixed `tile_k` of every kernel config.
pub const TILE_K_REF: u64 = 128;
/// Empirical compute-density crossover between regimes A and B.
pub const RHO_C_EMPIRICAL: f64 = 200.0;
/// `lambda * kappa` above which the weight footprint exceeds effective L2.
pub const GROUP_M_THRESHOLD: u64 = 1440;
/// Minimum K-reduction depth for split-K to amortize its second launch.
pub const SPLIT_K_MIN_KAPPA: u64 = 48;
/// Wave utilization below which split-K can pay off.
pub const SPLIT_K_MAX_OMEGA: f64 = 0.2;

const BUNDLED_CATALOG: &str = include_str!("../data/catalog.json");

/// Shape of one MoE feed-forward layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeGeometry {
    pub name: String,
    #[serde(rename = "E")]
    pub experts: u32,
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "K")]
    pub k: u64,
    pub top_k: u32,
}

impl MoeGeometry {
    pub fn new(name: impl Into<String>, experts: u32, n: u64, k: u64, top_k: u32) -> Result<Self> {
        let geom = MoeGeometry {
            name: name.into(),
            experts,
            n,
            k,
            top_k,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        let what = || format!("geometry '{}'", self.name);
        if self.experts < 1 {
            return Err(Error::validation(what(), "E >= 1 violated (E = 0)"));
        }
        if self.n < 1 {
            return Err(Error::validation(what(), "N >= 1 violated (N = 0)"));
        }
        if self.k < 1 {
            return Err(Error::validation(what(), "K >= 1 violated (K = 0)"));
        }
        if self.top_k < 1 || self.top_k > self.experts {
            return Err(Error::validation(
                what(),
                format!("1 <= top_k <= E violated (top_k = {}, E = {})", self.top_k, self.experts),
            ));
        }
        Ok(())
    }

    /// True when N or K is not a multiple of the reference tile. Such
    /// geometries are accepted; region variables become fractional or padded.
    pub fn is_misaligned(&self) -> bool {
        !self.n.is_multiple_of(TTN_REF) || !self.k.is_multiple_of(TILE_K_REF)
    }
}

/// Non-negative rational kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den != 0, "zero denominator");
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn numer(&self) -> u64 {
        self.num
    }

    pub fn denom(&self) -> u64 {
        self.den
    }

    pub fn is_integer(&self) -> bool {
        self.den == 1
    }

    pub fn to_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Exact `self >= n`.
    pub fn ge_int(&self, n: u64) -> bool {
        self.num as u128 >= n as u128 * self.den as u128
    }

    /// Exact `self > n`.
    pub fn gt_int(&self, n: u64) -> bool {
        self.num as u128 > n as u128 * self.den as u128
    }

    pub fn mul_int(&self, n: u64) -> Ratio {
        Ratio::new(self.num * n, self.den)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionVariables {
    /// Compute density: WGMMA tile operations per reference tile column.
    pub rho: Ratio,
    /// N-tile count under the reference tile.
    pub lambda: u64,
    /// K-reduction depth under the reference tile.
    pub kappa: Ratio,
    /// Set when K (or N) is not a multiple of the reference tile.
    pub misaligned: bool,
}

impl RegionVariables {
    /// `lambda * kappa`, the weight footprint in reference tiles.
    pub fn l2_pressure(&self) -> Ratio {
        self.kappa.mul_int(self.lambda)
    }
}

pub fn region_variables(geom: &MoeGeometry) -> RegionVariables {
    RegionVariables {
        rho: Ratio::new(geom.n * geom.k, TTN_REF * TILE_K_REF),
        lambda: geom.n.div_ceil(TTN_REF),
        kappa: Ratio::new(geom.k, TILE_K_REF),
        misaligned: geom.is_misaligned(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Pipeline-dominated: startup exceeds useful compute per CTA.
    A,
    /// Compute-scaling.
    B,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::A => f.write_str("A"),
            Regime::B => f.write_str("B"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegimeReport {
    pub regime: Regime,
    pub group_m_required: bool,
    pub split_k_eligible: bool,
    pub ttn512_preferred_when_multiwave: bool,
}

impl RegimeReport {
    /// The optimization modes worth enabling for this model.
    ///
    /// Split-K is listed only when the geometry is eligible *and* the
    /// smallest possible non-split grid (one M-tile times `lambda` N-tiles)
    /// can fall under the `omega < 0.2` gate on `sm_count` SMs.
    pub fn predicted_modes(&self, vars: &RegionVariables, sm_count: u32) -> PredictedModes {
        let split_k = self.split_k_eligible
            && (vars.lambda as f64) < SPLIT_K_MAX_OMEGA * sm_count as f64;
        PredictedModes {
            group_m: self.group_m_required,
            split_k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictedModes {
    pub group_m: bool,
    pub split_k: bool,
}

impl fmt::Display for PredictedModes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.group_m, self.split_k) {
            (false, false) => f.write_str("Tile only"),
            (true, false) => f.write_str("Tile + GROUP_M"),
            (false, true) => f.write_str("Tile + split-K"),
            (true, true) => f.write_str("Tile + GROUP_M + split-K"),
        }
    }
}

pub fn classify_regime(vars: &RegionVariables) -> RegimeReport {
    let regime = if vars.rho.to_f64() >= RHO_C_EMPIRICAL {
        Regime::B
    } else {
        Regime::A
    };
    RegimeReport {
        regime,
        group_m_required: vars.l2_pressure().gt_int(GROUP_M_THRESHOLD),
        split_k_eligible: vars.kappa.ge_int(SPLIT_K_MIN_KAPPA),
        ttn512_preferred_when_multiwave: regime == Regime::B,
    }
}

/// The GROUP_M threshold from first principles: effective L2 bytes divided by
/// the bytes of one reference weight tile.
pub fn group_m_threshold(l2_effective_bytes: u64, elem_size: u64) -> u64 {
    l2_effective_bytes / (TTN_REF * TILE_K_REF * elem_size)
}

/// Parses a descriptor file body. `context` names the source in errors.
pub fn parse_catalog(text: &str, context: &str) -> Result<Vec<MoeGeometry>> {
    let models: Vec<MoeGeometry> =
        serde_json::from_str(text).map_err(|e| Error::json(context, &e))?;
    for m in &models {
        m.validate()?;
    }
    Ok(models)
}

pub fn load_catalog(path: &Path) -> Result<Vec<MoeGeometry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_catalog(&text, &path.display().to_string())
}

/// The eight production architectures shipped with the crate.
pub fn bundled_catalog() -> Vec<MoeGeometry> {
    parse_catalog(BUNDLED_CATALOG, "bundled catalog").expect("bundled catalog is valid")
}

pub fn find_model<'a>(catalog: &'a [MoeGeometry], name: &str) -> Result<&'a MoeGeometry> {
    catalog
        .iter()
        .find(|m| m.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::UnknownModel {
            name: name.to_string(),
            available: catalog.iter().map(|m| m.name.clone()).collect(),
        })
}

/// One row of the reference regime table, used by `classify --check`.
#[derive(Debug, Clone, Copy)]
pub struct ExpectedRegion {
    pub name: &'static str,
    pub rho: u64,
    pub lambda: u64,
    pub kappa: u64,
    pub regime: Regime,
    pub modes: &'static str,
}

pub const EXPECTED_REGIONS: [ExpectedRegion; 8] = [
    ExpectedRegion { name: "olmoe", rho: 128, lambda: 8, kappa: 16, regime: Regime::A, modes: "Tile only" },
    ExpectedRegion { name: "qwen3", rho: 96, lambda: 6, kappa: 16, regime: Regime::A, modes: "Tile only" },
    ExpectedRegion { name: "dsv3-ep8", rho: 112, lambda: 2, kappa: 56, regime: Regime::A, modes: "Tile + split-K" },
    ExpectedRegion { name: "mixtral", rho: 6144, lambda: 128, kappa: 48, regime: Regime::B, modes: "Tile + GROUP_M" },
    ExpectedRegion { name: "dsv3-tp8", rho: 112, lambda: 2, kappa: 56, regime: Regime::A, modes: "Tile + split-K" },
    ExpectedRegion { name: "phi-3.5-moe", rho: 1600, lambda: 50, kappa: 32, regime: Regime::B, modes: "Tile + GROUP_M" },
    ExpectedRegion { name: "jamba-1.5", rho: 2048, lambda: 64, kappa: 32, regime: Regime::B, modes: "Tile + GROUP_M" },
    ExpectedRegion { name: "dbrx", rho: 4032, lambda: 84, kappa: 48, regime: Regime::B, modes: "Tile + GROUP_M" },
];

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: u64, k: u64) -> MoeGeometry {
        MoeGeometry::new("t", 8, n, k, 2).unwrap()
    }

    #[test]
    fn olmoe_region() {
        let v = region_variables(&MoeGeometry::new("olmoe", 64, 2048, 2048, 8).unwrap());
        assert_eq!(v.rho, Ratio::new(128, 1));
        assert_eq!(v.lambda, 8);
        assert_eq!(v.kappa, Ratio::new(16, 1));
        assert!(!v.misaligned);
    }

    #[test]
    fn mixtral_region() {
        let v = region_variables(&geom(32768, 6144));
        assert_eq!((v.rho.numer(), v.lambda, v.kappa.numer()), (6144, 128, 48));
    }

    #[test]
    fn reference_tile_identity() {
        let v = region_variables(&geom(256, 128));
        assert_eq!((v.rho.numer(), v.lambda, v.kappa.numer()), (1, 1, 1));
    }

    #[test]
    fn misaligned_k_gives_fractional_kappa() {
        let v = region_variables(&geom(256, 200));
        assert!(v.misaligned);
        assert_eq!(v.kappa, Ratio::new(25, 16));
        assert!(!v.kappa.is_integer());
    }

    #[test]
    fn classify_examples() {
        let mixtral = classify_regime(&region_variables(&geom(32768, 6144)));
        assert_eq!(mixtral.regime, Regime::B);
        assert!(mixtral.group_m_required && mixtral.split_k_eligible);

        let dsv3 = classify_regime(&region_variables(&geom(512, 7168)));
        assert_eq!(dsv3.regime, Regime::A);
        assert!(!dsv3.group_m_required && dsv3.split_k_eligible);

        let olmoe = classify_regime(&region_variables(&geom(2048, 2048)));
        assert_eq!(olmoe.regime, Regime::A);
        assert!(!olmoe.group_m_required && !olmoe.split_k_eligible);
    }

    #[test]
    fn group_m_threshold_is_45mb_over_32kb() {
        assert_eq!(TTN_REF * TILE_K_REF, 32 * 1024);
        assert_eq!(group_m_threshold(45 * 1024 * 1024, 1), GROUP_M_THRESHOLD);
    }

    #[test]
    fn threshold_is_strict() {
        // lambda * kappa == 1440 exactly must not require GROUP_M.
        let v = region_variables(&geom(256 * 45, 128 * 32));
        assert_eq!(v.l2_pressure(), Ratio::new(1440, 1));
        assert!(!classify_regime(&v).group_m_required);
    }

    #[test]
    fn doubling_n_and_k_scales_rho_and_pressure_by_four() {
        let a = region_variables(&geom(2048, 2048));
        let b = region_variables(&geom(4096, 4096));
        assert_eq!(b.rho.numer(), 4 * a.rho.numer());
        assert_eq!(b.l2_pressure().numer(), 4 * a.l2_pressure().numer());
    }

    #[test]
    fn bundled_catalog_has_eight_models() {
        let cat = bundled_catalog();
        assert_eq!(cat.len(), 8);
        let dbrx = find_model(&cat, "dbrx").unwrap();
        assert_eq!((dbrx.experts, dbrx.n, dbrx.k), (16, 21504, 6144));
    }

    #[test]
    fn empty_catalog_parses() {
        assert!(parse_catalog("[]", "t").unwrap().is_empty());
    }

    #[test]
    fn zero_experts_rejected() {
        let err = parse_catalog(r#"[{"name":"x","E":0,"N":256,"K":128,"top_k":1}]"#, "t")
            .unwrap_err();
        assert!(err.to_string().contains("E >= 1"), "{err}");
    }

    #[test]
    fn parse_error_has_line() {
        let err = parse_catalog("[\n{\"name\": }", "t").unwrap_err();
        match err {
            Error::Json { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_model_lists_available() {
        let cat = bundled_catalog();
        let err = find_model(&cat, "gpt-5").unwrap_err().to_string();
        assert!(err.contains("olmoe") && err.contains("dbrx"), "{err}");
    }
}
