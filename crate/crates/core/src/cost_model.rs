//! Wave cost model `T(g) = a + b·g/SM + c·g + d·ln(g+1)` with its two- and
//! three-parameter ablations, least-squares fitting and fit diagnostics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `a + k·g`
    P2,
    /// `a + b·g/SM + c·g`
    P3,
    /// P3 plus `d·ln(g+1)` when the profiling grids are mostly sub-wave.
    P4,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::P2, Variant::P3, Variant::P4];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::P2 => "p2",
            Variant::P3 => "p3",
            Variant::P4 => "p4",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p2" => Ok(Variant::P2),
            "p3" => Ok(Variant::P3),
            "p4" => Ok(Variant::P4),
            other => Err(Error::validation("variant", format!("'{other}' is not one of p2, p3, p4"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub uses_log: bool,
    pub variant: Variant,
}

impl CostCoefficients {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        CostCoefficients { a, b, c, d, uses_log: d != 0.0, variant: Variant::P4 }
    }

    #[inline]
    pub fn predict(&self, g: u64, sm_count: u32) -> f64 {
        let g = g as f64;
        let mut t = self.a + self.b * g / sm_count as f64 + self.c * g;
        if self.uses_log {
            t += self.d * (g + 1.0).ln();
        }
        t
    }
}

pub fn predict(coeff: &CostCoefficients, g: u64, sm_count: u32) -> f64 {
    coeff.predict(g, sm_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilingSample {
    pub config_id: usize,
    #[serde(rename = "S")]
    pub s: u64,
    pub beta_target: f64,
    pub seed: u64,
    pub grid: u64,
    pub time_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub coefficients: CostCoefficients,
    pub r_squared: f64,
    pub n_samples: usize,
    pub median_grid: f64,
    /// Set when collinear or redundant design columns had to be dropped.
    pub condition_flag: bool,
}

/// Columns whose residual against the span of earlier columns falls below
/// this fraction of their own norm are treated as linearly dependent.
const RANK_TOLERANCE: f64 = 1e-8;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Indices of columns kept after dropping each column that is numerically
/// dependent on the ones before it (modified Gram-Schmidt on unit columns).
fn independent_columns(columns: &[Vec<f64>]) -> Vec<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let mut r: Vec<f64> = col.iter().map(|v| v / norm).collect();
        for q in &basis {
            let dot: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(ri, qi)| *ri -= dot * qi);
        }
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn > RANK_TOLERANCE {
            r.iter_mut().for_each(|v| *v /= rn);
            basis.push(r);
            kept.push(j);
        }
    }
    kept
}

/// Least-squares fit of one config's samples.
///
/// Design columns are `[1, g]` for P2, `[1, g/SM, g]` for P3, and for P4 the
/// P3 columns plus `ln(g+1)` when the median profiled grid is below `sm_count`.
/// A column that is linearly dependent on earlier ones is dropped and its
/// coefficient stored as zero; with a fixed SM count `g/SM` and `g` span the
/// same direction, so P3 and P4 always drop `c` and report the combined
/// per-CTA slope through `b`.
pub fn fit(samples: &[ProfilingSample], sm_count: u32, variant: Variant) -> Result<FitReport> {
    let config_id = samples.first().map_or(0, |s| s.config_id);
    let fail = |message: String| Error::Fit { config_id, message };
    if samples.is_empty() {
        return Err(fail("no samples".into()));
    }
    let mut grids: Vec<f64> = samples.iter().map(|s| s.grid as f64).collect();
    let mut distinct = grids.clone();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(fail(format!("needs at least 2 distinct grid sizes, got {}", distinct.len())));
    }
    let median_grid = median(&mut grids);
    let uses_log = variant == Variant::P4 && median_grid < sm_count as f64;

    let sm = sm_count as f64;
    let ones = vec![1.0; samples.len()];
    let g: Vec<f64> = samples.iter().map(|s| s.grid as f64).collect();
    // Column slots map to (a, b, c, d).
    let mut columns: Vec<(usize, Vec<f64>)> = vec![(0, ones)];
    match variant {
        Variant::P2 => columns.push((2, g.clone())),
        Variant::P3 | Variant::P4 => {
            columns.push((1, g.iter().map(|v| v / sm).collect()));
            columns.push((2, g.clone()));
            if uses_log {
                columns.push((3, g.iter().map(|v| (v + 1.0).ln()).collect()));
            }
        }
    }
    let cols: Vec<Vec<f64>> = columns.iter().map(|(_, c)| c.clone()).collect();
    let kept = independent_columns(&cols);
    let condition_flag = kept.len() < columns.len();

    // Normal equations on unit-scaled columns.
    let n = samples.len();
    let scales: Vec<f64> = kept.iter().map(|&j| cols[j].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let x = DMatrix::from_fn(n, kept.len(), |i, k| cols[kept[k]][i] / scales[k]);
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.time_us));
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let solution = xtx
        .cholesky()
        .map(|ch| ch.solve(&xty))
        .ok_or_else(|| fail("normal equations are not positive definite".into()))?;

    let mut coef = [0.0f64; 4];
    for (k, &j) in kept.iter().enumerate() {
        coef[columns[j].0] = solution[k] / scales[k];
    }
    let coefficients = CostCoefficients {
        a: coef[0],
        b: coef[1],
        c: coef[2],
        d: coef[3],
        uses_log,
        variant,
    };
    Ok(FitReport {
        coefficients,
        r_squared: r_squared(&coefficients, samples, sm_count),
        n_samples: n,
        median_grid,
        condition_flag,
    })
}

/// Coefficient of determination; `-inf` when the data are constant but the
/// prediction is not.
pub fn r_squared(coeff: &CostCoefficients, samples: &[ProfilingSample], sm_count: u32) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.time_us).sum::<f64>() / n;
    let ss_tot: f64 = samples.iter().map(|s| (s.time_us - mean).powi(2)).sum();
    let ss_res: f64 = samples.iter().map(|s| (s.time_us - coeff.predict(s.grid, sm_count)).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// Batch sizes × balancedness levels profiled per config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfilingPlan {
    pub batch_sizes: Vec<u64>,
    pub betas: Vec<f64>,
    pub seeds_per_point: u32,
}

impl Default for ProfilingPlan {
    fn default() -> Self {
        ProfilingPlan {
            batch_sizes: vec![8, 32, 64, 128, 512],
            betas: vec![0.3, 0.5, 0.6, 0.7, 1.0],
            seeds_per_point: 3,
        }
    }
}

impl ProfilingPlan {
    pub fn points(&self) -> Vec<(u64, f64)> {
        self.batch_sizes
            .iter()
            .flat_map(|&s| self.betas.iter().map(move |&b| (s, b)))
            .collect()
    }
}

/// Fits every config independently. Samples may arrive in any order; the
/// result is indexed by config id and has `pool_size` entries.
pub fn fit_all(samples: &[ProfilingSample], pool_size: usize, sm_count: u32, variant: Variant) -> Vec<Result<FitReport>> {
    let mut by_config: Vec<Vec<ProfilingSample>> = vec![Vec::new(); pool_size];
    for s in samples {
        if let Some(bucket) = by_config.get_mut(s.config_id) {
            bucket.push(*s);
        }
    }
    by_config
        .par_iter()
        .enumerate()
        .map(|(id, group)| {
            if group.is_empty() {
                Err(Error::Fit { config_id: id, message: "no samples".into() })
            } else {
                fit(group, sm_count, variant)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub config_id: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub uses_log: bool,
    pub variant: Variant,
    pub r_squared: f64,
}

/// Persisted per-model coefficients: four floats per config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientStore {
    pub model: String,
    pub sm_count: u32,
    pub entries: Vec<StoreEntry>,
}

impl CoefficientStore {
    pub fn from_reports(model: &str, sm_count: u32, reports: &[(usize, FitReport)]) -> Self {
        let entries = reports
            .iter()
            .map(|(id, r)| {
                let c = r.coefficients;
                StoreEntry {
                    config_id: *id,
                    a: c.a,
                    b: c.b,
                    c: c.c,
                    d: c.d,
                    uses_log: c.uses_log,
                    variant: c.variant,
                    r_squared: r.r_squared,
                }
            })
            .collect();
        CoefficientStore { model: model.to_string(), sm_count, entries }
    }

    pub fn coefficients(&self) -> Vec<(usize, CostCoefficients)> {
        self.entries
            .iter()
            .map(|e| {
                let c = CostCoefficients { a: e.a, b: e.b, c: e.c, d: e.d, uses_log: e.uses_log, variant: e.variant };
                (e.config_id, c)
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        // Non-finite r² (constant data) has no JSON form; store it as null.
        let mut v = serde_json::to_value(self).expect("store serializes");
        if let Some(entries) = v.get_mut("entries").and_then(|e| e.as_array_mut()) {
            for (e, src) in entries.iter_mut().zip(&self.entries) {
                if !src.r_squared.is_finite() {
                    e["r_squared"] = serde_json::Value::Null;
                }
            }
        }
        serde_json::to_string_pretty(&v).expect("store serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), &e))?;
        if let Some(entries) = v.get_mut("entries").and_then(|e| e.as_array_mut()) {
            for e in entries {
                if e.get("r_squared").is_some_and(|r| r.is_null()) {
                    e["r_squared"] = serde_json::json!(f64::MIN);
                }
            }
        }
        serde_json::from_value(v).map_err(|e| Error::json(path.display().to_string(), &e))
    }
}
