//! Routing-aware tile-configuration dispatch for fused Mixture-of-Experts
//! kernels: region classification, configuration enumeration, wave cost
//! model fitting and runtime selection, plus a timing simulator to test them.

pub mod cli;
pub mod config_space;
pub mod cost_model;
pub mod dispatch;
pub mod error;
pub mod model_catalog;
pub mod routing;
pub mod timing_oracle;

pub use config_space::{enumerate_configs, ConfigPool, HardwareModel, TileConfig};
pub use cost_model::{fit, CostCoefficients, FitReport, ProfilingPlan, ProfilingSample, Variant};
pub use dispatch::{select_config, DispatchTable, StepCache, TestGrid};
pub use error::{Error, Result};
pub use model_catalog::{classify_regime, region_variables, MoeGeometry, RegimeReport, RegionVariables};
pub use routing::{balancedness, grid_size, sample_histogram, ExpertHistogram};
pub use timing_oracle::{OracleParams, Simulator};
