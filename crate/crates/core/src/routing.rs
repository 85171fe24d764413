//! Expert histograms, the entropy balancedness metric, a calibrated
//! Dirichlet-multinomial sampler and the routing-dependent CTA grid.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::config_space::{n_tiles, HardwareModel, TileConfig};
use crate::error::{Error, Result};
use crate::model_catalog::MoeGeometry;

/// Allowed gap between the requested β and the calibrated mean β.
pub const BETA_TOLERANCE: f64 = 0.03;

const CALIBRATION_DRAWS: u64 = 128;
const CALIBRATION_SEED: u64 = 0x5eed_ca1b;
const LOG10_ALPHA_MIN: f64 = -4.0;
const LOG10_ALPHA_MAX: f64 = 4.0;

/// Per-expert token-expert assignment counts for one forward step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertHistogram {
    counts: Vec<u64>,
}

impl ExpertHistogram {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::validation("histogram", "needs at least one expert"));
        }
        Ok(ExpertHistogram { counts })
    }

    /// Round-robin histogram: `assignments` spread as evenly as possible,
    /// the first `assignments % experts` experts taking one extra.
    pub fn uniform(experts: usize, assignments: u64) -> Self {
        assert!(experts > 0, "uniform histogram needs experts");
        let e = experts as u64;
        let counts = (0..e).map(|i| assignments / e + u64::from(i < assignments % e)).collect();
        ExpertHistogram { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn experts(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn active_experts(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Parses a single CSV row of counts (whitespace around fields allowed).
    pub fn parse_csv_row(line: &str, context: &str) -> Result<Self> {
        let counts = line
            .split(',')
            .enumerate()
            .map(|(i, f)| {
                f.trim().parse::<u64>().map_err(|e| Error::Schema {
                    context: context.to_string(),
                    row: 1,
                    message: format!("field {i} ({:?}): {e}", f.trim()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ExpertHistogram::new(counts)
    }
}

/// A sampled histogram together with its requested and realized balancedness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingSample {
    pub histogram: ExpertHistogram,
    pub beta_target: f64,
    pub beta_achieved: f64,
    pub seed: u64,
}

impl RoutingSample {
    /// `seed,beta_target,beta_achieved,c_0,...,c_{E-1}`
    pub fn csv_line(&self) -> String {
        let mut line = format!("{},{},{:.6}", self.seed, self.beta_target, self.beta_achieved);
        for c in self.histogram.counts() {
            write!(line, ",{c}").unwrap();
        }
        line
    }
}

pub fn csv_header(experts: usize) -> String {
    let mut h = String::from("seed,beta_target,beta_achieved");
    for e in 0..experts {
        write!(h, ",c_{e}").unwrap();
    }
    h
}

/// Shannon entropy of the expert distribution in nats, normalized by `ln E`.
pub fn balancedness(hist: &ExpertHistogram) -> Result<f64> {
    let total = hist.total();
    if total == 0 {
        return Err(Error::NoRoutedTokens);
    }
    Ok(balancedness_of(hist.counts(), total))
}

fn balancedness_of(counts: &[u64], total: u64) -> f64 {
    if counts.len() == 1 {
        return 1.0;
    }
    let t = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum();
    (h / (counts.len() as f64).ln()).clamp(0.0, 1.0)
}

/// CTA grid: `(Σ_e ceil(c_e / bm)) · ceil(N / ttn) · split_k`.
pub fn grid_size(config: &TileConfig, hist: &ExpertHistogram, geom: &MoeGeometry) -> u64 {
    let bm = config.bm as u64;
    let m_tiles: u64 = hist.counts().iter().map(|c| c.div_ceil(bm)).sum();
    m_tiles * n_tiles(config, geom) * config.split_k as u64
}

/// ω = g / SM, kept continuous.
pub fn wave_utilization(g: u64, hw: &HardwareModel) -> f64 {
    g as f64 / hw.sm_count as f64
}

/// Draws expert probabilities from a symmetric Dirichlet(α) in log space, so
/// tiny concentrations do not underflow to an all-zero vector.
fn dirichlet_probs(rng: &mut impl Rng, alpha: f64, experts: usize, out: &mut Vec<f64>) {
    // Gamma(α) = Gamma(α + 1) · U^(1/α)
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    out.clear();
    out.extend((0..experts).map(|_| {
        let g: f64 = gamma.sample(rng);
        let u: f64 = 1.0 - rng.random::<f64>();
        g.ln() + u.ln() / alpha
    }));
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

/// Multinomial draw by sequential conditional binomials.
fn multinomial(rng: &mut impl Rng, n: u64, probs: &[f64], counts: &mut Vec<u64>) {
    counts.clear();
    counts.resize(probs.len(), 0);
    let mut remaining = n;
    let mut mass_left: f64 = probs.iter().sum();
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == probs.len() {
            counts[i] = remaining;
            break;
        }
        let q = if mass_left > 0.0 { (p / mass_left).clamp(0.0, 1.0) } else { 0.0 };
        let k = Binomial::new(remaining, q).expect("valid binomial").sample(rng);
        counts[i] = k;
        remaining -= k;
        mass_left -= p;
    }
}

fn draw(rng: &mut impl Rng, alpha: f64, experts: usize, n: u64, probs: &mut Vec<f64>, counts: &mut Vec<u64>) {
    dirichlet_probs(rng, alpha, experts, probs);
    multinomial(rng, n, probs, counts);
}

/// Mean realized β over a fixed stream of draws (common random numbers keep
/// the bisection objective smooth in α).
fn mean_beta(log10_alpha: f64, experts: usize, n: u64) -> f64 {
    let alpha = 10f64.powf(log10_alpha);
    let (mut probs, mut counts) = (Vec::new(), Vec::new());
    let mut sum = 0.0;
    for i in 0..CALIBRATION_DRAWS {
        // Gamma rejection consumes a variable amount of randomness, so each
        // draw gets its own stream to stop one draw desynchronizing the rest.
        let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED.wrapping_add(i));
        draw(&mut rng, alpha, experts, n, &mut probs, &mut counts);
        sum += balancedness_of(&counts, n);
    }
    sum / CALIBRATION_DRAWS as f64
}

type CalibrationKey = (usize, u64, u64);

fn calibration_cache() -> &'static Mutex<HashMap<CalibrationKey, std::result::Result<f64, f64>>> {
    static CACHE: OnceLock<Mutex<HashMap<CalibrationKey, std::result::Result<f64, f64>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Dirichlet concentration whose mean realized β matches `beta_target` for
/// `n` assignments over `experts` experts. Results are memoized per process.
pub fn calibrate_alpha(experts: usize, n: u64, beta_target: f64) -> Result<f64> {
    let key = (experts, n, beta_target.to_bits());
    let cached = calibration_cache().lock().unwrap().get(&key).copied();
    let outcome = match cached {
        Some(o) => o,
        None => {
            let o = bisect_alpha(experts, n, beta_target);
            calibration_cache().lock().unwrap().insert(key, o);
            o
        }
    };
    outcome.map_err(|closest| Error::UnreachableBeta {
        target: beta_target,
        experts,
        assignments: n,
        closest,
    })
}

fn bisect_alpha(experts: usize, n: u64, target: f64) -> std::result::Result<f64, f64> {
    let (mut lo, mut hi) = (LOG10_ALPHA_MIN, LOG10_ALPHA_MAX);
    let (b_lo, b_hi) = (mean_beta(lo, experts, n), mean_beta(hi, experts, n));
    if target <= b_lo {
        return if b_lo - target <= BETA_TOLERANCE { Ok(10f64.powf(lo)) } else { Err(b_lo) };
    }
    if target >= b_hi {
        return if target - b_hi <= BETA_TOLERANCE { Ok(10f64.powf(hi)) } else { Err(b_hi) };
    }
    let mut best = if target - b_lo < b_hi - target { (lo, b_lo) } else { (hi, b_hi) };
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        let b = mean_beta(mid, experts, n);
        if (b - target).abs() < (best.1 - target).abs() {
            best = (mid, b);
        }
        if b < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (best.1 - target).abs() <= BETA_TOLERANCE {
        Ok(10f64.powf(best.0))
    } else {
        Err(best.1)
    }
}

/// Samples a histogram of `s * top_k` assignments over `experts` experts at a
/// target balancedness. `beta_target == 1.0` returns the exact round-robin
/// histogram without drawing.
pub fn sample_histogram(experts: usize, s: u64, top_k: u32, beta_target: f64, seed: u64) -> Result<RoutingSample> {
    if !(0.0..=1.0).contains(&beta_target) {
        return Err(Error::validation("beta target", format!("{beta_target} outside [0, 1]")));
    }
    if s == 0 || experts == 0 || top_k == 0 {
        return Err(Error::validation("sampler arguments", "S, E and top_k must be >= 1"));
    }
    let n = s * top_k as u64;
    if beta_target == 1.0 {
        let histogram = ExpertHistogram::uniform(experts, n);
        let beta_achieved = balancedness_of(histogram.counts(), n);
        return Ok(RoutingSample { histogram, beta_target, beta_achieved, seed });
    }
    let alpha = calibrate_alpha(experts, n, beta_target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut probs, mut counts) = (Vec::new(), Vec::new());
    draw(&mut rng, alpha, experts, n, &mut probs, &mut counts);
    let beta_achieved = balancedness_of(&counts, n);
    Ok(RoutingSample {
        histogram: ExpertHistogram { counts },
        beta_target,
        beta_achieved,
        seed,
    })
}
