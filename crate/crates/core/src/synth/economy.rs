use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `r_t = c + φ1 r_{t-1} + φ2 r_{t-2} + φ3 r_{t-3} + φ4 r_{t-4} + σ ε_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ar4Config {
    pub intercept: f64,
    pub phi: [f64; 4],
    pub sigma: f64,
    /// `[r_{-1}, r_{-2}, r_{-3}, r_{-4}]`; `None` starts at the stationary mean.
    #[serde(default)]
    pub initial: Option<[f64; 4]>,
    /// Reject non-stationary coefficient sets.
    #[serde(default)]
    pub require_stationary: bool,
}

impl Default for Ar4Config {
    /// The published fitted coefficients read intercept first, with a small
    /// noise scale (none is published).
    fn default() -> Self {
        Ar4Config {
            intercept: 0.6687,
            phi: [1.3514, -0.5131, 0.2410, -0.0838],
            sigma: 0.05,
            initial: Some([4.5; 4]),
            require_stationary: false,
        }
    }
}

impl Ar4Config {
    /// Same lag coefficients with the intercept re-anchored so the stationary
    /// mean is `mean` percent.
    pub fn anchored(mean: f64) -> Self {
        let base = Ar4Config::default();
        let persistence: f64 = base.phi.iter().sum();
        Ar4Config {
            intercept: mean * (1.0 - persistence),
            initial: None,
            ..base
        }
    }

    pub fn stationary_mean(&self) -> Option<f64> {
        let s: f64 = self.phi.iter().sum();
        ((1.0 - s).abs() > 1e-12).then(|| self.intercept / (1.0 - s))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("macro.national.sigma", "must be finite and >= 0"));
        }
        if self.require_stationary && !is_stationary(&self.phi) {
            return Err(Error::config(
                "macro.national.phi",
                format!(
                    "AR coefficients are not stationary (companion spectral radius {:.6})",
                    spectral_radius(&self.phi)
                ),
            ));
        }
        if self.initial.is_none() && self.stationary_mean().is_none() {
            return Err(Error::config("macro.national.initial", "required when the process has a unit root"));
        }
        Ok(())
    }
}

/// Stationarity via the step-down (reflection coefficient) recursion: the AR
/// polynomial has all roots outside the unit circle iff every reflection
/// coefficient has modulus below one.
pub fn is_stationary(phi: &[f64]) -> bool {
    let mut a = phi.to_vec();
    while let Some(&k) = a.last() {
        if k.abs() >= 1.0 {
            return false;
        }
        let m = a.len();
        let denom = 1.0 - k * k;
        a = (0..m - 1).map(|i| (a[i] + k * a[m - 2 - i]) / denom).collect();
    }
    true
}

/// Spectral radius of the AR companion matrix, estimated from the growth of
/// `‖A^(2^n)‖` under repeated squaring.
pub fn spectral_radius(phi: &[f64]) -> f64 {
    let p = phi.len();
    if p == 0 {
        return 0.0;
    }
    let mut a = vec![vec![0.0; p]; p];
    a[0].copy_from_slice(phi);
    for i in 1..p {
        a[i][i - 1] = 1.0;
    }
    let mut log_scale = 0.0;
    let rounds = 40;
    for _ in 0..rounds {
        let mut b = vec![vec![0.0; p]; p];
        for i in 0..p {
            for k in 0..p {
                for j in 0..p {
                    b[i][j] += a[i][k] * a[k][j];
                }
            }
        }
        let norm = b.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for v in b.iter_mut().flatten() {
            *v /= norm;
        }
        log_scale = 2.0 * log_scale + norm.ln();
        a = b;
    }
    (log_scale / 2f64.powi(rounds)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionalConfig {
    /// Long-run unemployment per region, percent.
    pub unemployment_mean: Vec<f64>,
    pub unemployment_rho: f64,
    pub unemployment_sigma: f64,
    /// Share of unemployment shock variance common to all regions.
    pub common_share: f64,
    /// Monthly log drift of house prices per region.
    pub hpi_drift: Vec<f64>,
    pub hpi_sigma: f64,
}

impl RegionalConfig {
    pub fn for_regions(n: usize) -> Self {
        RegionalConfig {
            unemployment_mean: (0..n).map(|r| 5.0 + 3.0 * r as f64 / (n.max(2) - 1) as f64).collect(),
            unemployment_rho: 0.97,
            unemployment_sigma: 0.3,
            common_share: 0.5,
            hpi_drift: (0..n).map(|r| 0.004 - 0.004 * r as f64 / (n.max(2) - 1) as f64).collect(),
            hpi_sigma: 0.012,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroConfig {
    pub national: Ar4Config,
    pub regional: RegionalConfig,
}

impl MacroConfig {
    pub fn desk(num_regions: usize) -> Self {
        MacroConfig {
            national: Ar4Config::anchored(4.5),
            regional: RegionalConfig::for_regions(num_regions),
        }
    }

    pub fn num_regions(&self) -> usize {
        self.regional.unemployment_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.national.validate()?;
        let r = &self.regional;
        if r.hpi_drift.len() != r.unemployment_mean.len() {
            return Err(Error::config("macro.regional.hpi_drift", "needs one entry per region"));
        }
        for (k, v) in [
            ("macro.regional.unemployment_sigma", r.unemployment_sigma),
            ("macro.regional.hpi_sigma", r.hpi_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&r.common_share) {
            return Err(Error::config("macro.regional.common_share", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Simulated economy: national rate, and per region unemployment and house
/// price index (1.0 at month 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroPath {
    pub national_rate: Vec<f64>,
    /// `[region][month]`.
    pub unemployment: Vec<Vec<f64>>,
    pub hpi: Vec<Vec<f64>>,
}

impl MacroPath {
    pub fn months(&self) -> usize {
        self.national_rate.len()
    }

    pub fn num_regions(&self) -> usize {
        self.unemployment.len()
    }

    /// Month `t` values; months past the end repeat the last one.
    pub fn at(&self, region: usize, t: usize) -> (f64, f64, f64) {
        let t = t.min(self.months().saturating_sub(1));
        (self.national_rate[t], self.unemployment[region][t], self.hpi[region][t])
    }
}

/// Last observed macro levels, used to continue a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    /// Most recent first.
    pub rate_lags: [f64; 4],
    pub unemployment: Vec<f64>,
    pub hpi: Vec<f64>,
}

impl MacroState {
    pub fn initial(cfg: &MacroConfig) -> Self {
        let n = &cfg.national;
        let start = n
            .initial
            .unwrap_or_else(|| [n.stationary_mean().expect("validated"); 4]);
        MacroState {
            rate_lags: start,
            unemployment: cfg.regional.unemployment_mean.clone(),
            hpi: vec![1.0; cfg.num_regions()],
        }
    }

    /// State at the end of month `t` of `path`.
    pub fn at_end_of(path: &MacroPath, t: usize) -> Self {
        let r = |k: usize| path.national_rate[t.saturating_sub(k)];
        MacroState {
            rate_lags: [r(0), r(1), r(2), r(3)],
            unemployment: path.unemployment.iter().map(|u| u[t]).collect(),
            hpi: path.hpi.iter().map(|h| h[t]).collect(),
        }
    }
}

/// Advances the economy `months` steps from `start`.
pub fn simulate_macro_from<R: Rng + ?Sized>(
    cfg: &MacroConfig,
    start: &MacroState,
    months: usize,
    rng: &mut R,
) -> MacroPath {
    let n = &cfg.national;
    let reg = &cfg.regional;
    let nr = cfg.num_regions();
    let mut lags = start.rate_lags;
    let mut u = start.unemployment.clone();
    let mut h = start.hpi.clone();
    let mut path = MacroPath {
        national_rate: Vec::with_capacity(months),
        unemployment: vec![Vec::with_capacity(months); nr],
        hpi: vec![Vec::with_capacity(months); nr],
    };
    let (wc, wi) = (reg.common_share.sqrt(), (1.0 - reg.common_share).sqrt());
    for _ in 0..months {
        let e: f64 = StandardNormal.sample(rng);
        let r = n.intercept + n.phi.iter().zip(&lags).map(|(p, l)| p * l).sum::<f64>() + n.sigma * e;
        lags = [r, lags[0], lags[1], lags[2]];
        path.national_rate.push(r);
        let common: f64 = StandardNormal.sample(rng);
        for k in 0..nr {
            let own: f64 = StandardNormal.sample(rng);
            let mean = reg.unemployment_mean[k];
            u[k] = (mean + reg.unemployment_rho * (u[k] - mean) + reg.unemployment_sigma * (wc * common + wi * own))
                .max(0.5);
            let eh: f64 = StandardNormal.sample(rng);
            h[k] *= (reg.hpi_drift[k] - 0.5 * reg.hpi_sigma * reg.hpi_sigma + reg.hpi_sigma * eh).exp();
            path.unemployment[k].push(u[k]);
            path.hpi[k].push(h[k]);
        }
    }
    path
}

/// A fresh `months`-long path from the configured starting point.
pub fn simulate_macro(cfg: &MacroConfig, months: usize, seed: u64) -> Result<MacroPath> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(simulate_macro_from(cfg, &MacroState::initial(cfg), months, &mut rng))
}
