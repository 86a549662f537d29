//! Synthetic loan panels drawn from a known ground-truth transition function.
//!
//! Generation runs month by month: every active loan draws its next state from
//! its own random stream, then the pool's realized regional default and
//! prepayment rates for that month are reduced into the lagged features used
//! the following month.

mod economy;
mod truth;

pub use economy::{
    is_stationary, simulate_macro, simulate_macro_from, spectral_radius, Ar4Config, MacroConfig, MacroPath,
    MacroState, RegionalConfig,
};
pub use truth::{ground_truth_probs, GroundTruthModel, LinearTerm, PairTerm, ThresholdTerm, TripleTerm};

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{
    format_month, loan_hash, parse_month, FeatureSchema, FieldSpec, RawRecord, RawValue, SourceGroup,
};
use crate::state::{LoanMonthSample, StateIndex, K};

/// Numeric features in ground-truth order.
pub const FEATURES: [&str; 22] = [
    "fico",
    "ltv",
    "orig_rate",
    "orig_balance",
    "dti",
    "income",
    "loan_age",
    "balance_ratio",
    "national_rate",
    "incentive",
    "unemployment",
    "hpi_change",
    "times_current_12m",
    "times_30dd_12m",
    "times_60dd_12m",
    "times_90dd_12m",
    "times_fc_12m",
    "burnout",
    "lag_default_rate",
    "lag_prepay_rate",
    "noise_static",
    "noise_dynamic",
];
/// The first `N_STATIC` features live in the loan table, the rest in the
/// monthly performance table.
const N_STATIC: usize = 6;
const NOISE_STATIC: usize = 20;

pub const REGION: &str = "region";
pub const VINTAGE: &str = "vintage";
/// Optional features that may be blanked out by missing-value injection.
pub const OPTIONAL_FEATURES: [&str; 2] = ["dti", "income"];

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURES.iter().position(|f| *f == name)
}

fn fi(name: &str) -> usize {
    feature_index(name).expect("known feature")
}

pub fn region_name(r: usize) -> String {
    format!("R{r}")
}

/// Feature schema matching the columns the generator emits.
pub fn synthetic_schema(num_regions: usize) -> FeatureSchema {
    let mut fields = vec![FieldSpec::state()];
    for (i, f) in FEATURES.iter().enumerate() {
        let group = match i {
            0..=5 | NOISE_STATIC => SourceGroup::Origination,
            6 | 7 => SourceGroup::Performance,
            8..=11 => SourceGroup::Macro,
            12..=17 => SourceGroup::Behavioral,
            18 | 19 => SourceGroup::Lagged,
            _ => SourceGroup::Other,
        };
        fields.push(if OPTIONAL_FEATURES.contains(f) {
            FieldSpec::optional(f, group)
        } else {
            FieldSpec::numeric(f, group)
        });
    }
    let levels: Vec<String> = (0..num_regions).map(region_name).collect();
    let levels: Vec<&str> = levels.iter().map(|s| s.as_str()).collect();
    fields.push(FieldSpec::categorical(REGION, &levels, SourceGroup::Origination));
    FeatureSchema::new(fields).expect("static schema is valid")
}

/// Location/scale pairs used to standardize features inside the ground truth,
/// chosen near the generator's marginal moments.
fn default_standardization() -> (Vec<f64>, Vec<f64>) {
    let pairs: [(f64, f64); 22] = [
        (718.0, 55.0),
        (75.0, 12.0),
        (5.9, 0.8),
        (220_000.0, 80_000.0),
        (35.0, 9.0),
        (85.0, 30.0),
        (20.0, 13.0),
        (0.96, 0.03),
        (4.5, 0.4),
        (1.4, 0.8),
        (7.0, 1.4),
        (0.05, 0.08),
        (6.0, 4.5),
        (1.0, 2.5),
        (0.15, 0.6),
        (0.2, 1.2),
        (0.1, 0.8),
        (5.0, 6.0),
        (0.003, 0.003),
        (0.025, 0.01),
        (0.0, 1.0),
        (0.0, 1.0),
    ];
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
}

/// Default ground truth: state-dependent base rates, linear effects, one
/// pairwise term (score × LTV on payoff), one triple term (balance × DTI ×
/// income on 30-day delinquency) and a refinancing-incentive threshold.
pub fn default_ground_truth() -> GroundTruthModel {
    use StateIndex::*;
    let mut m = GroundTruthModel::zeros(FEATURES.iter().map(|s| s.to_string()).collect());
    let (c, s) = default_standardization();
    m.center = c;
    m.scale = s;
    // Logits relative to staying put, per source state.
    let rows: [(StateIndex, [f64; K]); 5] = [
        (Current, [0.0, -3.9, -40.0, -40.0, -6.2, -7.6, -3.6]),
        (DD30, [0.4, 0.0, -0.4, -40.0, -2.7, -5.0, -2.8]),
        (DD60, [-0.5, -0.2, 0.0, 0.35, -1.8, -3.9, -3.2]),
        (DD90plus, [-2.6, -2.9, -2.6, 0.0, -1.6, -4.2, -4.2]),
        (Foreclosure, [-3.3, -4.4, -4.4, -2.8, 0.0, -2.8, -3.7]),
    ];
    for (u, r) in rows {
        m.state_bias[u.index()] = r;
    }
    let lin = |f: &str, v: StateIndex, coef: f64| LinearTerm {
        feature: fi(f),
        next_state: v,
        coef,
    };
    m.linear = vec![
        lin("unemployment", DD30, 1.0),
        lin("unemployment", Foreclosure, 0.3),
        lin("fico", DD30, -0.35),
        lin("fico", PaidOff, 0.15),
        lin("ltv", DD30, 0.2),
        lin("ltv", PaidOff, -0.15),
        lin("incentive", PaidOff, 0.3),
        lin("burnout", PaidOff, -0.25),
        lin("hpi_change", PaidOff, 0.2),
        lin("hpi_change", Foreclosure, -0.3),
        lin("times_30dd_12m", DD30, 0.2),
        lin("loan_age", PaidOff, 0.1),
        lin("lag_default_rate", Foreclosure, 0.2),
        lin("lag_prepay_rate", PaidOff, 0.1),
    ];
    m.pairs = vec![PairTerm {
        i: fi("fico"),
        j: fi("ltv"),
        next_state: PaidOff,
        coef: 2.0,
    }];
    m.triples = vec![TripleTerm {
        i: fi("orig_balance"),
        j: fi("dti"),
        k: fi("income"),
        next_state: DD30,
        coef: 2.0,
    }];
    m.thresholds = vec![ThresholdTerm {
        feature: fi("incentive"),
        knot: 0.5,
        next_state: PaidOff,
        coef: 0.6,
    }];
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_loans: usize,
    pub num_regions: usize,
    /// First panel month, `YYYY-MM`.
    pub start_month: String,
    /// Months simulated.
    pub horizon: usize,
    /// New loans enter uniformly over the first `origination_window` months.
    pub origination_window: usize,
    /// Additional loans are already seasoned when the panel opens, with ages
    /// spread uniformly over `1..=seasoning_months`.
    pub seasoning_months: usize,
    pub seed: u64,
    /// Loan term in months for the amortization schedule.
    pub term_months: u32,
    #[serde(rename = "macro")]
    pub macro_cfg: MacroConfig,
    pub truth: GroundTruthModel,
    /// Per optional feature, the share of loans whose value is blanked.
    pub missing_rate: BTreeMap<String, f64>,
    /// Incentive (percentage points) above which a surviving month counts toward burnout.
    pub burnout_threshold: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let num_regions = 4;
        SyntheticConfig {
            num_loans: 5000,
            num_regions,
            start_month: "2009-01".into(),
            horizon: 48,
            origination_window: 48,
            seasoning_months: 36,
            seed: 1,
            term_months: 360,
            macro_cfg: MacroConfig::desk(num_regions),
            truth: default_ground_truth(),
            missing_rate: BTreeMap::from([("dti".to_string(), 0.05), ("income".to_string(), 0.03)]),
            burnout_threshold: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.num_regions < 1 {
            return Err(Error::config("num_regions", "must be at least 1"));
        }
        if self.macro_cfg.num_regions() != self.num_regions {
            return Err(Error::config(
                "macro.regional.unemployment_mean",
                format!("needs {} entries (one per region)", self.num_regions),
            ));
        }
        if self.term_months < 1 {
            return Err(Error::config("term_months", "must be at least 1"));
        }
        parse_month(&self.start_month).map_err(|e| Error::config("start_month", e.to_string()))?;
        self.macro_cfg.validate()?;
        self.truth.validate()?;
        if self.truth.dim() != FEATURES.len() {
            return Err(Error::config(
                "truth.features",
                format!("expected {} features, got {}", FEATURES.len(), self.truth.dim()),
            ));
        }
        for (k, &r) in &self.missing_rate {
            if !OPTIONAL_FEATURES.contains(&k.as_str()) {
                return Err(Error::config(format!("missing_rate.{k}"), "not an optional feature"));
            }
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("missing_rate.{k}"), "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn start_period(&self) -> i64 {
        parse_month(&self.start_month).expect("validated")
    }
}

/// Static attributes of one synthetic loan.
#[derive(Debug, Clone, PartialEq)]
pub struct LoanStatic {
    pub loan_id: String,
    /// Month offset at which the loan enters the panel.
    pub origination: usize,
    /// Loan age in months on entry; positive only for loans entering at month 0.
    pub seasoning: u32,
    pub region: usize,
    /// True values of the static features, in `FEATURES` order.
    pub values: [f64; N_STATIC],
    pub noise_static: f64,
    /// Which optional static features are reported missing.
    pub missing: [bool; N_STATIC],
}

/// One observed loan-month.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub loan: usize,
    /// Month offset within the panel.
    pub month: usize,
    pub state: StateIndex,
    pub next_state: StateIndex,
    /// True feature vector (no missing values), `FEATURES` order.
    pub features: Vec<f64>,
}

/// Generated panel: loan table, observed loan-months (ordered by month, then
/// loan) and the macro path that drove it.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub start_period: i64,
    pub loans: Vec<LoanStatic>,
    pub rows: Vec<PanelRow>,
    pub macro_path: MacroPath,
    /// Realized lagged rates `[month][region]` that fed the features.
    pub lag_default: Vec<Vec<f64>>,
    pub lag_prepay: Vec<Vec<f64>>,
}

struct LoanSim {
    rng: ChaCha8Rng,
    state: StateIndex,
    history: Vec<StateIndex>,
    burnout: f64,
    done: bool,
}

fn clipped(rng: &mut ChaCha8Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let n = Normal::new(mean, sd).expect("positive sd");
    n.sample(rng).clamp(lo, hi)
}

fn draw_static(cfg: &SyntheticConfig, id: usize, macro_path: &MacroPath) -> (LoanStatic, ChaCha8Rng) {
    let loan_id = format!("L{id:07}");
    let mut rng = ChaCha8Rng::seed_from_u64(loan_hash(&loan_id, cfg.seed));
    let window = cfg.origination_window.clamp(1, cfg.horizon) as i64;
    let start = rng.random_range(-(cfg.seasoning_months as i64)..window);
    let origination = start.max(0) as usize;
    let seasoning = (origination as i64 - start) as u32;
    let region = rng.random_range(0..cfg.num_regions);
    let fico = clipped(&mut rng, 718.0, 55.0, 450.0, 850.0);
    let ltv = clipped(&mut rng, 75.0, 12.0, 20.0, 125.0);
    let spread = clipped(&mut rng, 1.4, 0.7, 0.25, 4.0);
    let orig_rate = macro_path.national_rate[origination] + spread;
    let balance = clipped(&mut rng, 220_000.0, 80_000.0, 40_000.0, 800_000.0);
    let dti = clipped(&mut rng, 35.0, 9.0, 5.0, 65.0);
    let income = clipped(&mut rng, 85.0, 30.0, 15.0, 300.0);
    let noise_static = clipped(&mut rng, 0.0, 1.0, -5.0, 5.0);
    let mut missing = [false; N_STATIC];
    for (k, &rate) in &cfg.missing_rate {
        let u: f64 = rng.random();
        if u < rate {
            missing[fi(k)] = true;
        }
    }
    (
        LoanStatic {
            loan_id,
            origination,
            seasoning,
            region,
            values: [fico, ltv, orig_rate, balance, dti, income],
            noise_static,
            missing,
        },
        rng,
    )
}

/// Scheduled remaining balance as a fraction of the original for a fixed-rate
/// annuity with annual rate `rate_pct`, `n` months term, after `k` payments.
pub fn scheduled_balance_ratio(rate_pct: f64, n: u32, k: u32) -> f64 {
    let k = k.min(n);
    let r = rate_pct / 1200.0;
    if r.abs() < 1e-12 {
        return 1.0 - k as f64 / n as f64;
    }
    let g = 1.0 + r;
    (g.powi(n as i32) - g.powi(k as i32)) / (g.powi(n as i32) - 1.0)
}

/// Counts of each pre-absorption state over the last 12 observed months.
pub fn behavior_counts(history: &[StateIndex]) -> [f64; 5] {
    let mut c = [0.0; 5];
    for s in history.iter().rev().take(12) {
        if s.index() < 5 {
            c[s.index()] += 1.0;
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn monthly_features(
    cfg: &SyntheticConfig,
    loan: &LoanStatic,
    sim: &LoanSim,
    t: usize,
    path: &MacroPath,
    lag_def: f64,
    lag_pre: f64,
    noise_dynamic: f64,
) -> Vec<f64> {
    let age = (t - loan.origination) as u32 + loan.seasoning;
    let (rate, unemp, hpi) = path.at(loan.region, t);
    let (_, _, hpi0) = path.at(loan.region, loan.origination);
    let counts = behavior_counts(&sim.history);
    let mut x = Vec::with_capacity(FEATURES.len());
    x.extend_from_slice(&loan.values);
    x.push(age as f64);
    x.push(scheduled_balance_ratio(loan.values[2], cfg.term_months, age));
    x.push(rate);
    x.push(loan.values[2] - rate);
    x.push(unemp);
    x.push(hpi / hpi0 - 1.0);
    x.extend_from_slice(&counts);
    x.push(sim.burnout);
    x.push(lag_def);
    x.push(lag_pre);
    x.push(loan.noise_static);
    x.push(noise_dynamic);
    debug_assert_eq!(x.len(), FEATURES.len());
    x
}

fn draw_state(rng: &mut ChaCha8Rng, p: &[f64; K]) -> StateIndex {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (v, &pv) in p.iter().enumerate() {
        if pv > 0.0 {
            acc += pv;
            last = v;
            if u < acc {
                return StateIndex::ALL[v];
            }
        }
    }
    StateIndex::ALL[last]
}

/// Generates the panel described by `cfg`.
pub fn generate_panel(cfg: &SyntheticConfig) -> Result<Panel> {
    cfg.validate()?;
    let macro_path = simulate_macro(&cfg.macro_cfg, cfg.horizon, cfg.seed ^ 0x6d61_6372_6f00_0000)?;
    let (loans, rngs): (Vec<LoanStatic>, Vec<ChaCha8Rng>) =
        (0..cfg.num_loans).into_par_iter().map(|i| draw_static(cfg, i, &macro_path)).unzip();
    // Seasoned loans enter current, with a clean 12-month record and burnout
    // accrued as if the opening rate had held since origination.
    let rate0 = macro_path.national_rate[0];
    let mut sims: Vec<LoanSim> = rngs
        .into_iter()
        .zip(&loans)
        .map(|(rng, loan)| LoanSim {
            rng,
            state: StateIndex::Current,
            history: vec![StateIndex::Current; (loan.seasoning as usize).min(12)],
            burnout: if loan.values[2] - rate0 > cfg.burnout_threshold {
                loan.seasoning as f64
            } else {
                0.0
            },
            done: false,
        })
        .collect();
    let nr = cfg.num_regions;
    let mut lag_def = vec![0.0; nr];
    let mut lag_pre = vec![0.0; nr];
    let mut lag_default = Vec::with_capacity(cfg.horizon);
    let mut lag_prepay = Vec::with_capacity(cfg.horizon);
    let mut rows = Vec::new();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for t in 0..cfg.horizon {
        lag_default.push(lag_def.clone());
        lag_prepay.push(lag_pre.clone());
        let month_rows: Vec<Option<PanelRow>> = sims
            .par_iter_mut()
            .enumerate()
            .map(|(i, sim)| {
                let loan = &loans[i];
                if sim.done || t < loan.origination {
                    return Ok(None);
                }
                let nd = noise.sample(&mut sim.rng);
                let x = monthly_features(cfg, loan, sim, t, &macro_path, lag_def[loan.region], lag_pre[loan.region], nd);
                let p = ground_truth_probs(&cfg.truth, &x, sim.state)?;
                let next = draw_state(&mut sim.rng, &p);
                let row = PanelRow {
                    loan: i,
                    month: t,
                    state: sim.state,
                    next_state: next,
                    features: x,
                };
                if x_incentive(&row.features) > cfg.burnout_threshold && next != StateIndex::PaidOff {
                    sim.burnout += 1.0;
                }
                sim.history.push(sim.state);
                if sim.history.len() > 12 {
                    sim.history.remove(0);
                }
                sim.state = next;
                sim.done = next.is_absorbing();
                Ok(Some(row))
            })
            .collect::<Result<_>>()?;
        let mut active = vec![0usize; nr];
        let mut defaults = vec![0usize; nr];
        let mut prepays = vec![0usize; nr];
        for row in month_rows.into_iter().flatten() {
            let r = loans[row.loan].region;
            active[r] += 1;
            use StateIndex::*;
            if matches!(row.next_state, Foreclosure | REO) && !matches!(row.state, Foreclosure | REO) {
                defaults[r] += 1;
            }
            if row.next_state == PaidOff {
                prepays[r] += 1;
            }
            rows.push(row);
        }
        for r in 0..nr {
            if active[r] > 0 {
                lag_def[r] = defaults[r] as f64 / active[r] as f64;
                lag_pre[r] = prepays[r] as f64 / active[r] as f64;
            }
        }
    }
    Ok(Panel {
        start_period: cfg.start_period(),
        loans,
        rows,
        macro_path,
        lag_default,
        lag_prepay,
    })
}

fn x_incentive(x: &[f64]) -> f64 {
    x[9]
}

impl Panel {
    pub fn period(&self, row: &PanelRow) -> i64 {
        self.start_period + row.month as i64
    }

    /// Raw record of one row as the pipeline would read it (missing values blanked).
    pub fn raw_record(&self, row: &PanelRow) -> RawRecord {
        let loan = &self.loans[row.loan];
        let mut values = HashMap::with_capacity(FEATURES.len() + 1);
        for (k, name) in FEATURES.iter().enumerate() {
            let v = if k < N_STATIC && loan.missing[k] {
                RawValue::Missing
            } else {
                RawValue::Number(row.features[k])
            };
            values.insert(name.to_string(), v);
        }
        values.insert(REGION.to_string(), RawValue::Text(region_name(loan.region)));
        RawRecord {
            loan_id: loan.loan_id.clone(),
            period: self.period(row),
            values,
            state: row.state,
            next_state: row.next_state,
        }
    }

    pub fn records(&self) -> Vec<RawRecord> {
        self.rows.iter().map(|r| self.raw_record(r)).collect()
    }

    /// Encodes every row with `schema` (normally [`synthetic_schema`]).
    pub fn samples(&self, schema: &FeatureSchema) -> Result<Vec<LoanMonthSample>> {
        let out = crate::pipeline::encode(schema, &self.records());
        if out.report.kept != self.rows.len() {
            return Err(Error::InvalidSample(format!(
                "{} of {} generated rows failed encoding",
                self.rows.len() - out.report.kept,
                self.rows.len()
            )));
        }
        Ok(out.samples)
    }

    /// Ground-truth next-state probabilities for every row.
    pub fn truth_probs(&self, truth: &GroundTruthModel) -> Result<Vec<[f64; K]>> {
        self.rows
            .par_iter()
            .map(|r| ground_truth_probs(truth, &r.features, r.state))
            .collect()
    }

    /// Writes `loans.csv` and `performance.csv` in the pipeline input format.
    /// The performance table has one row per observed month, including the
    /// month in which a loan enters an absorbing state.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("loans.csv"))?));
        let mut header = vec![crate::pipeline::LOAN_ID.to_string(), VINTAGE.to_string()];
        header.extend(FEATURES[..N_STATIC].iter().map(|s| s.to_string()));
        header.push(REGION.into());
        header.push(FEATURES[NOISE_STATIC].into());
        w.write_record(&header)?;
        for l in &self.loans {
            let mut rec = vec![l.loan_id.clone(), format_month(self.start_period + l.origination as i64 - l.seasoning as i64)];
            for k in 0..N_STATIC {
                rec.push(if l.missing[k] { String::new() } else { l.values[k].to_string() });
            }
            rec.push(region_name(l.region));
            rec.push(l.noise_static.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("performance.csv"))?));
        let dynamic: Vec<usize> = (N_STATIC..FEATURES.len()).filter(|&k| k != NOISE_STATIC).collect();
        let mut header = vec![
            crate::pipeline::LOAN_ID.to_string(),
            crate::pipeline::PERIOD.to_string(),
            crate::pipeline::STATUS.to_string(),
        ];
        header.extend(dynamic.iter().map(|&k| FEATURES[k].to_string()));
        w.write_record(&header)?;
        let mut last_row: HashMap<usize, &PanelRow> = HashMap::new();
        for row in &self.rows {
            let mut rec = vec![
                self.loans[row.loan].loan_id.clone(),
                self.period(row).to_string(),
                row.state.name().to_string(),
            ];
            rec.extend(dynamic.iter().map(|&k| row.features[k].to_string()));
            w.write_record(&rec)?;
            last_row.insert(row.loan, row);
        }
        // Closing status row for each loan: the state after its last observed month.
        let mut tails: Vec<&PanelRow> = last_row.into_values().collect();
        tails.sort_by_key(|r| r.loan);
        for row in tails {
            let mut rec = vec![
                self.loans[row.loan].loan_id.clone(),
                (self.period(row) + 1).to_string(),
                row.next_state.name().to_string(),
            ];
            rec.extend(dynamic.iter().map(|_| String::new()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let mut f = BufWriter::new(File::create(dir.join("macro.csv"))?);
        write!(f, "period,national_rate")?;
        for r in 0..self.macro_path.num_regions() {
            write!(f, ",unemployment_{0},hpi_{0}", region_name(r))?;
        }
        writeln!(f)?;
        for t in 0..self.macro_path.months() {
            write!(f, "{},{}", format_month(self.start_period + t as i64), self.macro_path.national_rate[t])?;
            for r in 0..self.macro_path.num_regions() {
                write!(f, ",{},{}", self.macro_path.unemployment[r][t], self.macro_path.hpi[r][t])?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }
}
