//! Maximum-likelihood fitting of transition networks: minibatch SGD with
//! momentum, a hyperbolic learning-rate decay, L2 and dropout regularization,
//! grid search over configurations and bootstrap ensembles.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    backward_batch, forward_batch, init_params, Activation, Architecture, ForwardMode, MlpParams, ParamGrads,
    Penalty, TransitionModel,
};
use crate::pipeline::{BatchSource, Dataset, InMemorySource};

/// Probabilities below this are floored before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// `lr0 / (1 + t / half_life)`.
pub fn learning_rate(t: usize, lr0: f64, half_life: f64) -> f64 {
    lr0 / (1.0 + t as f64 / half_life)
}

/// Mean negative log-likelihood plus the number of floored probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nll {
    pub loss: f64,
    pub floored: usize,
}

/// `(1/N) Σ -ln p(target_i | x_i)` evaluated in chunks.
pub fn nll_loss_detailed<M: TransitionModel + ?Sized>(model: &M, x: ArrayView2<'_, f64>, targets: &[usize]) -> Nll {
    assert_eq!(x.nrows(), targets.len(), "one target per row");
    let n = targets.len();
    if n == 0 {
        return Nll { loss: f64::NAN, floored: 0 };
    }
    const CHUNK: usize = 8192;
    let mut total = 0.0;
    let mut floored = 0;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let p = model.predict_batch(x.slice(s![start..end, ..]));
        for (i, &t) in targets[start..end].iter().enumerate() {
            let v = p[[i, t]];
            if v < PROB_FLOOR {
                floored += 1;
            }
            total -= v.max(PROB_FLOOR).ln();
        }
    }
    Nll {
        loss: total / n as f64,
        floored,
    }
}

pub fn nll_loss<M: TransitionModel + ?Sized>(model: &M, x: ArrayView2<'_, f64>, targets: &[usize]) -> f64 {
    nll_loss_detailed(model, x, targets).loss
}

pub fn dataset_loss<M: TransitionModel + ?Sized>(model: &M, data: &Dataset) -> f64 {
    nll_loss(model, data.view(), &data.targets())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub keep_input: f64,
    pub keep_hidden: f64,
    pub lr0: f64,
    /// Epochs until the learning rate halves.
    pub half_life: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub l2_lambda: f64,
    pub l2_include_biases: bool,
    pub seed: u64,
    pub bootstrap: bool,
    /// Return the validation-best epoch instead of the last one.
    pub snapshot_best: bool,
    pub num_shards: usize,
    /// Rows used to monitor training loss each epoch.
    pub monitor_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![200, 140, 140, 140, 140],
            activation: Activation::Relu,
            keep_input: 1.0,
            keep_hidden: 0.5,
            lr0: 0.1,
            half_life: 800.0,
            momentum: 0.9,
            batch_size: 4000,
            epochs: 20,
            samples_per_epoch: 50_000,
            l2_lambda: 1e-5,
            l2_include_biases: false,
            seed: 0,
            bootstrap: false,
            snapshot_best: true,
            num_shards: 16,
            monitor_rows: 20_000,
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture::new(input_dim, self.hidden.clone(), self.activation).with_dropout(self.keep_input, self.keep_hidden)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |k: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(k, "must be positive and finite"))
            }
        };
        pos("lr0", self.lr0)?;
        pos("half_life", self.half_life)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.samples_per_epoch < 1 {
            return Err(Error::config("samples_per_epoch", "must be at least 1"));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::config("l2_lambda", "must be finite and >= 0"));
        }
        if self.num_shards < 1 {
            return Err(Error::config("num_shards", "must be at least 1"));
        }
        for (k, v) in [("keep_input", self.keep_input), ("keep_hidden", self.keep_hidden)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(k, "must lie in (0, 1]"));
            }
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("hidden[{i}]"), "layer width must be at least 1"));
        }
        Ok(())
    }

    pub fn penalty(&self) -> Penalty {
        Penalty {
            lambda: self.l2_lambda,
            include_biases: self.l2_include_biases,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Seconds since training started; 0 when timing is disabled.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

impl TrainingLog {
    pub fn best_valid_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].valid_loss)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["epoch", "lr", "train_loss", "valid_loss", "wall_time"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.lr.to_string(),
                e.train_loss.to_string(),
                e.valid_loss.to_string(),
                e.wall_time.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub log: TrainingLog,
}

/// Options that do not change the fitted parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Record wall time in the log (off for byte-reproducible logs).
    pub timing: bool,
}

/// Decorrelated sub-seed for stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut h = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

/// Stochastic-gradient MLE starting from `init_params(arch, config.seed)`.
///
/// Each epoch consumes `samples_per_epoch` samples from `train`, taking
/// minibatches from consecutive shuffled passes. The update is
/// `v ← μ v − lr(t) g`, `θ ← θ + v` with `g` the minibatch mean gradient of the
/// penalized loss. When `valid` is empty the snapshot criterion falls back to
/// the monitored training loss.
pub fn sgd_train<S: BatchSource + ?Sized>(
    config: &TrainConfig,
    train: &S,
    valid: &Dataset,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.num_samples() == 0 {
        return Err(Error::Empty("training stream has no samples".into()));
    }
    let arch = config.architecture(train.input_dim());
    let init = init_params(&arch, config.seed)?;
    sgd_train_from(config, init, train, valid, opts)
}

/// Like [`sgd_train`] from given initial parameters.
pub fn sgd_train_from<S: BatchSource + ?Sized>(
    config: &TrainConfig,
    mut params: MlpParams,
    train: &S,
    valid: &Dataset,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let penalty = config.penalty();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let (mon_x, mon_t) = train.eval_rows(config.monitor_rows)?;
    let valid_x = valid.view();
    let valid_t = valid.targets();
    let mut velocity = ParamGrads::zeros_like(&params);
    let mut pass = 0u64;
    let mut stream = train.batches(config.batch_size, derive_seed(config.seed, 100 + pass))?;
    let mut log = TrainingLog::default();
    let mut best_loss: Option<f64> = None;
    let mut snapshot: Option<MlpParams> = None;
    for epoch in 0..config.epochs {
        let lr = learning_rate(epoch, config.lr0, config.half_life);
        let mut seen = 0;
        while seen < config.samples_per_epoch {
            let batch = match stream.next() {
                Some(b) => b?,
                None => {
                    pass += 1;
                    stream = train.batches(config.batch_size, derive_seed(config.seed, 100 + pass))?;
                    continue;
                }
            };
            seen += batch.len();
            let trace = forward_batch(&params, batch.x.view(), ForwardMode::Train(&mut dropout_rng))?;
            let (grads, loss) = backward_batch(&params, &trace, &batch.targets, penalty)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, lr, loss });
            }
            for (v, g) in velocity.layers.iter_mut().zip(&grads.layers) {
                v.w *= config.momentum;
                v.w.scaled_add(-lr, &g.w);
                v.b *= config.momentum;
                v.b.scaled_add(-lr, &g.b);
            }
            params.apply_step(&velocity);
            if !params.is_finite() {
                return Err(Error::Diverged { epoch, lr, loss });
            }
        }
        let train_loss = nll_loss(&params, mon_x.view(), &mon_t);
        let valid_loss = if valid_t.is_empty() {
            f64::NAN
        } else {
            nll_loss(&params, valid_x, &valid_t)
        };
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                lr,
                loss: train_loss,
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            lr,
            train_loss,
            valid_loss,
            wall_time: if opts.timing { started.elapsed().as_secs_f64() } else { 0.0 },
        });
        let criterion = if valid_loss.is_nan() { train_loss } else { valid_loss };
        if best_loss.is_none_or(|b| criterion < b) {
            best_loss = Some(criterion);
            log.best_epoch = Some(epoch);
            if config.snapshot_best {
                snapshot = Some(params.clone());
            }
        }
    }
    let params = snapshot.unwrap_or(params);
    Ok(TrainOutcome { params, log })
}

/// Convenience wrapper streaming an in-memory training split.
pub fn train_on_dataset(config: &TrainConfig, train: &Dataset, valid: &Dataset, opts: RunOptions) -> Result<TrainOutcome> {
    let source = InMemorySource::new(train, config.num_shards, derive_seed(config.seed, 2));
    sgd_train(config, &source, valid, opts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridEntry {
    pub index: usize,
    pub config: TrainConfig,
    pub num_params: usize,
    pub valid_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best: usize,
    pub best_params: MlpParams,
    pub best_log: TrainingLog,
    pub leaderboard: Vec<GridEntry>,
}

impl GridResult {
    /// Leaderboard rows sorted best first; failed runs last.
    pub fn ranked(&self) -> Vec<&GridEntry> {
        let mut v: Vec<&GridEntry> = self.leaderboard.iter().collect();
        v.sort_by(|a, b| rank_key(a).partial_cmp(&rank_key(b)).expect("no NaN keys"));
        v
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["rank", "index", "hidden", "activation", "lr0", "l2_lambda", "keep_hidden", "num_params", "valid_loss", "error"])?;
        for (rank, e) in self.ranked().into_iter().enumerate() {
            w.write_record([
                rank.to_string(),
                e.index.to_string(),
                e.config.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("-"),
                serde_json::to_value(e.config.activation)?.as_str().unwrap_or_default().to_string(),
                e.config.lr0.to_string(),
                e.config.l2_lambda.to_string(),
                e.config.keep_hidden.to_string(),
                e.num_params.to_string(),
                e.valid_loss.map(|v| v.to_string()).unwrap_or_default(),
                e.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn rank_key(e: &GridEntry) -> (u8, f64, usize, usize) {
    match e.valid_loss {
        Some(l) if l.is_finite() => (0, l, e.num_params, e.index),
        _ => (1, 0.0, e.num_params, e.index),
    }
}

/// Trains every grid point (in parallel) and picks the lowest validation loss;
/// ties go to fewer parameters, then the earlier grid index.
pub fn grid_search(grid: &[TrainConfig], train: &Dataset, valid: &Dataset, opts: RunOptions) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::config("grid", "must contain at least one configuration"));
    }
    let runs: Vec<(GridEntry, Option<TrainOutcome>)> = grid
        .par_iter()
        .enumerate()
        .map(|(index, cfg)| {
            let num_params = cfg.architecture(train.d_x()).num_params();
            let res = train_on_dataset(cfg, train, valid, opts);
            match res {
                Ok(out) => {
                    let loss = if valid.is_empty() {
                        out.log.epochs.last().map(|e| e.train_loss)
                    } else {
                        Some(dataset_loss(&out.params, valid))
                    };
                    (
                        GridEntry {
                            index,
                            config: cfg.clone(),
                            num_params,
                            valid_loss: loss,
                            error: None,
                        },
                        Some(out),
                    )
                }
                Err(e) => (
                    GridEntry {
                        index,
                        config: cfg.clone(),
                        num_params,
                        valid_loss: None,
                        error: Some(e.to_string()),
                    },
                    None,
                ),
            }
        })
        .collect();
    let (entries, outcomes): (Vec<GridEntry>, Vec<Option<TrainOutcome>>) = runs.into_iter().unzip();
    let best = entries
        .iter()
        .filter(|e| e.error.is_none() && e.valid_loss.is_some_and(|l| l.is_finite()))
        .min_by(|a, b| rank_key(a).partial_cmp(&rank_key(b)).expect("finite keys"))
        .map(|e| e.index);
    let Some(best) = best else {
        return Err(Error::AllRunsFailed(
            entries
                .iter()
                .map(|e| format!("grid[{}]: {}", e.index, e.error.clone().unwrap_or_else(|| "non-finite loss".into())))
                .collect(),
        ));
    };
    let out = outcomes.into_iter().nth(best).flatten().expect("best run succeeded");
    Ok(GridResult {
        best,
        best_params: out.params,
        best_log: out.log,
        leaderboard: entries,
    })
}

/// Seed of ensemble member `k`; member 0 uses the base seed itself.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        derive_seed(seed, 1000 + k as u64)
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub members: Vec<MlpParams>,
    pub seeds: Vec<u64>,
    pub logs: Vec<TrainingLog>,
    /// Members that diverged, with the reason.
    pub dropped: Vec<(usize, String)>,
}

/// Trains `m` members with independent seeds (and bootstrap resamples of
/// `train` when `config.bootstrap`), in parallel.
pub fn train_ensemble(config: &TrainConfig, train: &Dataset, valid: &Dataset, m: usize, opts: RunOptions) -> Result<EnsembleOutcome> {
    if m < 1 {
        return Err(Error::config("members", "must be at least 1"));
    }
    let results: Vec<(u64, Result<TrainOutcome>)> = (0..m)
        .into_par_iter()
        .map(|k| {
            let seed = member_seed(config.seed, k);
            let cfg = TrainConfig { seed, ..config.clone() };
            let res = if config.bootstrap {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
                let n = train.len();
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let src = InMemorySource::from_indices(train, &idx, cfg.num_shards, derive_seed(seed, 2));
                sgd_train(&cfg, &src, valid, opts)
            } else {
                train_on_dataset(&cfg, train, valid, opts)
            };
            (seed, res)
        })
        .collect();
    let mut out = EnsembleOutcome {
        members: vec![],
        seeds: vec![],
        logs: vec![],
        dropped: vec![],
    };
    for (k, (seed, r)) in results.into_iter().enumerate() {
        match r {
            Ok(o) => {
                out.members.push(o.params);
                out.seeds.push(seed);
                out.logs.push(o.log);
            }
            Err(e) => out.dropped.push((k, e.to_string())),
        }
    }
    if out.members.is_empty() {
        return Err(Error::AllRunsFailed(out.dropped.iter().map(|(k, e)| format!("member {k}: {e}")).collect()));
    }
    Ok(out)
}

/// Retrains the chosen configuration on the union of training and validation
/// data. No other split is touched.
pub fn refit_on_train_plus_valid(config: &TrainConfig, train: &Dataset, valid: &Dataset, opts: RunOptions) -> Result<TrainOutcome> {
    let union = Dataset::concat(&[train, valid])?;
    train_on_dataset(config, &union, &Dataset::empty(union.d_x()), opts)
}

/// Writes a leaderboard or log to `path`.
pub fn write_csv_file(path: &Path, f: impl FnOnce(std::fs::File) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    f(std::fs::File::create(path)?)
}
