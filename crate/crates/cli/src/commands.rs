use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{anyhow, Context as _};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use loanstate::analysis::{
    average_row, leave_one_out_report, pair_scan, partial_dependence, prefilter, range_grid, rank_report, scan_columns,
    sensitivities, triple_scan, ConditioningSet, ReportEntry, ScanConfig,
};
use loanstate::evalmetrics::{auc_matrix, lr_test, pool_gap_stats, transition_auc};
use loanstate::network::{deserialize_expecting, write_model_file, EnsembleModel, TransitionModel, WeightPrecision};
use loanstate::pipeline::{
    encode, format_month, load_records, parse_month, prepare as prepare_data, read_cache, write_cache, CacheSidecar,
    Dataset, FeatureSchema, NormalizationStats, SplitConfig,
};
use loanstate::risk::{
    current_probabilities, make_ranked_pools, multi_period_frozen, noncurrent_curve, pool_normal, pool_poisson,
    portfolio_loss, rank_by_scores, realized_outcomes, simulate_pool_mc, CovariateEvolver, LoanOutcome, PoolLoan,
    SimConfig,
};
use loanstate::synth::{generate_panel, synthetic_schema, MacroConfig, MacroState, SyntheticConfig};
use loanstate::trainer::{
    dataset_loss, grid_search, train_ensemble, RunOptions, TrainConfig,
};
use loanstate::StateIndex;

use crate::context::{parse_config, CliResult, Ctx, Describe, Failure};

fn config_error(key: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("{key}: {msg}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn rel(dir: &str, file: &str) -> String {
    Path::new(dir).join(file).display().to_string()
}

// ---------------------------------------------------------------- synth

/// The synth config is a `SyntheticConfig` plus an optional `output` key.
#[derive(Serialize)]
struct SynthCmd {
    output: String,
    #[serde(flatten)]
    synthetic: SyntheticConfig,
}

fn synth_config(ctx: &Ctx) -> CliResult<SynthCmd> {
    let mut raw: serde_json::Map<String, Value> = ctx.config()?;
    let output = match raw.remove("output") {
        None => "data".to_string(),
        Some(Value::String(s)) => s,
        Some(_) => return Err(config_error("output", "expected a string")),
    };
    let synthetic = parse_config(&Value::Object(raw).to_string())?;
    Ok(SynthCmd { output, synthetic })
}

pub fn synth(ctx: &Ctx) -> CliResult<()> {
    let mut cfg = synth_config(ctx)?;
    if let Some(s) = ctx.seed {
        cfg.synthetic.seed = s;
    }
    cfg.synthetic.validate()?;
    let panel = generate_panel(&cfg.synthetic).describe("generating panel")?;
    let dir = ctx.path(&cfg.output);
    panel.write_csv(&dir).describe("writing panel")?;
    write_json(&dir.join("truth.json"), &cfg.synthetic.truth)?;

    let mut m = ctx.manifest(&cfg)?;
    m.seed("synth", cfg.synthetic.seed);
    for f in ["loans.csv", "performance.csv", "macro.csv", "truth.json"] {
        m.output(rel(&cfg.output, f));
    }
    m.put("loans", panel.loans.len());
    m.put("loan_months", panel.rows.len());
    println!("synth: {} loans, {} loan-months -> {}", panel.loans.len(), panel.rows.len(), dir.display());
    ctx.finish(m)?;
    Ok(())
}

// ---------------------------------------------------------------- prepare

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PrepareCmd {
    input: String,
    output: String,
    /// Schema JSON; the synthetic schema with `num_regions` regions otherwise.
    schema: Option<String>,
    num_regions: usize,
    train_end: String,
    valid_end: String,
    test_end: Option<String>,
    seed: u64,
}

impl Default for PrepareCmd {
    fn default() -> Self {
        PrepareCmd {
            input: "data".into(),
            output: "prepared".into(),
            schema: None,
            num_regions: 4,
            train_end: "2012-01".into(),
            valid_end: "2012-06".into(),
            test_end: None,
            seed: 0,
        }
    }
}

pub fn prepare(ctx: &Ctx) -> CliResult<()> {
    let mut cfg: PrepareCmd = ctx.config()?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let month = |key: &str, v: &str| parse_month(v).map_err(|e| config_error(key, e));
    let split = SplitConfig {
        train_end: month("train_end", &cfg.train_end)?,
        valid_end: month("valid_end", &cfg.valid_end)?,
        test_end: cfg.test_end.as_deref().map(|t| month("test_end", t)).transpose()?,
    };
    if split.valid_end < split.train_end {
        return Err(config_error("valid_end", "must not precede train_end"));
    }
    let schema = match &cfg.schema {
        Some(p) => {
            let text = fs::read_to_string(ctx.path(p)).map_err(|e| config_error("schema", e))?;
            parse_config::<FeatureSchema>(&text)?
        }
        None => {
            if cfg.num_regions == 0 {
                return Err(config_error("num_regions", "must be at least 1"));
            }
            synthetic_schema(cfg.num_regions)
        }
    };
    let input = ctx.path(&cfg.input);
    let (records, join) =
        load_records(&input.join("loans.csv"), &input.join("performance.csv")).describe("reading panel CSVs")?;
    let enc = encode(&schema, &records);
    let data = prepare_data(&schema, enc.samples, &split).describe("splitting")?;
    if data.train.is_empty() {
        return Err(Failure::Runtime(anyhow!("training split is empty; check train_end")));
    }
    let out = ctx.path(&cfg.output);
    for (name, d) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        write_cache(&out.join(name), d, &schema, &data.stats, (0, 1), cfg.seed).describe(format!("writing {name}"))?;
    }
    write_json(&out.join("schema.json"), &schema)?;
    write_json(&out.join("stats.json"), &data.stats)?;
    write_json(
        &out.join("drop_report.json"),
        &json!({ "join": join, "encode": enc.report, "warnings": data.warnings }),
    )?;

    let mut m = ctx.manifest(&cfg)?;
    m.seed("shard", cfg.seed);
    m.input(rel(&cfg.input, "loans.csv"));
    m.input(rel(&cfg.input, "performance.csv"));
    for f in ["train.bin", "train.json", "valid.bin", "valid.json", "test.bin", "test.json", "schema.json", "stats.json"] {
        m.output(rel(&cfg.output, f));
    }
    m.put("train_rows", data.train.len());
    m.put("valid_rows", data.valid.len());
    m.put("test_rows", data.test.len());
    m.put("dropped", enc.report.dropped());
    m.put("schema_hash", schema.hash());
    println!(
        "prepare: train {} / valid {} / test {} rows, {} columns",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        schema.d_x()
    );
    ctx.finish(m)?;
    Ok(())
}

// ---------------------------------------------------------------- shared loading

fn load_split(ctx: &Ctx, data_dir: &str, split: &str) -> CliResult<(Dataset, CacheSidecar)> {
    if !["train", "valid", "test"].contains(&split) {
        return Err(config_error("split", format!("`{split}` is not one of train, valid, test")));
    }
    read_cache(&ctx.path(data_dir).join(split)).describe(format!("reading {split} split from {data_dir}"))
}

fn load_model(ctx: &Ctx, path: &str, schema: &FeatureSchema) -> CliResult<(EnsembleModel, String)> {
    let bytes = fs::read(ctx.path(path)).with_context(|| format!("reading model {path}"))?;
    let model = deserialize_expecting(&bytes, &schema.hash()).describe(format!("loading model {path}"))?;
    Ok((model, crate::context::sha256_hex(&bytes)))
}

fn column_names(schema: &FeatureSchema) -> Vec<String> {
    schema.columns().iter().map(|c| c.name.clone()).collect()
}

// ---------------------------------------------------------------- train

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainCmd {
    data: String,
    model: String,
    train: TrainConfig,
    /// Partial overrides of `train`, one per grid point.
    grid: Vec<Value>,
    ensemble: usize,
    precision: WeightPrecision,
    log: String,
}

impl Default for TrainCmd {
    fn default() -> Self {
        TrainCmd {
            data: "prepared".into(),
            model: "model.bin".into(),
            train: TrainConfig::default(),
            grid: vec![],
            ensemble: 1,
            precision: WeightPrecision::F64,
            log: "training_log.csv".into(),
        }
    }
}

fn prefix_config_error(prefix: &str, e: loanstate::Error) -> Failure {
    match e {
        loanstate::Error::Config { key, message } => Failure::Config(format!("{prefix}{key}: {message}")),
        other => Failure::from(other),
    }
}

/// Grid entries are JSON objects merged over the base training config.
fn expand_grid(base: &TrainConfig, grid: &[Value]) -> CliResult<Vec<TrainConfig>> {
    let base = serde_json::to_value(base).map_err(anyhow::Error::from)?;
    grid.iter()
        .enumerate()
        .map(|(i, g)| {
            let Value::Object(over) = g else {
                return Err(Failure::Config(format!("grid[{i}]: expected an object")));
            };
            let mut merged = base.clone();
            for (k, v) in over {
                merged[k] = v.clone();
            }
            let c: TrainConfig = parse_config(&merged.to_string()).map_err(|f| match f {
                Failure::Config(m) => Failure::Config(format!("grid[{i}].{m}")),
                other => other,
            })?;
            c.validate().map_err(|e| prefix_config_error(&format!("grid[{i}]."), e))?;
            Ok(c)
        })
        .collect()
}

pub fn train(ctx: &Ctx) -> CliResult<()> {
    let mut cfg: TrainCmd = ctx.config()?;
    if let Some(s) = ctx.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate().map_err(|e| prefix_config_error("train.", e))?;
    if cfg.ensemble == 0 {
        return Err(config_error("ensemble", "must be at least 1"));
    }
    let grid = expand_grid(&cfg.train, &cfg.grid)?;
    let (train, side) = load_split(ctx, &cfg.data, "train")?;
    let (valid, _) = load_split(ctx, &cfg.data, "valid")?;
    let opts = RunOptions {
        timing: !ctx.deterministic,
    };
    let mut m = ctx.manifest(&cfg)?;
    m.input(rel(&cfg.data, "train.bin"));
    m.input(rel(&cfg.data, "valid.bin"));

    let chosen = if grid.is_empty() {
        cfg.train.clone()
    } else {
        let g = grid_search(&grid, &train, &valid, opts).describe("grid search")?;
        let path = ctx.path("grid.csv");
        g.write_csv(create(&path)?)?;
        m.output("grid.csv");
        m.put("grid_best_index", g.best);
        g.leaderboard[g.best].config.clone()
    };
    let e = train_ensemble(&chosen, &train, &valid, cfg.ensemble, opts).describe("training")?;
    for (k, log) in e.logs.iter().enumerate() {
        let name = if k == 0 { cfg.log.clone() } else { format!("{}.member{k}", cfg.log) };
        log.write_csv(create(&ctx.path(&name))?)?;
        m.output(name);
    }
    let seeds = e.seeds.clone();
    let mut model = EnsembleModel::new(e.members, e.seeds, side.schema.clone(), side.stats.clone())?;
    model.metadata.insert("train_config".into(), serde_json::to_value(&chosen).map_err(anyhow::Error::from)?);
    let valid_loss = dataset_loss(&model, &valid);
    model.metadata.insert("valid_loss".into(), json!(valid_loss));
    write_model_file(&ctx.path(&cfg.model), &model, cfg.precision).describe("writing model")?;
    m.output(cfg.model.clone());
    for (k, s) in seeds.iter().enumerate() {
        m.seed(&format!("member{k}"), *s);
    }
    m.put("members", model.len());
    m.put("dropped_members", e.dropped.len());
    m.put("num_params", model.num_params());
    m.put("best_valid_loss", e.logs[0].best_valid_loss());
    m.put("best_epoch", e.logs[0].best_epoch);
    m.put("valid_loss", valid_loss);
    m.put("hidden", &chosen.hidden);
    println!(
        "train: {} member(s), {} params, validation loss {valid_loss:.6}",
        model.len(),
        model.num_params()
    );
    ctx.finish(m)?;
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalCmd {
    data: String,
    model: String,
    /// Null model for the likelihood-ratio test.
    baseline: Option<String>,
    split: String,
    output: String,
}

impl Default for EvalCmd {
    fn default() -> Self {
        EvalCmd {
            data: "prepared".into(),
            model: "model.bin".into(),
            baseline: None,
            split: "test".into(),
            output: "eval".into(),
        }
    }
}

pub fn eval(ctx: &Ctx) -> CliResult<()> {
    let cfg: EvalCmd = ctx.config()?;
    let (data, side) = load_split(ctx, &cfg.data, &cfg.split)?;
    let (model, _) = load_model(ctx, &cfg.model, &side.schema)?;
    let loss = dataset_loss(&model, &data);
    let member_losses: Vec<f64> = model.members.iter().map(|p| dataset_loss(p, &data)).collect();
    let aucs = auc_matrix(&model, &data);
    let out = ctx.path(&cfg.output);
    aucs.write_csv(create(&out.join("auc_matrix.csv"))?)?;
    let mut m = ctx.manifest(&cfg)?;
    m.input(rel(&cfg.data, &format!("{}.bin", cfg.split)));
    m.input(cfg.model.clone());
    m.output(rel(&cfg.output, "auc_matrix.csv"));
    if let Some(roc) = transition_auc(&model, &data, StateIndex::Current, StateIndex::PaidOff) {
        roc.write_csv(create(&out.join("roc_current_paidoff.csv"))?)?;
        m.output(rel(&cfg.output, "roc_current_paidoff.csv"));
    }
    let mut summary = json!({
        "split": cfg.split,
        "samples": data.len(),
        "loss": loss,
        "member_losses": member_losses,
        "num_params": model.num_params(),
        "auc_current_paidoff": aucs.get(StateIndex::Current, StateIndex::PaidOff),
        "auc_current_dd30": aucs.get(StateIndex::Current, StateIndex::DD30),
    });
    if let Some(b) = &cfg.baseline {
        let (base, _) = load_model(ctx, b, &side.schema)?;
        let base_loss = dataset_loss(&base, &data);
        let t = lr_test(base_loss, loss, data.len(), base.num_params(), model.num_params());
        summary["baseline_loss"] = json!(base_loss);
        summary["lr_test"] = serde_json::to_value(&t).map_err(anyhow::Error::from)?;
        m.input(b.clone());
    }
    write_json(&out.join("eval.json"), &summary)?;
    m.output(rel(&cfg.output, "eval.json"));
    if let Value::Object(s) = summary {
        m.summary = s;
    }
    println!("eval: {} loss {loss:.6} on {} samples", cfg.split, data.len());
    ctx.finish(m)?;
    Ok(())
}

// ---------------------------------------------------------------- sensitivity

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SensitivityCmd {
    data: String,
    model: String,
    split: String,
    from: StateIndex,
    to: StateIndex,
    sample_cap: usize,
    seed: u64,
    leave_one_out: bool,
    output: String,
}

impl Default for SensitivityCmd {
    fn default() -> Self {
        SensitivityCmd {
            data: "prepared".into(),
            model: "model.bin".into(),
            split: "test".into(),
            from: StateIndex::Current,
            to: StateIndex::PaidOff,
            sample_cap: loanstate::analysis::DEFAULT_SAMPLE_CAP,
            seed: 0,
            leave_one_out: true,
            output: "sensitivity".into(),
        }
    }
}

fn report_metadata(model_hash: &str, u: StateIndex, v: StateIndex, cond: &ConditioningSet) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("model_sha256".to_string(), model_hash.to_string()),
        ("from".to_string(), u.to_string()),
        ("to".to_string(), v.to_string()),
        ("samples".to_string(), cond.len().to_string()),
        ("population".to_string(), cond.population.to_string()),
    ])
}

pub fn sensitivity(ctx: &Ctx) -> CliResult<()> {
    let mut cfg: SensitivityCmd = ctx.config()?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let (data, side) = load_split(ctx, &cfg.data, &cfg.split)?;
    let (model, hash) = load_model(ctx, &cfg.model, &side.schema)?;
    let names = column_names(&side.schema);
    let cond = ConditioningSet::sampled(&data, cfg.from, cfg.sample_cap, cfg.seed);
    let sens = sensitivities(&model, &data, &cond, cfg.to).describe("sensitivities")?;
    let entries = sens
        .iter()
        .enumerate()
        .map(|(c, &v)| ReportEntry {
            columns: vec![c],
            label: names[c].clone(),
            value: v,
        })
        .collect();
    let report = rank_report(entries, report_metadata(&hash, cfg.from, cfg.to, &cond));
    let out = ctx.path(&cfg.output);
    let file = format!("sensitivity_{}_{}.csv", cfg.from, cfg.to);
    report.write_csv(create(&out.join(&file))?)?;
    let mut m = ctx.manifest(&cfg)?;
    m.seed("subsample", cfg.seed);
    m.input(rel(&cfg.data, &format!("{}.bin", cfg.split)));
    m.input(cfg.model.clone());
    m.output(rel(&cfg.output, &file));
    m.put(
        "top",
        report.top(5).iter().map(|e| json!([e.label, e.value])).collect::<Vec<_>>(),
    );
    if cfg.leave_one_out {
        let loo = leave_one_out_report(&model, &data, &side.schema).describe("leave-one-out")?;
        loo.write_csv(create(&out.join("leave_one_out.csv"))?)?;
        m.output(rel(&cfg.output, "leave_one_out.csv"));
        m.put("baseline_loss", loo.baseline);
    }
    println!("sensitivity: {} -> {}, {} samples", cfg.from, cfg.to, cond.len());
    ctx.finish(m)?;
    Ok(())
}

// ---------------------------------------------------------------- interact

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InteractCmd {
    data: String,
    model: String,
    split: String,
    from: StateIndex,
    to: StateIndex,
    scan: ScanConfig,
    triples: bool,
    output: String,
}

impl Default for InteractCmd {
    fn default() -> Self {
        InteractCmd {
            data: "prepared".into(),
            model: "model.bin".into(),
            split: "test".into(),
            from: StateIndex::Current,
            to: StateIndex::PaidOff,
            scan: ScanConfig::default(),
            triples: true,
            output: "interact".into(),
        }
    }
}

pub fn interact(ctx: &Ctx) -> CliResult<()> {
    let mut cfg: InteractCmd = ctx.config()?;
    if let Some(s) = ctx.seed {
        cfg.scan.seed = s;
    }
    let (data, side) = load_split(ctx, &cfg.data, &cfg.split)?;
    let (model, hash) = load_model(ctx, &cfg.model, &side.schema)?;
    let schema = &side.schema;
    let names = column_names(schema);
    let deltas = cfg.scan.deltas(schema).map_err(|e| prefix_config_error("scan.", e))?;
    let cond = ConditioningSet::sampled(&data, cfg.from, cfg.scan.sample_cap, cfg.scan.seed);
    let cols = scan_columns(schema);
    let mut meta = report_metadata(&hash, cfg.from, cfg.to, &cond);
    meta.insert("delta".into(), cfg.scan.delta.to_string());
    meta.insert("mode".into(), format!("{:?}", cfg.scan.mode).to_lowercase());

    let pairs = pair_scan(&model, &data, &cond, cfg.to, &cols, &deltas, cfg.scan.mode).describe("pair scan")?;
    let entries = pairs
        .into_iter()
        .map(|((i, j), v)| ReportEntry {
            columns: vec![i, j],
            label: format!("{} x {}", names[i], names[j]),
            value: v,
        })
        .collect();
    let pr = rank_report(entries, meta.clone());
    let out = ctx.path(&cfg.output);
    pr.write_csv(create(&out.join("pairs.csv"))?)?;
    let mut m = ctx.manifest(&cfg)?;
    m.seed("subsample", cfg.scan.seed);
    m.input(rel(&cfg.data, &format!("{}.bin", cfg.split)));
    m.input(cfg.model.clone());
    m.output(rel(&cfg.output, "pairs.csv"));
    m.put("top_pair", pr.entries.first().map(|e| json!([e.label, e.value])));
    if cfg.triples {
        let sens = sensitivities(&model, &data, &cond, cfg.to).describe("sensitivities")?;
        let kept = prefilter(&sens, &cols, cfg.scan.prefilter);
        let triples = triple_scan(&model, &data, &cond, cfg.to, &kept, &deltas, cfg.scan.mode, cfg.scan.triple_scheme)
            .describe("triple scan")?;
        let entries = triples
            .into_iter()
            .map(|((i, j, k), v)| ReportEntry {
                columns: vec![i, j, k],
                label: format!("{} x {} x {}", names[i], names[j], names[k]),
                value: v,
            })
            .collect();
        meta.insert("prefilter".into(), kept.len().to_string());
        let tr = rank_report(entries, meta);
        tr.write_csv(create(&out.join("triples.csv"))?)?;
        m.output(rel(&cfg.output, "triples.csv"));
        m.put("top_triple", tr.entries.first().map(|e| json!([e.label, e.value])));
    }
    println!("interact: {} -> {}, {} samples", cfg.from, cfg.to, cond.len());
    ctx.finish(m)?;
    Ok(())
}

// ---------------------------------------------------------------- pdp

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PdpCmd {
    data: String,
    model: String,
    split: String,
    from: StateIndex,
    /// One to three column names.
    features: Vec<String>,
    points: usize,
    output: String,
}

impl Default for PdpCmd {
    fn default() -> Self {
        PdpCmd {
            data: "prepared".into(),
            model: "model.bin".into(),
            split: "test".into(),
            from: StateIndex::Current,
            features: vec!["fico".into()],
            points: 21,
            output: "pdp/pdp.csv".into(),
        }
    }
}

pub fn pdp(ctx: &Ctx) -> CliResult<()> {
    let cfg: PdpCmd = ctx.config()?;
    if cfg.points == 0 {
        return Err(config_error("points", "must be at least 1"));
    }
    let (data, side) = load_split(ctx, &cfg.data, &cfg.split)?;
    let (model, _) = load_model(ctx, &cfg.model, &side.schema)?;
    let mut vary = Vec::new();
    for (i, f) in cfg.features.iter().enumerate() {
        let c = side
            .schema
            .column_index(f)
            .ok_or_else(|| config_error(&format!("features[{i}]"), format!("unknown column `{f}`")))?;
        vary.push((c, range_grid(&side.stats, c, cfg.points)));
    }
    let cond = ConditioningSet::all(&data, cfg.from);
    let mut base = average_row(&data, &cond).describe("average row")?;
    side.schema.set_state(&mut base, cfg.from);
    let table = partial_dependence(&model, &base, &vary, &cfg.features, Some(&side.stats))
        .map_err(|e| prefix_config_error("", e))?;
    table.write_csv(create(&ctx.path(&cfg.output))?, Some(&side.stats))?;
    let mut m = ctx.manifest(&cfg)?;
    m.input(rel(&cfg.data, &format!("{}.bin", cfg.split)));
    m.input(cfg.model.clone());
    m.output(cfg.output.clone());
    m.put("points", table.points.len());
    m.put("outside_range", table.warnings());
    println!("pdp: {} grid points over {:?}", table.points.len(), cfg.features);
    ctx.finish(m)?;
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateCmd {
    data: String,
    model: String,
    split: String,
    /// Snapshot month `YYYY-MM`; the first month of the split otherwise.
    period: Option<String>,
    sim: SimConfig,
    /// Simulate the national rate forward along each path.
    rate_hook: bool,
    term_months: u32,
    target: StateIndex,
    /// Column whose raw value orders loans into pools.
    pool_key: String,
    pool_size: usize,
    output: String,
}

impl Default for SimulateCmd {
    fn default() -> Self {
        SimulateCmd {
            data: "prepared".into(),
            model: "model.bin".into(),
            split: "test".into(),
            period: None,
            sim: SimConfig {
                horizon: 6,
                paths: 200,
                ..SimConfig::default()
            },
            rate_hook: true,
            term_months: 360,
            target: StateIndex::PaidOff,
            pool_key: "orig_rate".into(),
            pool_size: 500,
            output: "simulate".into(),
        }
    }
}

fn snapshot_period(cfg_period: &Option<String>, data: &Dataset) -> CliResult<i64> {
    match cfg_period {
        Some(p) => parse_month(p).map_err(|e| config_error("period", e)),
        None => data
            .period
            .iter()
            .min()
            .copied()
            .ok_or_else(|| Failure::Runtime(anyhow!("split has no rows"))),
    }
}

fn raw_column(stats: &NormalizationStats, pool: &[PoolLoan], col: usize) -> Vec<f64> {
    pool.iter().map(|l| stats.denormalize_value(col, l.x[col])).collect()
}

fn evolver_for(schema: &FeatureSchema, stats: &NormalizationStats, pool: &[PoolLoan], term: u32, hook: bool) -> CovariateEvolver {
    let ev = CovariateEvolver::standard(schema, stats.clone(), term);
    match (hook, schema.column_index("national_rate")) {
        (true, Some(c)) if !pool.is_empty() => {
            let r = stats.denormalize_value(c, pool[0].x[c]);
            let start = MacroState {
                rate_lags: [r; 4],
                unemployment: vec![0.0],
                hpi: vec![1.0],
            };
            ev.with_rate_hook(schema, MacroConfig::desk(1), start)
        }
        _ => ev,
    }
}

pub fn simulate(ctx: &Ctx) -> CliResult<()> {
    let mut cfg: SimulateCmd = ctx.config()?;
    if let Some(s) = ctx.seed {
        cfg.sim.seed = s;
    }
    if cfg.pool_size == 0 {
        return Err(config_error("pool_size", "must be at least 1"));
    }
    let (data, side) = load_split(ctx, &cfg.data, &cfg.split)?;
    let (model, _) = load_model(ctx, &cfg.model, &side.schema)?;
    let (schema, stats) = (&side.schema, &side.stats);
    let key = schema
        .column_index(&cfg.pool_key)
        .ok_or_else(|| config_error("pool_key", format!("unknown column `{}`", cfg.pool_key)))?;
    let period = snapshot_period(&cfg.period, &data)?;
    let snapshot = PoolLoan::snapshot(&data, period);
    if snapshot.is_empty() {
        return Err(Failure::Runtime(anyhow!("no active loans in {}", format_month(period))));
    }
    let evolver = evolver_for(schema, stats, &snapshot, cfg.term_months, cfg.rate_hook);
    let out = ctx.path(&cfg.output);
    let mut m = ctx.manifest(&cfg)?;
    m.seed("paths", cfg.sim.seed);
    m.input(rel(&cfg.data, &format!("{}.bin", cfg.split)));
    m.input(cfg.model.clone());

    let dist = simulate_pool_mc(&model, schema, &snapshot, &evolver, &cfg.sim).describe("pool simulation")?;
    dist.write_csv(create(&out.join("pool_paths.csv"))?)?;
    m.output(rel(&cfg.output, "pool_paths.csv"));

    let frozen = CovariateEvolver::standard(schema, stats.clone(), cfg.term_months);
    let target_probs = |loans: &[PoolLoan]| -> CliResult<Vec<f64>> {
        loans
            .iter()
            .map(|l| {
                let t = multi_period_frozen(&model, schema, &l.x, &frozen, cfg.sim.horizon, cfg.sim.clamp)?;
                Ok(t.get(l.state, cfg.target))
            })
            .collect()
    };
    let p = target_probs(&snapshot)?;
    let closed = json!({
        "period": format_month(period),
        "horizon": cfg.sim.horizon,
        "target": cfg.target,
        "loans": snapshot.len(),
        "monte_carlo": dist.count_distribution(cfg.target),
        "poisson": pool_poisson(&p)?,
        "normal": pool_normal(&p)?,
    });

    // Ranked pools against realized counts.
    let realized = realized_outcomes(&data, &snapshot, period, cfg.sim.horizon);
    let known: Vec<usize> = (0..snapshot.len()).filter(|&i| realized[i].is_some()).collect();
    let pool_loans: Vec<PoolLoan> = known.iter().map(|&i| snapshot[i].clone()).collect();
    let ids: Vec<String> = pool_loans.iter().map(|l| l.loan_id.clone()).collect();
    let pools = make_ranked_pools(&raw_column(stats, &pool_loans, key), &ids, cfg.pool_size)?;
    let mut w = csv::Writer::from_writer(create(&out.join("pools.csv"))?);
    w.write_record(["pool", "loans", "actual", "mc_mean", "mc_sd", "normal_mean", "normal_sd"])
        .map_err(anyhow::Error::from)?;
    let (mut mc_fc, mut normal_fc, mut actual) = (vec![], vec![], vec![]);
    for (k, members) in pools.pools.iter().enumerate() {
        let loans: Vec<PoolLoan> = members.iter().map(|&i| pool_loans[i].clone()).collect();
        let sim = SimConfig {
            seed: cfg.sim.seed.wrapping_add(1 + k as u64),
            ..cfg.sim.clone()
        };
        let mc = simulate_pool_mc(&model, schema, &loans, &evolver, &sim)?.count_distribution(cfg.target);
        let nd = pool_normal(&target_probs(&loans)?)?;
        let a = members.iter().filter(|&&i| realized[known[i]] == Some(cfg.target)).count() as f64;
        w.write_record([
            k.to_string(),
            loans.len().to_string(),
            a.to_string(),
            mc.mean.to_string(),
            mc.sd().to_string(),
            nd.mean.to_string(),
            nd.sd().to_string(),
        ])
        .map_err(anyhow::Error::from)?;
        mc_fc.push((mc.mean, mc.sd()));
        normal_fc.push((nd.mean, nd.sd()));
        actual.push(a);
    }
    w.flush()?;
    m.output(rel(&cfg.output, "pools.csv"));
    let gaps = if actual.is_empty() {
        Value::Null
    } else {
        json!({
            "monte_carlo": pool_gap_stats(&mc_fc, &actual)?,
            "normal": pool_gap_stats(&normal_fc, &actual)?,
            "last_pool_short": pools.last_short,
        })
    };
    let summary = json!({ "snapshot": closed, "pool_gaps": gaps });
    write_json(&out.join("summary.json"), &summary)?;
    m.output(rel(&cfg.output, "summary.json"));
    m.put("loans", snapshot.len());
    m.put("mc_mean_target", dist.count_distribution(cfg.target).mean);
    m.put("pools", pools.pools.len());
    m.put("pool_gaps", gaps);
    println!(
        "simulate: {} loans from {}, {} paths, {} pools",
        snapshot.len(),
        format_month(period),
        cfg.sim.paths,
        pools.pools.len()
    );
    ctx.finish(m)?;
    Ok(())
}

// ---------------------------------------------------------------- portfolio

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PortfolioCmd {
    data: String,
    model: String,
    /// Second model to compare against; a seeded random ranking otherwise.
    baseline: Option<String>,
    split: String,
    period: Option<String>,
    horizons: Vec<usize>,
    n_points: usize,
    term_months: u32,
    /// Column holding the loan notional (raw units); unit notional if absent.
    notional: String,
    seed: u64,
    output: String,
}

impl Default for PortfolioCmd {
    fn default() -> Self {
        PortfolioCmd {
            data: "prepared".into(),
            model: "model.bin".into(),
            baseline: None,
            split: "test".into(),
            period: None,
            horizons: vec![1, 6],
            n_points: 11,
            term_months: 360,
            notional: "orig_balance".into(),
            seed: 0,
            output: "portfolio".into(),
        }
    }
}

pub fn portfolio(ctx: &Ctx) -> CliResult<()> {
    let mut cfg: PortfolioCmd = ctx.config()?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if cfg.n_points < 2 {
        return Err(config_error("n_points", "must be at least 2"));
    }
    if let Some(i) = cfg.horizons.iter().position(|&h| h == 0) {
        return Err(config_error(&format!("horizons[{i}]"), "must be at least 1"));
    }
    let (data, side) = load_split(ctx, &cfg.data, &cfg.split)?;
    let (model, _) = load_model(ctx, &cfg.model, &side.schema)?;
    let baseline = match &cfg.baseline {
        Some(b) => Some(load_model(ctx, b, &side.schema)?.0),
        None => None,
    };
    let (schema, stats) = (&side.schema, &side.stats);
    let period = snapshot_period(&cfg.period, &data)?;
    let snapshot = PoolLoan::snapshot(&data, period);
    let evolver = CovariateEvolver::standard(schema, stats.clone(), cfg.term_months);
    let notional_col = schema.column_index(&cfg.notional);

    let mut m = ctx.manifest(&cfg)?;
    m.seed("random_ranking", cfg.seed);
    m.input(rel(&cfg.data, &format!("{}.bin", cfg.split)));
    m.input(cfg.model.clone());
    if let Some(b) = &cfg.baseline {
        m.input(b.clone());
    }
    let out = ctx.path(&cfg.output);
    let mut w = csv::Writer::from_writer(create(&out.join("curve.csv"))?);
    w.write_record(["horizon", "n", "noncurrent_model", "noncurrent_baseline", "loss_model", "loss_baseline"])
        .map_err(anyhow::Error::from)?;
    let mut summary = Vec::new();
    for &h in &cfg.horizons {
        let realized = realized_outcomes(&data, &snapshot, period, h);
        let loans: Vec<PoolLoan> = (0..snapshot.len())
            .filter(|&i| realized[i].is_some())
            .map(|i| snapshot[i].clone())
            .collect();
        let states: Vec<StateIndex> = realized.iter().flatten().copied().collect();
        if loans.is_empty() {
            continue;
        }
        let ids: Vec<String> = loans.iter().map(|l| l.loan_id.clone()).collect();
        let order_a = rank_by_scores(&current_probabilities(&model, schema, &loans, h, &evolver)?, &ids);
        let order_b = match &baseline {
            Some(b) => rank_by_scores(&current_probabilities(b, schema, &loans, h, &evolver)?, &ids),
            None => {
                let keys: Vec<f64> = ids
                    .iter()
                    .map(|id| loanstate::pipeline::loan_hash(id, cfg.seed) as f64)
                    .collect();
                rank_by_scores(&keys, &ids)
            }
        };
        let n = loans.len();
        let grid: Vec<usize> = (0..cfg.n_points).map(|k| k * n / (cfg.n_points - 1)).collect();
        let ca = noncurrent_curve(&order_a, &states, &grid);
        let cb = noncurrent_curve(&order_b, &states, &grid);
        let notionals: Vec<f64> = match notional_col {
            Some(c) => raw_column(stats, &loans, c),
            None => vec![1.0; n],
        };
        let loss_of = |order: &[usize], k: usize| -> CliResult<f64> {
            let picked = &order[..k];
            let outcomes: Vec<LoanOutcome> = picked.iter().map(|&i| LoanOutcome::from_state(states[i])).collect();
            let nots: Vec<f64> = picked.iter().map(|&i| notionals[i]).collect();
            Ok(portfolio_loss(&outcomes, &nots)?)
        };
        for (g, (a, b)) in grid.iter().zip(ca.iter().zip(&cb)) {
            w.write_record([
                h.to_string(),
                g.to_string(),
                a.to_string(),
                b.to_string(),
                loss_of(&order_a, *g)?.to_string(),
                loss_of(&order_b, *g)?.to_string(),
            ])
            .map_err(anyhow::Error::from)?;
        }
        let half = n / 2;
        summary.push(json!({
            "horizon": h,
            "loans": n,
            "noncurrent_half_model": noncurrent_curve(&order_a, &states, &[half])[0],
            "noncurrent_half_baseline": noncurrent_curve(&order_b, &states, &[half])[0],
            "loss_half_model": loss_of(&order_a, half)?,
            "loss_half_baseline": loss_of(&order_b, half)?,
        }));
    }
    w.flush()?;
    m.output(rel(&cfg.output, "curve.csv"));
    write_json(&out.join("summary.json"), &summary)?;
    m.output(rel(&cfg.output, "summary.json"));
    m.put("period", format_month(period));
    m.put("horizons", &summary);
    println!("portfolio: {} loans from {}", snapshot.len(), format_month(period));
    ctx.finish(m)?;
    Ok(())
}
