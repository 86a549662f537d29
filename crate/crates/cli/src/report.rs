use std::fmt::Write as _;
use std::fs;

use serde_json::{json, Value};

use crate::context::{parse_config, CliResult, Ctx, Manifest, MANIFEST_DIR};

const PIPELINE: [&str; 9] = [
    "synth",
    "prepare",
    "train",
    "eval",
    "sensitivity",
    "interact",
    "pdp",
    "simulate",
    "portfolio",
];

/// Collects every manifest in the output directory into `report.txt` and
/// `report.json`. Commands that never ran are listed as missing.
pub fn report(ctx: &Ctx) -> CliResult<()> {
    let dir = ctx.out.join(MANIFEST_DIR);
    let mut manifests: Vec<Manifest> = Vec::new();
    if dir.is_dir() {
        let mut paths: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let text = fs::read_to_string(&p)?;
            let m: Manifest = parse_config(&text).map_err(|f| match f {
                crate::context::Failure::Config(msg) => {
                    crate::context::Failure::Runtime(anyhow::anyhow!("{}: {msg}", p.display()))
                }
                other => other,
            })?;
            if m.command != "report" {
                manifests.push(m);
            }
        }
    }
    let missing: Vec<&str> = PIPELINE
        .iter()
        .copied()
        .filter(|c| !manifests.iter().any(|m| m.command == *c))
        .collect();

    let mut text = String::new();
    for m in &manifests {
        let _ = writeln!(text, "== {} (config {})", m.command, &m.config_hash[..12]);
        for (k, v) in &m.seeds {
            let _ = writeln!(text, "  seed {k} = {v}");
        }
        for (k, v) in &m.summary {
            let _ = writeln!(text, "  {k}: {}", compact(v));
        }
        let _ = writeln!(text, "  outputs: {}", m.outputs.keys().cloned().collect::<Vec<_>>().join(", "));
    }
    if manifests.is_empty() {
        text.push_str("no manifests found\n");
    }
    if !missing.is_empty() {
        let _ = writeln!(text, "missing: {}", missing.join(", "));
    }
    fs::write(ctx.out.join("report.txt"), &text)?;
    let doc = json!({ "runs": manifests, "missing": missing });
    let body = serde_json::to_string_pretty(&doc).map_err(anyhow::Error::from)?;
    fs::write(ctx.out.join("report.json"), body + "\n")?;
    print!("{text}");
    let mut m = ctx.manifest(&json!({}))?;
    m.put("runs", manifests.len());
    m.put("missing", &missing);
    m.output("report.txt");
    m.output("report.json");
    ctx.finish(m)?;
    Ok(())
}

fn compact(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if !n.is_i64() && !n.is_u64() => format!("{f:.6}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}
