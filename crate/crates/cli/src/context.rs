use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_DIR: &str = "manifests";

/// Exit-code classes: configuration problems (2) and runtime failures (3).
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<loanstate::Error> for Failure {
    fn from(e: loanstate::Error) -> Self {
        match e {
            loanstate::Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Attaches a description to runtime errors.
pub trait Describe<T> {
    fn describe(self, what: impl Into<String>) -> CliResult<T>;
}

impl<T, E: Into<Failure>> Describe<T> for Result<T, E> {
    fn describe(self, what: impl Into<String>) -> CliResult<T> {
        self.map_err(|e| match e.into() {
            Failure::Runtime(err) => Failure::Runtime(err.context(what.into())),
            cfg => cfg,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses JSON into `T`, naming the offending key on failure.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Failure::Config(inner.to_string())
        } else {
            Failure::Config(format!("{path}: {inner}"))
        }
    })
}

/// Per-invocation settings shared by every command.
pub struct Ctx {
    pub command: &'static str,
    pub out: PathBuf,
    pub config_path: Option<PathBuf>,
    config_text: Option<String>,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub jobs: Option<usize>,
    started: Instant,
}

impl Ctx {
    pub fn new(
        command: &'static str,
        out: PathBuf,
        config_path: Option<PathBuf>,
        seed: Option<u64>,
        deterministic: bool,
        jobs: Option<usize>,
    ) -> CliResult<Self> {
        let config_text = match &config_path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?),
            None => None,
        };
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Ctx {
            command,
            out,
            config_path,
            config_text,
            seed,
            deterministic,
            jobs,
            started: Instant::now(),
        })
    }

    /// The command config, or its defaults when no file was given.
    pub fn config<T: DeserializeOwned + Default>(&self) -> CliResult<T> {
        match &self.config_text {
            Some(t) => parse_config(t),
            None => Ok(T::default()),
        }
    }

    /// Resolves a config path against the working directory.
    pub fn path(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn manifest(&self, effective_config: &impl Serialize) -> CliResult<Manifest> {
        let config = serde_json::to_value(effective_config).map_err(anyhow::Error::from)?;
        let bytes = serde_json::to_vec(&config).map_err(anyhow::Error::from)?;
        Ok(Manifest {
            version: MANIFEST_VERSION,
            command: self.command.to_string(),
            config_path: self.config_path.as_ref().map(|p| p.display().to_string()),
            config_hash: sha256_hex(&bytes),
            config,
            seeds: BTreeMap::new(),
            deterministic: self.deterministic,
            jobs: self.jobs,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: serde_json::Map::new(),
            wall_time_s: None,
        })
    }

    /// Hashes the listed artifacts and writes the manifest.
    pub fn finish(&self, mut m: Manifest) -> CliResult<PathBuf> {
        let hash_all = |set: &mut BTreeMap<String, String>| -> CliResult<()> {
            for (rel, h) in set.iter_mut() {
                let bytes = fs::read(self.path(rel)).with_context(|| format!("hashing {rel}"))?;
                *h = sha256_hex(&bytes);
            }
            Ok(())
        };
        hash_all(&mut m.inputs)?;
        hash_all(&mut m.outputs)?;
        if !self.deterministic {
            m.wall_time_s = Some(self.started.elapsed().as_secs_f64());
        }
        let dir = self.out.join(MANIFEST_DIR);
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}-{}.json", m.command, &m.config_hash[..12]));
        let text = serde_json::to_string_pretty(&m).map_err(anyhow::Error::from)?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

/// Record of one command invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub command: String,
    pub config_path: Option<String>,
    pub config_hash: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub deterministic: bool,
    pub jobs: Option<usize>,
    /// Path relative to the working directory, then SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Map<String, Value>,
    pub wall_time_s: Option<f64>,
}

impl Manifest {
    pub fn input(&mut self, rel: impl Into<String>) {
        self.inputs.insert(rel.into(), String::new());
    }

    pub fn output(&mut self, rel: impl Into<String>) {
        self.outputs.insert(rel.into(), String::new());
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.into(), seed);
    }

    pub fn put(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.into(), serde_json::to_value(value).unwrap_or(Value::Null));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        batch_size: usize,
    }

    #[derive(Debug, Default, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Outer {
        train: Inner,
    }

    #[test]
    fn config_errors_name_the_key() {
        match parse_config::<Outer>(r#"{"train": {"batch_size": -4}}"#) {
            Err(Failure::Config(m)) => assert!(m.contains("train.batch_size"), "{m}"),
            other => panic!("{other:?}"),
        }
        match parse_config::<Outer>(r#"{"trian": {}}"#) {
            Err(Failure::Config(m)) => assert!(m.contains("trian"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
