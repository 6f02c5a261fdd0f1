//! Run configuration files and run manifests.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::fit::DEFAULT_LEVELS;
use super::protocol::SweepProtocol;
use super::sweep::SweepOptions;
use super::table::ResultTable;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Role};
use crate::taskgen::TaskConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: u32,
    pub master_seed: u64,
    pub protocol: SweepProtocol,
    pub options: SweepOptions,
    pub levels: Vec<f64>,
    /// Snapshot epoch used for fits of Adam tables (last snapshot when absent).
    pub fit_epoch: Option<usize>,
    pub paper_reference: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            master_seed: 0,
            protocol: SweepProtocol::default_attention_only(),
            options: SweepOptions::default(),
            levels: DEFAULT_LEVELS.to_vec(),
            fit_epoch: None,
            paper_reference: None,
        }
    }
}

fn unknown_key(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

impl RunConfig {
    /// Parses JSON, refusing other schema versions and unknown keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value.as_object().ok_or_else(|| Error::InvalidConfig("config must be a JSON object".into()))?;
        let found = obj
            .get("schema")
            .ok_or_else(|| Error::InvalidConfig("missing `schema` field".into()))?
            .as_u64()
            .ok_or_else(|| Error::InvalidConfig("`schema` must be a non-negative integer".into()))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(Error::SchemaMismatch { found: found.min(u32::MAX as u64) as u32, expected: SCHEMA_VERSION });
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            match unknown_key(&msg) {
                Some(k) => Error::UnknownKey(k),
                None => Error::InvalidConfig(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        if self.levels.is_empty() || self.levels.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
            return Err(Error::InvalidConfig("levels must be non-empty and lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub seed: u64,
    pub perm_seed: u64,
    pub data_seed: u64,
    pub embed_seed: u64,
    pub eval_seed: u64,
    pub shuffle_seed: u64,
    pub eta: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub code_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub protocol: String,
    /// Choices not fixed by the underlying analysis, recorded with each run.
    pub operationalization: Vec<String>,
    pub runs: Vec<ManifestRun>,
}

pub fn operationalization_notes() -> Vec<String> {
    vec![
        "auto eta: largest probe logit after step 1 equals 0.1".into(),
        "auto gamma: largest probe attention score under W1 equals 10 (band [8, 12])".into(),
        "probe batch: first min(N, 256) training examples".into(),
        "Adam beta1=0.9 beta2=0.999 eps=1e-8; layer norm on the attention output".into(),
        "cell statistic: seed median; diverged runs count as accuracy 0".into(),
    ]
}

impl RunManifest {
    /// One entry per `(cell, seed)` with every derived seed and the rates used.
    pub fn build(config: &RunConfig, table: &ResultTable) -> Self {
        let mut runs: Vec<ManifestRun> = Vec::new();
        for r in &table.rows {
            if runs.last().is_some_and(|p| p.v == r.v && p.d == r.d && p.seed == r.seed) {
                continue;
            }
            let cfg = TaskConfig::new(r.v, r.l, r.n, r.d, r.m).with_seed(r.seed);
            runs.push(ManifestRun {
                v: r.v,
                l: r.l,
                n: r.n,
                d: r.d,
                m: r.m,
                seed: r.seed,
                perm_seed: cfg.perm_seed(),
                data_seed: cfg.data_seed(),
                embed_seed: cfg.embed_seed(),
                eval_seed: cfg.eval_seed(),
                shuffle_seed: derive_seed(r.seed, Role::Shuffle, 0),
                eta: r.eta,
                gamma: r.gamma,
            });
        }
        Self {
            schema: SCHEMA_VERSION,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            master_seed: config.master_seed,
            protocol: config.protocol.describe(),
            operationalization: operationalization_notes(),
            runs,
        }
    }
}
