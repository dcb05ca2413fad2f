//! Run configuration: a TOML file plus `key.path=value` overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cgmh::CgmhConfig;
use crate::corpus::Task;
use crate::evalsvc::FilterConfig;
use crate::explain::{Method, Mode, TemplateId, TemplateName, DEFAULT_ENSEMBLE};
use crate::gateway::http::{HttpBackend, HttpConfig, DEFAULT_RETRIES};
use crate::gateway::mock::MockBackend;
use crate::gateway::Gateway;
use crate::icl::IclConfig;
use crate::instantiation::InstantiationMethod;
use crate::retrieve;
use crate::text;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("config: {0}")]
    Parse(String),
    #[error("override `{0}`: expected key=value")]
    Override(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Pairs that exemplars and the random baseline are drawn from.
    pub train: Option<PathBuf>,
    /// Pairs to explain.
    pub test: Option<PathBuf>,
    /// One statement per line; needed by the retrieval baselines.
    pub knowledge: Option<PathBuf>,
    /// Use only the first `limit` test pairs.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub url: Option<String>,
    pub mock_seed: u64,
    pub retries: usize,
    pub timeout_secs: u64,
    pub context_budget: usize,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: BackendKind::Mock,
            url: None,
            mock_seed: 0,
            retries: DEFAULT_RETRIES,
            timeout_secs: 120,
            context_budget: 2048,
            max_in_flight: 8,
        }
    }
}

impl GatewayConfig {
    pub fn build(&self) -> Result<Gateway, ConfigError> {
        let gateway = match self.backend {
            BackendKind::Mock => Gateway::new(Arc::new(MockBackend::new(self.mock_seed))),
            BackendKind::Http => {
                let url = self.url.clone().ok_or_else(|| {
                    ConfigError::Invalid("gateway.url is required for the http backend".into())
                })?;
                let mut cfg = HttpConfig::new(url);
                cfg.retries = self.retries;
                cfg.timeout = Duration::from_secs(self.timeout_secs);
                let backend =
                    HttpBackend::new(cfg).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Gateway::new(Arc::new(backend))
            }
        };
        Ok(gateway
            .with_context_budget(self.context_budget)
            .with_max_in_flight(self.max_in_flight))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    pub enabled: bool,
    pub threshold: f64,
    pub min_kept: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        let d = FilterConfig::default();
        FilterSettings {
            enabled: false,
            threshold: d.threshold,
            min_kept: d.min_kept,
        }
    }
}

impl FilterSettings {
    pub fn config(&self) -> FilterConfig {
        FilterConfig {
            threshold: self.threshold,
            min_kept: self.min_kept,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSettings {
    pub k: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            k: retrieve::DEFAULT_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    /// Keep per-record rows (written as CSV next to each method report).
    pub per_record: bool,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings { per_record: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub mode: Mode,
    /// Template for every method except `original`, which always uses the
    /// hint-free form.
    pub template: TemplateName,
    pub methods: Vec<Method>,
    /// Phase I generator whose first instantiation feeds the `top1` baseline.
    pub top1_from: InstantiationMethod,
    pub ensemble_size: usize,
    pub seed: u64,
    pub data: DataPaths,
    pub gateway: GatewayConfig,
    pub icl: IclConfig,
    pub cgmh: CgmhConfig,
    pub retrieval: RetrievalSettings,
    pub filter: FilterSettings,
    pub metrics: MetricSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Comve,
            mode: Mode::ExplainFalse,
            template: TemplateName::DefaultA,
            methods: vec![Method::Original, Method::Top1, Method::NeonIcl],
            top1_from: InstantiationMethod::Icl,
            ensemble_size: DEFAULT_ENSEMBLE,
            seed: 0,
            data: DataPaths::default(),
            gateway: GatewayConfig::default(),
            icl: IclConfig::default(),
            cgmh: CgmhConfig::default(),
            retrieval: RetrievalSettings::default(),
            filter: FilterSettings::default(),
            metrics: MetricSettings::default(),
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a plain string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted key, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{assignment} ({p} is not a table)")))?;
    }
    cur.insert(
        parts[parts.len() - 1].to_string(),
        override_value(value.trim()),
    );
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(s: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = s
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    /// Loads a config file; relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml_str(&s, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.train,
            &mut cfg.data.test,
            &mut cfg.data.knowledge,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn template_for(&self, method: Method) -> TemplateId {
        let name = if method == Method::Original {
            TemplateName::Original
        } else {
            self.template
        };
        TemplateId::new(self.task, self.mode, name)
    }

    /// Phase I generators the configured methods depend on.
    pub fn phase1_methods(&self) -> Vec<InstantiationMethod> {
        let mut out = Vec::new();
        let mut need = |m: InstantiationMethod| {
            if !out.contains(&m) {
                out.push(m);
            }
        };
        for &m in &self.methods {
            match m {
                Method::NeonIcl => need(InstantiationMethod::Icl),
                Method::NeonCgmh => need(InstantiationMethod::Cgmh),
                Method::Top1 => need(self.top1_from),
                _ => {}
            }
        }
        out.sort_by_key(|m| *m as u8);
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.methods.is_empty() {
            return bad("no methods configured".into());
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return bad("methods are listed more than once".into());
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1".into());
        }
        if self.icl.n_samples == 0 || self.cgmh.chains == 0 {
            return bad("icl.n_samples and cgmh.chains must be positive".into());
        }
        if !self.template.uses_hints() && self.methods.iter().any(|&m| m != Method::Original) {
            return bad(format!(
                "template {} cannot carry hints",
                self.template.as_str()
            ));
        }
        if !matches!(
            self.top1_from,
            InstantiationMethod::Icl | InstantiationMethod::Cgmh
        ) {
            return bad("top1_from must be icl or cgmh".into());
        }
        if self.mode == Mode::ExplainCorrect && self.task == Task::Comve {
            return bad(
                "explain_correct needs correct-statement references, which only e-SNLI has".into(),
            );
        }
        let needs = |m: &[Method]| self.methods.iter().any(|x| m.contains(x));
        let mut required: Vec<(&str, &Option<PathBuf>)> = vec![("data.test", &self.data.test)];
        if needs(&[Method::Random, Method::NeonIcl])
            || self.phase1_methods().contains(&InstantiationMethod::Icl)
        {
            required.push(("data.train", &self.data.train));
        }
        if needs(&[Method::RetrievalBm25, Method::RetrievalEmbed]) {
            required.push(("data.knowledge", &self.data.knowledge));
        }
        for (name, p) in required {
            match p {
                None => return bad(format!("{name} is required for the configured methods")),
                Some(p) if !p.is_file() => {
                    return bad(format!("{name}: {} does not exist", p.display()))
                }
                _ => {}
            }
        }
        if self.gateway.backend == BackendKind::Http && self.gateway.url.is_none() {
            return bad("gateway.url is required for the http backend".into());
        }
        Ok(())
    }

    /// Canonical JSON of the whole config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        text::sha256_hex(self.canonical_json())
    }
}
