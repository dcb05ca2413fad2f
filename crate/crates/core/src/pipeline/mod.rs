//! Stage orchestration: ingest, phase I, hint assembly, phase II, metrics.
//!
//! Every stage writes its artifacts into the run directory and records a
//! fingerprint in `manifest.json`. A stage whose fingerprint and outputs
//! are already present is skipped unless forced.

pub mod config;
pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cgmh;
use crate::corpus::{self, KnowledgeCorpus, StatementPair, Task};
use crate::evalsvc::{filter_by_classifier, FilterOutcome};
use crate::explain::{self, ExplanationRecord, Method, Mode};
use crate::gateway::Gateway;
use crate::icl::{self, IclError};
use crate::instantiation::{Instantiation, InstantiationMethod};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::metrics::{self, MetricReport};
use crate::retrieve::{self, Bm25Index, Bm25Params, IndexCache};
use crate::text;

pub use config::{ConfigError, RunConfig};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Phase1,
    Hints,
    Phase2,
    Metrics,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Ingest,
        Stage::Phase1,
        Stage::Hints,
        Stage::Phase2,
        Stage::Metrics,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Phase1 => "phase1",
            Stage::Hints => "hints",
            Stage::Phase2 => "phase2",
            Stage::Metrics => "metrics",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed at {item}: {message}")]
    Stage {
        stage: Stage,
        item: String,
        message: String,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Report(String),
}

impl PipelineError {
    /// Whether the failure is a problem with the user's input rather than
    /// with execution.
    pub fn is_validation(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::Report(_))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn stage_err(stage: Stage, item: impl Into<String>, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        item: item.into(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: RunConfig,
    pub gateway: String,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        let p = run_dir.join(MANIFEST);
        let raw = fs::read(&p).map_err(|e| io_err(&p, e))?;
        serde_json::from_slice(&raw).map_err(|e| io_err(&p, e))
    }

    fn save(&self, run_dir: &Path) -> Result<(), PipelineError> {
        let p = run_dir.join(MANIFEST);
        let tmp = run_dir.join(format!("{MANIFEST}.tmp"));
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &p).map_err(|e| io_err(&p, e))
    }

    fn is_done(&self, stage: Stage, fingerprint: &str, run_dir: &Path) -> bool {
        self.stages.get(&stage).is_some_and(|r| {
            r.fingerprint == fingerprint && r.outputs.iter().all(|o| run_dir.join(o).is_file())
        })
    }
}

/// Per-stage seeds derived from the master seed by stage name.
pub fn stage_seeds(master: u64) -> BTreeMap<String, u64> {
    Stage::ALL
        .iter()
        .map(|s| {
            (
                s.as_str().to_string(),
                text::derive_seed(master, s.as_str()),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintSet {
    pub source_id: String,
    pub method: Method,
    pub hints: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Re-run every stage even when its outputs are current.
    pub force: bool,
    /// Another run directory whose current outputs may be copied instead of
    /// recomputed (used by sweeps).
    pub reuse_from: Option<PathBuf>,
    /// Stop after this stage.
    pub until: Option<Stage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub reports: Vec<MetricReport>,
}

fn file_hash(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(text::sha256_hex(bytes))
}

fn fingerprint(parts: &[&str]) -> String {
    text::sha256_hex(parts.join("\u{1f}"))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn load<T: DeserializeOwned>(run_dir: &Path, rel: &str) -> Result<Vec<T>, PipelineError> {
    let p = run_dir.join(rel);
    read_jsonl(&p).map_err(|e| io_err(&p, e))
}

fn save<T: Serialize>(run_dir: &Path, rel: &str, items: &[T]) -> Result<(), PipelineError> {
    let p = run_dir.join(rel);
    write_jsonl(&p, items).map_err(|e| io_err(&p, e))
}

fn instantiation_file(m: InstantiationMethod) -> String {
    format!("instantiations/{}.jsonl", json(&m).trim_matches('"'))
}

fn records_file(m: Method) -> String {
    format!("records/{m}.jsonl")
}

fn metrics_file(m: Method) -> String {
    format!("metrics/{m}.json")
}

fn rows_file(m: Method) -> String {
    format!("metrics/{m}.csv")
}

fn load_pairs(
    cfg: &RunConfig,
    path: &Path,
    split: corpus::Split,
) -> Result<(Vec<StatementPair>, usize), PipelineError> {
    let item = path.display().to_string();
    match cfg.task {
        Task::Comve => corpus::load_comve(path, split)
            .map(|p| (p, 0))
            .map_err(|e| stage_err(Stage::Ingest, item, e)),
        Task::Esnli => corpus::load_esnli(path, split)
            .map(|l| (l.pairs, l.dropped_premises))
            .map_err(|e| stage_err(Stage::Ingest, item, e)),
    }
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    gateway: &'a Gateway,
    opts: &'a RunOptions,
    manifest: Manifest,
    executed: Vec<Stage>,
    skipped: Vec<Stage>,
}

impl Runner<'_> {
    fn seed(&self, stage: Stage) -> u64 {
        self.manifest.seeds[stage.as_str()]
    }

    /// Tries to satisfy `stage` without running it: from this directory,
    /// then from the reuse directory.
    fn satisfied(&mut self, stage: Stage, fp: &str) -> Result<bool, PipelineError> {
        if !self.opts.force && self.manifest.is_done(stage, fp, self.dir) {
            self.skipped.push(stage);
            return Ok(true);
        }
        let Some(other) = &self.opts.reuse_from else {
            return Ok(false);
        };
        let Ok(theirs) = Manifest::load(other) else {
            return Ok(false);
        };
        if !theirs.is_done(stage, fp, other) {
            return Ok(false);
        }
        let rec = theirs.stages[&stage].clone();
        for o in &rec.outputs {
            let (src, dst) = (other.join(o), self.dir.join(o));
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            fs::copy(&src, &dst).map_err(|e| io_err(&dst, e))?;
        }
        self.manifest.stages.insert(stage, rec);
        self.manifest.save(self.dir)?;
        self.skipped.push(stage);
        Ok(true)
    }

    fn finish(
        &mut self,
        stage: Stage,
        fp: String,
        outputs: Vec<String>,
        counts: BTreeMap<String, usize>,
    ) -> Result<(), PipelineError> {
        self.manifest.stages.insert(
            stage,
            StageRecord {
                fingerprint: fp,
                outputs,
                counts,
            },
        );
        self.manifest.save(self.dir)?;
        self.executed.push(stage);
        log::info!("stage {stage} done");
        Ok(())
    }

    fn ingest(&mut self) -> Result<String, PipelineError> {
        let cfg = self.cfg;
        let fp = fingerprint(&[
            "ingest",
            &json(&cfg.task),
            &json(&cfg.data.limit),
            &json(&self.manifest.inputs),
            &self.seed(Stage::Ingest).to_string(),
        ]);
        if self.satisfied(Stage::Ingest, &fp)? {
            return Ok(fp);
        }
        let mut counts = BTreeMap::new();
        let test_path = cfg.data.test.as_ref().expect("validated");
        let (mut test, dropped) = load_pairs(cfg, test_path, corpus::Split::Test)?;
        counts.insert("test_pairs_loaded".into(), test.len());
        if cfg.task == Task::Esnli {
            counts.insert("test_premises_dropped".into(), dropped);
        }
        if let Some(limit) = cfg.data.limit {
            test.truncate(limit);
        }
        if test.is_empty() {
            return Err(stage_err(
                Stage::Ingest,
                test_path.display().to_string(),
                "no test pairs",
            ));
        }
        if cfg.mode == Mode::ExplainCorrect {
            if let Some(p) = test.iter().find(|p| p.refs_correct.is_empty()) {
                return Err(stage_err(
                    Stage::Ingest,
                    &p.id,
                    "no references for the correct statement",
                ));
            }
        }
        counts.insert("test_pairs".into(), test.len());
        save(self.dir, "pairs.jsonl", &test)?;
        let mut outputs = vec!["pairs.jsonl".to_string()];
        if let Some(train_path) = &cfg.data.train {
            let (train, _) = load_pairs(cfg, train_path, corpus::Split::Train)?;
            counts.insert("train_pairs".into(), train.len());
            let pool = corpus::sample_exemplar_pool(&train, self.seed(Stage::Ingest))
                .map_err(|e| stage_err(Stage::Ingest, train_path.display().to_string(), e))?;
            counts.insert("exemplar_pool".into(), pool.items.len());
            save(self.dir, "train.jsonl", &train)?;
            save(self.dir, "pool.jsonl", &pool.items)?;
            outputs.extend(["train.jsonl".to_string(), "pool.jsonl".to_string()]);
        }
        self.finish(Stage::Ingest, fp.clone(), outputs, counts)?;
        Ok(fp)
    }

    fn phase1(&mut self, upstream: &str) -> Result<String, PipelineError> {
        let cfg = self.cfg;
        let methods = cfg.phase1_methods();
        let fp = fingerprint(&[
            "phase1",
            upstream,
            &json(&methods),
            &json(&cfg.icl),
            &json(&cfg.cgmh),
            &json(&cfg.filter),
            &self.manifest.gateway,
            &self.seed(Stage::Phase1).to_string(),
        ]);
        if self.satisfied(Stage::Phase1, &fp)? {
            return Ok(fp);
        }
        let pairs: Vec<StatementPair> = load(self.dir, "pairs.jsonl")?;
        let seed = self.seed(Stage::Phase1);
        let mut counts = BTreeMap::new();
        let mut outputs = Vec::new();
        for m in methods {
            let sets: Vec<Vec<Instantiation>> = match m {
                InstantiationMethod::Icl => self.run_icl(&pairs, seed)?,
                InstantiationMethod::Cgmh => pairs
                    .par_iter()
                    .map(|p| {
                        let s = text::derive_seed(seed, &format!("cgmh/{}", p.id));
                        let mut out = cgmh::run_chain(p, &cfg.cgmh, self.gateway, s)
                            .map_err(|e| stage_err(Stage::Phase1, &p.id, e))?;
                        out.sort_by(|a, b| {
                            b.fluency
                                .unwrap_or(0.0)
                                .total_cmp(&a.fluency.unwrap_or(0.0))
                                .then(a.sample_index.cmp(&b.sample_index))
                        });
                        Ok(out)
                    })
                    .collect::<Result<_, PipelineError>>()?,
                other => return Err(stage_err(Stage::Phase1, json(&other), "not a generator")),
            };
            for (p, set) in pairs.iter().zip(&sets) {
                for inst in set {
                    inst.validate(&p.incorrect)
                        .map_err(|e| stage_err(Stage::Phase1, &p.id, e))?;
                }
            }
            let name = json(&m).trim_matches('"').to_string();
            let sets = if cfg.filter.enabled {
                match filter_by_classifier(&sets, cfg.task, self.gateway, cfg.filter.config())
                    .map_err(|e| stage_err(Stage::Phase1, format!("filter/{name}"), e))?
                {
                    FilterOutcome::Filtered { sets, summary } => {
                        counts.insert(
                            format!("{name}_filter_top1_survivors"),
                            summary.top1_survivors,
                        );
                        counts.insert(
                            format!("{name}_filter_ensemble_survivors"),
                            summary.ensemble_survivors,
                        );
                        counts.insert(format!("{name}_filter_dropped"), summary.dropped);
                        sets
                    }
                    FilterOutcome::Skipped { reason } => {
                        return Err(stage_err(Stage::Phase1, format!("filter/{name}"), reason))
                    }
                }
            } else {
                sets
            };
            let flat: Vec<Instantiation> = sets.into_iter().flatten().collect();
            counts.insert(format!("{name}_instantiations"), flat.len());
            let rel = instantiation_file(m);
            save(self.dir, &rel, &flat)?;
            outputs.push(rel);
        }
        self.finish(Stage::Phase1, fp.clone(), outputs, counts)?;
        Ok(fp)
    }

    fn run_icl(
        &self,
        pairs: &[StatementPair],
        seed: u64,
    ) -> Result<Vec<Vec<Instantiation>>, PipelineError> {
        let pool = corpus::ExemplarPool {
            items: load(self.dir, "pool.jsonl")?,
            seed: self.seed(Stage::Ingest),
        };
        let budget = self.gateway.context_budget();
        pairs
            .par_iter()
            .map(|p| {
                let prompt = match icl::build_fewshot_prompt(&pool, p, self.cfg.icl.k, seed, budget) {
                    Err(IclError::NotEnoughExemplars { k, available }) => {
                        log::warn!("{}: K={k} exceeds the {available} eligible exemplars; using {available}", p.id);
                        icl::build_fewshot_prompt(&pool, p, available, seed, budget)
                    }
                    other => other,
                }
                .map_err(|e| stage_err(Stage::Phase1, &p.id, e))?;
                let s = text::derive_seed(seed, &format!("icl/{}", p.id));
                icl::generate_instantiations(&prompt, &self.cfg.icl, self.gateway, s)
                    .map_err(|e| stage_err(Stage::Phase1, &p.id, e))
            })
            .collect()
    }

    fn hints(&mut self, upstream: &str) -> Result<String, PipelineError> {
        let cfg = self.cfg;
        let fp = fingerprint(&[
            "hints",
            upstream,
            &json(&cfg.methods),
            &json(&cfg.mode),
            &cfg.ensemble_size.to_string(),
            &json(&cfg.retrieval),
            &json(&cfg.top1_from),
            &self.manifest.gateway,
            &self.seed(Stage::Hints).to_string(),
        ]);
        if self.satisfied(Stage::Hints, &fp)? {
            return Ok(fp);
        }
        let pairs: Vec<StatementPair> = load(self.dir, "pairs.jsonl")?;
        let seed = self.seed(Stage::Hints);
        let mut insts: HashMap<InstantiationMethod, HashMap<String, Vec<String>>> = HashMap::new();
        for m in cfg.phase1_methods() {
            let all: Vec<Instantiation> = load(self.dir, &instantiation_file(m))?;
            let by_source = insts.entry(m).or_default();
            for i in all {
                by_source.entry(i.source_id).or_default().push(i.text);
            }
        }
        let train: Vec<StatementPair> = if cfg.methods.contains(&Method::Random) {
            load(self.dir, "train.jsonl")?
        } else {
            Vec::new()
        };
        let knowledge = match &cfg.data.knowledge {
            Some(p)
                if cfg
                    .methods
                    .iter()
                    .any(|m| matches!(m, Method::RetrievalBm25 | Method::RetrievalEmbed)) =>
            {
                Some(
                    corpus::load_omcs(p)
                        .map_err(|e| stage_err(Stage::Hints, p.display().to_string(), e))?,
                )
            }
            _ => None,
        };
        let statement = |p: &StatementPair| match cfg.mode {
            Mode::ExplainFalse => p.incorrect.clone(),
            Mode::ExplainCorrect => p.correct.clone(),
        };
        let mut out = Vec::new();
        let mut counts = BTreeMap::new();
        for &method in &cfg.methods {
            let sets: Vec<Option<Vec<String>>> = match method {
                Method::Original => pairs.iter().map(|_| Some(Vec::new())).collect(),
                Method::GroundTruth => pairs
                    .iter()
                    .map(|p| Some(vec![p.correct.clone()]))
                    .collect(),
                Method::Random => pairs
                    .iter()
                    .map(|p| {
                        let s = text::derive_seed(seed, &format!("random/{}", p.id));
                        retrieve::random_correct(&train, s)
                            .map(|h| Some(vec![h]))
                            .map_err(|e| stage_err(Stage::Hints, &p.id, e))
                    })
                    .collect::<Result<_, _>>()?,
                Method::RetrievalBm25 => {
                    let kc = knowledge.as_ref().expect("validated");
                    let index = Bm25Index::new(kc, Bm25Params::default());
                    pairs
                        .par_iter()
                        .map(|p| {
                            index
                                .search(&statement(p), cfg.retrieval.k)
                                .map(|hits| Some(hits.into_iter().map(|h| h.text).collect()))
                                .map_err(|e| stage_err(Stage::Hints, &p.id, e))
                        })
                        .collect::<Result<_, _>>()?
                }
                Method::RetrievalEmbed => {
                    self.embed_hints(&pairs, knowledge.as_ref().expect("validated"), &statement)?
                }
                Method::Top1 => pairs
                    .iter()
                    .map(|p| {
                        insts[&cfg.top1_from]
                            .get(&p.id)
                            .and_then(|v| v.first())
                            .map(|h| vec![h.clone()])
                    })
                    .collect(),
                Method::NeonIcl | Method::NeonCgmh => {
                    let m = if method == Method::NeonIcl {
                        InstantiationMethod::Icl
                    } else {
                        InstantiationMethod::Cgmh
                    };
                    pairs
                        .iter()
                        .map(|p| {
                            insts[&m]
                                .get(&p.id)
                                .filter(|v| v.len() >= cfg.ensemble_size)
                                .map(|v| v[..cfg.ensemble_size].to_vec())
                        })
                        .collect()
                }
            };
            let mut skipped = 0;
            for (p, hints) in pairs.iter().zip(sets) {
                match hints {
                    Some(hints) if method == Method::Original || !hints.is_empty() => {
                        out.push(HintSet {
                            source_id: p.id.clone(),
                            method,
                            hints,
                        })
                    }
                    _ => skipped += 1,
                }
            }
            if skipped > 0 {
                log::warn!("{method}: {skipped} sources lack enough hints and are skipped");
            }
            counts.insert(format!("{method}_skipped"), skipped);
        }
        save(self.dir, "hints.jsonl", &out)?;
        let mut outputs = vec!["hints.jsonl".to_string()];
        if self.dir.join("cache/index.json").is_file() {
            outputs.push("cache/index.json".to_string());
        }
        self.finish(Stage::Hints, fp.clone(), outputs, counts)?;
        Ok(fp)
    }

    fn embed_hints(
        &self,
        pairs: &[StatementPair],
        kc: &KnowledgeCorpus,
        statement: &(dyn Fn(&StatementPair) -> String + Sync),
    ) -> Result<Vec<Option<Vec<String>>>, PipelineError> {
        let cache_path = self.dir.join("cache/index.json");
        if let Some(parent) = cache_path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let item = || kc.content_hash()[..12].to_string();
        let mut cache = IndexCache::load_or_new(&cache_path, kc)
            .map_err(|e| stage_err(Stage::Hints, item(), e))?;
        let index = cache
            .embeddings(kc, self.gateway)
            .map_err(|e| stage_err(Stage::Hints, item(), e))?
            .clone();
        cache
            .save(&cache_path)
            .map_err(|e| stage_err(Stage::Hints, item(), e))?;
        pairs
            .par_iter()
            .map(|p| {
                index
                    .search(&statement(p), kc, self.cfg.retrieval.k, self.gateway)
                    .map(|hits| Some(hits.into_iter().map(|h| h.text).collect()))
                    .map_err(|e| stage_err(Stage::Hints, &p.id, e))
            })
            .collect()
    }

    fn phase2(&mut self, upstream: &str) -> Result<String, PipelineError> {
        let cfg = self.cfg;
        let fp = fingerprint(&[
            "phase2",
            upstream,
            &json(&cfg.template),
            &json(&cfg.mode),
            &self.manifest.gateway,
        ]);
        if self.satisfied(Stage::Phase2, &fp)? {
            return Ok(fp);
        }
        let pairs: Vec<StatementPair> = load(self.dir, "pairs.jsonl")?;
        let by_id: HashMap<&str, &StatementPair> =
            pairs.iter().map(|p| (p.id.as_str(), p)).collect();
        let hint_sets: Vec<HintSet> = load(self.dir, "hints.jsonl")?;
        let mut outputs = Vec::new();
        let mut counts = BTreeMap::new();
        for &method in &cfg.methods {
            let template = cfg.template_for(method);
            let sets: Vec<&HintSet> = hint_sets.iter().filter(|h| h.method == method).collect();
            let records: Vec<ExplanationRecord> = sets
                .par_iter()
                .map(|h| {
                    let pair = by_id[h.source_id.as_str()];
                    let refs = match cfg.mode {
                        Mode::ExplainFalse => pair.refs_incorrect.clone(),
                        Mode::ExplainCorrect => pair.refs_correct.clone(),
                    };
                    let spec = explain::build_explain_prompt(pair, &h.hints, template)
                        .map_err(|e| stage_err(Stage::Phase2, &h.source_id, e))?;
                    let rec = explain::generate_explanation(
                        &spec,
                        &h.source_id,
                        method,
                        h.hints.clone(),
                        refs,
                        self.gateway,
                    )
                    .map_err(|e| stage_err(Stage::Phase2, &h.source_id, e))?;
                    rec.check(cfg.ensemble_size)
                        .map_err(|e| stage_err(Stage::Phase2, &h.source_id, e))?;
                    Ok(rec)
                })
                .collect::<Result<_, PipelineError>>()?;
            counts.insert(format!("{method}_records"), records.len());
            counts.insert(
                format!("{method}_empty"),
                records.iter().filter(|r| r.empty).count(),
            );
            let rel = records_file(method);
            save(self.dir, &rel, &records)?;
            outputs.push(rel);
        }
        self.finish(Stage::Phase2, fp.clone(), outputs, counts)?;
        Ok(fp)
    }

    fn metrics(&mut self, upstream: &str) -> Result<Vec<MetricReport>, PipelineError> {
        let cfg = self.cfg;
        let fp = fingerprint(&[
            "metrics",
            upstream,
            &json(&cfg.metrics),
            &self.manifest.gateway,
        ]);
        if self.satisfied(Stage::Metrics, &fp)? {
            return self.load_reports();
        }
        let mdir = self.dir.join("metrics");
        fs::create_dir_all(&mdir).map_err(|e| io_err(&mdir, e))?;
        let mut outputs = Vec::new();
        let mut reports = Vec::new();
        for &method in &cfg.methods {
            let records: Vec<ExplanationRecord> = load(self.dir, &records_file(method))?;
            if records.is_empty() {
                log::warn!("{method}: no records to score");
                continue;
            }
            let mut rep = metrics::evaluate_run(&records, self.gateway, cfg.metrics.per_record)
                .map_err(|e| stage_err(Stage::Metrics, method.as_str(), e))?;
            if let Some(rows) = rep.per_record.take() {
                let p = self.dir.join(rows_file(method));
                metrics::write_rows_csv(&p, &rows).map_err(|e| io_err(&p, e))?;
                outputs.push(rows_file(method));
            }
            let p = self.dir.join(metrics_file(method));
            let mut bytes = serde_json::to_vec_pretty(&rep).expect("report serializes");
            bytes.push(b'\n');
            fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
            outputs.push(metrics_file(method));
            reports.push(rep);
        }
        let rows = report::rows_for_run(&self.manifest.config_hash[..12], &reports);
        fs::write(self.dir.join("report.txt"), report::render_text(&rows))
            .map_err(|e| io_err(self.dir, e))?;
        report::write_csv(&self.dir.join("report.csv"), &rows)?;
        outputs.extend(["report.txt".to_string(), "report.csv".to_string()]);
        self.finish(Stage::Metrics, fp, outputs, BTreeMap::new())?;
        Ok(reports)
    }

    fn load_reports(&self) -> Result<Vec<MetricReport>, PipelineError> {
        report::load_reports(self.dir)
    }
}

fn dir_label(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Runs every stage of `cfg` into `run_dir`.
pub fn run(
    cfg: &RunConfig,
    run_dir: &Path,
    gateway: &Gateway,
    opts: &RunOptions,
) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let mut inputs = BTreeMap::new();
    for (name, p) in [
        ("train", &cfg.data.train),
        ("test", &cfg.data.test),
        ("knowledge", &cfg.data.knowledge),
    ] {
        if let Some(p) = p {
            inputs.insert(name.to_string(), file_hash(p)?);
        }
    }
    let previous = Manifest::load(run_dir).ok();
    let manifest = Manifest {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        gateway: gateway.identity(),
        seeds: stage_seeds(cfg.seed),
        inputs,
        stages: previous.map(|m| m.stages).unwrap_or_default(),
    };
    manifest.save(run_dir)?;
    let mut r = Runner {
        cfg,
        dir: run_dir,
        gateway,
        opts,
        manifest,
        executed: Vec::new(),
        skipped: Vec::new(),
    };
    let stop = opts.until.unwrap_or(Stage::Metrics);
    let mut reports = Vec::new();
    let fp = r.ingest()?;
    if stop > Stage::Ingest {
        let fp = r.phase1(&fp)?;
        if stop > Stage::Phase1 {
            let fp = r.hints(&fp)?;
            if stop > Stage::Hints {
                let fp = r.phase2(&fp)?;
                if stop > Stage::Phase2 {
                    reports = r.metrics(&fp)?;
                }
            }
        }
    }
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        executed: r.executed,
        skipped: r.skipped,
        reports,
    })
}

/// One sub-run per value of `key`, each in `root/<key>-<value>`. Stages
/// whose inputs do not depend on the swept key are computed once and
/// copied.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    base_toml: &str,
    base_dir: &Path,
    overrides: &[String],
    key: &str,
    values: &[String],
    root: &Path,
    gateway: &Gateway,
    force: bool,
) -> Result<Vec<RunSummary>, PipelineError> {
    let mut out = Vec::with_capacity(values.len());
    let mut first: Option<PathBuf> = None;
    for v in values {
        let mut o = overrides.to_vec();
        o.push(format!("{key}={v}"));
        let mut cfg = RunConfig::from_toml_str(base_toml, &o)?;
        for p in [
            &mut cfg.data.train,
            &mut cfg.data.test,
            &mut cfg.data.knowledge,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        let dir = root.join(format!("{}-{}", key.replace('.', "_"), v));
        let opts = RunOptions {
            force,
            reuse_from: first.clone(),
            until: None,
        };
        out.push(run(&cfg, &dir, gateway, &opts)?);
        first.get_or_insert(dir);
    }
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let mut rows = Vec::new();
    for s in &out {
        rows.extend(report::rows_for_run(&dir_label(&s.run_dir), &s.reports));
    }
    fs::write(root.join("report.txt"), report::render_text(&rows)).map_err(|e| io_err(root, e))?;
    report::write_csv(&root.join("report.csv"), &rows)?;
    Ok(out)
}

/// Expands `a..b` into integers, otherwise splits on commas.
pub fn expand_values(spec: &str) -> Vec<String> {
    if let Some((a, b)) = spec.split_once("..") {
        if let (Ok(a), Ok(b)) = (a.trim().parse::<i64>(), b.trim().parse::<i64>()) {
            return (a..=b).map(|x| x.to_string()).collect();
        }
    }
    spec.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}
