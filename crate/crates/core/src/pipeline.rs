//! Stage orchestration driven by one TOML file.
//!
//! Every stage reads the previous stage's dataset from the run directory,
//! writes its own outputs atomically and records a [`RunManifest`] with
//! digests of everything it read and wrote.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::endpoint::{ChatEndpoint, CompletionClient, EndpointConfig, HttpEndpoint, RetryPolicy};
use crate::evalharness::{self, BenchmarkId, EvalConfig, EvalTemplate, GoldEntry, Layout, Outcome};
use crate::hashing::{derive_seed, file_sha256, sha256_hex};
use crate::ingest::{self, CorpusSpec, RawDocument, SourceFilter, WordCount};
use crate::mixer::{self, MixEntry, MixSpec, SourceAvailability};
use crate::mock::MockEndpoint;
use crate::packer::{self, PackItem, PackerConfig};
use crate::transform::{
    ComprehensionExample, ParseConfig, PromptDb, RenderConfig, TaskPolicy, TaskType, TransformInput,
    TransformSettings, Transformer, ValidationRules,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const AUTH_TOKEN_ENV: &str = "LEXPREP_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Transform,
    Mix,
    Pack,
    Eval,
    All,
}

impl Stage {
    pub const CHAIN: [Stage; 5] = [Stage::Ingest, Stage::Transform, Stage::Mix, Stage::Pack, Stage::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Transform => "transform",
            Stage::Mix => "mix",
            Stage::Pack => "pack",
            Stage::Eval => "eval",
            Stage::All => "all",
        }
    }

    /// Dataset this stage writes, relative to the run directory.
    fn dataset(self) -> &'static str {
        match self {
            Stage::Ingest => "datasets/ingest.jsonl",
            Stage::Transform => "datasets/transform.jsonl",
            Stage::Mix => "datasets/mix.jsonl",
            Stage::Pack => "datasets/pack.jsonl",
            Stage::Eval => "datasets/eval_predictions.jsonl",
            Stage::All => unreachable!("all is not a concrete stage"),
        }
    }

    fn requires(self) -> Option<Stage> {
        match self {
            Stage::Transform => Some(Stage::Ingest),
            Stage::Mix => Some(Stage::Transform),
            Stage::Pack => Some(Stage::Mix),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::CHAIN
            .iter()
            .chain([Stage::All].iter())
            .find(|st| st.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{stage} needs {} from a prior {} run; it does not exist", .artifact.display(), .producer)]
    Dependency {
        stage: Stage,
        producer: Stage,
        artifact: PathBuf,
    },
    #[error("{stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn stage_err(stage: Stage) -> impl Fn(&dyn fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRule {
    pub source: String,
    pub max_documents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    pub corpora: Vec<CorpusSpec>,
    #[serde(default)]
    pub include: Vec<String>,
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default)]
    pub sample: Vec<SampleRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSection {
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
    #[serde(default)]
    pub secondary_endpoint: Option<EndpointConfig>,
    #[serde(default)]
    pub secondary_ratio: f64,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default = "default_tasks_per_doc")]
    pub tasks_per_doc: usize,
    /// Omitted weights default to uniform over the four comprehension tasks.
    #[serde(default)]
    pub task_weights: BTreeMap<TaskType, f64>,
    #[serde(default = "default_separator")]
    pub separator: String,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub parse: ParseConfig,
    #[serde(default)]
    pub validation: ValidationRules,
}

fn default_tasks_per_doc() -> usize {
    2
}
fn default_separator() -> String {
    "\n\n".into()
}
fn default_temperature() -> f32 {
    0.7
}
fn default_max_tokens() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSection {
    /// Rescale entry targets to this many tokens, keeping their ratios.
    #[serde(default)]
    pub budget_tokens: Option<u64>,
    pub entries: Vec<MixEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackSection {
    pub context_length: u64,
    #[serde(default = "default_separator_cost")]
    pub separator_cost: u64,
    #[serde(default)]
    pub oversize_policy: packer::OversizePolicy,
    /// Examples per independently packed shard; all in one when absent.
    #[serde(default)]
    pub shard_size: Option<usize>,
}

fn default_separator_cost() -> u64 {
    1
}

impl PackSection {
    pub fn packer(&self) -> PackerConfig {
        PackerConfig {
            context_length: self.context_length,
            separator_cost: self.separator_cost,
            oversize_policy: self.oversize_policy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
    #[serde(default)]
    pub template: EvalTemplate,
    pub benchmarks: Vec<BenchmarkSpec>,
    #[serde(default)]
    pub context_limit: Option<u64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
    pub ingest: IngestSection,
    pub transform: TransformSection,
    pub mix: MixSection,
    pub pack: PackSection,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_run_dir() -> PathBuf {
    "run".into()
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str, base_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig = toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let s = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&s, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn run_path(&self) -> PathBuf {
        self.resolve(&self.run_dir)
    }

    /// Digest of the configuration as written, without the run directory.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("run_dir");
        }
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn mix_spec(&self) -> Result<MixSpec, PipelineError> {
        let spec = MixSpec::new(self.mix.entries.clone()).map_err(|e| PipelineError::Config(format!("mix: {e}")))?;
        Ok(match self.mix.budget_tokens {
            Some(b) => spec.scaled_to(b),
            None => spec,
        })
    }

    pub fn task_policy(&self) -> Result<TaskPolicy, PipelineError> {
        let t = &self.transform;
        let weights = if t.task_weights.is_empty() {
            TaskType::LEGAL.iter().map(|&k| (k, 1.0)).collect()
        } else {
            t.task_weights.clone()
        };
        TaskPolicy::new(weights, t.tasks_per_doc).map_err(|e| PipelineError::Config(format!("transform: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn check_endpoint(d: &mut Vec<Diagnostic>, field: &str, ep: &EndpointConfig) {
    if ep.base_url.trim().is_empty() {
        d.push(diag(format!("{field}.base_url"), "must not be empty"));
    }
    if ep.model.trim().is_empty() {
        d.push(diag(format!("{field}.model"), "must not be empty"));
    }
    if ep.max_concurrent == 0 {
        d.push(diag(format!("{field}.max_concurrent"), "must be at least 1"));
    }
}

fn diag(field: impl Into<String>, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        field: field.into(),
        message: message.into(),
    }
}

/// Cross-checks the configuration; an empty list means it is usable.
pub fn validate_config(cfg: &PipelineConfig) -> Vec<Diagnostic> {
    let mut d = Vec::new();
    if cfg.ingest.corpora.is_empty() {
        d.push(diag("ingest.corpora", "at least one corpus is required"));
    }
    for (i, c) in cfg.ingest.corpora.iter().enumerate() {
        if !cfg.resolve(&c.path).exists() {
            d.push(diag(format!("ingest.corpora[{i}].path"), format!("{} does not exist", c.path.display())));
        }
    }
    if let Err(e) = SourceFilter::new(cfg.ingest.include.clone(), cfg.ingest.exclude.clone()) {
        d.push(diag("ingest.include/exclude", e.to_string()));
    }
    for (i, s) in cfg.ingest.sample.iter().enumerate() {
        if s.max_documents == 0 {
            d.push(diag(format!("ingest.sample[{i}].max_documents"), "must be positive"));
        }
    }

    let t = &cfg.transform;
    if let Err(PipelineError::Config(m)) = cfg.task_policy() {
        d.push(diag("transform.task_weights", m));
    }
    if !(0.0..=1.0).contains(&t.secondary_ratio) {
        d.push(diag("transform.secondary_ratio", "must lie in [0, 1]"));
    }
    if t.secondary_ratio > 0.0 && t.secondary_endpoint.is_none() {
        d.push(diag("transform.secondary_endpoint", "required when secondary_ratio > 0"));
    }
    for (name, ep) in [("transform.endpoint", &t.endpoint), ("transform.secondary_endpoint", &t.secondary_endpoint)] {
        if let Some(ep) = ep {
            check_endpoint(&mut d, name, ep);
        }
    }
    if let Some(dir) = &t.templates_dir {
        if let Err(e) = PromptDb::load_dir(&cfg.resolve(dir)) {
            d.push(diag("transform.templates_dir", e.to_string()));
        }
    }
    if t.max_tokens == 0 {
        d.push(diag("transform.max_tokens", "must be positive"));
    }

    match MixSpec::new(cfg.mix.entries.clone()) {
        Err(e) => d.push(diag("mix.entries", e.to_string())),
        Ok(spec) => {
            if let Ok(f) = SourceFilter::new(cfg.ingest.include.clone(), cfg.ingest.exclude.clone()) {
                for e in spec.entries().iter().filter(|e| !f.accepts(&e.source)) {
                    d.push(diag("mix.entries", format!("source {:?} is removed by the ingest filter", e.source)));
                }
            }
        }
    }
    if cfg.mix.budget_tokens == Some(0) {
        d.push(diag("mix.budget_tokens", "must be positive"));
    }

    let p = cfg.pack.packer();
    if p.context_length == 0 {
        d.push(diag("pack.context_length", "must be positive"));
    } else if p.context_length <= p.separator_cost {
        d.push(diag("pack.context_length", "must exceed separator_cost"));
    }
    if cfg.pack.shard_size == Some(0) {
        d.push(diag("pack.shard_size", "must be positive"));
    }

    if let Some(ev) = &cfg.eval {
        if let Some(ep) = &ev.endpoint {
            check_endpoint(&mut d, "eval.endpoint", ep);
        }
        if ev.template.id.trim().is_empty() || ev.template.instruction.trim().is_empty() {
            d.push(diag("eval.template", "id and instruction must not be empty"));
        }
        let mut seen = HashSet::new();
        for (i, b) in ev.benchmarks.iter().enumerate() {
            match b.id.parse::<BenchmarkId>() {
                Ok(id) => {
                    if !seen.insert(id) {
                        d.push(diag(format!("eval.benchmarks[{i}].id"), format!("{id} listed twice")));
                    }
                }
                Err(e) => d.push(diag(format!("eval.benchmarks[{i}].id"), e.to_string())),
            }
            if !cfg.resolve(&b.path).exists() {
                d.push(diag(format!("eval.benchmarks[{i}].path"), format!("{} does not exist", b.path.display())));
            }
        }
        if ev.context_limit == Some(0) {
            d.push(diag("eval.context_limit", "must be positive"));
        }
    }
    d
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub stage: Stage,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub counters: BTreeMap<String, u64>,
    pub timestamp_unix: u64,
}

/// `SOURCE_DATE_EPOCH` when set, so reproducible builds can pin it.
pub fn timestamp_unix() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn to_jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("row serializes");
        out.push(b'\n');
    }
    out
}

fn to_pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s.into_bytes()
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<Vec<T>, PipelineError> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| PipelineError::Stage {
            stage,
            message: format!("{} line {}: {e}", path.display(), i + 1),
        })?);
    }
    Ok(rows)
}

/// How endpoints are obtained for a run.
#[derive(Clone, Default)]
pub struct RunOptions {
    /// Use the offline [`MockEndpoint`] for every stage.
    pub mock_endpoint: bool,
    /// Takes precedence over both the mock and configured endpoints.
    pub endpoint_override: Option<Arc<dyn ChatEndpoint>>,
    pub auth_token: Option<String>,
}

impl RunOptions {
    pub fn mock() -> Self {
        Self {
            mock_endpoint: true,
            ..Self::default()
        }
    }

    pub fn from_env(mock_endpoint: bool) -> Self {
        Self {
            mock_endpoint,
            endpoint_override: None,
            auth_token: std::env::var(AUTH_TOKEN_ENV).ok().filter(|s| !s.is_empty()),
        }
    }

    fn client(&self, cfg: Option<&EndpointConfig>, field: &str) -> Result<CompletionClient, PipelineError> {
        if let Some(ep) = &self.endpoint_override {
            return Ok(CompletionClient::immediate(ep.clone()));
        }
        if self.mock_endpoint {
            return Ok(CompletionClient::new(
                Arc::new(MockEndpoint::new()),
                RetryPolicy::immediate(1),
                Arc::new(crate::endpoint::RateLimiter::unlimited()),
            ));
        }
        let cfg = cfg.ok_or_else(|| PipelineError::Config(format!("{field} is required unless a mock endpoint is used")))?;
        Ok(CompletionClient::new(
            Arc::new(HttpEndpoint::new(cfg, self.auth_token.clone())),
            cfg.retry_policy(),
            Arc::new(cfg.limiter()),
        ))
    }
}

struct StageRun<'a> {
    cfg: &'a PipelineConfig,
    stage: Stage,
    root: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    counters: BTreeMap<String, u64>,
}

impl<'a> StageRun<'a> {
    fn new(cfg: &'a PipelineConfig, stage: Stage) -> Self {
        Self {
            cfg,
            stage,
            root: cfg.run_path(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            counters: BTreeMap::new(),
        }
    }

    fn label(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .or_else(|_| p.strip_prefix(&self.cfg.base_dir))
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn digest_input(&mut self, p: &Path) -> Result<(), PipelineError> {
        let sha256 = file_sha256(p).map_err(io_err(p))?;
        let bytes = std::fs::metadata(p).map_err(io_err(p))?.len();
        self.inputs.push(FileDigest {
            path: self.label(p),
            sha256,
            bytes,
        });
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let p = self.root.join(rel);
        write_atomic(&p, bytes)?;
        self.outputs.push(FileDigest {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn count(&mut self, k: &str, v: impl TryInto<u64>) {
        self.counters.insert(k.to_string(), v.try_into().unwrap_or(u64::MAX));
    }

    fn require(&mut self) -> Result<PathBuf, PipelineError> {
        let producer = self.stage.requires().expect("stage has a producer");
        let p = self.root.join(producer.dataset());
        if !p.is_file() {
            return Err(PipelineError::Dependency {
                stage: self.stage,
                producer,
                artifact: p,
            });
        }
        self.digest_input(&p)?;
        Ok(p)
    }

    fn seed(&self) -> u64 {
        derive_seed(self.cfg.seed, self.stage.as_str())
    }

    fn finish(self) -> Result<RunManifest, PipelineError> {
        let seeds = [("base".to_string(), self.cfg.seed), (self.stage.to_string(), self.seed())]
            .into_iter()
            .collect();
        let m = RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            stage: self.stage,
            config_hash: self.cfg.config_hash(),
            seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            counters: self.counters,
            timestamp_unix: timestamp_unix(),
        };
        write_atomic(&self.root.join(format!("manifests/{}.json", self.stage)), &to_pretty(&m))?;
        Ok(m)
    }
}

fn run_ingest(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let mut run = StageRun::new(cfg, Stage::Ingest);
    let err = stage_err(Stage::Ingest);
    let specs: Vec<CorpusSpec> = cfg
        .ingest
        .corpora
        .iter()
        .map(|c| CorpusSpec {
            path: cfg.resolve(&c.path),
            ..c.clone()
        })
        .collect();
    for s in &specs {
        for f in ingest::corpus_files(s).map_err(|e| err(&e))? {
            run.digest_input(&f)?;
        }
    }
    let filter = SourceFilter::new(cfg.ingest.include.clone(), cfg.ingest.exclude.clone()).map_err(|e| err(&e))?;
    let mut reader = ingest::load_corpora(&specs, &WordCount).map_err(|e| err(&e))?;
    let mut docs = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut filtered = 0usize;
    let mut duplicates = 0usize;
    for d in reader.by_ref() {
        let d = d.map_err(|e| err(&e))?;
        if !seen_ids.insert(d.id.clone()) {
            duplicates += 1;
            continue;
        }
        if filter.accepts(&d.source) {
            docs.push(d);
        } else {
            filtered += 1;
        }
    }
    let stats = reader.stats();
    let before = docs.len();
    let seed = run.seed();
    let mut dropped: HashSet<String> = HashSet::new();
    let mut claimed = vec![false; docs.len()];
    for rule in &cfg.ingest.sample {
        let single = SourceFilter::new(vec![rule.source.clone()], vec![]).map_err(|e| err(&e))?;
        let idx: Vec<usize> = (0..docs.len())
            .filter(|&i| !claimed[i] && single.accepts(&docs[i].source))
            .collect();
        for &i in &idx {
            claimed[i] = true;
        }
        let pool = idx.iter().map(|&i| docs[i].clone());
        let kept: HashSet<String> = ingest::sample_uniform(pool, rule.max_documents, derive_seed(seed, &rule.source))
            .into_iter()
            .map(|d| d.id)
            .collect();
        dropped.extend(idx.iter().map(|&i| &docs[i].id).filter(|id| !kept.contains(*id)).cloned());
    }
    docs.retain(|d| !dropped.contains(&d.id));
    run.count("documents", docs.len());
    run.count("skipped_malformed", stats.skipped_malformed);
    run.count("skipped_empty", stats.skipped_empty);
    run.count("filtered_out", filtered);
    run.count("duplicate_ids", duplicates);
    run.count("sampled_out", before - docs.len());
    run.count("token_estimate_total", docs.iter().map(|d| d.token_estimate as u64).sum::<u64>());
    run.write(Stage::Ingest.dataset(), &to_jsonl(&docs))?;
    run.finish()
}

fn run_transform(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunManifest, PipelineError> {
    let mut run = StageRun::new(cfg, Stage::Transform);
    let err = stage_err(Stage::Transform);
    let input = run.require()?;
    let t = &cfg.transform;
    let db = match &t.templates_dir {
        Some(dir) => {
            let dir = cfg.resolve(dir);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(io_err(&dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "tmpl"))
                .collect();
            files.sort();
            for f in &files {
                run.digest_input(f)?;
            }
            PromptDb::load_dir(&dir).map_err(|e| err(&e))?
        }
        None => PromptDb::builtin(),
    };
    let spec = cfg.mix_spec()?;
    let docs: Vec<RawDocument> = read_jsonl(&input, Stage::Transform)?;
    let inputs: Vec<TransformInput> = docs
        .into_iter()
        .map(|doc| {
            let general = spec.entry_for(&doc.source).is_some_and(|e| !e.domain.is_legal());
            TransformInput { doc, general }
        })
        .collect();
    let settings = TransformSettings {
        policy: cfg.task_policy()?,
        seed: run.seed(),
        separator: t.separator.clone(),
        render: t.render,
        parse: t.parse,
        rules: t.validation,
        temperature: t.temperature,
        max_tokens: t.max_tokens,
        secondary_ratio: t.secondary_ratio,
    };
    let primary = opts.client(t.endpoint.as_ref(), "transform.endpoint")?;
    let secondary = match (&t.secondary_endpoint, t.secondary_ratio > 0.0) {
        (Some(ep), true) => Some(opts.client(Some(ep), "transform.secondary_endpoint")?),
        _ => None,
    };
    let transformer = Transformer {
        db: &db,
        primary: &primary,
        secondary: secondary.as_ref(),
        counter: &WordCount,
        settings: &settings,
    };
    let (examples, c) = transformer.transform_batch(&inputs);
    let counters = serde_json::to_value(c).expect("counters serialize");
    for (k, v) in counters.as_object().expect("struct") {
        run.count(k, v.as_u64().unwrap_or(0));
    }
    run.count("general_documents", inputs.iter().filter(|i| i.general).count());
    run.write(Stage::Transform.dataset(), &to_jsonl(&examples))?;
    run.finish()
}

fn run_mix(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let mut run = StageRun::new(cfg, Stage::Mix);
    let err = stage_err(Stage::Mix);
    let input = run.require()?;
    let spec = cfg.mix_spec()?;
    let examples: Vec<ComprehensionExample> = read_jsonl(&input, Stage::Mix)?;
    let mut streams: BTreeMap<String, Vec<ComprehensionExample>> =
        spec.entries().iter().map(|e| (e.source.clone(), Vec::new())).collect();
    let mut unplanned = 0usize;
    for ex in examples {
        match spec.entry_for(&ex.source) {
            Some(e) => streams.get_mut(&e.source).expect("keyed by entry").push(ex),
            None => unplanned += 1,
        }
    }
    let available: BTreeMap<String, SourceAvailability> = streams
        .iter()
        .map(|(k, v)| {
            (
                k.clone(),
                SourceAvailability {
                    tokens: v.iter().map(|e| e.token_length as u64).sum(),
                    examples: v.len() as u64,
                },
            )
        })
        .collect();
    let plan = mixer::plan_mix(&spec, &available).map_err(|e| err(&e))?;
    let seed = run.seed();
    let out = mixer::sample_mix(&streams, &plan, seed).map_err(|e| err(&e))?;
    run.count("examples", out.items.len());
    run.count("tokens", out.total_tokens);
    run.count("unplanned_examples", unplanned);
    run.count("shortfall_sources", out.realized.iter().filter(|r| r.shortfall).count());
    run.write(Stage::Mix.dataset(), &to_jsonl(&out.items))?;
    run.write("reports/mix.json", &to_pretty(&out.manifest(&plan, seed)))?;
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackReport {
    pub context_length: u64,
    pub separator_cost: u64,
    pub examples: usize,
    pub packed_examples: usize,
    pub sequences: usize,
    pub oversize: usize,
    pub oversize_ids: Vec<String>,
    pub sequence_reduction: Option<f64>,
    pub mean_utilization: Option<f64>,
}

#[derive(Deserialize)]
struct LengthOnly {
    source_doc: String,
    token_length: u64,
}

fn run_pack(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let mut run = StageRun::new(cfg, Stage::Pack);
    let err = stage_err(Stage::Pack);
    let input = run.require()?;
    let rows: Vec<LengthOnly> = read_jsonl(&input, Stage::Pack)?;
    let items: Vec<PackItem> = rows.into_iter().map(|r| PackItem::new(r.source_doc, r.token_length)).collect();
    let pc = &cfg.pack.packer();
    let shards: Vec<Vec<PackItem>> = match cfg.pack.shard_size {
        Some(n) if n > 0 => items.chunks(n).map(<[PackItem]>::to_vec).collect(),
        _ => vec![items.clone()],
    };
    let mut sequences = Vec::new();
    let mut oversize = Vec::new();
    for r in packer::pack_shards(&shards, pc) {
        let p = r.map_err(|e| err(&e))?;
        sequences.extend(p.sequences);
        oversize.extend(p.oversize);
    }
    let packed_examples = items.len() - oversize.len();
    let stats = packer::compression_stats(packed_examples, &sequences, pc).ok();
    let report = PackReport {
        context_length: pc.context_length,
        separator_cost: pc.separator_cost,
        examples: items.len(),
        packed_examples,
        sequences: sequences.len(),
        oversize: oversize.len(),
        oversize_ids: oversize,
        sequence_reduction: stats.map(|s| s.sequence_reduction),
        mean_utilization: stats.map(|s| s.mean_utilization),
    };
    run.count("examples", report.examples);
    run.count("sequences", report.sequences);
    run.count("oversize", report.oversize);
    run.write(Stage::Pack.dataset(), &to_jsonl(&sequences))?;
    run.write("reports/pack_stats.json", &to_pretty(&report))?;
    run.finish()
}

fn run_eval(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunManifest, PipelineError> {
    let mut run = StageRun::new(cfg, Stage::Eval);
    let err = stage_err(Stage::Eval);
    let ev = cfg
        .eval
        .as_ref()
        .ok_or_else(|| PipelineError::Config("the eval stage needs an [eval] section".into()))?;
    let mut items = Vec::new();
    let mut ids = BTreeSet::new();
    for b in &ev.benchmarks {
        let path = cfg.resolve(&b.path);
        run.digest_input(&path)?;
        let loaded = evalharness::load_benchmark(&b.id, &path).map_err(|e| err(&e))?;
        if let Some(first) = loaded.first() {
            if !ids.insert(first.benchmark) {
                return Err(err(&format!("benchmark {} listed twice", first.benchmark)));
            }
        }
        items.extend(loaded);
    }
    let client = opts.client(ev.endpoint.as_ref(), "eval.endpoint")?;
    let ecfg = EvalConfig {
        context_limit: ev.context_limit.unwrap_or(EvalConfig::default().context_limit),
        max_tokens: ev.max_tokens.unwrap_or(EvalConfig::default().max_tokens),
    };
    let preds = evalharness::evaluate(&items, &ev.template, &client, &ecfg, &WordCount);
    let mut report = evalharness::score_run(&preds, &GoldEntry::map(&items), client.model(), &ev.template.id, cfg.seed)
        .map_err(|e| err(&e))?;
    report.timestamp = std::env::var("SOURCE_DATE_EPOCH").ok();
    run.count("items", preds.len());
    run.count(
        "skipped_overlength",
        preds.iter().filter(|p| matches!(p.outcome, Outcome::SkippedOverlength { .. })).count(),
    );
    run.count("errored", report.errored());
    run.count("unresolved", report.unresolved());
    run.write(Stage::Eval.dataset(), &to_jsonl(&preds))?;
    run.write("reports/eval.json", evalharness::render_report(&report, Layout::Json).as_bytes())?;
    run.write("reports/eval.txt", evalharness::render_report(&report, Layout::Table).as_bytes())?;
    run.finish()
}

/// Runs one stage, or every stage in order for [`Stage::All`]. Eval is
/// skipped by `all` when the config has no eval section.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, opts: &RunOptions) -> Result<Vec<RunManifest>, PipelineError> {
    let one = |s: Stage| match s {
        Stage::Ingest => run_ingest(cfg),
        Stage::Transform => run_transform(cfg, opts),
        Stage::Mix => run_mix(cfg),
        Stage::Pack => run_pack(cfg),
        Stage::Eval => run_eval(cfg, opts),
        Stage::All => unreachable!(),
    };
    match stage {
        Stage::All => Stage::CHAIN
            .iter()
            .filter(|s| **s != Stage::Eval || cfg.eval.is_some())
            .map(|s| one(*s))
            .collect(),
        s => Ok(vec![one(s)?]),
    }
}
