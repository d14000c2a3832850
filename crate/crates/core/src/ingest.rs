//! Streaming corpus readers, token estimation and source filtering.
//!
//! Corpora are read one record at a time so memory use does not grow with
//! corpus size. Documents get deterministic ids of the form `f{file}:{record}`
//! where `file` is the index of the input file across the whole run (sorted
//! path order inside directories) and `record` the index of the non-blank
//! line inside that file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use globset::{GlobSet, GlobSetBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus path {0} does not exist")]
    Missing(PathBuf),
    #[error("no input files found under {0}")]
    Empty(PathBuf),
    #[error("invalid source pattern {pattern:?}: {reason}")]
    Pattern { pattern: String, reason: String },
    #[error("pattern {0:?} appears in both include and exclude")]
    OverlappingPatterns(String),
}

/// Counts tokens for a piece of text.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
    /// Recorded next to every estimate so downstream stages know which
    /// counter produced it.
    fn method(&self) -> &str;
}

/// Number of maximal whitespace-separated runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordCount;

impl TokenCounter for WordCount {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn method(&self) -> &str {
        "word-count"
    }
}

/// Wraps a caller-supplied closure as a [`TokenCounter`].
pub struct FnCounter<F> {
    name: String,
    f: F,
}

impl<F: Fn(&str) -> usize + Send + Sync> FnCounter<F> {
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F: Fn(&str) -> usize + Send + Sync> TokenCounter for FnCounter<F> {
    fn count(&self, text: &str) -> usize {
        (self.f)(text)
    }

    fn method(&self) -> &str {
        &self.name
    }
}

pub fn estimate_tokens(text: &str, counter: &dyn TokenCounter) -> usize {
    counter.count(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
    pub source: String,
    pub token_estimate: usize,
    pub token_method: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    Jsonl,
    PlainTextDir,
}

/// One input location with the source tag assigned to records that carry
/// none of their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub path: PathBuf,
    pub format: CorpusFormat,
    #[serde(default)]
    pub source: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub emitted: usize,
    pub skipped_malformed: usize,
    pub skipped_empty: usize,
}

impl IngestStats {
    pub fn warnings(&self) -> usize {
        self.skipped_malformed + self.skipped_empty
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: Option<String>,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

enum Cursor {
    Jsonl {
        reader: BufReader<File>,
        record: usize,
    },
    Text,
}

struct OpenFile {
    index: usize,
    path: PathBuf,
    source: String,
    cursor: Cursor,
}

/// Sequential reader over every file of one or more corpus specs.
///
/// Yields `Err` only for fatal conditions (an input file cannot be opened or
/// read); malformed and empty records are skipped and counted in
/// [`CorpusReader::stats`].
pub struct CorpusReader<'c> {
    pending: std::vec::IntoIter<(PathBuf, CorpusFormat, String)>,
    next_file: usize,
    current: Option<OpenFile>,
    counter: &'c dyn TokenCounter,
    stats: IngestStats,
    failed: bool,
}

/// Files a spec expands to, in read order.
pub fn corpus_files(spec: &CorpusSpec) -> Result<Vec<PathBuf>, IngestError> {
    let path = &spec.path;
    if !path.exists() {
        return Err(IngestError::Missing(path.clone()));
    }
    if path.is_file() {
        return Ok(vec![path.clone()]);
    }
    let ext = match spec.format {
        CorpusFormat::Jsonl => "jsonl",
        CorpusFormat::PlainTextDir => "txt",
    };
    let entries = std::fs::read_dir(path).map_err(|source| IngestError::Unreadable {
        path: path.clone(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| IngestError::Unreadable {
            path: path.clone(),
            source,
        })?;
        let p = entry.path();
        if p.is_file() && p.extension().is_some_and(|e| e == ext) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(IngestError::Empty(path.clone()));
    }
    Ok(files)
}

fn default_source(spec: &CorpusSpec, file: &Path) -> String {
    if let Some(s) = &spec.source {
        return s.clone();
    }
    match spec.format {
        CorpusFormat::Jsonl => file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unknown".to_string()),
        CorpusFormat::PlainTextDir => spec
            .path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unknown".to_string()),
    }
}

/// Opens a streaming reader over `specs`, in order.
pub fn load_corpora<'c>(
    specs: &[CorpusSpec],
    counter: &'c dyn TokenCounter,
) -> Result<CorpusReader<'c>, IngestError> {
    let mut files = Vec::new();
    for spec in specs {
        for f in corpus_files(spec)? {
            let source = default_source(spec, &f);
            files.push((f, spec.format, source));
        }
    }
    Ok(CorpusReader {
        pending: files.into_iter(),
        next_file: 0,
        current: None,
        counter,
        stats: IngestStats::default(),
        failed: false,
    })
}

pub fn load_corpus<'c>(
    path: impl Into<PathBuf>,
    format: CorpusFormat,
    counter: &'c dyn TokenCounter,
) -> Result<CorpusReader<'c>, IngestError> {
    load_corpora(
        &[CorpusSpec {
            path: path.into(),
            format,
            source: None,
        }],
        counter,
    )
}

impl CorpusReader<'_> {
    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    fn make_doc(
        &mut self,
        file: usize,
        record: usize,
        text: String,
        source: String,
        meta: BTreeMap<String, serde_json::Value>,
    ) -> Option<RawDocument> {
        if text.trim().is_empty() {
            self.stats.skipped_empty += 1;
            return None;
        }
        self.stats.emitted += 1;
        Some(RawDocument {
            id: format!("f{file}:{record}"),
            token_estimate: estimate_tokens(&text, self.counter),
            token_method: self.counter.method().to_string(),
            text,
            source,
            meta,
        })
    }

    fn open_next(&mut self) -> Option<Result<(), IngestError>> {
        let (path, format, source) = self.pending.next()?;
        let index = self.next_file;
        self.next_file += 1;
        let cursor = match format {
            CorpusFormat::Jsonl => match File::open(&path) {
                Ok(f) => Cursor::Jsonl {
                    reader: BufReader::new(f),
                    record: 0,
                },
                Err(source) => return Some(Err(IngestError::Unreadable { path, source })),
            },
            CorpusFormat::PlainTextDir => Cursor::Text,
        };
        self.current = Some(OpenFile {
            index,
            path,
            source,
            cursor,
        });
        Some(Ok(()))
    }
}

impl Iterator for CorpusReader<'_> {
    type Item = Result<RawDocument, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if self.current.is_none() {
                match self.open_next()? {
                    Ok(()) => {}
                    Err(e) => {
                        self.failed = true;
                        return Some(Err(e));
                    }
                }
            }
            let file = self.current.as_mut().expect("file opened above");
            match &mut file.cursor {
                Cursor::Text => {
                    let open = self.current.take().expect("file opened above");
                    let bytes = match std::fs::read(&open.path) {
                        Ok(b) => b,
                        Err(source) => {
                            self.failed = true;
                            return Some(Err(IngestError::Unreadable {
                                path: open.path,
                                source,
                            }));
                        }
                    };
                    let Ok(text) = String::from_utf8(bytes) else {
                        self.stats.skipped_malformed += 1;
                        continue;
                    };
                    if let Some(doc) =
                        self.make_doc(open.index, 0, text, open.source, BTreeMap::new())
                    {
                        return Some(Ok(doc));
                    }
                }
                Cursor::Jsonl { reader, record } => {
                    let mut buf = Vec::new();
                    match reader.read_until(b'\n', &mut buf) {
                        Ok(0) => {
                            self.current = None;
                            continue;
                        }
                        Ok(_) => {}
                        Err(source) => {
                            let path = file.path.clone();
                            self.failed = true;
                            return Some(Err(IngestError::Unreadable { path, source }));
                        }
                    }
                    if buf.iter().all(u8::is_ascii_whitespace) {
                        continue;
                    }
                    let idx = *record;
                    *record += 1;
                    let (findex, fsource) = (file.index, file.source.clone());
                    let parsed = std::str::from_utf8(&buf)
                        .ok()
                        .and_then(|line| serde_json::from_str::<JsonlRecord>(line).ok());
                    match parsed {
                        Some(JsonlRecord {
                            text: Some(text),
                            source,
                            meta,
                        }) => {
                            let source = source.unwrap_or(fsource);
                            if let Some(doc) = self.make_doc(findex, idx, text, source, meta) {
                                return Some(Ok(doc));
                            }
                        }
                        _ => self.stats.skipped_malformed += 1,
                    }
                }
            }
        }
    }
}

/// Include/exclude filter over hierarchical, slash-separated source tags.
///
/// A pattern matches a tag when its glob matches the tag itself or any of
/// its ancestors, so `pile-of-law` selects `pile-of-law/contracts`. `*` does
/// not cross a `/`.
#[derive(Debug, Clone)]
pub struct SourceFilter {
    include: Vec<String>,
    exclude: Vec<String>,
    include_set: GlobSet,
    exclude_set: GlobSet,
}

fn build_set(patterns: &[String]) -> Result<GlobSet, IngestError> {
    let mut b = GlobSetBuilder::new();
    for p in patterns {
        let g = globset::GlobBuilder::new(p)
            .literal_separator(true)
            .build()
            .map_err(|e| IngestError::Pattern {
                pattern: p.clone(),
                reason: e.kind().to_string(),
            })?;
        b.add(g);
    }
    b.build().map_err(|e| IngestError::Pattern {
        pattern: patterns.join(","),
        reason: e.to_string(),
    })
}

fn ancestors(tag: &str) -> impl Iterator<Item = &str> {
    tag.match_indices('/')
        .map(|(i, _)| &tag[..i])
        .chain(std::iter::once(tag))
}

impl SourceFilter {
    pub fn new(include: Vec<String>, exclude: Vec<String>) -> Result<Self, IngestError> {
        if let Some(p) = include.iter().find(|p| exclude.contains(p)) {
            return Err(IngestError::OverlappingPatterns(p.clone()));
        }
        Ok(Self {
            include_set: build_set(&include)?,
            exclude_set: build_set(&exclude)?,
            include,
            exclude,
        })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), Vec::new()).expect("empty filter is valid")
    }

    pub fn include(&self) -> &[String] {
        &self.include
    }

    pub fn exclude(&self) -> &[String] {
        &self.exclude
    }

    pub fn accepts(&self, tag: &str) -> bool {
        let hits = |set: &GlobSet| ancestors(tag).any(|a| set.is_match(a));
        (self.include.is_empty() || hits(&self.include_set)) && !hits(&self.exclude_set)
    }
}

pub fn filter_sources<'f, I>(docs: I, filter: &'f SourceFilter) -> impl Iterator<Item = RawDocument> + 'f
where
    I: IntoIterator<Item = RawDocument>,
    I::IntoIter: 'f,
{
    docs.into_iter().filter(move |d| filter.accepts(&d.source))
}

/// Seeded uniform sample of `k` documents from a stream (reservoir
/// sampling), returned in stream order. Holds at most `k` documents.
pub fn sample_uniform<I>(docs: I, k: usize, seed: u64) -> Vec<RawDocument>
where
    I: IntoIterator<Item = RawDocument>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<(usize, RawDocument)> = Vec::with_capacity(k);
    if k == 0 {
        return Vec::new();
    }
    for (i, doc) in docs.into_iter().enumerate() {
        if i < k {
            reservoir.push((i, doc));
        } else {
            let j = rng.random_range(0..=i);
            if j < k {
                reservoir[j] = (i, doc);
            }
        }
    }
    reservoir.sort_by_key(|(i, _)| *i);
    reservoir.into_iter().map(|(_, d)| d).collect()
}
