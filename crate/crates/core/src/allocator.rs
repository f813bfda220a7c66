//! Per-sample frame-budget allocation for video-instruction corpora.
//!
//! Three strategies:
//! * rule-based: tiers over five ordinal assessment dimensions;
//! * similarity: counts distinct segments in precomputed frame embeddings;
//! * predictor: asks a remote VLM with a fixed prompt and parses its integer reply.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::LazyLock;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::budget::{BudgetSet, FrameBudget};
use crate::error::{Error, Result};
use crate::linalg;

/// Prompt sent to the remote predictor; `{qa_string}` is replaced by the sample's QA text.
pub const PROMPT_TEMPLATE: &str = include_str!("../assets/hybrid_frame_prompt.txt");

pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.9;

/// Environment variable holding the predictor credential unless configured otherwise.
pub const DEFAULT_API_KEY_ENV: &str = "TEMPORAL_TRAP_API_KEY";

const EMBEDDING_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Medium,
    High,
    Extreme,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Low, Level::Medium, Level::High, Level::Extreme];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Some(Level::Low),
            "medium" => Some(Level::Medium),
            "high" => Some(Level::High),
            "extreme" => Some(Level::Extreme),
            _ => None,
        }
    }

    fn at_least(self, other: Level) -> bool {
        self >= other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionScores {
    pub event_duration: Level,
    pub motion_continuity: Level,
    pub causal_relations: Level,
    pub object_interactions: Level,
    pub fine_grained_attributes: Level,
}

impl DimensionScores {
    pub const KEYS: [&'static str; 5] = [
        "event_duration",
        "motion_continuity",
        "causal_relations",
        "object_interactions",
        "fine_grained_attributes",
    ];

    pub fn uniform(level: Level) -> Self {
        Self::from_levels([level; 5])
    }

    /// Levels in [`Self::KEYS`] order.
    pub fn from_levels(l: [Level; 5]) -> Self {
        Self {
            event_duration: l[0],
            motion_continuity: l[1],
            causal_relations: l[2],
            object_interactions: l[3],
            fine_grained_attributes: l[4],
        }
    }

    pub fn levels(&self) -> [Level; 5] {
        [
            self.event_duration,
            self.motion_continuity,
            self.causal_relations,
            self.object_interactions,
            self.fine_grained_attributes,
        ]
    }

    /// Builds scores from raw `key → level` strings as found in manifests.
    pub fn from_raw(raw: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = raw.keys().find(|k| !Self::KEYS.contains(&k.as_str())) {
            return Err(Error::InvalidScores(format!("unknown dimension `{k}`")));
        }
        let mut levels = [Level::Low; 5];
        for (slot, key) in levels.iter_mut().zip(Self::KEYS) {
            let value = raw
                .get(key)
                .ok_or_else(|| Error::InvalidScores(format!("missing dimension `{key}`")))?;
            *slot = Level::parse(value)
                .ok_or_else(|| Error::InvalidScores(format!("unknown level `{value}` for `{key}`")))?;
        }
        Ok(Self::from_levels(levels))
    }

    pub fn to_raw(&self) -> BTreeMap<String, String> {
        Self::KEYS
            .iter()
            .zip(self.levels())
            .map(|(k, l)| {
                let s = serde_json::to_value(l).expect("level serialises");
                (k.to_string(), s.as_str().expect("string").to_string())
            })
            .collect()
    }
}

/// Tiered mapping from assessment to frame count. The 64-frame conditions are
/// checked first, then 32, then 16; everything else gets 8.
pub fn allocate_rule_based(scores: &DimensionScores) -> FrameBudget {
    let s = scores;
    if s.event_duration == Level::Extreme
        || s.motion_continuity == Level::Extreme
        || s.fine_grained_attributes == Level::Extreme
    {
        FrameBudget(64)
    } else if s.causal_relations.at_least(Level::High) || s.object_interactions.at_least(Level::High) {
        FrameBudget(32)
    } else if s.levels().iter().any(|l| matches!(l, Level::Medium | Level::High)) {
        FrameBudget(16)
    } else {
        FrameBudget(8)
    }
}

/// Number of runs of near-duplicate frames: one plus the count of consecutive
/// pairs whose cosine similarity falls below `threshold`.
pub fn segment_count(embeddings: &[Vec<f64>], threshold: f64) -> Result<usize> {
    let first = embeddings.first().ok_or(Error::EmptyEmbeddings)?;
    if let Some(bad) = embeddings.iter().find(|e| e.len() != first.len()) {
        return Err(Error::DimensionMismatch {
            expected: first.len(),
            found: bad.len(),
        });
    }
    Ok(1 + embeddings
        .windows(2)
        .filter(|w| linalg::dot(&w[0], &w[1]) < threshold)
        .count())
}

/// Smallest admissible budget covering every distinct segment, clamped to the
/// largest budget.
pub fn allocate_similarity(
    embeddings: &[Vec<f64>],
    similarity_threshold: f64,
    budgets: &BudgetSet,
) -> Result<FrameBudget> {
    if !(similarity_threshold > 0.0 && similarity_threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "similarity threshold must be in (0, 1), got {similarity_threshold}"
        )));
    }
    let segments = segment_count(embeddings, similarity_threshold)?;
    Ok(budgets.ceil(segments as u64))
}

pub fn render_prompt(qa: &str) -> String {
    PROMPT_TEMPLATE.replace("{qa_string}", qa)
}

static INTEGER_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").expect("valid regex"));

/// First integer token in the reply that is an admissible budget.
pub fn parse_vlm_reply(reply: &str, budgets: &BudgetSet) -> Result<FrameBudget> {
    INTEGER_TOKEN
        .find_iter(reply)
        .filter_map(|m| m.as_str().parse::<u32>().ok())
        .map(FrameBudget)
        .find(|m| budgets.contains(*m))
        .ok_or_else(|| Error::InvalidResponse(reply.chars().take(200).collect()))
}

/// Remote model that completes a single-message prompt.
pub trait PredictorClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Runs `op`, retrying transport and rate-limit failures with doubling backoff.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut delay = self.initial_backoff;
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    log::warn!("predictor attempt {attempt} failed: {e}; retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_concurrency() -> usize {
    4
}

/// OpenAI-style chat-completions client.
pub struct HttpPredictor {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpPredictor")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpPredictor {
    pub fn new(config: &PredictorConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::TransportFailure(e.to_string()))?;
        Ok(Self {
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            api_key,
            client,
        })
    }
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    #[serde(default)]
    message: Option<ChatMessage>,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl PredictorClient for HttpPredictor {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Error::TransportFailure(e.without_url().to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::TransportFailure(e.to_string()))?;
        if status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(Error::RateLimited(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Error::TransportFailure(format!("HTTP {status}")));
        }
        let reply: ChatReply = serde_json::from_str(&text).map_err(|e| Error::InvalidResponse(e.to_string()))?;
        reply
            .choices
            .into_iter()
            .find_map(|c| c.message.and_then(|m| m.content).or(c.text))
            .ok_or_else(|| Error::InvalidResponse("reply has no textual completion".into()))
    }
}

/// One video-instruction sample from an input manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub instruction: String,
    /// Raw `dimension → level` strings; validated when the rule-based strategy runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assessment: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_embeddings: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_min_truth: Option<FrameBudget>,
}

impl SampleRecord {
    pub fn scores(&self) -> Result<DimensionScores> {
        let raw = self
            .assessment
            .as_ref()
            .ok_or_else(|| Error::MissingInput("assessment".into()))?;
        DimensionScores::from_raw(raw)
    }
}

pub fn allocate_vlm(
    client: &dyn PredictorClient,
    sample: &SampleRecord,
    budgets: &BudgetSet,
    retry: &RetryPolicy,
) -> Result<FrameBudget> {
    if sample.instruction.trim().is_empty() {
        return Err(Error::MissingInput("instruction".into()));
    }
    let prompt = render_prompt(&sample.instruction);
    let reply = retry.run(|| client.complete(&prompt))?;
    parse_vlm_reply(&reply, budgets)
}

/// Reads a line-delimited sample manifest, checking id uniqueness and
/// embedding shape. Blank lines are skipped.
pub fn read_samples<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            column: e.column(),
            message: e.to_string(),
        })?;
        let invalid = |field: &str, msg: String| Error::validation(format!("line {lineno}: {field}"), msg);
        if rec.id.is_empty() {
            return Err(invalid("id", "must be non-empty".into()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(invalid("id", format!("duplicate id `{}`", rec.id)));
        }
        if let Some(emb) = &rec.frame_embeddings {
            if let Some(first) = emb.first() {
                if emb.iter().any(|e| e.len() != first.len()) {
                    return Err(invalid("frame_embeddings", "embeddings differ in dimension".into()));
                }
            }
            if let Some((j, e)) = emb
                .iter()
                .enumerate()
                .find(|(_, e)| (linalg::norm(e) - 1.0).abs() > EMBEDDING_NORM_TOL)
            {
                return Err(invalid(
                    "frame_embeddings",
                    format!("embedding {j} has norm {}, expected 1", linalg::norm(e)),
                ));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_samples<W: Write>(mut writer: W, samples: &[SampleRecord]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Copy)]
pub enum Strategy<'a> {
    RuleBased,
    Similarity {
        threshold: f64,
    },
    Vlm {
        client: &'a dyn PredictorClient,
        retry: RetryPolicy,
        concurrency: usize,
    },
}

impl Strategy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::RuleBased => "rule_based",
            Strategy::Similarity { .. } => "similarity",
            Strategy::Vlm { .. } => "vlm",
        }
    }

    fn allocate(&self, sample: &SampleRecord, budgets: &BudgetSet) -> Result<FrameBudget> {
        match self {
            Strategy::RuleBased => budgets.check(allocate_rule_based(&sample.scores()?)),
            Strategy::Similarity { threshold } => {
                let emb = sample
                    .frame_embeddings
                    .as_deref()
                    .ok_or_else(|| Error::MissingInput("frame_embeddings".into()))?;
                allocate_similarity(emb, *threshold, budgets)
            }
            Strategy::Vlm { client, retry, .. } => allocate_vlm(*client, sample, budgets, retry),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationEntry {
    pub id: String,
    pub strategy: String,
    pub budget: Option<FrameBudget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSummary {
    pub histogram: BTreeMap<FrameBudget, usize>,
    pub mean_frames: Option<f64>,
    pub exclusions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationManifest {
    pub entries: Vec<AllocationEntry>,
    pub summary: AllocationSummary,
}

impl AllocationManifest {
    pub fn from_entries(entries: Vec<AllocationEntry>, budgets: &BudgetSet) -> Self {
        let mut histogram: BTreeMap<FrameBudget, usize> = budgets.iter().map(|m| (m, 0)).collect();
        let mut exclusions = 0;
        for e in &entries {
            match e.budget {
                Some(m) => *histogram.entry(m).or_default() += 1,
                None => exclusions += 1,
            }
        }
        let total: usize = histogram.values().sum();
        let weighted: u64 = histogram.iter().map(|(m, c)| u64::from(m.0) * *c as u64).sum();
        let mean_frames = (total > 0).then(|| weighted as f64 / total as f64);
        Self {
            entries,
            summary: AllocationSummary {
                histogram,
                mean_frames,
                exclusions,
            },
        }
    }

    /// Entry lines followed by one `{"summary": …}` line.
    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut writer, e)?;
            writer.write_all(b"\n")?;
        }
        #[derive(Serialize)]
        struct Trailer<'a> {
            summary: &'a AllocationSummary,
        }
        serde_json::to_writer(&mut writer, &Trailer { summary: &self.summary })?;
        writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Trailer {
            summary: AllocationSummary,
        }
        let mut entries = Vec::new();
        let mut summary = None;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if summary.is_some() {
                return Err(Error::validation("summary", "summary must be the last record"));
            }
            match serde_json::from_str::<Trailer>(&line) {
                Ok(t) => summary = Some(t.summary),
                Err(_) => entries.push(serde_json::from_str(&line)?),
            }
        }
        let summary = summary.ok_or_else(|| Error::validation("summary", "missing trailing summary"))?;
        Ok(Self { entries, summary })
    }
}

/// Allocates every sample, keeping input order. Per-sample failures are
/// recorded on the entry and excluded from the histogram.
pub fn allocate_corpus(
    samples: &[SampleRecord],
    strategy: Strategy<'_>,
    budgets: &BudgetSet,
) -> Result<AllocationManifest> {
    let name = strategy.name();
    let one = |s: &SampleRecord| {
        let (budget, error) = match strategy.allocate(s, budgets) {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        };
        AllocationEntry {
            id: s.id.clone(),
            strategy: name.to_string(),
            budget,
            error,
        }
    };
    let entries: Vec<AllocationEntry> = match strategy {
        Strategy::Vlm { concurrency, .. } => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(concurrency.max(1))
                .build()
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            pool.install(|| samples.par_iter().map(one).collect())
        }
        _ => samples.par_iter().map(one).collect(),
    };
    Ok(AllocationManifest::from_entries(entries, budgets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn scores(l: [Level; 5]) -> DimensionScores {
        DimensionScores::from_levels(l)
    }

    use Level::*;

    #[test]
    fn rule_based_tiers() {
        assert_eq!(allocate_rule_based(&DimensionScores::uniform(Low)), FrameBudget(8));
        assert_eq!(
            allocate_rule_based(&scores([Extreme, Extreme, Low, Low, Low])),
            FrameBudget(64)
        );
        assert_eq!(
            allocate_rule_based(&scores([Low, Low, High, High, Low])),
            FrameBudget(32)
        );
        assert_eq!(
            allocate_rule_based(&scores([Low, Medium, Low, Low, Low])),
            FrameBudget(16)
        );
        assert_eq!(
            allocate_rule_based(&scores([Low, Low, Low, Low, Extreme])),
            FrameBudget(64)
        );
        assert_eq!(
            allocate_rule_based(&scores([Low, Low, Extreme, Low, Low])),
            FrameBudget(32)
        );
        assert_eq!(
            allocate_rule_based(&scores([High, Low, Low, Low, Low])),
            FrameBudget(16)
        );
    }

    #[test]
    fn raw_scores_validation() {
        let mut raw = DimensionScores::uniform(Medium).to_raw();
        assert_eq!(
            DimensionScores::from_raw(&raw).unwrap(),
            DimensionScores::uniform(Medium)
        );
        raw.insert("event_duration".into(), "huge".into());
        assert!(matches!(DimensionScores::from_raw(&raw), Err(Error::InvalidScores(_))));
        raw.remove("event_duration");
        assert!(matches!(DimensionScores::from_raw(&raw), Err(Error::InvalidScores(_))));
        let mut extra = DimensionScores::uniform(Low).to_raw();
        extra.insert("color".into(), "low".into());
        assert!(matches!(
            DimensionScores::from_raw(&extra),
            Err(Error::InvalidScores(_))
        ));
    }

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn similarity_examples() {
        let m = BudgetSet::default();
        let same = vec![unit(4, 0); 100];
        assert_eq!(allocate_similarity(&same, 0.9, &m).unwrap(), FrameBudget(8));

        let alternating: Vec<Vec<f64>> = (0..100).map(|i| unit(2, i % 2)).collect();
        assert_eq!(segment_count(&alternating, 0.9).unwrap(), 100);
        assert_eq!(allocate_similarity(&alternating, 0.9, &m).unwrap(), FrameBudget(64));

        let twenty: Vec<Vec<f64>> = (0..20).flat_map(|s| vec![unit(20, s); 3]).collect();
        assert_eq!(segment_count(&twenty, 0.9).unwrap(), 20);
        assert_eq!(allocate_similarity(&twenty, 0.9, &m).unwrap(), FrameBudget(32));
    }

    #[test]
    fn similarity_errors() {
        let m = BudgetSet::default();
        assert!(matches!(allocate_similarity(&[], 0.9, &m), Err(Error::EmptyEmbeddings)));
        assert!(matches!(
            allocate_similarity(&[unit(2, 0), unit(3, 0)], 0.9, &m),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(allocate_similarity(&[unit(2, 0)], 1.0, &m).is_err());
    }

    #[test]
    fn reply_parsing() {
        let m = BudgetSet::default();
        assert_eq!(parse_vlm_reply("32", &m).unwrap(), FrameBudget(32));
        assert_eq!(
            parse_vlm_reply("The optimal count is 16.", &m).unwrap(),
            FrameBudget(16)
        );
        assert!(matches!(parse_vlm_reply("abc", &m), Err(Error::InvalidResponse(_))));
        assert_eq!(parse_vlm_reply("Among 5 options: 64", &m).unwrap(), FrameBudget(64));
        assert!(parse_vlm_reply("12", &m).is_err());
    }

    #[test]
    fn prompt_rendering() {
        let p = render_prompt("Q: What color is the car? A: Red.");
        let (head, tail) = PROMPT_TEMPLATE.split_once("{qa_string}").unwrap();
        assert!(p.starts_with(head) && p.ends_with(tail));
        assert!(p.contains("Q: What color is the car? A: Red."));
        assert!(!p.contains("{qa_string}"));
    }

    struct Scripted {
        replies: Mutex<Vec<Result<String>>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<String>>) -> Self {
            replies.reverse();
            Self {
                replies: Mutex::new(replies),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl PredictorClient for Scripted {
        fn complete(&self, _prompt: &str) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies.lock().unwrap().pop().unwrap_or_else(|| Ok("8".into()))
        }
    }

    fn sample(id: &str) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            instruction: "Q: what happens? A: a ball bounces".into(),
            assessment: None,
            frame_embeddings: None,
            m_min_truth: None,
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::ZERO,
        }
    }

    #[test]
    fn vlm_retries_transient_failures() {
        let m = BudgetSet::default();
        let c = Scripted::new(vec![
            Err(Error::RateLimited("429".into())),
            Err(Error::TransportFailure("reset".into())),
            Ok("16".into()),
        ]);
        assert_eq!(
            allocate_vlm(&c, &sample("a"), &m, &fast_retry()).unwrap(),
            FrameBudget(16)
        );
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);

        let c = Scripted::new(vec![
            Err(Error::RateLimited("429".into())),
            Err(Error::RateLimited("429".into())),
            Err(Error::RateLimited("429".into())),
            Ok("16".into()),
        ]);
        assert!(matches!(
            allocate_vlm(&c, &sample("a"), &m, &fast_retry()),
            Err(Error::RateLimited(_))
        ));
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);

        // Bad content is not retried.
        let c = Scripted::new(vec![Ok("no idea".into()), Ok("8".into())]);
        assert!(matches!(
            allocate_vlm(&c, &sample("a"), &m, &fast_retry()),
            Err(Error::InvalidResponse(_))
        ));
        assert_eq!(c.calls.load(Ordering::SeqCst), 1);

        let mut empty = sample("b");
        empty.instruction = "  ".into();
        assert!(matches!(
            allocate_vlm(&c, &empty, &m, &fast_retry()),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn corpus_records_per_sample_errors() {
        let m = BudgetSet::default();
        let mut good = sample("good");
        good.assessment = Some(DimensionScores::uniform(High).to_raw());
        let missing = sample("missing");
        let mut bad = sample("bad");
        bad.assessment = Some(BTreeMap::from([("event_duration".to_string(), "low".to_string())]));
        let manifest = allocate_corpus(&[good, missing, bad], Strategy::RuleBased, &m).unwrap();
        assert_eq!(manifest.entries.len(), 3);
        assert_eq!(manifest.entries[0].budget, Some(FrameBudget(32)));
        assert!(manifest.entries[1].error.as_deref().unwrap().contains("assessment"));
        assert!(manifest.entries[2].budget.is_none());
        assert_eq!(manifest.summary.exclusions, 2);
        assert_eq!(manifest.summary.histogram[&FrameBudget(32)], 1);
        assert_eq!(manifest.summary.mean_frames, Some(32.0));
    }

    #[test]
    fn empty_corpus() {
        let m = BudgetSet::default();
        let manifest = allocate_corpus(&[], Strategy::RuleBased, &m).unwrap();
        assert!(manifest.entries.is_empty());
        assert!(manifest.summary.histogram.values().all(|c| *c == 0));
        assert_eq!(manifest.summary.histogram.len(), 4);
        assert_eq!(manifest.summary.mean_frames, None);
    }

    #[test]
    fn vlm_corpus_preserves_order() {
        let m = BudgetSet::default();
        let c = Scripted::new(vec![]);
        let samples: Vec<SampleRecord> = (0..20).map(|i| sample(&format!("s{i}"))).collect();
        let strategy = Strategy::Vlm {
            client: &c,
            retry: fast_retry(),
            concurrency: 4,
        };
        let manifest = allocate_corpus(&samples, strategy, &m).unwrap();
        let ids: Vec<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
        let expected: Vec<String> = (0..20).map(|i| format!("s{i}")).collect();
        assert_eq!(ids, expected.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(manifest.summary.histogram[&FrameBudget(8)], 20);
    }

    #[test]
    fn manifest_reader_validates() {
        let path = Path::new("mem");
        let ok = r#"{"id":"a","instruction":"q","frame_embeddings":[[1.0,0.0],[0.0,1.0]]}"#;
        assert_eq!(read_samples(ok.as_bytes(), path).unwrap().len(), 1);
        let dup = format!("{ok}\n\n{ok}\n");
        assert!(matches!(
            read_samples(dup.as_bytes(), path),
            Err(Error::Validation { .. })
        ));
        let not_unit = r#"{"id":"a","instruction":"q","frame_embeddings":[[2.0,0.0]]}"#;
        assert!(read_samples(not_unit.as_bytes(), path).is_err());
        let broken = "{\"id\":\"a\",\n";
        match read_samples(broken.as_bytes(), path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
