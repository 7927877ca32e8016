//! Two-call report summarisation against a chat-completion service.
//!
//! The first call asks for the report's main points; the second asks for a
//! short summary of those points within the same conversation, capped at
//! [`MAX_TOKENS`] service tokens and re-truncated locally.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{Tokenizer, MAX_TOKENS};
use crate::data::PatchRecord;
use crate::error::{Error, Result};

pub const ENDPOINT_ENV: &str = "HISTODIFF_LLM_ENDPOINT";
pub const API_KEY_ENV: &str = "HISTODIFF_LLM_API_KEY";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
/// Word budget requested in the summary prompt.
pub const SUMMARY_WORDS: usize = 75;

const DEFAULT_PROMPTS: &str = include_str!("../prompts/summary_v1.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

/// One chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
    pub temperature: f64,
}

/// Parameters of a request, kept alongside the conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestParams {
    pub model: String,
    pub max_tokens: Option<usize>,
    pub temperature: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatTranscript {
    pub messages: Vec<ChatMessage>,
    pub requests: Vec<RequestParams>,
}

impl ChatTranscript {
    /// After an optional system prefix, roles alternate user/assistant starting with user.
    pub fn is_well_formed(&self) -> bool {
        let body = self.messages.iter().skip_while(|m| m.role == Role::System);
        body.enumerate().all(|(i, m)| m.role == if i % 2 == 0 { Role::User } else { Role::Assistant })
    }
}

/// Anything that can answer a chat-completion request.
pub trait Transport {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// Replays canned responses in order, cycling, and records every request.
#[derive(Debug, Default)]
pub struct MockTransport {
    responses: Vec<String>,
    state: Mutex<MockState>,
}

#[derive(Debug, Default)]
struct MockState {
    requests: Vec<ChatRequest>,
    served: usize,
    fail_remaining: usize,
}

impl MockTransport {
    pub fn new(responses: Vec<String>) -> Self {
        Self { responses, state: Mutex::default() }
    }

    /// Loads every `*.txt` file of `dir`, in file-name order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Empty("mock response fixtures"));
        }
        let responses = paths
            .iter()
            .map(|p| std::fs::read_to_string(p).map(|s| s.trim_end().to_string()))
            .collect::<std::io::Result<_>>()?;
        Ok(Self::new(responses))
    }

    /// The next `n` calls fail with a transport error.
    pub fn fail_next(self, n: usize) -> Self {
        self.state.lock().unwrap().fail_remaining = n;
        self
    }

    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().requests.len()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap().requests.clone()
    }
}

impl Transport for MockTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut state = self.state.lock().unwrap();
        state.requests.push(request.clone());
        if state.fail_remaining > 0 {
            state.fail_remaining -= 1;
            return Err(Error::Transport("injected failure".into()));
        }
        if self.responses.is_empty() {
            return Err(Error::Transport("mock has no responses".into()));
        }
        let reply = self.responses[state.served % self.responses.len()].clone();
        state.served += 1;
        Ok(reply)
    }
}

/// Chat-completions client over HTTP. Endpoint and key come from the environment.
pub struct HttpTransport {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| DEFAULT_ENDPOINT.to_string());
        let api_key = std::env::var(API_KEY_ENV).ok();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self { endpoint, api_key, client })
    }
}

impl Transport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut builder = self.client.post(&self.endpoint).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(Error::Transport(format!("HTTP {status}: {body}")));
        }
        let body: serde_json::Value = response.json().map_err(|e| Error::Transport(e.to_string()))?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("response without choices[0].message.content".into()))
    }
}

/// Offline stand-in for a chat model, good enough for the procedural reports:
/// it lists the sentences that carry findings, then joins them into a summary.
/// At nonzero temperature successive summaries vary in order and phrasing.
#[derive(Debug, Default)]
pub struct RuleTransport {
    calls: Mutex<u64>,
}

const FINDING_WORDS: [&str; 8] = ["background", "tumor", "nests", "lymphocyt", "stain", "infiltrat", "grade", "cell"];
const OPENERS: [&str; 5] = ["", "Key findings: ", "In brief, ", "Report notes ", "Overall, "];

impl RuleTransport {
    pub fn new() -> Self {
        Self::default()
    }

    fn outline(report: &str) -> String {
        report
            .split_terminator(['.', '\n'])
            .map(str::trim)
            .filter(|s| {
                let lower = s.to_lowercase();
                FINDING_WORDS.iter().any(|w| lower.contains(w))
            })
            .map(|s| format!("- {s}"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn summary(outline: &str, variant: usize) -> String {
        let mut points: Vec<String> = outline
            .lines()
            .filter_map(|l| l.trim().strip_prefix("- "))
            .map(|p| {
                let mut c = p.chars();
                c.next().map(|f| f.to_lowercase().chain(c).collect()).unwrap_or_default()
            })
            .collect();
        if points.is_empty() {
            return String::new();
        }
        let shift = variant % points.len();
        points.rotate_left(shift);
        let joiner = if variant % 2 == 0 { "; " } else { ", " };
        format!("{}{}.", OPENERS[variant % OPENERS.len()], points.join(joiner))
    }
}

impl Transport for RuleTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let call = {
            let mut calls = self.calls.lock().unwrap();
            *calls += 1;
            *calls
        };
        let answered = request.messages.iter().rev().find(|m| m.role == Role::Assistant);
        let reply = match answered {
            None => {
                let prompt = &request.messages.last().ok_or(Error::Empty("chat request"))?.content;
                let report = prompt
                    .split_once("Report:")
                    .map(|(_, r)| r.rsplit_once("\n\n").map_or(r, |(body, _)| body))
                    .unwrap_or(prompt);
                Self::outline(report)
            }
            Some(outline) => {
                let variant = if request.temperature > 0.0 { call as usize / 2 } else { 0 };
                Self::summary(&outline.content, variant)
            }
        };
        Ok(match request.max_tokens {
            Some(cap) => reply.split(' ').take(cap).collect::<Vec<_>>().join(" "),
            None => reply,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplates {
    pub version: String,
    pub system: Option<String>,
    pub outline: String,
    pub summary: String,
}

impl PromptTemplates {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn parse(text: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !t.outline.contains("{report}") {
            return Err(Error::Config("outline template lacks {report}".into()));
        }
        Ok(t)
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_PROMPTS).expect("bundled prompt templates parse")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay_ms: 500 }
    }
}

impl RetryPolicy {
    /// Runs `op` up to `attempts` times, doubling the delay after each
    /// transport failure. Other errors are returned at once.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut delay = self.base_delay_ms;
        let mut last = None;
        for attempt in 0..self.attempts.max(1) {
            if attempt > 0 && delay > 0 {
                std::thread::sleep(Duration::from_millis(delay));
                delay *= 2;
            }
            match op() {
                Err(e @ Error::Transport(_)) => last = Some(e),
                other => return other,
            }
        }
        Err(last.unwrap_or_else(|| Error::Transport("no attempts made".into())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SummarizerConfig {
    pub model: String,
    pub temperature: f64,
    pub retry: RetryPolicy,
    /// Prompt template file; the bundled templates when absent.
    pub prompt_file: Option<PathBuf>,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        Self { model: "gpt-3.5-turbo".into(), temperature: 0.0, retry: RetryPolicy::default(), prompt_file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub slide_id: String,
    pub summary: String,
    pub token_count: usize,
    pub truncated: bool,
    pub variant_index: usize,
    pub prompt_version: String,
    /// Set once a person has checked the summary.
    pub reviewed: bool,
    pub transcript: ChatTranscript,
}

/// Result of [`Summarizer::summarize_multi`]: successes plus per-variant errors.
#[derive(Debug, Default)]
pub struct MultiSummary {
    pub records: Vec<SummaryRecord>,
    pub failures: Vec<(usize, Error)>,
}

pub struct Summarizer<'a, T: Transport + ?Sized> {
    transport: &'a T,
    tokenizer: &'a Tokenizer,
    config: SummarizerConfig,
    prompts: PromptTemplates,
}

impl<'a, T: Transport + ?Sized> Summarizer<'a, T> {
    pub fn new(transport: &'a T, tokenizer: &'a Tokenizer, config: SummarizerConfig) -> Result<Self> {
        let prompts = match &config.prompt_file {
            Some(path) => PromptTemplates::load(path)?,
            None => PromptTemplates::default(),
        };
        Ok(Self { transport, tokenizer, config, prompts })
    }

    pub fn prompts(&self) -> &PromptTemplates {
        &self.prompts
    }

    fn call(&self, transcript: &mut ChatTranscript, prompt: String, max_tokens: Option<usize>) -> Result<String> {
        transcript.messages.push(ChatMessage::new(Role::User, prompt));
        let request = ChatRequest {
            model: self.config.model.clone(),
            messages: transcript.messages.clone(),
            max_tokens,
            temperature: self.config.temperature,
        };
        let reply = self.config.retry.run(|| self.transport.complete(&request))?;
        let reply = reply.trim().to_string();
        if reply.is_empty() {
            return Err(Error::Transport("empty response".into()));
        }
        transcript.requests.push(RequestParams {
            model: request.model,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
        });
        transcript.messages.push(ChatMessage::new(Role::Assistant, reply.clone()));
        Ok(reply)
    }

    fn summarize_variant(&self, slide_id: &str, report: &str, variant_index: usize) -> Result<SummaryRecord> {
        if report.trim().is_empty() {
            return Err(Error::Empty("report text"));
        }
        let mut transcript = ChatTranscript::default();
        if let Some(system) = &self.prompts.system {
            transcript.messages.push(ChatMessage::new(Role::System, system.clone()));
        }
        self.call(&mut transcript, self.prompts.outline.replace("{report}", report), None)?;
        let prompt = self.prompts.summary.replace("{words}", &SUMMARY_WORDS.to_string());
        let raw = self.call(&mut transcript, prompt, Some(MAX_TOKENS))?;
        let tokens = self.tokenizer.encode(&raw);
        let truncated = tokens.len() > MAX_TOKENS;
        let (summary, token_count) = if truncated {
            (self.tokenizer.detokenize(&tokens[..MAX_TOKENS])?, MAX_TOKENS)
        } else {
            (raw, tokens.len())
        };
        Ok(SummaryRecord {
            slide_id: slide_id.to_string(),
            summary,
            token_count,
            truncated,
            variant_index,
            prompt_version: self.prompts.version.clone(),
            reviewed: false,
            transcript,
        })
    }

    pub fn summarize_report(&self, slide_id: &str, report: &str) -> Result<SummaryRecord> {
        self.summarize_variant(slide_id, report, 0)
    }

    /// `n` independent summaries of one report.
    pub fn summarize_multi(&self, slide_id: &str, report: &str, n: usize) -> Result<MultiSummary> {
        if n == 0 {
            return Err(Error::invalid("summarize_multi needs n >= 1"));
        }
        let mut out = MultiSummary::default();
        for i in 0..n {
            match self.summarize_variant(slide_id, report, i) {
                Ok(r) => out.records.push(r),
                Err(e) => out.failures.push((i, e)),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryPolicy {
    /// Always the first variant.
    #[default]
    Fixed,
    /// A uniform draw per patch and epoch, seeded by the run seed.
    RandomPerEpoch,
}

/// FNV-1a hash of a patch id, used as a stable draw key.
pub fn patch_key(patch_id: &str) -> u64 {
    patch_id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Variant index chosen for `key` at `epoch`.
pub fn select_variant(policy: SummaryPolicy, n_variants: usize, seed: u64, epoch: u64, key: u64) -> usize {
    match policy {
        SummaryPolicy::Fixed => 0,
        SummaryPolicy::RandomPerEpoch => {
            let mixed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ key;
            ChaCha8Rng::seed_from_u64(mixed).random_range(0..n_variants.max(1))
        }
    }
}

/// Summary text a patch is trained with at `epoch`.
pub fn assign_summary<'r>(
    patch: &PatchRecord,
    records: &'r [SummaryRecord],
    policy: SummaryPolicy,
    seed: u64,
    epoch: u64,
) -> Result<&'r str> {
    if records.is_empty() {
        return Err(Error::Empty("summary records"));
    }
    let mut variants: Vec<&SummaryRecord> = records.iter().collect();
    variants.sort_by_key(|r| r.variant_index);
    let i = select_variant(policy, variants.len(), seed, epoch, patch_key(&patch.patch_id));
    Ok(&variants[i].summary)
}

pub fn save_summaries(path: &Path, records: &[SummaryRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_summaries(path: &Path) -> Result<Vec<SummaryRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
