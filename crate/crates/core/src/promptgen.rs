//! Prompt templates, language-model backends, the response cache, and the
//! description corpus built from category labels.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "<category>";

/// The nine prompt types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptId {
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
    P7,
    P8,
    P9,
}

impl PromptId {
    pub const ALL: [PromptId; 9] = [
        PromptId::P1,
        PromptId::P2,
        PromptId::P3,
        PromptId::P4,
        PromptId::P5,
        PromptId::P6,
        PromptId::P7,
        PromptId::P8,
        PromptId::P9,
    ];

    pub fn number(self) -> usize {
        self as usize + 1
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.number())
    }
}

impl FromStr for PromptId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let n: usize = t
            .strip_prefix('P')
            .or_else(|| t.strip_prefix('p'))
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::Template(format!("unknown prompt id {s:?}")))?;
        PromptId::ALL
            .get(n.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Template(format!("prompt id out of range: {s:?}")))
    }
}

/// Parses a comma-separated prompt filter such as `P1,P5`.
pub fn parse_prompt_set(s: &str) -> Result<Vec<PromptId>> {
    let mut ids: Vec<PromptId> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(PromptId::from_str)
        .collect::<Result<_>>()?;
    ids.sort();
    ids.dedup();
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: PromptId,
    pub template_text: String,
    pub focus: String,
}

impl PromptTemplate {
    pub fn new(id: PromptId, template_text: impl Into<String>, focus: impl Into<String>) -> Result<Self> {
        let template_text = template_text.into();
        check_placeholder(&template_text)?;
        Ok(Self {
            id,
            template_text,
            focus: focus.into(),
        })
    }
}

fn check_placeholder(text: &str) -> Result<()> {
    match text.matches(PLACEHOLDER).count() {
        1 => Ok(()),
        n => Err(Error::Template(format!(
            "template must contain exactly one {PLACEHOLDER} placeholder, found {n}: {text:?}"
        ))),
    }
}

const BUILTIN: [(PromptId, &str, &str); 9] = [
    (PromptId::P1, "Describe colors of a <category>", "colors"),
    (PromptId::P2, "Describe shapes of a <category>", "shapes"),
    (PromptId::P3, "Describe textures of a <category>", "textures"),
    (PromptId::P4, "Describe visual appearances of a <category>", "summarized visual appearances"),
    (PromptId::P5, "Describe a <category> in a scene", "scenes"),
    (PromptId::P6, "Describe what a <category> could be seen with", "relations with other entities"),
    (PromptId::P7, "Describe the places a <category> has been seen", "places"),
    (PromptId::P8, "Describe the main activities of a <category>", "activities"),
    (PromptId::P9, "Describe what is it like to be a <category>", "first-person view"),
];

/// The nine built-in templates, P1 through P9.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    BUILTIN
        .iter()
        .map(|&(id, text, focus)| PromptTemplate {
            id,
            template_text: text.to_string(),
            focus: focus.to_string(),
        })
        .collect()
}

/// Focus tag of a built-in prompt type.
pub fn builtin_focus(id: PromptId) -> &'static str {
    BUILTIN[id as usize].2
}

/// Reads templates from a tab-separated file: `P1<TAB>text<TAB>focus`.
/// Blank lines and `#` comments are ignored.
pub fn load_templates(path: &Path) -> Result<Vec<PromptTemplate>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Template(format!(
                "{}:{}: expected 3 tab-separated columns",
                path.display(),
                n + 1
            )));
        }
        out.push(PromptTemplate::new(cols[0].parse()?, cols[1], cols[2])?);
    }
    if out.is_empty() {
        return Err(Error::Template(format!("{}: no templates", path.display())));
    }
    Ok(out)
}

/// Surface form used in prompts: underscores become spaces, case untouched.
pub fn render_surface(label: &str) -> String {
    label.replace('_', " ")
}

pub fn render_prompt(template: &PromptTemplate, label_surface: &str) -> Result<String> {
    if label_surface.trim().is_empty() {
        return Err(Error::Precondition("label surface is empty".into()));
    }
    check_placeholder(&template.template_text)?;
    Ok(template
        .template_text
        .replace(PLACEHOLDER, &render_surface(label_surface)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub category_id: String,
    pub canonical_label: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

impl CategoryEntry {
    pub fn new(
        category_id: impl Into<String>,
        canonical_label: impl Into<String>,
        synonyms: Vec<String>,
    ) -> Result<Self> {
        let entry = Self {
            category_id: category_id.into(),
            canonical_label: canonical_label.into(),
            synonyms,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.category_id.trim().is_empty() {
            return Err(Error::Manifest("category id is empty".into()));
        }
        if self.canonical_label.trim().is_empty() {
            return Err(Error::Manifest(format!(
                "category {} has an empty label",
                self.category_id
            )));
        }
        let mut seen = HashSet::new();
        for s in &self.synonyms {
            if s.trim().is_empty() || s == &self.canonical_label || !seen.insert(s) {
                return Err(Error::Manifest(format!(
                    "category {}: bad or duplicate synonym {s:?}",
                    self.category_id
                )));
            }
        }
        Ok(())
    }

    /// Canonical label first, then synonyms in declaration order.
    pub fn surface_forms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.canonical_label.as_str()).chain(self.synonyms.iter().map(String::as_str))
    }

    pub fn article_form(&self) -> String {
        render_surface(&self.canonical_label)
    }
}

/// Reads a category list. `.jsonl` files hold one [`CategoryEntry`] per line;
/// anything else is read as `id<TAB>label[, synonym]...` (ImageNet
/// `words.txt` style, first name canonical).
pub fn load_categories(path: &Path) -> Result<Vec<CategoryEntry>> {
    let file = fs::File::open(path)?;
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let entry = if jsonl {
            serde_json::from_str::<CategoryEntry>(&line)?
        } else {
            let (id, names) = line.split_once('\t').ok_or_else(|| {
                Error::Manifest(format!("{}:{}: expected id<TAB>names", path.display(), n + 1))
            })?;
            let mut names = names.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
            let canonical = names.next().unwrap_or_default();
            let mut synonyms: Vec<String> = Vec::new();
            for s in names {
                if s != canonical && !synonyms.contains(&s) {
                    synonyms.push(s);
                }
            }
            CategoryEntry {
                category_id: id.trim().to_string(),
                canonical_label: canonical,
                synonyms,
            }
        };
        entry.validate()?;
        out.push(entry);
    }
    Ok(out)
}

/// One generated description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub description_id: String,
    pub category_id: String,
    pub prompt_id: PromptId,
    pub surface_label_used: String,
    pub response_index: u32,
    pub text: String,
}

/// Collapses whitespace runs and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub prompt_id: PromptId,
    pub surface_label: String,
    pub response_index: u32,
}

/// Text in, text out.
pub trait LanguageModelBackend {
    fn complete(&mut self, request: &CompletionRequest) -> Result<String>;
}

impl<B: LanguageModelBackend + ?Sized> LanguageModelBackend for Box<B> {
    fn complete(&mut self, request: &CompletionRequest) -> Result<String> {
        (**self).complete(request)
    }
}

/// Deterministic offline backend.
///
/// Explicit canned responses (keyed by prompt text and response index) win;
/// otherwise a response is composed from focus-specific phrase banks, seeded
/// by a hash of the request so the same request always yields the same text.
#[derive(Debug, Clone, Default)]
pub struct FixtureBackend {
    canned: HashMap<(String, u32), String>,
    calls: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CannedLine {
    prompt: String,
    response_index: u32,
    text: String,
}

impl FixtureBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, prompt: impl Into<String>, index: u32, text: impl Into<String>) -> Self {
        self.canned.insert((prompt.into(), index), text.into());
        self
    }

    /// Loads canned responses from JSON lines `{prompt, response_index, text}`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut backend = Self::new();
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let c: CannedLine = serde_json::from_str(&line)?;
            backend.canned.insert((c.prompt, c.response_index), c.text);
        }
        Ok(backend)
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}

impl LanguageModelBackend for FixtureBackend {
    fn complete(&mut self, request: &CompletionRequest) -> Result<String> {
        self.calls += 1;
        if let Some(text) = self.canned.get(&(request.prompt.clone(), request.response_index)) {
            return Ok(text.clone());
        }
        Ok(compose_fixture_response(request))
    }
}

const COLORS: &[&str] = &["red", "brown", "white", "black", "green", "grey", "yellow", "blue", "orange"];
const SHAPES: &[&str] = &["round", "long", "slender", "compact", "curved", "flat", "tall"];
const TEXTURES: &[&str] = &["smooth", "rough", "soft", "glossy", "bumpy", "fuzzy", "coarse"];
const PLACES: &[&str] = &["park", "river", "forest", "city", "garden", "beach", "field", "market"];
const COMPANIONS: &[&str] = &["people", "trees", "water", "grass", "rocks", "children", "birds"];
const ACTIVITIES: &[&str] = &["resting", "moving", "feeding", "waiting", "gliding", "playing"];
const FEELINGS: &[&str] = &["calm", "busy", "curious", "free", "watchful", "content"];

fn fixture_pattern(id: PromptId) -> (&'static str, Vec<&'static [&'static str]>) {
    match id {
        PromptId::P1 => ("The {L} is mostly {0} with {1} patches.", vec![COLORS, COLORS]),
        PromptId::P2 => ("A {L} has a {0} body and a {1} outline.", vec![SHAPES, SHAPES]),
        PromptId::P3 => ("The surface of a {L} feels {0} and {1}.", vec![TEXTURES, TEXTURES]),
        PromptId::P4 => ("A {L} looks {0} and {1} with {2} tones.", vec![SHAPES, TEXTURES, COLORS]),
        PromptId::P5 => ("In the scene a {L} stands near the {0} beside {1}.", vec![PLACES, COMPANIONS]),
        PromptId::P6 => ("A {L} is often seen with {0} and {1}.", vec![COMPANIONS, COMPANIONS]),
        PromptId::P7 => ("People have seen a {L} in the {0} and the {1}.", vec![PLACES, PLACES]),
        PromptId::P8 => ("A {L} spends the day {0} and {1}.", vec![ACTIVITIES, ACTIVITIES]),
        PromptId::P9 => ("Being a {L} feels {0} while {1} in the {2}.", vec![FEELINGS, ACTIVITIES, PLACES]),
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Phrase-bank response. The walk over word combinations uses a stride
/// coprime with their count, so response indices below that count never
/// collide for one prompt.
fn compose_fixture_response(req: &CompletionRequest) -> String {
    let digest = Sha256::digest(req.prompt.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let (pattern, banks) = fixture_pattern(req.prompt_id);
    let total: u64 = banks.iter().map(|b| b.len() as u64).product();
    let offset = rng.random_range(0..total);
    let mut stride = rng.random_range(1..total);
    while gcd(stride, total) != 1 {
        stride += 1;
    }
    let mut combo = (offset + req.response_index as u64 * stride) % total;
    let mut out = pattern.replace("{L}", &render_surface(&req.surface_label));
    for (slot, bank) in banks.iter().enumerate() {
        let n = bank.len() as u64;
        out = out.replace(&format!("{{{slot}}}"), bank[(combo % n) as usize]);
        combo /= n;
    }
    out
}

/// Settings for the HTTP backend. Decoding parameters are passed through
/// untouched; when absent the service defaults apply.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiveConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo-instruct".into(),
            api_key_env: "WVLP_LLM_API_KEY".into(),
            timeout_secs: 60,
            temperature: None,
            max_tokens: None,
        }
    }
}

/// OpenAI-compatible chat-completions client.
pub struct LiveBackend {
    config: LiveConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            Error::Backend(format!("credentials variable {} is not set", config.api_key_env))
        })?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(Self { config, api_key, agent })
    }
}

impl LanguageModelBackend for LiveBackend {
    fn complete(&mut self, request: &CompletionRequest) -> Result<String> {
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        if let Some(t) = self.config.temperature {
            body["temperature"] = t.into();
        }
        if let Some(m) = self.config.max_tokens {
            body["max_tokens"] = m.into();
        }
        let response: serde_json::Value = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| Error::Backend(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::Backend(e.to_string()))?;
        response["choices"][0]["message"]["content"]
            .as_str()
            .or_else(|| response["choices"][0]["text"].as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Backend(format!("unexpected response shape: {response}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Duration,
    /// Minimum spacing between consecutive calls.
    pub min_interval: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff: Duration::from_millis(500),
            min_interval: Duration::ZERO,
        }
    }
}

/// Adds retries and rate limiting around any backend.
pub struct Retrying<B> {
    inner: B,
    policy: RetryPolicy,
    last_call: Option<Instant>,
}

impl<B: LanguageModelBackend> Retrying<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Self {
            inner,
            policy,
            last_call: None,
        }
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: LanguageModelBackend> LanguageModelBackend for Retrying<B> {
    fn complete(&mut self, request: &CompletionRequest) -> Result<String> {
        let mut attempt = 0;
        loop {
            if let Some(last) = self.last_call {
                let elapsed = last.elapsed();
                if elapsed < self.policy.min_interval {
                    thread::sleep(self.policy.min_interval - elapsed);
                }
            }
            self.last_call = Some(Instant::now());
            match self.inner.complete(request) {
                Ok(text) => return Ok(text),
                Err(e) if attempt >= self.policy.max_retries => {
                    return Err(Error::Backend(format!(
                        "giving up after {} attempts: {e}",
                        attempt + 1
                    )))
                }
                Err(e) => {
                    log::warn!("backend attempt {} failed: {e}", attempt + 1);
                    thread::sleep(self.policy.backoff * (attempt + 1));
                    attempt += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub prompt_id: PromptId,
    pub surface_label: String,
    pub response_index: u32,
}

impl CacheKey {
    /// Content hash naming the cache file.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.prompt_id.to_string().as_bytes());
        h.update([0x1f]);
        h.update(self.surface_label.as_bytes());
        h.update([0x1f]);
        h.update(self.response_index.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    prompt_id: PromptId,
    surface_label: String,
    response_index: u32,
    text: String,
}

/// Response cache. Entries live in memory and, when a directory is given,
/// under `<dir>/v<version>/<sha256>.json`.
#[derive(Debug)]
pub struct PromptCache {
    version: u32,
    dir: Option<PathBuf>,
    memory: HashMap<CacheKey, String>,
}

impl PromptCache {
    pub fn in_memory(version: u32) -> Self {
        Self {
            version,
            dir: None,
            memory: HashMap::new(),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>, version: u32) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join(format!("v{version}")))?;
        Ok(Self {
            version,
            dir: Some(dir),
            memory: HashMap::new(),
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    fn path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("v{}", self.version)).join(format!("{}.json", key.digest())))
    }

    pub fn get(&mut self, key: &CacheKey) -> Result<Option<String>> {
        if let Some(t) = self.memory.get(key) {
            return Ok(Some(t.clone()));
        }
        let Some(path) = self.path(key) else {
            return Ok(None);
        };
        if !path.exists() {
            return Ok(None);
        }
        let entry: CacheEntry = serde_json::from_slice(&fs::read(&path)?)?;
        if entry.prompt_id != key.prompt_id
            || entry.surface_label != key.surface_label
            || entry.response_index != key.response_index
        {
            return Err(Error::Backend(format!("cache entry {} does not match its key", path.display())));
        }
        self.memory.insert(key.clone(), entry.text.clone());
        Ok(Some(entry.text))
    }

    pub fn put(&mut self, key: &CacheKey, text: &str) -> Result<()> {
        if let Some(path) = self.path(key) {
            let entry = CacheEntry {
                prompt_id: key.prompt_id,
                surface_label: key.surface_label.clone(),
                response_index: key.response_index,
                text: text.to_string(),
            };
            let tmp = path.with_extension("json.tmp");
            fs::write(&tmp, serde_json::to_vec(&entry)?)?;
            fs::rename(&tmp, &path)?;
        }
        self.memory.insert(key.clone(), text.to_string());
        Ok(())
    }
}

/// Counters from one generation pass. Not persisted: they depend on cache
/// warmth, the corpus does not.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationCounters {
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub empty_responses: usize,
    pub duplicates_collapsed: usize,
}

impl std::ops::AddAssign for GenerationCounters {
    fn add_assign(&mut self, o: Self) {
        self.backend_calls += o.backend_calls;
        self.cache_hits += o.cache_hits;
        self.empty_responses += o.empty_responses;
        self.duplicates_collapsed += o.duplicates_collapsed;
    }
}

/// Stable record id: `<category>/<prompt>/<surface>/<response index>`.
pub fn description_id(category_id: &str, prompt: PromptId, surface: &str, index: u32) -> String {
    format!("{category_id}/{prompt}/{surface}/{index}")
}

/// Queries every (surface form, template, response index) for one category.
///
/// Exact duplicate texts within the same (category, prompt) keep only their
/// first occurrence; the number collapsed is counted. Empty responses are
/// skipped and counted. A backend error aborts with [`Error::Partial`].
pub fn generate_descriptions(
    entry: &CategoryEntry,
    templates: &[PromptTemplate],
    backend: &mut dyn LanguageModelBackend,
    cache: &mut PromptCache,
    responses_per_prompt: u32,
) -> Result<(Vec<DescriptionRecord>, GenerationCounters)> {
    if responses_per_prompt == 0 {
        return Err(Error::Precondition("responses_per_prompt must be at least 1".into()));
    }
    entry.validate()?;
    let mut records = Vec::new();
    let mut counters = GenerationCounters::default();
    let mut seen: HashMap<PromptId, HashSet<String>> = HashMap::new();

    for surface in entry.surface_forms() {
        for template in templates {
            let prompt = render_prompt(template, surface)?;
            for index in 0..responses_per_prompt {
                let key = CacheKey {
                    prompt_id: template.id,
                    surface_label: surface.to_string(),
                    response_index: index,
                };
                let raw = match cache.get(&key) {
                    Ok(Some(t)) => {
                        counters.cache_hits += 1;
                        t
                    }
                    Ok(None) => {
                        let request = CompletionRequest {
                            prompt: prompt.clone(),
                            prompt_id: template.id,
                            surface_label: surface.to_string(),
                            response_index: index,
                        };
                        counters.backend_calls += 1;
                        let fetched = backend.complete(&request).and_then(|t| {
                            cache.put(&key, &t)?;
                            Ok(t)
                        });
                        match fetched {
                            Ok(t) => t,
                            Err(e) => {
                                return Err(Error::Partial {
                                    completed: records,
                                    source: Box::new(e),
                                })
                            }
                        }
                    }
                    Err(e) => {
                        return Err(Error::Partial {
                            completed: records,
                            source: Box::new(e),
                        })
                    }
                };
                let text = normalize_whitespace(&raw);
                if text.is_empty() {
                    log::warn!("empty response for {} {surface:?} #{index}", template.id);
                    counters.empty_responses += 1;
                    continue;
                }
                if !seen.entry(template.id).or_default().insert(text.clone()) {
                    counters.duplicates_collapsed += 1;
                    continue;
                }
                records.push(DescriptionRecord {
                    description_id: description_id(&entry.category_id, template.id, surface, index),
                    category_id: entry.category_id.clone(),
                    prompt_id: template.id,
                    surface_label_used: surface.to_string(),
                    response_index: index,
                    text,
                });
            }
        }
    }
    Ok((records, counters))
}

/// Persisted corpus statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub categories: usize,
    pub per_prompt: BTreeMap<PromptId, usize>,
    pub total_texts: usize,
    pub duplicates_collapsed: usize,
    pub empty_responses: usize,
}

#[derive(Debug, Clone)]
pub struct TextCorpus {
    pub records: Vec<DescriptionRecord>,
    pub stats: CorpusStats,
    pub counters: GenerationCounters,
}

/// Records before duplicate/empty removal: `Σ (1 + |synonyms|) × templates × responses`.
pub fn expected_record_count(entries: &[CategoryEntry], templates: usize, responses_per_prompt: u32) -> usize {
    entries
        .iter()
        .map(|e| (1 + e.synonyms.len()) * templates * responses_per_prompt as usize)
        .sum()
}

pub fn build_text_corpus(
    entries: &[CategoryEntry],
    templates: &[PromptTemplate],
    backend: &mut dyn LanguageModelBackend,
    cache: &mut PromptCache,
    responses_per_prompt: u32,
) -> Result<TextCorpus> {
    if entries.is_empty() {
        return Err(Error::Manifest("no categories given".into()));
    }
    let mut ids = HashSet::new();
    for e in entries {
        if !ids.insert(e.category_id.as_str()) {
            return Err(Error::Manifest(format!("duplicate category id {}", e.category_id)));
        }
    }
    if templates.is_empty() {
        return Err(Error::Template("no templates given".into()));
    }

    let mut records = Vec::new();
    let mut counters = GenerationCounters::default();
    for entry in entries {
        match generate_descriptions(entry, templates, backend, cache, responses_per_prompt) {
            Ok((r, c)) => {
                records.extend(r);
                counters += c;
            }
            Err(Error::Partial { completed, source }) => {
                records.extend(completed);
                return Err(Error::Partial {
                    completed: records,
                    source,
                });
            }
            Err(e) => return Err(e),
        }
    }

    let mut per_prompt: BTreeMap<PromptId, usize> = templates.iter().map(|t| (t.id, 0)).collect();
    for r in &records {
        *per_prompt.entry(r.prompt_id).or_default() += 1;
    }
    let stats = CorpusStats {
        categories: entries.len(),
        per_prompt,
        total_texts: records.len(),
        duplicates_collapsed: counters.duplicates_collapsed,
        empty_responses: counters.empty_responses,
    };
    Ok(TextCorpus {
        records,
        stats,
        counters,
    })
}

pub const DESCRIPTIONS_FILE: &str = "descriptions.jsonl";
pub const STATS_FILE: &str = "stats.json";

pub fn write_descriptions(path: &Path, records: &[DescriptionRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_descriptions(path: &Path) -> Result<Vec<DescriptionRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

impl TextCorpus {
    /// Writes `descriptions.jsonl` and `stats.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_descriptions(&dir.join(DESCRIPTIONS_FILE), &self.records)?;
        let mut stats = serde_json::to_vec_pretty(&self.stats)?;
        stats.push(b'\n');
        fs::write(dir.join(STATS_FILE), stats)?;
        Ok(())
    }
}
