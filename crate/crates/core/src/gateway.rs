//! Turn-generating model backends.
//!
//! [`ScriptedBackend`] replays fixed outputs selected by turn index or by a
//! regular expression over the last user message; [`RemoteChatBackend`] talks
//! to `POST {base}/chat`. Both truncate at the first stop sequence, keeping
//! the stop sequence itself.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::CLOSING_ACTION_TAGS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
            attachments: Vec::new(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
            attachments: Vec::new(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
            attachments: Vec::new(),
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.attachments.push(image_ref.into());
        self
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty() && self.attachments.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub stop_sequences: Vec<String>,
}

impl GenerationParams {
    /// Parameters for agent turns: generation stops at any closing action tag.
    pub fn agent(temperature: f64, max_new_tokens: u32) -> Self {
        Self::free_form(temperature, max_new_tokens).with_stops(CLOSING_ACTION_TAGS.iter().copied())
    }

    /// Parameters without stop sequences, for data-construction prompts whose
    /// outputs continue past `</text_search>` (e.g. a trailing `<choose>`).
    pub fn free_form(temperature: f64, max_new_tokens: u32) -> Self {
        GenerationParams {
            temperature: temperature.max(0.0),
            max_new_tokens,
            stop_sequences: Vec::new(),
        }
    }

    pub fn with_stops<'a>(mut self, stops: impl IntoIterator<Item = &'a str>) -> Self {
        for s in stops {
            if !self.stop_sequences.iter().any(|x| x == s) {
                self.stop_sequences.push(s.to_string());
            }
        }
        self
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self::agent(0.0, 1024)
    }
}

pub struct CompletionRequest<'a> {
    pub messages: &'a [ChatMessage],
    pub params: &'a GenerationParams,
    /// Zero-based index of this generation within its trajectory.
    pub turn_index: usize,
    pub request_id: String,
}

impl<'a> CompletionRequest<'a> {
    pub fn new(
        messages: &'a [ChatMessage],
        params: &'a GenerationParams,
        turn_index: usize,
    ) -> Self {
        CompletionRequest {
            messages,
            params,
            turn_index,
            request_id: uuid::Uuid::new_v4().to_string(),
        }
    }

    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("empty generation at turn {turn_index}")]
    EmptyGeneration { turn_index: usize },
    #[error("chat transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("chat server returned {status}: {message}")]
    Status { status: u16, message: String },
    #[error("malformed chat response: {0}")]
    Decode(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("script {path} line {line}: {message}")]
    Script {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl GatewayError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, GatewayError>;
}

/// Cuts `text` after the earliest occurrence of any stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()).map(|i| i + s.len()))
        .min()
        .map_or(text, |end| &text[..end])
}

fn check_request(req: &CompletionRequest<'_>) -> Result<(), GatewayError> {
    match req.messages.first() {
        None => Err(GatewayError::InvalidRequest("no messages".into())),
        Some(m) if m.role != Role::System => Err(GatewayError::InvalidRequest(
            "first message must be the system instruction".into(),
        )),
        _ if req.messages.iter().any(ChatMessage::is_empty) => Err(GatewayError::InvalidRequest(
            "message with neither content nor attachments".into(),
        )),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub enum RuleMatch {
    TurnIndex(usize),
    Pattern(Regex),
}

#[derive(Debug, Clone)]
pub struct ScriptedRule {
    pub matcher: RuleMatch,
    /// When set, the rule only fires for conversations whose first user
    /// message carries this image reference.
    pub scope: Option<String>,
    pub output: String,
}

impl ScriptedRule {
    pub fn at_turn(turn_index: usize, output: impl Into<String>) -> Self {
        ScriptedRule {
            matcher: RuleMatch::TurnIndex(turn_index),
            scope: None,
            output: output.into(),
        }
    }

    pub fn on_pattern(pattern: &str, output: impl Into<String>) -> Result<Self, regex::Error> {
        Ok(ScriptedRule {
            matcher: RuleMatch::Pattern(Regex::new(pattern)?),
            scope: None,
            output: output.into(),
        })
    }

    pub fn scoped(mut self, image_ref: impl Into<String>) -> Self {
        self.scope = Some(image_ref.into());
        self
    }

    fn matches(&self, req: &CompletionRequest<'_>) -> bool {
        if let Some(scope) = &self.scope {
            let first_image = req
                .messages
                .iter()
                .find(|m| m.role == Role::User)
                .and_then(|m| m.attachments.first());
            if first_image != Some(scope) {
                return false;
            }
        }
        match &self.matcher {
            RuleMatch::TurnIndex(i) => *i == req.turn_index,
            RuleMatch::Pattern(re) => re.is_match(req.last_user_content()),
        }
    }
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum MatchSpec {
    TurnIndex { turn_index: usize },
    Pattern { pattern: String },
}

#[derive(Deserialize, Serialize)]
struct RuleSpec {
    #[serde(rename = "match")]
    matcher: MatchSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scope: Option<String>,
    output: String,
}

impl ScriptedRule {
    /// One script line, as written by [`ScriptedBackend::to_jsonl`].
    pub fn to_json_line(&self) -> String {
        let matcher = match &self.matcher {
            RuleMatch::TurnIndex(i) => MatchSpec::TurnIndex { turn_index: *i },
            RuleMatch::Pattern(re) => MatchSpec::Pattern {
                pattern: re.as_str().to_string(),
            },
        };
        serde_json::to_string(&RuleSpec {
            matcher,
            scope: self.scope.clone(),
            output: self.output.clone(),
        })
        .expect("rule serializes")
    }
}

/// Replays outputs from an ordered rule list; the first matching rule wins.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    rules: Vec<ScriptedRule>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptedRule>) -> Self {
        ScriptedBackend { rules }
    }

    pub fn rules(&self) -> &[ScriptedRule] {
        &self.rules
    }

    pub fn to_jsonl(&self) -> String {
        self.rules.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

pub fn load_script(path: &Path) -> Result<ScriptedBackend, GatewayError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| GatewayError::Io {
        path: p.clone(),
        source,
    })?;
    let mut rules = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| GatewayError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| GatewayError::Script {
            path: p.clone(),
            line: i + 1,
            message,
        };
        let spec: RuleSpec = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let matcher = match spec.matcher {
            MatchSpec::TurnIndex { turn_index } => RuleMatch::TurnIndex(turn_index),
            MatchSpec::Pattern { pattern } => {
                RuleMatch::Pattern(Regex::new(&pattern).map_err(|e| bad(e.to_string()))?)
            }
        };
        rules.push(ScriptedRule {
            matcher,
            scope: spec.scope,
            output: spec.output,
        });
    }
    Ok(ScriptedBackend { rules })
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, GatewayError> {
        check_request(req)?;
        let rule =
            self.rules
                .iter()
                .find(|r| r.matches(req))
                .ok_or(GatewayError::EmptyGeneration {
                    turn_index: req.turn_index,
                })?;
        let text = truncate_at_stop(&rule.output, &req.params.stop_sequences);
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyGeneration {
                turn_index: req.turn_index,
            });
        }
        Ok(text.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct RemoteChatOptions {
    pub timeout: Duration,
    pub max_attempts: u32,
    pub api_key: Option<String>,
}

impl Default for RemoteChatOptions {
    fn default() -> Self {
        RemoteChatOptions {
            timeout: Duration::from_secs(120),
            max_attempts: 3,
            api_key: None,
        }
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: Role,
    content: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    images: Option<&'a [String]>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    stop: &'a [String],
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

pub struct RemoteChatBackend {
    endpoint: String,
    opts: RemoteChatOptions,
    client: reqwest::blocking::Client,
}

impl RemoteChatBackend {
    pub fn new(base_url: &str, opts: RemoteChatOptions) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(opts.timeout)
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(RemoteChatBackend {
            endpoint: format!("{}/chat", base_url.trim_end_matches('/')),
            opts,
            client,
        })
    }
}

impl ChatBackend for RemoteChatBackend {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, GatewayError> {
        check_request(req)?;
        let body = WireRequest {
            messages: req
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: m.role,
                    content: &m.content,
                    images: (!m.attachments.is_empty()).then_some(m.attachments.as_slice()),
                })
                .collect(),
            temperature: req.params.temperature,
            max_tokens: req.params.max_new_tokens,
            stop: &req.params.stop_sequences,
        };
        tracing::debug!(request_id = %req.request_id, turn = req.turn_index, "chat request");
        let attempts = self.opts.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            let mut http = self
                .client
                .post(&self.endpoint)
                .header("X-Request-Id", &req.request_id)
                .json(&body);
            if let Some(key) = &self.opts.api_key {
                http = http.bearer_auth(key);
            }
            match http.send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: WireResponse = resp
                        .json()
                        .map_err(|e| GatewayError::Decode(e.to_string()))?;
                    let text = truncate_at_stop(&parsed.text, &req.params.stop_sequences);
                    if text.trim().is_empty() {
                        return Err(GatewayError::EmptyGeneration {
                            turn_index: req.turn_index,
                        });
                    }
                    return Ok(text.to_string());
                }
                Ok(resp) => {
                    let status = resp.status();
                    let message = resp.text().unwrap_or_default();
                    if status.is_server_error() && attempt < attempts {
                        tracing::warn!(attempt, %status, "chat request failed, retrying");
                        last = message;
                        continue;
                    }
                    return Err(GatewayError::Status {
                        status: status.as_u16(),
                        message,
                    });
                }
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "chat transport error");
                    last = e.to_string();
                    if attempt < attempts {
                        std::thread::sleep(Duration::from_millis(100 * u64::from(attempt)));
                    }
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn msgs(user: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::system("u"), ChatMessage::user(user)]
    }

    #[test]
    fn agent_params_always_stop_at_closing_tags() {
        let p = GenerationParams::agent(0.0, 64).with_stops(["</answer>", "###"]);
        for tag in CLOSING_ACTION_TAGS {
            assert!(p.stop_sequences.iter().any(|s| s == tag));
        }
        assert_eq!(p.stop_sequences.len(), 4);
    }

    #[test]
    fn truncation_keeps_the_stop_sequence() {
        let stops = GenerationParams::default().stop_sequences;
        let t = "<think>a</think><text_search>q</text_search><answer>x</answer>";
        assert_eq!(
            truncate_at_stop(t, &stops),
            "<think>a</think><text_search>q</text_search>"
        );
        assert_eq!(truncate_at_stop("no stop here", &stops), "no stop here");
    }

    #[test]
    fn scripted_turn_index_rule() {
        let b = ScriptedBackend::new(vec![ScriptedRule::at_turn(
            0,
            "<think>t</think><answer>A</answer>",
        )]);
        let m = msgs("q");
        let p = GenerationParams::default();
        assert_eq!(
            b.complete(&CompletionRequest::new(&m, &p, 0)).unwrap(),
            "<think>t</think><answer>A</answer>"
        );
        match b.complete(&CompletionRequest::new(&m, &p, 1)) {
            Err(GatewayError::EmptyGeneration { turn_index }) => assert_eq!(turn_index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn first_matching_rule_wins() {
        let b = ScriptedBackend::new(vec![
            ScriptedRule::on_pattern("eel", "<think>1</think><answer>first</answer>").unwrap(),
            ScriptedRule::on_pattern("conger eel", "<think>2</think><answer>second</answer>")
                .unwrap(),
        ]);
        let m = msgs("what is a conger eel");
        let p = GenerationParams::default();
        assert!(b
            .complete(&CompletionRequest::new(&m, &p, 0))
            .unwrap()
            .contains("first"));
    }

    #[test]
    fn request_shape_is_checked() {
        let b = ScriptedBackend::new(vec![ScriptedRule::at_turn(0, "x")]);
        let p = GenerationParams::default();
        assert!(matches!(
            b.complete(&CompletionRequest::new(&[], &p, 0)),
            Err(GatewayError::InvalidRequest(_))
        ));
        let m = vec![ChatMessage::user("q")];
        assert!(matches!(
            b.complete(&CompletionRequest::new(&m, &p, 0)),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[test]
    fn script_file_round_trip_and_errors() {
        let b = ScriptedBackend::new(vec![
            ScriptedRule::at_turn(0, "<think>a</think><text_search>q</text_search>"),
            ScriptedRule::on_pattern(r"^\[x\]", "<think>b</think><answer>y</answer>").unwrap(),
        ]);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b.to_jsonl().as_bytes()).unwrap();
        let loaded = load_script(f.path()).unwrap();
        assert_eq!(loaded.to_jsonl(), b.to_jsonl());

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, "{}", b.rules()[0].to_json_line()).unwrap();
        writeln!(
            bad,
            "{{\"match\": {{\"pattern\": \"(\"}}, \"output\": \"x\"}}"
        )
        .unwrap();
        match load_script(bad.path()) {
            Err(GatewayError::Script { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_script_always_errors() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let b = load_script(f.path()).unwrap();
        let m = msgs("q");
        let p = GenerationParams::default();
        for t in 0..3 {
            assert!(matches!(
                b.complete(&CompletionRequest::new(&m, &p, t)),
                Err(GatewayError::EmptyGeneration { .. })
            ));
        }
    }

    fn stub_server(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        use std::io::Read;
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let h = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for resp in responses {
                let (mut sock, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = sock.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(hdr_end) = text.find("\r\n\r\n") {
                        let len = text[..hdr_end]
                            .lines()
                            .find_map(|l| {
                                l.to_ascii_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if buf.len() >= hdr_end + 4 + len {
                            seen.push(text);
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                sock.write_all(resp.as_bytes()).unwrap();
            }
            seen
        });
        (addr, h)
    }

    fn http(status: &str, body: &str) -> String {
        format!("HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}", body.len())
    }

    #[test]
    fn remote_backend_retries_5xx_and_truncates() {
        let (addr, h) = stub_server(vec![
            http("503 Service Unavailable", "busy"),
            http(
                "200 OK",
                r#"{"text":"<think>t</think><answer>A</answer> trailing"}"#,
            ),
        ]);
        let opts = RemoteChatOptions {
            api_key: Some("k1".into()),
            ..Default::default()
        };
        let b = RemoteChatBackend::new(&addr, opts).unwrap();
        let m = vec![
            ChatMessage::system("s"),
            ChatMessage::user("q").with_image("img/1.jpg"),
        ];
        let p = GenerationParams::default();
        let req = CompletionRequest::new(&m, &p, 0);
        assert_eq!(
            b.complete(&req).unwrap(),
            "<think>t</think><answer>A</answer>"
        );
        let seen = h.join().unwrap();
        assert_eq!(seen.len(), 2);
        let last = seen[1].to_ascii_lowercase();
        assert!(last.starts_with("post /chat"));
        assert!(last.contains(&format!("x-request-id: {}", req.request_id)));
        assert!(last.contains("authorization: bearer k1"));
        assert!(seen[1].contains(r#""images":["img/1.jpg"]"#));
        assert!(seen[1].contains(r#""stop":["</answer>""#));
    }

    #[test]
    fn remote_backend_client_error_is_not_retried() {
        let (addr, h) = stub_server(vec![http("400 Bad Request", "nope")]);
        let b = RemoteChatBackend::new(&addr, RemoteChatOptions::default()).unwrap();
        let m = msgs("q");
        let p = GenerationParams::default();
        match b.complete(&CompletionRequest::new(&m, &p, 0)) {
            Err(GatewayError::Status { status, .. }) => assert_eq!(status, 400),
            other => panic!("{other:?}"),
        }
        assert_eq!(h.join().unwrap().len(), 1);
    }

    #[test]
    fn scoped_rules_only_fire_for_their_image() {
        let b = ScriptedBackend::new(vec![
            ScriptedRule::at_turn(0, "<think>a</think><answer>one</answer>").scoped("img://1"),
            ScriptedRule::at_turn(0, "<think>b</think><answer>other</answer>"),
        ]);
        let p = GenerationParams::default();
        let m1 = vec![
            ChatMessage::system("s"),
            ChatMessage::user("q").with_image("img://1"),
        ];
        let m2 = vec![
            ChatMessage::system("s"),
            ChatMessage::user("q").with_image("img://2"),
        ];
        assert!(b
            .complete(&CompletionRequest::new(&m1, &p, 0))
            .unwrap()
            .contains("one"));
        assert!(b
            .complete(&CompletionRequest::new(&m2, &p, 0))
            .unwrap()
            .contains("other"));
        let reloaded = b.to_jsonl();
        assert!(reloaded
            .lines()
            .next()
            .unwrap()
            .contains(r#""scope":"img://1""#));
    }
}
