//! Agent turn grammar.
//!
//! A turn is `<think>…</think>`, an optional `<caption>…</caption>`, then
//! exactly one action element (`<answer>`, `<text_search>` or
//! `<image_search>`), with nothing after the closing action tag:
//!
//! ```text
//! turn    ::= think caption? action
//! think   ::= "<think>" TEXT "</think>"
//! caption ::= "<caption>" TEXT "</caption>"
//! action  ::= "<answer>" TEXT "</answer>"
//!           | "<text_search>" TEXT "</text_search>"
//!           | "<image_search>" "image_path" "</image_search>"
//! ```
//!
//! Whitespace between elements is allowed. Inner text is trimmed. Tag names
//! are case-sensitive. The parser is total: it never panics and reports every
//! violation it finds.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const IMAGE_PLACEHOLDER: &str = "image_path";
pub const MAX_TURN_CHARS: usize = 65_536;
pub const CLOSING_ACTION_TAGS: [&str; 3] = ["</answer>", "</text_search>", "</image_search>"];

pub const NO_RESULTS: &str = "[no results]";
pub const TOOL_ERROR: &str = "[tool error]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Answer,
    TextSearch,
    ImageSearch,
}

impl ActionKind {
    pub fn tag(self) -> &'static str {
        match self {
            ActionKind::Answer => "answer",
            ActionKind::TextSearch => "text_search",
            ActionKind::ImageSearch => "image_search",
        }
    }

    pub fn from_tag(name: &str) -> Option<Self> {
        match name {
            "answer" => Some(ActionKind::Answer),
            "text_search" => Some(ActionKind::TextSearch),
            "image_search" => Some(ActionKind::ImageSearch),
            _ => None,
        }
    }

    pub fn is_tool(self) -> bool {
        !matches!(self, ActionKind::Answer)
    }
}

/// One accepted model turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub think: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub action: ActionKind,
    pub action_payload: String,
    pub raw: String,
}

impl TurnRecord {
    /// Builds a record whose `raw` is the canonical rendering
    /// (think, caption?, action, no separators).
    pub fn new(
        think: impl Into<String>,
        caption: Option<String>,
        action: ActionKind,
        payload: impl Into<String>,
    ) -> Self {
        let mut t = TurnRecord {
            think: think.into(),
            caption,
            action,
            action_payload: payload.into(),
            raw: String::new(),
        };
        t.raw = t.canonical();
        t
    }

    pub fn canonical(&self) -> String {
        let mut out = format!("<think>{}</think>", self.think);
        if let Some(c) = &self.caption {
            out.push_str(&format!("<caption>{c}</caption>"));
        }
        let tag = self.action.tag();
        out.push_str(&format!("<{tag}>{}</{tag}>", self.action_payload));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationCode {
    MissingThink,
    MultipleActions,
    NoAction,
    TrailingText,
    BadImagePayload,
    CaptionMisplaced,
    CaptionWithoutPriorImageSearch,
    UnknownTag,
    /// Unclosed opener, stray closer, or a repeated `<think>`/`<caption>`.
    MalformedTag,
    /// Input longer than [`MAX_TURN_CHARS`].
    TooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolViolation {
    pub code: ViolationCode,
    /// Character offsets `[start, end)` into the raw turn.
    pub span: (usize, usize),
    pub message: String,
}

impl std::fmt::Display for ProtocolViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:?} at {}..{}: {}",
            self.code, self.span.0, self.span.1, self.message
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    pub mode: ProtocolMode,
    /// Whether strict mode accepts a `<caption>` in a turn that ends in `<answer>`.
    pub allow_caption_before_answer: bool,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            mode: ProtocolMode::Strict,
            allow_caption_before_answer: false,
        }
    }
}

impl ProtocolOptions {
    pub fn strict() -> Self {
        Self::default()
    }

    pub fn lenient() -> Self {
        ProtocolOptions {
            mode: ProtocolMode::Lenient,
            ..Self::default()
        }
    }
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<(/?)([A-Za-z][A-Za-z0-9_]*)>").expect("static regex"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Known {
    Think,
    Caption,
    Action(ActionKind),
}

fn classify(name: &str) -> Option<Known> {
    match name {
        "think" => Some(Known::Think),
        "caption" => Some(Known::Caption),
        other => ActionKind::from_tag(other).map(Known::Action),
    }
}

struct Token<'a> {
    closing: bool,
    name: &'a str,
    start: usize,
    end: usize,
}

enum ItemKind {
    Element { inner: (usize, usize) },
    Unclosed,
    StrayClose,
}

struct Item<'a> {
    name: &'a str,
    kind: ItemKind,
    outer: (usize, usize),
}

// Violations tagged with whether lenient mode tolerates them. Lenient results
// are always a subset of strict results.
struct Found {
    code: ViolationCode,
    span: (usize, usize),
    message: String,
    lenient_ok: bool,
}

fn tokenize(raw: &str) -> Vec<Token<'_>> {
    tag_regex()
        .captures_iter(raw)
        .map(|c| {
            let m = c.get(0).expect("group 0");
            Token {
                closing: !c[1].is_empty(),
                name: c.get(2).expect("group 2").as_str(),
                start: m.start(),
                end: m.end(),
            }
        })
        .collect()
}

fn pair_items<'a>(tokens: &[Token<'a>]) -> Vec<Item<'a>> {
    let mut items = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        if t.closing {
            items.push(Item {
                name: t.name,
                kind: ItemKind::StrayClose,
                outer: (t.start, t.end),
            });
            i += 1;
            continue;
        }
        match tokens.get(i + 1) {
            Some(next) if next.closing && next.name == t.name => {
                items.push(Item {
                    name: t.name,
                    kind: ItemKind::Element {
                        inner: (t.end, next.start),
                    },
                    outer: (t.start, next.end),
                });
                i += 2;
            }
            _ => {
                items.push(Item {
                    name: t.name,
                    kind: ItemKind::Unclosed,
                    outer: (t.start, t.end),
                });
                i += 1;
            }
        }
    }
    items
}

fn byte_to_char_offsets(raw: &str, spans: &mut [Found]) {
    // Offsets are produced on char boundaries, so counting chars of the prefix is exact.
    for f in spans.iter_mut() {
        let s = raw[..f.span.0].chars().count();
        let e = s + raw[f.span.0..f.span.1].chars().count();
        f.span = (s, e);
    }
}

fn analyze(raw: &str) -> (Vec<Found>, Option<TurnRecord>) {
    let mut found = Vec::new();
    let n_chars = raw.chars().count();
    if n_chars > MAX_TURN_CHARS {
        let start = raw
            .char_indices()
            .nth(MAX_TURN_CHARS)
            .map(|(b, _)| b)
            .unwrap_or(raw.len());
        found.push(Found {
            code: ViolationCode::TooLong,
            span: (start, raw.len()),
            message: format!("turn has {n_chars} characters, limit is {MAX_TURN_CHARS}"),
            lenient_ok: false,
        });
        return (found, None);
    }

    let tokens = tokenize(raw);
    let items = pair_items(&tokens);

    // Stray text: anything not covered by an item.
    let mut cursor = 0;
    let mut gaps = Vec::new();
    for it in &items {
        if it.outer.0 > cursor {
            gaps.push((cursor, it.outer.0));
        }
        cursor = it.outer.1;
    }
    let tail = if cursor < raw.len() {
        Some((cursor, raw.len()))
    } else {
        None
    };
    let first_item_start = items.first().map(|i| i.outer.0).unwrap_or(raw.len());

    for &(s, e) in &gaps {
        let text = &raw[s..e];
        let blank = text.trim().is_empty();
        if s == 0 {
            found.push(Found {
                code: ViolationCode::MissingThink,
                span: (s, e),
                message: "output must start with <think>".into(),
                lenient_ok: blank,
            });
        } else if !blank {
            found.push(Found {
                code: ViolationCode::TrailingText,
                span: (s, e),
                message: "stray text outside tags".into(),
                lenient_ok: false,
            });
        }
    }
    if let Some((s, e)) = tail {
        let blank = raw[s..e].trim().is_empty();
        if items.is_empty() {
            // Entire input is untagged text; reported as missing think below.
            if !blank {
                found.push(Found {
                    code: ViolationCode::TrailingText,
                    span: (s, e),
                    message: "no tags found".into(),
                    lenient_ok: false,
                });
            }
        } else {
            found.push(Found {
                code: ViolationCode::TrailingText,
                span: (s, e),
                message: "nothing may follow the closing action tag".into(),
                lenient_ok: blank,
            });
        }
    }

    let mut think: Vec<(usize, &Item)> = Vec::new();
    let mut caption: Vec<(usize, &Item)> = Vec::new();
    let mut actions: Vec<(usize, &Item, ActionKind)> = Vec::new();
    let mut unclosed_actions = Vec::new();
    let mut first_known: Option<(usize, &Item)> = None;

    for (pos, it) in items.iter().enumerate() {
        let Some(kind) = classify(it.name) else {
            found.push(Found {
                code: ViolationCode::UnknownTag,
                span: it.outer,
                message: format!("tag <{}> is not part of the agent protocol", it.name),
                lenient_ok: true,
            });
            continue;
        };
        if first_known.is_none() {
            first_known = Some((pos, it));
        }
        match it.kind {
            ItemKind::Element { .. } => match kind {
                Known::Think => think.push((pos, it)),
                Known::Caption => caption.push((pos, it)),
                Known::Action(a) => actions.push((pos, it, a)),
            },
            ItemKind::Unclosed | ItemKind::StrayClose => {
                let what = if matches!(it.kind, ItemKind::Unclosed) {
                    format!("<{}> is not properly closed", it.name)
                } else {
                    format!("</{}> has no matching opening tag", it.name)
                };
                found.push(Found {
                    code: ViolationCode::MalformedTag,
                    span: it.outer,
                    message: what,
                    lenient_ok: false,
                });
                if let Known::Action(a) = kind {
                    unclosed_actions.push(a);
                }
            }
        }
    }

    match think.len() {
        0 => {
            let span = if first_item_start == 0 {
                (0, 0)
            } else {
                (0, first_item_start.min(raw.len()))
            };
            found.push(Found {
                code: ViolationCode::MissingThink,
                span,
                message: "no <think> block".into(),
                lenient_ok: false,
            });
        }
        1 => {
            if let Some((_, it)) = first_known {
                if it.name != "think" {
                    found.push(Found {
                        code: ViolationCode::MissingThink,
                        span: it.outer,
                        message: format!("<think> must come first, found <{}>", it.name),
                        lenient_ok: false,
                    });
                }
            }
        }
        _ => {
            for (_, it) in &think[1..] {
                found.push(Found {
                    code: ViolationCode::MalformedTag,
                    span: it.outer,
                    message: "<think> appears more than once".into(),
                    lenient_ok: false,
                });
            }
        }
    }

    match actions.len() {
        0 => found.push(Found {
            code: ViolationCode::NoAction,
            span: (raw.len(), raw.len()),
            message: if unclosed_actions.is_empty() {
                "turn must end with exactly one action tag".into()
            } else {
                "action tag is not properly closed".into()
            },
            lenient_ok: false,
        }),
        1 => {}
        _ => {
            for (_, it, _) in &actions[1..] {
                found.push(Found {
                    code: ViolationCode::MultipleActions,
                    span: it.outer,
                    message: "only one action tag is allowed per turn".into(),
                    lenient_ok: false,
                });
            }
        }
    }

    let think_pos = think.first().map(|(p, _)| *p);
    let action_pos = actions.first().map(|(p, _, _)| *p);

    for (i, (pos, it)) in caption.iter().enumerate() {
        if i > 0 {
            found.push(Found {
                code: ViolationCode::MalformedTag,
                span: it.outer,
                message: "<caption> appears more than once".into(),
                lenient_ok: false,
            });
            continue;
        }
        let after_think = think_pos.is_some_and(|t| *pos > t);
        let before_action = action_pos.is_none_or(|a| *pos < a);
        if !after_think || !before_action {
            found.push(Found {
                code: ViolationCode::CaptionMisplaced,
                span: it.outer,
                message: "<caption> must sit between </think> and the action tag".into(),
                lenient_ok: false,
            });
        }
    }

    // Known elements after the action.
    if let Some(ap) = action_pos {
        for it in items.iter().skip(ap + 1) {
            if it.name == "think" && matches!(it.kind, ItemKind::Element { .. }) {
                found.push(Found {
                    code: ViolationCode::TrailingText,
                    span: it.outer,
                    message: "nothing may follow the closing action tag".into(),
                    lenient_ok: false,
                });
            }
        }
    }

    if let Some((_, it, ActionKind::ImageSearch)) = actions.first() {
        if let ItemKind::Element { inner } = it.kind {
            if raw[inner.0..inner.1].trim() != IMAGE_PLACEHOLDER {
                found.push(Found {
                    code: ViolationCode::BadImagePayload,
                    span: inner,
                    message: format!("<image_search> content must be exactly {IMAGE_PLACEHOLDER}"),
                    lenient_ok: false,
                });
            }
        }
    }

    let record = match (think.first(), actions.first()) {
        (Some((_, t)), Some((_, a, kind))) => {
            let inner = |it: &Item| match it.kind {
                ItemKind::Element { inner } => raw[inner.0..inner.1].trim().to_string(),
                _ => String::new(),
            };
            Some(TurnRecord {
                think: inner(t),
                caption: caption.first().map(|(_, c)| inner(c)),
                action: *kind,
                action_payload: inner(a),
                raw: raw.to_string(),
            })
        }
        _ => None,
    };
    (found, record)
}

fn finish(raw: &str, mut found: Vec<Found>, mode: ProtocolMode) -> Vec<ProtocolViolation> {
    if mode == ProtocolMode::Lenient {
        for f in found
            .iter()
            .filter(|f| f.lenient_ok && f.code == ViolationCode::UnknownTag)
        {
            tracing::warn!(span = ?f.span, "{}", f.message);
        }
        found.retain(|f| !f.lenient_ok);
    }
    byte_to_char_offsets(raw, &mut found);
    let mut out: Vec<ProtocolViolation> = found
        .into_iter()
        .map(|f| ProtocolViolation {
            code: f.code,
            span: f.span,
            message: f.message,
        })
        .collect();
    out.sort_by(|a, b| a.span.cmp(&b.span).then(a.code.cmp(&b.code)));
    out.dedup_by(|a, b| a.code == b.code && a.span == b.span);
    out
}

/// Parses one turn under strict grammar.
pub fn parse_turn(raw: &str) -> Result<TurnRecord, Vec<ProtocolViolation>> {
    parse_turn_with(raw, ProtocolMode::Strict)
}

/// Parses one turn. Lenient mode tolerates surrounding whitespace and skips
/// unknown tags (with a warning); everything else is identical to strict.
pub fn parse_turn_with(
    raw: &str,
    mode: ProtocolMode,
) -> Result<TurnRecord, Vec<ProtocolViolation>> {
    let (found, record) = analyze(raw);
    let violations = finish(raw, found, mode);
    match record {
        Some(r) if violations.is_empty() => Ok(r),
        _ => Err(violations),
    }
}

/// Re-checks intra-turn grammar and, in strict mode, the contextual rules that
/// depend on earlier turns of the same trajectory.
pub fn validate_in_context(
    turn: &TurnRecord,
    history: &[TurnRecord],
    opts: ProtocolOptions,
) -> Vec<ProtocolViolation> {
    let mut out = match parse_turn_with(&turn.raw, opts.mode) {
        Ok(_) => Vec::new(),
        Err(v) => v,
    };
    if opts.mode == ProtocolMode::Lenient || turn.caption.is_none() {
        return out;
    }
    let span = caption_span(&turn.raw);
    if !history.iter().any(|t| t.action == ActionKind::ImageSearch) {
        out.push(ProtocolViolation {
            code: ViolationCode::CaptionWithoutPriorImageSearch,
            span,
            message: "<caption> is only allowed after an earlier <image_search>".into(),
        });
    }
    if turn.action == ActionKind::Answer && !opts.allow_caption_before_answer {
        out.push(ProtocolViolation {
            code: ViolationCode::CaptionMisplaced,
            span,
            message: "<caption> before <answer> is disabled".into(),
        });
    }
    out
}

fn caption_span(raw: &str) -> (usize, usize) {
    match (raw.find("<caption>"), raw.find("</caption>")) {
        (Some(s), Some(e)) if e >= s => {
            let e = e + "</caption>".len();
            let cs = raw[..s].chars().count();
            (cs, cs + raw[s..e].chars().count())
        }
        _ => (0, 0),
    }
}

/// Payload of the last Answer turn, if any.
pub fn extract_final_answer(turns: &[TurnRecord]) -> Option<String> {
    turns
        .iter()
        .rev()
        .find(|t| t.action == ActionKind::Answer)
        .map(|t| t.action_payload.clone())
}

/// One retrieved item as shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub article_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section_id: Option<String>,
    pub article_title: String,
    pub section_heading: String,
    pub text: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBlock {
    pub turn_index: usize,
    pub items: Vec<EvidenceItem>,
    pub rendered: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvidenceBlock {
    pub fn tool_error(turn_index: usize, message: impl Into<String>) -> Self {
        EvidenceBlock {
            turn_index,
            items: Vec::new(),
            rendered: format!("<evidence>\n{TOOL_ERROR}\n</evidence>"),
            error: Some(message.into()),
        }
    }
}

// Item lines must stay single-line and must not carry protocol tags, so that
// evidence boundaries and decision spans stay unambiguous.
fn sanitize_line(s: &str) -> String {
    let mut out = s.replace(['\n', '\r'], " ");
    for tag in [
        "evidence",
        "think",
        "caption",
        "answer",
        "text_search",
        "image_search",
    ] {
        out = out
            .replace(&format!("<{tag}>"), &format!("[{tag}]"))
            .replace(&format!("</{tag}>"), &format!("[/{tag}]"));
    }
    out
}

pub fn render_evidence(hits: Vec<EvidenceItem>, turn_index: usize) -> EvidenceBlock {
    let mut rendered = String::from("<evidence>\n");
    if hits.is_empty() {
        rendered.push_str(NO_RESULTS);
        rendered.push('\n');
    }
    for (i, h) in hits.iter().enumerate() {
        rendered.push_str(&format!(
            "[{}] {} — {}: {}\n",
            i + 1,
            sanitize_line(&h.article_title),
            sanitize_line(&h.section_heading),
            sanitize_line(&h.text)
        ));
    }
    rendered.push_str("</evidence>");
    EvidenceBlock {
        turn_index,
        items: hits,
        rendered,
        error: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes(raw: &str) -> Vec<ViolationCode> {
        parse_turn(raw)
            .unwrap_err()
            .into_iter()
            .map(|v| v.code)
            .collect()
    }

    fn hit(title: &str, heading: &str, text: &str, score: f64) -> EvidenceItem {
        EvidenceItem {
            article_id: title.to_lowercase(),
            section_id: Some("s0".into()),
            article_title: title.into(),
            section_heading: heading.into(),
            text: text.into(),
            score,
            rank: 1,
        }
    }

    #[test]
    fn minimal_answer_turn() {
        let t =
            parse_turn("<think>Eiffel Tower, I know this.</think><answer>France</answer>").unwrap();
        assert_eq!(t.think, "Eiffel Tower, I know this.");
        assert_eq!(t.caption, None);
        assert_eq!(t.action, ActionKind::Answer);
        assert_eq!(t.action_payload, "France");
    }

    #[test]
    fn image_search_placeholder() {
        let t =
            parse_turn("<think>need id</think><image_search>image_path</image_search>").unwrap();
        assert_eq!(t.action, ActionKind::ImageSearch);
        assert_eq!(t.action_payload, "image_path");
        assert_eq!(
            codes("<think>x</think><image_search>/tmp/a.jpg</image_search>"),
            vec![ViolationCode::BadImagePayload]
        );
    }

    #[test]
    fn missing_think() {
        assert_eq!(
            codes("<answer>France</answer>"),
            vec![ViolationCode::MissingThink]
        );
    }

    #[test]
    fn inner_text_is_trimmed_internal_whitespace_kept() {
        let t = parse_turn(
            "<think>\n  line one\n  line two \n</think>\n<text_search> Mont  Blanc </text_search>",
        )
        .unwrap();
        assert_eq!(t.think, "line one\n  line two");
        assert_eq!(t.action_payload, "Mont  Blanc");
    }

    #[test]
    fn trailing_text_rejected() {
        assert_eq!(
            codes("<think>a</think><answer>b</answer> ok"),
            vec![ViolationCode::TrailingText]
        );
        // Trailing whitespace only bothers strict mode.
        assert!(parse_turn("<think>a</think><answer>b</answer>\n").is_err());
        assert!(parse_turn_with(
            "<think>a</think><answer>b</answer>\n",
            ProtocolMode::Lenient
        )
        .is_ok());
    }

    #[test]
    fn multiple_and_missing_actions() {
        assert_eq!(
            codes("<think>a</think><text_search>q</text_search><answer>b</answer>"),
            vec![ViolationCode::MultipleActions]
        );
        assert_eq!(codes("<think>a</think>"), vec![ViolationCode::NoAction]);
    }

    #[test]
    fn unclosed_action_is_malformed_and_no_action() {
        let c = codes("<think>a</think><answer>France");
        assert!(c.contains(&ViolationCode::MalformedTag));
        assert!(c.contains(&ViolationCode::NoAction));
    }

    #[test]
    fn caption_position() {
        let t =
            parse_turn("<think>a</think><caption>red bird</caption><text_search>q</text_search>")
                .unwrap();
        assert_eq!(t.caption.as_deref(), Some("red bird"));
        let c = codes("<caption>x</caption><think>a</think><text_search>q</text_search>");
        assert!(c.contains(&ViolationCode::CaptionMisplaced));
        assert!(c.contains(&ViolationCode::MissingThink));
    }

    #[test]
    fn unknown_tag_strict_vs_lenient() {
        let raw = "<think>a</think><entity>Messi</entity><answer>b</answer>";
        assert_eq!(codes(raw), vec![ViolationCode::UnknownTag]);
        let t = parse_turn_with(raw, ProtocolMode::Lenient).unwrap();
        assert_eq!(t.action_payload, "b");
    }

    #[test]
    fn tags_are_case_sensitive() {
        let c = codes("<Think>a</Think><answer>b</answer>");
        assert!(c.contains(&ViolationCode::UnknownTag));
        assert!(c.contains(&ViolationCode::MissingThink));
    }

    #[test]
    fn too_long() {
        let raw = format!(
            "<think>{}</think><answer>a</answer>",
            "x".repeat(MAX_TURN_CHARS)
        );
        assert_eq!(codes(&raw), vec![ViolationCode::TooLong]);
    }

    #[test]
    fn spans_are_char_offsets() {
        let raw = "<think>é</think><answer>b</answer>ü";
        let v = parse_turn(raw).unwrap_err();
        assert_eq!(v[0].span, (34, 35));
        assert_eq!(raw.chars().count(), 35);
    }

    #[test]
    fn contextual_caption_rules() {
        let img = parse_turn("<think>?</think><image_search>image_path</image_search>").unwrap();
        let cap = parse_turn("<think>a</think><caption>bird</caption><text_search>q</text_search>")
            .unwrap();
        assert!(
            validate_in_context(&cap, std::slice::from_ref(&img), ProtocolOptions::strict())
                .is_empty()
        );
        let v = validate_in_context(&cap, &[], ProtocolOptions::strict());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].code, ViolationCode::CaptionWithoutPriorImageSearch);
        assert!(validate_in_context(&cap, &[], ProtocolOptions::lenient()).is_empty());
    }

    #[test]
    fn caption_before_answer_is_configurable() {
        let img = parse_turn("<think>?</think><image_search>image_path</image_search>").unwrap();
        let cap = parse_turn("<think>a</think><caption>bird</caption><answer>x</answer>").unwrap();
        let v = validate_in_context(&cap, std::slice::from_ref(&img), ProtocolOptions::strict());
        assert_eq!(
            v.iter().map(|v| v.code).collect::<Vec<_>>(),
            vec![ViolationCode::CaptionMisplaced]
        );
        let opts = ProtocolOptions {
            allow_caption_before_answer: true,
            ..ProtocolOptions::strict()
        };
        assert!(validate_in_context(&cap, &[img], opts).is_empty());
    }

    #[test]
    fn final_answer_extraction() {
        let a = TurnRecord::new("t", None, ActionKind::Answer, "Congridae");
        let b = TurnRecord::new("t", None, ActionKind::Answer, "Anguilla");
        let s = TurnRecord::new("t", None, ActionKind::TextSearch, "q");
        assert_eq!(
            extract_final_answer(&[s.clone(), a.clone()]).as_deref(),
            Some("Congridae")
        );
        assert_eq!(extract_final_answer(std::slice::from_ref(&s)), None);
        assert_eq!(
            extract_final_answer(&[a.clone(), b.clone()]).as_deref(),
            Some("Anguilla")
        );
        assert_eq!(extract_final_answer(&[b, a]).as_deref(), Some("Congridae"));
    }

    #[test]
    fn evidence_single_hit() {
        let b = render_evidence(
            vec![hit("Mont Blanc", "Geography", "Rises to 4,808 m.", 0.9)],
            0,
        );
        assert_eq!(
            b.rendered,
            "<evidence>\n[1] Mont Blanc — Geography: Rises to 4,808 m.\n</evidence>"
        );
    }

    #[test]
    fn evidence_empty_sentinel() {
        assert_eq!(
            render_evidence(vec![], 2).rendered,
            "<evidence>\n[no results]\n</evidence>"
        );
    }

    #[test]
    fn evidence_three_hits_against_reference_renderer() {
        let hits = vec![
            hit("A", "h1", "one", 0.9),
            hit("B", "h2", "two", 0.5),
            hit("C", "h3", "three", 0.1),
        ];
        // Reference: assembled line by line, independent of the renderer loop.
        let expected = [
            "<evidence>",
            "[1] A — h1: one",
            "[2] B — h2: two",
            "[3] C — h3: three",
            "</evidence>",
        ]
        .join("\n");
        assert_eq!(render_evidence(hits, 1).rendered, expected);
    }

    #[test]
    fn evidence_lines_stay_single_line() {
        let b = render_evidence(vec![hit("T", "H", "a\nb</evidence>c", 0.3)], 0);
        assert_eq!(b.rendered.lines().count(), 3);
        assert_eq!(b.rendered.matches("</evidence>").count(), 1);
    }

    #[test]
    fn evidence_neutralizes_protocol_tags() {
        let b = render_evidence(
            vec![hit(
                "T",
                "H",
                "say <answer>x</answer> and <think>y</think>",
                0.3,
            )],
            0,
        );
        assert!(b.rendered.contains("[answer]x[/answer]"));
        assert!(!b.rendered.contains("<think>"));
    }
}
