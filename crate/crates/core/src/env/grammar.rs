//! The turn grammar.
//!
//! ```text
//! turn    := WS "<think>" T "</think>" WS ( "<query>" T "</query>" | "<answer>" T "</answer>" ) WS
//! T       := any text that is non-empty after trimming and contains no tag marker
//! ```
//!
//! Tag markers are the opening and closing forms of `think`, `query`,
//! `answer` and `knowledge`.

use super::{ActionKind, AgentTurn};

pub const TAG_MARKERS: [&str; 8] = [
    "<think>",
    "</think>",
    "<query>",
    "</query>",
    "<answer>",
    "</answer>",
    "<knowledge>",
    "</knowledge>",
];

fn valid_content(s: &str) -> bool {
    !s.trim().is_empty() && !TAG_MARKERS.iter().any(|m| s.contains(m))
}

/// Strict recognizer. Returns `(think, Ok(query) | Err(answer))` untrimmed.
fn strict(text: &str) -> Option<(&str, Result<&str, &str>)> {
    let rest = text.trim_start().strip_prefix("<think>")?;
    let close = rest.find("</think>")?;
    let think = &rest[..close];
    let rest = rest[close + "</think>".len()..].trim_start();
    let (body, rest) = if let Some(r) = rest.strip_prefix("<query>") {
        let c = r.find("</query>")?;
        (Ok(&r[..c]), &r[c + "</query>".len()..])
    } else if let Some(r) = rest.strip_prefix("<answer>") {
        let c = r.find("</answer>")?;
        (Err(&r[..c]), &r[c + "</answer>".len()..])
    } else {
        return None;
    };
    if !rest.trim().is_empty() {
        return None;
    }
    let inner = match body {
        Ok(q) | Err(q) => q,
    };
    (valid_content(think) && valid_content(inner)).then_some((think, body))
}

/// First `<tag>` occurrence and its trimmed contents, ending at the matching
/// close tag, or at the next tag marker when unclosed.
fn capture(text: &str, tag: &str) -> Option<(usize, String)> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)?;
    let body = &text[start + open.len()..];
    let end = body.find(&close).unwrap_or_else(|| {
        TAG_MARKERS
            .iter()
            .filter_map(|m| body.find(m))
            .min()
            .unwrap_or(body.len())
    });
    let content = body[..end].trim();
    (!content.is_empty()).then(|| (start, content.to_string()))
}

pub fn parse_turn(text: &str) -> AgentTurn {
    if let Some((think, body)) = strict(text) {
        let think = think.trim().to_string();
        return match body {
            Ok(q) => AgentTurn {
                raw: text.to_string(),
                think,
                action_kind: ActionKind::QueryRetrieve,
                query: Some(q.trim().to_string()),
                retrieved: None,
                answer: None,
                well_formed: true,
                choice: None,
            },
            Err(a) => AgentTurn {
                raw: text.to_string(),
                think,
                action_kind: ActionKind::Answer,
                query: None,
                retrieved: None,
                answer: Some(a.trim().to_string()),
                well_formed: true,
                choice: None,
            },
        };
    }
    let think = capture(text, "think").map(|(_, t)| t).unwrap_or_default();
    let query = capture(text, "query");
    let answer = capture(text, "answer");
    let (action_kind, query, answer) = match (query, answer) {
        (Some((qp, q)), Some((ap, a))) => {
            if qp < ap {
                (ActionKind::QueryRetrieve, Some(q), None)
            } else {
                (ActionKind::Answer, None, Some(a))
            }
        }
        (Some((_, q)), None) => (ActionKind::QueryRetrieve, Some(q), None),
        (None, Some((_, a))) => (ActionKind::Answer, None, Some(a)),
        (None, None) => (ActionKind::NoAction, None, None),
    };
    AgentTurn {
        raw: text.to_string(),
        think,
        action_kind,
        query,
        retrieved: None,
        answer,
        well_formed: false,
        choice: None,
    }
}

pub fn serialize_query(think: &str, query: &str) -> String {
    format!("<think>{think}</think>\n<query>{query}</query>")
}

pub fn serialize_answer(think: &str, answer: &str) -> String {
    format!("<think>{think}</think>\n<answer>{answer}</answer>")
}

/// Canonical text of a turn's parsed fields.
pub fn serialize(turn: &AgentTurn) -> String {
    match turn.action_kind {
        ActionKind::QueryRetrieve => serialize_query(&turn.think, turn.query.as_deref().unwrap_or("")),
        ActionKind::Answer => serialize_answer(&turn.think, turn.answer.as_deref().unwrap_or("")),
        ActionKind::NoAction => format!("<think>{}</think>", turn.think),
    }
}
