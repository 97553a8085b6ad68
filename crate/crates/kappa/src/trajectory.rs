//! The zoom-then-diagnose trajectory grammar.
//!
//! ```text
//! trajectory := think* tool_call think* answer
//! think      := "<think>" text "</think>"
//! tool_call  := "<tool_call>" {"bbox_2d":[int,int,int,int]} "</tool_call>"
//! answer     := "<answer>" {string: string, ...} "</answer>"
//! ```
//!
//! Whitespace between elements is skipped. Tags are case-sensitive and may not
//! appear inside another element's body.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::spatial::BBox;

const TAGS: [&str; 6] = [
    "<think>",
    "</think>",
    "<tool_call>",
    "</tool_call>",
    "<answer>",
    "</answer>",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseStatus {
    Valid,
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    /// As written; may be inverted or degenerate.
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerPayload {
    pub attributes: BTreeMap<String, String>,
}

impl AnswerPayload {
    pub fn single(key: &str, value: &str) -> Self {
        AnswerPayload {
            attributes: BTreeMap::from([(key.to_string(), value.to_string())]),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub raw_text: String,
    pub think_segments: Vec<String>,
    /// Number of think segments that precede the tool call.
    pub thinks_before_tool: usize,
    pub tool_call: Option<ToolCall>,
    pub answer: Option<AnswerPayload>,
    pub parse_status: ParseStatus,
}

impl Trajectory {
    fn malformed(raw: &str, reason: impl Into<String>) -> Self {
        Trajectory {
            raw_text: raw.to_string(),
            think_segments: Vec::new(),
            thinks_before_tool: 0,
            tool_call: None,
            answer: None,
            parse_status: ParseStatus::Malformed(reason.into()),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.parse_status == ParseStatus::Valid
    }

    /// Equality of everything except the raw text.
    pub fn same_structure(&self, other: &Trajectory) -> bool {
        self.think_segments == other.think_segments
            && self.thinks_before_tool == other.thinks_before_tool
            && self.tool_call == other.tool_call
            && self.answer == other.answer
            && self.parse_status == other.parse_status
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SerializeError {
    #[error("cannot serialize a malformed trajectory: {0}")]
    Malformed(String),
}

enum Element<'a> {
    Think(&'a str),
    ToolCall(&'a str),
    Answer(&'a str),
}

fn lex<'a>(raw: &'a str) -> Result<Vec<Element<'a>>, String> {
    let mut out = Vec::new();
    let mut rest = raw.trim_start();
    while !rest.is_empty() {
        let (open, close, kind): (&str, &str, fn(&'a str) -> Element<'a>) = if rest.starts_with("<think>") {
            ("<think>", "</think>", Element::Think)
        } else if rest.starts_with("<tool_call>") {
            ("<tool_call>", "</tool_call>", Element::ToolCall)
        } else if rest.starts_with("<answer>") {
            ("<answer>", "</answer>", Element::Answer)
        } else if let Some(t) = TAGS.iter().find(|t| rest.starts_with(*t)) {
            return Err(format!("unexpected {t}"));
        } else {
            return Err("stray text outside tags".into());
        };
        let body_start = &rest[open.len()..];
        let end = body_start
            .find(close)
            .ok_or_else(|| format!("unclosed {open}"))?;
        let body = &body_start[..end];
        if let Some(t) = TAGS.iter().find(|t| body.contains(*t)) {
            return Err(format!("nested {t} inside {open}"));
        }
        out.push(kind(body));
        rest = body_start[end + close.len()..].trim_start();
    }
    Ok(out)
}

fn parse_tool_call(body: &str) -> Result<ToolCall, String> {
    let v: Value = serde_json::from_str(body).map_err(|_| "tool_call body is not JSON".to_string())?;
    let obj = v.as_object().ok_or("tool_call body is not an object")?;
    if obj.keys().any(|k| k != "bbox_2d") {
        return Err("unexpected key in tool_call".into());
    }
    let arr = obj
        .get("bbox_2d")
        .ok_or("missing bbox_2d")?
        .as_array()
        .ok_or("bbox_2d is not an array")?;
    if arr.len() != 4 {
        return Err("bad bbox arity".into());
    }
    let mut c = [0i64; 4];
    for (slot, x) in c.iter_mut().zip(arr) {
        *slot = x.as_i64().ok_or("bbox coordinate is not an integer")?;
    }
    Ok(ToolCall { bbox: BBox::from(c) })
}

fn parse_answer(body: &str) -> Result<AnswerPayload, String> {
    let v: Value = serde_json::from_str(body).map_err(|_| "answer body is not JSON".to_string())?;
    let obj = v.as_object().ok_or("answer body is not an object")?;
    if obj.is_empty() {
        return Err("empty answer".into());
    }
    let mut attributes = BTreeMap::new();
    for (k, v) in obj {
        let s = v.as_str().ok_or("answer value is not a string")?;
        if k.is_empty() || s.is_empty() {
            return Err("empty answer key or value".into());
        }
        attributes.insert(k.clone(), s.to_string());
    }
    Ok(AnswerPayload { attributes })
}

/// Never fails; malformation is reported in `parse_status`.
pub fn parse_trajectory(raw: &str) -> Trajectory {
    let elements = match lex(raw) {
        Ok(e) => e,
        Err(reason) => return Trajectory::malformed(raw, reason),
    };
    let tools = elements.iter().filter(|e| matches!(e, Element::ToolCall(_))).count();
    let answers = elements.iter().filter(|e| matches!(e, Element::Answer(_))).count();
    match tools {
        0 => return Trajectory::malformed(raw, "missing tool_call"),
        1 => {}
        _ => return Trajectory::malformed(raw, "multiple tool_calls"),
    }
    match answers {
        0 => return Trajectory::malformed(raw, "missing answer"),
        1 => {}
        _ => return Trajectory::malformed(raw, "multiple answers"),
    }

    let mut thinks = Vec::new();
    let mut before = None;
    let mut tool = None;
    let mut answer = None;
    for e in &elements {
        if answer.is_some() {
            return Trajectory::malformed(raw, "content after answer");
        }
        match e {
            Element::Think(t) => thinks.push(t.to_string()),
            Element::ToolCall(body) => {
                before = Some(thinks.len());
                match parse_tool_call(body) {
                    Ok(tc) => tool = Some(tc),
                    Err(reason) => return Trajectory::malformed(raw, reason),
                }
            }
            Element::Answer(body) => {
                if tool.is_none() {
                    return Trajectory::malformed(raw, "answer before tool_call");
                }
                match parse_answer(body) {
                    Ok(a) => answer = Some(a),
                    Err(reason) => return Trajectory::malformed(raw, reason),
                }
            }
        }
    }
    Trajectory {
        raw_text: raw.to_string(),
        think_segments: thinks,
        thinks_before_tool: before.unwrap_or(0),
        tool_call: tool,
        answer,
        parse_status: ParseStatus::Valid,
    }
}

/// Byte-level entry point for untrusted input.
pub fn parse_bytes(raw: &[u8]) -> Trajectory {
    match std::str::from_utf8(raw) {
        Ok(s) => parse_trajectory(s),
        Err(_) => Trajectory::malformed(&String::from_utf8_lossy(raw), "invalid utf-8"),
    }
}

pub fn format_reward(t: &Trajectory) -> f64 {
    if t.is_valid() {
        1.0
    } else {
        0.0
    }
}

pub fn render_tool_call(b: &BBox) -> String {
    format!("<tool_call>{{\"bbox_2d\":[{},{},{},{}]}}</tool_call>", b.x1, b.y1, b.x2, b.y2)
}

pub fn render_answer(a: &AnswerPayload) -> String {
    // '<' only occurs inside JSON strings; escaping it keeps decoded tag text from closing the element
    let body = serde_json::to_string(&a.attributes)
        .expect("string map serializes")
        .replace('<', "\\u003c");
    format!("<answer>{body}</answer>")
}

pub fn serialize_trajectory(t: &Trajectory) -> Result<String, SerializeError> {
    if let ParseStatus::Malformed(r) = &t.parse_status {
        return Err(SerializeError::Malformed(r.clone()));
    }
    let (Some(tc), Some(ans)) = (&t.tool_call, &t.answer) else {
        return Err(SerializeError::Malformed("incomplete trajectory".into()));
    };
    let mut s = String::new();
    for (i, th) in t.think_segments.iter().enumerate() {
        if i == t.thinks_before_tool {
            s.push_str(&render_tool_call(&tc.bbox));
        }
        s.push_str("<think>");
        s.push_str(th);
        s.push_str("</think>");
    }
    if t.thinks_before_tool >= t.think_segments.len() {
        s.push_str(&render_tool_call(&tc.bbox));
    }
    s.push_str(&render_answer(ans));
    Ok(s)
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub case_id: String,
    pub rollout_idx: usize,
    pub raw: String,
    pub valid: bool,
    pub bbox: Option<BBox>,
    pub answer: Option<BTreeMap<String, String>>,
}

impl TrajectoryRecord {
    pub fn new(case_id: &str, rollout_idx: usize, t: &Trajectory) -> Self {
        TrajectoryRecord {
            case_id: case_id.to_string(),
            rollout_idx,
            raw: t.raw_text.clone(),
            valid: t.is_valid(),
            bbox: t.tool_call.map(|tc| tc.bbox),
            answer: t.answer.as_ref().map(|a| a.attributes.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"<think>The image shows a liver section. I will locate the lesion first.</think>
<tool_call>{"bbox_2d": [120, 88, 210, 170]}</tool_call>
<think>The cropped region is darker than the surrounding parenchyma with some internal signal.</think>
<answer>{"echo": "Hypoechoic"}</answer>"#;

    fn reason(t: &Trajectory) -> &str {
        match &t.parse_status {
            ParseStatus::Malformed(r) => r,
            ParseStatus::Valid => "valid",
        }
    }

    #[test]
    fn example_block_is_valid() {
        let t = parse_trajectory(EXAMPLE);
        assert!(t.is_valid(), "{:?}", t.parse_status);
        assert_eq!(t.tool_call.unwrap().bbox, BBox::new(120, 88, 210, 170));
        assert_eq!(t.answer.as_ref().unwrap().get("echo"), Some("Hypoechoic"));
        assert_eq!(t.think_segments.len(), 2);
        assert_eq!(t.thinks_before_tool, 1);
        assert_eq!(format_reward(&t), 1.0);
    }

    #[test]
    fn malformed_reasons() {
        let cases = [
            (r#"<think>a</think><answer>{"echo":"X"}</answer>"#, "missing tool_call"),
            (
                r#"<tool_call>{"bbox_2d":[0,0,1,1]}</tool_call><tool_call>{"bbox_2d":[0,0,1,1]}</tool_call><answer>{"a":"b"}</answer>"#,
                "multiple tool_calls",
            ),
            (r#"<tool_call>{"bbox_2d":[0,0,1]}</tool_call><answer>{"a":"b"}</answer>"#, "bad bbox arity"),
            (
                r#"<tool_call>{"bbox_2d":[0,0,1,1],"zoom":2}</tool_call><answer>{"a":"b"}</answer>"#,
                "unexpected key in tool_call",
            ),
            (r#"<tool_call>{"bbox_2d":[0,0,1,1]}</tool_call>"#, "missing answer"),
            (
                r#"<answer>{"a":"b"}</answer><tool_call>{"bbox_2d":[0,0,1,1]}</tool_call>"#,
                "answer before tool_call",
            ),
            (r#"<tool_call>{"bbox_2d":[0,0,1.5,1]}</tool_call><answer>{"a":"b"}</answer>"#, "bbox coordinate is not an integer"),
            (r#"<tool_call>{"bbox_2d":[0,0,1,1]}</tool_call><answer>{"a":{"b":"c"}}</answer>"#, "answer value is not a string"),
            (r#"<tool_call>{"bbox_2d":[0,0,1,1]}</tool_call><answer>{}</answer>"#, "empty answer"),
            (r#"<Think>x</Think><tool_call>{"bbox_2d":[0,0,1,1]}</tool_call><answer>{"a":"b"}</answer>"#, "stray text outside tags"),
            (r#"<think>x"#, "unclosed <think>"),
        ];
        for (raw, want) in cases {
            let t = parse_trajectory(raw);
            assert_eq!(reason(&t), want, "input: {raw}");
            assert_eq!(format_reward(&t), 0.0);
        }
    }

    #[test]
    fn whitespace_between_tags_is_ignored() {
        let a = parse_trajectory(r#"<tool_call>{"bbox_2d":[0,0,1,1]}</tool_call><answer>{"a":"b"}</answer>"#);
        let b = parse_trajectory("\n\t <tool_call>{\"bbox_2d\":[0,0,1,1]}</tool_call>\n\n<answer>{\"a\":\"b\"}</answer>  \n");
        assert!(a.is_valid() && b.is_valid());
        assert!(a.same_structure(&b));
    }

    #[test]
    fn empty_think_survives_round_trip() {
        let t = parse_trajectory(r#"<think></think><tool_call>{"bbox_2d":[1,2,3,4]}</tool_call><answer>{"echo":"Anechoic"}</answer>"#);
        let s = serialize_trajectory(&t).unwrap();
        assert!(s.contains("<think></think>"));
        assert!(parse_trajectory(&s).same_structure(&t));
    }

    #[test]
    fn example_round_trips() {
        let t = parse_trajectory(EXAMPLE);
        let s = serialize_trajectory(&t).unwrap();
        let u = parse_trajectory(&s);
        assert!(u.same_structure(&t));
        assert_eq!(serialize_trajectory(&u).unwrap(), s);
    }

    #[test]
    fn escaped_tag_inside_answer_round_trips() {
        let t = parse_trajectory(r#"<tool_call>{"bbox_2d":[0,0,1,1]}</tool_call><answer>{"a":"\u003c/answer>"}</answer>"#);
        assert!(t.is_valid());
        let s = serialize_trajectory(&t).unwrap();
        assert!(parse_trajectory(&s).same_structure(&t));
    }

    #[test]
    fn serialize_rejects_malformed() {
        let t = parse_trajectory("garbage");
        assert!(matches!(serialize_trajectory(&t), Err(SerializeError::Malformed(_))));
    }

    #[test]
    fn inverted_box_is_still_well_formed() {
        let t = parse_trajectory(r#"<tool_call>{"bbox_2d":[9,9,1,1]}</tool_call><answer>{"a":"b"}</answer>"#);
        assert!(t.is_valid());
    }

    #[test]
    fn invalid_utf8_is_malformed() {
        let t = parse_bytes(&[0xff, 0xfe, b'<']);
        assert_eq!(reason(&t), "invalid utf-8");
    }
}
