//! Wire format for the zoom-in tool call.
//!
//! A call is a JSON object wrapped in `<tool_call>` tags:
//!
//! ```text
//! <tool_call>{"name":"image_zoom_in_tool","arguments":{"image_idx":1,"bbox_2d":"<box>(0.1,0.2),(0.4,0.5)</box>","label":"red helmet"}}</tool_call>
//! ```
//!
//! The bbox string uses relative coordinates with `(x1,y1)` the top-left and
//! `(x2,y2)` the bottom-right corner. All three arguments are required and the
//! label is capped at a small number of whitespace-delimited tokens.

use serde_json::Value;
use thiserror::Error;

pub const TOOL_NAME: &str = "image_zoom_in_tool";
pub const OPEN_TAG: &str = "<tool_call>";
pub const CLOSE_TAG: &str = "</tool_call>";
pub const DEFAULT_LABEL_MAX_TOKENS: usize = 8;

/// Relative box with `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BboxError {
    #[error("bbox does not match <box>(x1,y1),(x2,y2)</box>: {0}")]
    Grammar(String),
    #[error("bbox coordinates invalid: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("no <tool_call>...</tool_call> block found")]
    MissingTags,
    #[error("more than one tool call in a single step")]
    MultipleToolCalls,
    #[error("malformed JSON in tool call: {0}")]
    MalformedJson(String),
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("missing required field {0:?}")]
    MissingField(&'static str),
    #[error("invalid field {field:?}: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error(transparent)]
    Bbox(#[from] BboxError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolCall {
    pub name: String,
    pub image_idx: u64,
    pub bbox: Bbox,
    pub label: String,
}

impl Bbox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BboxError> {
        let b = Bbox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), BboxError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![self.x1, self.y1, self.x2, self.y2].into_iter().all(in_unit) {
            return Err(BboxError::Validation(format!("coordinates outside [0,1]: {self:?}")));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(BboxError::Validation(format!("corners not increasing: {self:?}")));
        }
        Ok(())
    }

    /// Canonical `<box>(x1,y1),(x2,y2)</box>` string.
    pub fn to_box_string(&self) -> String {
        format!(
            "<box>({},{}),({},{})</box>",
            format_coord(self.x1),
            format_coord(self.y1),
            format_coord(self.x2),
            format_coord(self.y2)
        )
    }
}

/// Six decimal places, ties to even, trailing zeros trimmed down to one
/// fractional digit.
pub fn format_coord(v: f64) -> String {
    // `{:.6}` rounds the exact binary value half-to-even.
    let mut s = format!("{v:.6}");
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    if s == "-0.0" {
        s = "0.0".into();
    }
    s
}

/// Cursor over the bbox grammar; numbers are `-?[0-9]+(\.[0-9]+)?`.
struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn expect(&mut self, lit: &str) -> Result<(), BboxError> {
        if self.s[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(BboxError::Grammar(format!("expected {lit:?} at byte {}", self.pos)))
        }
    }

    fn digits(&mut self) -> usize {
        let n = self.s.as_bytes()[self.pos..].iter().take_while(|b| b.is_ascii_digit()).count();
        self.pos += n;
        n
    }

    fn number(&mut self) -> Result<f64, BboxError> {
        let start = self.pos;
        if self.s[self.pos..].starts_with('-') {
            self.pos += 1;
        }
        if self.digits() == 0 {
            return Err(BboxError::Grammar(format!("expected digits at byte {}", self.pos)));
        }
        if self.s[self.pos..].starts_with('.') {
            self.pos += 1;
            if self.digits() == 0 {
                return Err(BboxError::Grammar(format!("expected fraction digits at byte {}", self.pos)));
            }
        }
        self.s[start..self.pos]
            .parse()
            .map_err(|e| BboxError::Grammar(format!("bad number {:?}: {e}", &self.s[start..self.pos])))
    }
}

pub fn parse_bbox(text: &str) -> Result<Bbox, BboxError> {
    let mut c = Cursor { s: text, pos: 0 };
    c.expect("<box>(")?;
    let x1 = c.number()?;
    c.expect(",")?;
    let y1 = c.number()?;
    c.expect("),(")?;
    let x2 = c.number()?;
    c.expect(",")?;
    let y2 = c.number()?;
    c.expect(")</box>")?;
    if c.pos != text.len() {
        return Err(BboxError::Grammar(format!("trailing input at byte {}", c.pos)));
    }
    Bbox::new(x1, y1, x2, y2)
}

pub fn validate_label(label: &str, max_tokens: usize) -> Result<(), ProtocolError> {
    let tokens = label.split_whitespace().count();
    if tokens == 0 {
        return Err(ProtocolError::InvalidLabel("label is empty".into()));
    }
    if tokens > max_tokens {
        return Err(ProtocolError::InvalidLabel(format!(
            "label has {tokens} tokens, limit is {max_tokens}"
        )));
    }
    Ok(())
}

impl ToolCall {
    pub fn zoom(bbox: Bbox, label: impl Into<String>) -> Self {
        Self { name: TOOL_NAME.into(), image_idx: 1, bbox, label: label.into() }
    }

    pub fn validate(&self, label_max_tokens: usize) -> Result<(), ProtocolError> {
        if self.name != TOOL_NAME {
            return Err(ProtocolError::UnknownTool(self.name.clone()));
        }
        if self.image_idx < 1 {
            return Err(ProtocolError::InvalidField { field: "image_idx", reason: "must be >= 1".into() });
        }
        self.bbox.validate()?;
        validate_label(&self.label, label_max_tokens)
    }
}

/// Byte ranges of every `<tool_call>...</tool_call>` block, tags included.
/// An unclosed trailing block is reported as `MissingTags`.
pub fn extract_tool_call_blocks(text: &str) -> Vec<Result<&str, ProtocolError>> {
    let mut out = Vec::new();
    let mut offset = 0;
    while let Some(start) = text[offset..].find(OPEN_TAG) {
        let start = offset + start;
        let body_start = start + OPEN_TAG.len();
        match text[body_start..].find(CLOSE_TAG) {
            Some(end) => {
                let end = body_start + end + CLOSE_TAG.len();
                out.push(Ok(&text[start..end]));
                offset = end;
            }
            None => {
                out.push(Err(ProtocolError::MissingTags));
                break;
            }
        }
    }
    out
}

pub fn parse_tool_call(text: &str) -> Result<ToolCall, ProtocolError> {
    parse_tool_call_with_limit(text, DEFAULT_LABEL_MAX_TOKENS)
}

pub fn parse_tool_call_with_limit(text: &str, label_max_tokens: usize) -> Result<ToolCall, ProtocolError> {
    let blocks = extract_tool_call_blocks(text);
    let block = match blocks.as_slice() {
        [] => return Err(ProtocolError::MissingTags),
        [one] => one.clone()?,
        _ => return Err(ProtocolError::MultipleToolCalls),
    };
    let body = block[OPEN_TAG.len()..block.len() - CLOSE_TAG.len()].trim();
    let value: Value =
        serde_json::from_str(body).map_err(|e| ProtocolError::MalformedJson(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ProtocolError::MalformedJson("tool call is not a JSON object".into()))?;

    let name = match obj.get("name") {
        None => return Err(ProtocolError::MissingField("name")),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ProtocolError::InvalidField { field: "name", reason: "not a string".into() }),
    };
    if name != TOOL_NAME {
        return Err(ProtocolError::UnknownTool(name));
    }
    let args = match obj.get("arguments") {
        None => return Err(ProtocolError::MissingField("arguments")),
        Some(Value::Object(m)) => m,
        Some(_) => {
            return Err(ProtocolError::InvalidField { field: "arguments", reason: "not an object".into() })
        }
    };

    let image_idx = match args.get("image_idx") {
        None => return Err(ProtocolError::MissingField("image_idx")),
        Some(v) => v.as_u64().filter(|&i| i >= 1).ok_or_else(|| ProtocolError::InvalidField {
            field: "image_idx",
            reason: format!("expected integer >= 1, got {v}"),
        })?,
    };
    let bbox = match args.get("bbox_2d") {
        None => return Err(ProtocolError::MissingField("bbox_2d")),
        Some(Value::String(s)) => parse_bbox(s)?,
        Some(_) => return Err(ProtocolError::InvalidField { field: "bbox_2d", reason: "not a string".into() }),
    };
    let label = match args.get("label") {
        None => return Err(ProtocolError::MissingField("label")),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ProtocolError::InvalidField { field: "label", reason: "not a string".into() }),
    };
    validate_label(&label, label_max_tokens)?;
    Ok(ToolCall { name, image_idx, bbox, label })
}

pub fn serialize_tool_call(tc: &ToolCall) -> Result<String, ProtocolError> {
    serialize_tool_call_with_limit(tc, DEFAULT_LABEL_MAX_TOKENS)
}

/// Canonical single-line form: fixed key order, no insignificant whitespace.
pub fn serialize_tool_call_with_limit(tc: &ToolCall, label_max_tokens: usize) -> Result<String, ProtocolError> {
    tc.validate(label_max_tokens)?;
    let name = serde_json::to_string(&tc.name).expect("string serialization");
    let bbox = serde_json::to_string(&tc.bbox.to_box_string()).expect("string serialization");
    // `<\/` keeps a label containing "</tool_call>" from closing the block.
    let label = serde_json::to_string(&tc.label).expect("string serialization").replace("</", "<\\/");
    Ok(format!(
        "{OPEN_TAG}{{\"name\":{name},\"arguments\":{{\"image_idx\":{},\"bbox_2d\":{bbox},\"label\":{label}}}}}{CLOSE_TAG}",
        tc.image_idx
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"<tool_call>{"name":"image_zoom_in_tool","arguments":{"image_idx":1,"bbox_2d":"<box>(0.1,0.2),(0.4,0.5)</box>","label":"red helmet"}}</tool_call>"#;

    #[test]
    fn parses_example_bbox() {
        assert_eq!(
            parse_bbox("<box>(0.1,0.2),(0.4,0.5)</box>").unwrap(),
            Bbox { x1: 0.1, y1: 0.2, x2: 0.4, y2: 0.5 }
        );
        assert_eq!(
            parse_bbox("<box>(0,0),(1,1)</box>").unwrap(),
            Bbox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 }
        );
    }

    #[test]
    fn bbox_error_kinds_are_distinct() {
        assert!(matches!(parse_bbox("<box>(0.5,0.5),(0.2,0.2)</box>"), Err(BboxError::Validation(_))));
        assert!(matches!(parse_bbox("<box>(0,0),(1.5,1)</box>"), Err(BboxError::Validation(_))));
        assert!(matches!(parse_bbox("<box>(-0.1,0),(1,1)</box>"), Err(BboxError::Validation(_))));
        assert!(matches!(parse_bbox("<box>(0, 0),(1,1)</box>"), Err(BboxError::Grammar(_))));
        assert!(matches!(parse_bbox("<box>(.5,0),(1,1)</box>"), Err(BboxError::Grammar(_))));
        assert!(matches!(parse_bbox("<box>(0,0),(1,1)</box> "), Err(BboxError::Grammar(_))));
        assert!(matches!(parse_bbox(""), Err(BboxError::Grammar(_))));
    }

    #[test]
    fn parses_example_tool_call() {
        let tc = parse_tool_call(EXAMPLE).unwrap();
        assert_eq!(tc.name, TOOL_NAME);
        assert_eq!(tc.image_idx, 1);
        assert_eq!(tc.bbox, Bbox { x1: 0.1, y1: 0.2, x2: 0.4, y2: 0.5 });
        assert_eq!(tc.label, "red helmet");
    }

    #[test]
    fn tolerates_multiline_body() {
        let text = "I should look closer.\n<tool_call>\n{\"name\": \"image_zoom_in_tool\", \"arguments\": {\"image_idx\": 2, \"bbox_2d\": \"<box>(0,0),(0.5,0.5)</box>\", \"label\": \"dog\"}}\n</tool_call>";
        let tc = parse_tool_call(text).unwrap();
        assert_eq!(tc.image_idx, 2);
        assert_eq!(tc.label, "dog");
    }

    #[test]
    fn classified_errors() {
        let no_label = EXAMPLE.replace(r#","label":"red helmet""#, "");
        assert_eq!(parse_tool_call(&no_label), Err(ProtocolError::MissingField("label")));
        let no_bbox = EXAMPLE.replace(r#""bbox_2d":"<box>(0.1,0.2),(0.4,0.5)</box>","#, "");
        assert_eq!(parse_tool_call(&no_bbox), Err(ProtocolError::MissingField("bbox_2d")));
        assert!(matches!(parse_tool_call("<tool_call>not json</tool_call>"), Err(ProtocolError::MalformedJson(_))));
        assert_eq!(parse_tool_call("no tags here"), Err(ProtocolError::MissingTags));
        assert_eq!(parse_tool_call("<tool_call>{}"), Err(ProtocolError::MissingTags));
        let other = EXAMPLE.replace("image_zoom_in_tool", "image_rotate_tool");
        assert_eq!(parse_tool_call(&other), Err(ProtocolError::UnknownTool("image_rotate_tool".into())));
        let zero_idx = EXAMPLE.replace(r#""image_idx":1"#, r#""image_idx":0"#);
        assert!(matches!(parse_tool_call(&zero_idx), Err(ProtocolError::InvalidField { field: "image_idx", .. })));
        let bad_box = EXAMPLE.replace("(0.4,0.5)", "(0.05,0.5)");
        assert!(matches!(parse_tool_call(&bad_box), Err(ProtocolError::Bbox(BboxError::Validation(_)))));
        let long = EXAMPLE.replace("red helmet", "a b c d e f g h i");
        assert!(matches!(parse_tool_call(&long), Err(ProtocolError::InvalidLabel(_))));
        let twice = format!("{EXAMPLE} then {EXAMPLE}");
        assert_eq!(parse_tool_call(&twice), Err(ProtocolError::MultipleToolCalls));
    }

    #[test]
    fn canonical_serialization() {
        let tc = parse_tool_call(EXAMPLE).unwrap();
        assert_eq!(serialize_tool_call(&tc).unwrap(), EXAMPLE);
    }

    #[test]
    fn refuses_invalid_calls() {
        let mut tc = parse_tool_call(EXAMPLE).unwrap();
        tc.label = String::new();
        assert!(matches!(serialize_tool_call(&tc), Err(ProtocolError::InvalidLabel(_))));
        tc.label = "ok".into();
        tc.bbox.x2 = 0.0;
        assert!(serialize_tool_call(&tc).is_err());
    }

    #[test]
    fn formatting_rounds_half_to_even() {
        // 1/128 = 0.0078125 is an exact binary tie at six decimals.
        assert_eq!(format_coord(0.0078125), "0.007812");
        assert_eq!(format_coord(0.125), "0.125");
        assert_eq!(format_coord(1.0), "1.0");
        assert_eq!(format_coord(0.0), "0.0");
        assert_eq!(format_coord(1.0 / 3.0), "0.333333");
    }

    #[test]
    fn label_with_closing_tag_round_trips() {
        let tc = ToolCall::zoom(Bbox::new(0.0, 0.0, 0.5, 0.5).unwrap(), "odd </tool_call> label");
        let s = serialize_tool_call(&tc).unwrap();
        assert_eq!(parse_tool_call(&s).unwrap(), tc);
    }

    #[test]
    fn extracts_blocks_from_transcripts() {
        let text = format!("thinking {EXAMPLE}\n<obs/>\nmore {EXAMPLE} <tool_call>open");
        let blocks = extract_tool_call_blocks(&text);
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks[0], Ok(EXAMPLE));
        assert_eq!(blocks[1], Ok(EXAMPLE));
        assert_eq!(blocks[2], Err(ProtocolError::MissingTags));
    }
}
