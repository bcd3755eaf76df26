//! Policy output parsing and the observation wire format.
//!
//! A turn is UTF-8 text made of tagged blocks:
//!
//! ```text
//! <think>free text</think>
//! <tool_call>{"name":"segment_points","args":{"points":[[5,5,1]]}}</tool_call>
//! <answer>{"items":[{"box":[0,0,4,4]}],"note":"..."}</answer>
//! ```
//!
//! An optional leading think block is followed by one or more tool calls or by
//! exactly one answer. Parsing is total: malformed input yields a
//! [`FormatVerdict`] rather than an error.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::geom::{BBox, PointPrompt, Polarity};
use crate::scene::{Rotation, ViewState};

const THINK: (&str, &str) = ("<think>", "</think>");
const TOOL: (&str, &str) = ("<tool_call>", "</tool_call>");
const ANSWER: (&str, &str) = ("<answer>", "</answer>");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    ZoomIn,
    Rotate,
    SegmentPoints,
    SegmentBox,
}

impl ToolKind {
    pub const ALL: [ToolKind; 4] = [
        ToolKind::ZoomIn,
        ToolKind::Rotate,
        ToolKind::SegmentPoints,
        ToolKind::SegmentBox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToolKind::ZoomIn => "zoom_in",
            ToolKind::Rotate => "rotate",
            ToolKind::SegmentPoints => "segment_points",
            ToolKind::SegmentBox => "segment_box",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn is_segmentation(self) -> bool {
        matches!(self, ToolKind::SegmentPoints | ToolKind::SegmentBox)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolCall {
    /// Crop box in current view coordinates.
    ZoomIn { crop: BBox },
    /// Clockwise degrees; only right angles pass validation.
    Rotate { angle: i64 },
    /// Points in current view coordinates.
    SegmentPoints { points: Vec<PointPrompt> },
    /// Box in current view coordinates.
    SegmentBox { bbox: BBox },
}

impl ToolCall {
    pub fn kind(&self) -> ToolKind {
        match self {
            ToolCall::ZoomIn { .. } => ToolKind::ZoomIn,
            ToolCall::Rotate { .. } => ToolKind::Rotate,
            ToolCall::SegmentPoints { .. } => ToolKind::SegmentPoints,
            ToolCall::SegmentBox { .. } => ToolKind::SegmentBox,
        }
    }

    pub fn to_json(&self) -> Value {
        let args = match self {
            ToolCall::ZoomIn { crop } => json!({ "crop": box_json(crop) }),
            ToolCall::Rotate { angle } => json!({ "angle": angle }),
            ToolCall::SegmentPoints { points } => json!({ "points": points_json(points) }),
            ToolCall::SegmentBox { bbox } => json!({ "box": box_json(bbox) }),
        };
        json!({ "name": self.kind().name(), "args": args })
    }
}

/// One final-answer item, in full-scene coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerItem {
    Points(Vec<PointPrompt>),
    Box(BBox),
}

impl AnswerItem {
    pub fn to_json(&self) -> Value {
        match self {
            AnswerItem::Points(p) => json!({ "points": points_json(p) }),
            AnswerItem::Box(b) => json!({ "box": box_json(b) }),
        }
    }

    pub fn from_json(v: &Value) -> Result<Self, String> {
        let o = v.as_object().filter(|o| o.len() == 1).ok_or("item must have exactly one key")?;
        if let Some(p) = o.get("points") {
            Ok(AnswerItem::Points(parse_points(p)?))
        } else if let Some(b) = o.get("box") {
            Ok(AnswerItem::Box(parse_box(b)?))
        } else {
            Err("item must be points or box".to_string())
        }
    }
}

impl Serialize for AnswerItem {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AnswerItem {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        AnswerItem::from_json(&Value::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerPayload {
    pub items: Vec<AnswerItem>,
    pub note: Option<String>,
}

impl AnswerPayload {
    pub fn to_json(&self) -> Value {
        let items: Vec<Value> = self.items.iter().map(AnswerItem::to_json).collect();
        let mut obj = Map::new();
        obj.insert("items".into(), Value::Array(items));
        if let Some(n) = &self.note {
            obj.insert("note".into(), Value::String(n.clone()));
        }
        Value::Object(obj)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnBody {
    ToolCalls(Vec<ToolCall>),
    Answer(AnswerPayload),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentTurn {
    /// Opaque reasoning text; must not contain `</think>`.
    pub think: String,
    pub body: TurnBody,
}

impl AgentTurn {
    pub fn tools(think: impl Into<String>, calls: Vec<ToolCall>) -> Self {
        Self {
            think: think.into(),
            body: TurnBody::ToolCalls(calls),
        }
    }

    pub fn answer(think: impl Into<String>, items: Vec<AnswerItem>) -> Self {
        Self {
            think: think.into(),
            body: TurnBody::Answer(AnswerPayload { items, note: None }),
        }
    }

    pub fn is_answer(&self) -> bool {
        matches!(self.body, TurnBody::Answer(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Unparsable,
    MissingBlock,
    UnknownTool,
    BadArgs,
    MultipleAnswers,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FormatVerdict {
    Ok,
    Violation { violation_kind: ViolationKind, detail: String },
}

impl FormatVerdict {
    fn violation(kind: ViolationKind, detail: impl Into<String>) -> Self {
        FormatVerdict::Violation {
            violation_kind: kind,
            detail: detail.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, FormatVerdict::Ok)
    }

    pub fn kind(&self) -> Option<ViolationKind> {
        match self {
            FormatVerdict::Ok => None,
            FormatVerdict::Violation { violation_kind, .. } => Some(*violation_kind),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    Think,
    Tool,
    Answer,
}

/// Parses raw policy output. Returns a turn iff the verdict is ok.
pub fn parse_turn(raw: &str) -> (Option<AgentTurn>, FormatVerdict) {
    match parse_inner(raw) {
        Ok(turn) => (Some(turn), FormatVerdict::Ok),
        Err(v) => (None, v),
    }
}

fn parse_inner(raw: &str) -> Result<AgentTurn, FormatVerdict> {
    use ViolationKind::*;
    let blocks = split_blocks(raw)?;

    let mut think = None;
    let mut tools = Vec::new();
    let mut answers = Vec::new();
    for (i, (kind, body)) in blocks.iter().enumerate() {
        match kind {
            BlockKind::Think if i == 0 => think = Some(body.to_string()),
            BlockKind::Think => {
                return Err(FormatVerdict::violation(Unparsable, "think block must come first and only once"))
            }
            BlockKind::Tool => tools.push(parse_json(body)?),
            BlockKind::Answer => answers.push(parse_json(body)?),
        }
    }

    match (tools.len(), answers.len()) {
        (0, 0) => return Err(FormatVerdict::violation(MissingBlock, "no tool_call or answer block")),
        (_, a) if a > 1 => return Err(FormatVerdict::violation(MultipleAnswers, "more than one answer block")),
        (t, 1) if t > 0 => return Err(FormatVerdict::violation(MultipleAnswers, "tool calls alongside an answer")),
        _ => {}
    }

    let think = think.unwrap_or_default();
    if let Some(a) = answers.pop() {
        let payload = parse_answer(&a).map_err(|d| FormatVerdict::violation(BadArgs, d))?;
        return Ok(AgentTurn {
            think,
            body: TurnBody::Answer(payload),
        });
    }

    // unknown names take precedence over malformed arguments anywhere in the turn
    let mut named = Vec::with_capacity(tools.len());
    for v in &tools {
        let name = v
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| FormatVerdict::violation(BadArgs, "tool call lacks a string name"))?;
        let kind = ToolKind::from_name(name)
            .ok_or_else(|| FormatVerdict::violation(UnknownTool, format!("unknown tool {name:?}")))?;
        named.push((kind, v));
    }
    let calls = named
        .into_iter()
        .map(|(kind, v)| parse_call(kind, v).map_err(|d| FormatVerdict::violation(BadArgs, d)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AgentTurn {
        think,
        body: TurnBody::ToolCalls(calls),
    })
}

fn split_blocks(raw: &str) -> Result<Vec<(BlockKind, &str)>, FormatVerdict> {
    let mut out = Vec::new();
    let mut rest = raw;
    loop {
        rest = rest.trim_start();
        if rest.is_empty() {
            return Ok(out);
        }
        let (kind, (open, close)) = if rest.starts_with(THINK.0) {
            (BlockKind::Think, THINK)
        } else if rest.starts_with(TOOL.0) {
            (BlockKind::Tool, TOOL)
        } else if rest.starts_with(ANSWER.0) {
            (BlockKind::Answer, ANSWER)
        } else {
            return Err(FormatVerdict::violation(ViolationKind::Unparsable, "text outside of blocks"));
        };
        let inner = &rest[open.len()..];
        let end = inner.find(close).ok_or_else(|| {
            FormatVerdict::violation(ViolationKind::Unparsable, format!("missing closing {close}"))
        })?;
        out.push((kind, &inner[..end]));
        rest = &inner[end + close.len()..];
    }
}

fn parse_json(body: &str) -> Result<Value, FormatVerdict> {
    serde_json::from_str(body).map_err(|e| FormatVerdict::violation(ViolationKind::Unparsable, format!("invalid JSON: {e}")))
}

fn parse_call(kind: ToolKind, v: &Value) -> Result<ToolCall, String> {
    let obj = v.as_object().ok_or("tool call must be an object")?;
    if let Some(k) = obj.keys().find(|k| *k != "name" && *k != "args") {
        return Err(format!("unexpected key {k:?}"));
    }
    let args = obj.get("args").and_then(Value::as_object).ok_or("missing args object")?;
    let only = |key: &str| -> Result<&Value, String> {
        if args.len() != 1 {
            return Err(format!("{} takes exactly the {key:?} argument", kind.name()));
        }
        args.get(key).ok_or_else(|| format!("missing {key:?}"))
    };
    Ok(match kind {
        ToolKind::ZoomIn => ToolCall::ZoomIn {
            crop: parse_box(only("crop")?)?,
        },
        ToolKind::Rotate => ToolCall::Rotate {
            angle: only("angle")?.as_i64().ok_or("angle must be an integer")?,
        },
        ToolKind::SegmentPoints => ToolCall::SegmentPoints {
            points: parse_points(only("points")?)?,
        },
        ToolKind::SegmentBox => ToolCall::SegmentBox {
            bbox: parse_box(only("box")?)?,
        },
    })
}

fn parse_answer(v: &Value) -> Result<AnswerPayload, String> {
    let obj = v.as_object().ok_or("answer must be an object")?;
    if let Some(k) = obj.keys().find(|k| *k != "items" && *k != "note") {
        return Err(format!("unexpected key {k:?}"));
    }
    let items = obj.get("items").and_then(Value::as_array).ok_or("missing items array")?;
    if items.is_empty() {
        return Err("answer has no items".into());
    }
    let items = items.iter().map(AnswerItem::from_json).collect::<Result<Vec<_>, String>>()?;
    let note = match obj.get("note") {
        None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err("note must be a string".into()),
    };
    Ok(AnswerPayload { items, note })
}

fn coord(v: &Value) -> Result<u32, String> {
    v.as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| format!("coordinate {v} is not a non-negative integer"))
}

fn parse_box(v: &Value) -> Result<BBox, String> {
    let a = v.as_array().filter(|a| a.len() == 4).ok_or("box must be [x0,y0,x1,y1]")?;
    let c = a.iter().map(coord).collect::<Result<Vec<_>, _>>()?;
    if c[0] >= c[2] || c[1] >= c[3] {
        return Err("box is degenerate".into());
    }
    Ok(BBox::new(c[0], c[1], c[2], c[3]))
}

fn parse_points(v: &Value) -> Result<Vec<PointPrompt>, String> {
    let a = v.as_array().ok_or("points must be an array")?;
    if a.is_empty() {
        return Err("points is empty".into());
    }
    let pts = a
        .iter()
        .map(|p| {
            let t = p.as_array().filter(|t| t.len() == 3).ok_or("point must be [x,y,polarity]")?;
            let polarity = match t[2].as_u64() {
                Some(1) => Polarity::Positive,
                Some(0) => Polarity::Negative,
                _ => return Err("polarity must be 0 or 1".to_string()),
            };
            Ok(PointPrompt {
                x: coord(&t[0])?,
                y: coord(&t[1])?,
                polarity,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    if !pts.iter().any(PointPrompt::is_positive) {
        return Err("no positive point".into());
    }
    Ok(pts)
}

fn box_json(b: &BBox) -> Value {
    json!([b.x0, b.y0, b.x1, b.y1])
}

fn points_json(points: &[PointPrompt]) -> Value {
    Value::Array(
        points
            .iter()
            .map(|p| json!([p.x, p.y, p.is_positive() as u8]))
            .collect(),
    )
}

/// Renders a turn in the wire format; [`parse_turn`] inverts it.
pub fn serialize_turn(turn: &AgentTurn) -> String {
    let mut out = format!("{}{}{}", THINK.0, turn.think, THINK.1);
    match &turn.body {
        TurnBody::ToolCalls(calls) => {
            for c in calls {
                out.push('\n');
                out.push_str(TOOL.0);
                out.push_str(&c.to_json().to_string());
                out.push_str(TOOL.1);
            }
        }
        TurnBody::Answer(a) => {
            out.push('\n');
            out.push_str(ANSWER.0);
            out.push_str(&a.to_json().to_string());
            out.push_str(ANSWER.1);
        }
    }
    out
}

/// Checks a parsed call against the current view.
pub fn validate_args(call: &ToolCall, view: &ViewState) -> Result<(), String> {
    let (w, h) = view.dims();
    let in_view = |b: &BBox| b.x1 <= w && b.y1 <= h;
    match call {
        ToolCall::ZoomIn { crop } if !in_view(crop) => Err(format!("crop {crop:?} exceeds the {w}x{h} view")),
        ToolCall::Rotate { angle } => Rotation::from_degrees(*angle).map(|_| ()).map_err(|e| e.to_string()),
        ToolCall::SegmentPoints { points } => match points.iter().find(|p| p.x >= w || p.y >= h) {
            Some(p) => Err(format!("point ({},{}) outside the {w}x{h} view", p.x, p.y)),
            None => Ok(()),
        },
        ToolCall::SegmentBox { bbox } if !in_view(bbox) => Err(format!("box {bbox:?} exceeds the {w}x{h} view")),
        _ => Ok(()),
    }
}

/// One overlay thumbnail as sent to a policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThumbPayload {
    pub candidate: usize,
    /// `[width, height]`
    pub size: [u32; 2],
    /// Row-major, one character per pixel: `0` background, `1`-`6` region
    /// palette, `7` candidate mask.
    pub pixels: String,
}

/// Observation content shipped to external policies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsPayload {
    pub question: String,
    pub turn_index: u32,
    pub budget_remaining: u32,
    pub context_digest: String,
    pub view: ViewState,
    /// `[width, height]` of the view.
    pub view_size: [u32; 2],
    /// Row-major region ids of the current view, one base-36 digit per pixel.
    pub view_image: String,
    pub history_pool: Vec<ThumbPayload>,
}

impl ObsPayload {
    /// Region id at a view pixel.
    pub fn view_label(&self, x: u32, y: u32) -> u32 {
        let c = self.view_image.as_bytes()[(y * self.view_size[0] + x) as usize] as char;
        c.to_digit(36).unwrap_or(0)
    }
}

/// Newline-delimited frames exchanged with an external policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Frame {
    Obs { payload: ObsPayload },
    Turn { raw: String },
    End,
}

/// One line of the wire protocol, without the trailing newline.
pub fn serialize_observation(obs: &ObsPayload) -> String {
    serde_json::to_string(&Frame::Obs { payload: obs.clone() }).expect("observation serializes")
}
