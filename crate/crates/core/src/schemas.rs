//! Structured replies demanded by the stage prompts.
//!
//! Parsing is split in two: [`extract_structured_block`] pulls the first
//! balanced JSON object out of free text, and the `parse_*` functions turn
//! that object into a typed reply. Range problems (scores outside `[0, 1]`,
//! upper-case tokens, over-long lists, the `audio_confidence` alias) are
//! repaired and reported as [`RepairNote`]s. Structural problems (missing
//! field, wrong type, wrong arity) are errors the caller should retry.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::geometry::RefinementOp;

pub const MAX_ROLE_TAGS: usize = 4;
pub const MAX_ANCHORS: usize = 5;
pub const MAX_AUDIO_SOURCES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    /// Image + audio localization.
    GenLoc,
    /// Audio-only classification.
    GenAud,
    /// Audio-only classification returning up to two sources (duet mode).
    GenAudMulti,
    /// Consistency analysis, sampled `n` times.
    Analysis,
    /// Anchor-only analysis used by the anchor-guided prompt variant.
    Anchors,
    Refine,
}

impl StageTag {
    pub const ALL: [StageTag; 6] = [
        StageTag::GenLoc,
        StageTag::GenAud,
        StageTag::GenAudMulti,
        StageTag::Analysis,
        StageTag::Anchors,
        StageTag::Refine,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StageTag::GenLoc => "gen_loc",
            StageTag::GenAud => "gen_aud",
            StageTag::GenAudMulti => "gen_aud_multi",
            StageTag::Analysis => "analysis",
            StageTag::Anchors => "anchors",
            StageTag::Refine => "refine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    pub fn needs_image(&self) -> bool {
        !matches!(self, StageTag::GenAud | StageTag::GenAudMulti)
    }
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("no balanced JSON object in reply")]
    NoStructuredBlock,
    #[error("malformed JSON object: {0}")]
    MalformedBlock(String),
    #[error("reply is not a JSON object")]
    NotAnObject,
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{field}` has wrong type, expected {expected}")]
    WrongType { field: String, expected: &'static str },
    #[error("field `{0}` is empty")]
    EmptyField(String),
}

pub type Result<T> = std::result::Result<T, SchemaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairRule {
    Clamped,
    Lowercased,
    Truncated,
    AliasField,
    MergedDuplicate,
    DroppedEmpty,
    SignNormalized,
    DroppedOps,
    UnwrappedList,
    /// Box coordinates pulled inside the image.
    ClampedToImage,
    /// Per-side movement limited to the refinement budget.
    ClippedDelta,
    /// Recentering shrank the box at an image edge.
    EdgeClamp,
    /// Refinement reply unusable; initial box kept.
    Fallback,
}

/// One normalization applied to a model reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairNote {
    pub field: String,
    pub original: Value,
    pub repaired: Value,
    pub rule: RepairRule,
}

impl RepairNote {
    pub fn new(field: impl Into<String>, original: Value, repaired: Value, rule: RepairRule) -> Self {
        Self {
            field: field.into(),
            original,
            repaired,
            rule,
        }
    }
}

/// Returns the first balanced `{...}` object in `raw`, parsed.
///
/// Braces inside JSON strings are ignored. Text before the first `{` and
/// after its matching `}` is discarded.
pub fn extract_structured_block(raw: &str) -> Result<Value> {
    let start = raw.find('{').ok_or(SchemaError::NoStructuredBlock)?;
    let bytes = raw.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &c) in bytes[start..].iter().enumerate() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    let block = &raw[start..=start + offset];
                    let value: Value = serde_json::from_str(block)
                        .map_err(|e| SchemaError::MalformedBlock(e.to_string()))?;
                    return Ok(value);
                }
            }
            _ => {}
        }
    }
    Err(SchemaError::NoStructuredBlock)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReply {
    pub bbox: [f64; 4],
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioReply {
    pub audio_class: String,
    #[serde(rename = "audio_confidence_score")]
    pub audio_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioMultiReply {
    pub sources: Vec<AudioReply>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorVote {
    pub anchor: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReply {
    pub av_consistency: f64,
    pub role_tags: Vec<String>,
    pub anchor_votes: Vec<AnchorVote>,
    pub keep: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorReply {
    pub anchor_votes: Vec<AnchorVote>,
}

/// The `ops` field of a refinement reply.
#[derive(Debug, Clone, PartialEq)]
pub enum OpsField {
    Absent,
    Parsed(RefinementOp),
    /// Present but not in the documented vocabulary; kept for audit.
    Unparseable(Value),
}

impl OpsField {
    pub fn op(&self) -> Option<RefinementOp> {
        match self {
            OpsField::Parsed(op) => Some(*op),
            _ => None,
        }
    }

    pub fn to_value(&self) -> Value {
        match self {
            OpsField::Absent => Value::Null,
            OpsField::Parsed(op) => op_to_value(op),
            OpsField::Unparseable(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementReply {
    pub bbox: [f64; 4],
    pub changed: bool,
    pub ops: OpsField,
    pub refined_description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Localization(LocalizationReply),
    Audio(AudioReply),
    AudioMulti(AudioMultiReply),
    Analysis(AnalysisReply),
    Anchors(AnchorReply),
    Refinement(RefinementReply),
}

impl Reply {
    /// Canonical serialized form, matching the prompts' output shapes.
    pub fn to_value(&self) -> Value {
        match self {
            Reply::Localization(r) => json!({"bbox": r.bbox, "description": r.description}),
            Reply::Audio(r) => audio_to_value(r),
            Reply::AudioMulti(r) => {
                json!({"sources": r.sources.iter().map(audio_to_value).collect::<Vec<_>>()})
            }
            Reply::Analysis(r) => json!({
                "av_consistency": r.av_consistency,
                "role_tags": r.role_tags,
                "anchor_votes": r.anchor_votes,
                "keep": r.keep,
            }),
            Reply::Anchors(r) => json!({"anchor_votes": r.anchor_votes}),
            Reply::Refinement(r) => json!({
                "bbox": r.bbox,
                "changed": r.changed,
                "ops": r.ops.to_value(),
                "refined_description": r.refined_description,
            }),
        }
    }
}

fn audio_to_value(r: &AudioReply) -> Value {
    json!({"audio_class": r.audio_class, "audio_confidence_score": r.audio_confidence})
}

pub fn op_to_value(op: &RefinementOp) -> Value {
    match *op {
        RefinementOp::Delta {
            dx,
            dy,
            d_l,
            d_r,
            d_t,
            d_b,
        } => json!({"op": "delta", "dx": dx, "dy": dy, "d_l": d_l, "d_r": d_r, "d_t": d_t, "d_b": d_b}),
        RefinementOp::ExpandShrink { a } if a >= 0.0 => json!({"op": "expand", "a": a}),
        RefinementOp::ExpandShrink { a } => json!({"op": "shrink", "a": -a}),
        RefinementOp::Recenter { cx, cy } => json!({"op": "recenter", "cx": cx, "cy": cy}),
    }
}

/// Typed parse of `value` according to `stage`, with repair notes.
pub fn parse_reply(stage: StageTag, value: &Value) -> Result<(Reply, Vec<RepairNote>)> {
    let mut notes = Vec::new();
    let reply = match stage {
        StageTag::GenLoc => Reply::Localization(parse_localization(value, &mut notes)?),
        StageTag::GenAud => Reply::Audio(parse_audio(value, "", &mut notes)?),
        StageTag::GenAudMulti => Reply::AudioMulti(parse_audio_multi(value, &mut notes)?),
        StageTag::Analysis => Reply::Analysis(parse_analysis(value, &mut notes)?),
        StageTag::Anchors => Reply::Anchors(AnchorReply {
            anchor_votes: parse_anchor_votes(object(value)?, &mut notes)?,
        }),
        StageTag::Refine => Reply::Refinement(parse_refinement(value, &mut notes)?),
    };
    Ok((reply, notes))
}

/// Extraction and typed parse in one step.
pub fn parse_text(stage: StageTag, raw: &str) -> Result<(Reply, Vec<RepairNote>)> {
    parse_reply(stage, &extract_structured_block(raw)?)
}

fn object(value: &Value) -> Result<&Map<String, Value>> {
    value.as_object().ok_or(SchemaError::NotAnObject)
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value> {
    match obj.get(name) {
        Some(Value::Null) | None => Err(SchemaError::MissingField(name.to_string())),
        Some(v) => Ok(v),
    }
}

fn wrong(field: &str, expected: &'static str) -> SchemaError {
    SchemaError::WrongType {
        field: field.to_string(),
        expected,
    }
}

fn number(v: &Value, name: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| wrong(name, "number"))
}

fn string<'a>(v: &'a Value, name: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| wrong(name, "string"))
}

fn bbox(obj: &Map<String, Value>) -> Result<[f64; 4]> {
    let arr = field(obj, "bbox")?
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| wrong("bbox", "array of four numbers"))?;
    let mut out = [0.0; 4];
    for (slot, v) in out.iter_mut().zip(arr) {
        *slot = number(v, "bbox")?;
    }
    Ok(out)
}

fn unit_score(raw: f64, path: &str, notes: &mut Vec<RepairNote>) -> f64 {
    let clamped = raw.clamp(0.0, 1.0);
    if clamped != raw {
        notes.push(RepairNote::new(path, json!(raw), json!(clamped), RepairRule::Clamped));
    }
    clamped
}

/// Trims and lowercases a token. Returns `None` for empty tokens.
fn token(raw: &str, path: &str, notes: &mut Vec<RepairNote>) -> Option<String> {
    let norm = raw.trim().to_lowercase();
    if norm.is_empty() {
        return None;
    }
    if norm != raw {
        notes.push(RepairNote::new(path, json!(raw), json!(norm), RepairRule::Lowercased));
    }
    Some(norm)
}

fn parse_localization(value: &Value, _notes: &mut [RepairNote]) -> Result<LocalizationReply> {
    let obj = object(value)?;
    Ok(LocalizationReply {
        bbox: bbox(obj)?,
        description: string(field(obj, "description")?, "description")?.to_string(),
    })
}

fn parse_audio(value: &Value, prefix: &str, notes: &mut Vec<RepairNote>) -> Result<AudioReply> {
    let obj = object(value)?;
    let class_path = format!("{prefix}audio_class");
    let raw_class = string(field(obj, "audio_class")?, &class_path)?;
    let audio_class = token(raw_class, &class_path, notes).ok_or(SchemaError::EmptyField(class_path))?;

    let conf_path = format!("{prefix}audio_confidence_score");
    let conf = match obj.get("audio_confidence_score").filter(|v| !v.is_null()) {
        Some(v) => number(v, &conf_path)?,
        None => {
            let alias = field(obj, "audio_confidence")
                .map_err(|_| SchemaError::MissingField(conf_path.clone()))?;
            let v = number(alias, &conf_path)?;
            notes.push(RepairNote::new(
                conf_path.clone(),
                json!("audio_confidence"),
                json!("audio_confidence_score"),
                RepairRule::AliasField,
            ));
            v
        }
    };
    Ok(AudioReply {
        audio_class,
        audio_confidence: unit_score(conf, &conf_path, notes),
    })
}

fn parse_audio_multi(value: &Value, notes: &mut Vec<RepairNote>) -> Result<AudioMultiReply> {
    let obj = object(value)?;
    let arr = field(obj, "sources")?
        .as_array()
        .ok_or_else(|| wrong("sources", "array"))?;
    let mut merged: Vec<AudioReply> = Vec::new();
    for (i, item) in arr.iter().enumerate() {
        let src = parse_audio(item, &format!("sources[{i}]."), notes)?;
        match merged.iter_mut().find(|m| m.audio_class == src.audio_class) {
            Some(existing) => {
                let best = existing.audio_confidence.max(src.audio_confidence);
                notes.push(RepairNote::new(
                    format!("sources[{i}]"),
                    json!(src.audio_class),
                    json!(best),
                    RepairRule::MergedDuplicate,
                ));
                existing.audio_confidence = best;
            }
            None => merged.push(src),
        }
    }
    if merged.is_empty() {
        return Err(SchemaError::EmptyField("sources".into()));
    }
    if merged.len() > MAX_AUDIO_SOURCES {
        let before = merged.len();
        let mut ranked: Vec<usize> = (0..merged.len()).collect();
        ranked.sort_by(|&a, &b| {
            merged[b]
                .audio_confidence
                .total_cmp(&merged[a].audio_confidence)
                .then_with(|| merged[a].audio_class.cmp(&merged[b].audio_class))
        });
        let keep: Vec<usize> = ranked[..MAX_AUDIO_SOURCES].to_vec();
        merged = merged
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, s)| s)
            .collect();
        notes.push(RepairNote::new("sources", json!(before), json!(MAX_AUDIO_SOURCES), RepairRule::Truncated));
    }
    Ok(AudioMultiReply { sources: merged })
}

fn parse_role_tags(obj: &Map<String, Value>, notes: &mut Vec<RepairNote>) -> Result<Vec<String>> {
    let arr = match obj.get("role_tags") {
        None | Some(Value::Null) => return Err(SchemaError::MissingField("role_tags".into())),
        Some(v) => v.as_array().ok_or_else(|| wrong("role_tags", "array of strings"))?,
    };
    let mut tags: Vec<String> = Vec::with_capacity(arr.len());
    for (i, v) in arr.iter().enumerate() {
        let path = format!("role_tags[{i}]");
        let raw = string(v, "role_tags")?;
        match token(raw, &path, notes) {
            None => notes.push(RepairNote::new(path, json!(raw), Value::Null, RepairRule::DroppedEmpty)),
            Some(t) if tags.contains(&t) => {
                notes.push(RepairNote::new(path, json!(t), Value::Null, RepairRule::MergedDuplicate))
            }
            Some(t) => tags.push(t),
        }
    }
    if tags.len() > MAX_ROLE_TAGS {
        notes.push(RepairNote::new(
            "role_tags",
            json!(tags),
            json!(tags[..MAX_ROLE_TAGS]),
            RepairRule::Truncated,
        ));
        tags.truncate(MAX_ROLE_TAGS);
    }
    Ok(tags)
}

fn parse_anchor_votes(obj: &Map<String, Value>, notes: &mut Vec<RepairNote>) -> Result<Vec<AnchorVote>> {
    let arr = match obj.get("anchor_votes") {
        None | Some(Value::Null) => return Err(SchemaError::MissingField("anchor_votes".into())),
        Some(v) => v.as_array().ok_or_else(|| wrong("anchor_votes", "array of objects"))?,
    };
    let mut votes: Vec<AnchorVote> = Vec::with_capacity(arr.len());
    for (i, v) in arr.iter().enumerate() {
        let path = format!("anchor_votes[{i}]");
        let o = v.as_object().ok_or_else(|| wrong("anchor_votes", "array of objects"))?;
        let raw_name = string(field(o, "anchor")?, "anchor_votes.anchor")?;
        let score = number(field(o, "score")?, "anchor_votes.score")?;
        let score = unit_score(score, &format!("{path}.score"), notes);
        let Some(name) = token(raw_name, &format!("{path}.anchor"), notes) else {
            notes.push(RepairNote::new(path, json!(raw_name), Value::Null, RepairRule::DroppedEmpty));
            continue;
        };
        match votes.iter_mut().find(|a| a.anchor == name) {
            Some(existing) => {
                let best = existing.score.max(score);
                notes.push(RepairNote::new(
                    path,
                    json!({"anchor": name, "score": score}),
                    json!({"anchor": existing.anchor, "score": best}),
                    RepairRule::MergedDuplicate,
                ));
                existing.score = best;
            }
            None => votes.push(AnchorVote { anchor: name, score }),
        }
    }
    if votes.len() > MAX_ANCHORS {
        let mut ranked: Vec<usize> = (0..votes.len()).collect();
        ranked.sort_by(|&a, &b| {
            votes[b]
                .score
                .total_cmp(&votes[a].score)
                .then_with(|| votes[a].anchor.cmp(&votes[b].anchor))
        });
        let dropped: Vec<usize> = ranked[MAX_ANCHORS..].to_vec();
        let original = serde_json::to_value(&votes).unwrap_or(Value::Null);
        votes = votes
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !dropped.contains(i))
            .map(|(_, v)| v)
            .collect();
        notes.push(RepairNote::new(
            "anchor_votes",
            original,
            serde_json::to_value(&votes).unwrap_or(Value::Null),
            RepairRule::Truncated,
        ));
    }
    Ok(votes)
}

fn parse_analysis(value: &Value, notes: &mut Vec<RepairNote>) -> Result<AnalysisReply> {
    let obj = object(value)?;
    let av = number(field(obj, "av_consistency")?, "av_consistency")?;
    let av_consistency = unit_score(av, "av_consistency", notes);
    let role_tags = parse_role_tags(obj, notes)?;
    let anchor_votes = parse_anchor_votes(obj, notes)?;
    let keep = field(obj, "keep")?.as_bool().ok_or_else(|| wrong("keep", "boolean"))?;
    Ok(AnalysisReply {
        av_consistency,
        role_tags,
        anchor_votes,
        keep,
    })
}

fn opt_number(obj: &Map<String, Value>, name: &str) -> Option<f64> {
    match obj.get(name) {
        None | Some(Value::Null) => Some(0.0),
        Some(v) => v.as_f64().filter(|x| x.is_finite()),
    }
}

fn req_number(obj: &Map<String, Value>, name: &str) -> Option<f64> {
    obj.get(name).and_then(Value::as_f64).filter(|x| x.is_finite())
}

/// Reads one op descriptor. Delta parameters default to zero when omitted.
fn parse_op(obj: &Map<String, Value>, notes: &mut Vec<RepairNote>) -> Option<RefinementOp> {
    let name = obj
        .get("op")
        .or_else(|| obj.get("type"))
        .and_then(Value::as_str)?
        .trim()
        .to_lowercase();
    match name.as_str() {
        "delta" => Some(RefinementOp::Delta {
            dx: opt_number(obj, "dx")?,
            dy: opt_number(obj, "dy")?,
            d_l: opt_number(obj, "d_l")?,
            d_r: opt_number(obj, "d_r")?,
            d_t: opt_number(obj, "d_t")?,
            d_b: opt_number(obj, "d_b")?,
        }),
        "expand" | "shrink" => {
            let raw = req_number(obj, "a")?;
            let a = if name == "expand" { raw.abs() } else { -raw.abs() };
            if raw < 0.0 {
                notes.push(RepairNote::new("ops.a", json!(raw), json!(raw.abs()), RepairRule::SignNormalized));
            }
            Some(RefinementOp::ExpandShrink { a })
        }
        "recenter" => Some(RefinementOp::Recenter {
            cx: req_number(obj, "cx")?,
            cy: req_number(obj, "cy")?,
        }),
        _ => None,
    }
}

fn parse_ops(value: Option<&Value>, notes: &mut Vec<RepairNote>) -> OpsField {
    let value = match value {
        None | Some(Value::Null) => return OpsField::Absent,
        Some(v) => v,
    };
    let single = match value {
        Value::Array(items) if items.len() == 1 => {
            notes.push(RepairNote::new("ops", value.clone(), items[0].clone(), RepairRule::UnwrappedList));
            &items[0]
        }
        other => other,
    };
    match single.as_object().and_then(|o| parse_op(o, notes)) {
        Some(op) => OpsField::Parsed(op),
        None => OpsField::Unparseable(value.clone()),
    }
}

fn parse_refinement(value: &Value, notes: &mut Vec<RepairNote>) -> Result<RefinementReply> {
    let obj = object(value)?;
    let bbox = bbox(obj)?;
    let changed = field(obj, "changed")?
        .as_bool()
        .ok_or_else(|| wrong("changed", "boolean"))?;
    let mut ops = parse_ops(obj.get("ops"), notes);
    if !changed && ops != OpsField::Absent {
        notes.push(RepairNote::new("ops", ops.to_value(), Value::Null, RepairRule::DroppedOps));
        ops = OpsField::Absent;
    }
    let refined_description = match obj.get("refined_description") {
        None | Some(Value::Null) => return Err(SchemaError::MissingField("refined_description".into())),
        Some(v) => string(v, "refined_description")?.to_string(),
    };
    Ok(RefinementReply {
        bbox,
        changed,
        ops,
        refined_description,
    })
}

/// Renders anchor votes in the canonical form the prompts receive.
pub fn anchors_canonical(votes: &[AnchorVote]) -> String {
    let items: Vec<Value> = votes
        .iter()
        .map(|v| json!({"anchor": v.anchor, "score": round4(v.score)}))
        .collect();
    Value::Array(items).to_string()
}

pub fn tags_canonical(tags: &[String]) -> String {
    serde_json::to_string(tags).unwrap_or_else(|_| "[]".into())
}

pub(crate) fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Counts of each repair rule, for reports.
pub fn tally(notes: &[RepairNote]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for n in notes {
        let key = serde_json::to_value(n.rule)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        *out.entry(key).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extraction_examples() {
        let v = extract_structured_block(r#"Sure! {"bbox":[10,20,110,220],"description":"a violin"}"#).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 2);
        let v = extract_structured_block(r#"{"a":1} trailing {"b":2}"#).unwrap();
        assert_eq!(v, json!({"a": 1}));
        assert_eq!(extract_structured_block("no braces here"), Err(SchemaError::NoStructuredBlock));
        assert_eq!(extract_structured_block("{\"a\": 1"), Err(SchemaError::NoStructuredBlock));
        assert!(matches!(extract_structured_block("{a: 1}"), Err(SchemaError::MalformedBlock(_))));
        // braces inside strings do not count
        let v = extract_structured_block(r#"```json {"d":"a } b {","x":1} ```"#).unwrap();
        assert_eq!(v, json!({"d": "a } b {", "x": 1}));
    }

    #[test]
    fn analysis_clamp_note() {
        let v = json!({"av_consistency": 1.3, "role_tags": [], "anchor_votes": [], "keep": true});
        let (r, notes) = parse_reply(StageTag::Analysis, &v).unwrap();
        let Reply::Analysis(a) = r else { panic!() };
        assert_eq!(a.av_consistency, 1.0);
        assert_eq!(notes.len(), 1);
        assert_eq!(notes[0].rule, RepairRule::Clamped);
    }

    #[test]
    fn anchor_truncation_drops_lowest() {
        let votes: Vec<Value> = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
            .iter()
            .enumerate()
            .map(|(i, s)| json!({"anchor": format!("a{i}"), "score": s}))
            .collect();
        let v = json!({"av_consistency": 0.5, "role_tags": [], "anchor_votes": votes, "keep": false});
        let (r, notes) = parse_reply(StageTag::Analysis, &v).unwrap();
        let Reply::Analysis(a) = r else { panic!() };
        assert_eq!(a.anchor_votes.len(), 5);
        assert!(a.anchor_votes.iter().all(|v| v.anchor != "a5"));
        assert!(notes.iter().any(|n| n.rule == RepairRule::Truncated));
    }

    #[test]
    fn truncation_ties_break_by_name() {
        let names = ["f", "e", "d", "c", "b", "a"];
        let votes: Vec<Value> = names.iter().map(|n| json!({"anchor": n, "score": 0.5})).collect();
        let v = json!({"anchor_votes": votes});
        let (Reply::Anchors(a), _) = parse_reply(StageTag::Anchors, &v).unwrap() else { panic!() };
        assert!(a.anchor_votes.iter().all(|v| v.anchor != "f"));
    }

    #[test]
    fn audio_lowercase_and_alias() {
        let v = json!({"audio_class": "Violin", "audio_confidence": 0.8});
        let (r, notes) = parse_reply(StageTag::GenAud, &v).unwrap();
        assert_eq!(
            r,
            Reply::Audio(AudioReply {
                audio_class: "violin".into(),
                audio_confidence: 0.8
            })
        );
        let rules: Vec<_> = notes.iter().map(|n| n.rule).collect();
        assert!(rules.contains(&RepairRule::Lowercased));
        assert!(rules.contains(&RepairRule::AliasField));
    }

    #[test]
    fn duplicate_anchor_merged_by_max() {
        let v = json!({"anchor_votes": [
            {"anchor": "Bow", "score": 0.3}, {"anchor": "bow", "score": 0.7}
        ]});
        let (Reply::Anchors(a), notes) = parse_reply(StageTag::Anchors, &v).unwrap() else { panic!() };
        assert_eq!(a.anchor_votes, vec![AnchorVote { anchor: "bow".into(), score: 0.7 }]);
        assert!(notes.iter().any(|n| n.rule == RepairRule::MergedDuplicate));
    }

    #[test]
    fn structural_errors() {
        let e = parse_reply(StageTag::GenLoc, &json!({"bbox": [1, 2, 3]}));
        assert!(matches!(e, Err(SchemaError::WrongType { .. })));
        let e = parse_reply(StageTag::GenLoc, &json!({"bbox": [1, 2, 3, 4]}));
        assert_eq!(e, Err(SchemaError::MissingField("description".into())));
        let e = parse_reply(StageTag::GenAud, &json!({"audio_class": "  ", "audio_confidence_score": 1}));
        assert!(matches!(e, Err(SchemaError::EmptyField(_))));
        let e = parse_reply(StageTag::Analysis, &json!({"av_consistency": "high"}));
        assert!(matches!(e, Err(SchemaError::WrongType { .. })));
        let e = parse_reply(StageTag::Analysis, &json!([1]));
        assert_eq!(e, Err(SchemaError::NotAnObject));
    }

    #[test]
    fn refinement_ops_vocabulary() {
        let v = json!({"bbox": [500, 500, 100, 100], "changed": true,
            "ops": {"op": "recenter", "cx": 112, "cy": 112}, "refined_description": "x"});
        let (Reply::Refinement(r), _) = parse_reply(StageTag::Refine, &v).unwrap() else { panic!() };
        assert_eq!(r.ops.op(), Some(RefinementOp::Recenter { cx: 112.0, cy: 112.0 }));

        let v = json!({"bbox": [1, 1, 5, 5], "changed": true,
            "ops": [{"op": "shrink", "a": 2}], "refined_description": "x"});
        let (Reply::Refinement(r), notes) = parse_reply(StageTag::Refine, &v).unwrap() else { panic!() };
        assert_eq!(r.ops.op(), Some(RefinementOp::ExpandShrink { a: -2.0 }));
        assert_eq!(notes[0].rule, RepairRule::UnwrappedList);

        let v = json!({"bbox": [1, 1, 5, 5], "changed": true,
            "ops": {"op": "delta", "dx": 3}, "refined_description": "x"});
        let (Reply::Refinement(r), _) = parse_reply(StageTag::Refine, &v).unwrap() else { panic!() };
        assert_eq!(
            r.ops.op(),
            Some(RefinementOp::Delta { dx: 3.0, dy: 0.0, d_l: 0.0, d_r: 0.0, d_t: 0.0, d_b: 0.0 })
        );

        let v = json!({"bbox": [1, 1, 5, 5], "changed": true,
            "ops": {"op": "teleport"}, "refined_description": "x"});
        let (Reply::Refinement(r), _) = parse_reply(StageTag::Refine, &v).unwrap() else { panic!() };
        assert!(matches!(r.ops, OpsField::Unparseable(_)));

        let v = json!({"bbox": [1, 1, 5, 5], "changed": false,
            "ops": {"op": "expand", "a": 1}, "refined_description": "x"});
        let (Reply::Refinement(r), notes) = parse_reply(StageTag::Refine, &v).unwrap() else { panic!() };
        assert_eq!(r.ops, OpsField::Absent);
        assert_eq!(notes[0].rule, RepairRule::DroppedOps);
    }

    #[test]
    fn multi_source_truncates_and_merges() {
        let v = json!({"sources": [
            {"audio_class": "violin", "audio_confidence_score": 0.9},
            {"audio_class": "Violin", "audio_confidence_score": 0.95},
            {"audio_class": "piano", "audio_confidence_score": 0.6},
            {"audio_class": "cello", "audio_confidence_score": 0.7},
        ]});
        let (Reply::AudioMulti(m), _) = parse_reply(StageTag::GenAudMulti, &v).unwrap() else { panic!() };
        let classes: Vec<_> = m.sources.iter().map(|s| s.audio_class.as_str()).collect();
        assert_eq!(classes, ["violin", "cello"]);
        assert_eq!(m.sources[0].audio_confidence, 0.95);
    }

    fn arb_analysis_value() -> impl Strategy<Value = Value> {
        let tag = "[A-Za-z_ ]{0,8}";
        (
            -1.0f64..2.0,
            prop::collection::vec(tag, 0..8),
            prop::collection::vec((tag, -0.5f64..1.5), 0..9),
            any::<bool>(),
        )
            .prop_map(|(av, tags, anchors, keep)| {
                let anchors: Vec<Value> =
                    anchors.into_iter().map(|(a, s)| json!({"anchor": a, "score": s})).collect();
                json!({"av_consistency": av, "role_tags": tags, "anchor_votes": anchors, "keep": keep})
            })
    }

    proptest! {
        #[test]
        fn analysis_bounds_and_idempotence(v in arb_analysis_value()) {
            let (reply, _) = parse_reply(StageTag::Analysis, &v).unwrap();
            let Reply::Analysis(a) = &reply else { unreachable!() };
            prop_assert!(a.role_tags.len() <= MAX_ROLE_TAGS);
            prop_assert!(a.anchor_votes.len() <= MAX_ANCHORS);
            prop_assert!((0.0..=1.0).contains(&a.av_consistency));
            prop_assert!(a.anchor_votes.iter().all(|v| (0.0..=1.0).contains(&v.score)));
            let (again, notes) = parse_reply(StageTag::Analysis, &reply.to_value()).unwrap();
            prop_assert_eq!(again, reply);
            prop_assert!(notes.is_empty());
        }

        #[test]
        fn prose_around_object_is_ignored(pre in "[^{}]{0,40}", post in "[^{}]{0,40}") {
            let obj = r#"{"bbox":[1,2,3,4],"description":"x {y}"}"#;
            let text = format!("{pre}{obj}{post}");
            prop_assert_eq!(extract_structured_block(&text).unwrap(),
                extract_structured_block(obj).unwrap());
        }
    }
}
