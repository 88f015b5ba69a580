//! Stage prompt templates and their rendering.
//!
//! Templates are plain text with `{name}` placeholders. The built-in set is
//! compiled in from `prompts/`; a directory laid out the same way
//! (`<dir>/<variant>/<template>.txt`) can override individual files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, ImageDims};
use crate::schemas::{anchors_canonical, round4, tags_canonical, AnchorVote};

/// Every placeholder a template may use.
pub const BINDINGS: [&str; 10] = [
    "W",
    "H",
    "previous_bbox",
    "audio_class",
    "audio_confidence_score",
    "av_consistency",
    "role_tags",
    "anchor_votes",
    "keep",
    "MAX_DELTA_PX",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("template {template} needs binding `{name}`")]
    MissingBinding { template: String, name: String },
    #[error("template {template} does not use binding `{name}`")]
    ExtraBinding { template: String, name: String },
    #[error("unknown prompt variant `{0}`")]
    UnknownVariant(String),
    #[error("variant {variant} has no template {template}")]
    NoTemplate { variant: String, template: String },
    #[error("template {template} uses undocumented placeholder `{name}`")]
    UndocumentedPlaceholder { template: String, name: String },
    #[error("reading template override {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, PromptError>;

/// Prompt-level pipeline variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full generation, sampled analysis with consensus, gated refinement.
    Gar,
    /// Box only, then a conservative self-check refinement.
    Method1,
    /// Box plus audio class, class-conditioned refinement.
    Method2,
    /// Box, audio class and anchors, anchor-guided refinement.
    Method3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Gar, Variant::Method1, Variant::Method2, Variant::Method3];

    pub fn key(&self) -> &'static str {
        match self {
            Variant::Gar => "gar",
            Variant::Method1 => "method1",
            Variant::Method2 => "method2",
            Variant::Method3 => "method3",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| PromptError::UnknownVariant(s.to_string()))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    GenLoc,
    /// Localization conditioned on one audio class (duet mode).
    GenLocClass,
    GenAud,
    GenAudMulti,
    Analysis,
    Anchors,
    Refine,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::GenLoc,
        TemplateId::GenLocClass,
        TemplateId::GenAud,
        TemplateId::GenAudMulti,
        TemplateId::Analysis,
        TemplateId::Anchors,
        TemplateId::Refine,
    ];

    pub fn file_name(&self) -> &'static str {
        match self {
            TemplateId::GenLoc => "gen_loc.txt",
            TemplateId::GenLocClass => "gen_loc_class.txt",
            TemplateId::GenAud => "gen_aud.txt",
            TemplateId::GenAudMulti => "gen_aud_multi.txt",
            TemplateId::Analysis => "analysis.txt",
            TemplateId::Anchors => "anchors.txt",
            TemplateId::Refine => "refine.txt",
        }
    }
}

fn builtin(variant: Variant, id: TemplateId) -> Option<&'static str> {
    use TemplateId::*;
    use Variant::*;
    Some(match (variant, id) {
        (Method1, Refine) => include_str!("../prompts/method1/refine.txt"),
        (Method2, Refine) => include_str!("../prompts/method2/refine.txt"),
        (Method3, Refine) => include_str!("../prompts/method3/refine.txt"),
        (Method3, Anchors) => include_str!("../prompts/method3/anchors.txt"),
        (_, GenLoc) => include_str!("../prompts/gar/gen_loc.txt"),
        (_, GenLocClass) => include_str!("../prompts/gar/gen_loc_class.txt"),
        (_, GenAud) => include_str!("../prompts/gar/gen_aud.txt"),
        (_, GenAudMulti) => include_str!("../prompts/gar/gen_aud_multi.txt"),
        (Gar, Analysis) => include_str!("../prompts/gar/analysis.txt"),
        (Gar, Refine) => include_str!("../prompts/gar/refine.txt"),
        _ => return None,
    })
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static regex"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub name: String,
    pub text: String,
    placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn new(id: TemplateId, name: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let placeholders = placeholder_re()
            .captures_iter(&text)
            .map(|c| c[1].to_string())
            .collect();
        Self {
            id,
            name: name.into(),
            text,
            placeholders,
        }
    }

    pub fn placeholders(&self) -> &BTreeSet<String> {
        &self.placeholders
    }

    /// Fails on a placeholder outside [`BINDINGS`].
    pub fn lint(&self) -> Result<()> {
        match self.placeholders.iter().find(|p| !BINDINGS.contains(&p.as_str())) {
            Some(p) => Err(PromptError::UndocumentedPlaceholder {
                template: self.name.clone(),
                name: p.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Substitutes every placeholder. In strict mode a binding the
    /// template does not use is also an error.
    pub fn render(&self, ctx: &PromptContext, strict: bool) -> Result<String> {
        if let Some(name) = self.placeholders.iter().find(|p| !ctx.values.contains_key(*p)) {
            return Err(PromptError::MissingBinding {
                template: self.name.clone(),
                name: name.clone(),
            });
        }
        if strict {
            if let Some(name) = ctx.values.keys().find(|k| !self.placeholders.contains(*k)) {
                return Err(PromptError::ExtraBinding {
                    template: self.name.clone(),
                    name: name.clone(),
                });
            }
        }
        Ok(placeholder_re()
            .replace_all(&self.text, |c: &regex::Captures<'_>| ctx.values[&c[1]].clone())
            .into_owned())
    }
}

/// Named values bound into a template, already in rendered form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptContext {
    values: BTreeMap<String, String>,
}

impl PromptContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &str, value: impl Into<String>) -> Self {
        self.values.insert(name.to_string(), value.into());
        self
    }

    pub fn dims(self, dims: ImageDims) -> Self {
        self.set("W", dims.width.to_string()).set("H", dims.height.to_string())
    }

    /// Four integers, as the localization prompt requests.
    pub fn previous_bbox(self, b: &BoundingBox) -> Self {
        let [x1, y1, x2, y2] = b.rounded();
        self.set("previous_bbox", format!("[{x1}, {y1}, {x2}, {y2}]"))
    }

    pub fn audio(self, class: &str, confidence: f64) -> Self {
        self.set("audio_class", class)
            .set("audio_confidence_score", fmt_score(confidence))
    }

    pub fn av_consistency(self, v: f64) -> Self {
        self.set("av_consistency", fmt_score(v))
    }

    pub fn role_tags(self, tags: &[String]) -> Self {
        self.set("role_tags", tags_canonical(tags))
    }

    pub fn anchor_votes(self, votes: &[AnchorVote]) -> Self {
        self.set("anchor_votes", anchors_canonical(votes))
    }

    pub fn keep(self, keep: bool) -> Self {
        self.set("keep", keep.to_string())
    }

    pub fn max_delta(self, px: u32) -> Self {
        self.set("MAX_DELTA_PX", px.to_string())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }
}

fn fmt_score(v: f64) -> String {
    serde_json::Value::from(round4(v)).to_string()
}

/// The templates of one variant.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub variant: Variant,
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin(variant: Variant) -> Self {
        let templates = TemplateId::ALL
            .into_iter()
            .filter_map(|id| {
                builtin(variant, id).map(|text| {
                    let name = format!("{}/{}", variant.key(), id.file_name());
                    (id, PromptTemplate::new(id, name, text))
                })
            })
            .collect();
        Self { variant, templates }
    }

    /// Built-in templates with per-file overrides from `dir/<variant>/`.
    pub fn load(variant: Variant, dir: Option<&Path>) -> Result<Self> {
        let mut set = Self::builtin(variant);
        let Some(dir) = dir else { return Ok(set) };
        for id in TemplateId::ALL {
            let path = dir.join(variant.key()).join(id.file_name());
            if !path.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let tpl = PromptTemplate::new(id, path.display().to_string(), text);
            tpl.lint()?;
            set.templates.insert(id, tpl);
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> Result<&PromptTemplate> {
        self.templates.get(&id).ok_or_else(|| PromptError::NoTemplate {
            variant: self.variant.key().to_string(),
            template: id.file_name().to_string(),
        })
    }

    pub fn has(&self, id: TemplateId) -> bool {
        self.templates.contains_key(&id)
    }

    pub fn render(&self, id: TemplateId, ctx: &PromptContext, strict: bool) -> Result<String> {
        self.get(id)?.render(ctx, strict)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }
}
