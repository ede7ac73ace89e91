//! Inputs, prompt templates and the one-word-summary embedding prompt.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATES: &str = include_str!("../templates/default.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Text,
    Image,
    Video,
    Audio,
}

impl SegmentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentKind::Text => "text",
            SegmentKind::Image => "image",
            SegmentKind::Video => "video",
            SegmentKind::Audio => "audio",
        }
    }
}

/// Text, or a path/URI for media.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub payload: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Query,
    Target,
}

/// One query or candidate: an ordered bundle of text and media references.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModalityInput {
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub role: Role,
}

impl ModalityInput {
    pub fn text(text: impl Into<String>) -> Self {
        Self { segments: alloc::vec![Segment { kind: SegmentKind::Text, payload: text.into() }], role: Role::Query }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn push(mut self, kind: SegmentKind, payload: impl Into<String>) -> Self {
        self.segments.push(Segment { kind, payload: payload.into() });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(())
    }

    /// Segments in order, separated by newlines.
    pub fn to_parts(&self) -> Vec<PromptPart> {
        let mut parts = Vec::with_capacity(self.segments.len() * 2);
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                push_text(&mut parts, "\n");
            }
            match seg.kind {
                SegmentKind::Text => push_text(&mut parts, &seg.payload),
                kind => parts.push(PromptPart::Media { kind, reference: seg.payload.clone() }),
            }
        }
        parts
    }

    /// "the above text", "the above image", ... or "the above content" for mixed input.
    pub fn subject_phrase(&self) -> &'static str {
        let mut kinds = self.segments.iter().map(|s| s.kind);
        let Some(first) = kinds.next() else { return "the above content" };
        if kinds.any(|k| k != first) {
            return "the above content";
        }
        match first {
            SegmentKind::Text => "the above text",
            SegmentKind::Image => "the above image",
            SegmentKind::Video => "the above video",
            SegmentKind::Audio => "the above audio",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptPart {
    Text(String),
    Media { kind: SegmentKind, reference: String },
}

impl PromptPart {
    pub fn display(&self) -> String {
        match self {
            PromptPart::Text(t) => t.clone(),
            PromptPart::Media { kind, reference } => format!("<{}:{}>", kind.as_str(), reference),
        }
    }
}

fn push_text(parts: &mut Vec<PromptPart>, text: &str) {
    if text.is_empty() {
        return;
    }
    if let Some(PromptPart::Text(last)) = parts.last_mut() {
        last.push_str(text);
    } else {
        parts.push(PromptPart::Text(text.to_string()));
    }
}

pub fn render_parts(parts: &[PromptPart]) -> String {
    parts.iter().map(PromptPart::display).collect()
}

#[derive(Debug, Clone, Copy)]
pub enum Binding<'a> {
    Text(&'a str),
    Input(&'a ModalityInput),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(String),
}

/// Text with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    pieces: Vec<Piece>,
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

impl Template {
    pub fn parse(source: &str) -> Self {
        let mut pieces = Vec::new();
        let mut literal = String::new();
        let mut rest = source;
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_slot_name(&after[..close]) => {
                    literal.push_str(&rest[..open]);
                    if !literal.is_empty() {
                        pieces.push(Piece::Literal(core::mem::take(&mut literal)));
                    }
                    pieces.push(Piece::Slot(after[..close].to_string()));
                    rest = &after[close + 1..];
                }
                _ => {
                    literal.push_str(&rest[..=open]);
                    rest = after;
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            pieces.push(Piece::Literal(literal));
        }
        Self { source: source.to_string(), pieces }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(s) => Some(s.as_str()),
            Piece::Literal(_) => None,
        })
    }

    pub fn render(&self, bindings: &[(&str, Binding<'_>)]) -> Result<Vec<PromptPart>> {
        let mut parts = Vec::new();
        for piece in &self.pieces {
            match piece {
                Piece::Literal(text) => push_text(&mut parts, text),
                Piece::Slot(name) => {
                    let binding = bindings
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, b)| *b)
                        .ok_or_else(|| Error::Template(format!("no binding for placeholder {{{name}}}")))?;
                    match binding {
                        Binding::Text(t) => push_text(&mut parts, t),
                        Binding::Input(input) => {
                            for part in input.to_parts() {
                                match part {
                                    PromptPart::Text(t) => push_text(&mut parts, &t),
                                    media => parts.push(media),
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(parts)
    }

    pub fn render_text(&self, bindings: &[(&str, Binding<'_>)]) -> Result<String> {
        Ok(render_parts(&self.render(bindings)?))
    }
}

/// Named templates loaded from a sectioned plain-text file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    sections: BTreeMap<String, Template>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates parse")
    }
}

impl PromptTemplates {
    pub const REQUIRED: [&'static str; 10] = [
        "summary",
        "task_align",
        "semantic_ground",
        "noise_suppress",
        "rerank.mcq",
        "rerank.binary",
        "context_free",
        "rag.header",
        "rag.evidence",
        "rag.question",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with('#') {
                continue;
            }
            let trimmed = line.trim_end();
            if trimmed.starts_with('[') && trimmed.ends_with(']') && is_slot_name(&trimmed[1..trimmed.len() - 1]) {
                let name = trimmed[1..trimmed.len() - 1].to_string();
                if sections.contains_key(&name) {
                    return Err(Error::Template(format!("duplicate section [{name}] at line {}", lineno + 1)));
                }
                sections.insert(name.clone(), Vec::new());
                current = Some(name);
                continue;
            }
            match &current {
                Some(name) => sections.get_mut(name).expect("section exists").push(line),
                None if trimmed.is_empty() => {}
                None => return Err(Error::Template(format!("text outside a section at line {}", lineno + 1))),
            }
        }
        let sections: BTreeMap<String, Template> = sections
            .into_iter()
            .map(|(name, mut lines)| {
                while lines.last().is_some_and(|l| l.trim().is_empty()) {
                    lines.pop();
                }
                (name, Template::parse(&lines.join("\n")))
            })
            .collect();
        for name in Self::REQUIRED {
            if !sections.contains_key(name) {
                return Err(Error::Template(format!("missing section [{name}]")));
            }
        }
        Ok(Self { sections })
    }

    pub fn get(&self, name: &str) -> Result<&Template> {
        self.sections.get(name).ok_or_else(|| Error::Template(format!("missing section [{name}]")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }
}

/// Controlled-generation constraints added to the one-word-summary prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct PromptFlags {
    pub task_align: bool,
    pub semantic_ground: bool,
    pub noise_suppress: bool,
}

impl PromptFlags {
    pub const NONE: Self = Self { task_align: false, semantic_ground: false, noise_suppress: false };
    pub const ALL: Self = Self { task_align: true, semantic_ground: true, noise_suppress: true };

    /// The cumulative ablation ladder: base, +ground, +noise, +task.
    pub const LADDER: [Self; 4] = [
        Self::NONE,
        Self { task_align: false, semantic_ground: true, noise_suppress: false },
        Self { task_align: false, semantic_ground: true, noise_suppress: true },
        Self::ALL,
    ];
}

impl fmt::Display for PromptFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names = Vec::new();
        if self.semantic_ground {
            names.push("ground");
        }
        if self.noise_suppress {
            names.push("noise");
        }
        if self.task_align {
            names.push("task");
        }
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for PromptFlags {
    type Err = Error;

    /// Accepts `none`, `all`, or a comma list of `ground`, `noise`, `task`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "" | "none" => return Ok(Self::NONE),
            "all" => return Ok(Self::ALL),
            _ => {}
        }
        let mut flags = Self::NONE;
        for name in s.split(',').map(str::trim) {
            match name {
                "ground" | "semantic_ground" => flags.semantic_ground = true,
                "noise" | "noise_suppress" => flags.noise_suppress = true,
                "task" | "task_align" => flags.task_align = true,
                other => return Err(Error::InvalidConfig(format!("unknown prompt flag '{other}'"))),
            }
        }
        Ok(flags)
    }
}

/// What the query and target sides of a task are, e.g. "the image" and
/// "a class label". The input fills its own side; the hint fills the other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHint {
    pub query: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template_id: String,
    pub rendered_text: String,
    #[serde(skip)]
    pub parts: Vec<PromptPart>,
    pub flags: PromptFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_hint: Option<TaskHint>,
    /// Task alignment was requested without a hint and a generic one was used.
    #[serde(default)]
    pub generic_task_hint: bool,
}

impl PromptSpec {
    pub fn from_parts(template_id: String, parts: Vec<PromptPart>) -> Self {
        Self {
            template_id,
            rendered_text: render_parts(&parts),
            parts,
            flags: PromptFlags::NONE,
            task_hint: None,
            generic_task_hint: false,
        }
    }

    /// First 16 hex digits of the SHA-256 of the rendered text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.rendered_text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Render the one-word-summary prompt for `input` with the enabled
/// constraints. With no flags the result is exactly the bare summary template.
pub fn build_embed_prompt(
    templates: &PromptTemplates,
    input: &ModalityInput,
    flags: PromptFlags,
    task_hint: Option<&TaskHint>,
) -> Result<PromptSpec> {
    input.validate()?;
    let subject = input.subject_phrase();
    let mut constraints = String::new();
    let mut template_id = String::from("summary");
    let mut generic_task_hint = false;

    if flags.task_align {
        let (query, target) = match (input.role, task_hint) {
            (Role::Query, Some(h)) => (subject, h.target.as_str()),
            (Role::Target, Some(h)) => (h.query.as_str(), subject),
            (Role::Query, None) => (subject, "the target"),
            (Role::Target, None) => ("the query", subject),
        };
        generic_task_hint = task_hint.is_none();
        let line = templates
            .get("task_align")?
            .render_text(&[("query", Binding::Text(query)), ("target", Binding::Text(target))])?;
        constraints.push_str(&line);
        constraints.push('\n');
        template_id.push_str("+task");
    }
    if flags.semantic_ground {
        let line = templates.get("semantic_ground")?.render_text(&[("subject", Binding::Text(subject))])?;
        constraints.push_str(&line);
        constraints.push('\n');
        template_id.push_str("+ground");
    }
    if flags.noise_suppress {
        constraints.push_str(&templates.get("noise_suppress")?.render_text(&[])?);
        constraints.push('\n');
        template_id.push_str("+noise");
    }

    let parts = templates
        .get("summary")?
        .render(&[("input", Binding::Input(input)), ("constraints", Binding::Text(&constraints))])?;
    Ok(PromptSpec {
        template_id,
        rendered_text: render_parts(&parts),
        parts,
        flags,
        task_hint: task_hint.cloned(),
        generic_task_hint,
    })
}
