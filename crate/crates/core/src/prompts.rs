//! Prompt templates with `{placeholder}` substitution.
//!
//! Placeholders are `{name}` with `name` made of lowercase ASCII letters and
//! underscores. `{{` and `}}` produce literal braces; any other brace is kept
//! as written.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

macro_rules! templates {
    ($($variant:ident => $file:literal),+ $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum TemplateName {
            $($variant),+
        }

        impl TemplateName {
            pub const ALL: &'static [TemplateName] = &[$(TemplateName::$variant),+];

            /// File stem used when loading templates from a directory.
            pub fn file_stem(self) -> &'static str {
                match self {
                    $(TemplateName::$variant => $file),+
                }
            }

            fn builtin(self) -> &'static str {
                match self {
                    $(TemplateName::$variant => include_str!(concat!("../templates/", $file, ".txt"))),+
                }
            }
        }
    };
}

templates! {
    PlanGen => "plan_gen",
    Plan => "plan",
    State => "state",
    Parent => "parent",
    NodeType => "node_type",
    FormatReminder => "format_reminder",
    Triplet => "triplet",
    FewShotTriplet => "few_shot_triplet",
    Decomp => "decomp",
    Extract => "extract",
    FewShotText => "few_shot_text",
    Target => "tgt",
    FewShotTarget => "few_shot_tgt",
    Describe => "descr",
    FewShotDescribe => "few_shot_descr",
    ExamText => "exam_text",
    ExamImage => "exam_image",
    Retrieve => "retr",
    Reason => "reason",
    FinalAnswer => "final_answer",
}

impl TemplateName {
    pub fn from_file_stem(stem: &str) -> Option<TemplateName> {
        TemplateName::ALL.iter().copied().find(|t| t.file_stem() == stem)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    bodies: BTreeMap<TemplateName, String>,
}

impl Default for TemplateSet {
    /// The templates shipped with the crate.
    fn default() -> Self {
        TemplateSet {
            bodies: TemplateName::ALL
                .iter()
                .map(|t| (*t, t.builtin().to_string()))
                .collect(),
        }
    }
}

impl TemplateSet {
    /// Builds a set from `(file stem, body)` pairs. Every template must be
    /// present; unknown stems are ignored.
    pub fn from_bodies<I, S, B>(bodies: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, B)>,
        S: AsRef<str>,
        B: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (stem, body) in bodies {
            if let Some(name) = TemplateName::from_file_stem(stem.as_ref()) {
                map.insert(name, body.into());
            }
        }
        if let Some(missing) = TemplateName::ALL.iter().find(|t| !map.contains_key(*t)) {
            return Err(Error::MissingTemplate(missing.file_stem().to_string()));
        }
        Ok(TemplateSet { bodies: map })
    }

    pub fn body(&self, name: TemplateName) -> &str {
        &self.bodies[&name]
    }

    pub fn render(&self, name: TemplateName, vars: &[(&str, &str)]) -> Result<String> {
        render(name.file_stem(), self.body(name), vars)
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Piece<'a> {
    Literal(&'a str),
    Brace(char),
    Var(&'a str),
}

fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
}

fn pieces(body: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push(Piece::Literal(&rest[..pos]));
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push(Piece::Brace(tail.as_bytes()[0] as char));
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('{') {
            if let Some(end) = tail.find('}') {
                let name = &tail[1..end];
                if is_placeholder_name(name) {
                    out.push(Piece::Var(name));
                    rest = &tail[end + 1..];
                    continue;
                }
            }
        }
        out.push(Piece::Literal(&tail[..1]));
        rest = &tail[1..];
    }
    out.push(Piece::Literal(rest));
    out
}

/// Placeholder names referenced by `body`, in order of first appearance.
pub fn placeholders(body: &str) -> Vec<&str> {
    let mut names: Vec<&str> = Vec::new();
    for p in pieces(body) {
        if let Piece::Var(n) = p {
            if !names.contains(&n) {
                names.push(n);
            }
        }
    }
    names
}

/// Substitutes every placeholder in `body`. Unbound placeholders are an error;
/// extra variables are ignored.
pub fn render(template: &str, body: &str, vars: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(body.len());
    for p in pieces(body) {
        match p {
            Piece::Literal(s) => out.push_str(s),
            Piece::Brace(c) => out.push(c),
            Piece::Var(name) => {
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::UnboundPlaceholder {
                        template: template.to_string(),
                        placeholder: name.to_string(),
                    })?;
                out.push_str(value);
            }
        }
    }
    Ok(out)
}
