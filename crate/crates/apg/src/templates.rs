//! Template directories: one `<name>.txt` per template.

use std::path::Path;

use apg_core::prompts::placeholders;
use apg_core::{TemplateName, TemplateSet};

use crate::error::{read_to_string, Error, Result};

/// Loads every template from `dir`. A missing file, or a template using a
/// placeholder its built-in counterpart does not bind, is an error.
pub fn load_dir(dir: &Path) -> Result<TemplateSet> {
    let mut bodies = Vec::with_capacity(TemplateName::ALL.len());
    for name in TemplateName::ALL.iter().copied() {
        let path = dir.join(format!("{}.txt", name.file_stem()));
        if !path.is_file() {
            return Err(apg_core::Error::MissingTemplate(path.display().to_string()).into());
        }
        let body = read_to_string(&path)?;
        let builtin = TemplateSet::default();
        let known = placeholders(builtin.body(name));
        if let Some(unknown) = placeholders(&body).into_iter().find(|p| !known.contains(p)) {
            return Err(Error::Core(apg_core::Error::UnboundPlaceholder {
                template: name.file_stem().to_string(),
                placeholder: unknown.to_string(),
            }));
        }
        bodies.push((name.file_stem(), body));
    }
    Ok(TemplateSet::from_bodies(bodies)?)
}

/// Writes the built-in templates to `dir` as a starting point for edits.
pub fn export_builtin(dir: &Path) -> Result<()> {
    let set = TemplateSet::default();
    for name in TemplateName::ALL.iter().copied() {
        crate::error::write(&dir.join(format!("{}.txt", name.file_stem())), set.body(name))?;
    }
    Ok(())
}
