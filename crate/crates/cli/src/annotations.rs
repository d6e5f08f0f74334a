use std::path::Path;

use serde::{Deserialize, Serialize};
use tfseg::simquery::ClassDef;

use crate::error::{data, CliError};

/// One class of the batch annotation file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotatedClass {
    #[serde(flatten)]
    pub class: ClassDef,
    #[serde(default)]
    pub points: Vec<[i64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub classes: Vec<AnnotatedClass>,
}

/// Reads and validates an annotation file. No classes is a data error.
pub fn load(path: &Path) -> Result<AnnotationFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Err(data(format!("{}: empty annotation file", path.display())));
    }
    let f: AnnotationFile = serde_json::from_str(&text).map_err(|e| data(format!("{}: {e}", path.display())))?;
    if f.classes.is_empty() {
        return Err(data(format!("{}: no classes", path.display())));
    }
    let mut ids = std::collections::BTreeSet::new();
    for c in &f.classes {
        c.class.validate()?;
        if !ids.insert(c.class.id) {
            return Err(data(format!("duplicate class id {}", c.class.id)));
        }
    }
    Ok(f)
}
