use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{HvqError, Result};

/// Dense index assignment for the label tokens of one activity.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelMap {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    background: Option<usize>,
}

impl LabelMap {
    /// Indices follow the sorted order of the distinct tokens.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>, background: Option<&str>) -> Self {
        let distinct: BTreeSet<&str> = tokens.into_iter().collect();
        let tokens: Vec<String> = distinct.into_iter().map(str::to_owned).collect();
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let background = background.and_then(|b| index.get(b).copied());
        LabelMap {
            tokens,
            index,
            background,
        }
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn background(&self) -> Option<usize> {
        self.background
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of action classes, i.e. distinct tokens other than background.
    pub fn num_actions(&self) -> usize {
        self.tokens.len() - usize::from(self.background.is_some())
    }
}

/// Reads one label token per line. Blank lines are ignored.
pub fn load_label_tokens(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| HvqError::io(path, e))?;
    let tokens: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    if tokens.is_empty() {
        return Err(HvqError::Data(format!("label file {} is empty", path.display())));
    }
    Ok(tokens)
}

/// Reads a label file and maps its tokens to dense indices. Unknown tokens
/// are an error in strict mode and map to the background label otherwise
/// (still an error when there is no background label).
pub fn load_labels(path: &Path, map: &LabelMap, strict: bool) -> Result<Vec<usize>> {
    load_label_tokens(path)?
        .iter()
        .enumerate()
        .map(|(line, tok)| match map.get(tok) {
            Some(i) => Ok(i),
            None if !strict && map.background().is_some() => Ok(map.background().unwrap()),
            None => Err(HvqError::Data(format!(
                "{}: unknown label {tok:?} on line {}",
                path.display(),
                line + 1
            ))),
        })
        .collect()
}

/// Writes one token per line.
pub fn write_labels<T: std::fmt::Display>(path: &Path, labels: &[T]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    super::write_atomic(path, text.as_bytes())
}
