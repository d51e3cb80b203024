// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_POSITION_POLICY: &str = "last";

fn default_position_policy() -> String {
    DEFAULT_POSITION_POLICY.to_string()
}

/// One implicit prompt and the class it expresses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstancePrompt {
    pub text: String,
    pub class_index: usize,
}

/// `manifest.json` of an activation bundle.
///
/// Unknown top-level keys (exporter notes such as sub-token splits) are
/// kept in `extra` and written back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task_name: String,
    pub classes: Vec<String>,
    pub class_token_prompts: Vec<String>,
    pub instance_prompts: Vec<InstancePrompt>,
    pub model_name: String,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    #[serde(default = "default_position_policy")]
    pub position_policy: String,
    #[serde(flatten, default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_instances(&self) -> usize {
        self.instance_prompts.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instance_prompts.iter().map(|p| p.class_index).collect()
    }

    /// Instances per class, in class order. Out-of-range labels are ignored.
    pub fn class_balance(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for p in &self.instance_prompts {
            if let Some(c) = counts.get_mut(p.class_index) {
                *c += 1;
            }
        }
        counts
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ANIMALS: &str = r#"{
        "task_name": "animals",
        "classes": ["mammal", "bird"],
        "class_token_prompts": ["mammal", "bird"],
        "instance_prompts": [
            {"text": "the animal that barks", "class_index": 0},
            {"text": "the animal that flies south", "class_index": 1}
        ],
        "model_name": "gpt2",
        "layers": 12,
        "heads": 12,
        "head_dim": 64,
        "subtoken_splits": {"mammal": 2}
    }"#;

    #[test]
    fn defaults_and_extra_fields() {
        let m: Manifest = serde_json::from_str(ANIMALS).unwrap();
        assert_eq!(m.position_policy, "last");
        assert_eq!(m.labels(), vec![0, 1]);
        assert_eq!(m.class_balance(), vec![1, 1]);
        assert!(m.extra.contains_key("subtoken_splits"));

        let text = serde_json::to_string(&m).unwrap();
        let back: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn missing_required_field_is_error() {
        let broken = ANIMALS.replace("\"head_dim\": 64,", "");
        assert!(serde_json::from_str::<Manifest>(&broken).is_err());
    }
}
