use std::path::Path;

use serde::{Deserialize, Serialize};

/// Versioned prompt texts sent to reasoner and evaluator backends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub version: String,
    pub ground: String,
    pub level: String,
    pub vqa: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            version: "v1".into(),
            ground: include_str!("../assets/prompts/ground_v1.txt").into(),
            level: include_str!("../assets/prompts/level_v1.txt").into(),
            vqa: include_str!("../assets/prompts/vqa_v1.txt").into(),
        }
    }
}

impl PromptSet {
    /// Loads `ground_<version>.txt`, `level_<version>.txt` and `vqa_<version>.txt` from `dir`.
    pub fn load(dir: &Path, version: &str) -> std::io::Result<Self> {
        let read = |stem: &str| std::fs::read_to_string(dir.join(format!("{stem}_{version}.txt")));
        Ok(Self {
            version: version.to_string(),
            ground: read("ground")?,
            level: read("level")?,
            vqa: read("vqa")?,
        })
    }

    pub fn render_level(&self, scene: &str, library: &str, mode: &str) -> String {
        self.level
            .replace("{scene}", scene)
            .replace("{library}", library)
            .replace("{mode}", mode)
    }

    pub fn render_vqa(&self, command: &str) -> String {
        self.vqa.replace("{command}", command)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_have_placeholders_and_load_round_trips() {
        let p = PromptSet::default();
        assert!(p.level.contains("{scene}") && p.vqa.contains("{command}"));
        assert!(p.render_vqa("close the box").ends_with("Command: close the box\nQuestion:\n"));
        let dir = tempfile::tempdir().unwrap();
        for (stem, text) in [("ground", &p.ground), ("level", &p.level), ("vqa", &p.vqa)] {
            std::fs::write(dir.path().join(format!("{stem}_v1.txt")), text).unwrap();
        }
        assert_eq!(PromptSet::load(dir.path(), "v1").unwrap(), p);
        assert!(PromptSet::load(dir.path(), "v9").is_err());
    }
}
