use serde::{Deserialize, Serialize};

/// Semantic kind of audio feedback for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioCategory {
    Description,
    Hazard,
    Sfx,
    None,
}

impl AudioCategory {
    pub const ALL: [AudioCategory; 4] = [
        AudioCategory::Description,
        AudioCategory::Hazard,
        AudioCategory::Sfx,
        AudioCategory::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AudioCategory::Description => "description",
            AudioCategory::Hazard => "hazard",
            AudioCategory::Sfx => "sfx",
            AudioCategory::None => "none",
        }
    }

    /// Spoken categories share the TTS spacing timer.
    pub fn is_tts(self) -> bool {
        matches!(self, AudioCategory::Description | AudioCategory::Hazard)
    }

    pub fn parse(token: &str) -> Option<Self> {
        let token = token.trim();
        Self::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(token))
    }
}

impl std::fmt::Display for AudioCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
