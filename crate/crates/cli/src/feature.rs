//! Names of feature sets: `glove-syntactic`, `gpt-semantic`,
//! `gpt-k15-integral`, and `+`-joined combinations such as
//! `glove-semantic+glove-syntactic`.

use std::fmt;
use std::str::FromStr;

use irnlm::corpus::StreamMode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Glove,
    /// Contextual model read with sliding windows.
    Gpt,
    /// Contextual model trained and read with `k` tokens of context.
    GptLimited(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Single {
    pub model: ModelKind,
    pub mode: StreamMode,
}

/// One or more single feature sets whose designs are concatenated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Feature(pub Vec<Single>);

impl Feature {
    pub fn glove(mode: StreamMode) -> Self {
        Feature(vec![Single {
            model: ModelKind::Glove,
            mode,
        }])
    }

    pub fn single(&self) -> Option<Single> {
        match self.0.as_slice() {
            [s] => Some(*s),
            _ => None,
        }
    }
}

impl fmt::Display for Single {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.model {
            ModelKind::Glove => write!(f, "glove-{}", self.mode.name()),
            ModelKind::Gpt => write!(f, "gpt-{}", self.mode.name()),
            ModelKind::GptLimited(k) => write!(f, "gpt-k{k}-{}", self.mode.name()),
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

pub fn parse_mode(s: &str) -> Result<StreamMode, String> {
    StreamMode::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| format!("unknown stream `{s}` (integral, semantic, syntactic)"))
}

impl FromStr for Single {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (model, mode) = s
            .rsplit_once('-')
            .ok_or_else(|| format!("feature `{s}` is not model-stream"))?;
        let mode = parse_mode(mode)?;
        let model = match model {
            "glove" => ModelKind::Glove,
            "gpt" => ModelKind::Gpt,
            m => match m.strip_prefix("gpt-k").map(str::parse::<usize>) {
                Some(Ok(k)) if k > 0 => ModelKind::GptLimited(k),
                _ => return Err(format!("unknown model `{m}` in feature `{s}` (glove, gpt, gpt-k<K>)")),
            },
        };
        Ok(Single { model, mode })
    }
}

impl FromStr for Feature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts = s.split('+').map(str::parse).collect::<Result<Vec<Single>, _>>()?;
        Ok(Feature(parts))
    }
}

impl TryFrom<String> for Feature {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Feature> for String {
    fn from(f: Feature) -> String {
        f.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in [
            "glove-syntactic",
            "gpt-semantic",
            "gpt-k15-integral",
            "glove-semantic+glove-syntactic",
        ] {
            assert_eq!(s.parse::<Feature>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn rejects_unknown_parts() {
        assert!("bert-syntactic".parse::<Feature>().is_err());
        assert!("glove-lexical".parse::<Feature>().is_err());
        assert!("gpt-k0-integral".parse::<Feature>().is_err());
        assert!("glove".parse::<Feature>().is_err());
    }

    #[test]
    fn serializes_as_string() {
        let f = Feature::glove(StreamMode::Semantic);
        assert_eq!(serde_json::to_string(&f).unwrap(), "\"glove-semantic\"");
        let back: Feature = serde_json::from_str("\"gpt-k5-integral\"").unwrap();
        assert_eq!(back.single().unwrap().model, ModelKind::GptLimited(5));
    }
}
