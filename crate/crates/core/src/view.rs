use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

/// The four input representations, in canonical (concatenation) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Pitch,
    Timbre,
    Waveform,
    Neuralogram,
}

impl View {
    pub const ALL: [View; 4] = [View::Pitch, View::Timbre, View::Waveform, View::Neuralogram];

    pub fn name(self) -> &'static str {
        match self {
            View::Pitch => "pitch",
            View::Timbre => "timbre",
            View::Waveform => "waveform",
            View::Neuralogram => "neuralogram",
        }
    }

    /// Tag byte used in feature cache records.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<View> {
        View::ALL.get(tag as usize).copied()
    }

    /// `(rows, cols)` of the feature matrix this view consumes.
    pub fn feature_dims(self) -> (usize, usize) {
        match self {
            View::Pitch => (80, 40),
            View::Timbre => (12, 40),
            View::Waveform => (40, 400),
            View::Neuralogram => (1024, 10),
        }
    }

    /// Parses a comma-separated list, returning the views in canonical order.
    pub fn parse_list(s: &str) -> Result<Vec<View>, Error> {
        let mut views = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let v: View = part.parse()?;
            if views.contains(&v) {
                return Err(Error::Invalid(format!("duplicate view {part:?}")));
            }
            views.push(v);
        }
        if views.is_empty() {
            return Err(Error::Invalid("empty view list".into()));
        }
        views.sort();
        Ok(views)
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        View::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown view {s:?}")))
    }
}
