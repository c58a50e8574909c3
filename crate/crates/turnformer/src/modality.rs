//! The three input channels and their raw feature widths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One input channel. The derived order (T, A, V) is the canonical
/// iteration order everywhere modalities are enumerated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    T,
    A,
    V,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::T, Modality::A, Modality::V];

    pub fn letter(self) -> char {
        match self {
            Modality::T => 'T',
            Modality::A => 'A',
            Modality::V => 'V',
        }
    }

    /// On-disk feature file name for this channel.
    pub fn file_name(self) -> &'static str {
        match self {
            Modality::T => "text.f32",
            Modality::A => "audio.f32",
            Modality::V => "video.f32",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "T" | "t" | "text" => Ok(Modality::T),
            "A" | "a" | "audio" => Ok(Modality::A),
            "V" | "v" | "video" => Ok(Modality::V),
            other => Err(Error::Config(format!(
                "unknown modality '{other}' (expected T, A, or V)"
            ))),
        }
    }
}

/// Parses a modality set like `"T+V+A"`, preserving canonical order and
/// rejecting duplicates.
pub fn parse_modality_set(s: &str) -> Result<Vec<Modality>> {
    let mut set = Vec::new();
    for part in s.split('+') {
        let m: Modality = part.parse()?;
        if set.contains(&m) {
            return Err(Error::Config(format!("modality '{m}' listed twice in '{s}'")));
        }
        set.push(m);
    }
    if set.is_empty() {
        return Err(Error::Config("empty modality set".into()));
    }
    set.sort();
    Ok(set)
}

/// Formats a modality set in canonical order, e.g. `"T+A+V"`.
pub fn modality_set_name(set: &[Modality]) -> String {
    let mut sorted = set.to_vec();
    sorted.sort();
    sorted
        .iter()
        .map(|m| m.letter().to_string())
        .collect::<Vec<_>>()
        .join("+")
}

/// Raw per-window feature widths of each channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub t: usize,
    pub a: usize,
    pub v: usize,
}

impl Default for ModalityDims {
    fn default() -> Self {
        Self {
            t: 300,
            a: 64,
            v: 2048,
        }
    }
}

impl ModalityDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::T => self.t,
            Modality::A => self.a,
            Modality::V => self.v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.a == 0 || self.v == 0 {
            return Err(Error::Config("modality raw dims must be >= 1".into()));
        }
        Ok(())
    }
}
