//! Nesting dimension sets and chunk duration sets.

use std::fmt;

use crate::error::{DameError, Result};

/// Strictly increasing prefix dimensions `d_1 < ... < d_K`; the last one is
/// the full embedding size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixSpec {
    dims: Vec<usize>,
}

impl PrefixSpec {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(DameError::ConfigInvalid("empty nesting dimension set".into()));
        }
        if dims[0] == 0 {
            return Err(DameError::ConfigInvalid("prefix dimensions must be positive".into()));
        }
        if dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DameError::ConfigInvalid(format!(
                "nesting dimensions must be strictly increasing: {dims:?}"
            )));
        }
        Ok(PrefixSpec { dims })
    }

    /// Single full-dimension head.
    pub fn full(dim: usize) -> Result<Self> {
        Self::new(vec![dim])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn full_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    pub fn dim(&self, k: usize) -> usize {
        self.dims[k]
    }

    pub fn contains(&self, d: usize) -> bool {
        self.dims.binary_search(&d).is_ok()
    }

    pub fn index_of(&self, d: usize) -> Result<usize> {
        self.dims.binary_search(&d).map_err(|_| DameError::InvalidPrefix(d))
    }
}

impl fmt::Display for PrefixSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_list(f, self.dims.iter())
    }
}

/// Strictly increasing chunk durations, stored in frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationSet {
    frames: Vec<usize>,
}

impl DurationSet {
    pub fn from_frames(frames: Vec<usize>) -> Result<Self> {
        if frames.is_empty() {
            return Err(DameError::ConfigInvalid("empty duration set".into()));
        }
        if frames[0] == 0 {
            return Err(DameError::InvalidDuration("durations must be at least one frame".into()));
        }
        if frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DameError::ConfigInvalid(format!(
                "durations must be strictly increasing: {frames:?}"
            )));
        }
        Ok(DurationSet { frames })
    }

    /// Converts seconds to frames at `fps`; each duration must land on a
    /// whole number of frames.
    pub fn from_seconds(seconds: &[f64], fps: usize) -> Result<Self> {
        let frames = seconds
            .iter()
            .map(|&s| {
                let f = s * fps as f64;
                let r = f.round();
                if !(s > 0.0) || (f - r).abs() > 1e-9 {
                    Err(DameError::InvalidDuration(format!(
                        "{s} s is not a positive whole number of frames at {fps} fps"
                    )))
                } else {
                    Ok(r as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_frames(frames)
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn longest(&self) -> usize {
        *self.frames.last().expect("non-empty")
    }
}

impl fmt::Display for DurationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_list(f, self.frames.iter())
    }
}

fn write_list<T: fmt::Display>(f: &mut fmt::Formatter<'_>, items: impl Iterator<Item = T>) -> fmt::Result {
    f.write_str("{")?;
    for (i, x) in items.enumerate() {
        if i > 0 {
            f.write_str(",")?;
        }
        write!(f, "{x}")?;
    }
    f.write_str("}")
}
