use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Measured speedup of sparse over dense execution on one platform, as a
/// function of the pruning portion `p` (fraction of weights removed).
///
/// JSON form: `{"name": "...", "curve": [[portion, speedup], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformProfile {
    pub name: String,
    pub curve: Vec<(f64, f64)>,
}

impl PlatformProfile {
    pub fn new(name: impl Into<String>, curve: Vec<(f64, f64)>) -> Result<Self> {
        let p = Self {
            name: name.into(),
            curve,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.curve.len() < 2 {
            return Err(invalid("a speedup curve needs at least two points"));
        }
        for &(p, s) in &self.curve {
            if !(0.0..1.0).contains(&p) || !s.is_finite() || s < 0.0 {
                return Err(invalid(format!("bad curve point ({p}, {s})")));
            }
        }
        for w in self.curve.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(invalid("curve portions must be strictly increasing"));
            }
            if w[1].1 < w[0].1 {
                return Err(invalid("curve speedups must be non-decreasing"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Pruning portion where the interpolated speedup first reaches 1.0.
    pub fn break_even_portion(&self) -> Result<f64> {
        self.validate()?;
        let (p0, s0) = self.curve[0];
        if s0 >= 1.0 {
            return Ok(p0);
        }
        for w in self.curve.windows(2) {
            let ((pa, sa), (pb, sb)) = (w[0], w[1]);
            if sa < 1.0 && sb >= 1.0 {
                return Ok(pa + (1.0 - sa) * (pb - pa) / (sb - sa));
            }
        }
        Err(Error::NoBreakEven)
    }
}

/// Minimum pruning ratio `1 / (1 − p*)` at which sparse execution stops
/// being slower than dense.
pub fn break_even_ratio(profile: &PlatformProfile) -> Result<f64> {
    Ok(1.0 / (1.0 - profile.break_even_portion()?))
}
