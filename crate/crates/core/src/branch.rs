//! Multi-stage branch dropout.
//!
//! Each training batch feeds exactly one of three inputs to the
//! backbone: the fbank view alone, the unit view alone, or the gated
//! fusion. With a uniform draw `p`:
//!
//! ```text
//! fbank   if p < δ_fbank
//! unit    if δ_fbank <= p < δ_fbank + δ_unit
//! fusion  otherwise
//! ```
//!
//! The thresholds change with the epoch according to a [`StageSchedule`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Fbank,
    Unit,
    Fusion,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Fbank => "fbank",
            Branch::Unit => "unit",
            Branch::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dropout thresholds for one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub fbank: f64,
    pub unit: f64,
}

impl Thresholds {
    pub const NONE: Thresholds = Thresholds {
        fbank: 0.0,
        unit: 0.0,
    };

    pub fn new(fbank: f64, unit: f64) -> Result<Self> {
        let t = Self { fbank, unit };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fbank >= 0.0 && self.unit >= 0.0 && self.fbank + self.unit <= 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid dropout thresholds: fbank {} unit {} (need both >= 0, sum <= 1)",
                self.fbank, self.unit
            )));
        }
        Ok(())
    }
}

/// One schedule entry covering epochs `[lo, hi)`; `hi = None` is open-ended.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub lo: usize,
    pub hi: Option<usize>,
    pub fbank: f64,
    pub unit: f64,
}

impl Stage {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            fbank: self.fbank,
            unit: self.unit,
        }
    }
}

/// Epoch-ranged thresholds covering `[0, ∞)` without gaps or overlaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Stage>", into = "Vec<Stage>")]
pub struct StageSchedule {
    stages: Vec<Stage>,
}

impl Default for StageSchedule {
    /// Three stages: (0.3, 0) before epoch 10, (0.5, 0.3) for 10..25,
    /// then back to (0.3, 0).
    fn default() -> Self {
        Self {
            stages: vec![
                Stage {
                    lo: 0,
                    hi: Some(10),
                    fbank: 0.3,
                    unit: 0.0,
                },
                Stage {
                    lo: 10,
                    hi: Some(25),
                    fbank: 0.5,
                    unit: 0.3,
                },
                Stage {
                    lo: 25,
                    hi: None,
                    fbank: 0.3,
                    unit: 0.0,
                },
            ],
        }
    }
}

impl StageSchedule {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("stage schedule is empty".into()));
        }
        let mut expect_lo = 0;
        for (i, s) in stages.iter().enumerate() {
            s.thresholds().validate()?;
            if s.lo != expect_lo {
                return Err(Error::Config(format!(
                    "stage {i} starts at epoch {} but the previous stage ends at {expect_lo}",
                    s.lo
                )));
            }
            match s.hi {
                Some(hi) if hi <= s.lo => {
                    return Err(Error::Config(format!(
                        "stage {i} is empty: [{}, {hi})",
                        s.lo
                    )));
                }
                Some(hi) => expect_lo = hi,
                None if i + 1 != stages.len() => {
                    return Err(Error::Config(format!(
                        "stage {i} is open-ended but is not the last stage"
                    )));
                }
                None => {}
            }
        }
        if stages.last().and_then(|s| s.hi).is_some() {
            return Err(Error::Config("last stage must be open-ended".into()));
        }
        Ok(Self { stages })
    }

    /// A single open stage with the given thresholds.
    pub fn constant(t: Thresholds) -> Result<Self> {
        Self::new(vec![Stage {
            lo: 0,
            hi: None,
            fbank: t.fbank,
            unit: t.unit,
        }])
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stage_for_epoch(&self, epoch: usize) -> Thresholds {
        self.stages
            .iter()
            .find(|s| epoch >= s.lo && s.hi.is_none_or(|hi| epoch < hi))
            .expect("schedule covers every epoch")
            .thresholds()
    }

    /// Thresholds of the final stage; used for stochastic inference.
    pub fn last(&self) -> Thresholds {
        self.stages.last().expect("non-empty").thresholds()
    }
}

impl TryFrom<Vec<Stage>> for StageSchedule {
    type Error = Error;

    fn try_from(stages: Vec<Stage>) -> Result<Self> {
        Self::new(stages)
    }
}

impl From<StageSchedule> for Vec<Stage> {
    fn from(s: StageSchedule) -> Self {
        s.stages
    }
}

/// Picks the branch for a draw `p ∈ [0, 1)`.
pub fn sample_branch(p: f64, t: Thresholds) -> Result<Branch> {
    t.validate()?;
    Ok(if p < t.fbank {
        Branch::Fbank
    } else if p < t.fbank + t.unit {
        Branch::Unit
    } else {
        Branch::Fusion
    })
}
