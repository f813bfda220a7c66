use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of frames sampled from a video for one training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameBudget(pub u32);

impl FrameBudget {
    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for FrameBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for FrameBudget {
    fn from(v: u32) -> Self {
        FrameBudget(v)
    }
}

/// Admissible set of frame budgets: non-empty, strictly ascending, all ≥ 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct BudgetSet(Vec<FrameBudget>);

impl BudgetSet {
    pub fn new(values: impl IntoIterator<Item = u32>) -> Result<Self> {
        let values: Vec<u32> = values.into_iter().collect();
        if values.is_empty() {
            return Err(Error::validation("budgets", "admissible set is empty"));
        }
        if values.contains(&0) {
            return Err(Error::validation("budgets", "budgets must be at least 1"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(
                "budgets",
                format!("budgets must be distinct and ascending, got {values:?}"),
            ));
        }
        Ok(Self(values.into_iter().map(FrameBudget).collect()))
    }

    pub fn as_slice(&self) -> &[FrameBudget] {
        &self.0
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = FrameBudget> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, m: FrameBudget) -> bool {
        self.0.binary_search(&m).is_ok()
    }

    pub fn check(&self, m: FrameBudget) -> Result<FrameBudget> {
        if self.contains(m) {
            Ok(m)
        } else {
            Err(Error::InvalidBudget(m.0))
        }
    }

    pub fn min(&self) -> FrameBudget {
        self.0[0]
    }

    pub fn max(&self) -> FrameBudget {
        *self.0.last().expect("non-empty")
    }

    /// Smallest admissible budget that is at least `frames`, clamped to the maximum.
    pub fn ceil(&self, frames: u64) -> FrameBudget {
        self.iter()
            .find(|m| u64::from(m.0) >= frames)
            .unwrap_or_else(|| self.max())
    }
}

impl Default for BudgetSet {
    fn default() -> Self {
        Self::new([8, 16, 32, 64]).expect("valid default")
    }
}

impl TryFrom<Vec<u32>> for BudgetSet {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BudgetSet> for Vec<u32> {
    fn from(s: BudgetSet) -> Self {
        s.0.into_iter().map(|m| m.0).collect()
    }
}
