use serde::{Deserialize, Serialize};

/// Inclusive denoising-step interval `[lo, hi]`, serialized as `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct StepRange {
    pub lo: usize,
    pub hi: usize,
}

impl StepRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, step: usize) -> bool {
        self.lo <= step && step <= self.hi
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn len(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            self.hi - self.lo + 1
        }
    }
}

impl From<[usize; 2]> for StepRange {
    fn from([lo, hi]: [usize; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<StepRange> for [usize; 2] {
    fn from(r: StepRange) -> Self {
        [r.lo, r.hi]
    }
}
