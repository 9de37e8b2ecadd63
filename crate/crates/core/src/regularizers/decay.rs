use crate::error::{Error, Result};

/// Linear decay of block survival probability across a network of `blocks`
/// residual blocks: `p(l) = 1 - (l / L) (1 - p_L)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecaySchedule {
    blocks: usize,
    p_last: f64,
}

impl DecaySchedule {
    pub fn new(blocks: usize, p_last: f64) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Invalid("decay schedule needs at least one block".into()));
        }
        if !(0.0..=1.0).contains(&p_last) {
            return Err(Error::Invalid(format!(
                "terminal survival probability must lie in [0, 1], got {p_last}"
            )));
        }
        Ok(Self { blocks, p_last })
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn p_last(&self) -> f64 {
        self.p_last
    }

    /// Survival probability of block `l` (1-based).
    pub fn survival(&self, l: usize) -> Result<f64> {
        linear_decay(l, self)
    }
}

/// `1 - (l / L)(1 - p_L)` for `l` in `1..=L`.
///
/// Evaluated as `p_L + ((L - l) / L)(1 - p_L)` so the last block gets exactly
/// `p_L` and `p_L = 1` gives exactly 1 everywhere.
pub fn linear_decay(l: usize, schedule: &DecaySchedule) -> Result<f64> {
    let big_l = schedule.blocks;
    if l == 0 || l > big_l {
        return Err(Error::Invalid(format!("block index {l} outside 1..={big_l}")));
    }
    let remaining = (big_l - l) as f64 / big_l as f64;
    Ok(schedule.p_last + remaining * (1.0 - schedule.p_last))
}
