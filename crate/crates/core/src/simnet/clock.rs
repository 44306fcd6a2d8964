use serde::{Deserialize, Serialize};

/// Epoch length and delay bounds, all in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockConfig {
    pub epoch_len: u64,
    /// Bound on one client-server hop.
    pub delta: u64,
    /// Bound on one hop through the anonymity network.
    pub big_delta: u64,
}

impl ClockConfig {
    pub fn epoch_start(&self, epoch: u64) -> u64 {
        epoch * self.epoch_len
    }

    /// Time by which every online client holds a proof of misbehavior after
    /// an equivocation in an epoch.
    pub fn gossip_bound(&self, diameter: usize) -> u64 {
        2 * (diameter as u64 + 1) * self.delta
    }

    /// Checks the timing assumptions against the largest component diameter
    /// the run will see.
    pub fn validate(&self, diameter: usize) -> Result<(), String> {
        if self.delta == 0 {
            return Err("clock.delta must be positive".into());
        }
        if self.big_delta <= self.delta {
            return Err(format!(
                "clock.big_delta ({}) must exceed clock.delta ({})",
                self.big_delta, self.delta
            ));
        }
        if self.gossip_bound(diameter) >= self.epoch_len {
            return Err(format!(
                "clock.epoch_len ({}) must exceed 2*(diam+1)*delta = {} for diameter {}",
                self.epoch_len,
                self.gossip_bound(diameter),
                diameter
            ));
        }
        if 4 * self.big_delta >= self.epoch_len {
            return Err(format!(
                "clock.epoch_len ({}) must exceed 4*big_delta = {}",
                self.epoch_len,
                4 * self.big_delta
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_bound_example() {
        let c = ClockConfig {
            epoch_len: 20_000,
            delta: 1000,
            big_delta: 2000,
        };
        assert_eq!(c.gossip_bound(5), 12_000);
        assert!(c.validate(5).is_ok());
        assert!(c.validate(9).unwrap_err().contains("epoch_len"));
        let bad = ClockConfig { big_delta: 1000, ..c };
        assert!(bad.validate(1).unwrap_err().contains("big_delta"));
    }
}
