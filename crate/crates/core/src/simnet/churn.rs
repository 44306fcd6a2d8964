use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which clients are offline in each epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChurnModel {
    pub offline_prob_per_epoch: f64,
    pub min_online_fraction: f64,
    /// Client index to the epochs in which it is forced offline. Scheduled
    /// clients are exempt from random churn.
    pub schedules: BTreeMap<usize, Vec<u64>>,
}

impl ChurnModel {
    pub fn none() -> Self {
        ChurnModel {
            offline_prob_per_epoch: 0.0,
            min_online_fraction: 0.5,
            schedules: BTreeMap::new(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.offline_prob_per_epoch) {
            return Err("churn.offline_prob_per_epoch must be in [0, 1)".into());
        }
        if !(0.5..=1.0).contains(&self.min_online_fraction) {
            return Err("churn.min_online_fraction must be in [0.5, 1]".into());
        }
        if let Some(c) = self.schedules.keys().find(|&&c| c >= n) {
            return Err(format!("churn.schedules names client {c} outside 0..{n}"));
        }
        Ok(())
    }

    /// Online flags for `epoch`. Epoch 0 is always fully online so every
    /// client can bootstrap.
    pub fn sample<R: Rng>(&self, n: usize, epoch: u64, rng: &mut R) -> Vec<bool> {
        let mut online = vec![true; n];
        if epoch == 0 {
            return online;
        }
        for (i, slot) in online.iter_mut().enumerate() {
            *slot = match self.schedules.get(&i) {
                Some(off) => !off.contains(&epoch),
                None => self.offline_prob_per_epoch == 0.0 || !rng.gen_bool(self.offline_prob_per_epoch),
            };
        }
        let need = (self.min_online_fraction * n as f64).ceil() as usize;
        let count = online.iter().filter(|&&o| o).count();
        if count < need {
            let mut back: Vec<usize> = (0..n)
                .filter(|&i| !online[i] && !self.schedules.contains_key(&i))
                .collect();
            back.shuffle(rng);
            for i in back.into_iter().take(need - count) {
                online[i] = true;
            }
        }
        online
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn keeps_minimum_online() {
        let m = ChurnModel {
            offline_prob_per_epoch: 0.9,
            min_online_fraction: 0.5,
            schedules: BTreeMap::new(),
        };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for e in 0..200 {
            let on = m.sample(101, e, &mut rng);
            assert!(on.iter().filter(|&&o| o).count() >= 51);
        }
    }

    #[test]
    fn schedules_override() {
        let mut m = ChurnModel::none();
        m.schedules.insert(0, vec![2, 3]);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let on: Vec<bool> = (0..5).map(|e| m.sample(3, e, &mut rng)[0]).collect();
        assert_eq!(on, vec![true, true, false, false, true]);
    }
}
