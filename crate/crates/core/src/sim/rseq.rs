//! Retry-until-uninterrupted: run an L-step section, restart on any
//! interruption.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RseqModel {
    /// Steps in the critical section.
    pub length: u32,
    /// Per-step interruption probability.
    pub p: f64,
    pub trials: u64,
}

impl RseqModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::Config(format!(
                "rseq p must be in [0, 1), got {}",
                self.p
            )));
        }
        if self.trials == 0 {
            return Err(Error::Config("rseq needs at least one trial".into()));
        }
        Ok(())
    }

    /// Closed form for the mean: (1 - p)^-L.
    pub fn expected_attempts(&self) -> f64 {
        (1.0 - self.p).powi(-(self.length as i32))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RseqReport {
    pub model: RseqModel,
    pub seed: u64,
    pub mean_attempts: f64,
    pub expected_attempts: f64,
    /// Standard error of the mean.
    pub std_error: f64,
    pub histogram: BTreeMap<u64, u64>,
}

pub fn simulate_rseq(model: &RseqModel, seed: u64) -> Result<RseqReport> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut histogram = BTreeMap::new();
    let (mut sum, mut sum_sq) = (0f64, 0f64);
    for _ in 0..model.trials {
        let mut attempts = 0u64;
        loop {
            attempts += 1;
            let interrupted = (0..model.length).any(|_| rng.gen_bool(model.p));
            if !interrupted {
                break;
            }
        }
        *histogram.entry(attempts).or_insert(0) += 1;
        sum += attempts as f64;
        sum_sq += (attempts * attempts) as f64;
    }
    let n = model.trials as f64;
    let mean = sum / n;
    let var = if model.trials > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(RseqReport {
        model: model.clone(),
        seed,
        mean_attempts: mean,
        expected_attempts: model.expected_attempts(),
        std_error: (var / n).sqrt(),
        histogram,
    })
}
