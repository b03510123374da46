use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint batches of `m` indices, each omitted by one leave-out run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveOutPlan {
    pub n: usize,
    pub m: usize,
    pub batches: Vec<Vec<usize>>,
}

impl LeaveOutPlan {
    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.batches.is_empty() {
            return Err(Error::input("leave-out plan needs m ≥ 1 and at least one batch"));
        }
        if self.m >= self.n {
            return Err(Error::input(format!(
                "omitting {} of {} samples leaves nothing to train on",
                self.m, self.n
            )));
        }
        let mut seen = vec![false; self.n];
        for b in &self.batches {
            if b.len() != self.m {
                return Err(Error::input("leave-out batches must all have size m"));
            }
            for &i in b {
                if i >= self.n || seen[i] {
                    return Err(Error::input(format!("leave-out index {i} out of range or repeated")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// `num_batches` disjoint batches of size `m`, drawn from a seeded shuffle of `0..n`.
pub fn leave_out_plan(n: usize, m: usize, num_batches: usize, seed: u64) -> Result<LeaveOutPlan> {
    if m == 0 || num_batches == 0 {
        return Err(Error::input("leave-out plan needs m ≥ 1 and at least one batch"));
    }
    if m.checked_mul(num_batches).is_none_or(|total| total > n) {
        return Err(Error::input(format!(
            "{num_batches} batches of {m} do not fit in {n} samples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let batches = order
        .chunks_exact(m)
        .take(num_batches)
        .map(|c| {
            let mut b = c.to_vec();
            b.sort_unstable();
            b
        })
        .collect();
    let plan = LeaveOutPlan { n, m, batches };
    plan.validate()?;
    Ok(plan)
}
