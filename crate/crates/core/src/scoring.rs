//! Acquisition scores over a pool of predictive matrices.
//!
//! All entropies are in nats. The goal-driven score uses the dot-product
//! form of the Taylor-approximated total mutual information: with
//! `G(m, m') = (1/M) Σ_a P_m(a) P_m'(a) / P̄(a)` for the pool item and the
//! test summary `S = Σ_t G_t`, the score is `½ (⟨G, S⟩ − T)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes_mlp::{posterior_mean, DrawSet, PredictiveMatrix};
use crate::datasets::ItemId;
use crate::error::{Error, Result};

/// Floor on posterior-mean probabilities used as divisors.
pub const DIVISION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Passive,
    Entropy,
    Curiosity,
    Goal,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Passive,
        Strategy::Entropy,
        Strategy::Curiosity,
        Strategy::Goal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Passive => "passive",
            Strategy::Entropy => "entropy",
            Strategy::Curiosity => "curiosity",
            Strategy::Goal => "goal",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    /// M, absent for passive scores.
    pub samples: Option<usize>,
    pub seed: u64,
    /// T, only for goal scores.
    pub test_size: Option<usize>,
    /// Posterior-mean divisors that hit [`DIVISION_FLOOR`].
    pub floored_divisions: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub strategy: Strategy,
    pub scores: Vec<(ItemId, f64)>,
    pub meta: ScoreMeta,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|&(_, s)| s).collect()
    }

    pub fn get(&self, id: ItemId) -> Option<f64> {
        self.scores.iter().find(|(i, _)| *i == id).map(|&(_, s)| s)
    }

    /// `# strategy=...,samples=...,seed=...` comment line, then `item_id,score`.
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        let samples = self
            .meta
            .samples
            .map_or_else(|| "-".to_owned(), |m| m.to_string());
        write!(
            w,
            "# strategy={},samples={samples},seed={}",
            self.strategy, self.meta.seed
        )?;
        if let Some(t) = self.meta.test_size {
            write!(w, ",test_size={t}")?;
        }
        writeln!(w)?;
        writeln!(w, "item_id,score")?;
        for (id, s) in &self.scores {
            writeln!(w, "{id},{s:?}")?;
        }
        Ok(())
    }
}

/// i.i.d. uniform(0, 1) scores.
pub fn score_passive(ids: &[ItemId], seed: u64) -> Result<ScoreVector> {
    if ids.is_empty() {
        return Err(Error::invalid("pool is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ScoreVector {
        strategy: Strategy::Passive,
        scores: ids.iter().map(|&id| (id, rng.gen::<f64>())).collect(),
        meta: ScoreMeta {
            samples: None,
            seed,
            test_size: None,
            floored_divisions: 0,
        },
    })
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

pub fn score_entropy(pm: &PredictiveMatrix) -> f64 {
    entropy(&posterior_mean(pm))
}

/// `H(P̄) − mean_m H(P_m)` before clamping.
pub fn curiosity_raw(pm: &PredictiveMatrix) -> f64 {
    let conditional = pm.rows().map(entropy).sum::<f64>() / pm.samples() as f64;
    score_entropy(pm) - conditional
}

/// BALD score, clamped at 0 against Monte-Carlo noise.
pub fn score_curiosity(pm: &PredictiveMatrix) -> f64 {
    curiosity_raw(pm).max(0.0)
}

/// `(1/M) Σ_a P_m(a) P_m'(a) / P̄(a)` as a row-major `M × M` matrix, plus the
/// number of floored divisors.
pub fn sample_gram(pm: &PredictiveMatrix) -> (Vec<f64>, u64) {
    let m = pm.samples();
    let mut floored = 0u64;
    let inv: Vec<f64> = posterior_mean(pm)
        .into_iter()
        .map(|p| {
            if p < DIVISION_FLOOR {
                floored += 1;
                1.0 / DIVISION_FLOOR
            } else {
                1.0 / p
            }
        })
        .collect();
    let scaled: Vec<Vec<f64>> = pm
        .rows()
        .map(|r| r.iter().zip(&inv).map(|(p, i)| p * i).collect())
        .collect();
    let norm = 1.0 / m as f64;
    let mut gram = vec![0.0; m * m];
    for a in 0..m {
        let left = &scaled[a];
        for b in a..m {
            let s = left.iter().zip(pm.row(b)).map(|(x, y)| x * y).sum::<f64>() * norm;
            gram[a * m + b] = s;
            gram[b * m + a] = s;
        }
    }
    (gram, floored)
}

/// The precomputed test-domain factor `Σ_t G_t`, flattened to length `M²`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSummary {
    samples: usize,
    draws: DrawSet,
    test_size: usize,
    values: Vec<f64>,
    floored_divisions: u64,
}

impl TestSummary {
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn draws(&self) -> DrawSet {
        self.draws
    }

    /// T.
    pub fn test_size(&self) -> usize {
        self.test_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn floored_divisions(&self) -> u64 {
        self.floored_divisions
    }

    /// Summary of the disjoint union of two test sets.
    pub fn merge(&self, other: &TestSummary) -> Result<TestSummary> {
        if self.draws != other.draws {
            return Err(Error::invalid(
                "test summaries come from different draw sets",
            ));
        }
        Ok(TestSummary {
            samples: self.samples,
            draws: self.draws,
            test_size: self.test_size + other.test_size,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
            floored_divisions: self.floored_divisions + other.floored_divisions,
        })
    }
}

/// Sums the per-item sample Gram matrices over the test domain.
pub fn build_test_summary(tests: &[PredictiveMatrix]) -> Result<TestSummary> {
    let first = tests
        .first()
        .ok_or_else(|| Error::invalid("test domain is empty"))?;
    let (samples, draws) = (first.samples(), first.draws());
    if let Some(bad) = tests
        .iter()
        .find(|t| t.samples() != samples || t.draws() != draws)
    {
        return Err(Error::invalid(format!(
            "test item {} has M = {} ({:?}), expected M = {samples} ({draws:?})",
            bad.item(),
            bad.samples(),
            bad.draws()
        )));
    }
    let mut values = vec![0.0; samples * samples];
    let mut floored = 0;
    for t in tests {
        let (g, f) = sample_gram(t);
        floored += f;
        for (acc, v) in values.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok(TestSummary {
        samples,
        draws,
        test_size: tests.len(),
        values,
        floored_divisions: floored,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalScore {
    pub value: f64,
    pub floored_divisions: u64,
}

/// Fast goal-driven score `½ (⟨G, S⟩ − T)`.
pub fn score_goal_fast(pm: &PredictiveMatrix, ts: &TestSummary) -> Result<GoalScore> {
    if pm.draws() != ts.draws || pm.samples() != ts.samples {
        return Err(Error::invalid(format!(
            "pool item {} was predicted with {:?}, test summary uses {:?}",
            pm.item(),
            pm.draws(),
            ts.draws
        )));
    }
    let (gram, floored) = sample_gram(pm);
    let dot: f64 = gram.iter().zip(&ts.values).map(|(a, b)| a * b).sum();
    Ok(GoalScore {
        value: 0.5 * (dot - ts.test_size as f64),
        floored_divisions: floored,
    })
}

/// Scores every pool matrix under an uncertainty strategy.
///
/// `Goal` requires `ts`; `Entropy` and `Curiosity` reject it. `Passive`
/// scores do not depend on predictions and come from [`score_passive`].
pub fn score_pool(
    strategy: Strategy,
    pool: &[PredictiveMatrix],
    ts: Option<&TestSummary>,
) -> Result<ScoreVector> {
    let first = pool
        .first()
        .ok_or_else(|| Error::invalid("pool is empty"))?;
    let draws = first.draws();
    if pool.iter().any(|p| p.draws() != draws) {
        return Err(Error::invalid(
            "pool matrices come from different draw sets",
        ));
    }
    let (scores, floored): (Vec<(ItemId, f64)>, u64) = match (strategy, ts) {
        (Strategy::Passive, _) => {
            return Err(Error::invalid("passive scores come from score_passive"));
        }
        (Strategy::Goal, None) => return Err(Error::invalid("goal strategy needs a test summary")),
        (Strategy::Entropy | Strategy::Curiosity, Some(_)) => {
            return Err(Error::invalid(format!(
                "{strategy} strategy takes no test summary"
            )));
        }
        (Strategy::Entropy, None) => (
            pool.par_iter()
                .map(|p| (p.item(), score_entropy(p)))
                .collect(),
            0,
        ),
        (Strategy::Curiosity, None) => (
            pool.par_iter()
                .map(|p| (p.item(), score_curiosity(p)))
                .collect(),
            0,
        ),
        (Strategy::Goal, Some(ts)) => {
            let scored = pool
                .par_iter()
                .map(|p| score_goal_fast(p, ts).map(|g| ((p.item(), g.value), g.floored_divisions)))
                .collect::<Result<Vec<_>>>()?;
            let floored = scored.iter().map(|(_, f)| f).sum();
            (scored.into_iter().map(|(s, _)| s).collect(), floored)
        }
    };
    Ok(ScoreVector {
        strategy,
        scores,
        meta: ScoreMeta {
            samples: Some(first.samples()),
            seed: draws.seed,
            test_size: ts.map(TestSummary::test_size),
            floored_divisions: floored,
        },
    })
}
