use serde::{Deserialize, Serialize};

use crate::nn::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "original_good")]
    OriginalGood,
    #[serde(rename = "bad_1")]
    Bad1,
    #[serde(rename = "bad_2")]
    Bad2,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::OriginalGood, Tier::Bad1, Tier::Bad2];

    pub fn title(self) -> &'static str {
        match self {
            Tier::OriginalGood => "Original Good",
            Tier::Bad1 => "Bad 1",
            Tier::Bad2 => "Bad 2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierVerdict {
    pub tier: Tier,
    pub label: usize,
}

/// How good-voting members must agree before a label is returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VoteRule {
    /// Most common label; ties broken by the summed probabilities of the tied
    /// labels over the good members, then by the lowest class index.
    #[default]
    Plurality,
    /// Every good member must predict the same label.
    Unanimity,
}

/// One member's opinion on one point.
#[derive(Debug, Clone, Copy)]
pub struct Ballot<'a> {
    pub good: bool,
    pub probs: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub label: usize,
    /// Members deeming the point good.
    pub good_count: usize,
    /// Good members whose own prediction is `label`.
    pub agreeing: usize,
}

/// Returns a label when at least `⌈m/2⌉` of the `m` members call the point good.
pub fn good_vote(ballots: &[Ballot<'_>], rule: VoteRule) -> Option<VoteOutcome> {
    let m = ballots.len();
    let good: Vec<&Ballot<'_>> = ballots.iter().filter(|b| b.good).collect();
    if m == 0 || good.len() < m.div_ceil(2) {
        return None;
    }
    let classes = good[0].probs.len();
    let mut counts = vec![0usize; classes];
    for b in &good {
        counts[argmax(b.probs)] += 1;
    }
    let top = *counts.iter().max().expect("nonempty");
    let label = match rule {
        VoteRule::Unanimity if top != good.len() => return None,
        _ => {
            let tied: Vec<usize> = (0..classes).filter(|&c| counts[c] == top).collect();
            if tied.len() == 1 {
                tied[0]
            } else {
                let mass = |c: usize| good.iter().map(|b| b.probs[c]).sum::<f64>();
                let mut best = tied[0];
                for &c in &tied[1..] {
                    if mass(c) > mass(best) {
                        best = c;
                    }
                }
                best
            }
        }
    };
    Some(VoteOutcome {
        label,
        good_count: good.len(),
        agreeing: counts[label],
    })
}

/// Argmax of the element-wise sum of every member's probabilities.
pub fn summed_argmax(ballots: &[Ballot<'_>]) -> usize {
    let mut sum = vec![0.0; ballots[0].probs.len()];
    for b in ballots {
        for (s, p) in sum.iter_mut().zip(b.probs) {
            *s += p;
        }
    }
    argmax(&sum)
}

/// Model-1 good vote, then model-2 good vote, then the model-2 probability sum.
pub fn assign_tier(model1: &[Ballot<'_>], model2: &[Ballot<'_>], rule: VoteRule) -> TierVerdict {
    if let Some(v) = good_vote(model1, rule) {
        return TierVerdict {
            tier: Tier::OriginalGood,
            label: v.label,
        };
    }
    if let Some(v) = good_vote(model2, rule) {
        return TierVerdict {
            tier: Tier::Bad1,
            label: v.label,
        };
    }
    TierVerdict {
        tier: Tier::Bad2,
        label: summed_argmax(model2),
    }
}
