use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::vote::{Tier, TierVerdict};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierRow {
    pub count: usize,
    pub correct: usize,
}

impl TierRow {
    /// `None` for an empty tier.
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }

    fn percent(&self) -> String {
        match self.accuracy() {
            Some(a) => format!("{:.2}%", 100.0 * a),
            None => "n/a".into(),
        }
    }
}

/// Per-tier accuracy and counts, plus the overall row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierReport {
    pub original_good: TierRow,
    pub bad_1: TierRow,
    pub bad_2: TierRow,
    pub overall: TierRow,
}

impl TierReport {
    pub fn row(&self, tier: Tier) -> &TierRow {
        match tier {
            Tier::OriginalGood => &self.original_good,
            Tier::Bad1 => &self.bad_1,
            Tier::Bad2 => &self.bad_2,
        }
    }

    /// Two pipe tables: accuracy by tier, then counts by tier.
    pub fn render(&self, title: &str) -> String {
        let rows = [&self.original_good, &self.bad_1, &self.bad_2, &self.overall];
        let header = "| Original Good | Bad 1 | Bad 2 | Overall |";
        let mut out = String::new();
        let _ = writeln!(out, "{title} Test Accuracy Breakdown\n{header}\n|---|---|---|---|");
        let cells: Vec<String> = rows.iter().map(|r| r.percent()).collect();
        let _ = writeln!(out, "| {} |\n", cells.join(" | "));
        let _ = writeln!(out, "{title} Test Count Breakdown\n{header}\n|---|---|---|---|");
        let cells: Vec<String> = rows.iter().map(|r| r.count.to_string()).collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        out
    }
}

/// Scores `labels` against `truth`, grouped by each point's tier.
pub fn tier_report(tiers: &[TierVerdict], labels: &[usize], truth: &[usize]) -> Result<TierReport> {
    if tiers.len() != labels.len() || labels.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "tiers/labels/truth",
            left: tiers.len(),
            right: labels.len().min(truth.len()),
        });
    }
    let zero = TierRow { count: 0, correct: 0 };
    let mut report = TierReport {
        original_good: zero,
        bad_1: zero,
        bad_2: zero,
        overall: zero,
    };
    for ((t, &y_hat), &y) in tiers.iter().zip(labels).zip(truth) {
        let hit = usize::from(y_hat == y);
        let row = match t.tier {
            Tier::OriginalGood => &mut report.original_good,
            Tier::Bad1 => &mut report.bad_1,
            Tier::Bad2 => &mut report.bad_2,
        };
        row.count += 1;
        row.correct += hit;
        report.overall.count += 1;
        report.overall.correct += hit;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(tier: Tier, label: usize) -> TierVerdict {
        TierVerdict { tier, label }
    }

    #[test]
    fn all_correct() {
        let tiers = vec![v(Tier::OriginalGood, 1), v(Tier::Bad1, 2), v(Tier::Bad2, 0)];
        let r = tier_report(&tiers, &[1, 2, 0], &[1, 2, 0]).unwrap();
        for t in Tier::ALL {
            assert_eq!(r.row(t).accuracy(), Some(1.0));
        }
        assert_eq!(r.overall.count, 3);
    }

    #[test]
    fn scripted_fixture_cells() {
        use Tier::*;
        let tiers: Vec<TierVerdict> = [OriginalGood, OriginalGood, OriginalGood, OriginalGood, Bad1, Bad1, Bad1, Bad2]
            .iter()
            .map(|&t| v(t, 0))
            .collect();
        let labels = [0, 0, 0, 1, 0, 1, 1, 1];
        let truth = [0, 0, 0, 0, 0, 0, 1, 0];
        let r = tier_report(&tiers, &labels, &truth).unwrap();
        assert_eq!(r.original_good, TierRow { count: 4, correct: 3 });
        assert_eq!(r.bad_1, TierRow { count: 3, correct: 2 });
        assert_eq!(r.bad_2, TierRow { count: 1, correct: 0 });
        assert_eq!(r.overall, TierRow { count: 8, correct: 5 });
        let text = r.render("Small Model");
        assert!(text.contains("| 75.00% | 66.67% | 0.00% | 62.50% |"), "{text}");
        assert!(text.contains("| 4 | 3 | 1 | 8 |"));
    }

    #[test]
    fn counts_sum_to_total() {
        // mirrors a 10000-point test set split 5853 / 2106 / 2041
        let mut tiers = vec![v(Tier::OriginalGood, 0); 5853];
        tiers.extend(vec![v(Tier::Bad1, 0); 2106]);
        tiers.extend(vec![v(Tier::Bad2, 0); 2041]);
        let r = tier_report(&tiers, &[0; 10_000], &[0; 10_000]).unwrap();
        assert_eq!(r.original_good.count + r.bad_1.count + r.bad_2.count, 10_000);
        assert!(r.render("Small Model").contains("| 5853 | 2106 | 2041 | 10000 |"));
        let empty = tier_report(&[], &[], &[]).unwrap();
        assert!(empty.render("x").contains("n/a"));
    }
}
