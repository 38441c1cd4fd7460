use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vote::{Tier, TierVerdict};
use crate::error::{Error, Result};
use crate::nn::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Original,
    Bad,
}

/// Class scores from a model trained outside this crate, one row per test point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalPredictions {
    pub tag: ModelTag,
    pub scores: Vec<Vec<f64>>,
}

impl ExternalPredictions {
    pub fn new(tag: ModelTag, scores: Vec<Vec<f64>>) -> Result<Self> {
        let classes = scores.first().map_or(0, Vec::len);
        if classes == 0 {
            return Err(Error::Empty("score rows"));
        }
        if let Some(bad) = scores.iter().find(|r| r.len() != classes) {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got: bad.len(),
            });
        }
        Ok(ExternalPredictions { tag, scores })
    }

    pub fn classes(&self) -> usize {
        self.scores[0].len()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// CSV with header `score_0,...,score_{C-1}` and one row of scores per point.
    pub fn load_csv(path: &Path, tag: ModelTag) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
        let classes = header.split(',').count();
        for (c, name) in header.split(',').enumerate() {
            if name.trim() != format!("score_{c}") {
                return Err(parse_err(1, format!("expected column score_{c}, found {:?}", name.trim())));
            }
        }
        let mut scores = Vec::new();
        for (i, line) in lines {
            let row: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(i + 1, e.to_string()))?;
            if row.len() != classes {
                return Err(parse_err(i + 1, format!("{} scores, header declares {classes}", row.len())));
            }
            scores.push(row);
        }
        ExternalPredictions::new(tag, scores)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header: Vec<String> = (0..self.classes()).map(|c| format!("score_{c}")).collect();
        let mut out = header.join(",");
        out.push('\n');
        for row in &self.scores {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Original-model argmax for the two upper tiers, bad-model argmax for `bad_2`.
pub fn large_model_route(
    tiers: &[TierVerdict],
    original: &ExternalPredictions,
    bad: &ExternalPredictions,
) -> Result<Vec<usize>> {
    for p in [original, bad] {
        if p.len() != tiers.len() {
            return Err(Error::LengthMismatch {
                what: "tiers/external predictions",
                left: tiers.len(),
                right: p.len(),
            });
        }
    }
    if original.classes() != bad.classes() {
        return Err(Error::DimensionMismatch {
            expected: original.classes(),
            got: bad.classes(),
        });
    }
    Ok(tiers
        .iter()
        .enumerate()
        .map(|(i, t)| match t.tier {
            Tier::OriginalGood | Tier::Bad1 => argmax(&original.scores[i]),
            Tier::Bad2 => argmax(&bad.scores[i]),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdicts(tiers: &[Tier]) -> Vec<TierVerdict> {
        tiers.iter().map(|&tier| TierVerdict { tier, label: 0 }).collect()
    }

    #[test]
    fn routes_by_tier() {
        let original = ExternalPredictions::new(
            ModelTag::Original,
            vec![
                vec![0.9, 0.1, 0.0],
                vec![0.1, 0.8, 0.1],
                vec![0.2, 0.2, 0.6],
                vec![0.7, 0.2, 0.1],
                vec![0.1, 0.1, 0.8],
                vec![0.3, 0.6, 0.1],
            ],
        )
        .unwrap();
        let bad = ExternalPredictions::new(
            ModelTag::Bad,
            vec![
                vec![0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        )
        .unwrap();
        use Tier::*;
        let tiers = verdicts(&[OriginalGood, Bad1, Bad2, Bad2, OriginalGood, Bad1]);
        assert_eq!(large_model_route(&tiers, &original, &bad).unwrap(), vec![0, 1, 1, 2, 2, 1]);
        let all_good = verdicts(&[OriginalGood; 6]);
        assert_eq!(large_model_route(&all_good, &original, &bad).unwrap(), vec![0, 1, 2, 0, 2, 1]);
        let all_bad = verdicts(&[Bad2; 6]);
        assert_eq!(large_model_route(&all_bad, &original, &bad).unwrap(), vec![2, 0, 1, 2, 0, 2]);
        assert!(large_model_route(&all_bad[..5], &original, &bad).is_err());
        let narrow = ExternalPredictions::new(ModelTag::Bad, vec![vec![0.5, 0.5]; 6]).unwrap();
        assert!(large_model_route(&all_bad, &original, &narrow).is_err());
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        let preds = ExternalPredictions::new(ModelTag::Original, vec![vec![0.1, 0.7, 0.2], vec![1e-300, 0.5, 0.49]]).unwrap();
        preds.write_csv(&p).unwrap();
        assert_eq!(ExternalPredictions::load_csv(&p, ModelTag::Original).unwrap(), preds);
        fs::write(&p, "a,b\n0.1,0.2\n").unwrap();
        assert!(ExternalPredictions::load_csv(&p, ModelTag::Bad).is_err());
        fs::write(&p, "score_0,score_1\n0.1\n").unwrap();
        assert!(ExternalPredictions::load_csv(&p, ModelTag::Bad).is_err());
    }
}
