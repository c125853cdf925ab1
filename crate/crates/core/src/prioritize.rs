//! Ranking test inputs by surprise, accuracy-vs-rank curves, and subset selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surprise::LsaScores;

/// Subset sizes used for small-image-count labels.
pub const SUBSET_PRESET_SMALL: [usize; 3] = [30, 50, 70];
/// Subset sizes used for large-test-set labels.
pub const SUBSET_PRESET_LARGE: [usize; 3] = [100, 300, 500];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Descending,
    Ascending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub scores: LsaScores,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub ks: Vec<usize>,
    pub acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub requested: usize,
    pub shortfall: bool,
}

/// Stable argsort of the scores; ties keep original index order.
pub fn rank_by_lsa(scores: &LsaScores, direction: Direction) -> Ranking {
    let v = &scores.values;
    let mut order: Vec<usize> = (0..v.len()).collect();
    match direction {
        Direction::Descending => order.sort_by(|&a, &b| v[b].total_cmp(&v[a])),
        Direction::Ascending => order.sort_by(|&a, &b| v[a].total_cmp(&v[b])),
    }
    Ranking { order, scores: scores.clone(), direction }
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub fn cumulative_accuracy_curve(ranking: &Ranking, correct: &[bool]) -> Result<AccuracyCurve> {
    cumulative_accuracy(&ranking.order, correct)
}

/// Prefix accuracy along an arbitrary order of indices.
pub fn cumulative_accuracy(order: &[usize], correct: &[bool]) -> Result<AccuracyCurve> {
    if order.len() != correct.len() {
        return Err(Error::Shape(format!(
            "ranking has {} entries, correctness vector has {}",
            order.len(),
            correct.len()
        )));
    }
    let mut hits = 0usize;
    let mut ks = Vec::with_capacity(order.len());
    let mut acc = Vec::with_capacity(order.len());
    for (i, &idx) in order.iter().enumerate() {
        let c = *correct
            .get(idx)
            .ok_or_else(|| Error::Shape(format!("ranking index {idx} out of range")))?;
        hits += c as usize;
        ks.push(i + 1);
        acc.push(hits as f64 / (i + 1) as f64);
    }
    Ok(AccuracyCurve { ks, acc })
}

impl AccuracyCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,accuracy\n");
        for (k, a) in self.ks.iter().zip(&self.acc) {
            out.push_str(&format!("{k},{a}\n"));
        }
        out
    }

    pub fn last(&self) -> Option<f64> {
        self.acc.last().copied()
    }
}

/// First `k` ranked indices the original model classifies correctly.
pub fn select_top_k_correct(ranking: &Ranking, original_correct: &[bool], k: usize) -> Result<Selection> {
    if k == 0 {
        return Err(Error::InvalidArgument("subset size must be >= 1".into()));
    }
    if original_correct.len() != ranking.len() {
        return Err(Error::Shape(format!(
            "ranking has {} entries, correctness vector has {}",
            ranking.len(),
            original_correct.len()
        )));
    }
    let indices: Vec<usize> = ranking.order.iter().copied().filter(|&i| original_correct[i]).take(k).collect();
    let shortfall = indices.len() < k;
    if shortfall {
        log::warn!("only {} correctly classified inputs available for a subset of {k}", indices.len());
    }
    Ok(Selection { indices, requested: k, shortfall })
}
