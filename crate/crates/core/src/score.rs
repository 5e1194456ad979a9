//! Class-by-proposal score matrices detached from the tape.

use crate::autodiff::Tensor;
use crate::error::{argument, Result};

/// Scores indexed `[class][proposal]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    classes: usize,
    proposals: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(classes: usize, proposals: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * proposals {
            return Err(argument!(
                "{} values for a {classes}x{proposals} score matrix",
                data.len()
            ));
        }
        Ok(Self {
            classes,
            proposals,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let proposals = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != proposals) {
            return Err(argument!("ragged score rows"));
        }
        Self::new(rows.len(), proposals, rows.concat())
    }

    /// Transposes a proposal-major `[J, C]` tensor.
    pub fn from_proposal_major(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(argument!("expected a [J, C] tensor, got {:?}", t.shape()));
        }
        let (j, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let data = (0..c).flat_map(|ci| (0..j).map(move |ji| src[ji * c + ci])).collect();
        Self::new(c, j, data)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn proposals(&self) -> usize {
        self.proposals
    }

    pub fn get(&self, class: usize, proposal: usize) -> f64 {
        self.data[class * self.proposals + proposal]
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.data[class * self.proposals..(class + 1) * self.proposals]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sum over classes for one proposal.
    pub fn column_sum(&self, proposal: usize) -> f64 {
        (0..self.classes).map(|c| self.get(c, proposal)).sum()
    }

    /// Elementwise mean of equally shaped matrices.
    pub fn mean(items: &[ScoreMatrix]) -> Result<Self> {
        let first = items.first().ok_or_else(|| argument!("mean of no score matrices"))?;
        if items
            .iter()
            .any(|m| m.classes != first.classes || m.proposals != first.proposals)
        {
            return Err(argument!("score matrices differ in shape"));
        }
        let n = items.len() as f64;
        let data = (0..first.data.len())
            .map(|i| items.iter().map(|m| m.data[i]).sum::<f64>() / n)
            .collect();
        Self::new(first.classes, first.proposals, data)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_from_proposal_major() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = ScoreMatrix::from_proposal_major(&t).unwrap();
        assert_eq!(m.row(0), &[1.0, 3.0, 5.0]);
        assert_eq!(m.row(1), &[2.0, 4.0, 6.0]);
        assert_eq!(m.get(1, 2), 6.0);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax([0.5, 0.5]), Some(0));
        assert_eq!(argmax([0.1, 0.7, 0.2]), Some(1));
        assert_eq!(argmax(Vec::<f64>::new()), None);
    }
}
