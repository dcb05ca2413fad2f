//! Fleiss' kappa over an items x categories count matrix.
//!
//! Generic over any field-like number type, so it runs on `f32`/`f64` and
//! on exact rationals alike.

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KappaError {
    #[error("rating matrix has no items")]
    Empty,
    #[error("need at least 2 raters per item, got {0}")]
    TooFewRaters(usize),
    #[error("item {item} has {got} ratings, expected {expected}")]
    RowSum {
        item: usize,
        got: usize,
        expected: usize,
    },
    #[error("item {item} has {got} categories, expected {expected}")]
    Ragged {
        item: usize,
        got: usize,
        expected: usize,
    },
    #[error("kappa undefined: chance agreement is 1 but observed agreement is not")]
    Undefined,
}

/// Category counts per item; every row sums to `n_raters`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingMatrix {
    counts: Vec<Vec<usize>>,
    n_raters: usize,
}

impl RatingMatrix {
    pub fn new(counts: Vec<Vec<usize>>) -> Result<Self, KappaError> {
        let first = counts.first().ok_or(KappaError::Empty)?;
        let n_raters: usize = first.iter().sum();
        let k = first.len();
        if n_raters < 2 {
            return Err(KappaError::TooFewRaters(n_raters));
        }
        for (item, row) in counts.iter().enumerate() {
            if row.len() != k {
                return Err(KappaError::Ragged {
                    item,
                    got: row.len(),
                    expected: k,
                });
            }
            let got: usize = row.iter().sum();
            if got != n_raters {
                return Err(KappaError::RowSum {
                    item,
                    got,
                    expected: n_raters,
                });
            }
        }
        Ok(RatingMatrix { counts, n_raters })
    }

    /// Builds the matrix from per-item category labels (one label per rater).
    pub fn from_labels(items: &[Vec<usize>], n_categories: usize) -> Result<Self, KappaError> {
        let counts = items
            .iter()
            .map(|labels| {
                let mut row = vec![0; n_categories];
                for &l in labels {
                    row[l] += 1;
                }
                row
            })
            .collect();
        Self::new(counts)
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn n_raters(&self) -> usize {
        self.n_raters
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }

    pub fn n_categories(&self) -> usize {
        self.counts[0].len()
    }
}

/// `(P - Pe) / (1 - Pe)`; exactly 1 when observed agreement is perfect.
pub fn fleiss_kappa<T>(m: &RatingMatrix) -> Result<T, KappaError>
where
    T: Num + FromPrimitive + Clone + PartialEq,
{
    let num = |x: usize| T::from_usize(x).expect("count representable");
    let n = m.n_raters;
    let items = m.n_items();
    let mut p_bar = T::zero();
    for row in &m.counts {
        let sq: usize = row.iter().map(|c| c * c).sum();
        p_bar = p_bar + num(sq - n) / num(n * (n - 1));
    }
    p_bar = p_bar / num(items);
    if p_bar == T::one() {
        return Ok(T::one());
    }
    let total = num(items * n);
    let mut p_e = T::zero();
    for j in 0..m.n_categories() {
        let col: usize = m.counts.iter().map(|r| r[j]).sum();
        let p = num(col) / total.clone();
        p_e = p_e + p.clone() * p;
    }
    if p_e == T::one() {
        return Err(KappaError::Undefined);
    }
    Ok((p_bar - p_e.clone()) / (T::one() - p_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    #[test]
    fn split_two_one_is_minus_half_exactly() {
        let m = RatingMatrix::new(vec![vec![2, 1]; 10]).unwrap();
        let k: Ratio<i64> = fleiss_kappa(&m).unwrap();
        assert_eq!(k, Ratio::new(-1, 2));
        let f: f64 = fleiss_kappa(&m).unwrap();
        assert!((f + 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_agreement() {
        let m = RatingMatrix::new(vec![vec![3, 0], vec![0, 3]]).unwrap();
        assert_eq!(fleiss_kappa::<f64>(&m).unwrap(), 1.0);
        let single = RatingMatrix::new(vec![vec![0, 3, 0]; 4]).unwrap();
        assert_eq!(fleiss_kappa::<f32>(&single).unwrap(), 1.0);
    }

    #[test]
    fn validation() {
        assert_eq!(RatingMatrix::new(vec![]), Err(KappaError::Empty));
        assert!(matches!(
            RatingMatrix::new(vec![vec![2, 1], vec![1, 1]]),
            Err(KappaError::RowSum { item: 1, .. })
        ));
        assert!(matches!(
            RatingMatrix::new(vec![vec![1, 0]]),
            Err(KappaError::TooFewRaters(1))
        ));
    }
}
