use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `k` region feature vectors plus their mean pool.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    rows: Tensor,
    mean: Vec<f64>,
}

impl VisualFeatures {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("visual features"));
        }
        let rows = Tensor::from_rows(rows)?;
        let (k, d) = (rows.shape()[0], rows.shape()[1]);
        let mut mean = vec![0.0; d];
        for i in 0..k {
            for (m, v) in mean.iter_mut().zip(rows.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k as f64);
        Ok(VisualFeatures { rows, mean })
    }

    pub fn k(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_pool_is_row_average() {
        let f = VisualFeatures::new(&[vec![1.0, 2.0], vec![3.0, -2.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(f.k(), 3);
        assert_eq!(f.dim(), 2);
        assert!((f.mean()[0] - 2.0).abs() < 1e-12);
        assert!((f.mean()[1] - 1.0).abs() < 1e-12);
        assert!(VisualFeatures::new(&[]).is_err());
    }
}
