//! The point cloud type shared by every stage of the pipeline.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// `N` points in `d` dimensions, stored row-major. Always nonempty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Array2<f64>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::EmptyCloud);
        }
        if points.ncols() == 0 {
            return Err(Error::invalid("dim", "points must have at least one coordinate"));
        }
        for (row, r) in points.outer_iter().enumerate() {
            if let Some(col) = r.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, col });
            }
        }
        let points = if points.is_standard_layout() {
            points
        } else {
            points.as_standard_layout().to_owned()
        };
        Ok(Self { points })
    }

    /// Builds a cloud from `n * dim` row-major coordinates.
    pub fn from_flat(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::invalid(
                "points",
                format!("expected {} values for {n}x{dim}, got {}", n * dim, data.len()),
            ));
        }
        let points = Array2::from_shape_vec((n, dim), data)
            .map_err(|e| Error::invalid("points", e.to_string()))?;
        Self::new(points)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyCloud)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(rows.len(), dim, data)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    /// Always false; present for API symmetry with collections.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.points
    }

    /// Row-major coordinate buffer of length `len() * dim()`.
    pub fn as_slice(&self) -> &[f64] {
        self.points
            .as_slice()
            .expect("point storage is kept in standard layout")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.as_slice()[i * d..(i + 1) * d]
    }

    pub fn mean(&self) -> Vec<f64> {
        self.points
            .mean_axis(Axis(0))
            .expect("cloud is nonempty")
            .to_vec()
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        PointCloud::from_flat(indices.len(), d, data).expect("rows of a valid cloud are valid")
    }

    pub fn translated(&self, offset: &[f64]) -> Result<PointCloud> {
        self.ensure_dim(offset.len())?;
        let mut points = self.points.clone();
        for mut row in points.outer_iter_mut() {
            for (v, o) in row.iter_mut().zip(offset) {
                *v += o;
            }
        }
        PointCloud::new(points)
    }

    pub(crate) fn ensure_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: dim,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(
            PointCloud::new(Array2::zeros((0, 2))),
            Err(Error::EmptyCloud)
        ));
        assert!(matches!(
            PointCloud::new(array![[0.0, 1.0], [f64::NAN, 0.0]]),
            Err(Error::NonFinite { row: 1, col: 0 })
        ));
        assert!(PointCloud::new(array![[f64::INFINITY]]).is_err());
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let rows = vec![vec![0.0, 1.0], vec![2.0]];
        assert!(matches!(
            PointCloud::from_rows(&rows),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn non_standard_layout_is_normalized() {
        let t = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]].reversed_axes();
        let cloud = PointCloud::new(t).unwrap();
        assert_eq!(cloud.as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(cloud.row(2), &[3.0, 6.0]);
    }

    #[test]
    fn select_and_translate() {
        let cloud = PointCloud::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let picked = cloud.select(&[1, 1, 0]);
        assert_eq!(picked.len(), 3);
        assert_eq!(picked.row(0), &[1.0, 2.0]);
        let moved = cloud.translated(&[1.0, -1.0]).unwrap();
        assert_eq!(moved.row(1), &[2.0, 1.0]);
        assert_eq!(moved.mean(), vec![1.5, 0.0]);
        assert!(cloud.translated(&[1.0]).is_err());
    }
}
