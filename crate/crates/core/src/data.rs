use crate::matrix::Matrix;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("{features} feature rows but {labels} labels")]
    Mismatch { features: usize, labels: usize },
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    Label {
        row: usize,
        label: usize,
        classes: usize,
    },
}

/// Labelled images, one flattened image per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f32> {
    features: Matrix<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if features.rows() != labels.len() {
            return Err(DataError::Mismatch {
                features: features.rows(),
                labels: labels.len(),
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::Label {
                row,
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Self {
            features: Matrix::from_vec(indices.len(), d, data).unwrap(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            features: self.features.map(|v| U::from_f64_lossy(v.as_f64())),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}
