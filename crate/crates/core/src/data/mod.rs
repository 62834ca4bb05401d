//! Datasets, IDX loading, label corruption and continual-learning tasks.

mod corrupt;
mod idx;
mod tasks;

pub use corrupt::{corrupt_asymmetric, corrupt_symmetric, write_corruption_manifest, Corruption};
pub use idx::{load_idx, load_mnist, parse_idx_images, parse_idx_labels, IdxImages};
pub use tasks::{make_permuted_tasks, make_split_tasks, Task, TaskKind, TaskSequence};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Inputs as an `(n, d)` matrix plus integer labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F> {
    images: Tensor<F>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<F: Real> Dataset<F> {
    pub fn new(images: Tensor<F>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 2 {
            return Err(crate::error::shape_err("images", format!("expected (n, d), got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(crate::error::shape_err(
                "labels",
                format!("{} labels for {} images", labels.len(), images.rows()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset has no examples".into()));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::OutOfRange(format!("label {y} at index {i} with {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_width(&self) -> usize {
        self.images.row_len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &Tensor<F> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Same images, different labels (e.g. after corruption).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.images.clone(), labels, self.num_classes)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.input_width();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfRange(format!("row {i} of a {}-example dataset", self.len())));
            }
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(Tensor::matrix(indices.len(), d, data)?, labels, self.num_classes)
    }

    /// The first `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Copies rows `indices` into a batch matrix and label vector.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let d = self.input_width();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::matrix(indices.len(), d, data).expect("rows of width d"), labels)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn cast<G: Real>(&self) -> Dataset<G> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }

    pub(crate) fn map_images(&self, f: impl Fn(&[F], &mut [F])) -> Self {
        let d = self.input_width();
        let mut data = vec![F::zero(); self.images.len()];
        for (src, dst) in self.images.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            f(src, dst);
        }
        Self {
            images: Tensor::matrix(self.len(), d, data).expect("same shape"),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Per-pixel means, accumulated in f64.
pub fn pixel_means<F: Real>(data: &Dataset<F>) -> Vec<f64> {
    let d = data.input_width();
    let mut sum = vec![0.0f64; d];
    for row in data.images().data().chunks_exact(d) {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += v.as_f64();
        }
    }
    let n = data.len() as f64;
    sum.into_iter().map(|s| s / n).collect()
}

/// Subtracts the training split's per-pixel mean from both splits.
pub fn normalize<F: Real>(train: &Dataset<F>, test: &Dataset<F>) -> Result<(Dataset<F>, Dataset<F>)> {
    if train.input_width() != test.input_width() {
        return Err(crate::error::shape_err(
            "test",
            format!("width {} vs training width {}", test.input_width(), train.input_width()),
        ));
    }
    let means = pixel_means(train);
    let shift = |src: &[F], dst: &mut [F]| {
        for ((d, &s), &m) in dst.iter_mut().zip(src).zip(&means) {
            *d = F::of(s.as_f64() - m);
        }
    };
    Ok((train.map_images(shift), test.map_images(shift)))
}
