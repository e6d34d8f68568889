//! Labeled image datasets and the seeded, label-stratified train/val split.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

/// Which half of the search split a batch came from. The weight step must
/// only ever see `Train`, the architecture step only `Val`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    /// Full dataset, outside the bi-level split (benchmark training etc.).
    Whole,
}

/// In-memory classification dataset: images `[n, c, h, w]` stored flat.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    pub tag: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Assemble a batch from sample indices.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let il = self.image_len();
        let [c, h, w] = self.image_shape;
        let mut images = Vec::with_capacity(indices.len() * il);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(&self.images[i * il..(i + 1) * il]);
            labels.push(self.labels[i]);
        }
        Batch {
            images: Tensor::from_vec(vec![indices.len(), c, h, w], images)
                .expect("batch assembly"),
            labels,
            num_classes: self.num_classes,
            tag: self.tag,
        }
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// A materialized minibatch with its split tag.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub tag: SplitTag,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One-hot encode the labels as an `[n, k]` tensor.
    pub fn onehot(&self) -> Tensor {
        let n = self.labels.len();
        let k = self.num_classes;
        let mut t = Tensor::zeros(&[n, k]);
        for (i, &l) in self.labels.iter().enumerate() {
            t.data_mut()[i * k + l] = 1.0;
        }
        t
    }
}

/// Disjoint, seed-deterministic, label-stratified split.
///
/// Per class the indices are shuffled with the `data` sub-stream of `seed`
/// and the first `ratio` fraction goes to train. Errors if any class would
/// end up absent from either side.
pub fn split_dataset(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    let mut rng = rng::stream(seed, "data/split");
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for class in 0..dataset.num_classes {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64) * ratio).round() as usize;
        if n_train == 0 || n_train == idx.len() {
            return Err(Error::InvalidConfig(format!(
                "class {class} would be absent from one side of the split \
                 ({} samples, ratio {ratio})",
                idx.len()
            )));
        }
        train_idx.extend_from_slice(&idx[..n_train]);
        val_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((
        subset(dataset, &train_idx, SplitTag::Train),
        subset(dataset, &val_idx, SplitTag::Val),
    ))
}

fn subset(dataset: &Dataset, indices: &[usize], tag: SplitTag) -> Dataset {
    let il = dataset.image_len();
    let mut images = Vec::with_capacity(indices.len() * il);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        images.extend_from_slice(&dataset.images[i * il..(i + 1) * il]);
        labels.push(dataset.labels[i]);
    }
    Dataset {
        images,
        labels,
        image_shape: dataset.image_shape,
        num_classes: dataset.num_classes,
        tag,
    }
}

/// Shuffled epoch order over a split, from an explicit generator.
pub fn epoch_order(len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx
}
