use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;

/// Flattened representations of one checkpoint, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMatrix {
    pub checkpoint: usize,
    pub dim: usize,
    /// Row-major `images x dim`.
    pub data: Vec<f64>,
}

impl CheckpointMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Per-image, per-checkpoint flattened representation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    pub image_ids: Vec<usize>,
    pub checkpoints: Vec<CheckpointMatrix>,
}

impl RepresentationSet {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn checkpoint(&self, id: usize) -> Option<&CheckpointMatrix> {
        self.checkpoints.iter().find(|c| c.checkpoint == id)
    }

    /// Builds a set from explicit rows: `vectors[image][k]` is the vector of
    /// the `k`-th listed checkpoint.
    pub fn from_vectors(image_ids: Vec<usize>, checkpoint_ids: &[usize], vectors: &[Vec<Vec<f64>>]) -> Result<Self> {
        if image_ids.len() != vectors.len() {
            return Err(Error::InvalidArgument("one vector list per image id is required".into()));
        }
        let mut checkpoints = Vec::with_capacity(checkpoint_ids.len());
        for (k, &id) in checkpoint_ids.iter().enumerate() {
            let dim = vectors.first().map_or(0, |v| v[k].len());
            if dim == 0 {
                return Err(Error::InvalidArgument(format!("checkpoint {id} has no values")));
            }
            let mut data = Vec::with_capacity(dim * vectors.len());
            for v in vectors {
                if v.len() != checkpoint_ids.len() || v[k].len() != dim {
                    return Err(Error::shape("representations", format!("ragged vectors at checkpoint {id}")));
                }
                data.extend_from_slice(&v[k]);
            }
            checkpoints.push(CheckpointMatrix { checkpoint: id, dim, data });
        }
        Ok(RepresentationSet { image_ids, checkpoints })
    }
}

/// Runs every image through `model` and keeps the selected checkpoints (all
/// when `selection` is `None`), flattened in row-major CHW order.
pub fn extract_representations(
    model: &Model,
    images: &[Tensor],
    image_ids: &[usize],
    selection: Option<&[usize]>,
) -> Result<RepresentationSet> {
    if images.len() != image_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} ids",
            images.len(),
            image_ids.len()
        )));
    }
    let available = model.checkpoints();
    let chosen: Vec<usize> = match selection {
        None => available.iter().map(|c| c.id).collect(),
        Some(ids) => {
            for id in ids {
                if !available.iter().any(|c| c.id == *id) {
                    return Err(Error::InvalidArgument(format!(
                        "checkpoint {id} does not exist (model has {})",
                        available.len()
                    )));
                }
            }
            let mut ids = ids.to_vec();
            ids.sort_unstable();
            ids.dedup();
            ids
        }
    };
    let taps: Vec<Vec<Tensor>> = images
        .par_iter()
        .map(|x| model.forward_with_checkpoints(x).map(|(_, taps)| taps))
        .collect::<Result<_>>()?;
    let checkpoints = chosen
        .iter()
        .map(|&id| {
            let dim = available[id - 1].dim();
            let mut data = Vec::with_capacity(dim * images.len());
            for t in &taps {
                data.extend_from_slice(t[id - 1].data());
            }
            CheckpointMatrix { checkpoint: id, dim, data }
        })
        .collect();
    Ok(RepresentationSet {
        image_ids: image_ids.to_vec(),
        checkpoints,
    })
}
