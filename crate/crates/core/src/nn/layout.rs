use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// One-hot semantic mask `m` of shape `N×C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLayout {
    mask: Tensor<f32>,
}

impl SemanticLayout {
    /// Validates that every pixel holds exactly one active class.
    pub fn new(mask: Tensor<f32>) -> Result<Self> {
        let (n, c, h, w) = mask.dims4()?;
        let hw = h * w;
        for ni in 0..n {
            for p in 0..hw {
                let mut total = 0.0;
                for ci in 0..c {
                    let v = mask.data()[(ni * c + ci) * hw + p];
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Invalid(format!("mask entry {v} is not 0 or 1")));
                    }
                    total += v;
                }
                if total != 1.0 {
                    return Err(Error::Invalid(format!(
                        "sample {ni} pixel {p} has {total} active classes"
                    )));
                }
            }
        }
        Ok(Self { mask })
    }

    /// Builds a layout from per-sample class-id grids.
    pub fn from_ids(ids: &[&[u8]], num_classes: usize, height: usize, width: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Invalid("layout needs at least one sample".into()));
        }
        let hw = height * width;
        let mut data = vec![0.0f32; ids.len() * num_classes * hw];
        for (ni, grid) in ids.iter().enumerate() {
            if grid.len() != hw {
                return shape_err("one_hot", format!("grid of {} ids for {height}×{width}", grid.len()));
            }
            for (p, &id) in grid.iter().enumerate() {
                let id = id as usize;
                if id >= num_classes {
                    return Err(Error::Invalid(format!(
                        "class id {id} out of range for {num_classes} classes"
                    )));
                }
                data[(ni * num_classes + id) * hw + p] = 1.0;
            }
        }
        Ok(Self {
            mask: Tensor::new(&[ids.len(), num_classes, height, width], data)?,
        })
    }

    pub fn mask(&self) -> &Tensor<f32> {
        &self.mask
    }

    pub fn batch(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[3]
    }

    /// Class id per pixel, one grid per sample.
    pub fn argmax(&self) -> Vec<Vec<u8>> {
        argmax_channels(&self.mask)
    }

    /// Pixel count of each class summed over the batch.
    pub fn class_counts(&self) -> Vec<u64> {
        let (n, c, h, w) = (self.batch(), self.num_classes(), self.height(), self.width());
        let hw = h * w;
        (0..c)
            .map(|ci| {
                (0..n)
                    .map(|ni| {
                        let s = (ni * c + ci) * hw;
                        self.mask.data()[s..s + hw].iter().filter(|&&v| v == 1.0).count() as u64
                    })
                    .sum()
            })
            .collect()
    }
}

/// Per-pixel argmax over the channel axis of an `N×C×H×W` tensor.
pub fn argmax_channels<T: crate::tensor::Float>(t: &Tensor<T>) -> Vec<Vec<u8>> {
    let (n, c, h, w) = t.dims4().expect("4-D tensor");
    let hw = h * w;
    (0..n)
        .map(|ni| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for ci in 1..c {
                        if t.data()[(ni * c + ci) * hw + p] > t.data()[(ni * c + best) * hw + p] {
                            best = ci;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}
