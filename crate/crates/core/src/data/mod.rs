//! Dataset ingestion: MNIST, MNIST-BAG synthesis, and tissue patch extraction.

mod bags;
pub mod mnist;
mod render;
mod tissue;

pub use bags::{
    make_bags, make_bags_with_labels, matching_count_for, read_manifest, write_manifest, Bag,
    BagDatasetSpec,
};
pub use mnist::{load_mnist, MnistSplit};
pub use render::render_contact_sheet;
pub use tissue::{
    hsv, read_rgb_png, sample_patches, tissue_mask, write_png, TissueMask, TissueParams,
};

use crate::error::{Error, Result};
use crate::models::InputShape;
use crate::tensor::Tensor;

/// One image with pixel values in `[0, 1]`, stored row-major as `height × width × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInstance {
    pub id: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    /// Ground truth, used only for evaluation. Unknown for extracted patches.
    pub true_label: Option<usize>,
}

impl ImageInstance {
    pub fn shape(&self) -> InputShape {
        InputShape {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// The instances a run draws from. Instance ids equal their position in the pool.
#[derive(Clone, Debug)]
pub struct InstancePool {
    pub shape: InputShape,
    pub instances: Vec<ImageInstance>,
}

impl InstancePool {
    pub fn new(shape: InputShape, instances: Vec<ImageInstance>) -> Result<Self> {
        for (i, inst) in instances.iter().enumerate() {
            if inst.id != i {
                return Err(Error::Parameter(format!(
                    "instance at position {i} has id {}",
                    inst.id
                )));
            }
            if inst.shape() != shape {
                return Err(Error::shape(
                    format!("instance {i}"),
                    shape,
                    inst.shape(),
                ));
            }
        }
        Ok(Self { shape, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&ImageInstance> {
        self.instances
            .get(id)
            .ok_or_else(|| Error::Parameter(format!("unknown instance id {id}")))
    }

    /// Stacks the given instances into a `(B, H, W, C)` tensor.
    pub fn batch(&self, ids: &[usize]) -> Result<Tensor> {
        let refs = ids.iter().map(|&id| self.get(id)).collect::<Result<Vec<_>>>()?;
        stack(self.shape, &refs)
    }
}

/// Stacks instances of a common shape into a `(B, H, W, C)` tensor.
pub fn stack(shape: InputShape, instances: &[&ImageInstance]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(instances.len() * shape.len());
    for inst in instances {
        if inst.shape() != shape {
            return Err(Error::shape("batch instance", shape, inst.shape()));
        }
        data.extend(inst.pixels.iter().map(|&v| v as f64));
    }
    Tensor::new(shape.batch_shape(instances.len()), data)
}
