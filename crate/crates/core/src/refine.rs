//! Forward pass of the refinement block that turns the geometrically
//! projected BEV feature map into a content-refined map.
//!
//! The block is a fixed conv stack with same-padding throughout, so the
//! spatial grid is preserved:
//!
//! ```text
//! y1  = relu(conv7(x))
//! y2  = y1 + res3b(relu(res3a(y1)))
//! out = conv1(relu(y2))
//! ```
//!
//! All kernels share one channel count `C`. There are no normalization
//! layers; the forward pass is fully determined by the weight file.

use crate::tensor::{conv2d, ConvKernel, FeatureMap};
use crate::weights::{TensorData, WeightStore};
use crate::{Error, Result};

/// Weight names used in `CVWT` stores.
pub const WEIGHT_NAMES: [&str; 8] = [
    "refine.conv7.w",
    "refine.conv7.b",
    "refine.res3a.w",
    "refine.res3a.b",
    "refine.res3b.w",
    "refine.res3b.b",
    "refine.conv1.w",
    "refine.conv1.b",
];

/// Kernels and biases of one refinement block.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineWeights {
    channels: usize,
    conv7: ConvKernel,
    conv7_bias: Vec<f64>,
    res3a: ConvKernel,
    res3a_bias: Vec<f64>,
    res3b: ConvKernel,
    res3b_bias: Vec<f64>,
    conv1: ConvKernel,
    conv1_bias: Vec<f64>,
}

impl RefineWeights {
    /// All-zero weights for `channels` channels.
    pub fn zeros(channels: usize) -> Self {
        RefineWeights {
            channels,
            conv7: ConvKernel::zeros(7, channels, channels),
            conv7_bias: vec![0.0; channels],
            res3a: ConvKernel::zeros(3, channels, channels),
            res3a_bias: vec![0.0; channels],
            res3b: ConvKernel::zeros(3, channels, channels),
            res3b_bias: vec![0.0; channels],
            conv1: ConvKernel::zeros(1, channels, channels),
            conv1_bias: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn conv7_mut(&mut self) -> &mut ConvKernel {
        &mut self.conv7
    }

    pub fn res3a_mut(&mut self) -> &mut ConvKernel {
        &mut self.res3a
    }

    pub fn res3b_mut(&mut self) -> &mut ConvKernel {
        &mut self.res3b
    }

    pub fn conv1_mut(&mut self) -> &mut ConvKernel {
        &mut self.conv1
    }

    /// Reads the block from a weight store; every tensor must match the
    /// channel count implied by `refine.conv7.w`.
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let shape = store
            .shape("refine.conv7.w")
            .ok_or_else(|| Error::MissingTensor("refine.conv7.w".into()))?;
        if shape.len() != 4 || shape[0] != 7 || shape[1] != 7 || shape[2] != shape[3] {
            return Err(Error::Shape(format!(
                "refine.conv7.w must be 7x7xCxC, got {shape:?}"
            )));
        }
        let c = shape[2];
        let kernel = |name: &str, k: usize| -> Result<ConvKernel> {
            let data = store.get(name, &[k, k, c, c])?;
            ConvKernel::from_vec(k, c, c, data.to_vec())
        };
        let bias = |name: &str| -> Result<Vec<f64>> { Ok(store.get(name, &[c])?.to_vec()) };
        Ok(RefineWeights {
            channels: c,
            conv7: kernel("refine.conv7.w", 7)?,
            conv7_bias: bias("refine.conv7.b")?,
            res3a: kernel("refine.res3a.w", 3)?,
            res3a_bias: bias("refine.res3a.b")?,
            res3b: kernel("refine.res3b.w", 3)?,
            res3b_bias: bias("refine.res3b.b")?,
            conv1: kernel("refine.conv1.w", 1)?,
            conv1_bias: bias("refine.conv1.b")?,
        })
    }

    /// Writes the block into a weight store under the standard names.
    pub fn to_store(&self, store: &mut WeightStore) {
        let c = self.channels;
        let push = |store: &mut WeightStore, name: &str, k: usize, kernel: &ConvKernel| {
            let mut values = Vec::with_capacity(k * k * c * c);
            for kr in 0..k {
                for kc in 0..k {
                    for ci in 0..c {
                        for co in 0..c {
                            values.push(kernel.get(kr, kc, ci, co));
                        }
                    }
                }
            }
            store.insert(name, TensorData::new(vec![k, k, c, c], values).unwrap());
        };
        push(store, "refine.conv7.w", 7, &self.conv7);
        push(store, "refine.res3a.w", 3, &self.res3a);
        push(store, "refine.res3b.w", 3, &self.res3b);
        push(store, "refine.conv1.w", 1, &self.conv1);
        store.insert(
            "refine.conv7.b",
            TensorData::new(vec![c], self.conv7_bias.clone()).unwrap(),
        );
        store.insert(
            "refine.res3a.b",
            TensorData::new(vec![c], self.res3a_bias.clone()).unwrap(),
        );
        store.insert(
            "refine.res3b.b",
            TensorData::new(vec![c], self.res3b_bias.clone()).unwrap(),
        );
        store.insert(
            "refine.conv1.b",
            TensorData::new(vec![c], self.conv1_bias.clone()).unwrap(),
        );
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Applies the refinement block; output shape equals input shape.
pub fn refine_block(f_bev: &FeatureMap, w: &RefineWeights) -> Result<FeatureMap> {
    if f_bev.channels() != w.channels {
        return Err(Error::Shape(format!(
            "refine block expects {} channels, feature map has {}",
            w.channels,
            f_bev.channels()
        )));
    }
    let y1 = conv2d(f_bev, &w.conv7, 1, 3, Some(&w.conv7_bias))?.map(relu);
    let branch = conv2d(&y1, &w.res3a, 1, 1, Some(&w.res3a_bias))?.map(relu);
    let branch = conv2d(&branch, &w.res3b, 1, 1, Some(&w.res3b_bias))?;
    let y2 = y1.add(&branch)?;
    conv2d(&y2.map(relu), &w.conv1, 1, 0, Some(&w.conv1_bias))
}
