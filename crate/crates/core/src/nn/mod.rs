//! Layer primitives with explicit forward/backward passes.
//!
//! Each layer's `forward` is pure (`&self`) and returns a cache; `backward`
//! consumes that cache, accumulates into the layer's parameter gradients and
//! returns the gradient with respect to the layer input.

pub mod conv;
pub mod linalg;
pub mod norm;
pub mod param;

pub use conv::{Conv2d, Upsample2x};
pub use norm::{leaky_relu, leaky_relu_backward, sigmoid, BatchNorm, LEAKY_SLOPE};
pub use param::{Module, Param};

/// Whether batch normalization uses batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Conv -> BN -> leaky ReLU, the recurring unit of encoder and fusion blocks.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}
crate::impl_module!(ConvBnAct { conv, bn });

pub struct ConvBnActCache {
    conv: conv::ConvCache,
    bn: norm::BatchNormCache,
    out: crate::tensor::Tensor,
}

impl ConvBnAct {
    pub fn new(conv: Conv2d) -> Self {
        let bn = BatchNorm::new(conv.out_channels);
        Self { conv, bn }
    }

    pub fn forward(
        &self,
        x: &crate::tensor::Tensor,
        phase: Phase,
    ) -> crate::error::Result<(crate::tensor::Tensor, ConvBnActCache)> {
        let (h, conv) = self.conv.forward(x)?;
        let (h, bn) = self.bn.forward(&h, phase);
        let out = leaky_relu(&h);
        Ok((out.clone(), ConvBnActCache { conv, bn, out }))
    }

    pub fn backward(&mut self, cache: &ConvBnActCache, dy: &crate::tensor::Tensor) -> crate::tensor::Tensor {
        let d = leaky_relu_backward(&cache.out, dy);
        let d = self.bn.backward(&cache.bn, &d);
        self.conv.backward(&cache.conv, &d)
    }

    pub fn update_running(&mut self, cache: &ConvBnActCache) {
        self.bn.update_running(&cache.bn);
    }
}
