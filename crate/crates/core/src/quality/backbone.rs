//! Depthwise-separable classifier backbone (MobileNet v1 layout with a width multiplier).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    ActKind, Activation, BatchNorm2d, Conv2d, DepthwiseConv2d, GlobalAvgPool, Layer, NormMode,
    Param, Tensor,
};

/// `(pointwise output channels, depthwise stride)` of the 13 separable blocks.
const BLOCKS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];
const STEM_CHANNELS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Scales every channel count (1.0 is the full-width network).
    pub width_multiplier: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 1.0,
        }
    }
}

impl BackboneConfig {
    fn scaled(&self, channels: usize) -> usize {
        ((channels as f32 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn feature_channels(&self) -> usize {
        self.scaled(BLOCKS[BLOCKS.len() - 1].0)
    }
}

/// Convolution, frozen-statistics batch norm, ReLU6.
pub(crate) struct ConvUnit<C: Layer> {
    pub conv: C,
    pub norm: BatchNorm2d,
    pub act: Activation,
}

impl<C: Layer> ConvUnit<C> {
    fn new(conv: C, channels: usize) -> Self {
        Self {
            conv,
            norm: BatchNorm2d::new(channels, NormMode::Frozen),
            act: Activation::new(ActKind::Relu6),
        }
    }

    /// Sets the norm's running statistics from the pre-norm activations of `x`.
    fn calibrate(&mut self, x: Tensor) -> Tensor {
        let y = self.conv.infer(x);
        let (mean, var) = BatchNorm2d::batch_stats(&y);
        self.norm.running_mean = mean;
        self.norm.running_var = var;
        self.act.infer(self.norm.infer(y))
    }
}

impl<C: Layer> Layer for ConvUnit<C> {
    fn forward(&mut self, x: Tensor) -> Tensor {
        let y = self.conv.forward(x);
        let y = self.norm.forward(y);
        self.act.forward(y)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let g = self.act.backward(grad);
        let g = self.norm.backward(g);
        self.conv.backward(g)
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.act.infer(self.norm.infer(self.conv.infer(x)))
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv.params_mut();
        v.extend(self.norm.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv.params();
        v.extend(self.norm.params());
        v
    }

    fn state(&self) -> Vec<&[f32]> {
        let mut v = self.conv.state();
        v.extend(self.norm.state());
        v
    }

    fn state_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut v = self.conv.state_mut();
        v.extend(self.norm.state_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.conv.clear_cache();
        self.norm.clear_cache();
        self.act.clear_cache();
    }
}

/// One depthwise + pointwise pair.
pub(crate) struct SeparableBlock {
    pub depthwise: ConvUnit<DepthwiseConv2d>,
    pub pointwise: ConvUnit<Conv2d>,
}

impl SeparableBlock {
    fn parts(&self) -> [&dyn Layer; 2] {
        [&self.depthwise, &self.pointwise]
    }
}

impl Layer for SeparableBlock {
    fn forward(&mut self, x: Tensor) -> Tensor {
        let y = self.depthwise.forward(x);
        self.pointwise.forward(y)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let g = self.pointwise.backward(grad);
        self.depthwise.backward(g)
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.pointwise.infer(self.depthwise.infer(x))
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.depthwise.params_mut();
        v.extend(self.pointwise.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        self.parts().into_iter().flat_map(|l| l.params()).collect()
    }

    fn state(&self) -> Vec<&[f32]> {
        self.parts().into_iter().flat_map(|l| l.state()).collect()
    }

    fn state_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut v = self.depthwise.state_mut();
        v.extend(self.pointwise.state_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.depthwise.clear_cache();
        self.pointwise.clear_cache();
    }
}

/// Stem convolution, 13 separable blocks, global average pooling.
pub struct Backbone {
    pub config: BackboneConfig,
    pub(crate) stem: ConvUnit<Conv2d>,
    pub(crate) blocks: Vec<SeparableBlock>,
    pool: GlobalAvgPool,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Self {
        let stem_channels = config.scaled(STEM_CHANNELS);
        let stem = ConvUnit::new(Conv2d::no_bias(3, stem_channels, 3, 2, rng), stem_channels);
        let mut blocks = Vec::with_capacity(BLOCKS.len());
        let mut cin = stem_channels;
        for (cout, stride) in BLOCKS {
            let cout = config.scaled(cout);
            blocks.push(SeparableBlock {
                depthwise: ConvUnit::new(DepthwiseConv2d::new(cin, 3, stride, rng), cin),
                pointwise: ConvUnit::new(Conv2d::no_bias(cin, cout, 1, 1, rng), cout),
            });
            cin = cout;
        }
        Self {
            config,
            stem,
            blocks,
            pool: GlobalAvgPool::new(),
        }
    }

    /// Activations entering the final separable block (everything that stays frozen).
    pub fn frozen_prefix(&self, x: Tensor) -> Tensor {
        let last = self.blocks.len() - 1;
        self.blocks[..last]
            .iter()
            .fold(self.stem.infer(x), |x, b| b.infer(x))
    }

    /// Pooled features, no caching.
    pub fn features(&self, x: Tensor) -> Tensor {
        let y = self.frozen_prefix(x);
        self.pool.infer(self.blocks[self.blocks.len() - 1].infer(y))
    }

    /// Training-mode pass through the final block and pooling, from [`Backbone::frozen_prefix`] output.
    pub(crate) fn forward_tail(&mut self, prefix: Tensor) -> Tensor {
        let last = self.blocks.len() - 1;
        let y = self.blocks[last].forward(prefix);
        self.pool.forward(y)
    }

    pub(crate) fn backward_tail(&mut self, grad: Tensor) {
        let last = self.blocks.len() - 1;
        let g = self.pool.backward(grad);
        self.blocks[last].backward(g);
    }

    /// Training-mode pass through the whole backbone.
    pub(crate) fn forward_all(&mut self, x: Tensor) -> Tensor {
        let mut y = self.stem.forward(x);
        for b in &mut self.blocks {
            y = b.forward(y);
        }
        self.pool.forward(y)
    }

    pub(crate) fn backward_all(&mut self, grad: Tensor) {
        let mut g = self.pool.backward(grad);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(g);
        }
        self.stem.backward(g);
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v
    }

    pub(crate) fn set_norm_mode(&mut self, mode: NormMode) {
        self.stem.norm.mode = mode;
        for b in &mut self.blocks {
            b.depthwise.norm.mode = mode;
            b.pointwise.norm.mode = mode;
        }
    }

    pub(crate) fn tail_params_mut(&mut self) -> Vec<&mut Param> {
        let last = self.blocks.len() - 1;
        self.blocks[last].params_mut()
    }

    /// Persisted tensors below the final block.
    pub fn frozen_state(&self) -> Vec<f32> {
        let last = self.blocks.len() - 1;
        let mut out: Vec<f32> = self.stem.state().into_iter().flatten().copied().collect();
        for b in &self.blocks[..last] {
            out.extend(b.state().into_iter().flatten().copied());
        }
        out
    }

    /// Sets every batch-norm's running statistics from a batch of inputs, layer by layer.
    ///
    /// This stands in for pretrained statistics when the backbone is randomly initialized.
    pub fn calibrate(&mut self, batch: Tensor) {
        let mut x = self.stem.calibrate(batch);
        for b in &mut self.blocks {
            x = b.depthwise.calibrate(x);
            x = b.pointwise.calibrate(x);
        }
    }

    pub fn clear_cache(&mut self) {
        self.stem.clear_cache();
        self.blocks.iter_mut().for_each(|b| b.clear_cache());
        self.pool.clear_cache();
    }

    pub(crate) fn state(&self) -> Vec<&[f32]> {
        let mut v = self.stem.state();
        for b in &self.blocks {
            v.extend(b.state());
        }
        v
    }

    pub(crate) fn state_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut v = self.stem.state_mut();
        for b in &mut self.blocks {
            v.extend(b.state_mut());
        }
        v
    }
}
