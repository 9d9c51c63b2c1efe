//! The encoder-decoder prior network with a skip path at every scale.
//!
//! Scale `i` sees an input with `in_i` channels and produces `filters_up[i]`
//! channels at the same resolution:
//!
//! ```text
//! x ──► skip: conv k_skip → BN → LReLU ───────────────────────┐
//! │                                                           concat → BN → conv k_up → BN → LReLU
//! └─► down: conv k_down /2 → BN → LReLU → conv k_down → BN → LReLU     → conv 1×1 → BN → LReLU
//!           → [scale i+1] → bilinear ×2 ──────────────────────┘
//! ```
//!
//! A final 1×1 convolution maps `filters_up[0]` channels to RGB, followed by a sigmoid.

use rand::Rng;

use super::config::DipConfig;
use crate::nn::{
    ActKind, Activation, BatchNorm2d, Conv2d, Layer, NormMode, Padding, Param, Sequential, Tensor,
    Upsample2x,
};

const LEAKY_SLOPE: f32 = 0.2;

fn conv_block(
    seq: &mut Sequential,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    rng: &mut impl Rng,
) {
    seq.push(Conv2d::new(cin, cout, kernel, stride, Padding::Reflect, true, rng));
    seq.push(BatchNorm2d::new(cout, NormMode::Batch));
    seq.push(Activation::new(ActKind::LeakyRelu(LEAKY_SLOPE)));
}

struct Scale {
    skip: Sequential,
    skip_channels: usize,
    down: Sequential,
    deeper: Option<Box<Scale>>,
    upsample: Upsample2x,
    merge_norm: BatchNorm2d,
    up: Sequential,
}

impl Scale {
    fn build(config: &DipConfig, level: usize, in_channels: usize, rng: &mut impl Rng) -> Self {
        let skip_channels = config.filters_skip[level];
        let down_channels = config.filters_down[level];
        let up_channels = config.filters_up[level];

        let mut skip = Sequential::new();
        conv_block(&mut skip, in_channels, skip_channels, config.kernel_skip[level], 1, rng);

        let mut down = Sequential::new();
        let k = config.kernel_down[level];
        conv_block(&mut down, in_channels, down_channels, k, 2, rng);
        conv_block(&mut down, down_channels, down_channels, k, 1, rng);

        let (deeper, deeper_channels) = if level + 1 < config.depth {
            let next = Scale::build(config, level + 1, down_channels, rng);
            (Some(Box::new(next)), config.filters_up[level + 1])
        } else {
            (None, down_channels)
        };

        let merged = skip_channels + deeper_channels;
        let mut up = Sequential::new();
        conv_block(&mut up, merged, up_channels, config.kernel_up[level], 1, rng);
        conv_block(&mut up, up_channels, up_channels, 1, 1, rng);

        Self {
            skip,
            skip_channels,
            down,
            deeper,
            upsample: Upsample2x::new(),
            merge_norm: BatchNorm2d::new(merged, NormMode::Batch),
            up,
        }
    }

    fn parts(&self) -> Vec<&dyn Layer> {
        let mut v: Vec<&dyn Layer> = vec![&self.skip, &self.down];
        if let Some(d) = &self.deeper {
            v.push(d.as_ref());
        }
        v.push(&self.merge_norm);
        v.push(&self.up);
        v
    }

    fn parts_mut(&mut self) -> Vec<&mut dyn Layer> {
        let mut v: Vec<&mut dyn Layer> = vec![&mut self.skip, &mut self.down];
        if let Some(d) = &mut self.deeper {
            v.push(d.as_mut());
        }
        v.push(&mut self.merge_norm);
        v.push(&mut self.up);
        v
    }
}

impl Layer for Scale {
    fn forward(&mut self, x: Tensor) -> Tensor {
        let s = self.skip.forward(x.clone());
        let mut d = self.down.forward(x);
        if let Some(deeper) = &mut self.deeper {
            d = deeper.forward(d);
        }
        let u = self.upsample.forward(d);
        let merged = self.merge_norm.forward(Tensor::concat_channels(&s, &u));
        self.up.forward(merged)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let g = self.up.backward(grad);
        let g = self.merge_norm.backward(g);
        let (gs, gu) = g.split_channels(self.skip_channels);
        let mut gd = self.upsample.backward(gu);
        if let Some(deeper) = &mut self.deeper {
            gd = deeper.backward(gd);
        }
        let mut gx = self.down.backward(gd);
        gx.add_assign(&self.skip.backward(gs));
        gx
    }

    fn infer(&self, x: Tensor) -> Tensor {
        let s = self.skip.infer(x.clone());
        let mut d = self.down.infer(x);
        if let Some(deeper) = &self.deeper {
            d = deeper.infer(d);
        }
        let u = self.upsample.infer(d);
        let merged = self.merge_norm.infer(Tensor::concat_channels(&s, &u));
        self.up.infer(merged)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.parts_mut().into_iter().flat_map(|l| l.params_mut()).collect()
    }

    fn params(&self) -> Vec<&Param> {
        self.parts().into_iter().flat_map(|l| l.params()).collect()
    }

    fn state(&self) -> Vec<&[f32]> {
        self.parts().into_iter().flat_map(|l| l.state()).collect()
    }

    fn state_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.parts_mut().into_iter().flat_map(|l| l.state_mut()).collect()
    }

    fn clear_cache(&mut self) {
        for l in self.parts_mut() {
            l.clear_cache();
        }
        self.upsample.clear_cache();
    }
}

/// The full prior network: `input_channels` noise planes in, RGB in `(0, 1)` out.
pub struct Hourglass {
    root: Scale,
    head: Sequential,
}

impl Hourglass {
    /// Randomly initialized network; the config must already be validated.
    pub fn new(config: &DipConfig, rng: &mut impl Rng) -> Self {
        let root = Scale::build(config, 0, config.input_channels, rng);
        let mut head = Sequential::new();
        head.push(Conv2d::new(config.filters_up[0], 3, 1, 1, Padding::Reflect, true, rng));
        head.push(Activation::new(ActKind::Sigmoid));
        Self { root, head }
    }
}

impl Layer for Hourglass {
    fn forward(&mut self, x: Tensor) -> Tensor {
        let y = self.root.forward(x);
        self.head.forward(y)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let g = self.head.backward(grad);
        self.root.backward(g)
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.head.infer(self.root.infer(x))
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.root.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.root.params();
        v.extend(self.head.params());
        v
    }

    fn state(&self) -> Vec<&[f32]> {
        let mut v = self.root.state();
        v.extend(self.head.state());
        v
    }

    fn state_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut v = self.root.state_mut();
        v.extend(self.head.state_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.root.clear_cache();
        self.head.clear_cache();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{parameter_count, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_matches_input_spatial_shape() {
        let config = DipConfig::uniform(3, 8, 2);
        let net = Hourglass::new(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::zeros(Shape::new(1, 32, 16, 24));
        assert_eq!(net.infer(x).shape, Shape::new(1, 3, 16, 24));
    }

    #[test]
    fn small_network_gradient_matches_finite_difference() {
        let mut config = DipConfig::uniform(2, 3, 1);
        config.input_channels = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Hourglass::new(&config, &mut rng);
        let x = Tensor::from_vec(
            Shape::new(1, 2, 16, 16),
            (0..512).map(|_| rng.random_range(0.0..1.0)).collect(),
        );
        let target: Vec<f32> = (0..768).map(|_| rng.random_range(0.0..1.0)).collect();
        let loss = |net: &Hourglass| -> f64 {
            let y = net.infer(x.clone());
            y.data.iter().zip(&target).map(|(a, b)| f64::from((a - b) * (a - b))).sum()
        };
        let y = net.forward(x.clone());
        let g = Tensor::from_vec(y.shape, y.data.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect());
        net.backward(g);
        let analytic: Vec<Vec<f32>> = net.params().iter().map(|p| p.grad.clone()).collect();
        // Leaky ReLU kinks and batch norm over few pixels make single-weight
        // differences noisy, so whole-network directional derivatives are checked.
        let directions: Vec<Vec<Vec<f32>>> = vec![
            analytic.clone(),
            analytic
                .iter()
                .map(|g| g.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        ];
        let original: Vec<Vec<f32>> = net.params().iter().map(|p| p.value.clone()).collect();
        for dir in &directions {
            let norm = dir.iter().flatten().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            let expected: f64 = dir
                .iter()
                .flatten()
                .zip(analytic.iter().flatten())
                .map(|(d, g)| f64::from(*d) * f64::from(*g))
                .sum::<f64>()
                / norm;
            let mut shifted = |t: f64| -> f64 {
                for ((p, o), d) in net.params_mut().into_iter().zip(&original).zip(dir) {
                    for ((v, o), d) in p.value.iter_mut().zip(o).zip(d) {
                        *v = (f64::from(*o) + t * f64::from(*d) / norm) as f32;
                    }
                }
                loss(&net)
            };
            let h = 1e-4;
            let num = (shifted(h) - shifted(-h)) / (2.0 * h);
            shifted(0.0);
            assert!(
                (num - expected).abs() < 1e-2 * (1.0 + expected.abs()),
                "directional derivative {num} vs {expected}"
            );
        }
        assert_eq!(parameter_count(&net), net.params().iter().map(|p| p.value.len()).sum::<usize>());
    }
}
