//! EfficientNet-B0 feature extractor (classifier removed).
//!
//! Parameter names follow the torchvision `efficientnet_b0` state dict, so
//! weights exported from torchvision load without renaming.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layers::{ConvBnAct, ConvKind, MbConv, Mode};
use crate::ops;
use crate::param::{Module, Param};
use crate::tensor::Tensor;

/// One stage of inverted-residual blocks.
#[derive(Clone, Copy, Debug)]
pub struct StageSpec {
    pub expand_ratio: usize,
    pub kernel: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
    pub layers: usize,
}

const fn stage(expand_ratio: usize, kernel: usize, stride: usize, cin: usize, cout: usize, layers: usize) -> StageSpec {
    StageSpec { expand_ratio, kernel, stride, cin, cout, layers }
}

pub const B0_STAGES: [StageSpec; 7] = [
    stage(1, 3, 1, 32, 16, 1),
    stage(6, 3, 2, 16, 24, 2),
    stage(6, 5, 2, 24, 40, 2),
    stage(6, 3, 2, 40, 80, 3),
    stage(6, 5, 1, 80, 112, 3),
    stage(6, 5, 2, 112, 192, 4),
    stage(6, 3, 1, 192, 320, 1),
];

pub const B0_STEM_CHANNELS: usize = 32;
pub const B0_FEATURE_DIM: usize = 1280;
pub const B0_STOCHASTIC_DEPTH: f32 = 0.2;

#[derive(Debug)]
pub struct EfficientNetB0 {
    pub stem: ConvBnAct,
    pub stages: Vec<Vec<MbConv>>,
    pub head: ConvBnAct,
    pooled_shape: Option<[usize; 4]>,
}

impl EfficientNetB0 {
    /// Randomly initialised backbone (Kaiming-normal convolutions, unit
    /// batch-norm scale), deterministic in `seed`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvBnAct::new(
            "features.0",
            ConvKind::Dense { k: 3, stride: 2 },
            3,
            B0_STEM_CHANNELS,
            true,
            &mut rng,
        );
        let total: usize = B0_STAGES.iter().map(|s| s.layers).sum();
        let mut block_id = 0;
        let stages = B0_STAGES
            .iter()
            .enumerate()
            .map(|(si, spec)| {
                (0..spec.layers)
                    .map(|j| {
                        let (cin, stride) = if j == 0 { (spec.cin, spec.stride) } else { (spec.cout, 1) };
                        let drop = B0_STOCHASTIC_DEPTH * block_id as f32 / total as f32;
                        block_id += 1;
                        MbConv::new(
                            &format!("features.{}.{}", si + 1, j),
                            cin,
                            spec.cout,
                            spec.expand_ratio,
                            spec.kernel,
                            stride,
                            drop,
                            &mut rng,
                        )
                    })
                    .collect()
            })
            .collect();
        let last = B0_STAGES[B0_STAGES.len() - 1].cout;
        let head = ConvBnAct::new("features.8", ConvKind::Pointwise, last, B0_FEATURE_DIM, true, &mut rng);
        Self { stem, stages, head, pooled_shape: None }
    }

    pub fn feature_dim(&self) -> usize {
        B0_FEATURE_DIM
    }

    /// `[n, 3, h, w]` images to `[n, 1280]` pooled features (row-major).
    pub fn forward(&mut self, x: Tensor, mode: &mut Mode) -> Vec<f32> {
        assert_eq!(x.channels(), 3, "backbone expects RGB input");
        let mut h = Arc::new(self.stem.forward(Arc::new(x), mode));
        for block in self.stages.iter_mut().flatten() {
            h = Arc::new(block.forward(h, mode));
        }
        let out = self.head.forward(h, mode);
        self.pooled_shape = mode.is_train().then(|| out.shape());
        ops::global_avg_pool(&out)
    }

    /// Backpropagates pooled-feature gradients into every backbone parameter.
    pub fn backward(&mut self, dfeatures: &[f32]) {
        let shape = self.pooled_shape.take().expect("backward without a training forward");
        let d = ops::global_avg_pool_backward(dfeatures, shape);
        let mut d = self.head.backward(d, true).expect("dx requested");
        for block in self.stages.iter_mut().flatten().rev() {
            d = block.backward(d, true).expect("dx requested");
        }
        self.stem.backward(d, false);
    }

    /// Drops cached activations from an unfinished training step.
    pub fn clear_cache(&mut self) {
        self.stem.clear_cache();
        for block in self.stages.iter_mut().flatten() {
            block.clear_cache();
        }
        self.head.clear_cache();
        self.pooled_shape = None;
    }
}

impl Module for EfficientNetB0 {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.stem.collect(out);
        for block in self.stages.iter().flatten() {
            block.collect(out);
        }
        self.head.collect(out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.stem.collect_mut(out);
        for block in self.stages.iter_mut().flatten() {
            block.collect_mut(out);
        }
        self.head.collect_mut(out);
    }
}
