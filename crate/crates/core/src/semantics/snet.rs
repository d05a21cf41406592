use crate::blocks::{downsample, scaled_width, upsample, ConvUnit, ConvUnitSpec, ResBlock, ResBlockSpec};
use crate::error::{ensure, Result};
use crate::image::Image;
use crate::rng::{rng_for, Stream};
use crate::tensor::{Graph, ParamInit, ParamStore, Var};

use super::{MaskKind, SemanticMaskSet, NUM_CLASSES};

/// Segmentation network predicting the four grouped classes directly:
/// ResBlock(3,32) → pool → 3×ResBlock(32,32) → upsample → ResBlock(32,16) →
/// Conv3×3(16,4), with all widths scaled by the width multiplier.
#[derive(Clone, Debug)]
pub struct SNetModel {
    params: ParamStore,
    width_multiplier: f64,
    seed: u64,
    first: ResBlock,
    middle: Vec<ResBlock>,
    tail: ResBlock,
    head: ConvUnit,
}

impl SNetModel {
    pub fn new(width_multiplier: f64, seed: u64) -> Result<Self> {
        ensure!(
            width_multiplier > 0.0 && width_multiplier.is_finite(),
            "width multiplier must be positive, got {width_multiplier}"
        );
        let c32 = scaled_width(32, width_multiplier);
        let c16 = scaled_width(16, width_multiplier);
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, Stream::Init, 0);
        let mut init = ParamInit::new(&mut params, &mut rng);
        let mut init = init.sub("snet");
        let first = ResBlock::new(&mut init.sub("first"), ResBlockSpec::new(3, c32))?;
        let middle = (0..3)
            .map(|k| ResBlock::new(&mut init.sub(&format!("mid{k}")), ResBlockSpec::new(c32, c32)))
            .collect::<Result<Vec<_>>>()?;
        let tail = ResBlock::new(&mut init.sub("tail"), ResBlockSpec::new(c32, c16))?;
        let head = ConvUnit::new(&mut init.sub("head"), ConvUnitSpec::new(3, c16, NUM_CLASSES))?;
        Ok(Self {
            params,
            width_multiplier,
            seed,
            first,
            middle,
            tail,
            head,
        })
    }

    pub fn width_multiplier(&self) -> f64 {
        self.width_multiplier
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Class logits `[n, 4, h, w]` for images `[n, 3, h, w]`.
    pub fn logits(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(images);
        ensure!(c == 3, "S-Net expects 3 input channels, got {c}");
        ensure!(
            h % 2 == 0 && w % 2 == 0,
            "S-Net needs even spatial dimensions, got {h}x{w}"
        );
        let ps = &self.params;
        let x = self.first.forward(g, ps, images)?;
        let mut x = downsample(g, x)?;
        for block in &self.middle {
            x = block.forward(g, ps, x)?;
        }
        let x = upsample(g, x);
        let x = self.tail.forward(g, ps, x)?;
        self.head.forward(g, ps, x)
    }

    /// Soft class probabilities `[n, 4, h, w]`.
    pub fn predict(&self, images: &crate::tensor::Tensor) -> Result<crate::tensor::Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let logits = self.logits(&mut g, x)?;
        Ok(g.value(logits).softmax_channels())
    }
}

/// Soft semantic masks for one image.
pub fn snet_forward(model: &SNetModel, image: &Image) -> Result<SemanticMaskSet> {
    let probs = model.predict(&image.to_tensor())?;
    SemanticMaskSet::from_tensor(&probs, 0, MaskKind::Soft)
}
