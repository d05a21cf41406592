use crate::blocks::{downsample, scaled_width, Conv};
use crate::error::{ensure, Result};
use crate::image::Image;
use crate::rng::{rng_for, Stream};
use crate::tensor::{Graph, ParamInit, ParamStore, Var};

use super::{check_width, INIT_CN};

/// Lower bound on any confidence, keeping `log C` finite.
pub const CONFIDENCE_FLOOR: f64 = 1e-6;

/// Scores how well one class was restored from the pair (masked prediction,
/// masked truth): Conv3×3+ReLU → pool → Conv3×3+ReLU → global pool → 1×1 →
/// sigmoid, mapped into `(floor, 1)`. One model serves all classes.
#[derive(Clone, Debug)]
pub struct CNModel {
    params: ParamStore,
    width_multiplier: f64,
    seed: u64,
    conv1: Conv,
    conv2: Conv,
    out: Conv,
}

impl CNModel {
    pub fn new(width_multiplier: f64, seed: u64) -> Result<Self> {
        check_width(width_multiplier)?;
        let c = scaled_width(32, width_multiplier);
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, Stream::Init, INIT_CN);
        let mut init = ParamInit::new(&mut params, &mut rng);
        let mut init = init.sub("cn");
        let conv1 = Conv::new(&mut init.sub("conv1"), 6, c, 3, 1, true);
        let conv2 = Conv::new(&mut init.sub("conv2"), c, c, 3, 1, true);
        let out = Conv::new(&mut init.sub("out"), c, 1, 1, 1, true);
        Ok(Self {
            params,
            width_multiplier,
            seed,
            conv1,
            conv2,
            out,
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

    /// Confidences `[n, 1, 1, 1]` for `[n, 3, h, w]` masked prediction and truth.
    pub fn forward(&self, g: &mut Graph, masked_pred: Var, masked_truth: Var) -> Result<Var> {
        let sp = g.shape(masked_pred);
        let st = g.shape(masked_truth);
        ensure!(sp == st, "prediction is {sp:?} but truth is {st:?}");
        ensure!(sp[1] == 3, "confidence network expects 3-channel images, got {}", sp[1]);
        let ps = &self.params;
        let x = g.concat_channels(&[masked_pred, masked_truth]);
        let x = self.conv1.forward(g, ps, x);
        let x = g.relu(x);
        let x = downsample(g, x)?;
        let x = self.conv2.forward(g, ps, x);
        let x = g.relu(x);
        let x = g.global_avg_pool(x);
        let z = self.out.forward(g, ps, x);
        let s = g.sigmoid(z);
        Ok(g.affine(s, 1.0 - CONFIDENCE_FLOOR, CONFIDENCE_FLOOR))
    }
}

/// Confidence for one masked prediction/truth pair.
pub fn cn_forward(model: &CNModel, masked_pred: &Image, masked_truth: &Image) -> Result<f64> {
    ensure!(
        masked_pred.same_dims(masked_truth),
        "prediction is {:?} but truth is {:?}",
        masked_pred.dims(),
        masked_truth.dims()
    );
    let mut g = Graph::inference();
    let p = g.constant(masked_pred.to_tensor());
    let t = g.constant(masked_truth.to_tensor());
    let c = model.forward(&mut g, p, t)?;
    Ok(g.value(c).item())
}
