//! Class-decomposed L1, the confidence-weighted class loss, the perceptual
//! loss over a fixed feature extractor, and their weighted total.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::io::read_json;
use crate::network::CONFIDENCE_FLOOR;
use crate::rng::rng;
use crate::semantics::{SemanticMaskSet, NUM_CLASSES};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the `−log C` regularizer.
    pub lambda: f64,
    /// Weight of the perceptual term.
    pub lambda1: f64,
    pub confidence_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            lambda1: 0.0002,
            confidence_floor: CONFIDENCE_FLOOR,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda >= 0.0, "lambda must be non-negative, got {}", self.lambda);
        ensure!(self.lambda1 >= 0.0, "lambda1 must be non-negative, got {}", self.lambda1);
        ensure!(
            self.confidence_floor > 0.0 && self.confidence_floor < 1.0,
            "confidence floor must lie in (0, 1), got {}",
            self.confidence_floor
        );
        Ok(())
    }
}

fn same_dims(pred: &Image, truth: &Image) -> Result<()> {
    ensure!(
        pred.same_dims(truth),
        "prediction is {:?} but truth is {:?}",
        pred.dims(),
        truth.dims()
    );
    Ok(())
}

/// Per-class masked L1, each normalized by the full pixel count `H·W·3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassL1 {
    pub total: f64,
    pub per_class: [f64; NUM_CLASSES],
}

pub fn class_l1(pred: &Image, truth: &Image, masks: &SemanticMaskSet) -> Result<ClassL1> {
    same_dims(pred, truth)?;
    ensure!(
        masks.dims() == pred.dims(),
        "masks are {:?} but images are {:?}",
        masks.dims(),
        pred.dims()
    );
    let n = pred.pixels();
    let norm = (n * Image::CHANNELS) as f64;
    let mut per_class = [0.0; NUM_CLASSES];
    for (k, slot) in per_class.iter_mut().enumerate() {
        let m = &masks.planes()[k * n..(k + 1) * n];
        let mut s = 0.0;
        for c in 0..Image::CHANNELS {
            for ((&p, &t), &w) in pred.plane(c).iter().zip(truth.plane(c)).zip(m) {
                s += (w * (p - t)).abs();
            }
        }
        *slot = s / norm;
    }
    Ok(ClassL1 {
        total: per_class.iter().sum(),
        per_class,
    })
}

/// `Σ_i C_i·ℓ_i − λ·log C_i`.
pub fn confidence_loss(per_class: &[f64; NUM_CLASSES], confidences: &[f64; NUM_CLASSES], config: &LossConfig) -> Result<f64> {
    config.validate()?;
    let mut total = 0.0;
    for (&l, &c) in per_class.iter().zip(confidences) {
        ensure!(
            c >= config.confidence_floor && c <= 1.0,
            "confidence {c} outside [{}, 1]",
            config.confidence_floor
        );
        total += c * l - config.lambda * c.ln();
    }
    Ok(total)
}

/// Minimizer of `C·ℓ − λ·log C` over `(0, 1]`.
pub fn optimal_confidence(loss: f64, lambda: f64) -> f64 {
    if loss <= 0.0 {
        1.0
    } else {
        (lambda / loss).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureLayer {
    /// `weight` is `[cout, cin, k, k]` row-major, `bias` has `cout` entries.
    Conv {
        shape: [usize; 4],
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    Pool,
}

/// Frozen convolutional feature stack with a "shallow" and a "deep" tap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureExtractor {
    pub name: String,
    pub layers: Vec<FeatureLayer>,
    /// Number of leading layers that produce the shallow tap.
    pub shallow: usize,
    pub deep: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    Shallow,
    Deep,
}

impl FeatureExtractor {
    /// Seeded random stack: two 3×3 conv+ReLU at width 16 (shallow tap),
    /// then three conv+ReLU+pool stages at width 32 (deep tap).
    pub fn seeded(seed: u64) -> Self {
        let mut r = rng(seed);
        let mut conv = |cin: usize, cout: usize| {
            let fan_in = (cin * 9) as f64;
            let w = Tensor::randn([cout, cin, 3, 3], (2.0 / fan_in).sqrt(), &mut r);
            FeatureLayer::Conv {
                shape: [cout, cin, 3, 3],
                weight: w.into_data(),
                bias: vec![0.0; cout],
            }
        };
        let mut layers = vec![conv(3, 16), FeatureLayer::Relu, conv(16, 16), FeatureLayer::Relu];
        let shallow = layers.len();
        let mut cin = 16;
        for _ in 0..3 {
            layers.push(conv(cin, 32));
            layers.push(FeatureLayer::Relu);
            layers.push(FeatureLayer::Pool);
            cin = 32;
        }
        let deep = layers.len();
        Self {
            name: format!("seeded-random-{seed}"),
            layers,
            shallow,
            deep,
        }
    }

    pub fn from_layers(name: impl Into<String>, layers: Vec<FeatureLayer>, shallow: usize, deep: usize) -> Result<Self> {
        let fx = Self {
            name: name.into(),
            layers,
            shallow,
            deep,
        };
        fx.validate()?;
        Ok(fx)
    }

    /// Reads externally supplied weights in the JSON layout of this type.
    pub fn load(path: &Path) -> Result<Self> {
        let fx: Self = read_json(path)?;
        fx.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(fx)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.shallow >= 1 && self.shallow <= self.deep && self.deep <= self.layers.len(),
            "taps must satisfy 1 <= shallow <= deep <= layer count"
        );
        let mut channels = 3;
        for (i, layer) in self.layers.iter().enumerate() {
            if let FeatureLayer::Conv { shape, weight, bias } = layer {
                let [cout, cin, k, k2] = *shape;
                ensure!(cin == channels, "layer {i} expects {cin} channels but receives {channels}");
                ensure!(k == k2 && k % 2 == 1, "layer {i} kernel must be square and odd");
                ensure!(
                    weight.len() == cout * cin * k * k && bias.len() == cout,
                    "layer {i} weight or bias size does not match its shape"
                );
                channels = cout;
            }
        }
        Ok(())
    }

    fn depth(&self, tap: Tap) -> usize {
        match tap {
            Tap::Shallow => self.shallow,
            Tap::Deep => self.deep,
        }
    }

    /// Feature map at `tap`, differentiable with respect to `x`.
    pub fn forward(&self, g: &mut Graph, x: Var, tap: Tap) -> Result<Var> {
        let mut x = x;
        for layer in &self.layers[..self.depth(tap)] {
            x = match layer {
                FeatureLayer::Conv { shape, weight, bias } => {
                    let w = g.constant(Tensor::from_vec(*shape, weight.clone()));
                    let b = g.constant(Tensor::from_vec([1, shape[0], 1, 1], bias.clone()));
                    g.conv2d(x, w, Some(b), 1)
                }
                FeatureLayer::Relu => g.relu(x),
                FeatureLayer::Pool => {
                    let [_, _, h, w] = g.shape(x);
                    ensure!(
                        h % 2 == 0 && w % 2 == 0,
                        "feature extractor pooling needs even sizes, got {h}x{w}"
                    );
                    g.avg_pool2(x)
                }
            };
        }
        Ok(x)
    }

    pub fn features(&self, image: &Image, tap: Tap) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(image.to_tensor());
        let f = self.forward(&mut g, x, tap)?;
        Ok(g.value(f).clone())
    }
}

/// Mean squared difference of shallow features; gradients flow into `pred` only.
pub fn perceptual_graph(g: &mut Graph, fx: &FeatureExtractor, pred: Var, truth: Var) -> Result<Var> {
    let fp = fx.forward(g, pred, Tap::Shallow)?;
    let truth = g.detach(truth);
    let ft = fx.forward(g, truth, Tap::Shallow)?;
    let d = g.sub(fp, ft);
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

pub fn perceptual_loss(pred: &Image, truth: &Image, fx: &FeatureExtractor) -> Result<f64> {
    same_dims(pred, truth)?;
    let mut g = Graph::inference();
    let p = g.constant(pred.to_tensor());
    let t = g.constant(truth.to_tensor());
    let l = perceptual_graph(&mut g, fx, p, t)?;
    Ok(g.value(l).item())
}

/// Per-sample class losses `[n, 1, 1, 1]`, one per class.
pub fn class_l1_graph(g: &mut Graph, pred: Var, truth: Var, masks: Var) -> Result<Vec<Var>> {
    let [n, c, h, w] = g.shape(pred);
    ensure!(g.shape(truth) == [n, c, h, w], "prediction and truth shapes differ");
    ensure!(
        g.shape(masks) == [n, NUM_CLASSES, h, w],
        "masks have shape {:?}, expected {:?}",
        g.shape(masks),
        [n, NUM_CLASSES, h, w]
    );
    let diff = g.sub(pred, truth);
    let norm = 1.0 / (c * h * w) as f64;
    Ok((0..NUM_CLASSES)
        .map(|k| {
            let m = g.slice_channels(masks, k, 1);
            let md = g.mul(diff, m);
            let a = g.abs(md);
            let s = g.sum_per_sample(a);
            g.scale(s, norm)
        })
        .collect())
}

/// Loss terms of one evaluation, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub per_class: [f64; NUM_CLASSES],
    pub confidences: [f64; NUM_CLASSES],
    pub class_loss: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// Graph nodes of the total objective.
pub struct TotalLoss {
    /// Scalar to differentiate. It equals `total` in value and routes gradients
    /// so that confidences act as constants for the deblurring branch while
    /// the confidence scorer sees `Σ C·ℓ − λ log C` with `ℓ` held fixed.
    pub objective: Var,
    pub diagnostics: LossDiagnostics,
}

fn batch_mean(g: &Graph, v: Var) -> f64 {
    let t = g.value(v);
    t.sum() / t.len() as f64
}

/// `L_c + λ1·L_p` over a batch. Without `confidences` every `C_i` is 1 and the
/// class term reduces to the summed class L1.
pub fn total_loss_graph(
    g: &mut Graph,
    pred: Var,
    truth: Var,
    masks: Var,
    confidences: Option<&[Var]>,
    fx: &FeatureExtractor,
    config: &LossConfig,
) -> Result<TotalLoss> {
    config.validate()?;
    let losses = class_l1_graph(g, pred, truth, masks)?;
    let n = g.shape(pred)[0] as f64;
    let mut deblur_terms = Vec::with_capacity(NUM_CLASSES);
    let mut cn_terms = Vec::new();
    let mut confidence_values = [1.0; NUM_CLASSES];
    match confidences {
        Some(cs) => {
            ensure!(cs.len() == NUM_CLASSES, "expected {NUM_CLASSES} confidence nodes");
            for (k, (&l, &c)) in losses.iter().zip(cs).enumerate() {
                let cv = g.value(c);
                ensure!(
                    cv.data().iter().all(|&v| v >= config.confidence_floor && v <= 1.0),
                    "confidence outside [{}, 1]",
                    config.confidence_floor
                );
                confidence_values[k] = batch_mean(g, c);
                let c_fixed = g.detach(c);
                deblur_terms.push(g.mul(c_fixed, l));
                let l_fixed = g.detach(l);
                let cl = g.mul(c, l_fixed);
                let logc = g.log(c);
                let reg = g.scale(logc, -config.lambda);
                cn_terms.push(g.add(cl, reg));
            }
        }
        None => deblur_terms = losses.clone(),
    }
    let per_class: [f64; NUM_CLASSES] = std::array::from_fn(|k| batch_mean(g, losses[k]));

    let sum_terms = |g: &mut Graph, terms: &[Var]| -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t);
        }
        let s = g.sum_all(acc);
        g.scale(s, 1.0 / n)
    };
    let class_deblur = sum_terms(g, &deblur_terms);
    let perceptual = if config.lambda1 > 0.0 {
        Some(perceptual_graph(g, fx, pred, truth)?)
    } else {
        None
    };
    let perceptual_value = perceptual.map_or(0.0, |p| g.value(p).item());
    let mut objective = class_deblur;
    if let Some(p) = perceptual {
        let wp = g.scale(p, config.lambda1);
        objective = g.add(objective, wp);
    }
    let class_loss = if cn_terms.is_empty() {
        g.value(class_deblur).item()
    } else {
        let cn = sum_terms(g, &cn_terms);
        let value = g.value(cn).item();
        // the scorer's term carries the value; the deblurring copy only its gradient
        let shadow = g.detach(class_deblur);
        let neg = g.scale(shadow, -1.0);
        objective = g.add(objective, cn);
        objective = g.add(objective, neg);
        value
    };
    let total = class_loss + config.lambda1 * perceptual_value;
    Ok(TotalLoss {
        objective,
        diagnostics: LossDiagnostics {
            per_class,
            confidences: confidence_values,
            class_loss,
            perceptual: perceptual_value,
            total,
        },
    })
}

/// Value of `L_c + λ1·L_p` for one image with fixed confidences.
pub fn total_loss(
    pred: &Image,
    truth: &Image,
    masks: &SemanticMaskSet,
    confidences: &[f64; NUM_CLASSES],
    fx: &FeatureExtractor,
    config: &LossConfig,
) -> Result<(f64, LossDiagnostics)> {
    let l1 = class_l1(pred, truth, masks)?;
    let class_loss = confidence_loss(&l1.per_class, confidences, config)?;
    let perceptual = if config.lambda1 > 0.0 {
        perceptual_loss(pred, truth, fx)?
    } else {
        0.0
    };
    let total = class_loss + config.lambda1 * perceptual;
    Ok((
        total,
        LossDiagnostics {
            per_class: l1.per_class,
            confidences: *confidences,
            class_loss,
            perceptual,
            total,
        },
    ))
}
