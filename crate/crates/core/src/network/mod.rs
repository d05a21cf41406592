//! Class streams (F-Net plus stage-1 head), the base trunk B-Net, their
//! multi-stream assembly with nested residuals, and the confidence scorer.

mod confidence;

pub use confidence::{cn_forward, CNModel, CONFIDENCE_FLOOR};

use serde::{Deserialize, Serialize};

use crate::blocks::{
    downsample, scaled_width, upsample, Conv, ConvUnit, ConvUnitSpec, DenseTrunk, ResBlock, ResBlockSpec,
};
use crate::error::{ensure, Result};
use crate::image::Image;
use crate::rng::{rng_for, Stream};
use crate::semantics::{ClassId, SemanticMaskSet, NUM_CLASSES};
use crate::tensor::{Graph, ParamInit, ParamStore, Tensor, Var};

/// Init-stream indices keep each model's weights independent of the others.
pub(crate) const INIT_UMSN: u64 = 1;
pub(crate) const INIT_CN: u64 = 2;
pub(crate) const INIT_STAGE1: u64 = 10;

fn check_width(width_multiplier: f64) -> Result<()> {
    ensure!(
        width_multiplier > 0.0 && width_multiplier.is_finite(),
        "width multiplier must be positive, got {width_multiplier}"
    );
    Ok(())
}

fn check_input(g: &Graph, x: Var, channels: usize, what: &str) -> Result<()> {
    let [_, c, h, w] = g.shape(x);
    ensure!(c == channels, "{what} expects {channels} channels, got {c}");
    ensure!(
        h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0,
        "{what} needs even spatial dimensions, got {h}x{w}"
    );
    Ok(())
}

fn check_masks(g: &Graph, blurry: Var, masks: Var, planes: usize) -> Result<()> {
    let [n, _, h, w] = g.shape(blurry);
    let [mn, mc, mh, mw] = g.shape(masks);
    ensure!(
        [mn, mc, mh, mw] == [n, planes, h, w],
        "masks have shape {:?}, expected {:?}",
        [mn, mc, mh, mw],
        [n, planes, h, w]
    );
    Ok(())
}

/// `m_i ⊙ y` for zero-based plane `i` of a `[n, 4, h, w]` mask tensor.
pub fn masked_input(g: &mut Graph, blurry: Var, masks: Var, plane: usize) -> Var {
    let m = g.slice_channels(masks, plane, 1);
    g.mul(blurry, m)
}

/// Class-specific feature stream: ResBlock(3,16) → pool → dense
/// [ResBlock(16,16) ×3, ResBlock(16,8)], giving 8 channels at half resolution.
#[derive(Clone, Debug)]
pub struct FNet {
    first: ResBlock,
    trunk: DenseTrunk,
}

impl FNet {
    pub fn new(init: &mut ParamInit<'_>, width_multiplier: f64) -> Result<Self> {
        let c16 = scaled_width(16, width_multiplier);
        let c8 = scaled_width(8, width_multiplier);
        let first = ResBlock::new(&mut init.sub("first"), ResBlockSpec::new(3, c16))?;
        let specs = [
            ResBlockSpec::new(c16, c16),
            ResBlockSpec::new(c16, c16),
            ResBlockSpec::new(c16, c16),
            ResBlockSpec::new(c16, c8),
        ];
        let trunk = DenseTrunk::new(&mut init.sub("trunk"), c16, &specs)?;
        Ok(Self { first, trunk })
    }

    pub fn out_channels(&self) -> usize {
        self.trunk.out_channels()
    }

    /// Features of an already masked image.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, masked: Var) -> Result<Var> {
        check_input(g, masked, 3, "F-Net")?;
        let x = self.first.forward(g, ps, masked)?;
        let x = downsample(g, x)?;
        self.trunk.forward(g, ps, x)
    }
}

/// Reconstruction head of a first-stage network: upsample → ResBlock(8,16)
/// → Conv3×3(16,3), producing a full-resolution residual.
#[derive(Clone, Debug)]
pub struct Stage1Head {
    block: ResBlock,
    out: ConvUnit,
}

impl Stage1Head {
    pub fn new(init: &mut ParamInit<'_>, in_channels: usize, width_multiplier: f64) -> Result<Self> {
        let c16 = scaled_width(16, width_multiplier);
        Ok(Self {
            block: ResBlock::new(&mut init.sub("block"), ResBlockSpec::new(in_channels, c16))?,
            out: ConvUnit::new(&mut init.sub("out"), ConvUnitSpec::new(3, c16, 3))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, features: Var) -> Result<Var> {
        let x = upsample(g, features);
        let x = self.block.forward(g, ps, x)?;
        self.out.forward(g, ps, x)
    }

    /// Zeroes the final convolution so the residual vanishes.
    pub fn zero_residual(&self, ps: &mut ParamStore) {
        self.out.conv.zero(ps);
    }
}

#[derive(Clone, Debug)]
pub struct Stream1 {
    pub fnet: FNet,
    pub head: Stage1Head,
}

impl Stream1 {
    fn new(init: &mut ParamInit<'_>, width_multiplier: f64) -> Result<Self> {
        let fnet = FNet::new(&mut init.sub("fnet"), width_multiplier)?;
        let head = Stage1Head::new(&mut init.sub("head"), fnet.out_channels(), width_multiplier)?;
        Ok(Self { fnet, head })
    }

    /// `x̂_i = y + head(F-Net(m_i ⊙ y))`.
    pub fn reconstruct(&self, g: &mut Graph, ps: &ParamStore, blurry: Var, mask_plane: Var) -> Result<Var> {
        let masked = g.mul(blurry, mask_plane);
        let features = self.fnet.forward(g, ps, masked)?;
        let residual = self.head.forward(g, ps, features)?;
        Ok(g.add(blurry, residual))
    }
}

/// Parameter-name prefix of the stream inside a stand-alone first-stage model.
pub const STAGE1_PREFIX: &str = "stream.";

/// Prefix of stream `class` inside a UMSN model.
pub fn umsn_stream_prefix(class: ClassId) -> String {
    format!("stream{}.", class.get())
}

/// First-stage network of one class: F-Net plus reconstruction head.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    params: ParamStore,
    width_multiplier: f64,
    seed: u64,
    class: ClassId,
    stream: Stream1,
}

impl Stage1Model {
    pub fn new(class: ClassId, width_multiplier: f64, seed: u64) -> Result<Self> {
        check_width(width_multiplier)?;
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, Stream::Init, INIT_STAGE1 + class.get() as u64);
        let mut init = ParamInit::new(&mut params, &mut rng);
        let stream = Stream1::new(&mut init.sub("stream"), width_multiplier)?;
        // residual output starts at zero: an untrained network passes its input through
        let mut model = Self {
            params,
            width_multiplier,
            seed,
            class,
            stream,
        };
        model.zero_residual();
        Ok(model)
    }

    pub fn class(&self) -> ClassId {
        self.class
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

    pub fn features(&self, g: &mut Graph, blurry: Var, mask_plane: Var) -> Result<Var> {
        check_masks(g, blurry, mask_plane, 1)?;
        let masked = g.mul(blurry, mask_plane);
        self.stream.fnet.forward(g, &self.params, masked)
    }

    /// Unclamped reconstruction `[n, 3, h, w]` from the blurry batch and the class plane `[n, 1, h, w]`.
    pub fn forward(&self, g: &mut Graph, blurry: Var, mask_plane: Var) -> Result<Var> {
        check_input(g, blurry, 3, "first-stage network")?;
        check_masks(g, blurry, mask_plane, 1)?;
        self.stream.reconstruct(g, &self.params, blurry, mask_plane)
    }

    pub fn zero_residual(&mut self) {
        self.stream.head.zero_residual(&mut self.params);
    }
}

fn plane_tensor(image: &Image, mask_plane: &[f64]) -> Result<Tensor> {
    let (w, h) = image.dims();
    ensure!(
        mask_plane.len() == w * h,
        "mask plane has {} values, image has {} pixels",
        mask_plane.len(),
        w * h
    );
    Ok(Tensor::from_vec([1, 1, h, w], mask_plane.to_vec()))
}

/// Half-resolution class features `[1, 8w, h/2, w/2]` of one image.
pub fn fnet_forward(model: &Stage1Model, blurry: &Image, mask_plane: &[f64]) -> Result<Tensor> {
    let mut g = Graph::inference();
    let m = g.constant(plane_tensor(blurry, mask_plane)?);
    let y = g.constant(blurry.to_tensor());
    let f = model.features(&mut g, y, m)?;
    Ok(g.value(f).clone())
}

/// First-stage reconstruction of one image, clamped to `[0, 1]`.
pub fn stage1_forward(model: &Stage1Model, blurry: &Image, mask_plane: &[f64]) -> Result<Image> {
    let mut g = Graph::inference();
    let m = g.constant(plane_tensor(blurry, mask_plane)?);
    let y = g.constant(blurry.to_tensor());
    let out = model.forward(&mut g, y, m)?;
    Ok(Image::from_tensor(g.value(out), 0)?.clamped())
}

/// Structural switches of the multi-stream network; the ablation variants
/// are points in this space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub width_multiplier: f64,
    /// Class streams whose features are fused after the first B-Net layer.
    pub streams: bool,
    /// Mask planes concatenated to the B-Net input.
    pub mask_input: bool,
    /// Per-class 1×1 residual projections.
    pub nrl: bool,
}

impl NetworkConfig {
    pub fn umsn(width_multiplier: f64) -> Self {
        Variant::Umsn.network(width_multiplier)
    }

    pub fn uses_masks(&self) -> bool {
        self.streams || self.mask_input || self.nrl
    }
}

/// The five rows of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BNet,
    BNetMasks,
    BNetMasksNrl,
    UmsnWithoutConfidence,
    Umsn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::BNet,
        Variant::BNetMasks,
        Variant::BNetMasksNrl,
        Variant::UmsnWithoutConfidence,
        Variant::Umsn,
    ];

    pub fn network(self, width_multiplier: f64) -> NetworkConfig {
        let (streams, mask_input, nrl) = match self {
            Variant::BNet => (false, false, false),
            Variant::BNetMasks => (false, true, false),
            Variant::BNetMasksNrl => (false, true, true),
            Variant::UmsnWithoutConfidence | Variant::Umsn => (true, false, true),
        };
        NetworkConfig {
            width_multiplier,
            streams,
            mask_input,
            nrl,
        }
    }

    /// Whether the class losses are weighted by learned confidences.
    pub fn confidence_guided(self) -> bool {
        self == Variant::Umsn
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::BNet => "baseline (B-Net)",
            Variant::BNetMasks => "+ semantic maps",
            Variant::BNetMasksNrl => "+ nested residuals",
            Variant::UmsnWithoutConfidence => "UMSN without confidence loss",
            Variant::Umsn => "UMSN",
        }
    }
}

/// Base trunk: ResBlock(3,64) → pool → [fusion] → dense ResBlock(64,64) ×6 →
/// upsample → ResBlock(64,16) → Conv3×3(16,3).
#[derive(Clone, Debug)]
pub struct BNet {
    first: ResBlock,
    fuse: Option<ConvUnit>,
    trunk: DenseTrunk,
    tail: ResBlock,
    out: ConvUnit,
}

impl BNet {
    /// `stream_channels` is the total width of F-Net features joined after the first layer.
    pub fn new(init: &mut ParamInit<'_>, in_channels: usize, stream_channels: usize, width_multiplier: f64) -> Result<Self> {
        let c64 = scaled_width(64, width_multiplier);
        let c16 = scaled_width(16, width_multiplier);
        let first = ResBlock::new(&mut init.sub("first"), ResBlockSpec::new(in_channels, c64))?;
        let fuse = if stream_channels > 0 {
            Some(ConvUnit::new(
                &mut init.sub("fuse"),
                ConvUnitSpec::new(1, c64 + stream_channels, c64),
            )?)
        } else {
            None
        };
        let specs = vec![ResBlockSpec::new(c64, c64); 6];
        let trunk = DenseTrunk::new(&mut init.sub("trunk"), c64, &specs)?;
        let tail = ResBlock::new(&mut init.sub("tail"), ResBlockSpec::new(c64, c16))?;
        let out = ConvUnit::new(&mut init.sub("out"), ConvUnitSpec::new(3, c16, 3))?;
        Ok(Self {
            first,
            fuse,
            trunk,
            tail,
            out,
        })
    }

    /// Trunk residual `s`; `streams` are F-Net features at half resolution.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, input: Var, streams: &[Var]) -> Result<Var> {
        let x = self.first.forward(g, ps, input)?;
        let mut x = downsample(g, x)?;
        match &self.fuse {
            Some(fuse) => {
                ensure!(!streams.is_empty(), "B-Net was built to fuse stream features");
                let mut parts = vec![x];
                parts.extend_from_slice(streams);
                let cat = g.concat_channels(&parts);
                x = fuse.forward(g, ps, cat)?;
            }
            None => ensure!(streams.is_empty(), "B-Net was built without stream fusion"),
        }
        let x = self.trunk.forward(g, ps, x)?;
        let x = upsample(g, x);
        let x = self.tail.forward(g, ps, x)?;
        self.out.forward(g, ps, x)
    }

    pub fn zero_residual(&self, ps: &mut ParamStore) {
        self.out.conv.zero(ps);
    }
}

/// Multi-stream network `x̂ = y + (s + Σ_i P_i(m_i ⊙ y))` with optional streams,
/// mask input and nested residual projections.
#[derive(Clone, Debug)]
pub struct UMSNModel {
    params: ParamStore,
    config: NetworkConfig,
    seed: u64,
    streams: Vec<Stream1>,
    bnet: BNet,
    nrl: Vec<Conv>,
}

impl UMSNModel {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        check_width(config.width_multiplier)?;
        let w = config.width_multiplier;
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, Stream::Init, INIT_UMSN);
        let mut init = ParamInit::new(&mut params, &mut rng);
        let streams = if config.streams {
            ClassId::ALL
                .iter()
                .map(|&c| Stream1::new(&mut init.sub(&format!("stream{}", c.get())), w))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let stream_channels: usize = streams.iter().map(|s| s.fnet.out_channels()).sum();
        let in_channels = if config.mask_input { 3 + NUM_CLASSES } else { 3 };
        let bnet = BNet::new(&mut init.sub("bnet"), in_channels, stream_channels, w)?;
        let nrl = if config.nrl {
            ClassId::ALL
                .iter()
                .map(|c| Conv::new(&mut init.sub(&format!("nrl{}", c.get())), 3, 3, 1, 1, false))
                .collect()
        } else {
            Vec::new()
        };
        let mut model = Self {
            params,
            config,
            seed,
            streams,
            bnet,
            nrl,
        };
        model.zero_residual();
        Ok(model)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn width_multiplier(&self) -> f64 {
        self.config.width_multiplier
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

    /// Parameter-name prefixes of the stage-1 heads, which the joint objective leaves untouched.
    pub fn head_prefixes(&self) -> Vec<String> {
        if !self.config.streams {
            return Vec::new();
        }
        ClassId::ALL
            .iter()
            .map(|&c| format!("{}head.", umsn_stream_prefix(c)))
            .collect()
    }

    /// Copies the weights of a trained first-stage network into stream `class`.
    pub fn load_stream(&mut self, stage1: &Stage1Model) -> Result<usize> {
        ensure!(self.config.streams, "this variant has no class streams");
        ensure!(
            stage1.width_multiplier() == self.width_multiplier(),
            "first-stage network has width {} but UMSN has width {}",
            stage1.width_multiplier(),
            self.width_multiplier()
        );
        let to = umsn_stream_prefix(stage1.class());
        let copied = self.params.copy_prefixed(stage1.params(), STAGE1_PREFIX, &to);
        let expected = self
            .params
            .iter()
            .filter(|(_, name, _)| name.starts_with(&to))
            .count();
        ensure!(
            copied == expected,
            "first-stage checkpoint matched {copied} of {expected} stream parameters"
        );
        Ok(copied)
    }

    /// Unclamped output `[n, 3, h, w]`; `masks` is `[n, 4, h, w]`.
    pub fn forward(&self, g: &mut Graph, blurry: Var, masks: Var) -> Result<Var> {
        check_input(g, blurry, 3, "UMSN")?;
        check_masks(g, blurry, masks, NUM_CLASSES)?;
        let ps = &self.params;
        let mut features = Vec::with_capacity(self.streams.len());
        for (plane, stream) in self.streams.iter().enumerate() {
            let masked = masked_input(g, blurry, masks, plane);
            features.push(stream.fnet.forward(g, ps, masked)?);
        }
        let input = if self.config.mask_input {
            g.concat_channels(&[blurry, masks])
        } else {
            blurry
        };
        let mut residual = self.bnet.forward(g, ps, input, &features)?;
        for (plane, proj) in self.nrl.iter().enumerate() {
            let masked = masked_input(g, blurry, masks, plane);
            let r = proj.forward(g, ps, masked);
            residual = g.add(residual, r);
        }
        Ok(g.add(blurry, residual))
    }

    /// Zeroes the trunk output and every nested projection.
    pub fn zero_residual(&mut self) {
        self.bnet.zero_residual(&mut self.params);
        for p in &self.nrl {
            p.zero(&mut self.params);
        }
        for s in &self.streams {
            s.head.zero_residual(&mut self.params);
        }
    }

    /// Deblurred batch clamped to `[0, 1]`.
    pub fn predict(&self, blurry: &Tensor, masks: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let y = g.constant(blurry.clone());
        let m = g.constant(masks.clone());
        let out = self.forward(&mut g, y, m)?;
        Ok(g.value(out).map(|v| v.clamp(0.0, 1.0)))
    }
}

/// Deblurs one image; the output is clamped to `[0, 1]`.
pub fn umsn_forward(model: &UMSNModel, blurry: &Image, masks: &SemanticMaskSet) -> Result<Image> {
    ensure!(
        masks.dims() == blurry.dims(),
        "masks are {:?} but the image is {:?}",
        masks.dims(),
        blurry.dims()
    );
    let out = model.predict(&blurry.to_tensor(), &masks.to_tensor())?;
    Image::from_tensor(&out, 0)
}
