//! Building blocks shared by every network: the pre-activation convolution
//! unit (instance norm → ReLU → conv), its smoothed dilated variant, the
//! ResBlock, block-level dense connectivity and the ×2 resolution changes.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{Graph, ParamId, ParamInit, ParamStore, Tensor, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Scales a nominal channel count by the global width multiplier.
pub fn scaled_width(nominal: usize, multiplier: f64) -> usize {
    ((nominal as f64 * multiplier).round() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvUnitSpec {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    pub smoothed: bool,
}

impl ConvUnitSpec {
    pub fn new(kernel_size: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_size,
            in_channels,
            out_channels,
            dilation: 1,
            smoothed: false,
        }
    }

    /// Dilation `r` preceded by the shared `(2r-1)`-tap smoothing filter.
    pub fn smoothed_dilated(kernel_size: usize, in_channels: usize, out_channels: usize, r: usize) -> Self {
        Self {
            dilation: r,
            smoothed: true,
            ..Self::new(kernel_size, in_channels, out_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.kernel_size % 2 == 1,
            "kernel size must be odd, got {}",
            self.kernel_size
        );
        ensure!(
            self.in_channels > 0 && self.out_channels > 0,
            "channel counts must be positive"
        );
        ensure!(self.dilation >= 1, "dilation must be at least 1");
        ensure!(
            !self.smoothed || self.dilation >= 2,
            "smoothed dilated convolution needs dilation >= 2, got {}",
            self.dilation
        );
        Ok(())
    }
}

/// Plain convolution layer with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub dilation: usize,
}

impl Conv {
    pub fn new(
        init: &mut ParamInit<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        let weight = init.conv_weight("weight", out_channels, in_channels, kernel_size);
        let bias = bias.then(|| init.zeros("bias", [1, out_channels, 1, 1]));
        Self {
            weight,
            bias,
            dilation,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.dilation)
    }

    pub fn in_channels(&self, ps: &ParamStore) -> usize {
        ps.get(self.weight).shape()[1]
    }

    pub fn out_channels(&self, ps: &ParamStore) -> usize {
        ps.get(self.weight).shape()[0]
    }

    pub fn zero(&self, ps: &mut ParamStore) {
        ps.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            ps.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Separable filter shared by all channels: a vertical pass then a
/// horizontal pass, each `2r - 1` taps, initialised to the identity.
#[derive(Clone, Debug)]
pub struct SharedSmoothing {
    pub vertical: ParamId,
    pub horizontal: ParamId,
}

impl SharedSmoothing {
    pub fn new(init: &mut ParamInit<'_>, dilation: usize) -> Self {
        let taps = 2 * dilation - 1;
        let mut identity = Tensor::zeros([1, 1, 1, taps]);
        identity.data_mut()[taps / 2] = 1.0;
        Self {
            vertical: init.add("smooth_v", identity.clone()),
            horizontal: init.add("smooth_h", identity),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let v = g.param(ps, self.vertical);
        let h = g.param(ps, self.horizontal);
        let y = g.shared_conv1d(x, v, true);
        g.shared_conv1d(y, h, false)
    }
}

/// Instance norm → ReLU → (shared smoothing) → convolution, "same" padding.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub spec: ConvUnitSpec,
    pub smoothing: Option<SharedSmoothing>,
    pub conv: Conv,
}

impl ConvUnit {
    pub fn new(init: &mut ParamInit<'_>, spec: ConvUnitSpec) -> Result<Self> {
        spec.validate()?;
        let smoothing = spec
            .smoothed
            .then(|| SharedSmoothing::new(init, spec.dilation));
        let conv = Conv::new(
            init,
            spec.in_channels,
            spec.out_channels,
            spec.kernel_size,
            spec.dilation,
            true,
        );
        Ok(Self {
            spec,
            smoothing,
            conv,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        ensure!(
            c == self.spec.in_channels,
            "conv unit expects {} input channels, got {c}",
            self.spec.in_channels
        );
        let y = g.instance_norm(x, INSTANCE_NORM_EPS);
        let mut y = g.relu(y);
        if let Some(s) = &self.smoothing {
            y = s.forward(g, ps, y);
        }
        Ok(self.conv.forward(g, ps, y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Internal width is `out_channels × width_multiplier` (at least 1).
    pub width_multiplier: f64,
    pub smoothed: bool,
}

impl ResBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            width_multiplier: 1.0,
            smoothed: true,
        }
    }

    pub fn internal_width(&self) -> usize {
        scaled_width(self.out_channels, self.width_multiplier)
    }
}

/// 1×1 unit → 3×3 unit → two 3×3 units with dilation 2, plus a skip from
/// the block input (1×1-projected when the channel counts differ).
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub spec: ResBlockSpec,
    pub units: [ConvUnit; 4],
    pub skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(init: &mut ParamInit<'_>, spec: ResBlockSpec) -> Result<Self> {
        ensure!(
            spec.in_channels > 0 && spec.out_channels > 0,
            "ResBlock channels must be positive"
        );
        let mid = spec.internal_width();
        let dilated = |cin, cout| {
            if spec.smoothed {
                ConvUnitSpec::smoothed_dilated(3, cin, cout, 2)
            } else {
                ConvUnitSpec {
                    dilation: 2,
                    ..ConvUnitSpec::new(3, cin, cout)
                }
            }
        };
        let units = [
            ConvUnit::new(&mut init.sub("u1"), ConvUnitSpec::new(1, spec.in_channels, mid))?,
            ConvUnit::new(&mut init.sub("u2"), ConvUnitSpec::new(3, mid, mid))?,
            ConvUnit::new(&mut init.sub("u3"), dilated(mid, mid))?,
            ConvUnit::new(&mut init.sub("u4"), dilated(mid, spec.out_channels))?,
        ];
        let skip = (spec.in_channels != spec.out_channels)
            .then(|| Conv::new(&mut init.sub("skip"), spec.in_channels, spec.out_channels, 1, 1, true));
        Ok(Self { spec, units, skip })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        ensure!(
            c == self.spec.in_channels,
            "ResBlock expects {} input channels, got {c}",
            self.spec.in_channels
        );
        let mut y = x;
        for unit in &self.units {
            y = unit.forward(g, ps, y)?;
        }
        let skip = match &self.skip {
            Some(proj) => proj.forward(g, ps, x),
            None => x,
        };
        Ok(g.add(skip, y))
    }

    /// Zeroes every convolution inside the residual branch.
    pub fn zero_body(&self, ps: &mut ParamStore) {
        for u in &self.units {
            u.conv.zero(ps);
        }
    }
}

/// Sequence of ResBlocks with block-level dense wiring: block `k > 0` sees
/// the channel concatenation of the trunk input and all earlier block
/// outputs, fused back to its nominal width by a 1×1 unit.
#[derive(Clone, Debug)]
pub struct DenseTrunk {
    pub blocks: Vec<ResBlock>,
    pub fuse: Vec<Option<ConvUnit>>,
}

impl DenseTrunk {
    /// `specs[k].in_channels` is the nominal input width of block `k`.
    pub fn new(init: &mut ParamInit<'_>, in_channels: usize, specs: &[ResBlockSpec]) -> Result<Self> {
        ensure!(!specs.is_empty(), "dense trunk needs at least one block");
        ensure!(
            specs[0].in_channels == in_channels,
            "first block must consume the trunk input width"
        );
        let mut blocks = Vec::with_capacity(specs.len());
        let mut fuse = Vec::with_capacity(specs.len());
        let mut available = in_channels;
        for (k, spec) in specs.iter().enumerate() {
            if k == 0 {
                fuse.push(None);
            } else {
                let unit = ConvUnit::new(
                    &mut init.sub(&format!("fuse{k}")),
                    ConvUnitSpec::new(1, available, spec.in_channels),
                )?;
                fuse.push(Some(unit));
            }
            blocks.push(ResBlock::new(&mut init.sub(&format!("block{k}")), *spec)?);
            available += spec.out_channels;
        }
        Ok(Self { blocks, fuse })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let mut features = vec![x];
        let mut last = x;
        for (block, fuse) in self.blocks.iter().zip(&self.fuse) {
            let input = match fuse {
                None => x,
                Some(unit) => {
                    let cat = g.concat_channels(&features);
                    unit.forward(g, ps, cat)?
                }
            };
            last = block.forward(g, ps, input)?;
            features.push(last);
        }
        Ok(last)
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.spec.out_channels)
    }
}

/// 2×2 average pooling, stride 2.
pub fn downsample(g: &mut Graph, x: Var) -> Result<Var> {
    let [_, _, h, w] = g.shape(x);
    ensure!(
        h % 2 == 0 && w % 2 == 0,
        "downsample needs even spatial dimensions, got {h}x{w}"
    );
    Ok(g.avg_pool2(x))
}

/// Bilinear ×2 upsampling.
pub fn upsample(g: &mut Graph, x: Var) -> Var {
    g.upsample2(x)
}
