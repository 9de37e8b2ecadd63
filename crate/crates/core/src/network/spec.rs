use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::regularizers::{RegularizerConfig, RegularizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    ResNet,
    WideResNet,
    PyramidNet,
    /// Single grouped-convolution branch.
    ResNeXt2,
    /// Two parallel residual branches (the Shake-Shake form).
    ResNeXt3,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::ResNet => "resnet",
            Family::WideResNet => "wide-resnet",
            Family::PyramidNet => "pyramidnet",
            Family::ResNeXt2 => "resnext2",
            Family::ResNeXt3 => "resnext3",
        }
    }

    /// Families whose blocks start with BN instead of a convolution.
    pub fn pre_activation(self) -> bool {
        matches!(self, Family::WideResNet | Family::PyramidNet)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "resnet" => Ok(Family::ResNet),
            "wide-resnet" => Ok(Family::WideResNet),
            "pyramidnet" => Ok(Family::PyramidNet),
            "resnext2" => Ok(Family::ResNeXt2),
            "resnext3" => Ok(Family::ResNeXt3),
            other => Err(Error::Parse(format!("unknown network family {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        }
    }

    /// Convolutions per residual branch.
    pub fn convs(self) -> usize {
        match self {
            BlockKind::Basic => 2,
            BlockKind::Bottleneck => 3,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "basic" => Ok(BlockKind::Basic),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            other => Err(Error::Parse(format!("unknown block kind {other:?}"))),
        }
    }
}

/// Where the perturbation unit sits in a two-branch block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Insertion {
    /// One unit on the branch sum: `x + D(F1 + F2)`.
    TypeA,
    /// Independent units per branch: `x + D1(F1) + D2(F2)`.
    TypeB,
}

impl Insertion {
    pub fn as_str(self) -> &'static str {
        match self {
            Insertion::TypeA => "type-a",
            Insertion::TypeB => "type-b",
        }
    }
}

impl fmt::Display for Insertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Insertion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "type-a" => Ok(Insertion::TypeA),
            "type-b" => Ok(Insertion::TypeB),
            other => Err(Error::Parse(format!("unknown insertion type {other:?}"))),
        }
    }
}

/// Declarative description of a residual network.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub family: Family,
    /// Weighted layer count: stem conv + convolutions in all blocks + classifier.
    pub depth: usize,
    pub block: BlockKind,
    pub widen_factor: usize,
    /// Total channel growth across all blocks (PyramidNet only).
    pub pyramid_alpha: usize,
    /// Groups of the grouped convolution (ResNeXt only).
    pub cardinality: usize,
    pub base_width: usize,
    pub stages: usize,
    pub erase_relu: bool,
    pub bn_end: bool,
    pub regularizer: RegularizerConfig,
    pub insertion: Insertion,
    pub num_classes: usize,
    /// `(channels, height, width)` of one input image.
    pub input_shape: (usize, usize, usize),
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self {
            family: Family::ResNet,
            depth: 8,
            block: BlockKind::Basic,
            widen_factor: 1,
            pyramid_alpha: 48,
            cardinality: 1,
            base_width: 16,
            stages: 3,
            erase_relu: false,
            bn_end: false,
            regularizer: RegularizerConfig::none(),
            insertion: Insertion::TypeB,
            num_classes: 10,
            input_shape: (3, 32, 32),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ArchitectureSpec {
    /// Residual blocks per stage implied by the depth.
    pub fn blocks_per_stage(&self) -> Result<usize> {
        let per_block = self.block.convs();
        let unit = per_block * self.stages;
        if self.stages == 0 {
            return Err(Error::Config("a network needs at least one stage".into()));
        }
        if self.depth < 2 + unit || (self.depth - 2) % unit != 0 {
            return Err(Error::Config(format!(
                "depth {} does not fit {} stages of {} blocks: need depth = 2 + {unit}k with k >= 1",
                self.depth, self.stages, self.block
            )));
        }
        Ok((self.depth - 2) / unit)
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks_per_stage()?;
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("input shape dimensions must be >= 1".into()));
        }
        if self.widen_factor == 0 || self.base_width == 0 || self.cardinality == 0 {
            return Err(Error::Config(
                "widen_factor, base_width and cardinality must be >= 1".into(),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in [0, 1]".into()));
        }
        self.regularizer.validate()?;
        if self.regularizer.kind == RegularizerKind::ShakeShake && self.family != Family::ResNeXt3 {
            return Err(Error::Config(format!(
                "shake-shake needs two residual branches (resnext3), got {}",
                self.family
            )));
        }
        if matches!(self.family, Family::ResNeXt2 | Family::ResNeXt3) {
            for stage in 0..self.stages {
                let inner = self.base_width << stage;
                let width = inner * self.widen_factor;
                if width % self.cardinality != 0 {
                    return Err(Error::Config(format!(
                        "cardinality {} does not divide grouped width {width}",
                        self.cardinality
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Number of residual blocks `L`, the value the decay schedule uses.
pub fn count_blocks(spec: &ArchitectureSpec) -> Result<usize> {
    Ok(spec.blocks_per_stage()? * spec.stages)
}
