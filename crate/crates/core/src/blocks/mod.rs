//! Spiking residual blocks, backbones and the detection head.

mod audit;
mod network;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use audit::{full_spike_audit, Violation};
pub use network::{
    Block, Branch, ConvDef, ConvGeometry, ConvRecord, ForwardOptions, ForwardPass, Input, Layer, Network, ParamStore, ScaleOutput,
    Shortcut,
};

/// Output channels of the encoding convolution.
pub const STEM_CHANNELS: usize = 32;
/// Output channels of the four backbone stages.
pub const STAGE_CHANNELS: [usize; 4] = [64, 128, 256, 512];
/// Width of the coarse and fine head blocks.
pub const HEAD_CHANNELS: [usize; 2] = [256, 128];
/// Strides of the fine and coarse prediction maps.
pub const HEAD_STRIDES: [usize; 2] = [16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Membrane shortcut, channels kept or reduced; every conv is spike-fed.
    Ems1,
    /// Membrane shortcut with a pooled identity slice concatenated to a
    /// spiking 1×1 branch; grows channels while staying spike-fed.
    Ems2,
    /// Membrane shortcut with identity; equal channels only.
    Ms,
    /// Spike-element-wise shortcut; equal channels only.
    Sew,
    /// Membrane shortcut whose 1×1 projection reads the membrane directly.
    MsDown,
    /// Spike-element-wise block with a spiking 1×1 projection shortcut.
    SewDown,
}

/// Which residual design a whole network is built from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockFamily {
    #[default]
    Ems,
    Ms,
    Sew,
}

impl BlockFamily {
    /// Kind used where a stage grows channels and halves the resolution.
    pub fn stage_entry(self) -> BlockKind {
        match self {
            BlockFamily::Ems => BlockKind::Ems2,
            BlockFamily::Ms => BlockKind::MsDown,
            BlockFamily::Sew => BlockKind::SewDown,
        }
    }

    /// Kind used for equal-channel blocks inside a stage.
    pub fn stage_body(self) -> BlockKind {
        match self {
            BlockFamily::Ems | BlockFamily::Ms => BlockKind::Ms,
            BlockFamily::Sew => BlockKind::Sew,
        }
    }

    /// Kind used for the channel-reducing head blocks.
    pub fn head(self) -> BlockKind {
        match self {
            BlockFamily::Ems => BlockKind::Ems1,
            BlockFamily::Ms => BlockKind::MsDown,
            BlockFamily::Sew => BlockKind::SewDown,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self { kind, in_channels, out_channels, stride }
    }

    pub fn validate(&self) -> Result<()> {
        let Self { kind, in_channels: cin, out_channels: cout, stride } = *self;
        let fail = |why: String| Err(Error::Config(format!("{kind:?} block {cin}->{cout} stride {stride}: {why}")));
        if cin == 0 || cout == 0 {
            return fail("channel counts must be positive".into());
        }
        if stride != 1 && stride != 2 {
            return fail("stride must be 1 or 2".into());
        }
        match kind {
            BlockKind::Ems1 if cout > cin => fail("EMS1 cannot grow channels; use EMS2".into()),
            BlockKind::Ems2 if cout <= cin => fail("EMS2 must grow channels".into()),
            BlockKind::Ems2 if stride != 2 => fail("EMS2 always pools, so its stride is 2".into()),
            BlockKind::Ms | BlockKind::Sew if cout != cin || stride != 1 => {
                fail("identity shortcut needs equal channels and stride 1".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Last-step membrane potential of a readout neuron.
    #[default]
    Membrane,
    /// Time-averaged spikes of a readout neuron.
    RateCoded,
}

/// What kind of values a convolution consumes, which decides both the audit
/// and whether its operations are accumulates or multiply-accumulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Encode,
    SpikeFed,
    MembraneFed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub classes: usize,
    pub anchors_per_scale: usize,
}

impl HeadSpec {
    pub fn prediction_channels(&self) -> usize {
        self.anchors_per_scale * (5 + self.classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub depth: usize,
    pub in_channels: usize,
    pub family: BlockFamily,
    pub readout: Readout,
    /// `None` builds a bare backbone.
    pub head: Option<HeadSpec>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            depth: 10,
            in_channels: 3,
            family: BlockFamily::Ems,
            readout: Readout::Membrane,
            head: Some(HeadSpec { classes: 2, anchors_per_scale: 3 }),
        }
    }
}

impl NetworkSpec {
    pub fn blocks_per_stage(&self) -> Result<[usize; 4]> {
        match self.depth {
            10 => Ok([1, 1, 1, 1]),
            18 => Ok([2, 2, 2, 2]),
            34 => Ok([3, 4, 6, 3]),
            d => Err(Error::Config(format!("depth must be 10, 18 or 34, got {d}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks_per_stage()?;
        if self.in_channels == 0 {
            return Err(Error::Config("input must have at least one channel".into()));
        }
        if let Some(head) = &self.head {
            if head.classes < 1 {
                return Err(Error::Config("detection head needs at least one class".into()));
            }
            if head.anchors_per_scale < 1 {
                return Err(Error::Config("detection head needs at least one anchor per scale".into()));
            }
        }
        Ok(())
    }

    /// Every block of the backbone, stage by stage.
    pub fn backbone_blocks(&self) -> Result<Vec<(String, BlockSpec)>> {
        let counts = self.blocks_per_stage()?;
        let mut blocks = Vec::new();
        let mut cin = STEM_CHANNELS;
        for (stage, (&cout, &count)) in STAGE_CHANNELS.iter().zip(&counts).enumerate() {
            for i in 0..count {
                let spec = if i == 0 {
                    BlockSpec::new(self.family.stage_entry(), cin, cout, 2)
                } else {
                    BlockSpec::new(self.family.stage_body(), cout, cout, 1)
                };
                blocks.push((format!("stage{}.block{i}", stage + 1), spec));
            }
            cin = cout;
        }
        Ok(blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_invariants() {
        assert!(BlockSpec::new(BlockKind::Ems2, 32, 64, 2).validate().is_ok());
        assert!(BlockSpec::new(BlockKind::Ems2, 64, 64, 2).validate().is_err());
        assert!(BlockSpec::new(BlockKind::Ems2, 32, 64, 1).validate().is_err());
        assert!(BlockSpec::new(BlockKind::Ems1, 64, 32, 1).validate().is_ok());
        assert!(BlockSpec::new(BlockKind::Ems1, 32, 64, 1).validate().is_err());
        assert!(BlockSpec::new(BlockKind::Ms, 32, 32, 1).validate().is_ok());
        assert!(BlockSpec::new(BlockKind::Ms, 32, 32, 2).validate().is_err());
        assert!(BlockSpec::new(BlockKind::Sew, 32, 64, 1).validate().is_err());
        assert!(BlockSpec::new(BlockKind::MsDown, 32, 64, 2).validate().is_ok());
        assert!(BlockSpec::new(BlockKind::Ems1, 32, 32, 3).validate().is_err());
    }

    #[test]
    fn stage_plans() {
        let count = |depth| {
            let spec = NetworkSpec { depth, ..NetworkSpec::default() };
            spec.blocks_per_stage().unwrap()
        };
        assert_eq!(count(10), [1, 1, 1, 1]);
        assert_eq!(count(18), [2, 2, 2, 2]);
        assert_eq!(count(34), [3, 4, 6, 3]);
        assert!(NetworkSpec { depth: 50, ..NetworkSpec::default() }.validate().is_err());
        let blocks = NetworkSpec { depth: 34, ..NetworkSpec::default() }.backbone_blocks().unwrap();
        assert_eq!(blocks.len(), 16);
        assert_eq!(blocks[0].1, BlockSpec::new(BlockKind::Ems2, 32, 64, 2));
        assert_eq!(blocks[1].1, BlockSpec::new(BlockKind::Ms, 64, 64, 1));
    }

    #[test]
    fn head_channel_formula() {
        assert_eq!(HeadSpec { classes: 2, anchors_per_scale: 3 }.prediction_channels(), 21);
        let spec = NetworkSpec { head: Some(HeadSpec { classes: 0, anchors_per_scale: 3 }), ..NetworkSpec::default() };
        assert!(spec.validate().is_err());
    }
}
