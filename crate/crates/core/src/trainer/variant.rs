use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// The seven trainable model configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MetGAN")]
    MetGan,
    #[serde(rename = "MetGAN-")]
    MetGanMinus,
    #[serde(rename = "MetGenCondSeg")]
    MetGenCondSeg,
    #[serde(rename = "CycleGAN")]
    CycleGan,
    #[serde(rename = "CycleGANSeg")]
    CycleGanSeg,
    #[serde(rename = "Pix2Pix")]
    Pix2Pix,
    #[serde(rename = "Pix2PixSeg")]
    Pix2PixSeg,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::MetGan,
        Variant::MetGanMinus,
        Variant::MetGenCondSeg,
        Variant::CycleGan,
        Variant::CycleGanSeg,
        Variant::Pix2Pix,
        Variant::Pix2PixSeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MetGan => "MetGAN",
            Variant::MetGanMinus => "MetGAN-",
            Variant::MetGenCondSeg => "MetGenCondSeg",
            Variant::CycleGan => "CycleGAN",
            Variant::CycleGanSeg => "CycleGANSeg",
            Variant::Pix2Pix => "Pix2Pix",
            Variant::Pix2PixSeg => "Pix2PixSeg",
        }
    }

    /// Loss weights used when a run does not override them. The
    /// conditional single-generator family keeps its customary L1 weight
    /// of 100.
    pub fn default_weights(self) -> LossWeights {
        let w = LossWeights::default();
        match variant_wiring(self).cycle {
            true => w,
            false => LossWeights { alpha4: 100.0, ..w },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "metgan" => Variant::MetGan,
            "metgan-" | "metganminus" | "metgan-minus" => Variant::MetGanMinus,
            "metgencondseg" | "metgencondseg+" => Variant::MetGenCondSeg,
            "cyclegan" => Variant::CycleGan,
            "cycleganseg" => Variant::CycleGanSeg,
            "pix2pix" => Variant::Pix2Pix,
            "pix2pixseg" => Variant::Pix2PixSeg,
            _ => return Err(Error::config(format!("unknown variant `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// U-net with the label pathway.
    MetGen,
    /// U-net alone; the label is ignored.
    PlainUNet,
}

/// Active networks and loss terms of a variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    pub generator: GeneratorKind,
    /// Two generators and two critics with cycle reconstruction; otherwise
    /// one generator and one critic.
    pub cycle: bool,
    /// Critics score `[output, source]` rather than the output alone.
    pub conditional_critic: bool,
    pub cycle_loss: bool,
    pub segmentation_loss: bool,
    pub pair_loss: bool,
}

impl Wiring {
    pub fn generators(&self) -> usize {
        if self.cycle {
            2
        } else {
            1
        }
    }

    pub fn critics(&self) -> usize {
        self.generators()
    }
}

pub fn variant_wiring(variant: Variant) -> Wiring {
    let conditional = Wiring {
        generator: GeneratorKind::PlainUNet,
        cycle: false,
        conditional_critic: true,
        cycle_loss: false,
        segmentation_loss: false,
        pair_loss: true,
    };
    let cyclic = Wiring {
        generator: GeneratorKind::PlainUNet,
        cycle: true,
        conditional_critic: false,
        cycle_loss: true,
        segmentation_loss: false,
        pair_loss: false,
    };
    match variant {
        Variant::Pix2Pix => conditional,
        Variant::Pix2PixSeg => Wiring {
            segmentation_loss: true,
            ..conditional
        },
        Variant::MetGenCondSeg => Wiring {
            generator: GeneratorKind::MetGen,
            segmentation_loss: true,
            ..conditional
        },
        Variant::CycleGan => cyclic,
        Variant::CycleGanSeg => Wiring {
            segmentation_loss: true,
            ..cyclic
        },
        Variant::MetGanMinus => Wiring {
            generator: GeneratorKind::MetGen,
            segmentation_loss: true,
            ..cyclic
        },
        Variant::MetGan => Wiring {
            generator: GeneratorKind::MetGen,
            segmentation_loss: true,
            pair_loss: true,
            ..cyclic
        },
    }
}
