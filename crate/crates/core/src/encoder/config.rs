use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EncoderError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lite,
    Big,
    Custom,
}

impl FromStr for Variant {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lite" => Ok(Self::Lite),
            "big" => Ok(Self::Big),
            "custom" => Ok(Self::Custom),
            other => Err(EncoderError::Config(format!("unknown variant '{other}'"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lite => "lite",
            Self::Big => "big",
            Self::Custom => "custom",
        })
    }
}

/// One step of the convolutional backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneLayer {
    /// Same-padded convolution with an odd square kernel.
    Conv { out_channels: usize, kernel: usize },
    MaxPool,
}

/// Backbone written as comma-separated tokens: `p` for a 2×2 max-pool, `N`
/// for a 3×3 convolution to N channels, `NxK` for a K×K convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackbonePlan(pub Vec<BackboneLayer>);

impl FromStr for BackbonePlan {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |tok: &str| EncoderError::Config(format!("bad backbone token '{tok}'"));
        let layers = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|tok| {
                if tok == "p" {
                    return Ok::<_, EncoderError>(BackboneLayer::MaxPool);
                }
                let (ch, k) = tok.split_once('x').unwrap_or((tok, "3"));
                let out_channels = ch.parse().map_err(|_| bad(tok))?;
                let kernel = k.parse().map_err(|_| bad(tok))?;
                Ok(BackboneLayer::Conv { out_channels, kernel })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self(layers))
    }
}

impl fmt::Display for BackbonePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tokens: Vec<String> = self
            .0
            .iter()
            .map(|l| match l {
                BackboneLayer::MaxPool => "p".to_string(),
                BackboneLayer::Conv { out_channels, kernel: 3 } => out_channels.to_string(),
                BackboneLayer::Conv { out_channels, kernel } => format!("{out_channels}x{kernel}"),
            })
            .collect();
        f.write_str(&tokens.join(","))
    }
}

pub const LITE_BACKBONE: &str = "64,64,p,64,64,p,128,128,p,128,128,256,256";
pub const BIG_BACKBONE: &str = "64,64,p,64,64,p,128,128,p,128,128,256,256,512,512x1";
pub const TINY_BACKBONE: &str = "16,p,32,p,64,p,64,64";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub variant: Variant,
    /// Descriptor dimension D; the last backbone convolution must output it.
    pub descriptor_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub input_channels: usize,
    pub backbone: BackbonePlan,
    /// Adds the fixed 2D sinusoidal encoding before the first attention layer.
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::lite()
    }
}

impl EncoderConfig {
    pub fn lite() -> Self {
        Self {
            variant: Variant::Lite,
            descriptor_dim: 256,
            num_layers: 5,
            num_heads: 4,
            input_channels: 3,
            backbone: LITE_BACKBONE.parse().expect("valid plan"),
            positional_encoding: true,
        }
    }

    pub fn big() -> Self {
        Self {
            variant: Variant::Big,
            descriptor_dim: 512,
            backbone: BIG_BACKBONE.parse().expect("valid plan"),
            ..Self::lite()
        }
    }

    /// Desk-scale configuration: D=64, L=2, h=2 with a narrow backbone.
    pub fn tiny() -> Self {
        Self {
            variant: Variant::Custom,
            descriptor_dim: 64,
            num_layers: 2,
            num_heads: 2,
            input_channels: 3,
            backbone: TINY_BACKBONE.parse().expect("valid plan"),
            positional_encoding: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.descriptor_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: String| Err(EncoderError::Config(m));
        if self.descriptor_dim == 0 || self.num_heads == 0 || self.descriptor_dim % self.num_heads != 0 {
            return err(format!(
                "descriptor dim {} must be a positive multiple of the head count {}",
                self.descriptor_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return err("at least one attention layer is required".into());
        }
        if self.input_channels == 0 {
            return err("input_channels must be positive".into());
        }
        let pools = self.backbone.0.iter().filter(|l| **l == BackboneLayer::MaxPool).count();
        if pools != 3 {
            return err(format!("backbone must downsample by 8 (3 pools), has {pools}"));
        }
        for layer in &self.backbone.0 {
            if let BackboneLayer::Conv { out_channels, kernel } = layer {
                if *out_channels == 0 || kernel % 2 == 0 {
                    return err(format!("convolution needs channels > 0 and an odd kernel, got {layer:?}"));
                }
            }
        }
        match self.backbone.0.last() {
            Some(BackboneLayer::Conv { out_channels, .. }) if *out_channels == self.descriptor_dim => Ok(()),
            _ => err(format!("backbone must end with a convolution to D = {}", self.descriptor_dim)),
        }
    }

    /// Flat `key=value` lines, readable by [`EncoderConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("encoder.variant".into(), self.variant.to_string()),
            ("encoder.descriptor_dim".into(), self.descriptor_dim.to_string()),
            ("encoder.num_layers".into(), self.num_layers.to_string()),
            ("encoder.num_heads".into(), self.num_heads.to_string()),
            ("encoder.input_channels".into(), self.input_channels.to_string()),
            ("encoder.backbone".into(), self.backbone.to_string()),
            ("encoder.positional_encoding".into(), self.positional_encoding.to_string()),
        ]
    }

    /// Starts from the preset named by `encoder.variant` (lite when absent)
    /// and applies the remaining `encoder.*` keys on top.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, EncoderError> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().filter(|(k, _)| k.starts_with("encoder.")).collect();
        let mut cfg = match pairs.iter().find(|(k, _)| *k == "encoder.variant").map(|(_, v)| *v) {
            Some("big") => Self::big(),
            Some("tiny") => Self::tiny(),
            Some(v) => Self { variant: v.parse()?, ..Self::lite() },
            None => Self::lite(),
        };
        let num = |k: &str, v: &str| {
            v.parse::<usize>().map_err(|_| EncoderError::Config(format!("{k}: expected an integer, got '{v}'")))
        };
        for (k, v) in pairs {
            match k {
                "encoder.variant" => {}
                "encoder.descriptor_dim" => cfg.descriptor_dim = num(k, v)?,
                "encoder.num_layers" => cfg.num_layers = num(k, v)?,
                "encoder.num_heads" => cfg.num_heads = num(k, v)?,
                "encoder.input_channels" => cfg.input_channels = num(k, v)?,
                "encoder.backbone" => cfg.backbone = v.parse()?,
                "encoder.positional_encoding" => {
                    cfg.positional_encoding =
                        v.parse().map_err(|_| EncoderError::Config(format!("{k}: expected true/false, got '{v}'")))?
                }
                other => return Err(EncoderError::Config(format!("unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
