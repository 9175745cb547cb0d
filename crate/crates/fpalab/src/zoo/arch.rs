//! Architecture specifications for the model zoo.
//!
//! Three families cover the heterogeneous-transfer setting: plain and
//! residual convolutional nets, a patch transformer, and a token/channel
//! mixer. A spec fully determines parameter shapes, so a checkpoint stores
//! the spec alongside the weights.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Input image geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// One convolutional block: 3x3 conv (pad 1) + bias + ReLU, optionally
/// followed by an identity residual add of the block input (requires stride 1
/// and unchanged channel count).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub stride: usize,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub name: String,
    pub input: ImageDims,
    pub num_classes: usize,
    pub blocks: Vec<ConvBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub name: String,
    pub input: ImageDims,
    pub num_classes: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerSpec {
    pub name: String,
    pub input: ImageDims,
    pub num_classes: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
}

/// A complete, self-describing architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ArchSpec {
    ConvNet(ConvNetSpec),
    PatchTransformer(TransformerSpec),
    Mixer(MixerSpec),
}

impl ArchSpec {
    pub fn name(&self) -> &str {
        match self {
            ArchSpec::ConvNet(s) => &s.name,
            ArchSpec::PatchTransformer(s) => &s.name,
            ArchSpec::Mixer(s) => &s.name,
        }
    }

    pub fn input(&self) -> ImageDims {
        match self {
            ArchSpec::ConvNet(s) => s.input,
            ArchSpec::PatchTransformer(s) => s.input,
            ArchSpec::Mixer(s) => s.input,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ArchSpec::ConvNet(s) => s.num_classes,
            ArchSpec::PatchTransformer(s) => s.num_classes,
            ArchSpec::Mixer(s) => s.num_classes,
        }
    }

    pub fn is_conv_net(&self) -> bool {
        matches!(self, ArchSpec::ConvNet(_))
    }

    pub fn validate(&self) -> Result<()> {
        let input = self.input();
        if input.channels == 0 || input.height == 0 || input.width == 0 {
            return Err(Error::config(format!("{}: degenerate input {input:?}", self.name())));
        }
        if self.num_classes() < 2 {
            return Err(Error::config(format!("{}: need at least 2 classes", self.name())));
        }
        match self {
            ArchSpec::ConvNet(s) => s.validate(),
            ArchSpec::PatchTransformer(s) => {
                if s.patch == 0 || s.input.height % s.patch != 0 || s.input.width % s.patch != 0 {
                    return Err(Error::config(format!(
                        "{}: patch {} does not divide {}x{}",
                        s.name, s.patch, s.input.height, s.input.width
                    )));
                }
                if s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0 {
                    return Err(Error::config(format!(
                        "{}: dim {} must be a positive multiple of heads {}",
                        s.name, s.dim, s.heads
                    )));
                }
                if s.depth == 0 || s.mlp_hidden == 0 {
                    return Err(Error::config(format!("{}: zero depth or hidden width", s.name)));
                }
                Ok(())
            }
            ArchSpec::Mixer(s) => {
                if s.patch == 0 || s.input.height % s.patch != 0 || s.input.width % s.patch != 0 {
                    return Err(Error::config(format!(
                        "{}: patch {} does not divide {}x{}",
                        s.name, s.patch, s.input.height, s.input.width
                    )));
                }
                if s.dim == 0 || s.depth == 0 || s.token_hidden == 0 || s.channel_hidden == 0 {
                    return Err(Error::config(format!("{}: zero-width component", s.name)));
                }
                Ok(())
            }
        }
    }
}

impl ConvNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config(format!("{}: conv net needs at least one block", self.name)));
        }
        let mut channels = self.input.channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.stride == 0 {
                return Err(Error::config(format!(
                    "{}: block {} has zero channels or stride",
                    self.name,
                    i + 1
                )));
            }
            if b.residual && (b.stride != 1 || b.channels != channels) {
                return Err(Error::config(format!(
                    "{}: block {} residual add needs stride 1 and {} channels, got stride {} / {} channels",
                    self.name,
                    i + 1,
                    channels,
                    b.stride,
                    b.channels
                )));
            }
            channels = b.channels;
        }
        let (_, h, w) = self.block_output_dims(self.blocks.len());
        if h == 0 || w == 0 || h != w {
            return Err(Error::config(format!(
                "{}: final feature map {h}x{w} must be square and non-empty for global pooling",
                self.name
            )));
        }
        Ok(())
    }

    /// `(channels, height, width)` of the activation after 1-based block
    /// `position` (0 = network input). All blocks are 3x3 / pad-1 convs.
    pub fn block_output_dims(&self, position: usize) -> (usize, usize, usize) {
        let mut c = self.input.channels;
        let mut h = self.input.height;
        let mut w = self.input.width;
        for b in self.blocks.iter().take(position) {
            c = b.channels;
            h = (h - 1) / b.stride + 1;
            w = (w - 1) / b.stride + 1;
        }
        (c, h, w)
    }
}

// ===================== zoo presets =====================

/// Residual 6-block CNN — the attack surrogate. Identity residual adds after
/// blocks 2, 4 and 6; downsampling at blocks 3 and 5.
pub fn convnet_a(input: ImageDims, num_classes: usize) -> ArchSpec {
    let widths = [8, 8, 16, 16, 32, 32];
    let strides = [1, 1, 2, 1, 2, 1];
    let blocks = widths
        .iter()
        .zip(strides)
        .enumerate()
        .map(|(i, (&channels, stride))| ConvBlock {
            channels,
            stride,
            residual: i % 2 == 1,
        })
        .collect();
    ArchSpec::ConvNet(ConvNetSpec {
        name: "convnet-a".to_string(),
        input,
        num_classes,
        blocks,
    })
}

/// Plain 5-block CNN without residual connections — the homogeneous target.
pub fn convnet_b(input: ImageDims, num_classes: usize) -> ArchSpec {
    let widths = [10, 10, 20, 20, 20];
    let strides = [1, 1, 2, 2, 1];
    let blocks = widths
        .iter()
        .zip(strides)
        .map(|(&channels, stride)| ConvBlock {
            channels,
            stride,
            residual: false,
        })
        .collect();
    ArchSpec::ConvNet(ConvNetSpec {
        name: "convnet-b".to_string(),
        input,
        num_classes,
        blocks,
    })
}

/// Four-block patch transformer with learned positional embeddings and
/// mean-pooled classification head — the attention-family target.
pub fn patch_transformer(input: ImageDims, num_classes: usize) -> ArchSpec {
    ArchSpec::PatchTransformer(TransformerSpec {
        name: "transformer".to_string(),
        input,
        num_classes,
        patch: 4,
        dim: 32,
        heads: 4,
        depth: 4,
        mlp_hidden: 64,
    })
}

/// Four-block token/channel mixer — the MLP-family target.
pub fn mixer(input: ImageDims, num_classes: usize) -> ArchSpec {
    ArchSpec::Mixer(MixerSpec {
        name: "mixer".to_string(),
        input,
        num_classes,
        patch: 4,
        dim: 32,
        depth: 4,
        token_hidden: 32,
        channel_hidden: 64,
    })
}

/// The standard experiment input: one grayscale 32x32 plane.
pub fn standard_input() -> ImageDims {
    ImageDims {
        channels: 1,
        height: 32,
        width: 32,
    }
}

/// All four zoo presets in canonical order (surrogate first).
pub fn zoo_presets(input: ImageDims, num_classes: usize) -> Vec<ArchSpec> {
    vec![
        convnet_a(input, num_classes),
        convnet_b(input, num_classes),
        patch_transformer(input, num_classes),
        mixer(input, num_classes),
    ]
}

/// Look up a preset by its canonical name.
pub fn preset_by_name(name: &str, input: ImageDims, num_classes: usize) -> Result<ArchSpec> {
    match name {
        "convnet-a" => Ok(convnet_a(input, num_classes)),
        "convnet-b" => Ok(convnet_b(input, num_classes)),
        "transformer" => Ok(patch_transformer(input, num_classes)),
        "mixer" => Ok(mixer(input, num_classes)),
        other => Err(Error::config(format!(
            "unknown architecture '{other}' (expected convnet-a, convnet-b, transformer or mixer)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for spec in zoo_presets(standard_input(), 10) {
            spec.validate().unwrap_or_else(|e| panic!("{}: {e}", spec.name()));
        }
    }

    #[test]
    fn conv_block_dims_track_strides() {
        let ArchSpec::ConvNet(spec) = convnet_a(standard_input(), 10) else {
            unreachable!()
        };
        assert_eq!(spec.block_output_dims(0), (1, 32, 32));
        assert_eq!(spec.block_output_dims(2), (8, 32, 32));
        assert_eq!(spec.block_output_dims(5), (32, 8, 8));
        assert_eq!(spec.block_output_dims(6), (32, 8, 8));
    }

    #[test]
    fn both_conv_presets_reach_block_five() {
        for name in ["convnet-a", "convnet-b"] {
            let ArchSpec::ConvNet(spec) = preset_by_name(name, standard_input(), 10).unwrap() else {
                unreachable!()
            };
            assert!(spec.blocks.len() >= 5, "{name} has {} blocks", spec.blocks.len());
        }
    }

    #[test]
    fn serde_round_trip_is_identity() {
        for spec in zoo_presets(standard_input(), 10) {
            let json = serde_json::to_string(&spec).unwrap();
            let back: ArchSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(spec, back);
        }
    }

    #[test]
    fn serialized_form_is_stable() {
        let spec = convnet_a(standard_input(), 10);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"family\":\"conv-net\""), "{json}");
        assert!(json.contains("\"name\":\"convnet-a\""), "{json}");
        assert!(json.contains("\"blocks\""), "{json}");
        // Serialization must be deterministic for byte-identical checkpoints.
        assert_eq!(json, serde_json::to_string(&spec).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut residual_mismatch = ConvNetSpec {
            name: "bad".to_string(),
            input: standard_input(),
            num_classes: 10,
            blocks: vec![
                ConvBlock { channels: 8, stride: 1, residual: false },
                ConvBlock { channels: 16, stride: 1, residual: true },
            ],
        };
        assert!(matches!(residual_mismatch.validate(), Err(Error::Config(_))));
        residual_mismatch.blocks[1].channels = 8;
        residual_mismatch.validate().unwrap();

        let bad_patch = ArchSpec::PatchTransformer(TransformerSpec {
            name: "bad".to_string(),
            input: standard_input(),
            num_classes: 10,
            patch: 5,
            dim: 32,
            heads: 4,
            depth: 2,
            mlp_hidden: 32,
        });
        assert!(matches!(bad_patch.validate(), Err(Error::Config(_))));

        assert!(preset_by_name("resnet50", standard_input(), 10).is_err());
    }
}
