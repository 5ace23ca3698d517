use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_output_extent;
use crate::training::InputScaling;
use crate::transformer::{AttentionConfig, PE_BASE};

/// One convolution layer of the backbone. Every layer is followed by an ELU
/// and, when `pool` is set, a 2x2 max pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub pool: bool,
}

fn one() -> usize {
    1
}

fn default_towers() -> usize {
    1
}

fn default_pe_base() -> f64 {
    PE_BASE
}

impl ConvSpec {
    /// 3x3 "same" convolution.
    pub fn same3(out_channels: usize, pool: bool) -> Self {
        Self { out_channels, kernel: 3, stride: 1, padding: 1, pool }
    }
}

pub const POOL_SIZE: usize = 2;

/// Declarative description of a detector architecture.
///
/// `num_encoders == 0` gives the CNN-only baseline: backbone, flatten, dense
/// head, with no positional encoding or attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_bands: usize,
    pub input_size: usize,
    pub backbone: Vec<ConvSpec>,
    pub attention: AttentionConfig,
    pub num_encoders: usize,
    /// Hidden width of the encoder feed-forward block; `None` means
    /// `2 * model_dim`.
    #[serde(default)]
    pub encoder_ffn_hidden: Option<usize>,
    /// Dense widths between the flattened sequence and the output neuron.
    pub ffn_head: Vec<usize>,
    #[serde(default = "default_towers")]
    pub towers: usize,
    #[serde(default = "default_pe_base")]
    pub pe_base: f64,
    /// Pixel rescaling applied to every stamp before it reaches the network.
    #[serde(default)]
    pub input_scaling: InputScaling,
}

impl ModelConfig {
    /// Eight 3x3 conv layers (16,16,32,32,64,64,128,128; pool after every
    /// second), eight heads sharing width 128, four encoders, head 256 -> 64,
    /// on 101x101x4 stamps.
    pub fn reference() -> Self {
        let widths = [16, 16, 32, 32, 64, 64, 128, 128];
        Self {
            input_bands: 4,
            input_size: 101,
            backbone: widths.iter().enumerate().map(|(i, &w)| ConvSpec::same3(w, i % 2 == 1)).collect(),
            attention: AttentionConfig { num_heads: 8, head_dim: 16 },
            num_encoders: 4,
            encoder_ffn_hidden: None,
            ffn_head: vec![256, 64],
            towers: 1,
            pe_base: PE_BASE,
            input_scaling: InputScaling::PerBand,
        }
    }

    /// Small configuration for 32x32x4 stamps: two conv layers, one encoder
    /// with two heads over width 16.
    pub fn desk() -> Self {
        Self {
            input_bands: 4,
            input_size: 32,
            backbone: vec![ConvSpec::same3(8, true), ConvSpec::same3(16, true)],
            attention: AttentionConfig { num_heads: 2, head_dim: 8 },
            num_encoders: 1,
            encoder_ffn_hidden: None,
            ffn_head: vec![32],
            towers: 1,
            pe_base: PE_BASE,
            input_scaling: InputScaling::PerBand,
        }
    }

    /// The same backbone and head without positional encoding or encoders.
    pub fn cnn_only(&self) -> Self {
        Self { num_encoders: 0, ..self.clone() }
    }

    pub fn two_tower(&self) -> Self {
        Self { towers: 2, ..self.clone() }
    }

    pub fn model_dim(&self) -> usize {
        self.attention.model_dim()
    }

    pub fn encoder_hidden(&self) -> usize {
        self.encoder_ffn_hidden.unwrap_or(2 * self.model_dim())
    }

    /// Channels and spatial extents after the backbone.
    pub fn backbone_output(&self) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = (self.input_bands, self.input_size, self.input_size);
        for (i, spec) in self.backbone.iter().enumerate() {
            let (hh, ww) = (h, w);
            let err = || Error::Config(format!("backbone layer {i} does not fit a {hh}x{ww} input"));
            h = conv_output_extent(h, spec.kernel, spec.stride, spec.padding).ok_or_else(err)?;
            w = conv_output_extent(w, spec.kernel, spec.stride, spec.padding).ok_or_else(err)?;
            if spec.pool {
                if h < POOL_SIZE || w < POOL_SIZE {
                    return Err(err());
                }
                h /= POOL_SIZE;
                w /= POOL_SIZE;
            }
            c = spec.out_channels;
        }
        Ok((c, h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_bands == 0 || self.input_size == 0 {
            return Err(Error::Config("input_bands and input_size must be positive".into()));
        }
        if self.backbone.iter().any(|s| s.out_channels == 0 || s.kernel == 0 || s.stride == 0) {
            return Err(Error::Config("backbone layers need positive channels, kernel and stride".into()));
        }
        if !(1..=2).contains(&self.towers) {
            return Err(Error::Config(format!("towers must be 1 or 2, got {}", self.towers)));
        }
        if self.ffn_head.iter().any(|&w| w == 0) {
            return Err(Error::Config("ffn_head widths must be positive".into()));
        }
        let (d, _, _) = self.backbone_output()?;
        if self.num_encoders > 0 {
            self.attention.validate()?;
            if d != self.model_dim() {
                return Err(Error::Config(format!(
                    "backbone outputs {d} channels but attention model_dim is {}",
                    self.model_dim()
                )));
            }
            if self.model_dim() % 2 != 0 {
                return Err(Error::Config("model_dim must be even for positional encoding".into()));
            }
            if self.encoder_hidden() == 0 {
                return Err(Error::Config("encoder_ffn_hidden must be positive".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_backbone_geometry() {
        let cfg = ModelConfig::reference();
        cfg.validate().unwrap();
        assert_eq!(cfg.backbone_output().unwrap(), (128, 6, 6));
    }

    #[test]
    fn desk_geometry() {
        let cfg = ModelConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.backbone_output().unwrap(), (16, 8, 8));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.attention.head_dim = 16;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        // CNN-only models do not care about the attention width.
        cfg.cnn_only().validate().unwrap();
    }

    #[test]
    fn tower_count_is_checked() {
        let cfg = ModelConfig { towers: 3, ..ModelConfig::desk() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(ModelConfig::desk()).unwrap();
        v["dropout"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
