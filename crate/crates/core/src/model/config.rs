use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::ConvMode;
use crate::pointcloud::NUM_CLASSES;
use crate::sparseconv::KERNEL_SIZE;
use crate::ssm::{Direction, MambaConfig, ScanDirections};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockType {
    CnnMamba,
    CnnTransformer,
    CnnOnly,
    MambaOnly,
    TransformerOnly,
}

impl BlockType {
    pub const ALL: [BlockType; 5] = [
        BlockType::CnnMamba,
        BlockType::CnnTransformer,
        BlockType::CnnOnly,
        BlockType::MambaOnly,
        BlockType::TransformerOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockType::CnnMamba => "cnn_mamba",
            BlockType::CnnTransformer => "cnn_transformer",
            BlockType::CnnOnly => "cnn_only",
            BlockType::MambaOnly => "mamba_only",
            BlockType::TransformerOnly => "transformer_only",
        }
    }

    pub fn has_conv(self) -> bool {
        matches!(self, BlockType::CnnMamba | BlockType::CnnTransformer | BlockType::CnnOnly)
    }

    pub fn has_mamba(self) -> bool {
        matches!(self, BlockType::CnnMamba | BlockType::MambaOnly)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, BlockType::CnnTransformer | BlockType::TransformerOnly)
    }
}

impl fmt::Display for BlockType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockType::ALL
            .into_iter()
            .find(|b| b.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown block type `{}`", s.trim())))
    }
}

/// Settings of every state-space mixing module in the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SsmConfig {
    pub state_dim: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub conv_mode: ConvMode,
    pub stride: usize,
    pub directions: Vec<Direction>,
    pub share_params: bool,
    pub d_skip: bool,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            state_dim: 16,
            expand: 2,
            conv_kernel: 4,
            conv_mode: ConvMode::Symmetric,
            stride: 2,
            directions: Direction::ALL.to_vec(),
            share_params: false,
            d_skip: true,
        }
    }
}

impl SsmConfig {
    pub fn scan_directions(&self) -> Result<ScanDirections> {
        ScanDirections::new(self.stride, &self.directions, self.share_params)
    }
}

/// Number of stages in the encoder after the embedding, and in the decoder.
pub const STAGES: usize = 4;

/// Channels of the fixed input encoding: colour plus centred position.
pub const INPUT_CHANNELS: usize = 6;

/// Voxel edge used by the desk preset, in meters.
pub const DESK_GRID_SIZE: f64 = 0.2;

/// Full network description.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub grid_size: f64,
    pub embedding_depth: usize,
    pub embedding_channels: usize,
    pub encoder_depths: Vec<usize>,
    pub encoder_channels: Vec<usize>,
    pub decoder_depths: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub down_strides: Vec<usize>,
    pub drop_path_rate: f64,
    /// Per stage; decoder stage `j` uses the type of encoder stage `j`.
    pub block_types: Vec<BlockType>,
    pub mlp_ratio: usize,
    pub head_dim: usize,
    pub ssm: SsmConfig,
    /// Start every residual branch's last projection at zero.
    pub zero_init_residual: bool,
}

impl ModelConfig {
    /// Published widths and depths.
    pub fn paper() -> Self {
        ModelConfig {
            in_channels: INPUT_CHANNELS,
            num_classes: NUM_CLASSES,
            grid_size: crate::pointcloud::DEFAULT_GRID_SIZE,
            embedding_depth: 2,
            embedding_channels: 32,
            encoder_depths: vec![2, 2, 6, 2],
            encoder_channels: vec![64, 128, 256, 512],
            decoder_depths: vec![1, 1, 1, 1],
            decoder_channels: vec![64, 64, 128, 256],
            down_strides: vec![2, 2, 2, 2],
            drop_path_rate: 0.3,
            block_types: vec![BlockType::CnnMamba; STAGES],
            mlp_ratio: 4,
            head_dim: 16,
            ssm: SsmConfig::default(),
            zero_init_residual: false,
        }
    }

    /// Published layout with every width multiplied by 0.25 and a coarser
    /// voxel grid, so a synthetic room holds on the order of 10³ voxels.
    pub fn desk() -> Self {
        let mut cfg = Self::paper().scaled(0.25);
        cfg.grid_size = DESK_GRID_SIZE;
        cfg
    }

    /// Multiplies every channel width by `factor` (at least 4 channels).
    pub fn scaled(mut self, factor: f64) -> Self {
        let s = |c: usize| ((c as f64 * factor).round() as usize).max(4);
        self.embedding_channels = s(self.embedding_channels);
        self.encoder_channels = self.encoder_channels.iter().map(|&c| s(c)).collect();
        self.decoder_channels = self.decoder_channels.iter().map(|&c| s(c)).collect();
        self
    }

    /// Width of level `s` (0 = embedding resolution) on the encoder side.
    pub fn encoder_width(&self, level: usize) -> usize {
        if level == 0 {
            self.embedding_channels
        } else {
            self.encoder_channels[level - 1]
        }
    }

    /// Width entering decoder stage `j` from the coarser level.
    pub fn decoder_input_width(&self, j: usize) -> usize {
        if j + 1 == STAGES {
            self.encoder_channels[STAGES - 1]
        } else {
            self.decoder_channels[j + 1]
        }
    }

    pub fn heads(&self, width: usize) -> usize {
        (width / self.head_dim.max(1)).max(1)
    }

    pub fn mamba_config(&self, width: usize) -> Result<MambaConfig> {
        Ok(MambaConfig {
            d_model: width,
            state_dim: self.ssm.state_dim,
            expand: self.ssm.expand,
            conv_kernel: self.ssm.conv_kernel,
            conv_mode: self.ssm.conv_mode,
            directions: self.ssm.scan_directions()?,
            d_skip: self.ssm.d_skip,
        })
    }

    pub fn total_blocks(&self) -> usize {
        self.embedding_depth + self.encoder_depths.iter().sum::<usize>() + self.decoder_depths.iter().sum::<usize>()
    }

    pub fn kernel_size(&self) -> usize {
        KERNEL_SIZE
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, list) in [
            ("encoder_depths", &self.encoder_depths),
            ("encoder_channels", &self.encoder_channels),
            ("decoder_depths", &self.decoder_depths),
            ("decoder_channels", &self.decoder_channels),
            ("down_strides", &self.down_strides),
        ] {
            if list.len() != STAGES {
                return bad(format!("{name} needs {STAGES} entries, got {}", list.len()));
            }
        }
        if self.block_types.len() != STAGES {
            return bad(format!("block_type needs 1 or {STAGES} entries, got {}", self.block_types.len()));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0)
            || self.embedding_channels == 0
        {
            return bad("channel widths must be positive".into());
        }
        if self.embedding_depth == 0 {
            return bad("embedding_depth must be at least 1".into());
        }
        if let Some(s) = self.down_strides.iter().find(|&&s| s < 2) {
            return bad(format!("down_strides entries must be >= 2, got {s}"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate must lie in [0, 1), got {}", self.drop_path_rate));
        }
        if !(self.grid_size > 0.0 && self.grid_size.is_finite()) {
            return bad(format!("grid_size must be positive, got {}", self.grid_size));
        }
        if self.num_classes < 2 || self.in_channels == 0 || self.mlp_ratio == 0 || self.head_dim == 0 {
            return bad("num_classes >= 2, in_channels, mlp_ratio and head_dim > 0 required".into());
        }
        if self.ssm.state_dim == 0 || self.ssm.expand == 0 || self.ssm.conv_kernel == 0 {
            return bad("ssm.state_dim, ssm.expand and ssm.conv_kernel must be positive".into());
        }
        self.ssm.scan_directions()?;
        let widths = self.encoder_channels.iter().chain(&self.decoder_channels);
        for &w in widths {
            if w % self.heads(w) != 0 {
                return bad(format!("width {w} is not divisible into {} heads", self.heads(w)));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "in_channels" => self.in_channels = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "grid_size" => self.grid_size = parse(key, v)?,
            "embedding_depth" => self.embedding_depth = parse(key, v)?,
            "embedding_channels" => self.embedding_channels = parse(key, v)?,
            "encoder_depths" => self.encoder_depths = parse_list(key, v)?,
            "encoder_channels" => self.encoder_channels = parse_list(key, v)?,
            "decoder_depths" => self.decoder_depths = parse_list(key, v)?,
            "decoder_channels" => self.decoder_channels = parse_list(key, v)?,
            "down_strides" => self.down_strides = parse_list(key, v)?,
            "drop_path_rate" => self.drop_path_rate = parse(key, v)?,
            "block_type" => {
                let types: Vec<BlockType> = parse_list(key, v)?;
                self.block_types = if types.len() == 1 { vec![types[0]; STAGES] } else { types };
            }
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "head_dim" => self.head_dim = parse(key, v)?,
            "zero_init_residual" => self.zero_init_residual = parse(key, v)?,
            "ssm.state_dim" => self.ssm.state_dim = parse(key, v)?,
            "ssm.expand" => self.ssm.expand = parse(key, v)?,
            "ssm.conv_kernel" => self.ssm.conv_kernel = parse(key, v)?,
            "ssm.conv_mode" => self.ssm.conv_mode = parse(key, v)?,
            "ssm.stride" => self.ssm.stride = parse(key, v)?,
            "ssm.directions" => self.ssm.directions = ScanDirections::parse_list(v)?,
            "ssm.share_params" => self.ssm.share_params = parse(key, v)?,
            "ssm.d_skip" => self.ssm.d_skip = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the desk defaults and validates.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (key, value) in config_lines(text)? {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key, in a form [`ModelConfig::from_config_str`] reads back.
    pub fn to_config_string(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("in_channels", self.in_channels.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("grid_size", self.grid_size.to_string());
        kv("embedding_depth", self.embedding_depth.to_string());
        kv("embedding_channels", self.embedding_channels.to_string());
        kv("encoder_depths", list(&self.encoder_depths));
        kv("encoder_channels", list(&self.encoder_channels));
        kv("decoder_depths", list(&self.decoder_depths));
        kv("decoder_channels", list(&self.decoder_channels));
        kv("down_strides", list(&self.down_strides));
        kv("drop_path_rate", self.drop_path_rate.to_string());
        kv(
            "block_type",
            self.block_types.iter().map(|b| b.name()).collect::<Vec<_>>().join(","),
        );
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("head_dim", self.head_dim.to_string());
        kv("zero_init_residual", self.zero_init_residual.to_string());
        kv("ssm.state_dim", self.ssm.state_dim.to_string());
        kv("ssm.expand", self.ssm.expand.to_string());
        kv("ssm.conv_kernel", self.ssm.conv_kernel.to_string());
        kv("ssm.conv_mode", self.ssm.conv_mode.to_string());
        kv("ssm.stride", self.ssm.stride.to_string());
        kv(
            "ssm.directions",
            self.ssm.directions.iter().map(|d| d.name()).collect::<Vec<_>>().join(","),
        );
        kv("ssm.share_params", self.ssm.share_params.to_string());
        kv("ssm.d_skip", self.ssm.d_skip.to_string());
        s
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{}`", key.trim())))
}

pub(crate) fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p)).collect()
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn config_lines(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim(), v.trim()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::paper().validate().unwrap();
        let desk = ModelConfig::desk();
        desk.validate().unwrap();
        assert_eq!(desk.encoder_channels, vec![16, 32, 64, 128]);
        assert_eq!(desk.decoder_channels, vec![16, 16, 32, 64]);
        assert_eq!(desk.embedding_channels, 8);
        assert_eq!(ModelConfig::paper().total_blocks(), 18);
        assert_eq!(ModelConfig::paper().heads(512), 32);
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = ModelConfig::desk();
        cfg.block_types = vec![BlockType::CnnOnly, BlockType::MambaOnly, BlockType::CnnMamba, BlockType::CnnTransformer];
        cfg.ssm.conv_mode = ConvMode::Causal;
        cfg.ssm.directions = vec![Direction::Forward];
        cfg.ssm.stride = 4;
        cfg.drop_path_rate = 0.125;
        let text = cfg.to_config_string();
        assert_eq!(ModelConfig::from_config_str(&text).unwrap(), cfg);
    }

    #[test]
    fn parses_lists_and_rejects_unknown_keys() {
        let cfg = ModelConfig::from_config_str(
            "# comment\nencoder_depths = 1,1,2,1\nblock_type = cnn_only\nssm.directions = forward, backward\n",
        )
        .unwrap();
        assert_eq!(cfg.encoder_depths, vec![1, 1, 2, 1]);
        assert_eq!(cfg.block_types, vec![BlockType::CnnOnly; 4]);
        assert_eq!(cfg.ssm.directions.len(), 2);
        assert!(matches!(ModelConfig::from_config_str("colour = red"), Err(Error::Config(_))));
        assert!(ModelConfig::from_config_str("encoder_depths = 1,2").is_err());
        assert!(ModelConfig::from_config_str("drop_path_rate = 1.0").is_err());
        assert!(ModelConfig::from_config_str("down_strides = 2,1,2,2").is_err());
        assert!(ModelConfig::from_config_str("ssm.stride = 1").is_err());
        assert!(ModelConfig::from_config_str("no equals sign").is_err());
    }
}
