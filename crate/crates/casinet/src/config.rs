//! Model configuration spanning every ablation switch.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaActivation {
    Sigmoid,
    Softmax,
}

impl SaActivation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(SaActivation::Sigmoid),
            "softmax" => Ok(SaActivation::Softmax),
            other => Err(Error::Config(format!(
                "sa_activation must be sigmoid or softmax, got {other}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SaActivation::Sigmoid => "sigmoid",
            SaActivation::Softmax => "softmax",
        }
    }
}

/// All architecture switches and hyperparameters of the segmentation model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of scale branches.
    pub k: usize,
    /// Dilation rate per branch; length must equal `k`.
    pub dilations: Vec<usize>,
    /// Output channels of each pyramid branch.
    pub branch_channels: usize,
    /// Channels of the final backbone stage.
    pub backbone_channels: usize,
    /// Keep the dilated pyramid; off reduces the model to backbone + classifier.
    pub use_aspp: bool,
    pub use_csi: bool,
    pub use_sa: bool,
    /// Concatenate one-hot scale-index planes before the interaction embeddings.
    pub scale_index: bool,
    /// One embedding pair shared by all scales instead of per-scale pairs.
    pub shared_embedding: bool,
    pub sa_activation: SaActivation,
    /// One attention value per (position, scale), broadcast over channels.
    pub sa_channel_shared: bool,
    /// Add the unrefined feature back onto the interaction output.
    pub csi_residual: bool,
    pub num_classes: usize,
    /// Weight of the auxiliary loss term.
    pub aux_weight: f64,
    /// Channel shrink rate of the attention bottleneck.
    pub reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 5,
            dilations: vec![1, 6, 12, 24, 36],
            branch_channels: 24,
            backbone_channels: 32,
            use_aspp: true,
            use_csi: true,
            use_sa: true,
            scale_index: true,
            shared_embedding: false,
            sa_activation: SaActivation::Sigmoid,
            sa_channel_shared: false,
            csi_residual: false,
            num_classes: 4,
            aux_weight: 0.4,
            reduction: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.dilations.len() != self.k {
            return Err(Error::Config(format!(
                "dilations has {} entries but k = {}",
                self.dilations.len(),
                self.k
            )));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.num_classes > 254 {
            return Err(Error::Config("num_classes must fit 8-bit labels (<= 254)".into()));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::Config("aux_weight must be non-negative".into()));
        }
        if self.reduction < 1 {
            return Err(Error::Config("reduction must be at least 1".into()));
        }
        if self.branch_channels == 0 || self.backbone_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Key=value form used in checkpoints and resolved run configs.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let dil = self
            .dilations
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("k".into(), self.k.to_string()),
            ("dilations".into(), dil),
            ("branch_channels".into(), self.branch_channels.to_string()),
            ("backbone_channels".into(), self.backbone_channels.to_string()),
            ("use_aspp".into(), self.use_aspp.to_string()),
            ("use_csi".into(), self.use_csi.to_string()),
            ("use_sa".into(), self.use_sa.to_string()),
            ("scale_index".into(), self.scale_index.to_string()),
            ("shared_embedding".into(), self.shared_embedding.to_string()),
            ("sa_activation".into(), self.sa_activation.as_str().to_string()),
            ("sa_channel_shared".into(), self.sa_channel_shared.to_string()),
            ("csi_residual".into(), self.csi_residual.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("aux_weight".into(), format!("{}", self.aux_weight)),
            ("reduction".into(), self.reduction.to_string()),
        ]
    }

    /// Apply one key=value pair; Ok(false) means the key is not a model key.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "k" => self.k = parse(key, value)?,
            "dilations" => {
                self.dilations = value
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad dilation entry {s:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            "branch_channels" => self.branch_channels = parse(key, value)?,
            "backbone_channels" => self.backbone_channels = parse(key, value)?,
            "use_aspp" => self.use_aspp = parse_bool(key, value)?,
            "use_csi" => self.use_csi = parse_bool(key, value)?,
            "use_sa" => self.use_sa = parse_bool(key, value)?,
            "scale_index" => self.scale_index = parse_bool(key, value)?,
            "shared_embedding" => self.shared_embedding = parse_bool(key, value)?,
            "sa_activation" => self.sa_activation = SaActivation::parse(value)?,
            "sa_channel_shared" => self.sa_channel_shared = parse_bool(key, value)?,
            "csi_residual" => self.csi_residual = parse_bool(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "aux_weight" => self.aux_weight = parse(key, value)?,
            "reduction" => self.reduction = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for key {key}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_matches_published_recipe() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.dilations, vec![1, 6, 12, 24, 36]);
        assert_eq!(cfg.reduction, 4);
        assert!((cfg.aux_weight - 0.4).abs() < 1e-15);
        assert_eq!(cfg.sa_activation, SaActivation::Sigmoid);
        assert!(cfg.scale_index);
        assert!(!cfg.shared_embedding);
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::default();
        cfg.use_csi = false;
        cfg.sa_activation = SaActivation::Softmax;
        cfg.dilations = vec![1, 2, 3];
        cfg.k = 3;
        let kv = cfg.to_kv();
        let mut back = ModelConfig::default();
        for (k, v) in &kv {
            assert!(back.apply_kv(k, v).unwrap(), "key {k} not applied");
        }
        assert_eq!(cfg, back);
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.apply_kv("use_csi", "maybe").is_err());
        assert!(cfg.apply_kv("k", "-3").is_err());
        assert!(!cfg.apply_kv("nonexistent", "1").unwrap());

        cfg.dilations = vec![1, 2];
        assert!(cfg.validate().is_err());
    }
}
