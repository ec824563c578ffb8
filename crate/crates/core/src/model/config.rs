use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Plain EGNN; no virtual nodes.
    Egnn,
    FastEgnn,
    /// Distance-only radial field: no node features, no virtual features.
    FastRf,
    /// SchNet-style filters with an equivariant coordinate head.
    FastSchnet,
}

impl Backbone {
    /// Whether node features `h` and virtual features `S` exist.
    pub fn has_features(self) -> bool {
        !matches!(self, Backbone::FastRf)
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Egnn => "egnn",
            Backbone::FastEgnn => "fast_egnn",
            Backbone::FastRf => "fast_rf",
            Backbone::FastSchnet => "fast_schnet",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "egnn" => Ok(Backbone::Egnn),
            "fast_egnn" => Ok(Backbone::FastEgnn),
            "fast_rf" => Ok(Backbone::FastRf),
            "fast_schnet" => Ok(Backbone::FastSchnet),
            _ => Err(Error::invalid(format!(
                "unknown backbone `{s}` (expected egnn, fast_egnn, fast_rf or fast_schnet)"
            ))),
        }
    }
}

/// How a real node talks to the virtual set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VirtualMessageMode {
    /// One message per (node, channel) pair.
    #[default]
    PerPair,
    /// One message per node from the whole concatenated virtual set, shared
    /// by every channel.
    Global,
}

impl FromStr for VirtualMessageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_pair" => Ok(Self::PerPair),
            "global" => Ok(Self::Global),
            _ => Err(Error::invalid(format!("unknown message mode `{s}`"))),
        }
    }
}

impl fmt::Display for VirtualMessageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerPair => "per_pair",
            Self::Global => "global",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub layers: usize,
    pub hidden: usize,
    pub virtual_channels: usize,
    /// Width of the raw node features.
    pub node_feature_dim: usize,
    pub edge_attr_dim: usize,
    /// Fraction of the longest edges removed before message passing.
    pub drop_rate: f64,
    pub message_mode: VirtualMessageMode,
    /// Reuse the real-edge coordinate MLP for the virtual coordinate term.
    pub share_coord_mlp: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::FastEgnn,
            layers: 4,
            hidden: 64,
            virtual_channels: 3,
            node_feature_dim: 2,
            edge_attr_dim: 1,
            drop_rate: 0.0,
            message_mode: VirtualMessageMode::PerPair,
            share_coord_mlp: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone == Backbone::Egnn && self.virtual_channels != 0 {
            return Err(Error::invalid(
                "the egnn backbone has no virtual nodes; set virtual_channels = 0",
            ));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::invalid(format!(
                "drop rate must lie in [0, 1], got {}",
                self.drop_rate
            )));
        }
        Ok(())
    }

    /// The `FastEGNN-<C, p>` style label.
    pub fn label(&self) -> String {
        match self.backbone {
            Backbone::Egnn => format!("egnn<{:.2}>", self.drop_rate),
            b => format!("{b}<{}, {:.2}>", self.virtual_channels, self.drop_rate),
        }
    }
}
