//! Run configuration files.
//!
//! A run file is TOML with one table per component, e.g.
//!
//! ```toml
//! [model]
//! variant = "full"
//! embed_dim = 16
//!
//! [train]
//! steps = 500
//! patch = { depth = 4, height = 64, width = 64 }
//! ```
//!
//! Dotted keys (`train.lr = 1e-4`) work too. Every table is optional and
//! unknown keys are rejected. Command-line flags override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use slicesr::metrics::SsimOptions;
use slicesr::model::ModelConfig;
use slicesr::pipeline::{InferenceSpec, TrainConfig};
use slicesr::volume::{PhantomSpec, PseudoLrRule};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceSpec,
    pub phantom: PhantomSpec,
    pub pseudo_lr: PseudoLrRule,
    pub ssim: SsimOptions,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::invalid(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
    }

    /// The file at `path`, or all defaults when no file was given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use slicesr::model::Variant;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn tables_and_dotted_keys_agree() {
        let a = RunConfig::parse(
            "[model]\nvariant = \"no_tab\"\nembed_dim = 8\n[train]\nlr = 0.001\n",
        )
        .unwrap();
        let b = RunConfig::parse(
            "model.variant = \"no_tab\"\nmodel.embed_dim = 8\ntrain.lr = 0.001\n",
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.variant, Variant::NoTab);
        assert_eq!(a.model.heads, ModelConfig::default().heads);
        assert_eq!(a.train.lr, 0.001);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("model.embed = 8\n").is_err());
        assert!(RunConfig::parse("[optimizer]\nlr = 1\n").is_err());
    }

    #[test]
    fn nested_patch_spec() {
        let c = RunConfig::parse("train.patch = { depth = 2, height = 32, width = 32 }\n").unwrap();
        assert_eq!([c.train.patch.depth, c.train.patch.height], [2, 32]);
    }
}
