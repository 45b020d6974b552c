//! Run configuration: a JSON file with every knob, overridable by flags.

use std::path::{Path, PathBuf};

use clap::Args;
use partnet_core::data::Category;
use partnet_core::model::{InferenceConfig, LossWeights, TrainConfig};
use partnet_core::nets::{NetConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NetSize {
    Full,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub categories: Vec<Category>,
    pub n_points: usize,
    /// Shapes generated by `gen-data`.
    pub count: usize,
    pub train_ratio: f64,
    pub net: NetSize,
    pub semantic_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub noise_sigma: f64,
    pub variant: Variant,
    pub lambda_sym: f64,
    pub semantic_weight: f64,
    pub max_iterations: Option<usize>,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    pub max_depth: usize,
    pub min_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let i = InferenceConfig::default();
        RunConfig {
            seed: 0,
            categories: vec![Category::Chair, Category::Table],
            n_points: 512,
            count: 250,
            train_ratio: 0.8,
            net: NetSize::Full,
            semantic_classes: partnet_core::data::SemanticClass::ALL.len(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            noise_sigma: t.noise_sigma,
            variant: t.variant,
            lambda_sym: t.weights.lambda_sym,
            semantic_weight: t.weights.semantic,
            max_iterations: t.max_iterations,
            checkpoint_every: 0,
            max_depth: i.max_depth,
            min_points: i.min_points,
        }
    }
}

/// Flags shared by every command; each overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration; flags below take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated categories (chair, table, ladder).
    #[arg(long, global = true, value_delimiter = ',')]
    pub categories: Option<Vec<Category>>,
    #[arg(long, global = true)]
    pub n_points: Option<usize>,
    #[arg(long, global = true)]
    pub count: Option<usize>,
    #[arg(long, global = true)]
    pub train_ratio: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub net: Option<NetSize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub noise_sigma: Option<f64>,
    /// full, no_rcf or no_psf.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    #[arg(long, global = true)]
    pub lambda_sym: Option<f64>,
    #[arg(long, global = true)]
    pub semantic_weight: Option<f64>,
    #[arg(long, global = true)]
    pub max_iterations: Option<usize>,
    #[arg(long, global = true)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, global = true)]
    pub max_depth: Option<usize>,
    #[arg(long, global = true)]
    pub min_points: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Parse(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// File config (or defaults) with flag overrides applied.
    pub fn resolve(o: &Overrides) -> Result<RunConfig, CliError> {
        let mut c = match &o.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { c.$f = v; } )* };
        }
        set!(seed, categories, n_points, count, train_ratio, net, epochs, batch_size, lr, noise_sigma, variant, lambda_sym, semantic_weight, checkpoint_every, max_depth, min_points);
        if o.max_iterations.is_some() {
            c.max_iterations = o.max_iterations;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.categories.is_empty() {
            return Err(CliError::Usage("at least one category is required".into()));
        }
        if self.n_points == 0 {
            return Err(CliError::Usage("n_points must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train_ratio) {
            return Err(CliError::Usage(format!("train_ratio {} outside [0, 1]", self.train_ratio)));
        }
        self.train().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.inference().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.net().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn net(&self) -> NetConfig {
        match self.net {
            NetSize::Full => NetConfig::full(self.semantic_classes),
            NetSize::Reduced => NetConfig::reduced(self.semantic_classes),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            variant: self.variant,
            weights: LossWeights { lambda_sym: self.lambda_sym, semantic: self.semantic_weight },
            max_iterations: self.max_iterations,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig { max_depth: self.max_depth, min_points: self.min_points }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let c = RunConfig { seed: 9, variant: Variant::NoPsf, max_iterations: Some(3), ..Default::default() };
        assert_eq!(RunConfig::parse(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("{\"sed\": 1}"), Err(CliError::Parse(_))));
        assert_eq!(RunConfig::parse("{\"seed\": 4}").unwrap().seed, 4);
    }

    #[test]
    fn flags_override_the_file() {
        let o = Overrides { seed: Some(7), epochs: Some(2), ..Default::default() };
        let c = RunConfig::resolve(&o).unwrap();
        assert_eq!((c.seed, c.epochs, c.n_points), (7, 2, 512));
        let bad = Overrides { batch_size: Some(0), ..Default::default() };
        assert!(matches!(RunConfig::resolve(&bad), Err(CliError::Usage(_))));
    }
}
