//! The trained artifact bundle: backbone with adapters, aggregator, analyzer
//! and token prior, saved together in one checkpoint file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatedRepr, AggregationMode, Aggregator};
use crate::analyzer::{Analyzer, AnalyzerConfig, SecurityScores, TokenPrior};
use crate::backbone::{Backbone, Mode, ModelConfig};
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::toylang::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub n_agg_layers: usize,
    pub aggregation: AggregationMode,
    pub analyzer: AnalyzerConfig,
    pub prior_step: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            n_agg_layers: 4,
            aggregation: AggregationMode::AttnPool,
            analyzer: AnalyzerConfig::default(),
            prior_step: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuardModel {
    pub backbone: Backbone,
    pub aggregator: Aggregator,
    pub analyzer: Analyzer,
    pub prior: TokenPrior,
    pub head_config: HeadConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub scores: SecurityScores,
    pub aggregated: AggregatedRepr,
}

impl GuardModel {
    /// Attaches freshly initialised heads to `backbone`.
    pub fn new(backbone: Backbone, head_config: HeadConfig) -> Result<Self> {
        let d = backbone.d_model();
        let v = backbone.config.vocab_size;
        if head_config.n_agg_layers > backbone.n_layers() {
            return Err(Error::InvalidConfig(format!(
                "cannot aggregate {} layers of a {}-layer model",
                head_config.n_agg_layers,
                backbone.n_layers()
            )));
        }
        let aggregator = Aggregator::new(
            d,
            head_config.n_agg_layers,
            head_config.aggregation,
            head_config.seed ^ 0xa99,
        )?;
        let analyzer = Analyzer::new(d, v, head_config.analyzer, head_config.seed ^ 0x5ca)?;
        let prior = TokenPrior::new(v, head_config.prior_step);
        Ok(Self {
            backbone,
            aggregator,
            analyzer,
            prior,
            head_config,
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    /// Evaluation-mode scoring of a token sequence through the chosen backbone mode.
    pub fn score(&self, tokens: &[TokenId], mode: Mode) -> Result<ScoredSequence> {
        let stack = self.backbone.forward_with_taps(tokens, mode)?;
        let aggregated = self.aggregator.aggregate(&stack)?;
        let scores = self.analyzer.score_tokens(&aggregated.h_agg, tokens)?;
        Ok(ScoredSequence { scores, aggregated })
    }

    pub fn to_archive(&self) -> Archive {
        let meta = serde_json::json!({
            "kind": "guard_model",
            "backbone": self.backbone.meta(),
            "analyzer": self.analyzer.meta(),
            "heads": self.head_config,
        });
        let mut a = Archive::new(meta);
        self.backbone.write_into(&mut a);
        a.push_set("aggregator.", &self.aggregator.params);
        self.analyzer.write_into(&mut a);
        self.prior.write_into(&mut a);
        a
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = &archive.meta;
        if meta["kind"] != "guard_model" {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("expected a guard_model checkpoint, found {}", meta["kind"]),
            });
        }
        let backbone = Backbone::read_from(archive, &meta["backbone"])?;
        let head_config: HeadConfig = serde_json::from_value(meta["heads"].clone())?;
        let mut aggregator = Aggregator::new(
            backbone.d_model(),
            head_config.n_agg_layers,
            head_config.aggregation,
            0,
        )?;
        archive.fill_set("aggregator.", &mut aggregator.params)?;
        let analyzer = Analyzer::read_from(archive, &meta["analyzer"])?;
        let prior = TokenPrior::read_from(archive, head_config.prior_step)?;
        if prior.values.len() != backbone.config.vocab_size {
            return Err(Error::LengthMismatch {
                what: "token prior vs vocabulary",
                left: prior.values.len(),
                right: backbone.config.vocab_size,
            });
        }
        Ok(Self {
            backbone,
            aggregator,
            analyzer,
            prior,
            head_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    /// Loads and checks the backbone architecture against `expected`.
    pub fn load_checked(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let m = Self::load(path)?;
        m.backbone.check_config(expected)?;
        Ok(m)
    }
}
