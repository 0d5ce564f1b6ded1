//! End-to-end wiring: corpus, base pretraining, adaptation and evaluation
//! under one resolved configuration.

use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterConfig, Backbone, Mode, ModelConfig};
use crate::error::Result;
use crate::evalharness::{eval_scenarios, run_benchmark, MetricReport, Scenario, ScenarioResult};
use crate::inference::{BiasMode, DecodeConfig};
use crate::model::{GuardModel, HeadConfig};
use crate::toylang::{pretraining_corpus, Corpus, SplitRatios, Vocabulary};
use crate::training::{pretrain_base, train, EpochLog, LossWeights, PretrainConfig, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub n_pairs: usize,
    pub data_seed: u64,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub heads: HeadConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub decode: DecodeConfig,
    pub prompts_per_template: usize,
    pub eval_seed: u64,
    pub ks: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_pairs: 1250,
            data_seed: 7,
            model: ModelConfig::default(),
            adapter: AdapterConfig::default(),
            heads: HeadConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            decode: DecodeConfig::default(),
            prompts_per_template: 2,
            eval_seed: 1009,
            ks: vec![1, 5],
        }
    }
}

impl PipelineConfig {
    pub fn corpus(&self, vocab: &Vocabulary) -> Result<Corpus> {
        Corpus::generate(vocab, self.n_pairs, SplitRatios::default(), self.data_seed)
    }

    pub fn scenarios(&self, vocab: &Vocabulary) -> Result<Vec<Scenario>> {
        eval_scenarios(vocab, self.prompts_per_template, self.eval_seed)
    }
}

/// Pretrains the base backbone on the unpaired corpus.
pub fn build_base(cfg: &PipelineConfig, vocab: &Vocabulary) -> Result<(Backbone, Vec<f64>)> {
    let programs = pretraining_corpus(vocab, cfg.pretrain.n_programs, cfg.pretrain.seed);
    pretrain_base(cfg.model.clone(), cfg.adapter.clone(), &programs, &cfg.pretrain)
}

/// Attaches fresh heads to a copy of `base` and runs the joint training.
pub fn adapt(
    cfg: &PipelineConfig,
    base: &Backbone,
    corpus: &Corpus,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(GuardModel, TrainReport)> {
    let mut model = GuardModel::new(base.clone(), cfg.heads.clone())?;
    let report = train(&mut model, &corpus.train, &corpus.val, &cfg.weights, &cfg.train, on_epoch)?;
    Ok((model, report))
}

/// Which backbone weights and bias source an evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub mode: ModeChoice,
    pub bias: BiasMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    Base,
    Adapted,
}

impl From<ModeChoice> for Mode {
    fn from(m: ModeChoice) -> Self {
        match m {
            ModeChoice::Base => Mode::Base,
            ModeChoice::Adapted => Mode::Adapted,
        }
    }
}

impl Variant {
    /// The unadapted, unguided base model.
    pub const BASE: Variant = Variant {
        mode: ModeChoice::Base,
        bias: BiasMode::Unguided,
    };
    /// Adapted weights plus guided decoding.
    pub const FULL: Variant = Variant {
        mode: ModeChoice::Adapted,
        bias: BiasMode::Guided,
    };
    /// Adapted weights, plain decoding.
    pub const NO_GUIDANCE: Variant = Variant {
        mode: ModeChoice::Adapted,
        bias: BiasMode::Unguided,
    };
}

pub fn evaluate(
    cfg: &PipelineConfig,
    model: &GuardModel,
    vocab: &Vocabulary,
    variant: Variant,
) -> Result<(MetricReport, Vec<ScenarioResult>)> {
    let scenarios = cfg.scenarios(vocab)?;
    run_benchmark(
        model,
        vocab,
        &scenarios,
        variant.mode.into(),
        variant.bias,
        &cfg.decode,
        &cfg.ks,
    )
}
