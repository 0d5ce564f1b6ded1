//! Prompt-conditioned logit biasing and sampling.
//!
//! The bias is `b = (1 − s̄_prompt) · T / (max|T| + ε)`, built from the token
//! prior `T` and the analyzer's mean score over the prompt. It is added to the
//! raw logits before temperature scaling and nucleus truncation.

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::Mode;
use crate::error::{Error, Result};
use crate::model::GuardModel;
use crate::toylang::{ToyProgram, TokenId, BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub n_samples: usize,
    /// `None`: score the prompt once. `Some(k)`: refresh the bias every `k` tokens.
    pub rescore_interval: Option<usize>,
    pub seed: u64,
    /// Keep generating past `<eos>` (used by the latency benchmark).
    pub ignore_eos: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            top_p: 0.95,
            max_new_tokens: 40,
            n_samples: 25,
            rescore_interval: None,
            seed: 7,
            ignore_eos: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig("top_p must be in (0, 1]".into()));
        }
        if self.max_new_tokens == 0 || self.n_samples == 0 {
            return Err(Error::InvalidConfig("max_new_tokens and n_samples must be >= 1".into()));
        }
        if self.rescore_interval == Some(0) {
            return Err(Error::InvalidConfig("rescore interval k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Where the decoding bias comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum BiasMode {
    /// Prior scaled by the prompt's analyzer score.
    Guided,
    /// No bias at all; plain decoding.
    Unguided,
    /// Prior with a fixed strength in place of `1 − s̄_prompt`.
    StaticScale(f64),
    /// A standard-normal vector seeded by the value, in place of the learned prior.
    RandomPrior(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVector {
    pub values: Vec<f64>,
    /// Mean analyzer score over the prompt, when the bias was prompt-conditioned.
    pub prompt_score: Option<f64>,
}

impl BiasVector {
    pub fn zeros(vocab_size: usize) -> Self {
        Self {
            values: vec![0.0; vocab_size],
            prompt_score: None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// `strength · T / (max|T| + ε)`, with PAD and BOS forced to zero.
pub fn bias_from_prior(prior: &[f64], strength: f64, eps: f64) -> Vec<f64> {
    let max = prior.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    prior
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if i == PAD || i == BOS {
                0.0
            } else {
                strength * t / (max + eps)
            }
        })
        .collect()
}

/// Guided bias for `prompt`: one forward pass with taps, analyzer mean, then the prior formula.
pub fn compute_bias(model: &GuardModel, prompt: &[TokenId], mode: Mode) -> Result<BiasVector> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let ctx = crop(prompt, model.model_config().max_len);
    let s = model.score(ctx, mode)?.scores.mean;
    Ok(BiasVector {
        values: bias_from_prior(&model.prior.values, 1.0 - s, model.prior.eps),
        prompt_score: Some(s),
    })
}

pub fn bias_for(model: &GuardModel, prompt: &[TokenId], mode: Mode, bias: BiasMode) -> Result<BiasVector> {
    let v = model.model_config().vocab_size;
    match bias {
        BiasMode::Guided => compute_bias(model, prompt, mode),
        BiasMode::Unguided => Ok(BiasVector::zeros(v)),
        BiasMode::StaticScale(k) => Ok(BiasVector {
            values: bias_from_prior(&model.prior.values, k, model.prior.eps),
            prompt_score: None,
        }),
        BiasMode::RandomPrior(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fake: Vec<f64> = (0..v).map(|_| StandardNormal.sample(&mut rng)).collect();
            let g = compute_bias(model, prompt, mode)?;
            let s = g.prompt_score.unwrap_or(0.0);
            Ok(BiasVector {
                values: bias_from_prior(&fake, 1.0 - s, model.prior.eps),
                prompt_score: g.prompt_score,
            })
        }
    }
}

fn crop(tokens: &[TokenId], max_len: usize) -> &[TokenId] {
    &tokens[tokens.len().saturating_sub(max_len)..]
}

/// Number of bias computations for `t_gen` generated tokens at interval `k`.
pub fn rescore_count(t_gen: usize, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("rescore interval k must be >= 1".into()));
    }
    Ok(t_gen.div_ceil(k))
}

/// Samples one token from `logits (+ bias)` with temperature and nucleus
/// truncation. PAD and BOS are never sampled; neither is EOS when `block_eos`.
pub fn sample_token(
    logits: ArrayView1<f64>,
    bias: Option<&[f64]>,
    temperature: f64,
    top_p: f64,
    block_eos: bool,
    rng: &mut impl Rng,
) -> TokenId {
    let mut z: Array1<f64> = match bias {
        Some(b) => logits.iter().zip(b).map(|(z, b)| z + b).collect(),
        None => logits.to_owned(),
    };
    z[PAD] = f64::NEG_INFINITY;
    z[BOS] = f64::NEG_INFINITY;
    if block_eos {
        z[EOS] = f64::NEG_INFINITY;
    }
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut p: Vec<f64> = z.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut cum = 0.0;
    for &i in &order {
        cum += p[i];
        kept += 1;
        if cum >= top_p {
            break;
        }
    }
    let nucleus = &order[..kept];
    let mass: f64 = nucleus.iter().map(|&i| p[i]).sum();
    let mut u = rng.random::<f64>() * mass;
    for &i in nucleus {
        u -= p[i];
        if u < 0.0 {
            return i;
        }
    }
    *nucleus.last().unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub prompt_len: usize,
    /// Prompt followed by the completion.
    pub tokens: Vec<TokenId>,
    pub rescore_count: usize,
    /// Analyzer score of the prompt at the first bias computation.
    pub prompt_score: Option<f64>,
    pub hit_eos: bool,
}

impl Generation {
    pub fn completion(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn program(&self, scenario_id: &str) -> ToyProgram {
        ToyProgram::new(self.tokens.clone(), scenario_id)
    }

    pub fn new_tokens(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }
}

/// Decodes one completion. `initial` may carry a bias already computed for
/// this prompt; it is reused instead of recomputed at step 0.
pub fn generate_one(
    model: &GuardModel,
    prompt: &[TokenId],
    mode: Mode,
    bias_mode: BiasMode,
    initial: Option<&BiasVector>,
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Generation> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let max_len = model.model_config().max_len;
    let bb = &model.backbone;
    let mut tokens = prompt.to_vec();
    let (mut cache, mut logits) = bb.prefill(crop(&tokens, max_len), mode)?;
    let guided = bias_mode != BiasMode::Unguided;
    let mut bias = match initial {
        Some(b) => b.clone(),
        None => bias_for(model, &tokens, mode, bias_mode)?,
    };
    let prompt_score = bias.prompt_score;
    let mut rescores = 1;
    let mut hit_eos = false;
    for t in 0..cfg.max_new_tokens {
        if let Some(k) = cfg.rescore_interval {
            if t > 0 && t % k == 0 {
                bias = bias_for(model, &tokens, mode, bias_mode)?;
                rescores += 1;
            }
        }
        let b = guided.then_some(bias.values.as_slice());
        let next = sample_token(logits.view(), b, cfg.temperature, cfg.top_p, cfg.ignore_eos, rng);
        tokens.push(next);
        if next == EOS && !cfg.ignore_eos {
            hit_eos = true;
            break;
        }
        if t + 1 == cfg.max_new_tokens {
            break;
        }
        if cache.len() < max_len {
            logits = bb.step(&mut cache, next)?;
        } else {
            // Slide the window by half its length so the cache serves the next steps.
            (cache, logits) = bb.prefill(crop(&tokens, max_len.div_ceil(2)), mode)?;
        }
    }
    Ok(Generation {
        prompt_len: prompt.len(),
        tokens,
        rescore_count: rescores,
        prompt_score,
        hit_eos,
    })
}

pub fn sample_rng(seed: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    rng
}

/// `cfg.n_samples` completions of one prompt; sample `i` uses its own rng stream.
pub fn generate(
    model: &GuardModel,
    prompt: &[TokenId],
    mode: Mode,
    bias_mode: BiasMode,
    cfg: &DecodeConfig,
) -> Result<Vec<Generation>> {
    cfg.validate()?;
    let bias = bias_for(model, prompt, mode, bias_mode)?;
    (0..cfg.n_samples)
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, i);
            generate_one(model, prompt, mode, bias_mode, Some(&bias), cfg, &mut rng)
        })
        .collect()
}

/// Guided decoding with the bias refreshed every `k` generated tokens.
pub fn interval_generate(
    model: &GuardModel,
    prompt: &[TokenId],
    mode: Mode,
    k: usize,
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Generation> {
    if k == 0 {
        return Err(Error::InvalidArgument("rescore interval k must be >= 1".into()));
    }
    let cfg = DecodeConfig {
        rescore_interval: Some(k),
        ..cfg.clone()
    };
    generate_one(model, prompt, mode, BiasMode::Guided, None, &cfg, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    /// `KL(P_guided || P_base)` at the first decoding position.
    pub kl: f64,
    pub p_base: Vec<f64>,
    pub p_guided: Vec<f64>,
    /// `p_guided − p_base` per token.
    pub delta_p: Vec<f64>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Compares the next-token distributions with and without `bias` at the first
/// decoding position (temperature 1, full vocabulary).
pub fn distribution_shift_report(
    model: &GuardModel,
    prompt: &[TokenId],
    mode: Mode,
    bias: &BiasVector,
) -> Result<ShiftReport> {
    let max_len = model.model_config().max_len;
    let (_, z) = model.backbone.prefill(crop(prompt, max_len), mode)?;
    let z: Vec<f64> = z.to_vec();
    if bias.values.len() != z.len() {
        return Err(Error::LengthMismatch {
            what: "bias vs vocabulary",
            left: bias.values.len(),
            right: z.len(),
        });
    }
    let zb: Vec<f64> = z.iter().zip(&bias.values).map(|(a, b)| a + b).collect();
    let p_base = softmax(&z);
    let p_guided = softmax(&zb);
    let kl = crate::training::kl_divergence(&p_guided, &p_base);
    let delta_p = p_guided.iter().zip(&p_base).map(|(g, b)| g - b).collect();
    Ok(ShiftReport {
        kl,
        p_base,
        p_guided,
        delta_p,
    })
}
