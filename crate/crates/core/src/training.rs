//! Base-model pretraining and the joint adaptation objective
//! `L_total = w_gen·L_gen + w_sec·L_sec + w_kl·L_kl`.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyzer::SecurityScores;
use crate::autograd::{log_softmax_rows, Graph, NodeId};
use crate::backbone::{AdapterConfig, Backbone, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::model::GuardModel;
use crate::optim::{clip_global_norm, AdamW, AdamWConfig, LinearSchedule};
use crate::toylang::{PairedExample, ToyProgram, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Setting this to 0 drops the language-modelling term.
    pub w_gen: f64,
    pub w_sec: f64,
    pub w_kl: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_gen: 1.0,
            w_sec: 0.5,
            w_kl: 1.0,
            margin: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_gen", self.w_gen),
            ("w_sec", self.w_sec),
            ("w_kl", self.w_kl),
            ("margin", self.margin),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Peak learning rate for the adapters.
    pub lr: f64,
    /// Peak learning rate for the aggregator and analyzer.
    pub head_lr: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_grad_norm: f64,
    pub adam: AdamWConfig,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 3e-4,
            head_lr: 1e-3,
            batch_size: 8,
            grad_accum: 2,
            max_grad_norm: 1.0,
            adam: AdamWConfig::default(),
            warmup_ratio: 0.1,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Learning rates of the large-model setting, too small to move a toy
    /// model within a few hundred steps.
    pub fn large_model() -> Self {
        Self {
            lr: 2e-5,
            head_lr: 2e-5,
            ..Self::default()
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidConfig("epochs, batch size and accumulation must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.head_lr > 0.0 && self.max_grad_norm > 0.0) {
            return Err(Error::InvalidConfig("learning rates and clip norm must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidConfig("warmup_ratio must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Next-token targets: position `i` predicts token `i + 1`; the last position has none.
pub fn next_token_targets(tokens: &[TokenId]) -> Vec<Option<usize>> {
    (0..tokens.len())
        .map(|i| tokens.get(i + 1).copied())
        .collect()
}

/// Mean per-token negative log-likelihood of `tokens` after the first.
pub fn loss_gen(backbone: &Backbone, tokens: &[TokenId], mode: Mode) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Empty("sequence needs at least two tokens"));
    }
    let mut g = Graph::new();
    let b = backbone.bind(&mut g, false, false);
    let taps = backbone.forward_graph(&mut g, &b, tokens, mode, None)?;
    let l = g.cross_entropy(taps.logits, &next_token_targets(tokens));
    Ok(g.scalar(l))
}

pub fn margin_loss(s_vul: f64, s_sec: f64, margin: f64) -> f64 {
    (margin - (s_sec - s_vul)).max(0.0)
}

/// Mean hinge over pairs of `(vulnerable, secure)` scores.
pub fn loss_sec(pairs: &[(SecurityScores, SecurityScores)], margin: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("score pairs"));
    }
    let sum: f64 = pairs.iter().map(|(v, s)| margin_loss(v.mean, s.mean, margin)).sum();
    Ok(sum / pairs.len() as f64)
}

/// `Σ p ln(p/q)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Mean over positions of `KL(P_base || P_adapted)`.
pub fn loss_kl(backbone: &Backbone, tokens: &[TokenId]) -> Result<f64> {
    let reference = log_softmax_rows(backbone.logits(tokens, Mode::Base)?.view());
    let mut g = Graph::new();
    let b = backbone.bind(&mut g, false, false);
    let taps = backbone.forward_graph(&mut g, &b, tokens, Mode::Adapted, None)?;
    let l = g.kl_from_reference(taps.logits, reference);
    Ok(g.scalar(l))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub gen: f64,
    /// `None` when the security term is disabled and the analyzer is skipped.
    pub sec: Option<f64>,
    pub kl: f64,
    pub total: f64,
    pub delta_s: Option<f64>,
}

/// Gradients for every trainable slot, adapters then aggregator then analyzer.
pub struct PairGradients {
    pub grads: Vec<Array2<f64>>,
}

pub fn trainable_shapes(model: &GuardModel) -> Vec<(usize, usize)> {
    model
        .backbone
        .adapters
        .iter()
        .chain(model.aggregator.params.iter())
        .chain(model.analyzer.params.iter())
        .map(|p| p.value.dim())
        .collect()
}

/// Loss and gradients of one training pair. `reference` holds the frozen base
/// model's log-probabilities on `pair.x_sec`. Passing an rng enables dropout.
pub fn pair_objective(
    model: &GuardModel,
    pair: &PairedExample,
    reference: &Array2<f64>,
    weights: &LossWeights,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossParts, PairGradients)> {
    let sec = &pair.x_sec.tokens;
    let vul = &pair.x_vul.tokens;
    let use_sec = weights.w_sec > 0.0;
    let mut g = Graph::new();
    let bb = model.backbone.bind(&mut g, false, true);
    let ba = model.aggregator.bind(&mut g, use_sec);
    let bn = model.analyzer.bind(&mut g, use_sec);

    let taps_sec = model
        .backbone
        .forward_graph(&mut g, &bb, sec, Mode::Adapted, dropout_rng.as_deref_mut())?;
    let l_gen = g.cross_entropy(taps_sec.logits, &next_token_targets(sec));
    let l_kl = g.kl_from_reference(taps_sec.logits, reference.clone());

    let mut terms: Vec<(NodeId, f64)> = vec![(l_gen, weights.w_gen), (l_kl, weights.w_kl)];
    let mut sec_parts = None;
    if use_sec {
        let taps_vul = model
            .backbone
            .forward_graph(&mut g, &bb, vul, Mode::Adapted, dropout_rng.as_deref_mut())?;
        let (h_sec, _) = model.aggregator.forward_graph(&mut g, &ba, &taps_sec.hidden)?;
        let (h_vul, _) = model.aggregator.forward_graph(&mut g, &ba, &taps_vul.hidden)?;
        let s_sec = model
            .analyzer
            .score_graph(&mut g, &bn, h_sec, sec, dropout_rng.as_deref_mut())?;
        let s_vul = model
            .analyzer
            .score_graph(&mut g, &bn, h_vul, vul, dropout_rng)?;
        let delta = g.sub(s_sec.mean, s_vul.mean);
        let neg = g.scale(delta, -1.0);
        let shifted = g.add_scalar(neg, weights.margin);
        let l_sec = g.relu(shifted);
        sec_parts = Some((g.scalar(l_sec), g.scalar(delta)));
        terms.push((l_sec, weights.w_sec));
    }

    let mut total = None;
    for (node, w) in terms {
        if w == 0.0 {
            continue;
        }
        let t = g.scale(node, w);
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t),
        });
    }
    let parts = LossParts {
        gen: g.scalar(l_gen),
        sec: sec_parts.map(|p| p.0),
        kl: g.scalar(l_kl),
        total: total.map_or(0.0, |t| g.scalar(t)),
        delta_s: sec_parts.map(|p| p.1),
    };

    let shapes = trainable_shapes(model);
    let nodes: Vec<NodeId> = bb
        .adapter_nodes()
        .iter()
        .chain(ba.nodes())
        .chain(bn.nodes())
        .copied()
        .collect();
    if let Some(t) = total {
        g.backward(t);
    }
    let grads = nodes
        .iter()
        .zip(shapes)
        .map(|(&n, shape)| g.take_grad(n).unwrap_or_else(|| Array2::zeros(shape)))
        .collect();
    Ok((parts, PairGradients { grads }))
}

/// Frozen base log-probabilities on every `x_sec`.
pub fn reference_logprobs(backbone: &Backbone, pairs: &[PairedExample]) -> Result<Vec<Array2<f64>>> {
    pairs
        .iter()
        .map(|p| {
            backbone
                .logits(&p.x_sec.tokens, Mode::Base)
                .map(|z| log_softmax_rows(z.view()))
        })
        .collect()
}

/// Mean of `s̄_sec − s̄_vul` over `pairs` under the adapted model.
pub fn mean_delta_s(model: &GuardModel, pairs: &[PairedExample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("pairs for separation measurement"));
    }
    let mut sum = 0.0;
    for p in pairs {
        let s = model.score(&p.x_sec.tokens, Mode::Adapted)?.scores.mean;
        let v = model.score(&p.x_vul.tokens, Mode::Adapted)?.scores.mean;
        sum += s - v;
    }
    Ok(sum / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_gen: f64,
    pub l_sec: Option<f64>,
    pub l_kl: f64,
    pub l_total: f64,
    pub val_delta_s: f64,
    pub steps: usize,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let sec = self.l_sec.map_or("-".to_string(), |v| format!("{v:.4}"));
        format!(
            "epoch {} steps {} L_gen {:.4} L_sec {} L_kl {:.5} L_total {:.4} val_delta_s {:.4}",
            self.epoch, self.steps, self.l_gen, sec, self.l_kl, self.l_total, self.val_delta_s
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub optimizer_steps: usize,
}

/// Jointly trains adapters, aggregator and analyzer; the base weights stay
/// frozen. The token prior is updated from each optimizer batch after the step.
pub fn train(
    model: &mut GuardModel,
    train_set: &[PairedExample],
    val_set: &[PairedExample],
    weights: &LossWeights,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    weights.validate()?;
    cfg.validate()?;
    let reference = reference_logprobs(&model.backbone, train_set)?;
    let batch = cfg.effective_batch();
    let steps_per_epoch = train_set.len().div_ceil(batch);
    let schedule = LinearSchedule::new(1.0, steps_per_epoch * cfg.epochs, cfg.warmup_ratio);
    let shapes = trainable_shapes(model);
    let n_adapters = model.backbone.adapters.len();
    let mut opt = AdamW::new(cfg.adam, &shapes);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0_0d);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut s_gen, mut s_sec, mut s_kl, mut s_total) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(batch) {
            let mut acc: Vec<Array2<f64>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();
            for &i in chunk {
                let (parts, grads) =
                    pair_objective(model, &train_set[i], &reference[i], weights, Some(&mut dropout_rng))?;
                if !parts.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        detail: format!("pair {i} ({}): {parts:?}", train_set[i].scenario_id),
                    });
                }
                s_gen += parts.gen;
                s_sec += parts.sec.unwrap_or(0.0);
                s_kl += parts.kl;
                s_total += parts.total;
                for (a, g) in acc.iter_mut().zip(&grads.grads) {
                    a.scaled_add(1.0 / chunk.len() as f64, g);
                }
            }
            clip_global_norm(&mut acc, cfg.max_grad_norm);
            let scale = schedule.lr(step);
            opt.begin_step();
            let mut slot = 0;
            for p in model.backbone.adapters.iter_mut() {
                opt.update(slot, &mut p.value, &acc[slot], cfg.lr * scale);
                slot += 1;
            }
            for p in model
                .aggregator
                .params
                .iter_mut()
                .chain(model.analyzer.params.iter_mut())
            {
                opt.update(slot, &mut p.value, &acc[slot], cfg.head_lr * scale);
                slot += 1;
            }
            debug_assert_eq!(slot, n_adapters + model.aggregator.params.len() + model.analyzer.params.len());
            let batch_pairs: Vec<PairedExample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            model.prior.update(&batch_pairs)?;
            step += 1;
        }
        let n = train_set.len() as f64;
        let log = EpochLog {
            epoch,
            l_gen: s_gen / n,
            l_sec: (weights.w_sec > 0.0).then_some(s_sec / n),
            l_kl: s_kl / n,
            l_total: s_total / n,
            val_delta_s: if val_set.is_empty() {
                f64::NAN
            } else {
                mean_delta_s(model, val_set)?
            },
            steps: step,
        };
        on_epoch(&log);
        epochs.push(log);
    }
    Ok(TrainReport {
        epochs,
        optimizer_steps: step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub n_programs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_programs: 4000,
            epochs: 4,
            lr: 3e-3,
            batch_size: 16,
            warmup_ratio: 0.05,
            max_grad_norm: 1.0,
            seed: 7,
        }
    }
}

/// Full-parameter language-model training of a fresh backbone on unpaired
/// programs. Returns the model and the mean loss of each epoch.
pub fn pretrain_base(
    config: ModelConfig,
    adapter_config: AdapterConfig,
    programs: &[ToyProgram],
    cfg: &PretrainConfig,
) -> Result<(Backbone, Vec<f64>)> {
    if programs.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("pretraining epochs and batch size must be >= 1".into()));
    }
    let mut model = Backbone::new(config, adapter_config)?;
    let shapes: Vec<_> = model.base.iter().map(|p| p.value.dim()).collect();
    let mut opt = AdamW::new(AdamWConfig::default(), &shapes);
    let steps = programs.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let schedule = LinearSchedule::new(cfg.lr, steps, cfg.warmup_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..programs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Array2<f64>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();
            for &i in chunk {
                let tokens = &programs[i].tokens;
                let mut g = Graph::new();
                let b = model.bind(&mut g, true, false);
                let taps = model.forward_graph(&mut g, &b, tokens, Mode::Base, None)?;
                let l = g.cross_entropy(taps.logits, &next_token_targets(tokens));
                let v = g.scalar(l);
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        detail: format!("pretraining program {i}"),
                    });
                }
                total += v;
                g.backward(l);
                for (a, &n) in acc.iter_mut().zip(b.base_nodes()) {
                    if let Some(gr) = g.grad(n) {
                        a.scaled_add(1.0 / chunk.len() as f64, gr);
                    }
                }
            }
            clip_global_norm(&mut acc, cfg.max_grad_norm);
            opt.begin_step();
            let lr = schedule.lr(step);
            for (slot, p) in model.base.iter_mut().enumerate() {
                opt.update(slot, &mut p.value, &acc[slot], lr);
            }
            step += 1;
        }
        losses.push(total / programs.len() as f64);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::AnalyzerConfig;
    use crate::model::HeadConfig;
    use crate::toylang::{generate_pair, Vocabulary};
    use rand::Rng;

    fn tiny_model(seed: u64) -> GuardModel {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 64,
            max_len: 64,
            seed,
        };
        let adapter = AdapterConfig {
            rank: 2,
            alpha: 4.0,
            dropout: 0.1,
        };
        let mut bb = Backbone::new(cfg, adapter).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for p in bb.adapters.iter_mut() {
            p.value.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        let heads = HeadConfig {
            n_agg_layers: 2,
            analyzer: AnalyzerConfig {
                emb_dim: 4,
                hidden: [6, 5, 4],
                dropout: 0.1,
            },
            seed,
            ..HeadConfig::default()
        };
        GuardModel::new(bb, heads).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut bb = tiny_model(1).backbone;
        let lm = bb.base.index_of("lm_head").unwrap();
        bb.base.get_mut(lm).fill(0.0);
        let l = loss_gen(&bb, &[1, 5, 6, 7, 2], Mode::Base).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(margin_loss(0.2, 0.9, 0.5), 0.0);
        assert_eq!(margin_loss(0.5, 0.5, 0.5), 0.5);
        assert!((margin_loss(0.6, 0.4, 0.5) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let v = kl_divergence(&[0.5, 0.3, 0.2], &[0.4, 0.4, 0.2]);
        let expect = 0.5 * (0.5f64 / 0.4).ln() + 0.3 * (0.3f64 / 0.4).ln();
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.0253).abs() < 1e-4);
        let mut m = tiny_model(2);
        assert!(loss_kl(&m.backbone, &[1, 4, 9, 2]).unwrap() > 0.0);
        m.backbone.zero_adapters();
        assert_eq!(loss_kl(&m.backbone, &[1, 4, 9, 2]).unwrap(), 0.0);
    }

    fn objective_value(m: &GuardModel, pair: &PairedExample, r: &Array2<f64>, w: &LossWeights) -> f64 {
        pair_objective(m, pair, r, w, None).unwrap().0.total
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let vocab = Vocabulary::standard();
        let mut m = tiny_model(3);
        let pair = generate_pair(&vocab, "sql_inject", 4).unwrap();
        let reference = reference_logprobs(&m.backbone, std::slice::from_ref(&pair)).unwrap().remove(0);
        let w = LossWeights {
            margin: 2.0,
            ..LossWeights::default()
        };
        let (_, grads) = pair_objective(&m, &pair, &reference, &w, None).unwrap();
        let n_ad = m.backbone.adapters.len();
        let n_ag = m.aggregator.params.len();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 20 {
            let slot = rng.random_range(0..grads.grads.len());
            let arr = if slot < n_ad {
                m.backbone.adapters.get_mut(slot)
            } else if slot < n_ad + n_ag {
                m.aggregator.params.get_mut(slot - n_ad)
            } else {
                m.analyzer.params.get_mut(slot - n_ad - n_ag)
            };
            let (r, c) = arr.dim();
            let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
            let orig = arr[[i, j]];
            let an = grads.grads[slot][[i, j]];
            let eps = 1e-5;
            let set = |m: &mut GuardModel, v: f64| {
                let a = if slot < n_ad {
                    m.backbone.adapters.get_mut(slot)
                } else if slot < n_ad + n_ag {
                    m.aggregator.params.get_mut(slot - n_ad)
                } else {
                    m.analyzer.params.get_mut(slot - n_ad - n_ag)
                };
                a[[i, j]] = v;
            };
            set(&mut m, orig + eps);
            let up = objective_value(&m, &pair, &reference, &w);
            set(&mut m, orig - eps);
            let down = objective_value(&m, &pair, &reference, &w);
            set(&mut m, orig);
            let fd = (up - down) / (2.0 * eps);
            if fd.abs().max(an.abs()) < 1e-7 {
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(rel < 1e-3, "slot {slot} ({i},{j}): fd {fd} analytic {an}");
            checked += 1;
        }
    }

    #[test]
    fn disabled_security_term_skips_analyzer() {
        let vocab = Vocabulary::standard();
        let m = tiny_model(4);
        let pair = generate_pair(&vocab, "xss", 1).unwrap();
        let r = reference_logprobs(&m.backbone, std::slice::from_ref(&pair)).unwrap().remove(0);
        let w = LossWeights {
            w_sec: 0.0,
            w_kl: 0.0,
            ..LossWeights::default()
        };
        let (parts, grads) = pair_objective(&m, &pair, &r, &w, None).unwrap();
        assert!(parts.sec.is_none());
        assert_eq!(parts.total, parts.gen);
        let n_ad = m.backbone.adapters.len();
        assert!(grads.grads[n_ad..].iter().all(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let vocab = Vocabulary::standard();
        let pairs: Vec<_> = (0..12)
            .map(|i| generate_pair(&vocab, ["xss", "unchecked_null"][i % 2], i as u64).unwrap())
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 1e-2,
            head_lr: 1e-2,
            batch_size: 2,
            grad_accum: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = tiny_model(5);
            let rep = train(&mut m, &pairs, &pairs[..4], &LossWeights::default(), &cfg, |_| {}).unwrap();
            (m, rep)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert!(r1.epochs[2].l_gen < r1.epochs[0].l_gen);
        assert_eq!(r1.optimizer_steps, 9);
        assert!(m1.prior.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let mut m = tiny_model(6);
        let r = train(&mut m, &[], &[], &LossWeights::default(), &TrainConfig::default(), |_| {});
        assert!(matches!(r, Err(Error::Empty(_))));
    }
}
