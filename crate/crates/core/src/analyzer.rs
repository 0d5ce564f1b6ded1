//! Per-token security scoring head and the token prior tracker.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::params::{normal, ones_row, xavier_uniform, zeros_row, ParamSet};
use crate::toylang::{PairedExample, TokenId, Vocabulary};

pub const EMBED_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerConfig {
    pub emb_dim: usize,
    pub hidden: [usize; 3],
    pub dropout: f64,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            emb_dim: 128,
            hidden: [512, 256, 128],
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analyzer {
    pub config: AnalyzerConfig,
    pub d_model: usize,
    pub vocab_size: usize,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecurityScores {
    pub per_token: Vec<f64>,
    /// Mean over non-special positions.
    pub mean: f64,
}

// Parameter layout, in push order.
const E_SEC: usize = 0;
const W1: usize = 1;
const B1: usize = 2;
const G1: usize = 3;
const BETA1: usize = 4;
const W2: usize = 5;
const B2: usize = 6;
const G2: usize = 7;
const BETA2: usize = 8;
const W3: usize = 9;
const B3: usize = 10;
const W_OUT: usize = 11;
const B_OUT: usize = 12;

pub struct BoundAnalyzer {
    nodes: Vec<NodeId>,
}

impl BoundAnalyzer {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Graph handles for one scored sequence.
pub struct ScoreNodes {
    /// `S x 1`
    pub per_token: NodeId,
    /// `1 x 1`
    pub mean: NodeId,
}

pub fn scored_positions(tokens: &[TokenId]) -> Vec<bool> {
    tokens.iter().map(|&t| !Vocabulary::is_special(t)).collect()
}

impl Analyzer {
    pub fn new(d_model: usize, vocab_size: usize, config: AnalyzerConfig, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::InvalidConfig("analyzer dropout must be in [0, 1)".into()));
        }
        if config.emb_dim == 0 || config.hidden.contains(&0) {
            return Err(Error::InvalidConfig("analyzer widths must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h1, h2, h3] = config.hidden;
        let mut p = ParamSet::new();
        p.push("e_sec", normal(vocab_size, config.emb_dim, EMBED_STD, &mut rng));
        p.push("l1.w", xavier_uniform(d_model + config.emb_dim, h1, &mut rng));
        p.push("l1.b", zeros_row(h1));
        p.push("ln1.gain", ones_row(h1));
        p.push("ln1.bias", zeros_row(h1));
        p.push("l2.w", xavier_uniform(h1, h2, &mut rng));
        p.push("l2.b", zeros_row(h2));
        p.push("ln2.gain", ones_row(h2));
        p.push("ln2.bias", zeros_row(h2));
        p.push("l3.w", xavier_uniform(h2, h3, &mut rng));
        p.push("l3.b", zeros_row(h3));
        p.push("out.w", xavier_uniform(h3, 1, &mut rng));
        p.push("out.b", zeros_row(1));
        Ok(Self {
            config,
            d_model,
            vocab_size,
            params: p,
        })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, requires_grad: bool) -> BoundAnalyzer {
        BoundAnalyzer {
            nodes: self.params.iter().map(|p| g.param(&p.value, requires_grad)).collect(),
        }
    }

    fn check(&self, rows: usize, cols: usize, tokens: &[TokenId]) -> Result<()> {
        if rows != tokens.len() {
            return Err(Error::LengthMismatch {
                what: "aggregated states vs tokens",
                left: rows,
                right: tokens.len(),
            });
        }
        if cols != self.d_model {
            return Err(Error::LengthMismatch {
                what: "aggregated state width vs analyzer input",
                left: cols,
                right: self.d_model,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::UnknownToken {
                id: t,
                vocab: self.vocab_size,
            });
        }
        if !tokens.iter().any(|&t| !Vocabulary::is_special(t)) {
            return Err(Error::Empty("sequence has no scorable (non-special) tokens"));
        }
        Ok(())
    }

    /// Records scoring of `tokens` given aggregated states `h_agg` (`S x D`).
    /// Passing an rng enables dropout.
    pub fn score_graph(
        &self,
        g: &mut Graph<'_>,
        b: &BoundAnalyzer,
        h_agg: NodeId,
        tokens: &[TokenId],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ScoreNodes> {
        let (rows, cols) = g.value(h_agg).dim();
        self.check(rows, cols, tokens)?;
        let n = &b.nodes;
        let p = self.config.dropout;
        let emb = g.gather(n[E_SEC], tokens);
        let x = g.concat_cols(&[h_agg, emb]);

        let mut h = x;
        for (w, bias, gain, beta) in [(W1, B1, G1, BETA1), (W2, B2, G2, BETA2)] {
            let z = g.matmul(h, n[w]);
            let z = g.add_row(z, n[bias]);
            let z = g.layer_norm(z, n[gain], n[beta], LN_EPS);
            h = g.relu(z);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                h = g.dropout(h, p, rng);
            }
        }
        let z = g.matmul(h, n[W3]);
        let z = g.add_row(z, n[B3]);
        let h = g.relu(z);
        let z = g.matmul(h, n[W_OUT]);
        let z = g.add_row(z, n[B_OUT]);
        let per_token = g.sigmoid(z);
        let mean = g.masked_mean(per_token, &scored_positions(tokens));
        Ok(ScoreNodes { per_token, mean })
    }

    /// Evaluation-mode scoring.
    pub fn score_tokens(&self, h_agg: &Array2<f64>, tokens: &[TokenId]) -> Result<SecurityScores> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let h = g.param(h_agg, false);
        let nodes = self.score_graph(&mut g, &b, h, tokens, None)?;
        Ok(SecurityScores {
            per_token: g.value(nodes.per_token).iter().copied().collect(),
            mean: g.scalar(nodes.mean),
        })
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "d_model": self.d_model,
            "vocab_size": self.vocab_size,
        })
    }

    pub fn write_into(&self, archive: &mut Archive) {
        archive.push_set("analyzer.", &self.params);
    }

    pub fn read_from(archive: &Archive, meta: &serde_json::Value) -> Result<Self> {
        let config: AnalyzerConfig = serde_json::from_value(meta["config"].clone())?;
        let field = |k: &str| {
            meta[k].as_u64().map(|v| v as usize).ok_or_else(|| Error::Format {
                what: "analyzer metadata",
                detail: format!("missing `{k}`"),
            })
        };
        let mut a = Self::new(field("d_model")?, field("vocab_size")?, config, 0)?;
        archive.fill_set("analyzer.", &mut a.params)?;
        Ok(a)
    }
}

/// Clipped running association between tokens and secure/vulnerable samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPrior {
    pub values: Vec<f64>,
    pub step: f64,
    pub eps: f64,
}

impl TokenPrior {
    pub fn new(vocab_size: usize, step: f64) -> Self {
        Self {
            values: vec![0.0; vocab_size],
            step,
            eps: 1e-8,
        }
    }

    /// Applies the batch's set-valued increments, then clips to `[-1, 1]`.
    pub fn update(&mut self, batch: &[PairedExample]) -> Result<()> {
        let v = self.values.len();
        let mut delta = vec![0.0; v];
        for pair in batch {
            for (tokens, sign) in [(&pair.x_sec, 1.0), (&pair.x_vul, -1.0)] {
                let unique: BTreeSet<TokenId> = tokens
                    .tokens
                    .iter()
                    .copied()
                    .filter(|&t| !Vocabulary::is_special(t))
                    .collect();
                for t in unique {
                    if t >= v {
                        return Err(Error::UnknownToken { id: t, vocab: v });
                    }
                    delta[t] += sign * self.step;
                }
            }
        }
        for (x, d) in self.values.iter_mut().zip(delta) {
            *x = (*x + d).clamp(-1.0, 1.0);
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Two-column `token<TAB>value` table, highest values first.
    pub fn export_table(&self, vocab: &Vocabulary) -> String {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        let mut out = String::from("token\tvalue\n");
        for i in order {
            let name = if i < vocab.size() { vocab.token(i) } else { "?" };
            let _ = writeln!(out, "{name}\t{:.4}", self.values[i]);
        }
        out
    }

    /// Counts of entries in `bins` equal-width buckets over `[-1, 1]`.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let mut h = vec![0; bins.max(1)];
        let n = h.len();
        for &x in &self.values {
            let i = (((x + 1.0) / 2.0) * n as f64).floor() as usize;
            h[i.min(n - 1)] += 1;
        }
        h
    }

    pub fn write_into(&self, archive: &mut Archive) {
        let row = Array2::from_shape_vec((1, self.values.len()), self.values.clone()).unwrap();
        archive.arrays.push(("prior.values".into(), row));
    }

    pub fn read_from(archive: &Archive, step: f64) -> Result<Self> {
        let row = archive.get("prior.values").ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: "missing array `prior.values`".into(),
        })?;
        Ok(Self {
            values: row.iter().copied().collect(),
            step,
            eps: 1e-8,
        })
    }
}
