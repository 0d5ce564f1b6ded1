//! Decoder-only transformer with per-layer hidden-state taps and low-rank
//! adapters on the attention projections.
//!
//! The frozen base weights and the adapter weights live in separate
//! [`ParamSet`]s. [`Mode::Base`] bypasses the adapters entirely; in
//! [`Mode::Adapted`] each adapted projection computes
//! `x·W + (alpha/rank) · dropout(x)·A·B`.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{gelu, Graph, NodeId};
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::params::{normal, ones_row, zeros_row, ParamSet};
use crate::toylang::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 64,
            max_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::InvalidConfig("n_layers must be at least 2".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 || self.max_len == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig(
                "vocab_size, max_len and d_ff must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn mismatch(&self, other: &ModelConfig) -> Option<(&'static str, String, String)> {
        let fields: [(&'static str, usize, usize); 6] = [
            ("n_layers", self.n_layers, other.n_layers),
            ("d_model", self.d_model, other.d_model),
            ("n_heads", self.n_heads, other.n_heads),
            ("d_ff", self.d_ff, other.d_ff),
            ("vocab_size", self.vocab_size, other.vocab_size),
            ("max_len", self.max_len, other.max_len),
        ];
        fields
            .into_iter()
            .find(|(_, a, b)| a != b)
            .map(|(f, a, b)| (f, a.to_string(), b.to_string()))
    }
}

/// Adapters target the query, key, value and output projections of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("adapter dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Standard deviation of the adapter down-projection at initialisation.
pub const ADAPTER_INIT_STD: f64 = 0.02;
const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Frozen base weights θ, adapters bypassed.
    Base,
    /// θ' = θ + Δθ.
    Adapted,
}

/// Outputs of every transformer block plus the final logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStack {
    /// `states[i]` is the residual stream after block `i + 1`, shape `S x D`.
    pub states: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl HiddenStack {
    pub fn seq_len(&self) -> usize {
        self.logits.nrows()
    }

    /// The top `n` layers, in increasing depth.
    pub fn top(&self, n: usize) -> &[Array2<f64>] {
        &self.states[self.states.len() - n..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Down/up projection pairs for q, k, v, o.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AdapterIdx {
    down: [usize; 4],
    up: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub adapter_config: AdapterConfig,
    pub base: ParamSet,
    pub adapters: ParamSet,
    tok_emb: usize,
    pos_emb: usize,
    lnf_g: usize,
    lnf_b: usize,
    lm_head: usize,
    layers: Vec<LayerIdx>,
    adapter_idx: Vec<AdapterIdx>,
}

/// Graph handles for one binding of the backbone's parameters.
pub struct BoundBackbone {
    base: Vec<NodeId>,
    adapters: Vec<NodeId>,
}

impl BoundBackbone {
    pub fn base_nodes(&self) -> &[NodeId] {
        &self.base
    }

    pub fn adapter_nodes(&self) -> &[NodeId] {
        &self.adapters
    }
}

/// Node handles from a graph-level forward pass.
pub struct Taps {
    pub hidden: Vec<NodeId>,
    pub logits: NodeId,
    pub attention: Vec<Vec<NodeId>>,
}

const PROJ_NAMES: [&str; 4] = ["q", "k", "v", "o"];

impl Backbone {
    /// Seed-determined initialisation; adapter up-projections start at zero.
    pub fn new(config: ModelConfig, adapter_config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        adapter_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut base = ParamSet::new();
        let tok_emb = base.push("tok_emb", normal(v, d, INIT_STD, &mut rng));
        let pos_emb = base.push("pos_emb", normal(config.max_len, d, INIT_STD, &mut rng));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            layers.push(LayerIdx {
                ln1_g: base.push(p("ln1.gain"), ones_row(d)),
                ln1_b: base.push(p("ln1.bias"), zeros_row(d)),
                wq: base.push(p("attn.wq"), normal(d, d, INIT_STD, &mut rng)),
                wk: base.push(p("attn.wk"), normal(d, d, INIT_STD, &mut rng)),
                wv: base.push(p("attn.wv"), normal(d, d, INIT_STD, &mut rng)),
                wo: base.push(p("attn.wo"), normal(d, d, INIT_STD, &mut rng)),
                ln2_g: base.push(p("ln2.gain"), ones_row(d)),
                ln2_b: base.push(p("ln2.bias"), zeros_row(d)),
                w1: base.push(p("ffn.w1"), normal(d, f, INIT_STD, &mut rng)),
                b1: base.push(p("ffn.b1"), zeros_row(f)),
                w2: base.push(p("ffn.w2"), normal(f, d, INIT_STD, &mut rng)),
                b2: base.push(p("ffn.b2"), zeros_row(d)),
            });
        }
        let lnf_g = base.push("lnf.gain", ones_row(d));
        let lnf_b = base.push("lnf.bias", zeros_row(d));
        let lm_head = base.push("lm_head", normal(d, v, INIT_STD, &mut rng));

        let mut adapters = ParamSet::new();
        let r = adapter_config.rank;
        let mut adapter_idx = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut down = [0; 4];
            let mut up = [0; 4];
            for (k, name) in PROJ_NAMES.iter().enumerate() {
                down[k] = adapters.push(
                    format!("layers.{l}.lora.{name}.down"),
                    normal(d, r, ADAPTER_INIT_STD, &mut rng),
                );
                up[k] = adapters.push(format!("layers.{l}.lora.{name}.up"), Array2::zeros((r, d)));
            }
            adapter_idx.push(AdapterIdx { down, up });
        }
        Ok(Self {
            config,
            adapter_config,
            base,
            adapters,
            tok_emb,
            pos_emb,
            lnf_g,
            lnf_b,
            lm_head,
            layers,
            adapter_idx,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Resets every adapter up-projection to zero, making θ' = θ.
    pub fn zero_adapters(&mut self) {
        for a in &self.adapter_idx {
            for &u in &a.up {
                self.adapters.get_mut(u).fill(0.0);
            }
        }
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::UnknownToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, grad_base: bool, grad_adapters: bool) -> BoundBackbone {
        BoundBackbone {
            base: self.base.iter().map(|p| g.param(&p.value, grad_base)).collect(),
            adapters: self
                .adapters
                .iter()
                .map(|p| g.param(&p.value, grad_adapters))
                .collect(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn projection(
        &self,
        g: &mut Graph<'_>,
        b: &BoundBackbone,
        x: NodeId,
        weight: usize,
        layer: usize,
        which: usize,
        mode: Mode,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let base = g.matmul(x, b.base[weight]);
        if mode == Mode::Base {
            return base;
        }
        let ai = self.adapter_idx[layer];
        let mut inp = x;
        let p = self.adapter_config.dropout;
        if let Some(rng) = rng.as_deref_mut() {
            inp = g.dropout(x, p, rng);
        }
        let down = g.matmul(inp, b.adapters[ai.down[which]]);
        let up = g.matmul(down, b.adapters[ai.up[which]]);
        let delta = g.scale(up, self.adapter_config.scale());
        g.add(base, delta)
    }

    fn causal_mask(s: usize) -> Array2<f64> {
        Array2::from_shape_fn((s, s), |(i, j)| if j > i { f64::NEG_INFINITY } else { 0.0 })
    }

    /// Forward pass recorded on `g`. Passing an rng enables adapter dropout.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        b: &BoundBackbone,
        tokens: &[TokenId],
        mode: Mode,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Taps> {
        self.check_tokens(tokens)?;
        let s = tokens.len();
        let positions: Vec<usize> = (0..s).collect();
        let te = g.gather(b.base[self.tok_emb], tokens);
        let pe = g.gather(b.base[self.pos_emb], &positions);
        let mut x = g.add(te, pe);
        let mask = Self::causal_mask(s);
        let dh = self.config.head_dim();
        let att_scale = 1.0 / (dh as f64).sqrt();
        let mut hidden = Vec::with_capacity(self.config.n_layers);
        let mut attention = Vec::with_capacity(self.config.n_layers);
        for (l, li) in self.layers.iter().enumerate() {
            let h = g.layer_norm(x, b.base[li.ln1_g], b.base[li.ln1_b], LN_EPS);
            let q = self.projection(g, b, h, li.wq, l, 0, mode, &mut dropout_rng);
            let k = self.projection(g, b, h, li.wk, l, 1, mode, &mut dropout_rng);
            let v = self.projection(g, b, h, li.wv, l, 2, mode, &mut dropout_rng);
            let mut heads = Vec::with_capacity(self.config.n_heads);
            let mut probs = Vec::with_capacity(self.config.n_heads);
            for hd in 0..self.config.n_heads {
                let qh = g.slice_cols(q, hd * dh, dh);
                let kh = g.slice_cols(k, hd * dh, dh);
                let vh = g.slice_cols(v, hd * dh, dh);
                let sc = g.matmul_nt(qh, kh);
                let sc = g.scale(sc, att_scale);
                let sc = g.mask(sc, &mask);
                let p = g.softmax(sc);
                probs.push(p);
                heads.push(g.matmul(p, vh));
            }
            let cat = g.concat_cols(&heads);
            let o = self.projection(g, b, cat, li.wo, l, 3, mode, &mut dropout_rng);
            x = g.add(x, o);
            let h2 = g.layer_norm(x, b.base[li.ln2_g], b.base[li.ln2_b], LN_EPS);
            let f = g.matmul(h2, b.base[li.w1]);
            let f = g.add_row(f, b.base[li.b1]);
            let f = g.gelu(f);
            let f = g.matmul(f, b.base[li.w2]);
            let f = g.add_row(f, b.base[li.b2]);
            x = g.add(x, f);
            hidden.push(x);
            attention.push(probs);
        }
        let xf = g.layer_norm(x, b.base[self.lnf_g], b.base[self.lnf_b], LN_EPS);
        let logits = g.matmul(xf, b.base[self.lm_head]);
        Ok(Taps {
            hidden,
            logits,
            attention,
        })
    }

    /// Evaluation-mode forward pass returning every block output and the logits.
    pub fn forward_with_taps(&self, tokens: &[TokenId], mode: Mode) -> Result<HiddenStack> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, false);
        let taps = self.forward_graph(&mut g, &b, tokens, mode, None)?;
        Ok(HiddenStack {
            states: taps.hidden.iter().map(|&h| g.value(h).to_owned()).collect(),
            logits: g.value(taps.logits).to_owned(),
        })
    }

    /// Logits only.
    pub fn logits(&self, tokens: &[TokenId], mode: Mode) -> Result<Array2<f64>> {
        Ok(self.forward_with_taps(tokens, mode)?.logits)
    }

    /// Per-layer, per-head causal attention probabilities (`S x S` each).
    pub fn attention_maps(&self, tokens: &[TokenId], mode: Mode) -> Result<Vec<Vec<Array2<f64>>>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, false);
        let taps = self.forward_graph(&mut g, &b, tokens, mode, None)?;
        Ok(taps
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&p| g.value(p).to_owned()).collect())
            .collect())
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "backbone",
            "model": self.config,
            "adapter": self.adapter_config,
        })
    }

    pub fn write_into(&self, archive: &mut Archive) {
        archive.push_set("backbone.base.", &self.base);
        archive.push_set("backbone.adapters.", &self.adapters);
    }

    pub fn read_from(archive: &Archive, meta: &serde_json::Value) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        let adapter_config: AdapterConfig = serde_json::from_value(meta["adapter"].clone())?;
        let mut model = Self::new(config, adapter_config)?;
        archive.fill_set("backbone.base.", &mut model.base)?;
        archive.fill_set("backbone.adapters.", &mut model.adapters)?;
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut archive = Archive::new(self.meta());
        self.write_into(&mut archive);
        archive.write(path)
    }

    /// Loads a checkpoint and checks its architecture against `expected`.
    pub fn load_checkpoint(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load_checkpoint_unchecked(path)?;
        model.check_config(expected)?;
        Ok(model)
    }

    pub fn load_checkpoint_unchecked(path: &Path) -> Result<Self> {
        let archive = Archive::read(path)?;
        if archive.meta["kind"] != "backbone" {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("expected a backbone checkpoint, found {}", archive.meta["kind"]),
            });
        }
        Self::read_from(&archive, &archive.meta.clone())
    }

    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        match expected.mismatch(&self.config) {
            Some((field, exp, found)) => Err(Error::ConfigMismatch {
                field: field.to_string(),
                expected: exp,
                found,
            }),
            None => Ok(()),
        }
    }
}


/// Per-layer key/value cache for token-by-token decoding in evaluation mode.
/// Adapter deltas are merged into the projection weights once, at creation.
#[derive(Debug, Clone)]
pub struct KvCache {
    mode: Mode,
    merged: Vec<[Array2<f64>; 4]>,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

fn layer_norm_row(x: &Array1<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let is = 1.0 / (var + LN_EPS).sqrt();
    let mut out = x.mapv(|v| (v - mean) * is);
    out *= &gain.row(0);
    out += &bias.row(0);
    out
}

impl Backbone {
    pub fn new_cache(&self, mode: Mode) -> KvCache {
        let (s, d) = (self.config.max_len, self.config.d_model);
        let merged = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, li)| {
                let ws = [li.wq, li.wk, li.wv, li.wo];
                std::array::from_fn(|k| {
                    let w = self.base.get(ws[k]).clone();
                    if mode == Mode::Base {
                        return w;
                    }
                    let ai = self.adapter_idx[l];
                    let delta = self.adapters.get(ai.down[k]).dot(self.adapters.get(ai.up[k]));
                    w + delta * self.adapter_config.scale()
                })
            })
            .collect();
        KvCache {
            mode,
            merged,
            keys: vec![Array2::zeros((s, d)); self.config.n_layers],
            values: vec![Array2::zeros((s, d)); self.config.n_layers],
            len: 0,
        }
    }

    /// Appends `token` at the next position and returns the logits predicting
    /// the token after it.
    pub fn step(&self, cache: &mut KvCache, token: TokenId) -> Result<Array1<f64>> {
        let pos = cache.len;
        if pos >= self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                max: self.config.max_len,
            });
        }
        if token >= self.config.vocab_size {
            return Err(Error::UnknownToken {
                id: token,
                vocab: self.config.vocab_size,
            });
        }
        let dh = self.config.head_dim();
        let att_scale = 1.0 / (dh as f64).sqrt();
        let mut x = &self.base.get(self.tok_emb).row(token) + &self.base.get(self.pos_emb).row(pos);
        for (l, li) in self.layers.iter().enumerate() {
            let [wq, wk, wv, wo] = &cache.merged[l];
            let h = layer_norm_row(&x, self.base.get(li.ln1_g), self.base.get(li.ln1_b));
            let q = h.dot(wq);
            cache.keys[l].row_mut(pos).assign(&h.dot(wk));
            cache.values[l].row_mut(pos).assign(&h.dot(wv));
            let mut cat = Array1::zeros(self.config.d_model);
            for hd in 0..self.config.n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                let qh = q.slice(ndarray::s![cols.clone()]);
                let kh = cache.keys[l].slice(ndarray::s![..=pos, cols.clone()]);
                let vh = cache.values[l].slice(ndarray::s![..=pos, cols.clone()]);
                let mut sc = kh.dot(&qh) * att_scale;
                let m = sc.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                sc.mapv_inplace(|v| (v - m).exp());
                let z = sc.sum();
                sc /= z;
                cat.slice_mut(ndarray::s![cols]).assign(&sc.dot(&vh));
            }
            x += &cat.dot(wo);
            let h2 = layer_norm_row(&x, self.base.get(li.ln2_g), self.base.get(li.ln2_b));
            let mut f = h2.dot(self.base.get(li.w1));
            f += &self.base.get(li.b1).row(0);
            f.mapv_inplace(gelu);
            let mut f = f.dot(self.base.get(li.w2));
            f += &self.base.get(li.b2).row(0);
            x += &f;
        }
        cache.len += 1;
        let xf = layer_norm_row(&x, self.base.get(self.lnf_g), self.base.get(self.lnf_b));
        Ok(xf.dot(self.base.get(self.lm_head)))
    }

    /// Fresh cache filled with `tokens`; returns the logits after the last one.
    pub fn prefill(&self, tokens: &[TokenId], mode: Mode) -> Result<(KvCache, Array1<f64>)> {
        self.check_tokens(tokens)?;
        let mut cache = self.new_cache(mode);
        let mut last = None;
        for &t in tokens {
            last = Some(self.step(&mut cache, t)?);
        }
        Ok((cache, last.expect("tokens checked non-empty")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> Backbone {
        let cfg = ModelConfig {
            seed: 11,
            ..ModelConfig::default()
        };
        Backbone::new(cfg, AdapterConfig::default()).unwrap()
    }

    fn perturb_adapters(m: &mut Backbone, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.adapters.iter_mut() {
            p.value.mapv_inplace(|v| v + rng.random_range(-0.05..0.05));
        }
    }

    #[test]
    fn hidden_stack_shape_contract() {
        let m = tiny();
        let toks = [1, 5, 9, 12, 40, 2];
        let hs = m.forward_with_taps(&toks, Mode::Adapted).unwrap();
        assert_eq!(hs.states.len(), 4);
        for s in &hs.states {
            assert_eq!(s.dim(), (6, 64));
            assert!(s.iter().all(|v| v.is_finite()));
        }
        assert_eq!(hs.logits.dim(), (6, 64));
    }

    #[test]
    fn zero_adapters_are_exact_no_op_on_every_layer() {
        let m = tiny();
        let toks = [1, 3, 4, 5, 6, 38, 8, 2];
        let base = m.forward_with_taps(&toks, Mode::Base).unwrap();
        let adapted = m.forward_with_taps(&toks, Mode::Adapted).unwrap();
        assert_eq!(base, adapted);
    }

    #[test]
    fn repeated_eval_forward_is_bit_identical() {
        let mut m = tiny();
        perturb_adapters(&mut m, 1);
        let toks = [1, 3, 4, 5, 6, 38, 8, 2];
        let a = m.forward_with_taps(&toks, Mode::Adapted).unwrap();
        let b = m.forward_with_taps(&toks, Mode::Adapted).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causal_masking_hides_future_tokens() {
        let mut m = tiny();
        perturb_adapters(&mut m, 2);
        let toks = vec![1, 3, 4, 5, 6, 38, 8, 12, 13, 2];
        let base = m.logits(&toks, Mode::Adapted).unwrap();
        for cut in 1..toks.len() {
            let mut edited = toks.clone();
            for t in edited.iter_mut().skip(cut) {
                *t = (*t + 7) % 64;
            }
            let out = m.logits(&edited, Mode::Adapted).unwrap();
            for i in 0..cut {
                assert_eq!(base.row(i), out.row(i), "position {i} changed by edits at >= {cut}");
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = tiny();
        let maps = m.attention_maps(&[1, 3, 4, 5, 6, 2], Mode::Base).unwrap();
        for layer in &maps {
            for head in layer {
                for row in head.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny();
        assert!(matches!(
            m.forward_with_taps(&vec![1; 65], Mode::Base),
            Err(Error::SequenceTooLong { len: 65, max: 64 })
        ));
        assert!(matches!(
            m.forward_with_taps(&[1, 64], Mode::Base),
            Err(Error::UnknownToken { id: 64, .. })
        ));
    }

    #[test]
    fn config_invariants() {
        let bad = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let shallow = ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        };
        assert!(shallow.validate().is_err());
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        let mut m = tiny();
        perturb_adapters(&mut m, 3);
        let toks = [1, 7, 9, 12, 30, 5, 44];
        for mode in [Mode::Base, Mode::Adapted] {
            let full = m.logits(&toks, mode).unwrap();
            let mut cache = m.new_cache(mode);
            for (i, &t) in toks.iter().enumerate() {
                let row = m.step(&mut cache, t).unwrap();
                for (a, b) in row.iter().zip(full.row(i)) {
                    assert!((a - b).abs() < 1e-10, "{mode:?} pos {i}: {a} vs {b}");
                }
            }
        }
        let (cache, _) = m.prefill(&[1; 64], Mode::Base).unwrap();
        let mut cache = cache;
        assert!(m.step(&mut cache, 1).is_err());
    }
}
