//! Layer-wise linear probes and differential layer-attention tables.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::AggregationMode;
use crate::analyzer::scored_positions;
use crate::backbone::{Backbone, Mode};
use crate::error::{Error, Result};
use crate::model::GuardModel;
use crate::toylang::{PairedExample, TokenId};

pub const MIN_PROBE_PAIRS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_frac: f64,
    /// L2 penalty on the probe weights (not the intercept).
    pub l2: f64,
    pub iters: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            l2: 1e-2,
            iters: 200,
            permutations: 1000,
            seed: 0,
        }
    }
}

/// Per-layer feature matrices over a shared set of labelled samples. Samples
/// from the same pair share a group and always land on the same side of the split.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    /// `layers[l]` is `n_samples x d`.
    pub layers: Vec<Array2<f64>>,
    pub labels: Vec<bool>,
    pub groups: Vec<usize>,
}

impl ProbeData {
    pub fn new(layers: Vec<Array2<f64>>, labels: Vec<bool>, groups: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("probe layers"));
        }
        if labels.len() != groups.len() {
            return Err(Error::LengthMismatch {
                what: "probe labels vs groups",
                left: labels.len(),
                right: groups.len(),
            });
        }
        for x in &layers {
            if x.nrows() != labels.len() {
                return Err(Error::LengthMismatch {
                    what: "probe features vs labels",
                    left: x.nrows(),
                    right: labels.len(),
                });
            }
        }
        let data = Self { layers, labels, groups };
        if data.n_groups() < MIN_PROBE_PAIRS {
            return Err(Error::CorpusTooSmall(format!(
                "probing needs at least {MIN_PROBE_PAIRS} pairs, got {}",
                data.n_groups()
            )));
        }
        Ok(data)
    }

    /// Mean-pooled (non-special tokens) hidden states of every layer for each
    /// `x_vul` (label false) and `x_sec` (label true).
    pub fn from_pairs(backbone: &Backbone, pairs: &[PairedExample], mode: Mode) -> Result<Self> {
        let n_layers = backbone.n_layers();
        let d = backbone.d_model();
        let mut layers = vec![Array2::zeros((2 * pairs.len(), d)); n_layers];
        let mut labels = Vec::with_capacity(2 * pairs.len());
        let mut groups = Vec::with_capacity(2 * pairs.len());
        for (p, pair) in pairs.iter().enumerate() {
            for (j, (tokens, label)) in [(&pair.x_vul.tokens, false), (&pair.x_sec.tokens, true)]
                .into_iter()
                .enumerate()
            {
                let row = 2 * p + j;
                let pooled = pooled_states(backbone, tokens, mode)?;
                for (l, v) in pooled.into_iter().enumerate() {
                    layers[l].row_mut(row).assign(&v);
                }
                labels.push(label);
                groups.push(p);
            }
        }
        Self::new(layers, labels, groups)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_groups(&self) -> usize {
        let mut g = self.groups.clone();
        g.sort_unstable();
        g.dedup();
        g.len()
    }

    /// Deterministic split of sample indices by group.
    fn split(&self, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut ids = self.groups.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((ids.len() as f64) * train_frac).round() as usize;
        let n_train = n_train.clamp(1, ids.len() - 1);
        let train_ids: std::collections::HashSet<usize> = ids[..n_train].iter().copied().collect();
        (0..self.labels.len()).partition(|&i| train_ids.contains(&self.groups[i]))
    }
}

fn pooled_states(backbone: &Backbone, tokens: &[TokenId], mode: Mode) -> Result<Vec<Array1<f64>>> {
    let keep = scored_positions(tokens);
    let n = keep.iter().filter(|&&k| k).count();
    if n == 0 {
        return Err(Error::Empty("sequence has no non-special token"));
    }
    let stack = backbone.forward_with_taps(tokens, mode)?;
    Ok(stack
        .states
        .iter()
        .map(|h| {
            let mut acc = Array1::zeros(h.ncols());
            for (row, &k) in h.rows().into_iter().zip(&keep) {
                if k {
                    acc += &row;
                }
            }
            acc / n as f64
        })
        .collect())
}

/// Train/test design matrices standardised with training statistics.
struct Design {
    train: Array2<f64>,
    test: Array2<f64>,
    step: f64,
}

impl Design {
    fn new(x: &Array2<f64>, train_idx: &[usize], test_idx: &[usize], l2: f64) -> Self {
        let train = x.select(Axis(0), train_idx);
        let test = x.select(Axis(0), test_idx);
        let mean = train.mean_axis(Axis(0)).expect("non-empty train split");
        let std = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let train = (&train - &mean) / &std;
        let test = (&test - &mean) / &std;
        let step = 1.0 / (0.25 * top_eigenvalue(&train) + 0.25 + l2);
        Self { train, test, step }
    }

    /// Fits a logistic probe and returns the mean held-out probability of the true class.
    fn confidence(&self, y_train: &[f64], y_test: &[f64], cfg: &ProbeConfig) -> f64 {
        let n = self.train.nrows() as f64;
        let y = Array1::from(y_train.to_vec());
        let mut w = Array1::<f64>::zeros(self.train.ncols());
        let mut b = 0.0;
        for _ in 0..cfg.iters {
            let p = (self.train.dot(&w) + b).mapv(sigmoid);
            let r = &p - &y;
            let gw = self.train.t().dot(&r) / n + cfg.l2 * &w;
            let gb = r.sum() / n;
            w.scaled_add(-self.step, &gw);
            b -= self.step * gb;
        }
        let p = (self.test.dot(&w) + b).mapv(sigmoid);
        let total: f64 = p
            .iter()
            .zip(y_test)
            .map(|(&pi, &yi)| if yi > 0.5 { pi } else { 1.0 - pi })
            .sum();
        total / y_test.len() as f64
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Largest eigenvalue of `XᵀX / n` by power iteration.
fn top_eigenvalue(x: &Array2<f64>) -> f64 {
    let n = x.nrows().max(1) as f64;
    let mut v = Array1::from_elem(x.ncols(), 1.0 / (x.ncols() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..50 {
        let u = x.t().dot(&x.dot(&v)) / n;
        let norm = u.dot(&u).sqrt();
        if norm < 1e-12 {
            return 0.0;
        }
        lambda = norm;
        v = u / norm;
    }
    lambda
}

fn as_targets(labels: &[bool], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| if labels[i] { 1.0 } else { 0.0 }).collect()
}

/// Held-out probe confidence of every layer.
pub fn probe_layers(data: &ProbeData, cfg: &ProbeConfig) -> Vec<f64> {
    let (train_idx, test_idx) = data.split(cfg.train_frac, cfg.seed);
    let y_train = as_targets(&data.labels, &train_idx);
    let y_test = as_targets(&data.labels, &test_idx);
    data.layers
        .iter()
        .map(|x| Design::new(x, &train_idx, &test_idx, cfg.l2).confidence(&y_train, &y_test, cfg))
        .collect()
}

/// Probe confidence at one layer (1-based), from a backbone and a paired set.
pub fn layer_probe(
    backbone: &Backbone,
    pairs: &[PairedExample],
    layer: usize,
    mode: Mode,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if layer == 0 || layer > backbone.n_layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} outside 1..={}",
            backbone.n_layers()
        )));
    }
    let mut data = ProbeData::from_pairs(backbone, pairs, mode)?;
    data.layers = vec![data.layers.swap_remove(layer - 1)];
    Ok(probe_layers(&data, cfg)[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Index `l` holds layer `l + 1`.
    pub confidences: Vec<f64>,
    pub n_layers: usize,
    pub peak_layer: usize,
    pub peak_position_pct: f64,
    pub p_peak: f64,
    pub p_final: f64,
    pub relative_drop_pct: f64,
    pub p_value: f64,
    pub permutations: usize,
}

impl ProbeReport {
    pub fn from_confidences(confidences: Vec<f64>, p_value: f64, permutations: usize) -> Self {
        let n_layers = confidences.len();
        let (peak_idx, p_peak) = peak(&confidences);
        let p_final = confidences[n_layers - 1];
        let relative_drop_pct = if p_peak > 0.0 {
            100.0 * (p_peak - p_final) / p_peak
        } else {
            0.0
        };
        Self {
            n_layers,
            peak_layer: peak_idx + 1,
            peak_position_pct: 100.0 * (peak_idx + 1) as f64 / n_layers as f64,
            p_peak,
            p_final,
            relative_drop_pct,
            p_value,
            permutations,
            confidences,
        }
    }

    pub fn summary_tsv(&self, model: &str) -> String {
        format!(
            "model\tn_layers\tpeak_layer\tpeak_pos_pct\tp_peak\tp_final\trel_drop_pct\tp_value\n\
             {model}\t{}\t{}\t{:.1}\t{:.4}\t{:.4}\t{:.2}\t{:.4}\n",
            self.n_layers,
            self.peak_layer,
            self.peak_position_pct,
            self.p_peak,
            self.p_final,
            self.relative_drop_pct,
            self.p_value
        )
    }

    pub fn layers_csv(&self) -> String {
        let mut out = String::from("layer,confidence\n");
        for (l, c) in self.confidences.iter().enumerate() {
            let _ = writeln!(out, "{},{c:.6}", l + 1);
        }
        out
    }
}

/// First maximum wins ties.
fn peak(conf: &[f64]) -> (usize, f64) {
    conf.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &c)| if c > best.1 { (i, c) } else { best })
}

fn gap(conf: &[f64]) -> f64 {
    peak(conf).1 - conf[conf.len() - 1]
}

/// Probes every layer, then tests the peak-minus-final gap against label
/// permutations (peak re-selected under each permutation).
pub fn probe_report_from(data: &ProbeData, cfg: &ProbeConfig) -> ProbeReport {
    let (train_idx, test_idx) = data.split(cfg.train_frac, cfg.seed);
    let designs: Vec<Design> = data
        .layers
        .iter()
        .map(|x| Design::new(x, &train_idx, &test_idx, cfg.l2))
        .collect();
    let run = |labels: &[bool]| -> Vec<f64> {
        let y_train = as_targets(labels, &train_idx);
        let y_test = as_targets(labels, &test_idx);
        designs.iter().map(|d| d.confidence(&y_train, &y_test, cfg)).collect()
    };
    let confidences = run(&data.labels);
    let observed = gap(&confidences);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e57);
    let mut labels = data.labels.clone();
    let mut extreme = 0usize;
    for _ in 0..cfg.permutations {
        labels.shuffle(&mut rng);
        if gap(&run(&labels)) >= observed - 1e-12 {
            extreme += 1;
        }
    }
    let p_value = (1 + extreme) as f64 / (1 + cfg.permutations) as f64;
    ProbeReport::from_confidences(confidences, p_value, cfg.permutations)
}

pub fn probe_report(
    backbone: &Backbone,
    pairs: &[PairedExample],
    mode: Mode,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let data = ProbeData::from_pairs(backbone, pairs, mode)?;
    Ok(probe_report_from(&data, cfg))
}

/// `rows[p][j] = α_vul − α_sec` for the `j`-th of the top-N layers, averaged over tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDelta {
    /// 1-based backbone layer of each column.
    pub layers: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl AttentionDelta {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair");
        for l in &self.layers {
            let _ = write!(out, ",L{l}");
        }
        out.push('\n');
        for (p, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{p}");
            for v in row {
                let _ = write!(out, ",{v:.6e}");
            }
            out.push('\n');
        }
        out
    }

    /// Fraction of rows whose largest absolute entry exceeds `tol`.
    pub fn nonzero_fraction(&self, tol: f64) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let n = self
            .rows
            .iter()
            .filter(|r| r.iter().any(|v| v.abs() > tol))
            .count();
        n as f64 / self.rows.len() as f64
    }
}

fn mean_layer_weights(model: &GuardModel, tokens: &[TokenId], mode: Mode) -> Result<Array1<f64>> {
    let w = model.score(tokens, mode)?.aggregated.layer_weights;
    let keep = scored_positions(tokens);
    let n = keep.iter().filter(|&&k| k).count();
    let mut acc = Array1::zeros(w.ncols());
    for (row, &k) in w.rows().into_iter().zip(&keep) {
        if k {
            acc += &row;
        }
    }
    Ok(acc / n as f64)
}

pub fn attention_delta(model: &GuardModel, pairs: &[PairedExample], mode: Mode) -> Result<AttentionDelta> {
    if model.aggregator.mode != AggregationMode::AttnPool {
        return Err(Error::InvalidArgument(format!(
            "attention deltas need attn_pool aggregation, model uses {}",
            model.aggregator.mode
        )));
    }
    let n = model.aggregator.n_layers;
    let l = model.backbone.n_layers();
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let vul = mean_layer_weights(model, &pair.x_vul.tokens, mode)?;
        let sec = mean_layer_weights(model, &pair.x_sec.tokens, mode)?;
        rows.push((vul - sec).to_vec());
    }
    Ok(AttentionDelta {
        layers: (l - n + 1..=l).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// `n_pairs` pairs, `d` features; layer `signal_layer` (0-based) gets a
    /// class shift of `strength` on its first coordinate.
    pub(crate) fn planted(
        n_layers: usize,
        n_pairs: usize,
        d: usize,
        signal_layer: Option<usize>,
        strength: f64,
        seed: u64,
    ) -> ProbeData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * n_pairs;
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
        let groups: Vec<usize> = (0..n).map(|i| i / 2).collect();
        let layers = (0..n_layers)
            .map(|l| {
                let mut x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
                if Some(l) == signal_layer {
                    for (i, &y) in labels.iter().enumerate() {
                        x[[i, 0]] += if y { strength } else { -strength };
                    }
                }
                x
            })
            .collect();
        ProbeData::new(layers, labels, groups).unwrap()
    }

    #[test]
    fn sign_of_first_coordinate_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let x = Array2::from_shape_fn((n, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let labels: Vec<bool> = (0..n).map(|i| x[[i, 0]] > 0.0).collect();
        let groups = (0..n).collect();
        let data = ProbeData::new(vec![x], labels, groups).unwrap();
        let cfg = ProbeConfig { iters: 2000, l2: 1e-4, ..Default::default() };
        let c = probe_layers(&data, &cfg)[0];
        assert!((0.95..=1.0).contains(&c), "confidence {c}");
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        let mut data = planted(1, 120, 16, Some(0), 3.0, 5);
        data.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let c = probe_layers(&data, &ProbeConfig::default())[0];
        assert!((c - 0.5).abs() <= 0.1, "confidence {c}");
    }

    #[test]
    fn probing_is_deterministic() {
        let data = planted(3, 40, 6, Some(1), 1.0, 1);
        let cfg = ProbeConfig { permutations: 50, ..Default::default() };
        assert_eq!(probe_report_from(&data, &cfg), probe_report_from(&data, &cfg));
    }

    #[test]
    fn identical_layers_have_no_gap() {
        let base = planted(1, 40, 6, Some(0), 1.0, 2);
        let x = base.layers[0].clone();
        let data = ProbeData::new(vec![x.clone(), x.clone(), x], base.labels, base.groups).unwrap();
        let r = probe_report_from(&data, &ProbeConfig { permutations: 200, ..Default::default() });
        assert_eq!(r.relative_drop_pct, 0.0);
        assert_eq!(r.peak_layer, 1);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn planted_peak_is_found() {
        let l: usize = 6;
        let target = l.div_ceil(3);
        let data = planted(l, 60, 8, Some(target - 1), 1.5, 11);
        let r = probe_report_from(&data, &ProbeConfig { permutations: 200, ..Default::default() });
        assert_eq!(r.peak_layer, target);
        assert!(r.relative_drop_pct > 0.0);
        assert!(r.p_value < 0.05, "p = {}", r.p_value);
        assert!(r.confidences.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn null_gaps_are_rarely_significant() {
        let cfg = ProbeConfig { permutations: 99, iters: 60, ..Default::default() };
        let hits = (0..50)
            .filter(|&rep| {
                let data = planted(3, 20, 3, None, 0.0, 1000 + rep);
                probe_report_from(&data, &ProbeConfig { seed: rep, ..cfg.clone() }).p_value < 0.05
            })
            .count();
        assert!(hits as f64 / 50.0 <= 0.15, "{hits} of 50 null runs significant");
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        let x = Array2::zeros((38, 2));
        let labels = (0..38).map(|i| i % 2 == 0).collect();
        let groups = (0..38).map(|i| i / 2).collect();
        assert!(matches!(
            ProbeData::new(vec![x], labels, groups),
            Err(Error::CorpusTooSmall(_))
        ));
    }

    #[test]
    fn report_columns() {
        let r = ProbeReport::from_confidences(vec![0.6, 0.8, 0.8, 0.7], 0.01, 1000);
        assert_eq!(r.peak_layer, 2);
        assert_eq!(r.peak_position_pct, 50.0);
        assert!((r.relative_drop_pct - 12.5).abs() < 1e-12);
        let head = r.summary_tsv("toy").lines().next().unwrap().to_string();
        assert_eq!(
            head,
            "model\tn_layers\tpeak_layer\tpeak_pos_pct\tp_peak\tp_final\trel_drop_pct\tp_value"
        );
    }

    fn tiny_model(aggregation: AggregationMode) -> GuardModel {
        use crate::analyzer::AnalyzerConfig;
        use crate::backbone::{AdapterConfig, ModelConfig};
        use crate::model::HeadConfig;
        let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, ..Default::default() };
        let backbone = Backbone::new(cfg, AdapterConfig::default()).unwrap();
        let heads = HeadConfig {
            aggregation,
            analyzer: AnalyzerConfig { emb_dim: 8, hidden: [16, 8, 4], dropout: 0.1 },
            ..Default::default()
        };
        GuardModel::new(backbone, heads).unwrap()
    }

    fn pairs(n: usize) -> Vec<PairedExample> {
        let vocab = crate::toylang::Vocabulary::standard();
        (0..n)
            .map(|i| crate::toylang::generate_pair(&vocab, "sql_inject", i as u64).unwrap())
            .collect()
    }

    #[test]
    fn attention_delta_rows_sum_to_zero() {
        let model = tiny_model(AggregationMode::AttnPool);
        let delta = attention_delta(&model, &pairs(6), Mode::Adapted).unwrap();
        assert_eq!(delta.layers, vec![1, 2, 3, 4]);
        for row in &delta.rows {
            assert!(row.iter().sum::<f64>().abs() < 1e-6);
        }
        assert!(delta.to_csv().starts_with("pair,L1,L2,L3,L4\n0,"));
    }

    #[test]
    fn identical_pair_has_zero_delta() {
        let model = tiny_model(AggregationMode::AttnPool);
        let mut p = pairs(1);
        p[0].x_vul = p[0].x_sec.clone();
        let delta = attention_delta(&model, &p, Mode::Adapted).unwrap();
        assert!(delta.rows[0].iter().all(|&v| v == 0.0));
        assert_eq!(delta.nonzero_fraction(0.0), 0.0);
    }

    #[test]
    fn attention_delta_needs_attn_pool() {
        let model = tiny_model(AggregationMode::MeanPool);
        assert!(attention_delta(&model, &pairs(1), Mode::Adapted).is_err());
    }

    #[test]
    fn probe_data_from_backbone() {
        let model = tiny_model(AggregationMode::AttnPool);
        let data = ProbeData::from_pairs(&model.backbone, &pairs(20), Mode::Base).unwrap();
        assert_eq!(data.n_layers(), 4);
        assert_eq!(data.layers[0].dim(), (40, 16));
        let cfg = ProbeConfig { permutations: 0, ..Default::default() };
        let c = layer_probe(&model.backbone, &pairs(20), 2, Mode::Base, &cfg).unwrap();
        assert_eq!(c, probe_layers(&data, &cfg)[1]);
        assert!(layer_probe(&model.backbone, &pairs(19), 2, Mode::Base, &cfg).is_err());
        assert!(layer_probe(&model.backbone, &pairs(20), 5, Mode::Base, &cfg).is_err());
    }
}
