//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`)
//! so every criterion prints one PASS/FAIL line even when all of them pass.

use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use secguard::aggregator::{flops_estimate, AggregationMode, Aggregator};
use secguard::analyzer::{AnalyzerConfig, TokenPrior};
use secguard::autograd::Graph;
use secguard::backbone::{AdapterConfig, Backbone, Mode, ModelConfig};
use secguard::bench::{latency_sweep, BenchConfig};
use secguard::diagnostics::{probe_layers, probe_report_from, ProbeConfig, ProbeData};
use secguard::evalharness::{
    pass_at_k, sec_at_k_pass, secure_pass_at_k, sven_sr, MetricReport, SampleFlags, ScenarioResult,
};
use secguard::inference::{
    bias_for, bias_from_prior, distribution_shift_report, generate, generate_one, interval_generate,
    sample_rng, BiasMode, DecodeConfig,
};
use secguard::model::{GuardModel, HeadConfig};
use secguard::pipeline::{adapt, build_base, evaluate, PipelineConfig, Variant};
use secguard::toylang::{generate_pair, scenario_prompt, PairedExample, ToyProgram, Vocabulary};
use secguard::training::{loss_kl, mean_delta_s, pair_objective, reference_logprobs, LossWeights};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Everything the model-level criteria share: one base, two adapted models, four evaluations.
struct Artifacts {
    cfg: PipelineConfig,
    vocab: Vocabulary,
    full: GuardModel,
    test_pairs: Vec<PairedExample>,
    base_report: MetricReport,
    full_report: MetricReport,
    full_results: Vec<ScenarioResult>,
    unguided_results: Vec<ScenarioResult>,
    no_sec_report: MetricReport,
    n_scenarios: usize,
}

fn build_artifacts() -> Artifacts {
    let cfg = PipelineConfig::default();
    let vocab = Vocabulary::standard();
    let t = Instant::now();
    let corpus = cfg.corpus(&vocab).expect("corpus");
    let (base, _) = build_base(&cfg, &vocab).expect("pretraining");
    println!("  [setup] {} train pairs; base pretrained in {:.0}s", corpus.train.len(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let (full, _) = adapt(&cfg, &base, &corpus, |e| println!("  [full] {}", e.line())).expect("training");
    println!("  [setup] full model trained in {:.0}s", t.elapsed().as_secs_f64());
    let no_sec_cfg = PipelineConfig {
        weights: LossWeights {
            w_sec: 0.0,
            ..cfg.weights
        },
        ..cfg.clone()
    };
    let (no_sec, _) = adapt(&no_sec_cfg, &base, &corpus, |_| {}).expect("training without L_sec");

    let (base_report, _) = evaluate(&cfg, &full, &vocab, Variant::BASE).expect("eval base");
    let (full_report, full_results) = evaluate(&cfg, &full, &vocab, Variant::FULL).expect("eval full");
    let (_, unguided_results) = evaluate(&cfg, &full, &vocab, Variant::NO_GUIDANCE).expect("eval unguided");
    let (no_sec_report, _) = evaluate(&cfg, &no_sec, &vocab, Variant::FULL).expect("eval no L_sec");
    let n_scenarios = full_results.len();
    Artifacts {
        cfg,
        vocab,
        full,
        test_pairs: corpus.test,
        base_report,
        full_report,
        full_results,
        unguided_results,
        no_sec_report,
        n_scenarios,
    }
}

fn secure_rate(results: &[ScenarioResult]) -> f64 {
    let (secure, total) = results.iter().fold((0, 0), |(s, t), r| {
        (s + r.samples.iter().filter(|x| x.secure).count(), t + r.samples.len())
    });
    secure as f64 / total as f64
}

fn criterion_1(a: &Artifacts) -> Outcome {
    let sp_base = a.base_report.macro_secure_pass(1).unwrap();
    let sp_full = a.full_report.macro_secure_pass(1).unwrap();
    let p_base = a.base_report.macro_pass(1).unwrap();
    let p_full = a.full_report.macro_pass(1).unwrap();
    let samples = a.cfg.decode.n_samples;
    outcome(
        a.n_scenarios >= 12 && samples >= 25 && sp_full - sp_base >= 0.15 && p_base - p_full <= 0.10,
        format!(
            "{} scenarios x {samples} samples; sec-pass@1 base {sp_base:.3} -> full {sp_full:.3}; pass@1 base {p_base:.3} -> full {p_full:.3}",
            a.n_scenarios
        ),
    )
}

fn criterion_2(a: &Artifacts) -> Outcome {
    let d = mean_delta_s(&a.full, &a.test_pairs).unwrap();
    let half = a.cfg.weights.margin / 2.0;
    outcome(d >= half, format!("held-out mean delta_s {d:.4} (need >= {half})"))
}

fn criterion_3(a: &Artifacts) -> Outcome {
    let full_rate = secure_rate(&a.full_results);
    let unguided_rate = secure_rate(&a.unguided_results);
    let sp_full = a.full_report.macro_secure_pass(1).unwrap();
    let sp_no_sec = a.no_sec_report.macro_secure_pass(1).unwrap();
    outcome(
        unguided_rate < full_rate && sp_no_sec < sp_full,
        format!(
            "secure rate full {full_rate:.4} vs no guidance {unguided_rate:.4}; sec-pass@1 full {sp_full:.4} vs (-)L_sec {sp_no_sec:.4}"
        ),
    )
}

fn rational(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Draws every k-subset of `pool` items of which the first `hits` are hits,
/// returning the fraction that contain a hit.
fn subset_fraction(pool: u64, hits: u64, k: u64) -> BigRational {
    let (mut any, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << pool) {
        if mask.count_ones() as u64 != k {
            continue;
        }
        total += 1;
        if mask & ((1u32 << hits) - 1) != 0 {
            any += 1;
        }
    }
    rational(any, total)
}

fn criterion_4() -> Outcome {
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for n in 1..=8u64 {
        for c in 0..=n {
            for sp in 0..=c {
                for k in 1..=n {
                    let pass = subset_fraction(n, c, k);
                    let secure = subset_fraction(n, sp, k);
                    // Conditional on correctness: draw from the c correct samples; when
                    // fewer than k exist the only draw is all of them.
                    let cond = match c {
                        0 => rational(0, 1),
                        _ => subset_fraction(c, sp, k.min(c)),
                    };
                    if pass_at_k(n, c, k).unwrap() != pass {
                        mismatches.push(format!("pass@{k} n={n} c={c}"));
                    }
                    if secure_pass_at_k(n, sp, k).unwrap() != secure {
                        mismatches.push(format!("sec-pass@{k} n={n} sp={sp}"));
                    }
                    if sec_at_k_pass(c, sp, k).unwrap() != cond {
                        mismatches.push(format!("sec@{k}_pass c={c} sp={sp}"));
                    }
                    checked += 3;
                }
                // SVEN-SR ignores correctness: besides the c correct samples, odd-indexed
                // incorrect samples are well formed and every third of those is secure.
                // Each sample appears twice so de-duplication matters.
                let wf = |i: u64| i < c || i % 2 == 1;
                let sec = |i: u64| i < sp || (i >= c && i.is_multiple_of(3));
                let mut samples = Vec::new();
                for i in 0..n {
                    let flags = SampleFlags {
                        tokens: vec![1, 10 + i as usize, 2],
                        well_formed: wf(i),
                        correct: i < c,
                        secure: sec(i),
                    };
                    samples.push(flags.clone());
                    samples.push(flags);
                }
                let unique_wf = (0..n).filter(|&i| wf(i)).count();
                let secure_wf = (0..n).filter(|&i| wf(i) && sec(i)).count();
                let expect = (unique_wf > 0).then(|| secure_wf as f64 / unique_wf as f64);
                if sven_sr(&samples) != expect {
                    mismatches.push(format!("sven_sr n={n} c={c} sp={sp}"));
                }
                checked += 1;
            }
        }
    }
    outcome(
        mismatches.is_empty(),
        format!("{checked} exact comparisons, {} mismatches {:?}", mismatches.len(), mismatches.first()),
    )
}

fn criterion_5() -> Outcome {
    let f = flops_estimate(4, 32, 4096, 2048).unwrap();
    let pct = 100.0 * f.ratio_f64();
    let exact = *f.ratio.numer() * 192 == 9 * *f.ratio.denom();
    let coeffs_ok = [1u64, 2, 4, 6].iter().all(|&n| {
        let (c, d) = (128u128, 64u128);
        let e = flops_estimate(n, 32, d as u64, c as u64).unwrap();
        e.f_agg == 4 * (2 * n as u128 + 1) * c * d * d
    });
    outcome(
        exact && (pct - 4.6).abs() <= 0.1 && coeffs_ok,
        format!("ratio(N=4, d=32) = {}/{} = {pct:.4}%; F_agg coefficient 4(2N+1) for N in {{1,2,4,6}}: {coeffs_ok}", f.ratio.numer(), f.ratio.denom()),
    )
}

fn criterion_6(a: &Artifacts) -> Outcome {
    let prompt = scenario_prompt(&a.vocab, "taint_sink", 0).unwrap().tokens;
    let cfg = DecodeConfig {
        max_new_tokens: 300,
        ignore_eos: true,
        ..a.cfg.decode.clone()
    };
    let mut counts = Vec::new();
    for k in [64, 16, 4, 1] {
        let g = interval_generate(&a.full, &prompt, Mode::Adapted, k, &cfg, &mut sample_rng(1, 0)).unwrap();
        counts.push(g.rescore_count);
    }
    let single = generate_one(&a.full, &prompt, Mode::Adapted, BiasMode::Guided, None, &cfg, &mut sample_rng(1, 0))
        .unwrap()
        .rescore_count;
    let bench = BenchConfig {
        repetitions: 5,
        ..BenchConfig::default()
    };
    let rows = latency_sweep(&a.full, &prompt, Mode::Adapted, &bench, &a.cfg.decode).unwrap();
    let times: Vec<f64> = rows[1..].iter().map(|r| r.seconds).collect();
    let monotone = times.windows(2).all(|w| w[0] <= w[1]);
    outcome(
        counts == [5, 19, 75, 300] && single == 1 && monotone,
        format!(
            "re-scores k=64/16/4/1: {counts:?}, default {single}; seconds {}",
            times.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>().join(" <= ")
        ),
    )
}

fn tiny_model(seed: u64) -> GuardModel {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        seed,
        ..ModelConfig::default()
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
            hidden: [8, 6, 4],
            dropout: 0.1,
        },
        ..HeadConfig::default()
    };
    GuardModel::new(bb, heads).unwrap()
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12)
}

/// Trainable slot `s` in gradient order: adapters, aggregator, analyzer.
fn trainable(m: &mut GuardModel, s: usize) -> &mut Array2<f64> {
    let n_ad = m.backbone.adapters.len();
    let n_ag = m.aggregator.params.len();
    if s < n_ad {
        m.backbone.adapters.get_mut(s)
    } else if s < n_ad + n_ag {
        m.aggregator.params.get_mut(s - n_ad)
    } else {
        m.analyzer.params.get_mut(s - n_ad - n_ag)
    }
}

/// Worst relative error of L_total over 30 random trainable coordinates.
fn total_loss_fd() -> f64 {
    let vocab = Vocabulary::standard();
    let mut m = tiny_model(3);
    let pair = generate_pair(&vocab, "path_traversal", 2).unwrap();
    let reference = reference_logprobs(&m.backbone, std::slice::from_ref(&pair)).unwrap().remove(0);
    let w = LossWeights {
        margin: 2.0,
        ..LossWeights::default()
    };
    let (_, grads) = pair_objective(&m, &pair, &reference, &w, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut worst, mut checked) = (0.0f64, 0);
    while checked < 30 {
        let s = rng.random_range(0..grads.grads.len());
        let (r, c) = grads.grads[s].dim();
        let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
        let an = grads.grads[s][[i, j]];
        let eps = 1e-5;
        let orig = trainable(&mut m, s)[[i, j]];
        let mut value_at = |v: f64| {
            trainable(&mut m, s)[[i, j]] = v;
            pair_objective(&m, &pair, &reference, &w, None).unwrap().0.total
        };
        let fd = (value_at(orig + eps) - value_at(orig - eps)) / (2.0 * eps);
        value_at(orig);
        if fd.abs().max(an.abs()) < 1e-7 {
            continue;
        }
        worst = worst.max(rel_err(fd, an));
        checked += 1;
    }
    worst
}

/// Worst relative error of `<R, h_agg>` w.r.t. aggregator weights and layer states.
fn aggregator_fd() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, s, d) = (3, 5, 6);
    let mut states: Vec<Array2<f64>> = (0..n)
        .map(|_| Array2::from_shape_fn((s, d), |_| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut agg = Aggregator::new(d, n, AggregationMode::AttnPool, 9).unwrap();
    let r = Array2::from_shape_fn((s, d), |_| rng.sample::<f64, _>(StandardNormal));
    let value = |agg: &Aggregator, states: &[Array2<f64>]| -> f64 {
        (&agg.aggregate_states(states).unwrap().h_agg * &r).sum()
    };
    let (param_grads, state_grads) = {
        let mut g = Graph::new();
        let hidden: Vec<_> = states.iter().map(|h| g.param(h, true)).collect();
        let b = agg.bind(&mut g, true);
        let (h, _) = agg.forward_graph(&mut g, &b, &hidden).unwrap();
        let rn = g.constant(r.clone());
        let prod = g.mul(h, rn);
        let m = g.mean(prod);
        let loss = g.scale(m, (s * d) as f64);
        g.backward(loss);
        let pg: Vec<Array2<f64>> = b.nodes().iter().map(|&id| g.grad(id).unwrap().clone()).collect();
        let sg: Vec<Array2<f64>> = hidden.iter().map(|&id| g.grad(id).unwrap().clone()).collect();
        (pg, sg)
    };
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (p, grad) in param_grads.iter().enumerate() {
        for idx in [[0, 0], [1, 2], [d - 1, d - 1]] {
            let orig = agg.params.get(p)[idx];
            agg.params.get_mut(p)[idx] = orig + eps;
            let up = value(&agg, &states);
            agg.params.get_mut(p)[idx] = orig - eps;
            let down = value(&agg, &states);
            agg.params.get_mut(p)[idx] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * eps), grad[idx]));
        }
    }
    for (l, grad) in state_grads.iter().enumerate() {
        for idx in [[0, 1], [s - 1, d - 2]] {
            let orig = states[l][idx];
            states[l][idx] = orig + eps;
            let up = value(&agg, &states);
            states[l][idx] = orig - eps;
            let down = value(&agg, &states);
            states[l][idx] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * eps), grad[idx]));
        }
    }
    worst
}

fn criterion_7() -> Outcome {
    let fd_total = total_loss_fd();
    let fd_agg = aggregator_fd();

    let vocab = Vocabulary::standard();
    let mut m = tiny_model(8);
    m.backbone.zero_adapters();
    let pair = generate_pair(&vocab, "xss", 3).unwrap();
    let kl = loss_kl(&m.backbone, &pair.x_sec.tokens).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst_row = 0.0f64;
    let agg = Aggregator::new(8, 4, AggregationMode::AttnPool, 2).unwrap();
    for _ in 0..20 {
        let s = rng.random_range(1..30);
        let states: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_fn((s, 8), |_| 3.0 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let w = agg.aggregate_states(&states).unwrap().layer_weights;
        for row in w.rows() {
            worst_row = worst_row.max((row.sum() - 1.0).abs());
        }
    }

    let mut prior = TokenPrior::new(64, 0.05);
    let random_program = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(3..20);
        let mut t: Vec<usize> = (0..len).map(|_| rng.random_range(3..64)).collect();
        t[0] = 1;
        ToyProgram::new(t, "fuzz")
    };
    let mut updates = 0;
    let mut in_range = true;
    while updates < 10_000 {
        let batch: Vec<PairedExample> = (0..rng.random_range(1..4))
            .map(|_| PairedExample {
                x_vul: random_program(&mut rng),
                x_sec: random_program(&mut rng),
                scenario_id: "fuzz".into(),
            })
            .collect();
        prior.update(&batch).unwrap();
        updates += 1;
        in_range &= prior.values.iter().all(|v| (-1.0..=1.0).contains(v));
    }
    outcome(
        fd_total < 1e-3 && fd_agg < 1e-3 && kl == 0.0 && worst_row <= 1e-6 && in_range,
        format!(
            "FD rel err L_total {fd_total:.2e}, aggregator {fd_agg:.2e}; KL(P||P) = {kl:e}; max |row sum - 1| {worst_row:.1e}; prior in [-1,1] after {updates} updates: {in_range}"
        ),
    )
}

fn criterion_8(a: &Artifacts) -> Outcome {
    let prior = &a.full.prior.values;
    let s_prompt = 1.0;
    let at_one = bias_from_prior(prior, 1.0 - s_prompt, 1e-8).iter().all(|&b| b == 0.0);
    let zero_prior = bias_from_prior(&vec![0.0; prior.len()], 0.7, 1e-8).iter().all(|&b| b == 0.0);

    let mut silent = a.full.clone();
    silent.prior.values.iter_mut().for_each(|v| *v = 0.0);
    let prompt = scenario_prompt(&a.vocab, "sql_inject", 3).unwrap().tokens;
    let cfg = DecodeConfig {
        n_samples: 10,
        temperature: 0.8,
        ..a.cfg.decode.clone()
    };
    let guided = generate(&silent, &prompt, Mode::Adapted, BiasMode::Guided, &cfg).unwrap();
    let plain = generate(&silent, &prompt, Mode::Adapted, BiasMode::Unguided, &cfg).unwrap();
    let identical = guided.iter().zip(&plain).all(|(g, p)| g.tokens == p.tokens);

    let bias = bias_for(&a.full, &prompt, Mode::Adapted, BiasMode::Guided).unwrap();
    let shift = distribution_shift_report(&a.full, &prompt, Mode::Adapted, &bias).unwrap();
    let total: f64 = shift.delta_p.iter().sum();
    outcome(
        at_one && zero_prior && identical && total.abs() <= 1e-9,
        format!(
            "b = 0 at s = 1: {at_one}, for zero prior: {zero_prior}; zero-bias guided == plain over {} samples: {identical}; sum dP = {total:.1e}",
            cfg.n_samples
        ),
    )
}

/// Layer `signal` (0-based) separates the classes along its first coordinate.
fn planted(n_layers: usize, n_pairs: usize, signal: Option<usize>, seed: u64) -> ProbeData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * n_pairs;
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
    let layers = (0..n_layers)
        .map(|l| {
            let mut x = Array2::from_shape_fn((n, 16), |_| rng.sample::<f64, _>(StandardNormal));
            if Some(l) == signal {
                for (i, &y) in labels.iter().enumerate() {
                    x[[i, 0]] += if y { 1.5 } else { -1.5 };
                }
            }
            x
        })
        .collect();
    ProbeData::new(layers, labels, (0..n).map(|i| i / 2).collect()).unwrap()
}

fn criterion_9() -> Outcome {
    let l = 4usize;
    let target = l.div_ceil(3);
    let report = probe_report_from(&planted(l, 100, Some(target - 1), 17), &ProbeConfig::default());
    let mut shuffled = planted(1, 100, Some(0), 18);
    shuffled.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let chance = probe_layers(&shuffled, &ProbeConfig::default())[0];
    outcome(
        report.peak_layer == target
            && report.relative_drop_pct > 0.0
            && report.p_value < 0.05
            && (chance - 0.5).abs() <= 0.1,
        format!(
            "planted layer {target}: peak {} drop {:.1}% p {:.4} ({} permutations); shuffled-label confidence {chance:.3}",
            report.peak_layer, report.relative_drop_pct, report.p_value, report.permutations
        ),
    )
}

fn criterion_10(a: &Artifacts) -> Outcome {
    let held: Vec<_> = a
        .full_report
        .by_template
        .iter()
        .filter(|(_, h, _)| *h)
        .map(|(t, _, full)| {
            let base = &a.base_report.by_template.iter().find(|(bt, _, _)| bt == t).unwrap().2;
            (t.clone(), base.sec_pass[0], full.sec_pass[0])
        })
        .collect();
    let no_worse = held.iter().all(|(_, b, f)| f >= &(b - 0.05));
    let some_better = held.iter().any(|(_, b, f)| f > b);
    outcome(
        held.len() >= 2 && no_worse && some_better,
        held.iter()
            .map(|(t, b, f)| format!("{t}: sec@1_pass base {b:.3} -> full {f:.3}"))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut record = |id: u32, name: &str, o: Outcome| {
        let line = format!("criterion {id:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        println!("{line}");
        lines.push((o.pass, line));
    };
    record(4, "metric oracle equivalence", criterion_4());
    record(5, "FLOPs model", criterion_5());
    record(7, "numerical soundness", criterion_7());
    record(9, "probing harness", criterion_9());
    let a = build_artifacts();
    record(1, "end-to-end effect", criterion_1(&a));
    record(2, "contrastive separation", criterion_2(&a));
    record(3, "ablation ordering", criterion_3(&a));
    record(6, "re-scoring counts", criterion_6(&a));
    record(8, "bias contracts", criterion_8(&a));
    record(10, "generalization split", criterion_10(&a));

    lines.sort_by_key(|(_, l)| l[10..12].trim().parse::<u32>().unwrap_or(0));
    println!("\nacceptance summary ({:.0}s):", start.elapsed().as_secs_f64());
    for (_, l) in &lines {
        println!("{l}");
    }
    if lines.iter().all(|(p, _)| *p) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
