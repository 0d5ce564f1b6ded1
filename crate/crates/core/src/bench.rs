//! Wall-clock measurements: re-scoring interval sweep and guided-decoding overhead.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::Mode;
use crate::error::{Error, Result};
use crate::inference::{generate, generate_one, sample_rng, BiasMode, DecodeConfig};
use crate::model::GuardModel;
use crate::toylang::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub t_gen: usize,
    pub intervals: Vec<usize>,
    /// Each timing is the minimum over this many runs.
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            t_gen: 300,
            intervals: vec![64, 16, 4, 1],
            repetitions: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    /// `None` is the default mode: the prompt is scored once.
    pub interval: Option<usize>,
    pub rescores: usize,
    pub seconds: f64,
}

fn min_time<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let v = f()?;
        best = best.min(start.elapsed().as_secs_f64());
        out = Some(v);
    }
    Ok((out.expect("at least one repetition"), best))
}

/// Generates exactly `t_gen` tokens (EOS masked) for the default mode and every interval.
pub fn latency_sweep(
    model: &GuardModel,
    prompt: &[TokenId],
    mode: Mode,
    bench: &BenchConfig,
    decode: &DecodeConfig,
) -> Result<Vec<LatencyRow>> {
    if bench.t_gen == 0 {
        return Err(Error::InvalidArgument("t_gen must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(bench.intervals.len() + 1);
    for interval in std::iter::once(None).chain(bench.intervals.iter().map(|&k| Some(k))) {
        let cfg = DecodeConfig {
            max_new_tokens: bench.t_gen,
            ignore_eos: true,
            rescore_interval: interval,
            ..decode.clone()
        };
        let (g, seconds) = min_time(bench.repetitions, || {
            let mut rng = sample_rng(cfg.seed, 0);
            generate_one(model, prompt, mode, BiasMode::Guided, None, &cfg, &mut rng)
        })?;
        rows.push(LatencyRow {
            interval,
            rescores: g.rescore_count,
            seconds,
        });
    }
    Ok(rows)
}

pub fn latency_tsv(rows: &[LatencyRow]) -> String {
    let mut out = String::from("interval\trescores\tseconds\n");
    for r in rows {
        let k = r.interval.map_or("prompt_only".to_string(), |k| k.to_string());
        out.push_str(&format!("{k}\t{}\t{:.6}\n", r.rescores, r.seconds));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub plain_seconds: f64,
    pub guided_seconds: f64,
    pub overhead_pct: f64,
}

/// Guided against plain decoding of the same adapted model over `prompts`.
pub fn guidance_overhead(
    model: &GuardModel,
    prompts: &[Vec<TokenId>],
    decode: &DecodeConfig,
    repetitions: usize,
) -> Result<OverheadReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("benchmark prompts"));
    }
    let run = |bias: BiasMode| {
        min_time(repetitions, || {
            for p in prompts {
                generate(model, p, Mode::Adapted, bias, decode)?;
            }
            Ok(())
        })
        .map(|(_, s)| s)
    };
    let plain_seconds = run(BiasMode::Unguided)?;
    let guided_seconds = run(BiasMode::Guided)?;
    Ok(OverheadReport {
        plain_seconds,
        guided_seconds,
        overhead_pct: 100.0 * (guided_seconds - plain_seconds) / plain_seconds,
    })
}
