//! Sampling-based metrics (pass@k, secure-pass@k, sec@k_pass, SVEN-SR) and
//! scenario benchmarks scored by the toy-language oracles.

use std::collections::HashSet;
use std::fmt::Write as _;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::backbone::Mode;
use crate::error::{Error, Result};
use crate::inference::{generate, BiasMode, DecodeConfig};
use crate::model::GuardModel;
use crate::toylang::{
    correctness_oracle, scenario_prompt, security_oracle, template, well_formed, Correctness,
    Security, ToyProgram, Vocabulary, TEMPLATES,
};

/// `C(n, k)`, zero when `k > n`.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::from(0u32);
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

fn ratio(num: BigUint, den: BigUint) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn one_minus_ratio(a: u64, n: u64, k: u64) -> BigRational {
    let one = BigRational::from_integer(BigInt::from(1));
    one - ratio(binomial(a, k), binomial(n, k))
}

pub fn to_f64(r: &BigRational) -> f64 {
    use num_traits::ToPrimitive;
    r.to_f64().unwrap_or(f64::NAN)
}

fn check_nk(n: u64, hits: u64, k: u64, what: &str) -> Result<()> {
    if hits > n {
        return Err(Error::InvalidArgument(format!("{what} = {hits} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n}")));
    }
    Ok(())
}

/// `1 − C(n−c, k) / C(n, k)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<BigRational> {
    check_nk(n, c, k, "c")?;
    Ok(one_minus_ratio(n - c, n, k))
}

/// `1 − C(n−sp, k) / C(n, k)`.
pub fn secure_pass_at_k(n: u64, sp: u64, k: u64) -> Result<BigRational> {
    check_nk(n, sp, k, "sp")?;
    Ok(one_minus_ratio(n - sp, n, k))
}

/// Security among correct samples: 0 when `c = 0`; for `k > c ≥ 1` the whole
/// correct set is the only draw, giving 1 if any correct sample is secure.
pub fn sec_at_k_pass(c: u64, sp: u64, k: u64) -> Result<BigRational> {
    if sp > c {
        return Err(Error::InvalidArgument(format!("sp = {sp} exceeds c = {c}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let int = |v: i32| BigRational::from_integer(BigInt::from(v));
    if c == 0 {
        return Ok(int(0));
    }
    if k > c {
        return Ok(int(if sp >= 1 { 1 } else { 0 }));
    }
    Ok(one_minus_ratio(c - sp, c, k))
}

/// Oracle verdicts for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFlags {
    pub tokens: Vec<usize>,
    pub well_formed: bool,
    pub correct: bool,
    pub secure: bool,
}

impl SampleFlags {
    pub fn judge(vocab: &Vocabulary, program: &ToyProgram) -> Self {
        Self {
            tokens: program.tokens.clone(),
            well_formed: well_formed(vocab, program),
            correct: correctness_oracle(vocab, program) == Correctness::Pass,
            secure: security_oracle(vocab, program) == Security::Secure,
        }
    }
}

/// Secure programs over unique well-formed programs; `None` when no sample is well formed.
pub fn sven_sr(samples: &[SampleFlags]) -> Option<f64> {
    let mut seen = HashSet::new();
    let (mut unique, mut secure) = (0usize, 0usize);
    for s in samples.iter().filter(|s| s.well_formed) {
        if seen.insert(&s.tokens) {
            unique += 1;
            secure += s.secure as usize;
        }
    }
    (unique > 0).then(|| secure as f64 / unique as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub template: String,
    pub held_out: bool,
    pub n: usize,
    pub c: usize,
    pub sp: usize,
    pub samples: Vec<SampleFlags>,
}

impl ScenarioResult {
    pub fn from_samples(scenario: &str, template_id: &str, held_out: bool, samples: Vec<SampleFlags>) -> Self {
        let c = samples.iter().filter(|s| s.correct).count();
        let sp = samples.iter().filter(|s| s.correct && s.secure).count();
        Self {
            scenario: scenario.to_string(),
            template: template_id.to_string(),
            held_out,
            n: samples.len(),
            c,
            sp,
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    /// One entry per requested k, in order.
    pub pass: Vec<f64>,
    pub sec_pass: Vec<f64>,
    pub secure_pass: Vec<f64>,
    pub sven_sr: Option<f64>,
}

impl MetricRow {
    pub fn from_result(r: &ScenarioResult, ks: &[u64]) -> Result<Self> {
        let (n, c, sp) = (r.n as u64, r.c as u64, r.sp as u64);
        let mut row = MetricRow {
            scenario: r.scenario.clone(),
            pass: Vec::new(),
            sec_pass: Vec::new(),
            secure_pass: Vec::new(),
            sven_sr: sven_sr(&r.samples),
        };
        for &k in ks {
            row.pass.push(to_f64(&pass_at_k(n, c, k)?));
            row.sec_pass.push(to_f64(&sec_at_k_pass(c, sp, k)?));
            row.secure_pass.push(to_f64(&secure_pass_at_k(n, sp, k)?));
        }
        Ok(row)
    }

    /// Unweighted mean of `rows`; SVEN-SR averages the rows where it is defined.
    pub fn macro_average(label: &str, rows: &[MetricRow]) -> Option<Self> {
        let first = rows.first()?;
        let m = rows.len() as f64;
        let col = |f: &dyn Fn(&MetricRow) -> &Vec<f64>| -> Vec<f64> {
            (0..f(first).len())
                .map(|i| rows.iter().map(|r| f(r)[i]).sum::<f64>() / m)
                .collect()
        };
        let defined: Vec<f64> = rows.iter().filter_map(|r| r.sven_sr).collect();
        Some(MetricRow {
            scenario: label.to_string(),
            pass: col(&|r| &r.pass),
            sec_pass: col(&|r| &r.sec_pass),
            secure_pass: col(&|r| &r.secure_pass),
            sven_sr: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<u64>,
    pub rows: Vec<MetricRow>,
    pub macro_all: MetricRow,
    pub macro_seen: Option<MetricRow>,
    pub macro_held_out: Option<MetricRow>,
    /// Per-template macro rows, for the generalization split.
    pub by_template: Vec<(String, bool, MetricRow)>,
}

impl MetricReport {
    pub fn from_results(results: &[ScenarioResult], ks: &[u64]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::Empty("scenario results"));
        }
        let rows = results
            .iter()
            .map(|r| MetricRow::from_result(r, ks))
            .collect::<Result<Vec<_>>>()?;
        let pick = |held: bool| -> Vec<MetricRow> {
            results
                .iter()
                .zip(&rows)
                .filter(|(r, _)| r.held_out == held)
                .map(|(_, row)| row.clone())
                .collect()
        };
        let mut templates: Vec<(String, bool)> = Vec::new();
        for r in results {
            if !templates.iter().any(|(t, _)| t == &r.template) {
                templates.push((r.template.clone(), r.held_out));
            }
        }
        let by_template = templates
            .into_iter()
            .map(|(t, held)| {
                let sub: Vec<MetricRow> = results
                    .iter()
                    .zip(&rows)
                    .filter(|(r, _)| r.template == t)
                    .map(|(_, row)| row.clone())
                    .collect();
                let row = MetricRow::macro_average(&t, &sub).expect("template has rows");
                (t, held, row)
            })
            .collect();
        Ok(Self {
            ks: ks.to_vec(),
            macro_all: MetricRow::macro_average("macro", &rows).expect("non-empty"),
            macro_seen: MetricRow::macro_average("macro_seen", &pick(false)),
            macro_held_out: MetricRow::macro_average("macro_held_out", &pick(true)),
            rows,
            by_template,
        })
    }

    fn k_index(&self, k: u64) -> Result<usize> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .ok_or_else(|| Error::InvalidArgument(format!("k = {k} not in report")))
    }

    pub fn macro_secure_pass(&self, k: u64) -> Result<f64> {
        Ok(self.macro_all.secure_pass[self.k_index(k)?])
    }

    pub fn macro_pass(&self, k: u64) -> Result<f64> {
        Ok(self.macro_all.pass[self.k_index(k)?])
    }

    /// Tab-separated table: per-scenario rows, then the macro rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("scenario");
        for k in &self.ks {
            let _ = write!(out, "\tpass@{k}\tsec@{k}_pass\tsec-pass@{k}");
        }
        out.push_str("\tsven_sr\n");
        let extra = [&Some(self.macro_all.clone()), &self.macro_seen, &self.macro_held_out];
        let all = self.rows.iter().chain(extra.into_iter().flatten());
        for r in all {
            out.push_str(&r.scenario);
            for i in 0..self.ks.len() {
                let _ = write!(out, "\t{:.4}\t{:.4}\t{:.4}", r.pass[i], r.sec_pass[i], r.secure_pass[i]);
            }
            match r.sven_sr {
                Some(v) => {
                    let _ = writeln!(out, "\t{v:.4}");
                }
                None => out.push_str("\tundefined\n"),
            }
        }
        out
    }
}

/// One prompt to complete; the template determines which oracle judges it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub template: String,
    pub held_out: bool,
    pub prompt: ToyProgram,
}

/// `per_template` prompts for every template, seen and held-out.
pub fn eval_scenarios(vocab: &Vocabulary, per_template: usize, seed: u64) -> Result<Vec<Scenario>> {
    let mut out = Vec::new();
    for tpl in TEMPLATES {
        for i in 0..per_template {
            out.push(Scenario {
                name: format!("{}#{i}", tpl.id),
                template: tpl.id.to_string(),
                held_out: tpl.held_out,
                prompt: scenario_prompt(vocab, tpl.id, seed.wrapping_add(i as u64 * 7919))?,
            });
        }
    }
    Ok(out)
}

/// Samples `cfg.n_samples` completions per scenario and judges each one.
pub fn run_scenarios(
    model: &GuardModel,
    vocab: &Vocabulary,
    scenarios: &[Scenario],
    mode: Mode,
    bias: BiasMode,
    cfg: &DecodeConfig,
) -> Result<Vec<ScenarioResult>> {
    if scenarios.is_empty() {
        return Err(Error::Empty("scenarios"));
    }
    scenarios
        .iter()
        .map(|sc| {
            template(&sc.template)?;
            let gens = generate(model, &sc.prompt.tokens, mode, bias, cfg)?;
            let samples = gens
                .iter()
                .map(|g| SampleFlags::judge(vocab, &g.program(&sc.template)))
                .collect();
            Ok(ScenarioResult::from_samples(&sc.name, &sc.template, sc.held_out, samples))
        })
        .collect()
}

pub fn run_benchmark(
    model: &GuardModel,
    vocab: &Vocabulary,
    scenarios: &[Scenario],
    mode: Mode,
    bias: BiasMode,
    cfg: &DecodeConfig,
    ks: &[u64],
) -> Result<(MetricReport, Vec<ScenarioResult>)> {
    let results = run_scenarios(model, vocab, scenarios, mode, bias, cfg)?;
    Ok((MetricReport::from_results(&results, ks)?, results))
}
