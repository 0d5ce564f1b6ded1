//! `secguard` command-line entry point.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use secguard::aggregator::{flops_estimate, AggregationMode};
use secguard::backbone::{Backbone, Mode};
use secguard::bench::{guidance_overhead, latency_sweep, latency_tsv};
use secguard::config::RunConfig;
use secguard::diagnostics::{attention_delta, probe_report};
use secguard::inference::{generate, BiasMode};
use secguard::model::GuardModel;
use secguard::pipeline::{adapt, build_base, evaluate, ModeChoice, Variant};
use secguard::toylang::{
    correctness_oracle, scenario_prompt, security_oracle, Corpus, TokenId, Vocabulary, BOS,
};

#[derive(Parser)]
#[command(name = "secguard", version, about = "Multi-layer security guidance for a toy code model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for data, checkpoints, logs and manifests.
    #[arg(long, global = true, env = "SECGUARD_OUT_DIR")]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run seed: sets `train.seed` and `decode.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired corpus into `<out>/data`.
    GenData {
        #[arg(long)]
        n_pairs: Option<usize>,
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// Pretrain (or reuse) the base model, then train adapters and heads.
    Train(TrainArgs),
    /// Sample completions for one scenario prompt.
    Generate {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        prompt_seed: u64,
        /// Whitespace-separated prompt tokens, instead of a generated prompt.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, value_enum, default_value_t = VariantArg::Full)]
        variant: VariantArg,
        #[arg(long)]
        samples: Option<usize>,
        /// Refresh the bias every K tokens.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Layer-wise probes and differential layer-attention table.
    Probe {
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Probe the unadapted backbone instead of the adapted one.
        #[arg(long)]
        base: bool,
        #[arg(long)]
        permutations: Option<usize>,
    },
    /// Benchmark metrics for one or more variants.
    Eval {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "base,full,no-guidance")]
        variants: Vec<VariantArg>,
    },
    /// Re-scoring interval latency sweep and guided-decoding overhead.
    Bench {
        #[arg(long, default_value = "taint_sink")]
        scenario: String,
        #[arg(long)]
        t_gen: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Analytic aggregator + analyzer cost relative to the backbone.
    Flops {
        #[arg(long, default_value_t = 4)]
        n: u64,
        #[arg(long, default_value_t = 32)]
        layers: u64,
        #[arg(long, default_value_t = 64)]
        hidden: u64,
        #[arg(long, default_value_t = 64)]
        context: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    head_lr: Option<f64>,
    #[arg(long)]
    w_gen: Option<f64>,
    #[arg(long)]
    w_sec: Option<f64>,
    #[arg(long)]
    w_kl: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    aggregation: Option<AggregationMode>,
    #[arg(long)]
    n_agg_layers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Base,
    Full,
    NoGuidance,
    /// Guided with a fixed 0.5 strength instead of the prompt score.
    StaticScale,
    /// Guided with a random prior.
    RandomPrior,
}

impl VariantArg {
    fn variant(self) -> Variant {
        let adapted = |bias| Variant { mode: ModeChoice::Adapted, bias };
        match self {
            VariantArg::Base => Variant::BASE,
            VariantArg::Full => Variant::FULL,
            VariantArg::NoGuidance => Variant::NO_GUIDANCE,
            VariantArg::StaticScale => adapted(BiasMode::StaticScale(0.5)),
            VariantArg::RandomPrior => adapted(BiasMode::RandomPrior(0)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            VariantArg::Base => "base",
            VariantArg::Full => "full",
            VariantArg::NoGuidance => "no_guidance",
            VariantArg::StaticScale => "static_scale",
            VariantArg::RandomPrior => "random_prior",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

const DEFAULT_OUT: &str = "secguard-out";

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &common.config {
            cfg.apply_file(path)?;
        }
        for s in &common.sets {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = common.seed {
            cfg.pipeline.train.seed = seed;
            cfg.pipeline.decode.seed = seed;
        }
        let out = common
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data_dir(&self) -> PathBuf {
        self.path("data")
    }

    fn finish_config(&self, command: &str) -> Result<()> {
        self.cfg.validate()?;
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        self.cfg.write_manifest(&self.path(&format!("{command}.manifest")))?;
        Ok(())
    }

    fn vocab(&self) -> Result<Vocabulary> {
        let path = self.data_dir().join("vocab.txt");
        if path.exists() {
            Ok(Vocabulary::load(&path)?)
        } else {
            Ok(Vocabulary::standard())
        }
    }

    fn corpus(&self, vocab: &Vocabulary) -> Result<Corpus> {
        let dir = self.data_dir();
        if dir.join("train.jsonl").exists() {
            return Ok(Corpus::load(&dir)?);
        }
        eprintln!("no corpus in {}, generating one", dir.display());
        let corpus = self.cfg.pipeline.corpus(vocab)?;
        corpus.write(&dir, vocab)?;
        Ok(corpus)
    }

    fn model(&self) -> Result<GuardModel> {
        let path = self.path("model.ckpt");
        GuardModel::load_checked(&path, &self.cfg.pipeline.model)
            .with_context(|| format!("loading {} (run `secguard train` first)", path.display()))
    }

    /// Reuses `<out>/base.ckpt` when it was built from the same settings.
    fn base(&self, vocab: &Vocabulary) -> Result<Backbone> {
        let p = &self.cfg.pipeline;
        let key = serde_json::to_string(&(&p.model, &p.adapter, &p.pretrain))?;
        let (ckpt, key_path) = (self.path("base.ckpt"), self.path("base.key"));
        if ckpt.exists() && fs::read_to_string(&key_path).ok().as_deref() == Some(key.as_str()) {
            eprintln!("reusing base model {}", ckpt.display());
            return Ok(Backbone::load_checkpoint(&ckpt, &p.model)?);
        }
        eprintln!("pretraining base model on {} programs", p.pretrain.n_programs);
        let (base, losses) = build_base(p, vocab)?;
        for (e, l) in losses.iter().enumerate() {
            eprintln!("pretrain epoch {} loss {l:.4}", e + 1);
        }
        base.save_checkpoint(&ckpt)?;
        fs::write(&key_path, key)?;
        Ok(base)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("secguard: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut run = Run::new(&cli.common)?;
    match cli.command {
        Command::GenData { n_pairs, data_seed } => {
            let p = &mut run.cfg.pipeline;
            p.n_pairs = n_pairs.unwrap_or(p.n_pairs);
            p.data_seed = data_seed.unwrap_or(p.data_seed);
            run.finish_config("gen-data")?;
            let vocab = Vocabulary::standard();
            let corpus = run.cfg.pipeline.corpus(&vocab)?;
            corpus.write(&run.data_dir(), &vocab)?;
            println!(
                "wrote {} train / {} val / {} test pairs to {}",
                corpus.train.len(),
                corpus.val.len(),
                corpus.test.len(),
                run.data_dir().display()
            );
        }
        Command::Train(args) => {
            apply_train_args(&mut run.cfg, &args);
            run.finish_config("train")?;
            train(&run)?;
        }
        Command::Generate {
            scenario,
            prompt_seed,
            prompt,
            variant,
            samples,
            k,
        } => {
            let d = &mut run.cfg.pipeline.decode;
            d.n_samples = samples.unwrap_or(d.n_samples);
            d.rescore_interval = k.or(d.rescore_interval);
            run.finish_config("generate")?;
            let vocab = run.vocab()?;
            let model = run.model()?;
            let prompt = match prompt {
                Some(text) => parse_prompt(&vocab, &text)?,
                None => scenario_prompt(&vocab, &scenario, prompt_seed)?.tokens,
            };
            let v = variant.variant();
            let gens = generate(&model, &prompt, v.mode.into(), v.bias, &run.cfg.pipeline.decode)?;
            println!("prompt: {}", vocab.render(&prompt));
            for (i, g) in gens.iter().enumerate() {
                let program = g.program(&scenario);
                println!(
                    "[{i}] {} {} | {}",
                    security_oracle(&vocab, &program),
                    format!("{:?}", correctness_oracle(&vocab, &program)).to_lowercase(),
                    vocab.render(g.completion())
                );
            }
        }
        Command::Probe {
            split,
            base,
            permutations,
        } => {
            let pc = &mut run.cfg.probe;
            pc.permutations = permutations.unwrap_or(pc.permutations);
            run.finish_config("probe")?;
            let vocab = run.vocab()?;
            let corpus = run.corpus(&vocab)?;
            let model = run.model()?;
            let pairs = match split {
                SplitArg::Val => &corpus.val,
                SplitArg::Test => &corpus.test,
            };
            let mode = if base { Mode::Base } else { Mode::Adapted };
            let report = probe_report(&model.backbone, pairs, mode, &run.cfg.probe)?;
            let label = if base { "base" } else { "adapted" };
            fs::write(run.path("probe_layers.csv"), report.layers_csv())?;
            fs::write(run.path("probe_summary.tsv"), report.summary_tsv(label))?;
            print!("{}{}", report.layers_csv(), report.summary_tsv(label));
            match attention_delta(&model, pairs, Mode::Adapted) {
                Ok(delta) => {
                    fs::write(run.path("attention_delta.csv"), delta.to_csv())?;
                    println!(
                        "attention delta: {} pairs, {:.1}% with nonzero rows",
                        delta.rows.len(),
                        100.0 * delta.nonzero_fraction(0.0)
                    );
                }
                Err(e) => eprintln!("skipping attention delta: {e}"),
            }
        }
        Command::Eval { variants } => {
            run.finish_config("eval")?;
            let vocab = run.vocab()?;
            let model = run.model()?;
            for v in variants {
                let (report, _) = evaluate(&run.cfg.pipeline, &model, &vocab, v.variant())?;
                let tsv = report.to_tsv();
                fs::write(run.path(&format!("metrics_{}.tsv", v.name())), &tsv)?;
                println!("== {}\n{tsv}", v.name());
            }
        }
        Command::Bench {
            scenario,
            t_gen,
            repetitions,
        } => {
            let b = &mut run.cfg.bench;
            b.t_gen = t_gen.unwrap_or(b.t_gen);
            b.repetitions = repetitions.unwrap_or(b.repetitions);
            run.finish_config("bench")?;
            let vocab = run.vocab()?;
            let model = run.model()?;
            let prompt = scenario_prompt(&vocab, &scenario, 0)?.tokens;
            let rows = latency_sweep(&model, &prompt, Mode::Adapted, &run.cfg.bench, &run.cfg.pipeline.decode)?;
            let tsv = latency_tsv(&rows);
            fs::write(run.path("latency.tsv"), &tsv)?;
            print!("{tsv}");
            let prompts: Vec<Vec<_>> = run
                .cfg
                .pipeline
                .scenarios(&vocab)?
                .into_iter()
                .map(|s| s.prompt.tokens)
                .collect();
            let o = guidance_overhead(&model, &prompts, &run.cfg.pipeline.decode, run.cfg.bench.repetitions)?;
            let c = model.model_config();
            let f = flops_estimate(
                model.aggregator.n_layers as u64,
                c.n_layers as u64,
                c.d_model as u64,
                c.max_len as u64,
            )?;
            let text = format!(
                "plain_s\tguided_s\toverhead_pct\tflops_ratio_pct\n{:.4}\t{:.4}\t{:.2}\t{:.2}\n",
                o.plain_seconds,
                o.guided_seconds,
                o.overhead_pct,
                100.0 * f.ratio_f64()
            );
            fs::write(run.path("overhead.tsv"), &text)?;
            print!("{text}");
        }
        Command::Flops {
            n,
            layers,
            hidden,
            context,
        } => {
            let f = flops_estimate(n, layers, hidden, context)?;
            println!("F_agg = {} (coefficient 4(2N+1) = {})", f.f_agg, 4 * (2 * n + 1));
            println!("F_ana = {}", f.f_ana);
            println!("F_llm = {}", f.f_llm);
            println!(
                "ratio = {}/{} = {:.4}%",
                f.ratio.numer(),
                f.ratio.denom(),
                100.0 * f.ratio_f64()
            );
        }
    }
    Ok(())
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) {
    let p = &mut cfg.pipeline;
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    p.train.epochs = a.epochs.unwrap_or(p.train.epochs);
    set(&mut p.train.lr, a.lr);
    set(&mut p.train.head_lr, a.head_lr);
    set(&mut p.weights.w_gen, a.w_gen);
    set(&mut p.weights.w_sec, a.w_sec);
    set(&mut p.weights.w_kl, a.w_kl);
    set(&mut p.weights.margin, a.margin);
    p.heads.aggregation = a.aggregation.unwrap_or(p.heads.aggregation);
    p.heads.n_agg_layers = a.n_agg_layers.unwrap_or(p.heads.n_agg_layers);
}

fn train(run: &Run) -> Result<()> {
    let vocab = run.vocab()?;
    let corpus = run.corpus(&vocab)?;
    let base = run.base(&vocab)?;
    let mut log = String::new();
    let (model, report) = adapt(&run.cfg.pipeline, &base, &corpus, |e| {
        println!("{}", e.line());
        log.push_str(&e.line());
        log.push('\n');
    })?;
    fs::write(run.path("train_log.txt"), log)?;
    model.save(&run.path("model.ckpt"))?;
    fs::write(run.path("prior.tsv"), model.prior.export_table(&vocab))?;
    println!(
        "saved {} after {} optimizer steps",
        run.path("model.ckpt").display(),
        report.optimizer_steps
    );
    Ok(())
}

fn parse_prompt(vocab: &Vocabulary, text: &str) -> Result<Vec<TokenId>> {
    let mut tokens = vec![BOS];
    for word in text.split_whitespace() {
        let id = vocab.id(word)?;
        if id == BOS && tokens.len() == 1 {
            continue;
        }
        tokens.push(id);
    }
    if tokens.len() < 2 {
        bail!("prompt has no tokens");
    }
    Ok(tokens)
}
