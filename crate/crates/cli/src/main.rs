use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relprop::diagnostics::{full_loss_gradcheck, tiny_config, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
use relprop::episodes::{generate_synthetic, load_dataset, sample_episode, Dataset, SyntheticConfig};
use relprop::graph::AggregationMode;
use relprop::metrics::{csv_row, write_jsonl, CSV_HEADER};
use relprop::train::{eval_seed, evaluate, fit, Checkpoint, TrainConfig, Trainer, FIDELITY_LR, TEST_PURPOSE};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "relprop", version, about = "Few-shot multi-label intent detection with relation graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, validate every epoch and report test metrics of the best epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on episodes drawn from the given domains.
    Eval(EvalArgs),
    /// Write a synthetic corpus and its label catalog.
    SynthGen(SynthArgs),
    /// Print sampled episodes as JSON lines.
    SampleEpisodes(SampleArgs),
    /// Finite-difference check of the full objective on a tiny episode.
    Gradcheck(GradcheckArgs),
    /// Train once per shot count and write test metrics as CSV.
    ShotSweep(SweepArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// JSON-lines corpus; a synthetic corpus is generated when omitted.
    #[arg(long, requires = "catalog")]
    data: Option<PathBuf>,
    /// Label catalog mapping each label to its description.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// JSON synthetic-corpus settings used when no corpus is given.
    #[arg(long, conflicts_with = "data")]
    synth_config: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        match (&self.data, &self.catalog) {
            (Some(d), Some(c)) => Ok(load_dataset(d, c)?),
            _ => {
                let cfg: SyntheticConfig = match &self.synth_config {
                    Some(p) => read_json(p)?,
                    None => SyntheticConfig::default(),
                };
                Ok(generate_synthetic(&cfg)?)
            }
        }
    }
}

fn parse_mode<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Command-line overrides of the training configuration.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON training configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small learning rate preset for pretrained encoders.
    #[arg(long)]
    fidelity: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    attn_hidden: Option<usize>,
    #[arg(long)]
    attn_rows: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tasks_per_epoch: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    n_query: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// raw-sum | masked-softmax
    #[arg(long, value_parser = parse_mode::<AggregationMode>)]
    aggregation: Option<AggregationMode>,
    /// exact | overlap
    #[arg(long, value_parser = parse_mode::<relprop::loss::RelationMode>)]
    relation_mode: Option<relprop::loss::RelationMode>,
    /// all-labels | sampled-class
    #[arg(long, value_parser = parse_mode::<relprop::loss::VoteMode>)]
    vote_mode: Option<relprop::loss::VoteMode>,
    /// pairwise-logits | cosine
    #[arg(long, value_parser = parse_mode::<relprop::graph::EdgeFeatureMode>)]
    edge_features: Option<relprop::graph::EdgeFeatureMode>,
    #[arg(long)]
    use_class_descriptions: Option<bool>,
    #[arg(long)]
    force_top1: Option<bool>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c: TrainConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => TrainConfig::default(),
        };
        if self.fidelity {
            c.lr = FIDELITY_LR;
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            alpha, beta, layers, hidden, attn_hidden, attn_rows, lr, warmup, weight_decay, epochs, tasks_per_epoch,
            eval_episodes, n_way, k_shot, n_query, seed, aggregation, relation_mode, vote_mode, edge_features,
            use_class_descriptions, force_top1
        );
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Domain to sample from; repeatable. Defaults to the test domains of
    /// the checkpoint's split.
    #[arg(long = "domain")]
    domains: Vec<String>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluation seed; defaults to the run's test seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-episode metrics as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON synthetic-corpus settings.
    #[arg(long)]
    synth_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "domain")]
    domains: Vec<String>,
    #[arg(long, default_value_t = 3)]
    count: usize,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 16)]
    n_query: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = GRADCHECK_STEP)]
    step: f64,
    #[arg(long, default_value_t = GRADCHECK_TOLERANCE)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 1)]
    k_min: usize,
    #[arg(long, default_value_t = 11)]
    k_max: usize,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let dataset = args.data.load()?;
    for s in dataset.report() {
        info!("domain {}: {} classes, {} instances", s.domain, s.classes, s.instances);
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_file(&args.out.join("config.json"), serde_json::to_string_pretty(&config)? + "\n")?;
    let mut trainer = Trainer::for_dataset(config, &dataset)?;
    let outcome = fit(&mut trainer, &dataset, Some(&args.out))?;
    let report = &outcome.report;

    let mut metrics = Vec::new();
    write_jsonl(&mut metrics, &report.test.per_episode, &report.test.aggregate)?;
    write_file(&args.out.join("test_metrics.jsonl"), metrics)?;
    let mut csv = format!("epoch,mean_loss,mean_support_loss,mean_query_loss,{CSV_HEADER}\n");
    for e in &report.epochs {
        csv += &format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            e.epoch,
            e.mean_loss,
            e.mean_support_loss,
            e.mean_query_loss,
            csv_row("valid", &e.valid)
        );
    }
    csv += &format!(",,,,{}\n", csv_row("test", &report.test.aggregate));
    write_file(&args.out.join("summary.csv"), csv)?;

    let agg = &report.test.aggregate;
    println!(
        "best epoch {}: test auc {} macro-f1 {:.4} over {} episodes",
        report.best_epoch,
        agg.auc_mean.map_or("undefined".into(), |a| format!("{a:.4}")),
        agg.macro_f1_mean,
        agg.episodes
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut config = ckpt.config.clone();
    if let Some(n) = args.episodes {
        config.eval_episodes = n;
    }
    let dataset = args.data.load()?;
    let domains = if args.domains.is_empty() {
        config.resolve_split(&dataset.domains)?.test
    } else {
        args.domains.clone()
    };
    let seed = args.seed.unwrap_or_else(|| eval_seed(config.seed, TEST_PURPOSE));
    let model = ckpt.into_model()?;
    let report = evaluate(&model, &dataset, &domains, &config, config.eval_episodes, seed)?;
    if let Some(path) = &args.out {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &report.per_episode, &report.aggregate)?;
        write_file(path, buf)?;
    }
    println!("{CSV_HEADER}\n{}", csv_row(&domains.join("+"), &report.aggregate));
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &args.synth_config {
        Some(p) => read_json(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dataset = generate_synthetic(&cfg)?;
    fs::create_dir_all(&args.out_dir)?;
    dataset.save(&args.out_dir.join("data.jsonl"), &args.out_dir.join("catalog.json"))?;
    for s in dataset.report() {
        println!("{}\t{} classes\t{} instances", s.domain, s.classes, s.instances);
    }
    Ok(())
}

fn run_sample(args: SampleArgs) -> Result<()> {
    let dataset = args.data.load()?;
    let domains = if args.domains.is_empty() {
        dataset.domains.clone()
    } else {
        args.domains.clone()
    };
    let spec = relprop::episodes::EpisodeSpec {
        n_way: args.n_way,
        k_shot: args.k_shot,
        n_query: args.n_query,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for _ in 0..args.count {
        let episode = sample_episode(&dataset, &domains, &spec, &mut rng)?;
        serde_json::to_writer(&mut out, &episode)?;
        writeln!(out)?;
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut failed = false;
    for mode in [AggregationMode::MaskedSoftmax, AggregationMode::RawSum] {
        let report = full_loss_gradcheck(&tiny_config(mode), args.seed, args.step)?;
        let ok = report.max_rel_error <= args.threshold;
        failed |= !ok;
        println!(
            "{mode:?}: max relative error {:.3e} over {} entries ({} at kinks skipped) {}",
            report.max_rel_error,
            report.checked,
            report.excluded,
            if ok { "ok" } else { "FAILED" }
        );
    }
    if failed {
        bail!("gradient check exceeded threshold {}", args.threshold);
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    if args.k_min == 0 || args.k_min > args.k_max {
        bail!("need 1 <= k-min <= k-max");
    }
    let base = args.config.resolve()?;
    let dataset = args.data.load()?;
    let mut csv = String::from("k_shot,best_epoch,auc_mean,auc_std,macro_f1_mean,macro_f1_std\n");
    for k in args.k_min..=args.k_max {
        let config = TrainConfig { k_shot: k, ..base.clone() };
        let mut trainer = Trainer::for_dataset(config, &dataset)?;
        let report = fit(&mut trainer, &dataset, None)?.report;
        let agg = &report.test.aggregate;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let row = format!(
            "{k},{},{},{},{:.6},{:.6}",
            report.best_epoch,
            opt(agg.auc_mean),
            opt(agg.auc_std),
            agg.macro_f1_mean,
            agg.macro_f1_std
        );
        println!("{row}");
        csv += &row;
        csv.push('\n');
    }
    write_file(&args.out, csv)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::SynthGen(a) => run_synth(a),
        Command::SampleEpisodes(a) => run_sample(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::ShotSweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
