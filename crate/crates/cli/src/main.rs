use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use longform_rnnt::checkpoint::Checkpoint;
use longform_rnnt::config::{strategy_from_cli, ExperimentConfig};
use longform_rnnt::corpus::{load_corpus, save_corpus, SamplingStrategy, Utterance};
use longform_rnnt::decoder::{decode_utterance, greedy_decode, token_text, DecodeRecord, SearchLimits};
use longform_rnnt::eval::{corpus_wer, format_table, write_wer_csv};
use longform_rnnt::longform::inference_state;
use longform_rnnt::recipe::{generate_corpus, select_training_data};
use longform_rnnt::trainer::{run_training, write_metrics_csv, TestSet, Trainer};
use longform_rnnt::Error;

/// File in a data directory listing test-set names in evaluation order.
const TEST_SET_INDEX: &str = "test_sets.txt";
const TRAIN_DIR: &str = "train";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const METRICS_FILE: &str = "metrics.csv";

#[derive(Parser)]
#[command(name = "lfrnnt", version, about = "Long-form RNN-T experiments on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, test and long-form corpora.
    Datagen(DatagenArgs),
    /// Train a model; writes checkpoint.bin and metrics.csv.
    Train(TrainArgs),
    /// Decode a manifest to JSON lines.
    Decode(DecodeArgs),
    /// Score hypotheses against a manifest.
    Eval(EvalArgs),
    /// Summarize a checkpoint, or print the default config.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// INI experiment config; omitted keys take the defaults listed under --help.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        Ok(match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        })
    }
}

#[derive(Args)]
struct DatagenArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    /// Overrides [data] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory written by `datagen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides [train] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides [train] steps (total, counting resumed steps).
    #[arg(long)]
    steps: Option<u64>,
    /// zero | rss | rsp
    #[arg(long)]
    state_strategy: Option<String>,
    /// With rss: also sample prediction-network states.
    #[arg(long)]
    rss_full: bool,
    /// uniform-domain | uniform-subdomain | count-weighted
    #[arg(long)]
    sampling: Option<String>,
    /// Continue from a checkpoint; its config (including the step target,
    /// so pass --steps to extend) replaces --config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest file or corpus directory.
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to the checkpoint's [decode] beam_width; 1 selects greedy decoding.
    #[arg(long)]
    beam: Option<usize>,
    /// Defaults to the checkpoint's [decode] adaptive_margin.
    #[arg(long)]
    margin: Option<f64>,
    /// Output file; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON lines written by `decode`.
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Test-set label in the report.
    #[arg(long, default_value = "test")]
    name: String,
    /// CSV report; only the table is printed if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: Option<PathBuf>,
    /// Print the default config instead.
    #[arg(long)]
    defaults: bool,
}

fn ensure_empty_dir(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!("{} exists and is not empty (use --force)", dir.display())).into());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn datagen(args: DatagenArgs) -> anyhow::Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    ensure_empty_dir(&args.out, args.force)?;
    let corpus = generate_corpus(&cfg.data, cfg.data.build_domains()?)?;
    save_corpus(&args.out.join(TRAIN_DIR), &corpus.train)?;
    let mut index = String::new();
    for set in &corpus.tests {
        save_corpus(&args.out.join(&set.name), &set.utterances)?;
        index.push_str(&set.name);
        index.push('\n');
        log::info!("{}: {} utterances", set.name, set.utterances.len());
    }
    fs::write(args.out.join(TEST_SET_INDEX), index)?;
    fs::write(args.out.join("config.ini"), cfg.to_ini_string())?;
    log::info!("train: {} utterances", corpus.train.len());
    Ok(())
}

fn load_test_sets(data: &Path) -> anyhow::Result<Vec<TestSet>> {
    let index = data.join(TEST_SET_INDEX);
    let names = fs::read_to_string(&index).map_err(|e| Error::Data(format!("{}: {e}", index.display())))?;
    names
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|name| {
            Ok(TestSet {
                name: name.to_string(),
                utterances: load_corpus(&data.join(name))?,
            })
        })
        .collect()
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let (mut cfg, mut trainer) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let cfg = ckpt.config.clone();
            (cfg, Some(ckpt.into_trainer()?))
        }
        None => (args.config.load()?, None),
    };
    if let Some(seed) = args.seed {
        if trainer.is_some() {
            bail!(Error::Config("--seed cannot change a resumed run".into()));
        }
        cfg.train.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(s) = &args.state_strategy {
        cfg.train.state_strategy = strategy_from_cli(s, args.rss_full)?;
    }
    if let Some(s) = &args.sampling {
        cfg.train.sampling = SamplingStrategy::parse(s)?;
    }
    cfg.validate()?;
    let mut trainer = match trainer.take() {
        Some(mut t) => {
            if t.config.state_strategy != cfg.train.state_strategy {
                bail!(Error::Config("--state-strategy cannot change a resumed run".into()));
            }
            t.config = cfg.train.clone();
            t
        }
        None => {
            ensure_empty_dir(&args.out, args.force)?;
            Trainer::new(cfg.model.clone(), cfg.train.clone())?
        }
    };
    fs::create_dir_all(&args.out)?;

    let domains = cfg.data.build_domains()?;
    let train_utts = load_corpus(&args.data.join(TRAIN_DIR))?;
    let names: Vec<&str> = cfg.train_domains.iter().map(String::as_str).collect();
    let data = select_training_data(&domains, &train_utts, &names)?;
    let tests = load_test_sets(&args.data)?;

    let metrics_path = args.out.join(METRICS_FILE);
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    let resumed = trainer.step > 0 && metrics_path.exists();
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(resumed)
        .write(true)
        .truncate(!resumed)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut header = !resumed;
    run_training(&mut trainer, &data, &tests, |t, rows| {
        write_metrics_csv(&mut metrics, rows, header)?;
        header = false;
        metrics.flush().map_err(|e| Error::Data(format!("flushing metrics: {e}")))?;
        Checkpoint::from_trainer(t, &cfg).save(&ckpt_path)
    })?;
    log::info!("done at step {}; wrote {} and {}", trainer.step, ckpt_path.display(), metrics_path.display());
    Ok(())
}

fn check_compatible(ckpt: &Checkpoint, utts: &[Utterance]) -> anyhow::Result<()> {
    let m = &ckpt.model.config;
    for u in utts {
        if let Some(&t) = u.tokens.iter().find(|&&t| !m.is_label(t)) {
            bail!(Error::Config(format!(
                "vocab mismatch: utterance {} has token {t}, model labels are 1..={}",
                u.id, m.vocab_size
            )));
        }
        if u.features.cols() != m.feature_dim {
            bail!(Error::Config(format!(
                "utterance {} has {}-dim features, model expects {}",
                u.id,
                u.features.cols(),
                m.feature_dim
            )));
        }
    }
    Ok(())
}

fn decode(args: DecodeArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let utts = load_corpus(&args.manifest)?;
    check_compatible(&ckpt, &utts)?;
    let limits = SearchLimits {
        beam_width: args.beam.unwrap_or(ckpt.config.decode.beam_width),
        adaptive_margin: args.margin.unwrap_or(ckpt.config.decode.adaptive_margin),
        ..ckpt.config.decode
    };
    limits.validate()?;
    let model = &ckpt.model;
    let init = inference_state(&ckpt.config.train.state_strategy, &model.config);
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let start = Instant::now();
    let (mut frames, mut peak) = (0usize, 0usize);
    for (i, u) in utts.iter().enumerate() {
        let r = if limits.beam_width == 1 {
            greedy_decode(model, &u.features, &init)?
        } else {
            decode_utterance(model, &u.features, &init, &limits)?
        };
        frames += u.features.rows();
        peak = peak.max(r.peak_hypotheses);
        let record = DecodeRecord {
            utterance_id: u.id.clone(),
            text: token_text(&r.tokens),
            tokens: r.tokens,
            log_prob: r.log_prob,
            frames: r.frames,
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
        let secs = start.elapsed().as_secs_f64();
        log::info!(
            "[{}/{}] {} frames={} peak_hyps={} ({:.0} input frames/s)",
            i + 1,
            utts.len(),
            u.id,
            u.features.rows(),
            r.peak_hypotheses,
            frames as f64 / secs.max(1e-9)
        );
    }
    out.flush()?;
    log::info!(
        "decoded {} utterances; peak hypotheses {} (bound {})",
        utts.len(),
        peak,
        limits.beam_width * (limits.expansion_cap + 1)
    );
    Ok(())
}

fn read_hypotheses(path: &Path) -> anyhow::Result<Vec<DecodeRecord>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DecodeRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let hyps = read_hypotheses(&args.hyps)?;
    let utts = load_corpus(&args.manifest)?;
    let by_id: std::collections::HashMap<&str, &DecodeRecord> =
        hyps.iter().map(|h| (h.utterance_id.as_str(), h)).collect();
    let missing: Vec<&str> = utts
        .iter()
        .map(|u| u.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        for id in &missing {
            eprintln!("missing hypothesis: {id}");
        }
        bail!(Error::Data(format!("{} utterances have no hypothesis", missing.len())));
    }
    let pairs: Vec<(&[usize], &[usize])> = utts
        .iter()
        .map(|u| (u.tokens.as_slice(), by_id[u.id.as_str()].tokens.as_slice()))
        .collect();
    let rows = corpus_wer(&pairs).rows(&args.name);
    if let Some(p) = &args.out {
        write_wer_csv(File::create(p).with_context(|| format!("creating {}", p.display()))?, &rows)?;
    }
    print!("{}", format_table(&rows));
    Ok(())
}

fn inspect(args: InspectArgs) -> anyhow::Result<()> {
    if args.defaults {
        print!("{}", ExperimentConfig::default().to_ini_string());
        return Ok(());
    }
    let Some(path) = args.checkpoint else {
        bail!(Error::Config("give a checkpoint path or --defaults".into()));
    };
    let ckpt = Checkpoint::load(&path)?;
    println!("checkpoint {}", path.display());
    println!("step {}", ckpt.step);
    println!("strategy {}", ckpt.config.train.state_strategy.kind.as_str());
    println!("parameters {}", ckpt.model.params.num_params());
    println!("state pool {}/{}", ckpt.pool.len(), ckpt.pool.capacity());
    for (name, m) in ckpt.model.params.named_tensors() {
        println!("  {name:<28} {}x{}", m.rows(), m.cols());
    }
    println!();
    print!("{}", ckpt.config.to_ini_string());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Divergence(_)) => 4,
        Some(_) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let defaults = format!(
        "Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.\n\n\
         Config keys and defaults (`lfrnnt inspect --defaults`):\n\n{}",
        ExperimentConfig::default().to_ini_string()
    );
    let matches = Cli::command().after_long_help(defaults).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
